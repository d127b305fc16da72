use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use punchsim::campaign::{
    aggregate, export, import_jsonl, preset, preset_json, preset_names, run_campaign, CampaignError, ExportFormat,
    Report, ResultSet, ScenarioConfig, TransportWeights,
};
use punchsim::dcutr::{BirthdayOptions, TransportFilter};
use punchsim::oracle::{
    birthday_success_prob_with, expected_improvement, population_mix, sync_safe, BirthdayMethod, BirthdayParams,
};
use punchsim::SyncGeometryUs;

#[derive(Parser, Debug)]
#[command(name = "punchsim", version, about = "Relay-coordinated NAT hole punching simulator")]
struct Cli {
    /// Decimal places for printed numbers.
    #[arg(long, global = true, default_value_t = 4)]
    precision: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a campaign and write results.jsonl, results.csv and report.json.
    Run(RunArgs),
    /// Closed-form calculators.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Re-aggregate a results.jsonl file.
    Report(ReportArgs),
    /// List the bundled scenarios.
    Presets {
        /// Print one preset's JSON.
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    scenario: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Master seed; falls back to PUNCHSIM_SEED, then the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long, default_value = "punchsim-out")]
    out: PathBuf,
    /// Restrict every punch to one transport.
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Comma-separated strategies to switch on.
    #[arg(long, value_enum, value_delimiter = ',')]
    enable: Vec<Feature>,
    /// Birthday probing as `m,k`: sockets opened and ports probed.
    #[arg(long, value_parser = parse_birthday)]
    birthday: Option<BirthdayOptions>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransportArg {
    Tcp,
    Quic,
    Any,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Feature {
    Reversal,
    AlternateRoles,
    RefinedRtt,
    Birthday,
    TtlPriming,
}

#[derive(Subcommand, Debug)]
enum OracleCmd {
    /// Probability that birthday probing finds a port collision.
    Birthday {
        #[arg(long)]
        m: u32,
        #[arg(long)]
        k: u32,
        #[arg(long, default_value_t = 65_536)]
        n: u32,
        /// Both NATs endpoint-dependent.
        #[arg(long)]
        both_edm: bool,
        /// Use 1 − (1 − m/N)^k instead of the exact form.
        #[arg(long)]
        independent: bool,
    },
    /// Pair-class shares for an endpoint-dependent fraction `p`.
    Mix {
        #[arg(long)]
        p: f64,
    },
    /// Success-rate gain from rescuing mixed pairs at rate `gain`.
    Improvement {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        gain: f64,
    },
    /// Whether a dial with timing error `eps` over one-way delay `d` (both
    /// in ms) is safe.
    SyncSafe {
        #[arg(long, allow_hyphen_values = true)]
        eps: f64,
        #[arg(long)]
        d: f64,
    },
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    min_network_samples: u64,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

enum CliError {
    Config(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<CampaignError> for CliError {
    fn from(e: CampaignError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn parse_birthday(s: &str) -> Result<BirthdayOptions, String> {
    let (m, k) = s.split_once(',').ok_or("expected m,k")?;
    let m = m.trim().parse().map_err(|e| format!("m: {e}"))?;
    let k = k.trim().parse().map_err(|e| format!("k: {e}"))?;
    Ok(BirthdayOptions { m_open: m, k_probe: k })
}

/// Fixed-point with `prec` decimals, or scientific notation for small
/// non-zero magnitudes.
fn num(v: f64, prec: usize) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.prec$e}")
    } else {
        format!("{v:.prec$}")
    }
}

fn opt_num(v: Option<f64>, prec: usize) -> String {
    v.map(|v| num(v, prec)).unwrap_or_else(|| "undefined".into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let prec = cli.precision;
    match cli.command {
        Command::Run(args) => run(args, prec),
        Command::Oracle(cmd) => oracle(cmd, prec),
        Command::Report(args) => report(args, prec),
        Command::Presets { show } => presets(show),
    }
}

fn load_scenario(args: &RunArgs) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match (&args.scenario, &args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            ScenarioConfig::from_json(&text)?
        }
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(CliError::Config("one of --scenario or --preset is required".into())),
    };
    let env_seed = match std::env::var("PUNCHSIM_SEED") {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|e| CliError::Config(format!("PUNCHSIM_SEED: {e}")))?,
        ),
        Err(_) => None,
    };
    if let Some(seed) = args.seed.or(env_seed) {
        cfg.seed = seed;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(t) = args.transport {
        cfg.transport_filter_weights = TransportWeights::only(match t {
            TransportArg::Tcp => TransportFilter::Tcp,
            TransportArg::Quic => TransportFilter::Quic,
            TransportArg::Any => TransportFilter::Any,
        });
    }
    let o = &mut cfg.options;
    for f in &args.enable {
        match f {
            Feature::Reversal => o.enable_reversal = true,
            Feature::AlternateRoles => o.alternate_roles = true,
            Feature::RefinedRtt => o.refined_rtt = true,
            Feature::TtlPriming => o.ttl_priming = true,
            Feature::Birthday => {
                o.birthday.get_or_insert(BirthdayOptions {
                    m_open: 256,
                    k_probe: 256,
                });
            }
        }
    }
    if args.birthday.is_some() {
        o.birthday = args.birthday;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs, prec: usize) -> Result<(), CliError> {
    let cfg = load_scenario(&args)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    let rs = pool.install(|| run_campaign(&cfg))?;
    let report = aggregate(&rs, cfg.min_network_samples).map_err(|e| CliError::Config(e.to_string()))?;

    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    for (name, format) in [
        ("results.jsonl", ExportFormat::JsonLines),
        ("results.csv", ExportFormat::Csv),
    ] {
        let path = args.out.join(name);
        export(&rs, format, &path).map_err(|e| io_err(&path, e))?;
    }
    let path = args.out.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;

    let label = if cfg.name.is_empty() { "scenario" } else { &cfg.name };
    println!("{label}: {} trials, seed {}", cfg.trials, cfg.seed);
    print_summary(&report, &rs, prec);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn print_summary(report: &Report, rs: &ResultSet, prec: usize) {
    println!("digest          {}", rs.scenario_digest);
    println!(
        "success rate    {} (n = {})",
        opt_num(report.success_rate, prec),
        report.success_eligible
    );
    let ns = &report.network_success;
    println!(
        "per network     {} ± {} over {} networks",
        opt_num(ns.mean, prec),
        opt_num(ns.std, prec),
        ns.networks
    );
    println!("first attempt   {}", opt_num(report.first_attempt_share, prec));
    println!(
        "  low noise     {}",
        opt_num(report.first_attempt_share_low_noise, prec)
    );
    for (t, s) in &report.per_transport {
        println!(
            "{:<15} {} (n = {})",
            format!("transport {t}"),
            opt_num(s.rate, prec),
            s.eligible
        );
    }
    if let Some(q) = &report.latency_ratio {
        println!(
            "latency ratio   p10 {} p50 {} p90 {}",
            num(q.p10, prec),
            num(q.p50, prec),
            num(q.p90, prec)
        );
    }
    println!("outcomes");
    for (o, n) in &report.outcomes {
        println!("  {o:<21} {n}");
    }
}

fn oracle(cmd: OracleCmd, prec: usize) -> Result<(), CliError> {
    let cfg_err = |e: punchsim::oracle::OracleError| CliError::Config(e.to_string());
    match cmd {
        OracleCmd::Birthday {
            m,
            k,
            n,
            both_edm,
            independent,
        } => {
            let params = BirthdayParams::new(m, k).with_port_space(n).both_edm(both_edm);
            let method = if independent {
                BirthdayMethod::Independent
            } else {
                BirthdayMethod::Default
            };
            let p: f64 = birthday_success_prob_with(&params, method).map_err(cfg_err)?;
            println!("{}", num(p, prec));
        }
        OracleCmd::Mix { p } => {
            let mix = population_mix(p).map_err(cfg_err)?;
            println!("eim_eim {}", num(mix.eim_eim, prec));
            println!("mixed {}", num(mix.mixed, prec));
            println!("edm_edm {}", num(mix.edm_edm, prec));
        }
        OracleCmd::Improvement { p, gain } => {
            let mix = population_mix(p).map_err(cfg_err)?;
            println!("{}", num(expected_improvement(&mix, gain).map_err(cfg_err)?, prec));
        }
        OracleCmd::SyncSafe { eps, d } => {
            if !(eps.is_finite() && d.is_finite()) {
                return Err(CliError::Config("--eps and --d must be finite".into()));
            }
            let g = SyncGeometryUs {
                timing_error: (eps * 1e3).round() as i64,
                one_way: (d * 1e3).round() as i64,
            };
            println!("{}", sync_safe(&g));
        }
    }
    Ok(())
}

fn report(args: ReportArgs, prec: usize) -> Result<(), CliError> {
    let rs = import_jsonl(&args.input).map_err(|e| match e.kind() {
        io::ErrorKind::InvalidData => CliError::Config(format!("{}: {e}", args.input.display())),
        _ => io_err(&args.input, e),
    })?;
    let report = aggregate(&rs, args.min_network_samples).map_err(|e| CliError::Config(e.to_string()))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("{} results", rs.results.len());
        print_summary(&report, &rs, prec);
    }
    Ok(())
}

fn presets(show: Option<String>) -> Result<(), CliError> {
    match show {
        Some(name) => {
            let json = preset_json(&name).ok_or_else(|| CliError::Config(format!("unknown preset {name:?}")))?;
            print!("{json}");
        }
        None => {
            for name in preset_names() {
                let cfg = preset(name)?;
                println!("{name:<16} {}", cfg.description);
            }
        }
    }
    Ok(())
}
