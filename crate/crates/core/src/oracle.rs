//! Closed-form calculators: birthday-paradox port collision probabilities,
//! NAT population mixing, expected aggregate improvement and the
//! synchronization-safety predicate.
//!
//! Everything here is pure. The probability routines are generic over
//! [`Real`] so they can be evaluated in `f32` or `f64`; the safety predicate
//! is generic over any signed ordered scalar, which covers integer
//! microseconds, floating milliseconds and exact rationals alike.

use num_rational::Ratio;
use num_traits::Signed;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Size of the 16-bit port space.
pub const PORT_SPACE: u32 = 65_536;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("invalid birthday parameters: {0}")]
    InvalidParams(String),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(String),
}

/// Parameters of a birthday-paradox traversal.
///
/// `m_open` ports are opened behind the endpoint-dependent NAT while the
/// counterpart probes `k_probe` distinct ports out of `port_space`. A
/// `k_probe` of zero is accepted and yields probability zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BirthdayParams {
    pub m_open: u32,
    pub k_probe: u32,
    pub port_space: u32,
    pub both_edm: bool,
}

impl BirthdayParams {
    pub fn new(m_open: u32, k_probe: u32) -> Self {
        BirthdayParams {
            m_open,
            k_probe,
            port_space: PORT_SPACE,
            both_edm: false,
        }
    }

    pub fn with_port_space(mut self, n: u32) -> Self {
        self.port_space = n;
        self
    }

    pub fn both_edm(mut self, both: bool) -> Self {
        self.both_edm = both;
        self
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let n = self.port_space;
        if n == 0 {
            return Err(OracleError::InvalidParams("port space must be positive".into()));
        }
        if self.m_open == 0 || self.m_open > n {
            return Err(OracleError::InvalidParams(format!(
                "m_open = {} must lie in [1, {n}]",
                self.m_open
            )));
        }
        if self.k_probe > n {
            return Err(OracleError::InvalidParams(format!(
                "k_probe = {} must lie in [0, {n}]",
                self.k_probe
            )));
        }
        Ok(())
    }
}

/// Which closed form to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BirthdayMethod {
    /// Hypergeometric (one side EDM) or the `m·k/N²` product (both EDM).
    Default,
    /// `1 − (1 − m/N)^k`: probes drawn independently with replacement.
    Independent,
    /// Both sides random: `1 − (1 − 1/N²)^(m·k)`.
    BothRandomExact,
}

/// Probability that the birthday traversal produces at least one usable
/// port collision.
///
/// With one endpoint-dependent side this is the hypergeometric tail
/// `1 − C(N−m, k) / C(N, k)`, evaluated as the log of the product
/// `∏ (1 − m / (N − i))` for `i < k` so it never overflows at `N = 2^16`.
/// With both sides endpoint-dependent the product approximation `m·k/N²`
/// is returned; see [`birthday_success_prob_with`] for the alternatives.
pub fn birthday_success_prob<F: Real>(params: &BirthdayParams) -> Result<F, OracleError> {
    birthday_success_prob_with(params, BirthdayMethod::Default)
}

pub fn birthday_success_prob_with<F: Real>(params: &BirthdayParams, method: BirthdayMethod) -> Result<F, OracleError> {
    params.validate()?;
    let n = params.port_space as u64;
    let m = params.m_open as u64;
    let k = params.k_probe as u64;
    if k == 0 {
        return Ok(F::zero());
    }
    let nf = F::of(n as f64);
    let mf = F::of(m as f64);
    let kf = F::of(k as f64);
    let p = match method {
        BirthdayMethod::Default if params.both_edm => mf * kf / (nf * nf),
        BirthdayMethod::Default => hypergeometric_hit(n, m, k),
        BirthdayMethod::Independent => {
            // 1 − exp(k · ln(1 − m/N))
            let miss = kf * (-(mf / nf)).ln_1p();
            -miss.exp_m1()
        }
        BirthdayMethod::BothRandomExact => {
            let per_pair = (-(F::one() / (nf * nf))).ln_1p();
            -(mf * kf * per_pair).exp_m1()
        }
    };
    Ok(p.max(F::zero()).min(F::one()))
}

fn hypergeometric_hit<F: Real>(n: u64, m: u64, k: u64) -> F {
    if n - m < k {
        // Every k-subset intersects the open set.
        return F::one();
    }
    let mf = F::of(m as f64);
    let mut log_miss = F::zero();
    for i in 0..k {
        let remaining = F::of((n - i) as f64);
        log_miss = log_miss + (-(mf / remaining)).ln_1p();
    }
    -log_miss.exp_m1()
}

/// Exact rational hypergeometric hit probability, usable for small port
/// spaces (the numerators stay inside `u128` for `N` up to a few hundred
/// when `k` is small, and for any `k` when `N ≤ 64`).
pub fn birthday_success_exact(params: &BirthdayParams) -> Result<Ratio<u128>, OracleError> {
    params.validate()?;
    if params.both_edm {
        return Err(OracleError::InvalidParams(
            "exact rational form only covers the single-EDM case".into(),
        ));
    }
    let n = params.port_space as u128;
    let m = params.m_open as u128;
    let k = params.k_probe as u128;
    if k == 0 {
        return Ok(Ratio::from_integer(0));
    }
    if n - m < k {
        return Ok(Ratio::from_integer(1));
    }
    let mut miss = Ratio::from_integer(1u128);
    for i in 0..k {
        miss *= Ratio::new(n - m - i, n - i);
    }
    Ok(Ratio::from_integer(1) - miss)
}

/// Share of peer pairs by NAT class when each peer independently sits
/// behind an endpoint-dependent NAT with probability `p_edm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationMix<F> {
    pub p_edm: F,
    pub eim_eim: F,
    pub mixed: F,
    pub edm_edm: F,
}

impl<F: Real> PopulationMix<F> {
    pub fn total(&self) -> F {
        self.eim_eim + self.mixed + self.edm_edm
    }
}

pub fn population_mix<F: Real>(p_edm: F) -> Result<PopulationMix<F>, OracleError> {
    check_probability(p_edm)?;
    let q = F::one() - p_edm;
    let two = F::one() + F::one();
    Ok(PopulationMix {
        p_edm,
        eim_eim: q * q,
        mixed: two * p_edm * q,
        edm_edm: p_edm * p_edm,
    })
}

/// Aggregate success-rate gain (in probability points) when the birthday
/// technique rescues mixed EIM/EDM pairs at `per_class_gain`.
pub fn expected_improvement<F: Real>(mix: &PopulationMix<F>, per_class_gain: F) -> Result<F, OracleError> {
    check_probability(mix.mixed)?;
    check_probability(per_class_gain)?;
    Ok(mix.mixed * per_class_gain)
}

fn check_probability<F: Real>(p: F) -> Result<(), OracleError> {
    if p.is_nan() || p < F::zero() || p > F::one() {
        return Err(OracleError::InvalidProbability(format!("{p:?}")));
    }
    Ok(())
}

/// Timing geometry of one synchronized dial.
///
/// `timing_error` is the signed difference between the instants the two
/// first packets leave their NATs; `one_way` is the NAT-to-NAT latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncGeometry<T> {
    pub timing_error: T,
    pub one_way: T,
}

/// True when each first packet leaves its NAT strictly before the
/// counterpart's first packet arrives there, i.e. `|ε| < d`.
///
/// Equality counts as unsafe.
pub fn sync_safe<T>(g: &SyncGeometry<T>) -> bool
where
    T: Signed + PartialOrd + Copy,
{
    if g.one_way < T::zero() {
        return false;
    }
    g.timing_error.abs() < g.one_way
}
