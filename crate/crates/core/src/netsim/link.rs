use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::time::micros;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayDistribution {
    Constant,
    /// Normal, resampled until non-negative.
    Normal,
    /// Log-normal with the configured mean and standard deviation.
    LogNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayModel {
    pub mean: Duration,
    pub jitter_std: Duration,
    pub distribution: DelayDistribution,
}

impl DelayModel {
    pub fn constant(mean: Duration) -> Self {
        DelayModel {
            mean,
            jitter_std: Duration::ZERO,
            distribution: DelayDistribution::Constant,
        }
    }

    pub fn normal(mean: Duration, jitter_std: Duration) -> Self {
        DelayModel {
            mean,
            jitter_std,
            distribution: DelayDistribution::Normal,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        if self.jitter_std.is_zero() || self.distribution == DelayDistribution::Constant {
            return self.mean;
        }
        let mean = micros(self.mean) as f64;
        let std = micros(self.jitter_std) as f64;
        let us = match self.distribution {
            DelayDistribution::Constant => unreachable!(),
            DelayDistribution::Normal => {
                let normal = Normal::new(mean, std).expect("finite normal parameters");
                loop {
                    let v = normal.sample(rng);
                    if v >= 0.0 {
                        break v;
                    }
                }
            }
            DelayDistribution::LogNormal => {
                if mean <= 0.0 {
                    0.0
                } else {
                    let sigma2 = (1.0 + (std * std) / (mean * mean)).ln();
                    let mu = mean.ln() - sigma2 / 2.0;
                    LogNormal::new(mu, sigma2.sqrt())
                        .expect("finite log-normal parameters")
                        .sample(rng)
                }
            }
        };
        Duration::from_micros(us.round() as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }
}

/// Bidirectional link with independent per-direction delay models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub forward: DelayModel,
    pub backward: DelayModel,
    pub loss_prob: f64,
    pub hops_forward: u32,
    pub hops_backward: u32,
}

/// Local segment hop count when not configured otherwise.
pub const DEFAULT_LOCAL_HOPS: u32 = 2;
/// Core path hop count when not configured otherwise.
pub const DEFAULT_CORE_HOPS: u32 = 10;

impl LinkModel {
    pub fn symmetric(delay: DelayModel, hops: u32) -> Self {
        LinkModel {
            forward: delay,
            backward: delay,
            loss_prob: 0.0,
            hops_forward: hops,
            hops_backward: hops,
        }
    }

    pub fn constant(one_way: Duration, hops: u32) -> Self {
        Self::symmetric(DelayModel::constant(one_way), hops)
    }

    pub fn asymmetric(forward: Duration, backward: Duration, hops: u32) -> Self {
        LinkModel {
            forward: DelayModel::constant(forward),
            backward: DelayModel::constant(backward),
            loss_prob: 0.0,
            hops_forward: hops,
            hops_backward: hops,
        }
    }

    pub fn with_loss(mut self, loss_prob: f64) -> Self {
        self.loss_prob = loss_prob;
        self
    }

    pub fn delay(&self, dir: Direction) -> &DelayModel {
        match dir {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }

    pub fn hops(&self, dir: Direction) -> u32 {
        match dir {
            Direction::Forward => self.hops_forward,
            Direction::Backward => self.hops_backward,
        }
    }

    pub fn reversed(&self) -> Self {
        LinkModel {
            forward: self.backward,
            backward: self.forward,
            loss_prob: self.loss_prob,
            hops_forward: self.hops_backward,
            hops_backward: self.hops_forward,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(format!("loss probability {} outside [0, 1]", self.loss_prob));
        }
        if self.hops_forward == 0 || self.hops_backward == 0 {
            return Err("links need at least one hop per direction".into());
        }
        Ok(())
    }

    /// Whether a traversal is lost. Consumes randomness only for
    /// probabilities strictly between 0 and 1.
    pub(crate) fn lost<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        if self.loss_prob <= 0.0 {
            false
        } else if self.loss_prob >= 1.0 {
            true
        } else {
            rng.random::<f64>() < self.loss_prob
        }
    }
}

/// Draws one traversal delay for `dir`.
pub fn sample_delay<R: Rng + ?Sized>(link: &LinkModel, dir: Direction, rng: &mut R) -> Duration {
    link.delay(dir).sample(rng)
}
