//! DDPM variance schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schedule family. Cosine is the default; linear is kept for cross-checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Cosine
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Precomputed beta/alpha/alpha-bar tables for `T` steps. Steps are
/// 1-indexed in the public API to match the sampling loop (`t` runs from `T`
/// down to 1); `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas through step `t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Signal-to-noise ratio sqrt(abar / (1 - abar)) at step `t`.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        (ab / (1.0 - ab)).sqrt()
    }
}

const LINEAR_BETA_MIN: f64 = 1e-4;
const LINEAR_BETA_MAX: f64 = 0.02;
const COSINE_S: f64 = 0.008;
const BETA_CLIP: f64 = 0.999;

/// Build the beta/alpha/alpha-bar tables.
///
/// Linear: betas linearly spaced over [1e-4, 0.02] (a single step takes the
/// low endpoint). Cosine: the standard squared-cosine alpha-bar construction
/// with offset 0.008 and betas clipped at 0.999.
pub fn make_schedule(t_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    LINEAR_BETA_MIN
                } else {
                    LINEAR_BETA_MIN
                        + (LINEAR_BETA_MAX - LINEAR_BETA_MIN) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let v = ((t / t_steps as f64 + COSINE_S) / (1.0 + COSINE_S))
                    * std::f64::consts::FRAC_PI_2;
                v.cos().powi(2)
            };
            let f0 = f(0.0);
            (1..=t_steps)
                .map(|t| {
                    let ab_t = f(t as f64) / f0;
                    let ab_prev = f(t as f64 - 1.0) / f0;
                    (1.0 - ab_t / ab_prev).min(BETA_CLIP)
                })
                .collect()
        }
    };

    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }

    // Invariants.
    for (i, b) in betas.iter().enumerate() {
        if !(*b > 0.0 && *b < 1.0) {
            return Err(Error::Config(format!("beta[{}] = {b} outside (0, 1)", i + 1)));
        }
    }
    for i in 1..t_steps {
        if alpha_bars[i] >= alpha_bars[i - 1] {
            return Err(Error::Config(format!(
                "alpha_bar not strictly decreasing at step {}",
                i + 1
            )));
        }
    }

    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_linear_endpoint() {
        let s = make_schedule(1, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[1e-4]);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn t1000_alpha_bar_decreasing_and_small() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(1000, kind).unwrap();
            for t in 2..=1000 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
            assert!(s.alpha_bar(1000) < 0.01, "{kind:?}: {}", s.alpha_bar(1000));
        }
    }

    #[test]
    fn alpha_bar_recurrence_exact() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for t_steps in [1usize, 2, 7, 100] {
                let s = make_schedule(t_steps, kind).unwrap();
                for t in 1..=t_steps {
                    let expect = s.alpha_bar(t - 1) * s.alpha(t);
                    assert_eq!(s.alpha_bar(t), expect, "{kind:?} T={t_steps} t={t}");
                }
            }
        }
    }

    #[test]
    fn snr_strictly_decreasing() {
        let s = make_schedule(100, ScheduleKind::Cosine).unwrap();
        for t in 2..=100 {
            assert!(s.snr(t) < s.snr(t - 1));
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(make_schedule(0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("cosine".parse::<ScheduleKind>().unwrap(), ScheduleKind::Cosine);
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }
}
