//! Adaptive intra-distillation strength.
//!
//! With target strength `α > 1`, sentinels `q > p > 0` and `N` total updates:
//!
//! ```text
//! α'(x) = α · (p·x / N)^γ   for x < N/p
//!       = α                 for x ≥ N/p
//! γ     = ln(1/α) / ln(p/q)
//! ```
//!
//! so `α'` rises from 0, crosses 1 at `x = N/q` and reaches `α` at `x = N/p`.
//! For `α ≤ 1` the strength is the constant `α`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    alpha: f64,
    p: f64,
    q: f64,
    n_total: usize,
}

impl AlphaSchedule {
    pub fn new(alpha: f64, p: f64, q: f64, n_total: usize) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Schedule(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(p > 0.0) || !p.is_finite() || !q.is_finite() {
            return Err(Error::Schedule(format!("sentinel p must be > 0, got {p}")));
        }
        if !(q > p) {
            return Err(Error::Schedule(format!(
                "sentinel q must exceed p (q = {q}, p = {p})"
            )));
        }
        if n_total == 0 {
            return Err(Error::Schedule("total steps must be >= 1".into()));
        }
        Ok(Self {
            alpha,
            p,
            q,
            n_total,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    /// Whether the power ramp is active (`α > 1`).
    pub fn is_adaptive(&self) -> bool {
        self.alpha > 1.0
    }

    /// Ramp exponent. Undefined for the constant case `α ≤ 1`.
    pub fn gamma(&self) -> Result<f64> {
        if !self.is_adaptive() {
            return Err(Error::Schedule(format!(
                "gamma is undefined for alpha = {} <= 1 (constant schedule)",
                self.alpha
            )));
        }
        Ok((1.0 / self.alpha).ln() / (self.p / self.q).ln())
    }

    /// Strength after `x` optimizer updates. Stays at `α` past `N`.
    pub fn alpha_at(&self, x: usize) -> f64 {
        let Ok(gamma) = self.gamma() else {
            return self.alpha;
        };
        let progress = self.p * x as f64 / self.n_total as f64;
        if progress >= 1.0 {
            self.alpha
        } else {
            self.alpha * progress.powf(gamma)
        }
    }

    /// `samples` evenly spaced `(x, α'(x))` points over `[0, N]`.
    pub fn curve(&self, samples: usize) -> Vec<(usize, f64)> {
        match samples {
            0 => Vec::new(),
            1 => vec![(0, self.alpha_at(0))],
            _ => (0..samples)
                .map(|i| {
                    let x = (i as f64 * self.n_total as f64 / (samples - 1) as f64).round() as usize;
                    (x, self.alpha_at(x))
                })
                .collect(),
        }
    }
}

/// Strength used by the intra-distillation trainer at each update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strength {
    Constant(f64),
    Adaptive(AlphaSchedule),
}

impl Strength {
    pub fn at(&self, x: usize) -> f64 {
        match self {
            Strength::Constant(a) => *a,
            Strength::Adaptive(s) => s.alpha_at(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference_settings() -> AlphaSchedule {
        AlphaSchedule::new(5.0, 5.0, 10.0, 50_000).unwrap()
    }

    #[test]
    fn gamma_examples() {
        let g = reference_settings().gamma().unwrap();
        assert_relative_eq!(g, 0.2f64.ln() / 0.5f64.ln(), epsilon = 1e-15);
        assert!((g - 2.3219).abs() < 1e-4);

        let linear = AlphaSchedule::new(5.0, 2.0, 10.0, 100).unwrap();
        assert_relative_eq!(linear.gamma().unwrap(), 1.0, epsilon = 1e-15);

        let e = std::f64::consts::E;
        let s = AlphaSchedule::new(e, 1.0, e, 100).unwrap();
        assert_relative_eq!(s.gamma().unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gamma_undefined_when_constant() {
        let s = AlphaSchedule::new(1.0, 5.0, 10.0, 100).unwrap();
        assert!(s.gamma().is_err());
        assert_eq!(s.alpha_at(0), 1.0);
        assert_eq!(s.alpha_at(77), 1.0);
    }

    #[test]
    fn anchors() {
        let s = reference_settings();
        assert_eq!(s.alpha_at(0), 0.0);
        assert_relative_eq!(s.alpha_at(5_000), 1.0, epsilon = 1e-12);
        assert_eq!(s.alpha_at(10_000), 5.0);
        assert_eq!(s.alpha_at(50_000), 5.0);
        assert_eq!(s.alpha_at(80_000), 5.0);
    }

    #[test]
    fn non_integer_sentinel() {
        let s = AlphaSchedule::new(5.0, 6.25, 10.0, 50_000).unwrap();
        assert_eq!(s.alpha_at(8_000), 5.0);
        assert!(s.alpha_at(7_999) < 5.0);
        assert_relative_eq!(s.alpha_at(5_000), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_sentinels() {
        assert!(AlphaSchedule::new(5.0, 10.0, 10.0, 10).is_err());
        assert!(AlphaSchedule::new(5.0, 0.0, 10.0, 10).is_err());
        assert!(AlphaSchedule::new(5.0, 5.0, 10.0, 0).is_err());
        assert!(AlphaSchedule::new(-1.0, 5.0, 10.0, 10).is_err());
    }

    #[test]
    fn curve_rows() {
        let rows = reference_settings().curve(11);
        assert_eq!(rows.len(), 11);
        assert_eq!(rows[1].0, 5_000);
        assert_relative_eq!(rows[1].1, 1.0, epsilon = 1e-12);
        assert_eq!(rows[2], (10_000, 5.0));
    }

    #[test]
    fn monotone_on_grid() {
        let s = AlphaSchedule::new(7.0, 3.0, 12.0, 1_000).unwrap();
        let vals: Vec<f64> = (0..=1_200).map(|x| s.alpha_at(x)).collect();
        assert!(vals.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn linear_when_q_is_alpha_p() {
        let s = AlphaSchedule::new(4.0, 2.5, 10.0, 10_000).unwrap();
        let ramp_end = 4_000;
        for x in 1..ramp_end - 1 {
            let d2 = s.alpha_at(x + 1) - 2.0 * s.alpha_at(x) + s.alpha_at(x - 1);
            assert!(d2.abs() < 1e-9, "x = {x}: {d2}");
        }
    }
}
