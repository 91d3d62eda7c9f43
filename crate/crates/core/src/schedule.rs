//! Noise schedules and time samplers.

use rand::Rng as _;

use crate::rng::Rng;
use crate::{Error, Result};

/// Smallest diffusion time handed to [`NoiseSchedule::diffusion_weight`] by the
/// trainer and evaluator. With `alpha0 = 1` the weight `-1/t` diverges at 0.
pub const MIN_TIME: f64 = 1e-6;

/// A strictly decreasing keep-probability `alpha_t` with `alpha_1 = 0`.
pub trait NoiseSchedule {
    /// Keep probability at `t = 0`.
    fn alpha0(&self) -> f64;

    fn alpha(&self, t: f64) -> Result<f64>;

    fn alpha_prime(&self, t: f64) -> Result<f64>;

    /// The MDM loss coefficient `alpha'_t / (1 - alpha_t)`, or `-1` under the
    /// variance-reduced objective (only defined for `alpha0 = 1`).
    fn diffusion_weight(&self, t: f64, variance_reduced: bool) -> Result<f64> {
        check_time(t)?;
        if variance_reduced {
            if self.alpha0() != 1.0 {
                return Err(Error::Config(format!(
                    "the variance-reduced weight needs alpha0 = 1, got {}",
                    self.alpha0()
                )));
            }
            return Ok(-1.0);
        }
        let denom = 1.0 - self.alpha(t)?;
        let num = self.alpha_prime(t)?;
        if num == 0.0 {
            return Ok(0.0);
        }
        if denom <= 0.0 {
            return Err(Error::Singularity { t });
        }
        Ok(num / denom)
    }
}

/// `alpha_t = alpha0 * (1 - t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLinearSchedule {
    alpha0: f64,
}

impl LogLinearSchedule {
    pub fn new(alpha0: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha0) {
            return Err(Error::Config(format!("alpha0 must lie in [0, 1], got {alpha0}")));
        }
        Ok(Self { alpha0 })
    }
}

impl NoiseSchedule for LogLinearSchedule {
    fn alpha0(&self) -> f64 {
        self.alpha0
    }

    fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha0 * (1.0 - t))
    }

    fn alpha_prime(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(-self.alpha0)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t });
    }
    Ok(())
}

/// Stratified times `t_i ~ U[(i-1)/n, i/n]`, returned in ascending order.
pub fn low_discrepancy_times(n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Empty("low-discrepancy sampler needs at least one time"));
    }
    let width = 1.0 / n as f64;
    Ok((0..n)
        .map(|i| {
            let u: f64 = rng.random();
            ((i as f64 + u) * width).min(1.0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn alpha_examples() {
        assert_eq!(LogLinearSchedule::new(1.0).unwrap().alpha(0.25).unwrap(), 0.75);
        assert_eq!(LogLinearSchedule::new(0.5).unwrap().alpha(1.0).unwrap(), 0.0);
        let a = LogLinearSchedule::new(0.125).unwrap().alpha(0.2).unwrap();
        assert!((a - 0.1).abs() < 1e-15);
        assert!(LogLinearSchedule::new(1.0).unwrap().alpha(1.5).is_err());
        assert!(LogLinearSchedule::new(1.2).is_err());
    }

    #[test]
    fn weight_examples() {
        let s = LogLinearSchedule::new(1.0).unwrap();
        for &t in &[0.1, 0.37, 0.5, 1.0] {
            let w = s.diffusion_weight(t, false).unwrap();
            assert!((w + 1.0 / t).abs() < 1e-12);
            assert_eq!(s.diffusion_weight(t, true).unwrap(), -1.0);
        }
        assert!(matches!(s.diffusion_weight(0.0, false), Err(Error::Singularity { .. })));

        let zero = LogLinearSchedule::new(0.0).unwrap();
        for &t in &[0.0, 0.3, 1.0] {
            assert_eq!(zero.diffusion_weight(t, false).unwrap(), 0.0);
        }
        let half = LogLinearSchedule::new(0.5).unwrap();
        assert!(matches!(half.diffusion_weight(0.3, true), Err(Error::Config(_))));
        let w = half.diffusion_weight(0.2, false).unwrap();
        assert!((w - (-0.5 / (1.0 - 0.5 * 0.8))).abs() < 1e-15);
    }

    #[test]
    fn low_discrepancy_examples() {
        let mut rng = seeded(4);
        let one = low_discrepancy_times(1, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&one[0]));
        for _ in 0..100 {
            let t = low_discrepancy_times(4, &mut rng).unwrap();
            assert!((0.25..=0.5).contains(&t[1]));
            assert!(t.windows(2).all(|w| w[0] <= w[1]));
        }
        let t = low_discrepancy_times(1000, &mut rng).unwrap();
        let mean = t.iter().sum::<f64>() / 1000.0;
        assert!((mean - 0.5).abs() <= 0.01);
        assert!(low_discrepancy_times(0, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn unmasking_probability_is_valid(a0 in 0.0f64..=1.0, s in 0.0f64..1.0, dt in 1e-6f64..1.0) {
            let t = (s + dt).min(1.0);
            prop_assume!(s < t);
            let sch = LogLinearSchedule::new(a0).unwrap();
            let (a_s, a_t) = (sch.alpha(s).unwrap(), sch.alpha(t).unwrap());
            prop_assert!((0.0..=a0).contains(&a_s));
            if a_t < 1.0 {
                let p = (a_s - a_t) / (1.0 - a_t);
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }

        #[test]
        fn weight_is_non_positive(a0 in 0.0f64..=1.0, t in 1e-6f64..=1.0) {
            let w = LogLinearSchedule::new(a0).unwrap().diffusion_weight(t, false).unwrap();
            prop_assert!(w <= 0.0);
        }
    }
}
