//! Cost-of-AoI functions.
//!
//! A cost function `v(h)` maps the Age of Information `h` of a user to a
//! per-slot penalty. Only a closed family of non-decreasing, polynomially
//! bounded shapes is supported so the series kernel can certify truncation
//! tails analytically.

use serde::{Deserialize, Serialize};

use crate::error::CostError;

/// Non-decreasing per-slot cost `v(h)` of an AoI value `h`.
///
/// Every variant evaluates to `0` at `h = 0`; AoI states reachable in the
/// model always have `h >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum CostFunction {
    /// `v(h) = h`.
    Linear,
    /// `v(h) = 1` once `h >= threshold`, else `0`.
    StepViolation { threshold: u64 },
    /// `v(h) = coefficient * h^degree`.
    Polynomial { degree: u32, coefficient: f64 },
    /// `v(h) = value` for every `h >= 1`.
    Constant { value: f64 },
}

/// Pointwise envelope `v(h) <= constant * (1 + h)^degree`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthBound {
    pub degree: u32,
    pub constant: f64,
}

impl GrowthBound {
    pub fn at(&self, h: u64) -> f64 {
        self.constant * (1.0 + h as f64).powi(self.degree as i32)
    }
}

impl CostFunction {
    pub fn linear() -> Self {
        CostFunction::Linear
    }

    pub fn step(threshold: u64) -> Self {
        CostFunction::StepViolation { threshold }
    }

    pub fn polynomial(degree: u32, coefficient: f64) -> Self {
        CostFunction::Polynomial {
            degree,
            coefficient,
        }
    }

    pub fn constant(value: f64) -> Self {
        CostFunction::Constant { value }
    }

    /// Checks the parameters of the function itself.
    pub fn check(&self) -> Result<(), CostError> {
        match *self {
            CostFunction::Linear => Ok(()),
            CostFunction::StepViolation { threshold } => {
                if threshold == 0 {
                    Err(CostError::InvalidCost(
                        "step_violation threshold must be a positive integer".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            CostFunction::Polynomial {
                degree,
                coefficient,
            } => {
                if degree == 0 {
                    Err(CostError::InvalidCost(
                        "polynomial degree must be at least 1".into(),
                    ))
                } else if !(coefficient.is_finite() && coefficient > 0.0) {
                    Err(CostError::InvalidCost(
                        "polynomial coefficient must be positive and finite".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            CostFunction::Constant { value } => {
                if value.is_finite() && value >= 0.0 {
                    Ok(())
                } else {
                    Err(CostError::InvalidCost(
                        "constant cost must be non-negative and finite".into(),
                    ))
                }
            }
        }
    }

    #[inline]
    pub fn evaluate(&self, h: u64) -> f64 {
        if h == 0 {
            return 0.0;
        }
        match *self {
            CostFunction::Linear => h as f64,
            CostFunction::StepViolation { threshold } => {
                if h >= threshold {
                    1.0
                } else {
                    0.0
                }
            }
            CostFunction::Polynomial {
                degree,
                coefficient,
            } => coefficient * (h as f64).powi(degree as i32),
            CostFunction::Constant { value } => value,
        }
    }

    /// `sum_{h=1}^{n} v(h)`.
    pub fn prefix_sum(&self, n: u64) -> f64 {
        match *self {
            CostFunction::Linear => {
                let n = n as f64;
                n * (n + 1.0) / 2.0
            }
            CostFunction::StepViolation { threshold } => {
                if n >= threshold {
                    (n - threshold + 1) as f64
                } else {
                    0.0
                }
            }
            CostFunction::Constant { value } => value * n as f64,
            CostFunction::Polynomial { .. } => {
                // Ascending order keeps the partial sums accurate.
                (1..=n).map(|h| self.evaluate(h)).sum()
            }
        }
    }

    pub fn growth_bound(&self) -> GrowthBound {
        match *self {
            CostFunction::Linear => GrowthBound {
                degree: 1,
                constant: 1.0,
            },
            CostFunction::StepViolation { .. } => GrowthBound {
                degree: 0,
                constant: 1.0,
            },
            CostFunction::Polynomial {
                degree,
                coefficient,
            } => GrowthBound {
                degree,
                constant: coefficient,
            },
            CostFunction::Constant { value } => GrowthBound {
                degree: 0,
                constant: value,
            },
        }
    }

    /// Multiplies the cost by `factor > 0`, when the family allows it.
    pub fn scaled(&self, factor: f64) -> Option<Self> {
        match *self {
            CostFunction::Polynomial {
                degree,
                coefficient,
            } => Some(CostFunction::Polynomial {
                degree,
                coefficient: coefficient * factor,
            }),
            CostFunction::Constant { value } => Some(CostFunction::Constant {
                value: value * factor,
            }),
            CostFunction::Linear => Some(CostFunction::Polynomial {
                degree: 1,
                coefficient: factor,
            }),
            CostFunction::StepViolation { .. } => None,
        }
    }

    /// Stable identity usable as a hash key (floats by bit pattern).
    pub fn key(&self) -> (u8, u64, u64) {
        match *self {
            CostFunction::Linear => (0, 0, 0),
            CostFunction::StepViolation { threshold } => (1, threshold, 0),
            CostFunction::Polynomial {
                degree,
                coefficient,
            } => (2, degree as u64, coefficient.to_bits()),
            CostFunction::Constant { value } => (3, 0, value.to_bits()),
        }
    }
}

fn check_probability(name: &'static str, p: f64) -> Result<(), CostError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(CostError::InvalidProbability { name, value: p })
    }
}

/// Accepts `(v, lambda, eps)` iff both series `sum eps^k v(k)` and
/// `sum (1-lambda)^k v(k)` converge, i.e. `lambda > 0` and `eps < 1` for
/// every built-in family.
pub fn validate(v: &CostFunction, lambda: f64, eps: f64) -> Result<(), CostError> {
    check_probability("lambda", lambda)?;
    check_probability("epsilon", eps)?;
    v.check()?;
    if lambda <= 0.0 {
        return Err(CostError::RejectedParameters(
            "lambda = 0: sum of (1 - lambda)^k v(k) diverges".into(),
        ));
    }
    if eps >= 1.0 {
        return Err(CostError::RejectedParameters(
            "epsilon = 1: sum of epsilon^k v(k) diverges".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn builtins() -> Vec<CostFunction> {
        vec![
            CostFunction::Linear,
            CostFunction::step(1),
            CostFunction::step(10),
            CostFunction::polynomial(1, 0.5),
            CostFunction::polynomial(3, 2.0),
            CostFunction::constant(0.0),
            CostFunction::constant(4.5),
        ]
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(CostFunction::step(10).evaluate(9), 0.0);
        assert_eq!(CostFunction::step(10).evaluate(10), 1.0);
        assert_eq!(CostFunction::Linear.evaluate(7), 7.0);
        for h in [0, 1, 5, 1000] {
            assert_eq!(CostFunction::constant(0.0).evaluate(h), 0.0);
        }
        for v in builtins() {
            assert_eq!(v.evaluate(0), 0.0);
        }
    }

    #[test]
    fn non_decreasing_up_to_ten_thousand() {
        for v in builtins() {
            let mut prev = v.evaluate(0);
            for h in 1..=10_000 {
                let cur = v.evaluate(h);
                assert!(cur >= prev, "{v:?} decreases at {h}");
                prev = cur;
            }
        }
    }

    #[test]
    fn step_is_exact_indicator() {
        let v = CostFunction::step(17);
        for h in 0..200u64 {
            let expect = if h >= 17 { 1.0 } else { 0.0 };
            assert_eq!(v.evaluate(h).to_bits(), f64::to_bits(expect));
        }
    }

    #[test]
    fn growth_bound_holds() {
        for v in builtins() {
            let g = v.growth_bound();
            for h in (0..5_000).chain([100_000, 1_000_000]) {
                assert!(v.evaluate(h) <= g.at(h) * (1.0 + 1e-12), "{v:?} at {h}");
            }
        }
    }

    #[test]
    fn prefix_sums_match_direct_sums() {
        for v in builtins() {
            for n in [0u64, 1, 2, 9, 10, 11, 57] {
                let direct: f64 = (1..=n).map(|h| v.evaluate(h)).sum();
                assert!((v.prefix_sum(n) - direct).abs() <= 1e-9 * direct.max(1.0));
            }
        }
    }

    #[test]
    fn validate_examples() {
        assert!(validate(&CostFunction::Linear, 0.5, 0.25).is_ok());
        assert!(validate(&CostFunction::Linear, 1.0, 0.0).is_ok());
        assert!(matches!(
            validate(&CostFunction::Linear, 0.0, 0.5),
            Err(CostError::RejectedParameters(_))
        ));
        assert!(matches!(
            validate(&CostFunction::Linear, 0.5, 1.0),
            Err(CostError::RejectedParameters(_))
        ));
        assert!(matches!(
            validate(&CostFunction::Linear, 1.5, 0.0),
            Err(CostError::InvalidProbability { name: "lambda", .. })
        ));
        assert!(matches!(
            validate(&CostFunction::step(0), 0.5, 0.5),
            Err(CostError::InvalidCost(_))
        ));
    }

    proptest! {
        #[test]
        fn polynomial_monotone(deg in 1u32..5, c in 0.01f64..10.0, h in 0u64..10_000) {
            let v = CostFunction::polynomial(deg, c);
            prop_assert!(v.evaluate(h + 1) >= v.evaluate(h));
        }
    }
}
