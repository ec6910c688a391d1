//! Evaluation-budget estimation from hypergeometric success probability.
//!
//! Sampling k configurations without replacement from an effective space of
//! |C| candidates containing |I| ideal ones, the chance of hitting at least
//! one ideal candidate is hypergeometric. The minimum budget is the smallest
//! k whose success probability meets the confidence level; when filtering
//! has pruned the space below the allowance for discarded optima, no budget
//! can be predicted and the outcome is explicitly undefined.

use serde::Serialize;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Loop-based log-sum is used up to this k; beyond it the gamma form wins.
const LOG_SUM_LOOP_MAX: u128 = 4096;

pub const DEFAULT_IDEAL_FRACTION: f64 = 0.01;
pub const DEFAULT_ALLOWANCE: f64 = 0.05;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;
pub const DEFAULT_MAX_BUDGET: u64 = 30;

#[derive(Debug, Error)]
pub enum BudgetError {
    #[error("invalid budget inputs: {0}")]
    Invalid(String),
}

/// Knobs for the budget search. Defaults: top 1% ideal, 5% pruned-optimal
/// allowance, 95% confidence, 30-evaluation cap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetInputs {
    pub full_space: u128,
    pub effective_space: u128,
    pub ideal_fraction: f64,
    pub pruned_optimal_allowance: f64,
    pub confidence: f64,
    pub max_budget: u64,
}

impl BudgetInputs {
    pub fn new(full_space: u128, effective_space: u128) -> Self {
        Self {
            full_space,
            effective_space,
            ideal_fraction: DEFAULT_IDEAL_FRACTION,
            pruned_optimal_allowance: DEFAULT_ALLOWANCE,
            confidence: DEFAULT_CONFIDENCE,
            max_budget: DEFAULT_MAX_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        if self.full_space == 0 {
            return Err(BudgetError::Invalid("full space must be nonempty".into()));
        }
        if self.effective_space == 0 || self.effective_space > self.full_space {
            return Err(BudgetError::Invalid(format!(
                "effective space must be in [1, {}], got {}",
                self.full_space, self.effective_space
            )));
        }
        if !(self.ideal_fraction > 0.0 && self.ideal_fraction < 1.0) {
            return Err(BudgetError::Invalid(format!(
                "ideal fraction must be in (0, 1), got {}",
                self.ideal_fraction
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(BudgetError::Invalid(format!(
                "confidence must be in (0, 1), got {}",
                self.confidence
            )));
        }
        if !(self.pruned_optimal_allowance > 0.0 && self.pruned_optimal_allowance < 1.0) {
            return Err(BudgetError::Invalid(format!(
                "allowance must be in (0, 1), got {}",
                self.pruned_optimal_allowance
            )));
        }
        Ok(())
    }
}

/// Why no budget could be predicted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum UndefinedReason {
    /// The effective space retained less of the full space than the assumed
    /// fraction of pruned configurations that were potentially optimal.
    ReductionBelowAllowance { ratio: f64, allowance: f64 },
}

impl std::fmt::Display for UndefinedReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UndefinedReason::ReductionBelowAllowance { ratio, allowance } => write!(
                f,
                "space reduction {:.2}% is below the {:.0}% pruned-optimal allowance",
                ratio * 100.0,
                allowance * 100.0
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BudgetEstimate {
    Defined {
        k_star: u64,
        probability_at_k: f64,
        /// Set when the minimal budget exceeds `max_budget`.
        exceeds_max_budget: bool,
        ideal_count: u128,
    },
    Undefined {
        reason: UndefinedReason,
    },
}

/// P(at least one of the `ideal` candidates appears in `draws` samples taken
/// without replacement from `space` candidates), via the complement in log
/// space: `1 - exp(Σ log terms)`.
pub fn p_at_least_one(space: u128, ideal: u128, draws: u128) -> f64 {
    assert!(ideal <= space, "ideal count exceeds the space");
    assert!(draws <= space, "draw count exceeds the space");
    if ideal == 0 || draws == 0 {
        return 0.0;
    }
    if draws > space - ideal {
        // Not enough non-ideal candidates to fill every draw.
        return 1.0;
    }
    // ln P(none) = ln binom(space-ideal, draws) - ln binom(space, draws)
    let ln_p_none = if draws <= LOG_SUM_LOOP_MAX {
        (0..draws)
            .map(|j| {
                let num = (space - ideal - j) as f64;
                let den = (space - j) as f64;
                num.ln() - den.ln()
            })
            .sum::<f64>()
    } else {
        ln_binom(space - ideal, draws) - ln_binom(space, draws)
    };
    -ln_p_none.exp_m1()
}

/// The same probability as an explicit sum over hypergeometric terms
/// `Σ_i binom(I,i) binom(C-I,k-i) / binom(C,k)` for i = 1..k. Kept alongside
/// the complement form as an algebraic cross-check.
pub fn p_at_least_one_sum(space: u128, ideal: u128, draws: u128) -> f64 {
    assert!(ideal <= space, "ideal count exceeds the space");
    assert!(draws <= space, "draw count exceeds the space");
    if ideal == 0 || draws == 0 {
        return 0.0;
    }
    let ln_total = ln_binom(space, draws);
    let mut p = 0.0;
    for i in 1..=draws.min(ideal) {
        let rest = draws - i;
        if rest > space - ideal {
            continue;
        }
        p += (ln_binom(ideal, i) + ln_binom(space - ideal, rest) - ln_total).exp();
    }
    p.min(1.0)
}

fn ln_binom(n: u128, k: u128) -> f64 {
    debug_assert!(k <= n);
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Smallest budget k whose success probability reaches the confidence level,
/// or an explicit undefined outcome when the space reduction falls below the
/// pruned-optimal allowance.
pub fn min_budget(inputs: &BudgetInputs) -> Result<BudgetEstimate, BudgetError> {
    inputs.validate()?;
    let ratio = inputs.effective_space as f64 / inputs.full_space as f64;
    if ratio < inputs.pruned_optimal_allowance {
        return Ok(BudgetEstimate::Undefined {
            reason: UndefinedReason::ReductionBelowAllowance {
                ratio,
                allowance: inputs.pruned_optimal_allowance,
            },
        });
    }
    let ideal = ideal_count(inputs);
    let space = inputs.effective_space;
    // p is nondecreasing in k and reaches 1 at k = space - ideal + 1, so a
    // binary search over [1, space - ideal + 1] always terminates.
    let mut lo: u128 = 1;
    let mut hi: u128 = space - ideal + 1;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if p_at_least_one(space, ideal, mid) >= inputs.confidence {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let k_star = lo as u64;
    Ok(BudgetEstimate::Defined {
        k_star,
        probability_at_k: p_at_least_one(space, ideal, lo),
        exceeds_max_budget: k_star > inputs.max_budget,
        ideal_count: ideal,
    })
}

/// Adjusted ideal count: the ideal fraction applied to the effective space,
/// never below one candidate.
pub fn ideal_count(inputs: &BudgetInputs) -> u128 {
    ((inputs.ideal_fraction * inputs.effective_space as f64).round() as u128).max(1)
}

/// The success-probability curve P(k) for k = 1..=max_budget.
pub fn probability_curve(inputs: &BudgetInputs) -> Vec<(u64, f64)> {
    let ideal = ideal_count(inputs);
    (1..=inputs.max_budget)
        .map(|k| {
            let k_clamped = (k as u128).min(inputs.effective_space);
            (k, p_at_least_one(inputs.effective_space, ideal, k_clamped))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact rational P(at least one) for small spaces, reduced at every step
    /// so u128 never overflows. Independent of the log-space implementation.
    pub(crate) fn exact_p(space: u128, ideal: u128, draws: u128) -> f64 {
        if ideal == 0 || draws == 0 {
            return 0.0;
        }
        if draws > space - ideal {
            return 1.0;
        }
        let (mut num, mut den): (u128, u128) = (1, 1);
        for j in 0..draws {
            num *= space - ideal - j;
            den *= space - j;
            let g = gcd(num, den);
            num /= g;
            den /= g;
        }
        (den - num) as f64 / den as f64
    }

    fn gcd(mut a: u128, mut b: u128) -> u128 {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }

    #[test]
    fn single_draw_probability_is_the_ideal_fraction() {
        assert!((p_at_least_one(10, 1, 1) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn two_of_five_two_draws_enumerates_to_seven_tenths() {
        // All 10 pairs of 5 candidates: 7 contain at least one of the 2 ideals.
        assert!((p_at_least_one(5, 2, 2) - 0.7).abs() < 1e-12);
        assert!((p_at_least_one_sum(5, 2, 2) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn all_ideal_is_certain() {
        assert_eq!(p_at_least_one(7, 7, 1), 1.0);
        assert_eq!(p_at_least_one(7, 7, 7), 1.0);
    }

    #[test]
    fn zero_cases() {
        assert_eq!(p_at_least_one(10, 0, 5), 0.0);
        assert_eq!(p_at_least_one(10, 3, 0), 0.0);
    }

    #[test]
    fn complement_matches_exact_rational_on_small_spaces() {
        for space in 1..=30u128 {
            for ideal in 0..=space {
                for draws in 0..=space {
                    let got = p_at_least_one(space, ideal, draws);
                    let want = exact_p(space, ideal, draws);
                    assert!(
                        (got - want).abs() < 1e-12,
                        "C={space} I={ideal} k={draws}: got {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn sum_form_agrees_with_complement_form() {
        for &space in &[10u128, 57, 203, 512, 1000] {
            for &ideal in &[1u128, 2, 5, space / 10 + 1, space / 2, space] {
                for &draws in &[1u128, 2, 7, space / 3 + 1, space] {
                    let a = p_at_least_one(space, ideal, draws);
                    let b = p_at_least_one_sum(space, ideal, draws);
                    assert!(
                        (a - b).abs() < 1e-10,
                        "C={space} I={ideal} k={draws}: complement {a}, sum {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn large_spaces_stay_finite_and_sane() {
        // RSBench-scale space must not overflow or lose the plot.
        let p = p_at_least_one(5_196_312, 3_168, 30);
        assert!(p > 0.0 && p < 1.0, "got {p}");
        let p12 = p_at_least_one(1_000_000_000_000, 10_000_000, 30);
        assert!(p12 > 0.0 && p12 < 1.0, "got {p12}");
    }

    #[test]
    fn loop_and_gamma_paths_agree() {
        let space = 1_000_000u128;
        let ideal = 5_000u128;
        for &draws in &[4096u128, 4097, 10_000] {
            let ln_loop: f64 = (0..draws)
                .map(|j| ((space - ideal - j) as f64).ln() - ((space - j) as f64).ln())
                .sum();
            let ln_gamma_form = ln_binom(space - ideal, draws) - ln_binom(space, draws);
            assert!(
                (ln_loop - ln_gamma_form).abs() < 1e-8,
                "k={draws}: {ln_loop} vs {ln_gamma_form}"
            );
        }
    }

    #[test]
    fn min_budget_matches_hand_derivation() {
        // C_eff=100, ideal fraction 0.10 -> I_eff=10; 95% needs k=25.
        let inputs = BudgetInputs {
            ideal_fraction: 0.10,
            ..BudgetInputs::new(200, 100)
        };
        match min_budget(&inputs).unwrap() {
            BudgetEstimate::Defined {
                k_star,
                probability_at_k,
                ..
            } => {
                assert_eq!(k_star, 25);
                assert!(probability_at_k >= 0.95);
                assert!(p_at_least_one(100, 10, 24) < 0.95);
            }
            other => panic!("expected Defined, got {other:?}"),
        }
    }

    #[test]
    fn min_budget_minimality_postcondition() {
        for (full, eff) in [(10_648u128, 800u128), (1_180_980, 108_500), (4_752, 1_800)] {
            let inputs = BudgetInputs::new(full, eff);
            match min_budget(&inputs).unwrap() {
                BudgetEstimate::Defined {
                    k_star,
                    probability_at_k,
                    ideal_count: ideal,
                    ..
                } => {
                    assert!(probability_at_k >= inputs.confidence);
                    if k_star > 1 {
                        assert!(
                            p_at_least_one(eff, ideal, k_star as u128 - 1) < inputs.confidence,
                            "k_star {k_star} not minimal for eff {eff}"
                        );
                    }
                }
                other => panic!("expected Defined for ({full}, {eff}), got {other:?}"),
            }
        }
    }

    #[test]
    fn undefined_exactly_when_ratio_below_allowance() {
        let undefined = BudgetInputs::new(376_320, 2_500);
        assert!(matches!(
            min_budget(&undefined).unwrap(),
            BudgetEstimate::Undefined { .. }
        ));
        let defined = BudgetInputs::new(10_648, 800);
        assert!(matches!(
            min_budget(&defined).unwrap(),
            BudgetEstimate::Defined { .. }
        ));
        // Boundary: ratio exactly at the allowance stays defined.
        let boundary = BudgetInputs::new(100, 5);
        assert!(matches!(
            min_budget(&boundary).unwrap(),
            BudgetEstimate::Defined { .. }
        ));
    }

    #[test]
    fn exceeds_flag_set_for_tight_confidence() {
        let inputs = BudgetInputs {
            confidence: 0.9999,
            ..BudgetInputs::new(20_000, 2_000)
        };
        match min_budget(&inputs).unwrap() {
            BudgetEstimate::Defined {
                k_star,
                exceeds_max_budget,
                ..
            } => {
                assert!(k_star > 30);
                assert!(exceeds_max_budget);
            }
            other => panic!("expected Defined, got {other:?}"),
        }
    }

    #[test]
    fn probability_curve_is_monotone() {
        let inputs = BudgetInputs::new(10_648, 800);
        let curve = probability_curve(&inputs);
        assert_eq!(curve.len(), 30);
        for w in curve.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let mut inputs = BudgetInputs::new(100, 200);
        assert!(min_budget(&inputs).is_err());
        inputs.effective_space = 50;
        inputs.confidence = 1.0;
        assert!(min_budget(&inputs).is_err());
        inputs.confidence = 0.95;
        inputs.ideal_fraction = 0.0;
        assert!(min_budget(&inputs).is_err());
    }
}
