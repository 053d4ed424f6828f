//! The combinatorial stage-switch solver and its companions: the
//! constructive choice of s, a brute-force oracle over all s, the
//! majorization (Karamata) premise/conclusion checker, the slack-tolerant
//! log-sum bound, and Stirling-gap utilities.
//!
//! For a nonnegative vector a_1..a_m with mass at most 1, the solver finds
//! a stage switch s in [0, m] with
//!
//!   sum_{k<=s} log2 a_[k,m]  +  sum_{k>s} log2 a_(s,k]  <=  log2(m!/m^m),
//!
//! which is what turns per-round accepted-set increments into the n·log2(e)
//! term of the derived space bound. Arithmetic is extended-real: log2(0) is
//! negative infinity and certifies the inequality outright.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LemmaError {
    #[error("input must be non-empty")]
    Empty,
    #[error("negative entry {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },
    #[error("entries must sum to at most 1, got {0}")]
    MassExceedsOne(f64),
    #[error("sequences must have equal positive length")]
    LengthMismatch,
    #[error("sequence is not non-increasing at index {0}")]
    NotNonIncreasing(usize),
    #[error("entry {value} at index {index} outside the required domain")]
    OutOfDomain { index: usize, value: f64 },
    #[error("b must be at least 1")]
    BadB,
}

/// Entries below this magnitude are flushed to exact zero before solving.
const FLUSH_EPS: f64 = 1e-300;
/// Relative tolerance on inequality assertions.
pub const REL_TOL: f64 = 1e-9;

/// Result of a stage-switch search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SChoiceResult {
    pub s: usize,
    /// May be negative infinity (any zero partial sum certifies the bound).
    pub lhs_value: f64,
    /// log2(m!/m^m).
    pub bound_value: f64,
    /// lhs - bound.
    pub slack: f64,
}

/// log2(m!/m^m) = sum_{k=1}^m log2(k/m).
pub fn bound_value(m: usize) -> f64 {
    (1..=m).map(|k| (k as f64 / m as f64).log2()).sum()
}

fn validated(a: &[f64]) -> Result<Vec<f64>, LemmaError> {
    if a.is_empty() {
        return Err(LemmaError::Empty);
    }
    let mut v = Vec::with_capacity(a.len());
    for (i, &x) in a.iter().enumerate() {
        if x < 0.0 || !x.is_finite() {
            return Err(LemmaError::NegativeEntry { index: i, value: x });
        }
        v.push(if x < FLUSH_EPS { 0.0 } else { x });
    }
    let sum: f64 = v.iter().sum();
    if sum > 1.0 + 1e-9 {
        return Err(LemmaError::MassExceedsOne(sum));
    }
    Ok(v)
}

fn prefix_sums(a: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(a.len() + 1);
    p.push(0.0);
    let mut acc = 0.0;
    for &x in a {
        acc += x;
        p.push(acc);
    }
    p
}

#[inline]
fn log2_nonneg(x: f64) -> f64 {
    // Partial sums can cancel to tiny negatives; treat them as empty mass.
    x.max(0.0).log2()
}

/// Evaluates the stage-switch objective for a given s on raw (possibly
/// sub-probability) values.
pub fn lhs_for(a: &[f64], s: usize) -> f64 {
    let m = a.len();
    debug_assert!(s <= m);
    let p = prefix_sums(a);
    let mut total = 0.0;
    for k in 1..=s {
        total += log2_nonneg(p[m] - p[k - 1]); // a_[k, m]
    }
    for k in (s + 1)..=m {
        total += log2_nonneg(p[k] - p[s]); // a_(s, k]
    }
    total
}

/// The inductive construction: test s = 0 against the bound; otherwise find
/// the smallest prefix index violating the uniform majorization and recurse
/// on the renormalized suffix, offsetting the returned s.
pub fn choose_s(a: &[f64]) -> Result<SChoiceResult, LemmaError> {
    let a = validated(a)?;
    let sum: f64 = a.iter().sum();
    let normalized: Vec<f64> =
        if sum > 0.0 { a.iter().map(|&x| x / sum).collect() } else { a.clone() };
    let s = solve(&normalized);
    let bound = bound_value(a.len());
    let lhs = lhs_for(&a, s);
    Ok(SChoiceResult { s, lhs_value: lhs, bound_value: bound, slack: lhs - bound })
}

fn solve(a: &[f64]) -> usize {
    let m = a.len();
    if m == 0 {
        return 0;
    }
    let p = prefix_sums(a);
    if p[m] <= 0.0 {
        // zero mass: every prefix log is -inf, s = 0 certifies
        return 0;
    }
    let bound = bound_value(m);
    let lhs0: f64 = (1..=m).map(|k| log2_nonneg(p[k])).sum();
    if lhs0 <= bound + REL_TOL * bound.abs().max(1.0) {
        return 0;
    }
    // smallest j with sum_{k<=j} log2 a_(0,k] > sum_{k<=j} log2(k/m)
    let mut acc_a = 0.0;
    let mut acc_u = 0.0;
    for j in 1..=m {
        acc_a += log2_nonneg(p[j]);
        acc_u += (j as f64 / m as f64).log2();
        if acc_a > acc_u {
            let tail = p[m] - p[j];
            if tail <= 0.0 {
                // zero suffix: every a_(j, k] is empty, lhs(j) is -inf
                return j;
            }
            let scaled: Vec<f64> = a[j..].iter().map(|&x| x / tail).collect();
            return j + solve(&scaled);
        }
    }
    // unreachable for exact arithmetic once the s = 0 test fails; float fuzz
    // lands here only when lhs0 straddles the tolerance, where s = 0 holds
    0
}

/// Evaluates every s in [0, m] exactly and returns the minimizer (smallest
/// s on ties). Independent oracle for `choose_s`.
pub fn brute_force_s(a: &[f64]) -> Result<SChoiceResult, LemmaError> {
    let a = validated(a)?;
    let m = a.len();
    let bound = bound_value(m);
    let mut best_s = 0;
    let mut best = f64::INFINITY;
    for s in 0..=m {
        let lhs = lhs_for(&a, s);
        if lhs < best {
            best = lhs;
            best_s = s;
        }
    }
    Ok(SChoiceResult { s: best_s, lhs_value: best, bound_value: bound, slack: best - bound })
}

/// All s whose objective meets the bound (small m only; diagnostic).
pub fn feasible_switches(a: &[f64]) -> Result<Vec<usize>, LemmaError> {
    let a = validated(a)?;
    let bound = bound_value(a.len());
    let tol = REL_TOL * bound.abs().max(1.0);
    Ok((0..=a.len()).filter(|&s| lhs_for(&a, s) <= bound + tol).collect())
}

/// f(t) = log2(1 - 2^(-t)), the concave increasing function the
/// majorization step feeds.
pub fn karamata_f(t: f64) -> f64 {
    (1.0 - (-t).exp2()).log2()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KaramataReport {
    /// Prefix sums of x dominate those of y for all i < len.
    pub prefix_premise: bool,
    /// Total of x is at most total of y.
    pub total_premise: bool,
    pub f_x_sum: f64,
    pub f_y_sum: f64,
    /// Some(true/false) when both premises hold; None otherwise.
    pub conclusion: Option<bool>,
}

impl KaramataReport {
    pub fn premises_hold(&self) -> bool {
        self.prefix_premise && self.total_premise
    }
}

/// Checks the majorization premises for two non-increasing positive
/// sequences, and when they hold, whether sum f(x) <= sum f(y).
pub fn karamata_check(x: &[f64], y: &[f64]) -> Result<KaramataReport, LemmaError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(LemmaError::LengthMismatch);
    }
    for seq in [x, y] {
        for (j, &v) in seq.iter().enumerate() {
            // NaN fails the positivity test and is rejected here too
            let in_domain = v > 0.0 && v.is_finite();
            if !in_domain {
                return Err(LemmaError::OutOfDomain { index: j, value: v });
            }
            if j > 0 && seq[j] > seq[j - 1] + 1e-12 {
                return Err(LemmaError::NotNonIncreasing(j));
            }
        }
    }
    let n = x.len();
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut prefix_premise = true;
    for i in 0..n - 1 {
        sx += x[i];
        sy += y[i];
        if sx < sy - 1e-12 {
            prefix_premise = false;
        }
    }
    sx += x[n - 1];
    sy += y[n - 1];
    let total_premise = sx <= sy + 1e-12;
    let f_x_sum: f64 = x.iter().map(|&t| karamata_f(t)).sum();
    let f_y_sum: f64 = y.iter().map(|&t| karamata_f(t)).sum();
    let conclusion = if prefix_premise && total_premise {
        Some(f_x_sum <= f_y_sum + REL_TOL * f_y_sum.abs().max(1.0))
    } else {
        None
    };
    Ok(KaramataReport { prefix_premise, total_premise, f_x_sum, f_y_sum, conclusion })
}

/// sum log2(z_k + 2/4^b): the objective after the coupling slack 2/4^b is
/// folded into each batch's accepted-set increment.
pub fn slack_adjusted_sum(z: &[f64], b: u32) -> Result<f64, LemmaError> {
    if b == 0 {
        return Err(LemmaError::BadB);
    }
    let delta = 2.0 / 4.0f64.powi(b as i32);
    let mut total = 0.0;
    for (i, &v) in z.iter().enumerate() {
        if !(v > 0.0 && v <= 1.0) {
            return Err(LemmaError::OutOfDomain { index: i, value: v });
        }
        total += (v + delta).log2();
    }
    Ok(total)
}

/// c(b) = b log2(1 + 2·3^b/4^b) + log2 3: covers both cases of the slack
/// argument, so sum log2 z_k <= -b log2 e implies
/// slack_adjusted_sum <= -b log2 e + c(b).
pub fn slack_budget(b: u32) -> f64 {
    let b_f = f64::from(b);
    b_f * (1.0 + 2.0 * 3.0f64.powi(b as i32) / 4.0f64.powi(b as i32)).log2() + 3.0f64.log2()
}

/// log2(n!/n^n) + n·log2 e: the O(log n) remainder of Stirling's
/// approximation, computed by summed logs.
pub fn stirling_gap(n: u64) -> f64 {
    let mut log_fact = 0.0f64;
    let mut carry = 0.0f64;
    for k in 1..=n {
        let term = (k as f64).log2() - carry;
        let next = log_fact + term;
        carry = (next - log_fact) - term;
        log_fact = next;
    }
    let n_f = n as f64;
    log_fact - n_f * n_f.log2() + n_f * std::f64::consts::LOG2_E
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{domain, RandomTape};
    use proptest::prelude::*;

    fn simplex_sample(r: &mut crate::tape::TapeReader, m: usize, scale: f64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..m).map(|_| -r.uniform_f64().max(1e-12).ln()).collect();
        let sum: f64 = v.iter().sum();
        for x in &mut v {
            *x *= scale / sum;
        }
        v
    }

    #[test]
    fn base_case_m1() {
        let r = choose_s(&[1.0]).unwrap();
        assert_eq!(r.s, 0);
        assert_eq!(r.lhs_value, 0.0);
        assert_eq!(r.bound_value, 0.0);
    }

    #[test]
    fn half_half_takes_s0_with_equality() {
        let r = choose_s(&[0.5, 0.5]).unwrap();
        assert_eq!(r.s, 0);
        assert!((r.lhs_value - (-1.0)).abs() < 1e-12);
        assert!((r.bound_value - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_suffix_certifies_with_neg_infinity() {
        let r = choose_s(&[1.0, 0.0]).unwrap();
        assert!(r.s == 1 || r.s == 2, "s = {}", r.s);
        assert_eq!(r.lhs_value, f64::NEG_INFINITY);
        assert!((r.bound_value - (-1.0)).abs() < 1e-12);
        let bf = brute_force_s(&[1.0, 0.0]).unwrap();
        assert_eq!(bf.lhs_value, f64::NEG_INFINITY);
    }

    #[test]
    fn uniform_vector_is_tight_at_every_s() {
        for m in [1usize, 2, 5, 12] {
            let a = vec![1.0 / m as f64; m];
            let bound = bound_value(m);
            let r = choose_s(&a).unwrap();
            assert_eq!(r.s, 0);
            assert!((r.lhs_value - bound).abs() <= 1e-9 * bound.abs().max(1.0));
            // telescoping: every s achieves the bound exactly
            for s in 0..=m {
                assert!((lhs_for(&a, s) - bound).abs() <= 1e-9 * bound.abs().max(1.0));
            }
            let bf = brute_force_s(&a).unwrap();
            assert!((bf.lhs_value - bound).abs() <= 1e-9 * bound.abs().max(1.0));
        }
    }

    #[test]
    fn solver_feasible_on_random_simplex() {
        let tape = RandomTape::new(17);
        let mut r = tape.reader(domain::HARNESS);
        for m in 1..=12usize {
            for _ in 0..500 {
                let a = simplex_sample(&mut r, m, 1.0);
                let res = choose_s(&a).unwrap();
                let tol = 1e-9 * res.bound_value.abs().max(1.0);
                assert!(
                    res.lhs_value <= res.bound_value + tol,
                    "m={m} a={a:?} s={} lhs={} bound={}",
                    res.s,
                    res.lhs_value,
                    res.bound_value
                );
                let oracle = brute_force_s(&a).unwrap();
                assert!(oracle.lhs_value <= oracle.bound_value + tol);
                assert!(oracle.lhs_value <= res.lhs_value + tol);
            }
        }
    }

    #[test]
    fn scaling_keeps_the_switch_feasible() {
        let tape = RandomTape::new(23);
        let mut r = tape.reader(domain::HARNESS);
        for _ in 0..200 {
            let scale = 0.05 + 0.9 * r.uniform_f64();
            let a = simplex_sample(&mut r, 8, scale);
            let scaled_up: Vec<f64> = a.iter().map(|&x| x / scale).collect();
            let res = choose_s(&a).unwrap();
            let res_up = choose_s(&scaled_up).unwrap();
            assert_eq!(res.s, res_up.s, "normalization must not move the switch");
            let tol = 1e-9 * res.bound_value.abs().max(1.0);
            assert!(res.lhs_value <= res.bound_value + tol);
            assert!(res.lhs_value <= res_up.lhs_value + tol, "monotone in scale");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(choose_s(&[]), Err(LemmaError::Empty)));
        assert!(matches!(choose_s(&[-0.1, 0.5]), Err(LemmaError::NegativeEntry { .. })));
        assert!(matches!(choose_s(&[0.8, 0.8]), Err(LemmaError::MassExceedsOne(_))));
    }

    #[test]
    fn karamata_hand_case() {
        let rep = karamata_check(&[2.0, 1.0], &[1.8, 1.4]).unwrap();
        assert!(rep.premises_hold());
        assert!((rep.f_x_sum - (-1.415037499)).abs() < 1e-3, "{}", rep.f_x_sum);
        assert!((rep.f_y_sum - (-1.175626)).abs() < 1e-3, "{}", rep.f_y_sum);
        assert_eq!(rep.conclusion, Some(true));
    }

    #[test]
    fn karamata_equal_sequences_hold_with_equality() {
        let rep = karamata_check(&[3.0, 2.0, 0.5], &[3.0, 2.0, 0.5]).unwrap();
        assert!(rep.premises_hold());
        assert_eq!(rep.f_x_sum, rep.f_y_sum);
        assert_eq!(rep.conclusion, Some(true));
    }

    #[test]
    fn karamata_rejects_bad_domains() {
        assert!(karamata_check(&[1.0, 2.0], &[2.0, 1.0]).is_err()); // increasing x
        assert!(karamata_check(&[1.0], &[1.0, 2.0]).is_err());
        assert!(karamata_check(&[0.0, 0.0], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn karamata_fuzz_premises_imply_conclusion() {
        let tape = RandomTape::new(31);
        let mut r = tape.reader(domain::HARNESS);
        let mut accepted = 0;
        while accepted < 2_000 {
            let n = 2 + r.uniform_below(15) as usize;
            let mut x: Vec<f64> = (0..n).map(|_| 0.05 + 4.0 * r.uniform_f64()).collect();
            let mut y: Vec<f64> = (0..n).map(|_| 0.05 + 4.0 * r.uniform_f64()).collect();
            x.sort_by(|a, b| b.partial_cmp(a).unwrap());
            y.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let rep = karamata_check(&x, &y).unwrap();
            if !rep.premises_hold() {
                continue;
            }
            accepted += 1;
            assert_eq!(rep.conclusion, Some(true), "x={x:?} y={y:?}");
        }
    }

    #[test]
    fn slack_sum_examples() {
        let got = slack_adjusted_sum(&[1.0; 4], 4).unwrap();
        assert!((got - 4.0 * (1.0 + 2.0 / 256.0f64).log2()).abs() < 1e-12);
        assert!((got - 0.0450).abs() < 1e-3);

        let z = 3.0f64.powi(-5);
        let got = slack_adjusted_sum(&[z], 5).unwrap();
        assert!(got < -5.0 * std::f64::consts::LOG2_E, "{got}");

        let got = slack_adjusted_sum(&[1.0], 1).unwrap();
        assert!((got - 1.5f64.log2()).abs() < 1e-12);
        assert!((got - 0.585).abs() < 1e-3);

        assert!(slack_adjusted_sum(&[1.5], 2).is_err());
        assert!(slack_adjusted_sum(&[0.5], 0).is_err());
    }

    #[test]
    fn stirling_examples_and_bound() {
        assert!((stirling_gap(1) - std::f64::consts::LOG2_E).abs() < 1e-12);
        assert!((stirling_gap(2) - (-1.0 + 2.0 * std::f64::consts::LOG2_E)).abs() < 1e-12);
        let mut n = 1u64;
        while n <= 1 << 16 {
            let gap = stirling_gap(n);
            assert!(gap >= 0.0, "n={n} gap={gap}");
            assert!(gap <= 2.0 * (n as f64).log2() + 3.0, "n={n} gap={gap}");
            n *= 2;
        }
    }

    proptest! {
        #[test]
        fn prop_solver_meets_bound(raw in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            let sum: f64 = raw.iter().sum();
            let a: Vec<f64> = if sum > 1.0 {
                raw.iter().map(|&x| x / sum).collect()
            } else {
                raw.clone()
            };
            let res = choose_s(&a).unwrap();
            let tol = 1e-9 * res.bound_value.abs().max(1.0);
            prop_assert!(res.lhs_value <= res.bound_value + tol);
        }
    }
}
