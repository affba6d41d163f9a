//! Threshold comparison on encrypted scores.
//!
//! A shifted step function `(sign(x - delta) + 1) / 2` is approximated by a
//! Chebyshev series fitted through cosine-transform interpolation, then
//! evaluated on ciphertexts with a Paterson-Stockmeyer split: baby powers
//! `T_1..T_d1` via the doubling recurrences, giant powers `T_{d1*2^j}` by
//! repeated squaring, and a divide-and-conquer combination in the Chebyshev
//! basis. Every ciphertext multiplication is preceded by a rescale of any
//! pending operand and a level match, so the evaluator runs under the
//! strict manual-rescaling discipline.

use crate::backend::{CipherVector, HeContext};
use crate::error::{Error, Result};

/// Comparison depth budget -> series degree. Chosen so the split fits the
/// budget: 7 -> 5, 8 -> 13, 9 -> 27, 10 -> 59.
pub fn degree_for_depth(kappa: u32) -> Result<usize> {
    match kappa {
        7 => Ok(5),
        8 => Ok(13),
        9 => Ok(27),
        10 => Ok(59),
        other => Err(Error::UnsupportedDepth { kappa: other }),
    }
}

/// Smallest-cost Paterson-Stockmeyer split: minimize `d1 + d2` subject to
/// `d1 * 2^(d2-1) >= n`, ties broken toward smaller `d2` (fewer giant
/// squarings, fewer levels).
pub fn ps_split(n: usize) -> (usize, usize) {
    assert!(n >= 1, "degree must be at least 1");
    let mut best: Option<(usize, usize)> = None;
    for d2 in 1..=usize::BITS as usize {
        let pow = 1usize << (d2 - 1);
        let d1 = n.div_ceil(pow);
        let better = match best {
            None => true,
            Some((b1, b2)) => d1 + d2 < b1 + b2 || (d1 + d2 == b1 + b2 && d2 < b2),
        };
        if better {
            best = Some((d1, d2));
        }
        if pow >= n {
            break; // larger d2 only grows the sum
        }
    }
    best.expect("search space is non-empty")
}

/// Step samples interpolated at the `n + 1` Chebyshev nodes
/// `cos(pi (k + 1/2) / (n + 1))` via the cosine transform. The output
/// series targets `{0, 1}` directly: the 1/2 offset and scale of the
/// shifted sign are folded into the coefficients.
pub fn fit_sign_coefficients(delta: f64, n: usize) -> Result<Vec<f64>> {
    fit_at_nodes(delta, n, |x| {
        if x > delta {
            1.0
        } else if x < delta {
            0.0
        } else {
            0.5
        }
    })
}

/// Legacy fit of the raw sign in `{-1, 1}`; the evaluator then shifts the
/// result by +1, producing outputs in `[0, 2]`.
pub fn fit_raw_sign_coefficients(delta: f64, n: usize) -> Result<Vec<f64>> {
    fit_at_nodes(delta, n, |x| {
        if x > delta {
            1.0
        } else if x < delta {
            -1.0
        } else {
            0.0
        }
    })
}

fn fit_at_nodes(delta: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    if !(-1.0..1.0).contains(&delta) && delta != -1.0 {
        return Err(Error::ThresholdRange { delta });
    }
    if delta.abs() >= 1.0 {
        return Err(Error::ThresholdRange { delta });
    }
    if n == 0 {
        return Err(Error::Params("series degree must be at least 1".into()));
    }
    let nodes = n + 1;
    let samples: Vec<(f64, f64)> = (0..nodes)
        .map(|k| {
            let theta = std::f64::consts::PI * (k as f64 + 0.5) / nodes as f64;
            (theta, f(theta.cos()))
        })
        .collect();
    let mut coeffs = Vec::with_capacity(nodes);
    for j in 0..nodes {
        let sum: f64 = samples.iter().map(|(theta, y)| y * (j as f64 * theta).cos()).sum();
        let scale = if j == 0 { 1.0 / nodes as f64 } else { 2.0 / nodes as f64 };
        coeffs.push(scale * sum);
    }
    Ok(coeffs)
}

/// Reference evaluator: Clenshaw recurrence for a Chebyshev series on
/// `[-1, 1]`.
pub fn clenshaw(x: f64, coefficients: &[f64]) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &c in coefficients.iter().skip(1).rev() {
        let next = 2.0 * x * b1 - b2 + c;
        b2 = b1;
        b1 = next;
    }
    x * b1 - b2 + coefficients.first().copied().unwrap_or(0.0)
}

/// Fitted comparator: coefficients, threshold, and the PS split.
#[derive(Debug, Clone)]
pub struct ChebyshevComparator {
    coefficients: Vec<f64>,
    degree: usize,
    threshold: f64,
    ps_baby: usize,
    ps_giant: usize,
    depth_budget: Option<u32>,
    legacy_shifted: bool,
}

impl ChebyshevComparator {
    /// Comparator for a depth budget, using the degree lookup.
    pub fn from_depth(kappa: u32, delta: f64) -> Result<Self> {
        let degree = degree_for_depth(kappa)?;
        let mut cmp = Self::with_degree(degree, delta)?;
        cmp.depth_budget = Some(kappa);
        Ok(cmp)
    }

    /// Comparator of an explicit series degree.
    pub fn with_degree(degree: usize, delta: f64) -> Result<Self> {
        let coefficients = fit_sign_coefficients(delta, degree)?;
        let (ps_baby, ps_giant) = ps_split(degree);
        Ok(ChebyshevComparator {
            coefficients,
            degree,
            threshold: delta,
            ps_baby,
            ps_giant,
            depth_budget: None,
            legacy_shifted: false,
        })
    }

    /// Compatibility mode: fit the raw sign and shift the evaluated result
    /// by +1, yielding outputs in `[0, 2]` instead of `{0, 1}`.
    pub fn legacy_shifted(degree: usize, delta: f64) -> Result<Self> {
        let coefficients = fit_raw_sign_coefficients(delta, degree)?;
        let (ps_baby, ps_giant) = ps_split(degree);
        Ok(ChebyshevComparator {
            coefficients,
            degree,
            threshold: delta,
            ps_baby,
            ps_giant,
            depth_budget: None,
            legacy_shifted: true,
        })
    }

    /// Test hook: wrap raw coefficients without fitting.
    pub fn from_coefficients(coefficients: Vec<f64>) -> Self {
        let degree = coefficients.len().saturating_sub(1).max(1);
        let (ps_baby, ps_giant) = ps_split(degree);
        ChebyshevComparator {
            coefficients,
            degree,
            threshold: 0.0,
            ps_baby,
            ps_giant,
            depth_budget: None,
            legacy_shifted: false,
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn ps_baby(&self) -> usize {
        self.ps_baby
    }

    pub fn ps_giant(&self) -> usize {
        self.ps_giant
    }

    pub fn depth_budget(&self) -> Option<u32> {
        self.depth_budget
    }

    /// Plaintext reference of exactly what [`eval`] computes per slot.
    ///
    /// [`eval`]: ChebyshevComparator::eval
    pub fn eval_plain(&self, x: f64) -> f64 {
        let y = clenshaw(x, &self.coefficients);
        if self.legacy_shifted {
            y + 1.0
        } else {
            y
        }
    }

    /// Slot-wise encrypted evaluation of the fitted series. Inputs are
    /// expected in `[-1, 1]`; out-of-range slots are not detected and the
    /// polynomial grows quickly outside the interval.
    pub fn eval(&self, ctx: &HeContext, ct: &CipherVector) -> Result<CipherVector> {
        if ct.degree() != 1 {
            return Err(Error::NeedsRelinearize);
        }
        if ct.rescale_pending() {
            return Err(Error::PendingRescale);
        }
        let mut eval = PsEvaluator::new(ctx, ct, self.ps_baby)?;
        let result = eval.series(&self.coefficients)?;
        let result = match result {
            Term::Cipher(c) => c,
            // Degenerate constant series.
            Term::Constant(k) => ctx.add_scalar(&ctx.mult_scalar(ct, 0.0), k),
        };
        Ok(if self.legacy_shifted { ctx.add_scalar(&result, 1.0) } else { result })
    }
}

/// A subexpression during PS evaluation: either a ciphertext or a constant
/// still folded symbolically.
enum Term {
    Cipher(CipherVector),
    Constant(f64),
}

/// Paterson-Stockmeyer evaluation state: the baby Chebyshev powers
/// `T_1..T_d1` and the giant powers `T_{d1 * 2^j}` built on demand.
struct PsEvaluator<'a> {
    ctx: &'a HeContext,
    /// `baby[i]` holds `T_{i+1}(x)`.
    baby: Vec<CipherVector>,
    /// `giants[j]` holds `T_{d1 * 2^j}(x)`; index 0 aliases `T_{d1}`.
    giants: Vec<CipherVector>,
    d1: usize,
}

impl<'a> PsEvaluator<'a> {
    fn new(ctx: &'a HeContext, x: &CipherVector, d1: usize) -> Result<Self> {
        let mut baby: Vec<CipherVector> = Vec::with_capacity(d1);
        baby.push(x.clone()); // T_1
        for i in 2..=d1 {
            let t = if i.is_power_of_two() {
                // T_{2j} = 2 T_j^2 - 1
                let half = &baby[i / 2 - 1];
                let sq = Self::square(ctx, half)?;
                ctx.add_scalar(&ctx.mult_scalar(&sq, 2.0), -1.0)
            } else {
                // T_{a+b} = 2 T_a T_b - T_{|a-b|}
                let a = i / 2;
                let b = i - a;
                let (x1, y1) = ctx.match_level(&baby[a - 1], &baby[b - 1])?;
                let prod = ctx.rescale(&ctx.relinearize(&ctx.mult_no_relin(&x1, &y1)?))?;
                let doubled = ctx.mult_scalar(&prod, 2.0);
                let diff = b - a; // |a - b|
                if diff == 0 {
                    ctx.add_scalar(&doubled, -1.0)
                } else {
                    let (p, q) = ctx.match_level(&doubled, &baby[diff - 1])?;
                    ctx.add(&p, &ctx.mult_scalar(&q, -1.0))?
                }
            };
            baby.push(t);
        }
        let giants = vec![baby[d1 - 1].clone()];
        Ok(PsEvaluator { ctx, baby, giants, d1 })
    }

    fn square(ctx: &HeContext, t: &CipherVector) -> Result<CipherVector> {
        let sq = ctx.mult_no_relin(t, t)?;
        ctx.rescale(&ctx.relinearize(&sq))
    }

    /// `T_{d1 * 2^j}`, squaring up from the previous giant as needed.
    fn giant(&mut self, j: usize) -> Result<CipherVector> {
        while self.giants.len() <= j {
            let prev = self.giants.last().expect("seeded with T_d1");
            let sq = Self::square(self.ctx, prev)?;
            let next = self.ctx.add_scalar(&self.ctx.mult_scalar(&sq, 2.0), -1.0);
            self.giants.push(next);
        }
        Ok(self.giants[j].clone())
    }

    /// Evaluate a Chebyshev-basis polynomial by splitting at the largest
    /// giant power `m = d1 * 2^t <= deg` and recursing on the quotient and
    /// remainder of the basis division by `T_m`.
    fn series(&mut self, coeffs: &[f64]) -> Result<Term> {
        let deg = coeffs.len().saturating_sub(1);
        if deg <= self.d1 {
            return self.base_case(coeffs);
        }
        let mut t = 0usize;
        while self.d1 * (1 << (t + 1)) <= deg {
            t += 1;
        }
        let m = self.d1 * (1 << t);
        let (q, r) = cheb_divide(coeffs, m);
        let q_val = self.series(&q)?;
        let r_val = self.series(&r)?;
        let giant = self.giant(t)?;
        let prod = match q_val {
            // Scalar-ciphertext products are level-free.
            Term::Constant(c) => self.ctx.mult_scalar(&giant, c),
            Term::Cipher(qc) => {
                let (a, b) = self.ctx.match_level(&qc, &giant)?;
                self.ctx.rescale(&self.ctx.relinearize(&self.ctx.mult_no_relin(&a, &b)?))?
            }
        };
        match r_val {
            Term::Constant(c) => Ok(Term::Cipher(self.ctx.add_scalar(&prod, c))),
            Term::Cipher(rc) => {
                let (a, b) = self.ctx.match_level(&prod, &rc)?;
                Ok(Term::Cipher(self.ctx.add(&a, &b)?))
            }
        }
    }

    /// Degree at most `d1`: combine the baby powers with scalar weights.
    fn base_case(&self, coeffs: &[f64]) -> Result<Term> {
        let mut acc: Option<CipherVector> = None;
        for (i, &c) in coeffs.iter().enumerate().skip(1) {
            let scaled = self.ctx.mult_scalar(&self.baby[i - 1], c);
            acc = Some(match acc {
                None => scaled,
                Some(prev) => {
                    let (a, b) = self.ctx.match_level(&prev, &scaled)?;
                    self.ctx.add(&a, &b)?
                }
            });
        }
        let c0 = coeffs.first().copied().unwrap_or(0.0);
        Ok(match acc {
            Some(ct) => Term::Cipher(self.ctx.add_scalar(&ct, c0)),
            None => Term::Constant(c0),
        })
    }
}

/// Divide a Chebyshev-basis polynomial by `T_m` using
/// `T_a T_m = (T_{a+m} + T_{|a-m|}) / 2`, returning the quotient and a
/// remainder of degree below `m`.
fn cheb_divide(coeffs: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let deg = coeffs.len() - 1;
    debug_assert!(deg >= m);
    let mut rem = coeffs.to_vec();
    let mut quot = vec![0.0; deg - m + 1];
    for i in (m + 1..=deg).rev() {
        let c = rem[i];
        rem[i] = 0.0;
        quot[i - m] = 2.0 * c;
        let mirror = (i as i64 - 2 * m as i64).unsigned_abs() as usize;
        rem[mirror] -= c;
    }
    quot[0] = rem[m];
    rem[m] = 0.0;
    rem.truncate(m.max(1));
    (quot, rem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{HeContext, SimParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn ctx(max_level: u32) -> HeContext {
        HeContext::new(SimParams::new(8, max_level).unwrap()).unwrap()
    }

    #[test]
    fn depth_lookup_table() {
        assert_eq!(degree_for_depth(7).unwrap(), 5);
        assert_eq!(degree_for_depth(8).unwrap(), 13);
        assert_eq!(degree_for_depth(9).unwrap(), 27);
        assert_eq!(degree_for_depth(10).unwrap(), 59);
        assert!(matches!(degree_for_depth(6), Err(Error::UnsupportedDepth { kappa: 6 })));
    }

    /// Exhaustive search over (d1, d2) pairs.
    fn ps_split_oracle(n: usize) -> (usize, usize) {
        let mut best: Option<(usize, usize)> = None;
        for d1 in (1..=512).rev() {
            for d2 in (1..=16).rev() {
                if (d1 as u64) * (1u64 << (d2 - 1)) >= n as u64 {
                    let better = match best {
                        None => true,
                        Some((b1, b2)) => d1 + d2 < b1 + b2 || (d1 + d2 == b1 + b2 && d2 < b2),
                    };
                    if better {
                        best = Some((d1, d2));
                    }
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn ps_split_examples_and_oracle() {
        assert_eq!(ps_split(13), (2, 4));
        assert_eq!(ps_split(1), (1, 1));
        assert_eq!(ps_split(59), ps_split_oracle(59));
        for n in 1..=300 {
            let (d1, d2) = ps_split(n);
            assert!(d1 * (1 << (d2 - 1)) >= n, "constraint violated at {n}");
            assert_eq!((d1, d2), ps_split_oracle(n), "mismatch at {n}");
        }
    }

    #[test]
    fn fit_symmetry_at_zero_threshold() {
        let coeffs = fit_sign_coefficients(0.0, 13).unwrap();
        // Odd series plus the 1/2 constant: 0.5 at the origin up to
        // summation roundoff.
        assert!((clenshaw(0.0, &coeffs) - 0.5).abs() < 1e-12);
        for (j, &c) in coeffs.iter().enumerate().skip(2).step_by(2) {
            assert!(c.abs() < 1e-15, "even coefficient {j} = {c}");
        }
        assert!(matches!(fit_sign_coefficients(1.0, 13), Err(Error::ThresholdRange { .. })));
    }

    #[test]
    fn fit_error_bound_on_dense_grid() {
        // Measured regression bound for degree 13 at delta = 0.5: the
        // interpolant stays within 0.35 of the step once 0.1 away from the
        // threshold.
        let delta = 0.5;
        let coeffs = fit_sign_coefficients(delta, 13).unwrap();
        let mut max_err: f64 = 0.0;
        for i in 0..10_000 {
            let x = -1.0 + 2.0 * i as f64 / 9_999.0;
            if (x - delta).abs() < 0.1 {
                continue;
            }
            let target = if x >= delta { 1.0 } else { 0.0 };
            max_err = max_err.max((clenshaw(x, &coeffs) - target).abs());
        }
        assert!(max_err < 0.35, "measured bound regressed: {max_err}");
        assert!((clenshaw(1.0, &coeffs) - 1.0).abs() < 0.35);
    }

    #[test]
    fn monotone_decision_region() {
        // Measured transition width for degree 13: 0.1 on either side.
        let delta = 0.5;
        let band = 0.1;
        let coeffs = fit_sign_coefficients(delta, 13).unwrap();
        for i in 0..4_000 {
            let x = -1.0 + 2.0 * i as f64 / 3_999.0;
            let y = clenshaw(x, &coeffs);
            if x >= delta + band {
                assert!(y >= 0.5, "f({x}) = {y} below 0.5");
            } else if x <= delta - band {
                assert!(y <= 0.5, "f({x}) = {y} above 0.5");
            }
        }
    }

    #[test]
    fn clenshaw_examples() {
        assert_eq!(clenshaw(0.3, &[0.0, 1.0]), 0.3); // T_1
        assert_eq!(clenshaw(-0.7, &[1.0]), 1.0); // constant
        // Against the trigonometric definition sum c_i cos(i arccos x).
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let coeffs: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: f64 = rng.gen_range(-1.0..1.0);
            let trig: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(i, c)| c * (i as f64 * x.acos()).cos())
                .sum();
            assert!((clenshaw(x, &coeffs) - trig).abs() < 1e-12);
        }
    }

    #[test]
    fn encrypted_matches_clenshaw_for_random_series() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for degree in [5usize, 13, 27] {
            let coeffs: Vec<f64> = (0..=degree).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cmp = ChebyshevComparator::from_coefficients(coeffs.clone());
            let c = ctx(16);
            for _ in 0..50 {
                let xs: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let ct = c.encrypt(&c.encode(&xs).unwrap());
                let out = cmp.eval(&c, &ct).unwrap();
                let decoded = c.decrypt(&out).unwrap();
                for (x, y) in xs.iter().zip(decoded.slots()) {
                    let expected = clenshaw(*x, &coeffs);
                    let scale = expected.abs().max(1.0);
                    assert!(
                        (expected - y).abs() <= 1e-9 * scale,
                        "degree {degree}: {expected} vs {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn depth_consumption_for_degree_13() {
        let cmp = ChebyshevComparator::from_depth(8, 0.5).unwrap();
        assert_eq!((cmp.ps_baby(), cmp.ps_giant()), (2, 4));
        let c = ctx(16);
        let ct = c.encrypt(&c.encode(&[0.3; 8]).unwrap());
        let out = cmp.eval(&c, &ct).unwrap();
        let consumed = ct.level() - out.level();
        assert!(consumed <= 7, "consumed {consumed} levels");
    }

    #[test]
    fn depth_budget_nine_leaves_headroom() {
        // A depth-8 comparator run from level 9 finishes with at least one
        // level to spare for aggregation.
        let c = ctx(9);
        let cmp = ChebyshevComparator::from_depth(8, 0.4).unwrap();
        let ct = c.encrypt(&c.encode(&[0.2, 0.9, -0.5, 0.4, 0.0, 0.7, -0.9, 0.1]).unwrap());
        let out = cmp.eval(&c, &ct).unwrap();
        assert!(out.level() >= 1, "level {} left", out.level());
        for (x, y) in [0.2, 0.9, -0.5, 0.4].iter().zip(c.decrypt(&out).unwrap().slots()) {
            assert!((cmp.eval_plain(*x) - y).abs() < 1e-9);
        }
    }

    #[test]
    fn comparator_value_at_symmetric_threshold() {
        let cmp = ChebyshevComparator::from_depth(8, 0.0).unwrap();
        let c = ctx(12);
        let ct = c.encrypt(&c.encode(&[0.0; 8]).unwrap());
        let out = cmp.eval(&c, &ct).unwrap();
        assert!((c.decrypt(&out).unwrap().slots()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn legacy_shift_targets_zero_two() {
        let cmp = ChebyshevComparator::legacy_shifted(13, 0.3).unwrap();
        let c = ctx(12);
        let ct = c.encrypt(&c.encode(&[0.9, -0.9, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let out = cmp.eval(&c, &ct).unwrap();
        let decoded = c.decrypt(&out).unwrap();
        assert!((decoded.slots()[0] - 2.0).abs() < 0.3, "match lands near 2");
        assert!(decoded.slots()[1].abs() < 0.3, "non-match lands near 0");
        assert!((cmp.eval_plain(0.9) - decoded.slots()[0]).abs() < 1e-9);
    }

    #[test]
    fn cheb_divide_reconstructs() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for deg in [4usize, 7, 13, 20] {
            for m in 1..deg {
                let coeffs: Vec<f64> = (0..=deg).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let (q, r) = cheb_divide(&coeffs, m);
                for _ in 0..20 {
                    let x: f64 = rng.gen_range(-1.0..1.0);
                    let theta = x.acos();
                    let tm = (m as f64 * theta).cos();
                    let direct = clenshaw(x, &coeffs);
                    let recomposed = clenshaw(x, &q) * tm + clenshaw(x, &r);
                    assert!(
                        (direct - recomposed).abs() < 1e-9,
                        "deg {deg} m {m}: {direct} vs {recomposed}"
                    );
                }
            }
        }
    }
}
