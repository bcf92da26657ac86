//! Hypersphere embedding objectives: alignment, uniformity, their weighted
//! combination, and the two-directional InfoNCE distillation loss.

use super::{check_embeddings, check_pair, keys, LossResult, LossWeights};
use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, sq_dist, Matrix};
use crate::scalar::Scalar;

/// Mean over positive pairs of `||zs_i - zt_i||^alpha`.
pub fn align_loss<T: Scalar>(zs: &Matrix<T>, zt: &Matrix<T>, alpha: T) -> Result<LossResult<T>> {
    check_pair("align_loss", zs, zt, 1)?;
    if !(alpha > T::zero()) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    let (b, d) = zs.shape();
    let inv_b = T::one() / T::from_count(b);
    let two = T::of(2.0);
    let mut value = T::zero();
    let mut gs = Matrix::zeros(b, d);
    let mut gt = Matrix::zeros(b, d);
    for i in 0..b {
        let (s, t) = (zs.row(i), zt.row(i));
        let n2 = sq_dist(s, t);
        let (term, coeff) = if alpha == two {
            (n2, two)
        } else if n2 > T::zero() {
            let half = alpha / two;
            // d/dx |x|^a = a |x|^(a-2) x
            (n2.powf(half), alpha * n2.powf(half - T::one()))
        } else {
            (T::zero(), T::zero())
        };
        value += term;
        let c = coeff * inv_b;
        for k in 0..d {
            let diff = s[k] - t[k];
            gs.row_mut(i)[k] = c * diff;
            gt.row_mut(i)[k] = -(c * diff);
        }
    }
    Ok(LossResult::new(value * inv_b)
        .with_grad(keys::ZS, gs)
        .with_grad(keys::ZT, gt))
}

/// Gaussian-potential uniformity over the `B(B-1)/2` distinct pairs:
/// the mean of `exp(-t ||z_i - z_j||^2)`, or its natural log when
/// `log_form` is set.
pub fn unif_loss<T: Scalar>(z: &Matrix<T>, t: T, log_form: bool) -> Result<LossResult<T>> {
    check_embeddings("unif_loss", z, 2)?;
    if !(t > T::zero()) {
        return Err(Error::InvalidArgument(format!("t must be > 0, got {t}")));
    }
    let (b, d) = z.shape();
    let pairs = b * (b - 1) / 2;
    let mut exponents = Vec::with_capacity(pairs);
    for i in 0..b {
        for j in (i + 1)..b {
            exponents.push(-t * sq_dist(z.row(i), z.row(j)));
        }
    }
    let ln_pairs = T::from_count(pairs).ln();
    let lse = log_sum_exp(exponents.iter().copied());
    let (value, weight_base) = if log_form {
        // weights are the softmax over pairs
        (lse - ln_pairs, lse)
    } else {
        ((lse - ln_pairs).exp(), ln_pairs)
    };

    let mut g = Matrix::zeros(b, d);
    let neg_two_t = -(t + t);
    let mut p = 0;
    for i in 0..b {
        for j in (i + 1)..b {
            let w = (exponents[p] - weight_base).exp() * neg_two_t;
            p += 1;
            for k in 0..d {
                let diff = z.get(i, k) - z.get(j, k);
                let gi = g.get(i, k) + w * diff;
                g.set(i, k, gi);
                let gj = g.get(j, k) - w * diff;
                g.set(j, k, gj);
            }
        }
    }
    Ok(LossResult::new(value).with_grad(keys::ZS, g))
}

/// `w_align * align(zs, zt) + w_uniform * (unif(zs) + unif(zt)) / 2`.
pub fn embed_loss<T: Scalar>(
    zs: &Matrix<T>,
    zt: &Matrix<T>,
    weights: &LossWeights,
) -> Result<LossResult<T>> {
    check_pair("embed_loss", zs, zt, 2)?;
    let align = align_loss(zs, zt, T::of(weights.alpha))?;
    let t = T::of(weights.t);
    let us = unif_loss(zs, t, weights.uniformity_log_form)?;
    let ut = unif_loss(zt, t, weights.uniformity_log_form)?;
    let w_a = T::of(weights.w_align);
    let w_u = T::of(weights.w_uniform) * T::of(0.5);

    let uniform = T::of(0.5) * (us.value + ut.value);
    let value = w_a * align.value + T::of(weights.w_uniform) * uniform;

    let mut gs = align.grads[keys::ZS].scale(w_a);
    gs.axpy(w_u, &us.grads[keys::ZS])?;
    let mut gt = align.grads[keys::ZT].scale(w_a);
    gt.axpy(w_u, &ut.grads[keys::ZS])?;

    let mut out = LossResult::new(value)
        .with_grad(keys::ZS, gs)
        .with_grad(keys::ZT, gt);
    out.terms.insert("align", align.value);
    out.terms.insert("uniform", uniform);
    Ok(out)
}

/// Two-directional InfoNCE with in-batch negatives.
///
/// For sample `i` the positive logit is `zs_i . zt_i / tau`; the negatives
/// are `zs_i . zt_j / tau` and `zs_j . zt_i / tau` for every `j != i`.
/// With `include_positive_in_denominator` the positive also enters the
/// normalizer, which makes the loss non-negative.
pub fn infonce_distill<T: Scalar>(
    zs: &Matrix<T>,
    zt: &Matrix<T>,
    nce_temperature: T,
    include_positive_in_denominator: bool,
) -> Result<LossResult<T>> {
    check_pair("infonce_distill", zs, zt, 2)?;
    if !(nce_temperature > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "nce_temperature must be > 0, got {nce_temperature}"
        )));
    }
    let b = zs.rows();
    let inv_tau = T::one() / nce_temperature;
    let logits = zs.matmul_t(zt)?.scale(inv_tau);
    let inv_b = T::one() / T::from_count(b);

    // dL/dlogits, accumulated over samples
    let mut g = Matrix::zeros(b, b);
    let mut value = T::zero();
    for i in 0..b {
        let negatives = (0..b)
            .filter(|&j| j != i)
            .flat_map(|j| [logits.get(i, j), logits.get(j, i)]);
        let pos = logits.get(i, i);
        let lse = if include_positive_in_denominator {
            log_sum_exp(negatives.chain(std::iter::once(pos)))
        } else {
            log_sum_exp(negatives)
        };
        value += lse - pos;

        for j in (0..b).filter(|&j| j != i) {
            let row_w = (logits.get(i, j) - lse).exp() * inv_b;
            let col_w = (logits.get(j, i) - lse).exp() * inv_b;
            let v = g.get(i, j) + row_w;
            g.set(i, j, v);
            let v = g.get(j, i) + col_w;
            g.set(j, i, v);
        }
        let mut diag = -inv_b;
        if include_positive_in_denominator {
            diag += (pos - lse).exp() * inv_b;
        }
        let v = g.get(i, i) + diag;
        g.set(i, i, v);
    }
    let gs = g.matmul(zt)?.scale(inv_tau);
    let gt = g.t_matmul(zs)?.scale(inv_tau);
    Ok(LossResult::new(value * inv_b)
        .with_grad(keys::ZS, gs)
        .with_grad(keys::ZT, gt))
}

/// Value-only InfoNCE where every anchor pair `(zs_i, zt_i)` is contrasted
/// against the same explicit negative sets: `zs_i . neg_t_j` and
/// `neg_s_j . zt_i` for `j` in `0..M`. Used to study the large-`M` limit.
pub fn infonce_explicit<T: Scalar>(
    zs: &Matrix<T>,
    zt: &Matrix<T>,
    neg_s: &Matrix<T>,
    neg_t: &Matrix<T>,
    nce_temperature: T,
    include_positive_in_denominator: bool,
) -> Result<T> {
    check_pair("infonce_explicit", zs, zt, 1)?;
    if neg_s.shape() != neg_t.shape() || neg_s.cols() != zs.cols() {
        return Err(Error::ShapeMismatch {
            op: "infonce_explicit",
            left: neg_s.shape(),
            right: neg_t.shape(),
        });
    }
    if neg_s.rows() == 0 {
        return Err(Error::EmptyInput("infonce_explicit negatives"));
    }
    let inv_tau = T::one() / nce_temperature;
    let mut total = T::zero();
    for i in 0..zs.rows() {
        let (s, t) = (zs.row(i), zt.row(i));
        let pos = dot(s, t) * inv_tau;
        let negs = neg_t
            .iter_rows()
            .map(|nt| dot(s, nt) * inv_tau)
            .chain(neg_s.iter_rows().map(|ns| dot(ns, t) * inv_tau));
        let lse = if include_positive_in_denominator {
            log_sum_exp(negs.chain(std::iter::once(pos)))
        } else {
            log_sum_exp(negs)
        };
        total += lse - pos;
    }
    Ok(total / T::from_count(zs.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, l2_normalize_rows, max_relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        l2_normalize_rows(&m, 1e-12).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    fn check_grad(
        f: impl Fn(&Matrix<f64>) -> f64,
        at: &Matrix<f64>,
        analytic: &Matrix<f64>,
    ) {
        let fd = finite_diff_grad(f, at, 1e-5).unwrap();
        let (err, _) = max_relative_error(analytic, &fd, 1e-4);
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn align_of_identical_is_zero() {
        let z = unit(4, 3, 1);
        assert_eq!(align_loss(&z, &z, 2.0).unwrap().value, 0.0);
    }

    #[test]
    fn align_of_antipodal_pair_is_four() {
        let r = align_loss(&m(&[&[1.0, 0.0]]), &m(&[&[-1.0, 0.0]]), 2.0).unwrap();
        assert_eq!(r.value, 4.0);
    }

    #[test]
    fn align_matches_scalar_loop_and_finite_differences() {
        let zs = unit(16, 8, 2);
        let zt = unit(16, 8, 3);
        for alpha in [2.0, 1.0, 3.0] {
            let r = align_loss(&zs, &zt, alpha).unwrap();
            let mut brute = 0.0;
            for i in 0..16 {
                let mut s = 0.0;
                for k in 0..8 {
                    s += (zs.get(i, k) - zt.get(i, k)).powi(2);
                }
                brute += s.sqrt().powf(alpha);
            }
            assert!((r.value - brute / 16.0).abs() <= 1e-12);
            check_grad(|x| align_loss(x, &zt, alpha).unwrap().value, &zs, &r.grads["zs"]);
            check_grad(|x| align_loss(&zs, x, alpha).unwrap().value, &zt, &r.grads["zt"]);
        }
    }

    #[test]
    fn align_rejects_shape_mismatch_and_zero_rows() {
        let a = unit(3, 2, 4);
        let b = unit(2, 2, 5);
        assert!(matches!(align_loss(&a, &b, 2.0), Err(Error::ShapeMismatch { .. })));
        let z = m(&[&[0.0, 0.0]]);
        let o = m(&[&[1.0, 0.0]]);
        assert!(matches!(align_loss(&z, &o, 2.0), Err(Error::ZeroNormRow { .. })));
    }

    #[test]
    fn unif_extremes() {
        let same = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(unif_loss(&same, 2.0, true).unwrap().value, 0.0);
        let apart = m(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert_eq!(unif_loss(&apart, 2.0, true).unwrap().value, -8.0);
        assert!((unif_loss(&apart, 2.0, false).unwrap().value - (-8.0f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn unif_needs_two_rows() {
        assert!(matches!(
            unif_loss(&m(&[&[1.0, 0.0]]), 2.0, true),
            Err(Error::InsufficientBatch { needed: 2, got: 1, .. })
        ));
    }

    #[test]
    fn unif_matches_double_loop_and_finite_differences() {
        let z = unit(32, 4, 6);
        for log_form in [true, false] {
            let r = unif_loss(&z, 2.0, log_form).unwrap();
            let mut acc = 0.0;
            let mut n = 0;
            for i in 0..32 {
                for j in 0..32 {
                    if i < j {
                        let mut d = 0.0;
                        for k in 0..4 {
                            d += (z.get(i, k) - z.get(j, k)).powi(2);
                        }
                        acc += (-2.0 * d).exp();
                        n += 1;
                    }
                }
            }
            let mean = acc / n as f64;
            let expect = if log_form { mean.ln() } else { mean };
            assert!((r.value - expect).abs() <= 1e-12);
            check_grad(|x| unif_loss(x, 2.0, log_form).unwrap().value, &z, &r.grads["zs"]);
        }
    }

    #[test]
    fn embed_composes_trivial_cases() {
        let z = m(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let r = embed_loss(&z, &z, &LossWeights::default()).unwrap();
        assert_eq!(r.value, -8.0);
        assert_eq!(r.term("align"), Some(0.0));
        assert_eq!(r.term("uniform"), Some(-8.0));
    }

    #[test]
    fn embed_without_alignment_is_mean_uniformity() {
        let zs = unit(8, 3, 7);
        let zt = unit(8, 3, 8);
        let w = LossWeights {
            w_align: 0.0,
            ..Default::default()
        };
        let r = embed_loss(&zs, &zt, &w).unwrap();
        let us = unif_loss(&zs, 2.0, true).unwrap().value;
        let ut = unif_loss(&zt, 2.0, true).unwrap().value;
        assert_eq!(r.value, 0.5 * (us + ut));
    }

    #[test]
    fn embed_is_linear_in_weights() {
        let zs = unit(8, 3, 9);
        let zt = unit(8, 3, 10);
        let w = LossWeights {
            w_align: 0.7,
            w_uniform: 1.3,
            ..Default::default()
        };
        let w2 = LossWeights {
            w_align: 1.4,
            w_uniform: 2.6,
            ..w
        };
        let a = embed_loss(&zs, &zt, &w).unwrap();
        let b = embed_loss(&zs, &zt, &w2).unwrap();
        assert!((b.value - 2.0 * a.value).abs() <= 1e-12);
        for key in ["zs", "zt"] {
            let doubled = a.grads[key].scale(2.0);
            assert!(max_relative_error(&b.grads[key], &doubled, 1e-12).0 <= 1e-12);
        }
    }

    #[test]
    fn infonce_two_sample_closed_form() {
        let z = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = infonce_distill(&z, &z, 1.0, true).unwrap();
        let expect = (1.0 + 2.0 * (-1.0f64).exp()).ln();
        assert!((r.value - expect).abs() <= 1e-12);
        assert!((r.value - 0.5514).abs() < 1e-4);
        // brute force: -log(e^1 / (e^1 + e^0 + e^0))
        let brute = -(1.0f64.exp() / (1.0f64.exp() + 2.0)).ln();
        assert!((r.value - brute).abs() <= 1e-12);
    }

    #[test]
    fn infonce_matches_naive_double_loop() {
        let zs = unit(8, 5, 11);
        let zt = unit(8, 5, 12);
        let tau = 0.5;
        for flag in [true, false] {
            let r = infonce_distill(&zs, &zt, tau, flag).unwrap();
            let mut total = 0.0;
            for i in 0..8 {
                let sim = |a: usize, b: usize| {
                    (0..5).map(|k| zs.get(a, k) * zt.get(b, k)).sum::<f64>() / tau
                };
                let pos = sim(i, i).exp();
                let mut denom = if flag { pos } else { 0.0 };
                for j in 0..8 {
                    if j != i {
                        denom += sim(i, j).exp() + sim(j, i).exp();
                    }
                }
                total += -(pos / denom).ln();
            }
            assert!((r.value - total / 8.0).abs() <= 1e-10);
            check_grad(|x| infonce_distill(x, &zt, tau, flag).unwrap().value, &zs, &r.grads["zs"]);
            check_grad(|x| infonce_distill(&zs, x, tau, flag).unwrap().value, &zt, &r.grads["zt"]);
        }
    }

    #[test]
    fn explicit_negatives_agree_with_in_batch_form_for_single_anchor() {
        // one anchor, negatives = the rest of the batch
        let zs = unit(5, 3, 13);
        let zt = unit(5, 3, 14);
        let batch = infonce_distill(&zs, &zt, 0.5, true).unwrap();
        let mut per_anchor = 0.0;
        for i in 0..5 {
            let others: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            per_anchor += infonce_explicit(
                &zs.select_rows(&[i]),
                &zt.select_rows(&[i]),
                &zs.select_rows(&others),
                &zt.select_rows(&others),
                0.5,
                true,
            )
            .unwrap();
        }
        assert!((batch.value - per_anchor / 5.0).abs() <= 1e-12);
    }

    fn batch_pair() -> impl Strategy<Value = (Matrix<f64>, Matrix<f64>)> {
        (2usize..7, 2usize..5).prop_flat_map(|(b, d)| {
            (
                prop::collection::vec(-1.0f64..1.0, b * d),
                prop::collection::vec(-1.0f64..1.0, b * d),
            )
                .prop_map(move |(x, y)| {
                    (
                        l2_normalize_rows(&Matrix::new(b, d, x).unwrap(), 1e-12).unwrap(),
                        l2_normalize_rows(&Matrix::new(b, d, y).unwrap(), 1e-12).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn embedding_loss_properties((zs, zt) in batch_pair(), shift in 0usize..7) {
            prop_assume!(zs.row_norms().iter().chain(zt.row_norms().iter()).all(|&n| n > 0.5));
            let align = align_loss(&zs, &zt, 2.0).unwrap().value;
            prop_assert!(align >= 0.0);
            let u = unif_loss(&zs, 2.0, true).unwrap().value;
            prop_assert!((-8.0 - 1e-12..=1e-12).contains(&u));
            let nce = infonce_distill(&zs, &zt, 0.5, true).unwrap().value;
            prop_assert!(nce >= 0.0);

            // simultaneous row permutation (a rotation) leaves every loss unchanged
            let b = zs.rows();
            let perm: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
            let (ps, pt) = (zs.select_rows(&perm), zt.select_rows(&perm));
            let w = LossWeights::default();
            prop_assert!((align_loss(&ps, &pt, 2.0).unwrap().value - align).abs() <= 1e-12);
            prop_assert!((unif_loss(&ps, 2.0, true).unwrap().value - u).abs() <= 1e-12);
            prop_assert!((infonce_distill(&ps, &pt, 0.5, true).unwrap().value - nce).abs() <= 1e-12);
            prop_assert!(
                (embed_loss(&ps, &pt, &w).unwrap().value - embed_loss(&zs, &zt, &w).unwrap().value).abs() <= 1e-12
            );
        }
    }
}
