//! Training objectives and their analytic gradients.
//!
//! * cross-entropy on segmentation logits,
//! * point-point contrast (PPC) between anchors and a pool of features
//!   labeled with global subclass ids,
//! * point-center contrast (PCC) between points and every cluster center,
//! * the combined objective `ce + alpha * (ppc + pcc)`.
//!
//! Gradients are with respect to the logits or the unit-norm embeddings; the
//! encoder's backward pass takes it from there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, axpy, dot, Matrix};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 1.0;

/// A loss value with its gradient.
#[derive(Debug, Clone)]
pub struct Term {
    pub value: f64,
    pub grad: Matrix,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Mean point-wise cross-entropy; gradient w.r.t. logits is
/// `(softmax − onehot) / N`.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<Term> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} logit rows", labels.len())));
    }
    if n == 0 {
        return Ok(Term {
            value: 0.0,
            grad: Matrix::zeros(0, c),
        });
    }
    let log_p = numerics::stable_log_softmax_rows(logits);
    let mut grad = Matrix::zeros(n, c);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} at row {i} out of range for {c} classes")));
        }
        let lp = log_p.row(i);
        total -= lp[y];
        let g = grad.row_mut(i);
        for (gk, &l) in g.iter_mut().zip(lp) {
            *gk = l.exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok(Term {
        value: total * inv_n,
        grad,
    })
}

/// Denominator used for each positive pair in the point-point contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpcDenominator {
    /// The positive itself plus every negative; other positives stay out.
    #[default]
    PositivePlusNegatives,
    /// Every pool entry except the anchor itself (positives included).
    AllContrasts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpcOptions {
    pub tau: f64,
    pub denominator: PpcDenominator,
    /// Pool rows `0..anchors.rows()` are the anchors themselves, so anchor
    /// `i` never contrasts with pool row `i`.
    pub anchors_lead_pool: bool,
}

impl Default for PpcOptions {
    fn default() -> Self {
        PpcOptions {
            tau: DEFAULT_TAU,
            denominator: PpcDenominator::default(),
            anchors_lead_pool: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PpcOutput {
    /// Mean over all anchors; anchors without positives contribute zero.
    pub value: f64,
    pub grad_anchors: Matrix,
    pub grad_pool: Matrix,
    pub skipped_anchors: usize,
}

pub fn ppc_loss(
    anchors: &Matrix,
    anchor_labels: &[usize],
    pool: &Matrix,
    pool_labels: &[usize],
    opts: PpcOptions,
) -> Result<PpcOutput> {
    check_tau(opts.tau)?;
    let (n, d) = (anchors.rows(), anchors.cols());
    if anchor_labels.len() != n || pool_labels.len() != pool.rows() {
        return Err(Error::invalid("ppc_loss: label count does not match rows"));
    }
    if pool.rows() > 0 && pool.cols() != d {
        return Err(Error::invalid("ppc_loss: anchor and pool dims differ"));
    }
    if opts.anchors_lead_pool && pool.rows() < n {
        return Err(Error::invalid("ppc_loss: pool shorter than the anchors it should lead"));
    }
    let p = pool.rows();
    if n == 0 {
        return Ok(PpcOutput {
            value: 0.0,
            grad_anchors: Matrix::zeros(n, d),
            grad_pool: Matrix::zeros(p, d),
            skipped_anchors: 0,
        });
    }
    let inv_tau = 1.0 / opts.tau;
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut skipped = 0;
    let all = opts.denominator == PpcDenominator::AllContrasts;
    let mut grad_anchors = Matrix::zeros(n, d);
    let mut grad_pool = Matrix::zeros(p, d);
    let scale = inv_tau * inv_n;
    // Anchors are processed in row blocks so the logit rows stay in cache.
    // Each block's logits are overwritten in place by d(loss_i)/d(logit),
    // and both gradients then come out of two products.
    for start in (0..n).step_by(PPC_BLOCK) {
        let end = (start + PPC_BLOCK).min(n);
        let block = anchors.row_range(start, end);
        let mut coef = block.matmul_t(pool)?;
        coef.as_mut_slice().iter_mut().for_each(|v| *v *= inv_tau);
        for r in 0..end - start {
            let i = start + r;
            let skip = if opts.anchors_lead_pool { i } else { usize::MAX };
            match ppc_row(coef.row_mut(r), anchor_labels[i], pool_labels, skip, all) {
                Some(loss) => total += loss,
                None => skipped += 1,
            }
        }
        coef.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        let ga = coef.matmul(pool)?;
        grad_anchors.as_mut_slice()[start * d..end * d].copy_from_slice(ga.as_slice());
        grad_pool.add_t_matmul(&coef, &block)?;
    }
    Ok(PpcOutput {
        value: total * inv_n,
        grad_anchors,
        grad_pool,
        skipped_anchors: skipped,
    })
}

const PPC_BLOCK: usize = 32;

/// Loss of one anchor from its logit row, which is replaced by the loss
/// gradient w.r.t. each logit. `None` (row zeroed) when there is no positive.
fn ppc_row(row: &mut [f64], yi: usize, pool_labels: &[usize], skip: usize, all: bool) -> Option<f64> {
    // Positives, and the max over the denominator set.
    let mut pos_count = 0usize;
    let mut pos_sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for (k, (&l, &y)) in row.iter().zip(pool_labels).enumerate() {
        if k == skip {
            continue;
        }
        let pos = y == yi;
        if pos {
            pos_count += 1;
            pos_sum += l;
        }
        if (all || !pos) && l > max {
            max = l;
        }
    }
    if pos_count == 0 {
        row.iter_mut().for_each(|v| *v = 0.0);
        return None;
    }
    let inv_pos = 1.0 / pos_count as f64;

    // Denominator entries become exp(l - max); positives keep their logit
    // unless they are themselves in the denominator.
    let mut sum = 0.0;
    if max > f64::NEG_INFINITY {
        for (k, (v, &y)) in row.iter_mut().zip(pool_labels).enumerate() {
            if k != skip && (all || y != yi) {
                *v = (*v - max).exp();
                sum += *v;
            }
        }
    }
    let lse = max + sum.ln();

    let loss_i = if all {
        let inv_sum = 1.0 / sum;
        for (k, (v, &y)) in row.iter_mut().zip(pool_labels).enumerate() {
            *v = if k == skip {
                0.0
            } else if y == yi {
                *v * inv_sum - inv_pos
            } else {
                *v * inv_sum
            };
        }
        lse - pos_sum * inv_pos
    } else {
        let mut loss = 0.0;
        let mut neg_weight = 0.0;
        for (k, (v, &y)) in row.iter_mut().zip(pool_labels).enumerate() {
            if k == skip {
                *v = 0.0;
            } else if y == yi {
                // -log(e^l / (e^l + e^lse)) = softplus(lse - l)
                let (sp, sig) = softplus_sigmoid(lse - *v);
                loss += sp;
                *v = -sig * inv_pos;
                neg_weight += sig * inv_pos;
            }
        }
        if sum > 0.0 {
            let w = neg_weight / sum;
            for (k, (v, &y)) in row.iter_mut().zip(pool_labels).enumerate() {
                if k != skip && y != yi {
                    *v *= w;
                }
            }
        }
        loss * inv_pos
    };
    Some(loss_i)
}

/// `(ln(1 + e^z), 1 / (1 + e^-z))` without overflow; `z = -inf` gives `(0, 0)`.
fn softplus_sigmoid(z: f64) -> (f64, f64) {
    if z == f64::NEG_INFINITY {
        return (0.0, 0.0);
    }
    if z > 0.0 {
        let e = (-z).exp();
        (z + e.ln_1p(), 1.0 / (1.0 + e))
    } else {
        let e = z.exp();
        (e.ln_1p(), e / (1.0 + e))
    }
}

/// Mean over points of `-log softmax_over_all_centers(p·q / tau)[assigned]`.
///
/// `centers` holds one row per global subclass id; the row max of the logits
/// is subtracted as a constant before exponentiation.
pub fn pcc_loss(embeddings: &Matrix, subclass: &[usize], centers: &Matrix, tau: f64) -> Result<Term> {
    check_tau(tau)?;
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if subclass.len() != n {
        return Err(Error::invalid("pcc_loss: label count does not match rows"));
    }
    if centers.cols() != d {
        return Err(Error::invalid("pcc_loss: embedding and center dims differ"));
    }
    let k = centers.rows();
    let mut grad = Matrix::zeros(n, d);
    if n == 0 {
        return Ok(Term { value: 0.0, grad });
    }
    let inv_tau = 1.0 / tau;
    let inv_n = 1.0 / n as f64;
    let mut logits = vec![0.0; k];
    let mut total = 0.0;
    for (i, &y) in subclass.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("subclass {y} out of range for {k} centers")));
        }
        let p = embeddings.row(i);
        for (l, q) in logits.iter_mut().zip(centers.iter_rows()) {
            *l = dot(p, q) * inv_tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted_pos = logits[y] - max;
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        // logits now hold unnormalized probabilities.
        let log_prob = shifted_pos - sum.ln();
        total -= log_prob;
        let g = grad.row_mut(i);
        for (m, q) in centers.iter_rows().enumerate() {
            let w = logits[m] / sum - if m == y { 1.0 } else { 0.0 };
            if w != 0.0 {
                axpy(w * inv_tau * inv_n, q, g);
            }
        }
    }
    Ok(Term {
        value: total * inv_n,
        grad,
    })
}

/// Scalar losses and summed gradients of one step.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub ce: f64,
    pub ppc: f64,
    pub pcc: f64,
    pub total: f64,
    pub alpha: f64,
    pub tau: f64,
    pub grad_logits: Matrix,
    pub grad_embeddings: Matrix,
}

/// `total = ce + alpha * (ppc + pcc)`; gradients are combined with the same
/// weights. Absent contrast terms count as zero.
pub fn total_loss(
    ce: Term,
    ppc: Option<Term>,
    pcc: Option<Term>,
    alpha: f64,
    tau: f64,
    embedding_shape: (usize, usize),
) -> Result<LossReport> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be nonnegative, got {alpha}")));
    }
    let mut grad_embeddings = Matrix::zeros(embedding_shape.0, embedding_shape.1);
    let mut contrast = |t: &Option<Term>| -> Result<f64> {
        match t {
            None => Ok(0.0),
            Some(t) => {
                if (t.grad.rows(), t.grad.cols()) != embedding_shape {
                    return Err(Error::invalid("contrast gradient shape mismatch"));
                }
                axpy(alpha, t.grad.as_slice(), grad_embeddings.as_mut_slice());
                Ok(t.value)
            }
        }
    };
    let ppc_v = contrast(&ppc)?;
    let pcc_v = contrast(&pcc)?;
    Ok(LossReport {
        ce: ce.value,
        ppc: ppc_v,
        pcc: pcc_v,
        total: ce.value + alpha * (ppc_v + pcc_v),
        alpha,
        tau,
        grad_logits: ce.grad,
        grad_embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = numerics::norm(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn ce_uniform_is_ln_classes() {
        let t = ce_loss(&Matrix::zeros(3, 4), &[0, 1, 3]).unwrap();
        assert!((t.value - 4f64.ln()).abs() < 1e-15);
        for r in 0..3 {
            let s: f64 = t.grad.row(r).iter().sum();
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn ce_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = Matrix::from_vec(1, 3, vec![margin, 0.0, 0.0]).unwrap();
            let v = ce_loss(&logits, &[0]).unwrap().value;
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-20);
        assert!(ce_loss(&Matrix::zeros(1, 3), &[3]).is_err());
    }

    #[test]
    fn ppc_symmetric_pair_is_ln2() {
        let a = Matrix::from_rows(2, [unit(&[1.0, 0.0])]).unwrap();
        let pool = Matrix::from_rows(2, [unit(&[1.0, 1.0]), unit(&[1.0, -1.0])]).unwrap();
        let out = ppc_loss(&a, &[0], &pool, &[0, 1], PpcOptions::default()).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-14);
        assert_eq!(out.skipped_anchors, 0);
    }

    #[test]
    fn ppc_without_negatives_is_zero() {
        let a = Matrix::from_rows(2, [unit(&[1.0, 0.0]), unit(&[0.3, 1.0])]).unwrap();
        let pool = Matrix::from_rows(2, [unit(&[1.0, 2.0]), unit(&[-1.0, 0.5])]).unwrap();
        let out = ppc_loss(&a, &[4, 4], &pool, &[4, 4], PpcOptions::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_anchors.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ppc_skips_anchors_without_positives() {
        let a = Matrix::from_rows(2, [unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]).unwrap();
        let pool = a.clone();
        let opts = PpcOptions {
            anchors_lead_pool: true,
            ..Default::default()
        };
        // Each anchor is alone in its subclass once itself is excluded.
        let out = ppc_loss(&a, &[0, 1], &pool, &[0, 1], opts).unwrap();
        assert_eq!(out.skipped_anchors, 2);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn bad_tau_rejected() {
        let a = Matrix::from_rows(2, [unit(&[1.0, 0.0])]).unwrap();
        for tau in [0.0, -0.1] {
            let opts = PpcOptions { tau, ..Default::default() };
            assert!(ppc_loss(&a, &[0], &a, &[0], opts).is_err());
            assert!(pcc_loss(&a, &[0], &a, tau).is_err());
        }
    }

    #[test]
    fn pcc_examples() {
        let p = Matrix::from_rows(2, [unit(&[1.0, 0.0])]).unwrap();
        let centers = Matrix::from_rows(2, [unit(&[1.0, 1.0]), unit(&[1.0, -1.0])]).unwrap();
        let t = pcc_loss(&p, &[1], &centers, 0.1).unwrap();
        assert!((t.value - 2f64.ln()).abs() < 1e-14);

        let single = Matrix::from_rows(2, [unit(&[0.2, 1.0])]).unwrap();
        let t = pcc_loss(&p, &[0], &single, 0.1).unwrap();
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let term = |v: f64| Term {
            value: v,
            grad: Matrix::filled(1, 2, v),
        };
        let r = total_loss(term(1.0), Some(term(2.0)), Some(term(3.0)), 0.5, 0.1, (1, 2)).unwrap();
        assert_eq!(r.total, 3.5);
        assert_eq!(r.grad_embeddings.as_slice(), &[2.5, 2.5]);
        let r = total_loss(term(1.0), Some(term(2.0)), Some(term(3.0)), 0.0, 0.1, (1, 2)).unwrap();
        assert_eq!(r.total, 1.0);
        assert!(total_loss(term(1.0), None, None, -1.0, 0.1, (1, 2)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit_matrix(rows: usize, d: usize) -> impl Strategy<Value = Matrix> {
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), rows).prop_filter_map("zero row", move |rs| {
                let rows: Vec<Vec<f64>> = rs
                    .into_iter()
                    .map(|r| {
                        let n = numerics::norm(&r);
                        (n > 1e-6).then(|| r.iter().map(|x| x / n).collect())
                    })
                    .collect::<Option<_>>()?;
                Matrix::from_rows(d, rows).ok()
            })
        }

        proptest! {
            #[test]
            fn contrast_losses_nonnegative(
                x in unit_matrix(6, 3),
                labels in prop::collection::vec(0usize..3, 6),
                all in any::<bool>(),
                tau in 0.05f64..1.0,
            ) {
                let opts = PpcOptions {
                    tau,
                    denominator: if all { PpcDenominator::AllContrasts } else { PpcDenominator::PositivePlusNegatives },
                    anchors_lead_pool: true,
                };
                let out = ppc_loss(&x, &labels, &x, &labels, opts).unwrap();
                prop_assert!(out.value >= 0.0 && out.value.is_finite());
                let centers = x.row_range(0, 3);
                let pcc = pcc_loss(&x, &labels, &centers, tau).unwrap();
                prop_assert!(pcc.value >= 0.0 && pcc.grad.is_finite());
            }

            #[test]
            fn ce_gradient_rows_sum_to_zero(
                logits in prop::collection::vec(-50.0f64..50.0, 12),
                labels in prop::collection::vec(0usize..3, 4),
            ) {
                let t = ce_loss(&Matrix::from_vec(4, 3, logits).unwrap(), &labels).unwrap();
                prop_assert!(t.value >= 0.0);
                for r in t.grad.iter_rows() {
                    prop_assert!(r.iter().sum::<f64>().abs() < 1e-15);
                }
            }
        }
    }
}
