//! Contrastive and classification losses.
//!
//! The grouped contrastive loss treats every batch row sharing a group id
//! as a positive of the anchor, normalizes each anchor's positive sum by a
//! per-anchor count, and sums over anchors:
//!
//! ```text
//! L = sum_i  -1/d_i  *  sum_{j != i, id_j = id_i}  log( exp(z_i.z_j / t) / sum_{k != i} exp(z_i.z_k / t) )
//! ```
//!
//! The SimCLR loss is the singleton-group special case (each anchor's only
//! positive is its own second augmentation) and the SupCon loss is the same
//! formula with class labels as group ids, so all three share one builder
//! and agree bit-for-bit where their inputs coincide.
//!
//! Similarity rows are max-shifted inside `log_sum_exp_rows` and the
//! diagonal is excluded with an additive `-1e9` mask, which underflows to
//! an exact zero after the shift.

pub mod oracle;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// How the per-anchor normalizer `d_i` counts the anchor's group.
///
/// `Originals` counts source samples, making `d_i` exactly the number of
/// positive terms in the anchor's sum. `Augmented` counts augmented
/// instances instead, giving the larger normalizer `2 * instances - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveCountConvention {
    Originals,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Batch sum (the default).
    Sum,
    /// Sum divided by the number of anchors; useful when transferring a
    /// learning rate across batch sizes.
    Mean,
}

/// Additive mask that removes the diagonal from every denominator.
const DIAG_MASK: f64 = -1e9;

/// Validated input for the eager loss paths and the oracle.
#[derive(Debug, Clone)]
pub struct ContrastiveBatchInput {
    pub z: Tensor,
    pub view_ids: Vec<i64>,
    pub temperature: f64,
}

impl ContrastiveBatchInput {
    /// Checks the batch contract: 2-D row-normalized `z`, one id per row,
    /// positive temperature, and at least one positive per anchor.
    pub fn new(z: Tensor, view_ids: Vec<i64>, temperature: f64) -> Result<Self> {
        if z.shape().len() != 2 || z.shape()[0] != view_ids.len() {
            return Err(Error::InvalidShape {
                op: "contrastive_batch",
                shape: z.shape().to_vec(),
                reason: format!("expected (2N, D) with 2N = {}", view_ids.len()),
            });
        }
        if temperature <= 0.0 {
            return Err(Error::Domain {
                op: "contrastive_batch",
                reason: format!("temperature must be positive, got {temperature}"),
            });
        }
        for r in 0..z.shape()[0] {
            let norm: f64 = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Domain {
                    op: "contrastive_batch",
                    reason: format!("row {r} has norm {norm}, expected 1"),
                });
            }
        }
        check_anchors_have_positives(&view_ids)?;
        Ok(ContrastiveBatchInput {
            z,
            view_ids,
            temperature,
        })
    }
}

fn check_anchors_have_positives(ids: &[i64]) -> Result<()> {
    for (i, id) in ids.iter().enumerate() {
        let positives = ids
            .iter()
            .enumerate()
            .filter(|(j, other)| *j != i && *other == id)
            .count();
        if positives == 0 {
            return Err(Error::Domain {
                op: "contrastive_loss",
                reason: format!("anchor {i} (id {id}) has no positives in the batch"),
            });
        }
    }
    Ok(())
}

/// Per-anchor divisor `d_i` under the chosen convention.
fn divisor(positives: usize, convention: PositiveCountConvention) -> f64 {
    match convention {
        PositiveCountConvention::Originals => positives as f64,
        PositiveCountConvention::Augmented => (2 * (positives + 1) - 1) as f64,
    }
}

/// Shared builder for the grouped contrastive losses. Returns a scalar node.
pub fn grouped_contrastive_loss(
    g: &mut Graph,
    z: Var,
    ids: &[i64],
    temperature: f64,
    convention: PositiveCountConvention,
    reduction: Reduction,
) -> Result<Var> {
    let zs = g.value(z).shape().to_vec();
    if zs.len() != 2 || zs[0] != ids.len() {
        return Err(Error::InvalidShape {
            op: "contrastive_loss",
            shape: zs,
            reason: format!("expected (2N, D) with 2N = {}", ids.len()),
        });
    }
    if temperature <= 0.0 {
        return Err(Error::Domain {
            op: "contrastive_loss",
            reason: format!("temperature must be positive, got {temperature}"),
        });
    }
    check_anchors_have_positives(ids)?;
    let n = ids.len();

    // constant positive-weight matrix: W[i][j] = 1/d_i for positives of i
    let mut wmat = vec![0.0; n * n];
    let mut wrow = vec![0.0; n];
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && ids[j] == ids[i])
            .collect();
        let d = divisor(positives.len(), convention);
        for j in positives.iter() {
            wmat[i * n + j] = 1.0 / d;
        }
        wrow[i] = positives.len() as f64 / d;
    }
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        mask[i * n + i] = DIAG_MASK;
    }

    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let scaled = g.scale(sim, 1.0 / temperature);
    let mask = g.constant(Tensor::matrix(n, n, mask)?);
    let masked = g.add(scaled, mask)?;

    let lse = g.log_sum_exp_rows(masked)?;
    let wvec = g.constant(Tensor::new(vec![n], wrow)?);
    let weighted_lse = g.mul(lse, wvec)?;
    let lse_term = g.sum_all(weighted_lse)?;

    let wmat = g.constant(Tensor::matrix(n, n, wmat)?);
    let weighted_pos = g.mul(masked, wmat)?;
    let pos_term = g.sum_all(weighted_pos)?;

    let total = g.sub(lse_term, pos_term)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, 1.0 / n as f64),
    })
}

/// Multi-view contrastive loss: one positive group per view-invariant id.
pub fn multiview_contrastive_loss(
    g: &mut Graph,
    z: Var,
    view_ids: &[i64],
    temperature: f64,
    convention: PositiveCountConvention,
    reduction: Reduction,
) -> Result<Var> {
    grouped_contrastive_loss(g, z, view_ids, temperature, convention, reduction)
}

/// NT-Xent-style pairwise loss: each anchor's sole positive is its pair.
/// `pair_ids` must mark exactly two rows per id.
pub fn simclr_loss(g: &mut Graph, z: Var, pair_ids: &[i64], temperature: f64) -> Result<Var> {
    for (i, id) in pair_ids.iter().enumerate() {
        let count = pair_ids.iter().filter(|other| *other == id).count();
        if count != 2 {
            return Err(Error::Domain {
                op: "simclr_loss",
                reason: format!("anchor {i} (id {id}) must have exactly one pair, found {count} rows"),
            });
        }
    }
    grouped_contrastive_loss(
        g,
        z,
        pair_ids,
        temperature,
        PositiveCountConvention::Originals,
        Reduction::Sum,
    )
}

/// Supervised contrastive loss: class labels act as the group ids.
pub fn supcon_loss(
    g: &mut Graph,
    z: Var,
    class_labels: &[i64],
    temperature: f64,
    convention: PositiveCountConvention,
    reduction: Reduction,
) -> Result<Var> {
    grouped_contrastive_loss(g, z, class_labels, temperature, convention, reduction)
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            shape,
            reason: format!("expected (batch, classes) with batch = {}", labels.len()),
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; batch * classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Domain {
                op: "cross_entropy",
                reason: format!("label {label} out of range for {classes} classes"),
            });
        }
        onehot[i * classes + label] = 1.0;
    }
    let lse = g.log_sum_exp_rows(logits)?;
    let lse_sum = g.sum_all(lse)?;
    let onehot = g.constant(Tensor::matrix(batch, classes, onehot)?);
    let picked = g.mul(logits, onehot)?;
    let picked_sum = g.sum_all(picked)?;
    let diff = g.sub(lse_sum, picked_sum)?;
    Ok(g.scale(diff, 1.0 / batch as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use crate::tensor::gradcheck;
    use rand::Rng;

    pub(crate) fn random_unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let row = &mut data[r * d..(r + 1) * d];
            loop {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-3 {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
        }
        Tensor::matrix(n, d, data).unwrap()
    }

    fn eval_loss(z: &Tensor, ids: &[i64], tau: f64, convention: PositiveCountConvention) -> f64 {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let loss = grouped_contrastive_loss(&mut g, zv, ids, tau, convention, Reduction::Sum).unwrap();
        g.value(loss).item().unwrap()
    }

    fn oracle_loss(z: &Tensor, ids: &[i64], tau: f64, convention: PositiveCountConvention) -> f64 {
        let rows: Vec<&[f64]> = (0..z.shape()[0]).map(|r| z.row(r)).collect();
        oracle::grouped_contrastive(&rows, ids, tau, convention)
    }

    #[test]
    fn two_row_batch_is_exactly_zero() {
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        assert_eq!(
            eval_loss(&z, &[3, 3], 0.1, PositiveCountConvention::Originals),
            0.0
        );
    }

    #[test]
    fn matches_oracle_on_randomized_batches() {
        let mut rng = seeds::rng(11, "loss-oracle", &[]);
        for case in 0..100u64 {
            let originals = rng.gen_range(1..=16usize);
            let n = 2 * originals;
            let d = rng.gen_range(2..=8usize);
            let tau = rng.gen_range(0.1..1.0);
            let z = random_unit_rows(n, d, &mut rng);
            // pair ids with random group merges
            let groups = rng.gen_range(1..=originals);
            let mut ids = Vec::with_capacity(n);
            for s in 0..originals {
                let gid = (s % groups) as i64;
                ids.push(gid);
                ids.push(gid);
            }
            for convention in [
                PositiveCountConvention::Originals,
                PositiveCountConvention::Augmented,
            ] {
                let fast = eval_loss(&z, &ids, tau, convention);
                let slow = oracle_loss(&z, &ids, tau, convention);
                assert!(
                    (fast - slow).abs() < 1e-9,
                    "case {case}: {fast} vs {slow} (2N={n}, groups={groups})"
                );
            }
        }
    }

    #[test]
    fn singleton_groups_equal_simclr() {
        let mut rng = seeds::rng(13, "loss-simclr", &[]);
        for _ in 0..20 {
            let originals = rng.gen_range(1..=8usize);
            let n = 2 * originals;
            let z = random_unit_rows(n, 4, &mut rng);
            let ids: Vec<i64> = (0..originals as i64).flat_map(|s| [s, s]).collect();
            let mut g1 = Graph::new();
            let zv = g1.constant(z.clone());
            let a = multiview_contrastive_loss(
                &mut g1,
                zv,
                &ids,
                0.5,
                PositiveCountConvention::Originals,
                Reduction::Sum,
            )
            .unwrap();
            let mut g2 = Graph::new();
            let zv = g2.constant(z.clone());
            let b = simclr_loss(&mut g2, zv, &ids, 0.5).unwrap();
            assert_eq!(
                g1.value(a).item().unwrap(),
                g2.value(b).item().unwrap()
            );
        }
    }

    #[test]
    fn supcon_is_label_substitution() {
        let mut rng = seeds::rng(17, "loss-supcon", &[]);
        let z = random_unit_rows(12, 5, &mut rng);
        let labels: Vec<i64> = vec![0, 0, 1, 1, 0, 0, 2, 2, 1, 1, 2, 2];
        let mut g1 = Graph::new();
        let zv = g1.constant(z.clone());
        let a = supcon_loss(
            &mut g1,
            zv,
            &labels,
            0.3,
            PositiveCountConvention::Originals,
            Reduction::Sum,
        )
        .unwrap();
        let mut g2 = Graph::new();
        let zv = g2.constant(z.clone());
        let b = multiview_contrastive_loss(
            &mut g2,
            zv,
            &labels,
            0.3,
            PositiveCountConvention::Originals,
            Reduction::Sum,
        )
        .unwrap();
        assert_eq!(g1.value(a).item().unwrap(), g2.value(b).item().unwrap());
    }

    #[test]
    fn anchor_without_positive_is_an_error() {
        let mut g = Graph::new();
        let z = g.constant(random_unit_rows(3, 4, &mut seeds::rng(1, "t", &[])));
        let err = grouped_contrastive_loss(
            &mut g,
            z,
            &[0, 0, 7],
            0.1,
            PositiveCountConvention::Originals,
            Reduction::Sum,
        )
        .unwrap_err();
        assert!(err.to_string().contains("anchor 2"));
    }

    #[test]
    fn non_positive_temperature_is_an_error() {
        let mut g = Graph::new();
        let z = g.constant(random_unit_rows(4, 4, &mut seeds::rng(2, "t", &[])));
        assert!(grouped_contrastive_loss(
            &mut g,
            z,
            &[0, 0, 1, 1],
            0.0,
            PositiveCountConvention::Originals,
            Reduction::Sum,
        )
        .is_err());
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = seeds::rng(23, "loss-perm", &[]);
        let z = random_unit_rows(8, 4, &mut rng);
        let ids = vec![0, 0, 1, 1, 0, 0, 1, 1];
        let base = eval_loss(&z, &ids, 0.4, PositiveCountConvention::Originals);

        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let mut zp = vec![0.0; 8 * 4];
        let mut idsp = vec![0i64; 8];
        for (new_r, &old_r) in perm.iter().enumerate() {
            zp[new_r * 4..(new_r + 1) * 4].copy_from_slice(z.row(old_r));
            idsp[new_r] = ids[old_r];
        }
        let permuted = eval_loss(
            &Tensor::matrix(8, 4, zp).unwrap(),
            &idsp,
            0.4,
            PositiveCountConvention::Originals,
        );
        assert!((base - permuted).abs() < 1e-12, "{base} vs {permuted}");
    }

    #[test]
    fn collapsed_rows_hit_closed_form() {
        // all rows identical: loss = 2N * ln(2N - 1) under the originals convention
        let n = 8;
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(&[0.0, 0.0, 1.0]);
        }
        let z = Tensor::matrix(n, 3, data).unwrap();
        let ids = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let loss = eval_loss(&z, &ids, 0.1, PositiveCountConvention::Originals);
        let expect = n as f64 * ((n - 1) as f64).ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn infinite_temperature_limit() {
        // as tau -> inf every softmax entry approaches 1/(2N-1)
        let mut rng = seeds::rng(29, "loss-tau", &[]);
        let n = 12;
        let z = random_unit_rows(n, 6, &mut rng);
        let ids = vec![0, 0, 0, 0, 1, 1, 2, 2, 2, 2, 1, 1];
        let loss = eval_loss(&z, &ids, 1e6, PositiveCountConvention::Originals);
        let expect = n as f64 * ((n - 1) as f64).ln();
        assert!((loss - expect).abs() < 1e-3, "{loss} vs {expect}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = seeds::rng(31, "loss-grad", &[]);
        let z = random_unit_rows(8, 4, &mut rng);
        let ids = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let report = gradcheck::check_gradients(
            &[z],
            |g, v| {
                // include the row normalization so the full projection-to-loss
                // path is differentiated
                let zn = g.l2_normalize_rows(v[0])?;
                grouped_contrastive_loss(
                    g,
                    zn,
                    &ids,
                    0.1,
                    PositiveCountConvention::Originals,
                    Reduction::Sum,
                )
            },
            gradcheck::DEFAULT_STEP,
            gradcheck::DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn mirrored_duplicate_batch_has_mirrored_gradients() {
        // duplicating Z and swapping the two group ids maps the batch onto
        // itself, so gradients must repeat across the two halves
        let mut rng = seeds::rng(37, "loss-mirror", &[]);
        let half = random_unit_rows(4, 3, &mut rng);
        let mut data = half.data().to_vec();
        data.extend_from_slice(half.data());
        let z = Tensor::matrix(8, 3, data).unwrap();
        let ids = vec![0, 0, 1, 1, 1, 1, 0, 0];

        let mut g = Graph::new();
        let zv = g.param(z);
        let loss = grouped_contrastive_loss(
            &mut g,
            zv,
            &ids,
            0.2,
            PositiveCountConvention::Originals,
            Reduction::Sum,
        )
        .unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(zv).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let a = grad.data()[r * 3 + c];
                let b = grad.data()[(r + 4) * 3 + c];
                assert!((a - b).abs() < 1e-12, "row {r} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mean_reduction_divides_by_anchor_count() {
        let mut rng = seeds::rng(41, "loss-mean", &[]);
        let z = random_unit_rows(6, 4, &mut rng);
        let ids = vec![0, 0, 0, 0, 1, 1];
        let sum = eval_loss(&z, &ids, 0.2, PositiveCountConvention::Originals);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let mean = grouped_contrastive_loss(
            &mut g,
            zv,
            &ids,
            0.2,
            PositiveCountConvention::Originals,
            Reduction::Mean,
        )
        .unwrap();
        assert!((g.value(mean).item().unwrap() - sum / 6.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_confident_limits() {
        // uniform logits, E=4 -> ln 4
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(2, 4, vec![0.0; 8]).unwrap());
        let loss = cross_entropy_loss(&mut g, logits, &[1, 3]).unwrap();
        assert!((g.value(loss).item().unwrap() - 4.0f64.ln()).abs() < 1e-12);

        // large logit on the correct class -> loss ~ 0
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 3, vec![-50.0, 50.0, -50.0]).unwrap());
        let loss = cross_entropy_loss(&mut g, logits, &[1]).unwrap();
        assert!(g.value(loss).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_summation() {
        let mut rng = seeds::rng(43, "ce", &[]);
        let batch = 5;
        let classes = 7;
        let data: Vec<f64> = (0..batch * classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let t = Tensor::matrix(batch, classes, data).unwrap();

        let mut g = Graph::new();
        let logits = g.constant(t.clone());
        let loss = cross_entropy_loss(&mut g, logits, &labels).unwrap();

        let rows: Vec<&[f64]> = (0..batch).map(|r| t.row(r)).collect();
        let direct = oracle::cross_entropy(&rows, &labels);
        assert!((g.value(loss).item().unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(cross_entropy_loss(&mut g, logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = seeds::rng(47, "ce-grad", &[]);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = vec![2, 0, 1];
        let report = gradcheck::check_gradients(
            &[Tensor::matrix(3, 4, data).unwrap()],
            |g, v| cross_entropy_loss(g, v[0], &labels),
            gradcheck::DEFAULT_STEP,
            gradcheck::DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn batch_input_validation() {
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(ContrastiveBatchInput::new(z.clone(), vec![0, 0], 0.1).is_ok());
        assert!(ContrastiveBatchInput::new(z.clone(), vec![0, 1], 0.1).is_err());
        assert!(ContrastiveBatchInput::new(z.clone(), vec![0, 0], -1.0).is_err());
        let bad = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(ContrastiveBatchInput::new(bad, vec![0, 0], 0.1).is_err());
    }

    #[test]
    fn simclr_requires_exact_pairs() {
        let mut g = Graph::new();
        let z = g.constant(random_unit_rows(4, 3, &mut seeds::rng(5, "t", &[])));
        assert!(simclr_loss(&mut g, z, &[0, 0, 0, 0], 0.1).is_err());
    }
}
