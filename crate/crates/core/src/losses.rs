//! The three-term objective: contrastive alignment, compactness toward hard
//! assignments, and a separation penalty over prototype pairs, plus the
//! KL-to-uniform diagnostic the separation term is derived from.

use crate::diffcore::{DenseMatrix, Tape, VarId};
use crate::error::{Error, Result};
use crate::protogen::PrototypeSet;
use serde::{Deserialize, Serialize};

/// One evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub align: f64,
    pub comp: f64,
    pub sep: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// total = align + lambda1 * comp + lambda2 * sep.
pub fn total_loss(align: f64, comp: f64, sep: f64, lambda1: f64, lambda2: f64) -> Result<LossTerms> {
    if lambda1 < 0.0 {
        return Err(Error::NegativeLossWeight(lambda1));
    }
    if lambda2 < 0.0 {
        return Err(Error::NegativeLossWeight(lambda2));
    }
    Ok(LossTerms {
        align,
        comp,
        sep,
        total: align + lambda1 * comp + lambda2 * sep,
        lambda1,
        lambda2,
    })
}

/// Checks labels are 1-based and within K, returning 0-based indices.
pub fn labels_to_indices(labels: &[u16], k: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            if l == 0 || l as usize > k {
                Err(Error::InvalidLabel {
                    label: l,
                    classes: k,
                })
            } else {
                Ok((l - 1) as usize)
            }
        })
        .collect()
}

/// Contrastive alignment on the tape:
/// -(1/N) sum_i ln( exp(cos(f_i, p_{y_i})) / sum_j exp(cos(f_i, p_j)) ).
/// `prototypes` rows must be unit-norm already; features are normalized here.
pub fn align_loss_on_tape(
    tape: &mut Tape,
    features: VarId,
    prototypes: VarId,
    labels: &[u16],
) -> Result<VarId> {
    let k = tape.value(prototypes).rows;
    let idx = labels_to_indices(labels, k)?;
    if idx.len() != tape.value(features).rows {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} feature rows",
            idx.len(),
            tape.value(features).rows
        )));
    }
    for i in 0..tape.value(features).rows {
        let norm: f64 = tape.value(features).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateFeature(i));
        }
    }
    let fn_ = tape.normalize_rows(features)?;
    let cos = tape.matmul_transpose_b(fn_, prototypes)?;
    let probs = tape.softmax_rows(cos, 1.0)?;
    let picked = tape.gather_cols(probs, idx)?;
    let logp = tape.ln(picked)?;
    let mean = tape.mean(logp)?;
    tape.scale(mean, -1.0)
}

/// Squared Frobenius distance between features and their hard-assigned
/// prototypes: ||H - Q P||^2. `hard` must be registered as a constant by the
/// caller; gradients stop at it.
pub fn compactness_on_tape(
    tape: &mut Tape,
    features: VarId,
    hard: VarId,
    prototypes: VarId,
) -> Result<VarId> {
    let assigned = tape.matmul(hard, prototypes)?;
    let diff = tape.sub(features, assigned)?;
    tape.frobenius_sq(diff)
}

/// Separation over ordered pairs: sum_{i != j} exp(-||p_i - p_j||^2). The
/// diagonal contributes exp(0) = 1 per row and is subtracted off.
pub fn separation_on_tape(tape: &mut Tape, prototypes: VarId) -> Result<VarId> {
    let k = tape.value(prototypes).rows;
    if k < 2 {
        return Err(Error::DimensionMismatch(format!(
            "separation needs K >= 2, got {k}"
        )));
    }
    let d = tape.pairwise_sq_dist(prototypes)?;
    let neg = tape.scale(d, -1.0)?;
    let e = tape.exp(neg)?;
    let s = tape.sum(e)?;
    tape.add_scalar(s, -(k as f64))
}

/// Plain alignment loss.
pub fn align_loss(features: &DenseMatrix, prototypes: &PrototypeSet, labels: &[u16]) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone())?;
    let p = tape.constant(prototypes.vectors.clone())?;
    let loss = align_loss_on_tape(&mut tape, f, p, labels)?;
    Ok(tape.value(loss).data[0])
}

/// Plain compactness loss.
pub fn compactness_loss(
    features: &DenseMatrix,
    hard: &DenseMatrix,
    prototypes: &PrototypeSet,
) -> Result<f64> {
    for (i, row) in (0..hard.rows).map(|i| (i, hard.row(i))) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::InvalidConfig(format!(
                "assignment row {i} is not one-hot"
            )));
        }
    }
    let mut tape = Tape::new();
    let f = tape.constant(features.clone())?;
    let q = tape.constant(hard.clone())?;
    let p = tape.constant(prototypes.vectors.clone())?;
    let loss = compactness_on_tape(&mut tape, f, q, p)?;
    Ok(tape.value(loss).data[0])
}

/// Row-stochastic affinity over the off-diagonal:
/// p_ij = exp(-||p_i - p_j||^2) / sum_{k != i} exp(-||p_i - p_k||^2).
pub fn prototype_affinity(prototypes: &PrototypeSet) -> Result<DenseMatrix> {
    if prototypes.k() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "affinity needs K >= 2, got {}",
            prototypes.k()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.constant(prototypes.vectors.clone())?;
    let d = tape.pairwise_sq_dist(p)?;
    let aff = tape.affinity_from_sq_dist(d)?;
    Ok(tape.value(aff).clone())
}

/// (1/K) sum_k KL(row_k || uniform over the K-1 alternatives). Reported, not
/// trained.
pub fn kl_uniformity(affinity: &DenseMatrix) -> Result<f64> {
    let k = affinity.rows;
    if k < 2 || affinity.cols != k {
        return Err(Error::DimensionMismatch(format!(
            "affinity must be KxK with K >= 2, got {}x{}",
            affinity.rows, affinity.cols
        )));
    }
    let u = 1.0 / (k as f64 - 1.0);
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if j != i {
                let p = affinity.get(i, j);
                if p > 0.0 {
                    total += p * (p / u).ln();
                }
            }
        }
    }
    Ok(total / k as f64)
}

/// Plain separation loss.
pub fn separation_loss(prototypes: &PrototypeSet) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(prototypes.vectors.clone())?;
    let loss = separation_on_tape(&mut tape, p)?;
    Ok(tape.value(loss).data[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protogen::Strategy;
    use rand::Rng;

    fn protos(rows: &[Vec<f64>]) -> PrototypeSet {
        PrototypeSet {
            vectors: DenseMatrix::from_rows(rows).unwrap(),
            strategy: Strategy::Codebook,
        }
    }

    fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
        let data: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let row: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                row.iter().map(|v| v / norm).collect()
            })
            .collect();
        DenseMatrix::from_rows(&data).unwrap()
    }

    #[test]
    fn align_perfectly_matched_two_class_value() {
        let p = protos(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let f = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let loss = align_loss(&f, &p, &[1, 2]).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn align_equidistant_gives_log_k() {
        // A feature orthogonal to all prototypes has equal cosine to each.
        let p = protos(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let f = DenseMatrix::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let loss = align_loss(&f, &p, &[1]).unwrap();
        assert!((loss - (2.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn align_matches_scalar_oracle() {
        let mut rng = crate::rng::stream(31, "samples");
        let f = unit_rows(&mut rng, 8, 6);
        let p = PrototypeSet {
            vectors: unit_rows(&mut rng, 4, 6),
            strategy: Strategy::Codebook,
        };
        let labels: Vec<u16> = (0..8).map(|_| rng.random_range(1..=4)).collect();
        let fast = align_loss(&f, &p, &labels).unwrap();
        let mut total = 0.0;
        for i in 0..8 {
            let mut cos = vec![0.0; 4];
            for k in 0..4 {
                let mut dot = 0.0;
                let mut nf = 0.0;
                let mut np = 0.0;
                for j in 0..6 {
                    dot += f.get(i, j) * p.vectors.get(k, j);
                    nf += f.get(i, j) * f.get(i, j);
                    np += p.vectors.get(k, j) * p.vectors.get(k, j);
                }
                cos[k] = dot / (nf.sqrt() * np.sqrt());
            }
            let denom: f64 = cos.iter().map(|c| c.exp()).sum();
            total -= (cos[(labels[i] - 1) as usize].exp() / denom).ln();
        }
        assert!((fast - total / 8.0).abs() < 1e-12);
    }

    #[test]
    fn align_flags_zero_feature() {
        let p = protos(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let f = DenseMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let err = align_loss(&f, &p, &[1]).unwrap_err();
        assert!(err.to_string().contains("degenerate feature"));
    }

    #[test]
    fn align_flags_bad_label() {
        let p = protos(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let f = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(align_loss(&f, &p, &[0]).is_err());
        assert!(align_loss(&f, &p, &[3]).is_err());
    }

    #[test]
    fn compactness_identity_and_analytic() {
        let p = protos(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let hard = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(compactness_loss(&f, &hard, &p).unwrap(), 0.0);

        let p0 = protos(&[vec![0.0, 0.0], vec![0.0, 1.0]]);
        let f1 = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let h1 = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!((compactness_loss(&f1, &h1, &p0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn compactness_matches_per_row_oracle() {
        let mut rng = crate::rng::stream(33, "samples");
        let f = unit_rows(&mut rng, 10, 4);
        let p = PrototypeSet {
            vectors: unit_rows(&mut rng, 3, 4),
            strategy: Strategy::Codebook,
        };
        let mut hard = DenseMatrix::zeros(10, 3);
        let assigned: Vec<usize> = (0..10).map(|_| rng.random_range(0..3)).collect();
        for (i, &a) in assigned.iter().enumerate() {
            hard.set(i, a, 1.0);
        }
        let fast = compactness_loss(&f, &hard, &p).unwrap();
        let mut oracle = 0.0;
        for i in 0..10 {
            for j in 0..4 {
                let diff = f.get(i, j) - p.vectors.get(assigned[i], j);
                oracle += diff * diff;
            }
        }
        assert!((fast - oracle).abs() < 1e-12);
    }

    #[test]
    fn compactness_is_permutation_invariant() {
        let mut rng = crate::rng::stream(34, "samples");
        let f = unit_rows(&mut rng, 6, 4);
        let p = PrototypeSet {
            vectors: unit_rows(&mut rng, 3, 4),
            strategy: Strategy::Codebook,
        };
        let mut hard = DenseMatrix::zeros(6, 3);
        for i in 0..6 {
            hard.set(i, i % 3, 1.0);
        }
        let base = compactness_loss(&f, &hard, &p).unwrap();
        let perm = [3usize, 0, 4, 1, 5, 2];
        let mut f2 = DenseMatrix::zeros(6, 4);
        let mut h2 = DenseMatrix::zeros(6, 3);
        for (to, &from) in perm.iter().enumerate() {
            f2.row_mut(to).copy_from_slice(f.row(from));
            h2.row_mut(to).copy_from_slice(hard.row(from));
        }
        let permuted = compactness_loss(&f2, &h2, &p).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn affinity_pairwise_cases() {
        let p2 = protos(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a2 = prototype_affinity(&p2).unwrap();
        assert!((a2.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((a2.get(1, 0) - 1.0).abs() < 1e-15);

        let p3 = protos(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let a3 = prototype_affinity(&p3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 0.5 };
                assert!((a3.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affinity_matches_scalar_oracle() {
        let mut rng = crate::rng::stream(35, "samples");
        let p = PrototypeSet {
            vectors: unit_rows(&mut rng, 5, 4),
            strategy: Strategy::Codebook,
        };
        let a = prototype_affinity(&p).unwrap();
        for i in 0..5 {
            let row_sum: f64 = a.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            let mut denom = 0.0;
            for k in 0..5 {
                if k != i {
                    let mut d = 0.0;
                    for j in 0..4 {
                        let diff = p.vectors.get(i, j) - p.vectors.get(k, j);
                        d += diff * diff;
                    }
                    denom += (-d).exp();
                }
            }
            for k in 0..5 {
                if k != i {
                    let mut d = 0.0;
                    for j in 0..4 {
                        let diff = p.vectors.get(i, j) - p.vectors.get(k, j);
                        d += diff * diff;
                    }
                    let expect = (-d).exp() / denom;
                    assert!((a.get(i, k) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn kl_zero_on_equidistant_sets_and_k2() {
        let p3 = protos(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let kl = kl_uniformity(&prototype_affinity(&p3).unwrap()).unwrap();
        assert!(kl.abs() < 1e-12);

        let p2 = protos(&[vec![1.0, 0.0], vec![0.6, 0.8]]);
        let kl2 = kl_uniformity(&prototype_affinity(&p2).unwrap()).unwrap();
        assert!(kl2.abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_and_matches_scalar_oracle() {
        let mut rng = crate::rng::stream(36, "samples");
        for _ in 0..20 {
            let p = PrototypeSet {
                vectors: unit_rows(&mut rng, 4, 3),
                strategy: Strategy::Codebook,
            };
            let a = prototype_affinity(&p).unwrap();
            let kl = kl_uniformity(&a).unwrap();
            assert!(kl >= -1e-15);
            let u = 1.0 / 3.0;
            let mut oracle = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        let v = a.get(i, j);
                        oracle += v * (v / u).ln();
                    }
                }
            }
            oracle /= 4.0;
            assert!((kl - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn separation_analytic_cases() {
        let identical = protos(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!((separation_loss(&identical).unwrap() - 2.0).abs() < 1e-12);

        let ortho = protos(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let expect = 6.0 * (-2.0_f64).exp();
        assert!((separation_loss(&ortho).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn separation_matches_double_loop_oracle() {
        let mut rng = crate::rng::stream(37, "samples");
        let p = PrototypeSet {
            vectors: unit_rows(&mut rng, 6, 8),
            strategy: Strategy::Codebook,
        };
        let fast = separation_loss(&p).unwrap();
        let mut oracle = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    let mut d = 0.0;
                    for c in 0..8 {
                        let diff = p.vectors.get(i, c) - p.vectors.get(j, c);
                        d += diff * diff;
                    }
                    oracle += (-d).exp();
                }
            }
        }
        assert!((fast - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_combination_rules() {
        let t = total_loss(1.0, 2.0, 3.0, 0.01, 0.01).unwrap();
        assert!((t.total - 1.05).abs() < 1e-15);
        let t0 = total_loss(0.7, 9.0, 9.0, 0.0, 0.0).unwrap();
        assert_eq!(t0.total, t0.align);
        assert!(total_loss(1.0, 1.0, 1.0, -0.1, 0.0).is_err());
        assert!(total_loss(1.0, 1.0, 1.0, 0.0, -1e-9).is_err());
    }

    #[test]
    fn loss_terms_internal_consistency() {
        let mut rng = crate::rng::stream(38, "samples");
        for _ in 0..50 {
            let a = rng.random_range(0.0..2.0);
            let c = rng.random_range(0.0..5.0);
            let s = rng.random_range(0.0..5.0);
            let t = total_loss(a, c, s, 0.01, 0.01).unwrap();
            assert!((t.total - (t.align + t.lambda1 * t.comp + t.lambda2 * t.sep)).abs() < 1e-12);
        }
    }
}
