//! Differentiable prototype assignment: similarity to soft probabilities,
//! Gumbel-Softmax relaxation, quantized features, and hard one-hot picks.

use crate::diffcore::{softmax_rows, DenseMatrix};
use crate::error::{Error, Result};
use crate::protogen::PrototypeSet;
use rand::Rng;

/// One assignment pass over a batch: similarities, soft probabilities, the
/// relaxed sample, and the hard pick.
#[derive(Debug, Clone)]
pub struct AssignmentTensors {
    pub s: DenseMatrix,
    pub probs: DenseMatrix,
    pub y: DenseMatrix,
    pub hard: DenseMatrix,
    pub tau: f64,
}

/// Soft assignment probabilities: row-wise softmax of the similarities at
/// temperature 1.
pub fn assignment_probs(s: &DenseMatrix) -> Result<DenseMatrix> {
    softmax_rows(s, 1.0)
}

/// Uniform noise in (0,1), clamped away from the endpoints so the double log
/// stays finite.
pub fn sample_uniform_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random::<f64>().clamp(1e-10, 1.0 - 1e-10))
        .collect();
    DenseMatrix { rows, cols, data }
}

/// Gumbel offsets g = -ln(-ln eps). Values outside (0,1) are rejected;
/// values inside are clamped to [1e-10, 1-1e-10] before the double log.
pub fn gumbel_from_uniform(eps: &DenseMatrix) -> Result<DenseMatrix> {
    if let Some(&bad) = eps.data.iter().find(|v| !(0.0 < **v && **v < 1.0)) {
        return Err(Error::InvalidNoise(bad));
    }
    Ok(eps.map(|e| -(-(e.clamp(1e-10, 1.0 - 1e-10)).ln()).ln()))
}

/// Relaxed categorical sample: softmax over k of (ln q_ik + g_ik) / tau with
/// the noise held constant. Rows of `probs` must be distributions.
pub fn gumbel_softmax(probs: &DenseMatrix, tau: f64, eps: &DenseMatrix) -> Result<DenseMatrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    if (probs.rows, probs.cols) != (eps.rows, eps.cols) {
        return Err(Error::DimensionMismatch(format!(
            "probs {}x{} vs noise {}x{}",
            probs.rows, probs.cols, eps.rows, eps.cols
        )));
    }
    let g = gumbel_from_uniform(eps)?;
    let logits = probs.zip(&g, |q, gv| q.max(1e-300).ln() + gv)?;
    softmax_rows(&logits, tau)
}

/// Noise-free sharpening used at evaluation time: softmax of ln q at tau.
pub fn gumbel_softmax_eval(probs: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let logits = probs.map(|q| q.max(1e-300).ln());
    softmax_rows(&logits, tau)
}

/// One-hot rows at the argmax of each input row; exact ties take the lowest
/// index. Gradients never flow through this.
pub fn hard_assign(y: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(y.rows, y.cols);
    for i in 0..y.rows {
        out.set(i, argmax(y.row(i)), 1.0);
    }
    out
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Quantized features v_i = sum_k y_ik h^T_k.
pub fn quantize(y: &DenseMatrix, prototypes: &PrototypeSet) -> Result<DenseMatrix> {
    if y.cols != prototypes.k() {
        return Err(Error::DimensionMismatch(format!(
            "weights have {} columns for {} prototypes",
            y.cols,
            prototypes.k()
        )));
    }
    y.matmul(&prototypes.vectors)
}

/// Mean over rows of the Shannon entropy -sum p ln p (natural log).
pub fn mean_row_entropy(y: &DenseMatrix) -> f64 {
    if y.rows == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..y.rows {
        let mut h = 0.0;
        for &p in y.row(i) {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
    }
    total / y.rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protogen::Strategy;
    use crate::rng::stream;

    fn const_noise(rows: usize, cols: usize, v: f64) -> DenseMatrix {
        DenseMatrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    #[test]
    fn probs_uniform_and_analytic() {
        let s = DenseMatrix::from_rows(&[vec![0.3, 0.3, 0.3], vec![2.0_f64.ln(), 0.0, f64::NEG_INFINITY.max(-30.0)]]).unwrap();
        let q = assignment_probs(&s).unwrap();
        for &v in q.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let two_thirds = 2.0 / (3.0 + 2.0 * (-30.0f64).exp());
        assert!((q.get(1, 0) - two_thirds).abs() < 1e-9);
    }

    #[test]
    fn probs_keep_argmax_on_random_rows() {
        let mut rng = stream(1, "samples");
        for _ in 0..1000 {
            let row: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let s = DenseMatrix::from_rows(&[row.clone()]).unwrap();
            let q = assignment_probs(&s).unwrap();
            assert_eq!(argmax(&row), argmax(q.row(0)));
        }
    }

    #[test]
    fn equal_noise_cancels_at_tau_one() {
        let probs = DenseMatrix::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]).unwrap();
        let y = gumbel_softmax(&probs, 1.0, &const_noise(2, 3, 0.37)).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((y.get(i, j) - probs.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_noise_reduces_to_sharpened_softmax() {
        let probs = DenseMatrix::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap();
        for tau in [0.3, 0.7, 2.0] {
            let y = gumbel_softmax(&probs, tau, &const_noise(1, 3, 0.9)).unwrap();
            let expect = gumbel_softmax_eval(&probs, tau).unwrap();
            for j in 0..3 {
                assert!((y.get(0, j) - expect.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = stream(2, "gumbel");
        let probs = assignment_probs(
            &DenseMatrix::from_vec(50, 4, (0..200).map(|_| rng.random_range(-3.0..3.0)).collect())
                .unwrap(),
        )
        .unwrap();
        let eps = sample_uniform_noise(50, 4, &mut rng);
        let y = gumbel_softmax(&probs, 0.5, &eps).unwrap();
        for i in 0..50 {
            let sum: f64 = y.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for &v in y.row(i) {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn monte_carlo_argmax_matches_probabilities() {
        // Gumbel-max: at tiny tau the argmax of the relaxed sample follows
        // the categorical distribution q.
        let q = [0.2, 0.3, 0.5];
        let probs = DenseMatrix::from_rows(&[q.to_vec()]).unwrap();
        let mut rng = stream(7, "gumbel");
        let draws = 100_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let eps = sample_uniform_noise(1, 3, &mut rng);
            let y = gumbel_softmax(&probs, 0.01, &eps).unwrap();
            counts[argmax(y.row(0))] += 1;
        }
        for k in 0..3 {
            let freq = counts[k] as f64 / draws as f64;
            assert!(
                (freq - q[k]).abs() < 0.01,
                "class {k}: frequency {freq} vs probability {}",
                q[k]
            );
        }
    }

    #[test]
    fn entropy_non_increasing_as_tau_decreases() {
        let mut rng = stream(9, "gumbel");
        let probs = DenseMatrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        for _ in 0..20 {
            let eps = sample_uniform_noise(1, 4, &mut rng);
            let mut last = f64::INFINITY;
            for tau in [5.0, 3.0, 1.0, 0.5, 0.3, 0.1] {
                let y = gumbel_softmax(&probs, tau, &eps).unwrap();
                let h = mean_row_entropy(&y);
                assert!(
                    h <= last + 1e-12,
                    "entropy rose from {last} to {h} at tau {tau}"
                );
                last = h;
            }
        }
    }

    #[test]
    fn tiny_tau_converges_to_noisy_argmax() {
        let mut rng = stream(10, "gumbel");
        let probs = DenseMatrix::from_rows(&[vec![0.25, 0.25, 0.5], vec![0.9, 0.05, 0.05]]).unwrap();
        let eps = sample_uniform_noise(2, 3, &mut rng);
        let g = gumbel_from_uniform(&eps).unwrap();
        let y = gumbel_softmax(&probs, 1e-4, &eps).unwrap();
        for i in 0..2 {
            let noisy: Vec<f64> = (0..3)
                .map(|j| probs.get(i, j).ln() + g.get(i, j))
                .collect();
            let expect = argmax(&noisy);
            for j in 0..3 {
                let target = if j == expect { 1.0 } else { 0.0 };
                assert!((y.get(i, j) - target).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn noise_validation() {
        let probs = DenseMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        for bad in [0.0, 1.0, -0.2, 1.7] {
            let err = gumbel_softmax(&probs, 1.0, &const_noise(1, 2, bad)).unwrap_err();
            assert!(err.to_string().contains("outside (0,1)"), "{bad}");
        }
        assert!(gumbel_softmax(&probs, 0.0, &const_noise(1, 2, 0.5)).is_err());
        assert!(gumbel_softmax(&probs, -1.0, &const_noise(1, 2, 0.5)).is_err());
    }

    #[test]
    fn hard_assign_rules() {
        let y = DenseMatrix::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.5, 0.5]
            .into_iter()
            .chain([0.0])
            .collect()])
        .unwrap();
        let q = hard_assign(&y);
        assert_eq!(q.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(q.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn hard_assign_matches_scalar_loop() {
        let mut rng = stream(12, "samples");
        for _ in 0..1000 {
            let row: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let q = hard_assign(&DenseMatrix::from_rows(&[row.clone()]).unwrap());
            let mut best = 0;
            for j in 1..6 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            for j in 0..6 {
                assert_eq!(q.get(0, j), if j == best { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn quantize_identity_uniform_and_blend() {
        let prototypes = PrototypeSet {
            vectors: DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            strategy: Strategy::Codebook,
        };
        let y = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap();
        let v = quantize(&y, &prototypes).unwrap();
        assert_eq!(v.row(0), &[1.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5]);
        assert_eq!(v.row(2), &[0.25, 0.75]);
    }

    #[test]
    fn shift_invariance_of_probs_and_hard_pick() {
        let mut rng = stream(14, "samples");
        for _ in 0..50 {
            let row: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c: f64 = rng.random_range(-10.0..10.0);
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let q1 = assignment_probs(&DenseMatrix::from_rows(&[row.clone()]).unwrap()).unwrap();
            let q2 = assignment_probs(&DenseMatrix::from_rows(&[shifted]).unwrap()).unwrap();
            for j in 0..4 {
                assert!((q1.get(0, j) - q2.get(0, j)).abs() < 1e-9);
            }
            assert_eq!(argmax(q1.row(0)), argmax(q2.row(0)));
        }
    }
}
