//! Synthetic feature generation on the unit sphere, few-shot splits, the
//! trainable adapter standing in for encoder fine-tuning, and the binary
//! embedding file format.
//!
//! Generated feature values are rounded through f32 so that a dataset written
//! to disk and read back is bit-identical to the in-memory original.

use crate::diffcore::{DenseMatrix, Tape, VarId};
use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCQE";
const FORMAT_VERSION: u16 = 1;

/// Parameters of one synthetic dataset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub k: usize,
    pub d: usize,
    pub n_per_class: usize,
    /// Angular noise std in radians around each class mean.
    pub intra_spread: f64,
    /// Minimum pairwise angle in radians between class means.
    pub inter_separation: f64,
    pub seed: u64,
}

/// Unit-norm feature rows with 1-based class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFeatures {
    pub features: DenseMatrix,
    pub labels: Vec<u16>,
}

impl LabeledFeatures {
    pub fn n(&self) -> usize {
        self.features.rows
    }

    pub fn d(&self) -> usize {
        self.features.cols
    }

    /// Highest label value; classes are 1..=k.
    pub fn k(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }
}

/// Trainable affine map d -> d initialized at the exact identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adapter {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
    pub enabled: bool,
}

impl Adapter {
    pub fn identity(d: usize, enabled: bool) -> Self {
        let mut weight = DenseMatrix::zeros(d, d);
        for i in 0..d {
            weight.set(i, i, 1.0);
        }
        Self {
            weight,
            bias: DenseMatrix::zeros(1, d),
            enabled,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Places class means by seeded repulsion, then scatters per-class samples by
/// rotating the mean toward a random tangent direction with Gaussian angle.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<LabeledFeatures> {
    if spec.k < 1 || spec.n_per_class < 1 {
        return Err(Error::InvalidConfig(format!(
            "need k >= 1 and n_per_class >= 1, got k={}, n={}",
            spec.k, spec.n_per_class
        )));
    }
    if spec.d < 2 {
        return Err(Error::InvalidConfig(format!("need d >= 2, got {}", spec.d)));
    }
    if spec.intra_spread < 0.0 || spec.inter_separation < 0.0 {
        return Err(Error::InvalidConfig(
            "spread and separation must be nonnegative".into(),
        ));
    }

    let mut mean_rng = stream(spec.seed, "class-means");
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.k);
    let cos_limit = spec.inter_separation.cos();
    let mut attempts = 0usize;
    while means.len() < spec.k {
        if attempts >= PLACEMENT_ATTEMPTS {
            return Err(Error::InfeasibleSeparation {
                placed: means.len(),
                wanted: spec.k,
                min_angle: spec.inter_separation,
                attempts,
            });
        }
        attempts += 1;
        let candidate = round_f32(&random_unit(&mut mean_rng, spec.d));
        let ok = means.iter().all(|m| {
            let cos: f64 = m.iter().zip(&candidate).map(|(a, b)| a * b).sum();
            // Angle >= separation means cosine <= cos(separation).
            cos <= cos_limit + 1e-12
        });
        if ok {
            means.push(candidate);
        }
    }

    let mut sample_rng = stream(spec.seed, "samples");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.k * spec.n_per_class);
    let mut labels: Vec<u16> = Vec::with_capacity(spec.k * spec.n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            let row = if spec.intra_spread == 0.0 {
                mean.clone()
            } else {
                let tangent = random_tangent(&mut sample_rng, mean);
                let theta: f64 = spec.intra_spread
                    * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut sample_rng);
                let (s, cs) = theta.sin_cos();
                let raw: Vec<f64> = mean
                    .iter()
                    .zip(&tangent)
                    .map(|(m, t)| cs * m + s * t)
                    .collect();
                round_f32(&normalize(&raw))
            };
            rows.push(row);
            labels.push((c + 1) as u16);
        }
    }
    Ok(LabeledFeatures {
        features: DenseMatrix::from_rows(&rows)?,
        labels,
    })
}

fn random_unit(rng: &mut impl rand::Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn random_tangent(rng: &mut impl rand::Rng, mean: &[f64]) -> Vec<f64> {
    loop {
        let g = random_unit(rng, mean.len());
        let dot: f64 = g.iter().zip(mean).map(|(a, b)| a * b).sum();
        let t: Vec<f64> = g.iter().zip(mean).map(|(gv, mv)| gv - dot * mv).collect();
        let norm: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return t.iter().map(|x| x / norm).collect();
        }
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// Draws exactly `shots` rows per class into the train split; the rest keep
/// their original order in the test split.
pub fn few_shot_split(
    data: &LabeledFeatures,
    shots: usize,
    seed: u64,
) -> Result<(LabeledFeatures, LabeledFeatures)> {
    let k = data.k();
    if k == 0 {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &label) in data.labels.iter().enumerate() {
        if label == 0 {
            return Err(Error::InvalidLabel {
                label,
                classes: k,
            });
        }
        per_class[(label - 1) as usize].push(i);
    }
    let mut rng = stream(seed, "split");
    let mut chosen = vec![false; data.n()];
    let mut train_idx: Vec<usize> = Vec::with_capacity(k * shots);
    for (c, members) in per_class.iter().enumerate() {
        if members.len() <= shots {
            return Err(Error::InsufficientSamples {
                class: (c + 1) as u16,
                available: members.len(),
                shots,
            });
        }
        let mut pool = members.clone();
        for j in 0..shots {
            let pick = rng.random_range(j..pool.len());
            pool.swap(j, pick);
            chosen[pool[j]] = true;
            train_idx.push(pool[j]);
        }
    }
    let test_idx: Vec<usize> = (0..data.n()).filter(|&i| !chosen[i]).collect();
    Ok((select_rows(data, &train_idx), select_rows(data, &test_idx)))
}

/// Copies the listed rows into a new set, in the given order.
pub fn select_rows(data: &LabeledFeatures, idx: &[usize]) -> LabeledFeatures {
    let mut features = DenseMatrix::zeros(idx.len(), data.d());
    let mut labels = Vec::with_capacity(idx.len());
    for (to, &from) in idx.iter().enumerate() {
        features.row_mut(to).copy_from_slice(data.features.row(from));
        labels.push(data.labels[from]);
    }
    LabeledFeatures { features, labels }
}

/// Adapter forward on the tape: affine map then row renormalization.
pub fn adapter_on_tape(
    tape: &mut Tape,
    features: VarId,
    weight: VarId,
    bias: VarId,
) -> Result<VarId> {
    let mapped = tape.matmul_transpose_b(features, weight)?;
    let shifted = tape.add_row_broadcast(mapped, bias)?;
    tape.normalize_rows(shifted)
}

/// Plain adapter application. A disabled adapter is a bitwise passthrough.
pub fn apply_adapter(data: &DenseMatrix, adapter: &Adapter) -> Result<DenseMatrix> {
    if !adapter.enabled {
        return Ok(data.clone());
    }
    if data.cols != adapter.weight.cols {
        return Err(Error::DimensionMismatch(format!(
            "features {}x{} vs adapter {}x{}",
            data.rows, data.cols, adapter.weight.rows, adapter.weight.cols
        )));
    }
    let mut tape = Tape::new();
    let f = tape.constant(data.clone())?;
    let w = tape.constant(adapter.weight.clone())?;
    let b = tape.constant(adapter.bias.clone())?;
    let out = adapter_on_tape(&mut tape, f, w, b)?;
    Ok(tape.value(out).clone())
}

/// Serializes a matrix (and optional labels) in the embedding file format:
/// magic "PCQE", version u16 LE, rows u32 LE, cols u32 LE, has_labels u8,
/// row-major f32 LE payload, then rows x u16 LE labels if present. The write
/// goes to a temporary file in the target directory and is renamed into
/// place.
pub fn write_matrix(path: &Path, matrix: &DenseMatrix, labels: Option<&[u16]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != matrix.rows {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} rows",
                l.len(),
                matrix.rows
            )));
        }
        if let Some(&bad) = l.iter().find(|&&v| v == 0) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: 0,
            });
        }
    }
    let mut buf: Vec<u8> =
        Vec::with_capacity(15 + matrix.data.len() * 4 + labels.map_or(0, |l| l.len() * 2));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.cols as u32).to_le_bytes());
    buf.push(labels.is_some() as u8);
    for &v in &matrix.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(l) = labels {
        for &v in l {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(&buf)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Reads a matrix and optional labels written by [`write_matrix`].
pub fn read_matrix(path: &Path) -> Result<(DenseMatrix, Option<Vec<u16>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 15 || &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(version, FORMAT_VERSION));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let has_labels = match bytes[14] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::InvalidConfig(format!(
                "has_labels flag must be 0 or 1, found {other}"
            )))
        }
    };
    let expected = 15 + rows * cols * 4 + if has_labels { rows * 2 } else { 0 };
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload {
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut off = 15usize;
    for _ in 0..rows * cols {
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        data.push(v as f64);
        off += 4;
    }
    let labels = if has_labels {
        let mut l = Vec::with_capacity(rows);
        for row in 0..rows {
            let v = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap());
            if v == 0 {
                return Err(Error::LabelOutOfRange { row });
            }
            l.push(v);
            off += 2;
        }
        Some(l)
    } else {
        None
    };
    Ok((DenseMatrix::from_vec(rows, cols, data)?, labels))
}

/// Writes a labeled dataset.
pub fn write_embeddings(path: &Path, data: &LabeledFeatures) -> Result<()> {
    write_matrix(path, &data.features, Some(&data.labels))
}

/// Reads a labeled dataset; a file without labels is rejected.
pub fn read_embeddings(path: &Path) -> Result<LabeledFeatures> {
    let (features, labels) = read_matrix(path)?;
    match labels {
        Some(labels) => Ok(LabeledFeatures { features, labels }),
        None => Err(Error::InvalidConfig(format!(
            "{} has no labels",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn spec(k: usize, d: usize, n: usize, spread: f64, sep: f64, seed: u64) -> DatasetSpec {
        DatasetSpec {
            k,
            d,
            n_per_class: n,
            intra_spread: spread,
            inter_separation: sep,
            seed,
        }
    }

    #[test]
    fn zero_spread_clones_the_class_mean() {
        let data = generate_dataset(&spec(3, 5, 4, 0.0, 0.5, 1)).unwrap();
        for c in 0..3 {
            let first = data.features.row(c * 4).to_vec();
            for i in 0..4 {
                assert_eq!(data.features.row(c * 4 + i), &first[..]);
            }
        }
    }

    #[test]
    fn counts_and_labels() {
        let data = generate_dataset(&spec(4, 6, 7, 0.2, 0.3, 2)).unwrap();
        assert_eq!(data.n(), 28);
        for c in 1..=4u16 {
            assert_eq!(data.labels.iter().filter(|&&l| l == c).count(), 7);
        }
    }

    #[test]
    fn rows_are_unit_norm_and_f32_clean() {
        let data = generate_dataset(&spec(3, 8, 10, 0.4, 0.4, 3)).unwrap();
        for i in 0..data.n() {
            let norm: f64 = data.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            for &v in data.features.row(i) {
                assert_eq!(v, v as f32 as f64);
            }
        }
    }

    #[test]
    fn generation_is_pure() {
        let a = generate_dataset(&spec(5, 12, 9, 0.3, 0.5, 42)).unwrap();
        let b = generate_dataset(&spec(5, 12, 9, 0.3, 0.5, 42)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec(5, 12, 9, 0.3, 0.5, 43)).unwrap();
        assert_ne!(a.features.data, c.features.data);
    }

    #[test]
    fn tight_spec_is_linearly_separable() {
        let data = generate_dataset(&spec(4, 16, 50, 0.05, 1.0, 7)).unwrap();
        // Nearest class mean classifies perfectly at this spread/separation.
        let means = crate::protogen::centroid_prototypes(&data.features, &data.labels, 0).unwrap();
        let mut correct = 0usize;
        for i in 0..data.n() {
            let mut best = 0usize;
            let mut best_cos = f64::NEG_INFINITY;
            for k in 0..4 {
                let cos: f64 = data
                    .features
                    .row(i)
                    .iter()
                    .zip(means.vectors.row(k))
                    .map(|(a, b)| a * b)
                    .sum();
                if cos > best_cos {
                    best_cos = cos;
                    best = k;
                }
            }
            if best + 1 == data.labels[i] as usize {
                correct += 1;
            }
        }
        assert_eq!(correct, data.n());
    }

    #[test]
    fn infeasible_separation_is_reported() {
        // 40 means at >= 120 degrees apart cannot fit on any sphere.
        let err = generate_dataset(&spec(40, 3, 1, 0.0, 2.1, 5)).unwrap_err();
        assert!(err.to_string().contains("infeasible separation"));
    }

    #[test]
    fn split_counts_disjointness_and_determinism() {
        let data = generate_dataset(&spec(4, 6, 10, 0.3, 0.4, 11)).unwrap();
        let (train, test) = few_shot_split(&data, 3, 99).unwrap();
        assert_eq!(train.n(), 12);
        assert_eq!(test.n(), 28);
        for c in 1..=4u16 {
            assert_eq!(train.labels.iter().filter(|&&l| l == c).count(), 3);
            assert_eq!(test.labels.iter().filter(|&&l| l == c).count(), 7);
        }
        let (train2, test2) = few_shot_split(&data, 3, 99).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let (train3, _) = few_shot_split(&data, 3, 100).unwrap();
        assert_ne!(train.features.data, train3.features.data);

        let mut seen: Vec<Vec<f64>> = Vec::new();
        for i in 0..train.n() {
            seen.push(train.features.row(i).to_vec());
        }
        for i in 0..test.n() {
            assert!(!seen.contains(&test.features.row(i).to_vec()));
        }
    }

    #[test]
    fn one_shot_has_k_rows() {
        let data = generate_dataset(&spec(5, 4, 3, 0.2, 0.3, 12)).unwrap();
        let (train, _) = few_shot_split(&data, 1, 0).unwrap();
        assert_eq!(train.n(), 5);
        let mut sorted = train.labels.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn split_rejects_insufficient_samples() {
        let data = generate_dataset(&spec(2, 4, 3, 0.2, 0.3, 13)).unwrap();
        let err = few_shot_split(&data, 3, 0).unwrap_err();
        assert!(err.to_string().contains("need more than 3"));
    }

    #[test]
    fn adapter_identity_and_disabled_passthrough() {
        let rows = DenseMatrix::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
        let identity = Adapter::identity(2, true);
        let out = apply_adapter(&rows, &identity).unwrap();
        for (a, b) in out.data.iter().zip(&rows.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let disabled = Adapter {
            weight: DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap(),
            bias: DenseMatrix::from_rows(&[vec![9.0, 9.0]]).unwrap(),
            enabled: false,
        };
        let out = apply_adapter(&rows, &disabled).unwrap();
        assert_eq!(out.data, rows.data);
    }

    #[test]
    fn random_adapter_renormalizes_rows() {
        let mut rng = stream(21, "samples");
        let mut adapter = Adapter::identity(4, true);
        for v in &mut adapter.weight.data {
            *v += rng.random_range(-0.5..0.5);
        }
        for v in &mut adapter.bias.data {
            *v = rng.random_range(-0.5..0.5);
        }
        let rows = DenseMatrix::from_vec(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let out = apply_adapter(&rows, &adapter).unwrap();
        for i in 0..6 {
            let norm: f64 = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.pcqe");
        let data = generate_dataset(&spec(3, 7, 5, 0.3, 0.4, 31)).unwrap();
        write_embeddings(&path, &data).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn file_byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.pcqe");
        let data = LabeledFeatures {
            features: DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]])
                .unwrap(),
            labels: vec![1, 2, 1],
        };
        write_embeddings(&path, &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // 4 magic + 2 version + 4 rows + 4 cols + 1 flag + 3*2*4 payload + 3*2 labels.
        assert_eq!(bytes.len(), 45);
        assert_eq!(&bytes[0..4], b"PCQE");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 2);
        assert_eq!(bytes[14], 1);
    }

    #[test]
    fn unlabeled_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("protos.pcqe");
        let m = DenseMatrix::from_rows(&[vec![0.5, -0.25, 0.125]]).unwrap();
        write_matrix(&path, &m, None).unwrap();
        let (back, labels) = read_matrix(&path).unwrap();
        assert_eq!(back, m);
        assert!(labels.is_none());
        assert!(read_embeddings(&path).is_err());
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.pcqe");
        let data = LabeledFeatures {
            features: DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            labels: vec![1],
        };
        write_embeddings(&path, &data).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::VersionMismatch(9, 1))
        ));

        let bad = &good[..good.len() - 3];
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::TruncatedPayload { .. })
        ));

        let mut bad = good.clone();
        let off = good.len() - 2;
        bad[off] = 0;
        bad[off + 1] = 0;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::LabelOutOfRange { row: 0 })
        ));
    }

    #[test]
    fn round_trip_edge_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream(77, "samples");
        for (n, d) in [(1usize, 2usize), (1, 17), (9, 2)] {
            let data = LabeledFeatures {
                features: DenseMatrix::from_vec(
                    n,
                    d,
                    (0..n * d)
                        .map(|_| rng.random_range(-1.0f64..1.0) as f32 as f64)
                        .collect(),
                )
                .unwrap(),
                labels: (0..n).map(|i| (i % 3 + 1) as u16).collect(),
            };
            let path = dir.path().join(format!("rt_{n}_{d}.pcqe"));
            write_embeddings(&path, &data).unwrap();
            assert_eq!(read_embeddings(&path).unwrap(), data);
        }
    }
}
