//! Prototype construction under three strategies: learnable prompts pushed
//! through a frozen encoder surrogate, class-mean / k-means centroids, and a
//! free trainable codebook.

use crate::diffcore::{DenseMatrix, Tape, VarId};
use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// How a prototype set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Prompted,
    Centroid,
    Codebook,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Prompted => "prompted",
            Strategy::Centroid => "centroid",
            Strategy::Codebook => "codebook",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompted" => Ok(Strategy::Prompted),
            "centroid" => Ok(Strategy::Centroid),
            "codebook" => Ok(Strategy::Codebook),
            other => Err(Error::InvalidConfig(format!(
                "unknown prototype strategy {other:?}"
            ))),
        }
    }
}

/// K x d prototype matrix with unit-norm rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub vectors: DenseMatrix,
    pub strategy: Strategy,
}

impl PrototypeSet {
    pub fn k(&self) -> usize {
        self.vectors.rows
    }

    pub fn d(&self) -> usize {
        self.vectors.cols
    }
}

/// Learnable prompt vectors plus frozen per-class tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptBank {
    /// m x d_tok trainable prompt rows; m may be zero (class-token-only mode).
    pub prompts: DenseMatrix,
    /// K x d_tok frozen class tokens, pairwise distinct unit rows.
    pub class_tokens: DenseMatrix,
    /// Whether the prompts participate in training (fixed-template mode when false).
    pub trainable: bool,
}

impl PromptBank {
    /// Class tokens are drawn before prompts so that every prompt count sees
    /// the same tokens at equal seed.
    pub fn new(k: usize, m: usize, d_tok: usize, seed: u64, trainable: bool) -> Result<Self> {
        if k < 1 || d_tok < 2 {
            return Err(Error::InvalidConfig(format!(
                "prompt bank needs k >= 1 and d_tok >= 2, got k={k}, d_tok={d_tok}"
            )));
        }
        let mut rng = stream(seed, "prompt-bank");
        let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(k);
        while tokens.len() < k {
            let row = random_unit_row(&mut rng, d_tok);
            let distinct = tokens
                .iter()
                .all(|t| dot(t, &row) < 1.0 - 1e-6);
            if distinct {
                tokens.push(row);
            }
        }
        let class_tokens = DenseMatrix::from_rows(&tokens)?;
        let prompts = DenseMatrix::from_vec(
            m,
            d_tok,
            (0..m * d_tok)
                .map(|_| 0.02 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect(),
        )?;
        Ok(Self {
            prompts,
            class_tokens,
            trainable,
        })
    }

    pub fn m(&self) -> usize {
        self.prompts.rows
    }

    pub fn k(&self) -> usize {
        self.class_tokens.rows
    }

    pub fn d_tok(&self) -> usize {
        self.class_tokens.cols
    }
}

/// Frozen two-layer tanh map from the flattened prompt sequence to feature
/// space. Weights never change after construction; when the trainer exposes
/// them it trains its own copies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderSurrogate {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
    pub seed: u64,
}

impl EncoderSurrogate {
    /// Input length is (m+1)*d_tok: m prompts plus one class token. Hidden
    /// width is 4*d.
    pub fn new(m: usize, d_tok: usize, d: usize, seed: u64) -> Result<Self> {
        let in_dim = (m + 1) * d_tok;
        let hidden = 4 * d;
        let mut rng = stream(seed, "surrogate");
        let normal = StandardNormal;
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
                .collect()
        };
        // Unit-variance first layer keeps tanh gates in their nonlinear range
        // and per-class Jacobians distinct.
        let w1 = DenseMatrix::from_vec(hidden, in_dim, draw(hidden * in_dim, 1.0))?;
        let b1 = DenseMatrix::from_vec(1, hidden, draw(hidden, 1.0))?;
        let w2 = DenseMatrix::from_vec(d, hidden, draw(d * hidden, 1.0 / (hidden as f64).sqrt()))?;
        let b2 = DenseMatrix::zeros(1, d);
        Ok(Self { w1, b1, w2, b2, seed })
    }

    pub fn in_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn d(&self) -> usize {
        self.w2.rows
    }
}

/// Tape variables for one surrogate forward.
#[derive(Clone, Copy)]
pub struct SurrogateVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

/// Builds the prompted prototype rows on a tape. `prompts` is `None` in
/// class-token-only mode. Returns the unit-normalized K x d prototype var.
pub fn encode_on_tape(
    tape: &mut Tape,
    prompts: Option<VarId>,
    class_tokens: VarId,
    surrogate: SurrogateVars,
) -> Result<VarId> {
    let k = tape.value(class_tokens).rows;
    let x = match prompts {
        Some(p) => {
            let (m, d_tok) = (tape.value(p).rows, tape.value(p).cols);
            let flat = tape.reshape(p, 1, m * d_tok)?;
            let repeated = tape.broadcast_row(flat, k)?;
            tape.hconcat(repeated, class_tokens)?
        }
        None => class_tokens,
    };
    let pre1 = tape.matmul_transpose_b(x, surrogate.w1)?;
    let pre1 = tape.add_row_broadcast(pre1, surrogate.b1)?;
    let h1 = tape.tanh(pre1)?;
    let pre2 = tape.matmul_transpose_b(h1, surrogate.w2)?;
    let out = tape.add_row_broadcast(pre2, surrogate.b2)?;
    tape.normalize_rows(out)
}

/// Prompted prototypes as a plain value (single code path with the tape).
pub fn encode_prototypes(bank: &PromptBank, surrogate: &EncoderSurrogate) -> Result<PrototypeSet> {
    let expected_in = (bank.m() + 1) * bank.d_tok();
    if surrogate.in_dim() != expected_in {
        return Err(Error::DimensionMismatch(format!(
            "surrogate expects input {}, prompt bank provides {}",
            surrogate.in_dim(),
            expected_in
        )));
    }
    let mut tape = Tape::new();
    let prompts = if bank.m() > 0 {
        Some(tape.constant(bank.prompts.clone())?)
    } else {
        None
    };
    let tokens = tape.constant(bank.class_tokens.clone())?;
    let vars = SurrogateVars {
        w1: tape.constant(surrogate.w1.clone())?,
        b1: tape.constant(surrogate.b1.clone())?,
        w2: tape.constant(surrogate.w2.clone())?,
        b2: tape.constant(surrogate.b2.clone())?,
    };
    let out = encode_on_tape(&mut tape, prompts, tokens, vars)?;
    Ok(PrototypeSet {
        vectors: tape.value(out).clone(),
        strategy: Strategy::Prompted,
    })
}

/// Class-mean prototypes, optionally refined by Lloyd iterations seeded at
/// the class means and relabeled by class majority.
pub fn centroid_prototypes(
    features: &DenseMatrix,
    labels: &[u16],
    iterations: usize,
) -> Result<PrototypeSet> {
    if labels.len() != features.rows {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows
        )));
    }
    let k = *labels.iter().max().ok_or(Error::EmptyClass(1))? as usize;
    if let Some(&bad) = labels.iter().find(|&&l| l == 0) {
        return Err(Error::InvalidLabel {
            label: bad,
            classes: k,
        });
    }
    let d = features.cols;
    let mut sums = DenseMatrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &label) in labels.iter().enumerate() {
        let c = (label - 1) as usize;
        counts[c] += 1;
        for j in 0..d {
            sums.data[c * d + j] += features.get(i, j);
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass((c + 1) as u16));
        }
        for j in 0..d {
            sums.data[c * d + j] /= count as f64;
        }
    }

    let mut centroids = sums;
    if iterations > 0 {
        let (refined, assignment) = kmeans(features, &centroids, iterations)?;
        centroids = relabel_by_majority(&refined, &assignment, labels, k)?;
    }

    for c in 0..k {
        let norm = centroids.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateCentroid((c + 1) as u16));
        }
        for v in centroids.row_mut(c) {
            *v /= norm;
        }
    }
    Ok(PrototypeSet {
        vectors: centroids,
        strategy: Strategy::Centroid,
    })
}

/// Lloyd's algorithm. Ties go to the lowest-index centroid; an emptied
/// cluster is reseeded from the point farthest from its assigned centroid.
/// Returns final centroids and the assignment under them.
pub fn kmeans(
    points: &DenseMatrix,
    init: &DenseMatrix,
    iterations: usize,
) -> Result<(DenseMatrix, Vec<usize>)> {
    if points.cols != init.cols {
        return Err(Error::DimensionMismatch(format!(
            "points {}x{} vs centroids {}x{}",
            points.rows, points.cols, init.rows, init.cols
        )));
    }
    let k = init.rows;
    let n = points.rows;
    if n < k {
        return Err(Error::InvalidConfig(format!(
            "k-means with {n} points for {k} clusters"
        )));
    }
    let mut centroids = init.clone();
    let mut assignment = assign_nearest(points, &centroids);
    for _ in 0..iterations {
        let mut sums = DenseMatrix::zeros(k, points.cols);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for j in 0..points.cols {
                sums.data[c * points.cols + j] += points.get(i, j);
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                let far = farthest_point(points, &centroids, &assignment, &taken);
                taken[far] = true;
                sums.row_mut(c).copy_from_slice(points.row(far));
                counts[c] = 1;
            }
        }
        for c in 0..k {
            for j in 0..points.cols {
                sums.data[c * points.cols + j] /= counts[c] as f64;
            }
        }
        centroids = sums;
        assignment = assign_nearest(points, &centroids);
    }
    Ok((centroids, assignment))
}

fn assign_nearest(points: &DenseMatrix, centroids: &DenseMatrix) -> Vec<usize> {
    (0..points.rows)
        .map(|i| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..centroids.rows {
                let d = sq_dist(points.row(i), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn farthest_point(
    points: &DenseMatrix,
    centroids: &DenseMatrix,
    assignment: &[usize],
    taken: &[bool],
) -> usize {
    let mut far = 0usize;
    let mut far_d = f64::NEG_INFINITY;
    for i in 0..points.rows {
        if taken[i] {
            continue;
        }
        let d = sq_dist(points.row(i), centroids.row(assignment[i]));
        if d > far_d {
            far_d = d;
            far = i;
        }
    }
    far
}

fn relabel_by_majority(
    centroids: &DenseMatrix,
    assignment: &[usize],
    labels: &[u16],
    k: usize,
) -> Result<DenseMatrix> {
    let mut votes = vec![vec![0usize; k]; k];
    for (i, &cluster) in assignment.iter().enumerate() {
        votes[cluster][(labels[i] - 1) as usize] += 1;
    }
    let mut used = vec![false; k];
    let mut out = DenseMatrix::zeros(k, centroids.cols);
    for class in 0..k {
        let mut best_cluster = None;
        let mut best_votes = 0usize;
        for (cluster, used_flag) in used.iter().enumerate() {
            if *used_flag {
                continue;
            }
            let v = votes[cluster][class];
            if best_cluster.is_none() || v > best_votes {
                best_cluster = Some(cluster);
                best_votes = v;
            }
        }
        let cluster = best_cluster.expect("k clusters for k classes");
        used[cluster] = true;
        out.row_mut(class).copy_from_slice(centroids.row(cluster));
    }
    Ok(out)
}

/// Seeded random unit rows registered as trainable when the strategy is used.
pub fn codebook_prototypes(k: usize, d: usize, seed: u64) -> Result<PrototypeSet> {
    if k < 2 || d < 2 {
        return Err(Error::InvalidConfig(format!(
            "codebook needs k >= 2 and d >= 2, got k={k}, d={d}"
        )));
    }
    let mut rng = stream(seed, "codebook");
    let rows: Vec<Vec<f64>> = (0..k).map(|_| random_unit_row(&mut rng, d)).collect();
    Ok(PrototypeSet {
        vectors: DenseMatrix::from_rows(&rows)?,
        strategy: Strategy::Codebook,
    })
}

fn random_unit_row(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let row: Vec<f64> = (0..d)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return row.iter().map(|v| v / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
