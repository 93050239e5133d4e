//! Cross-attention fusion of raw features with their quantized counterparts:
//! f_i = FFN(CrossAttention(h^P_i, kv)) + h^P_i.

use crate::diffcore::{DenseMatrix, Tape, VarId};
use crate::error::{Error, Result};
use crate::rng::stream;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Key/value source for the attention step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    /// Attend to the single quantized token v_i. The softmax over one key is
    /// exactly 1, so the attention output is W_o W_v v_i.
    QuantizedToken,
    /// Attend over all K prototype rows with scaled dot-product weights.
    PrototypeSet,
}

impl std::fmt::Display for KvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KvMode::QuantizedToken => "quantized_token",
            KvMode::PrototypeSet => "prototype_set",
        })
    }
}

impl std::str::FromStr for KvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantized_token" => Ok(KvMode::QuantizedToken),
            "prototype_set" => Ok(KvMode::PrototypeSet),
            other => Err(Error::InvalidConfig(format!(
                "unknown kv mode {other:?}"
            ))),
        }
    }
}

/// Single-head attention projections plus a two-layer tanh FFN. The FFN's
/// final layer starts at zero so the block is the identity at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionBlock {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_o: DenseMatrix,
    pub ffn_w1: DenseMatrix,
    pub ffn_b1: DenseMatrix,
    pub ffn_w2: DenseMatrix,
    pub ffn_b2: DenseMatrix,
    pub kv_mode: KvMode,
}

impl FusionBlock {
    pub fn new(d: usize, kv_mode: KvMode, seed: u64) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidConfig(format!("fusion needs d >= 2, got {d}")));
        }
        let mut rng = stream(seed, "fusion");
        let scale = 1.0 / (d as f64).sqrt();
        let mut draw = |rows: usize, cols: usize, s: f64| -> Result<DenseMatrix> {
            DenseMatrix::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect(),
            )
        };
        Ok(Self {
            w_q: draw(d, d, scale)?,
            w_k: draw(d, d, scale)?,
            w_v: draw(d, d, scale)?,
            w_o: draw(d, d, scale)?,
            ffn_w1: draw(4 * d, d, scale)?,
            ffn_b1: DenseMatrix::zeros(1, 4 * d),
            ffn_w2: DenseMatrix::zeros(d, 4 * d),
            ffn_b2: DenseMatrix::zeros(1, d),
            kv_mode,
        })
    }

    pub fn d(&self) -> usize {
        self.w_q.rows
    }
}

/// Tape handles for one fusion forward.
#[derive(Clone, Copy)]
pub struct FusionVars {
    pub w_q: VarId,
    pub w_k: VarId,
    pub w_v: VarId,
    pub w_o: VarId,
    pub ffn_w1: VarId,
    pub ffn_b1: VarId,
    pub ffn_w2: VarId,
    pub ffn_b2: VarId,
}

impl FusionVars {
    /// Registers every block matrix on the tape, as trainable parameters when
    /// `trainable`, otherwise as constants.
    pub fn register(tape: &mut Tape, block: &FusionBlock, trainable: bool) -> Result<Self> {
        let mut put = |name: &str, m: &DenseMatrix| -> Result<VarId> {
            if trainable {
                tape.param(name, m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        Ok(Self {
            w_q: put("fusion.w_q", &block.w_q)?,
            w_k: put("fusion.w_k", &block.w_k)?,
            w_v: put("fusion.w_v", &block.w_v)?,
            w_o: put("fusion.w_o", &block.w_o)?,
            ffn_w1: put("fusion.ffn_w1", &block.ffn_w1)?,
            ffn_b1: put("fusion.ffn_b1", &block.ffn_b1)?,
            ffn_w2: put("fusion.ffn_w2", &block.ffn_w2)?,
            ffn_b2: put("fusion.ffn_b2", &block.ffn_b2)?,
        })
    }
}

/// Builds f = FFN(attention) + h_p on the tape. `v` is the N x d quantized
/// feature matrix, `prototypes` the K x d prototype var (used in
/// prototype-set mode).
pub fn fuse_on_tape(
    tape: &mut Tape,
    h_p: VarId,
    v: VarId,
    prototypes: VarId,
    vars: &FusionVars,
    kv_mode: KvMode,
) -> Result<VarId> {
    let d = tape.value(h_p).cols;
    if tape.value(v).cols != d || tape.value(prototypes).cols != d {
        return Err(Error::DimensionMismatch(format!(
            "fusion inputs disagree on feature dimension {d}"
        )));
    }
    let attn = match kv_mode {
        KvMode::QuantizedToken => {
            let values = tape.matmul_transpose_b(v, vars.w_v)?;
            tape.matmul_transpose_b(values, vars.w_o)?
        }
        KvMode::PrototypeSet => {
            let queries = tape.matmul_transpose_b(h_p, vars.w_q)?;
            let keys = tape.matmul_transpose_b(prototypes, vars.w_k)?;
            let values = tape.matmul_transpose_b(prototypes, vars.w_v)?;
            let scores = tape.matmul_transpose_b(queries, keys)?;
            let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
            let weights = tape.softmax_rows(scaled, 1.0)?;
            let mixed = tape.matmul(weights, values)?;
            tape.matmul_transpose_b(mixed, vars.w_o)?
        }
    };
    let pre1 = tape.matmul_transpose_b(attn, vars.ffn_w1)?;
    let pre1 = tape.add_row_broadcast(pre1, vars.ffn_b1)?;
    let h1 = tape.tanh(pre1)?;
    let pre2 = tape.matmul_transpose_b(h1, vars.ffn_w2)?;
    let ffn = tape.add_row_broadcast(pre2, vars.ffn_b2)?;
    tape.add(ffn, h_p)
}

/// Plain fusion forward, sharing the tape code path.
pub fn fuse(
    h_p: &DenseMatrix,
    v: &DenseMatrix,
    prototypes: &crate::protogen::PrototypeSet,
    block: &FusionBlock,
) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let h = tape.constant(h_p.clone())?;
    let vv = tape.constant(v.clone())?;
    let p = tape.constant(prototypes.vectors.clone())?;
    let vars = FusionVars::register(&mut tape, block, false)?;
    let out = fuse_on_tape(&mut tape, h, vv, p, &vars, block.kv_mode)?;
    Ok(tape.value(out).clone())
}
