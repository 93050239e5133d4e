//! Training loop: schedule, optimizer, history, and checkpoints.
//!
//! Every stochastic choice is drawn from a purpose-tagged stream derived from
//! the run seed, so a config plus a dataset fully determines the trajectory.
//! `verify_replay` exploits that: it reruns the loop and diffs the step log.

use crate::datasim::{select_rows, write_matrix, LabeledFeatures};
use crate::diffcore::DenseMatrix;
use crate::error::{Error, Result};
use crate::evalkit::classify;
use crate::fusion::{FusionBlock, KvMode};
use crate::model::{forward, LossSelect, ModelParams};
use crate::protogen::Strategy;
use crate::quantizer::sample_uniform_noise;
use crate::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const DIVERGENCE_FACTOR: f64 = 1e3;

/// Which parameter tiers the optimizer touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainableScope {
    #[serde(rename = "prompts_only")]
    PromptsOnly,
    #[serde(rename = "prompts+adapter")]
    PromptsAdapter,
    #[serde(rename = "prompts+adapter+fusion")]
    PromptsAdapterFusion,
    #[serde(rename = "all")]
    All,
}

impl fmt::Display for TrainableScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrainableScope::PromptsOnly => "prompts_only",
            TrainableScope::PromptsAdapter => "prompts+adapter",
            TrainableScope::PromptsAdapterFusion => "prompts+adapter+fusion",
            TrainableScope::All => "all",
        };
        f.write_str(s)
    }
}

impl FromStr for TrainableScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompts_only" => Ok(TrainableScope::PromptsOnly),
            "prompts+adapter" => Ok(TrainableScope::PromptsAdapter),
            "prompts+adapter+fusion" => Ok(TrainableScope::PromptsAdapterFusion),
            "all" => Ok(TrainableScope::All),
            other => Err(Error::InvalidConfig(format!(
                "unknown trainable scope {other:?}"
            ))),
        }
    }
}

/// Which side of the compactness term receives gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompGrad {
    #[default]
    Both,
    FeaturesOnly,
    PrototypesOnly,
}

impl fmt::Display for CompGrad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CompGrad::Both => "both",
            CompGrad::FeaturesOnly => "features_only",
            CompGrad::PrototypesOnly => "prototypes_only",
        };
        f.write_str(s)
    }
}

impl FromStr for CompGrad {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(CompGrad::Both),
            "features_only" => Ok(CompGrad::FeaturesOnly),
            "prototypes_only" => Ok(CompGrad::PrototypesOnly),
            other => Err(Error::InvalidConfig(format!(
                "unknown compactness gradient mode {other:?}"
            ))),
        }
    }
}

/// Full run configuration. Unknown keys in serialized form are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub m: usize,
    pub seed: u64,
    pub trainable_scope: TrainableScope,
    pub prototype_strategy: Strategy,
    pub kv_mode: KvMode,
    pub eval_noise: bool,
    pub straight_through: bool,
    pub prompts_trainable: bool,
    pub adapter_enabled: bool,
    pub comp_grad: CompGrad,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::default_desk()
    }
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn default_desk() -> Self {
        Self {
            epochs: 60,
            batch_size: 30,
            base_lr: 0.003,
            warmup_epochs: 6,
            weight_decay: 0.01,
            tau: 1.0,
            lambda1: 0.01,
            lambda2: 0.01,
            m: 32,
            seed: 0,
            trainable_scope: TrainableScope::PromptsAdapterFusion,
            prototype_strategy: Strategy::Prompted,
            kv_mode: KvMode::QuantizedToken,
            eval_noise: false,
            straight_through: false,
            prompts_trainable: true,
            adapter_enabled: true,
            comp_grad: CompGrad::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if self.lambda1 < 0.0 {
            return Err(Error::NegativeLossWeight(self.lambda1));
        }
        if self.lambda2 < 0.0 {
            return Err(Error::NegativeLossWeight(self.lambda2));
        }
        Ok(())
    }
}

/// Learning rate at a global step: linear ramp over the warmup steps, then
/// cosine decay to zero at `total_steps`. With zero warmup the schedule is
/// pure cosine starting at `base_lr`.
pub fn lr_at(step: usize, config: &TrainConfig, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps);
    let warmup = (total_steps * config.warmup_epochs)
        .checked_div(config.epochs)
        .unwrap_or(0);
    if warmup > 0 && step <= warmup {
        return config.base_lr * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return config.base_lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    0.5 * config.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
}

impl Moments {
    fn zeros_like(p: &DenseMatrix) -> Self {
        Self {
            m: DenseMatrix::zeros(p.rows, p.cols),
            v: DenseMatrix::zeros(p.rows, p.cols),
        }
    }
}

pub type OptimState = BTreeMap<String, Moments>;

/// One decoupled-weight-decay Adam update. `t` is the 1-based step count used
/// for bias correction; only parameters present in `grads` move.
pub fn optimizer_step(
    params: &mut ModelParams,
    state: &mut OptimState,
    t: usize,
    grads: &[(String, DenseMatrix)],
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidConfig("step count is 1-based".into()));
    }
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        let slot = state
            .entry(name.clone())
            .or_insert_with(|| Moments::zeros_like(g));
        let theta = params
            .matrix_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
        if (theta.rows, theta.cols) != (g.rows, g.cols) {
            return Err(Error::DimensionMismatch(format!(
                "gradient {}x{} for parameter {name} {}x{}",
                g.rows, g.cols, theta.rows, theta.cols
            )));
        }
        for i in 0..g.data.len() {
            let gi = g.data[i];
            slot.m.data[i] = BETA1 * slot.m.data[i] + (1.0 - BETA1) * gi;
            slot.v.data[i] = BETA2 * slot.v.data[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = slot.m.data[i] / c1;
            let v_hat = slot.v.data[i] / c2;
            theta.data[i] = theta.data[i] * (1.0 - lr * config.weight_decay)
                - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Per-step record, enough to replay and audit the whole trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub align: f64,
    pub comp: f64,
    pub sep: f64,
    pub total: f64,
    pub kl: f64,
}

/// Per-epoch means plus a noiseless full-set accuracy probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub align: f64,
    pub comp: f64,
    pub sep: f64,
    pub total: f64,
    pub kl: f64,
    pub train_accuracy: f64,
}

/// Everything a finished (or zero-epoch) run carries.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub k: usize,
    pub d: usize,
    pub params: ModelParams,
    pub moments: OptimState,
    pub step: usize,
    pub initial_total: f64,
    pub history: Vec<EpochStats>,
    pub step_log: Vec<StepRecord>,
}

fn check_dataset(data: &LabeledFeatures) -> Result<(usize, usize)> {
    let k = data.k();
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "training needs at least 2 classes, got {k}"
        )));
    }
    if data.d() < 2 {
        return Err(Error::InvalidConfig(format!(
            "training needs at least 2 feature dimensions, got {}",
            data.d()
        )));
    }
    let mut counts = vec![0usize; k + 1];
    for &l in &data.labels {
        counts[l as usize] += 1;
    }
    for c in 1..=k {
        if counts[c] == 0 {
            return Err(Error::EmptyClass(c as u16));
        }
    }
    Ok((k, data.d()))
}

/// Runs the full loop. Batch order comes from the `batches` stream, Gumbel
/// noise from the `gumbel` stream; both advance deterministically with the
/// run, so equal inputs give bitwise-equal trajectories.
pub fn train(config: &TrainConfig, data: &LabeledFeatures) -> Result<TrainState> {
    config.validate()?;
    let (k, d) = check_dataset(data)?;
    let mut params = ModelParams::init(config, k, d, Some(data))?;
    let mut moments: OptimState = params
        .trainable_names(config)
        .into_iter()
        .map(|n| {
            let m = params.matrix(&n).expect("trainable name resolves");
            (n.clone(), Moments::zeros_like(m))
        })
        .collect();

    let n = data.n();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut shuffle_rng = stream(config.seed, "batches");
    let mut noise_rng = stream(config.seed, "gumbel");

    let mut history = Vec::with_capacity(config.epochs);
    let mut step_log = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    let mut initial_total = f64::NAN;

    for epoch in 0..config.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for chunk in idx.chunks(config.batch_size) {
            let batch = select_rows(data, chunk);
            let eps = sample_uniform_noise(chunk.len(), k, &mut noise_rng);
            let out = forward(
                &params,
                config,
                &batch.features,
                &batch.labels,
                Some(&eps),
                true,
                LossSelect::Total,
            )?;
            if step == 0 {
                initial_total = out.terms.total;
            }
            if out.terms.total > DIVERGENCE_FACTOR * initial_total.max(1e-12) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    total: out.terms.total,
                    initial: initial_total,
                });
            }
            let lr = lr_at(step, config, total_steps);
            optimizer_step(&mut params, &mut moments, step + 1, &out.grads, lr, config)?;
            step_log.push(StepRecord {
                epoch,
                step,
                lr,
                align: out.terms.align,
                comp: out.terms.comp,
                sep: out.terms.sep,
                total: out.terms.total,
                kl: out.kl,
            });
            sums[0] += out.terms.align;
            sums[1] += out.terms.comp;
            sums[2] += out.terms.sep;
            sums[3] += out.terms.total;
            sums[4] += out.kl;
            batches += 1;
            step += 1;
        }
        let probe = forward(
            &params,
            config,
            &data.features,
            &data.labels,
            None,
            false,
            LossSelect::Total,
        )?;
        let preds = classify(&probe.fused, &probe.prototypes)?;
        let correct = preds
            .iter()
            .zip(&data.labels)
            .filter(|(p, l)| p == l)
            .count();
        let b = batches as f64;
        history.push(EpochStats {
            epoch,
            align: sums[0] / b,
            comp: sums[1] / b,
            sep: sums[2] / b,
            total: sums[3] / b,
            kl: sums[4] / b,
            train_accuracy: correct as f64 / n as f64,
        });
    }

    Ok(TrainState {
        config: config.clone(),
        k,
        d,
        params,
        moments,
        step,
        initial_total,
        history,
        step_log,
    })
}

/// Reruns the loop from the recorded config and returns the largest absolute
/// deviation between the stored step log and the recomputed one. A faithful
/// replay returns exactly zero.
pub fn verify_replay(state: &TrainState, data: &LabeledFeatures) -> Result<f64> {
    let fresh = train(&state.config, data)?;
    if fresh.step_log.len() != state.step_log.len() {
        return Err(Error::Checkpoint(format!(
            "step log length changed: {} vs {}",
            fresh.step_log.len(),
            state.step_log.len()
        )));
    }
    let mut worst = 0.0f64;
    for (a, b) in state.step_log.iter().zip(&fresh.step_log) {
        for (x, y) in [
            (a.lr, b.lr),
            (a.align, b.align),
            (a.comp, b.comp),
            (a.sep, b.sep),
            (a.total, b.total),
            (a.kl, b.kl),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    config: TrainConfig,
    k: usize,
    d: usize,
    step: usize,
    initial_total: f64,
    history: Vec<EpochStats>,
    step_log: Vec<StepRecord>,
    params: Vec<String>,
}

const CHECKPOINT_FORMAT: u32 = 1;

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Writes `checkpoint.json` plus one embedding file per parameter matrix
/// under `params/`. Matrices round through f32 like any other stored set.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    let params_dir = dir.join("params");
    std::fs::create_dir_all(&params_dir)?;
    let named = state.params.named();
    for (name, m) in &named {
        write_matrix(&params_dir.join(format!("{name}.pcqe")), m, None)?;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        config: state.config.clone(),
        k: state.k,
        d: state.d,
        step: state.step,
        initial_total: state.initial_total,
        history: state.history.clone(),
        step_log: state.step_log.clone(),
        params: named.into_iter().map(|(n, _)| n).collect(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_atomic(&dir.join("checkpoint.json"), json.as_bytes())
}

/// Loads a checkpoint directory back into a usable state. Optimizer moments
/// are not stored; the state is for evaluation and inspection.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let manifest_path = dir.join("checkpoint.json");
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let mut matrices: BTreeMap<String, DenseMatrix> = BTreeMap::new();
    for name in &manifest.params {
        let (m, labels) = crate::datasim::read_matrix(&dir.join("params").join(format!("{name}.pcqe")))?;
        if labels.is_some() {
            return Err(Error::Checkpoint(format!(
                "parameter file for {name} unexpectedly carries labels"
            )));
        }
        matrices.insert(name.clone(), m);
    }
    let take = |map: &mut BTreeMap<String, DenseMatrix>, name: &str| -> Result<DenseMatrix> {
        map.remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    };
    let m = &mut matrices;
    let params = ModelParams {
        k: manifest.k,
        d: manifest.d,
        class_tokens: take(m, "class_tokens")?,
        prompts: take(m, "prompts")?,
        prompts_trainable: manifest.config.prompts_trainable,
        surrogate_w1: take(m, "surrogate.w1")?,
        surrogate_b1: take(m, "surrogate.b1")?,
        surrogate_w2: take(m, "surrogate.w2")?,
        surrogate_b2: take(m, "surrogate.b2")?,
        codebook: m.remove("codebook"),
        centroids: m.remove("centroids"),
        adapter_weight: take(m, "adapter.weight")?,
        adapter_bias: take(m, "adapter.bias")?,
        adapter_enabled: manifest.config.adapter_enabled,
        fusion: FusionBlock {
            w_q: take(m, "fusion.w_q")?,
            w_k: take(m, "fusion.w_k")?,
            w_v: take(m, "fusion.w_v")?,
            w_o: take(m, "fusion.w_o")?,
            ffn_w1: take(m, "fusion.ffn_w1")?,
            ffn_b1: take(m, "fusion.ffn_b1")?,
            ffn_w2: take(m, "fusion.ffn_w2")?,
            ffn_b2: take(m, "fusion.ffn_b2")?,
            kv_mode: manifest.config.kv_mode,
        },
    };
    if !matrices.is_empty() {
        let extra: Vec<_> = matrices.keys().cloned().collect();
        return Err(Error::Checkpoint(format!(
            "unrecognized parameters in manifest: {extra:?}"
        )));
    }
    Ok(TrainState {
        config: manifest.config,
        k: manifest.k,
        d: manifest.d,
        params,
        moments: OptimState::new(),
        step: manifest.step,
        initial_total: manifest.initial_total,
        history: manifest.history,
        step_log: manifest.step_log,
    })
}
