//! Evaluation and experiment harnesses.
//!
//! `evaluate` scores a trained model on a labeled set. The harness functions
//! each build a grid of independent cells (variant x seed), train one model
//! per cell on that cell's own few-shot split, and assemble a table. Cells
//! run on a worker pool; every cell is pure, so worker count never changes
//! the output. A failed cell becomes a row with an error string and the grid
//! keeps going.

mod pca;
mod reports;

pub use pca::project_2d;
pub use reports::{projection_csv, projection_svg, result_to_json, rows_to_csv};

use crate::datasim::{few_shot_split, generate_dataset, DatasetSpec, LabeledFeatures};
use crate::diffcore::{grad_check, l2_normalize_rows, DenseMatrix};
use crate::error::{Error, Result};
use crate::fusion::KvMode;
use crate::losses::LossTerms;
use crate::model::{forward, LossSelect, ModelParams};
use crate::protogen::Strategy;
use crate::quantizer::{argmax, gumbel_softmax, mean_row_entropy, sample_uniform_noise};
use crate::rng::stream;
use crate::trainer::{train, TrainConfig, TrainableScope};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Nearest-prototype labels by cosine similarity; ties go to the lowest
/// class index. Labels are 1-based.
pub fn classify(features: &DenseMatrix, prototypes: &DenseMatrix) -> Result<Vec<u16>> {
    for i in 0..features.rows {
        let norm: f64 = features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateFeature(i));
        }
    }
    let sims = crate::diffcore::cosine_similarity_matrix(features, prototypes)?;
    Ok((0..sims.rows).map(|i| (argmax(sims.row(i)) + 1) as u16).collect())
}

/// Prototype assignment accuracy: over correctly classified samples, the
/// fraction whose hard assignment row points at the true class. An empty
/// correct set yields `None` rather than a silent zero.
pub fn paa(hard: &DenseMatrix, predictions: &[u16], labels: &[u16]) -> Result<Option<f64>> {
    if hard.rows != predictions.len() || predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "paa inputs disagree: {} hard rows, {} predictions, {} labels",
            hard.rows,
            predictions.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    let mut matched = 0usize;
    for i in 0..labels.len() {
        if predictions[i] != labels[i] {
            continue;
        }
        correct += 1;
        if (argmax(hard.row(i)) + 1) as u16 == labels[i] {
            matched += 1;
        }
    }
    if correct == 0 {
        return Ok(None);
    }
    Ok(Some(matched as f64 / correct as f64))
}

/// Scores for one model on one labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub paa: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u32>>,
    pub mean_assignment_entropy: f64,
    pub loss: LossTerms,
    pub kl: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Hex SHA-256 of the serialized config, stamped into reports so a metrics
/// file can be matched to the exact settings that produced it.
pub fn config_hash(config: &TrainConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Full evaluation pass. Noiseless by default; `eval_noise` draws one fixed
/// uniform tensor from the `eval-noise` stream instead.
pub fn evaluate(
    params: &ModelParams,
    config: &TrainConfig,
    data: &LabeledFeatures,
) -> Result<MetricsReport> {
    let k = params.k;
    let noise = if config.eval_noise {
        let mut rng = stream(config.seed, "eval-noise");
        Some(sample_uniform_noise(data.n(), k, &mut rng))
    } else {
        None
    };
    let out = forward(
        params,
        config,
        &data.features,
        &data.labels,
        noise.as_ref(),
        false,
        LossSelect::Total,
    )?;
    let predictions = classify(&out.fused, &out.prototypes)?;
    let mut confusion = vec![vec![0u32; k]; k];
    for (p, l) in predictions.iter().zip(&data.labels) {
        confusion[*l as usize - 1][*p as usize - 1] += 1;
    }
    let trace: u32 = (0..k).map(|c| confusion[c][c]).sum();
    let accuracy = trace as f64 / data.n() as f64;
    let per_class = (0..k)
        .map(|c| {
            let row_total: u32 = confusion[c].iter().sum();
            if row_total == 0 {
                None
            } else {
                Some(confusion[c][c] as f64 / row_total as f64)
            }
        })
        .collect();
    Ok(MetricsReport {
        accuracy,
        paa: paa(&out.hard, &predictions, &data.labels)?,
        per_class,
        confusion,
        mean_assignment_entropy: mean_row_entropy(&out.y),
        loss: out.terms,
        kl: out.kl,
        n: data.n(),
        seed: config.seed,
        config_hash: config_hash(config)?,
    })
}

/// One grid cell's result. Metric fields stay `None` when the cell failed or
/// had nothing to report (for example loss means of a zero-epoch run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub variant: String,
    pub seed: u64,
    pub shots: usize,
    pub accuracy: Option<f64>,
    pub paa: Option<f64>,
    pub entropy: Option<f64>,
    pub entropy_fixed_noise: Option<f64>,
    pub align: Option<f64>,
    pub comp: Option<f64>,
    pub sep: Option<f64>,
    pub total: Option<f64>,
    pub kl: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Per-variant aggregate over the seeds that succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub failures: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_paa: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub mean_entropy_fixed_noise: Option<f64>,
}

/// A finished grid: rows in grid order plus per-variant summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessResult {
    pub name: String,
    pub rows: Vec<RunRow>,
    pub summaries: Vec<VariantSummary>,
}

struct Cell {
    variant: String,
    config: TrainConfig,
    shots: usize,
    fixed_noise: bool,
}

struct CellMetrics {
    accuracy: f64,
    paa: Option<f64>,
    entropy: f64,
    entropy_fixed_noise: Option<f64>,
    align: Option<f64>,
    comp: Option<f64>,
    sep: Option<f64>,
    total: Option<f64>,
    kl: Option<f64>,
    train_accuracy: Option<f64>,
}

fn run_cell_inner(data: &LabeledFeatures, cell: &Cell) -> Result<CellMetrics> {
    let config = &cell.config;
    let (train_set, test_set) = few_shot_split(data, cell.shots, config.seed)?;
    let state = train(config, &train_set)?;
    let report = evaluate(&state.params, config, &test_set)?;
    let entropy_fixed_noise = if cell.fixed_noise {
        // Assignment entropy of the untrained model on the test split under
        // one per-seed noise tensor. Initialization and noise are both
        // independent of tau, which makes this column comparable across the
        // temperature grid.
        let init = ModelParams::init(config, state.k, state.d, Some(&train_set))?;
        let probe = forward(
            &init,
            config,
            &test_set.features,
            &test_set.labels,
            None,
            false,
            LossSelect::Total,
        )?;
        let mut rng = stream(config.seed, "sweep-noise");
        let eps = sample_uniform_noise(test_set.n(), state.k, &mut rng);
        let y = gumbel_softmax(&probe.probs, config.tau, &eps)?;
        Some(mean_row_entropy(&y))
    } else {
        None
    };
    let last = state.history.last();
    Ok(CellMetrics {
        accuracy: report.accuracy,
        paa: report.paa,
        entropy: report.mean_assignment_entropy,
        entropy_fixed_noise,
        align: last.map(|h| h.align),
        comp: last.map(|h| h.comp),
        sep: last.map(|h| h.sep),
        total: last.map(|h| h.total),
        kl: last.map(|h| h.kl),
        train_accuracy: last.map(|h| h.train_accuracy),
    })
}

fn run_cell(data: &LabeledFeatures, cell: &Cell) -> RunRow {
    let mut row = RunRow {
        variant: cell.variant.clone(),
        seed: cell.config.seed,
        shots: cell.shots,
        accuracy: None,
        paa: None,
        entropy: None,
        entropy_fixed_noise: None,
        align: None,
        comp: None,
        sep: None,
        total: None,
        kl: None,
        train_accuracy: None,
        error: None,
    };
    match run_cell_inner(data, cell) {
        Ok(m) => {
            row.accuracy = Some(m.accuracy);
            row.paa = m.paa;
            row.entropy = Some(m.entropy);
            row.entropy_fixed_noise = m.entropy_fixed_noise;
            row.align = m.align;
            row.comp = m.comp;
            row.sep = m.sep;
            row.total = m.total;
            row.kl = m.kl;
            row.train_accuracy = m.train_accuracy;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn summarize(rows: &[RunRow]) -> Vec<VariantSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    let mean = |vals: &[f64]| -> Option<f64> {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    order
        .into_iter()
        .map(|variant| {
            let group: Vec<&RunRow> = rows.iter().filter(|r| r.variant == variant).collect();
            let accs: Vec<f64> = group.iter().filter_map(|r| r.accuracy).collect();
            let mean_accuracy = mean(&accs);
            let std_accuracy = mean_accuracy.map(|mu| {
                if accs.len() < 2 {
                    0.0
                } else {
                    let ss: f64 = accs.iter().map(|a| (a - mu) * (a - mu)).sum();
                    (ss / (accs.len() - 1) as f64).sqrt()
                }
            });
            let paas: Vec<f64> = group.iter().filter_map(|r| r.paa).collect();
            let ents: Vec<f64> = group.iter().filter_map(|r| r.entropy).collect();
            let fixed: Vec<f64> = group.iter().filter_map(|r| r.entropy_fixed_noise).collect();
            VariantSummary {
                variant: variant.to_string(),
                runs: group.len(),
                failures: group.iter().filter(|r| r.error.is_some()).count(),
                mean_accuracy,
                std_accuracy,
                mean_paa: mean(&paas),
                mean_entropy: mean(&ents),
                mean_entropy_fixed_noise: mean(&fixed),
            }
        })
        .collect()
}

fn run_harness(
    name: &str,
    data: &LabeledFeatures,
    cells: Vec<Cell>,
    workers: usize,
) -> Result<HarnessResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let rows: Vec<RunRow> = pool.install(|| {
        use rayon::prelude::*;
        cells.par_iter().map(|c| run_cell(data, c)).collect()
    });
    let summaries = summarize(&rows);
    Ok(HarnessResult {
        name: name.to_string(),
        rows,
        summaries,
    })
}

/// Trains one model per (tau, seed) and tabulates accuracy and assignment
/// entropy. The extra fixed-noise entropy column isolates the temperature
/// effect from training drift.
pub fn temperature_sweep(
    base: &TrainConfig,
    taus: &[f64],
    data: &LabeledFeatures,
    seeds: &[u64],
    shots: usize,
    workers: usize,
) -> Result<HarnessResult> {
    if taus.is_empty() {
        return Err(Error::InvalidConfig("temperature grid is empty".into()));
    }
    for &t in taus {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidTemperature(t));
        }
    }
    let mut cells = Vec::new();
    for &tau in taus {
        for &seed in seeds {
            cells.push(Cell {
                variant: format!("tau={tau}"),
                config: TrainConfig {
                    tau,
                    seed,
                    ..base.clone()
                },
                shots,
                fixed_noise: true,
            });
        }
    }
    run_harness("temperature_sweep", data, cells, workers)
}

/// Toggles the two auxiliary loss weights: alignment alone, then with
/// separation, compactness, and both.
pub fn loss_ablation(
    base: &TrainConfig,
    data: &LabeledFeatures,
    seeds: &[u64],
    shots: usize,
    workers: usize,
) -> Result<HarnessResult> {
    let variants = [
        ("align", 0.0, 0.0),
        ("align+sep", 0.0, base.lambda2),
        ("align+comp", base.lambda1, 0.0),
        ("align+comp+sep", base.lambda1, base.lambda2),
    ];
    let mut cells = Vec::new();
    for (name, l1, l2) in variants {
        for &seed in seeds {
            cells.push(Cell {
                variant: name.to_string(),
                config: TrainConfig {
                    lambda1: l1,
                    lambda2: l2,
                    seed,
                    ..base.clone()
                },
                shots,
                fixed_noise: false,
            });
        }
    }
    run_harness("loss_ablation", data, cells, workers)
}

/// Same data and seeds across the three prototype strategies.
pub fn strategy_compare(
    base: &TrainConfig,
    data: &LabeledFeatures,
    seeds: &[u64],
    shots: usize,
    workers: usize,
) -> Result<HarnessResult> {
    let strategies = [Strategy::Centroid, Strategy::Codebook, Strategy::Prompted];
    let mut cells = Vec::new();
    for strategy in strategies {
        for &seed in seeds {
            cells.push(Cell {
                variant: strategy.to_string(),
                config: TrainConfig {
                    prototype_strategy: strategy,
                    seed,
                    ..base.clone()
                },
                shots,
                fixed_noise: false,
            });
        }
    }
    run_harness("strategy_compare", data, cells, workers)
}

/// Prompt design modes: class token alone, frozen prompt bank, and the
/// trainable bank.
pub fn prompt_ablation(
    base: &TrainConfig,
    data: &LabeledFeatures,
    seeds: &[u64],
    shots: usize,
    workers: usize,
) -> Result<HarnessResult> {
    let variants = [
        ("class_token_only", 0usize, false),
        ("fixed_prompts", base.m, false),
        ("learnable_prompts", base.m, true),
    ];
    let mut cells = Vec::new();
    for (name, m, trainable) in variants {
        for &seed in seeds {
            cells.push(Cell {
                variant: name.to_string(),
                config: TrainConfig {
                    m,
                    prompts_trainable: trainable,
                    seed,
                    ..base.clone()
                },
                shots,
                fixed_noise: false,
            });
        }
    }
    run_harness("prompt_ablation", data, cells, workers)
}

/// Generates one dataset from `spec` and sweeps the shot count.
pub fn fewshot_curve(
    base: &TrainConfig,
    spec: &DatasetSpec,
    shot_grid: &[usize],
    seeds: &[u64],
    workers: usize,
) -> Result<HarnessResult> {
    if shot_grid.is_empty() {
        return Err(Error::InvalidConfig("shot grid is empty".into()));
    }
    let data = generate_dataset(spec)?;
    let mut cells = Vec::new();
    for &shots in shot_grid {
        for &seed in seeds {
            cells.push(Cell {
                variant: format!("shots={shots}"),
                config: TrainConfig {
                    seed,
                    ..base.clone()
                },
                shots,
                fixed_noise: false,
            });
        }
    }
    run_harness("fewshot_curve", &data, cells, workers)
}

/// One finite-difference comparison from the gradient suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub config: usize,
    pub loss: String,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub params: usize,
    pub max_rel_err: f64,
}

fn random_unit_rows(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
    }
    l2_normalize_rows(&m)
}

/// Checks analytic gradients of all four losses against central differences
/// at ten small random configurations covering every prototype strategy,
/// both fusion modes, and every trainable scope.
pub fn gradient_suite() -> Result<Vec<GradCheckEntry>> {
    use KvMode::{PrototypeSet as Ps, QuantizedToken as Qt};
    use Strategy::{Centroid, Codebook, Prompted};
    use TrainableScope as Sc;
    // (k, d, m, n, strategy, kv_mode, scope, tau, adapter_enabled)
    let specs: [(usize, usize, usize, usize, Strategy, KvMode, Sc, f64, bool); 10] = [
        (3, 4, 2, 5, Prompted, Qt, Sc::PromptsAdapterFusion, 1.0, true),
        (2, 3, 0, 4, Prompted, Ps, Sc::PromptsAdapterFusion, 0.7, true),
        (4, 5, 3, 6, Prompted, Ps, Sc::All, 1.0, true),
        (3, 4, 2, 5, Codebook, Qt, Sc::PromptsAdapterFusion, 1.5, true),
        (2, 4, 1, 3, Codebook, Ps, Sc::PromptsOnly, 1.0, true),
        (3, 5, 2, 4, Centroid, Ps, Sc::PromptsAdapterFusion, 1.0, true),
        (4, 4, 2, 8, Prompted, Qt, Sc::PromptsAdapter, 0.5, true),
        (2, 6, 3, 4, Prompted, Ps, Sc::PromptsAdapterFusion, 3.0, true),
        (5, 4, 1, 5, Prompted, Qt, Sc::PromptsAdapterFusion, 1.0, false),
        (3, 3, 2, 6, Codebook, Ps, Sc::All, 1.0, true),
    ];
    let mut entries = Vec::new();
    for (i, &(k, d, m, n, strategy, kv_mode, scope, tau, adapter)) in specs.iter().enumerate() {
        let config = TrainConfig {
            m,
            tau,
            prototype_strategy: strategy,
            kv_mode,
            trainable_scope: scope,
            adapter_enabled: adapter,
            seed: 90 + i as u64,
            ..TrainConfig::default_desk()
        };
        let mut rng = stream(1000 + i as u64, "gradcheck");
        let features = random_unit_rows(n, d, &mut rng)?;
        let labels: Vec<u16> = (0..n).map(|r| (r % k + 1) as u16).collect();
        let eps = sample_uniform_noise(n, k, &mut rng);
        let data = LabeledFeatures {
            features: features.clone(),
            labels: labels.clone(),
        };
        let params = ModelParams::init(&config, k, d, Some(&data))?;
        let names = params.trainable_names(&config);
        let x0 = params.pack(&names);
        for (select, loss_name) in [
            (LossSelect::Align, "align"),
            (LossSelect::Comp, "comp"),
            (LossSelect::Sep, "sep"),
            (LossSelect::Total, "total"),
        ] {
            let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
                let mut p = params.clone();
                p.unpack(&names, x)?;
                let out = forward(&p, &config, &features, &labels, Some(&eps), true, select)?;
                let by_name: BTreeMap<&str, &DenseMatrix> =
                    out.grads.iter().map(|(nm, g)| (nm.as_str(), g)).collect();
                let mut flat = Vec::with_capacity(x.len());
                for nm in &names {
                    flat.extend_from_slice(&by_name[nm.as_str()].data);
                }
                let value = match select {
                    LossSelect::Align => out.terms.align,
                    LossSelect::Comp => out.terms.comp,
                    LossSelect::Sep => out.terms.sep,
                    LossSelect::Total => out.terms.total,
                };
                Ok((value, flat))
            };
            let max_rel_err = grad_check(f, &x0, 1e-5)?;
            entries.push(GradCheckEntry {
                config: i,
                loss: loss_name.to_string(),
                n,
                k,
                d,
                params: x0.len(),
                max_rel_err,
            });
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::hard_assign;

    fn small_data(seed: u64) -> LabeledFeatures {
        generate_dataset(&DatasetSpec {
            k: 3,
            d: 6,
            n_per_class: 8,
            intra_spread: 0.2,
            inter_separation: 0.9,
            seed,
        })
        .unwrap()
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 6,
            warmup_epochs: 1,
            m: 4,
            seed,
            ..TrainConfig::default_desk()
        }
    }

    #[test]
    fn classify_prototype_rows_to_their_own_class() {
        let protos = DenseMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let preds = classify(&protos, &protos).unwrap();
        assert_eq!(preds, vec![1, 2, 3]);
    }

    #[test]
    fn classify_breaks_ties_toward_lower_index() {
        let protos = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(classify(&f, &protos).unwrap(), vec![1]);
    }

    #[test]
    fn classify_rejects_zero_feature_row() {
        let protos = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = DenseMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        match classify(&f, &protos) {
            Err(Error::DegenerateFeature(0)) => {}
            other => panic!("expected degenerate feature, got {other:?}"),
        }
    }

    #[test]
    fn classify_matches_scalar_double_loop() {
        let mut rng = stream(42, "samples");
        for trial in 0..200 {
            let n = 1 + (trial % 7);
            let k = 2 + (trial % 4);
            let d = 2 + (trial % 5);
            let f = random_unit_rows(n, d, &mut rng).unwrap();
            let p = random_unit_rows(k, d, &mut rng).unwrap();
            let got = classify(&f, &p).unwrap();
            for i in 0..n {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..k {
                    let fi = f.row(i);
                    let pc = p.row(c);
                    let dot: f64 = fi.iter().zip(pc).map(|(a, b)| a * b).sum();
                    let nf: f64 = fi.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let np: f64 = pc.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cos = dot / (nf * np);
                    if cos > best_v {
                        best_v = cos;
                        best = c;
                    }
                }
                assert_eq!(got[i], (best + 1) as u16, "trial {trial} row {i}");
            }
        }
    }

    #[test]
    fn paa_constructed_cases() {
        let hard = DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        // All correct, all assignments match.
        assert_eq!(
            paa(&hard, &[1, 2, 1], &[1, 2, 1]).unwrap(),
            Some(1.0)
        );
        // Three correct, row 2's assignment points at class 1 != label 2.
        let hard2 = DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let got = paa(&hard2, &[1, 2, 2], &[1, 2, 2]).unwrap().unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-15);
        // Nothing classified correctly: undefined, not zero.
        assert_eq!(paa(&hard, &[2, 1, 2], &[1, 2, 1]).unwrap(), None);
    }

    #[test]
    fn paa_ignores_incorrect_rows() {
        let hard = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        // Row 0 misclassified; only row 1 counts and its assignment matches.
        assert_eq!(paa(&hard, &[2, 2], &[1, 2]).unwrap(), Some(1.0));
    }

    #[test]
    fn evaluate_confusion_trace_equals_accuracy() {
        let data = small_data(3);
        let config = quick_config(3);
        let state = train(&config, &data).unwrap();
        let report = evaluate(&state.params, &config, &data).unwrap();
        let trace: u32 = (0..3).map(|c| report.confusion[c][c]).sum();
        let total: u32 = report.confusion.iter().flatten().sum();
        assert_eq!(total as usize, data.n());
        assert!((report.accuracy - trace as f64 / data.n() as f64).abs() < 1e-15);
        for pc in report.per_class.iter().flatten() {
            assert!((0.0..=1.0).contains(pc));
        }
        assert_eq!(report.config_hash.len(), 64);
        // Scalar recount straight from predictions.
        let probe = forward(
            &state.params,
            &config,
            &data.features,
            &data.labels,
            None,
            false,
            LossSelect::Total,
        )
        .unwrap();
        let preds = classify(&probe.fused, &probe.prototypes).unwrap();
        let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        assert!((report.accuracy - correct as f64 / data.n() as f64).abs() < 1e-15);
        let expected_paa = paa(&hard_assign(&probe.y), &preds, &data.labels).unwrap();
        assert_eq!(report.paa, expected_paa);
    }

    #[test]
    fn harness_output_is_worker_count_invariant() {
        let data = small_data(4);
        let base = quick_config(0);
        let a = loss_ablation(&base, &data, &[1, 2], 2, 1).unwrap();
        let b = loss_ablation(&base, &data, &[1, 2], 2, 4).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.rows.len(), 8);
        assert_eq!(a.summaries.len(), 4);
    }

    #[test]
    fn loss_ablation_align_row_matches_standalone_run() {
        let data = small_data(5);
        let base = quick_config(0);
        let result = loss_ablation(&base, &data, &[7], 2, 2).unwrap();
        let row = &result.rows[0];
        assert_eq!(row.variant, "align");

        let standalone = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            seed: 7,
            ..base.clone()
        };
        let (train_set, test_set) = few_shot_split(&data, 2, 7).unwrap();
        let state = train(&standalone, &train_set).unwrap();
        let report = evaluate(&state.params, &standalone, &test_set).unwrap();
        assert_eq!(row.accuracy, Some(report.accuracy));
        assert_eq!(row.paa, report.paa);
        assert_eq!(row.total, state.history.last().map(|h| h.total));
    }

    #[test]
    fn strategy_compare_centroid_is_perfect_on_zero_spread() {
        let data = generate_dataset(&DatasetSpec {
            k: 3,
            d: 6,
            n_per_class: 6,
            intra_spread: 0.0,
            inter_separation: 1.0,
            seed: 6,
        })
        .unwrap();
        let base = TrainConfig {
            epochs: 3,
            batch_size: 4,
            warmup_epochs: 0,
            m: 4,
            ..TrainConfig::default_desk()
        };
        let result = strategy_compare(&base, &data, &[1], 2, 2).unwrap();
        assert_eq!(result.rows.len(), 3);
        let centroid = result
            .rows
            .iter()
            .find(|r| r.variant == "centroid")
            .unwrap();
        assert_eq!(centroid.error, None);
        assert_eq!(centroid.accuracy, Some(1.0));
    }

    #[test]
    fn temperature_sweep_single_cell_and_fixed_noise_monotonicity() {
        let data = small_data(7);
        let one = temperature_sweep(&quick_config(0), &[1.0], &data, &[3], 2, 1).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert!(one.rows[0].entropy_fixed_noise.is_some());

        // Zero-epoch runs keep the grid cheap; the fixed-noise column only
        // depends on initialization, so the monotonicity claim still bites.
        let base = TrainConfig {
            epochs: 0,
            warmup_epochs: 0,
            ..quick_config(0)
        };
        let taus = [0.1, 0.3, 0.5, 1.0, 3.0, 5.0];
        let sweep = temperature_sweep(&base, &taus, &data, &[11, 12], 2, 2).unwrap();
        assert_eq!(sweep.rows.len(), 12);
        for seed in [11u64, 12] {
            let ents: Vec<f64> = sweep
                .rows
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| r.entropy_fixed_noise.unwrap())
                .collect();
            assert_eq!(ents.len(), 6);
            for w in ents.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-12,
                    "fixed-noise entropy fell from {} to {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn prompt_ablation_covers_three_modes() {
        let data = small_data(8);
        let result = prompt_ablation(&quick_config(0), &data, &[1], 2, 1).unwrap();
        let variants: Vec<&str> = result.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(
            variants,
            vec!["class_token_only", "fixed_prompts", "learnable_prompts"]
        );
        assert!(result.rows.iter().all(|r| r.error.is_none()));
    }

    #[test]
    fn fewshot_curve_emits_grid_rows() {
        let spec = DatasetSpec {
            k: 3,
            d: 6,
            n_per_class: 8,
            intra_spread: 0.2,
            inter_separation: 0.9,
            seed: 9,
        };
        let result = fewshot_curve(&quick_config(0), &spec, &[1, 2], &[1, 2], 2).unwrap();
        assert_eq!(result.rows.len(), 4);
        assert_eq!(result.summaries.len(), 2);
        assert_eq!(result.summaries[0].variant, "shots=1");
        assert_eq!(result.summaries[0].runs, 2);
    }

    #[test]
    fn failed_cells_become_error_rows() {
        let data = small_data(10);
        // shots=8 exhausts every class (8 per class), so the split fails.
        let result = loss_ablation(&quick_config(0), &data, &[1], 8, 1).unwrap();
        assert_eq!(result.rows.len(), 4);
        for row in &result.rows {
            assert!(row.error.as_deref().unwrap_or("").contains("need more than"));
            assert_eq!(row.accuracy, None);
        }
        assert_eq!(result.summaries[0].failures, 1);
    }

    #[test]
    fn gradient_suite_stays_tight() {
        let entries = gradient_suite().unwrap();
        assert_eq!(entries.len(), 40);
        for e in &entries {
            assert!(
                e.max_rel_err < 1e-4,
                "config {} loss {} drifted: {}",
                e.config,
                e.loss,
                e.max_rel_err
            );
        }
    }
}
