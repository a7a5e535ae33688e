//! Experiment orchestration: single runs, ablation sweeps, drop-frequency
//! heatmaps, checkpoints and report rendering.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{gen_dataset, DataConfig, Dataset, GridVqaSample, Vocab};
use crate::error::{Error, Result};
use crate::flops::{flops, FlopsReport};
use crate::fusion::drop_count;
use crate::io::{read_json, write_json, TensorManifest};
use crate::model::{Model, ModelConfig, Placement};
use crate::prompt::{PromptSpec, GRID};
use crate::tensor::{Activation, PoolKind, Scalar};
use crate::train::{evaluate, forward_sample, train, TrainConfig, TrainMetrics, VisionPipeline};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "ADEMVL_SEED";

/// Everything that determines a run. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Test samples used for the drop-frequency heatmap; 0 disables it.
    pub heatmap_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            heatmap_samples: 256,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let vocab = Vocab { colors: self.data.colors };
        if self.model.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "model.vocab_size is {} but {} colours need {}",
                self.model.vocab_size,
                self.data.colors,
                vocab.size()
            )));
        }
        if self.model.d_vis < self.data.colors {
            return Err(Error::Config("model.d_vis must be at least data.colors".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// Model config as actually instantiated: the run seed replaces
    /// `model.seed`.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Applies [`SEED_ENV`] if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Some(seed) = env_seed()? {
            self.seed = seed;
        }
        Ok(self)
    }
}

/// Parses [`SEED_ENV`].
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

/// Seed of the frozen synthetic encoder for a run seed.
pub fn encoder_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Kept-frequency grid for one prompt scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrid {
    pub scale: usize,
    pub side: usize,
    /// Raw kept counts, raster order.
    pub counts: Vec<u64>,
    /// `counts / (text rows · fusion sites · samples)`
    pub frequency: Vec<Scalar>,
    /// `frequency / max(frequency)`; all ones when nothing is dropped.
    pub normalized: Vec<Scalar>,
}

impl ScaleGrid {
    pub fn mean(&self) -> Scalar {
        self.frequency.iter().sum::<Scalar>() / self.frequency.len().max(1) as Scalar
    }
}

/// How often each visual row survives the adaptive mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropHeatmap {
    pub gamma: Scalar,
    pub n_visual: usize,
    pub samples: usize,
    /// Text rows times fusion sites times samples.
    pub decisions_per_row: u64,
    pub grids: Vec<ScaleGrid>,
    /// Mean frequency over all visual rows.
    pub mean_frequency: Scalar,
    /// `1 − floor(γN)/N`
    pub expected_mean: Scalar,
    /// Share of samples whose queried cell ranks in the top tenth of the
    /// finest grid by per-sample kept count. Rank is one plus the number of
    /// cells kept strictly more often.
    pub query_top_decile_rate: Scalar,
}

/// One-based competition rank of `cell` within `counts`.
pub fn competition_rank(counts: &[u64], cell: usize) -> usize {
    1 + counts.iter().filter(|&&c| c > counts[cell]).count()
}

/// Collects the drop decisions of every fusion site over `samples`.
pub fn drop_heatmap(
    model: &Model,
    vision: &VisionPipeline,
    vocab: &Vocab,
    samples: &[GridVqaSample],
) -> Result<DropHeatmap> {
    let spec = &model.config.prompt;
    let n = spec.row_count();
    let gamma = model.config.fusion.gamma;
    if gamma == 0.0 {
        log::warn!("gamma = 0: nothing is dropped, every frequency is 1");
    }
    let finest = *spec.scales.iter().min().ok_or_else(|| Error::Config("empty prompt".into()))?;
    let mut totals = vec![0u64; n];
    let mut decisions = 0u64;
    let mut hits = 0usize;
    let mut ranges = None;
    for s in samples {
        let (img, trace) = forward_sample(model, vision, vocab, s, true)?;
        let mut local = vec![0u64; n];
        for dec in trace.decisions() {
            dec.accumulate_kept(&mut local);
            decisions += dec.rows() as u64;
        }
        let range = img.prompt.scale_range(finest).expect("finest scale present");
        let side = GRID / finest;
        let cell = (s.row as usize / finest) * side + s.col as usize / finest;
        let fine = &local[range.clone()];
        if competition_rank(fine, cell) as Scalar <= (fine.len() as Scalar / 10.0).ceil() {
            hits += 1;
        }
        for (t, l) in totals.iter_mut().zip(&local) {
            *t += l;
        }
        if ranges.is_none() {
            ranges = Some(
                spec.scales
                    .iter()
                    .map(|&sc| (sc, img.prompt.scale_range(sc).expect("scale present")))
                    .collect::<Vec<_>>(),
            );
        }
    }
    let denom = decisions.max(1) as Scalar;
    let grids = ranges
        .unwrap_or_default()
        .into_iter()
        .map(|(scale, range)| {
            let counts = totals[range].to_vec();
            let frequency: Vec<Scalar> = counts.iter().map(|&c| c as Scalar / denom).collect();
            let max = frequency.iter().copied().fold(0.0, Scalar::max);
            let normalized = frequency
                .iter()
                .map(|&f| if max > 0.0 { f / max } else { 1.0 })
                .collect();
            ScaleGrid {
                scale,
                side: GRID / scale,
                counts,
                frequency,
                normalized,
            }
        })
        .collect();
    let mean_frequency = totals.iter().sum::<u64>() as Scalar / (denom * n as Scalar);
    Ok(DropHeatmap {
        gamma,
        n_visual: n,
        samples: samples.len(),
        decisions_per_row: decisions,
        grids,
        mean_frequency,
        expected_mean: 1.0 - drop_count(gamma, n) as Scalar / n as Scalar,
        query_top_decile_rate: hits as Scalar / samples.len().max(1) as Scalar,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub test_accuracy: Scalar,
    /// Accuracy of the same weights with every fusion site skipped.
    pub baseline_accuracy: Scalar,
    pub loss_curve: Vec<Scalar>,
    pub trainable_params: usize,
    pub flops: FlopsReport,
    pub heatmap: Option<DropHeatmap>,
    pub wall_clock_s: Scalar,
}

impl RunReport {
    /// Everything except wall-clock time, for reproducibility checks.
    pub fn same_outcome(&self, other: &RunReport) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.test_accuracy == other.test_accuracy
            && self.baseline_accuracy == other.baseline_accuracy
            && self.loss_curve == other.loss_curve
            && self.heatmap == other.heatmap
    }
}

/// Trained model with everything needed to evaluate it again.
pub struct TrainedRun {
    pub model: Model,
    pub vision: VisionPipeline,
    pub data: Dataset,
    pub metrics: TrainMetrics,
    pub report: RunReport,
}

fn baseline_accuracy(model: &Model, vision: &VisionPipeline, vocab: &Vocab, samples: &[GridVqaSample]) -> Result<Scalar> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for s in samples {
        let (_, t) = forward_sample(model, vision, vocab, s, false)?;
        hits += (crate::train::predict(&t, s) == vocab.color(s.answer)) as usize;
    }
    Ok(hits as Scalar / samples.len() as Scalar)
}

/// Generates data, trains, evaluates and summarises one configuration.
pub fn run_experiment_full(cfg: &ExperimentConfig, label: &str) -> Result<TrainedRun> {
    cfg.validate()?;
    let start = Instant::now();
    let data = gen_dataset(cfg.seed, cfg.data.n_train, cfg.data.n_test, cfg.data.colors)?;
    let model_cfg = cfg.effective_model();
    let vision = VisionPipeline::new(cfg.data.colors, model_cfg.d_vis, model_cfg.prompt.clone(), encoder_seed(cfg.seed))?;
    let mut model = Model::new(model_cfg)?;
    let metrics = train(&mut model, &vision, &data.vocab, &data.train, &cfg.train, cfg.seed)?;
    let test_accuracy = evaluate(&model, &vision, &data.vocab, &data.test)?;
    let baseline = baseline_accuracy(&model, &vision, &data.vocab, &data.test)?;
    let heatmap = if cfg.heatmap_samples > 0 && !data.test.is_empty() {
        let k = cfg.heatmap_samples.min(data.test.len());
        Some(drop_heatmap(&model, &vision, &data.vocab, &data.test[..k])?)
    } else {
        None
    };
    // text rows in the stream: [cls] plus the question tokens
    let text_rows = 3;
    let report = RunReport {
        label: label.to_string(),
        config: cfg.clone(),
        seed: cfg.seed,
        test_accuracy,
        baseline_accuracy: baseline,
        loss_curve: metrics.losses.clone(),
        trainable_params: model.fusion.trainable_count(),
        flops: flops(text_rows, model.config.prompt.row_count() as u64, model.config.d as u64)?,
        heatmap,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    log::info!("{label}: accuracy {test_accuracy:.4} in {:.1}s", report.wall_clock_s);
    Ok(TrainedRun {
        model,
        vision,
        data,
        metrics,
        report,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    Ok(run_experiment_full(cfg, "run")?.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Projection,
    Placement,
    Pooling,
    Alpha,
    Beta,
    Gamma,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::Projection,
        AblationAxis::Placement,
        AblationAxis::Pooling,
        AblationAxis::Alpha,
        AblationAxis::Beta,
        AblationAxis::Gamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Projection => "projection",
            AblationAxis::Placement => "placement",
            AblationAxis::Pooling => "pooling",
            AblationAxis::Alpha => "alpha",
            AblationAxis::Beta => "beta",
            AblationAxis::Gamma => "gamma",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationAxis::ALL.iter().map(|a| a.name()).collect();
                Error::Usage(format!("unknown axis {s:?}; expected one of {}", names.join(", ")))
            })
    }

    /// Labelled configurations of this sweep, derived from `base`.
    pub fn variants(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::Projection => Activation::ALL
                .into_iter()
                .map(|phi| (phi.name().to_string(), with(&|c| c.model.fusion.phi = phi)))
                .collect(),
            AblationAxis::Placement => Placement::ALL
                .into_iter()
                .map(|p| (p.to_string(), with(&|c| c.model.placement = p)))
                .collect(),
            AblationAxis::Pooling => pooling_rows()
                .into_iter()
                .map(|spec| (spec.label(), with(&|c| c.model.prompt = spec.clone())))
                .collect(),
            AblationAxis::Alpha => [0.01, 0.05, 0.1, 0.5, 1.0]
                .into_iter()
                .map(|a| (format!("alpha={a}"), with(&|c| c.model.fusion.alpha = a)))
                .collect(),
            AblationAxis::Beta => [0.001, 0.01, 0.1, 1.0]
                .into_iter()
                .map(|b| (format!("beta={b}"), with(&|c| c.model.fusion.beta = b)))
                .collect(),
            AblationAxis::Gamma => [0.0, 0.1, 0.2, 0.3, 0.4]
                .into_iter()
                .map(|g| (format!("gamma={g}"), with(&|c| c.model.fusion.gamma = g)))
                .collect(),
        }
    }
}

/// The eight downsampling rows: 256, 64, 16, 64+16, 256+16, 256+64,
/// 256+64+16 (average pooling) and 256+64 with max pooling.
pub fn pooling_rows() -> Vec<PromptSpec> {
    let avg = |scales: &[usize]| PromptSpec {
        scales: scales.to_vec(),
        pool: PoolKind::Avg,
    };
    vec![
        avg(&[1]),
        avg(&[2]),
        avg(&[4]),
        avg(&[2, 4]),
        avg(&[1, 4]),
        avg(&[1, 2]),
        avg(&[1, 2, 4]),
        PromptSpec {
            scales: vec![1, 2],
            pool: PoolKind::Max,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub config: ExperimentConfig,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

impl AblationEntry {
    pub fn accuracy(&self) -> Option<Scalar> {
        self.report.as_ref().map(|r| r.test_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub base_seed: u64,
    /// Sorted by accuracy, best first; failed runs last.
    pub entries: Vec<AblationEntry>,
}

/// One training run per variant. Variant `i` runs with seed
/// `base.seed + i`; a failing run is recorded and the sweep continues.
pub fn ablate(axis: AblationAxis, base: &ExperimentConfig) -> AblationResult {
    let mut entries: Vec<AblationEntry> = axis
        .variants(base)
        .into_iter()
        .enumerate()
        .map(|(i, (label, mut config))| {
            config.seed = base.seed.wrapping_add(i as u64);
            match run_experiment_full(&config, &label) {
                Ok(run) => AblationEntry {
                    label,
                    config,
                    report: Some(run.report),
                    error: None,
                },
                Err(e) => {
                    log::warn!("{label}: {e}");
                    AblationEntry {
                        label,
                        config,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    entries.sort_by(|a, b| match (a.accuracy(), b.accuracy()) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    AblationResult {
        axis,
        base_seed: base.seed,
        entries,
    }
}

impl AblationResult {
    pub fn markdown(&self) -> String {
        let mut s = format!("## Ablation: {}\n\n", self.axis.name());
        s.push_str("| rank | configuration | seed | accuracy | text-only accuracy | final loss |\n");
        s.push_str("|---:|---|---:|---:|---:|---:|\n");
        for (i, e) in self.entries.iter().enumerate() {
            match &e.report {
                Some(r) => {
                    let last = r.loss_curve.last().copied().unwrap_or(Scalar::NAN);
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {:.4} | {:.4} | {:.4} |",
                        i + 1,
                        e.label,
                        r.seed,
                        r.test_accuracy,
                        r.baseline_accuracy,
                        last
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | failed: {} | | |",
                        i + 1,
                        e.label,
                        e.config.seed,
                        e.error.as_deref().unwrap_or("unknown")
                    );
                }
            }
        }
        s
    }
}

impl RunReport {
    pub fn markdown(&self) -> String {
        let mut s = format!("## Run: {}\n\n", self.label);
        let (first, last) = TrainMetrics {
            losses: self.loss_curve.clone(),
            final_lr: 0.0,
        }
        .loss_ends();
        let rows = [
            ("seed", self.seed.to_string()),
            ("test accuracy", format!("{:.4}", self.test_accuracy)),
            ("text-only accuracy", format!("{:.4}", self.baseline_accuracy)),
            ("loss (first / last 10%)", format!("{first:.4} / {last:.4}")),
            ("trainable parameters", self.trainable_params.to_string()),
            ("standard FLOPs", self.flops.flops_standard.to_string()),
            ("param-free FLOPs", self.flops.flops_param_free.to_string()),
            ("wall clock (s)", format!("{:.1}", self.wall_clock_s)),
        ];
        s.push_str("| metric | value |\n|---|---:|\n");
        for (k, v) in rows {
            let _ = writeln!(s, "| {k} | {v} |");
        }
        if let Some(h) = &self.heatmap {
            let _ = writeln!(
                s,
                "| mean kept frequency | {:.6} (expected {:.6}) |\n| queried cell in top decile | {:.4} |",
                h.mean_frequency, h.expected_mean, h.query_top_decile_rate
            );
        }
        s
    }
}

/// One CSV grid per scale: `side` lines of comma-separated values.
pub fn grid_csv(values: &[Scalar], side: usize) -> String {
    values
        .chunks(side)
        .map(|row| row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

/// Writes `heatmap.json` plus raw and normalised CSV grids per scale.
pub fn write_heatmap(dir: &Path, h: &DropHeatmap) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("heatmap.json"), h)?;
    for g in &h.grids {
        for (kind, values) in [("frequency", &g.frequency), ("normalized", &g.normalized)] {
            let path = dir.join(format!("scale{}_{kind}.csv", g.scale));
            std::fs::write(&path, grid_csv(values, g.side)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ExperimentConfig,
    pub step: usize,
    pub test_accuracy: Scalar,
    pub final_loss: Option<Scalar>,
    pub fusion: TensorManifest,
    pub base: TensorManifest,
}

const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Writes the fusion and frozen base tensors plus a manifest into `dir`.
pub fn save_checkpoint(dir: &Path, run: &TrainedRun) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fusion = TensorManifest::write_all(dir, run.model.fusion.tensors())?;
    let base_named = run.model.base.named_tensors();
    let base = TensorManifest::write_all(dir, base_named.iter().map(|(n, t)| (n.as_str(), t)))?;
    let manifest = CheckpointManifest {
        config: run.report.config.clone(),
        step: run.metrics.losses.len(),
        test_accuracy: run.report.test_accuracy,
        final_loss: run.metrics.losses.last().copied(),
        fusion,
        base,
    };
    write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
}

/// Rebuilds a checkpointed model. The base is regenerated from the stored
/// seed and must match the stored tensors exactly.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Model, VisionPipeline, Dataset)> {
    let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
    let cfg = &manifest.config;
    cfg.validate()?;
    let mut model = Model::new(cfg.effective_model())?;
    for (name, t) in model.base.named_tensors() {
        if manifest.base.load(dir, &name)? != t {
            return Err(Error::Format {
                path: dir.join(&manifest.base.tensors[&name].file),
                reason: format!("frozen tensor {name} does not match its seed"),
            });
        }
    }
    for (name, t) in model.fusion.tensors_mut() {
        let loaded = manifest.fusion.load(dir, name)?;
        if loaded.shape() != t.shape() {
            return Err(Error::shape("checkpoint tensor", t.shape(), loaded.shape()));
        }
        *t = loaded;
    }
    let vision = VisionPipeline::new(cfg.data.colors, cfg.model.d_vis, cfg.model.prompt.clone(), encoder_seed(cfg.seed))?;
    let data = gen_dataset(cfg.seed, cfg.data.n_train, cfg.data.n_test, cfg.data.colors)?;
    Ok((manifest, model, vision, data))
}
