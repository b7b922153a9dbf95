//! The experiment loop: clean training with an attacker appending messages
//! every iteration, per-epoch metrics, and the output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aggregators::{aggregate, AggregationResult, AggregatorSpec, SelectionTracker};
use crate::attacks::{craft, craft_lie, AttackKind, AuxiliaryStats};
use crate::datasets::{
    epoch_batches, load_cifar10, partition, read_pfds, synth_blobs, Dataset, LabeledExample, Partition, SplitSpec,
};
use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::inversion::{
    init_poisons, invert, poison_gradients, FeasibleSet, InversionConfig, Objective, ObjectiveKind, PoisonBatch,
};
use crate::models::{Architecture, Model, ModelConfig};
use crate::optimizers::{Optimizer, OptimizerSpec};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    SynthBlobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        /// Defaults to a value derived from the master seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// The five training batches form the pool that is split; the test
    /// split is always the official test batch.
    Cifar10 { dir: PathBuf },
    Pfds { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    pub split: SplitSpec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    #[default]
    GradientAttack,
    DataPoisoning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub optimizer: OptimizerSpec,
    pub aggregator: AggregatorSpec,
    #[serde(default)]
    pub attack: Option<AttackKind>,
    #[serde(default)]
    pub mode: AttackMode,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub feasible: Option<FeasibleSet>,
    #[serde(default)]
    pub inversion: InversionConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dump_poisons: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_value(load_document(path)?)
    }

    /// Poison messages per iteration: zero without an attack or at
    /// `alpha = 0`, otherwise `max(1, round(alpha n_b / (1 - alpha)))`.
    pub fn poison_count(&self) -> usize {
        if self.attack.is_none() || self.alpha == 0.0 {
            return 0;
        }
        let nb = self.batch_size as f64;
        ((self.alpha * nb / (1.0 - self.alpha)).round() as usize).max(1)
    }

    pub fn realized_alpha(&self) -> f64 {
        let np = self.poison_count() as f64;
        np / (self.batch_size as f64 + np)
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 0.5), got {}", self.alpha)));
        }
        self.optimizer.validate()?;
        self.aggregator.validate()?;
        let split = &self.dataset.split;
        split.validate()?;
        let cifar = matches!(self.dataset.source, DataSource::Cifar10 { .. });
        if cifar && split.test > 0.0 {
            return Err(Error::config("cifar10 uses the official test batch; set split.test to 0"));
        }
        if split.train <= 0.0 || split.val <= 0.0 || (!cifar && split.test <= 0.0) {
            return Err(Error::config("train, val and test splits must be non-empty"));
        }
        if let Some(attack) = &self.attack {
            attack.validate()?;
            if split.aux <= 0.0 {
                return Err(Error::config("an attack needs a non-empty aux split"));
            }
        }
        if self.mode == AttackMode::DataPoisoning && self.attack.is_some() {
            let feasible = self
                .feasible
                .ok_or_else(|| Error::config("data poisoning needs a feasible set"))?;
            feasible.validate()?;
            self.inversion.validate()?;
            if feasible.needs_anchor() && self.inversion.init != crate::inversion::InitPolicy::AuxClone {
                return Err(Error::config("the neighborhood set requires aux_clone initialization"));
            }
        }
        if let AggregatorSpec::MultiKrum { f } = self.aggregator {
            let n = self.batch_size + self.poison_count();
            AggregatorSpec::krum_count(n, f)?;
        }
        Ok(())
    }

    /// Loads and splits the data, then checks split sizes against the run.
    pub fn load_data(&self) -> Result<Partition> {
        let split_seed = self.dataset.split.seed.unwrap_or_else(|| stream(self.seed, Stream::Split).next_u64());
        let part = match &self.dataset.source {
            DataSource::SynthBlobs {
                classes,
                per_class,
                dim,
                separation,
                seed,
            } => {
                let seed = seed.unwrap_or_else(|| stream(self.seed, Stream::Data).next_u64());
                partition(&synth_blobs(*classes, *per_class, *dim, *separation, seed)?, &self.dataset.split, split_seed)?
            }
            DataSource::Pfds { path } => partition(&read_pfds(path)?, &self.dataset.split, split_seed)?,
            DataSource::Cifar10 { dir } => {
                let cifar = load_cifar10(dir)?;
                let mut p = partition(&cifar.train, &self.dataset.split, split_seed)?;
                p.test = cifar.test;
                p
            }
        };
        let needs_aux = self.poison_count() > 0;
        for (name, ds, needed) in [
            ("train", &part.train, true),
            ("val", &part.val, true),
            ("test", &part.test, true),
            ("aux", &part.aux, needs_aux),
        ] {
            if needed && ds.is_empty() {
                return Err(Error::config(format!("the {name} split is empty")));
            }
        }
        Ok(part)
    }
}

// ---------------------------------------------------------------------------
// Seed streams

/// Independent random streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    TrainShuffle = 2,
    AuxShuffle = 3,
    Attack = 4,
    PoisonInit = 5,
    Split = 6,
    Data = 7,
}

pub fn stream(master: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(which as u64);
    rng
}

// ---------------------------------------------------------------------------
// The attacker

/// Everything the attacker can touch: the auxiliary split, its own random
/// streams and the public parameters handed to it each iteration.
pub struct Attacker {
    kind: AttackKind,
    mode: AttackMode,
    feasible: Option<FeasibleSet>,
    inversion: InversionConfig,
    aggregator: AggregatorSpec,
    aux: Dataset,
    batch_size: usize,
    n_p: usize,
    aux_rng: ChaCha8Rng,
    attack_rng: ChaCha8Rng,
    poison_rng: ChaCha8Rng,
    queue: Vec<usize>,
}

/// Messages appended by the attacker in one iteration.
#[derive(Clone, Debug)]
pub struct AttackRound {
    pub messages: Vec<GradientVector>,
    pub z_max: Option<f64>,
    /// Best poisoning objective reached (data poisoning only).
    pub f_p: Option<f64>,
    pub poisons: Option<PoisonBatch>,
}

impl Attacker {
    pub fn new(cfg: &ExperimentConfig, aux: Dataset) -> Result<Option<Attacker>> {
        let n_p = cfg.poison_count();
        let Some(kind) = cfg.attack.clone() else {
            return Ok(None);
        };
        if n_p == 0 {
            return Ok(None);
        }
        Ok(Some(Attacker {
            kind,
            mode: cfg.mode,
            feasible: cfg.feasible,
            inversion: cfg.inversion.clone(),
            aggregator: cfg.aggregator,
            aux,
            batch_size: cfg.batch_size,
            n_p,
            aux_rng: stream(cfg.seed, Stream::AuxShuffle),
            attack_rng: stream(cfg.seed, Stream::Attack),
            poison_rng: stream(cfg.seed, Stream::PoisonInit),
            queue: Vec::new(),
        }))
    }

    /// Next auxiliary batch of `n_b` examples (the whole split if smaller),
    /// walking through fresh permutations of the split.
    fn next_aux_batch(&mut self) -> Vec<LabeledExample> {
        let want = self.batch_size.min(self.aux.len());
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.queue.is_empty() {
                let seed = self.aux_rng.next_u64();
                self.queue = epoch_batches(self.aux.len(), self.aux.len(), seed).concat();
                self.queue.reverse();
            }
            let i = self.queue.pop().expect("refilled");
            out.push(self.aux.examples[i].clone());
        }
        out
    }

    /// Auxiliary statistics at the public parameters `model`.
    pub fn view(&mut self, model: &Model) -> Result<AuxiliaryStats> {
        let batch = self.next_aux_batch();
        let grads = model.per_sample_gradients(&batch)?;
        AuxiliaryStats::from_gradients(grads.into_iter().map(|g| g.gradient).collect())
    }

    pub fn round(&mut self, model: &Model) -> Result<AttackRound> {
        let stats = self.view(model)?;
        match self.mode {
            AttackMode::GradientAttack => {
                let a = craft(&self.kind, &stats, self.n_p, &self.aggregator, &mut self.attack_rng)?;
                Ok(AttackRound {
                    messages: vec![a.vector; self.n_p],
                    z_max: a.z_max,
                    f_p: None,
                    poisons: None,
                })
            }
            AttackMode::DataPoisoning => {
                let feasible = self.feasible.expect("validated");
                let (objective, z_max) = match &self.kind {
                    AttackKind::GradientAscent { .. } => (ObjectiveKind::GradientAscent, None),
                    AttackKind::Orthogonal => (ObjectiveKind::Orthogonal, None),
                    AttackKind::LittleIsEnough { z_grid, stay_selected } => {
                        let a = craft_lie(&stats, self.n_p, z_grid, *stay_selected, &self.aggregator)?;
                        (ObjectiveKind::LittleIsEnough { target: a.vector }, a.z_max)
                    }
                };
                let objective = Objective::new(objective, &stats);
                let init = init_poisons(
                    self.inversion.init,
                    self.n_p,
                    &feasible,
                    &self.aux.examples,
                    self.aux.classes,
                    &mut self.poison_rng,
                )?;
                let r = invert(&objective, init, &feasible, &self.inversion, model)?;
                let messages = poison_gradients(model, &r.batch.examples)?;
                Ok(AttackRound {
                    messages,
                    z_max,
                    f_p: Some(r.best),
                    poisons: Some(r.batch),
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    /// NaN when no poison was submitted.
    pub sel_rate: f64,
    /// Mean over the epoch; NaN unless the attack is little-is-enough.
    pub z_max: f64,
    /// Mean best objective over the epoch; NaN outside data poisoning.
    pub f_p: f64,
    pub diverged: bool,
}

pub const CSV_HEADER: &str = "epoch,train_loss,val_acc,val_loss,sel_rate,z_max,f_p,diverged";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            fmt_g9(self.train_loss),
            fmt_g9(self.val_acc),
            fmt_g9(self.val_loss),
            fmt_g9(self.sel_rate),
            fmt_g9(self.z_max),
            fmt_g9(self.f_p),
            self.diverged as u8
        )
    }
}

/// Nine significant digits in the style of C's `%.9g`.
pub fn fmt_g9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&exp) {
        trim(format!("{:.*}", (8 - exp) as usize, v))
    } else {
        let m = trim(mantissa.to_string());
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub best_val_acc: f64,
    pub best_epoch: usize,
    /// Test metrics at the parameters of the best validation epoch.
    pub test_acc: f64,
    pub test_loss: f64,
    pub final_val_acc: f64,
    pub alpha: f64,
    pub realized_alpha: f64,
    pub poisons_per_step: usize,
    pub diverged: bool,
    /// Kept out of `summary.json` so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub config: ExperimentConfig,
    pub classes: usize,
    /// Last poison batch of every epoch, when poisons were crafted.
    pub poison_dumps: Vec<(usize, PoisonBatch)>,
}

// ---------------------------------------------------------------------------
// Training loop

/// Outcome of one training iteration.
#[derive(Clone, Debug)]
pub struct Iteration {
    pub attack: Option<AttackRound>,
    pub clean_loss: f64,
    pub aggregation: Option<AggregationResult>,
    /// Message indices holding poisons.
    pub poison_indices: Vec<usize>,
    pub diverged: bool,
}

pub struct Experiment {
    cfg: ExperimentConfig,
    data: Partition,
    model: Model,
    optimizer: Optimizer,
    attacker: Option<Attacker>,
    train_rng: ChaCha8Rng,
    diverged: bool,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = cfg.load_data()?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: ExperimentConfig, data: Partition) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(ModelConfig {
            architecture: cfg.model.architecture.clone(),
            input_shape: data.train.input_shape.clone(),
            classes: data.train.classes,
            seed: stream(cfg.seed, Stream::Init).next_u64(),
        })?;
        let optimizer = Optimizer::new(cfg.optimizer, model.dim());
        let attacker = Attacker::new(&cfg, data.aux.clone())?;
        Ok(Experiment {
            train_rng: stream(cfg.seed, Stream::TrainShuffle),
            cfg,
            data,
            model,
            optimizer,
            attacker,
            diverged: false,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn data(&self) -> &Partition {
        &self.data
    }

    /// One update from the training examples at `batch` (indices into the
    /// train split). The attacker moves first and never sees the batch.
    pub fn iterate(&mut self, batch: &[usize]) -> Result<Iteration> {
        if self.diverged {
            return Ok(Iteration {
                attack: None,
                clean_loss: f64::NAN,
                aggregation: None,
                poison_indices: Vec::new(),
                diverged: true,
            });
        }
        let attack = match &mut self.attacker {
            Some(a) => Some(a.round(&self.model)?),
            None => None,
        };
        let examples: Vec<LabeledExample> = batch.iter().map(|&i| self.data.train.examples[i].clone()).collect();
        let clean = self.model.per_sample_gradients(&examples)?;
        let clean_loss = clean.iter().map(|g| g.loss).sum::<f64>() / clean.len() as f64;
        let mut messages: Vec<GradientVector> = clean.into_iter().map(|g| g.gradient).collect();
        let first_poison = messages.len();
        if let Some(a) = &attack {
            messages.extend(a.messages.iter().cloned());
        }
        let poison_indices: Vec<usize> = (first_poison..messages.len()).collect();
        let agg = aggregate(&self.cfg.aggregator, &messages)?;
        let mut params = self.model.flat_params();
        if agg.aggregate.is_finite() && clean_loss.is_finite() {
            self.optimizer.step(&mut params, &agg.aggregate)?;
            self.model.set_flat_params(&params)?;
        } else {
            self.diverged = true;
        }
        if !self.model.params_finite() {
            self.diverged = true;
        }
        if self.diverged {
            warn!("training diverged; parameters are frozen from here on");
        }
        Ok(Iteration {
            attack,
            clean_loss,
            aggregation: Some(agg),
            poison_indices,
            diverged: self.diverged,
        })
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let started = Instant::now();
        let n_p = self.cfg.poison_count();
        let mut records = Vec::with_capacity(self.cfg.epochs);
        let mut best: Option<(f64, usize, Model)> = None;
        let mut poison_dumps = Vec::new();
        for epoch in 1..=self.cfg.epochs {
            let seed = self.train_rng.next_u64();
            let batches = epoch_batches(self.data.train.len(), self.cfg.batch_size, seed);
            let mut tracker = SelectionTracker::default();
            let (mut loss_sum, mut loss_n) = (0.0, 0usize);
            let (mut z_sum, mut z_n, mut f_sum, mut f_n) = (0.0, 0usize, 0.0, 0usize);
            let mut last_poisons = None;
            for batch in &batches {
                let it = self.iterate(batch)?;
                loss_sum += it.clean_loss * batch.len() as f64;
                loss_n += batch.len();
                if let Some(agg) = &it.aggregation {
                    tracker.record(agg, &it.poison_indices);
                }
                if let Some(a) = it.attack {
                    if let Some(z) = a.z_max {
                        z_sum += z;
                        z_n += 1;
                    }
                    if let Some(f) = a.f_p {
                        f_sum += f;
                        f_n += 1;
                    }
                    if a.poisons.is_some() {
                        last_poisons = a.poisons;
                    }
                }
            }
            let val = self.model.evaluate(&self.data.val.examples)?;
            let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
            let record = MetricsRecord {
                epoch,
                train_loss: mean(loss_sum, loss_n),
                val_acc: val.accuracy,
                val_loss: val.mean_loss,
                sel_rate: tracker.rate().unwrap_or(f64::NAN),
                z_max: mean(z_sum, z_n),
                f_p: mean(f_sum, f_n),
                diverged: self.diverged,
            };
            info!(
                "epoch {epoch}: train_loss {:.4} val_acc {:.4} sel_rate {:.3}",
                record.train_loss, record.val_acc, record.sel_rate
            );
            if best.as_ref().is_none_or(|(b, _, _)| val.accuracy > *b) {
                best = Some((val.accuracy, epoch, self.model.clone()));
            }
            if let Some(p) = last_poisons {
                poison_dumps.push((epoch, p));
            }
            records.push(record);
        }
        let (best_val_acc, best_epoch, best_model) = best.expect("at least one epoch");
        let test = best_model.evaluate(&self.data.test.examples)?;
        let summary = RunSummary {
            best_val_acc,
            best_epoch,
            test_acc: test.accuracy,
            test_loss: test.mean_loss,
            final_val_acc: records.last().expect("at least one epoch").val_acc,
            alpha: self.cfg.alpha,
            realized_alpha: self.cfg.realized_alpha(),
            poisons_per_step: n_p,
            diverged: self.diverged,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        Ok(RunOutput {
            records,
            summary,
            config: self.cfg,
            classes: self.data.train.classes,
            poison_dumps,
        })
    }
}

pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunOutput> {
    Experiment::new(cfg)?.run()
}

// ---------------------------------------------------------------------------
// Output files

/// Fails early if `dir` cannot be created or written to.
pub fn check_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    #[serde(flatten)]
    summary: &'a RunSummary,
    config: ExperimentConfig,
}

pub fn summary_json(out: &RunOutput) -> Result<String> {
    // The output location is not part of the experiment.
    let mut config = out.config.clone();
    config.output_dir = None;
    let mut s = serde_json::to_string_pretty(&SummaryFile {
        summary: &out.summary,
        config,
    })?;
    s.push('\n');
    Ok(s)
}

/// Writes `metrics.csv`, `summary.json`, `timing.json` and, when asked for,
/// the poison dumps.
pub fn emit_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    let write = |name: &str, contents: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(path, e))
    };
    write("metrics.csv", metrics_csv(&out.records).as_bytes())?;
    write("summary.json", summary_json(out)?.as_bytes())?;
    let timing = serde_json::json!({ "wall_clock_seconds": out.summary.wall_clock_seconds });
    write("timing.json", format!("{timing}\n").as_bytes())?;
    if out.config.dump_poisons {
        let image_like = matches!(
            out.config.feasible,
            Some(FeasibleSet::ImageEncoding) | Some(FeasibleSet::Neighborhood { .. })
        );
        for (epoch, batch) in &out.poison_dumps {
            batch.write_pfds(out.classes, &dir.join(format!("poisons_epoch{epoch}.pfds")))?;
            if image_like {
                batch.write_bytes(&dir.join(format!("poisons_epoch{epoch}.bin")))?;
            }
        }
    }
    Ok(())
}

/// Validates, checks the output directory, runs and writes the outputs.
pub fn run_to_dir(cfg: ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    check_output_dir(dir)?;
    let out = run_experiment(cfg)?;
    emit_outputs(&out, dir)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Overrides and sweeps

/// Reads a JSON file without interpreting it, e.g. to apply overrides first.
pub fn load_document(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Parses `value` as JSON, falling back to a plain string.
fn parse_loose(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets the dotted `key` inside `doc`, creating objects along the way.
pub fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(Error::config(format!("override {key:?}: {part:?} is inside a non-object")));
            }
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

/// Applies `key=value` overrides; values are JSON when they parse as such.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
        set_path(doc, k.trim(), parse_loose(v.trim()))?;
    }
    Ok(())
}

/// Assignments made at one grid point, and the resulting document.
pub type GridPoint = (Vec<(String, Value)>, Value);

/// Cartesian product of a grid `{ "dotted.key": [v1, v2, ...], ... }` over
/// `base`, keys in sorted order with the last key varying fastest.
pub fn grid_documents(base: &Value, grid: &Value) -> Result<Vec<GridPoint>> {
    let grid = grid
        .as_object()
        .ok_or_else(|| Error::config("a sweep grid must be a JSON object of lists"))?;
    let mut axes: Vec<(&String, &Vec<Value>)> = Vec::new();
    for (k, v) in grid {
        let values = v
            .as_array()
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::config(format!("grid key {k:?} must map to a non-empty list")))?;
        axes.push((k, values));
    }
    axes.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = vec![(Vec::new(), base.clone())];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(out.len() * values.len());
        for (assign, doc) in &out {
            for v in values {
                let mut doc = doc.clone();
                set_path(&mut doc, key, v.clone())?;
                let mut assign = assign.clone();
                assign.push((key.clone(), v.clone()));
                next.push((assign, doc));
            }
        }
        out = next;
    }
    Ok(out)
}
