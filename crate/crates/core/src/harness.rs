//! Experiment orchestration: pretraining, pruning arms that share a pretrained
//! checkpoint per seed, intra/cross-domain evaluation, seed aggregation and
//! report tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::domains::{self, split, stream_rng, BatchIterator, Dataset, SplitPlan, SyntheticSpec};
use crate::error::{Error, Result};
use crate::importance::IoRConfig;
use crate::metrics::accuracy;
use crate::nn::{ArchConfig, GatedModel};
use crate::objective::PretrainLoss;
use crate::pruning::{prune_finetune_loop, train_step, write_event_log, Criterion, FinetuneConfig, OptimizerConfig, PrunedModelRecord, TrainState};
use crate::scalar::Scalar;

/// Where the experiment's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// A DGPD container.
    Path(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => domains::generate(spec),
            DataSource::Path(p) => Dataset::load(p).map_err(|e| e.context(format!("loading {}", p.display()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub loss: PretrainLoss,
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: PretrainLoss::default(),
            epochs: 60,
            batch_size: 63,
            optimizer: OptimizerConfig {
                learning_rate: 0.05,
                momentum: 0.9,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    /// Arms run from the same pretrained checkpoint.
    pub criteria: Vec<Criterion>,
    pub ior: IoRConfig,
    pub finetune: FinetuneConfig,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            criteria: vec![Criterion::Taylor, Criterion::Ior],
            ior: IoRConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Floating-point type used for training; checkpoints are always stored as f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataSource,
    pub held_out_domain: usize,
    #[serde(default)]
    pub architecture: ArchConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub precision: Precision,
    /// Directory receiving checkpoints, logs and results; nothing is written when absent.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::from_toml(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that does not need the data itself.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.pruning.criteria.is_empty() {
            return Err(Error::Config("at least one pruning criterion is required".into()));
        }
        self.architecture.validate()?;
        self.pretrain.loss.validate()?;
        self.pretrain.optimizer.validate()?;
        self.pruning.ior.validate()?;
        self.pruning.finetune.optimizer.validate()?;
        self.pruning.finetune.schedule.validate(&self.architecture.channels)?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if self.held_out_domain >= spec.n_domains {
                return Err(Error::Config(format!(
                    "held-out domain {} does not exist ({} domains)",
                    self.held_out_domain, spec.n_domains
                )));
            }
        }
        Ok(())
    }

    /// Checks that the architecture fits the data.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let a = &self.architecture;
        if (a.in_channels, a.height, a.width, a.n_classes) != (dataset.channels, dataset.height, dataset.width, dataset.n_classes) {
            return Err(Error::Config(format!(
                "architecture expects {}x{}x{} inputs with {} classes, data has {}x{}x{} with {}",
                a.in_channels, a.height, a.width, a.n_classes, dataset.channels, dataset.height, dataset.width, dataset.n_classes
            )));
        }
        if self.held_out_domain >= dataset.n_domains() {
            return Err(Error::Config(format!("held-out domain {} not in data", self.held_out_domain)));
        }
        Ok(())
    }
}

/// Independent sub-seeds of one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub split: u64,
    pub init: u64,
    pub pretrain: u64,
    pub finetune: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[0x5EED]);
        Self {
            split: rng.next_u64(),
            init: rng.next_u64(),
            pretrain: rng.next_u64(),
            finetune: rng.next_u64(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    /// Top-1 accuracy (%) on the pooled source validation splits.
    pub intra: f64,
    /// Top-1 accuracy (%) on the whole held-out domain.
    pub cross: f64,
}

pub fn evaluate<S: Scalar>(model: &GatedModel<S>, dataset: &Dataset, plan: &SplitPlan) -> Result<Evaluation> {
    Ok(Evaluation {
        intra: accuracy(model, dataset, &plan.validation_indices())?,
        cross: accuracy(model, dataset, &plan.test)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: u64,
    pub mean_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainRecord<S> {
    /// Best-validation checkpoint; the initial model when no epoch ran.
    pub model: GatedModel<S>,
    pub best_epoch: Option<u64>,
    pub best_validation_accuracy: f64,
    pub history: Vec<EpochStat>,
}

/// Trains `model` on the split's source training data and keeps the epoch
/// with the best pooled validation accuracy.
pub fn pretrain<S: Scalar>(
    model: &GatedModel<S>,
    dataset: &Dataset,
    plan: &SplitPlan,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainRecord<S>> {
    cfg.loss.validate()?;
    cfg.optimizer.validate()?;
    let validation = plan.validation_indices();
    let mut current = model.clone();
    let mut best = (accuracy(&current, dataset, &validation)?, None, model.clone());
    let mut state = TrainState::new(&current, &cfg.optimizer, seed);
    let batches = BatchIterator::new(dataset, plan, cfg.batch_size, seed)?;
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for batch in batches.epoch::<S>(epoch) {
            let loss = train_step(&mut current, &mut state, &batch, &cfg.loss)
                .map_err(|e| e.context(format!("{} pretraining epoch {epoch}", cfg.loss.name())))?;
            loss_sum += loss.to_f64_lossy();
            n += 1;
        }
        let acc = accuracy(&current, dataset, &validation)?;
        history.push(EpochStat {
            epoch,
            mean_loss: loss_sum / n.max(1) as f64,
            validation_accuracy: acc,
        });
        if best.1.is_none() || acc >= best.0 {
            best = (acc, Some(epoch), current.clone());
        }
    }
    Ok(PretrainRecord {
        model: best.2,
        best_epoch: best.1,
        best_validation_accuracy: best.0,
        history,
    })
}

fn with_loss(epochs: u64, loss: PretrainLoss) -> PretrainConfig {
    PretrainConfig {
        loss,
        epochs,
        ..PretrainConfig::default()
    }
}

pub fn pretrain_erm<S: Scalar>(model: &GatedModel<S>, dataset: &Dataset, plan: &SplitPlan, epochs: u64, seed: u64) -> Result<PretrainRecord<S>> {
    pretrain(model, dataset, plan, &with_loss(epochs, PretrainLoss::Erm {}), seed)
}

pub fn pretrain_coral<S: Scalar>(
    model: &GatedModel<S>,
    dataset: &Dataset,
    plan: &SplitPlan,
    epochs: u64,
    lambda: f64,
    seed: u64,
) -> Result<PretrainRecord<S>> {
    pretrain(model, dataset, plan, &with_loss(epochs, PretrainLoss::Coral { lambda }), seed)
}

pub fn pretrain_mixup<S: Scalar>(
    model: &GatedModel<S>,
    dataset: &Dataset,
    plan: &SplitPlan,
    epochs: u64,
    beta_param: f64,
    seed: u64,
) -> Result<PretrainRecord<S>> {
    let loss = PretrainLoss::Mixup {
        beta_param,
        fixed_lambda: None,
    };
    pretrain(model, dataset, plan, &with_loss(epochs, loss), seed)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedResult {
    pub seed: u64,
    pub before: Evaluation,
    pub after: Evaluation,
    pub remaining_ratio: f64,
    pub pretrained_sha256: String,
    pub best_epoch: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cells {
    pub before: Evaluation,
    pub after: Evaluation,
    pub remaining_ratio: f64,
}

impl Cells {
    fn of(r: &SeedResult) -> [f64; 5] {
        [r.before.intra, r.before.cross, r.after.intra, r.after.cross, r.remaining_ratio]
    }

    fn from_array(v: [f64; 5]) -> Self {
        Self {
            before: Evaluation { intra: v[0], cross: v[1] },
            after: Evaluation { intra: v[2], cross: v[3] },
            remaining_ratio: v[4],
        }
    }
}

/// Means and sample standard deviations (zero for a single seed).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub means: Cells,
    pub stddevs: Cells,
}

pub fn aggregate(results: &[SeedResult]) -> Option<Aggregate> {
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    let mut mean = [0.0; 5];
    for r in results {
        for (m, v) in mean.iter_mut().zip(Cells::of(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut sd = [0.0; 5];
    if results.len() > 1 {
        for r in results {
            for ((s, v), m) in sd.iter_mut().zip(Cells::of(r)).zip(mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut sd {
            *s = (*s / (n - 1.0)).sqrt();
        }
    }
    Some(Aggregate {
        means: Cells::from_array(mean),
        stddevs: Cells::from_array(sd),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedFailure {
    pub seed: u64,
    pub kind: String,
    pub message: String,
}

/// Identifies one pruning arm in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmEcho {
    pub pretrain: String,
    pub criterion: Criterion,
    pub target_remaining_ratio: f64,
    pub held_out_domain: usize,
    pub held_out_domain_name: String,
}

/// Results of one arm across seeds; the on-disk results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config_echo: Value,
    pub per_seed: Vec<SeedResult>,
    pub aggregate: Option<Aggregate>,
    #[serde(default)]
    pub failures: Vec<SeedFailure>,
}

impl ResultsFile {
    pub fn arm(&self) -> Result<ArmEcho> {
        let arm = self.config_echo.get("arm").ok_or_else(|| Error::Schema {
            field: "config_echo.arm".into(),
            detail: "missing".into(),
        })?;
        serde_json::from_value(arm.clone()).map_err(|e| Error::Schema {
            field: "config_echo.arm".into(),
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads a results file, naming the first missing or malformed field.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(format!("results {}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let schema = |field: &str, detail: &str| Error::Schema {
            field: field.into(),
            detail: detail.into(),
        };
        let obj = value.as_object().ok_or_else(|| schema("<root>", "expected an object"))?;
        for field in ["config_echo", "per_seed", "aggregate"] {
            if !obj.contains_key(field) {
                return Err(schema(field, "missing"));
            }
        }
        let per_seed = obj["per_seed"].as_array().ok_or_else(|| schema("per_seed", "expected an array"))?;
        for (i, entry) in per_seed.iter().enumerate() {
            for field in ["seed", "before", "after", "remaining_ratio"] {
                if entry.get(field).is_none() {
                    return Err(schema(&format!("per_seed[{i}].{field}"), "missing"));
                }
            }
            for phase in ["before", "after"] {
                for field in ["intra", "cross"] {
                    if !entry[phase].get(field).is_some_and(Value::is_number) {
                        return Err(schema(&format!("per_seed[{i}].{phase}.{field}"), "expected a number"));
                    }
                }
            }
        }
        let parsed: Self = serde_json::from_value(value).map_err(|e| schema("<root>", &e.to_string()))?;
        parsed.arm()?;
        Ok(parsed)
    }
}

/// One seed's outcome for every arm.
#[derive(Clone, Debug)]
pub struct SeedOutcome<S> {
    pub seed: u64,
    pub pretrained: PretrainRecord<S>,
    pub pretrained_sha256: String,
    pub before: Evaluation,
    pub arms: Vec<(Criterion, PrunedModelRecord<S>, Evaluation)>,
}

impl<S: Scalar> SeedOutcome<S> {
    /// One results row per arm, in arm order.
    pub fn seed_results(&self) -> Vec<SeedResult> {
        self.arms
            .iter()
            .map(|(_, record, after)| SeedResult {
                seed: self.seed,
                before: self.before,
                after: *after,
                remaining_ratio: record.best_model.remaining_ratio(),
                pretrained_sha256: self.pretrained_sha256.clone(),
                best_epoch: record.best_epoch,
            })
            .collect()
    }
}

/// Pretrains once and runs every pruning arm from that checkpoint.
pub fn run_seed<S: Scalar>(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64, out: Option<&Path>) -> Result<SeedOutcome<S>> {
    let seeds = RunSeeds::derive(seed);
    let plan = split(dataset, cfg.held_out_domain, seeds.split)?;
    let init = GatedModel::<S>::build(&cfg.architecture, seeds.init)?;
    let pretrained = pretrain(&init, dataset, &plan, &cfg.pretrain, seeds.pretrain)?;
    let bytes = pretrained.model.to_bytes();
    let checksum = sha256_hex(&bytes);
    let before = evaluate(&pretrained.model, dataset, &plan)?;
    let dir = out.map(|o| o.join(format!("seed_{seed}")));
    if let Some(dir) = &dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("pretrained.pldg"), &bytes)?;
        fs::write(dir.join("pretrain_history.json"), serde_json::to_string_pretty(&pretrained.history)?)?;
        fs::write(dir.join("split.json"), serde_json::to_string(&plan)?)?;
    }
    let mut arms = Vec::new();
    for &criterion in &cfg.pruning.criteria {
        // Every arm restarts from the checkpoint bytes so the arms share it exactly.
        let start = GatedModel::<S>::from_bytes(&bytes)?;
        let record = prune_finetune_loop(
            &start,
            dataset,
            &plan,
            &cfg.pruning.finetune,
            criterion,
            &cfg.pruning.ior,
            seeds.finetune,
        )
        .map_err(|e| e.context(format!("{criterion:?} pruning, seed {seed}")))?;
        let after = evaluate(&record.best_model, dataset, &plan)?;
        if let Some(dir) = &dir {
            let arm_dir = dir.join(criterion_name(criterion));
            fs::create_dir_all(&arm_dir)?;
            record.best_model.save(&arm_dir.join("best.pldg"))?;
            record.final_model.save(&arm_dir.join("final.pldg"))?;
            write_event_log(&record.events, &arm_dir.join("events.jsonl"))?;
            record.table.write_csv(fs::File::create(arm_dir.join("importance.csv"))?)?;
        }
        arms.push((criterion, record, after));
    }
    Ok(SeedOutcome {
        seed,
        pretrained,
        pretrained_sha256: checksum,
        before,
        arms,
    })
}

pub fn criterion_name(c: Criterion) -> &'static str {
    match c {
        Criterion::Taylor => "taylor",
        Criterion::Ior => "ior",
    }
}

/// Everything a finished experiment produced, one results file per arm.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub results: Vec<(Criterion, ResultsFile)>,
    pub checksums: BTreeMap<u64, String>,
}

impl ExperimentOutcome {
    pub fn arm(&self, criterion: Criterion) -> Option<&ResultsFile> {
        self.results.iter().find(|(c, _)| *c == criterion).map(|(_, r)| r)
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    crate_version: &'static str,
    seeds: &'a [u64],
    derived_seeds: BTreeMap<u64, RunSeeds>,
    pretrained_sha256: &'a BTreeMap<u64, String>,
    results: Vec<String>,
}

/// Runs every seed, aggregates per arm and, with an output directory, writes
/// `config.toml`, per-seed checkpoints and logs, `results_<criterion>.json` and `manifest.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dataset = cfg.data.load()?;
    cfg.check_dataset(&dataset)?;
    let out = cfg.output_dir.as_deref();
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        fs::write(o.join("config.toml"), cfg.to_toml()?)?;
    }
    let mut per_arm: Vec<Vec<SeedResult>> = vec![Vec::new(); cfg.pruning.criteria.len()];
    let mut failures = Vec::new();
    let mut checksums = BTreeMap::new();
    for &seed in &cfg.seeds {
        let outcome = match cfg.precision {
            Precision::F32 => run_seed::<f32>(cfg, &dataset, seed, out).map(|o| o.seed_results()),
            Precision::F64 => run_seed::<f64>(cfg, &dataset, seed, out).map(|o| o.seed_results()),
        };
        match outcome {
            Ok(rows) => {
                for (slot, row) in per_arm.iter_mut().zip(rows) {
                    checksums.insert(seed, row.pretrained_sha256.clone());
                    slot.push(row);
                }
            }
            Err(e) => failures.push(SeedFailure {
                seed,
                kind: e.kind().into(),
                message: e.to_string(),
            }),
        }
    }
    if failures.len() == cfg.seeds.len() {
        let f = &failures[0];
        return Err(Error::Config(format!("every seed failed; seed {}: {}", f.seed, f.message)));
    }
    let names = dataset.domain_names.clone();
    let mut config_value = serde_json::to_value(cfg)?;
    let mut results = Vec::new();
    for (&criterion, per_seed) in cfg.pruning.criteria.iter().zip(per_arm) {
        let arm = ArmEcho {
            pretrain: cfg.pretrain.loss.name().into(),
            criterion,
            target_remaining_ratio: cfg.pruning.finetune.schedule.target_remaining_ratio,
            held_out_domain: cfg.held_out_domain,
            held_out_domain_name: names[cfg.held_out_domain].clone(),
        };
        config_value["arm"] = serde_json::to_value(&arm)?;
        results.push((
            criterion,
            ResultsFile {
                config_echo: config_value.clone(),
                aggregate: aggregate(&per_seed),
                per_seed,
                failures: failures.clone(),
            },
        ));
    }
    if let Some(o) = out {
        let mut files = Vec::new();
        for (c, r) in &results {
            let name = format!("results_{}.json", criterion_name(*c));
            r.save(&o.join(&name))?;
            files.push(name);
        }
        let manifest = RunManifest {
            crate_version: env!("CARGO_PKG_VERSION"),
            seeds: &cfg.seeds,
            derived_seeds: cfg.seeds.iter().map(|&s| (s, RunSeeds::derive(s))).collect(),
            pretrained_sha256: &checksums,
            results: files,
        };
        fs::write(o.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(ExperimentOutcome { results, checksums })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Before,
    After,
    Delta,
}

impl Phase {
    fn label(self) -> &'static str {
        match self {
            Phase::Before => "before",
            Phase::After => "after",
            Phase::Delta => "delta",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "before" => Ok(Phase::Before),
            "after" => Ok(Phase::After),
            "delta" => Ok(Phase::Delta),
            _ => Err(Error::Schema {
                field: "phase".into(),
                detail: format!("unknown phase {s:?}"),
            }),
        }
    }
}

/// One table row: an arm and phase with seed-mean (intra, cross) per held-out domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub criterion: String,
    pub ratio: f64,
    pub phase: Phase,
    pub cells: BTreeMap<String, Evaluation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Held-out domains, in column order.
    pub domains: Vec<String>,
    pub rows: Vec<ReportRow>,
}

const REPORT_KEYS: [&str; 4] = ["model", "criterion", "ratio", "phase"];

impl Report {
    /// Before, after and delta rows per arm, arms in first-seen order.
    pub fn build(results: &[ResultsFile]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::TooFewInputs {
                op: "report",
                min: 1,
                got: 0,
            });
        }
        let mut domains: Vec<String> = Vec::new();
        let mut keys: Vec<(String, String, f64)> = Vec::new();
        let mut cells: BTreeMap<(usize, Phase), BTreeMap<String, Evaluation>> = BTreeMap::new();
        for r in results {
            let arm = r.arm()?;
            let agg = r.aggregate.as_ref().ok_or_else(|| Error::Schema {
                field: "aggregate".into(),
                detail: "no successful seeds".into(),
            })?;
            if !domains.contains(&arm.held_out_domain_name) {
                domains.push(arm.held_out_domain_name.clone());
            }
            let key = (arm.pretrain.clone(), criterion_name(arm.criterion).to_string(), arm.target_remaining_ratio);
            let k = match keys.iter().position(|x| *x == key) {
                Some(k) => k,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            };
            let m = agg.means;
            let delta = Evaluation {
                intra: m.after.intra - m.before.intra,
                cross: m.after.cross - m.before.cross,
            };
            for (phase, e) in [(Phase::Before, m.before), (Phase::After, m.after), (Phase::Delta, delta)] {
                cells.entry((k, phase)).or_default().insert(arm.held_out_domain_name.clone(), e);
            }
        }
        let rows = cells
            .into_iter()
            .map(|((k, phase), cells)| {
                let (model, criterion, ratio) = keys[k].clone();
                ReportRow {
                    model,
                    criterion,
                    ratio,
                    phase,
                    cells,
                }
            })
            .collect();
        Ok(Self { domains, rows })
    }

    /// Rows of one phase only, e.g. the after-pruning table.
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    /// `model,criterion,ratio,phase,<domain>_intra,<domain>_cross,...`; empty cells for missing domains.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_KEYS.join(",");
        for d in &self.domains {
            out.push_str(&format!(",{d}_intra,{d}_cross"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}", r.model, r.criterion, r.ratio, r.phase.label()));
            for d in &self.domains {
                match r.cells.get(d) {
                    Some(e) => out.push_str(&format!(",{},{}", e.intra, e.cross)),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let schema = |field: &str, detail: String| Error::Schema {
            field: field.into(),
            detail,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| schema("header", "empty document".into()))?.split(',').collect();
        if header.len() < REPORT_KEYS.len() || header[..REPORT_KEYS.len()] != REPORT_KEYS {
            return Err(schema("header", format!("expected leading columns {REPORT_KEYS:?}")));
        }
        let rest = &header[REPORT_KEYS.len()..];
        if !rest.len().is_multiple_of(2) {
            return Err(schema("header", "domain columns must come in intra/cross pairs".into()));
        }
        let mut domains = Vec::new();
        for pair in rest.chunks(2) {
            let d = pair[0]
                .strip_suffix("_intra")
                .filter(|d| pair[1].strip_suffix("_cross") == Some(*d))
                .ok_or_else(|| schema("header", format!("bad domain columns {pair:?}")))?;
            domains.push(d.to_string());
        }
        let num = |field: &str, s: &str| s.parse::<f64>().map_err(|e| schema(field, format!("{s:?}: {e}")));
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(schema("row", format!("{} fields, expected {}", f.len(), header.len())));
            }
            let mut cells = BTreeMap::new();
            for (i, d) in domains.iter().enumerate() {
                let (a, b) = (f[4 + 2 * i], f[5 + 2 * i]);
                if a.is_empty() && b.is_empty() {
                    continue;
                }
                cells.insert(
                    d.clone(),
                    Evaluation {
                        intra: num(&format!("{d}_intra"), a)?,
                        cross: num(&format!("{d}_cross"), b)?,
                    },
                );
            }
            rows.push(ReportRow {
                model: f[0].to_string(),
                criterion: f[1].to_string(),
                ratio: num("ratio", f[2])?,
                phase: Phase::parse(f[3])?,
                cells,
            });
        }
        Ok(Self { domains, rows })
    }

    /// After-pruning table followed by the before/after/delta table, two decimals.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let header = |out: &mut String, first: &[&str]| {
            out.push_str(&format!("| {} |", first.join(" | ")));
            for d in &self.domains {
                out.push_str(&format!(" {d} Intra | {d} Cross |"));
            }
            out.push('\n');
            out.push_str(&"|---".repeat(first.len() + 2 * self.domains.len()));
            out.push_str("|\n");
        };
        let cells = |out: &mut String, r: &ReportRow| {
            for d in &self.domains {
                match r.cells.get(d) {
                    Some(e) => out.push_str(&format!(" {:.2} | {:.2} |", e.intra, e.cross)),
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        };
        out.push_str("## After pruning\n\n");
        header(&mut out, &["Model", "Criterion", "Remaining"]);
        for r in self.phase(Phase::After) {
            out.push_str(&format!("| {} | {} | {}% |", r.model, r.criterion, r.ratio * 100.0));
            cells(&mut out, r);
        }
        out.push_str("\n## Before / after / Δ\n\n");
        header(&mut out, &["Model", "Criterion", "Remaining", "Phase"]);
        for r in &self.rows {
            let phase = match r.phase {
                Phase::Delta => "Δ",
                p => p.label(),
            };
            out.push_str(&format!("| {} | {} | {}% | {} |", r.model, r.criterion, r.ratio * 100.0, phase));
            cells(&mut out, r);
        }
        out
    }
}

/// Loads results files and writes `report.csv` and `report.md` into `out`.
pub fn report(paths: &[PathBuf], out: &Path) -> Result<Report> {
    let results = paths.iter().map(|p| ResultsFile::load(p)).collect::<Result<Vec<_>>>()?;
    let report = Report::build(&results)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("report.md"), report.to_markdown())?;
    Ok(report)
}
