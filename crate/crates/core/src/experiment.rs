//! End-to-end experiment runner.
//!
//! One run (one seed) builds or loads `P` auxiliary networks and a target
//! network, injects anomalies where needed, splits the target into
//! fine-tune / validation / test nodes, picks the few-shot labels, trains
//! the requested model variants and scores the test nodes. Runs are
//! repeated over derived seeds and summarized as mean and sample standard
//! deviation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    self, generate_synthetic, load_bundle, partition_network, select_shots, set_contamination,
    split_target, LabeledGraph, SplitSpec, SyntheticSpec, TargetSplit,
};
use crate::error::{Error, Result, StageExt};
use crate::exec::Exec;
use crate::graph::{encode_graph, PropagatedFeatures};
use crate::inject::{inject_combined, InjectionSpec};
use crate::meta::{
    fine_tune_validated, train_meta_with, train_single_validated, EpochRecord, MetaConfig, Task,
    Validation,
};
use crate::metrics::{evaluate, random_baseline, MetricsReport};
use crate::model::{score_all, Checkpoint, GdnParams};
use crate::rng::{self, derive_seed};

const SALT_NETWORK: u64 = 0x6e65_7477;
const SALT_INJECT: u64 = 0x696e_6a65;
const SALT_SPLIT: u64 = 0x7370_6c69;
const SALT_SHOTS: u64 = 0x7368_6f74;
const SALT_AUX_SHOTS: u64 = 0x6175_7873;
const SALT_CONTAM: u64 = 0x636f_6e74;
const SALT_RANDOM: u64 = 0x7261_6e64;
const SALT_PARTITION: u64 = 0x7061_7274;
const MAX_SPLIT_ATTEMPTS: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// `P + 1` independently generated SBM networks (network 0 is the target).
    Synthetic(SyntheticSpec),
    /// Pre-built bundles.
    Bundles { auxiliary: Vec<PathBuf>, target: PathBuf },
    /// One large bundle randomly split into `P + 1` sub-networks.
    Partition { bundle: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// GDN vs Meta-GDN vs random scores at the configured shot count.
    Main,
    /// GDN without the network encoder, GDN, Meta-GDN.
    Ablation,
    /// Meta-GDN over the shot grid.
    Shots,
    /// Meta-GDN over the auxiliary-count grid.
    AuxSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GdnMinus,
    Gdn,
    MetaGdn,
    Random,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::GdnMinus => "gdn_minus",
            Variant::Gdn => "gdn",
            Variant::MetaGdn => "meta_gdn",
            Variant::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub mode: Mode,
    /// Number of auxiliary networks `P`.
    pub num_aux: usize,
    /// Inject anomalies into every network. `None` injects only into
    /// networks that arrive without labels.
    pub inject: Option<bool>,
    pub injection: InjectionSpec,
    pub split: SplitSpec,
    /// Labeled anomalies on the target network.
    pub shots: usize,
    /// Labeled anomalies on each auxiliary network.
    pub aux_shots: usize,
    pub meta: MetaConfig,
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    /// `(shots, batch_size)` pairs for [`Mode::Shots`].
    pub shot_grid: Vec<(usize, usize)>,
    /// Auxiliary counts for [`Mode::AuxSweep`].
    pub aux_grid: Vec<usize>,
    /// Contamination levels for the contamination study.
    pub contamination_levels: Vec<f64>,
    pub random_repeats: usize,
    /// Save meta-training checkpoints every this many epochs (run 0 only).
    pub checkpoint_every: Option<usize>,
    pub output_dir: PathBuf,
    /// Run seeds concurrently. Output is identical either way.
    pub parallel_runs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            mode: Mode::Main,
            num_aux: 4,
            inject: None,
            injection: InjectionSpec::default(),
            split: SplitSpec::default(),
            shots: 10,
            aux_shots: 10,
            meta: MetaConfig::default(),
            ks: vec![25, 50, 100],
            repeats: 5,
            seed: 0,
            shot_grid: vec![(1, 2), (3, 4), (5, 8), (10, 16)],
            aux_grid: (1..=6).collect(),
            contamination_levels: vec![0.01, 0.02, 0.05, 0.1],
            random_repeats: 100,
            checkpoint_every: None,
            output_dir: PathBuf::from("out"),
            parallel_runs: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if self.num_aux == 0 {
            return Err(Error::Config("at least one auxiliary network required".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.shots == 0 || self.aux_shots == 0 {
            return Err(Error::Config("shot counts must be positive".into()));
        }
        if self.shot_grid.iter().any(|&(s, b)| s == 0 || b == 0 || b % 2 != 0) {
            return Err(Error::Config("shot grid needs positive shots and even batch sizes".into()));
        }
        if self.aux_grid.contains(&0) {
            return Err(Error::Config("auxiliary grid entries must be positive".into()));
        }
        match &self.source {
            DataSource::Bundles { auxiliary, target } => {
                if auxiliary.len() < self.max_aux() {
                    return Err(Error::Config(format!(
                        "{} auxiliary bundles for P = {}",
                        auxiliary.len(),
                        self.max_aux()
                    )));
                }
                for p in auxiliary.iter().chain(std::iter::once(target)) {
                    if !p.is_dir() {
                        return Err(Error::Config(format!("bundle {} does not exist", p.display())));
                    }
                }
            }
            DataSource::Partition { bundle } => {
                if !bundle.is_dir() {
                    return Err(Error::Config(format!("bundle {} does not exist", bundle.display())));
                }
            }
            DataSource::Synthetic(_) => {}
        }
        Ok(())
    }

    /// Largest auxiliary count any setting of this mode needs.
    pub fn max_aux(&self) -> usize {
        match self.mode {
            Mode::AuxSweep => self.aux_grid.iter().copied().max().unwrap_or(self.num_aux),
            _ => self.num_aux,
        }
    }

    /// Stable hash of everything that influences results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.checkpoint_every = None;
        canonical.parallel_runs = false;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }

    /// Seed of repeat `run`.
    pub fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, run as u64)
    }

    fn exec(&self) -> Exec {
        if self.parallel_runs {
            self.meta.exec
        } else {
            Exec::Sequential
        }
    }
}

/// Node and anomaly counts of the target splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub fine_tune: usize,
    pub fine_tune_anomalies: usize,
    pub validation: usize,
    pub validation_anomalies: usize,
    pub test: usize,
    pub test_anomalies: usize,
}

/// Metrics of one variant in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub precision_at_k: BTreeMap<usize, f64>,
    pub split_counts: SplitCounts,
    /// Anomalous fraction of the target's unlabeled training pool.
    pub contamination: f64,
    pub best_epoch: Option<usize>,
}

/// One row of `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub seed: u64,
    pub setting: String,
    pub variant: String,
    pub auc_roc_mean: f64,
    pub auc_roc_std: f64,
    pub auc_pr_mean: f64,
    pub auc_pr_std: f64,
    pub precision_at_k: BTreeMap<usize, f64>,
    pub runtime_seconds: f64,
    pub runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub node_ids: Vec<u64>,
    pub scores: Vec<f64>,
}

impl Scores {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node_id,score\n");
        for (id, s) in self.node_ids.iter().zip(&self.scores) {
            writeln!(out, "{id},{s:?}").unwrap();
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    /// Test-node scores of the first run of the first model variant.
    pub scores: Scores,
    pub log: Vec<LogLine>,
}

impl ExperimentOutput {
    pub fn row(&self, setting: &str, variant: Variant) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.variant == variant.as_str())
    }

    /// Writes `results.json`, `scores.csv` and `training_log.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        put("results.json", serde_json::to_string_pretty(&self.rows)? + "\n")?;
        put("scores.csv", self.scores.to_csv())?;
        let mut log = String::new();
        for line in &self.log {
            log.push_str(&serde_json::to_string(line)?);
            log.push('\n');
        }
        put("training_log.jsonl", log)
    }
}

/// Training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub run: usize,
    pub num_aux: usize,
    #[serde(flatten)]
    pub record: EpochRecord,
}

/// Networks and splits shared by every variant of one run.
pub struct PreparedRun {
    pub run: usize,
    pub seed: u64,
    pub aux: Vec<Task>,
    pub target: TargetData,
}

pub struct TargetData {
    pub labeled: LabeledGraph,
    pub propagated: Arc<PropagatedFeatures>,
    pub raw: Arc<PropagatedFeatures>,
    pub is_anomaly: Vec<bool>,
    pub split: TargetSplit,
    pub counts: SplitCounts,
}

impl TargetData {
    /// Few-shot task on the fine-tune split.
    pub fn task(&self, shots: usize, seed: u64, raw_features: bool) -> Result<Task> {
        let pick = select_shots(
            &self.split.fine_tune,
            &self.is_anomaly,
            shots,
            &mut rng::seeded(derive_seed(seed, SALT_SHOTS)),
        )?;
        let feats = if raw_features { &self.raw } else { &self.propagated };
        Task::new(
            self.labeled.name.clone(),
            Arc::new(self.labeled.graph.clone()),
            feats.clone(),
            pick.labeled,
            pick.unlabeled,
        )
    }

    pub fn validation(&self) -> Validation {
        Validation {
            nodes: self.split.validation.clone(),
            labels: labels_of(&self.split.validation, &self.is_anomaly),
        }
    }

    pub fn test_labels(&self) -> Vec<u8> {
        labels_of(&self.split.test, &self.is_anomaly)
    }
}

fn labels_of(nodes: &[usize], is_anomaly: &[bool]) -> Vec<u8> {
    nodes.iter().map(|&i| u8::from(is_anomaly[i])).collect()
}

fn maybe_inject(cfg: &ExperimentConfig, mut g: LabeledGraph, seed: u64) -> Result<LabeledGraph> {
    let inject = cfg.inject.unwrap_or(g.anomalies.is_empty());
    if !inject {
        return Ok(g);
    }
    let spec = InjectionSpec {
        seed,
        ..cfg.injection.clone()
    };
    let report = inject_combined(&g.graph, &spec, &mut rng::seeded(seed))?;
    g.kinds = Some(report.typed_labels().into_iter().collect());
    g.anomalies = report.anomalies();
    g.graph = report.graph;
    Ok(g)
}

/// Target plus `P` auxiliary labeled networks for one run.
pub fn build_networks(cfg: &ExperimentConfig, seed: u64) -> Result<(LabeledGraph, Vec<LabeledGraph>)> {
    let count = cfg.max_aux() + 1;
    let raw: Vec<LabeledGraph> = match &cfg.source {
        DataSource::Synthetic(spec) => (0..count)
            .map(|i| {
                let g = generate_synthetic(spec, &mut rng::seeded(derive_seed(seed, SALT_NETWORK + i as u64)))?;
                Ok(LabeledGraph {
                    name: format!("synthetic-{i}"),
                    graph: g,
                    anomalies: Vec::new(),
                    kinds: None,
                })
            })
            .collect::<Result<_>>()
            .stage("generate")?,
        DataSource::Bundles { auxiliary, target } => std::iter::once(target)
            .chain(auxiliary.iter().take(count - 1))
            .map(|p| load_bundle(p).map(|b| b.labeled))
            .collect::<Result<_>>()
            .stage("load")?,
        DataSource::Partition { bundle } => {
            let whole = load_bundle(bundle).stage("load")?.labeled;
            partition_network(&whole, count, &mut rng::seeded(derive_seed(seed, SALT_PARTITION)))
                .stage("partition")?
                .into_iter()
                .map(|p| p.labeled)
                .collect()
        }
    };
    let mut injected = raw
        .into_iter()
        .enumerate()
        .map(|(i, g)| maybe_inject(cfg, g, derive_seed(seed, SALT_INJECT + i as u64)))
        .collect::<Result<Vec<_>>>()
        .stage("inject")?;
    let target = injected.remove(0);
    Ok((target, injected))
}

fn count_split(split: &TargetSplit, is_anomaly: &[bool]) -> SplitCounts {
    let anomalies = |v: &[usize]| v.iter().filter(|&&i| is_anomaly[i]).count();
    SplitCounts {
        fine_tune: split.fine_tune.len(),
        fine_tune_anomalies: anomalies(&split.fine_tune),
        validation: split.validation.len(),
        validation_anomalies: anomalies(&split.validation),
        test: split.test.len(),
        test_anomalies: anomalies(&split.test),
    }
}

/// Builds networks, tasks and splits for run `run`.
pub fn prepare_run(cfg: &ExperimentConfig, run: usize) -> Result<PreparedRun> {
    let seed = cfg.run_seed(run);
    let (target, aux_graphs) = build_networks(cfg, seed)?;
    let k = cfg.meta.sgc_degree;

    let need_shots = cfg
        .shot_grid
        .iter()
        .map(|s| s.0)
        .chain(std::iter::once(cfg.shots))
        .max()
        .unwrap_or(cfg.shots);
    let is_anomaly = target.is_anomaly();
    let nodes: Vec<usize> = (0..target.graph.num_nodes()).collect();
    let mut split = None;
    for attempt in 0..MAX_SPLIT_ATTEMPTS {
        let s = split_target(&nodes, &cfg.split, &mut rng::seeded(derive_seed(seed, SALT_SPLIT + attempt)))
            .stage("split")?;
        let c = count_split(&s, &is_anomaly);
        let ok = c.fine_tune_anomalies >= need_shots
            && c.validation_anomalies > 0
            && c.validation_anomalies < c.validation
            && c.test_anomalies > 0
            && c.test_anomalies < c.test;
        if ok {
            split = Some((s, c));
            break;
        }
        log::warn!("run {run}: degenerate split on attempt {attempt} ({c:?}), resampling");
    }
    let (split, counts) = split.ok_or_else(|| {
        Error::Config(format!("no usable target split after {MAX_SPLIT_ATTEMPTS} attempts")).in_stage("split")
    })?;

    let propagated = Arc::new(encode_graph(&target.graph, k).stage("propagate")?);
    let raw = Arc::new(PropagatedFeatures::raw(target.graph.features()));

    let aux = aux_graphs
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let feats = Arc::new(encode_graph(&g.graph, k)?);
            let all: Vec<usize> = (0..g.graph.num_nodes()).collect();
            let pick = select_shots(
                &all,
                &g.is_anomaly(),
                cfg.aux_shots,
                &mut rng::seeded(derive_seed(seed, SALT_AUX_SHOTS + i as u64)),
            )?;
            Task::new(g.name.clone(), Arc::new(g.graph), feats, pick.labeled, pick.unlabeled)
        })
        .collect::<Result<Vec<_>>>()
        .stage("tasks")?;

    Ok(PreparedRun {
        run,
        seed,
        aux,
        target: TargetData {
            labeled: target,
            propagated,
            raw,
            is_anomaly,
            split,
            counts,
        },
    })
}

/// Meta-trained parameters for the first `num_aux` auxiliary tasks.
pub fn meta_train_run(
    cfg: &ExperimentConfig,
    prepared: &PreparedRun,
    num_aux: usize,
    log: &mut Vec<LogLine>,
) -> Result<GdnParams> {
    let meta = MetaConfig {
        seed: prepared.seed,
        ..cfg.meta.clone()
    };
    let tasks = &prepared.aux[..num_aux.min(prepared.aux.len())];
    let checkpoint_dir = cfg.output_dir.join("checkpoints");
    let state = train_meta_with(tasks, &meta, |record, params| {
        log.push(LogLine {
            run: prepared.run,
            num_aux,
            record: record.clone(),
        });
        if let Some(every) = cfg.checkpoint_every.filter(|&e| e > 0 && prepared.run == 0) {
            if (record.epoch + 1) % every == 0 {
                fs::create_dir_all(&checkpoint_dir).map_err(|e| Error::io(&checkpoint_dir, e))?;
                Checkpoint::new(params, meta.sgc_degree).save(
                    &checkpoint_dir.join(format!("meta_p{num_aux}_epoch{}.json", record.epoch + 1)),
                )?;
            }
        }
        Ok(())
    })
    .stage("meta-train")?;
    Ok(state.params)
}

/// Trained parameters of one variant plus how they were chosen.
pub struct VariantModel {
    pub params: GdnParams,
    pub raw_features: bool,
    pub best_epoch: Option<usize>,
}

/// Trains `variant` on the target task (not defined for [`Variant::Random`]).
pub fn train_variant(
    cfg: &ExperimentConfig,
    prepared: &PreparedRun,
    variant: Variant,
    target: &Task,
    batch_size: usize,
    meta_params: Option<&GdnParams>,
) -> Result<VariantModel> {
    let tuned = MetaConfig {
        seed: prepared.seed,
        batch_size,
        ..cfg.meta.clone()
    };
    let validation = prepared.target.validation();
    let trained = match variant {
        Variant::MetaGdn => {
            let start = meta_params.ok_or_else(|| Error::Config("meta parameters missing".into()))?;
            fine_tune_validated(start, target, &tuned, Some(&validation)).stage("fine-tune")?
        }
        Variant::Gdn | Variant::GdnMinus => {
            train_single_validated(target, &tuned, Some(&validation)).stage("train")?
        }
        Variant::Random => return Err(Error::Config("random baseline has no model".into())),
    };
    Ok(VariantModel {
        params: trained.params,
        raw_features: variant == Variant::GdnMinus,
        best_epoch: Some(trained.best_epoch),
    })
}

fn score_test(prepared: &PreparedRun, model: &VariantModel) -> Result<Vec<f64>> {
    let feats = if model.raw_features {
        &prepared.target.raw
    } else {
        &prepared.target.propagated
    };
    let all = score_all(&model.params, feats).stage("score")?;
    Ok(prepared.target.split.test.iter().map(|&i| all[i]).collect())
}

fn record(
    prepared: &PreparedRun,
    metrics: MetricsReport,
    contamination: f64,
    best_epoch: Option<usize>,
) -> RunRecord {
    RunRecord {
        run: prepared.run,
        seed: prepared.seed,
        auc_roc: metrics.auc_roc,
        auc_pr: metrics.auc_pr,
        precision_at_k: metrics.precision_at_k,
        split_counts: prepared.target.counts,
        contamination,
        best_epoch,
    }
}

/// Trains, scores and evaluates one variant on one prepared run.
fn evaluate_variant(
    cfg: &ExperimentConfig,
    prepared: &PreparedRun,
    variant: Variant,
    target: &Task,
    batch_size: usize,
    meta_params: Option<&GdnParams>,
) -> Result<(RunRecord, Option<Vec<f64>>)> {
    let labels = prepared.target.test_labels();
    let contamination = data::contamination(target.unlabeled(), &prepared.target.is_anomaly);
    if variant == Variant::Random {
        let mut rng = rng::seeded(derive_seed(prepared.seed, SALT_RANDOM));
        let m = random_baseline(&labels, &cfg.ks, &mut rng, cfg.random_repeats).stage("evaluate")?;
        return Ok((record(prepared, m, contamination, None), None));
    }
    let model = train_variant(cfg, prepared, variant, target, batch_size, meta_params)?;
    let scores = score_test(prepared, &model)?;
    let m = evaluate(&scores, &labels, &cfg.ks).stage("evaluate")?;
    Ok((record(prepared, m, contamination, model.best_epoch), Some(scores)))
}

/// Results of one run: `(setting, variant, record, test scores)` in order.
type RunResults = Vec<(String, Variant, RunRecord, Option<Vec<f64>>)>;

fn execute_run(cfg: &ExperimentConfig, run: usize) -> Result<(RunResults, Vec<LogLine>, PreparedRun)> {
    let prepared = prepare_run(cfg, run)?;
    let mut log = Vec::new();
    let mut out: RunResults = Vec::new();
    let b = cfg.meta.batch_size;
    let shots_label = format!("{}-shot", cfg.shots);
    match cfg.mode {
        Mode::Main | Mode::Ablation => {
            let variants: &[Variant] = if cfg.mode == Mode::Main {
                &[Variant::Gdn, Variant::MetaGdn, Variant::Random]
            } else {
                &[Variant::GdnMinus, Variant::Gdn, Variant::MetaGdn]
            };
            let meta = meta_train_run(cfg, &prepared, cfg.num_aux, &mut log)?;
            for &v in variants {
                let task = prepared.target.task(cfg.shots, prepared.seed, v == Variant::GdnMinus)?;
                let (rec, scores) = evaluate_variant(cfg, &prepared, v, &task, b, Some(&meta))?;
                out.push((shots_label.clone(), v, rec, scores));
            }
        }
        Mode::Shots => {
            let meta = meta_train_run(cfg, &prepared, cfg.num_aux, &mut log)?;
            for &(shots, batch) in &cfg.shot_grid {
                let task = prepared.target.task(shots, prepared.seed, false).stage("shots")?;
                let (rec, scores) =
                    evaluate_variant(cfg, &prepared, Variant::MetaGdn, &task, batch, Some(&meta))?;
                out.push((format!("{shots}-shot"), Variant::MetaGdn, rec, scores));
            }
        }
        Mode::AuxSweep => {
            let task = prepared.target.task(cfg.shots, prepared.seed, false)?;
            for &p in &cfg.aux_grid {
                let meta = meta_train_run(cfg, &prepared, p, &mut log)?;
                let (rec, scores) = evaluate_variant(cfg, &prepared, Variant::MetaGdn, &task, b, Some(&meta))?;
                out.push((format!("P={p}"), Variant::MetaGdn, rec, scores));
            }
        }
    }
    Ok((out, log, prepared))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(
    cfg: &ExperimentConfig,
    hash: &str,
    setting: String,
    variant: Variant,
    runs: Vec<RunRecord>,
    runtime: f64,
) -> ResultRow {
    let roc: Vec<f64> = runs.iter().map(|r| r.auc_roc).collect();
    let pr: Vec<f64> = runs.iter().map(|r| r.auc_pr).collect();
    let (auc_roc_mean, auc_roc_std) = mean_std(&roc);
    let (auc_pr_mean, auc_pr_std) = mean_std(&pr);
    let mut precision_at_k = BTreeMap::new();
    for k in runs.iter().flat_map(|r| r.precision_at_k.keys()).copied() {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.precision_at_k.get(&k).copied()).collect();
        precision_at_k.insert(k, mean_std(&vals).0);
    }
    ResultRow {
        config_hash: hash.to_string(),
        seed: cfg.seed,
        setting,
        variant: variant.as_str().to_string(),
        auc_roc_mean,
        auc_roc_std,
        auc_pr_mean,
        auc_pr_std,
        precision_at_k,
        runtime_seconds: runtime,
        runs,
    }
}

fn collect_rows(
    cfg: &ExperimentConfig,
    per_run: Vec<RunResults>,
    runtime: f64,
) -> (Vec<ResultRow>, Option<(usize, Vec<f64>)>) {
    let hash = cfg.hash();
    let mut order: Vec<(String, Variant)> = Vec::new();
    let mut grouped: BTreeMap<(String, Variant), Vec<RunRecord>> = BTreeMap::new();
    let mut first_scores = None;
    for results in per_run {
        for (setting, variant, rec, scores) in results {
            if first_scores.is_none() {
                if let Some(s) = scores {
                    first_scores = Some((rec.run, s));
                }
            }
            let key = (setting, variant);
            if !grouped.contains_key(&key) {
                order.push(key.clone());
            }
            grouped.entry(key).or_default().push(rec);
        }
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let runs = grouped.remove(&key).unwrap();
            summarize(cfg, &hash, key.0, key.1, runs, runtime)
        })
        .collect();
    (rows, first_scores)
}

fn test_node_ids(prepared: &PreparedRun) -> Vec<u64> {
    prepared
        .target
        .split
        .test
        .iter()
        .map(|&i| prepared.target.labeled.graph.external_id(i))
        .collect()
}

/// Runs the configured study over `cfg.repeats` seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate().stage("config")?;
    let start = Instant::now();
    let runs: Vec<usize> = (0..cfg.repeats).collect();
    let outcomes = cfg.exec().map(&runs, |_, &run| execute_run(cfg, run));
    let mut per_run = Vec::with_capacity(runs.len());
    let mut log = Vec::new();
    let mut first_ids = None;
    for outcome in outcomes {
        let (results, run_log, prepared) = outcome?;
        if first_ids.is_none() {
            first_ids = Some(test_node_ids(&prepared));
        }
        per_run.push(results);
        log.extend(run_log);
    }
    let (rows, first) = collect_rows(cfg, per_run, start.elapsed().as_secs_f64());
    let scores = match (first, first_ids) {
        (Some((_, s)), Some(ids)) => Scores { node_ids: ids, scores: s },
        _ => Scores { node_ids: vec![], scores: vec![] },
    };
    Ok(ExperimentOutput { rows, scores, log })
}

/// GDN and Meta-GDN on the target with the unlabeled pool subsampled to
/// each contamination level. Unreachable levels are skipped with a warning.
pub fn run_contamination_study(cfg: &ExperimentConfig, levels: &[f64]) -> Result<ExperimentOutput> {
    cfg.validate().stage("config")?;
    let start = Instant::now();
    let runs: Vec<usize> = (0..cfg.repeats).collect();
    let outcomes = cfg.exec().map(&runs, |_, &run| {
        let prepared = prepare_run(cfg, run)?;
        let mut log = Vec::new();
        let meta = meta_train_run(cfg, &prepared, cfg.num_aux, &mut log)?;
        let base = prepared.target.task(cfg.shots, prepared.seed, false)?;
        let mut out: RunResults = Vec::new();
        for &level in levels {
            let mut rng = rng::seeded(derive_seed(prepared.seed, SALT_CONTAM));
            let task = match set_contamination(&base, &prepared.target.is_anomaly, level, &mut rng) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("run {run}: skipping contamination level {level}: {e}");
                    continue;
                }
            };
            for v in [Variant::Gdn, Variant::MetaGdn] {
                let (rec, scores) =
                    evaluate_variant(cfg, &prepared, v, &task, cfg.meta.batch_size, Some(&meta))?;
                out.push((format!("r_c={level}"), v, rec, scores));
            }
        }
        Ok::<_, Error>((out, log, prepared))
    });
    let mut per_run = Vec::new();
    let mut log = Vec::new();
    let mut first_ids = None;
    for outcome in outcomes {
        let (results, run_log, prepared) = outcome?;
        if first_ids.is_none() {
            first_ids = Some(test_node_ids(&prepared));
        }
        per_run.push(results);
        log.extend(run_log);
    }
    let (rows, first) = collect_rows(cfg, per_run, start.elapsed().as_secs_f64());
    let scores = match (first, first_ids) {
        (Some((_, s)), Some(ids)) => Scores { node_ids: ids, scores: s },
        _ => Scores { node_ids: vec![], scores: vec![] },
    };
    Ok(ExperimentOutput { rows, scores, log })
}

/// Stages an experiment would execute, for `--dry-run`.
pub fn plan(cfg: &ExperimentConfig) -> Vec<String> {
    let source = match &cfg.source {
        DataSource::Synthetic(s) => format!("generate {} SBM networks (n={}, d={})", cfg.max_aux() + 1, s.n, s.d),
        DataSource::Bundles { .. } => format!("load {} bundles", cfg.max_aux() + 1),
        DataSource::Partition { bundle } => {
            format!("load {} and partition into {} parts", bundle.display(), cfg.max_aux() + 1)
        }
    };
    let variants = match cfg.mode {
        Mode::Main => "train gdn, meta_gdn; random baseline".to_string(),
        Mode::Ablation => "train gdn_minus, gdn, meta_gdn".to_string(),
        Mode::Shots => format!("meta_gdn over shot grid {:?}", cfg.shot_grid),
        Mode::AuxSweep => format!("meta_gdn over auxiliary counts {:?}", cfg.aux_grid),
    };
    vec![
        source,
        format!(
            "inject anomalies (rate {}, clique size {}, pool {})",
            cfg.injection.rate, cfg.injection.clique_size, cfg.injection.candidate_pool
        ),
        format!(
            "split target {}/{}/{}, select {} target shots and {} per auxiliary network",
            cfg.split.fine_tune_fraction,
            cfg.split.validation_fraction,
            cfg.split.test_fraction,
            cfg.shots,
            cfg.aux_shots
        ),
        format!("propagate features with K = {}", cfg.meta.sgc_degree),
        variants,
        format!("evaluate AUC-ROC, AUC-PR, Precision@{:?} over {} runs", cfg.ks, cfg.repeats),
        format!("write results to {}", cfg.output_dir.display()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: 9, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = ExperimentConfig { num_aux: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            source: DataSource::Partition { bundle: "/nonexistent".into() },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"mode": "ablation", "repeats": 2}"#).unwrap();
        assert_eq!(cfg.mode, Mode::Ablation);
        assert_eq!(cfg.repeats, 2);
        assert_eq!(cfg.meta.hidden_dim, 512);
    }
}
