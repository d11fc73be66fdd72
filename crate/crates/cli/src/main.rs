use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use metagdn::data::{self, load_bundle, save_bundle, LabeledGraph, SyntheticSpec};
use metagdn::experiment::{self, ExperimentConfig, Mode};
use metagdn::graph::encode_graph;
use metagdn::inject::inject_combined;
use metagdn::meta::{self, Task, Validation};
use metagdn::metrics;
use metagdn::model::{score_all, Checkpoint};
use metagdn::rng::{derive_seed, seeded};
use metagdn::{Exec, MetaConfig};

#[derive(Parser)]
#[command(name = "metagdn", version, about = "Few-shot anomaly detection on attributed networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON experiment configuration supplying defaults for every setting.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    single_thread: bool,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    fine_tune_epochs: Option<usize>,
    #[arg(long, global = true)]
    inner_lr: Option<f64>,
    #[arg(long, global = true)]
    meta_lr: Option<f64>,
    #[arg(long, global = true)]
    inner_steps: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    encoder_dim: Option<usize>,
    #[arg(long, global = true)]
    hidden_dim: Option<usize>,
    #[arg(long, global = true)]
    sgc_degree: Option<usize>,
    #[arg(long, global = true)]
    margin: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic SBM bundle.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        intra_p: Option<f64>,
        #[arg(long)]
        inter_p: Option<f64>,
        #[arg(long)]
        feature_shift: Option<f64>,
        #[arg(long, default_value = "synthetic")]
        name: String,
    },
    /// Inject structural and contextual anomalies into a bundle.
    Inject {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        clique_size: Option<usize>,
        #[arg(long)]
        pool: Option<usize>,
    },
    /// Split a bundle into random sub-networks.
    Partition {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        parts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a target bundle into fine-tune / validation / test nodes.
    Split {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train GDN on a single network.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        /// Node splits from `split`; training uses the fine-tune nodes and
        /// keeps the best validation checkpoint.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train on auxiliary bundles.
    MetaTrain {
        #[arg(long = "aux", required = true)]
        aux: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited JSON training log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Fine-tune a checkpoint on a target bundle.
    FineTune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score nodes of a bundle with a checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Score only the test nodes of this split.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics for a scores file against a bundle's labels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full experiment from a configuration.
    Experiment {
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the resolved configuration and planned stages only.
        #[arg(long)]
        dry_run: bool,
    },
    /// Contamination-robustness study.
    Contamination {
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let m = &mut cfg.meta;
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = common.$field { m.$field = v; } )* };
    }
    set!(epochs, fine_tune_epochs, inner_lr, meta_lr, inner_steps, batch_size, encoder_dim, hidden_dim, sgc_degree);
    if let Some(v) = common.margin {
        m.loss.margin = v;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.single_thread {
        cfg.meta.exec = Exec::Sequential;
        cfg.parallel_runs = false;
    }
    cfg.meta.seed = cfg.seed;
    Ok(cfg)
}

fn meta_cfg(cfg: &ExperimentConfig) -> MetaConfig {
    MetaConfig {
        seed: cfg.seed,
        ..cfg.meta.clone()
    }
}

fn load(path: &Path) -> Result<LabeledGraph> {
    Ok(load_bundle(path)
        .with_context(|| format!("loading bundle {}", path.display()))?
        .labeled)
}

fn write_text(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

struct SplitFile {
    fine_tune: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
}

fn read_split(path: &Path) -> Result<SplitFile> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    let get = |k: &str| -> Result<Vec<usize>> {
        serde_json::from_value(v[k].clone()).with_context(|| format!("split file missing {k:?}"))
    };
    Ok(SplitFile {
        fine_tune: get("fine_tune")?,
        validation: get("validation")?,
        test: get("test")?,
    })
}

fn few_shot_task(g: &LabeledGraph, pool: &[usize], shots: usize, cfg: &ExperimentConfig) -> Result<Task> {
    let pick = data::select_shots(pool, &g.is_anomaly(), shots, &mut seeded(derive_seed(cfg.seed, 0x7368)))?;
    log::info!(
        "{}: {} labeled, {} unlabeled, contamination {:.4}",
        g.name,
        pick.labeled.len(),
        pick.unlabeled.len(),
        pick.contamination
    );
    let feats = encode_graph(&g.graph, cfg.meta.sgc_degree)?;
    Ok(Task::new(
        g.name.clone(),
        Arc::new(g.graph.clone()),
        Arc::new(feats),
        pick.labeled,
        pick.unlabeled,
    )?)
}

fn validation_of(g: &LabeledGraph, nodes: &[usize]) -> Validation {
    let mask = g.is_anomaly();
    Validation {
        nodes: nodes.to_vec(),
        labels: nodes.iter().map(|&i| u8::from(mask[i])).collect(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = base_config(&cli.common)?;
    match cli.command {
        Command::Synth { out, n, d, blocks, intra_p, inter_p, feature_shift, name } => {
            let base = SyntheticSpec::default();
            let spec = SyntheticSpec {
                n: n.unwrap_or(base.n),
                d: d.unwrap_or(base.d),
                blocks: blocks.unwrap_or(base.blocks),
                intra_p: intra_p.unwrap_or(base.intra_p),
                inter_p: inter_p.unwrap_or(base.inter_p),
                feature_shift: feature_shift.unwrap_or(base.feature_shift),
            };
            let graph = data::generate_synthetic(&spec, &mut seeded(cfg.seed))?;
            let g = LabeledGraph { name, graph, anomalies: vec![], kinds: None };
            save_bundle(&out, &g)?;
            println!("wrote {} nodes, {} edges to {}", spec.n, g.graph.num_edges(), out.display());
        }
        Command::Inject { bundle, out, rate, clique_size, pool } => {
            let mut g = load(&bundle)?;
            let mut spec = cfg.injection.clone();
            spec.rate = rate.unwrap_or(spec.rate);
            spec.clique_size = clique_size.unwrap_or(spec.clique_size);
            spec.candidate_pool = pool.unwrap_or(spec.candidate_pool);
            let report = inject_combined(&g.graph, &spec, &mut seeded(cfg.seed))?;
            println!(
                "injected {} structural ({} cliques) and {} contextual anomalies",
                report.structural.len(),
                report.cliques.len(),
                report.contextual.len()
            );
            g.kinds = Some(report.typed_labels().into_iter().collect());
            g.anomalies = report.anomalies();
            g.graph = report.graph;
            save_bundle(&out, &g)?;
        }
        Command::Partition { bundle, parts, out } => {
            let g = load(&bundle)?;
            let pieces = data::partition_network(&g, parts, &mut seeded(cfg.seed))?;
            for (i, p) in pieces.iter().enumerate() {
                let dir = out.join(format!("part{i}"));
                save_bundle(&dir, &p.labeled)?;
                let mapping: String = p
                    .mapping
                    .iter()
                    .enumerate()
                    .map(|(local, orig)| format!("{local},{orig}\n"))
                    .collect();
                write_text(&dir.join("mapping.csv"), mapping)?;
                println!("{}: {} nodes, {} anomalies", dir.display(), p.mapping.len(), p.labeled.anomalies.len());
            }
        }
        Command::Split { bundle, out } => {
            let g = load(&bundle)?;
            let nodes: Vec<usize> = (0..g.graph.num_nodes()).collect();
            let s = data::split_target(&nodes, &cfg.split, &mut seeded(cfg.seed))?;
            let mask = g.is_anomaly();
            let count = |v: &[usize]| v.iter().filter(|&&i| mask[i]).count();
            let doc = json!({
                "fine_tune": s.fine_tune,
                "validation": s.validation,
                "test": s.test,
                "anomalies": {
                    "fine_tune": count(&s.fine_tune),
                    "validation": count(&s.validation),
                    "test": count(&s.test),
                },
            });
            write_text(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
        }
        Command::Train { bundle, split, shots, out } => {
            let g = load(&bundle)?;
            let split = split.map(|p| read_split(&p)).transpose()?;
            let all: Vec<usize> = (0..g.graph.num_nodes()).collect();
            let pool = split.as_ref().map_or(&all, |s| &s.fine_tune);
            let task = few_shot_task(&g, pool, shots, &cfg)?;
            let val = split.as_ref().map(|s| validation_of(&g, &s.validation));
            let trained = meta::train_single_validated(&task, &meta_cfg(&cfg), val.as_ref())?;
            Checkpoint::new(&trained.params, cfg.meta.sgc_degree).save(&out)?;
            println!("kept epoch {} -> {}", trained.best_epoch, out.display());
        }
        Command::MetaTrain { aux, shots, out, log, checkpoint_every } => {
            let tasks = aux
                .iter()
                .map(|p| {
                    let g = load(p)?;
                    let all: Vec<usize> = (0..g.graph.num_nodes()).collect();
                    few_shot_task(&g, &all, shots, &cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut lines = String::new();
            let mc = meta_cfg(&cfg);
            let state = meta::train_meta_with(&tasks, &mc, |record, params| {
                lines.push_str(&serde_json::to_string(record)?);
                lines.push('\n');
                if let Some(every) = checkpoint_every.filter(|&e| e > 0) {
                    if (record.epoch + 1) % every == 0 {
                        let path = out.with_extension(format!("epoch{}.json", record.epoch + 1));
                        Checkpoint::new(params, mc.sgc_degree).save(&path)?;
                    }
                }
                Ok(())
            })?;
            if let Some(path) = log {
                write_text(&path, lines)?;
            }
            Checkpoint::new(&state.params, mc.sgc_degree).save(&out)?;
            println!(
                "meta-trained {} epochs on {} tasks, final meta-loss {:?}",
                state.epoch,
                tasks.len(),
                state.loss_history.last()
            );
        }
        Command::FineTune { checkpoint, bundle, split, shots, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let params = ck.params()?;
            let g = load(&bundle)?;
            let s = read_split(&split)?;
            let mut mc = meta_cfg(&cfg);
            mc.sgc_degree = ck.sgc_degree;
            let task = few_shot_task(&g, &s.fine_tune, shots, &ExperimentConfig { meta: mc.clone(), ..cfg.clone() })?;
            let val = validation_of(&g, &s.validation);
            let trained = meta::fine_tune_validated(&params, &task, &mc, Some(&val))?;
            Checkpoint::new(&trained.params, ck.sgc_degree).save(&out)?;
            println!(
                "validation AUC {:?} -> {:?} (epoch {})",
                trained.initial_validation_auc, trained.best_validation_auc, trained.best_epoch
            );
        }
        Command::Score { checkpoint, bundle, split, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let params = ck.params()?;
            let g = load(&bundle)?;
            let feats = encode_graph(&g.graph, ck.sgc_degree)?;
            let scores = score_all(&params, &feats)?;
            let nodes: Vec<usize> = match split {
                Some(p) => read_split(&p)?.test,
                None => (0..g.graph.num_nodes()).collect(),
            };
            let out_scores = experiment::Scores {
                node_ids: nodes.iter().map(|&i| g.graph.external_id(i)).collect(),
                scores: nodes.iter().map(|&i| scores[i]).collect(),
            };
            write_text(&out, out_scores.to_csv())?;
        }
        Command::Eval { scores, bundle, ks, out } => {
            let g = load(&bundle)?;
            let text = fs::read_to_string(&scores)?;
            let mask = g.is_anomaly();
            let index: std::collections::HashMap<u64, usize> =
                (0..g.graph.num_nodes()).map(|i| (g.graph.external_id(i), i)).collect();
            let mut s = Vec::new();
            let mut y = Vec::new();
            for (line, row) in text.lines().enumerate().skip(1) {
                if row.trim().is_empty() {
                    continue;
                }
                let (id, score) = row
                    .split_once(',')
                    .with_context(|| format!("{}:{}: expected node_id,score", scores.display(), line + 1))?;
                let id: u64 = id.trim().parse()?;
                let node = *index
                    .get(&id)
                    .with_context(|| format!("{}:{}: unknown node {id}", scores.display(), line + 1))?;
                s.push(score.trim().parse::<f64>()?);
                y.push(u8::from(mask[node]));
            }
            let report = metrics::evaluate(&s, &y, ks.as_deref().unwrap_or(&cfg.ks))?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => write_text(&p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Experiment { mode, repeats, out, dry_run } => {
            let mut cfg = cfg;
            if let Some(m) = mode {
                cfg.mode = serde_json::from_value(json!(m)).with_context(|| format!("unknown mode {m:?}"))?;
            }
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if dry_run {
                print_plan(&cfg)?;
                return Ok(());
            }
            let output = experiment::run_experiment(&cfg)?;
            output.write(&cfg.output_dir)?;
            report(&output.rows);
        }
        Command::Contamination { levels, repeats, out, dry_run } => {
            let mut cfg = cfg;
            cfg.mode = Mode::Main;
            if let Some(l) = levels {
                cfg.contamination_levels = l;
            }
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if dry_run {
                print_plan(&cfg)?;
                println!("contamination levels: {:?}", cfg.contamination_levels);
                return Ok(());
            }
            let output = experiment::run_contamination_study(&cfg, &cfg.contamination_levels)?;
            output.write(&cfg.output_dir)?;
            report(&output.rows);
        }
    }
    Ok(())
}

fn print_plan(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    println!("{}", serde_json::to_string_pretty(cfg)?);
    println!("config hash: {}", cfg.hash());
    for (i, stage) in experiment::plan(cfg).iter().enumerate() {
        println!("{}. {stage}", i + 1);
    }
    Ok(())
}

fn report(rows: &[experiment::ResultRow]) {
    for r in rows {
        println!(
            "{:<12} {:<10} AUC-ROC {:.3} ± {:.3}  AUC-PR {:.3} ± {:.3}",
            r.setting, r.variant, r.auc_roc_mean, r.auc_roc_std, r.auc_pr_mean, r.auc_pr_std
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(bad) = validate_flags(&cli) {
        eprintln!("error: {bad}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn validate_flags(cli: &Cli) -> Option<String> {
    if cli.common.batch_size.is_some_and(|b| b == 0 || b % 2 != 0) {
        return Some("--batch-size must be even and positive".into());
    }
    None
}
