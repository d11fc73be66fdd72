#![allow(dead_code)]

use std::sync::Arc;

use metagdn::data::{generate_synthetic, select_shots, split_target, SplitSpec, SyntheticSpec};
use metagdn::graph::encode_graph;
use metagdn::inject::{inject_combined, InjectionSpec};
use metagdn::meta::Validation;
use metagdn::rng::{derive_seed, seeded};
use metagdn::{AttributedGraph, MetaConfig, Task};

/// A small injected SBM network split into a training task and held-out
/// validation nodes.
pub struct Fixture {
    pub graph: Arc<AttributedGraph>,
    pub is_anomaly: Vec<bool>,
    pub task: Task,
    pub validation: Validation,
    pub test: Vec<usize>,
}

pub fn small_spec(n: usize) -> SyntheticSpec {
    SyntheticSpec {
        n,
        d: 8,
        ..SyntheticSpec::default()
    }
}

pub fn fixture(seed: u64, n: usize, shots: usize) -> Fixture {
    let spec = InjectionSpec {
        clique_size: 8,
        rate: 0.1,
        ..InjectionSpec::default()
    };
    build(seed, &small_spec(n), &spec, shots)
}

/// Full-size default network with the default injection.
pub fn default_fixture(seed: u64, shots: usize) -> Fixture {
    build(seed, &SyntheticSpec::default(), &InjectionSpec::default(), shots)
}

fn build(seed: u64, synth: &SyntheticSpec, spec: &InjectionSpec, shots: usize) -> Fixture {
    let n = synth.n;
    let base = generate_synthetic(synth, &mut seeded(seed)).unwrap();
    let report = inject_combined(&base, spec, &mut seeded(derive_seed(seed, 1))).unwrap();
    let mut is_anomaly = vec![false; n];
    for i in report.anomalies() {
        is_anomaly[i] = true;
    }
    let graph = Arc::new(report.graph);
    let feats = Arc::new(encode_graph(&graph, 2).unwrap());
    let nodes: Vec<usize> = (0..n).collect();
    let split = split_target(&nodes, &SplitSpec::default(), &mut seeded(derive_seed(seed, 2))).unwrap();
    let pick = select_shots(&split.fine_tune, &is_anomaly, shots, &mut seeded(derive_seed(seed, 3))).unwrap();
    let task = Task::new(format!("fixture-{seed}"), graph.clone(), feats, pick.labeled, pick.unlabeled).unwrap();
    let validation = Validation {
        labels: split.validation.iter().map(|&i| u8::from(is_anomaly[i])).collect(),
        nodes: split.validation,
    };
    Fixture {
        graph,
        is_anomaly,
        task,
        validation,
        test: split.test,
    }
}

/// Paper hyperparameters shrunk for fast tests.
pub fn quick_config(seed: u64) -> MetaConfig {
    MetaConfig {
        epochs: 60,
        fine_tune_epochs: 40,
        encoder_dim: 16,
        hidden_dim: 32,
        seed,
        ..MetaConfig::default()
    }
}

pub mod gradcheck {
    use metagdn::graph::encode_graph;
    use metagdn::loss::{loss_and_grad, LossConfig, LossSettings};
    use metagdn::model::{forward_backward, init_params};
    use metagdn::rng::{seeded, Rng};
    use metagdn::{AttributedGraph, GdnParams, PropagatedFeatures};
    use ndarray::Array2;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    pub struct Instance {
        pub params: GdnParams,
        pub feats: PropagatedFeatures,
        pub batch: Vec<usize>,
        pub labels: Vec<u8>,
        pub loss: LossConfig,
    }

    /// Straight-line deviation loss of the batch at flat parameters `theta`.
    pub fn oracle_loss(inst: &Instance, theta: &[f64]) -> f64 {
        let (d, h_e, h_v) = (inst.params.input_dim(), inst.params.encoder_dim(), inst.params.hidden_dim());
        let (we, rest) = theta.split_at(d * h_e);
        let (be, rest) = rest.split_at(h_e);
        let (wh, rest) = rest.split_at(h_e * h_v);
        let (bh, rest) = rest.split_at(h_v);
        let (wo, bo) = rest.split_at(h_v);
        let r = &inst.loss.reference;
        let mut total = 0.0;
        for (&node, &y) in inst.batch.iter().zip(&inst.labels) {
            let x = inst.feats.matrix().row(node);
            let mut score = bo[0];
            for v in 0..h_v {
                let mut pre = bh[v];
                for e in 0..h_e {
                    let mut enc = be[e];
                    for j in 0..d {
                        enc += x[j] * we[j * h_e + e];
                    }
                    pre += enc * wh[e * h_v + v];
                }
                if pre > 0.0 {
                    score += pre * wo[v];
                }
            }
            let dev = (score - r.ref_mean) / r.ref_std;
            total += if y == 0 { dev.abs() } else { (inst.loss.margin - dev).max(0.0) };
        }
        total / inst.batch.len() as f64
    }

    /// Smallest distance of any ReLU pre-activation or loss hinge from its kink.
    fn kink_distance(inst: &Instance) -> f64 {
        let p = &inst.params;
        let x = inst.feats.matrix().select(ndarray::Axis(0), &inst.batch);
        let pre = (x.dot(&p.encoder_weight) + &p.encoder_bias).dot(&p.hidden_weight) + &p.hidden_bias;
        let scores = pre.mapv(|v| v.max(0.0)).dot(&p.output_weight) + p.output_bias;
        let r = &inst.loss.reference;
        let hinge = scores.iter().zip(&inst.labels).map(|(s, &y)| {
            let dev = (s - r.ref_mean) / r.ref_std;
            if y == 0 { dev.abs() } else { (dev - inst.loss.margin).abs() }
        });
        pre.iter().map(|v| v.abs()).chain(hinge).fold(f64::INFINITY, f64::min)
    }

    fn draw(rng: &mut Rng) -> Instance {
        let n = rng.gen_range(2..=50);
        let d = rng.gen_range(1..=8);
        let h_e = rng.gen_range(1..=8);
        let h_v = rng.gen_range(1..=16);
        let mut edges = Vec::new();
        for _ in 0..rng.gen_range(0..=2 * n) {
            let (u, v) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if u != v {
                edges.push((u, v));
            }
        }
        let x = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        let (g, _) = AttributedGraph::from_edges(n, &edges, x).unwrap();
        let feats = encode_graph(&g, 2).unwrap();
        let mut params = init_params(d, h_e, h_v, rng).unwrap();
        params.encoder_bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        params.hidden_bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        params.output_bias = rng.gen_range(-0.5..0.5);
        let half = rng.gen_range(1..=(n / 2).min(8));
        let batch: Vec<usize> = (0..2 * half).map(|_| rng.gen_range(0..n)).collect();
        let mut labels = vec![0u8; half];
        labels.resize(2 * half, 1);
        let loss = LossSettings::default().resolve(rng).unwrap();
        Instance { params, feats, batch, labels, loss }
    }

    /// A random instance whose parameters sit at least `margin` away from
    /// every kink of the loss surface.
    pub fn instance(seed: u64, margin: f64) -> Instance {
        let mut rng = seeded(seed);
        loop {
            let inst = draw(&mut rng);
            if kink_distance(&inst) > margin {
                return inst;
            }
        }
    }

    pub struct Report {
        pub coordinates: usize,
        pub failures: usize,
        pub worst_relative: f64,
        pub oracle_gap: f64,
    }

    /// Compares every analytic gradient coordinate with central differences
    /// of the oracle loss.
    pub fn check(inst: &Instance, step: f64, rel_tol: f64, abs_tol: f64) -> Report {
        let (value, grads) = forward_backward(&inst.params, &inst.feats, &inst.batch, |s| {
            loss_and_grad(s, &inst.labels, &inst.loss)
        })
        .unwrap();
        let theta = inst.params.to_flat();
        let analytic = grads.to_flat();
        let mut report = Report {
            coordinates: theta.len(),
            failures: 0,
            worst_relative: 0.0,
            oracle_gap: (oracle_loss(inst, &theta) - value).abs(),
        };
        let mut probe = theta.clone();
        for k in 0..theta.len() {
            probe[k] = theta[k] + step;
            let up = oracle_loss(inst, &probe);
            probe[k] = theta[k] - step;
            let down = oracle_loss(inst, &probe);
            probe[k] = theta[k];
            let numeric = (up - down) / (2.0 * step);
            let err = (numeric - analytic[k]).abs();
            let rel = err / numeric.abs().max(analytic[k].abs());
            if err > abs_tol {
                report.worst_relative = report.worst_relative.max(rel);
                if rel > rel_tol {
                    report.failures += 1;
                }
            }
        }
        report
    }
}

pub mod oracles {
    /// Counts over every anomaly-normal pair; ties count half.
    pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut doubled, mut pos, mut neg) = (0u64, 0u64, 0u64);
        for (i, &yi) in labels.iter().enumerate() {
            if yi == 1 {
                pos += 1;
            } else {
                neg += 1;
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj == 0 {
                    doubled += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        doubled as f64 / (2 * pos * neg) as f64
    }

    /// Rank of each position: how many positions come before it.
    pub fn ahead_of(scores: &[f64], i: usize) -> usize {
        (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    }

    pub fn sorted_labels(scores: &[f64], labels: &[u8]) -> Vec<u8> {
        let mut out = vec![0; labels.len()];
        for i in 0..labels.len() {
            out[ahead_of(scores, i)] = labels[i];
        }
        out
    }

    /// Sums `(recall_k - recall_{k-1}) * precision_k` over every cut-off `k`.
    pub fn stepwise_ap(scores: &[f64], labels: &[u8]) -> f64 {
        let ranked = sorted_labels(scores, labels);
        let pos = labels.iter().filter(|&&y| y == 1).count();
        let mut ap = 0.0;
        let mut hits = 0;
        let mut prev_recall = 0.0;
        for (k, &y) in ranked.iter().enumerate() {
            hits += y as usize;
            let recall = hits as f64 / pos as f64;
            ap += (recall - prev_recall) * (hits as f64 / (k + 1) as f64);
            prev_recall = recall;
        }
        ap
    }

    pub fn top_k_precision(scores: &[f64], labels: &[u8], k: usize) -> f64 {
        let hits = (0..scores.len())
            .filter(|&i| labels[i] == 1 && ahead_of(scores, i) < k)
            .count();
        hits as f64 / k as f64
    }
}
