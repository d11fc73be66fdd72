mod common;

use common::gradcheck;
use metagdn::model::{forward, init_params, score_all, Checkpoint};
use metagdn::rng::seeded;
use metagdn::{GdnParams, PropagatedFeatures};
use ndarray::Array2;
use proptest::prelude::*;

fn loop_score(p: &GdnParams, x: &[f64]) -> f64 {
    let mut score = p.output_bias;
    for v in 0..p.hidden_dim() {
        let mut pre = p.hidden_bias[v];
        for e in 0..p.encoder_dim() {
            let enc: f64 = p.encoder_bias[e] + (0..x.len()).map(|j| x[j] * p.encoder_weight[[j, e]]).sum::<f64>();
            pre += enc * p.hidden_weight[[e, v]];
        }
        score += pre.max(0.0) * p.output_weight[v];
    }
    score
}

fn random_params(seed: u64, d: usize, h_e: usize, h_v: usize) -> GdnParams {
    let mut p = init_params(d, h_e, h_v, &mut seeded(seed)).unwrap();
    p.encoder_bias.mapv_inplace(|v| v + 0.1);
    p.hidden_bias.iter_mut().enumerate().for_each(|(i, b)| *b = (i as f64 * 0.37).sin() * 0.3);
    p.output_bias = -0.25;
    p
}

#[test]
fn forward_matches_loop_oracle() {
    for seed in 0..10 {
        let (n, d, h_e, h_v) = (7 + seed as usize, 3, 4, 6);
        let x = Array2::from_shape_fn((n, d), |(i, j)| ((i * 31 + j * 7 + seed as usize) % 13) as f64 / 4.0 - 1.5);
        let feats = PropagatedFeatures::raw(&x);
        let p = random_params(seed, d, h_e, h_v);
        let all = score_all(&p, &feats).unwrap();
        for (i, got) in all.iter().enumerate() {
            let want = loop_score(&p, x.row(i).as_slice().unwrap());
            assert!((got - want).abs() <= 1e-12, "node {i}: {got} vs {want}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..20 {
        let inst = gradcheck::instance(1000 + seed, 1e-4);
        let r = gradcheck::check(&inst, 1e-6, 1e-5, 1e-8);
        assert!(r.oracle_gap <= 1e-12, "seed {seed}: library loss differs from oracle by {}", r.oracle_gap);
        assert_eq!(r.failures, 0, "seed {seed}: worst relative error {}", r.worst_relative);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut p = random_params(3, 5, 4, 7);
    p.hidden_weight[[0, 0]] = 1.0 / 3.0;
    p.output_weight[1] = f64::MIN_POSITIVE;
    p.encoder_weight[[2, 3]] = -1e-300;
    Checkpoint::new(&p, 2).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.sgc_degree, 2);
    let back = loaded.params().unwrap();
    let bits = |q: &GdnParams| q.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&p));
}

#[test]
fn checkpoint_with_wrong_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut ck = Checkpoint::new(&random_params(1, 2, 2, 2), 2);
    ck.h_v = 3;
    ck.save(&path).unwrap();
    assert!(Checkpoint::load(&path).unwrap().params().is_err());
}

proptest! {
    #[test]
    fn scores_are_permutation_equivariant(
        seed in 0u64..1000,
        n in 2usize..30,
        perm_seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        let d = 4;
        let x = Array2::from_shape_fn((n, d), |(i, j)| ((i * 17 + j * 5 + seed as usize) % 11) as f64 - 5.0);
        let p = random_params(seed, d, 3, 5);
        let feats = PropagatedFeatures::raw(&x);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut seeded(perm_seed));
        let scores = score_all(&p, &feats).unwrap();
        let batch = forward(&p, &feats, &perm).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(batch.scores[k].to_bits(), scores[i].to_bits());
        }
    }
}
