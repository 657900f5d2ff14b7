//! Finite-difference checks of every differentiable building block, each
//! returning the norm-wise relative error between tape and numeric
//! gradients.

use mhan_core::autodiff::{ParamStore, Tape};
use mhan_core::channels::{gat_layer, hgt_layer, GatMean, GatParams, GatTopology, HgtParams, HgtTopology};
use mhan_core::fusion::{FusionKind, FusionParams};
use mhan_core::graphs::{build_ecg, EtgGraph};
use mhan_core::model::{build_graphs, score, Mhan, ModelConfig};
use mhan_core::training::{batch_loss, margin_loss, margin_loss_tape, split_edges, NegativeSampler, TrainingConfig};
use mhan_core::{NodeKind, PerKind};

use super::*;

/// Heterogeneous layer on the ten-node graph, input width 5 resized to 4,
/// two heads. Inputs are parameters too so their gradients are checked.
pub fn hgt(seed: u64) -> f64 {
    let corpus = ten_node_corpus();
    let ecg = build_ecg(&corpus);
    let topo = HgtTopology::new(&ecg);
    let relations: Vec<_> = ecg.relations().collect();
    let mut store = ParamStore::new(seed);
    let params = HgtParams::new(&mut store, "hgt", 5, 4, 2, &relations).unwrap();
    let mut r = rng(seed);
    let inputs = PerKind::from_fn(|kind| {
        let m = random_matrix(&mut r, corpus.count(kind), 5, -1.0, 1.0);
        store.insert(&format!("input.{kind}"), m).unwrap()
    });
    let weights = PerKind::from_fn(|kind| random_matrix(&mut r, corpus.count(kind), 4, -1.0, 1.0));
    let mut ids = params.params();
    ids.extend(inputs.iter().map(|(_, &id)| id));
    let (err, _) = check_param_grads(&mut store, |s| s, &ids, |store, tape| {
        let h = inputs.map(|_, &id| tape.param(store, id));
        let out = hgt_layer(tape, store, &topo, &h, &params).unwrap();
        let parts: Vec<_> = NodeKind::ALL.iter().map(|&k| weighted_sum(tape, out[k], &weights[k])).collect();
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = tape.add(total, p).unwrap();
        }
        total
    });
    err
}

/// Homogeneous layer on a four-node text graph, both head-mean modes.
pub fn gat(seed: u64, mean: GatMean) -> f64 {
    let graph = EtgGraph::from_neighbors(0.5, vec![vec![1], vec![2], vec![], vec![0, 2]]);
    let topo = GatTopology::new(&graph).unwrap();
    let mut store = ParamStore::new(seed);
    let params = GatParams::new(&mut store, "gat", 5, 4, 2).unwrap();
    let mut r = rng(seed);
    let input = store.insert("input", random_matrix(&mut r, 4, 5, -1.0, 1.0)).unwrap();
    let weights = random_matrix(&mut r, 4, 4, -1.0, 1.0);
    let mut ids = params.params();
    ids.push(input);
    let (err, _) = check_param_grads(&mut store, |s| s, &ids, |store, tape| {
        let x = tape.param(store, input);
        let out = gat_layer(tape, store, &topo, x, &params, mean).unwrap();
        weighted_sum(tape, out, &weights)
    });
    err
}

/// One fusion mechanism over five rows of width 4 with two heads.
pub fn fusion(seed: u64, kind: FusionKind) -> f64 {
    let mut store = ParamStore::new(seed);
    let params = FusionParams::new(&mut store, "fusion", kind, 5, 4, 2).unwrap();
    let mut r = rng(seed);
    let hc = store.insert("hc", random_matrix(&mut r, 5, 4, 0.0, 2.0)).unwrap();
    let ht = store.insert("ht", random_matrix(&mut r, 5, 4, 0.0, 2.0)).unwrap();
    let weights = random_matrix(&mut r, 5, 4, -1.0, 1.0);
    let mut ids = params.params();
    ids.extend([hc, ht]);
    let (err, _) = check_param_grads(&mut store, |s| s, &ids, |store, tape| {
        let a = tape.param(store, hc);
        let b = tape.param(store, ht);
        let out = params.forward(tape, store, a, b).unwrap();
        weighted_sum(tape, out, &weights)
    });
    err
}

/// Tape gradient of `sigmoid(hp · he)` against differences of the plain
/// scoring function.
pub fn score_fn(seed: u64) -> f64 {
    let mut r = rng(seed);
    let hp = random_matrix(&mut r, 1, 6, -1.0, 1.0);
    let he = random_matrix(&mut r, 1, 6, -1.0, 1.0);
    let mut tape = Tape::new();
    let a = tape.variable(hp.clone());
    let b = tape.variable(he.clone());
    let dot = tape.row_dot(a, b).unwrap();
    let y = tape.sigmoid(dot);
    let grads = tape.backward(y).unwrap();
    let analytic = vec![grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone()];
    let numeric = numeric_grads(&[hp, he], |xs| {
        score(xs[0].as_slice().unwrap(), xs[1].as_slice().unwrap()).unwrap()
    });
    relative_error(&analytic, &numeric)
}

/// Tape gradient of the batched margin loss against differences of the
/// per-positive reference.
pub fn margin(seed: u64) -> f64 {
    let (m, k) = (4, 3);
    let mut r = rng(seed);
    let pos = random_matrix(&mut r, m, 1, 0.05, 0.95);
    let neg = random_matrix(&mut r, m * k, 1, 0.05, 0.95);
    let mut tape = Tape::new();
    let p = tape.variable(pos.clone());
    let n = tape.variable(neg.clone());
    let loss = margin_loss_tape(&mut tape, p, n, k).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = vec![grads.get(p).unwrap().clone(), grads.get(n).unwrap().clone()];
    let numeric = numeric_grads(&[pos, neg], |xs| {
        (0..m)
            .map(|i| {
                let negs: Vec<f64> = (0..k).map(|j| xs[1][[i * k + j, 0]]).collect();
                margin_loss(xs[0][[i, 0]], &negs).unwrap()
            })
            .sum()
    });
    relative_error(&analytic, &numeric)
}

/// Full model loss on the ten-node corpus: two layers, text channel and
/// the given fusion, with one fixed batch of positives and negatives.
pub fn end_to_end(seed: u64, fusion: FusionKind) -> f64 {
    let corpus = ten_node_corpus();
    let text = random_table(&mut rng(seed), &corpus, 6);
    let config = ModelConfig {
        layers: 2,
        dim: 4,
        hgt_heads: 2,
        gat_heads: 2,
        fusion_heads: 2,
        fusion,
        threshold: 0.3,
        seed,
        ..ModelConfig::default()
    };
    let train = TrainingConfig {
        negatives: 1,
        seed,
        ..TrainingConfig::default()
    };
    let (ecg, etg) = build_graphs(&corpus, &text, &config).unwrap();
    let split = split_edges(&ecg, train.ratio, seed).unwrap();
    let mut model = Mhan::new(config, &split.message_graph(&ecg), &etg, &text).unwrap();
    let batch = NegativeSampler::new(&split, corpus.num_evidence(), &train).batch(0).unwrap();
    let ids: Vec<_> = model.store().ids().collect();
    let (err, _) = check_param_grads(&mut model, |m| m.store_mut(), &ids, |m, tape| batch_loss(tape, m, &batch).unwrap());
    err
}

/// Every check with its name.
pub fn all(seed: u64) -> Vec<(String, f64)> {
    let mut out = vec![
        ("hgt_layer".to_string(), hgt(seed)),
        ("gat_layer (head mean)".to_string(), gat(seed, GatMean::Heads)),
        ("gat_layer (neighbor mean)".to_string(), gat(seed, GatMean::Neighbors)),
    ];
    for kind in FusionKind::ALL {
        out.push((format!("{kind} fusion"), fusion(seed, kind)));
    }
    out.push(("score".to_string(), score_fn(seed)));
    out.push(("margin_loss".to_string(), margin(seed)));
    for kind in FusionKind::ALL {
        out.push((format!("end-to-end loss ({kind} fusion)"), end_to_end(seed, kind)));
    }
    out
}
