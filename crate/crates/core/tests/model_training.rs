//! Training-dynamics oracles for the dual-branch model: finite-difference
//! checks of the full fitting loss, a learnability smoke test, and the
//! degree-based knowledge-routing property.

use fedlog_core::graphio::{generate_sbm, Graph, SbmConfig};
use fedlog_core::model::*;
use fedlog_core::rng::stream;
use fedlog_core::tensor::Optimizer;
use fedlog_core::tensor::{Tape, Tensor};
use std::sync::Arc;

/// Eval-mode fitting loss (no dropout) for finite differencing.
fn fitting_loss_value(m: &LocalModel, batch: &GraphBatch, beta: f64) -> f64 {
    let class_groups = Arc::new(m.head_bank.class_groups());
    let edgeless = Arc::new(m.head_bank.edgeless_groups());
    let mut tape = Tape::new();
    let tids = bind_model(&mut tape, m, true);
    let probs = dual_branch_probs(
        &mut tape,
        &tids,
        batch,
        &class_groups,
        &edgeless,
        &mut EmbedMode::Eval,
    )
    .unwrap();
    let cls = class_nll(&mut tape, probs, batch.labels.clone()).unwrap();
    let pen = bank_norm_penalty(&mut tape, &tids, beta).unwrap();
    let loss = tape.add(cls, pen).unwrap();
    tape.value(loss)[0]
}

fn fitting_bank_grads(m: &LocalModel, batch: &GraphBatch, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let class_groups = Arc::new(m.head_bank.class_groups());
    let edgeless = Arc::new(m.head_bank.edgeless_groups());
    let mut tape = Tape::new();
    let tids = bind_model(&mut tape, m, true);
    let probs = dual_branch_probs(
        &mut tape,
        &tids,
        batch,
        &class_groups,
        &edgeless,
        &mut EmbedMode::Eval,
    )
    .unwrap();
    let cls = class_nll(&mut tape, probs, batch.labels.clone()).unwrap();
    let pen = bank_norm_penalty(&mut tape, &tids, beta).unwrap();
    let loss = tape.add(cls, pen).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    (grads.take(tids.head_bank).unwrap(), grads.take(tids.tail_bank).unwrap())
}

/// Spec-level oracle: the analytic gradient of the full fitting loss with
/// respect to the synthetic bank features matches central differences.
#[test]
fn bank_gradients_match_finite_differences() {
    let mut rng = stream(5, "fd-fixture", &[]);
    let features = Tensor::randn(5, 3, 1.0, &mut rng);
    let g = Graph::new(
        features,
        vec![0, 1, 0, 1, 0],
        &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)],
        None,
    )
    .unwrap();
    let mut shared = stream(6, "fd-shared", &[]);
    let mut bank = stream(6, "fd-bank", &[]);
    let mut m = LocalModel::init(3, 2, 2, &mut shared, &mut bank);
    let batch = GraphBatch::from_graph(&g, &[0, 1, 2, 3, 4], 3);
    let beta = 0.1;

    let (gh, gt) = fitting_bank_grads(&m, &batch, beta);
    let h = 1e-5;
    for (bank_idx, analytic) in [(0, gh), (1, gt)] {
        for j in 0..analytic.len() {
            let bump = |m: &mut LocalModel, delta: f64| {
                let t = if bank_idx == 0 {
                    &mut m.head_bank.features
                } else {
                    &mut m.tail_bank.features
                };
                t.data_mut()[j] += delta;
            };
            bump(&mut m, h);
            let up = fitting_loss_value(&m, &batch, beta);
            bump(&mut m, -2.0 * h);
            let down = fitting_loss_value(&m, &batch, beta);
            bump(&mut m, h);
            let fd = (up - down) / (2.0 * h);
            let ad = analytic[j];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            assert!(
                rel < 1e-4,
                "bank {bank_idx} coord {j}: analytic {ad} vs fd {fd} (rel {rel:.2e})"
            );
        }
    }
}

/// One full-batch fitting step in train mode; returns the loss value.
fn fit_step(
    m: &mut LocalModel,
    batch: &GraphBatch,
    beta: f64,
    opt: &mut Optimizer,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    let class_groups = Arc::new(m.head_bank.class_groups());
    let edgeless = Arc::new(m.head_bank.edgeless_groups());
    let mut tape = Tape::new();
    let tids = bind_model(&mut tape, m, true);
    let probs = dual_branch_probs(
        &mut tape,
        &tids,
        batch,
        &class_groups,
        &edgeless,
        &mut EmbedMode::Train(rng),
    )
    .unwrap();
    let cls = class_nll(&mut tape, probs, batch.labels.clone()).unwrap();
    let pen = bank_norm_penalty(&mut tape, &tids, beta).unwrap();
    let loss = tape.add(cls, pen).unwrap();
    let value = tape.value(loss)[0];
    let mut grads = tape.backward(loss).unwrap();
    let tids_in_order = tids.in_order();
    let mut params = m.tensors_mut();
    opt.apply(&mut params, &tids_in_order, &mut grads);
    value
}

fn eval_accuracy(m: &LocalModel, batch: &GraphBatch) -> f64 {
    let class_groups = Arc::new(m.head_bank.class_groups());
    let edgeless = Arc::new(m.head_bank.edgeless_groups());
    let mut tape = Tape::inference();
    let tids = bind_model(&mut tape, m, false);
    let probs = dual_branch_probs(
        &mut tape,
        &tids,
        batch,
        &class_groups,
        &edgeless,
        &mut EmbedMode::Eval,
    )
    .unwrap();
    let n_classes = tape.cols(probs);
    let preds = argmax_rows(tape.value(probs), n_classes);
    preds.iter().zip(batch.labels.iter()).filter(|(a, b)| a == b).count() as f64
        / batch.labels.len() as f64
}

/// After 200 fitting steps on a well-separated SBM, train accuracy exceeds 0.9.
#[test]
fn learnability_smoke_on_separable_sbm() {
    let g = generate_sbm(&SbmConfig {
        block_sizes: vec![30, 30],
        p_intra: 0.25,
        p_inter: 0.02,
        dim: 8,
        separation: 3.0,
        seed: 17,
    })
    .unwrap();
    let mut shared = stream(18, "smoke-shared", &[]);
    let mut bank = stream(18, "smoke-bank", &[]);
    let mut m = LocalModel::init(8, 2, 4, &mut shared, &mut bank);
    let targets: Vec<usize> = (0..g.n()).collect();
    let batch = GraphBatch::from_graph(&g, &targets, 3);
    let tensors = m.tensors();
    let refs: Vec<&Tensor> = tensors.iter().map(|(_, t)| *t).collect();
    let mut opt = Optimizer::for_tensors(&refs, 1e-3);
    drop(tensors);
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for step in 0..200 {
        let mut rng = stream(19, "smoke-drop", &[step]);
        last = fit_step(&mut m, &batch, 0.1, &mut opt, &mut rng);
        if step == 0 {
            first = last;
        }
    }
    assert!(last < first, "loss should fall: first {first}, last {last}");
    let acc = eval_accuracy(&m, &batch);
    assert!(acc > 0.9, "train accuracy after 200 steps: {acc}");
}

/// Knowledge routing: the degree-gated merge weight decides which branch a
/// node's classification gradient flows through. A batch of high-degree
/// targets should push almost all bank gradient into the head bank; a batch
/// of degree-1 targets should push it into the tail bank.
#[test]
fn degree_routing_gates_bank_gradients() {
    // Class A: a 12-clique (degree 12 with the pendant attachments).
    // Class B: 12 pendant nodes, one per clique node (degree exactly 1).
    let a = 12usize;
    let n = 2 * a;
    let mut edges = Vec::new();
    for i in 0..a {
        for j in i + 1..a {
            edges.push((i, j));
        }
    }
    for i in 0..a {
        edges.push((i, a + i));
    }
    let labels: Vec<usize> = (0..n).map(|v| usize::from(v >= a)).collect();
    let mut rng = stream(31, "routing-features", &[]);
    let mut features = Tensor::randn(n, 6, 0.5, &mut rng);
    for v in 0..n {
        let l = labels[v];
        features.set(v, l, features.get(v, l) + 2.5);
    }
    let g = Graph::new(features, labels, &edges, None).unwrap();

    let mut shared = stream(32, "routing-shared", &[]);
    let mut bank = stream(32, "routing-bank", &[]);
    let m = LocalModel::init(6, 2, 4, &mut shared, &mut bank);

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // beta = 0 so the only path into the banks is classification.
    let clique: Vec<usize> = (0..a).collect();
    let batch_a = GraphBatch::from_graph(&g, &clique, 3);
    let (gh_a, gt_a) = fitting_bank_grads(&m, &batch_a, 0.0);
    // Degree 12 vs lambda 3: merge weight sigmoid(8), so the tail branch sees
    // ~3e-4 of the loss. Demand a wide margin, not the exact ratio.
    assert!(
        norm(&gh_a) > 50.0 * norm(&gt_a),
        "high-degree batch should hit the head bank: head {} vs tail {}",
        norm(&gh_a),
        norm(&gt_a)
    );

    let pendants: Vec<usize> = (a..n).collect();
    let batch_b = GraphBatch::from_graph(&g, &pendants, 3);
    let (gh_b, gt_b) = fitting_bank_grads(&m, &batch_b, 0.0);
    // Degree 1: merge weight sigmoid(-3) ~ 0.047, a ~20x tilt toward the tail.
    assert!(
        norm(&gt_b) > 3.0 * norm(&gh_b),
        "degree-1 batch should hit the tail bank: tail {} vs head {}",
        norm(&gt_b),
        norm(&gh_b)
    );
}
