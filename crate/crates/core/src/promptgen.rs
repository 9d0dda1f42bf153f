//! Prompt generators: per-client pretraining that teaches an MLP to emit a
//! synthetic neighbor feature for a node, by matching (a) the mean feature of
//! the node's real h-hop neighborhood and (b) the classification gradient the
//! real neighborhood would produce under randomly initialized encoders.
//! Also: server-side class-wise aggregation of the pretrained generators and
//! frozen prompt inference for global synthetic data.

use crate::graphio::Graph;
use crate::model::{bind_encoder, fan_in_init, sage_embed, EmbedMode, EncoderParams, EMBED_DIM};
use crate::rng::{fnv1a, stream};
use crate::tensor::{Groups, Optimizer, Tape, Tensor, Tid};
use std::sync::Arc;

/// Hidden width of the generator MLP.
pub const PG_HIDDEN: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("no training node has a neighbor within {hops} hops")]
    NoTrainableNodes { hops: usize },
    #[error("invalid pretraining arguments: {0}")]
    Args(String),
}

/// Feature-to-prompt MLP, d -> 256 -> 256 -> d with SiLU on the two hidden
/// layers. Frozen after server-side aggregation; prompt inference demands a
/// frozen generator so a stale unaggregated one cannot leak into a run.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGenerator {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub frozen: bool,
}

impl PromptGenerator {
    pub fn init(d: usize, rng: &mut impl rand::Rng) -> Self {
        PromptGenerator {
            w1: fan_in_init(d, PG_HIDDEN, d, rng),
            b1: fan_in_init(1, PG_HIDDEN, d, rng),
            w2: fan_in_init(PG_HIDDEN, PG_HIDDEN, PG_HIDDEN, rng),
            b2: fan_in_init(1, PG_HIDDEN, PG_HIDDEN, rng),
            w3: fan_in_init(PG_HIDDEN, d, PG_HIDDEN, rng),
            b3: fan_in_init(1, d, PG_HIDDEN, rng),
            frozen: false,
        }
    }

    /// All-zero generator (useful as an aggregation accumulator).
    pub fn zeros(d: usize) -> Self {
        PromptGenerator {
            w1: Tensor::zeros(d, PG_HIDDEN),
            b1: Tensor::zeros(1, PG_HIDDEN),
            w2: Tensor::zeros(PG_HIDDEN, PG_HIDDEN),
            b2: Tensor::zeros(1, PG_HIDDEN),
            w3: Tensor::zeros(PG_HIDDEN, d),
            b3: Tensor::zeros(1, d),
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("pg.w1", &self.w1),
            ("pg.b1", &self.b1),
            ("pg.w2", &self.w2),
            ("pg.b2", &self.b2),
            ("pg.w3", &self.w3),
            ("pg.b3", &self.b3),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// FNV-1a over the raw bit patterns of every parameter, in canonical
    /// order. Freezing means this value never changes again.
    pub fn param_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for (_, t) in self.tensors() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    /// Inference-only forward pass over a row-batch of features.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::inference();
        let tids = bind_generator(&mut tape, self, false);
        let xi = tape.constant(x);
        let out = pg_forward(&mut tape, &tids, xi).expect("generator forward");
        tape.value_tensor(out)
    }
}

/// Tape bindings for one generator.
pub struct PgTids {
    pub w1: Tid,
    pub b1: Tid,
    pub w2: Tid,
    pub b2: Tid,
    pub w3: Tid,
    pub b3: Tid,
}

pub fn bind_generator(tape: &mut Tape, pg: &PromptGenerator, trainable: bool) -> PgTids {
    let mut put = |t: &Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
    PgTids {
        w1: put(&pg.w1),
        b1: put(&pg.b1),
        w2: put(&pg.w2),
        b2: put(&pg.b2),
        w3: put(&pg.w3),
        b3: put(&pg.b3),
    }
}

impl PgTids {
    pub fn in_order(&self) -> Vec<Tid> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

pub fn pg_forward(tape: &mut Tape, pg: &PgTids, x: Tid) -> Result<Tid, crate::tensor::TensorError> {
    let z1 = tape.matmul(x, pg.w1)?;
    let z1 = tape.add_row(z1, pg.b1)?;
    let h1 = tape.silu(z1)?;
    let z2 = tape.matmul(h1, pg.w2)?;
    let z2 = tape.add_row(z2, pg.b2)?;
    let h2 = tape.silu(z2)?;
    let z3 = tape.matmul(h2, pg.w3)?;
    tape.add_row(z3, pg.b3)
}

/// Prompt inference for one scaled synthetic feature row. The caller links
/// the source node and the prompt node with a single edge to form the 2-node
/// synthetic graph.
pub fn generate_prompt(pg: &PromptGenerator, xhat: &[f64]) -> Vec<f64> {
    assert!(pg.frozen, "prompt inference requires an aggregated (frozen) generator");
    let x = Tensor::from_vec(1, xhat.len(), xhat.to_vec()).expect("prompt input row");
    pg.forward(&x).data().to_vec()
}

// ---------------------------------------------------------------------------
// Gradient matching
// ---------------------------------------------------------------------------

/// The descent direction through encoder-parameter space used by gradient
/// matching: u = 2(g_syn − g_true), returned with its Euclidean norm.
pub fn match_direction(g_syn: &[f64], g_true: &[f64]) -> (Vec<f64>, f64) {
    assert_eq!(g_syn.len(), g_true.len(), "gradient length mismatch");
    let u: Vec<f64> = g_syn.iter().zip(g_true).map(|(s, t)| 2.0 * (s - t)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    (u, norm)
}

/// Central-difference estimate of the mixed second derivative along `u`:
/// [∇_x l(φ + ε·u) − ∇_x l(φ − ε·u)] / (2ε). `grad_x_at(u, delta)` must
/// return ∇_x l(φ + delta·u); the base point φ is owned by the closure.
pub fn hvp_estimate(
    u: &[f64],
    eps: f64,
    grad_x_at: &mut impl FnMut(&[f64], f64) -> Vec<f64>,
) -> Vec<f64> {
    let plus = grad_x_at(u, eps);
    let minus = grad_x_at(u, -eps);
    plus.iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect()
}

/// Gradient of ‖g_syn − g_true‖² with respect to the synthetic input
/// feature, as a two-sided finite difference along u = 2(g_syn − g_true)
/// with step ε = 1e-3/‖u‖. Returns None when ‖u‖ = 0: the match is exact
/// and the contribution is zero.
pub fn grad_match_backward(
    g_syn: &[f64],
    g_true: &[f64],
    grad_x_at: &mut impl FnMut(&[f64], f64) -> Vec<f64>,
) -> Option<Vec<f64>> {
    let (u, norm) = match_direction(g_syn, g_true);
    if norm == 0.0 {
        return None;
    }
    let eps = 1e-3 / norm;
    Some(hvp_estimate(&u, eps, grad_x_at))
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Pretraining knobs. `hops` and `rand_inits` mirror the protocol's h and N.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub hops: usize,
    pub rand_inits: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Client id, used as an RNG stream coordinate.
    pub client: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            hops: 2,
            rand_inits: 20,
            epochs: 100,
            batch_size: 64,
            lr: 1e-2,
            seed: 0,
            client: 0,
        }
    }
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct PretrainReport {
    /// Mean per-node total loss (feature + gradient matching) per epoch.
    pub epoch_losses: Vec<f64>,
    /// Train nodes skipped because their h-hop neighborhood is empty.
    pub skipped_nodes: usize,
}

/// One trainable node: its real h-hop subgraph and neighbor-feature mean.
struct NodeCase {
    features: Tensor,
    neighbors: Arc<Groups>,
    target_row: usize,
    xbar: Vec<f64>,
    label: usize,
}

/// Mean feature over the h-hop neighborhood of `v`, excluding `v` itself.
/// None when the neighborhood is empty.
pub fn neighbor_feature_mean(g: &Graph, v: usize, hops: usize) -> Option<Vec<f64>> {
    let nbrs = g.hop_neighborhood(&[v], hops);
    if nbrs.is_empty() {
        return None;
    }
    let d = g.dim();
    let mut mean = vec![0.0; d];
    for &u in &nbrs {
        for (m, x) in mean.iter_mut().zip(g.features().row(u)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= nbrs.len() as f64;
    }
    Some(mean)
}

fn build_cases(g: &Graph, train_nodes: &[usize], hops: usize) -> (Vec<NodeCase>, usize) {
    let mut cases = Vec::new();
    let mut skipped = 0;
    for &v in train_nodes {
        let nbrs = g.hop_neighborhood(&[v], hops);
        if nbrs.is_empty() {
            skipped += 1;
            continue;
        }
        let mut keep: Vec<usize> = nbrs.clone();
        keep.push(v);
        keep.sort_unstable();
        let (sub, orig) = g.induced(&keep);
        let target_row = orig.binary_search(&v).expect("target in own subgraph");
        let d = g.dim();
        let mut xbar = vec![0.0; d];
        for &u in &nbrs {
            for (m, x) in xbar.iter_mut().zip(g.features().row(u)) {
                *m += x;
            }
        }
        for m in &mut xbar {
            *m /= nbrs.len() as f64;
        }
        cases.push(NodeCase {
            features: sub.features().clone(),
            neighbors: Arc::new(sub.neighbor_groups()),
            target_row,
            xbar,
            label: g.label(v),
        });
    }
    (cases, skipped)
}

/// Linear classification head for the pretraining loss: embeddings -> logits.
#[derive(Clone, Debug)]
pub struct PretrainHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl PretrainHead {
    pub fn init(n_classes: usize, rng: &mut impl rand::Rng) -> Self {
        PretrainHead {
            w: fan_in_init(EMBED_DIM, n_classes, EMBED_DIM, rng),
            b: fan_in_init(1, n_classes, EMBED_DIM, rng),
        }
    }
}

/// Cross-entropy of one target node through encoder + linear head, plus its
/// gradients: (loss, grad wrt encoder params flattened in canonical order,
/// grad wrt the input feature matrix). Dropout off: random-encoder gradient
/// probes must be deterministic functions of (φ, x).
fn class_grads(
    enc: &EncoderParams,
    head: &PretrainHead,
    x: &Tensor,
    neighbors: &Arc<Groups>,
    target_row: usize,
    label: usize,
) -> (f64, Vec<f64>, Tensor) {
    let mut tape = Tape::new();
    let enc_tids = bind_encoder(&mut tape, enc, true);
    let xi = tape.leaf(x);
    let w = tape.constant(&head.w);
    let b = tape.constant(&head.b);
    let h = sage_embed(&mut tape, &enc_tids, xi, neighbors, &mut EmbedMode::Eval)
        .expect("pretrain embed");
    let ht = tape.gather_rows(h, Arc::new(vec![target_row])).expect("target row");
    let logits = tape.matmul(ht, w).expect("head logits");
    let logits = tape.add_row(logits, b).expect("head bias");
    let p = tape.softmax(logits).expect("head softmax");
    let picked = tape.gather_per_row(p, Arc::new(vec![label])).expect("label prob");
    let lp = tape.log(picked).expect("log prob");
    let s = tape.sum(lp).expect("sum");
    let loss = tape.scale_const(s, -1.0).expect("negate");
    let value = tape.value(loss)[0];
    let mut grads = tape.backward(loss).expect("pretrain backward");
    let mut flat = Vec::new();
    for t in enc_tids.in_order() {
        flat.extend(grads.take(t).expect("encoder grad"));
    }
    let gx = grads.take(xi).expect("input grad");
    let gx = Tensor::from_vec(x.rows(), x.cols(), gx).expect("input grad shape");
    (value, flat, gx)
}

fn perturb_encoder(enc: &EncoderParams, u: &[f64], delta: f64) -> EncoderParams {
    let mut out = enc.clone();
    let mut off = 0;
    for t in out.tensors_mut() {
        let (_, t) = t;
        for v in t.data_mut() {
            *v += delta * u[off];
            off += 1;
        }
    }
    assert_eq!(off, u.len(), "direction length mismatch");
    out
}

/// Total loss of one case batch under fixed random draws, plus the gradient
/// with respect to the generator parameters (canonical tensor order). This is
/// the unit the optimizer steps on; split out so a finite-difference oracle
/// can probe the same computation.
fn batch_loss_and_grads(
    pg: &PromptGenerator,
    cases: &[&NodeCase],
    encs: &[EncoderParams],
    heads: &[PretrainHead],
) -> (f64, Tape, Vec<Tid>, Tid) {
    let bsz = cases.len();
    let d = pg.dim();
    let n_inits = encs.len();
    let syn_groups = Arc::new(Groups::from_lists(&[vec![1usize], vec![0usize]]));

    let mut tape = Tape::new();
    let tids = bind_generator(&mut tape, pg, true);
    let x_rows: Vec<Vec<f64>> = cases.iter().map(|c| c.features.row(c.target_row).to_vec()).collect();
    let x_batch = Tensor::from_rows(&x_rows).expect("batch features");
    let xi = tape.constant(&x_batch);
    let xp = pg_forward(&mut tape, &tids, xi).expect("generator forward");
    let xp_val = tape.value_tensor(xp);

    // Feature matching: mean_v ‖PG(x_v) − x̄_v‖².
    let xbar_rows: Vec<Vec<f64>> = cases.iter().map(|c| c.xbar.clone()).collect();
    let xbar = Tensor::from_rows(&xbar_rows).expect("neighbor means");
    let xb = tape.constant(&xbar);
    let diff = tape.sub(xp, xb).expect("feature residual");
    let sq = tape.sq_norm_rows(diff).expect("row norms");
    let tot = tape.sum(sq).expect("feature sum");
    let feat = tape.scale_const(tot, 1.0 / bsz as f64).expect("feature mean");
    let feat_value = tape.value(feat)[0];

    // Gradient matching: accumulate d L_grad / d x_p per case, then inject
    // through the generator with the pseudo-loss sum(Xp ⊙ Gx).
    let mut gx = Tensor::zeros(bsz, d);
    let mut grad_value = 0.0;
    let weight = 1.0 / (bsz as f64 * n_inits as f64);
    for (i, case) in cases.iter().enumerate() {
        let mut x_syn = Tensor::zeros(2, d);
        for (j, v) in x_rows[i].iter().enumerate() {
            x_syn.set(0, j, *v);
        }
        for j in 0..d {
            x_syn.set(1, j, xp_val.get(i, j));
        }
        for n in 0..n_inits {
            let (_, g_true, _) =
                class_grads(&encs[n], &heads[n], &case.features, &case.neighbors, case.target_row, case.label);
            let (_, g_syn, _) =
                class_grads(&encs[n], &heads[n], &x_syn, &syn_groups, 0, case.label);
            let l_vn: f64 = g_syn
                .iter()
                .zip(&g_true)
                .map(|(s, t)| (s - t) * (s - t))
                .sum();
            grad_value += l_vn * weight;
            let mut grad_x_at = |u: &[f64], delta: f64| -> Vec<f64> {
                let enc_p = perturb_encoder(&encs[n], u, delta);
                let (_, _, gxm) = class_grads(&enc_p, &heads[n], &x_syn, &syn_groups, 0, case.label);
                gxm.row(1).to_vec()
            };
            if let Some(gp) = grad_match_backward(&g_syn, &g_true, &mut grad_x_at) {
                for (j, v) in gp.iter().enumerate() {
                    gx.set(i, j, gx.get(i, j) + v * weight);
                }
            }
        }
    }
    let gx_tid = tape.constant(&gx);
    let prod = tape.mul(xp, gx_tid).expect("pseudo product");
    let pseudo = tape.sum(prod).expect("pseudo sum");
    let total = tape.add(feat, pseudo).expect("total loss");
    (feat_value + grad_value, tape, tids.in_order(), total)
}

/// Pretrain one client's generator on its train nodes: minimize feature
/// matching plus gradient matching, with the random encoder/head draws
/// resampled every epoch and one optimizer step per shuffled minibatch.
pub fn pretrain_generator(
    g: &Graph,
    train_nodes: &[usize],
    cfg: &PretrainConfig,
) -> Result<(PromptGenerator, PretrainReport), PretrainError> {
    if cfg.hops == 0 {
        return Err(PretrainError::Args("hops must be at least 1".into()));
    }
    if cfg.rand_inits == 0 {
        return Err(PretrainError::Args("rand_inits must be at least 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(PretrainError::Args("batch_size must be at least 1".into()));
    }
    let (cases, skipped) = build_cases(g, train_nodes, cfg.hops);
    if cases.is_empty() {
        return Err(PretrainError::NoTrainableNodes { hops: cfg.hops });
    }

    let mut pg = PromptGenerator::init(g.dim(), &mut stream(cfg.seed, "pg-init", &[cfg.client]));
    let refs: Vec<&Tensor> = pg.tensors().into_iter().map(|(_, t)| t).collect();
    let mut opt = Optimizer::for_tensors(&refs, cfg.lr);
    let mut report = PretrainReport { epoch_losses: Vec::new(), skipped_nodes: skipped };

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut encs = Vec::with_capacity(cfg.rand_inits);
        let mut heads = Vec::with_capacity(cfg.rand_inits);
        for n in 0..cfg.rand_inits {
            let mut r = stream(cfg.seed, "pg-rand", &[cfg.client, e, n as u64]);
            encs.push(EncoderParams::init(g.dim(), &mut r));
            heads.push(PretrainHead::init(g.n_classes(), &mut r));
        }
        let mut order: Vec<usize> = (0..cases.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut stream(cfg.seed, "pg-shuffle", &[cfg.client, e]));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&NodeCase> = chunk.iter().map(|&i| &cases[i]).collect();
            let (value, tape, tids, total) = batch_loss_and_grads(&pg, &batch, &encs, &heads);
            epoch_loss += value * batch.len() as f64;
            let mut grads = tape.backward(total).expect("pretrain step backward");
            let mut params = pg.tensors_mut();
            opt.apply(&mut params, &tids, &mut grads);
        }
        report.epoch_losses.push(epoch_loss / cases.len() as f64);
    }
    Ok((pg, report))
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Class-indexed bank of frozen, aggregated generators.
#[derive(Clone, Debug, PartialEq)]
pub struct PgBank {
    pub generators: Vec<PromptGenerator>,
}

impl PgBank {
    pub fn n_classes(&self) -> usize {
        self.generators.len()
    }

    pub fn generate(&self, class: usize, xhat: &[f64]) -> Vec<f64> {
        generate_prompt(&self.generators[class], xhat)
    }

    pub fn param_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for g in &self.generators {
            bytes.extend_from_slice(&g.param_hash().to_le_bytes());
        }
        fnv1a(&bytes)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (c, g) in self.generators.iter().enumerate() {
            for (name, t) in g.tensors() {
                out.push((format!("class{c}.{name}"), t.clone()));
            }
        }
        out
    }

    pub fn from_records(records: &[(String, Tensor)]) -> Option<PgBank> {
        if records.len() % 6 != 0 || records.is_empty() {
            return None;
        }
        let n_classes = records.len() / 6;
        let mut generators = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            let mut pg = PromptGenerator::zeros(1);
            let names = ["pg.w1", "pg.b1", "pg.w2", "pg.b2", "pg.w3", "pg.b3"];
            let mut found = Vec::new();
            for name in names {
                let full = format!("class{c}.{name}");
                let (_, t) = records.iter().find(|(n, _)| *n == full)?;
                found.push(t.clone());
            }
            pg.w1 = found[0].clone();
            pg.b1 = found[1].clone();
            pg.w2 = found[2].clone();
            pg.b2 = found[3].clone();
            pg.w3 = found[4].clone();
            pg.b3 = found[5].clone();
            pg.frozen = true;
            generators.push(pg);
        }
        Some(PgBank { generators })
    }
}

/// Rate-weighted aggregation: PG^c = Σ_k r_k^c θ_k / Σ_k r_k^c per class.
/// A class with zero total rate (absent everywhere) falls back to the
/// unweighted mean with a logged warning. Results are frozen.
pub fn aggregate_generators(generators: &[PromptGenerator], rates: &[Vec<f64>]) -> PgBank {
    assert_eq!(generators.len(), rates.len(), "one rate row per client");
    assert!(!generators.is_empty(), "nothing to aggregate");
    let n_classes = rates[0].len();
    assert!(rates.iter().all(|r| r.len() == n_classes), "ragged rate rows");
    let d = generators[0].dim();

    let mut bank = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let total: f64 = rates.iter().map(|r| r[c]).sum();
        let weights: Vec<f64> = if total == 0.0 {
            log::warn!("class {c} has zero rate on every client; using the unweighted mean generator");
            vec![1.0 / generators.len() as f64; generators.len()]
        } else {
            rates.iter().map(|r| r[c] / total).collect()
        };
        let mut agg = PromptGenerator::zeros(d);
        for (g, w) in generators.iter().zip(&weights) {
            for (dst, (_, src)) in agg.tensors_mut().into_iter().zip(g.tensors()) {
                for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
                    *a += w * b;
                }
            }
        }
        agg.frozen = true;
        bank.push(agg);
    }
    PgBank { generators: bank }
}
