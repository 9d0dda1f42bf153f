//! The local model: a two-layer GraphSAGE encoder shared by everything, two
//! prototypical classifier branches (head-degree and tail-degree) over
//! learnable synthetic node banks, degree-weighted branch merging, and the
//! fitting losses. Also the plain encoder+linear baseline model.
//!
//! The classifier forward pass is written matrix-wise: for `n` targets and
//! `P = |C|·s` prototypes the per-pair message inputs live in an `(n·P)×64`
//! block built by one fused expand op, never materializing `(n·P)×129`
//! concatenations. The transform output is a scalar per pair, so the
//! translation step collapses to `t' = (1/P)(rowsum(S)⊙h − S·protos)`.

use crate::tensor::{Groups, Tape, Tensor, TensorError, Tid};
use std::sync::Arc;

pub const HIDDEN_DIM: usize = 128;
pub const EMBED_DIM: usize = 64;
pub const DROPOUT_P: f64 = 0.5;

/// Uniform ±1/√fan_in init for one weight or bias tensor.
pub(crate) fn fan_in_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl rand::Rng) -> Tensor {
    Tensor::rand_uniform(rows, cols, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Two SAGE layers: d -> 128 (ReLU, dropout between layers) -> 64 (identity).
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub w1_self: Tensor,
    pub w1_neigh: Tensor,
    pub b1: Tensor,
    pub w2_self: Tensor,
    pub w2_neigh: Tensor,
    pub b2: Tensor,
}

impl EncoderParams {
    pub fn init(d: usize, rng: &mut impl rand::Rng) -> Self {
        EncoderParams {
            w1_self: fan_in_init(d, HIDDEN_DIM, d, rng),
            w1_neigh: fan_in_init(d, HIDDEN_DIM, d, rng),
            b1: fan_in_init(1, HIDDEN_DIM, d, rng),
            w2_self: fan_in_init(HIDDEN_DIM, EMBED_DIM, HIDDEN_DIM, rng),
            w2_neigh: fan_in_init(HIDDEN_DIM, EMBED_DIM, HIDDEN_DIM, rng),
            b2: fan_in_init(1, EMBED_DIM, HIDDEN_DIM, rng),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc.w1_self", &self.w1_self),
            ("enc.w1_neigh", &self.w1_neigh),
            ("enc.b1", &self.b1),
            ("enc.w2_self", &self.w2_self),
            ("enc.w2_neigh", &self.w2_neigh),
            ("enc.b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("enc.w1_self", &mut self.w1_self),
            ("enc.w1_neigh", &mut self.w1_neigh),
            ("enc.b1", &mut self.b1),
            ("enc.w2_self", &mut self.w2_self),
            ("enc.w2_neigh", &mut self.w2_neigh),
            ("enc.b2", &mut self.b2),
        ]
    }
}

/// One classifier branch: message MLP (129 -> 64 -> 64, SiLU after each
/// layer) and transform MLP (64 -> 64 -> 64 -> 1, SiLU after the first layer
/// only). The message layer 1 is stored split: `msg_w1` holds the 128 rows
/// acting on [h ‖ n] and `msg_w1_dist` the single row acting on the appended
/// squared-distance feature — together they are one 129-input linear map.
#[derive(Clone, Debug)]
pub struct BranchClassifier {
    pub msg_w1: Tensor,
    pub msg_w1_dist: Tensor,
    pub msg_b1: Tensor,
    pub msg_w2: Tensor,
    pub msg_b2: Tensor,
    pub trans_w1: Tensor,
    pub trans_b1: Tensor,
    pub trans_w2: Tensor,
    pub trans_b2: Tensor,
    pub trans_w3: Tensor,
    pub trans_b3: Tensor,
}

impl BranchClassifier {
    pub fn init(rng: &mut impl rand::Rng) -> Self {
        let msg_in = 2 * EMBED_DIM + 1;
        BranchClassifier {
            msg_w1: fan_in_init(2 * EMBED_DIM, EMBED_DIM, msg_in, rng),
            msg_w1_dist: fan_in_init(1, EMBED_DIM, msg_in, rng),
            msg_b1: fan_in_init(1, EMBED_DIM, msg_in, rng),
            msg_w2: fan_in_init(EMBED_DIM, EMBED_DIM, EMBED_DIM, rng),
            msg_b2: fan_in_init(1, EMBED_DIM, EMBED_DIM, rng),
            trans_w1: fan_in_init(EMBED_DIM, EMBED_DIM, EMBED_DIM, rng),
            trans_b1: fan_in_init(1, EMBED_DIM, EMBED_DIM, rng),
            trans_w2: fan_in_init(EMBED_DIM, EMBED_DIM, EMBED_DIM, rng),
            trans_b2: fan_in_init(1, EMBED_DIM, EMBED_DIM, rng),
            trans_w3: fan_in_init(EMBED_DIM, 1, EMBED_DIM, rng),
            trans_b3: fan_in_init(1, 1, EMBED_DIM, rng),
        }
    }

    fn tensors_with_prefix(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        [
            ("msg_w1", &self.msg_w1),
            ("msg_w1_dist", &self.msg_w1_dist),
            ("msg_b1", &self.msg_b1),
            ("msg_w2", &self.msg_w2),
            ("msg_b2", &self.msg_b2),
            ("trans_w1", &self.trans_w1),
            ("trans_b1", &self.trans_b1),
            ("trans_w2", &self.trans_w2),
            ("trans_b2", &self.trans_b2),
            ("trans_w3", &self.trans_w3),
            ("trans_b3", &self.trans_b3),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.msg_w1,
            &mut self.msg_w1_dist,
            &mut self.msg_b1,
            &mut self.msg_w2,
            &mut self.msg_b2,
            &mut self.trans_w1,
            &mut self.trans_b1,
            &mut self.trans_w2,
            &mut self.trans_b2,
            &mut self.trans_w3,
            &mut self.trans_b3,
        ]
    }
}

/// Learnable synthetic nodes: s rows per class, class-major layout
/// (rows [c·s, (c+1)·s) carry class c).
#[derive(Clone, Debug)]
pub struct SyntheticNodeBank {
    pub features: Tensor,
    pub s: usize,
    pub n_classes: usize,
}

impl SyntheticNodeBank {
    pub fn init(n_classes: usize, s: usize, d: usize, rng: &mut impl rand::Rng) -> Self {
        SyntheticNodeBank { features: Tensor::randn(n_classes * s, d, 0.1, rng), s, n_classes }
    }

    pub fn rows(&self) -> usize {
        self.n_classes * self.s
    }

    pub fn label(&self, row: usize) -> usize {
        row / self.s
    }

    pub fn class_rows(&self, c: usize) -> std::ops::Range<usize> {
        c * self.s..(c + 1) * self.s
    }

    /// Row groups per class, for class-mean prototype computation.
    pub fn class_groups(&self) -> Groups {
        let lists: Vec<Vec<usize>> =
            (0..self.n_classes).map(|c| self.class_rows(c).collect()).collect();
        Groups::from_lists(&lists)
    }

    /// Edgeless neighbor structure: every synthetic node is isolated.
    pub fn edgeless_groups(&self) -> Groups {
        Groups::from_lists(&vec![Vec::<usize>::new(); self.rows()])
    }
}

/// Everything one client trains. The tensor layout (see [`LocalModel::tensors`])
/// is canonical: encoder, head classifier, tail classifier, head bank, tail
/// bank — averaging, checkpoints and byte accounting all rely on it.
#[derive(Clone, Debug)]
pub struct LocalModel {
    pub encoder: EncoderParams,
    pub head_cls: BranchClassifier,
    pub tail_cls: BranchClassifier,
    pub head_bank: SyntheticNodeBank,
    pub tail_bank: SyntheticNodeBank,
    /// Class-wise adaptive scaling factor, in [0,1] per class.
    pub gamma: Vec<f64>,
    /// Class rates of this client's train split.
    pub rates: Vec<f64>,
}

impl LocalModel {
    /// Fresh model: shared parts from `shared_rng` (the server draw), banks
    /// from `bank_rng` (client-local draw).
    pub fn init(
        d: usize,
        n_classes: usize,
        s: usize,
        shared_rng: &mut impl rand::Rng,
        bank_rng: &mut impl rand::Rng,
    ) -> Self {
        LocalModel {
            encoder: EncoderParams::init(d, shared_rng),
            head_cls: BranchClassifier::init(shared_rng),
            tail_cls: BranchClassifier::init(shared_rng),
            head_bank: SyntheticNodeBank::init(n_classes, s, d, bank_rng),
            tail_bank: SyntheticNodeBank::init(n_classes, s, d, bank_rng),
            gamma: vec![0.0; n_classes],
            rates: vec![0.0; n_classes],
        }
    }

    /// All trainable tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.encoder.tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        out.extend(self.head_cls.tensors_with_prefix("head"));
        out.extend(self.tail_cls.tensors_with_prefix("tail"));
        out.push(("head_bank".to_string(), &self.head_bank.features));
        out.push(("tail_bank".to_string(), &self.tail_bank.features));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            self.encoder.tensors_mut().into_iter().map(|(_, t)| t).collect();
        out.extend(self.head_cls.tensors_mut());
        out.extend(self.tail_cls.tensors_mut());
        out.push(&mut self.head_bank.features);
        out.push(&mut self.tail_bank.features);
        out
    }

    /// Number of tensors that belong to the shared parameter vector φ
    /// (encoder + both classifiers; banks are client-private).
    pub fn shared_tensor_count() -> usize {
        6 + 11 + 11
    }

    /// Shared parameter count |φ|, for the communication ledger.
    pub fn shared_param_count(&self) -> u64 {
        self.tensors()
            .iter()
            .take(Self::shared_tensor_count())
            .map(|(_, t)| t.len() as u64)
            .sum()
    }
}

/// Degree-weighted branch mix: α = sigmoid(deg − (λ+1)), one value per node.
pub fn alpha_from_degrees(degrees: &[usize], lambda: usize) -> Tensor {
    let mut t = Tensor::zeros(degrees.len(), 1);
    for (i, &deg) in degrees.iter().enumerate() {
        let z = deg as f64 - (lambda as f64 + 1.0);
        t.set(i, 0, 1.0 / (1.0 + (-z).exp()));
    }
    t
}

/// Fixed α for synthetic 2-node graphs.
pub fn alpha_fixed(n: usize, alpha: f64) -> Tensor {
    let mut t = Tensor::zeros(n, 1);
    for i in 0..n {
        t.set(i, 0, alpha);
    }
    t
}

/// Train/eval switch for dropout inside the encoder.
pub enum EmbedMode<'a> {
    Train(&'a mut rand_chacha::ChaCha8Rng),
    Eval,
}

/// Tape handles for one encoder.
#[derive(Clone, Copy)]
pub struct EncoderTids {
    pub w1_self: Tid,
    pub w1_neigh: Tid,
    pub b1: Tid,
    pub w2_self: Tid,
    pub w2_neigh: Tid,
    pub b2: Tid,
}

pub fn bind_encoder(tape: &mut Tape, enc: &EncoderParams, trainable: bool) -> EncoderTids {
    let mut put = |t: &Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
    EncoderTids {
        w1_self: put(&enc.w1_self),
        w1_neigh: put(&enc.w1_neigh),
        b1: put(&enc.b1),
        w2_self: put(&enc.w2_self),
        w2_neigh: put(&enc.w2_neigh),
        b2: put(&enc.b2),
    }
}

impl EncoderTids {
    pub fn in_order(&self) -> Vec<Tid> {
        vec![self.w1_self, self.w1_neigh, self.b1, self.w2_self, self.w2_neigh, self.b2]
    }
}

#[derive(Clone, Copy)]
pub struct ClassifierTids {
    pub msg_w1: Tid,
    pub msg_w1_dist: Tid,
    pub msg_b1: Tid,
    pub msg_w2: Tid,
    pub msg_b2: Tid,
    pub trans_w1: Tid,
    pub trans_b1: Tid,
    pub trans_w2: Tid,
    pub trans_b2: Tid,
    pub trans_w3: Tid,
    pub trans_b3: Tid,
}

pub fn bind_classifier(tape: &mut Tape, cls: &BranchClassifier, trainable: bool) -> ClassifierTids {
    let mut put = |t: &Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
    ClassifierTids {
        msg_w1: put(&cls.msg_w1),
        msg_w1_dist: put(&cls.msg_w1_dist),
        msg_b1: put(&cls.msg_b1),
        msg_w2: put(&cls.msg_w2),
        msg_b2: put(&cls.msg_b2),
        trans_w1: put(&cls.trans_w1),
        trans_b1: put(&cls.trans_b1),
        trans_w2: put(&cls.trans_w2),
        trans_b2: put(&cls.trans_b2),
        trans_w3: put(&cls.trans_w3),
        trans_b3: put(&cls.trans_b3),
    }
}

impl ClassifierTids {
    pub fn in_order(&self) -> Vec<Tid> {
        vec![
            self.msg_w1,
            self.msg_w1_dist,
            self.msg_b1,
            self.msg_w2,
            self.msg_b2,
            self.trans_w1,
            self.trans_b1,
            self.trans_w2,
            self.trans_b2,
            self.trans_w3,
            self.trans_b3,
        ]
    }
}

/// Tape handles for a full local model, in canonical tensor order.
pub struct ModelTids {
    pub enc: EncoderTids,
    pub head: ClassifierTids,
    pub tail: ClassifierTids,
    pub head_bank: Tid,
    pub tail_bank: Tid,
}

pub fn bind_model(tape: &mut Tape, m: &LocalModel, trainable: bool) -> ModelTids {
    let enc = bind_encoder(tape, &m.encoder, trainable);
    let head = bind_classifier(tape, &m.head_cls, trainable);
    let tail = bind_classifier(tape, &m.tail_cls, trainable);
    let head_bank =
        if trainable { tape.leaf(&m.head_bank.features) } else { tape.constant(&m.head_bank.features) };
    let tail_bank =
        if trainable { tape.leaf(&m.tail_bank.features) } else { tape.constant(&m.tail_bank.features) };
    ModelTids { enc, head, tail, head_bank, tail_bank }
}

impl ModelTids {
    /// Tids aligned with [`LocalModel::tensors_mut`] for gradient zipping.
    pub fn in_order(&self) -> Vec<Tid> {
        let mut out = self.enc.in_order();
        out.extend(self.head.in_order());
        out.extend(self.tail.in_order());
        out.push(self.head_bank);
        out.push(self.tail_bank);
        out
    }
}

/// Two SAGE layers over a node feature matrix: per layer
/// `act(x·W_self + mean_neighbors(x)·W_neigh + b)`, ReLU then identity, with
/// inverted dropout between the layers in train mode. An empty neighborhood
/// contributes a zero mean, which is how edgeless synthetic banks embed.
pub fn sage_embed(
    tape: &mut Tape,
    enc: &EncoderTids,
    x: Tid,
    neighbors: &Arc<Groups>,
    mode: &mut EmbedMode,
) -> Result<Tid, TensorError> {
    let nm1 = tape.group_mean_rows(x, neighbors.clone())?;
    let self1 = tape.matmul(x, enc.w1_self)?;
    let nbr1 = tape.matmul(nm1, enc.w1_neigh)?;
    let pre1 = tape.add(self1, nbr1)?;
    let pre1 = tape.add_row(pre1, enc.b1)?;
    let mut h1 = tape.relu(pre1)?;
    if let EmbedMode::Train(rng) = mode {
        h1 = tape.dropout(h1, DROPOUT_P, *rng)?;
    }
    let nm2 = tape.group_mean_rows(h1, neighbors.clone())?;
    let self2 = tape.matmul(h1, enc.w2_self)?;
    let nbr2 = tape.matmul(nm2, enc.w2_neigh)?;
    let pre2 = tape.add(self2, nbr2)?;
    tape.add_row(pre2, enc.b2)
}

/// Pairwise squared Euclidean distances between the rows of `a` (n×k) and the
/// rows of `b` (m×k): ‖a_i‖² + ‖b_j‖² − 2·a_i·b_j, as an n×m matrix.
fn pairwise_sq_dists(tape: &mut Tape, a: Tid, b: Tid) -> Result<Tid, TensorError> {
    let cross = tape.matmul_bt(a, b)?;
    let scaled = tape.scale_const(cross, -2.0)?;
    let sq_a = tape.sq_norm_rows(a)?;
    let sq_b = tape.sq_norm_rows(b)?;
    let m = tape.rows(b);
    let sq_b_row = tape.reshape(sq_b, 1, m)?;
    let with_b = tape.add_row(scaled, sq_b_row)?;
    tape.add_col(with_b, sq_a)
}

/// One classifier branch: returns class probabilities (n×C).
///
/// For every (target i, prototype j) pair: d_ij = ‖[h_i‖n_i] − [p_j‖p_j]‖²,
/// m_ij = MLP_msg([h_i‖n_i‖d_ij]), scalar s_ij = MLP_trans(m_ij),
/// t'_i = mean_j s_ij·(h_i − p_j), h'_i = h_i + t'_i, and
/// p_i(c) = softmax_c(−‖h'_i − h̄_c‖²) over class-mean prototypes h̄_c.
pub fn branch_forward(
    tape: &mut Tape,
    cls: &ClassifierTids,
    h_t: Tid,
    n_t: Tid,
    protos: Tid,
    class_groups: &Arc<Groups>,
) -> Result<Tid, TensorError> {
    let n = tape.rows(h_t);
    let p = tape.rows(protos);

    let hn = tape.concat_cols(h_t, n_t)?; // n×128
    let pp = tape.concat_cols(protos, protos)?; // P×128
    let dists = pairwise_sq_dists(tape, hn, pp)?; // n×P

    // Message layer 1, with the 129th (distance) input fused in:
    // row (i,j) = [h_i‖n_i]·W + b + d_ij·w_dist, then SiLU.
    let base = tape.matmul(hn, cls.msg_w1)?;
    let base = tape.add_row(base, cls.msg_b1)?;
    let expanded = tape.expand_add_scale(base, dists, cls.msg_w1_dist)?; // (n·P)×64
    let m1 = tape.silu(expanded)?;
    let m2 = tape.matmul(m1, cls.msg_w2)?;
    let m2 = tape.add_row(m2, cls.msg_b2)?;
    let msg = tape.silu(m2)?;

    // Transform MLP down to one scalar per pair.
    let t1 = tape.matmul(msg, cls.trans_w1)?;
    let t1 = tape.add_row(t1, cls.trans_b1)?;
    let t1 = tape.silu(t1)?;
    let t2 = tape.matmul(t1, cls.trans_w2)?;
    let t2 = tape.add_row(t2, cls.trans_b2)?;
    let t3 = tape.matmul(t2, cls.trans_w3)?;
    let t3 = tape.add_row(t3, cls.trans_b3)?; // (n·P)×1
    let scalars = tape.reshape(t3, n, p)?; // n×P

    // t'_i = (1/P)(Σ_j s_ij·h_i − Σ_j s_ij·p_j)
    let row_sums = tape.row_sum(scalars)?; // n×1
    let h_scaled = tape.scale_rows(h_t, row_sums)?;
    let proto_mix = tape.matmul(scalars, protos)?;
    let t_diff = tape.sub(h_scaled, proto_mix)?;
    let t_prime = tape.scale_const(t_diff, 1.0 / p as f64)?;
    let h_prime = tape.add(h_t, t_prime)?;

    // Class probabilities from squared distances to class-mean prototypes.
    let class_means = tape.group_mean_rows(protos, class_groups.clone())?; // C×64
    let class_d = pairwise_sq_dists(tape, h_prime, class_means)?; // n×C
    let neg = tape.scale_const(class_d, -1.0)?;
    tape.softmax(neg)
}

/// Inputs shared by every forward pass over one graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    /// All node features of the (local or expanded) graph.
    pub features: Tensor,
    /// Neighbor lists of all nodes.
    pub neighbors: Arc<Groups>,
    /// Rows of `features` being classified.
    pub targets: Arc<Vec<usize>>,
    /// Neighbor lists of just the targets (indices into the feature rows).
    pub target_neighbors: Arc<Groups>,
    /// Per-target branch mix α (degree-based or fixed).
    pub alpha: Tensor,
    /// Per-target ground-truth labels.
    pub labels: Arc<Vec<usize>>,
}

impl GraphBatch {
    /// Assemble a batch from a graph and a target node list (local ids).
    pub fn from_graph(g: &crate::graphio::Graph, targets: &[usize], lambda: usize) -> Self {
        let target_nbrs: Vec<&[usize]> = targets.iter().map(|&v| g.neighbors(v)).collect();
        let degrees: Vec<usize> = targets.iter().map(|&v| g.degree(v)).collect();
        let labels: Vec<usize> = targets.iter().map(|&v| g.label(v)).collect();
        GraphBatch {
            features: g.features().clone(),
            neighbors: Arc::new(g.neighbor_groups()),
            targets: Arc::new(targets.to_vec()),
            target_neighbors: Arc::new(Groups::from_lists(&target_nbrs)),
            alpha: alpha_from_degrees(&degrees, lambda),
            labels: Arc::new(labels),
        }
    }
}

/// Full dual-branch forward pass: merged class probabilities for the batch
/// targets (n×C).
pub fn dual_branch_probs(
    tape: &mut Tape,
    tids: &ModelTids,
    batch: &GraphBatch,
    class_groups: &Arc<Groups>,
    bank_edgeless: &Arc<Groups>,
    mode: &mut EmbedMode,
) -> Result<Tid, TensorError> {
    let x = tape.constant(&batch.features);
    let h_all = sage_embed(tape, &tids.enc, x, &batch.neighbors, mode)?;
    let h_t = tape.gather_rows(h_all, batch.targets.clone())?;
    let n_t = tape.group_mean_rows(h_all, batch.target_neighbors.clone())?;

    let head_protos = sage_embed(tape, &tids.enc, tids.head_bank, bank_edgeless, mode)?;
    let tail_protos = sage_embed(tape, &tids.enc, tids.tail_bank, bank_edgeless, mode)?;

    let p_head = branch_forward(tape, &tids.head, h_t, n_t, head_protos, class_groups)?;
    let p_tail = branch_forward(tape, &tids.tail, h_t, n_t, tail_protos, class_groups)?;

    let alpha = tape.constant(&batch.alpha);
    let one = tape.constant(&alpha_fixed(batch.alpha.rows(), 1.0));
    let inv_alpha = tape.sub(one, alpha)?;
    let head_part = tape.scale_rows(p_head, alpha)?;
    let tail_part = tape.scale_rows(p_tail, inv_alpha)?;
    tape.add(head_part, tail_part)
}

/// Σ_v −log p_v[y_v] over the batch.
pub fn class_nll(tape: &mut Tape, probs: Tid, labels: Arc<Vec<usize>>) -> Result<Tid, TensorError> {
    let picked = tape.gather_per_row(probs, labels)?;
    let logp = tape.log(picked)?;
    let total = tape.sum(logp)?;
    tape.scale_const(total, -1.0)
}

/// β · Σ row-L2-norms over both synthetic banks.
pub fn bank_norm_penalty(
    tape: &mut Tape,
    tids: &ModelTids,
    beta: f64,
) -> Result<Tid, TensorError> {
    let nh = tape.norm_rows(tids.head_bank)?;
    let nt = tape.norm_rows(tids.tail_bank)?;
    let sh = tape.sum(nh)?;
    let st = tape.sum(nt)?;
    let s = tape.add(sh, st)?;
    tape.scale_const(s, beta)
}

/// Argmax class per row of a probability matrix.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Baseline model: the same encoder with a plain linear classification head.
#[derive(Clone, Debug)]
pub struct StdModel {
    pub encoder: EncoderParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl StdModel {
    pub fn init(d: usize, n_classes: usize, rng: &mut impl rand::Rng) -> Self {
        StdModel {
            encoder: EncoderParams::init(d, rng),
            head_w: fan_in_init(EMBED_DIM, n_classes, EMBED_DIM, rng),
            head_b: fan_in_init(1, n_classes, EMBED_DIM, rng),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.encoder.tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            self.encoder.tensors_mut().into_iter().map(|(_, t)| t).collect();
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|(_, t)| t.len() as u64).sum()
    }
}

pub struct StdTids {
    pub enc: EncoderTids,
    pub head_w: Tid,
    pub head_b: Tid,
}

pub fn bind_std(tape: &mut Tape, m: &StdModel, trainable: bool) -> StdTids {
    let enc = bind_encoder(tape, &m.encoder, trainable);
    let (head_w, head_b) = if trainable {
        (tape.leaf(&m.head_w), tape.leaf(&m.head_b))
    } else {
        (tape.constant(&m.head_w), tape.constant(&m.head_b))
    };
    StdTids { enc, head_w, head_b }
}

impl StdTids {
    pub fn in_order(&self) -> Vec<Tid> {
        let mut out = self.enc.in_order();
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Baseline forward: softmax(linear(sage_embed(targets))).
pub fn std_probs(
    tape: &mut Tape,
    tids: &StdTids,
    batch: &GraphBatch,
    mode: &mut EmbedMode,
) -> Result<Tid, TensorError> {
    let x = tape.constant(&batch.features);
    let h_all = sage_embed(tape, &tids.enc, x, &batch.neighbors, mode)?;
    let h_t = tape.gather_rows(h_all, batch.targets.clone())?;
    let logits = tape.matmul(h_t, tids.head_w)?;
    let logits = tape.add_row(logits, tids.head_b)?;
    tape.softmax(logits)
}
