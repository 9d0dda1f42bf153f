//! Graph partitioning and federated scenario construction.
//!
//! A scenario assigns every node of a source graph to one of `K` clients or a
//! held-out "new client" pool, optionally crops a uniform subset first (the
//! open-set variant), excises each client's rarest classes to create genuinely
//! missing classes, splits what remains into train/valid/test, and records the
//! h-hop expansion sets used by the unseen-node and missing-class evaluation
//! settings. Everything is driven by named seeded streams, so the same inputs
//! always produce the identical scenario.

use crate::graphio::Graph;
use crate::rng::stream;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("bad arguments: {0}")]
    Args(String),
    #[error("client {client} has a single present class ({class}); cannot excise a missing class")]
    SingleClass { client: usize, class: usize },
    #[error("client {client} is degenerate: {nodes} nodes for {classes} classes")]
    Degenerate { client: usize, nodes: usize, classes: usize },
    #[error("client {client} has no class-{class} training nodes satisfying the contributor mode")]
    ModeUnsatisfiable { client: usize, class: usize },
}

/// Balanced seeded region-growing partition into `parts` connected-ish pieces.
///
/// Seeds are chosen farthest-point style starting from the highest-degree
/// node; parts then grow round-robin, each claiming the unassigned frontier
/// node with the most neighbors already in that part. Ties everywhere break on
/// a seeded random priority, and a part whose frontier is exhausted claims the
/// lowest-priority unassigned node, so disconnected graphs still partition.
/// Sizes are balanced to within one node.
pub fn partition_graph(
    g: &Graph,
    parts: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, ScenarioError> {
    let n = g.n();
    if parts == 0 || parts > n {
        return Err(ScenarioError::Args(format!("cannot cut {n} nodes into {parts} parts")));
    }
    // Seeded tie-break priority: position in a random permutation.
    let mut priority: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = stream(seed, "partition-priority", &[]);
        priority.shuffle(&mut rng);
    }
    let mut prio = vec![0usize; n];
    for (rank, &v) in priority.iter().enumerate() {
        prio[v] = rank;
    }

    // Farthest-point seed selection, starting from the highest-degree node.
    let mut seeds = Vec::with_capacity(parts);
    let first = (0..n)
        .max_by(|&a, &b| {
            (g.degree(a), std::cmp::Reverse(prio[a])).cmp(&(g.degree(b), std::cmp::Reverse(prio[b])))
        })
        .expect("n > 0");
    seeds.push(first);
    while seeds.len() < parts {
        // Multi-source BFS distance from the current seed set.
        let mut dist = vec![usize::MAX; n];
        let mut q = VecDeque::new();
        for &s in &seeds {
            dist[s] = 0;
            q.push_back(s);
        }
        while let Some(v) = q.pop_front() {
            for &u in g.neighbors(v) {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    q.push_back(u);
                }
            }
        }
        let next = (0..n)
            .filter(|v| !seeds.contains(v))
            .max_by(|&a, &b| {
                (dist[a], std::cmp::Reverse(prio[a])).cmp(&(dist[b], std::cmp::Reverse(prio[b])))
            })
            .expect("parts <= n");
        seeds.push(next);
    }

    // Size quotas balanced to within one node.
    let base = n / parts;
    let extra = n % parts;
    let quota: Vec<usize> = (0..parts).map(|p| base + usize::from(p < extra)).collect();

    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut unassigned: BTreeSet<(usize, usize)> = (0..n).map(|v| (prio[v], v)).collect();
    // Per part: unassigned frontier node -> number of neighbors already claimed
    // by this part. BTreeMap keeps candidate scans deterministic by key.
    let mut frontier: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); parts];
    let mut sizes = vec![0usize; parts];

    let claim = |v: usize,
                     p: usize,
                     assigned: &mut Vec<Option<usize>>,
                     unassigned: &mut BTreeSet<(usize, usize)>,
                     frontier: &mut Vec<BTreeMap<usize, usize>>,
                     sizes: &mut Vec<usize>| {
        assigned[v] = Some(p);
        unassigned.remove(&(prio[v], v));
        for f in frontier.iter_mut() {
            f.remove(&v);
        }
        sizes[p] += 1;
        for &u in g.neighbors(v) {
            if assigned[u].is_none() {
                *frontier[p].entry(u).or_insert(0) += 1;
            }
        }
    };

    for (p, &s) in seeds.iter().enumerate() {
        claim(s, p, &mut assigned, &mut unassigned, &mut frontier, &mut sizes);
    }

    let mut remaining = n - parts;
    while remaining > 0 {
        for p in 0..parts {
            if remaining == 0 {
                break;
            }
            if sizes[p] >= quota[p] {
                continue;
            }
            // Most-attached frontier node; ties by low priority.
            let best = frontier[p]
                .iter()
                .max_by(|(&va, &ca), (&vb, &cb)| {
                    (ca, std::cmp::Reverse(prio[va])).cmp(&(cb, std::cmp::Reverse(prio[vb])))
                })
                .map(|(&v, _)| v);
            let v = match best {
                Some(v) => v,
                // Frontier exhausted (disconnected remainder): take the
                // lowest-priority unassigned node.
                None => unassigned.iter().next().expect("remaining > 0").1,
            };
            claim(v, p, &mut assigned, &mut unassigned, &mut frontier, &mut sizes);
            remaining -= 1;
        }
    }

    let mut out = vec![Vec::new(); parts];
    for v in 0..n {
        out[assigned[v].expect("all assigned")].push(v);
    }
    Ok(out)
}

/// Pick a client's missing classes: the smallest positive-count classes (ties
/// by class id), accumulating until at least `floor` nodes are covered. At
/// least one class is always selected and at least one present class is always
/// retained; a single-class client is an error.
pub fn select_missing_classes(
    counts: &[usize],
    floor: usize,
    client: usize,
) -> Result<Vec<usize>, ScenarioError> {
    let mut present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(ScenarioError::SingleClass { client, class: present.first().copied().unwrap_or(0) });
    }
    present.sort_by_key(|&c| (counts[c], c));
    let mut missing = Vec::new();
    let mut covered = 0;
    for (i, &c) in present.iter().enumerate() {
        // Never consume the last present class.
        if i + 1 == present.len() {
            break;
        }
        if !missing.is_empty() && covered >= floor {
            break;
        }
        missing.push(c);
        covered += counts[c];
    }
    if covered < floor {
        log::warn!(
            "client {client}: missing-class floor {floor} not reachable (covered {covered}); \
             keeping one class present"
        );
    }
    missing.sort_unstable();
    Ok(missing)
}

/// Largest-remainder apportionment of `n` into three buckets with the given
/// ratios; fractional ties are resolved in bucket order (train, valid, test).
pub fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut out = [0usize; 3];
    let mut fracs = [0.0f64; 3];
    let mut used = 0;
    for i in 0..3 {
        out[i] = quotas[i].floor() as usize;
        fracs[i] = quotas[i] - quotas[i].floor();
        used += out[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap().then(a.cmp(&b)));
    for i in 0..(n - used) {
        out[order[i % 3]] += 1;
    }
    out
}

/// One client's slice of a scenario. All node lists hold original graph ids,
/// sorted ascending.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ClientSplit {
    /// Retained local nodes (after missing-class excision) = train ∪ valid ∪ test.
    pub nodes: Vec<usize>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Classes excised from this client.
    pub missing_classes: Vec<usize>,
    /// Nodes removed because their class is missing; evaluation target of the
    /// missing-class setting.
    pub excised: Vec<usize>,
    /// Unseen evaluation pool: the excised nodes plus everything within h hops
    /// of the retained nodes (in the source graph) that is not retained.
    pub unseen: Vec<usize>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct FederatedScenario {
    pub clients: usize,
    pub hops: usize,
    pub open_set: bool,
    pub seed: u64,
    pub n_classes: usize,
    pub client_data: Vec<ClientSplit>,
    /// Held-out partition evaluated as a brand-new participant.
    pub new_client: Vec<usize>,
    /// Open-set nodes cropped before partitioning (empty when closed-set).
    pub cropped: Vec<usize>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    pub clients: usize,
    pub hops: usize,
    pub open_set: bool,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    /// Excise rarest classes until at least this many nodes are covered.
    pub min_missing_nodes: usize,
    pub seed: u64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            clients: 3,
            hops: 2,
            open_set: false,
            train_ratio: 0.4,
            valid_ratio: 0.3,
            min_missing_nodes: 5,
            seed: 0,
        }
    }
}

/// Seeded per-class stratified split with largest-remainder apportionment.
fn stratified_split(
    g: &Graph,
    nodes: &[usize],
    ratios: [f64; 3],
    seed: u64,
    client: usize,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &v in nodes {
        by_class.entry(g.label(v)).or_default().push(v);
    }
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (&class, members) in &mut by_class {
        let mut rng = stream(seed, "split", &[client as u64, class as u64]);
        members.shuffle(&mut rng);
        let [nt, nv, _] = largest_remainder(members.len(), ratios);
        train.extend_from_slice(&members[..nt]);
        valid.extend_from_slice(&members[nt..nt + nv]);
        test.extend_from_slice(&members[nt + nv..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    (train, valid, test)
}

fn class_counts(g: &Graph, nodes: &[usize]) -> Vec<usize> {
    let mut counts = vec![0usize; g.n_classes()];
    for &v in nodes {
        counts[g.label(v)] += 1;
    }
    counts
}

fn build_client_split(
    g: &Graph,
    part: &[usize],
    missing: Vec<usize>,
    ratios: [f64; 3],
    hops: usize,
    seed: u64,
    client: usize,
) -> ClientSplit {
    let missing_set: BTreeSet<usize> = missing.iter().copied().collect();
    let (mut retained, mut excised) = (Vec::new(), Vec::new());
    for &v in part {
        if missing_set.contains(&g.label(v)) {
            excised.push(v);
        } else {
            retained.push(v);
        }
    }
    retained.sort_unstable();
    excised.sort_unstable();
    let (train, valid, test) = stratified_split(g, &retained, ratios, seed, client);
    // Expansion runs over the full source graph, so re-attachable neighbors
    // outside the client (including cropped or other clients' nodes) count.
    let hop = g.hop_neighborhood(&retained, hops);
    let retained_set: BTreeSet<usize> = retained.iter().copied().collect();
    let mut unseen: BTreeSet<usize> = hop.into_iter().filter(|v| !retained_set.contains(v)).collect();
    unseen.extend(excised.iter().copied());
    ClientSplit {
        nodes: retained,
        train,
        valid,
        test,
        missing_classes: missing,
        excised,
        unseen: unseen.into_iter().collect(),
    }
}

pub fn build_scenario(g: &Graph, p: &ScenarioParams) -> Result<FederatedScenario, ScenarioError> {
    if p.clients == 0 {
        return Err(ScenarioError::Args("need at least one client".into()));
    }
    if !(p.train_ratio > 0.0 && p.valid_ratio > 0.0 && p.train_ratio + p.valid_ratio < 1.0) {
        return Err(ScenarioError::Args(format!(
            "ratios must be positive with train+valid < 1, got train={} valid={}",
            p.train_ratio, p.valid_ratio
        )));
    }
    let ratios = [p.train_ratio, p.valid_ratio, 1.0 - p.train_ratio - p.valid_ratio];

    // Open-set crop: a uniform fifth of the nodes never enters any client.
    let mut cropped: Vec<usize> = Vec::new();
    if p.open_set {
        use rand::seq::SliceRandom;
        let mut ids: Vec<usize> = (0..g.n()).collect();
        let mut rng = stream(p.seed, "open-set-crop", &[]);
        ids.shuffle(&mut rng);
        cropped = ids[..g.n() / 5].to_vec();
        cropped.sort_unstable();
    }
    let cropped_set: BTreeSet<usize> = cropped.iter().copied().collect();
    let work: Vec<usize> = (0..g.n()).filter(|v| !cropped_set.contains(v)).collect();

    // Partition the work subgraph into K client parts plus the new-client pool.
    let (work_graph, orig) = g.induced(&work);
    let parts_local = partition_graph(&work_graph, p.clients + 1, p.seed)?;
    let parts: Vec<Vec<usize>> = parts_local
        .iter()
        .map(|part| {
            let mut mapped: Vec<usize> = part.iter().map(|&v| orig[v]).collect();
            mapped.sort_unstable();
            mapped
        })
        .collect();

    let mut client_data = Vec::with_capacity(p.clients);
    for (k, part) in parts.iter().take(p.clients).enumerate() {
        if part.len() < g.n_classes() {
            return Err(ScenarioError::Degenerate {
                client: k,
                nodes: part.len(),
                classes: g.n_classes(),
            });
        }
        let counts = class_counts(g, part);
        let missing = select_missing_classes(&counts, p.min_missing_nodes, k)?;
        client_data.push(build_client_split(g, part, missing, ratios, p.hops, p.seed, k));
    }

    Ok(FederatedScenario {
        clients: p.clients,
        hops: p.hops,
        open_set: p.open_set,
        seed: p.seed,
        n_classes: g.n_classes(),
        client_data,
        new_client: parts[p.clients].clone(),
        cropped,
    })
}

/// Contributor data-quality modes for the reliability study.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReliabilityMode {
    /// Contributors train only on high-degree nodes (degree > lambda).
    HeadDegree,
    /// Contributors train only on low-degree nodes (degree <= lambda).
    TailDegree,
    /// Half high-degree, half low-degree.
    Balanced,
    /// Class-imbalance sweep: non-target class sizes shift with the ratio.
    Imbalance(i32),
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ReliabilityParams {
    pub clients: usize,
    pub lambda: usize,
    pub mode: ReliabilityMode,
    pub target_class: usize,
    pub hops: usize,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub seed: u64,
}

/// Build the contributor-reliability scenario: client 0 (the receiver) has the
/// target class excised entirely; the remaining clients contribute training
/// data filtered by the mode. Degree modes keep per-class counts identical
/// across head/tail/balanced (min of the head and tail pool sizes) so the
/// comparison isolates degree, not quantity. The imbalance mode keeps the
/// target class intact and scales every other class's count by
/// `n_target + (r/10) * min_other`, clamped to what is available.
pub fn build_reliability_scenario(
    g: &Graph,
    p: &ReliabilityParams,
) -> Result<FederatedScenario, ScenarioError> {
    use rand::seq::SliceRandom;
    if p.clients < 2 {
        return Err(ScenarioError::Args("reliability needs a receiver and at least one contributor".into()));
    }
    if p.target_class >= g.n_classes() {
        return Err(ScenarioError::Args(format!(
            "target class {} out of range for {} classes",
            p.target_class,
            g.n_classes()
        )));
    }
    if !(p.train_ratio > 0.0 && p.valid_ratio > 0.0 && p.train_ratio + p.valid_ratio < 1.0) {
        return Err(ScenarioError::Args("ratios must be positive with train+valid < 1".into()));
    }
    let ratios = [p.train_ratio, p.valid_ratio, 1.0 - p.train_ratio - p.valid_ratio];
    let parts = partition_graph(g, p.clients, p.seed)?;

    let mut client_data = Vec::with_capacity(p.clients);
    // Receiver: excise the target class wholesale.
    client_data.push(build_client_split(
        g,
        &parts[0],
        vec![p.target_class],
        ratios,
        p.hops,
        p.seed,
        0,
    ));

    for (k, part) in parts.iter().enumerate().skip(1) {
        let mut split = build_client_split(g, part, Vec::new(), ratios, p.hops, p.seed, k);
        // Filter the train split per mode, class by class.
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &v in &split.train {
            by_class.entry(g.label(v)).or_default().push(v);
        }
        let mut filtered = Vec::new();
        match p.mode {
            ReliabilityMode::HeadDegree | ReliabilityMode::TailDegree | ReliabilityMode::Balanced => {
                for (&class, members) in &by_class {
                    let mut head: Vec<usize> =
                        members.iter().copied().filter(|&v| g.degree(v) > p.lambda).collect();
                    let mut tail: Vec<usize> =
                        members.iter().copied().filter(|&v| g.degree(v) <= p.lambda).collect();
                    let keep = head.len().min(tail.len());
                    if keep == 0 && class == p.target_class {
                        return Err(ScenarioError::ModeUnsatisfiable { client: k, class });
                    }
                    let mut rng = stream(p.seed, "reliability-mode", &[k as u64, class as u64]);
                    head.shuffle(&mut rng);
                    tail.shuffle(&mut rng);
                    match p.mode {
                        ReliabilityMode::HeadDegree => filtered.extend_from_slice(&head[..keep]),
                        ReliabilityMode::TailDegree => filtered.extend_from_slice(&tail[..keep]),
                        ReliabilityMode::Balanced => {
                            let h = keep.div_ceil(2);
                            filtered.extend_from_slice(&head[..h]);
                            filtered.extend_from_slice(&tail[..keep - h]);
                        }
                        ReliabilityMode::Imbalance(_) => unreachable!(),
                    }
                }
            }
            ReliabilityMode::Imbalance(r) => {
                if !(-5..=5).contains(&r) {
                    return Err(ScenarioError::Args(format!(
                        "imbalance ratio must lie in [-5, 5], got {r}"
                    )));
                }
                let n_target = by_class.get(&p.target_class).map_or(0, Vec::len);
                if n_target == 0 {
                    return Err(ScenarioError::ModeUnsatisfiable { client: k, class: p.target_class });
                }
                let min_other = by_class
                    .iter()
                    .filter(|(&c, _)| c != p.target_class)
                    .map(|(_, m)| m.len())
                    .min()
                    .unwrap_or(0);
                for (&class, members) in &mut by_class {
                    if class == p.target_class {
                        filtered.extend_from_slice(members);
                        continue;
                    }
                    let shifted =
                        n_target as f64 + (r as f64 / 10.0) * min_other as f64;
                    let keep = (shifted.round().max(0.0) as usize).min(members.len());
                    let mut rng = stream(p.seed, "reliability-imb", &[k as u64, class as u64]);
                    members.shuffle(&mut rng);
                    filtered.extend_from_slice(&members[..keep]);
                }
            }
        }
        filtered.sort_unstable();
        split.train = filtered;
        client_data.push(split);
    }

    Ok(FederatedScenario {
        clients: p.clients,
        hops: p.hops,
        open_set: false,
        seed: p.seed,
        n_classes: g.n_classes(),
        client_data,
        new_client: Vec::new(),
        cropped: Vec::new(),
    })
}
