//! Training objectives, data splits and negative sampling.

use std::collections::HashSet;
use std::rc::Rc;

use log::warn;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{geo, Tape, Unary, Var};
use crate::encoders::GraphContext;
use crate::error::{HrcbError, Result};
use crate::manifold::{EmbeddingTable, Space};
use crate::metrics;
use crate::treegen::{Graph, Hierarchy, MixedGraph};

pub const HR_NEGATIVES: usize = 10;
/// Fermi-Dirac radius and temperature.
pub const FD_R: f64 = 2.0;
pub const FD_T: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Gd,
    Hr,
    Fd,
    Lr,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Gd, Objective::Hr, Objective::Fd, Objective::Lr];

    pub fn tag(self) -> &'static str {
        match self {
            Objective::Gd => "gd",
            Objective::Hr => "hr",
            Objective::Fd => "fd",
            Objective::Lr => "lr",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Objective::Gd => 0x6764,
            Objective::Hr => 0x6872,
            Objective::Fd => 0x6664,
            Objective::Lr => 0x6c72,
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = HrcbError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gd" => Ok(Objective::Gd),
            "hr" => Ok(Objective::Hr),
            "fd" => Ok(Objective::Fd),
            "lr" => Ok(Objective::Lr),
            _ => Err(HrcbError::invalid(format!("unknown objective `{s}`"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Dev,
    Test,
}

/// A graph to train on plus the hierarchies its embedding is scored against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub graph: Graph,
    pub ctx: GraphContext,
    pub labels: Option<Vec<Option<usize>>>,
    pub num_classes: usize,
    /// Each hierarchy with the graph node of every tree node.
    pub eval: Vec<(Hierarchy, Vec<usize>)>,
}

impl Dataset {
    pub fn from_hierarchy(name: impl Into<String>, h: &Hierarchy) -> Self {
        let graph = h.graph();
        Dataset {
            name: name.into(),
            ctx: GraphContext::new(&graph),
            graph,
            labels: h.labels().map(|l| l.to_vec()),
            num_classes: h.num_classes(),
            eval: vec![(h.clone(), (0..h.len()).collect())],
        }
    }

    /// Labels of a mixed graph are its source-tree tags; merged nodes are unlabelled.
    pub fn from_mixed(name: impl Into<String>, m: &MixedGraph) -> Self {
        Dataset {
            name: name.into(),
            ctx: GraphContext::new(&m.graph),
            graph: m.graph.clone(),
            labels: Some(m.tags.clone()),
            num_classes: m.overlays.len(),
            eval: m.overlays.iter().map(|o| (o.tree.clone(), o.node_map.clone())).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }
}

/// Positive edges split three ways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSplit {
    pub train: Vec<(usize, usize)>,
    pub dev: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// `(train, dev, test)` sizes: dev and test are floored shares, train takes the rest.
fn partition_sizes(n: usize, ratios: (usize, usize, usize)) -> (usize, usize, usize) {
    let s = ratios.0 + ratios.1 + ratios.2;
    let dev = n * ratios.1 / s;
    let test = n * ratios.2 / s;
    (n - dev - test, dev, test)
}

pub fn split_edges(edges: &[(usize, usize)], ratios: (usize, usize, usize), seed: u64) -> Result<EdgeSplit> {
    if edges.is_empty() {
        return Err(HrcbError::invalid("no edges to split"));
    }
    let mut e = edges.to_vec();
    e.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (_, nd, nt) = partition_sizes(e.len(), ratios);
    let dev = e[..nd].to_vec();
    let test = e[nd..nd + nt].to_vec();
    let train = e[nd + nt..].to_vec();
    Ok(EdgeSplit { train, dev, test, seed })
}

/// Per-class stratified split of the labelled nodes.
pub fn split_nodes(labels: &[Option<usize>], ratios: (usize, usize, usize), seed: u64) -> Result<NodeSplit> {
    let nc = labels.iter().flatten().map(|c| c + 1).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..nc {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&v| labels[v] == Some(c)).collect();
        members.shuffle(&mut rng);
        let (ntr, nd, _) = partition_sizes(members.len(), ratios);
        if ntr == 0 {
            return Err(HrcbError::invalid(format!("class {c} has too few labelled nodes")));
        }
        dev.extend_from_slice(&members[..nd]);
        test.extend_from_slice(&members[nd..members.len() - ntr]);
        train.extend_from_slice(&members[members.len() - ntr..]);
    }
    if train.is_empty() {
        return Err(HrcbError::invalid("no labelled nodes"));
    }
    Ok(NodeSplit { train, dev, test, seed })
}

/// Unlabelled split of all `n` nodes.
pub fn split_all_nodes(n: usize, ratios: (usize, usize, usize), seed: u64) -> NodeSplit {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (_, nd, nt) = partition_sizes(n, ratios);
    NodeSplit { dev: v[..nd].to_vec(), test: v[nd..nd + nt].to_vec(), train: v[nd + nt..].to_vec(), seed }
}

/// Seed for an objective's sampling stream at a given epoch.
pub fn epoch_seed(base: u64, objective: Objective, epoch: u64) -> u64 {
    let mut z = base ^ objective.stream().rotate_left(32) ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `u` followed by its positive `v` and `HR_NEGATIVES` non-neighbours of `u`.
pub fn sample_hr_groups<R: Rng>(g: &Graph, positives: &[(usize, usize)], rng: &mut R) -> Vec<Vec<usize>> {
    let n = g.n();
    let mut warned = false;
    positives
        .iter()
        .map(|&(u, v)| {
            let avail = n - 1 - g.neighbors(u).len();
            let mut group = vec![u, v];
            if avail >= HR_NEGATIVES {
                let mut seen = HashSet::new();
                while group.len() < HR_NEGATIVES + 2 {
                    let w = rng.random_range(0..n);
                    if w != u && !g.has_edge(u, w) && seen.insert(w) {
                        group.push(w);
                    }
                }
            } else {
                if !warned {
                    warn!("node {u} has only {avail} non-neighbours; sampling negatives with replacement");
                    warned = true;
                }
                let pool: Vec<usize> = (0..n).filter(|&w| w != u && !g.has_edge(u, w)).collect();
                for _ in 0..HR_NEGATIVES {
                    group.push(if pool.is_empty() { v } else { pool[rng.random_range(0..pool.len())] });
                }
            }
            group
        })
        .collect()
}

/// One uniformly drawn non-edge per positive.
pub fn sample_non_edges<R: Rng>(g: &Graph, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let n = g.n();
    if n < 2 || g.edges().len() >= n * (n - 1) / 2 {
        return Err(HrcbError::invalid("graph has no non-edges"));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && !g.has_edge(a, b) {
            out.push((a, b));
        }
    }
    Ok(out)
}

/// Mean of `|(d/d_G)^2 - 1|` over `pairs`.
pub fn loss_gd(t: &mut Tape, space: Space, x: Var, pairs: Rc<Vec<(usize, usize)>>, dg: &[f64]) -> Var {
    let d = t.pair_distance(x, pairs, space);
    let inv = t.constant(Array2::from_shape_fn((dg.len(), 1), |(i, _)| 1.0 / dg[i]));
    let r = t.mul(d, inv);
    let r2 = t.square(r);
    let dev = t.add_scalar(r2, -1.0);
    let a = t.unary(dev, Unary::Abs);
    t.mean(a)
}

/// Mean softmin cross-entropy; each group is `[u, v, negatives...]`.
pub fn loss_hr(t: &mut Tape, space: Space, x: Var, groups: &[Vec<usize>]) -> Var {
    let k = groups[0].len() - 1;
    let pairs: Vec<(usize, usize)> = groups.iter().flat_map(|g| g[1..].iter().map(move |&w| (g[0], w))).collect();
    let d = t.pair_distance(x, Rc::new(pairs), space);
    let d = t.reshape(d, groups.len(), k);
    let neg = t.neg(d);
    let lse = t.row_logsumexp(neg);
    let pos = t.pick_cols(neg, Rc::new(vec![0; groups.len()]));
    let per = t.sub(lse, pos);
    t.mean(per)
}

/// Mean binary cross-entropy of the Fermi-Dirac decoder over positives and negatives.
pub fn loss_fd(t: &mut Tape, space: Space, x: Var, pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Var {
    // -log P = softplus((d - r)/t), -log(1 - P) = softplus((r - d)/t)
    let mut pairs = pos.to_vec();
    pairs.extend_from_slice(neg);
    let d = t.pair_distance(x, Rc::new(pairs), space);
    let sign = t.constant(Array2::from_shape_fn((pos.len() + neg.len(), 1), |(i, _)| {
        if i < pos.len() {
            1.0 / FD_T
        } else {
            -1.0 / FD_T
        }
    }));
    let shifted = t.add_scalar(d, -FD_R);
    let z = t.mul(shifted, sign);
    let sp = t.unary(z, Unary::Softplus);
    t.mean(sp)
}

pub fn fd_probability(d: f64) -> f64 {
    1.0 / (((d - FD_R) / FD_T).exp() + 1.0)
}

/// Class logits of the selected nodes: `log0(x) W^T + b`, or `log0(x)` itself without a head.
pub fn lr_logits(t: &mut Tape, space: Space, x: Var, nodes: &[usize], head: Option<(Var, Var)>) -> Var {
    let sel = t.gather_rows(x, Rc::new(nodes.to_vec()));
    let u = geo::log0(t, space, sel);
    match head {
        Some((w, b)) => {
            let z = t.matmul_t(u, w);
            t.add_row(z, b)
        }
        None => u,
    }
}

/// Mean softmax cross-entropy of the labelled `nodes`.
pub fn loss_lr(
    t: &mut Tape,
    space: Space,
    x: Var,
    nodes: &[usize],
    labels: &[Option<usize>],
    head: Option<(Var, Var)>,
) -> Result<Var> {
    let y: Vec<usize> = nodes
        .iter()
        .map(|&v| labels[v].ok_or_else(|| HrcbError::invalid(format!("node {v} has no label"))))
        .collect::<Result<_>>()?;
    let logits = lr_logits(t, space, x, nodes, head);
    let lse = t.row_logsumexp(logits);
    let picked = t.pick_cols(logits, Rc::new(y));
    let per = t.sub(lse, picked);
    Ok(t.mean(per))
}

/// Everything an objective samples up front; training negatives are redrawn per epoch.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub objective: Objective,
    pub space: Space,
    pub seed: u64,
    /// Stream for per-epoch training negatives.
    pub sampling_seed: u64,
    edges: Option<EdgeSplit>,
    nodes: Option<NodeSplit>,
    gd_pairs: [(Rc<Vec<(usize, usize)>>, Vec<f64>); 3],
    hr_fixed: [Vec<Vec<usize>>; 2],
    fd_fixed: [Vec<(usize, usize)>; 2],
    labels: Vec<Option<usize>>,
    graph: Graph,
}

fn gd_pairs(g: &Graph, members: &[usize], others: &[usize]) -> (Rc<Vec<(usize, usize)>>, Vec<f64>) {
    let n = g.n();
    let mut is_member = vec![false; n];
    members.iter().for_each(|&v| is_member[v] = true);
    let mut is_other = vec![false; n];
    others.iter().for_each(|&v| is_other[v] = true);
    let mut pairs = Vec::new();
    let mut dg = Vec::new();
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    for &u in &sorted {
        let dist = g.bfs_distances(u);
        for v in 0..n {
            // members pair among themselves once; others are paired with every member
            if (is_member[v] && v > u) || (is_other[v] && !is_member[v]) {
                if dist[v] == u32::MAX {
                    continue;
                }
                pairs.push((u, v));
                dg.push(dist[v] as f64);
            }
        }
    }
    (Rc::new(pairs), dg)
}

impl Prepared {
    pub fn new(objective: Objective, data: &Dataset, space: Space, seed: u64) -> Result<Self> {
        let g = data.graph.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, objective, u64::MAX));
        let empty = || (Rc::new(Vec::new()), Vec::new());
        let mut p = Prepared {
            objective,
            space,
            seed,
            sampling_seed: seed,
            edges: None,
            nodes: None,
            gd_pairs: [empty(), empty(), empty()],
            hr_fixed: [Vec::new(), Vec::new()],
            fd_fixed: [Vec::new(), Vec::new()],
            labels: data.labels.clone().unwrap_or_default(),
            graph: g.clone(),
        };
        match objective {
            Objective::Gd => {
                let s = split_all_nodes(g.n(), (8, 1, 1), seed);
                let mut seen = s.train.clone();
                p.gd_pairs[0] = gd_pairs(&g, &s.train, &[]);
                p.gd_pairs[1] = gd_pairs(&g, &s.dev, &seen);
                seen.extend_from_slice(&s.dev);
                p.gd_pairs[2] = gd_pairs(&g, &s.test, &seen);
                if p.gd_pairs[0].0.is_empty() {
                    return Err(HrcbError::invalid("too few nodes for distortion training"));
                }
                p.nodes = Some(s);
            }
            Objective::Hr | Objective::Fd => {
                let s = split_edges(g.edges(), (8, 1, 1), seed)?;
                if objective == Objective::Hr {
                    p.hr_fixed = [sample_hr_groups(&g, &s.dev, &mut rng), sample_hr_groups(&g, &s.test, &mut rng)];
                } else {
                    p.fd_fixed = [sample_non_edges(&g, s.dev.len(), &mut rng)?, sample_non_edges(&g, s.test.len(), &mut rng)?];
                }
                p.edges = Some(s);
            }
            Objective::Lr => {
                let labels = data.labels.as_ref().ok_or_else(|| HrcbError::invalid("dataset has no labels"))?;
                p.nodes = Some(split_nodes(labels, (3, 1, 6), seed)?);
            }
        }
        Ok(p)
    }

    /// Draws training negatives from a stream independent of the split seed.
    pub fn with_sampling_seed(mut self, seed: u64) -> Self {
        self.sampling_seed = seed;
        self
    }

    pub fn edge_split(&self) -> Option<&EdgeSplit> {
        self.edges.as_ref()
    }

    pub fn node_split(&self) -> Option<&NodeSplit> {
        self.nodes.as_ref()
    }

    fn edges_of(&self, part: Part) -> &[(usize, usize)] {
        let s = self.edges.as_ref().expect("edge objective");
        match part {
            Part::Train => &s.train,
            Part::Dev => &s.dev,
            Part::Test => &s.test,
        }
    }

    fn nodes_of(&self, part: Part) -> &[usize] {
        let s = self.nodes.as_ref().expect("node objective");
        match part {
            Part::Train => &s.train,
            Part::Dev => &s.dev,
            Part::Test => &s.test,
        }
    }

    /// Whether `part` has anything to score.
    pub fn has(&self, part: Part) -> bool {
        match self.objective {
            Objective::Gd => !self.gd_pairs[part as usize].0.is_empty(),
            Objective::Hr | Objective::Fd => !self.edges_of(part).is_empty(),
            Objective::Lr => !self.nodes_of(part).is_empty(),
        }
    }

    /// Loss on `part`. Training negatives depend on `epoch`; dev and test ones are fixed.
    pub fn loss(&self, t: &mut Tape, x: Var, head: Option<(Var, Var)>, part: Part, epoch: u64) -> Result<Var> {
        if !self.has(part) {
            return Err(HrcbError::invalid(format!("{} has an empty {part:?} partition", self.objective)));
        }
        let space = self.space;
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.sampling_seed, self.objective, epoch));
        Ok(match self.objective {
            Objective::Gd => {
                let (pairs, dg) = &self.gd_pairs[part as usize];
                loss_gd(t, space, x, pairs.clone(), dg)
            }
            Objective::Hr => {
                let groups = match part {
                    Part::Train => sample_hr_groups(&self.graph, self.edges_of(part), &mut rng),
                    Part::Dev => self.hr_fixed[0].clone(),
                    Part::Test => self.hr_fixed[1].clone(),
                };
                loss_hr(t, space, x, &groups)
            }
            Objective::Fd => {
                let pos = self.edges_of(part);
                let neg = match part {
                    Part::Train => sample_non_edges(&self.graph, pos.len(), &mut rng)?,
                    Part::Dev => self.fd_fixed[0].clone(),
                    Part::Test => self.fd_fixed[1].clone(),
                };
                loss_fd(t, space, x, pos, &neg)
            }
            Objective::Lr => loss_lr(t, space, x, self.nodes_of(part), &self.labels, head)?,
        })
    }

    /// Test accuracy for HR, FD and LR. GD is scored by normalised distortion elsewhere.
    pub fn accuracy(&self, e: &EmbeddingTable, head: Option<(&Array2<f64>, &Array2<f64>)>) -> Option<f64> {
        match self.objective {
            Objective::Gd => None,
            Objective::Hr => {
                let groups = &self.hr_fixed[1];
                if groups.is_empty() {
                    return None;
                }
                let hits = groups
                    .iter()
                    .filter(|g| {
                        let dp = e.dist(g[0], g[1]);
                        g[2..].iter().all(|&w| dp < e.dist(g[0], w))
                    })
                    .count();
                Some(hits as f64 / groups.len() as f64)
            }
            Objective::Fd => {
                let pos = self.edges_of(Part::Test);
                let neg = &self.fd_fixed[1];
                if pos.is_empty() {
                    return None;
                }
                let tp = pos.iter().filter(|&&(a, b)| fd_probability(e.dist(a, b)) > 0.5).count();
                let tn = neg.iter().filter(|&&(a, b)| fd_probability(e.dist(a, b)) <= 0.5).count();
                Some((tp + tn) as f64 / (pos.len() + neg.len()) as f64)
            }
            Objective::Lr => {
                let nodes = self.nodes_of(Part::Test);
                if nodes.is_empty() {
                    return None;
                }
                let space = e.space();
                let hits = nodes
                    .iter()
                    .filter(|&&v| {
                        let u = space.log0(e.row(v));
                        let logits: Vec<f64> = match head {
                            Some((w, b)) => (0..w.nrows())
                                .map(|c| b[[0, c]] + w.row(c).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>())
                                .collect(),
                            None => u,
                        };
                        let best = logits
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                            .map(|(i, _)| i);
                        best == self.labels[v]
                    })
                    .count();
                Some(hits as f64 / nodes.len() as f64)
            }
        }
    }
}

/// Performance of a trained embedding: accuracy, or `-M_dd` for distortion.
pub fn task_metric(p: &Prepared, data: &Dataset, e: &EmbeddingTable, head: Option<(&Array2<f64>, &Array2<f64>)>) -> Result<f64> {
    match p.accuracy(e, head) {
        Some(a) => Ok(a),
        None => {
            let mut total = 0.0;
            for (h, map) in &data.eval {
                total += metrics::graph_distortion(h, &e.select(map))?.1;
            }
            Ok(-total / data.eval.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treegen::{complete_tree, disease_like};

    fn table(rows: &[&[f64]]) -> (Tape, Var) {
        let mut t = Tape::new();
        let a = Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j]);
        let x = t.var(a);
        (t, x)
    }

    #[test]
    fn gd_reference_values() {
        let s = Space::euclidean();
        let (mut t, x) = table(&[&[0.0], &[2.0]]);
        let l = loss_gd(&mut t, s, x, Rc::new(vec![(0, 1)]), &[1.0]);
        assert_eq!(t.scalar(l), 3.0);
        let (mut t, x) = table(&[&[0.0], &[1.0], &[2.0]]);
        let l = loss_gd(&mut t, s, x, Rc::new(vec![(0, 1), (0, 2), (1, 2)]), &[1.0, 2.0, 1.0]);
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn hr_uniform_and_limit() {
        let s = Space::euclidean();
        // u at the origin, everyone else on the unit circle: all equidistant
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0, 0.0]];
        for k in 0..11 {
            let a = k as f64;
            rows.push(vec![a.cos(), a.sin()]);
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let (mut t, x) = table(&refs);
        let groups = vec![(0..12).collect::<Vec<usize>>()];
        let l = loss_hr(&mut t, s, x, &groups);
        assert!((t.scalar(l) - 11f64.ln()).abs() < 1e-12);
        let mut far = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        for _ in 0..10 {
            far.push(vec![1e6, 0.0]);
        }
        let refs: Vec<&[f64]> = far.iter().map(|r| r.as_slice()).collect();
        let (mut t, x) = table(&refs);
        let l = loss_hr(&mut t, s, x, &groups);
        assert!(t.scalar(l) < 1e-12);
    }

    #[test]
    fn fd_reference_values() {
        assert_eq!(fd_probability(2.0), 0.5);
        assert!((fd_probability(0.0) - 0.8807970779778823).abs() < 1e-15);
        let s = Space::euclidean();
        let (mut t, x) = table(&[&[0.0], &[0.0]]);
        let l = loss_fd(&mut t, s, x, &[(0, 1)], &[]);
        assert!((t.scalar(l) - 0.1269280110429726).abs() < 1e-15);
        let (mut t, x) = table(&[&[0.0], &[2.0], &[4.0]]);
        let l = loss_fd(&mut t, s, x, &[(0, 1)], &[(1, 2)]);
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn lr_uniform_logits() {
        let s = Space::euclidean();
        let (mut t, x) = table(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        let l = loss_lr(&mut t, s, x, &[0, 1], &[Some(0), Some(2)], None).unwrap();
        assert!((t.scalar(l) - 3f64.ln()).abs() < 1e-15);
        let (mut t, x) = table(&[&[0.0]]);
        assert!(loss_lr(&mut t, s, x, &[0], &[None], None).is_err());
    }

    #[test]
    fn split_counts() {
        let h = disease_like();
        let s = split_edges(&h.edges(), (8, 1, 1), 4).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (835, 104, 104));
        assert_eq!(split_edges(&h.edges(), (8, 1, 1), 4).unwrap(), s);
        let labels: Vec<Option<usize>> = (0..1000).map(|i| Some(i % 2)).collect();
        let n = split_nodes(&labels, (3, 1, 6), 1).unwrap();
        assert_eq!((n.train.len(), n.dev.len(), n.test.len()), (300, 100, 600));
        for part in [&n.train, &n.dev, &n.test] {
            let zeros = part.iter().filter(|&&v| labels[v] == Some(0)).count();
            assert_eq!(zeros * 2, part.len());
        }
    }

    #[test]
    fn negatives_avoid_positives() {
        let h = complete_tree(3, 5);
        let g = h.graph();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for grp in sample_hr_groups(&g, g.edges(), &mut rng) {
            assert_eq!(grp.len(), 12);
            let negs: HashSet<usize> = grp[2..].iter().copied().collect();
            assert_eq!(negs.len(), 10);
            assert!(negs.iter().all(|&w| w != grp[0] && !g.has_edge(grp[0], w)));
        }
        for (a, b) in sample_non_edges(&g, 500, &mut rng).unwrap() {
            assert!(a != b && !g.has_edge(a, b));
        }
    }

    #[test]
    fn prepared_partitions_are_disjoint() {
        let h = disease_like();
        let data = Dataset::from_hierarchy("d", &h);
        let p = Prepared::new(Objective::Gd, &data, Space::poincare(1.0), 3).unwrap();
        let s = p.node_split().unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..h.len()).collect::<Vec<_>>());
        let p = Prepared::new(Objective::Lr, &data, Space::poincare(1.0), 3).unwrap();
        let s = p.node_split().unwrap();
        let a: HashSet<usize> = s.train.iter().copied().collect();
        assert!(s.dev.iter().chain(&s.test).all(|v| !a.contains(v)));
    }
}
