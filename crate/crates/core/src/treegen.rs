//! Rooted hierarchies: construction, generation, mixing, labeling, profiling and I/O.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HrcbError, Result};

/// Where a hierarchy came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated(GenParams),
    File(String),
    Builtin(String),
    Constructed(String),
}

/// Parameters of the breadth-first random tree generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub alpha_r: f64,
    pub alpha_t: f64,
    pub beta_mu_s: f64,
    pub beta_mu_e: f64,
    pub beta_t_mu: f64,
    pub beta_sigma_s: f64,
    pub beta_sigma_e: f64,
    pub beta_t_sigma: f64,
    pub n: usize,
    pub seed: u64,
}

impl GenParams {
    /// Complete `k`-ary tree parameters.
    pub fn complete(k: f64, n: usize) -> Self {
        GenParams {
            alpha_r: 1.0,
            alpha_t: 1.0,
            beta_mu_s: k,
            beta_mu_e: k,
            beta_t_mu: 1.0,
            beta_sigma_s: 0.0,
            beta_sigma_e: 0.0,
            beta_t_sigma: 1.0,
            n,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.alpha_r)
            && self.alpha_t > 0.0
            && self.beta_mu_s > 0.0
            && self.beta_mu_e > 0.0
            && self.beta_t_mu > 0.0
            && self.beta_sigma_s >= 0.0
            && self.beta_sigma_e >= 0.0
            && self.beta_t_sigma > 0.0
            && self.n >= 1;
        let finite = [
            self.alpha_r,
            self.alpha_t,
            self.beta_mu_s,
            self.beta_mu_e,
            self.beta_t_mu,
            self.beta_sigma_s,
            self.beta_sigma_e,
            self.beta_t_sigma,
        ]
        .iter()
        .all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(HrcbError::invalid(format!("generator parameters out of range: {self:?}")))
        }
    }

    fn as_vec(&self) -> [f64; 8] {
        [
            self.alpha_r,
            self.alpha_t,
            self.beta_mu_s,
            self.beta_mu_e,
            self.beta_t_mu,
            self.beta_sigma_s,
            self.beta_sigma_e,
            self.beta_t_sigma,
        ]
    }

    fn from_vec(v: [f64; 8], n: usize, seed: u64) -> Self {
        GenParams {
            alpha_r: v[0],
            alpha_t: v[1],
            beta_mu_s: v[2],
            beta_mu_e: v[3],
            beta_t_mu: v[4],
            beta_sigma_s: v[5],
            beta_sigma_e: v[6],
            beta_t_sigma: v[7],
            n,
            seed,
        }
    }
}

/// Structural descriptors of a hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureProfile {
    pub i_b: f64,
    pub i_d: f64,
    pub height: usize,
    pub n: usize,
}

/// A rooted tree whose children lists are in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    parents: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
    levels: Vec<usize>,
    heights: Vec<usize>,
    bfs: Vec<usize>,
    labels: Option<Vec<Option<usize>>>,
    provenance: Provenance,
    external_ids: Option<Vec<u64>>,
}

#[derive(Serialize, Deserialize)]
struct HierarchyFile {
    n: usize,
    root: usize,
    parents: Vec<Option<usize>>,
    labels: Option<Vec<Option<usize>>>,
    profile: Option<StructureProfile>,
    provenance: Provenance,
    #[serde(default)]
    external_ids: Option<Vec<u64>>,
}

/// `2/(1 + e^{-x}) - 1`, mapping `[0, ∞)` onto `[0, 1)`.
pub fn f_s(x: f64) -> f64 {
    2.0 / (1.0 + (-x).exp()) - 1.0
}

impl Hierarchy {
    /// Builds from a parent array with exactly one `None`.
    pub fn from_parents(parents: Vec<Option<usize>>, provenance: Provenance) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(HrcbError::InvalidHierarchy("empty hierarchy".into()));
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parents[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(HrcbError::InvalidHierarchy(format!("expected one root, found {}", roots.len())));
        }
        let root = roots[0];
        let mut children = vec![Vec::new(); n];
        for (v, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(HrcbError::InvalidHierarchy(format!("parent {p} of {v} out of range")));
                }
                if p == v {
                    return Err(HrcbError::InvalidHierarchy(format!("node {v} is its own parent")));
                }
                children[p].push(v);
            }
        }
        let mut levels = vec![0usize; n];
        let mut bfs = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        levels[root] = 1;
        while let Some(v) = queue.pop_front() {
            bfs.push(v);
            for &c in &children[v] {
                levels[c] = levels[v] + 1;
                queue.push_back(c);
            }
        }
        if bfs.len() != n {
            return Err(HrcbError::InvalidHierarchy(format!(
                "{} of {n} nodes unreachable from the root (cycle or forest)",
                n - bfs.len()
            )));
        }
        let mut heights = vec![0usize; n];
        for &v in bfs.iter().rev() {
            if let Some(p) = parents[v] {
                heights[p] = heights[p].max(heights[v] + 1);
            }
        }
        Ok(Hierarchy { parents, children, root, levels, heights, bfs, labels: None, provenance, external_ids: None })
    }

    /// Builds from `(parent, child)` pairs with arbitrary non-negative ids.
    ///
    /// Nodes are renumbered breadth-first from the root, visiting children in
    /// the order their edges appear, so that order becomes the stored order.
    pub fn from_edges(edges: &[(u64, u64)], provenance: Provenance) -> Result<Self> {
        let mut idx: HashMap<u64, usize> = HashMap::new();
        let mut ext: Vec<u64> = Vec::new();
        let mut intern = |id: u64, ext: &mut Vec<u64>| -> usize {
            *idx.entry(id).or_insert_with(|| {
                ext.push(id);
                ext.len() - 1
            })
        };
        let mut kids: Vec<Vec<usize>> = Vec::new();
        let mut indeg: Vec<usize> = Vec::new();
        for &(p, c) in edges {
            let (pi, ci) = (intern(p, &mut ext), intern(c, &mut ext));
            let need = ext.len();
            kids.resize(need, Vec::new());
            indeg.resize(need, 0);
            kids[pi].push(ci);
            indeg[ci] += 1;
        }
        let n = ext.len();
        if n == 0 {
            return Err(HrcbError::InvalidHierarchy("no edges".into()));
        }
        if let Some(v) = (0..n).find(|&v| indeg[v] > 1) {
            return Err(HrcbError::InvalidHierarchy(format!("node {} has {} parents", ext[v], indeg[v])));
        }
        let roots: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        if roots.len() != 1 {
            let shown: Vec<u64> = roots.iter().take(5).map(|&r| ext[r]).collect();
            return Err(HrcbError::InvalidHierarchy(format!(
                "expected one root, found {} (e.g. {shown:?})",
                roots.len()
            )));
        }
        let mut order = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([roots[0]]);
        seen[roots[0]] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &c in &kids[v] {
                if !seen[c] {
                    seen[c] = true;
                    queue.push_back(c);
                }
            }
        }
        if order.len() != n {
            return Err(HrcbError::InvalidHierarchy("edge list contains a cycle or disconnected part".into()));
        }
        let mut new_id = vec![0usize; n];
        for (k, &v) in order.iter().enumerate() {
            new_id[v] = k;
        }
        let mut parents = vec![None; n];
        for (v, ks) in kids.iter().enumerate() {
            for &c in ks {
                parents[new_id[c]] = Some(new_id[v]);
            }
        }
        let mut h = Hierarchy::from_parents(parents, provenance)?;
        h.external_ids = Some(order.iter().map(|&v| ext[v]).collect());
        Ok(h)
    }

    pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path)?;
        let mut edges = Vec::new();
        for (ln, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let mut it = t.split_whitespace();
            let parse = |s: Option<&str>| -> Result<u64> {
                s.ok_or_else(|| HrcbError::Parse { line: ln + 1, msg: "expected `parent child`".into() })?
                    .parse()
                    .map_err(|e| HrcbError::Parse { line: ln + 1, msg: format!("bad node id: {e}") })
            };
            let p = parse(it.next())?;
            let c = parse(it.next())?;
            if it.next().is_some() {
                return Err(HrcbError::Parse { line: ln + 1, msg: "too many fields".into() });
            }
            edges.push((p, c));
        }
        Hierarchy::from_edges(&edges, Provenance::File(path.display().to_string()))
    }

    /// Reads a `node class` file keyed by external ids; class `-1` means no class.
    pub fn load_labels(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let f = fs::File::open(path)?;
        let lookup: HashMap<u64, usize> = match &self.external_ids {
            Some(ext) => ext.iter().enumerate().map(|(i, &e)| (e, i)).collect(),
            None => (0..self.len()).map(|i| (i as u64, i)).collect(),
        };
        let mut labels = vec![None; self.len()];
        for (ln, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let perr = |msg: String| HrcbError::Parse { line: ln + 1, msg };
            let mut it = t.split_whitespace();
            let node: u64 = it
                .next()
                .ok_or_else(|| perr("missing node".into()))?
                .parse()
                .map_err(|e| perr(format!("bad node id: {e}")))?;
            let class: i64 = it
                .next()
                .ok_or_else(|| perr("missing class".into()))?
                .parse()
                .map_err(|e| perr(format!("bad class: {e}")))?;
            let &v = lookup.get(&node).ok_or_else(|| perr(format!("unknown node {node}")))?;
            labels[v] = if class < 0 { None } else { Some(class as usize) };
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn write_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for &v in &self.bfs {
            for &c in &self.children[v] {
                out.push_str(&format!("{} {}\n", self.external_id(v), self.external_id(c)));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn write_labels(&self, path: impl AsRef<Path>) -> Result<()> {
        let labels = self.labels.as_ref().ok_or_else(|| HrcbError::invalid("hierarchy has no labels"))?;
        let mut out = String::new();
        for (v, l) in labels.iter().enumerate() {
            let c = l.map(|c| c as i64).unwrap_or(-1);
            out.push_str(&format!("{} {c}\n", self.external_id(v)));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn external_id(&self, v: usize) -> u64 {
        self.external_ids.as_ref().map(|e| e[v]).unwrap_or(v as u64)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = HierarchyFile {
            n: self.len(),
            root: self.root,
            parents: self.parents.clone(),
            labels: self.labels.clone(),
            profile: self.profile().ok(),
            provenance: self.provenance.clone(),
            external_ids: self.external_ids.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: HierarchyFile = serde_json::from_str(s)?;
        if f.parents.len() != f.n {
            return Err(HrcbError::InvalidHierarchy(format!("n = {} but {} parents", f.n, f.parents.len())));
        }
        let mut h = Hierarchy::from_parents(f.parents, f.provenance)?;
        if h.root != f.root {
            return Err(HrcbError::InvalidHierarchy("stored root disagrees with parent array".into()));
        }
        if let Some(l) = f.labels {
            h.set_labels(l)?;
        }
        h.external_ids = f.external_ids;
        Ok(h)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Hierarchy::from_json(&fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parents[v]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    /// Root has level 1.
    pub fn level(&self, v: usize) -> usize {
        self.levels[v]
    }

    /// Leaves have height 0.
    pub fn subtree_height(&self, v: usize) -> usize {
        self.heights[v]
    }

    /// Number of levels, `H`.
    pub fn height(&self) -> usize {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    /// Breadth-first order with children in stored order.
    pub fn bfs_order(&self) -> &[usize] {
        &self.bfs
    }

    pub fn labels(&self) -> Option<&[Option<usize>]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().map(|l| l.iter().flatten().map(|c| c + 1).max().unwrap_or(0)).unwrap_or(0)
    }

    pub fn set_labels(&mut self, labels: Vec<Option<usize>>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(HrcbError::DimensionMismatch { expected: self.len(), got: labels.len() });
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn set_provenance(&mut self, p: Provenance) {
        self.provenance = p;
    }

    /// `(parent, child)` pairs in breadth-first order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.bfs.iter().flat_map(|&v| self.children[v].iter().map(move |&c| (v, c))).collect()
    }

    pub fn graph(&self) -> Graph {
        Graph::new(self.len(), &self.edges())
    }

    pub fn subtree_sizes(&self) -> Vec<usize> {
        let mut size = vec![1usize; self.len()];
        for &v in self.bfs.iter().rev() {
            if let Some(p) = self.parents[v] {
                size[p] += size[v];
            }
        }
        size
    }

    /// Tree distance via the lowest common ancestor.
    pub fn tree_distance(&self, mut a: usize, mut b: usize) -> usize {
        let mut d = 0;
        while a != b {
            if self.levels[a] >= self.levels[b] {
                a = self.parents[a].expect("non-root above");
            } else {
                b = self.parents[b].expect("non-root above");
            }
            d += 1;
        }
        d
    }

    /// Horizontal hierarchical difference.
    pub fn compute_ib(&self) -> f64 {
        let mut total = 0.0;
        for v in 0..self.len() {
            let ch = &self.children[v];
            if ch.len() < 2 {
                continue;
            }
            let k = ch.len() as f64;
            let mean = ch.iter().map(|&c| self.heights[c] as f64).sum::<f64>() / k;
            let var = ch.iter().map(|&c| (self.heights[c] as f64 - mean).powi(2)).sum::<f64>() / k;
            total += var.sqrt();
        }
        f_s(total / self.len() as f64)
    }

    /// Mean child count of non-leaf nodes for levels `1..H-1`, root level first.
    pub fn level_mean_degrees(&self) -> Vec<f64> {
        let h = self.height();
        let mut sum = vec![0usize; h + 1];
        let mut cnt = vec![0usize; h + 1];
        for v in 0..self.len() {
            let k = self.children[v].len();
            if k > 0 {
                sum[self.levels[v]] += k;
                cnt[self.levels[v]] += 1;
            }
        }
        (1..h).map(|l| sum[l] as f64 / cnt[l] as f64).collect()
    }

    /// Vertical degree distribution. Requires at least two levels.
    pub fn compute_id(&self) -> Result<f64> {
        if self.height() < 2 {
            return Err(HrcbError::InvalidHierarchy("I_D needs at least two levels".into()));
        }
        Ok(id_from_level_means(&self.level_mean_degrees()))
    }

    pub fn profile(&self) -> Result<StructureProfile> {
        Ok(StructureProfile { i_b: self.compute_ib(), i_d: self.compute_id()?, height: self.height(), n: self.len() })
    }
}

/// I_D from per-level mean degrees listed from the root downward.
pub fn id_from_level_means(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let mut asc = d.to_vec();
    asc.sort_by(|a, b| a.partial_cmp(b).expect("finite degrees"));
    let desc: Vec<f64> = asc.iter().rev().copied().collect();
    // The -1 terms cancel in both differences, and scaling every gain by
    // 2^{-max} keeps large degrees finite.
    let top = asc.last().copied().unwrap_or(0.0);
    let dcg = |xs: &[f64]| -> f64 {
        xs.iter().enumerate().map(|(i, x)| (x - top).exp2() / ((i + 2) as f64).log2()).sum()
    };
    let (f, fo, fr) = (dcg(d), dcg(&asc), dcg(&desc));
    let den = fr - fo;
    if den == 0.0 {
        return 0.5;
    }
    let ratio = (f - fo) / den;
    1.0 / (1.0 + (-(var * (ratio - 0.5))).exp())
}

/// Breadth-first random tree per the fertility and child-count recursions.
pub fn generate_tree(p: &GenParams) -> Result<Hierarchy> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.n;
    let mut parents: Vec<Option<usize>> = vec![None];
    let mut queue: VecDeque<(usize, f64)> = VecDeque::from([(0usize, 1.0f64)]);
    let denom = (n.max(2) - 1) as f64;
    while parents.len() < n {
        let Some((v, pr)) = queue.pop_front() else {
            // unreachable while the first-child chain keeps P_r = 1
            return Err(HrcbError::InvalidHierarchy("generator frontier exhausted".into()));
        };
        let fertile = v == 0 || rng.random::<f64>() < pr;
        if !fertile {
            continue;
        }
        let generated = parents.len();
        let progress = (generated - 1) as f64 / denom;
        let mu = p.beta_mu_s + (p.beta_mu_e - p.beta_mu_s) * progress.powf(p.beta_t_mu);
        let sigma = p.beta_sigma_s + (p.beta_sigma_e - p.beta_sigma_s) * progress.powf(p.beta_t_sigma);
        let sample = if sigma > 0.0 {
            Normal::new(mu, sigma).expect("sigma positive").sample(&mut rng)
        } else {
            mu
        };
        let remaining = n - generated;
        let ng = ((sample + 0.5).floor().max(1.0) as usize).min(remaining);
        for i in 1..=ng {
            let factor = if ng == 1 {
                1.0
            } else {
                let frac = (ng - i) as f64 / (ng - 1) as f64;
                p.alpha_r + (1.0 - p.alpha_r) * frac.powf(p.alpha_t)
            };
            parents.push(Some(v));
            queue.push_back((parents.len() - 1, factor * pr));
        }
    }
    Hierarchy::from_parents(parents, Provenance::Generated(*p))
}

/// Undirected simple graph with adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
}

impl Graph {
    /// Duplicate and self edges are dropped.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        let mut kept = Vec::with_capacity(edges.len());
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in edges {
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                kept.push((a, b));
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        Graph { n, edges: kept, adj }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let (s, t) = if self.adj[a].len() <= self.adj[b].len() { (a, b) } else { (b, a) };
        self.adj[s].contains(&t)
    }

    /// Hop distances from `src`; `u32::MAX` marks unreachable nodes.
    pub fn bfs_distances(&self, src: usize) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.n];
        dist[src] = 0;
        let mut q = VecDeque::from([src]);
        while let Some(v) = q.pop_front() {
            for &u in &self.adj[v] {
                if dist[u] == u32::MAX {
                    dist[u] = dist[v] + 1;
                    q.push_back(u);
                }
            }
        }
        dist
    }
}

/// Which tree pairs get overlapped when mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixPolicy {
    AllPairs,
    Chain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    pub gamma_mu: f64,
    pub gamma_sigma: f64,
    pub seed: u64,
    pub policy: MixPolicy,
}

/// Overlay of one source tree on the mixed graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub tree: Hierarchy,
    /// Global node id of each tree-local node.
    pub node_map: Vec<usize>,
}

/// Several trees whose non-root nodes were partly identified with each other.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedGraph {
    pub graph: Graph,
    pub overlays: Vec<Overlay>,
    /// Source tree of each node; `None` marks merged nodes (the `T_None` tag).
    pub tags: Vec<Option<usize>>,
    pub merges: usize,
    pub params: MixParams,
}

fn uf_find(p: &mut [usize], mut x: usize) -> usize {
    while p[x] != x {
        p[x] = p[p[x]];
        x = p[x];
    }
    x
}

/// Overlaps trees by identifying randomly chosen non-root node pairs.
pub fn mix_trees(trees: &[Hierarchy], m: &MixParams) -> Result<MixedGraph> {
    if trees.len() < 2 {
        return Err(HrcbError::invalid("mixing needs at least two trees"));
    }
    if !(m.gamma_mu >= 0.0 && m.gamma_sigma >= 0.0) {
        return Err(HrcbError::invalid("mixing proportions must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    let offsets: Vec<usize> = trees
        .iter()
        .scan(0usize, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total: usize = trees.iter().map(|t| t.len()).sum();
    let mut free: Vec<Vec<usize>> =
        trees.iter().map(|t| (0..t.len()).filter(|&v| v != t.root()).collect()).collect();
    let pairs: Vec<(usize, usize)> = match m.policy {
        MixPolicy::AllPairs => {
            let mut p = Vec::new();
            for i in 0..trees.len() {
                for j in (i + 1)..trees.len() {
                    p.push((i, j));
                }
            }
            p
        }
        MixPolicy::Chain => (0..trees.len() - 1).map(|i| (i, i + 1)).collect(),
    };
    let mut uf: Vec<usize> = (0..total).collect();
    let mut merged = vec![false; total];
    let mut merges = 0;
    for (i, j) in pairs {
        let prop = if m.gamma_sigma > 0.0 {
            Normal::new(m.gamma_mu, m.gamma_sigma).expect("sigma positive").sample(&mut rng)
        } else {
            m.gamma_mu
        };
        let want = (prop * trees[i].len().min(trees[j].len()) as f64).floor().max(0.0) as usize;
        let avail = free[i].len().min(free[j].len());
        let f = if want > avail {
            warn!("overlap {want} between trees {i} and {j} exceeds {avail} free nodes; clamped");
            avail
        } else {
            want
        };
        free[i].shuffle(&mut rng);
        free[j].shuffle(&mut rng);
        let a: Vec<usize> = free[i].drain(..f).collect();
        let b: Vec<usize> = free[j].drain(..f).collect();
        for (x, y) in a.into_iter().zip(b) {
            let (gx, gy) = (offsets[i] + x, offsets[j] + y);
            let (rx, ry) = (uf_find(&mut uf, gx), uf_find(&mut uf, gy));
            uf[ry] = rx;
            merged[gx] = true;
            merged[gy] = true;
            merges += 1;
        }
    }
    let mut comp_id = vec![usize::MAX; total];
    let mut next = 0;
    let mut global_of = vec![0usize; total];
    for (g, slot) in global_of.iter_mut().enumerate() {
        let r = uf_find(&mut uf, g);
        if comp_id[r] == usize::MAX {
            comp_id[r] = next;
            next += 1;
        }
        *slot = comp_id[r];
    }
    let mut tags: Vec<Option<usize>> = vec![None; next];
    for (t, tree) in trees.iter().enumerate() {
        for v in 0..tree.len() {
            let g = offsets[t] + v;
            if !merged[g] {
                tags[global_of[g]] = Some(t);
            }
        }
    }
    let mut edges = Vec::new();
    let mut overlays = Vec::new();
    for (t, tree) in trees.iter().enumerate() {
        let node_map: Vec<usize> = (0..tree.len()).map(|v| global_of[offsets[t] + v]).collect();
        for (p, c) in tree.edges() {
            edges.push((node_map[p], node_map[c]));
        }
        overlays.push(Overlay { tree: tree.clone(), node_map });
    }
    Ok(MixedGraph { graph: Graph::new(next, &edges), overlays, tags, merges, params: *m })
}

/// Labels `nc` equal-sized connected branches; other nodes get no class.
pub fn assign_classes(h: &Hierarchy, nc: usize, seed: u64) -> Result<Hierarchy> {
    if nc == 0 {
        return Err(HrcbError::invalid("need at least one class"));
    }
    let mut out = h.clone();
    let n = h.len();
    let size = h.subtree_sizes();
    let minimal = |s: usize| -> Vec<usize> {
        (0..n).filter(|&v| size[v] >= s && h.children(v).iter().all(|&c| size[c] < s)).collect()
    };
    if minimal(1).len() < nc {
        return Err(HrcbError::invalid(format!("cannot form {nc} disjoint branches")));
    }
    // largest threshold that still yields nc disjoint minimal subtrees
    let (mut lo, mut hi) = (1usize, n);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if minimal(mid).len() >= nc {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut cands = minimal(lo);
    let rank: HashMap<usize, usize> = h.bfs_order().iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cands.sort_by_key(|&v| (size[v], rank[&v]));
    // shuffle candidates of equal size so ties are broken by the seed
    let mut start = 0;
    while start < cands.len() {
        let s = size[cands[start]];
        let end = start + cands[start..].iter().take_while(|&&v| size[v] == s).count();
        cands[start..end].shuffle(&mut rng);
        start = end;
    }
    let chosen = &cands[..nc];
    let m = chosen.iter().map(|&v| size[v]).min().expect("nc > 0");
    let mut chosen_sorted = chosen.to_vec();
    chosen_sorted.sort_by_key(|v| rank[v]);
    let mut labels = vec![None; n];
    for (class, &top) in chosen_sorted.iter().enumerate() {
        let mut q = VecDeque::from([top]);
        let mut taken = 0;
        while let Some(v) = q.pop_front() {
            if taken == m {
                break;
            }
            labels[v] = Some(class);
            taken += 1;
            q.extend(h.children(v).iter().copied());
        }
    }
    out.set_labels(labels)?;
    Ok(out)
}

/// Outcome of a hill-climbing search over generator parameters.
#[derive(Debug, Clone)]
pub struct ClimbResult {
    pub params: GenParams,
    pub tree: Hierarchy,
    pub gap: f64,
    pub steps: usize,
}

/// Searches generator parameters whose tree profile is closest (L1) to the target.
pub fn hillclimb_structure(target_ib: f64, target_id: f64, n: usize, budget: usize, seed: u64) -> Result<ClimbResult> {
    if !(0.0..1.0).contains(&target_ib) || !(0.0..=1.0).contains(&target_id) {
        return Err(HrcbError::invalid("targets must lie in [0,1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |p: &GenParams| -> Option<(f64, Hierarchy)> {
        let t = generate_tree(p).ok()?;
        let prof = t.profile().ok()?;
        Some(((prof.i_b - target_ib).abs() + (prof.i_d - target_id).abs(), t))
    };
    let mut best = GenParams { seed, ..GenParams::complete(3.0, n) };
    let (mut best_gap, mut best_tree) = eval(&best).ok_or_else(|| HrcbError::invalid("tree too small"))?;
    let (mut cur, mut cur_gap) = (best, best_gap);
    let mut step = 1.0;
    let mut stale = 0;
    let std = rand_distr::StandardNormal;
    let mut steps = 0;
    while steps < budget && best_gap > 1e-9 {
        steps += 1;
        // once the step has collapsed, restart from a random point
        if step < 1.0 / 32.0 {
            let z = |rng: &mut ChaCha8Rng| -> f64 { std.sample(rng) };
            let v = [
                rng.random_range(0.0..1.0),
                z(&mut rng).exp(),
                rng.random_range(1.0..8.0),
                rng.random_range(1.0..8.0),
                z(&mut rng).exp(),
                rng.random_range(0.0..2.0),
                rng.random_range(0.0..2.0),
                z(&mut rng).exp(),
            ];
            let cand = GenParams::from_vec(v, n, seed);
            if let Some((gap, tree)) = eval(&cand) {
                (cur, cur_gap) = (cand, gap);
                if gap < best_gap {
                    (best, best_gap, best_tree) = (cand, gap, tree);
                }
                step = 1.0;
            }
            continue;
        }
        let mut v = cur.as_vec();
        let k = rng.random_range(0..v.len());
        let z: f64 = std.sample(&mut rng);
        v[k] = if v[k] == 0.0 { step * 0.5 * z.abs() } else { v[k] * (step * z).exp() };
        v[0] = v[0].clamp(0.0, 1.0);
        for x in v.iter_mut().skip(1) {
            *x = x.clamp(0.0, 50.0);
        }
        for idx in [1usize, 2, 3, 4, 7] {
            v[idx] = v[idx].max(1e-3);
        }
        let cand = GenParams::from_vec(v, n, seed);
        match eval(&cand) {
            Some((gap, tree)) if gap < cur_gap => {
                (cur, cur_gap) = (cand, gap);
                if gap < best_gap {
                    (best, best_gap, best_tree) = (cand, gap, tree);
                }
                stale = 0;
            }
            _ => {
                stale += 1;
                if stale >= 50 {
                    step *= 0.5;
                    stale = 0;
                }
            }
        }
    }
    Ok(ClimbResult { params: best, tree: best_tree, gap: best_gap, steps })
}

/// Generator parameters of the reference structures `Tree1..Tree4` and `T1..T8`.
///
/// Seeds were picked from the first 300 as the closest match to the
/// published height and profile of each structure.
pub fn reference_params(name: &str) -> Option<GenParams> {
    let base = |ar, at, ms, me, tm, ss, se, n, seed| GenParams {
        alpha_r: ar,
        alpha_t: at,
        beta_mu_s: ms,
        beta_mu_e: me,
        beta_t_mu: tm,
        beta_sigma_s: ss,
        beta_sigma_e: se,
        beta_t_sigma: 1.0,
        n,
        seed,
    };
    let (kind, n, seed) = match name {
        "Tree1" => (1, 3280, 1),
        "Tree2" => (2, 3280, 77),
        "Tree3" => (3, 3280, 4),
        "Tree4" => (4, 3280, 160),
        "T1" => (1, 1093, 11),
        "T2" => (2, 1093, 133),
        "T3" => (3, 1093, 45),
        "T4" => (4, 1093, 116),
        "T5" => (1, 1093, 15),
        "T6" => (2, 1093, 201),
        "T7" => (3, 1093, 65),
        "T8" => (4, 1093, 278),
        _ => return None,
    };
    Some(match kind {
        1 => base(1.0, 1.0, 3.0, 3.0, 1.0, 0.0, 0.0, n, seed),
        2 => base(0.2, 2.0, 5.0, 5.0, 1.0, 0.0, 0.0, n, seed),
        3 => base(1.0, 1.0, 2.0, 7.0, 1.0, 0.4, 1.5, n, seed),
        _ => base(1.0, 1.0, 6.0, 1.0, 0.3, 0.1, 1.0, n, seed),
    })
}

/// Per-level node counts of the disease-like stand-in tree.
pub const DISEASE_LIKE_LEVELS: [usize; 8] = [1, 4, 8, 32, 64, 96, 144, 695];

/// Tree with the given node count per level; each level's children are
/// spread as evenly as possible over the previous level, extra children
/// going to the earliest nodes.
pub fn level_profile_tree(levels: &[usize], provenance: Provenance) -> Result<Hierarchy> {
    if levels.first() != Some(&1) {
        return Err(HrcbError::invalid("first level must hold exactly the root"));
    }
    let mut parents: Vec<Option<usize>> = vec![None];
    let mut prev: Vec<usize> = vec![0];
    for &count in &levels[1..] {
        if count < prev.len() {
            return Err(HrcbError::invalid("level counts must not decrease"));
        }
        let base = count / prev.len();
        let extra = count % prev.len();
        let mut cur = Vec::with_capacity(count);
        for (k, &p) in prev.iter().enumerate() {
            let kids = base + usize::from(k < extra);
            for _ in 0..kids {
                parents.push(Some(p));
                cur.push(parents.len() - 1);
            }
        }
        prev = cur;
    }
    Hierarchy::from_parents(parents, provenance)
}

/// Offline stand-in for the Disease hierarchy: 1044 nodes, 8 levels, two classes.
pub fn disease_like() -> Hierarchy {
    let h = level_profile_tree(&DISEASE_LIKE_LEVELS, Provenance::Builtin("disease_like".into()))
        .expect("valid level profile");
    assign_classes(&h, 2, 0).expect("two branches exist")
}

/// A complete `k`-ary tree with `levels` levels, numbered breadth-first.
pub fn complete_tree(k: usize, levels: usize) -> Hierarchy {
    let mut counts = vec![1usize];
    for _ in 1..levels {
        counts.push(counts.last().unwrap() * k);
    }
    level_profile_tree(&counts, Provenance::Constructed(format!("complete {k}-ary, {levels} levels")))
        .expect("valid level profile")
}
