//! Experiment configs, the append-only result store, grid sweeps and exports.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{Arch, EncoderConfig};
use crate::error::{HrcbError, Result};
use crate::manifold::{EmbeddingTable, Space, SpaceKind};
use crate::metrics::HrcReport;
use crate::objectives::{Dataset, EdgeSplit, NodeSplit, Objective, Prepared};
use crate::stats::{nemenyi, RankReport, ResultMatrix};
use crate::trainer::{run_strategy, Seeds, StopMode, StopStrategy, StrategyKind, StrategySpec, TrainConfig};
use crate::treegen::{
    assign_classes, disease_like, generate_tree, hillclimb_structure, mix_trees, reference_params, GenParams,
    Hierarchy, MixParams, MixPolicy, MixedGraph, StructureProfile,
};

/// Environment variable overriding the default store path.
pub const STORE_ENV: &str = "HRCB_STORE";
pub const DEFAULT_STORE: &str = "results.jsonl";

pub fn store_path(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(STORE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetRef {
    /// `Tree1`..`Tree4`, `T1`..`T8`, `disease` or `tree5` (T1..T8 mixed).
    Builtin { name: String },
    File { edges: PathBuf, labels: Option<PathBuf> },
    Generated { params: GenParams },
    /// Hill-climbed towards a structure profile.
    Target { i_b: f64, i_d: f64, n: usize, budget: usize, seed: u64 },
    Mixed { trees: Vec<String>, mix: MixParams },
}

impl DatasetRef {
    pub fn builtin(name: &str) -> Self {
        DatasetRef::Builtin { name: name.into() }
    }

    pub fn label(&self) -> String {
        match self {
            DatasetRef::Builtin { name } => name.clone(),
            DatasetRef::File { edges, .. } => edges.display().to_string(),
            DatasetRef::Generated { params } => format!("gen-{}", params.seed),
            DatasetRef::Target { i_b, i_d, n, .. } => format!("target-{i_b}-{i_d}-{n}"),
            DatasetRef::Mixed { trees, .. } => format!("mix-{}", trees.join("+")),
        }
    }
}

/// Default mixing of the eight reference trees.
pub fn tree5_params() -> MixParams {
    MixParams { gamma_mu: 0.1, gamma_sigma: 0.0, seed: 0, policy: MixPolicy::AllPairs }
}

/// A resolved dataset before per-run graph contexts are built.
#[derive(Debug, Clone)]
pub enum Source {
    Tree(Hierarchy),
    Mixed(MixedGraph),
}

impl Source {
    pub fn dataset(&self, name: &str) -> Dataset {
        match self {
            Source::Tree(h) => Dataset::from_hierarchy(name, h),
            Source::Mixed(m) => Dataset::from_mixed(name, m),
        }
    }

    /// Structure profile of a single tree; `None` for mixed graphs.
    pub fn profile(&self) -> Option<StructureProfile> {
        match self {
            Source::Tree(h) => h.profile().ok(),
            Source::Mixed(_) => None,
        }
    }
}

fn builtin_tree(name: &str) -> Result<Hierarchy> {
    if name.eq_ignore_ascii_case("disease") {
        return Ok(disease_like());
    }
    let p = reference_params(name).ok_or_else(|| HrcbError::invalid(format!("unknown builtin dataset `{name}`")))?;
    generate_tree(&p)
}

pub fn resolve(d: &DatasetRef, classes: Option<usize>) -> Result<Source> {
    let tree = match d {
        DatasetRef::Builtin { name } if name.eq_ignore_ascii_case("tree5") => {
            let names: Vec<String> = (1..=8).map(|i| format!("T{i}")).collect();
            return resolve(&DatasetRef::Mixed { trees: names, mix: tree5_params() }, classes);
        }
        DatasetRef::Builtin { name } => builtin_tree(name)?,
        DatasetRef::File { edges, labels } => {
            let mut h = Hierarchy::load_edge_list(edges)?;
            if let Some(l) = labels {
                h.load_labels(l)?;
            }
            h
        }
        DatasetRef::Generated { params } => generate_tree(params)?,
        DatasetRef::Target { i_b, i_d, n, budget, seed } => hillclimb_structure(*i_b, *i_d, *n, *budget, *seed)?.tree,
        DatasetRef::Mixed { trees, mix } => {
            let hs = trees.iter().map(|t| builtin_tree(t)).collect::<Result<Vec<_>>>()?;
            return Ok(Source::Mixed(mix_trees(&hs, mix)?));
        }
    };
    Ok(Source::Tree(match classes {
        Some(nc) if tree.labels().is_none() => assign_classes(&tree, nc, 0)?,
        _ => tree,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetRef,
    /// Class count for unlabelled trees (needed by LR).
    #[serde(default)]
    pub classes: Option<usize>,
    pub space: SpaceKind,
    #[serde(default = "one")]
    pub curvature: f64,
    pub arch: Arch,
    pub dim: usize,
    #[serde(default = "sixteen")]
    pub hidden_dim: usize,
    pub objective: Objective,
    pub strategy: StrategySpec,
    pub stop: StopStrategy,
    pub seeds: Seeds,
}

fn one() -> f64 {
    1.0
}

fn sixteen() -> usize {
    16
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetRef, space: SpaceKind, arch: Arch, dim: usize, objective: Objective, seed: u64) -> Self {
        ExperimentConfig {
            dataset,
            classes: None,
            space,
            curvature: 1.0,
            arch,
            dim,
            hidden_dim: 16,
            objective,
            strategy: StrategySpec::normal(),
            stop: StopStrategy::default(),
            seeds: Seeds::all(seed),
        }
    }

    /// Stable hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let canon = serde_json::to_value(self).expect("config serialises");
        let digest = Sha256::digest(canon.to_string().as_bytes());
        hex(&digest[..16])
    }

    pub fn space_value(&self) -> Result<Space> {
        Space::new(self.space, self.curvature)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut e = EncoderConfig::new(self.arch, self.space_value()?, self.dim);
        e.input_dim = self.hidden_dim;
        e.hidden_dim = self.hidden_dim;
        e.validate()?;
        Ok(TrainConfig::new(e))
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate(self.objective)?;
        self.train_config().map(|_| ())
    }

    pub fn strategy_tag(&self) -> String {
        let s = &self.strategy;
        let kind = match s.kind {
            StrategyKind::Normal => return "normal".into(),
            StrategyKind::Ed => "ed",
            StrategyKind::Efd => "efd",
            StrategyKind::Efed => "efed",
            StrategyKind::L => "l",
        };
        let pre = s.pretrain.map(|o| o.tag()).unwrap_or("-");
        if s.kind == StrategyKind::L {
            format!("{kind}-{pre}-{}", s.lambda)
        } else {
            format!("{kind}-{pre}")
        }
    }

    /// Flat axis values used to form blocks and methods in rank analysis.
    pub fn axes(&self) -> BTreeMap<String, String> {
        let mut a = BTreeMap::new();
        a.insert("dataset".into(), self.dataset.label());
        a.insert("space".into(), self.space.tag().into());
        a.insert("arch".into(), self.arch.tag().into());
        a.insert("dim".into(), self.dim.to_string());
        a.insert("objective".into(), self.objective.tag().into());
        a.insert("strategy".into(), self.strategy_tag());
        let stop = match self.stop.mode {
            StopMode::DevLoss => "dev",
            StopMode::TrainLoss => "train",
        };
        a.insert("stop".into(), stop.into());
        a.insert("seed".into(), self.seeds.init.to_string());
        a
    }
}

/// The six hierarchy scores plus the strict sibling variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub m_r: f64,
    pub m_o: f64,
    pub m_p: f64,
    pub m_b: f64,
    pub m_b_strict: f64,
    pub m_d: f64,
    pub m_dd: f64,
}

impl From<&HrcReport> for Scores {
    fn from(r: &HrcReport) -> Self {
        Scores { m_r: r.m_r, m_o: r.m_o, m_p: r.m_p, m_b: r.m_b, m_b_strict: r.m_b_strict, m_d: r.m_d, m_dd: r.m_dd }
    }
}

pub const METRICS: [&str; 8] = ["m_r", "m_o", "m_p", "m_b", "m_b_strict", "m_d", "m_dd", "task"];

/// One line of the result store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub fingerprint: String,
    pub axes: BTreeMap<String, String>,
    /// Absent for records that do not come from training (such as comb baselines).
    pub config: Option<ExperimentConfig>,
    pub ok: bool,
    pub error: Option<String>,
    pub scores: Option<Scores>,
    pub task_metric: Option<f64>,
    pub epochs_run: usize,
    pub wall_time_s: f64,
    pub profile: Option<StructureProfile>,
}

impl ResultRecord {
    /// Score by name; `m_d` is lower-is-better, everything else higher.
    pub fn metric(&self, name: &str) -> Option<f64> {
        let s = self.scores.as_ref();
        match name {
            "m_r" => s.map(|s| s.m_r),
            "m_o" => s.map(|s| s.m_o),
            "m_p" => s.map(|s| s.m_p),
            "m_b" => s.map(|s| s.m_b),
            "m_b_strict" => s.map(|s| s.m_b_strict),
            "m_d" => s.map(|s| s.m_d),
            "m_dd" => s.map(|s| s.m_dd),
            "task" => self.task_metric,
            _ => None,
        }
    }
}

pub fn higher_is_better(metric: &str) -> bool {
    metric != "m_d"
}

/// Trains one configuration; failures become failed records.
pub fn run_experiment(cfg: &ExperimentConfig) -> ResultRecord {
    run_with_source(cfg, None).0
}

/// As [`run_experiment`], also returning the restored-best embedding.
pub fn run_detailed(cfg: &ExperimentConfig) -> (ResultRecord, Option<EmbeddingTable>) {
    run_with_source(cfg, None)
}

fn run_with_source(cfg: &ExperimentConfig, cached: Option<&Source>) -> (ResultRecord, Option<EmbeddingTable>) {
    let start = Instant::now();
    let mut rec = ResultRecord {
        fingerprint: cfg.fingerprint(),
        axes: cfg.axes(),
        config: Some(cfg.clone()),
        ok: false,
        error: None,
        scores: None,
        task_metric: None,
        epochs_run: 0,
        wall_time_s: 0.0,
        profile: None,
    };
    let outcome = (|| -> Result<_> {
        cfg.validate()?;
        let owned;
        let src = match cached {
            Some(s) => s,
            None => {
                owned = resolve(&cfg.dataset, cfg.classes)?;
                &owned
            }
        };
        let data = src.dataset(&cfg.dataset.label());
        let (model, out) = run_strategy(&cfg.train_config()?, &cfg.strategy, cfg.objective, &data, &cfg.stop, cfg.seeds)?;
        Ok((out, src.profile(), model.embed(&data)?))
    })();
    let mut table = None;
    match outcome {
        Ok((out, profile, emb)) => {
            table = Some(emb);
            rec.ok = !out.failed;
            if out.failed {
                rec.error = Some("non-finite loss".into());
            }
            rec.scores = Some(Scores::from(&out.report));
            rec.task_metric = Some(out.task_metric);
            rec.epochs_run = out.phases.iter().map(|p| p.epochs_run).sum();
            rec.profile = profile;
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec.wall_time_s = start.elapsed().as_secs_f64();
    (rec, table)
}

/// Partition membership of one objective, for exact reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub objective: Objective,
    pub seed: u64,
    pub edges: Option<EdgeSplit>,
    pub nodes: Option<NodeSplit>,
}

pub fn split_manifest(cfg: &ExperimentConfig) -> Result<SplitManifest> {
    let data = resolve(&cfg.dataset, cfg.classes)?.dataset(&cfg.dataset.label());
    let p = Prepared::new(cfg.objective, &data, cfg.space_value()?, cfg.seeds.split)?;
    Ok(SplitManifest {
        objective: cfg.objective,
        seed: cfg.seeds.split,
        edges: p.edge_split().cloned(),
        nodes: p.node_split().cloned(),
    })
}

/// Append-only JSON-lines store indexed by fingerprint.
#[derive(Debug)]
pub struct ResultStore {
    path: PathBuf,
    records: Vec<ResultRecord>,
    index: HashSet<String>,
    file: Mutex<Option<File>>,
}

impl ResultStore {
    /// Loads existing records; a torn final line from an interrupted write is skipped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut records = Vec::new();
        if path.exists() {
            let r = BufReader::new(File::open(&path)?);
            for (n, line) in r.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ResultRecord>(&line) {
                    Ok(rec) => records.push(rec),
                    Err(e) => warn!("{}:{}: skipping unreadable record ({e})", path.display(), n + 1),
                }
            }
        }
        let index = records.iter().map(|r| r.fingerprint.clone()).collect();
        Ok(ResultStore { path, records, index, file: Mutex::new(None) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[ResultRecord] {
        &self.records
    }

    pub fn contains(&self, fingerprint: &str) -> bool {
        self.index.contains(fingerprint)
    }

    /// Serialised append of one line; safe to call from many workers.
    fn write_line(&self, rec: &ResultRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        let mut guard = self.file.lock().expect("store lock");
        if guard.is_none() {
            if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            *guard = Some(OpenOptions::new().create(true).append(true).open(&self.path)?);
        }
        let f = guard.as_mut().expect("opened");
        writeln!(f, "{line}")?;
        f.flush()?;
        Ok(())
    }

    pub fn append(&mut self, rec: ResultRecord) -> Result<()> {
        self.write_line(&rec)?;
        self.index.insert(rec.fingerprint.clone());
        self.records.push(rec);
        Ok(())
    }
}

fn default_spaces() -> Vec<SpaceKind> {
    vec![SpaceKind::Poincare]
}
fn default_archs() -> Vec<Arch> {
    vec![Arch::Gcn]
}
fn default_dims() -> Vec<usize> {
    vec![16]
}
fn default_objectives() -> Vec<Objective> {
    vec![Objective::Gd]
}
fn default_strategies() -> Vec<StrategySpec> {
    vec![StrategySpec::normal()]
}
fn default_stops() -> Vec<StopMode> {
    vec![StopMode::DevLoss]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_patience() -> usize {
    100
}
fn default_max_epochs() -> usize {
    5000
}

/// Cartesian grid over configuration axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub datasets: Vec<DatasetRef>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "default_spaces")]
    pub spaces: Vec<SpaceKind>,
    #[serde(default = "one")]
    pub curvature: f64,
    #[serde(default = "default_archs")]
    pub archs: Vec<Arch>,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default = "sixteen")]
    pub hidden_dim: usize,
    #[serde(default = "default_objectives")]
    pub objectives: Vec<Objective>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategySpec>,
    #[serde(default = "default_stops")]
    pub stops: Vec<StopMode>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HrcbError::invalid(format!("grid spec: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Every valid combination; invalid strategy/objective pairs are skipped.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for d in &self.datasets {
            for &space in &self.spaces {
                for &arch in &self.archs {
                    for &dim in &self.dims {
                        for &objective in &self.objectives {
                            for strategy in &self.strategies {
                                if strategy.validate(objective).is_err() {
                                    continue;
                                }
                                for &mode in &self.stops {
                                    for &seed in &self.seeds {
                                        out.push(ExperimentConfig {
                                            dataset: d.clone(),
                                            classes: self.classes,
                                            space,
                                            curvature: self.curvature,
                                            arch,
                                            dim,
                                            hidden_dim: self.hidden_dim,
                                            objective,
                                            strategy: *strategy,
                                            stop: StopStrategy { mode, patience: self.patience, max_epochs: self.max_epochs },
                                            seeds: Seeds::all(seed),
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SweepSummary {
    pub planned: usize,
    pub skipped: usize,
    pub ran: usize,
    pub failed: usize,
}

/// Runs every configuration not yet in the store (all of them when `force`).
pub fn sweep(configs: &[ExperimentConfig], store: &mut ResultStore, workers: usize, force: bool) -> Result<SweepSummary> {
    let mut seen = HashSet::new();
    let todo: Vec<&ExperimentConfig> = configs
        .iter()
        .filter(|c| {
            let fp = c.fingerprint();
            seen.insert(fp.clone()) && (force || !store.contains(&fp))
        })
        .collect();
    let mut summary = SweepSummary { planned: configs.len(), skipped: configs.len() - todo.len(), ..Default::default() };
    if todo.is_empty() {
        return Ok(summary);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HrcbError::invalid(format!("thread pool: {e}")))?;
    // resolved datasets are shared; graph contexts are built per run
    let cache: Mutex<HashMap<String, Arc<Source>>> = Mutex::new(HashMap::new());
    let source = |c: &ExperimentConfig| -> Result<Arc<Source>> {
        let key = serde_json::to_string(&(&c.dataset, c.classes))?;
        if let Some(s) = cache.lock().expect("cache lock").get(&key) {
            return Ok(s.clone());
        }
        let s = Arc::new(resolve(&c.dataset, c.classes)?);
        cache.lock().expect("cache lock").insert(key, s.clone());
        Ok(s)
    };
    let shared: &ResultStore = store;
    let results: Vec<Result<ResultRecord>> = pool.install(|| {
        todo.par_iter()
            .map(|c| {
                let rec = match source(c) {
                    Ok(s) => run_with_source(c, Some(&s)).0,
                    Err(e) => {
                        let mut r = run_with_source(c, None).0;
                        r.error.get_or_insert_with(|| e.to_string());
                        r
                    }
                };
                info!("{} {} ok={} ({:.1}s)", rec.fingerprint, c.dataset.label(), rec.ok, rec.wall_time_s);
                shared.write_line(&rec)?;
                Ok(rec)
            })
            .collect()
    });
    for r in results {
        let rec = r?;
        summary.ran += 1;
        summary.failed += usize::from(!rec.ok);
        store.index.insert(rec.fingerprint.clone());
        store.records.push(rec);
    }
    Ok(summary)
}

/// Which record axes form blocks and which axis names the compared methods.
///
/// Text form: `method=<axis> metric=<name|hrc> [blocks=<a,b,..>] [where <axis>=<v>,..]`.
/// `hrc` treats each of M_r, M_o, M_p and M_b as its own block. Without
/// `blocks` every axis other than the method forms the block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub method: String,
    pub metric: String,
    pub blocks: Option<Vec<String>>,
    pub filters: Vec<(String, String)>,
}

impl std::str::FromStr for BlockSpec {
    type Err = HrcbError;
    fn from_str(s: &str) -> Result<Self> {
        let (head, filt) = match s.split_once(" where ") {
            Some((h, f)) => (h, Some(f)),
            None => (s, None),
        };
        let mut spec = BlockSpec { method: String::new(), metric: String::new(), blocks: None, filters: Vec::new() };
        for tok in head.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| HrcbError::invalid(format!("expected key=value, got `{tok}`")))?;
            match k {
                "method" => spec.method = v.into(),
                "metric" => spec.metric = v.into(),
                "blocks" => spec.blocks = Some(v.split(',').map(str::to_string).collect()),
                _ => return Err(HrcbError::invalid(format!("unknown key `{k}`"))),
            }
        }
        if let Some(f) = filt {
            for cond in f.split(',').map(str::trim).filter(|c| !c.is_empty()) {
                let (k, v) = cond.split_once('=').ok_or_else(|| HrcbError::invalid(format!("bad filter `{cond}`")))?;
                spec.filters.push((k.trim().into(), v.trim().into()));
            }
        }
        if spec.method.is_empty() || spec.metric.is_empty() {
            return Err(HrcbError::invalid("block spec needs method= and metric="));
        }
        if spec.metric != "hrc" && !METRICS.contains(&spec.metric.as_str()) {
            return Err(HrcbError::invalid(format!("unknown metric `{}`", spec.metric)));
        }
        Ok(spec)
    }
}

/// Builds a block-by-method matrix; cells with several records are averaged.
pub fn build_matrix(records: &[ResultRecord], spec: &BlockSpec) -> Result<ResultMatrix> {
    let metrics: Vec<&str> = if spec.metric == "hrc" { vec!["m_r", "m_o", "m_p", "m_b"] } else { vec![spec.metric.as_str()] };
    let hib = higher_is_better(metrics[0]);
    let kept: Vec<&ResultRecord> = records
        .iter()
        .filter(|r| r.ok && spec.filters.iter().all(|(k, v)| r.axes.get(k) == Some(v)))
        .filter(|r| r.axes.contains_key(&spec.method))
        .collect();
    let methods: BTreeSet<String> = kept.iter().map(|r| r.axes[&spec.method].clone()).collect();
    let methods: Vec<String> = methods.into_iter().collect();
    let col: HashMap<&str, usize> = methods.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let mut cells: BTreeMap<Vec<String>, Vec<(f64, usize)>> = BTreeMap::new();
    for r in &kept {
        let mut key: Vec<String> = match &spec.blocks {
            Some(b) => b.iter().map(|a| r.axes.get(a).cloned().unwrap_or_default()).collect(),
            None => r.axes.iter().filter(|(k, _)| **k != spec.method).map(|(k, v)| format!("{k}={v}")).collect(),
        };
        for m in &metrics {
            if let Some(v) = r.metric(m) {
                key.push(m.to_string());
                let row = cells.entry(key.clone()).or_insert_with(|| vec![(0.0, 0); methods.len()]);
                let c = &mut row[col[r.axes[&spec.method].as_str()]];
                c.0 += v;
                c.1 += 1;
                key.pop();
            }
        }
    }
    let rows = cells
        .into_values()
        .map(|row| row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
        .collect();
    ResultMatrix::from_partial(methods, rows, hib)
}

pub fn rank_report(records: &[ResultRecord], spec: &BlockSpec) -> Result<RankReport> {
    nemenyi(&build_matrix(records, spec)?)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per record: axes, then every metric.
pub fn export_csv(records: &[ResultRecord]) -> String {
    let axes: BTreeSet<&String> = records.iter().flat_map(|r| r.axes.keys()).collect();
    let mut out = String::from("fingerprint,ok");
    for a in &axes {
        out.push(',');
        out.push_str(&csv_field(a));
    }
    for m in METRICS {
        out.push(',');
        out.push_str(m);
    }
    out.push_str(",epochs_run,wall_time_s,i_b,i_d\n");
    for r in records {
        let mut row = vec![r.fingerprint.clone(), r.ok.to_string()];
        row.extend(axes.iter().map(|a| csv_field(r.axes.get(*a).map(String::as_str).unwrap_or(""))));
        row.extend(METRICS.iter().map(|m| r.metric(m).map(|v| v.to_string()).unwrap_or_default()));
        row.push(r.epochs_run.to_string());
        row.push(r.wall_time_s.to_string());
        row.push(r.profile.map(|p| p.i_b.to_string()).unwrap_or_default());
        row.push(r.profile.map(|p| p.i_d.to_string()).unwrap_or_default());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Metric surfaces over (I_B, I_D): for every metric, the mean over records of
/// each dataset, one `i_b i_d value` row per dataset.
pub fn surfaces(records: &[ResultRecord]) -> BTreeMap<String, String> {
    let mut files = BTreeMap::new();
    let with_profile: Vec<&ResultRecord> = records.iter().filter(|r| r.ok && r.profile.is_some()).collect();
    for m in METRICS {
        let mut acc: BTreeMap<String, (f64, f64, f64, usize)> = BTreeMap::new();
        for r in &with_profile {
            if let Some(v) = r.metric(m) {
                let p = r.profile.expect("filtered");
                let e = acc.entry(r.axes.get("dataset").cloned().unwrap_or_default()).or_insert((p.i_b, p.i_d, 0.0, 0));
                e.2 += v;
                e.3 += 1;
            }
        }
        let mut s = String::from("i_b\ti_d\tvalue\tdataset\n");
        for (d, (ib, id, sum, n)) in acc {
            s.push_str(&format!("{ib}\t{id}\t{}\t{d}\n", sum / n as f64));
        }
        files.insert(format!("surface_{m}.tsv"), s);
    }
    files
}

/// Writes the CSV and all surface files into `dir`; returns the written paths.
pub fn export(records: &[ResultRecord], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv = dir.join("results.csv");
    fs::write(&csv, export_csv(records))?;
    written.push(csv);
    for (name, body) in surfaces(records) {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}
