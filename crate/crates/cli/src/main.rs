use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hrcb::comb::{comb_embed, downcast, BigTable, BigTableFile, CombConfig, ConePolicy, Downcast};
use hrcb::encoders::Arch;
use hrcb::manifold::{EmbeddingTable, SpaceKind};
use hrcb::metrics::{self, HrcReport};
use hrcb::objectives::Objective;
use hrcb::runner::{
    self, export, rank_report, run_detailed, store_path, BlockSpec, DatasetRef, ExperimentConfig, GridSpec, ResultRecord,
    ResultStore,
};
use hrcb::stats::{cd_diagram_data, write_cd_data};
use hrcb::trainer::{Seeds, StopMode, StopStrategy, StrategyKind, StrategySpec};
use hrcb::treegen::{assign_classes, disease_like, generate_tree, hillclimb_structure, mix_trees, reference_params, GenParams, Hierarchy, MixParams, MixPolicy};

#[derive(Parser)]
#[command(name = "hrcb", version, about = "Hierarchy-aware evaluation of hyperbolic embeddings")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a tree from parameters, a builtin name, or structure targets.
    GenTree(GenTreeArgs),
    /// Structure statistics of an edge list.
    Profile {
        edges: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Overlap several builtin trees into one graph.
    Mix(MixArgs),
    /// Combinatorial embedding of a tree and its scores.
    Comb(CombArgs),
    /// Score an embedding against a tree.
    Eval(EvalArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Run a grid of configurations, skipping finished ones.
    Sweep {
        grid: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Defaults to the number of available cores.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Friedman/Nemenyi ranking over stored results.
    Stats {
        /// e.g. "method=arch metric=hrc where objective=gd"
        spec: String,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Write critical-difference plot data here.
        #[arg(long)]
        cd_out: Option<PathBuf>,
    },
    /// Write CSV and metric surfaces from the store.
    Export {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value = "export")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenTreeArgs {
    /// Reference structure such as Tree1, T5 or disease.
    #[arg(long, conflicts_with_all = ["params", "target_ib"])]
    builtin: Option<String>,
    /// JSON file with generator parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, requires = "target_id")]
    target_ib: Option<f64>,
    #[arg(long)]
    target_id: Option<f64>,
    #[arg(long, default_value_t = 3280)]
    nodes: usize,
    #[arg(long, default_value_t = 2000)]
    budget: usize,
    /// Overrides the seed of builtin or file parameters.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long, value_delimiter = ',', default_value = "T1,T2,T3,T4,T5,T6,T7,T8")]
    trees: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyArg::AllPairs)]
    policy: PolicyArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    AllPairs,
    Chain,
}

#[derive(Args)]
struct CombArgs {
    edges: PathBuf,
    #[arg(long, default_value_t = 3000)]
    precision_bits: usize,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    #[arg(long)]
    full_circle: bool,
    /// Also score the embedding rounded to these widths.
    #[arg(long, value_delimiter = ',')]
    downcast: Vec<usize>,
    /// Save the embedding as JSON with decimal coordinates.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Comb JSON (`.json`) or a text table written by `train`.
    embedding: PathBuf,
    edges: PathBuf,
    #[arg(long)]
    precision_bits: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Full experiment config as JSON; other flags are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin dataset name, used unless --edges is given.
    #[arg(long, default_value = "T1")]
    dataset: String,
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value = "poincare")]
    space: String,
    #[arg(long, default_value_t = 1.0)]
    curvature: f64,
    #[arg(long, default_value = "gcn")]
    arch: String,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value = "gd")]
    objective: String,
    #[arg(long, default_value = "normal")]
    strategy: String,
    #[arg(long)]
    pretrain: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = StopArg::Dev)]
    stop: StopArg,
    #[arg(long, default_value_t = 100)]
    patience: usize,
    #[arg(long, default_value_t = 5000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append the record to the result store.
    #[arg(long)]
    record: bool,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    embedding_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StopArg {
    Dev,
    Train,
}

fn print_report(label: &str, r: &HrcReport) {
    println!(
        "{label}: M_r {:.4}  M_o {:.4}  M_p {:.4}  M_b {:.4} (strict {:.4})  M_d {:.4}  M_dd {:.4}",
        r.m_r, r.m_o, r.m_p, r.m_b, r.m_b_strict, r.m_d, r.m_dd
    );
}

fn write_tree(h: &Hierarchy, out: &Path, labels: Option<&Path>) -> Result<()> {
    h.write_edge_list(out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(l) = labels {
        h.write_labels(l).with_context(|| format!("writing {}", l.display()))?;
    }
    Ok(())
}

fn load_tree(edges: &Path, labels: Option<&Path>) -> Result<Hierarchy> {
    let mut h = Hierarchy::load_edge_list(edges).with_context(|| format!("reading {}", edges.display()))?;
    if let Some(l) = labels {
        h.load_labels(l).with_context(|| format!("reading {}", l.display()))?;
    }
    Ok(h)
}

fn gen_tree(a: GenTreeArgs) -> Result<()> {
    let h = if let (Some(ib), Some(id)) = (a.target_ib, a.target_id) {
        let r = hillclimb_structure(ib, id, a.nodes, a.budget, a.seed.unwrap_or(0))?;
        println!("reached gap {:.4} after {} steps", r.gap, r.steps);
        println!("{}", serde_json::to_string(&r.params)?);
        r.tree
    } else if a.builtin.as_deref().is_some_and(|b| b.eq_ignore_ascii_case("disease")) {
        disease_like()
    } else {
        let mut p: GenParams = match (&a.builtin, &a.params) {
            (Some(name), _) => reference_params(name).with_context(|| format!("unknown builtin `{name}`"))?,
            (None, Some(path)) => serde_json::from_reader(BufReader::new(File::open(path)?))?,
            (None, None) => bail!("one of --builtin, --params or --target-ib/--target-id is required"),
        };
        if let Some(s) = a.seed {
            p.seed = s;
        }
        generate_tree(&p)?
    };
    let h = match a.classes {
        Some(nc) => assign_classes(&h, nc, a.seed.unwrap_or(0))?,
        None => h,
    };
    let prof = h.profile()?;
    println!("nodes {}  height {}  I_B {:.4}  I_D {:.4}", prof.n, prof.height, prof.i_b, prof.i_d);
    write_tree(&h, &a.out, a.labels_out.as_deref())
}

fn profile(edges: &Path, labels: Option<&Path>) -> Result<()> {
    let h = load_tree(edges, labels)?;
    let p = h.profile()?;
    let leaves = (0..h.len()).filter(|&v| h.children(v).is_empty()).count();
    let max_children = (0..h.len()).map(|v| h.children(v).len()).max().unwrap_or(0);
    println!("nodes        {}", h.len());
    println!("edges        {}", h.edges().len());
    println!("height       {}", p.height);
    println!("leaves       {leaves}");
    println!("max children {max_children}");
    if let Some(l) = h.labels() {
        let labelled = l.iter().filter(|c| c.is_some()).count();
        println!("classes      {} ({labelled} labelled nodes)", h.num_classes());
    }
    println!("I_B          {:.4}", p.i_b);
    println!("I_D          {:.4}", p.i_d);
    Ok(())
}

fn mix(a: MixArgs) -> Result<()> {
    let trees = a
        .trees
        .iter()
        .map(|t| generate_tree(&reference_params(t).with_context(|| format!("unknown builtin `{t}`"))?).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    let policy = match a.policy {
        PolicyArg::AllPairs => MixPolicy::AllPairs,
        PolicyArg::Chain => MixPolicy::Chain,
    };
    let m = mix_trees(&trees, &MixParams { gamma_mu: a.gamma, gamma_sigma: a.gamma_sigma, seed: a.seed, policy })?;
    println!("nodes {}  edges {}  merges {}", m.graph.n(), m.graph.edges().len(), m.merges);
    let mut out = BufWriter::new(File::create(&a.out)?);
    for &(u, v) in m.graph.edges() {
        use std::io::Write;
        writeln!(out, "{u} {v}")?;
    }
    if let Some(path) = a.labels_out {
        use std::io::Write;
        let mut f = BufWriter::new(File::create(path)?);
        for (v, t) in m.tags.iter().enumerate() {
            writeln!(f, "{v} {}", t.map_or(-1, |c| c as i64))?;
        }
    }
    Ok(())
}

fn comb(a: CombArgs) -> Result<()> {
    let h = load_tree(&a.edges, None)?;
    let cone = if a.full_circle { ConePolicy::FullCircle } else { ConePolicy::HalfCircle };
    let t = comb_embed(&h, &CombConfig { bits: a.precision_bits, tau: a.tau, cone })?;
    print_report(&format!("comb {} bits", a.precision_bits), &metrics::evaluate(&h, &t)?);
    for b in a.downcast {
        let d = downcast(&t, b)?;
        println!("{b} bits: {} colliding nodes", d.collisions());
        print_report(&format!("comb {b} bits"), &metrics::evaluate(&h, &d)?);
    }
    if let Some(out) = a.out {
        serde_json::to_writer(BufWriter::new(File::create(&out)?), &t.to_file()?)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let h = load_tree(&a.edges, None)?;
    let is_json = a.embedding.extension().is_some_and(|e| e == "json");
    let report = if is_json {
        let f: BigTableFile = serde_json::from_reader(BufReader::new(File::open(&a.embedding)?))?;
        let t = BigTable::from_file(&f)?;
        match a.precision_bits {
            Some(b) if b != t.bits() => metrics::evaluate(&h, &downcast(&t, b)?)?,
            _ => metrics::evaluate(&h, &Downcast::Big(t))?,
        }
    } else {
        let t = EmbeddingTable::read_text(BufReader::new(File::open(&a.embedding)?))?;
        metrics::evaluate(&h, &t)?
    };
    if report.n != h.len() {
        bail!("embedding covers {} nodes, tree has {}", report.n, h.len());
    }
    print_report(&report.space, &report);
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    if let Some(path) = &a.config {
        return Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?);
    }
    let dataset = match &a.edges {
        Some(e) => DatasetRef::File { edges: e.clone(), labels: a.labels.clone() },
        None => DatasetRef::builtin(&a.dataset),
    };
    let objective: Objective = a.objective.parse()?;
    let mut cfg = ExperimentConfig::new(
        dataset,
        SpaceKind::from_tag(&a.space)?,
        a.arch.parse::<Arch>()?,
        a.dim,
        objective,
        a.seed,
    );
    cfg.classes = a.classes;
    cfg.curvature = a.curvature;
    cfg.strategy = StrategySpec {
        kind: a.strategy.parse::<StrategyKind>()?,
        lambda: a.lambda,
        pretrain: a.pretrain.as_deref().map(str::parse).transpose()?,
    };
    let mode = match a.stop {
        StopArg::Dev => StopMode::DevLoss,
        StopArg::Train => StopMode::TrainLoss,
    };
    cfg.stop = StopStrategy { mode, patience: a.patience, max_epochs: a.max_epochs };
    cfg.seeds = Seeds::all(a.seed);
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let (rec, table) = run_detailed(&cfg);
    print_record(&rec);
    if let (Some(path), Some(t)) = (&a.embedding_out, &table) {
        t.write_text(BufWriter::new(File::create(path)?))?;
    }
    if a.record {
        let mut store = ResultStore::open(store_path(a.store.as_deref()))?;
        store.append(rec.clone())?;
        println!("appended to {}", store.path().display());
    }
    if !rec.ok {
        bail!("run failed: {}", rec.error.unwrap_or_default());
    }
    Ok(())
}

fn print_record(r: &ResultRecord) {
    println!("fingerprint {}  ok {}  epochs {}  {:.1}s", r.fingerprint, r.ok, r.epochs_run, r.wall_time_s);
    if let Some(e) = &r.error {
        println!("error: {e}");
    }
    if let Some(s) = &r.scores {
        println!(
            "M_r {:.4}  M_o {:.4}  M_p {:.4}  M_b {:.4} (strict {:.4})  M_d {:.4}  M_dd {:.4}",
            s.m_r, s.m_o, s.m_p, s.m_b, s.m_b_strict, s.m_d, s.m_dd
        );
    }
    if let Some(t) = r.task_metric {
        println!("task metric {t:.4}");
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::GenTree(a) => gen_tree(a),
        Cmd::Profile { edges, labels } => profile(&edges, labels.as_deref()),
        Cmd::Mix(a) => mix(a),
        Cmd::Comb(a) => comb(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Train(a) => train(a),
        Cmd::Sweep { grid, store, workers, force } => {
            let configs = GridSpec::load(&grid)?.expand();
            let mut st = ResultStore::open(store_path(store.as_deref()))?;
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let s = runner::sweep(&configs, &mut st, workers, force)?;
            println!("planned {}  skipped {}  ran {}  failed {}", s.planned, s.skipped, s.ran, s.failed);
            Ok(())
        }
        Cmd::Stats { spec, store, cd_out } => {
            let st = ResultStore::open(store_path(store.as_deref()))?;
            let spec: BlockSpec = spec.parse()?;
            let report = rank_report(st.records(), &spec)?;
            print!("{}", report.render());
            if let Some(p) = cd_out {
                fs::write(p, write_cd_data(&cd_diagram_data(&report)))?;
            }
            Ok(())
        }
        Cmd::Export { store, out } => {
            let st = ResultStore::open(store_path(store.as_deref()))?;
            for p in export(st.records(), &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}
