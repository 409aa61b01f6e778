//! Full-batch training loops, early stopping and pre-training strategies.

use log::{debug, warn};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffengine::{Adam, AdamConfig, AdamMode, Bound, ParamId, ParamSet, StepOutcome, Tape, Var};
use crate::encoders::{Encoder, EncoderConfig};
use crate::error::{HrcbError, Result};
use crate::manifold::EmbeddingTable;
use crate::metrics::{self, HrcReport};
use crate::objectives::{task_metric, Dataset, Objective, Part, Prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    DevLoss,
    TrainLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopStrategy {
    pub mode: StopMode,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for StopStrategy {
    fn default() -> Self {
        StopStrategy { mode: StopMode::DevLoss, patience: 100, max_epochs: 5000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Normal,
    Ed,
    Efd,
    Efed,
    L,
}

impl std::str::FromStr for StrategyKind {
    type Err = HrcbError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(StrategyKind::Normal),
            "ed" => Ok(StrategyKind::Ed),
            "efd" => Ok(StrategyKind::Efd),
            "efed" => Ok(StrategyKind::Efed),
            "l" => Ok(StrategyKind::L),
            _ => Err(HrcbError::invalid(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Downstream weight for `L`.
    pub lambda: f64,
    pub pretrain: Option<Objective>,
}

impl StrategySpec {
    pub fn normal() -> Self {
        StrategySpec { kind: StrategyKind::Normal, lambda: 1.0, pretrain: None }
    }

    pub fn validate(&self, downstream: Objective) -> Result<()> {
        match (self.kind, self.pretrain) {
            (StrategyKind::Normal, _) => Ok(()),
            (_, None) => Err(HrcbError::invalid("pre-training strategy needs a pre-training objective")),
            (_, Some(Objective::Lr)) => Err(HrcbError::invalid("LR cannot be a pre-training objective")),
            (_, Some(p)) if p == downstream => {
                Err(HrcbError::invalid(format!("pre-training objective equals downstream objective {p}")))
            }
            (StrategyKind::L, _) if !(0.0..=1.0).contains(&self.lambda) => {
                Err(HrcbError::invalid("lambda must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Independent seeds for data splitting, parameter initialisation and
/// per-epoch negative sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub init: u64,
    pub sampling: u64,
}

impl Seeds {
    pub fn all(s: u64) -> Self {
        Seeds { split: s, init: s, sampling: s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
    pub adam_mode: AdamMode,
    /// Separate linear head for LR; without it the embedding itself is the logit vector.
    pub lr_head: bool,
}

impl TrainConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        TrainConfig { encoder, adam: AdamConfig::default(), adam_mode: AdamMode::RiemannianAdam, lr_head: true }
    }
}

/// Parameters plus the encoder stack that reads them.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ParamSet,
    /// Applied in order; only the first owns an input table.
    pub stack: Vec<Encoder>,
    pub head: Option<(ParamId, ParamId)>,
}

impl Model {
    pub fn forward_tape(&self, t: &mut Tape, bound: &Bound, data: &Dataset) -> Result<Var> {
        let mut x = None;
        for enc in &self.stack {
            x = Some(enc.forward_tape(t, bound, &data.ctx, x)?);
        }
        x.ok_or_else(|| HrcbError::invalid("empty encoder stack"))
    }

    pub fn embed(&self, data: &Dataset) -> Result<EmbeddingTable> {
        let mut t = Tape::new();
        let bound = self.params.bind(&mut t);
        let x = self.forward_tape(&mut t, &bound, data)?;
        EmbeddingTable::projected(self.space(), t.value(x).clone())
    }

    pub fn space(&self) -> crate::manifold::Space {
        self.stack.last().expect("non-empty stack").config.space
    }

    fn head_vars(&self, bound: &Bound) -> Option<(Var, Var)> {
        self.head.map(|(w, b)| (bound.var(w), bound.var(b)))
    }

    pub fn head_values(&self) -> Option<(&Array2<f64>, &Array2<f64>)> {
        self.head.map(|(w, b)| (self.params.value(w), self.params.value(b)))
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, p)| p.frozen).map(|(id, _)| id).collect()
    }

    fn freeze_stack(&mut self) {
        for enc in &self.stack {
            for id in enc.param_ids() {
                self.params.set_frozen(id, true);
            }
        }
    }
}

/// What one optimisation phase did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub objectives: Vec<(Objective, f64)>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    /// Checksum of frozen tensors after every epoch.
    pub frozen_checksums: Vec<u64>,
    pub skipped_steps: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    /// Scores averaged over the dataset's evaluation hierarchies.
    pub report: HrcReport,
    pub per_tree: Vec<HrcReport>,
    pub task_metric: f64,
    pub phases: Vec<PhaseLog>,
    pub failed: bool,
}

fn new_head(model: &mut Model, in_dim: usize, nc: usize, rng: &mut ChaCha8Rng) -> (ParamId, ParamId) {
    let dist = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).expect("valid");
    let w = Array2::from_shape_fn((nc, in_dim), |_| dist.sample(rng));
    let wid = model.params.add("head.w", w);
    let bid = model.params.add("head.b", Array2::zeros((1, nc)));
    (wid, bid)
}

/// Builds a model: one encoder, plus an LR head when `with_head`.
pub fn init_model(cfg: &TrainConfig, data: &Dataset, with_head: bool, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let enc = Encoder::new(cfg.encoder, data.n(), true, "enc0", &mut params, &mut rng)?;
    let mut model = Model { params, stack: vec![enc], head: None };
    if with_head {
        attach_head(&mut model, cfg, data, &mut rng)?;
    }
    Ok(model)
}

fn attach_head(model: &mut Model, cfg: &TrainConfig, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = model.stack.last().expect("encoder").config.output_dim;
    if cfg.lr_head {
        model.head = Some(new_head(model, d, data.num_classes.max(1), rng));
    } else if d != data.num_classes {
        return Err(HrcbError::invalid(format!(
            "headless LR needs output dim {d} to equal the class count {}",
            data.num_classes
        )));
    }
    Ok(())
}

fn weighted_loss(
    t: &mut Tape,
    x: Var,
    head: Option<(Var, Var)>,
    objectives: &[(&Prepared, f64)],
    part: Part,
    epoch: u64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(p, w) in objectives {
        let l = p.loss(t, x, head, part, epoch)?;
        let l = if w == 1.0 { l } else { t.scale(l, w) };
        total = Some(match total {
            None => l,
            Some(s) => t.add(s, l),
        });
    }
    total.ok_or_else(|| HrcbError::invalid("no objective with positive weight"))
}

/// Optimises the trainable parameters of `model` on a weighted objective sum,
/// leaving `model` at the best checkpoint.
pub fn run_phase(
    model: &mut Model,
    objectives: &[(&Prepared, f64)],
    data: &Dataset,
    stop: &StopStrategy,
    cfg: &TrainConfig,
) -> Result<PhaseLog> {
    let objectives: Vec<(&Prepared, f64)> = objectives.iter().copied().filter(|&(_, w)| w > 0.0).collect();
    let use_dev = stop.mode == StopMode::DevLoss && objectives.iter().all(|(p, _)| p.has(Part::Dev));
    if stop.mode == StopMode::DevLoss && !use_dev {
        warn!("empty dev partition; stopping on training loss");
    }
    let frozen = model.frozen_ids();
    let mut adam = Adam::new(cfg.adam, cfg.adam_mode);
    let mut log = PhaseLog {
        objectives: objectives.iter().map(|(p, w)| (p.objective, *w)).collect(),
        epochs_run: 0,
        best_epoch: None,
        train_loss: Vec::new(),
        dev_loss: Vec::new(),
        frozen_checksums: Vec::new(),
        skipped_steps: 0,
        failed: false,
    };
    let mut best: Option<(f64, ParamSet)> = None;
    for epoch in 0..stop.max_epochs {
        let mut t = Tape::new();
        let bound = model.params.bind(&mut t);
        let x = model.forward_tape(&mut t, &bound, data)?;
        let head = model.head_vars(&bound);
        let train = weighted_loss(&mut t, x, head, &objectives, Part::Train, epoch as u64)?;
        let train_v = t.scalar(train);
        let crit = if use_dev {
            let dev = weighted_loss(&mut t, x, head, &objectives, Part::Dev, epoch as u64)?;
            let v = t.scalar(dev);
            log.dev_loss.push(v);
            v
        } else {
            train_v
        };
        log.train_loss.push(train_v);
        log.epochs_run = epoch + 1;
        if !train_v.is_finite() {
            warn!("non-finite training loss at epoch {epoch}; halting");
            log.failed = true;
            break;
        }
        if best.as_ref().is_none_or(|(b, _)| crit < *b) {
            best = Some((crit, model.params.clone()));
            log.best_epoch = Some(epoch);
        } else if epoch - log.best_epoch.unwrap_or(0) >= stop.patience {
            debug!("no improvement for {} epochs; stopping at {epoch}", stop.patience);
            break;
        }
        let grads = t.backward(train)?;
        let g = model.params.collect_grads(&bound, &grads);
        drop(t);
        if adam.step(&mut model.params, &g)? == StepOutcome::SkippedNonFinite {
            log.skipped_steps += 1;
        }
        log.frozen_checksums.push(model.params.checksum(&frozen));
    }
    if let Some((_, p)) = best {
        model.params = p;
    }
    Ok(log)
}

/// HRC scores over every evaluation hierarchy, plus their mean.
pub fn evaluate_model(model: &Model, data: &Dataset) -> Result<(HrcReport, Vec<HrcReport>)> {
    let e = model.embed(data)?;
    let per: Vec<HrcReport> =
        data.eval.iter().map(|(h, map)| metrics::evaluate(h, &e.select(map))).collect::<Result<_>>()?;
    let k = per.len() as f64;
    let mean = |f: fn(&HrcReport) -> f64| per.iter().map(f).sum::<f64>() / k;
    let report = HrcReport {
        m_r: mean(|r| r.m_r),
        m_o: mean(|r| r.m_o),
        m_p: mean(|r| r.m_p),
        m_b: mean(|r| r.m_b),
        m_b_strict: mean(|r| r.m_b_strict),
        m_d: mean(|r| r.m_d),
        m_dd: mean(|r| r.m_dd),
        n: per.iter().map(|r| r.n).sum(),
        space: per[0].space.clone(),
    };
    Ok((report, per))
}

/// Single-objective training from a fresh model.
pub fn train(cfg: &TrainConfig, objective: Objective, data: &Dataset, stop: &StopStrategy, seeds: Seeds) -> Result<(Model, RunOutcome)> {
    run_strategy(cfg, &StrategySpec::normal(), objective, data, stop, seeds)
}

/// Runs a pre-training strategy and scores the final model.
pub fn run_strategy(
    cfg: &TrainConfig,
    spec: &StrategySpec,
    downstream: Objective,
    data: &Dataset,
    stop: &StopStrategy,
    seeds: Seeds,
) -> Result<(Model, RunOutcome)> {
    spec.validate(downstream)?;
    let space = cfg.encoder.space;
    let prepare = |o| Ok::<_, HrcbError>(Prepared::new(o, data, space, seeds.split)?.with_sampling_seed(seeds.sampling));
    let down = prepare(downstream)?;
    let pre = spec.pretrain.map(prepare).transpose()?;
    let seed = seeds.init;
    let needs_head = downstream == Objective::Lr;
    let mut phases = Vec::new();
    let model = match spec.kind {
        StrategyKind::Normal => {
            let mut m = init_model(cfg, data, needs_head, seed)?;
            phases.push(run_phase(&mut m, &[(&down, 1.0)], data, stop, cfg)?);
            m
        }
        StrategyKind::L => {
            let mut m = init_model(cfg, data, needs_head, seed)?;
            let pre = pre.as_ref().expect("validated");
            phases.push(run_phase(&mut m, &[(&down, spec.lambda), (pre, 1.0 - spec.lambda)], data, stop, cfg)?);
            m
        }
        StrategyKind::Ed | StrategyKind::Efd => {
            let mut m = init_model(cfg, data, needs_head, seed)?;
            phases.push(run_phase(&mut m, &[(pre.as_ref().expect("validated"), 1.0)], data, stop, cfg)?);
            if spec.kind == StrategyKind::Efd {
                m.freeze_stack();
            }
            phases.push(run_phase(&mut m, &[(&down, 1.0)], data, stop, cfg)?);
            m
        }
        StrategyKind::Efed => {
            // the pre-trained encoder emits hidden-dim points that feed a fresh encoder
            let mut inner_cfg = *cfg;
            inner_cfg.encoder.output_dim = cfg.encoder.hidden_dim;
            let mut m = init_model(&inner_cfg, data, false, seed)?;
            phases.push(run_phase(&mut m, &[(pre.as_ref().expect("validated"), 1.0)], data, stop, &inner_cfg)?);
            m.freeze_stack();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_efed);
            let mut outer = cfg.encoder;
            outer.input_dim = cfg.encoder.hidden_dim;
            let enc = Encoder::new(outer, data.n(), false, "enc1", &mut m.params, &mut rng)?;
            m.stack.push(enc);
            if needs_head {
                attach_head(&mut m, cfg, data, &mut rng)?;
            }
            phases.push(run_phase(&mut m, &[(&down, 1.0)], data, stop, cfg)?);
            m
        }
    };
    let (report, per_tree) = evaluate_model(&model, data)?;
    let e = model.embed(data)?;
    let task = task_metric(&down, data, &e, model.head_values())?;
    let failed = phases.iter().any(|p| p.failed);
    Ok((model, RunOutcome { report, per_tree, task_metric: task, phases, failed }))
}
