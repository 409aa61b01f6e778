//! Trainable parameter storage and the Adam / Riemannian Adam update rules.

use log::warn;
use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use crate::error::{HrcbError, Result};
use crate::manifold::Space;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// One named tensor. Manifold-valued tensors hold one point per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub frozen: bool,
    pub manifold: Option<Space>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Tape handles for every parameter of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.params.push(Param { name: name.into(), value, frozen: false, manifold: None });
        ParamId(self.params.len() - 1)
    }

    pub fn add_on_manifold(&mut self, name: impl Into<String>, value: Array2<f64>, space: Space) -> ParamId {
        self.params.push(Param { name: name.into(), value, frozen: false, manifold: Some(space) });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Records every parameter on the tape; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if p.frozen { tape.constant(p.value.clone()) } else { tape.var(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradients of the trainable parameters; missing ones are zero.
    pub fn collect_grads(&self, bound: &Bound, grads: &Grads) -> Vec<(ParamId, Array2<f64>)> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, p)| {
                let g = grads.get(bound.var(id)).cloned().unwrap_or_else(|| Array2::zeros(p.value.dim()));
                (id, g)
            })
            .collect()
    }

    /// Order-sensitive checksum of every tensor's bits, used to audit freezing.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in ids {
            for v in self.params[id.0].value.iter() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdamMode {
    EuclideanAdam,
    /// Manifold-valued parameters follow geodesics; flat ones fall back to Adam.
    RiemannianAdam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

/// Adam state: moment buffers per parameter and a shared step count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub mode: AdamMode,
    step: u64,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig, mode: AdamMode) -> Self {
        Adam { config, mode, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Any non-finite gradient skips the whole step.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(ParamId, Array2<f64>)]) -> Result<StepOutcome> {
        for (id, g) in grads {
            if g.dim() != params.value(*id).dim() {
                return Err(HrcbError::DimensionMismatch { expected: params.value(*id).len(), got: g.len() });
            }
        }
        if grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            warn!("non-finite gradient; skipping optimizer step {}", self.step + 1);
            return Ok(StepOutcome::SkippedNonFinite);
        }
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let p = params.get_mut(*id);
            if p.frozen {
                continue;
            }
            match (self.mode, p.manifold) {
                (AdamMode::RiemannianAdam, Some(space)) if space.is_hyperbolic() => {
                    riemannian_update(space, p, g, &mut self.m[id.0], &mut self.v[id.0], self.config, bc1, bc2);
                }
                _ => {
                    let m = self.m[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
                    let v = self.v[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
                    Zip::from(&mut p.value).and(m).and(v).and(g).for_each(|x, m, v, &g| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    });
                    if let Some(space) = p.manifold {
                        for mut row in p.value.rows_mut() {
                            space.project_in_place(row.as_slice_mut().expect("standard layout"));
                        }
                    }
                }
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[allow(clippy::too_many_arguments)]
fn riemannian_update(
    space: Space,
    p: &mut Param,
    g: &Array2<f64>,
    m: &mut Option<Array2<f64>>,
    v: &mut Option<Array2<f64>>,
    cfg: AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    let m = m.get_or_insert_with(|| Array2::zeros(g.dim()));
    let v = v.get_or_insert_with(|| Array2::zeros((g.nrows(), 1)));
    for (i, ((mut x, gr), mut mr)) in
        p.value.axis_iter_mut(Axis(0)).zip(g.axis_iter(Axis(0))).zip(m.axis_iter_mut(Axis(0))).enumerate()
    {
        let xs = x.to_vec();
        let rg = space.egrad_to_rgrad(&xs, &gr.to_vec());
        let mut mv: Vec<f64> = mr.iter().zip(&rg).map(|(m, r)| cfg.beta1 * m + (1.0 - cfg.beta1) * r).collect();
        let sq = space.inner(&xs, &rg, &rg);
        v[[i, 0]] = cfg.beta2 * v[[i, 0]] + (1.0 - cfg.beta2) * sq;
        let denom = (v[[i, 0]] / bc2).sqrt() + cfg.eps;
        let dir: Vec<f64> = mv.iter().map(|m| -cfg.lr * (m / bc1) / denom).collect();
        let dir = space.proj_tangent(&xs, &dir);
        let new_x = space.exp(&xs, &dir);
        mv = space.proj_tangent(&xs, &mv);
        let moved = space.transport(&xs, &new_x, &mv);
        x.iter_mut().zip(&new_x).for_each(|(a, b)| *a = *b);
        mr.iter_mut().zip(&moved).for_each(|(a, b)| *a = *b);
    }
}
