//! Two-layer MLP / GCN / GAT encoders over any [`Space`].

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffengine::{geo, Bound, Csr, ParamId, ParamSet, Tape, Var};
use crate::error::{HrcbError, Result};
use crate::manifold::{EmbeddingTable, Space};
use crate::treegen::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Gcn,
    Gat,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Gcn => "gcn",
            Arch::Gat => "gat",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = HrcbError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Arch::Mlp),
            "gcn" => Ok(Arch::Gcn),
            "gat" => Ok(Arch::Gat),
            _ => Err(HrcbError::invalid(format!("unknown architecture `{s}`"))),
        }
    }
}

/// How attention logits are formed from distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    /// Softmax of `-d` over each node's neighbourhood (self-loop included).
    Masked,
    /// Row softmax of the dense product `D Ã` of the distance matrix with `Ã`.
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub space: Space,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub heads: usize,
    pub attention: Attention,
    /// Apply the rectifier after the last layer too.
    pub final_activation: bool,
}

impl EncoderConfig {
    pub fn new(arch: Arch, space: Space, output_dim: usize) -> Self {
        EncoderConfig {
            arch,
            space,
            input_dim: 16,
            hidden_dim: 16,
            output_dim,
            heads: 4,
            attention: Attention::Masked,
            final_activation: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(HrcbError::invalid("encoder dimensions must be positive"));
        }
        if self.arch == Arch::Gat && self.heads == 0 {
            return Err(HrcbError::invalid("GAT needs at least one head"));
        }
        Ok(())
    }
}

/// Graph structure prepared for message passing.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub n: usize,
    /// `D^{-1}(A + I)`.
    pub adj: Rc<Csr>,
    /// `(u, v)` for every nonzero of `Ã`, grouped by `u`.
    pub arcs: Rc<Vec<(usize, usize)>>,
    pub arc_src: Rc<Vec<usize>>,
    pub arc_dst: Rc<Vec<usize>>,
}

impl GraphContext {
    pub fn new(g: &Graph) -> Self {
        let n = g.n();
        let mut rows = Vec::with_capacity(n);
        let mut arcs = Vec::new();
        for u in 0..n {
            let mut nb: Vec<usize> = g.neighbors(u).to_vec();
            nb.push(u);
            nb.sort_unstable();
            let w = 1.0 / nb.len() as f64;
            rows.push(nb.iter().map(|&v| (v, w)).collect::<Vec<_>>());
            arcs.extend(nb.iter().map(|&v| (u, v)));
        }
        let arc_src = arcs.iter().map(|a| a.0).collect();
        let arc_dst = arcs.iter().map(|a| a.1).collect();
        GraphContext {
            n,
            adj: Rc::new(Csr::from_rows(n, &rows)),
            arcs: Rc::new(arcs),
            arc_src: Rc::new(arc_src),
            arc_dst: Rc::new(arc_dst),
        }
    }

    /// No edges: every node only sees itself.
    pub fn isolated(n: usize) -> Self {
        GraphContext::new(&Graph::new(n, &[]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerIds {
    w: Vec<ParamId>,
    b: ParamId,
}

/// Parameter handles of one encoder inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    /// Trainable tangent-space input table, absent for stacked encoders fed by another one.
    pub input: Option<ParamId>,
    layers: Vec<LayerIds>,
}

impl Encoder {
    /// Registers fresh parameters under `prefix`.
    pub fn new<R: Rng>(
        config: EncoderConfig,
        n_nodes: usize,
        with_input_table: bool,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let input = if with_input_table {
            let dist = Normal::new(0.0, 0.1).expect("valid");
            let t = Array2::from_shape_fn((n_nodes, config.input_dim), |_| dist.sample(rng));
            Some(params.add(format!("{prefix}.input"), t))
        } else {
            None
        };
        let dims = [(config.input_dim, config.hidden_dim), (config.hidden_dim, config.output_dim)];
        let heads = if config.arch == Arch::Gat { config.heads } else { 1 };
        let mut layers = Vec::new();
        for (l, &(din, dout)) in dims.iter().enumerate() {
            let dist = Normal::new(0.0, (1.0 / din as f64).sqrt()).expect("valid");
            let w = (0..heads)
                .map(|h| {
                    let m = Array2::from_shape_fn((dout, din), |_| dist.sample(rng));
                    params.add(format!("{prefix}.l{l}.w{h}"), m)
                })
                .collect();
            let b = params.add(format!("{prefix}.l{l}.b"), Array2::zeros((1, dout)));
            layers.push(LayerIds { w, b });
        }
        Ok(Encoder { config, input, layers })
    }

    /// Every parameter this encoder owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.input.into_iter().collect();
        for l in &self.layers {
            ids.extend(l.w.iter().copied());
            ids.push(l.b);
        }
        ids
    }

    /// Output points (`n × ambient`) recorded on `t`.
    ///
    /// `feed` replaces the input table with points already on the manifold.
    pub fn forward_tape(&self, t: &mut Tape, bound: &Bound, ctx: &GraphContext, feed: Option<Var>) -> Result<Var> {
        let space = self.config.space;
        let mut x = match (feed, self.input) {
            (Some(x), _) => x,
            (None, Some(id)) => embed_inputs(t, space, bound.var(id)),
            (None, None) => return Err(HrcbError::invalid("stacked encoder needs an input")),
        };
        let last = self.layers.len() - 1;
        for (l, ids) in self.layers.iter().enumerate() {
            let act = l < last || self.config.final_activation;
            let ws: Vec<Var> = ids.w.iter().map(|&w| bound.var(w)).collect();
            let b = bound.var(ids.b);
            x = match self.config.arch {
                Arch::Mlp => mlp_layer(t, space, x, ws[0], b, act),
                Arch::Gcn => gcn_layer(t, space, x, ctx, ws[0], b, act),
                Arch::Gat => gat_layer(t, space, x, ctx, &ws, b, act, self.config.attention),
            };
        }
        Ok(x)
    }

    pub fn forward(&self, params: &ParamSet, ctx: &GraphContext) -> Result<EmbeddingTable> {
        let mut t = Tape::new();
        let bound = params.bind(&mut t);
        let x = self.forward_tape(&mut t, &bound, ctx, None)?;
        EmbeddingTable::projected(self.config.space, t.value(x).clone())
    }
}

/// `exp0` of every row of a tangent table.
pub fn embed_inputs(t: &mut Tape, space: Space, table: Var) -> Var {
    geo::exp0(t, space, table)
}

fn finish(t: &mut Tape, space: Space, y: Var, b: Var, act: bool) -> Var {
    let y = geo::add_bias(t, space, y, b);
    if act {
        geo::activation(t, space, y)
    } else {
        y
    }
}

/// `σ((W ⊗ x) ⊕ b)`.
pub fn mlp_layer(t: &mut Tape, space: Space, x: Var, w: Var, b: Var, act: bool) -> Var {
    let y = geo::mobius_matvec(t, space, x, w);
    finish(t, space, y, b, act)
}

/// `σ((Ã ⊗ (W ⊗ x)) ⊕ b)` with aggregation in the tangent space at the origin.
pub fn gcn_layer(t: &mut Tape, space: Space, x: Var, ctx: &GraphContext, w: Var, b: Var, act: bool) -> Var {
    let y = geo::mobius_matvec(t, space, x, w);
    let u = geo::log0(t, space, y);
    let agg = t.spmm(ctx.adj.clone(), u);
    let y = geo::exp0(t, space, agg);
    finish(t, space, y, b, act)
}

/// Attention weights for one head: `E×1` over `ctx.arcs` (masked) or `n×n` (product).
pub fn attention_weights(t: &mut Tape, space: Space, y: Var, ctx: &GraphContext, mode: Attention) -> Var {
    match mode {
        Attention::Masked => {
            let d = t.pair_distance(y, ctx.arcs.clone(), space);
            let logits = t.neg(d);
            t.segment_softmax(logits, ctx.arc_src.clone(), ctx.n)
        }
        Attention::Product => {
            let n = ctx.n;
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
            let d = t.pair_distance(y, Rc::new(pairs), space);
            let dm = t.reshape(d, n, n);
            let a = t.constant(ctx.adj.to_dense());
            let logits = t.matmul(dm, a);
            let lse = t.row_logsumexp(logits);
            let ones = t.constant(Array2::ones((1, n)));
            let lse_b = t.matmul(lse, ones);
            let z = t.sub(logits, lse_b);
            t.exp(z)
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn gat_layer(
    t: &mut Tape,
    space: Space,
    x: Var,
    ctx: &GraphContext,
    ws: &[Var],
    b: Var,
    act: bool,
    mode: Attention,
) -> Var {
    let mut acc: Option<Var> = None;
    for &w in ws {
        let y = geo::mobius_matvec(t, space, x, w);
        let a = attention_weights(t, space, y, ctx, mode);
        let u = geo::log0(t, space, y);
        let agg = match mode {
            Attention::Masked => {
                let g = t.gather_rows(u, ctx.arc_dst.clone());
                let g = t.mul_col(g, a);
                t.segment_sum(g, ctx.arc_src.clone(), ctx.n)
            }
            Attention::Product => t.matmul(a, u),
        };
        acc = Some(match acc {
            None => agg,
            Some(s) => t.add(s, agg),
        });
    }
    let mean = t.scale(acc.expect("at least one head"), 1.0 / ws.len() as f64);
    let y = geo::exp0(t, space, mean);
    finish(t, space, y, b, act)
}
