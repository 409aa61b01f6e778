//! Row-wise manifold operations recorded on a tape.
//!
//! Points are stored one per row in ambient coordinates; tangent vectors at
//! the origin are stored in intrinsic coordinates (the hyperboloid's zero
//! time component is implicit).

use ndarray::Array2;

use super::tape::{Tape, Unary, Var};
use crate::manifold::{Space, SpaceKind, BALL_EPS};

const MIN_NORM: f64 = 1e-15;

fn clamped_row_norm(t: &mut Tape, a: Var) -> Var {
    let n = t.row_norm(a);
    t.clamp_min(n, MIN_NORM)
}

/// Scales each Poincaré row back inside radius `(1 - 1e-5)/sqrt(c)`.
pub fn project(t: &mut Tape, space: Space, x: Var) -> Var {
    match space.kind() {
        SpaceKind::Euclidean => x,
        SpaceKind::Poincare => {
            let rmax = (1.0 - BALL_EPS) / space.c().sqrt();
            let r = t.row_norm(x);
            let r = t.clamp_min(r, rmax);
            let inv = t.recip(r);
            let f = t.scale(inv, rmax);
            t.mul_col(x, f)
        }
        SpaceKind::Hyperboloid => {
            let d = t.shape(x).1;
            let spatial = t.slice_cols(x, 1, d);
            lift_spatial(t, space, spatial)
        }
    }
}

/// `[sqrt(K + |s|^2), s]` for each spatial row `s`.
fn lift_spatial(t: &mut Tape, space: Space, spatial: Var) -> Var {
    let sq = t.square(spatial);
    let ss = t.row_sum(sq);
    let ss = t.add_scalar(ss, space.k());
    let x0 = t.sqrt(ss);
    t.concat_cols(&[x0, spatial])
}

/// Exponential map at the origin applied to every row.
pub fn exp0(t: &mut Tape, space: Space, u: Var) -> Var {
    match space.kind() {
        SpaceKind::Euclidean => u,
        SpaceKind::Poincare => {
            let sc = space.c().sqrt();
            let n = clamped_row_norm(t, u);
            let arg = t.scale(n, sc);
            let th = t.tanh(arg);
            let inv = t.recip(arg);
            let s = t.mul(th, inv);
            let y = t.mul_col(u, s);
            project(t, space, y)
        }
        SpaceKind::Hyperboloid => {
            let sk = space.k().sqrt();
            let n = clamped_row_norm(t, u);
            let r = t.scale(n, 1.0 / sk);
            let sh = t.unary(r, Unary::Sinh);
            let inv = t.recip(r);
            let s = t.mul(sh, inv);
            let spatial = t.mul_col(u, s);
            lift_spatial(t, space, spatial)
        }
    }
}

/// Logarithmic map at the origin applied to every row.
pub fn log0(t: &mut Tape, space: Space, x: Var) -> Var {
    match space.kind() {
        SpaceKind::Euclidean => x,
        SpaceKind::Poincare => {
            let sc = space.c().sqrt();
            let n = clamped_row_norm(t, x);
            let arg = t.scale(n, sc);
            let at = t.unary(arg, Unary::Artanh);
            let inv = t.recip(arg);
            let s = t.mul(at, inv);
            t.mul_col(x, s)
        }
        SpaceKind::Hyperboloid => {
            let sk = space.k().sqrt();
            let d = t.shape(x).1;
            let spatial = t.slice_cols(x, 1, d);
            let n = clamped_row_norm(t, spatial);
            let r = t.scale(n, 1.0 / sk);
            let ash = t.unary(r, Unary::Asinh);
            let inv = t.recip(r);
            let s = t.mul(ash, inv);
            t.mul_col(spatial, s)
        }
    }
}

/// Row-wise `x ⊕ y`.
pub fn mobius_add(t: &mut Tape, space: Space, x: Var, y: Var) -> Var {
    match space.kind() {
        SpaceKind::Euclidean => t.add(x, y),
        SpaceKind::Poincare => {
            let c = space.c();
            let xy = t.row_dot(x, y);
            let x2 = t.row_dot(x, x);
            let y2 = t.row_dot(y, y);
            let xy2 = t.scale(xy, 2.0 * c);
            let cy2 = t.scale(y2, c);
            let a = t.add(xy2, cy2);
            let a = t.add_scalar(a, 1.0);
            let b = t.scale(x2, -c);
            let b = t.add_scalar(b, 1.0);
            let p = t.mul(x2, y2);
            let p = t.scale(p, c * c);
            let den = t.add(xy2, p);
            let den = t.add_scalar(den, 1.0);
            let inv = t.recip(den);
            let fa = t.mul(a, inv);
            let fb = t.mul(b, inv);
            let l = t.mul_col(x, fa);
            let r = t.mul_col(y, fb);
            let out = t.add(l, r);
            project(t, space, out)
        }
        SpaceKind::Hyperboloid => {
            let u = log0(t, space, y);
            hyperboloid_add_tangent(t, space, x, u)
        }
    }
}

/// Row-wise `W ⊗ x = exp0(W log0(x))` with `w` stored `out × in`.
pub fn mobius_matvec(t: &mut Tape, space: Space, x: Var, w: Var) -> Var {
    let u = log0(t, space, x);
    let wu = t.matmul_t(u, w);
    exp0(t, space, wu)
}

/// Adds the bias `exp0(b)` (with `b` a `1×d` tangent vector at the origin) to every row.
pub fn add_bias(t: &mut Tape, space: Space, x: Var, b: Var) -> Var {
    match space.kind() {
        SpaceKind::Euclidean => t.add_row(x, b),
        SpaceKind::Poincare => {
            let n = t.shape(x).0;
            let bp = exp0(t, space, b);
            let bb = t.broadcast_rows(bp, n);
            mobius_add(t, space, x, bb)
        }
        SpaceKind::Hyperboloid => {
            let n = t.shape(x).0;
            let bb = t.broadcast_rows(b, n);
            hyperboloid_add_tangent(t, space, x, bb)
        }
    }
}

/// `exp_x(P_{o→x}(v))` per row, where `v` holds intrinsic tangent vectors at the origin.
fn hyperboloid_add_tangent(t: &mut Tape, space: Space, x: Var, v: Var) -> Var {
    let (n, d1) = t.shape(x);
    let k = space.k();
    let sk = k.sqrt();
    let x0 = t.slice_cols(x, 0, 1);
    let xs = t.slice_cols(x, 1, d1);
    // P = (0, v) + <x_s, v> / (K + sqrt(K) x0) · (o + x)
    let num = t.row_dot(xs, v);
    let den = t.scale(x0, sk);
    let den = t.add_scalar(den, k);
    let inv = t.recip(den);
    let coef = t.mul(num, inv);
    let x0o = t.add_scalar(x0, sk);
    let p0 = t.mul(coef, x0o);
    let cs = t.mul_col(xs, coef);
    let ps = t.add(v, cs);
    // exp_x(P), keeping the spatial part and re-lifting
    let ps2 = t.row_dot(ps, ps);
    let p02 = t.square(p0);
    let mk = t.sub(ps2, p02);
    let nrm = t.sqrt(mk);
    let nrm = t.clamp_min(nrm, MIN_NORM);
    let r = t.scale(nrm, 1.0 / sk);
    let ch = t.unary(r, Unary::Cosh);
    let sh = t.unary(r, Unary::Sinh);
    let inv_n = t.recip(nrm);
    let f = t.mul(sh, inv_n);
    let f = t.scale(f, sk);
    let a = t.mul_col(xs, ch);
    let b = t.mul_col(ps, f);
    let spatial = t.add(a, b);
    debug_assert_eq!(t.shape(spatial).0, n);
    lift_spatial(t, space, spatial)
}

/// `exp0(ReLU(log0(x)))`.
pub fn activation(t: &mut Tape, space: Space, x: Var) -> Var {
    let u = log0(t, space, x);
    let r = t.relu(u);
    exp0(t, space, r)
}

/// Builds an `n×m` constant from a closure; handy for tests and masks.
pub fn constant_from_fn(t: &mut Tape, shape: (usize, usize), f: impl FnMut((usize, usize)) -> f64) -> Var {
    t.constant(Array2::from_shape_fn(shape, f))
}
