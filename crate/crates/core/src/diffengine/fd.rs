//! Central finite-difference gradient checks.

use ndarray::Array2;

use super::optim::{Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Relative error with a floor on the denominator so near-zero entries
/// are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest per-coordinate relative error between the tape gradient of
/// `f(x)` and central differences with step `h`.
///
/// `f` receives a fresh tape and the input variable and must return a `1×1` node.
pub fn check<F>(x: &Array2<f64>, h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&mut tape, xv);
    let grads = tape.backward(loss).expect("finite loss");
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
    let eval = |xx: &Array2<f64>| {
        let mut t = Tape::new();
        let v = t.var(xx.clone());
        let l = f(&mut t, v);
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + h;
        let fp = eval(&xp);
        xp[[r, c]] = orig - h;
        let fm = eval(&xp);
        xp[[r, c]] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(analytic[[r, c]], numeric));
    }
    worst
}

/// Largest relative error over up to `per_tensor` entries of every trainable
/// parameter, comparing the tape gradient of `f` with central differences.
pub fn check_params<F>(params: &ParamSet, h: f64, per_tensor: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = params.collect_grads(&bound, &grads);
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let b = ps.bind(&mut t);
        let l = f(&mut t, &b)?;
        Ok(t.scalar(l))
    };
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for (id, g) in analytic {
        let len = g.len();
        let stride = len.div_ceil(per_tensor.max(1)).max(1);
        for idx in (0..len).step_by(stride) {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let orig = work.value(id)[[r, c]];
            work.get_mut(id).value[[r, c]] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).value[[r, c]] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).value[[r, c]] = orig;
            worst = worst.max(rel_err(g[[r, c]], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}
