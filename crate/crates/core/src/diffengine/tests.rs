use std::rc::Rc;

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::check;
use super::geo;
use super::*;
use crate::manifold::{Space, SpaceKind};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
}

/// Weighted sum with fixed pseudo-random weights so every output coordinate matters.
fn readout(t: &mut Tape, v: Var) -> Var {
    let (r, c) = t.shape(v);
    let w = Array2::from_shape_fn((r, c), |(i, j)| 0.3 + ((i * 7 + j * 3) % 5) as f64 * 0.37);
    let wv = t.constant(w);
    let p = t.mul(v, wv);
    t.sum(p)
}

fn spaces() -> [Space; 3] {
    [Space::euclidean(), Space::poincare(1.0), Space::hyperboloid(1.0)]
}

/// Random rows on the manifold.
fn rand_points(rng: &mut ChaCha8Rng, space: Space, n: usize, d: usize, scale: f64) -> Array2<f64> {
    let mut out = Array2::zeros((n, space.ambient_dim(d)));
    for i in 0..n {
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        let p = space.exp0(&u);
        out.row_mut(i).iter_mut().zip(&p).for_each(|(a, b)| *a = *b);
    }
    out
}

#[test]
fn sum_and_square_norm_gradients() {
    let mut t = Tape::new();
    let x = t.var(array![[1.0, -2.0], [0.5, 3.0]]);
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &Array2::<f64>::ones((2, 2)));

    let mut t = Tape::new();
    let xv = array![[1.0, -2.0, 0.25]];
    let x = t.var(xv.clone());
    let sq = t.square(x);
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &(2.0 * &xv));
}

#[test]
fn backward_rejects_non_scalar_and_nan() {
    let mut t = Tape::new();
    let x = t.var(array![[1.0, 2.0]]);
    assert!(t.backward(x).is_err());
    let l = t.scalar_const(f64::NAN);
    assert!(t.backward(l).is_err());
}

#[test]
fn unary_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases: [(Unary, f64, f64); 15] = [
        (Unary::Relu, -1.0, 1.0),
        (Unary::Exp, -2.0, 2.0),
        (Unary::Ln, 0.2, 3.0),
        (Unary::Tanh, -2.0, 2.0),
        (Unary::Artanh, -0.9, 0.9),
        (Unary::Arcosh, 1.1, 4.0),
        (Unary::Asinh, -3.0, 3.0),
        (Unary::Sqrt, 0.1, 4.0),
        (Unary::Cosh, -2.0, 2.0),
        (Unary::Sinh, -2.0, 2.0),
        (Unary::Square, -2.0, 2.0),
        (Unary::Softplus, -5.0, 5.0),
        (Unary::Abs, -2.0, 2.0),
        (Unary::Recip, 0.5, 3.0),
        (Unary::Sigmoid, -4.0, 4.0),
    ];
    for (f, lo, hi) in cases {
        for _ in 0..20 {
            let x = rand_mat(&mut rng, 2, 3, lo, hi);
            let err = check(&x, H, |t, v| {
                let y = t.unary(v, f);
                readout(t, y)
            });
            assert!(err < TOL, "{f:?}: {err}");
        }
    }
}

#[test]
fn nondifferentiable_points_use_conventions() {
    let mut t = Tape::new();
    let x = t.var(array![[0.0, 1.0, 2.0]]);
    let r = t.relu(x);
    let a = t.unary(x, Unary::Abs);
    let c = t.unary(x, Unary::Arcosh);
    let s = t.add(r, a);
    let s = t.add(s, c);
    let l = t.sum(s);
    let g = t.backward(l).unwrap();
    let gx = g.get(x).unwrap();
    assert_eq!(gx[[0, 0]], 0.0);
    assert!(gx.iter().all(|v| v.is_finite()));
}

#[test]
fn binary_and_shape_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x = rand_mat(&mut rng, 4, 3, -1.0, 1.0);
        let other = rand_mat(&mut rng, 4, 3, 0.5, 1.5);
        let w = rand_mat(&mut rng, 2, 3, -1.0, 1.0);
        let m = rand_mat(&mut rng, 3, 2, -1.0, 1.0);
        let row = rand_mat(&mut rng, 1, 3, -1.0, 1.0);
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
            ("add", Box::new(|t: &mut Tape, v| {
                let o = t.constant(other.clone());
                let y = t.add(v, o);
                let y = t.mul(y, v);
                readout(t, y)
            })),
            ("sub", Box::new(|t: &mut Tape, v| {
                let o = t.constant(other.clone());
                let y = t.sub(o, v);
                let y = t.mul(y, y);
                readout(t, y)
            })),
            ("div", Box::new(|t: &mut Tape, v| {
                let o = t.constant(other.clone());
                let y = t.div(v, o);
                let one = t_add_one(t, v);
                let z = t.div(o, one);
                let y = t.add(y, z);
                readout(t, y)
            })),
            ("add_row", Box::new(|t: &mut Tape, v| {
                let r = t.constant(row.clone());
                let y = t.add_row(v, r);
                let first = t.slice_cols(v, 0, 3);
                let r1 = t.slice_cols(first, 0, 3);
                let r1 = t.gather_rows(r1, Rc::new(vec![1]));
                let y = t.add_row(y, r1);
                let y = t.square(y);
                readout(t, y)
            })),
            ("mul_col", Box::new(|t: &mut Tape, v| {
                let s = t.row_sum(v);
                let y = t.mul_col(v, s);
                readout(t, y)
            })),
            ("matmul", Box::new(|t: &mut Tape, v| {
                let mm = t.constant(m.clone());
                let y = t.matmul(v, mm);
                let y = t.square(y);
                readout(t, y)
            })),
            ("matmul_t", Box::new(|t: &mut Tape, v| {
                let ww = t.constant(w.clone());
                let y = t.matmul_t(v, ww);
                let vt = t.slice_cols(v, 0, 2);
                let rows = t_slice_rows(t, vt);
                let sq = t.matmul_t(y, rows);
                let sq = t.square(sq);
                readout(t, sq)
            })),
            ("clamp", Box::new(|t: &mut Tape, v| {
                let a = t.clamp_min(v, -0.3);
                let b = t.clamp_max(a, 0.4);
                let y = t.mul(b, v);
                readout(t, y)
            })),
            ("concat", Box::new(|t: &mut Tape, v| {
                let a = t.slice_cols(v, 0, 1);
                let b = t.slice_cols(v, 1, 3);
                let sq = t.square(b);
                let y = t.concat_cols(&[sq, a, b]);
                readout(t, y)
            })),
            ("gather_segment", Box::new(|t: &mut Tape, v| {
                let g = t.gather_rows(v, Rc::new(vec![3, 0, 0, 2, 1, 3]));
                let g = t.square(g);
                let s = t.segment_sum(g, Rc::new(vec![0, 1, 1, 0, 2, 1]), 3);
                readout(t, s)
            })),
            ("pick_reshape", Box::new(|t: &mut Tape, v| {
                let r = t.reshape(v, 6, 2);
                let r = t.square(r);
                let p = t.pick_cols(r, Rc::new(vec![0, 1, 1, 0, 1, 0]));
                readout(t, p)
            })),
            ("spmm", Box::new(|t: &mut Tape, v| {
                let csr = Csr::from_rows(4, &[vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)], vec![(0, 0.2), (3, 0.8)], vec![(2, 0.3), (3, 0.3), (1, 0.4)]]);
                let y = t.spmm(Rc::new(csr), v);
                let y = t.square(y);
                readout(t, y)
            })),
            ("segment_softmax", Box::new(|t: &mut Tape, v| {
                let col = t.reshape(v, 12, 1);
                let seg = Rc::new(vec![0, 0, 1, 1, 1, 2, 0, 2, 3, 3, 3, 3]);
                let y = t.segment_softmax(col, seg, 4);
                let y = t.mul(y, col);
                readout(t, y)
            })),
            ("row_logsumexp", Box::new(|t: &mut Tape, v| {
                let y = t.row_logsumexp(v);
                readout(t, y)
            })),
            ("mean_norm_dot", Box::new(|t: &mut Tape, v| {
                let n = t.row_norm(v);
                let o = t.constant(other.clone());
                let d = t.row_dot(v, o);
                let y = t.mul(n, d);
                t.mean(y)
            })),
        ];
        for (name, f) in checks {
            let err = check(&x, H, |t, v| f(t, v));
            assert!(err < TOL, "{name}: {err}");
        }
    }
}

fn t_add_one(t: &mut Tape, v: Var) -> Var {
    let s = t.square(v);
    t.add_scalar(s, 1.0)
}

fn t_slice_rows(t: &mut Tape, v: Var) -> Var {
    t.gather_rows(v, Rc::new(vec![0, 1]))
}

#[test]
fn segment_softmax_rows_are_distributions() {
    let mut t = Tape::new();
    let a = t.constant(array![[1.0], [2.0], [-3.0], [0.5], [700.0], [699.0]]);
    let y = t.segment_softmax(a, Rc::new(vec![0, 0, 1, 1, 2, 2]), 3);
    let v = t.value(y);
    for s in 0..3 {
        let tot = v[[2 * s, 0]] + v[[2 * s + 1, 0]];
        assert!((tot - 1.0).abs() < 1e-12);
    }
}

fn all_pairs(n: usize) -> Rc<Vec<(usize, usize)>> {
    let mut p = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            p.push((i, j));
        }
    }
    Rc::new(p)
}

/// Poincaré and hyperboloid distances assembled from elementary ops.
fn composite_distance(t: &mut Tape, space: Space, x: Var, pairs: &[(usize, usize)]) -> Var {
    let a = t.gather_rows(x, Rc::new(pairs.iter().map(|p| p.0).collect()));
    let b = t.gather_rows(x, Rc::new(pairs.iter().map(|p| p.1).collect()));
    let c = space.c();
    match space.kind() {
        SpaceKind::Poincare => {
            let diff = t.sub(a, b);
            let s = t.row_dot(diff, diff);
            let a2 = t.row_dot(a, a);
            let b2 = t.row_dot(b, b);
            let al = t.scale(a2, -c);
            let al = t.add_scalar(al, 1.0);
            let be = t.scale(b2, -c);
            let be = t.add_scalar(be, 1.0);
            let den = t.mul(al, be);
            let z = t.div(s, den);
            let z = t.scale(z, 2.0 * c);
            let z = t.add_scalar(z, 1.0);
            let d = t.unary(z, Unary::Arcosh);
            t.scale(d, 1.0 / c.sqrt())
        }
        SpaceKind::Hyperboloid => {
            let m = t.shape(x).1;
            let (a0, as_) = (t.slice_cols(a, 0, 1), t.slice_cols(a, 1, m));
            let (b0, bs) = (t.slice_cols(b, 0, 1), t.slice_cols(b, 1, m));
            let sp = t.row_dot(as_, bs);
            let tm = t.mul(a0, b0);
            let ip = t.sub(sp, tm);
            let z = t.scale(ip, -c);
            let d = t.unary(z, Unary::Arcosh);
            t.scale(d, space.k().sqrt())
        }
        SpaceKind::Euclidean => {
            let diff = t.sub(a, b);
            t.row_norm(diff)
        }
    }
}

#[test]
fn fused_distance_matches_composite_route() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for space in spaces() {
        for _ in 0..20 {
            let u = rand_mat(&mut rng, 5, 3, -1.2, 1.2);
            let pairs = all_pairs(5);
            let mut t = Tape::new();
            let uv = t.var(u);
            let xv = geo::exp0(&mut t, space, uv);
            let fused = t.pair_distance(xv, pairs.clone(), space);
            let lf = readout(&mut t, fused);
            let comp = composite_distance(&mut t, space, xv, &pairs);
            let lc = readout(&mut t, comp);
            for k in 0..pairs.len() {
                let (f, c) = (t.value(fused)[[k, 0]], t.value(comp)[[k, 0]]);
                assert!((f - c).abs() < 1e-8 * (1.0 + c), "{space}: {f} vs {c}");
            }
            let gf = t.backward(lf).unwrap().get(uv).unwrap().clone();
            let gc = t.backward(lc).unwrap().get(uv).unwrap().clone();
            for (a, b) in gf.iter().zip(gc.iter()) {
                assert!(super::fd::rel_err(*a, *b) < 1e-6, "{space}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn fused_distance_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for space in spaces() {
        for _ in 0..20 {
            let x = rand_points(&mut rng, space, 4, 3, 1.0);
            let pairs = all_pairs(4);
            let err = check(&x, H, |t, v| {
                let d = t.pair_distance(v, pairs.clone(), space);
                readout(t, d)
            });
            // hyperboloid coordinates are perturbed off the sheet by the FD step,
            // where the fused adjoint still differentiates the same formula
            assert!(err < TOL, "{space}: {err}");
        }
    }
}

#[test]
fn geo_ops_match_slice_implementations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for space in spaces() {
        let u = rand_mat(&mut rng, 4, 3, -1.0, 1.0);
        let b = rand_mat(&mut rng, 1, 3, -0.5, 0.5);
        let w = rand_mat(&mut rng, 2, 3, -1.0, 1.0);
        let mut t = Tape::new();
        let uv = t.var(u.clone());
        let x = geo::exp0(&mut t, space, uv);
        let back = geo::log0(&mut t, space, x);
        let bv = t.var(b.clone());
        let xb = geo::add_bias(&mut t, space, x, bv);
        let wv = t.var(w.clone());
        let xw = geo::mobius_matvec(&mut t, space, x, wv);
        let act = geo::activation(&mut t, space, x);
        let bias_pt = space.exp0(b.row(0).as_slice().unwrap());
        for i in 0..4 {
            let ui = u.row(i).to_vec();
            let xi = space.exp0(&ui);
            let row = |v: Var| t.value(v).row(i).to_vec();
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-10 * (1.0 + q.abs()));
            assert!(close(&row(x), &xi), "{space} exp0");
            assert!(close(&row(back), &ui), "{space} log0");
            assert!(close(&row(xb), &space.mobius_add(&xi, &bias_pt)), "{space} bias {:?} {:?}", row(xb), space.mobius_add(&xi, &bias_pt));
            assert!(close(&row(xw), &space.mobius_matvec(w.view(), &xi)), "{space} matvec");
            let relu: Vec<f64> = space.log0(&xi).iter().map(|v| v.max(0.0)).collect();
            assert!(close(&row(act), &space.exp0(&relu)), "{space} activation");
        }
    }
}

#[test]
fn geo_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for space in spaces() {
        for _ in 0..20 {
            let u = rand_mat(&mut rng, 3, 3, -1.0, 1.0);
            let b = rand_mat(&mut rng, 1, 3, -0.5, 0.5);
            let w = rand_mat(&mut rng, 3, 3, -1.0, 1.0);
            let y = rand_mat(&mut rng, 3, 3, -1.0, 1.0);
            let err = check(&u, H, |t, v| {
                let x = geo::exp0(t, space, v);
                let bv = t.constant(b.clone());
                let x = geo::add_bias(t, space, x, bv);
                let wv = t.constant(w.clone());
                let x = geo::mobius_matvec(t, space, x, wv);
                let yv = t.constant(y.clone());
                let yp = geo::exp0(t, space, yv);
                let x = geo::mobius_add(t, space, x, yp);
                let x = geo::activation(t, space, x);
                let l = geo::log0(t, space, x);
                readout(t, l)
            });
            assert!(err < TOL, "{space}: {err}");
            // gradients with respect to the bias and weights
            let err = check(&b, H, |t, bv| {
                let uv = t.constant(u.clone());
                let x = geo::exp0(t, space, uv);
                let x = geo::add_bias(t, space, x, bv);
                let l = geo::log0(t, space, x);
                readout(t, l)
            });
            assert!(err < TOL, "{space} bias: {err}");
            let err = check(&w, H, |t, wv| {
                let uv = t.constant(u.clone());
                let x = geo::exp0(t, space, uv);
                let x = geo::mobius_matvec(t, space, x, wv);
                let l = geo::log0(t, space, x);
                readout(t, l)
            });
            assert!(err < TOL, "{space} weights: {err}");
        }
    }
}

#[test]
fn tree_distortion_gradient_matches_finite_differences() {
    // 0 -> {1, 2}, 1 -> {3, 4}, 2 -> {5}
    let parent = [usize::MAX, 0, 0, 1, 1, 2];
    let depth = [0usize, 1, 1, 2, 2, 2];
    let tree_dist = |mut a: usize, mut b: usize| {
        let mut d = 0;
        while a != b {
            if depth[a] >= depth[b] {
                a = parent[a];
            } else {
                b = parent[b];
            }
            d += 1;
        }
        d as f64
    };
    let pairs = all_pairs(6);
    let dg = Array2::from_shape_fn((pairs.len(), 1), |(k, _)| tree_dist(pairs[k].0, pairs[k].1));
    let space = Space::poincare(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x = rand_points(&mut rng, space, 6, 2, 1.5);
        let err = check(&x, H, |t, v| {
            let d = t.pair_distance(v, pairs.clone(), space);
            let g = t.constant(dg.clone());
            let r = t.sub(d, g);
            let a = t.unary(r, Unary::Abs);
            t.sum(a)
        });
        assert!(err < TOL, "{err}");
    }
}

#[test]
fn zero_gradient_leaves_params_and_counts_step() {
    let mut ps = ParamSet::new();
    let id = ps.add("w", array![[1.0, -2.0]]);
    let mut opt = Adam::new(AdamConfig::default(), AdamMode::EuclideanAdam);
    let out = opt.step(&mut ps, &[(id, Array2::zeros((1, 2)))]).unwrap();
    assert_eq!(out, StepOutcome::Applied);
    assert_eq!(ps.value(id), &array![[1.0, -2.0]]);
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn first_adam_step_is_sign_scaled() {
    let g = array![[0.5, -3.0, 1e-3]];
    let mut ps = ParamSet::new();
    let id = ps.add("w", Array2::zeros((1, 3)));
    let mut opt = Adam::new(AdamConfig::default(), AdamMode::EuclideanAdam);
    opt.step(&mut ps, &[(id, g.clone())]).unwrap();
    for j in 0..3 {
        let expect = -0.01 * g[[0, j]] / (g[[0, j]].abs() + 1e-8);
        assert!((ps.value(id)[[0, j]] - expect).abs() < 1e-15);
    }
}

#[test]
fn non_finite_gradient_skips_step() {
    let mut ps = ParamSet::new();
    let id = ps.add("w", array![[1.0]]);
    let mut opt = Adam::new(AdamConfig::default(), AdamMode::EuclideanAdam);
    let out = opt.step(&mut ps, &[(id, array![[f64::NAN]])]).unwrap();
    assert_eq!(out, StepOutcome::SkippedNonFinite);
    assert_eq!(opt.step_count(), 0);
    assert_eq!(ps.value(id), &array![[1.0]]);
}

#[test]
fn riemannian_adam_converges_to_target() {
    for space in [Space::poincare(1.0), Space::hyperboloid(1.0)] {
        let target = space.exp0(&[0.8, -0.5]);
        let start = space.exp0(&[-0.6, 0.9]);
        let mut ps = ParamSet::new();
        let id = ps.add_on_manifold("x", Array2::from_shape_vec((1, start.len()), start).unwrap(), space);
        let mut opt = Adam::new(AdamConfig::default(), AdamMode::RiemannianAdam);
        let tgt = Array2::from_shape_vec((1, target.len()), target.clone()).unwrap();
        for _ in 0..2000 {
            let mut t = Tape::new();
            let b = ps.bind(&mut t);
            let tv = t.constant(tgt.clone());
            let both = t.concat_cols(&[b.var(id), tv]);
            let m = target.len();
            let stacked = t.reshape(both, 2, m);
            let d = t.pair_distance(stacked, Rc::new(vec![(0, 1)]), space);
            let l = t.square(d);
            let l = t.sum(l);
            let g = t.backward(l).unwrap();
            let grads = ps.collect_grads(&b, &g);
            opt.step(&mut ps, &grads).unwrap();
            assert!(space.contains(ps.value(id).row(0).as_slice().unwrap()));
        }
        let d = space.dist(ps.value(id).row(0).as_slice().unwrap(), &target);
        assert!(d < 1e-3, "{space}: {d}");
    }
}

#[test]
fn riemannian_adam_keeps_rows_on_manifold() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for space in [Space::poincare(1.0), Space::hyperboloid(1.0)] {
        let x = rand_points(&mut rng, space, 5, 3, 2.5);
        let mut ps = ParamSet::new();
        let id = ps.add_on_manifold("x", x, space);
        let mut opt = Adam::new(AdamConfig { lr: 0.5, ..Default::default() }, AdamMode::RiemannianAdam);
        for _ in 0..50 {
            let g = rand_mat(&mut rng, 5, space.ambient_dim(3), -10.0, 10.0);
            opt.step(&mut ps, &[(id, g)]).unwrap();
            for r in ps.value(id).rows() {
                assert!(space.contains(r.as_slice().unwrap()));
            }
        }
    }
}

#[test]
fn frozen_params_bind_as_constants() {
    let mut ps = ParamSet::new();
    let a = ps.add("a", array![[1.0, 2.0]]);
    let b = ps.add("b", array![[3.0, 4.0]]);
    ps.set_frozen(a, true);
    let mut t = Tape::new();
    let bound = ps.bind(&mut t);
    let s = t.mul(bound.var(a), bound.var(b));
    let l = t.sum(s);
    let g = t.backward(l).unwrap();
    assert!(g.get(bound.var(a)).is_none());
    let grads = ps.collect_grads(&bound, &g);
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].1, array![[1.0, 2.0]]);
    let json = ps.to_json().unwrap();
    assert_eq!(ParamSet::from_json(&json).unwrap(), ps);
}
