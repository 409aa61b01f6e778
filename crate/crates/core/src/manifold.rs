//! Geometry of the three model spaces: Euclidean space, the Poincaré ball
//! and the hyperboloid (Lorentz) model.
//!
//! Every space carries an absolute curvature `c > 0` and `K = 1/c`. The
//! Euclidean space ignores `c`. Hyperboloid points live in `R^{d+1}` with the
//! Minkowski form `<x,y>_L = <x,y> - 2 x0 y0` and satisfy `<x,x>_L = -K`,
//! `x0 > 0`; the hyperboloid origin is `[sqrt(K), 0, ..., 0]`.
//!
//! The slice-level methods on [`Space`] are unchecked and used on hot paths
//! (metrics, training). [`Point`] and [`Tangent`] wrap them with dimension,
//! space and manifold checks.

use std::fmt;
use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{HrcbError, Result};

/// Relative margin kept between Poincaré points and the ball boundary.
pub const BALL_EPS: f64 = 1e-5;
/// Bound on artanh arguments.
pub const ARTANH_BOUND: f64 = 1.0 - 1e-15;
/// Tolerance for the hyperboloid constraint and tangency, relative to scale.
pub const LORENTZ_TOL: f64 = 1e-9;

const MIN_NORM: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Euclidean,
    Poincare,
    Hyperboloid,
}

impl SpaceKind {
    pub fn tag(self) -> &'static str {
        match self {
            SpaceKind::Euclidean => "euclidean",
            SpaceKind::Poincare => "poincare",
            SpaceKind::Hyperboloid => "hyperboloid",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag.to_ascii_lowercase().as_str() {
            "euclidean" | "r" => Ok(SpaceKind::Euclidean),
            "poincare" | "d" | "ball" => Ok(SpaceKind::Poincare),
            "hyperboloid" | "h" | "lorentz" => Ok(SpaceKind::Hyperboloid),
            other => Err(HrcbError::invalid(format!("unknown space `{other}`"))),
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Deserialize)]
struct SpaceRepr {
    kind: SpaceKind,
    #[serde(default = "unit_curvature")]
    c: f64,
}

fn unit_curvature() -> f64 {
    1.0
}

impl TryFrom<SpaceRepr> for Space {
    type Error = HrcbError;

    fn try_from(r: SpaceRepr) -> Result<Self> {
        Space::new(r.kind, r.c)
    }
}

/// A model space with its absolute curvature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceRepr")]
pub struct Space {
    kind: SpaceKind,
    c: f64,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(c={})", self.kind, self.c)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
fn minkowski(a: &[f64], b: &[f64]) -> f64 {
    dot(&a[1..], &b[1..]) - a[0] * b[0]
}

/// `arcosh(1 + t)` for `t >= 0`, accurate for small `t`.
#[inline]
pub fn acosh1p(t: f64) -> f64 {
    let t = t.max(0.0);
    (t + (t * (t + 2.0)).sqrt()).ln_1p()
}

#[inline]
pub(crate) fn clamped_artanh(x: f64) -> f64 {
    x.clamp(-ARTANH_BOUND, ARTANH_BOUND).atanh()
}

impl Space {
    pub fn new(kind: SpaceKind, c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(HrcbError::invalid(format!("curvature must be positive, got {c}")));
        }
        Ok(Space { kind, c })
    }

    pub fn euclidean() -> Self {
        Space { kind: SpaceKind::Euclidean, c: 1.0 }
    }

    pub fn poincare(c: f64) -> Self {
        Space::new(SpaceKind::Poincare, c).expect("curvature must be positive")
    }

    pub fn hyperboloid(c: f64) -> Self {
        Space::new(SpaceKind::Hyperboloid, c).expect("curvature must be positive")
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// `K = 1/c`.
    pub fn k(&self) -> f64 {
        1.0 / self.c
    }

    pub fn is_hyperbolic(&self) -> bool {
        self.kind != SpaceKind::Euclidean
    }

    /// Number of stored coordinates for an intrinsic dimension `d`.
    pub fn ambient_dim(&self, d: usize) -> usize {
        match self.kind {
            SpaceKind::Hyperboloid => d + 1,
            _ => d,
        }
    }

    pub fn intrinsic_dim(&self, ambient: usize) -> usize {
        match self.kind {
            SpaceKind::Hyperboloid => ambient.saturating_sub(1),
            _ => ambient,
        }
    }

    pub fn origin(&self, d: usize) -> Vec<f64> {
        let mut o = vec![0.0; self.ambient_dim(d)];
        if self.kind == SpaceKind::Hyperboloid {
            o[0] = self.k().sqrt();
        }
        o
    }

    /// Radius that projected Poincaré points never exceed.
    pub fn max_ball_radius(&self) -> f64 {
        (1.0 - BALL_EPS) / self.c.sqrt()
    }

    /// Checks the point invariant of this space.
    pub fn contains(&self, x: &[f64]) -> bool {
        if x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self.kind {
            SpaceKind::Euclidean => true,
            SpaceKind::Poincare => self.c * norm_sq(x) < 1.0,
            SpaceKind::Hyperboloid => {
                if x.is_empty() || x[0] <= 0.0 {
                    return false;
                }
                let k = self.k();
                let scale = k.max(x[0] * x[0]);
                (minkowski(x, x) + k).abs() <= LORENTZ_TOL * scale
            }
        }
    }

    /// Maps a raw coordinate vector onto the manifold.
    ///
    /// Poincaré vectors outside radius `(1 - 1e-5)/sqrt(c)` are scaled onto
    /// it; hyperboloid vectors get `x0 = sqrt(K + |spatial|^2)`.
    pub fn project(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(HrcbError::NonFinite("cannot project a non-finite vector".into()));
        }
        let mut x = raw.to_vec();
        self.project_in_place(&mut x);
        Ok(x)
    }

    pub(crate) fn project_in_place(&self, x: &mut [f64]) {
        match self.kind {
            SpaceKind::Euclidean => {}
            SpaceKind::Poincare => {
                let n = norm_sq(x).sqrt();
                let r = self.max_ball_radius();
                if n > r {
                    let s = r / n;
                    x.iter_mut().for_each(|v| *v *= s);
                }
            }
            SpaceKind::Hyperboloid => {
                x[0] = (self.k() + norm_sq(&x[1..])).sqrt();
            }
        }
    }

    /// Projects an ambient vector onto the tangent space at `x`.
    pub fn proj_tangent(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        match self.kind {
            SpaceKind::Hyperboloid => {
                let s = minkowski(x, v) / self.k();
                v.iter().zip(x).map(|(vi, xi)| vi + s * xi).collect()
            }
            _ => v.to_vec(),
        }
    }

    /// Deviation from tangency: `|<x,v>_L|` on the hyperboloid, zero elsewhere.
    pub fn tangent_residual(&self, x: &[f64], v: &[f64]) -> f64 {
        match self.kind {
            SpaceKind::Hyperboloid => minkowski(x, v).abs(),
            _ => 0.0,
        }
    }

    fn lambda(&self, x: &[f64]) -> f64 {
        2.0 / (1.0 - self.c * norm_sq(x))
    }

    /// Riemannian inner product of two tangent vectors at `x`.
    pub fn inner(&self, x: &[f64], u: &[f64], v: &[f64]) -> f64 {
        match self.kind {
            SpaceKind::Euclidean => dot(u, v),
            SpaceKind::Poincare => {
                let l = self.lambda(x);
                l * l * dot(u, v)
            }
            SpaceKind::Hyperboloid => minkowski(u, v),
        }
    }

    pub fn tangent_norm(&self, x: &[f64], v: &[f64]) -> f64 {
        self.inner(x, v, v).max(0.0).sqrt()
    }

    /// Möbius addition `x ⊕_c y`.
    pub fn mobius_add(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match self.kind {
            SpaceKind::Euclidean => x.iter().zip(y).map(|(a, b)| a + b).collect(),
            SpaceKind::Poincare => {
                let mut out = poincare_mobius_add(self.c, x, y);
                self.project_in_place(&mut out);
                out
            }
            SpaceKind::Hyperboloid => {
                let o = self.origin(x.len() - 1);
                let v0 = self.log(&o, y);
                let v = self.transport(&o, x, &v0);
                self.exp(x, &v)
            }
        }
    }

    /// Möbius matrix-vector product `W ⊗_c x` with `W` of shape `out × in`
    /// acting on intrinsic coordinates.
    pub fn mobius_matvec(&self, w: ArrayView2<'_, f64>, x: &[f64]) -> Vec<f64> {
        let apply = |u: &[f64]| -> Vec<f64> {
            w.rows().into_iter().map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum()).collect()
        };
        match self.kind {
            SpaceKind::Euclidean => apply(x),
            SpaceKind::Poincare => {
                let xn = norm_sq(x).sqrt();
                if xn < MIN_NORM {
                    return vec![0.0; w.nrows()];
                }
                let wx = apply(x);
                let wxn = norm_sq(&wx).sqrt();
                if wxn < MIN_NORM {
                    return vec![0.0; w.nrows()];
                }
                let sc = self.c.sqrt();
                let r = ((wxn / xn) * clamped_artanh(sc * xn)).tanh() / sc;
                let mut out: Vec<f64> = wx.iter().map(|v| r * v / wxn).collect();
                self.project_in_place(&mut out);
                out
            }
            SpaceKind::Hyperboloid => {
                let u = self.log0(x);
                self.exp0(&apply(&u))
            }
        }
    }

    /// Exponential map at the origin from intrinsic tangent coordinates.
    ///
    /// For the hyperboloid the tangent vector is `(0, u)`.
    pub fn exp0(&self, u: &[f64]) -> Vec<f64> {
        match self.kind {
            SpaceKind::Euclidean => u.to_vec(),
            SpaceKind::Poincare => {
                let n = norm_sq(u).sqrt();
                if n < MIN_NORM {
                    return u.to_vec();
                }
                let sc = self.c.sqrt();
                let s = (sc * n).tanh() / (sc * n);
                let mut out: Vec<f64> = u.iter().map(|v| v * s).collect();
                self.project_in_place(&mut out);
                out
            }
            SpaceKind::Hyperboloid => {
                let sk = self.k().sqrt();
                let n = norm_sq(u).sqrt();
                let mut out = Vec::with_capacity(u.len() + 1);
                out.push(0.0);
                if n < MIN_NORM {
                    out.extend_from_slice(u);
                } else {
                    let s = sk * (n / sk).sinh() / n;
                    out.extend(u.iter().map(|v| v * s));
                }
                self.project_in_place(&mut out);
                out
            }
        }
    }

    /// Logarithmic map at the origin, returning intrinsic tangent coordinates.
    pub fn log0(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            SpaceKind::Euclidean => x.to_vec(),
            SpaceKind::Poincare => {
                let n = norm_sq(x).sqrt();
                if n < MIN_NORM {
                    return x.to_vec();
                }
                let sc = self.c.sqrt();
                let s = clamped_artanh(sc * n) / (sc * n);
                x.iter().map(|v| v * s).collect()
            }
            SpaceKind::Hyperboloid => {
                let sk = self.k().sqrt();
                let spatial = &x[1..];
                let n = norm_sq(spatial).sqrt();
                if n < MIN_NORM {
                    return spatial.to_vec();
                }
                let s = sk * (n / sk).asinh() / n;
                spatial.iter().map(|v| v * s).collect()
            }
        }
    }

    /// Exponential map `exp_x(v)`.
    pub fn exp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        match self.kind {
            SpaceKind::Euclidean => x.iter().zip(v).map(|(a, b)| a + b).collect(),
            SpaceKind::Poincare => {
                let vn = norm_sq(v).sqrt();
                if vn < MIN_NORM {
                    return x.to_vec();
                }
                let sc = self.c.sqrt();
                let t = (sc * vn / (1.0 - self.c * norm_sq(x))).tanh();
                let step: Vec<f64> = v.iter().map(|vi| t * vi / (sc * vn)).collect();
                let mut out = poincare_mobius_add(self.c, x, &step);
                self.project_in_place(&mut out);
                out
            }
            SpaceKind::Hyperboloid => {
                let vn = minkowski(v, v).max(0.0).sqrt();
                if vn < MIN_NORM {
                    return x.to_vec();
                }
                let sk = self.k().sqrt();
                let r = vn / sk;
                let (ch, sh) = (r.cosh(), r.sinh());
                let mut out: Vec<f64> =
                    x.iter().zip(v).map(|(xi, vi)| ch * xi + sk * sh * vi / vn).collect();
                self.project_in_place(&mut out);
                out
            }
        }
    }

    /// Logarithmic map `log_x(y)`.
    pub fn log(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match self.kind {
            SpaceKind::Euclidean => y.iter().zip(x).map(|(a, b)| a - b).collect(),
            SpaceKind::Poincare => {
                let neg: Vec<f64> = x.iter().map(|v| -v).collect();
                let w = poincare_mobius_add(self.c, &neg, y);
                let wn = norm_sq(&w).sqrt();
                if wn < MIN_NORM {
                    return vec![0.0; x.len()];
                }
                let sc = self.c.sqrt();
                let s = (1.0 - self.c * norm_sq(x)) / sc * clamped_artanh(sc * wn) / wn;
                w.iter().map(|v| v * s).collect()
            }
            SpaceKind::Hyperboloid => {
                let ip = minkowski(x, y);
                let z = -self.c * ip;
                if z <= 1.0 {
                    return vec![0.0; x.len()];
                }
                let u: Vec<f64> = y.iter().zip(x).map(|(yi, xi)| yi + self.c * ip * xi).collect();
                let un = minkowski(&u, &u).max(0.0).sqrt();
                if un < MIN_NORM {
                    return vec![0.0; x.len()];
                }
                let d = self.k().sqrt() * z.acosh();
                let v: Vec<f64> = u.iter().map(|ui| d * ui / un).collect();
                self.proj_tangent(x, &v)
            }
        }
    }

    /// Parallel transport of `v` from the tangent space at `x` to that at `y`.
    ///
    /// The hyperboloid uses the log-map form; the Poincaré ball uses the
    /// gyration form `(λ_x/λ_y) gyr[y, -x] v`, which reduces to
    /// `log_y(y ⊕ exp_0(v))` when `x` is the origin.
    pub fn transport(&self, x: &[f64], y: &[f64], v: &[f64]) -> Vec<f64> {
        match self.kind {
            SpaceKind::Euclidean => v.to_vec(),
            SpaceKind::Poincare => {
                let neg: Vec<f64> = x.iter().map(|a| -a).collect();
                let g = gyration(self.c, y, &neg, v);
                let s = self.lambda(x) / self.lambda(y);
                g.iter().map(|a| a * s).collect()
            }
            SpaceKind::Hyperboloid => {
                let d = self.dist(x, y);
                if d < MIN_NORM {
                    return v.to_vec();
                }
                let lxy = self.log(x, y);
                let lyx = self.log(y, x);
                let s = minkowski(&lxy, v) / (d * d);
                let out: Vec<f64> = v
                    .iter()
                    .zip(lxy.iter().zip(&lyx))
                    .map(|(vi, (a, b))| vi - s * (a + b))
                    .collect();
                self.proj_tangent(y, &out)
            }
        }
    }

    /// Geodesic distance.
    pub fn dist(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            SpaceKind::Euclidean => {
                x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            }
            SpaceKind::Poincare => {
                let c = self.c;
                let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let den = (1.0 - c * norm_sq(x)) * (1.0 - c * norm_sq(y));
                acosh1p(2.0 * c * diff / den) / c.sqrt()
            }
            SpaceKind::Hyperboloid => {
                // -c<x,y>_L - 1 = c <x-y,x-y>_L / 2, evaluated on the difference
                let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                self.k().sqrt() * acosh1p(0.5 * self.c * minkowski(&diff, &diff))
            }
        }
    }

    /// Distance from the coordinate origin.
    pub fn dist0(&self, x: &[f64]) -> f64 {
        match self.kind {
            SpaceKind::Euclidean => norm_sq(x).sqrt(),
            SpaceKind::Poincare => {
                let sc = self.c.sqrt();
                2.0 * clamped_artanh(sc * norm_sq(x).sqrt()) / sc
            }
            SpaceKind::Hyperboloid => {
                let sk = self.k().sqrt();
                sk * (x[0] / sk).max(1.0).acosh()
            }
        }
    }

    /// Converts a Euclidean gradient at `x` into the Riemannian gradient.
    pub fn egrad_to_rgrad(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        match self.kind {
            SpaceKind::Euclidean => g.to_vec(),
            SpaceKind::Poincare => {
                let f = (1.0 - self.c * norm_sq(x)).powi(2) / 4.0;
                g.iter().map(|v| v * f).collect()
            }
            SpaceKind::Hyperboloid => {
                let mut h = g.to_vec();
                h[0] = -h[0];
                self.proj_tangent(x, &h)
            }
        }
    }
}

fn poincare_mobius_add(c: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / den).collect()
}

/// Gyration `gyr[u, v] w` in closed form (linear in `w`).
fn gyration(c: f64, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
    let uw = dot(u, w);
    let vw = dot(v, w);
    let uv = dot(u, v);
    let u2 = norm_sq(u);
    let v2 = norm_sq(v);
    let a = -c * c * uw * v2 + c * vw + 2.0 * c * c * uv * vw;
    let b = -c * c * vw * u2 - c * uw;
    let d = 1.0 + 2.0 * c * uv + c * c * u2 * v2;
    w.iter().zip(u.iter().zip(v)).map(|(wi, (ui, vi))| wi + 2.0 * (a * ui + b * vi) / d).collect()
}

/// A point on one of the model spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    coords: Vec<f64>,
    space: Space,
}

/// A tangent vector together with its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    coords: Vec<f64>,
    base: Point,
}

fn check_same(a: &Point, b: &Point) -> Result<()> {
    if a.space != b.space {
        return Err(HrcbError::SpaceMismatch(a.space.to_string(), b.space.to_string()));
    }
    if a.coords.len() != b.coords.len() {
        return Err(HrcbError::DimensionMismatch { expected: a.coords.len(), got: b.coords.len() });
    }
    Ok(())
}

impl Point {
    /// Validates `coords` against the point invariant of `space`.
    pub fn new(coords: Vec<f64>, space: Space) -> Result<Self> {
        if space.kind == SpaceKind::Hyperboloid && coords.is_empty() {
            return Err(HrcbError::invalid("hyperboloid points need at least one coordinate"));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(HrcbError::NonFinite(format!("point {coords:?}")));
        }
        if !space.contains(&coords) {
            return Err(HrcbError::NotOnManifold(format!("{coords:?} in {space}")));
        }
        Ok(Point { coords, space })
    }

    /// Projects `raw` onto the manifold.
    pub fn projected(raw: &[f64], space: Space) -> Result<Self> {
        let coords = space.project(raw)?;
        Ok(Point { coords, space })
    }

    pub fn origin(space: Space, d: usize) -> Self {
        Point { coords: space.origin(d), space }
    }

    pub(crate) fn from_raw_unchecked(coords: Vec<f64>, space: Space) -> Self {
        Point { coords, space }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn space(&self) -> Space {
        self.space
    }

    /// Intrinsic dimension.
    pub fn dim(&self) -> usize {
        self.space.intrinsic_dim(self.coords.len())
    }

    pub fn mobius_add(&self, y: &Point) -> Result<Point> {
        check_same(self, y)?;
        Ok(Point { coords: self.space.mobius_add(&self.coords, &y.coords), space: self.space })
    }

    /// `W ⊗_c x`; the origin maps to the origin.
    pub fn mobius_matvec(&self, w: &Array2<f64>) -> Result<Point> {
        if w.ncols() != self.dim() {
            return Err(HrcbError::DimensionMismatch { expected: self.dim(), got: w.ncols() });
        }
        Ok(Point { coords: self.space.mobius_matvec(w.view(), &self.coords), space: self.space })
    }

    pub fn exp(&self, v: &Tangent) -> Result<Point> {
        if v.base.coords != self.coords || v.base.space != self.space {
            return Err(HrcbError::invalid("tangent vector is based at a different point"));
        }
        Ok(Point { coords: self.space.exp(&self.coords, &v.coords), space: self.space })
    }

    pub fn log(&self, y: &Point) -> Result<Tangent> {
        check_same(self, y)?;
        let coords = self.space.log(&self.coords, &y.coords);
        Ok(Tangent { coords, base: self.clone() })
    }

    pub fn distance(&self, y: &Point) -> Result<f64> {
        check_same(self, y)?;
        Ok(self.space.dist(&self.coords, &y.coords))
    }
}

impl Tangent {
    /// Builds a tangent vector, rejecting hyperboloid vectors that are not
    /// tangent at `base` within tolerance.
    pub fn new(base: Point, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != base.coords.len() {
            return Err(HrcbError::DimensionMismatch { expected: base.coords.len(), got: coords.len() });
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(HrcbError::NonFinite(format!("tangent {coords:?}")));
        }
        let res = base.space.tangent_residual(&base.coords, &coords);
        let scale = 1.0_f64.max(norm_sq(&base.coords).sqrt() * norm_sq(&coords).sqrt());
        if res > LORENTZ_TOL * scale {
            return Err(HrcbError::NotTangent(res));
        }
        Ok(Tangent { coords, base })
    }

    /// Projects an ambient vector onto the tangent space at `base`.
    pub fn projected(base: Point, coords: &[f64]) -> Result<Self> {
        if coords.len() != base.coords.len() {
            return Err(HrcbError::DimensionMismatch { expected: base.coords.len(), got: coords.len() });
        }
        let coords = base.space.proj_tangent(&base.coords, coords);
        Ok(Tangent { coords, base })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    /// Riemannian norm at the base point.
    pub fn norm(&self) -> f64 {
        self.base.space.tangent_norm(&self.base.coords, &self.coords)
    }
}

/// Parallel transport of `v` (tangent at `x`) to the tangent space at `y`.
pub fn transport(x: &Point, y: &Point, v: &Tangent) -> Result<Tangent> {
    check_same(x, y)?;
    if v.base.coords != x.coords {
        return Err(HrcbError::invalid("tangent vector is based at a different point"));
    }
    let res = x.space.tangent_residual(&x.coords, &v.coords);
    let scale = 1.0_f64.max(norm_sq(&x.coords).sqrt() * norm_sq(&v.coords).sqrt());
    if res > LORENTZ_TOL * scale {
        return Err(HrcbError::NotTangent(res));
    }
    let coords = if x.coords == y.coords {
        v.coords.clone()
    } else {
        x.space.transport(&x.coords, &y.coords, &v.coords)
    };
    Ok(Tangent { coords, base: y.clone() })
}

/// Per-node points of one space, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    space: Space,
    coords: Array2<f64>,
}

impl EmbeddingTable {
    /// Validates every row against the space invariant.
    pub fn new(space: Space, coords: Array2<f64>) -> Result<Self> {
        for (i, row) in coords.rows().into_iter().enumerate() {
            let r = row.to_vec();
            if !space.contains(&r) {
                return Err(HrcbError::NotOnManifold(format!("row {i} in {space}")));
            }
        }
        Ok(EmbeddingTable { space, coords: coords.as_standard_layout().into_owned() })
    }

    /// Projects every row onto the manifold.
    pub fn projected(space: Space, coords: Array2<f64>) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(HrcbError::NonFinite("embedding table".into()));
        }
        let mut coords = coords.as_standard_layout().into_owned();
        for mut row in coords.rows_mut() {
            space.project_in_place(row.as_slice_mut().expect("standard layout"));
        }
        Ok(EmbeddingTable { space, coords })
    }

    pub fn from_points(points: &[Point]) -> Result<Self> {
        let first = points.first().ok_or_else(|| HrcbError::invalid("empty table"))?;
        let cols = first.coords.len();
        let mut coords = Array2::zeros((points.len(), cols));
        for (i, p) in points.iter().enumerate() {
            check_same(first, p)?;
            coords.row_mut(i).iter_mut().zip(&p.coords).for_each(|(a, b)| *a = *b);
        }
        Ok(EmbeddingTable { space: first.space, coords })
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    /// Stored (ambient) columns.
    pub fn ambient_dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn dim(&self) -> usize {
        self.space.intrinsic_dim(self.coords.ncols())
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.coords.ncols();
        &self.coords.as_slice().expect("standard layout")[i * cols..(i + 1) * cols]
    }

    pub fn point(&self, i: usize) -> Point {
        Point::from_raw_unchecked(self.row(i).to_vec(), self.space)
    }

    pub fn origin(&self) -> Vec<f64> {
        self.space.origin(self.dim())
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.space.dist(self.row(i), self.row(j))
    }

    /// Rows reordered or restricted by `index`.
    pub fn select(&self, index: &[usize]) -> EmbeddingTable {
        let coords = self.coords.select(ndarray::Axis(0), index);
        EmbeddingTable { space: self.space, coords }
    }

    /// Symmetric matrix of all pairwise distances.
    pub fn pairwise_distances(&self) -> Array2<f64> {
        let n = self.len();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self.dist(i, j);
                out[[i, j]] = d;
                out[[j, i]] = d;
            }
        }
        out
    }

    /// One line per node: `id space curvature x_1 ... x_m`, 17 significant digits.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.len() {
            write!(w, "{} {} {:.16e}", i, self.space.kind.tag(), self.space.c)?;
            for v in self.row(i) {
                write!(w, " {v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut space: Option<Space> = None;
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| HrcbError::Parse { line: ln + 1, msg };
            let mut it = line.split_whitespace();
            let id: usize = it
                .next()
                .ok_or_else(|| perr("missing id".into()))?
                .parse()
                .map_err(|e| perr(format!("bad id: {e}")))?;
            let kind = SpaceKind::from_tag(it.next().ok_or_else(|| perr("missing space".into()))?)
                .map_err(|e| perr(e.to_string()))?;
            let c: f64 = it
                .next()
                .ok_or_else(|| perr("missing curvature".into()))?
                .parse()
                .map_err(|e| perr(format!("bad curvature: {e}")))?;
            let s = Space::new(kind, c).map_err(|e| perr(e.to_string()))?;
            match space {
                None => space = Some(s),
                Some(prev) if prev != s => return Err(perr("mixed spaces in one table".into())),
                _ => {}
            }
            let coords = it
                .map(|t| t.parse::<f64>().map_err(|e| perr(format!("bad coordinate: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push((id, coords));
        }
        let space = space.ok_or_else(|| HrcbError::invalid("empty embedding file"))?;
        rows.sort_by_key(|(id, _)| *id);
        let n = rows.len();
        let cols = rows[0].1.len();
        let mut coords = Array2::zeros((n, cols));
        for (i, (id, r)) in rows.into_iter().enumerate() {
            if id != i {
                return Err(HrcbError::invalid(format!("node ids must be 0..n, missing {i}")));
            }
            if r.len() != cols {
                return Err(HrcbError::DimensionMismatch { expected: cols, got: r.len() });
            }
            coords.row_mut(i).iter_mut().zip(r).for_each(|(a, b)| *a = b);
        }
        EmbeddingTable::new(space, coords)
    }
}

/// Maps a hyperboloid point to the Poincaré ball of the same curvature.
pub fn hyperboloid_to_poincare(space: Space, x: &[f64]) -> Vec<f64> {
    let sk = space.k().sqrt();
    x[1..].iter().map(|v| sk * v / (sk + x[0])).collect()
}

/// Maps a Poincaré point to the hyperboloid of the same curvature.
pub fn poincare_to_hyperboloid(space: Space, p: &[f64]) -> Vec<f64> {
    let k = space.k();
    let p2 = norm_sq(p);
    let den = k - p2;
    let mut out = Vec::with_capacity(p.len() + 1);
    out.push(k.sqrt() * (k + p2) / den);
    out.extend(p.iter().map(|v| 2.0 * k * v / den));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_ball(rng: &mut ChaCha8Rng, d: usize, max_r: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm_sq(&v).sqrt();
        let r = rng.random_range(0.0..max_r);
        v.iter().map(|x| x / n * r).collect()
    }

    #[test]
    fn collinear_mobius_addition() {
        let s = Space::poincare(1.0);
        let z = s.mobius_add(&[0.3, 0.0], &[0.4, 0.0]);
        assert!((z[0] - 0.625).abs() < 1e-15);
        assert_eq!(z[1], 0.0);
    }

    #[test]
    fn mobius_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Space::poincare(1.0);
        for _ in 0..1000 {
            let x = rand_ball(&mut rng, 3, 0.95);
            let o = s.mobius_add(&x, &[0.0; 3]);
            let o2 = s.mobius_add(&[0.0; 3], &x);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let inv = s.mobius_add(&neg, &x);
            for i in 0..3 {
                assert!((o[i] - x[i]).abs() < 1e-8);
                assert!((o2[i] - x[i]).abs() < 1e-8);
                assert!(inv[i].abs() < 1e-8);
            }
        }
        let e = Space::euclidean();
        assert_eq!(e.mobius_add(&[1.0, 2.0], &[0.0, 0.0]), vec![1.0, 2.0]);
        let h = Space::hyperboloid(1.0);
        let x = h.exp0(&[0.3, -0.2]);
        let o = h.origin(2);
        let y = h.mobius_add(&x, &o);
        for i in 0..3 {
            assert!((y[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matvec_closed_form_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Space::poincare(1.0);
        for _ in 0..50 {
            let x = rand_ball(&mut rng, 2, 0.9);
            let w = Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.5..1.5));
            let closed = s.mobius_matvec(w.view(), &x);
            let u = s.log0(&x);
            let wu: Vec<f64> = (0..2).map(|i| w[[i, 0]] * u[0] + w[[i, 1]] * u[1]).collect();
            let comp = s.exp0(&wu);
            for i in 0..2 {
                assert!((closed[i] - comp[i]).abs() < 1e-9, "{closed:?} vs {comp:?}");
            }
        }
        let id = Array2::<f64>::eye(2);
        let x = vec![0.2, -0.5];
        let y = s.mobius_matvec(id.view(), &x);
        assert!((y[0] - 0.2).abs() < 1e-12 && (y[1] + 0.5).abs() < 1e-12);
        let zero = Array2::<f64>::zeros((2, 2));
        assert_eq!(s.mobius_matvec(zero.view(), &x), vec![0.0, 0.0]);
        assert_eq!(s.mobius_matvec(id.view(), &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn poincare_distance_from_origin() {
        let s = Space::poincare(1.0);
        let d = s.dist(&[0.0, 0.0], &[0.6, 0.0]);
        assert!((d - 1.3862944).abs() < 1e-7);
        assert!((d - 2.0 * 0.6f64.atanh()).abs() < 1e-14);
        assert!((s.dist0(&[0.6, 0.0]) - d).abs() < 1e-14);
        assert_eq!(s.dist(&[0.1, 0.2], &[0.1, 0.2]), 0.0);
    }

    #[test]
    fn poincare_distance_matches_mobius_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for c in [0.5, 1.0, 2.0] {
            let s = Space::poincare(c);
            for _ in 0..200 {
                let x = rand_ball(&mut rng, 3, 0.95 / c.sqrt());
                let y = rand_ball(&mut rng, 3, 0.95 / c.sqrt());
                let neg: Vec<f64> = x.iter().map(|v| -v).collect();
                let w = poincare_mobius_add(c, &neg, &y);
                let alt = 2.0 / c.sqrt() * (c.sqrt() * norm_sq(&w).sqrt()).atanh();
                assert!((s.dist(&x, &y) - alt).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn project_rules() {
        let s = Space::poincare(1.0);
        assert_eq!(s.project(&[0.1, 0.2]).unwrap(), vec![0.1, 0.2]);
        let p = s.project(&[2.0, 0.0]).unwrap();
        assert!((p[0] - (1.0 - 1e-5)).abs() < 1e-15);
        let h = Space::hyperboloid(1.0);
        let p = h.project(&[0.0, 3.0, 4.0]).unwrap();
        assert!((p[0] - 26f64.sqrt()).abs() < 1e-15);
        assert!(s.project(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn euclidean_maps() {
        let e = Space::euclidean();
        assert_eq!(e.exp(&[1.0, 2.0], &[0.5, 0.5]), vec![1.5, 2.5]);
        assert_eq!(e.log(&[1.0, 2.0], &[1.5, 2.5]), vec![0.5, 0.5]);
        assert_eq!(e.transport(&[1.0, 2.0], &[3.0, 4.0], &[0.5, -1.0]), vec![0.5, -1.0]);
    }

    #[test]
    fn poincare_transport_from_origin_matches_log_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Space::poincare(1.0);
        for _ in 0..100 {
            let y = rand_ball(&mut rng, 3, 0.9);
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
            let a = s.transport(&[0.0; 3], &y, &v);
            let b = s.log(&y, &s.mobius_add(&y, &s.exp(&[0.0; 3], &v)));
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-8, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn hyperboloid_transport_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = Space::hyperboloid(1.0);
        for _ in 0..100 {
            let x = s.exp0(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let y = s.exp0(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let raw = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let v = s.proj_tangent(&x, &raw);
            let a = s.transport(&x, &y, &v);
            let f = minkowski(&y, &v) / (s.k() - minkowski(&x, &y));
            for i in 0..3 {
                let b = v[i] + f * (x[i] + y[i]);
                assert!((a[i] - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn hyperboloid_origin_constraint() {
        for c in [0.25, 1.0, 4.0] {
            let s = Space::hyperboloid(c);
            let o = s.origin(3);
            assert!((minkowski(&o, &o) + s.k()).abs() < 1e-12);
            assert!(s.contains(&o));
        }
    }

    #[test]
    fn point_api_errors() {
        let s = Space::poincare(1.0);
        assert!(Point::new(vec![1.0, 0.0], s).is_err());
        let x = Point::new(vec![0.1, 0.0], s).unwrap();
        let y = Point::new(vec![0.1, 0.0, 0.0], s).unwrap();
        assert!(matches!(x.mobius_add(&y), Err(HrcbError::DimensionMismatch { .. })));
        let z = Point::new(vec![0.1, 0.0], Space::euclidean()).unwrap();
        assert!(matches!(x.distance(&z), Err(HrcbError::SpaceMismatch(..))));
        let h = Space::hyperboloid(1.0);
        let hx = Point::origin(h, 2);
        assert!(matches!(Tangent::new(hx, vec![1.0, 0.0, 0.0]), Err(HrcbError::NotTangent(_))));
        assert!(Space::new(SpaceKind::Poincare, 0.0).is_err());
    }

    #[test]
    fn exp_at_zero_is_identity() {
        for s in [Space::euclidean(), Space::poincare(1.0), Space::hyperboloid(1.0)] {
            let x = Point::projected(&s.exp0(&[0.2, 0.1]), s).unwrap();
            let v = Tangent::new(x.clone(), vec![0.0; x.coords().len()]).unwrap();
            assert_eq!(x.exp(&v).unwrap(), x);
        }
    }

    #[test]
    fn pairwise_small_tables() {
        let s = Space::poincare(1.0);
        let t = EmbeddingTable::new(s, array![[0.1, 0.2]]).unwrap();
        assert_eq!(t.pairwise_distances(), array![[0.0]]);
        let t = EmbeddingTable::new(s, array![[0.1, 0.2], [-0.3, 0.0]]).unwrap();
        let m = t.pairwise_distances();
        assert_eq!(m[[0, 1]], s.dist(&[0.1, 0.2], &[-0.3, 0.0]));
        assert_eq!(m[[0, 1]], m[[1, 0]]);
        assert_eq!(m[[0, 0]], 0.0);
    }

    #[test]
    fn table_text_round_trip() {
        let s = Space::hyperboloid(1.0);
        let rows: Vec<Point> =
            [[0.1, 0.7], [-1.3, 0.25]].iter().map(|u| Point::projected(&s.exp0(u), s).unwrap()).collect();
        let t = EmbeddingTable::from_points(&rows).unwrap();
        let mut buf = Vec::new();
        t.write_text(&mut buf).unwrap();
        let back = EmbeddingTable::read_text(&buf[..]).unwrap();
        assert_eq!(back, t);
    }
}
