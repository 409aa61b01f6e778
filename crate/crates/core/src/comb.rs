//! Two-dimensional combinatorial tree embedding in the Poincaré disk at
//! arbitrary precision, plus rounding to narrower formats.

use std::collections::HashMap;
use std::fmt;

use astro_float::{BigFloat, Consts, Radix, RoundingMode, Sign};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{HrcbError, Result};
use crate::manifold::{EmbeddingTable, Space};
use crate::metrics::DistanceOracle;
use crate::treegen::Hierarchy;

const RM: RoundingMode = RoundingMode::ToEven;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConePolicy {
    /// Children share the half circle facing away from the parent.
    HalfCircle,
    /// Children share the full circle minus the parent direction.
    FullCircle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombConfig {
    pub bits: usize,
    /// Hyperbolic length of every edge.
    pub tau: f64,
    pub cone: ConePolicy,
}

impl Default for CombConfig {
    fn default() -> Self {
        CombConfig { bits: 3000, tau: 2.0, cone: ConePolicy::HalfCircle }
    }
}

impl CombConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(HrcbError::invalid(format!("tau must be finite and positive, got {}", self.tau)));
        }
        if self.bits < 24 {
            return Err(HrcbError::invalid("precision below 24 bits"));
        }
        Ok(())
    }
}

/// Minimal field interface the table arithmetic needs; `p` is ignored by
/// the native float types.
pub trait Coord: Clone + PartialOrd + Send + Sync + fmt::Debug {
    fn from_f64(v: f64, p: usize) -> Self;
    fn add(&self, o: &Self, p: usize) -> Self;
    fn sub(&self, o: &Self, p: usize) -> Self;
    fn mul(&self, o: &Self, p: usize) -> Self;
    fn div(&self, o: &Self, p: usize) -> Self;
    fn to_f64(&self) -> f64;
}

macro_rules! native_coord {
    ($t:ty) => {
        impl Coord for $t {
            fn from_f64(v: f64, _: usize) -> Self {
                v as $t
            }
            fn add(&self, o: &Self, _: usize) -> Self {
                self + o
            }
            fn sub(&self, o: &Self, _: usize) -> Self {
                self - o
            }
            fn mul(&self, o: &Self, _: usize) -> Self {
                self * o
            }
            fn div(&self, o: &Self, _: usize) -> Self {
                self / o
            }
            fn to_f64(&self) -> f64 {
                *self as f64
            }
        }
    };
}
native_coord!(f32);
native_coord!(f64);

impl Coord for BigFloat {
    fn from_f64(v: f64, p: usize) -> Self {
        BigFloat::from_f64(v, p)
    }
    fn add(&self, o: &Self, p: usize) -> Self {
        BigFloat::add(self, o, p, RM)
    }
    fn sub(&self, o: &Self, p: usize) -> Self {
        BigFloat::sub(self, o, p, RM)
    }
    fn mul(&self, o: &Self, p: usize) -> Self {
        BigFloat::mul(self, o, p, RM)
    }
    fn div(&self, o: &Self, p: usize) -> Self {
        BigFloat::div(self, o, p, RM)
    }
    fn to_f64(&self) -> f64 {
        big_to_f64(self)
    }
}

/// Mantissa, binary exponent and sign such that the value is
/// `m · 2^(e-64)`, with bit 0 of `m` acting as a sticky bit for the
/// truncated tail. Exact zero gives `m = 0`.
fn big_top_word(x: &BigFloat) -> Option<(u64, i64, bool)> {
    if x.is_zero() {
        return Some((0, 0, false));
    }
    let (words, _, sign, e, _) = x.as_raw_parts()?;
    let (&top, rest) = words.split_last()?;
    let sticky = rest.iter().any(|&w| w != 0);
    Some((top | u64::from(sticky), e as i64, sign == Sign::Neg))
}

/// Round to nearest `f64`.
pub fn big_to_f64(x: &BigFloat) -> f64 {
    match big_top_word(x) {
        None => f64::NAN,
        Some((m, e, neg)) => {
            // the sticky bit keeps the single rounding in `as f64` correct
            let v = m as f64 * 2f64.powi((e - 64) as i32);
            if neg {
                -v
            } else {
                v
            }
        }
    }
}

/// Round to nearest `f32`.
pub fn big_to_f32(x: &BigFloat) -> f32 {
    match big_top_word(x) {
        None => f32::NAN,
        Some((m, e, neg)) => {
            let v = ((m as f32) as f64 * 2f64.powi((e - 64) as i32)) as f32;
            if neg {
                -v
            } else {
                v
            }
        }
    }
}

/// Points in the unit disk together with cached conformal weights
/// `1 / (1 - |x|^2)`.
#[derive(Debug, Clone)]
pub struct PointTable<T: Coord> {
    bits: usize,
    points: Vec<[T; 2]>,
    weights: Vec<T>,
    norms: Vec<T>,
}

impl<T: Coord> PointTable<T> {
    pub fn new(bits: usize, points: Vec<[T; 2]>) -> Result<Self> {
        let one = T::from_f64(1.0, bits);
        let mut weights = Vec::with_capacity(points.len());
        let mut norms = Vec::with_capacity(points.len());
        for (i, [x, y]) in points.iter().enumerate() {
            let n2 = x.mul(x, bits).add(&y.mul(y, bits), bits);
            let gap = one.sub(&n2, bits);
            if !(gap > T::from_f64(0.0, bits)) {
                return Err(HrcbError::NotOnManifold(format!("point {i} outside the open disk")));
            }
            weights.push(one.div(&gap, bits));
            norms.push(n2);
        }
        Ok(PointTable { bits, points, weights, norms })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn points(&self) -> &[[T; 2]] {
        &self.points
    }

    /// `|x-y|^2 / ((1-|x|^2)(1-|y|^2))`, monotone in the geodesic distance.
    pub fn delta(&self, i: usize, j: usize) -> T {
        let p = self.bits;
        let [a, b] = &self.points[i];
        let [c, d] = &self.points[j];
        let dx = a.sub(c, p);
        let dy = b.sub(d, p);
        dx.mul(&dx, p).add(&dy.mul(&dy, p), p).mul(&self.weights[i], p).mul(&self.weights[j], p)
    }

    /// Number of nodes whose coordinates equal those of an earlier node.
    pub fn collisions(&self) -> usize {
        let mut idx: Vec<usize> = (0..self.points.len()).collect();
        let cmp = |a: &T, b: &T| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal);
        idx.sort_by(|&i, &j| {
            cmp(&self.points[i][0], &self.points[j][0]).then_with(|| cmp(&self.points[i][1], &self.points[j][1]))
        });
        idx.windows(2).filter(|w| self.points[w[0]] == self.points[w[1]]).count()
    }

    /// Rounded to `f64` coordinates as a Poincaré table with `c = 1`.
    pub fn to_embedding_table(&self) -> Result<EmbeddingTable> {
        let n = self.points.len();
        let coords = Array2::from_shape_fn((n, 2), |(i, k)| self.points[i][k].to_f64());
        EmbeddingTable::projected(Space::poincare(1.0), coords)
    }
}

fn delta_to_distance(delta: f64) -> f64 {
    let z = 2.0 * delta;
    (z + (z * (z + 2.0)).sqrt()).ln_1p()
}

impl<T: Coord> DistanceOracle for PointTable<T> {
    type Key = T;
    fn len(&self) -> usize {
        self.points.len()
    }
    fn key(&self, i: usize, j: usize) -> T {
        self.delta(i, j)
    }
    fn origin_key(&self, i: usize) -> T {
        self.norms[i].mul(&self.weights[i], self.bits)
    }
    fn distance(&self, i: usize, j: usize) -> f64 {
        delta_to_distance(self.delta(i, j).to_f64())
    }
    fn space_tag(&self) -> String {
        format!("comb{}", self.bits)
    }
    fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub type BigTable = PointTable<BigFloat>;

#[derive(Clone)]
struct Cx {
    re: BigFloat,
    im: BigFloat,
}

impl Cx {
    fn zero(p: usize) -> Self {
        Cx { re: BigFloat::from_f64(0.0, p), im: BigFloat::from_f64(0.0, p) }
    }
    fn add(&self, o: &Cx, p: usize) -> Cx {
        Cx { re: self.re.add(&o.re, p, RM), im: self.im.add(&o.im, p, RM) }
    }
    fn sub(&self, o: &Cx, p: usize) -> Cx {
        Cx { re: self.re.sub(&o.re, p, RM), im: self.im.sub(&o.im, p, RM) }
    }
    fn mul(&self, o: &Cx, p: usize) -> Cx {
        Cx {
            re: self.re.mul(&o.re, p, RM).sub(&self.im.mul(&o.im, p, RM), p, RM),
            im: self.re.mul(&o.im, p, RM).add(&self.im.mul(&o.re, p, RM), p, RM),
        }
    }
    fn conj(&self) -> Cx {
        Cx { re: self.re.clone(), im: self.im.neg() }
    }
    fn norm2(&self, p: usize) -> BigFloat {
        self.re.mul(&self.re, p, RM).add(&self.im.mul(&self.im, p, RM), p, RM)
    }
    fn div(&self, o: &Cx, p: usize) -> Cx {
        let den = o.norm2(p);
        let num = self.mul(&o.conj(), p);
        Cx { re: num.re.div(&den, p, RM), im: num.im.div(&den, p, RM) }
    }
    fn scale(&self, s: &BigFloat, p: usize) -> Cx {
        Cx { re: self.re.mul(s, p, RM), im: self.im.mul(s, p, RM) }
    }
    fn one(p: usize) -> Self {
        Cx { re: BigFloat::from_f64(1.0, p), im: BigFloat::from_f64(0.0, p) }
    }
}

/// Möbius map sending `a` to the origin.
fn to_origin(z: &Cx, a: &Cx, p: usize) -> Cx {
    z.sub(a, p).div(&Cx::one(p).sub(&a.conj().mul(z, p), p), p)
}

/// Inverse of [`to_origin`].
fn from_origin(w: &Cx, a: &Cx, p: usize) -> Cx {
    w.add(a, p).div(&Cx::one(p).add(&a.conj().mul(w, p), p), p)
}

/// Embeds a tree in the disk: the root sits at the origin and every edge has
/// hyperbolic length `tau`.
pub fn comb_embed(h: &Hierarchy, cfg: &CombConfig) -> Result<BigTable> {
    cfg.validate()?;
    let p = cfg.bits;
    let mut cc = Consts::new().map_err(|e| HrcbError::invalid(format!("big-float constants: {e:?}")))?;
    let two_pi = cc.pi(p, RM).mul(&BigFloat::from_f64(2.0, p), p, RM);
    let pi = cc.pi(p, RM);
    let r = BigFloat::from_f64(cfg.tau / 2.0, p).tanh(p, RM, &mut cc);
    // unit rotations keyed by (slot, children, is_root)
    let mut rot: HashMap<(usize, usize, bool), Cx> = HashMap::new();
    let mut rotation = |k: usize, deg: usize, root: bool, cc: &mut Consts| -> Cx {
        rot.entry((k, deg, root))
            .or_insert_with(|| {
                let kk = BigFloat::from_f64(k as f64, p);
                let dd = BigFloat::from_f64(deg as f64, p);
                let phi = if root {
                    two_pi.mul(&kk, p, RM).div(&dd, p, RM)
                } else {
                    match cfg.cone {
                        // -pi/2 + pi (2k+1) / (2 deg)
                        ConePolicy::HalfCircle => {
                            let half = BigFloat::from_f64(0.5, p);
                            let frac = kk.add(&half, p, RM).div(&dd, p, RM).sub(&half, p, RM);
                            pi.mul(&frac, p, RM)
                        }
                        // -pi + 2 pi (k+1) / (deg+1)
                        ConePolicy::FullCircle => {
                            let frac = kk
                                .add(&BigFloat::from_f64(1.0, p), p, RM)
                                .div(&BigFloat::from_f64((deg + 1) as f64, p), p, RM);
                            two_pi.mul(&frac, p, RM).sub(&pi, p, RM)
                        }
                    }
                };
                Cx { re: phi.cos(p, RM, cc), im: phi.sin(p, RM, cc) }
            })
            .clone()
    };
    let mut pos: Vec<Option<Cx>> = vec![None; h.len()];
    pos[h.root()] = Some(Cx::zero(p));
    for &v in h.bfs_order() {
        let kids = h.children(v);
        if kids.is_empty() {
            continue;
        }
        let x = pos[v].clone().expect("parents placed first");
        let root = h.parent(v).is_none();
        // direction pointing away from the parent in the frame centred at `x`
        let away = match h.parent(v) {
            None => Cx::one(p),
            Some(u) => {
                let q = to_origin(pos[u].as_ref().expect("placed"), &x, p);
                let len = q.norm2(p).sqrt(p, RM);
                q.scale(&BigFloat::from_f64(-1.0, p).div(&len, p, RM), p)
            }
        };
        for (k, &c) in kids.iter().enumerate() {
            let w = away.mul(&rotation(k, kids.len(), root, &mut cc), p).scale(&r, p);
            pos[c] = Some(from_origin(&w, &x, p));
        }
    }
    let points = pos.into_iter().map(|c| {
        let c = c.expect("tree is connected");
        [c.re, c.im]
    });
    PointTable::new(p, points.collect())
}

/// A comb table rounded to a target precision.
#[derive(Debug, Clone)]
pub enum Downcast {
    F32(PointTable<f32>),
    F64(PointTable<f64>),
    Big(BigTable),
}

#[derive(Debug, Clone, PartialEq, PartialOrd)]
pub enum DowncastKey {
    F32(f32),
    F64(f64),
    Big(BigFloat),
}

impl Downcast {
    pub fn bits(&self) -> usize {
        match self {
            Downcast::F32(_) => 32,
            Downcast::F64(_) => 64,
            Downcast::Big(t) => t.bits(),
        }
    }

    pub fn collisions(&self) -> usize {
        match self {
            Downcast::F32(t) => t.collisions(),
            Downcast::F64(t) => t.collisions(),
            Downcast::Big(t) => t.collisions(),
        }
    }
}

impl DistanceOracle for Downcast {
    type Key = DowncastKey;
    fn len(&self) -> usize {
        match self {
            Downcast::F32(t) => t.len(),
            Downcast::F64(t) => t.len(),
            Downcast::Big(t) => DistanceOracle::len(t),
        }
    }
    fn key(&self, i: usize, j: usize) -> DowncastKey {
        match self {
            Downcast::F32(t) => DowncastKey::F32(t.key(i, j)),
            Downcast::F64(t) => DowncastKey::F64(t.key(i, j)),
            Downcast::Big(t) => DowncastKey::Big(t.key(i, j)),
        }
    }
    fn origin_key(&self, i: usize) -> DowncastKey {
        match self {
            Downcast::F32(t) => DowncastKey::F32(t.origin_key(i)),
            Downcast::F64(t) => DowncastKey::F64(t.origin_key(i)),
            Downcast::Big(t) => DowncastKey::Big(t.origin_key(i)),
        }
    }
    fn distance(&self, i: usize, j: usize) -> f64 {
        match self {
            Downcast::F32(t) => t.distance(i, j),
            Downcast::F64(t) => t.distance(i, j),
            Downcast::Big(t) => t.distance(i, j),
        }
    }
    fn space_tag(&self) -> String {
        format!("comb{}", self.bits())
    }
    fn is_empty(&self) -> bool {
        DistanceOracle::len(self) == 0
    }
}

/// Pulls a point back inside the open disk by shrinking it until
/// `1 - |x|^2 > 0` holds in the target arithmetic.
fn reproject<T: Coord>(mut pt: [T; 2], bits: usize, shrink: f64) -> [T; 2] {
    let one = T::from_f64(1.0, bits);
    let zero = T::from_f64(0.0, bits);
    let f = T::from_f64(1.0 - shrink, bits);
    loop {
        let n2 = pt[0].mul(&pt[0], bits).add(&pt[1].mul(&pt[1], bits), bits);
        if one.sub(&n2, bits) > zero {
            return pt;
        }
        pt = [pt[0].mul(&f, bits), pt[1].mul(&f, bits)];
    }
}

/// Rounds every coordinate to nearest at `bits` of precision.
///
/// 32 and 64 map to the native float formats; other widths stay big floats
/// (whose mantissas are allocated in whole 64-bit words).
pub fn downcast(t: &BigTable, bits: usize) -> Result<Downcast> {
    match bits {
        32 => {
            let pts = t.points().iter().map(|[x, y]| reproject([big_to_f32(x), big_to_f32(y)], 32, f32::EPSILON as f64));
            Ok(Downcast::F32(PointTable::new(32, pts.collect())?))
        }
        64 => {
            let pts = t.points().iter().map(|[x, y]| reproject([big_to_f64(x), big_to_f64(y)], 64, f64::EPSILON));
            Ok(Downcast::F64(PointTable::new(64, pts.collect())?))
        }
        b if b < 24 => Err(HrcbError::invalid(format!("unsupported precision {b}"))),
        b if b >= t.bits() => Ok(Downcast::Big(t.clone())),
        b => {
            let shrink = 2f64.powi(-(b.min(1000) as i32));
            let pts = t.points().iter().map(|[x, y]| {
                let round = |v: &BigFloat| {
                    let mut v = v.clone();
                    // only fails on allocation
                    let _ = v.set_precision(b, RM);
                    v
                };
                let [x, y] = reproject([round(x), round(y)], b, shrink);
                [x, y]
            });
            Ok(Downcast::Big(PointTable::new(b, pts.collect())?))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BigTableFile {
    pub bits: usize,
    /// Decimal coordinate strings.
    pub points: Vec<[String; 2]>,
}

impl BigTable {
    pub fn to_file(&self) -> Result<BigTableFile> {
        let mut cc = Consts::new().map_err(|e| HrcbError::invalid(format!("big-float constants: {e:?}")))?;
        let fmt = |v: &BigFloat, cc: &mut Consts| {
            v.format(Radix::Dec, RM, cc).map_err(|e| HrcbError::invalid(format!("format: {e:?}")))
        };
        let points = self.points.iter().map(|[x, y]| Ok([fmt(x, &mut cc)?, fmt(y, &mut cc)?])).collect::<Result<_>>()?;
        Ok(BigTableFile { bits: self.bits, points })
    }

    pub fn from_file(f: &BigTableFile) -> Result<Self> {
        let mut cc = Consts::new().map_err(|e| HrcbError::invalid(format!("big-float constants: {e:?}")))?;
        let mut parse = |s: &str| {
            let v = BigFloat::parse(s, Radix::Dec, f.bits, RM, &mut cc);
            if v.is_nan() {
                Err(HrcbError::invalid(format!("bad coordinate `{s}`")))
            } else {
                Ok(v)
            }
        };
        let pts = f.points.iter().map(|[x, y]| Ok([parse(x)?, parse(y)?])).collect::<Result<_>>()?;
        PointTable::new(f.bits, pts)
    }
}
