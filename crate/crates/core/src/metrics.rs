//! Hierarchy-aware embedding scores and graph distortion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HrcbError, Result};
use crate::manifold::EmbeddingTable;
use crate::treegen::{f_s, Hierarchy};

/// Distances between embedded nodes.
///
/// `key` only has to be monotone in the geodesic distance; it is what the
/// four hierarchy scores compare, so high-precision embeddings can skip the
/// final `acosh` and keep their extra digits.
pub trait DistanceOracle: Sync {
    type Key: PartialOrd + Send;
    fn len(&self) -> usize;
    fn key(&self, i: usize, j: usize) -> Self::Key;
    fn origin_key(&self, i: usize) -> Self::Key;
    /// Geodesic distance in double precision.
    fn distance(&self, i: usize, j: usize) -> f64;
    fn space_tag(&self) -> String;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl DistanceOracle for EmbeddingTable {
    type Key = f64;
    fn len(&self) -> usize {
        EmbeddingTable::len(self)
    }
    fn key(&self, i: usize, j: usize) -> f64 {
        self.dist(i, j)
    }
    fn origin_key(&self, i: usize) -> f64 {
        self.space().dist0(self.row(i))
    }
    fn distance(&self, i: usize, j: usize) -> f64 {
        self.dist(i, j)
    }
    fn space_tag(&self) -> String {
        self.space().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrcReport {
    pub m_r: f64,
    pub m_o: f64,
    pub m_p: f64,
    /// Sibling score with every earlier non-sibling compared.
    pub m_b: f64,
    /// Sibling score that also leaves out the parent.
    pub m_b_strict: f64,
    pub m_d: f64,
    pub m_dd: f64,
    pub n: usize,
    pub space: String,
}

impl HrcReport {
    /// `M_r, M_o, M_p, M_b`.
    pub fn hierarchy_scores(&self) -> [f64; 4] {
        [self.m_r, self.m_o, self.m_p, self.m_b]
    }
}

fn check_sizes<O: DistanceOracle + ?Sized>(h: &Hierarchy, e: &O) -> Result<()> {
    if e.len() < h.len() {
        return Err(HrcbError::MissingEmbedding(e.len()));
    }
    Ok(())
}

pub fn metric_root<O: DistanceOracle + ?Sized>(h: &Hierarchy, e: &O) -> Result<f64> {
    check_sizes(h, e)?;
    let r = h.root();
    let hits = (0..h.len())
        .filter(|&v| match h.parent(v) {
            None => true,
            Some(p) => e.key(p, r) < e.key(v, r),
        })
        .count();
    Ok(hits as f64 / h.len() as f64)
}

pub fn metric_origin<O: DistanceOracle + ?Sized>(h: &Hierarchy, e: &O) -> Result<f64> {
    check_sizes(h, e)?;
    let hits = (0..h.len())
        .filter(|&v| match h.parent(v) {
            None => true,
            Some(p) => e.origin_key(p) < e.origin_key(v),
        })
        .count();
    Ok(hits as f64 / h.len() as f64)
}

pub fn metric_parent<O: DistanceOracle + ?Sized>(h: &Hierarchy, e: &O) -> Result<f64> {
    check_sizes(h, e)?;
    let hits = (0..h.len())
        .filter(|&v| match h.parent(v).map(|p| (p, h.parent(p))) {
            None | Some((_, None)) => true,
            Some((p, Some(g))) => e.key(p, v) < e.key(g, v),
        })
        .count();
    Ok(hits as f64 / h.len() as f64)
}

/// Per-node sibling fractions `(literal, strict)` in breadth-first order.
fn sibling_fractions<O: DistanceOracle + ?Sized>(h: &Hierarchy, e: &O) -> Vec<(f64, f64)> {
    let order = h.bfs_order();
    order
        .par_iter()
        .enumerate()
        .skip(1)
        .map(|(pos, &v)| {
            let p = h.parent(v).expect("non-root");
            let sibs = h.children(p);
            let mut far: Option<O::Key> = None;
            for &u in sibs {
                let d = e.key(v, u);
                if far.as_ref().is_none_or(|f| d > *f) {
                    far = Some(d);
                }
            }
            let far = far.expect("v is its own sibling");
            let (mut hit, mut total, mut hit_s, mut total_s) = (0usize, 0usize, 0usize, 0usize);
            for &w in &order[..pos] {
                if h.parent(w) == Some(p) {
                    continue;
                }
                let ok = far < e.key(v, w);
                total += 1;
                hit += usize::from(ok);
                if w != p {
                    total_s += 1;
                    hit_s += usize::from(ok);
                }
            }
            let frac = |h: usize, t: usize| if t == 0 { 1.0 } else { h as f64 / t as f64 };
            (frac(hit, total), frac(hit_s, total_s))
        })
        .collect()
}

/// `(literal, strict)` sibling scores.
pub fn metric_sibling_both<O: DistanceOracle + ?Sized>(h: &Hierarchy, e: &O) -> Result<(f64, f64)> {
    check_sizes(h, e)?;
    let fr = sibling_fractions(h, e);
    let n = h.len() as f64;
    let lit = 1.0 + fr.iter().map(|f| f.0).sum::<f64>();
    let strict = 1.0 + fr.iter().map(|f| f.1).sum::<f64>();
    Ok((lit / n, strict / n))
}

pub fn metric_sibling<O: DistanceOracle + ?Sized>(h: &Hierarchy, e: &O) -> Result<f64> {
    Ok(metric_sibling_both(h, e)?.0)
}

/// `(M_d, M_dd)` with tree path lengths as graph distances.
pub fn graph_distortion<O: DistanceOracle + ?Sized>(h: &Hierarchy, e: &O) -> Result<(f64, f64)> {
    check_sizes(h, e)?;
    let g = h.graph();
    let n = h.len();
    if n < 2 {
        return Err(HrcbError::invalid("distortion needs at least two nodes"));
    }
    // (d_M, d_G) per unordered pair, grouped by the smaller index
    let rows: Vec<Vec<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dg = g.bfs_distances(i);
            ((i + 1)..n).map(|j| (e.distance(i, j), dg[j] as f64)).collect()
        })
        .collect();
    if rows.iter().flatten().any(|&(_, dg)| dg == u32::MAX as f64) {
        return Err(HrcbError::InvalidHierarchy("disconnected pair".into()));
    }
    let (sm, sg) = rows.iter().flatten().fold((0.0, 0.0), |(a, b), &(dm, dg)| (a + dm, b + dg));
    let pairs = (n * (n - 1) / 2) as f64;
    let f_d = |x: f64| rows.iter().flatten().map(|&(dm, dg)| ((dm / x / dg).powi(2) - 1.0).abs()).sum::<f64>() / pairs;
    let dm = sm / sg;
    let m_dd = if dm > 0.0 { f_s(f_d(dm)) } else { f_s(1.0) };
    Ok((f_d(1.0), m_dd))
}

/// All scores for one embedding of one hierarchy.
pub fn evaluate<O: DistanceOracle + ?Sized>(h: &Hierarchy, e: &O) -> Result<HrcReport> {
    let (m_b, m_b_strict) = metric_sibling_both(h, e)?;
    let (m_d, m_dd) = graph_distortion(h, e)?;
    let r = HrcReport {
        m_r: metric_root(h, e)?,
        m_o: metric_origin(h, e)?,
        m_p: metric_parent(h, e)?,
        m_b,
        m_b_strict,
        m_d,
        m_dd,
        n: h.len(),
        space: e.space_tag(),
    };
    if [r.m_r, r.m_o, r.m_p, r.m_b, r.m_b_strict, r.m_d, r.m_dd].iter().any(|v| !v.is_finite()) {
        return Err(HrcbError::NonFinite("hierarchy scores".into()));
    }
    Ok(r)
}

/// Constructed embeddings that separate the four hierarchy scores.
pub mod constructions {
    use ndarray::Array2;

    use crate::manifold::{EmbeddingTable, Space};
    use crate::treegen::Hierarchy;

    fn table(n: usize, dim: usize, mut place: impl FnMut(usize, &mut [f64])) -> EmbeddingTable {
        let mut a = Array2::zeros((n, dim));
        for v in 0..n {
            place(v, a.row_mut(v).into_slice().expect("contiguous"));
        }
        EmbeddingTable::new(Space::euclidean(), a).expect("finite coordinates")
    }

    fn depth(h: &Hierarchy, v: usize) -> usize {
        h.level(v) - 1
    }

    /// Each depth `t` collapses onto `t e0 ± 0.6 t e_t`, first children on the `+` side,
    /// so siblings sit `1.2 t` apart while every earlier node is at most that far.
    pub fn sibling_spread(h: &Hierarchy) -> EmbeddingTable {
        let dim = h.height() + 1;
        table(h.len(), dim, |v, x| {
            let t = depth(h, v) as f64;
            if let Some(p) = h.parent(v) {
                let first = h.children(p)[0] == v;
                x[0] = t;
                x[depth(h, v)] = if first { 0.6 * t } else { -0.6 * t };
            }
        })
    }

    /// Root at the origin, every other node on one ray at radius `H - depth`.
    pub fn inverted_below_root(h: &Hierarchy) -> EmbeddingTable {
        let top = h.height() as f64;
        table(h.len(), 2, |v, x| {
            if v != h.root() {
                x[0] = top - depth(h, v) as f64;
            }
        })
    }

    /// Whole tree on one ray with the root farthest from the origin.
    pub fn inverted_about_origin(h: &Hierarchy) -> EmbeddingTable {
        let top = h.height() as f64;
        table(h.len(), 2, |v, x| x[0] = top - depth(h, v) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::constructions::*;
    use super::*;
    use crate::manifold::Space;
    use crate::treegen::{complete_tree, Provenance};
    use ndarray::array;

    fn radial(h: &Hierarchy) -> EmbeddingTable {
        // radius = depth; each child's angle is a small offset of its parent's
        let mut angle = vec![0.0f64; h.len()];
        let mut a = ndarray::Array2::zeros((h.len(), 2));
        for &v in h.bfs_order() {
            let k = h.children(v).len() as f64;
            let spread = 1.0 / 3f64.powi(h.level(v) as i32);
            for (i, &c) in h.children(v).iter().enumerate() {
                angle[c] = angle[v] + spread * (i as f64 - (k - 1.0) / 2.0);
                let r = (h.level(c) - 1) as f64;
                a[[c, 0]] = r * angle[c].cos();
                a[[c, 1]] = r * angle[c].sin();
            }
        }
        EmbeddingTable::new(Space::euclidean(), a).unwrap()
    }

    #[test]
    fn perfect_radial_scores() {
        let h = complete_tree(2, 3);
        let e = radial(&h);
        assert_eq!(metric_root(&h, &e).unwrap(), 1.0);
        assert_eq!(metric_origin(&h, &e).unwrap(), 1.0);
        assert_eq!(metric_parent(&h, &e).unwrap(), 1.0);
    }

    #[test]
    fn separated_sibling_clusters() {
        let h = complete_tree(2, 3);
        let far = 100.0;
        let mut a = ndarray::Array2::zeros((7, 2));
        let dirs = [(0.0, 0.0), (far, 0.0), (-far, 0.0), (far, 0.5), (far, -0.5), (-far, 0.5), (-far, -0.5)];
        for (v, &(x, y)) in dirs.iter().enumerate() {
            a[[v, 0]] = x;
            a[[v, 1]] = y;
        }
        let e = EmbeddingTable::new(Space::euclidean(), a).unwrap();
        // nodes 1 and 2 are 200 apart with the root 100 away, so both fail;
        // leaves fail only against their own parent
        let (lit, strict) = metric_sibling_both(&h, &e).unwrap();
        let want = (1.0 + 2.0 / 3.0 + 2.0 / 3.0 + 0.8 + 0.8) / 7.0;
        assert!((lit - want).abs() < 1e-15);
        // without the parent, level-2 nodes have nothing to compare and every leaf passes
        assert_eq!(strict, 1.0);
    }

    #[test]
    fn hand_built_constructions() {
        let h = complete_tree(2, 6);
        let n = h.len() as f64;
        assert_eq!(n, 63.0);
        let e = sibling_spread(&h);
        assert_eq!(metric_root(&h, &e).unwrap(), 1.0);
        assert_eq!(metric_origin(&h, &e).unwrap(), 1.0);
        assert_eq!(metric_parent(&h, &e).unwrap(), 1.0);
        assert_eq!(metric_sibling(&h, &e).unwrap(), 1.0 / n);
        let e = inverted_below_root(&h);
        assert_eq!(metric_root(&h, &e).unwrap(), 3.0 / n);
        assert_eq!(metric_origin(&h, &e).unwrap(), 3.0 / n);
        assert_eq!(metric_parent(&h, &e).unwrap(), 1.0);
        let e = inverted_about_origin(&h);
        assert_eq!(metric_root(&h, &e).unwrap(), 1.0);
        assert_eq!(metric_origin(&h, &e).unwrap(), 1.0 / n);
    }

    #[test]
    fn ties_fail() {
        let h = Hierarchy::from_parents(vec![None, Some(0), Some(1)], Provenance::Constructed("p".into())).unwrap();
        let e = EmbeddingTable::new(Space::euclidean(), array![[0.0], [1.0], [1.0]]).unwrap();
        assert_eq!(metric_root(&h, &e).unwrap(), 2.0 / 3.0);
        assert_eq!(metric_origin(&h, &e).unwrap(), 2.0 / 3.0);
        let e = EmbeddingTable::new(Space::euclidean(), array![[0.0], [1.0], [0.5]]).unwrap();
        // d(parent, v) = 0.5 = d(grandparent, v)
        assert_eq!(metric_parent(&h, &e).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn distortion_exact_and_scaled() {
        let h = Hierarchy::from_parents(vec![None, Some(0), Some(1), Some(2)], Provenance::Constructed("p".into())).unwrap();
        let e = EmbeddingTable::new(Space::euclidean(), array![[0.0], [1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(graph_distortion(&h, &e).unwrap(), (0.0, 0.0));
        let e = EmbeddingTable::new(Space::euclidean(), array![[0.0], [10.0], [20.0], [30.0]]).unwrap();
        let (md, mdd) = graph_distortion(&h, &e).unwrap();
        assert_eq!(md, 99.0);
        assert_eq!(mdd, 0.0);
    }

    #[test]
    fn missing_embedding_rejected() {
        let h = complete_tree(2, 3);
        let e = EmbeddingTable::new(Space::euclidean(), ndarray::Array2::zeros((3, 2))).unwrap();
        assert!(matches!(metric_root(&h, &e), Err(HrcbError::MissingEmbedding(3))));
    }
}
