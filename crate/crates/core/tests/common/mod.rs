#![allow(dead_code)]

use hrcb::diffengine::fd;
use hrcb::encoders::{Arch, EncoderConfig};
use hrcb::manifold::{EmbeddingTable, Space};
use hrcb::treegen::f_s;
use ndarray::Array2;
use hrcb::objectives::{Dataset, Objective, Part, Prepared};
use hrcb::trainer::{init_model, TrainConfig};
use hrcb::treegen::{assign_classes, Hierarchy, Provenance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> Hierarchy {
    let mut parents = vec![None];
    for i in 1..n {
        parents.push(Some(rng.random_range(0..i)));
    }
    Hierarchy::from_parents(parents, Provenance::Constructed("random".into())).unwrap()
}

pub fn random_embedding(n: usize, space: Space, rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let d = 3;
    let raw = Array2::from_shape_fn((n, d), |_| rng.random_range(-0.6..0.6));
    let mut out = Array2::zeros((n, space.ambient_dim(d)));
    for i in 0..n {
        let p = space.exp0(raw.row(i).as_slice().unwrap());
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&p));
    }
    EmbeddingTable::new(space, out).unwrap()
}

pub struct Oracle {
    pub m_r: usize,
    pub m_o: usize,
    pub m_p: usize,
    pub m_b: f64,
    pub m_b_strict: f64,
    pub m_d: f64,
    pub m_dd: f64,
}

/// Pair-loop recount straight from the definitions, using a dense distance
/// matrix and LCA path lengths instead of the library's traversals.
pub fn oracle(h: &Hierarchy, e: &EmbeddingTable) -> Oracle {
    let n = h.len();
    let d = e.pairwise_distances();
    let origin = e.origin();
    let d0: Vec<f64> = (0..n).map(|i| e.space().dist(e.row(i), &origin)).collect();
    let r = h.root();
    let mut pos = vec![0; n];
    for (k, &v) in h.bfs_order().iter().enumerate() {
        pos[v] = k;
    }
    let (mut m_r, mut m_o, mut m_p) = (0, 0, 0);
    let (mut b, mut bs) = (1.0, 1.0);
    for v in 0..n {
        let Some(p) = h.parent(v) else {
            m_r += 1;
            m_o += 1;
            m_p += 1;
            continue;
        };
        m_r += usize::from(d[[p, r]] < d[[v, r]]);
        m_o += usize::from(d0[p] < d0[v]);
        m_p += usize::from(match h.parent(p) {
            None => true,
            Some(g) => d[[p, v]] < d[[g, v]],
        });
        let sibs: Vec<usize> = (0..n).filter(|&u| h.parent(u) == Some(p)).collect();
        let far = sibs.iter().map(|&u| d[[v, u]]).fold(f64::NEG_INFINITY, f64::max);
        let before = |w: usize| h.level(w) < h.level(v) || (h.level(w) == h.level(v) && pos[w] < pos[v]);
        let s_no: Vec<usize> = (0..n).filter(|&w| before(w) && !sibs.contains(&w)).collect();
        let hits = |set: &[usize]| set.iter().filter(|&&w| far < d[[v, w]]).count();
        b += if s_no.is_empty() { 1.0 } else { hits(&s_no) as f64 / s_no.len() as f64 };
        let strict: Vec<usize> = s_no.iter().copied().filter(|&w| w != p).collect();
        bs += if strict.is_empty() { 1.0 } else { hits(&strict) as f64 / strict.len() as f64 };
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((d[[i, j]], h.tree_distance(i, j) as f64));
        }
    }
    let f_d = |x: f64| pairs.iter().map(|&(a, g)| ((a / x / g).powi(2) - 1.0).abs()).sum::<f64>() / pairs.len() as f64;
    let dm = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.iter().map(|p| p.1).sum::<f64>();
    Oracle { m_r, m_o, m_p, m_b: b / n as f64, m_b_strict: bs / n as f64, m_d: f_d(1.0), m_dd: f_s(f_d(dm)) }
}

pub fn spaces() -> [(&'static str, Space); 3] {
    [("euclidean", Space::euclidean()), ("poincare", Space::poincare(1.0)), ("hyperboloid", Space::hyperboloid(1.0))]
}

pub const ARCHS: [Arch; 3] = [Arch::Mlp, Arch::Gcn, Arch::Gat];

/// Worst relative error between tape and central-difference gradients for one
/// random instance of `objective` on `arch` in `space`.
pub fn gradient_instance(objective: Objective, arch: Arch, space: Space, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(14..=24);
    let h = assign_classes(&random_tree(n, &mut rng), 2, seed).unwrap();
    let data = Dataset::from_hierarchy("rand", &h);
    let mut enc = EncoderConfig::new(arch, space, 3);
    enc.input_dim = 4;
    enc.hidden_dim = 5;
    enc.heads = 2;
    let cfg = TrainConfig::new(enc);
    let mut model = init_model(&cfg, &data, objective == Objective::Lr, seed).unwrap();
    // Zero biases put dead rectifier rows exactly on the kink, and nearly
    // coincident outputs sit on the kink of the distance, so redraw until
    // neither happens.
    let biases: Vec<_> = model.params.iter().filter(|(_, p)| p.name.ends_with(".b")).map(|(id, _)| id).collect();
    for attempt in 0.. {
        assert!(attempt < 100, "no generic point for {objective:?}/{arch:?}/{space:?} seed {seed}");
        for &id in &biases {
            model.params.get_mut(id).value.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let e = model.embed(&data).unwrap();
        let d = e.pairwise_distances();
        // rows clamped to the same point stay together under small perturbations
        let closest = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| d[[i, j]])
            .filter(|&x| x > 0.0)
            .fold(f64::INFINITY, f64::min);
        if closest > 1e-3 {
            break;
        }
    }
    let prep = Prepared::new(objective, &data, space, seed).unwrap();
    fd::check_params(&model.params, 1e-6, 4, |t, b| {
        let x = model.forward_tape(t, b, &data)?;
        let head = model.head.map(|(w, c)| (b.var(w), b.var(c)));
        prep.loss(t, x, head, Part::Train, 0)
    })
    .unwrap()
}

/// Runs `instances` random checks for every objective, encoder and space and
/// returns the worst error per combination.
pub fn gradient_suite(instances: u64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for objective in Objective::ALL {
        for arch in ARCHS {
            for (name, space) in spaces() {
                let worst = (0..instances)
                    .map(|s| gradient_instance(objective, arch, space, 1000 * s + 17))
                    .fold(0.0, f64::max);
                out.push((format!("{}/{}/{}", objective.tag(), arch.tag(), name), worst));
            }
        }
    }
    out
}

/// Friedman statistic in the rank-sum form with the general tie denominator.
pub fn friedman_stat(ranks: &[Vec<f64>]) -> f64 {
    let n = ranks.len() as f64;
    let k = ranks[0].len();
    let kf = k as f64;
    let sums: Vec<f64> = (0..k).map(|j| ranks.iter().map(|r| r[j]).sum()).collect();
    let c = n * kf * (kf + 1.0).powi(2) / 4.0;
    let num = sums.iter().map(|s| s * s).sum::<f64>() - n * c;
    let den = ranks.iter().flatten().map(|r| r * r).sum::<f64>() - c;
    if den <= 1e-12 {
        0.0
    } else {
        (kf - 1.0) * num / den
    }
}

/// Ranks a row with 1 for the largest value, ties averaged, by counting.
pub fn count_ranks(row: &[f64]) -> Vec<f64> {
    row.iter()
        .map(|&v| {
            let above = row.iter().filter(|&&u| u > v).count() as f64;
            let equal = row.iter().filter(|&&u| u == v).count() as f64;
            above + (equal + 1.0) / 2.0
        })
        .collect()
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Exact permutation p-value by enumerating every within-block shuffle.
pub fn exact_friedman_p(rows: &[Vec<f64>]) -> f64 {
    let ranks: Vec<Vec<f64>> = rows.iter().map(|r| count_ranks(r)).collect();
    let observed = friedman_stat(&ranks);
    let perms = permutations(ranks[0].len());
    let mut idx = vec![0usize; ranks.len()];
    let (mut hit, mut total) = (0u64, 0u64);
    loop {
        let shuffled: Vec<Vec<f64>> =
            ranks.iter().zip(&idx).map(|(r, &p)| perms[p].iter().map(|&j| r[j]).collect()).collect();
        total += 1;
        if friedman_stat(&shuffled) >= observed - 1e-9 {
            hit += 1;
        }
        let mut i = 0;
        loop {
            if i == idx.len() {
                return hit as f64 / total as f64;
            }
            idx[i] += 1;
            if idx[i] < perms.len() {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

/// Every `n × k` matrix with entries drawn from `0..levels`.
pub fn all_matrices(n: usize, k: usize, levels: u32) -> Vec<Vec<Vec<f64>>> {
    let cells = n * k;
    let count = (levels as usize).pow(cells as u32);
    (0..count)
        .map(|mut code| {
            let mut m = vec![vec![0.0; k]; n];
            for c in 0..cells {
                m[c / k][c % k] = (code % levels as usize) as f64;
                code /= levels as usize;
            }
            m
        })
        .collect()
}

pub struct StrategyAudit {
    /// Downstream epochs run under each frozen strategy.
    pub efd_epochs: usize,
    pub efed_epochs: usize,
    pub efd_constant: bool,
    pub efed_constant: bool,
    pub efed_depth: usize,
    /// Loss curves and final parameters of `L` at λ = 1 equal those of Normal bit for bit.
    pub l_matches_normal: bool,
}

fn constant(v: &[u64]) -> bool {
    !v.is_empty() && v.iter().all(|&c| c == v[0])
}

/// Pre-training contract checks on a generated tree of `n` nodes.
pub fn strategy_audit(n: usize, epochs: usize) -> StrategyAudit {
    use hrcb::trainer::{run_strategy, Seeds, StopStrategy, StrategyKind, StrategySpec};
    let mut p = hrcb::treegen::reference_params("T2").unwrap();
    p.n = n;
    let h = assign_classes(&hrcb::treegen::generate_tree(&p).unwrap(), 3, 0).unwrap();
    let data = Dataset::from_hierarchy("audit", &h);
    let mut enc = EncoderConfig::new(Arch::Gcn, Space::poincare(1.0), 8);
    enc.input_dim = 8;
    enc.hidden_dim = 8;
    let cfg = TrainConfig::new(enc);
    let stop = StopStrategy { max_epochs: epochs, patience: epochs, ..Default::default() };
    let seeds = Seeds::all(3);
    let spec = |kind, lambda| StrategySpec { kind, lambda, pretrain: Some(Objective::Gd) };

    let (_, efd) = run_strategy(&cfg, &spec(StrategyKind::Efd, 1.0), Objective::Lr, &data, &stop, seeds).unwrap();
    let (efed_model, efed) = run_strategy(&cfg, &spec(StrategyKind::Efed, 1.0), Objective::Hr, &data, &stop, seeds).unwrap();

    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut l_matches_normal = true;
    for downstream in [Objective::Hr, Objective::Lr] {
        let (lm, lo) = run_strategy(&cfg, &spec(StrategyKind::L, 1.0), downstream, &data, &stop, seeds).unwrap();
        let (nm, no) = run_strategy(&cfg, &StrategySpec::normal(), downstream, &data, &stop, seeds).unwrap();
        l_matches_normal &= bits(&lo.phases[0].train_loss) == bits(&no.phases[0].train_loss)
            && bits(&lo.phases[0].dev_loss) == bits(&no.phases[0].dev_loss)
            && lm.params == nm.params;
    }
    StrategyAudit {
        efd_epochs: efd.phases[1].epochs_run,
        efed_epochs: efed.phases[1].epochs_run,
        efd_constant: constant(&efd.phases[1].frozen_checksums),
        efed_constant: constant(&efed.phases[1].frozen_checksums),
        efed_depth: efed_model.stack.len(),
        l_matches_normal,
    }
}

/// Mean `(I_B, I_D)` of Tree2-style trees over seeds `0..seeds`.
pub fn tree2_means(seeds: u64) -> (f64, f64) {
    let mut p = hrcb::treegen::reference_params("Tree2").unwrap();
    let (mut ib, mut id) = (0.0, 0.0);
    for s in 0..seeds {
        p.seed = s;
        let prof = hrcb::treegen::generate_tree(&p).unwrap().profile().unwrap();
        ib += prof.i_b;
        id += prof.i_d;
    }
    (ib / seeds as f64, id / seeds as f64)
}
