//! Differentiable hierarchical soft clustering.
//!
//! A task representation enters at level 0 and is propagated through L
//! transitions. Each transition softly assigns every current representation
//! to the next level's learnable centers (softmax over halved squared scaled
//! Euclidean distances) and forms the next representations as
//! assignment-weighted averages of per-destination affine-tanh transforms.
//! Level sizes run K^0 = 1, K^1, ..., K^L = 1; the default hierarchy above
//! the root is 4-2-1, and a K-1 configuration gives flat clustering.
//!
//! The bottom level can grow online: [`expand`] appends one center and its
//! transform with fresh random values, leaving every existing tensor
//! untouched.

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::params::{init_normal, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Standard deviation for randomly initialized centers (and transforms).
const CENTER_INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCfg {
    /// Cluster counts above the root, e.g. [4, 2, 1]. The last entry must
    /// be 1.
    pub sizes: Vec<usize>,
    /// Representation dimension d.
    pub dim: usize,
    /// Per-level scaling factor applied inside the assignment distance.
    pub sigma: f64,
    /// When set, sigma is a learnable per-level parameter, stored as its
    /// logarithm so it stays positive.
    pub learnable_sigma: bool,
}

impl Default for ClusterCfg {
    fn default() -> Self {
        ClusterCfg {
            sizes: vec![4, 2, 1],
            dim: 40,
            sigma: 1.0,
            learnable_sigma: false,
        }
    }
}

/// Mutable level structure: sizes including the implicit root,
/// [1, K^1, ..., K^L]. Kept separately from the config because expansion
/// changes it at run time and checkpoints must restore it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub level_sizes: Vec<usize>,
}

impl Structure {
    pub fn from_cfg(cfg: &ClusterCfg) -> Self {
        assert!(!cfg.sizes.is_empty(), "hierarchy needs at least one level");
        assert_eq!(*cfg.sizes.last().unwrap(), 1, "top level must have one cluster");
        let mut level_sizes = vec![1];
        level_sizes.extend(&cfg.sizes);
        Structure { level_sizes }
    }

    /// Number of transitions (levels of parameters).
    pub fn transitions(&self) -> usize {
        self.level_sizes.len() - 1
    }

    /// Cluster count in the destination level of transition `t`.
    pub fn dest_size(&self, t: usize) -> usize {
        self.level_sizes[t + 1]
    }

    pub fn bottom_size(&self) -> usize {
        self.level_sizes[1]
    }
}

fn center_name(t: usize, k: usize) -> String {
    format!("cluster.t{t}.c{k:02}")
}
fn w_name(t: usize, k: usize) -> String {
    format!("cluster.t{t}.w{k:02}")
}
fn b_name(t: usize, k: usize) -> String {
    format!("cluster.t{t}.b{k:02}")
}
fn sigma_name(t: usize) -> String {
    format!("cluster.t{t}.logsigma")
}

/// Registers centers, transforms, and (optionally) log-sigma per transition.
pub fn init_params(store: &mut ParamStore, cfg: &ClusterCfg, structure: &Structure, rng: &mut Rng) {
    let d = cfg.dim;
    for t in 0..structure.transitions() {
        for k in 0..structure.dest_size(t) {
            store.insert(center_name(t, k), init_normal(&[d], CENTER_INIT_STD, rng));
            store.insert(w_name(t, k), init_normal(&[d, d], CENTER_INIT_STD, rng));
            store.insert(b_name(t, k), Tensor::zeros(&[d]));
        }
        if cfg.learnable_sigma {
            store.insert(sigma_name(t), Tensor::vector(vec![cfg.sigma.ln()]));
        }
    }
}

/// 1/sigma for transition `t`, as a scalar node.
fn inv_sigma(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ClusterCfg,
    t: usize,
) -> Result<NodeId> {
    if cfg.learnable_sigma {
        let ls = bound.get(&sigma_name(t))?;
        let ls = g.reshape(ls, vec![])?;
        let s = g.exp(ls)?;
        g.recip(s)
    } else {
        Ok(g.scalar(1.0 / cfg.sigma))
    }
}

/// Soft assignment of one representation against a set of centers:
/// p_k proportional to exp(-||(h - c_k)/sigma||^2 / 2).
pub fn assign(
    g: &mut Graph,
    h: NodeId,
    centers: &[NodeId],
    inv_sigma: NodeId,
) -> Result<NodeId> {
    let mut logits = Vec::with_capacity(centers.len());
    for &c in centers {
        let diff = g.sub(h, c)?;
        let scaled = g.scale(diff, inv_sigma)?;
        let sq = g.square(scaled)?;
        let dist = g.sum(sq)?;
        let logit = g.scalar_mul(dist, -0.5)?;
        let logit = g.reshape(logit, vec![1])?;
        logits.push(logit);
    }
    let stacked = g.concat(&logits)?;
    g.softmax(stacked)
}

/// Weighted-average update: for each destination cluster k', sum over source
/// representations of p[src][k'] * tanh(W_k' h_src + b_k').
pub fn update(
    g: &mut Graph,
    sources: &[NodeId],
    assignments: &[NodeId],
    transforms: &[(NodeId, NodeId)],
) -> Result<Vec<NodeId>> {
    let mut next = Vec::with_capacity(transforms.len());
    for (k, (w, b)) in transforms.iter().enumerate() {
        let mut acc: Option<NodeId> = None;
        for (src, h) in sources.iter().enumerate() {
            let z = g.affine_vec(*w, *h, *b)?;
            let tz = g.tanh(z)?;
            let p = g.slice(assignments[src], k, 1)?;
            let p = g.reshape(p, vec![])?;
            let term = g.scale(tz, p)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => g.add(prev, term)?,
            });
        }
        next.push(acc.expect("at least one source cluster"));
    }
    Ok(next)
}

/// Full clustering pass from the task representation to the final
/// representation. Returns the final vector and, per transition, the
/// per-source assignment probability vectors (row `s` of transition `t` is
/// the distribution of source cluster `s` over the destination clusters; the
/// transition-0 row is the per-task cluster heatmap datum).
pub fn forward(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &ClusterCfg,
    structure: &Structure,
    task_repr: NodeId,
) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
    let mut hs = vec![task_repr];
    let mut records = Vec::with_capacity(structure.transitions());
    for t in 0..structure.transitions() {
        let k_next = structure.dest_size(t);
        let centers: Vec<NodeId> = (0..k_next)
            .map(|k| bound.get(&center_name(t, k)))
            .collect::<Result<_>>()?;
        let transforms: Vec<(NodeId, NodeId)> = (0..k_next)
            .map(|k| Ok((bound.get(&w_name(t, k))?, bound.get(&b_name(t, k))?)))
            .collect::<Result<_>>()?;
        let is = inv_sigma(g, bound, cfg, t)?;
        let mut rows = Vec::with_capacity(hs.len());
        for &h in &hs {
            rows.push(assign(g, h, &centers, is)?);
        }
        hs = update(g, &hs, &rows, &transforms)?;
        records.push(rows);
    }
    debug_assert_eq!(hs.len(), 1, "hierarchy must end in a single cluster");
    Ok((hs[0], records))
}

/// Appends one cluster (center + transform) to the bottom level. Existing
/// tensors are untouched; new ones use the standard initializers.
pub fn expand(
    store: &mut ParamStore,
    structure: &mut Structure,
    dim: usize,
    rng: &mut Rng,
) {
    let k = structure.level_sizes[1];
    store.insert(center_name(0, k), init_normal(&[dim], CENTER_INIT_STD, rng));
    store.insert(w_name(0, k), init_normal(&[dim, dim], CENTER_INIT_STD, rng));
    store.insert(b_name(0, k), Tensor::zeros(&[dim]));
    structure.level_sizes[1] = k + 1;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(sizes: Vec<usize>, dim: usize) -> ClusterCfg {
        ClusterCfg {
            sizes,
            dim,
            sigma: 1.0,
            learnable_sigma: false,
        }
    }

    fn setup(cfg: &ClusterCfg, seed: u64) -> (ParamStore, Structure) {
        let structure = Structure::from_cfg(cfg);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        init_params(&mut store, cfg, &structure, &mut rng);
        (store, structure)
    }

    #[test]
    fn equidistant_centers_split_evenly() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let c1 = g.leaf(Tensor::vector(vec![1.0, 0.0]));
        let c2 = g.leaf(Tensor::vector(vec![-1.0, 0.0]));
        let is = g.scalar(1.0);
        let p = assign(&mut g, h, &[c1, c2], is).unwrap();
        assert_eq!(g.eval(p).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn assignment_matches_hand_evaluation() {
        // h at the first center, second center two away, sigma 1:
        // p1 = 1 / (1 + exp(-2))
        let mut g = Graph::new();
        let h = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let c1 = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let c2 = g.leaf(Tensor::vector(vec![2.0, 0.0]));
        let is = g.scalar(1.0);
        let p = assign(&mut g, h, &[c1, c2], is).unwrap();
        let want = 1.0 / (1.0 + (-2.0f64).exp());
        let got = g.eval(p).unwrap();
        assert!((got.data()[0] - want).abs() < 1e-12, "{}", got.data()[0]);
    }

    #[test]
    fn huge_sigma_flattens_the_assignment() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::vector(vec![0.3, -0.7]));
        let cs: Vec<NodeId> = [(1.0, 0.2), (-0.5, 0.9), (0.0, -1.3)]
            .iter()
            .map(|(a, b)| g.leaf(Tensor::vector(vec![*a, *b])))
            .collect();
        let is = g.scalar(1.0 / 1e6);
        let p = assign(&mut g, h, &cs, is).unwrap();
        for v in g.eval(p).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-4);
        }
    }

    #[test]
    fn single_source_update_collapses_to_tanh_transform() {
        let d = 3;
        let mut g = Graph::new();
        let h = g.leaf(Tensor::vector(vec![0.2, -0.4, 0.9]));
        let eye = g.leaf(Tensor::matrix(
            d,
            d,
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
        ));
        let zero = g.leaf(Tensor::zeros(&[d]));
        let p = g.leaf(Tensor::vector(vec![1.0]));
        let out = update(&mut g, &[h], &[p], &[(eye, zero)]).unwrap();
        let got = g.eval(out[0]).unwrap();
        let want: Vec<f64> = [0.2f64, -0.4, 0.9].iter().map(|v| v.tanh()).collect();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_only_update_ignores_the_input() {
        let d = 2;
        let mut g = Graph::new();
        let h = g.leaf(Tensor::vector(vec![5.0, -7.0]));
        let w = g.leaf(Tensor::zeros(&[d, d]));
        let b = g.leaf(Tensor::vector(vec![0.4, -1.2]));
        let p = g.leaf(Tensor::vector(vec![1.0]));
        let out = update(&mut g, &[h], &[p], &[(w, b)]).unwrap();
        let got = g.eval(out[0]).unwrap();
        assert!((got.data()[0] - 0.4f64.tanh()).abs() < 1e-15);
        assert!((got.data()[1] - (-1.2f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn random_level_matches_loop_oracle() {
        let d = 4;
        let mut rng = Rng::new(42);
        let hs: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[d], |_| rng.range(-1.0, 1.0)))
            .collect();
        let ps: Vec<Tensor> = (0..2)
            .map(|_| {
                let a = rng.range(0.1, 0.9);
                Tensor::vector(vec![a, 1.0 - a])
            })
            .collect();
        let ws: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[d, d], |_| rng.range(-0.5, 0.5)))
            .collect();
        let bs: Vec<Tensor> = (0..2)
            .map(|_| Tensor::from_fn(&[d], |_| rng.range(-0.3, 0.3)))
            .collect();

        // Independent plain-loop recomputation.
        let mut want = vec![vec![0.0; d]; 2];
        for k in 0..2 {
            for (s, h) in hs.iter().enumerate() {
                for r in 0..d {
                    let mut acc = bs[k].data()[r];
                    for c in 0..d {
                        acc += ws[k].data()[r * d + c] * h.data()[c];
                    }
                    want[k][r] += ps[s].data()[k] * acc.tanh();
                }
            }
        }

        let mut g = Graph::new();
        let hn: Vec<NodeId> = hs.iter().map(|t| g.leaf(t.clone())).collect();
        let pn: Vec<NodeId> = ps.iter().map(|t| g.leaf(t.clone())).collect();
        let tn: Vec<(NodeId, NodeId)> = ws
            .iter()
            .zip(&bs)
            .map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone())))
            .collect();
        let out = update(&mut g, &hn, &pn, &tn).unwrap();
        for k in 0..2 {
            let got = g.eval(out[k]).unwrap();
            for (a, b) in got.data().iter().zip(&want[k]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_1_1_hierarchy_is_a_single_transform() {
        let cfg = small_cfg(vec![1], 3);
        let (store, structure) = setup(&cfg, 3);
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, &store);
        let gi = g.leaf(Tensor::vector(vec![0.1, 0.2, -0.3]));
        let (h, records) = forward(&mut g, &bound, &cfg, &structure, gi).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(g.eval(records[0][0]).unwrap().data(), &[1.0]);
        // h = tanh(W g + b) directly
        let w = bound.get("cluster.t0.w00").unwrap();
        let b = bound.get("cluster.t0.b00").unwrap();
        let z = g.affine_vec(w, gi, b).unwrap();
        let want = g.tanh(z).unwrap();
        let hv = g.eval(h).unwrap();
        let wv = g.eval(want).unwrap();
        for (a, b) in hv.data().iter().zip(wv.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn assignment_rows_sum_to_one_everywhere() {
        let cfg = small_cfg(vec![4, 2, 1], 5);
        let (store, structure) = setup(&cfg, 17);
        let mut rng = Rng::new(18);
        for _ in 0..10 {
            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, &store);
            let gi = g.leaf(Tensor::from_fn(&[5], |_| rng.range(-2.0, 2.0)));
            let (_, records) = forward(&mut g, &bound, &cfg, &structure, gi).unwrap();
            assert_eq!(records.len(), 3);
            for rows in &records {
                for row in rows {
                    let p = g.eval(*row).unwrap();
                    let s: f64 = p.data().iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                    if p.numel() > 1 {
                        assert!(p.data().iter().all(|v| (0.0..1.0).contains(v)));
                    } else {
                        assert_eq!(p.data(), &[1.0]);
                    }
                }
            }
        }
    }

    #[test]
    fn flat_hierarchy_is_single_level_clustering() {
        let cfg = small_cfg(vec![4, 1], 3);
        let (store, structure) = setup(&cfg, 23);
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, &store);
        let gi = g.leaf(Tensor::vector(vec![0.4, -0.1, 0.2]));
        let (_, records) = forward(&mut g, &bound, &cfg, &structure, gi).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].len(), 1); // one row: root -> 4 clusters
        assert_eq!(g.eval(records[0][0]).unwrap().numel(), 4);
        // collapse transition: every row is the trivial distribution
        for row in &records[1] {
            assert_eq!(g.eval(*row).unwrap().data(), &[1.0]);
        }
    }

    #[test]
    fn translation_leaves_assignments_unchanged() {
        let d = 4;
        let mut rng = Rng::new(29);
        let h = Tensor::from_fn(&[d], |_| rng.range(-1.0, 1.0));
        let cs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(&[d], |_| rng.range(-1.0, 1.0)))
            .collect();
        let t = Tensor::from_fn(&[d], |_| rng.range(-0.5, 0.5));
        let run = |shift: bool| {
            let mut g = Graph::new();
            let apply = |v: &Tensor| {
                if shift {
                    Tensor::from_fn(&[d], |i| v.data()[i] + t.data()[i])
                } else {
                    v.clone()
                }
            };
            let hn = g.leaf(apply(&h));
            let cn: Vec<NodeId> = cs.iter().map(|c| g.leaf(apply(c))).collect();
            let is = g.scalar(1.0);
            let p = assign(&mut g, hn, &cn, is).unwrap();
            g.eval(p).unwrap()
        };
        let (a, b) = (run(false), run(true));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_differentiable_against_finite_differences() {
        use crate::gradcheck::{central_diff, Tolerance, FD_STEP};
        let tol = Tolerance::new(1e-4, 1e-7);
        let cfg = small_cfg(vec![3, 1], 4);
        let (store, structure) = setup(&cfg, 31);
        let mut rng = Rng::new(32);
        let gi = Tensor::from_fn(&[4], |_| rng.range(-1.0, 1.0));

        let objective = |store: &ParamStore, gi: &Tensor| {
            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, store);
            let gn = g.leaf(gi.clone());
            let (h, _) = forward(&mut g, &bound, &cfg, &structure, gn).unwrap();
            let sq = g.square(h).unwrap();
            let s = g.sum(sq).unwrap();
            g.eval(s).unwrap().item()
        };

        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, &store);
        let gn = g.leaf(gi.clone());
        let (h, _) = forward(&mut g, &bound, &cfg, &structure, gn).unwrap();
        let sq = g.square(h).unwrap();
        let s = g.sum(sq).unwrap();

        // w.r.t. the representation itself
        let gg = g.grad(s, &[gn]).unwrap()[0];
        let analytic = g.eval(gg).unwrap();
        for c in 0..4 {
            let fd = central_diff(
                |v| {
                    let mut t = gi.clone();
                    t.data_mut()[c] = v;
                    objective(&store, &t)
                },
                gi.data()[c],
                FD_STEP,
            );
            assert!(tol.close(analytic.data()[c], fd), "g_i[{c}]");
        }

        // w.r.t. every cluster parameter (spread coordinates)
        let names: Vec<String> = store.names().cloned().collect();
        let ids: Vec<NodeId> = names.iter().map(|n| bound.get(n).unwrap()).collect();
        let grads = g.grad(s, &ids).unwrap();
        for (name, gid) in names.iter().zip(&grads) {
            let analytic = g.eval(*gid).unwrap();
            let t = store.get(name).unwrap().clone();
            for c in [0, t.numel() - 1] {
                let fd = central_diff(
                    |v| {
                        let mut s2 = store.clone();
                        s2.get_mut(name).unwrap().data_mut()[c] = v;
                        objective(&s2, &gi)
                    },
                    t.data()[c],
                    FD_STEP,
                );
                assert!(
                    tol.close(analytic.data()[c], fd),
                    "{name}[{c}]: {} vs {}",
                    analytic.data()[c],
                    fd
                );
            }
        }
    }

    #[test]
    fn expansion_preserves_existing_parameters_bit_exactly() {
        let cfg = small_cfg(vec![2, 1], 3);
        let (mut store, mut structure) = setup(&cfg, 41);
        let before: Vec<(String, Tensor)> = store
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let mut rng = Rng::new(99);
        expand(&mut store, &mut structure, 3, &mut rng);
        assert_eq!(structure.level_sizes, vec![1, 3, 1]);
        for (name, t) in &before {
            assert!(store.get(name).unwrap().bits_eq(t), "{name} changed");
        }
        assert!(store.contains("cluster.t0.c02"));

        expand(&mut store, &mut structure, 3, &mut rng);
        assert_eq!(structure.level_sizes, vec![1, 4, 1]);

        // Post-expansion forward still yields normalized rows.
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, &store);
        let gi = g.leaf(Tensor::vector(vec![0.1, -0.2, 0.3]));
        let (_, records) = forward(&mut g, &bound, &cfg, &structure, gi).unwrap();
        let p = g.eval(records[0][0]).unwrap();
        assert_eq!(p.numel(), 4);
        let s: f64 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn learnable_sigma_round_trips_through_exp() {
        let cfg = ClusterCfg {
            sizes: vec![2, 1],
            dim: 2,
            sigma: 2.0,
            learnable_sigma: true,
        };
        let (store, structure) = setup(&cfg, 51);
        assert!(store.contains("cluster.t0.logsigma"));
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, &store);
        let gi = g.leaf(Tensor::vector(vec![0.5, -0.5]));
        let (_, records) = forward(&mut g, &bound, &cfg, &structure, gi).unwrap();
        let p = g.eval(records[0][0]).unwrap();
        let s: f64 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
