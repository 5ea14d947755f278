//! Task representation learning.
//!
//! A support set is turned into a fixed-length task representation by
//! pre-embedding every (x, y) example with a shared fully connected layer and
//! aggregating with one of two autoencoders:
//!
//! * PAA — pooling autoencoder: per-example FC encoder, mean or max pooling
//!   over examples, and an FC decoder whose reconstruction error of the
//!   pre-embeddings is the auxiliary loss. Pooling uses canonical-order
//!   reductions, so the result is bit-exactly invariant to example order.
//! * RAA — recurrent autoencoder: a GRU consumes the pre-embeddings in a
//!   caller-supplied feeding order, the representation is the mean of the
//!   hidden states, and a GRU decoder runs back from the final state
//!   reconstructing the sequence in reverse. The result depends on the
//!   feeding order, so training resamples the permutation each iteration and
//!   evaluation averages over a handful of fixed permutations.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{init_glorot, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Raa,
    Paa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorCfg {
    pub kind: AggregatorKind,
    /// Task representation size d.
    pub repr_dim: usize,
    /// Pre-embedding size m.
    pub embed_dim: usize,
    /// Pooling operator for PAA.
    pub pool: PoolMode,
}

impl Default for AggregatorCfg {
    fn default() -> Self {
        AggregatorCfg {
            kind: AggregatorKind::Raa,
            repr_dim: 40,
            embed_dim: 40,
            pool: PoolMode::Mean,
        }
    }
}

/// Registers the pre-embedding and the configured autoencoder's parameters.
pub fn init_params(store: &mut ParamStore, cfg: &AggregatorCfg, rng: &mut Rng) {
    let (d, m) = (cfg.repr_dim, cfg.embed_dim);
    store.insert("pre.w", init_glorot(m, 2, rng));
    store.insert("pre.b", Tensor::zeros(&[m]));
    match cfg.kind {
        AggregatorKind::Paa => {
            store.insert("paa.enc.w1", init_glorot(d, m, rng));
            store.insert("paa.enc.b1", Tensor::zeros(&[d]));
            store.insert("paa.enc.w2", init_glorot(d, d, rng));
            store.insert("paa.enc.b2", Tensor::zeros(&[d]));
            store.insert("paa.dec.w1", init_glorot(d, d, rng));
            store.insert("paa.dec.b1", Tensor::zeros(&[d]));
            store.insert("paa.dec.w2", init_glorot(m, d, rng));
            store.insert("paa.dec.b2", Tensor::zeros(&[m]));
        }
        AggregatorKind::Raa => {
            // Decoder states are the reconstructions of the pre-embeddings,
            // so the recurrent aggregator needs matching dimensions.
            assert_eq!(
                d, m,
                "recurrent aggregator requires repr_dim == embed_dim"
            );
            for gate in ["z", "r", "n"] {
                store.insert(format!("raa.enc.w{gate}"), init_glorot(d, m, rng));
                store.insert(format!("raa.enc.u{gate}"), init_glorot(d, d, rng));
                store.insert(format!("raa.enc.b{gate}"), Tensor::zeros(&[d]));
                store.insert(format!("raa.dec.u{gate}"), init_glorot(d, d, rng));
                store.insert(format!("raa.dec.b{gate}"), Tensor::zeros(&[d]));
            }
        }
    }
}

/// Pre-embeds one (x, y) example: a single FC layer on the 2-vector.
fn pre_embed(g: &mut Graph, bound: &BoundParams, x: f64, y: f64) -> Result<NodeId> {
    let xy = g.leaf(Tensor::vector(vec![x, y]));
    let w = bound.get("pre.w")?;
    let b = bound.get("pre.b")?;
    g.affine_vec(w, xy, b)
}

/// One GRU step. `x` is absent for the decoder cell, which is driven purely
/// by its hidden state.
fn gru_step(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    x: Option<NodeId>,
    h: NodeId,
) -> Result<NodeId> {
    let gate_pre = |g: &mut Graph, gate: &str, hin: NodeId| -> Result<NodeId> {
        let u = bound.get(&format!("{prefix}.u{gate}"))?;
        let b = bound.get(&format!("{prefix}.b{gate}"))?;
        let uh = g.matvec(u, hin)?;
        let mut acc = g.add(uh, b)?;
        if let Some(xn) = x {
            let w = bound.get(&format!("{prefix}.w{gate}"))?;
            let wx = g.matvec(w, xn)?;
            acc = g.add(acc, wx)?;
        }
        Ok(acc)
    };
    let zp = gate_pre(g, "z", h)?;
    let z = g.sigmoid(zp)?;
    let rp = gate_pre(g, "r", h)?;
    let r = g.sigmoid(rp)?;
    let rh = g.mul(r, h)?;
    let np = gate_pre(g, "n", rh)?;
    let n = g.tanh(np)?;
    // h' = (1 - z) * h + z * n
    let ones = g.leaf(Tensor::full(g.shape(h), 1.0));
    let omz = g.sub(ones, z)?;
    let keep = g.mul(omz, h)?;
    let new = g.mul(z, n)?;
    g.add(keep, new)
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::PermutationMismatch { got: perm.len(), want: n });
    }
    let mut seen = vec![false; n];
    for &i in perm {
        if i >= n || seen[i] {
            return Err(Error::PermutationMismatch { got: perm.len(), want: n });
        }
        seen[i] = true;
    }
    Ok(())
}

/// Encodes a support set into (task representation, reconstruction loss).
/// `perm` gives the feeding order for RAA and is ignored by PAA.
pub fn encode(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &AggregatorCfg,
    dataset: &[(f64, f64)],
    perm: &[usize],
) -> Result<(NodeId, NodeId)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    match cfg.kind {
        AggregatorKind::Paa => paa_encode(g, bound, cfg, dataset),
        AggregatorKind::Raa => raa_encode(g, bound, dataset, perm),
    }
}

/// Pooling autoencoder: g_i = Pool_j(enc(e_j)), reconstruction error summed
/// over examples in canonical order.
pub fn paa_encode(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &AggregatorCfg,
    dataset: &[(f64, f64)],
) -> Result<(NodeId, NodeId)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_example = Vec::with_capacity(dataset.len());
    let mut recon_terms = Vec::with_capacity(dataset.len());
    for &(x, y) in dataset {
        let e = pre_embed(g, bound, x, y)?;
        // encoder: FC -> relu -> FC
        let w1 = bound.get("paa.enc.w1")?;
        let b1 = bound.get("paa.enc.b1")?;
        let h1 = g.affine_vec(w1, e, b1)?;
        let h1 = g.relu(h1)?;
        let w2 = bound.get("paa.enc.w2")?;
        let b2 = bound.get("paa.enc.b2")?;
        let gij = g.affine_vec(w2, h1, b2)?;
        // decoder: FC -> relu -> FC back to the pre-embedding
        let dw1 = bound.get("paa.dec.w1")?;
        let db1 = bound.get("paa.dec.b1")?;
        let d1 = g.affine_vec(dw1, gij, db1)?;
        let d1 = g.relu(d1)?;
        let dw2 = bound.get("paa.dec.w2")?;
        let db2 = bound.get("paa.dec.b2")?;
        let dec = g.affine_vec(dw2, d1, db2)?;
        recon_terms.push(g.sq_dist(dec, e)?);
        per_example.push(gij);
    }
    let pooled = match cfg.pool {
        PoolMode::Mean => g.mean_pool(&per_example)?,
        PoolMode::Max => g.max_pool(&per_example)?,
    };
    let recon = g.sum_sorted(&recon_terms)?;
    Ok((pooled, recon))
}

/// Recurrent autoencoder: encoder hidden states are averaged into g_i; the
/// decoder walks back from the last state reconstructing the fed sequence in
/// reverse.
pub fn raa_encode(
    g: &mut Graph,
    bound: &BoundParams,
    dataset: &[(f64, f64)],
    perm: &[usize],
) -> Result<(NodeId, NodeId)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_permutation(perm, dataset.len())?;
    let d = g.shape(bound.get("raa.enc.bz")?)[0];
    let mut fed = Vec::with_capacity(perm.len());
    for &idx in perm {
        let (x, y) = dataset[idx];
        fed.push(pre_embed(g, bound, x, y)?);
    }
    let mut h = g.leaf(Tensor::zeros(&[d]));
    let mut states = Vec::with_capacity(fed.len());
    for &e in &fed {
        h = gru_step(g, bound, "raa.enc", Some(e), h)?;
        states.push(h);
    }
    let gi = g.mean_pool(&states)?;

    let mut recon_terms = Vec::with_capacity(fed.len());
    let mut dec = *states.last().expect("non-empty dataset");
    for t in (0..fed.len()).rev() {
        dec = gru_step(g, bound, "raa.dec", None, dec)?;
        recon_terms.push(g.sq_dist(dec, fed[t])?);
    }
    let recon = g.sum_sorted(&recon_terms)?;
    Ok((gi, recon))
}

/// Evaluation-mode representation: PAA directly; RAA averaged over the given
/// permutations for stability.
pub fn encode_eval(
    g: &mut Graph,
    bound: &BoundParams,
    cfg: &AggregatorCfg,
    dataset: &[(f64, f64)],
    perms: &[Vec<usize>],
) -> Result<NodeId> {
    match cfg.kind {
        AggregatorKind::Paa => Ok(paa_encode(g, bound, cfg, dataset)?.0),
        AggregatorKind::Raa => {
            assert!(!perms.is_empty(), "RAA evaluation needs permutations");
            let mut reprs = Vec::with_capacity(perms.len());
            for p in perms {
                reprs.push(raa_encode(g, bound, dataset, p)?.0);
            }
            g.mean_pool(&reprs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(kind: AggregatorKind) -> AggregatorCfg {
        AggregatorCfg {
            kind,
            repr_dim: 6,
            embed_dim: match kind {
                AggregatorKind::Raa => 6,
                AggregatorKind::Paa => 5,
            },
            pool: PoolMode::Mean,
        }
    }

    fn store_for(cfg: &AggregatorCfg, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        init_params(&mut store, cfg, &mut rng);
        store
    }

    fn dataset(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| (rng.range(-5.0, 5.0), rng.range(-3.0, 3.0)))
            .collect()
    }

    #[test]
    fn mean_pool_of_two_embeddings_is_their_average() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 3.0]));
        let b = g.leaf(Tensor::vector(vec![5.0, 7.0]));
        let m = g.mean_pool(&[a, b]).unwrap();
        assert_eq!(g.eval(m).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn single_example_pool_is_identity_under_both_modes() {
        for pool in [PoolMode::Mean, PoolMode::Max] {
            let cfg = AggregatorCfg {
                pool,
                ..small_cfg(AggregatorKind::Paa)
            };
            let store = store_for(&cfg, 1);
            let data = dataset(1, 2);
            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, &store);
            let (gi, _) = paa_encode(&mut g, &bound, &cfg, &data).unwrap();
            // Recompute the lone per-example encoding directly.
            let e = pre_embed(&mut g, &bound, data[0].0, data[0].1).unwrap();
            let w1 = bound.get("paa.enc.w1").unwrap();
            let b1 = bound.get("paa.enc.b1").unwrap();
            let h1 = g.affine_vec(w1, e, b1).unwrap();
            let h1 = g.relu(h1).unwrap();
            let w2 = bound.get("paa.enc.w2").unwrap();
            let b2 = bound.get("paa.enc.b2").unwrap();
            let g11 = g.affine_vec(w2, h1, b2).unwrap();
            let got = g.eval(gi).unwrap();
            let want = g.eval(g11).unwrap();
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn perfect_autoencoder_has_zero_reconstruction_loss() {
        // Identity encoder/decoder on positive embeddings: relu acts as
        // identity, so reconstruction is exact.
        let d = 2;
        let cfg = AggregatorCfg {
            kind: AggregatorKind::Paa,
            repr_dim: d,
            embed_dim: d,
            pool: PoolMode::Mean,
        };
        let mut store = ParamStore::new();
        let eye = Tensor::matrix(d, d, vec![1.0, 0.0, 0.0, 1.0]);
        // Pre-embedding picks out (x, y) directly.
        store.insert("pre.w", eye.clone());
        store.insert("pre.b", Tensor::zeros(&[d]));
        for name in ["paa.enc.w1", "paa.enc.w2", "paa.dec.w1", "paa.dec.w2"] {
            store.insert(name, eye.clone());
        }
        for name in ["paa.enc.b1", "paa.enc.b2", "paa.dec.b1", "paa.dec.b2"] {
            store.insert(name, Tensor::zeros(&[d]));
        }
        let data = vec![(1.0, 2.0), (0.5, 0.25)]; // positive, so relu == id
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, &store);
        let (_, recon) = paa_encode(&mut g, &bound, &cfg, &data).unwrap();
        assert_eq!(g.eval(recon).unwrap().item(), 0.0);
    }

    #[test]
    fn paa_is_bit_exactly_permutation_invariant() {
        let cfg = small_cfg(AggregatorKind::Paa);
        let store = store_for(&cfg, 3);
        let data = dataset(7, 4);
        let run = |order: &[usize]| {
            let reordered: Vec<(f64, f64)> = order.iter().map(|&i| data[i]).collect();
            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, &store);
            let (gi, recon) = paa_encode(&mut g, &bound, &cfg, &reordered).unwrap();
            (g.eval(gi).unwrap(), g.eval(recon).unwrap())
        };
        let (gi_a, rec_a) = run(&[0, 1, 2, 3, 4, 5, 6]);
        let (gi_b, rec_b) = run(&[6, 2, 0, 5, 1, 4, 3]);
        assert!(gi_a.bits_eq(&gi_b));
        assert!(rec_a.bits_eq(&rec_b));
    }

    #[test]
    fn raa_single_example_ignores_permutation() {
        let cfg = small_cfg(AggregatorKind::Raa);
        let store = store_for(&cfg, 5);
        let data = dataset(1, 6);
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, &store);
        let (gi, _) = raa_encode(&mut g, &bound, &data, &[0]).unwrap();
        // With one example, g_i must equal the single encoder state.
        let e = pre_embed(&mut g, &bound, data[0].0, data[0].1).unwrap();
        let h0 = g.leaf(Tensor::zeros(&[cfg.repr_dim]));
        let h1 = gru_step(&mut g, &bound, "raa.enc", Some(e), h0).unwrap();
        let got = g.eval(gi).unwrap();
        let want = g.eval(h1).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weight_saturated_gate_cell_repeats_the_bias_image() {
        // All kernels zero and a large update-gate bias: z saturates to
        // exactly 1.0 in f64, so every hidden state equals tanh(bn).
        let d = 3;
        let mut store = ParamStore::new();
        store.insert("pre.w", Tensor::zeros(&[d, 2]));
        store.insert("pre.b", Tensor::zeros(&[d]));
        for gate in ["z", "r", "n"] {
            store.insert(format!("raa.enc.w{gate}"), Tensor::zeros(&[d, d]));
            store.insert(format!("raa.enc.u{gate}"), Tensor::zeros(&[d, d]));
            store.insert(format!("raa.dec.u{gate}"), Tensor::zeros(&[d, d]));
            store.insert(format!("raa.dec.b{gate}"), Tensor::zeros(&[d]));
        }
        store.insert("raa.enc.bz", Tensor::full(&[d], 40.0));
        store.insert("raa.enc.br", Tensor::zeros(&[d]));
        store.insert("raa.enc.bn", Tensor::vector(vec![0.3, -0.6, 1.1]));
        // embed_dim must match pre.w rows
        let data = dataset(4, 7);
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, &store);
        let (gi, _) = raa_encode(&mut g, &bound, &data, &[0, 1, 2, 3]).unwrap();
        let want: Vec<f64> = [0.3, -0.6, 1.1].iter().map(|v: &f64| v.tanh()).collect();
        for (a, b) in g.eval(gi).unwrap().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn raa_depends_on_the_feeding_order() {
        let cfg = small_cfg(AggregatorKind::Raa);
        let store = store_for(&cfg, 8);
        let data = dataset(5, 9);
        let run = |perm: &[usize]| {
            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, &store);
            let (gi, _) = raa_encode(&mut g, &bound, &data, perm).unwrap();
            g.eval(gi).unwrap()
        };
        let a = run(&[0, 1, 2, 3, 4]);
        let b = run(&[4, 3, 2, 1, 0]);
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(
            diff > 1e-9,
            "representations under two permutations should differ, got {:?} vs {:?}",
            a.data(),
            b.data()
        );
    }

    #[test]
    fn bad_permutations_are_rejected() {
        let cfg = small_cfg(AggregatorKind::Raa);
        let store = store_for(&cfg, 10);
        let data = dataset(3, 11);
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, &store);
        assert!(matches!(
            raa_encode(&mut g, &bound, &data, &[0, 1]),
            Err(Error::PermutationMismatch { got: 2, want: 3 })
        ));
        assert!(matches!(
            raa_encode(&mut g, &bound, &data, &[0, 1, 1]),
            Err(Error::PermutationMismatch { .. })
        ));
    }

    #[test]
    fn reconstruction_loss_is_nonnegative_and_differentiable() {
        use crate::gradcheck::{central_diff, Tolerance, FD_STEP};
        let tol = Tolerance::new(1e-4, 1e-7);
        for kind in [AggregatorKind::Paa, AggregatorKind::Raa] {
            let cfg = AggregatorCfg {
                // tanh path dominates RAA; PAA relu kinks are far from zero
                // with these seeds
                ..small_cfg(kind)
            };
            let store = store_for(&cfg, 13);
            let data = dataset(4, 14);
            let perm = vec![2, 0, 3, 1];

            let objective = |store: &ParamStore| {
                let mut g = Graph::new();
                let bound = BoundParams::bind_all(&mut g, store);
                let (_, recon) = encode(&mut g, &bound, &cfg, &data, &perm).unwrap();
                g.eval(recon).unwrap().item()
            };
            assert!(objective(&store) >= 0.0);

            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, &store);
            let (_, recon) = encode(&mut g, &bound, &cfg, &data, &perm).unwrap();
            let names: Vec<String> = store.names().cloned().collect();
            let ids: Vec<_> = names.iter().map(|n| bound.get(n).unwrap()).collect();
            let grads = g.grad(recon, &ids).unwrap();
            for (name, gid) in names.iter().zip(&grads) {
                let analytic = g.eval(*gid).unwrap();
                let t = store.get(name).unwrap().clone();
                // check three spread coordinates per tensor
                for c in [0, t.numel() / 2, t.numel() - 1] {
                    let fd = central_diff(
                        |v| {
                            let mut s2 = store.clone();
                            let tm = s2.get_mut(name).unwrap();
                            tm.data_mut()[c] = v;
                            objective(&s2)
                        },
                        t.data()[c],
                        FD_STEP,
                    );
                    assert!(
                        tol.close(analytic.data()[c], fd),
                        "{kind:?} {name}[{c}]: {} vs {}",
                        analytic.data()[c],
                        fd
                    );
                }
            }
        }
    }
}
