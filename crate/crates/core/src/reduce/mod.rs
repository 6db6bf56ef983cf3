//! Mixture reduction: fit a smaller mixture to a larger non-negative one.

pub mod cluster;
pub mod em;
pub mod mem;
pub mod morton;
pub mod tree;
pub mod treehem;

pub use cluster::{cluster_init, Clustering};
pub use em::{em_m_step, em_responsibilities, em_step, Responsibilities, VirtualSampleConfig};
pub use mem::{modified_em_reduce, select_top_integral};
pub use morton::{morton_codes, MortonCode};
pub use tree::{build_tree, RadixTree, TreeNode};
pub use treehem::{treehem_reduce, NodeCache, NodeFit, TreeHemRecord};

use crate::autodiff::scalar::{Adjoints, ScalarTape, Var};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg::packed_len;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum ReductionMethod {
    TreeHem { t: usize },
    ModifiedEm,
}

impl Default for ReductionMethod {
    fn default() -> Self {
        ReductionMethod::TreeHem { t: 2 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReductionConfig {
    pub method: ReductionMethod,
    #[serde(default)]
    pub virtual_samples: VirtualSampleConfig,
    /// Run the TreeHEM bottom-up pass on the rayon pool.
    #[serde(default)]
    pub parallel: bool,
}

#[derive(Clone, Debug)]
pub enum ReductionRecord {
    /// Nothing to reduce; the input was copied and padded.
    Identity { inputs: usize },
    ModifiedEm { picks: Vec<usize> },
    TreeHem(Box<TreeHemRecord>),
}

impl ReductionRecord {
    /// Gaussians alive in fitting buffers during the reduction.
    pub fn cached_gaussians(&self) -> usize {
        match self {
            ReductionRecord::Identity { inputs } => *inputs,
            ReductionRecord::ModifiedEm { picks } => picks.len(),
            ReductionRecord::TreeHem(r) => r.cached_gaussians(),
        }
    }

    /// Target/fit likelihood evaluations performed by the E steps.
    pub fn likelihood_evaluations(&self, inputs: usize) -> usize {
        match self {
            ReductionRecord::Identity { .. } => 0,
            ReductionRecord::ModifiedEm { picks } => inputs * picks.len(),
            ReductionRecord::TreeHem(r) => r
                .caches
                .iter()
                .enumerate()
                .map(|(i, c)| match &c.fit {
                    NodeFit::Fitted { picks } => {
                        treehem::collect_children(&r.tree, &r.caches, i).len() * picks.len()
                    }
                    _ => 0,
                })
                .sum(),
        }
    }

    /// Output slots filled with zero-weight padding.
    pub fn padded(&self, n_p: usize) -> usize {
        match self {
            ReductionRecord::Identity { inputs } => n_p.saturating_sub(*inputs),
            ReductionRecord::ModifiedEm { .. } => 0,
            ReductionRecord::TreeHem(r) => r.selection.iter().filter(|s| s.is_none()).count(),
        }
    }
}

/// Reduces one channel mixture to exactly `n_p` components.
pub fn reduce(gs: &[Gaussian], n_p: usize, cfg: &ReductionConfig) -> Result<(Vec<Gaussian>, ReductionRecord)> {
    let dims = gs
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot reduce an empty mixture".into()))?
        .dims;
    if n_p >= gs.len() {
        let mut out = gs.to_vec();
        out.resize(n_p, Gaussian::padding(dims));
        return Ok((out, ReductionRecord::Identity { inputs: gs.len() }));
    }
    match cfg.method {
        ReductionMethod::ModifiedEm => {
            let (out, picks) = modified_em_reduce(gs, n_p, &cfg.virtual_samples)?;
            let picks = picks.expect("n_p < N selects a subset");
            Ok((out, ReductionRecord::ModifiedEm { picks }))
        }
        ReductionMethod::TreeHem { t } => {
            let (out, rec) = treehem_reduce(gs, n_p, t, &cfg.virtual_samples, cfg.parallel)?;
            Ok((out, ReductionRecord::TreeHem(Box::new(rec))))
        }
    }
}

fn lift(tape: &ScalarTape, g: &Gaussian) -> Gaussian<Var> {
    let k = g.dims;
    let mut out = g.lift::<Var>();
    out.weight = tape.var(g.weight);
    for d in 0..k {
        out.position[d] = tape.var(g.position[d]);
    }
    for d in 0..packed_len(k) {
        out.covariance[d] = tape.var(g.covariance[d]);
    }
    out
}

fn seeds(out: &[Gaussian<Var>], grad: &[Gaussian]) -> Vec<(Var, f64)> {
    let mut s = Vec::new();
    for (o, g) in out.iter().zip(grad) {
        let k = o.dims;
        s.push((o.weight, g.weight));
        for d in 0..k {
            s.push((o.position[d], g.position[d]));
        }
        for d in 0..packed_len(k) {
            s.push((o.covariance[d], g.covariance[d]));
        }
    }
    s
}

fn read(adj: &Adjoints, v: &Gaussian<Var>) -> Gaussian {
    let k = v.dims;
    let mut g = Gaussian::zeroed(k);
    g.weight = adj.of(v.weight);
    for d in 0..k {
        g.position[d] = adj.of(v.position[d]);
    }
    for d in 0..packed_len(k) {
        g.covariance[d] = adj.of(v.covariance[d]);
    }
    g
}

/// Backward of one EM step started from `targets[picks]`: replays the step
/// on taped scalars and returns the cotangent of every target.
pub fn em_step_backward(
    targets: &[Gaussian],
    picks: &[usize],
    cfg: &VirtualSampleConfig,
    grad_out: &[Gaussian],
) -> Result<Vec<Gaussian>> {
    if grad_out.len() != picks.len() {
        return Err(Error::TapeMismatch(format!(
            "{} cotangents for {} fitted components",
            grad_out.len(),
            picks.len()
        )));
    }
    let tape = ScalarTape::new();
    let tv: Vec<Gaussian<Var>> = targets.iter().map(|g| lift(&tape, g)).collect();
    let init: Vec<Gaussian<Var>> = picks.iter().map(|&p| tv[p]).collect();
    let out = em_step(&tv, &init, cfg)?;
    let adj = tape.adjoints(&seeds(&out, grad_out));
    Ok(tv.iter().map(|v| read(&adj, v)).collect())
}

fn add_into(dst: &mut Gaussian, src: &Gaussian) {
    dst.add_assign(src);
}

/// Backward of [`reduce`]. Discrete choices (sort order, tree, picks,
/// selection) are held fixed.
pub fn reduce_backward(
    input: &[Gaussian],
    record: &ReductionRecord,
    cfg: &ReductionConfig,
    grad_out: &[Gaussian],
) -> Result<Vec<Gaussian>> {
    let dims = input.first().map_or(2, |g| g.dims);
    match record {
        ReductionRecord::Identity { inputs } => {
            if *inputs != input.len() || grad_out.len() < *inputs {
                return Err(Error::TapeMismatch("identity reduction shape".into()));
            }
            Ok(grad_out[..*inputs].to_vec())
        }
        ReductionRecord::ModifiedEm { picks } => {
            em_step_backward(input, picks, &cfg.virtual_samples, grad_out)
        }
        ReductionRecord::TreeHem(rec) => {
            if rec.tree.leaf_count() != input.len() || rec.selection.len() != grad_out.len() {
                return Err(Error::TapeMismatch("TreeHEM record does not match its input".into()));
            }
            let mut cache_grads: Vec<Vec<Gaussian>> = rec
                .caches
                .iter()
                .map(|c| vec![Gaussian::zeroed(dims); c.gaussians.len()])
                .collect();
            for (slot, sel) in rec.selection.iter().enumerate() {
                if let Some((node, s)) = sel {
                    add_into(&mut cache_grads[*node][*s], &grad_out[slot]);
                }
            }
            for node in rec.tree.post_order_internal().into_iter().rev() {
                if cache_grads[node].iter().all(|g| g.is_zero()) {
                    continue;
                }
                let [l, r] = rec.tree.nodes[node].children;
                let (l, r) = (l as usize, r as usize);
                let collected_grad = match &rec.caches[node].fit {
                    NodeFit::PassThrough => cache_grads[node].clone(),
                    NodeFit::Fitted { picks } => {
                        let collected = treehem::collect_children(&rec.tree, &rec.caches, node);
                        em_step_backward(&collected, picks, &cfg.virtual_samples, &cache_grads[node])?
                    }
                    NodeFit::Leaf => unreachable!("post-order lists inner nodes only"),
                };
                let split = rec.caches[l].gaussians.len();
                for (i, g) in collected_grad.iter().enumerate() {
                    if i < split {
                        add_into(&mut cache_grads[l][i], g);
                    } else {
                        add_into(&mut cache_grads[r][i - split], g);
                    }
                }
            }
            let mut grad_in = vec![Gaussian::zeroed(dims); input.len()];
            for (pos, &orig) in rec.tree.order.iter().enumerate() {
                grad_in[orig] = cache_grads[rec.tree.leaf_node(pos)][0];
            }
            Ok(grad_in)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mixture(rng: &mut impl Rng, n: usize, dims: usize) -> Vec<Gaussian> {
        (0..n)
            .map(|_| {
                let p: Vec<f64> = (0..dims).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let mut g = crate::gaussian::random_gaussian(rng, dims);
                g.position[..dims].copy_from_slice(&p);
                g.weight = rng.gen_range(0.1..2.0);
                g
            })
            .collect()
    }

    fn weighted_loss(out: &[Gaussian], seeds: &[Gaussian]) -> f64 {
        out.iter()
            .zip(seeds)
            .map(|(o, s)| {
                o.weight * s.weight
                    + (0..3).map(|d| o.position[d] * s.position[d]).sum::<f64>()
                    + (0..6).map(|d| o.covariance[d] * s.covariance[d]).sum::<f64>()
            })
            .sum()
    }

    fn random_seeds(rng: &mut impl Rng, n: usize, dims: usize) -> Vec<Gaussian> {
        (0..n)
            .map(|_| {
                let mut g = Gaussian::zeroed(dims);
                g.weight = rng.gen_range(-1.0..1.0);
                for d in 0..dims {
                    g.position[d] = rng.gen_range(-1.0..1.0);
                }
                for d in 0..packed_len(dims) {
                    g.covariance[d] = rng.gen_range(-1.0..1.0);
                }
                g
            })
            .collect()
    }

    fn check_backward(method: ReductionMethod, dims: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gs = mixture(&mut rng, 12, dims);
        let cfg = ReductionConfig {
            method,
            ..Default::default()
        };
        let n_p = 4;
        let (out, rec) = reduce(&gs, n_p, &cfg).unwrap();
        let s = random_seeds(&mut rng, n_p, dims);
        let grad = reduce_backward(&gs, &rec, &cfg, &s).unwrap();
        let h = 1e-6;
        let loss = |p: &[Gaussian]| weighted_loss(&reduce(p, n_p, &cfg).unwrap().0, &s);
        let base = weighted_loss(&out, &s);
        assert!(base.is_finite());
        for i in 0..gs.len() {
            let probe = |f: &dyn Fn(&mut Gaussian, f64), an: f64| {
                let mut a = gs.clone();
                let mut b = gs.clone();
                f(&mut a[i], h);
                f(&mut b[i], -h);
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "fd {fd} analytic {an}");
            };
            probe(&|g, h| g.weight += h, grad[i].weight);
            for d in 0..dims {
                probe(&|g, h| g.position[d] += h, grad[i].position[d]);
            }
            for d in 0..packed_len(dims) {
                probe(&|g, h| g.covariance[d] += h, grad[i].covariance[d]);
            }
        }
    }

    #[test]
    fn treehem_backward_matches_central_differences() {
        check_backward(ReductionMethod::TreeHem { t: 2 }, 2, 1);
        check_backward(ReductionMethod::TreeHem { t: 4 }, 3, 2);
    }

    #[test]
    fn modified_em_backward_matches_central_differences() {
        check_backward(ReductionMethod::ModifiedEm, 2, 3);
        check_backward(ReductionMethod::ModifiedEm, 3, 4);
    }

    #[test]
    fn identity_reduction_pads_and_passes_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gs = mixture(&mut rng, 3, 2);
        for method in [ReductionMethod::ModifiedEm, ReductionMethod::TreeHem { t: 2 }] {
            let cfg = ReductionConfig {
                method,
                ..Default::default()
            };
            let (out, rec) = reduce(&gs, 5, &cfg).unwrap();
            assert_eq!(&out[..3], &gs[..]);
            assert_eq!(out[3].weight, 0.0);
            assert_eq!(rec.padded(5), 2);
            let s = random_seeds(&mut rng, 5, 2);
            assert_eq!(reduce_backward(&gs, &rec, &cfg, &s).unwrap(), s[..3].to_vec());
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gs = mixture(&mut rng, 20, 2);
        let cfg = ReductionConfig::default();
        let (_, rec) = reduce(&gs, 4, &cfg).unwrap();
        let g = reduce_backward(&gs, &rec, &cfg, &vec![Gaussian::zeroed(2); 4]).unwrap();
        assert!(g.iter().all(|g| g.is_zero()));
    }

    #[test]
    fn near_massless_fit_keeps_gradients_finite() {
        let a = Gaussian::isotropic(1.0, &[0.0, 0.0], 1.0).unwrap();
        let c = Gaussian::isotropic(1e-200, &[0.1, 0.0], 1.0).unwrap();
        let far = Gaussian::isotropic(1.0, &[5.0, 1.0], 0.5).unwrap();
        let targets = [a, c, far];
        let out = em::em_step(&targets, &[a, c], &VirtualSampleConfig::default()).unwrap();
        assert_eq!(out[1].weight, 0.0);
        let mut seed = Gaussian::isotropic(1.0, &[0.3, -0.2], 0.7).unwrap();
        seed.covariance[1] = 0.2;
        let g = em_step_backward(&targets, &[0, 1], &VirtualSampleConfig::default(), &[seed, seed]).unwrap();
        for x in &g {
            assert!(x.weight.is_finite() && x.position.iter().chain(&x.covariance).all(|v| v.is_finite()), "{x:?}");
        }
    }
}
