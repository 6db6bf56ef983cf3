//! Initial picks for a node fit: cluster the collected means and keep the
//! heaviest member of each cluster.

use crate::gaussian::Gaussian;

const LLOYD_ITERATIONS: usize = 10;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
}

/// Heavier first, then lower index.
fn heavier(gs: &[Gaussian], a: usize, b: usize) -> bool {
    gs[a].weight > gs[b].weight || (gs[a].weight == gs[b].weight && a < b)
}

/// Cluster assignment of every collected Gaussian and the pick per cluster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub picks: Vec<usize>,
}

/// Splits `gs` into `t` clusters by their means and picks the heaviest
/// member of each. With `gs.len() ≤ t` every Gaussian is its own pick.
pub fn cluster_init(gs: &[Gaussian], t: usize) -> Clustering {
    let n = gs.len();
    if n <= t {
        return Clustering {
            assignment: (0..n).collect(),
            picks: (0..n).collect(),
        };
    }
    // farthest-point seeding from the heaviest Gaussian
    let mut seeds = Vec::with_capacity(t);
    let mut first = 0;
    for i in 1..n {
        if heavier(gs, i, first) {
            first = i;
        }
    }
    seeds.push(first);
    let mut min_d: Vec<f64> = gs.iter().map(|g| dist2(&g.position, &gs[first].position)).collect();
    while seeds.len() < t {
        let mut best = usize::MAX;
        for i in 0..n {
            if seeds.contains(&i) {
                continue;
            }
            if best == usize::MAX
                || min_d[i] > min_d[best]
                || (min_d[i] == min_d[best] && heavier(gs, i, best))
            {
                best = i;
            }
        }
        seeds.push(best);
        for i in 0..n {
            min_d[i] = min_d[i].min(dist2(&gs[i].position, &gs[best].position));
        }
    }

    let mut centroids: Vec<[f64; 3]> = seeds.iter().map(|&s| gs[s].position).collect();
    let mut assignment = vec![0usize; n];
    for it in 0..LLOYD_ITERATIONS {
        let mut changed = false;
        for (i, g) in gs.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, ctr) in centroids.iter().enumerate() {
                let d = dist2(&g.position, ctr);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if it > 0 && !changed {
            break;
        }
        for (c, ctr) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut m = [0.0; 3];
            for &i in &members {
                for d in 0..3 {
                    m[d] += gs[i].position[d];
                }
            }
            for v in m.iter_mut() {
                *v /= members.len() as f64;
            }
            *ctr = m;
        }
    }

    let mut picks = vec![usize::MAX; t];
    for (i, &c) in assignment.iter().enumerate() {
        if picks[c] == usize::MAX || heavier(gs, i, picks[c]) {
            picks[c] = i;
        }
    }
    // empty clusters take the heaviest Gaussian not yet picked
    for c in 0..t {
        if picks[c] != usize::MAX {
            continue;
        }
        let mut best = usize::MAX;
        for i in 0..n {
            if picks.contains(&i) {
                continue;
            }
            if best == usize::MAX || heavier(gs, i, best) {
                best = i;
            }
        }
        picks[c] = best;
    }
    Clustering { assignment, picks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(w: f64, x: f64, y: f64) -> Gaussian {
        Gaussian::isotropic(w, &[x, y], 1.0).unwrap()
    }

    #[test]
    fn separated_pairs_keep_the_heavier_of_each() {
        let gs = vec![g(1.0, 0.0, 0.0), g(2.0, 0.1, 0.0), g(0.5, 10.0, 10.0), g(0.3, 10.0, 10.2)];
        let c = cluster_init(&gs, 2);
        let mut picks = c.picks.clone();
        picks.sort();
        assert_eq!(picks, vec![1, 2]);
    }

    #[test]
    fn identical_positions_pick_by_weight_then_index() {
        let gs = vec![g(1.0, 1.0, 1.0), g(3.0, 1.0, 1.0), g(1.0, 1.0, 1.0), g(2.0, 1.0, 1.0)];
        let c = cluster_init(&gs, 2);
        let mut picks = c.picks.clone();
        picks.sort();
        assert_eq!(picks, vec![1, 3]);
        let gs = vec![g(1.0, 0.0, 0.0); 4];
        let mut picks = cluster_init(&gs, 2).picks;
        picks.sort();
        assert_eq!(picks, vec![0, 1]);
    }

    #[test]
    fn small_input_is_identity() {
        let gs = vec![g(1.0, 0.0, 0.0), g(1.0, 1.0, 0.0)];
        assert_eq!(cluster_init(&gs, 2).picks, vec![0, 1]);
    }

    /// Minimum within-cluster SSE over every assignment of `n ≤ 8` points to
    /// `t` non-empty clusters.
    fn exhaustive_best(gs: &[Gaussian], t: usize) -> (f64, Vec<usize>) {
        let n = gs.len();
        let mut best = (f64::INFINITY, vec![]);
        let total = t.pow(n as u32);
        for code in 0..total {
            let mut a = vec![0; n];
            let mut c = code;
            for v in a.iter_mut() {
                *v = c % t;
                c /= t;
            }
            if (0..t).any(|k| !a.contains(&k)) {
                continue;
            }
            let sse = sse(gs, &a, t);
            if sse < best.0 - 1e-12 {
                best = (sse, a);
            }
        }
        best
    }

    fn sse(gs: &[Gaussian], a: &[usize], t: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..t {
            let m: Vec<&Gaussian> = gs.iter().zip(a).filter(|(_, c)| **c == k).map(|(g, _)| g).collect();
            let mut ctr = [0.0; 3];
            for g in &m {
                for d in 0..3 {
                    ctr[d] += g.position[d] / m.len() as f64;
                }
            }
            s += m.iter().map(|g| dist2(&g.position, &ctr)).sum::<f64>();
        }
        s
    }

    #[test]
    fn matches_exhaustive_partition_on_clustered_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in [2usize, 3, 4] {
            for _ in 0..10 {
                let n = rng.gen_range(t + 1..=2 * t);
                let centers: Vec<[f64; 2]> = (0..t)
                    .map(|c| [10.0 * c as f64 + rng.gen_range(-1.0..1.0), rng.gen_range(-20.0..20.0)])
                    .collect();
                let gs: Vec<Gaussian> = (0..n)
                    .map(|i| {
                        let c = centers[i % t];
                        g(rng.gen_range(0.1..2.0), c[0] + rng.gen_range(-0.5..0.5), c[1] + rng.gen_range(-0.5..0.5))
                    })
                    .collect();
                let got = cluster_init(&gs, t);
                let (best, _) = exhaustive_best(&gs, t);
                assert!((sse(&gs, &got.assignment, t) - best).abs() < 1e-9);
            }
        }
    }
}
