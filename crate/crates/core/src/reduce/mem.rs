//! Modified EM: start from the heaviest components and take one EM step
//! against the full mixture.

use super::em::em_step;
use super::VirtualSampleConfig;
use crate::error::Result;
use crate::gaussian::Gaussian;

/// Indices of the `n_p` largest weights, heaviest first, ties by lower
/// index. Asking for more than there are selects everything.
pub fn select_top_integral(gs: &[Gaussian], n_p: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..gs.len()).collect();
    idx.sort_by(|&a, &b| gs[b].weight.total_cmp(&gs[a].weight).then(a.cmp(&b)));
    idx.truncate(n_p);
    idx
}

/// Reduces to `n_p` components. With `n_p ≥ N` the input is returned as is
/// and `picks` is `None`.
pub fn modified_em_reduce(
    gs: &[Gaussian],
    n_p: usize,
    cfg: &VirtualSampleConfig,
) -> Result<(Vec<Gaussian>, Option<Vec<usize>>)> {
    if n_p >= gs.len() {
        return Ok((gs.to_vec(), None));
    }
    let picks = select_top_integral(gs, n_p);
    let init: Vec<Gaussian> = picks.iter().map(|&p| gs[p]).collect();
    Ok((em_step(gs, &init, cfg)?, Some(picks)))
}
