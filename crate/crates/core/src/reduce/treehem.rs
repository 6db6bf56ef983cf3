//! Tree-based hierarchical EM.
//!
//! Components are sorted along a Morton curve and arranged in a radix tree.
//! Going up, every inner node caches at most `T` Gaussians fitted to the up
//! to `2T` Gaussians cached by its children. Going down, nodes with the most
//! mass are expanded until their caches hold enough Gaussians.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU8, Ordering as AtomicOrdering};
use std::sync::OnceLock;

use rayon::prelude::*;

use super::cluster::cluster_init;
use super::em::em_step;
use super::morton::morton_codes;
use super::tree::{build_tree, RadixTree, NO_NODE};
use super::VirtualSampleConfig;
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;

/// How a node's cache was produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeFit {
    /// A leaf holding one input component.
    Leaf,
    /// Children caches concatenated unchanged.
    PassThrough,
    /// One EM step from the collected Gaussians at these indices.
    Fitted { picks: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct NodeCache {
    pub gaussians: Vec<Gaussian>,
    pub fit: NodeFit,
}

impl NodeCache {
    pub fn mass(&self) -> f64 {
        self.gaussians.iter().map(|g| g.weight).sum()
    }
}

/// Everything the backward pass needs to replay a TreeHEM reduction.
#[derive(Clone, Debug)]
pub struct TreeHemRecord {
    pub tree: RadixTree,
    pub caches: Vec<NodeCache>,
    /// `(node, slot)` per output component; `None` for padding.
    pub selection: Vec<Option<(usize, usize)>>,
}

impl TreeHemRecord {
    /// Gaussians held by all caches at once.
    pub fn cached_gaussians(&self) -> usize {
        self.caches.iter().map(|c| c.gaussians.len()).sum()
    }

    pub fn fitted_nodes(&self) -> usize {
        self.caches
            .iter()
            .filter(|c| matches!(c.fit, NodeFit::Fitted { .. }))
            .count()
    }
}

/// Gaussians collected from the two children of an inner node.
pub(crate) fn collect_children(tree: &RadixTree, caches: &[NodeCache], node: usize) -> Vec<Gaussian> {
    let [l, r] = tree.nodes[node].children;
    let mut v = caches[l as usize].gaussians.clone();
    v.extend_from_slice(&caches[r as usize].gaussians);
    v
}

fn fit_node(collected: Vec<Gaussian>, t: usize, cfg: &VirtualSampleConfig) -> Result<NodeCache> {
    if collected.len() <= t {
        return Ok(NodeCache {
            gaussians: collected,
            fit: NodeFit::PassThrough,
        });
    }
    let picks = cluster_init(&collected, t).picks;
    let init: Vec<Gaussian> = picks.iter().map(|&p| collected[p]).collect();
    let gaussians = em_step(&collected, &init, cfg)?;
    Ok(NodeCache {
        gaussians,
        fit: NodeFit::Fitted { picks },
    })
}

fn bottom_up_sequential(
    tree: &RadixTree,
    leaves: Vec<NodeCache>,
    t: usize,
    cfg: &VirtualSampleConfig,
) -> Result<Vec<NodeCache>> {
    let n = tree.leaf_count();
    let mut caches: Vec<Option<NodeCache>> = vec![None; tree.nodes.len()];
    for (i, c) in leaves.into_iter().enumerate() {
        caches[n - 1 + i] = Some(c);
    }
    for node in tree.post_order_internal() {
        let collected = {
            let [l, r] = tree.nodes[node].children;
            let mut v = caches[l as usize].as_ref().expect("child done").gaussians.clone();
            v.extend_from_slice(&caches[r as usize].as_ref().expect("child done").gaussians);
            v
        };
        caches[node] = Some(fit_node(collected, t, cfg)?);
    }
    Ok(caches.into_iter().map(|c| c.expect("every node visited")).collect())
}

/// Workers ascend from every leaf. The first to arrive at an inner node
/// stops there; the second finds both children done and fits the node.
fn bottom_up_parallel(
    tree: &RadixTree,
    leaves: Vec<NodeCache>,
    t: usize,
    cfg: &VirtualSampleConfig,
) -> Result<Vec<NodeCache>> {
    let n = tree.leaf_count();
    let cells: Vec<OnceLock<NodeCache>> = (0..tree.nodes.len()).map(|_| OnceLock::new()).collect();
    let visits: Vec<AtomicU8> = (0..tree.nodes.len()).map(|_| AtomicU8::new(0)).collect();
    for (i, c) in leaves.into_iter().enumerate() {
        let _ = cells[n - 1 + i].set(c);
    }
    (0..n).into_par_iter().try_for_each(|i| -> Result<()> {
        let mut node = tree.nodes[n - 1 + i].parent;
        while node != NO_NODE {
            let idx = node as usize;
            if visits[idx].fetch_add(1, AtomicOrdering::AcqRel) == 0 {
                return Ok(());
            }
            let [l, r] = tree.nodes[idx].children;
            let mut collected = cells[l as usize].get().expect("left child done").gaussians.clone();
            collected.extend_from_slice(&cells[r as usize].get().expect("right child done").gaussians);
            let _ = cells[idx].set(fit_node(collected, t, cfg)?);
            node = tree.nodes[idx].parent;
        }
        Ok(())
    })?;
    Ok(cells
        .into_iter()
        .map(|c| c.into_inner().expect("every node visited"))
        .collect())
}

#[derive(PartialEq)]
struct ByMass {
    mass: f64,
    node: usize,
}

impl Eq for ByMass {}

impl Ord for ByMass {
    fn cmp(&self, o: &Self) -> Ordering {
        self.mass
            .total_cmp(&o.mass)
            .then_with(|| o.node.cmp(&self.node))
    }
}

impl PartialOrd for ByMass {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Greedy expansion from the root until the selected caches hold at least
/// `n_p` Gaussians or only leaves remain. Returns `(node, slot)` per output,
/// at most `n_p` of them, heaviest first.
fn top_down(tree: &RadixTree, caches: &[NodeCache], n_p: usize) -> Vec<(usize, usize)> {
    let mut heap = BinaryHeap::new();
    let mut selected_leaves = Vec::new();
    let mut held = caches[0].gaussians.len();
    let push = |node: usize, heap: &mut BinaryHeap<ByMass>, leaves: &mut Vec<usize>| {
        if tree.nodes[node].is_leaf() {
            leaves.push(node);
        } else {
            heap.push(ByMass {
                mass: caches[node].mass(),
                node,
            });
        }
    };
    push(0, &mut heap, &mut selected_leaves);
    while held < n_p {
        let Some(ByMass { node, .. }) = heap.pop() else {
            break;
        };
        held -= caches[node].gaussians.len();
        for c in tree.nodes[node].children {
            held += caches[c as usize].gaussians.len();
            push(c as usize, &mut heap, &mut selected_leaves);
        }
    }
    let mut nodes: Vec<usize> = heap.into_iter().map(|b| b.node).chain(selected_leaves).collect();
    nodes.sort_unstable();
    let mut slots: Vec<(usize, usize)> = nodes
        .iter()
        .flat_map(|&n| (0..caches[n].gaussians.len()).map(move |s| (n, s)))
        .collect();
    slots.sort_by(|a, b| {
        caches[b.0].gaussians[b.1]
            .weight
            .total_cmp(&caches[a.0].gaussians[a.1].weight)
    });
    slots.truncate(n_p);
    slots
}

/// Reduces `gs` to exactly `n_p` components (zero-weight padding when the
/// tree runs out of Gaussians).
pub fn treehem_reduce(
    gs: &[Gaussian],
    n_p: usize,
    t: usize,
    cfg: &VirtualSampleConfig,
    parallel: bool,
) -> Result<(Vec<Gaussian>, TreeHemRecord)> {
    if t < 1 {
        return Err(Error::InvalidArgument("TreeHEM cache size must be at least 1".into()));
    }
    let first = gs
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot reduce an empty mixture".into()))?;
    let dims = first.dims;
    let tree = build_tree(&morton_codes(gs));
    let leaves: Vec<NodeCache> = tree
        .order
        .iter()
        .map(|&i| NodeCache {
            gaussians: vec![gs[i]],
            fit: NodeFit::Leaf,
        })
        .collect();
    let caches = if parallel {
        bottom_up_parallel(&tree, leaves, t, cfg)?
    } else {
        bottom_up_sequential(&tree, leaves, t, cfg)?
    };
    let chosen = top_down(&tree, &caches, n_p);
    let mut out: Vec<Gaussian> = chosen.iter().map(|&(n, s)| caches[n].gaussians[s]).collect();
    let mut selection: Vec<Option<(usize, usize)>> = chosen.into_iter().map(Some).collect();
    while out.len() < n_p {
        out.push(Gaussian::padding(dims));
        selection.push(None);
    }
    Ok((
        out,
        TreeHemRecord {
            tree,
            caches,
            selection,
        },
    ))
}
