//! Binary radix tree over Morton-sorted components.
//!
//! For `n` sorted keys there are `n − 1` internal nodes, indexed `0..n−1`
//! with the root at 0, followed by `n` leaves at `n − 1 + i`. A single key
//! gives a tree whose root is its only leaf.

use super::morton::MortonCode;

pub const NO_NODE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub parent: u32,
    /// `[NO_NODE; 2]` for leaves.
    pub children: [u32; 2],
    /// Length of the common key prefix of the node's range; 0 for leaves.
    pub prefix_len: u32,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children[0] == NO_NODE
    }
}

#[derive(Clone, Debug)]
pub struct RadixTree {
    pub nodes: Vec<TreeNode>,
    /// Input index of the component at each sorted position.
    pub order: Vec<usize>,
}

impl RadixTree {
    pub fn leaf_count(&self) -> usize {
        self.order.len()
    }

    pub fn leaf_node(&self, sorted_pos: usize) -> usize {
        self.order.len() - 1 + sorted_pos
    }

    /// Sorted position of a leaf node.
    pub fn leaf_position(&self, node: usize) -> usize {
        node + 1 - self.order.len()
    }

    /// Internal nodes in an order where both children precede their parent.
    pub fn post_order_internal(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.order.len().saturating_sub(1));
        if self.nodes[0].is_leaf() {
            return out;
        }
        let mut stack = vec![(0usize, false)];
        while let Some((n, expanded)) = stack.pop() {
            if expanded {
                out.push(n);
                continue;
            }
            stack.push((n, true));
            for &c in self.nodes[n].children.iter().rev() {
                if !self.nodes[c as usize].is_leaf() {
                    stack.push((c as usize, false));
                }
            }
        }
        out
    }
}

/// Length of the common prefix of keys `i` and `j`, with equal codes
/// disambiguated by index bits. `None` when `j` is out of range.
fn delta(codes: &[MortonCode], i: usize, j: isize) -> Option<u32> {
    if j < 0 || j as usize >= codes.len() {
        return None;
    }
    let (a, b) = (codes[i].code, codes[j as usize].code);
    Some(if a == b {
        64 + ((i as u64) ^ (j as u64)).leading_zeros()
    } else {
        (a ^ b).leading_zeros()
    })
}

fn delta_cmp(codes: &[MortonCode], i: usize, j: isize) -> i64 {
    delta(codes, i, j).map_or(-1, |d| d as i64)
}

/// Builds the radix tree; `codes` must be sorted.
pub fn build_tree(codes: &[MortonCode]) -> RadixTree {
    let n = codes.len();
    let order: Vec<usize> = codes.iter().map(|c| c.index).collect();
    if n <= 1 {
        return RadixTree {
            nodes: vec![
                TreeNode {
                    parent: NO_NODE,
                    children: [NO_NODE; 2],
                    prefix_len: 0,
                };
                n
            ],
            order,
        };
    }
    let mut nodes = vec![
        TreeNode {
            parent: NO_NODE,
            children: [NO_NODE; 2],
            prefix_len: 0,
        };
        2 * n - 1
    ];
    for i in 0..n - 1 {
        let ii = i as isize;
        let d: isize = if delta_cmp(codes, i, ii + 1) > delta_cmp(codes, i, ii - 1) {
            1
        } else {
            -1
        };
        let d_min = delta_cmp(codes, i, ii - d);
        let mut l_max: isize = 2;
        while delta_cmp(codes, i, ii + l_max * d) > d_min {
            l_max *= 2;
        }
        let mut l: isize = 0;
        let mut t = l_max / 2;
        while t >= 1 {
            if delta_cmp(codes, i, ii + (l + t) * d) > d_min {
                l += t;
            }
            t /= 2;
        }
        let j = ii + l * d;
        let d_node = delta_cmp(codes, i, j);
        let mut s: isize = 0;
        let mut div = 2;
        loop {
            let t = (l + div - 1) / div;
            if delta_cmp(codes, i, ii + (s + t) * d) > d_node {
                s += t;
            }
            if t <= 1 {
                break;
            }
            div *= 2;
        }
        let gamma = ii + s * d + d.min(0);
        let (lo, hi) = (ii.min(j), ii.max(j));
        let left = if lo == gamma {
            n - 1 + gamma as usize
        } else {
            gamma as usize
        };
        let right = if hi == gamma + 1 {
            n - 1 + gamma as usize + 1
        } else {
            gamma as usize + 1
        };
        nodes[i].children = [left as u32, right as u32];
        nodes[i].prefix_len = d_node as u32;
        nodes[left].parent = i as u32;
        nodes[right].parent = i as u32;
    }
    RadixTree { nodes, order }
}
