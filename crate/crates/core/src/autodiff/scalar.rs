//! Scalar reverse-mode tape used for local backward passes.
//!
//! Small fitting problems (one TreeHEM node, one modified-EM step) are
//! differentiated by replaying their generic forward code on [`Var`]s. The
//! tape is thread-local; a [`ScalarTape`] guard owns it for the duration of
//! one replay, so independent replays may run on different threads.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::linalg::Real;

const CONST: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

thread_local! {
    static NODES: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
}

/// A taped scalar. Constants carry no tape slot.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    val: f64,
    idx: u32,
}

impl Var {
    pub fn value(self) -> f64 {
        self.val
    }

    fn push(val: f64, parents: [u32; 2], partials: [f64; 2]) -> Var {
        if parents[0] == CONST && parents[1] == CONST {
            return Var { val, idx: CONST };
        }
        NODES.with(|n| {
            let mut n = n.borrow_mut();
            let idx = n.len() as u32;
            n.push(Node { parents, partials });
            Var { val, idx }
        })
    }
}

/// Exclusive handle on this thread's scalar tape.
pub struct ScalarTape {
    _private: (),
}

impl ScalarTape {
    /// Clears and claims the thread-local tape.
    ///
    /// Panics if another guard on this thread is still alive.
    pub fn new() -> Self {
        ACTIVE.with(|a| {
            assert!(!a.get(), "nested scalar tapes are not supported");
            a.set(true);
        });
        NODES.with(|n| n.borrow_mut().clear());
        ScalarTape { _private: () }
    }

    /// A fresh independent variable.
    pub fn var(&self, value: f64) -> Var {
        NODES.with(|n| {
            let mut n = n.borrow_mut();
            let idx = n.len() as u32;
            n.push(Node {
                parents: [CONST, CONST],
                partials: [0.0, 0.0],
            });
            Var { val: value, idx }
        })
    }

    pub fn len(&self) -> usize {
        NODES.with(|n| n.borrow().len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Propagates the seeds `(output, cotangent)` back through the tape.
    pub fn adjoints(&self, seeds: &[(Var, f64)]) -> Adjoints {
        NODES.with(|n| {
            let nodes = n.borrow();
            let mut adj = vec![0.0; nodes.len()];
            for &(v, s) in seeds {
                if v.idx != CONST {
                    adj[v.idx as usize] += s;
                }
            }
            for i in (0..nodes.len()).rev() {
                let a = adj[i];
                if a == 0.0 {
                    continue;
                }
                let node = nodes[i];
                for p in 0..2 {
                    let parent = node.parents[p];
                    if parent != CONST {
                        adj[parent as usize] += a * node.partials[p];
                    }
                }
            }
            Adjoints { adj }
        })
    }
}

impl Default for ScalarTape {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for ScalarTape {
    fn drop(&mut self) {
        NODES.with(|n| n.borrow_mut().clear());
        ACTIVE.with(|a| a.set(false));
    }
}

/// Cotangents of every taped variable after [`ScalarTape::adjoints`].
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn of(&self, v: Var) -> f64 {
        if v.idx == CONST {
            0.0
        } else {
            self.adj[v.idx as usize]
        }
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: Var) -> Var {
        Var::push(self.val + o.val, [self.idx, o.idx], [1.0, 1.0])
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: Var) -> Var {
        Var::push(self.val - o.val, [self.idx, o.idx], [1.0, -1.0])
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: Var) -> Var {
        Var::push(self.val * o.val, [self.idx, o.idx], [o.val, self.val])
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: Var) -> Var {
        let q = self.val / o.val;
        Var::push(q, [self.idx, o.idx], [1.0 / o.val, -q / o.val])
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        Var::push(-self.val, [self.idx, CONST], [-1.0, 0.0])
    }
}

impl Real for Var {
    #[inline]
    fn cst(v: f64) -> Self {
        Var { val: v, idx: CONST }
    }
    #[inline]
    fn val(self) -> f64 {
        self.val
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.val.exp();
        Var::push(e, [self.idx, CONST], [e, 0.0])
    }
    #[inline]
    fn ln(self) -> Self {
        Var::push(self.val.ln(), [self.idx, CONST], [1.0 / self.val, 0.0])
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        Var::push(s, [self.idx, CONST], [0.5 / s, 0.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let tape = ScalarTape::new();
        let x = tape.var(3.0);
        let y = tape.var(-2.0);
        let f = x * x * y + (x / y).exp();
        let adj = tape.adjoints(&[(f, 1.0)]);
        let e = (3.0f64 / -2.0).exp();
        assert!((adj.of(x) - (2.0 * 3.0 * -2.0 + e / -2.0)).abs() < 1e-12);
        assert!((adj.of(y) - (9.0 - e * 3.0 / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn constants_do_not_grow_the_tape() {
        let tape = ScalarTape::new();
        let a = Var::cst(2.0) * Var::cst(4.0);
        assert_eq!(a.value(), 8.0);
        assert!(tape.is_empty());
        let x = tape.var(1.0);
        let _ = x.ln().sqrt() - a;
        assert_eq!(tape.len(), 4);
    }

    #[test]
    fn unused_variable_has_zero_adjoint() {
        let tape = ScalarTape::new();
        let x = tape.var(1.5);
        let y = tape.var(0.5);
        let f = x.sqrt();
        let adj = tape.adjoints(&[(f, 2.0)]);
        assert_eq!(adj.of(y), 0.0);
        assert!((adj.of(x) - 1.0 / 1.5f64.sqrt()).abs() < 1e-12);
    }
}
