//! Minimal memory footprint of convolution modules, counted in Gaussians.

use std::fmt;

use serde::{Deserialize, Serialize};

/// One convolution module: batch `b`, channels `f_i → f_o`, `n_i` incoming,
/// `n_o` produced and `n_p` pooled Gaussians, `n_k` per kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintLayer {
    pub b: u64,
    pub f_i: u64,
    pub f_o: u64,
    pub n_i: u64,
    pub n_o: u64,
    pub n_p: u64,
    pub n_k: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintSpec {
    pub dims: usize,
    pub layers: Vec<FootprintLayer>,
}

impl FootprintSpec {
    /// The five-module reference network (channels 1, 8, 16, 32, 64, 10 on
    /// 128 input Gaussians halved per module). With `fused` the convolution
    /// emits `2·N_p` Gaussians directly; otherwise all `F_i·N_i·N_k`.
    pub fn reference(batch: u64, fused: bool) -> Self {
        let channels = [1, 8, 16, 32, 64, 10];
        let mut n_i = 128;
        let layers = channels
            .windows(2)
            .map(|w| {
                let n_p = n_i / 2;
                let n_o = if fused { 2 * n_p } else { w[0] * n_i * 5 };
                let l = FootprintLayer {
                    b: batch,
                    f_i: w[0],
                    f_o: w[1],
                    n_i,
                    n_o,
                    n_p,
                    n_k: 5,
                };
                n_i = n_p;
                l
            })
            .collect();
        FootprintSpec { dims: 3, layers }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FootprintRow {
    pub layer: FootprintLayer,
    /// Kernel Gaussians `F_i·F_o·N_k`.
    pub k: u64,
    /// Data Gaussians `B·(F_o·N_o + F_o·N_p)`.
    pub d: u64,
    /// `2·(K + D)`, counting gradients.
    pub g: u64,
    /// MiB with 6 floats per 2D Gaussian.
    pub m_2d: f64,
    /// MiB with 10 floats per 3D Gaussian.
    pub m_3d: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FootprintTable {
    pub rows: Vec<FootprintRow>,
    pub total_g: u64,
    pub total_m_2d: f64,
    pub total_m_3d: f64,
}

const MIB: f64 = 1024.0 * 1024.0;

/// Bytes of `g` Gaussians with `floats` 32-bit values each, in MiB.
pub fn megabytes(g: u64, floats: u64) -> f64 {
    (g * floats * 4) as f64 / MIB
}

pub fn footprint(l: &FootprintLayer) -> FootprintRow {
    let k = l.f_i * l.f_o * l.n_k;
    let d = l.b * (l.f_o * l.n_o + l.f_o * l.n_p);
    let g = 2 * (k + d);
    FootprintRow {
        layer: *l,
        k,
        d,
        g,
        m_2d: megabytes(g, 6),
        m_3d: megabytes(g, 10),
    }
}

pub fn memcalc(spec: &FootprintSpec) -> FootprintTable {
    let rows: Vec<FootprintRow> = spec.layers.iter().map(footprint).collect();
    let total_g = rows.iter().map(|r| r.g).sum();
    FootprintTable {
        total_g,
        total_m_2d: megabytes(total_g, 6),
        total_m_3d: megabytes(total_g, 10),
        rows,
    }
}

impl fmt::Display for FootprintTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>4} {:>4} {:>4} {:>6} {:>6} {:>6} {:>4} {:>8} {:>12} {:>12} {:>10} {:>10}",
            "B", "F_i", "F_o", "N_i", "N_o", "N_p", "N_k", "K", "D", "G", "M_2D", "M_3D"
        )?;
        for r in &self.rows {
            let l = &r.layer;
            writeln!(
                f,
                "{:>4} {:>4} {:>4} {:>6} {:>6} {:>6} {:>4} {:>8} {:>12} {:>12} {:>10.2} {:>10.2}",
                l.b, l.f_i, l.f_o, l.n_i, l.n_o, l.n_p, l.n_k, r.k, r.d, r.g, r.m_2d, r.m_3d
            )?;
        }
        write!(
            f,
            "total{:>69} {:>10.2} {:>10.2}",
            self.total_g, self.total_m_2d, self.total_m_3d
        )
    }
}
