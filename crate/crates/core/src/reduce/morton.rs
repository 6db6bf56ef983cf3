//! Morton codes over component positions.

use crate::gaussian::Gaussian;

/// Bits per axis in two dimensions.
pub const BITS_2D: u32 = 31;
/// Bits per axis in three dimensions.
pub const BITS_3D: u32 = 21;

/// Morton code of one component together with its position in the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct MortonCode {
    pub code: u64,
    pub index: usize,
}

/// Spreads the low 32 bits of `v` to the even bit positions.
fn spread2(v: u32) -> u64 {
    let mut x = v as u64;
    x = (x | (x << 16)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x << 8)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

/// Spreads the low 21 bits of `v` to every third bit position.
fn spread3(v: u32) -> u64 {
    let mut x = (v as u64) & 0x1F_FFFF;
    x = (x | (x << 32)) & 0x001F_0000_0000_FFFF;
    x = (x | (x << 16)) & 0x001F_0000_FF00_00FF;
    x = (x | (x << 8)) & 0x100F_00F0_0F00_F00F;
    x = (x | (x << 4)) & 0x10C3_0C30_C30C_30C3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// Interleaves quantized coordinates, `x` in the lowest slot.
pub fn interleave2(x: u32, y: u32) -> u64 {
    spread2(x) | (spread2(y) << 1)
}

pub fn interleave3(x: u32, y: u32, z: u32) -> u64 {
    spread3(x) | (spread3(y) << 1) | (spread3(z) << 2)
}

/// Quantizes positions to the mixture's bounding box and returns the codes
/// sorted ascending, ties by input index. An axis of zero extent quantizes to
/// 0 everywhere.
pub fn morton_codes(gs: &[Gaussian]) -> Vec<MortonCode> {
    let Some(first) = gs.first() else {
        return Vec::new();
    };
    let k = first.dims;
    let bits = if k == 2 { BITS_2D } else { BITS_3D };
    let max_q = ((1u64 << bits) - 1) as f64;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for g in gs {
        for d in 0..k {
            lo[d] = lo[d].min(g.position[d]);
            hi[d] = hi[d].max(g.position[d]);
        }
    }
    let mut codes: Vec<MortonCode> = gs
        .iter()
        .enumerate()
        .map(|(index, g)| {
            let mut q = [0u32; 3];
            for d in 0..k {
                let extent = hi[d] - lo[d];
                if extent > 0.0 {
                    let t = ((g.position[d] - lo[d]) / extent).clamp(0.0, 1.0);
                    q[d] = (t * max_q).round() as u32;
                }
            }
            let code = if k == 2 {
                interleave2(q[0], q[1])
            } else {
                interleave3(q[0], q[1], q[2])
            };
            MortonCode { code, index }
        })
        .collect();
    codes.sort_unstable();
    codes
}
