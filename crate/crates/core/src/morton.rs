//! Morton (z-order) codes for 3D integer cells.
//!
//! Bit `3i` of a code holds bit `i` of x, `3i + 1` of y and `3i + 2` of z, so
//! dropping the lowest three bits of a code yields the code of the parent cell.

use std::cmp::Ordering;

/// Largest depth whose cell coordinates fit into a 64-bit code.
pub const MAX_DEPTH: u32 = 21;

fn spread(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | x << 32) & 0x1f00000000ffff;
    x = (x | x << 16) & 0x1f0000ff0000ff;
    x = (x | x << 8) & 0x100f00f00f00f00f;
    x = (x | x << 4) & 0x10c30c30c30c30c3;
    x = (x | x << 2) & 0x1249249249249249;
    x
}

fn compact(v: u64) -> u64 {
    let mut x = v & 0x1249249249249249;
    x = (x ^ (x >> 2)) & 0x10c30c30c30c30c3;
    x = (x ^ (x >> 4)) & 0x100f00f00f00f00f;
    x = (x ^ (x >> 8)) & 0x1f0000ff0000ff;
    x = (x ^ (x >> 16)) & 0x1f00000000ffff;
    x = (x ^ (x >> 32)) & 0x1f_ffff;
    x
}

pub fn encode(x: u32, y: u32, z: u32) -> u64 {
    spread(x as u64) | spread(y as u64) << 1 | spread(z as u64) << 2
}

pub fn decode(code: u64) -> [u32; 3] {
    [
        compact(code) as u32,
        compact(code >> 1) as u32,
        compact(code >> 2) as u32,
    ]
}

/// Code of the ancestor `levels_up` levels above `code`.
pub fn ancestor(code: u64, levels_up: u32) -> u64 {
    if levels_up > MAX_DEPTH {
        0
    } else {
        code >> (3 * levels_up)
    }
}

fn less_msb(a: u64, b: u64) -> bool {
    a < b && a < (a ^ b)
}

/// Z-order comparison of unbounded non-negative integer cells, equivalent to
/// comparing their (arbitrarily wide) Morton codes.
pub fn cmp_zorder(a: &[u64; 3], b: &[u64; 3]) -> Ordering {
    let mut dim = 2;
    let mut best = 0u64;
    for d in [2usize, 1, 0] {
        let diff = a[d] ^ b[d];
        if less_msb(best, diff) {
            dim = d;
            best = diff;
        }
    }
    a[dim].cmp(&b[dim])
}
