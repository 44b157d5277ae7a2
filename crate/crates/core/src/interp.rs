//! Linear interpolation weights shared by volume resampling, crop resizing,
//! positional-embedding interpolation and segmentation upsampling.
//!
//! Output sample `i` reads the source at coordinate `(i + 0.5) * scale - 0.5`
//! (cell-centre alignment), clamped to the source edges.

/// One output sample: `(1 - frac) * src[lo] + frac * src[hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn linear_taps(n_in: usize, n_out: usize, scale: f64) -> Vec<Tap> {
    assert!(n_in > 0, "interpolating from an empty axis");
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Taps mapping an extent onto another by ratio of extents.
pub fn resize_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    linear_taps(n_in, n_out, n_in as f64 / n_out as f64)
}

/// Flat index of voxel `(x, y, z)` in an `extent` grid, x fastest.
#[inline]
pub fn flat_index(extent: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + extent[0] * (y + extent[1] * z)
}

/// Visit the (up to 8) nonzero trilinear source taps of every output voxel.
///
/// `visit(out_index, src_index, weight)` is called in output order.
pub fn for_each_trilinear(from: [usize; 3], to: [usize; 3], scale: [f64; 3], mut visit: impl FnMut(usize, usize, f64)) {
    let tx = linear_taps(from[0], to[0], scale[0]);
    let ty = linear_taps(from[1], to[1], scale[1]);
    let tz = linear_taps(from[2], to[2], scale[2]);
    let axis = |t: &Tap| -> [(usize, f64); 2] { [(t.lo, 1.0 - t.frac), (t.hi, t.frac)] };
    let mut out = 0;
    for cz in &tz {
        for cy in &ty {
            for cx in &tx {
                for (z, wz) in axis(cz) {
                    if wz == 0.0 {
                        continue;
                    }
                    for (y, wy) in axis(cy) {
                        if wy == 0.0 {
                            continue;
                        }
                        for (x, wx) in axis(cx) {
                            if wx == 0.0 {
                                continue;
                            }
                            visit(out, flat_index(from, x, y, z), wx * wy * wz);
                        }
                    }
                }
                out += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_taps_are_exact() {
        for t in resize_taps(7, 7) {
            assert_eq!(t.frac, 0.0);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let mut sums = vec![0.0; 5 * 6 * 3];
        for_each_trilinear([3, 4, 2], [5, 6, 3], [0.6, 4.0 / 6.0, 2.0 / 3.0], |o, _, w| sums[o] += w);
        for s in sums {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
