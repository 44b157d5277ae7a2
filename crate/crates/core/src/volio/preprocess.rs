use super::{Grid3, Orientation, VolioError, Volume};

/// Permute and mirror the data so that axis i runs along world axis i in
/// the positive (R, A, S) direction.
pub fn reorient_to_ras(v: &Volume) -> Volume {
    if v.orientation.is_ras() {
        return v.clone();
    }
    let Orientation { axes, flips } = v.orientation;
    let src = v.extent();
    let mut extent = [0usize; 3];
    let mut spacing = [0.0; 3];
    for j in 0..3 {
        extent[axes[j]] = src[j];
        spacing[axes[j]] = v.spacing[j];
    }
    let mut data = vec![0.0; v.grid.len()];
    for z in 0..src[2] {
        for y in 0..src[1] {
            for x in 0..src[0] {
                let mut out = [0usize; 3];
                for (j, i) in [x, y, z].into_iter().enumerate() {
                    out[axes[j]] = if flips[j] { src[j] - 1 - i } else { i };
                }
                data[crate::interp::flat_index(extent, out[0], out[1], out[2])] = v.grid.get(x, y, z);
            }
        }
    }
    Volume { grid: Grid3 { extent, data }, spacing, orientation: Orientation::RAS, provenance: v.provenance.clone() }
}

/// Trilinear resampling to 1 mm isotropic; the new extent along each axis
/// is `round(n * spacing)`, at least 1.
pub fn resample_isotropic(v: &Volume) -> Volume {
    if v.spacing == [1.0; 3] {
        return v.clone();
    }
    let src = v.extent();
    let to = [0, 1, 2].map(|a| ((src[a] as f64 * v.spacing[a]).round() as usize).max(1));
    let scale = v.spacing.map(|s| 1.0 / s);
    Volume {
        grid: v.grid.resampled(to, scale),
        spacing: [1.0; 3],
        orientation: v.orientation,
        provenance: v.provenance.clone(),
    }
}

/// Centre crop and/or zero pad each axis to `target`.
pub fn crop_or_pad(g: &Grid3<f64>, target: [usize; 3]) -> Result<Grid3<f64>, VolioError> {
    if target.contains(&0) {
        return Err(VolioError::Extent(format!("target extent {target:?} has a zero axis")));
    }
    if g.extent == target {
        return Ok(g.clone());
    }
    // Positive shift crops from the source, negative pads the destination.
    let shift = [0, 1, 2].map(|a| (g.extent[a] as isize - target[a] as isize) / 2);
    let mut out = Grid3::filled(target, 0.0);
    for z in 0..target[2] {
        let sz = z as isize + shift[2];
        if sz < 0 || sz >= g.extent[2] as isize {
            continue;
        }
        for y in 0..target[1] {
            let sy = y as isize + shift[1];
            if sy < 0 || sy >= g.extent[1] as isize {
                continue;
            }
            for x in 0..target[0] {
                let sx = x as isize + shift[0];
                if sx < 0 || sx >= g.extent[0] as isize {
                    continue;
                }
                let o = out.index(x, y, z);
                out.data[o] = g.get(sx as usize, sy as usize, sz as usize);
            }
        }
    }
    Ok(out)
}

/// Per-volume affine map of [min, max] onto [0, 1]; constant grids become zeros.
pub fn scale_min_max(g: &Grid3<f64>) -> Grid3<f64> {
    let (lo, hi) = g.min_max();
    let range = hi - lo;
    if !(range > 0.0 && range.is_finite()) {
        return Grid3::filled(g.extent, 0.0);
    }
    Grid3 { extent: g.extent, data: g.data.iter().map(|&x| (x - lo) / range).collect() }
}

/// Reorient to RAS, resample to 1 mm, centre crop/pad, then min-max scale.
pub fn preprocess(v: &Volume, target: [usize; 3]) -> Result<Volume, VolioError> {
    let ras = reorient_to_ras(v);
    let iso = resample_isotropic(&ras);
    let fitted = crop_or_pad(&iso.grid, target)?;
    Ok(Volume {
        grid: scale_min_max(&fitted),
        spacing: [1.0; 3],
        orientation: Orientation::RAS,
        provenance: v.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(extent: [usize; 3]) -> Grid3<f64> {
        let n: usize = extent.iter().product();
        Grid3::new(extent, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn two_mm_extent_eight_becomes_sixteen() {
        let v = Volume::new(ramp([8, 8, 8]), [2.0; 3], Orientation::RAS, "t").unwrap();
        assert_eq!(resample_isotropic(&v).extent(), [16, 16, 16]);
    }

    #[test]
    fn constant_volume_maps_to_zeros() {
        let v = Volume::new(Grid3::filled([4, 4, 4], 7.5), [1.0; 3], Orientation::RAS, "t").unwrap();
        let p = preprocess(&v, [4, 4, 4]).unwrap();
        assert!(p.grid.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn crop_then_pad_keeps_centre() {
        let g = ramp([4, 1, 1]);
        assert_eq!(crop_or_pad(&g, [2, 1, 1]).unwrap().data, vec![1.0, 2.0]);
        assert_eq!(crop_or_pad(&g, [6, 1, 1]).unwrap().data, vec![0.0, 0.0, 1.0, 2.0, 3.0, 0.0]);
        assert!(crop_or_pad(&g, [0, 1, 1]).is_err());
    }

    #[test]
    fn reorientation_mirrors_and_permutes() {
        // Data x runs left, data y runs superior, data z runs anterior.
        let o = Orientation::new([0, 2, 1], [true, false, false]).unwrap();
        let v = Volume::new(ramp([2, 3, 4]), [1.0, 2.0, 3.0], o, "t").unwrap();
        let r = reorient_to_ras(&v);
        assert_eq!(r.extent(), [2, 4, 3]);
        assert_eq!(r.spacing, [1.0, 3.0, 2.0]);
        for z in 0..4 {
            for y in 0..3 {
                for x in 0..2 {
                    assert_eq!(r.grid.get(1 - x, z, y), v.grid.get(x, y, z));
                }
            }
        }
    }
}
