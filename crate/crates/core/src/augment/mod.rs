//! Multi-crop view construction: two global crops (a mildly augmented
//! teacher copy and a strongly augmented, masked student copy sharing the
//! same geometry) plus clean local crops.

mod mask;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volio::{Grid3, Volume};

pub use mask::{apply_mask, sample_mask, Fill, MaskDescriptor};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("patch grid {0:?} has no patches")]
    EmptyPatchGrid([usize; 3]),
    #[error("view extent {view:?} is not tiled by grid {grid:?} of {patch}-voxel patches")]
    GridMismatch { view: [usize; 3], grid: [usize; 3], patch: usize },
    #[error("crop extent {crop:?} exceeds volume extent {volume:?}")]
    CropTooLarge { crop: [usize; 3], volume: [usize; 3] },
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

/// Closed ranges for the intensity transform `clamp(scale * x^gamma + shift, 0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityRange {
    pub scale: [f64; 2],
    pub shift: [f64; 2],
    pub gamma: [f64; 2],
}

impl IntensityRange {
    pub fn mild() -> Self {
        Self { scale: [0.95, 1.05], shift: [-0.02, 0.02], gamma: [1.0, 1.0] }
    }

    pub fn strong() -> Self {
        Self { scale: [0.8, 1.2], shift: [-0.1, 0.1], gamma: [0.7, 1.5] }
    }

    pub fn identity() -> Self {
        Self { scale: [1.0, 1.0], shift: [0.0, 0.0], gamma: [1.0, 1.0] }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> IntensityAug {
        IntensityAug { scale: draw(rng, self.scale), shift: draw(rng, self.shift), gamma: draw(rng, self.gamma) }
    }
}

/// Parameters actually applied to one view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityAug {
    pub scale: f64,
    pub shift: f64,
    pub gamma: f64,
}

impl IntensityAug {
    pub fn apply(&self, g: &Grid3) -> Grid3 {
        let f = |x: f64| {
            let base = x.clamp(0.0, 1.0);
            let curved = if self.gamma == 1.0 { base } else { base.powf(self.gamma) };
            (self.scale * curved + self.shift).clamp(0.0, 1.0)
        };
        Grid3 { extent: g.extent, data: g.data.iter().map(|&x| f(x)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub global_extent: [usize; 3],
    pub local_extent: [usize; 3],
    pub n_local: usize,
    /// Per-axis crop size as a fraction of the volume extent.
    pub global_fraction: [f64; 2],
    pub local_fraction: [f64; 2],
    pub flip_prob: f64,
    pub teacher_intensity: IntensityRange,
    pub student_intensity: IntensityRange,
    pub mask_ratio: f64,
    /// Model patch edge; view extents must be multiples of it.
    pub patch: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            global_extent: [16; 3],
            local_extent: [8; 3],
            n_local: 4,
            global_fraction: [0.75, 1.0],
            local_fraction: [0.3, 0.5],
            flip_prob: 0.5,
            teacher_intensity: IntensityRange::mild(),
            student_intensity: IntensityRange::strong(),
            mask_ratio: 0.5,
            patch: 4,
        }
    }
}

impl AugmentConfig {
    pub fn n_views(&self) -> usize {
        2 + self.n_local
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::Config(m));
        if self.patch == 0 {
            return bad("patch edge must be positive".into());
        }
        for (name, e) in [("global", self.global_extent), ("local", self.local_extent)] {
            if e.iter().any(|&n| n == 0 || n % self.patch != 0) {
                return bad(format!("{name} extent {e:?} is not a positive multiple of patch {}", self.patch));
            }
        }
        if self.n_local > 0 && (0..3).any(|a| self.local_extent[a] >= self.global_extent[a]) {
            return bad(format!(
                "local extent {:?} must be smaller than global extent {:?}",
                self.local_extent, self.global_extent
            ));
        }
        for (name, [lo, hi]) in [("global", self.global_fraction), ("local", self.local_fraction)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} fraction [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip probability {} outside [0, 1]", self.flip_prob));
        }
        for r in [&self.teacher_intensity, &self.student_intensity] {
            if r.scale[0] > r.scale[1] || r.shift[0] > r.shift[1] || r.gamma[0] > r.gamma[1] || r.gamma[0] <= 0.0 {
                return bad(format!("intensity range {r:?} is empty or has non-positive gamma"));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        Ok(())
    }

    pub fn global_grid(&self) -> [usize; 3] {
        self.global_extent.map(|n| n / self.patch)
    }
}

/// Where a view was cut from and how it was mirrored (after resizing).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub origin: [usize; 3],
    pub size: [usize; 3],
    pub flips: [bool; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalView {
    pub crop: Crop,
    pub teacher_aug: IntensityAug,
    pub student_aug: IntensityAug,
    /// Clean-ish copy seen by the teacher; never masked.
    pub teacher: Grid3,
    /// Student copy after intensity augmentation, before masking.
    pub student: Grid3,
    /// Student copy after masking; this is the student's input.
    pub masked: Grid3,
    pub mask: MaskDescriptor,
    pub voxel_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalView {
    pub crop: Crop,
    pub view: Grid3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub globals: [GlobalView; 2],
    pub locals: Vec<LocalView>,
    pub seed: u64,
}

impl ViewSet {
    pub fn n_views(&self) -> usize {
        2 + self.locals.len()
    }

    /// Student inputs in loss order: the two masked globals, then locals.
    pub fn student_inputs(&self) -> Vec<&Grid3> {
        let mut v: Vec<&Grid3> = self.globals.iter().map(|g| &g.masked).collect();
        v.extend(self.locals.iter().map(|l| &l.view));
        v
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn random_crop(rng: &mut ChaCha8Rng, extent: [usize; 3], fraction: [f64; 2], flip_prob: f64) -> Crop {
    let size = [0, 1, 2].map(|a| ((draw(rng, fraction) * extent[a] as f64).round() as usize).clamp(1, extent[a]));
    let origin = [0, 1, 2].map(|a| rng.random_range(0..=extent[a] - size[a]));
    let flips = [0, 1, 2].map(|_| flip_prob > 0.0 && rng.random_bool(flip_prob));
    Crop { origin, size, flips }
}

fn cut(v: &Grid3, crop: &Crop, to: [usize; 3]) -> Grid3 {
    v.crop(crop.origin, crop.size).expect("crop drawn inside the volume").resized(to).flipped(crop.flips)
}

/// Build all views of `v`. Deterministic in `seed`.
pub fn make_views(v: &Volume, cfg: &AugmentConfig, seed: u64) -> Result<ViewSet, AugmentError> {
    cfg.validate()?;
    let extent = v.extent();
    if (0..3).any(|a| cfg.global_extent[a] > extent[a]) {
        return Err(AugmentError::CropTooLarge { crop: cfg.global_extent, volume: extent });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = cfg.global_grid();
    let mut global = || -> Result<GlobalView, AugmentError> {
        let crop = random_crop(&mut rng, extent, cfg.global_fraction, cfg.flip_prob);
        let teacher_aug = cfg.teacher_intensity.draw(&mut rng);
        let student_aug = cfg.student_intensity.draw(&mut rng);
        let mask = sample_mask(grid, cfg.mask_ratio, rng.random())?;
        let base = cut(&v.grid, &crop, cfg.global_extent);
        let student = student_aug.apply(&base);
        let (masked, voxel_mask) = apply_mask(&student, &mask, cfg.patch)?;
        Ok(GlobalView {
            crop,
            teacher_aug,
            student_aug,
            teacher: teacher_aug.apply(&base),
            student,
            masked,
            mask,
            voxel_mask,
        })
    };
    let globals = [global()?, global()?];
    let locals = (0..cfg.n_local)
        .map(|_| {
            let crop = random_crop(&mut rng, extent, cfg.local_fraction, cfg.flip_prob);
            LocalView { crop, view: cut(&v.grid, &crop, cfg.local_extent) }
        })
        .collect();
    Ok(ViewSet { globals, locals, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_intensity_is_exact() {
        let g = Grid3::new([2, 1, 1], vec![0.25, 0.75]).unwrap();
        let aug = IntensityRange::identity().draw(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(aug.apply(&g), g);
    }

    #[test]
    fn local_extent_must_be_smaller() {
        let cfg = AugmentConfig { local_extent: [16; 3], ..AugmentConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
