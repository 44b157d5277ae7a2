//! Synthetic head-like phantoms: a noisy ellipsoidal "brain" with textured
//! blobs, a binary latent class carried only by one radius, and two small
//! left/right target structures with exact label maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Grid3, LabelGrid, Orientation, VolioError, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub extent: [usize; 3],
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Maximum absolute offset of the ellipsoid centre from the grid centre, per axis.
    pub center_jitter: f64,
    pub radius_min: [f64; 3],
    pub radius_max: [f64; 3],
    /// Latent class bit; class 1 adds `delta` to the x radius.
    pub class: u8,
    pub delta: f64,
    pub background: f64,
    pub tissue: f64,
    /// Number of textured blobs inside the ellipsoid.
    pub blobs: usize,
    pub blob_radius: [f64; 2],
    pub blob_intensity: [f64; 2],
    /// Target structure radii and mean x distance from the ellipsoid centre.
    pub structure_radii: [f64; 3],
    pub structure_offset: f64,
    pub structure_jitter: f64,
    pub structure_intensity: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            extent: [16, 16, 16],
            noise: 0.03,
            center_jitter: 0.5,
            radius_min: [4.5, 4.5, 4.5],
            radius_max: [5.5, 5.5, 5.5],
            class: 0,
            delta: 1.0,
            background: 0.05,
            tissue: 0.45,
            blobs: 3,
            blob_radius: [1.0, 2.0],
            blob_intensity: [0.2, 0.7],
            structure_radii: [1.5, 2.0, 1.5],
            structure_offset: 3.0,
            structure_jitter: 0.5,
            structure_intensity: 0.85,
            seed: 0,
        }
    }
}

/// Latent geometry actually drawn for one phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub left_center: [f64; 3],
    pub right_center: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub class: u8,
    /// 0 = background, 1 = left structure (lower x), 2 = right structure.
    pub labels: LabelGrid,
    pub truth: PhantomTruth,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), VolioError> {
        let bad = |m: String| Err(VolioError::InvalidSpec(m));
        if self.extent.contains(&0) {
            return bad(format!("extent {:?} has a zero axis", self.extent));
        }
        if self.class > 1 {
            return bad(format!("class must be 0 or 1, got {}", self.class));
        }
        if !(self.noise >= 0.0 && self.center_jitter >= 0.0 && self.structure_jitter >= 0.0) {
            return bad("noise and jitters must be non-negative".into());
        }
        let delta = if self.class == 1 { self.delta } else { 0.0 };
        for a in 0..3 {
            let (lo, hi) = (self.radius_min[a], self.radius_max[a]);
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("radius range [{lo}, {hi}] on axis {a} is empty or non-positive"));
            }
            let shift = if a == 0 { delta } else { 0.0 };
            if lo + shift <= 0.0 {
                return bad(format!("delta {} makes the x radius non-positive", self.delta));
            }
            let half = (self.extent[a] as f64 - 1.0) / 2.0;
            if self.center_jitter + hi + shift.max(0.0) > half {
                return bad(format!("ellipsoid reaches outside the grid along axis {a}"));
            }
            let reach = if a == 0 { self.structure_offset } else { 0.0 };
            if self.center_jitter + reach + self.structure_jitter + self.structure_radii[a] > half {
                return bad(format!("target structure reaches outside the grid along axis {a}"));
            }
            if !(self.structure_radii[a] > 0.0) {
                return bad("structure radii must be positive".into());
            }
        }
        if self.structure_offset - self.structure_jitter <= self.structure_radii[0] {
            return bad("left and right structures may overlap".into());
        }
        if !(self.blob_radius[0] > 0.0 && self.blob_radius[0] <= self.blob_radius[1]) {
            return bad("blob radius range is empty or non-positive".into());
        }
        if self.blob_intensity[0] > self.blob_intensity[1] {
            return bad("blob intensity range is empty".into());
        }
        Ok(())
    }
}

/// Membership of integer voxel `p` in the ellipsoid with centre `c` and radii `r`.
#[inline]
pub(crate) fn inside(p: [usize; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] as f64 - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Deterministic in `spec.seed`. The random draws never depend on the
/// class bit, so two specs that differ only in class and have `delta = 0`
/// produce identical volumes.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, VolioError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = spec.extent.map(|n| (n as f64 - 1.0) / 2.0);

    let center: [f64; 3] =
        std::array::from_fn(|a| half[a] + uniform(&mut rng, -spec.center_jitter, spec.center_jitter));
    let mut radii: [f64; 3] = std::array::from_fn(|a| uniform(&mut rng, spec.radius_min[a], spec.radius_max[a]));
    if spec.class == 1 {
        radii[0] += spec.delta;
    }
    let structure = |sign: f64, rng: &mut ChaCha8Rng| -> [f64; 3] {
        std::array::from_fn(|a| {
            let base = center[a] + if a == 0 { sign * spec.structure_offset } else { 0.0 };
            base + uniform(rng, -spec.structure_jitter, spec.structure_jitter)
        })
    };
    let left_center = structure(-1.0, &mut rng);
    let right_center = structure(1.0, &mut rng);

    let blobs: Vec<([f64; 3], [f64; 3], f64)> = (0..spec.blobs)
        .map(|_| {
            let c = std::array::from_fn(|a| center[a] + uniform(&mut rng, -0.5, 0.5) * radii[a]);
            let r = std::array::from_fn(|_| uniform(&mut rng, spec.blob_radius[0], spec.blob_radius[1]));
            (c, r, uniform(&mut rng, spec.blob_intensity[0], spec.blob_intensity[1]))
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise).map_err(|e| VolioError::InvalidSpec(e.to_string()))?;
    let [nx, ny, nz] = spec.extent;
    let mut data = Vec::with_capacity(nx * ny * nz);
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x, y, z];
                let mut value = spec.background;
                let mut label = 0u8;
                if inside(p, center, radii) {
                    value = spec.tissue;
                    for (c, r, v) in &blobs {
                        if inside(p, *c, *r) {
                            value = *v;
                        }
                    }
                }
                if inside(p, left_center, spec.structure_radii) {
                    value = spec.structure_intensity;
                    label = 1;
                } else if inside(p, right_center, spec.structure_radii) {
                    value = spec.structure_intensity;
                    label = 2;
                }
                let noisy = (value + noise.sample(&mut rng)).clamp(0.0, 1.0);
                // Rounded through f32 so the raw format stores it exactly.
                data.push(noisy as f32 as f64);
                labels.push(label);
            }
        }
    }

    let volume = Volume::new(
        Grid3::new(spec.extent, data)?,
        [1.0; 3],
        Orientation::RAS,
        format!("phantom seed={} class={}", spec.seed, spec.class),
    )?;
    Ok(Phantom {
        volume,
        class: spec.class,
        labels: Grid3::new(spec.extent, labels)?,
        truth: PhantomTruth { center, radii, left_center, right_center },
    })
}
