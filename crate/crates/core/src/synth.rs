//! Synthetic multi-domain chest volumes for desk-scale training.
//!
//! Each volume is an ellipsoidal "lung" filled with a dim parenchyma base,
//! bright tube-shaped vessels, and isolated spherical nodules; everything
//! outside the ellipsoid takes the standard pad value. Domains differ by
//! intensity offset, contrast gain, noise level, vessel density, nodule
//! size, and a z-axis blur that emulates slice thickness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ct::{Annotation, Volume, Voxels, PAD_VALUE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDomainSpec {
    pub domain_id: String,
    /// Added to every in-lung intensity after the gain.
    pub intensity_offset: f64,
    /// Multiplies the structural intensity field.
    pub contrast_gain: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Number of vessel tubes per volume.
    pub vessel_count: usize,
    /// Inclusive range of nodules planted per volume.
    pub nodule_count: [usize; 2],
    /// Inclusive nodule radius range in voxels.
    pub nodule_radius: [f64; 2],
    /// Half-width of the z-axis box blur (0 = no blur).
    pub blur_level: usize,
    /// Cube edge of the generated volume.
    pub extent: usize,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        SyntheticDomainSpec {
            domain_id: "domain".to_string(),
            intensity_offset: 0.0,
            contrast_gain: 1.0,
            noise_sigma: 4.0,
            vessel_count: 6,
            nodule_count: [1, 3],
            nodule_radius: [2.0, 4.0],
            blur_level: 0,
            extent: 48,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn named(id: &str) -> Self {
        SyntheticDomainSpec {
            domain_id: id.to_string(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent < 16 {
            return Err(Error::config(format!(
                "extent {} is too small for a lung phantom",
                self.extent
            )));
        }
        if self.nodule_count[0] > self.nodule_count[1] {
            return Err(Error::config("nodule_count range is reversed"));
        }
        if !(self.nodule_radius[0] > 0.0) || self.nodule_radius[0] > self.nodule_radius[1] {
            return Err(Error::config("bad nodule_radius range"));
        }
        if self.nodule_radius[1] >= self.extent as f64 / 4.0 {
            return Err(Error::config(format!(
                "nodule radius {} does not fit an extent-{} volume",
                self.nodule_radius[1], self.extent
            )));
        }
        if !(self.contrast_gain > 0.0) {
            return Err(Error::config("contrast_gain must be positive"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

const LUNG_BASE: f64 = 40.0;
const VESSEL_VALUE: f64 = 120.0;
const NODULE_VALUE: f64 = 180.0;

struct Phantom {
    extent: usize,
    center: [f64; 3],
    semi: [f64; 3],
    field: Vec<f64>,
    mask: Vec<u8>,
}

impl Phantom {
    fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extent + y) * self.extent + x
    }

    fn ellipse_value(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum()
    }

    fn stamp_sphere(&mut self, c: [f64; 3], r: f64, value: f64) {
        let e = self.extent as i64;
        let lo = |v: f64| ((v - r).floor() as i64).max(0);
        let hi = |v: f64| ((v + r).ceil() as i64).min(e - 1);
        for z in lo(c[0])..=hi(c[0]) {
            for y in lo(c[1])..=hi(c[1]) {
                for x in lo(c[2])..=hi(c[2]) {
                    let d2 = (z as f64 - c[0]).powi(2)
                        + (y as f64 - c[1]).powi(2)
                        + (x as f64 - c[2]).powi(2);
                    if d2 <= r * r {
                        let i = self.idx(z as usize, y as usize, x as usize);
                        self.field[i] = self.field[i].max(value);
                    }
                }
            }
        }
    }
}

fn random_point_inside(p: &Phantom, rng: &mut impl Rng, depth_limit: f64) -> Option<[f64; 3]> {
    for _ in 0..200 {
        let cand: [f64; 3] =
            std::array::from_fn(|_| rng.gen_range(0.0..p.extent as f64));
        if p.ellipse_value(cand) <= depth_limit {
            return Some(cand);
        }
    }
    None
}

fn random_direction(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = (v.iter().map(|c| c * c).sum::<f64>()).sqrt();
        if n > 0.1 {
            return std::array::from_fn(|a| v[a] / n);
        }
    }
}

/// Deterministically generates one windowed volume with its lung mask and
/// the annotations of every planted nodule (world frame = voxel frame:
/// unit spacing, zero offset).
pub fn generate_volume(
    spec: &SyntheticDomainSpec,
    series_id: &str,
    seed: u64,
) -> Result<(Volume, Vec<Annotation>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = spec.extent;
    let ef = e as f64;
    let mut phantom = Phantom {
        extent: e,
        center: [ef / 2.0, ef / 2.0, ef / 2.0],
        semi: [
            ef * rng.gen_range(0.38..0.44),
            ef * rng.gen_range(0.34..0.40),
            ef * rng.gen_range(0.34..0.40),
        ],
        field: vec![0.0; e * e * e],
        mask: vec![0u8; e * e * e],
    };
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                if phantom.ellipse_value([z as f64, y as f64, x as f64]) <= 1.0 {
                    let i = phantom.idx(z, y, x);
                    phantom.mask[i] = 1;
                    phantom.field[i] = LUNG_BASE;
                }
            }
        }
    }

    for _ in 0..spec.vessel_count {
        let start = random_point_inside(&phantom, &mut rng, 0.8)
            .ok_or_else(|| Error::data("could not seed a vessel inside the lung"))?;
        let dir = random_direction(&mut rng);
        let length = ef * rng.gen_range(0.35..0.8);
        let radius = rng.gen_range(1.0..2.0);
        let steps = (length / 0.5).ceil() as usize;
        for s in 0..steps {
            let t = s as f64 * 0.5;
            let p: [f64; 3] = std::array::from_fn(|a| start[a] + t * dir[a]);
            if phantom.ellipse_value(p) > 1.0 {
                break;
            }
            phantom.stamp_sphere(p, radius, VESSEL_VALUE);
        }
    }

    let nodule_n = rng.gen_range(spec.nodule_count[0]..=spec.nodule_count[1]);
    let mut placed: Vec<([f64; 3], f64)> = Vec::new();
    for _ in 0..nodule_n {
        let radius = rng.gen_range(spec.nodule_radius[0]..=spec.nodule_radius[1]);
        let mut found = None;
        for _ in 0..200 {
            let c = match random_point_inside(&phantom, &mut rng, 0.6) {
                Some(c) => c,
                None => break,
            };
            let clear = placed
                .iter()
                .all(|(pc, pr)| {
                    let d2: f64 = (0..3).map(|a| (c[a] - pc[a]).powi(2)).sum();
                    d2.sqrt() >= radius + pr + 4.0
                });
            if clear {
                found = Some(c);
                break;
            }
        }
        let c = found.ok_or_else(|| {
            Error::data(format!(
                "could not place nodule {} of {nodule_n} after bounded retries",
                placed.len() + 1
            ))
        })?;
        phantom.stamp_sphere(c, radius, NODULE_VALUE);
        placed.push((c, radius));
    }

    // z-axis box blur emulating thick slices, applied to clean structure
    if spec.blur_level > 0 {
        let b = spec.blur_level;
        let mut blurred = phantom.field.clone();
        for y in 0..e {
            for x in 0..e {
                for z in 0..e {
                    let lo = z.saturating_sub(b);
                    let hi = (z + b).min(e - 1);
                    let mut acc = 0.0;
                    for zz in lo..=hi {
                        acc += phantom.field[phantom.idx(zz, y, x)];
                    }
                    blurred[phantom.idx(z, y, x)] = acc / (hi - lo + 1) as f64;
                }
            }
        }
        phantom.field = blurred;
    }

    let normal = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    let mut data = Vec::with_capacity(e * e * e);
    for i in 0..e * e * e {
        if phantom.mask[i] == 0 {
            data.push(PAD_VALUE);
        } else {
            let noise = normal.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            let v = phantom.field[i] * spec.contrast_gain + spec.intensity_offset + noise;
            data.push(v.clamp(0.0, 255.0).round() as u8);
        }
    }
    let volume = Volume::new(
        [e, e, e],
        Voxels::Windowed(data),
        [1.0, 1.0, 1.0],
        [0.0, 0.0, 0.0],
    )?
    .with_mask(phantom.mask)?;

    let annotations = placed
        .iter()
        .map(|(c, r)| Annotation {
            series_id: series_id.to_string(),
            // voxel (z, y, x) to world (x, y, z); unit spacing, zero offset
            center_world_mm: [c[2], c[1], c[0]],
            diameter_mm: 2.0 * r,
        })
        .collect();
    Ok((volume, annotations))
}

/// Intensity histogram over in-mask voxels (whole volume when unmasked).
pub fn intensity_histogram(v: &Volume) -> Result<[u64; 256]> {
    let data = v.windowed()?;
    let mut hist = [0u64; 256];
    match &v.mask {
        Some(m) => {
            for (of, &b) in data.iter().enumerate() {
                if m[of] != 0 {
                    hist[b as usize] += 1;
                }
            }
        }
        None => {
            for &b in data {
                hist[b as usize] += 1;
            }
        }
    }
    Ok(hist)
}

/// Kolmogorov–Smirnov statistic between two intensity histograms.
pub fn ks_statistic(a: &[u64; 256], b: &[u64; 256]) -> f64 {
    let (ta, tb) = (a.iter().sum::<u64>(), b.iter().sum::<u64>());
    if ta == 0 || tb == 0 {
        return 0.0;
    }
    let mut ca = 0u64;
    let mut cb = 0u64;
    let mut worst = 0.0f64;
    for i in 0..256 {
        ca += a[i];
        cb += b[i];
        let fa = ca as f64 / ta as f64;
        let fb = cb as f64 / tb as f64;
        worst = worst.max((fa - fb).abs());
    }
    worst
}
