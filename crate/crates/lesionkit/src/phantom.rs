//! Synthetic multi-parametric case generator. Each case carries four
//! modality volumes with smooth anatomy, Gaussian-blob lesions, and
//! per-voxel noise; significant lesions get a stronger contrast shift and
//! rougher internal texture, both scaled by a configurable gap.

use crate::volgrid::{CaseBundle, Finding, Modality, Volume, VolumeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Parameters of the synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub n_cases: usize,
    pub min_lesions_per_case: usize,
    pub max_lesions_per_case: usize,
    /// Fraction of all findings labeled significant (exact up to rounding).
    pub significant_fraction: f64,
    /// Scales both the contrast shift and the texture roughening that
    /// separate significant from insignificant lesions. Zero removes every
    /// label-dependent effect.
    pub contrast_gap: f64,
    pub noise_sigma: f64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_cases: 40,
            min_lesions_per_case: 1,
            max_lesions_per_case: 3,
            significant_fraction: 0.5,
            contrast_gap: 1.0,
            noise_sigma: 2.0,
            dims: [40, 40, 28],
            spacing: [1.5, 1.5, 2.0],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.n_cases == 0 {
            return Err(PhantomError::InvalidSpec("n_cases must be at least 1".into()));
        }
        if self.min_lesions_per_case == 0 || self.min_lesions_per_case > self.max_lesions_per_case
        {
            return Err(PhantomError::InvalidSpec(format!(
                "lesion count range {}..={} is invalid",
                self.min_lesions_per_case, self.max_lesions_per_case
            )));
        }
        if !(0.0..=1.0).contains(&self.significant_fraction) {
            return Err(PhantomError::InvalidSpec(format!(
                "significant_fraction must be in [0, 1], got {}",
                self.significant_fraction
            )));
        }
        if !(self.contrast_gap >= 0.0 && self.contrast_gap.is_finite()) {
            return Err(PhantomError::InvalidSpec(format!(
                "contrast_gap must be non-negative, got {}",
                self.contrast_gap
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PhantomError::InvalidSpec(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(PhantomError::InvalidSpec(format!(
                "dims must be at least 8 per axis, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(PhantomError::InvalidSpec(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }
}

/// Stable child seed for a named stream under a master seed.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

const BACKGROUND: [f64; 4] = [20.0, 140.0, 30.0, 120.0];
const NOISE_SCALE: [f64; 4] = [1.0, 1.5, 0.8, 1.2];
const ORGAN_GAIN: [f64; 4] = [4.0, 10.0, 3.0, 15.0];
const LESION_SEPARATION_MM: f64 = 12.0;
const ANNOTATION_JITTER_MM: f64 = 1.5;

/// A dense scalar field over the volume, zero outside the blob's support.
struct BlobField {
    values: Vec<f64>,
}

fn world_of(spacing: [f64; 3], x: usize, y: usize, z: usize) -> [f64; 3] {
    [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]
}

fn gaussian_field(
    dims: [usize; 3],
    spacing: [f64; 3],
    center: [f64; 3],
    sigma_mm: f64,
) -> BlobField {
    let n = dims[0] * dims[1] * dims[2];
    let mut values = vec![0.0f64; n];
    let reach = 3.0 * sigma_mm;
    let lo = |i: usize| (((center[i] - reach) / spacing[i]).floor().max(0.0)) as usize;
    let hi = |i: usize| ((((center[i] + reach) / spacing[i]).ceil()) as usize).min(dims[i] - 1);
    let inv = 1.0 / (2.0 * sigma_mm * sigma_mm);
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                let p = world_of(spacing, x, y, z);
                let d2 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum::<f64>();
                values[x + dims[0] * (y + dims[1] * z)] = (-d2 * inv).exp();
            }
        }
    }
    BlobField { values }
}

/// Uniform noise on the blob's support, used to roughen lesion texture.
fn roughness_field(
    dims: [usize; 3],
    spacing: [f64; 3],
    center: [f64; 3],
    sigma_mm: f64,
    rng: &mut ChaCha8Rng,
) -> BlobField {
    let n = dims[0] * dims[1] * dims[2];
    let mut values = vec![0.0f64; n];
    let reach = 3.0 * sigma_mm;
    let lo = |i: usize| (((center[i] - reach) / spacing[i]).floor().max(0.0)) as usize;
    let hi = |i: usize| ((((center[i] + reach) / spacing[i]).ceil()) as usize).min(dims[i] - 1);
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                values[x + dims[0] * (y + dims[1] * z)] = rng.gen_range(-1.0..1.0);
            }
        }
    }
    BlobField { values }
}

struct LesionPlan {
    true_center: [f64; 3],
    reported_center: [f64; 3],
    label: u8,
    blob: BlobField,
    roughness: BlobField,
}

struct OrganPlan {
    amplitude: f64,
    blob: BlobField,
}

fn lesion_gain(modality_index: usize, label: u8, gap: f64) -> (f64, f64) {
    let l = label as f64;
    match modality_index {
        0 => (160.0, 0.0),
        1 => (-(25.0 + l * gap * 35.0), l * gap * 12.0),
        2 => (15.0 + l * gap * 25.0, l * gap * 8.0),
        3 => (8.0, 0.0),
        _ => unreachable!(),
    }
}

/// Generate the full cohort deterministically under the spec seed. Case ids
/// are `case000`.. in order; finding ids are 1-based within each case. Every
/// bundle carries all four modality volumes on the same grid, and its
/// findings hold the jittered annotation positions plus labels.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<CaseBundle>, PhantomError> {
    spec.validate()?;
    let dims = spec.dims;
    let spacing = spec.spacing;
    let extent = [
        (dims[0] - 1) as f64 * spacing[0],
        (dims[1] - 1) as f64 * spacing[1],
        (dims[2] - 1) as f64 * spacing[2],
    ];
    let margin: Vec<f64> = (0..3).map(|i| (0.35 * extent[i]).min(18.0)).collect();

    let mut plan_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "plan"));
    let lesion_counts: Vec<usize> = (0..spec.n_cases)
        .map(|_| plan_rng.gen_range(spec.min_lesions_per_case..=spec.max_lesions_per_case))
        .collect();
    let total: usize = lesion_counts.iter().sum();
    let n_significant = (spec.significant_fraction * total as f64).round() as usize;
    let mut slots: Vec<usize> = (0..total).collect();
    let mut label_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "labels"));
    use rand::seq::SliceRandom;
    slots.shuffle(&mut label_rng);
    let mut labels = vec![0u8; total];
    for &slot in slots.iter().take(n_significant) {
        labels[slot] = 1;
    }

    let mut bundles = Vec::with_capacity(spec.n_cases);
    let mut slot = 0usize;
    for case_index in 0..spec.n_cases {
        let case_id = format!("case{case_index:03}");
        let mut geom_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("geom/{case_id}")));

        let organs: Vec<OrganPlan> = (0..3)
            .map(|_| {
                let center = [
                    geom_rng.gen_range(0.0..extent[0]),
                    geom_rng.gen_range(0.0..extent[1]),
                    geom_rng.gen_range(0.0..extent[2]),
                ];
                let sigma = geom_rng.gen_range(10.0..18.0);
                let amplitude = geom_rng.gen_range(-1.0..1.0);
                OrganPlan { amplitude, blob: gaussian_field(dims, spacing, center, sigma) }
            })
            .collect();

        let mut lesions: Vec<LesionPlan> = Vec::new();
        for _ in 0..lesion_counts[case_index] {
            let mut center = [0.0f64; 3];
            for attempt in 0..60 {
                for i in 0..3 {
                    center[i] = geom_rng.gen_range(margin[i]..extent[i] - margin[i]);
                }
                let clear = lesions.iter().all(|l| {
                    let d2: f64 =
                        (0..3).map(|i| (l.true_center[i] - center[i]).powi(2)).sum();
                    d2 >= LESION_SEPARATION_MM * LESION_SEPARATION_MM
                });
                if clear || attempt == 59 {
                    break;
                }
            }
            let sigma_mm = geom_rng.gen_range(2.5..4.0);
            let mut reported = center;
            for r in &mut reported {
                *r += geom_rng.gen_range(-ANNOTATION_JITTER_MM..ANNOTATION_JITTER_MM);
            }
            let label = labels[slot];
            slot += 1;
            let blob = gaussian_field(dims, spacing, center, sigma_mm);
            let roughness = roughness_field(dims, spacing, center, sigma_mm, &mut geom_rng);
            lesions.push(LesionPlan {
                true_center: center,
                reported_center: reported,
                label,
                blob,
                roughness,
            });
        }

        let n = dims[0] * dims[1] * dims[2];
        let mut channels = BTreeMap::new();
        for (mi, modality) in Modality::ALL.into_iter().enumerate() {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                spec.seed,
                &format!("noise/{case_id}/{}", modality.stem()),
            ));
            let sigma = spec.noise_sigma * NOISE_SCALE[mi];
            let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE))
                .expect("validated sigma");
            let mut data = vec![0.0f32; n];
            for (i, out) in data.iter_mut().enumerate() {
                let mut v = BACKGROUND[mi];
                for organ in &organs {
                    v += organ.amplitude * ORGAN_GAIN[mi] * organ.blob.values[i];
                }
                for lesion in &lesions {
                    let g = lesion.blob.values[i];
                    if g > 0.0 {
                        let (mean_gain, rough_gain) =
                            lesion_gain(mi, lesion.label, spec.contrast_gap);
                        v += mean_gain * g + rough_gain * g * lesion.roughness.values[i];
                    }
                }
                if spec.noise_sigma > 0.0 {
                    v += normal.sample(&mut noise_rng);
                }
                *out = v as f32;
            }
            channels.insert(
                modality,
                Volume::axis_aligned(dims, spacing, [0.0, 0.0, 0.0], data)?,
            );
        }

        let findings: Vec<Finding> = lesions
            .iter()
            .enumerate()
            .map(|(j, l)| Finding {
                case_id: case_id.clone(),
                finding_id: j as u32 + 1,
                pos_world: l.reported_center,
                label: Some(l.label),
            })
            .collect();
        bundles.push(CaseBundle { case_id, channels, findings });
    }
    Ok(bundles)
}

/// Every finding of every bundle, flattened in case order.
pub fn all_findings(bundles: &[CaseBundle]) -> Vec<Finding> {
    bundles.iter().flat_map(|b| b.findings.iter().cloned()).collect()
}
