//! Lesion-center refinement and case-level train/validation splitting.
//!
//! Refinement runs on DWI: a relative-threshold region grow from the reported
//! position, a morphological close-then-open cleanup, and the centroid of the
//! surviving component. Every failure mode falls back to the original
//! position, so refinement can only adjust, never lose a finding.

use crate::volgrid::{Finding, Modality, Volume};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("seed point {0:?} is outside the volume")]
    SeedOutOfBounds([f64; 3]),
    #[error("region is empty: {0}")]
    EmptyRegion(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("finding {finding_id} of case {case_id} has no label")]
    UnlabeledFinding { case_id: String, finding_id: u32 },
    #[error("stratum {stratum:?} has only {count} case(s); need at least 2")]
    TooFewCases { stratum: &'static str, count: usize },
    #[error("malformed split plan: {0}")]
    MalformedPlan(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters of the region-growing step. The relative threshold and radius
/// cap are deliberate defaults, not derived quantities; both are configurable.
#[derive(Debug, Clone, Copy)]
pub struct RegionGrowParams {
    pub rel_threshold: f64,
    pub max_radius_mm: f64,
    pub morph_radius_vox: usize,
}

impl Default for RegionGrowParams {
    fn default() -> Self {
        RegionGrowParams { rel_threshold: 0.5, max_radius_mm: 15.0, morph_radius_vox: 1 }
    }
}

/// A connected set of voxels marking one lesion on the DWI grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionMask {
    volume_dims: [usize; 3],
    voxels: BTreeSet<usize>,
    seed_index: [usize; 3],
    source_modality: Modality,
}

impl LesionMask {
    pub fn volume_dims(&self) -> [usize; 3] {
        self.volume_dims
    }

    /// Linear voxel indices (x-fastest), in ascending order.
    pub fn voxels(&self) -> &BTreeSet<usize> {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn seed_index(&self) -> [usize; 3] {
        self.seed_index
    }

    pub fn source_modality(&self) -> Modality {
        self.source_modality
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels.contains(&self.linear(x, y, z))
    }

    fn linear(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.volume_dims[0] * (y + self.volume_dims[1] * z)
    }

    fn coords(&self, linear: usize) -> [usize; 3] {
        let [nx, ny, _] = self.volume_dims;
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    /// Construct from explicit voxel indices; test and fallback helper.
    pub fn from_voxels(
        volume_dims: [usize; 3],
        voxels: BTreeSet<usize>,
        seed_index: [usize; 3],
    ) -> LesionMask {
        LesionMask { volume_dims, voxels, seed_index, source_modality: Modality::Dwi }
    }
}

/// Flood-fill from the voxel containing `seed_world` over 26-neighbors,
/// admitting voxels whose intensity is at least `rel_threshold` times the seed
/// intensity and whose center lies within `max_radius_mm` of the seed voxel
/// center. A non-positive seed intensity cannot anchor a relative criterion
/// and reports an empty region.
pub fn region_grow(
    vol: &Volume,
    seed_world: [f64; 3],
    rel_threshold: f64,
    max_radius_mm: f64,
) -> Result<LesionMask, PreprocessError> {
    if !(rel_threshold > 0.0 && rel_threshold <= 1.0) {
        return Err(PreprocessError::InvalidParameter(format!(
            "rel_threshold must be in (0, 1], got {rel_threshold}"
        )));
    }
    if !(max_radius_mm > 0.0) {
        return Err(PreprocessError::InvalidParameter(format!(
            "max_radius_mm must be positive, got {max_radius_mm}"
        )));
    }
    let [nx, ny, nz] = vol.dims();
    let idx = vol.world_to_index(seed_world);
    let seed: [i64; 3] = [idx[0].round() as i64, idx[1].round() as i64, idx[2].round() as i64];
    if seed[0] < 0
        || seed[1] < 0
        || seed[2] < 0
        || seed[0] >= nx as i64
        || seed[1] >= ny as i64
        || seed[2] >= nz as i64
    {
        return Err(PreprocessError::SeedOutOfBounds(seed_world));
    }
    let seed = [seed[0] as usize, seed[1] as usize, seed[2] as usize];
    let seed_value = vol.at(seed[0], seed[1], seed[2]) as f64;
    if seed_value <= 0.0 {
        return Err(PreprocessError::EmptyRegion("seed voxel fails the intensity criterion"));
    }
    let threshold = rel_threshold * seed_value;
    let seed_center = vol.index_to_world([seed[0] as f64, seed[1] as f64, seed[2] as f64]);
    let max_r2 = max_radius_mm * max_radius_mm;

    let admit = |x: usize, y: usize, z: usize| -> bool {
        if (vol.at(x, y, z) as f64) < threshold {
            return false;
        }
        let p = vol.index_to_world([x as f64, y as f64, z as f64]);
        let d2 = (p[0] - seed_center[0]).powi(2)
            + (p[1] - seed_center[1]).powi(2)
            + (p[2] - seed_center[2]).powi(2);
        d2 <= max_r2
    };

    let mut voxels = BTreeSet::new();
    let mut visited = vec![false; nx * ny * nz];
    let mut queue = VecDeque::new();
    let start = seed[0] + nx * (seed[1] + ny * seed[2]);
    visited[start] = true;
    voxels.insert(start);
    queue.push_back(seed);
    while let Some([x, y, z]) = queue.pop_front() {
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let (px, py, pz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if px < 0 || py < 0 || pz < 0 {
                        continue;
                    }
                    let (px, py, pz) = (px as usize, py as usize, pz as usize);
                    if px >= nx || py >= ny || pz >= nz {
                        continue;
                    }
                    let lin = px + nx * (py + ny * pz);
                    if visited[lin] {
                        continue;
                    }
                    visited[lin] = true;
                    if admit(px, py, pz) {
                        voxels.insert(lin);
                        queue.push_back([px, py, pz]);
                    }
                }
            }
        }
    }
    Ok(LesionMask { volume_dims: [nx, ny, nz], voxels, seed_index: seed, source_modality: Modality::Dwi })
}

/// Binary closing then opening with a cubic structuring element of the given
/// radius, keeping the connected component containing (or nearest to) the
/// seed. Voxels outside the volume never disqualify an erosion, so solid
/// regions touching the volume border survive intact.
pub fn morph_close_open(mask: &LesionMask, radius_vox: usize) -> Result<LesionMask, PreprocessError> {
    if mask.voxels.is_empty() {
        return Err(PreprocessError::EmptyRegion("input mask is empty"));
    }
    let dims = mask.volume_dims;
    let closed = erode(&dilate(&mask.voxels, dims, radius_vox), dims, radius_vox);
    let opened = dilate(&erode(&closed, dims, radius_vox), dims, radius_vox);
    if opened.is_empty() {
        return Err(PreprocessError::EmptyRegion("opening removed every voxel"));
    }
    let component = component_near_seed(&opened, dims, mask.seed_index);
    Ok(LesionMask {
        volume_dims: dims,
        voxels: component,
        seed_index: mask.seed_index,
        source_modality: mask.source_modality,
    })
}

fn dilate(set: &BTreeSet<usize>, dims: [usize; 3], r: usize) -> BTreeSet<usize> {
    let [nx, ny, nz] = dims;
    let r = r as i64;
    let mut out = BTreeSet::new();
    for &lin in set {
        let x = (lin % nx) as i64;
        let y = ((lin / nx) % ny) as i64;
        let z = (lin / (nx * ny)) as i64;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (px, py, pz) = (x + dx, y + dy, z + dz);
                    if px < 0 || py < 0 || pz < 0 {
                        continue;
                    }
                    let (px, py, pz) = (px as usize, py as usize, pz as usize);
                    if px >= nx || py >= ny || pz >= nz {
                        continue;
                    }
                    out.insert(px + nx * (py + ny * pz));
                }
            }
        }
    }
    out
}

fn erode(set: &BTreeSet<usize>, dims: [usize; 3], r: usize) -> BTreeSet<usize> {
    let [nx, ny, nz] = dims;
    let r = r as i64;
    let mut out = BTreeSet::new();
    'voxel: for &lin in set {
        let x = (lin % nx) as i64;
        let y = ((lin / nx) % ny) as i64;
        let z = (lin / (nx * ny)) as i64;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (px, py, pz) = (x + dx, y + dy, z + dz);
                    if px < 0 || py < 0 || pz < 0 {
                        continue;
                    }
                    let (px, py, pz) = (px as usize, py as usize, pz as usize);
                    if px >= nx || py >= ny || pz >= nz {
                        continue;
                    }
                    if !set.contains(&(px + nx * (py + ny * pz))) {
                        continue 'voxel;
                    }
                }
            }
        }
        out.insert(lin);
    }
    out
}

/// 26-connected component containing the seed, or the one nearest to it by
/// squared index distance (ties broken toward the component holding the
/// smallest linear index).
fn component_near_seed(
    set: &BTreeSet<usize>,
    dims: [usize; 3],
    seed: [usize; 3],
) -> BTreeSet<usize> {
    let [nx, ny, _] = dims;
    let mut remaining = set.clone();
    let mut best: Option<(u64, usize, BTreeSet<usize>)> = None;
    while let Some(&start) = remaining.iter().next() {
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::new();
        remaining.remove(&start);
        comp.insert(start);
        queue.push_back(start);
        while let Some(lin) = queue.pop_front() {
            let x = (lin % nx) as i64;
            let y = ((lin / nx) % ny) as i64;
            let z = (lin / (nx * ny)) as i64;
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (px, py, pz) = (x + dx, y + dy, z + dz);
                        if px < 0 || py < 0 || pz < 0 {
                            continue;
                        }
                        let cand = px as usize + nx * (py as usize + ny * pz as usize);
                        if remaining.remove(&cand) {
                            comp.insert(cand);
                            queue.push_back(cand);
                        }
                    }
                }
            }
        }
        let dist2 = comp
            .iter()
            .map(|&lin| {
                let x = (lin % nx) as i64 - seed[0] as i64;
                let y = ((lin / nx) % ny) as i64 - seed[1] as i64;
                let z = (lin / (nx * ny)) as i64 - seed[2] as i64;
                (x * x + y * y + z * z) as u64
            })
            .min()
            .unwrap();
        let anchor = *comp.iter().next().unwrap();
        if dist2 == 0 {
            return comp;
        }
        match &best {
            Some((d, a, _)) if (*d, *a) <= (dist2, anchor) => {}
            _ => best = Some((dist2, anchor, comp)),
        }
    }
    best.expect("non-empty input set").2
}

/// Unweighted mean of the mask voxels' world centers.
pub fn mask_centroid(mask: &LesionMask, vol: &Volume) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    for &lin in &mask.voxels {
        let [x, y, z] = mask.coords(lin);
        let p = vol.index_to_world([x as f64, y as f64, z as f64]);
        acc[0] += p[0];
        acc[1] += p[1];
        acc[2] += p[2];
    }
    let n = mask.voxels.len() as f64;
    [acc[0] / n, acc[1] / n, acc[2] / n]
}

/// Refined lesion center: centroid of the cleaned region grown around the
/// reported position. Any failure (seed outside, empty region, opening kills
/// everything) returns the original position unchanged.
pub fn refine_lesion_center(dwi: &Volume, finding: &Finding) -> [f64; 3] {
    refine_lesion_center_with(dwi, finding, RegionGrowParams::default())
}

pub fn refine_lesion_center_with(
    dwi: &Volume,
    finding: &Finding,
    params: RegionGrowParams,
) -> [f64; 3] {
    let grown = match region_grow(dwi, finding.pos_world, params.rel_threshold, params.max_radius_mm)
    {
        Ok(m) => m,
        Err(_) => return finding.pos_world,
    };
    match morph_close_open(&grown, params.morph_radius_vox) {
        Ok(m) => mask_centroid(&m, dwi),
        Err(_) => finding.pos_world,
    }
}

/// Region-grow followed by the morphological cleanup, as one result.
pub fn lesion_mask(
    dwi: &Volume,
    seed_world: [f64; 3],
    params: RegionGrowParams,
) -> Result<LesionMask, PreprocessError> {
    let grown = region_grow(dwi, seed_world, params.rel_threshold, params.max_radius_mm)?;
    morph_close_open(&grown, params.morph_radius_vox)
}

/// Case-level train/validation assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_case_ids: Vec<String>,
    pub val_case_ids: Vec<String>,
}

impl SplitPlan {
    pub fn is_train(&self, case_id: &str) -> bool {
        self.train_case_ids.iter().any(|c| c == case_id)
    }

    pub fn is_val(&self, case_id: &str) -> bool {
        self.val_case_ids.iter().any(|c| c == case_id)
    }
}

/// Split cases into train and validation sets, stratified by whether a case
/// carries at least one significant finding. All findings of a case stay on
/// one side. Within each stratum the cases are ordered by id, shuffled by the
/// seed, and the first round(val_fraction * n) go to validation.
pub fn stratified_split(
    findings: &[Finding],
    val_fraction: f64,
    seed: u64,
) -> Result<SplitPlan, PreprocessError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(PreprocessError::InvalidParameter(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    if findings.is_empty() {
        return Err(PreprocessError::InvalidParameter("no findings to split".into()));
    }
    let mut case_has_sig: BTreeMap<&str, bool> = BTreeMap::new();
    for f in findings {
        let label = f.label.ok_or_else(|| PreprocessError::UnlabeledFinding {
            case_id: f.case_id.clone(),
            finding_id: f.finding_id,
        })?;
        let entry = case_has_sig.entry(&f.case_id).or_insert(false);
        *entry |= label == 1;
    }
    // BTreeMap iteration gives case_id order; partition into the two strata
    // so the overall ordering is (has-significant-finding, case_id).
    let mut strata: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (case, &has_sig) in &case_has_sig {
        strata[has_sig as usize].push(case);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (stratum, name) in strata.iter_mut().zip(["without significant finding", "with significant finding"]) {
        if stratum.len() < 2 {
            return Err(PreprocessError::TooFewCases { stratum: name, count: stratum.len() });
        }
        stratum.shuffle(&mut rng);
        let n_val = ((stratum.len() as f64) * val_fraction).round() as usize;
        let n_val = n_val.min(stratum.len());
        for (i, case) in stratum.iter().enumerate() {
            if i < n_val {
                val.push(case.to_string());
            } else {
                train.push(case.to_string());
            }
        }
    }
    train.sort();
    val.sort();
    Ok(SplitPlan { seed, train_case_ids: train, val_case_ids: val })
}

pub fn write_split_plan(plan: &SplitPlan, path: &Path) -> Result<(), PreprocessError> {
    let json = serde_json::to_string_pretty(plan)
        .map_err(|e| PreprocessError::MalformedPlan(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_split_plan(path: &Path) -> Result<SplitPlan, PreprocessError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| PreprocessError::MalformedPlan(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn volume_from_fn<F: Fn(usize, usize, usize) -> f32>(dims: [usize; 3], f: F) -> Volume {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::axis_aligned(dims, [1.0; 3], [0.0; 3], data).unwrap()
    }

    fn sphere_volume(dims: [usize; 3], center: [f64; 3], radius: f64) -> Volume {
        volume_from_fn(dims, |x, y, z| {
            let d2 = (x as f64 - center[0]).powi(2)
                + (y as f64 - center[1]).powi(2)
                + (z as f64 - center[2]).powi(2);
            if d2 <= radius * radius {
                100.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn region_grow_recovers_bright_sphere_exactly() {
        let center = [10.0, 10.0, 10.0];
        let vol = sphere_volume([21, 21, 21], center, 5.0);
        let mask = region_grow(&vol, center, 0.5, 15.0).unwrap();
        let mut expected = BTreeSet::new();
        for z in 0..21 {
            for y in 0..21 {
                for x in 0..21 {
                    if vol.at(x, y, z) > 0.0 {
                        expected.insert(vol.linear_index(x, y, z));
                    }
                }
            }
        }
        assert_eq!(mask.voxels(), &expected);
    }

    #[test]
    fn zero_valued_seed_is_empty_region() {
        let vol = volume_from_fn([5, 5, 5], |_, _, _| 0.0);
        assert!(matches!(
            region_grow(&vol, [2.0, 2.0, 2.0], 0.5, 15.0),
            Err(PreprocessError::EmptyRegion(_))
        ));
    }

    #[test]
    fn seed_outside_volume_is_rejected() {
        let vol = volume_from_fn([5, 5, 5], |_, _, _| 1.0);
        assert!(matches!(
            region_grow(&vol, [40.0, 2.0, 2.0], 0.5, 15.0),
            Err(PreprocessError::SeedOutOfBounds(_))
        ));
    }

    /// Independent flood-fill oracle: iterate to a fixed point over the full
    /// grid instead of BFS, with its own inclusion test.
    fn flood_oracle(vol: &Volume, seed: [usize; 3], rel: f64, radius: f64) -> BTreeSet<usize> {
        let [nx, ny, nz] = vol.dims();
        let seed_val = vol.at(seed[0], seed[1], seed[2]) as f64;
        let seed_w = vol.index_to_world([seed[0] as f64, seed[1] as f64, seed[2] as f64]);
        let ok = |x: usize, y: usize, z: usize| {
            let w = vol.index_to_world([x as f64, y as f64, z as f64]);
            let d = ((w[0] - seed_w[0]).powi(2) + (w[1] - seed_w[1]).powi(2) + (w[2] - seed_w[2]).powi(2))
                .sqrt();
            vol.at(x, y, z) as f64 >= rel * seed_val && d <= radius
        };
        let mut member = vec![false; nx * ny * nz];
        member[seed[0] + nx * (seed[1] + ny * seed[2])] = true;
        loop {
            let mut changed = false;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if member[x + nx * (y + ny * z)] || !ok(x, y, z) {
                            continue;
                        }
                        // Any already-accepted 26-neighbor pulls this voxel in.
                        let mut touches = false;
                        for dz in -1i64..=1 {
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let (px, py, pz) =
                                        (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                    if px < 0 || py < 0 || pz < 0 {
                                        continue;
                                    }
                                    let (px, py, pz) = (px as usize, py as usize, pz as usize);
                                    if px >= nx || py >= ny || pz >= nz {
                                        continue;
                                    }
                                    touches |= member[px + nx * (py + ny * pz)];
                                }
                            }
                        }
                        if touches {
                            member[x + nx * (y + ny * z)] = true;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        member
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    #[test]
    fn region_grow_matches_flood_fill_oracle_on_l_shape() {
        // An L of bright voxels in the z=2 plane plus a detached bright voxel
        // that must not be reached.
        let vol = volume_from_fn([5, 5, 5], |x, y, z| {
            let in_l = z == 2 && ((y == 1 && (1..=3).contains(&x)) || (x == 1 && (1..=3).contains(&y)));
            let detached = (x, y, z) == (4, 4, 4);
            if in_l || detached {
                80.0
            } else {
                0.0
            }
        });
        let mask = region_grow(&vol, [1.0, 1.0, 2.0], 0.5, 15.0).unwrap();
        let oracle = flood_oracle(&vol, [1, 1, 2], 0.5, 15.0);
        assert_eq!(mask.voxels(), &oracle);
        assert!(!mask.contains(4, 4, 4));
    }

    #[test]
    fn region_grow_invariant_under_positive_rescaling() {
        let vol = sphere_volume([15, 15, 15], [7.0, 7.0, 7.0], 4.0);
        let scaled = Volume::axis_aligned(
            vol.dims(),
            vol.spacing(),
            vol.origin(),
            vol.data().iter().map(|&v| v * 3.7).collect(),
        )
        .unwrap();
        let a = region_grow(&vol, [7.0, 7.0, 7.0], 0.5, 15.0).unwrap();
        let b = region_grow(&scaled, [7.0, 7.0, 7.0], 0.5, 15.0).unwrap();
        assert_eq!(a.voxels(), b.voxels());
    }

    #[test]
    fn region_grow_respects_radius_cap() {
        // A bright rod along x; the cap must cut it at 3 mm from the seed.
        let vol = volume_from_fn([21, 5, 5], |_, y, z| if y == 2 && z == 2 { 50.0 } else { 0.0 });
        let mask = region_grow(&vol, [10.0, 2.0, 2.0], 0.5, 3.0).unwrap();
        for x in 0..21usize {
            let want = x.abs_diff(10) <= 3;
            assert_eq!(mask.contains(x, 2, 2), want, "x={x}");
        }
    }

    fn cube_mask(dims: [usize; 3], lo: usize, hi: usize, seed: [usize; 3]) -> LesionMask {
        let mut voxels = BTreeSet::new();
        for z in lo..=hi {
            for y in lo..=hi {
                for x in lo..=hi {
                    voxels.insert(x + dims[0] * (y + dims[1] * z));
                }
            }
        }
        LesionMask::from_voxels(dims, voxels, seed)
    }

    #[test]
    fn solid_cube_is_unchanged_by_close_open() {
        let mask = cube_mask([11, 11, 11], 3, 7, [5, 5, 5]);
        let out = morph_close_open(&mask, 1).unwrap();
        assert_eq!(out.voxels(), mask.voxels());
    }

    #[test]
    fn cube_filling_whole_volume_is_unchanged() {
        // Pins the border convention: out-of-volume never disqualifies erosion.
        let mask = cube_mask([5, 5, 5], 0, 4, [2, 2, 2]);
        let out = morph_close_open(&mask, 1).unwrap();
        assert_eq!(out.voxels(), mask.voxels());
    }

    /// Set-algebra oracle for closing: dilate then erode, written over dense
    /// bit grids with the same border convention.
    fn close_oracle(mask: &LesionMask, r: i64) -> BTreeSet<usize> {
        let [nx, ny, nz] = mask.volume_dims();
        let dense = |set: &BTreeSet<usize>| {
            let mut g = vec![false; nx * ny * nz];
            for &i in set {
                g[i] = true;
            }
            g
        };
        let g = dense(mask.voxels());
        let mut dil = vec![false; nx * ny * nz];
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    let mut hit = false;
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (px, py, pz) = (x + dx, y + dy, z + dz);
                                if px >= 0
                                    && py >= 0
                                    && pz >= 0
                                    && px < nx as i64
                                    && py < ny as i64
                                    && pz < nz as i64
                                {
                                    hit |= g[px as usize + nx * (py as usize + ny * pz as usize)];
                                }
                            }
                        }
                    }
                    dil[x as usize + nx * (y as usize + ny * z as usize)] = hit;
                }
            }
        }
        let mut ero = BTreeSet::new();
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    let mut all = true;
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (px, py, pz) = (x + dx, y + dy, z + dz);
                                if px >= 0
                                    && py >= 0
                                    && pz >= 0
                                    && px < nx as i64
                                    && py < ny as i64
                                    && pz < nz as i64
                                {
                                    all &= dil[px as usize + nx * (py as usize + ny * pz as usize)];
                                }
                            }
                        }
                    }
                    if all && dil[x as usize + nx * (y as usize + ny * z as usize)] {
                        ero.insert(x as usize + nx * (y as usize + ny * z as usize));
                    }
                }
            }
        }
        ero
    }

    #[test]
    fn closing_fills_interior_hole() {
        let dims = [11, 11, 11];
        let full = cube_mask(dims, 3, 7, [5, 5, 5]);
        let mut voxels = full.voxels().clone();
        voxels.remove(&(5 + 11 * (5 + 11 * 5)));
        let holed = LesionMask::from_voxels(dims, voxels, [4, 5, 5]);
        let out = morph_close_open(&holed, 1).unwrap();
        assert!(out.contains(5, 5, 5), "closing must fill the hole");
        assert_eq!(out.voxels(), full.voxels());
        // And the closing half alone matches the dilate-then-erode oracle.
        assert_eq!(
            erode(&dilate(holed.voxels(), dims, 1), dims, 1),
            close_oracle(&holed, 1)
        );
    }

    #[test]
    fn isolated_voxel_is_removed_by_opening() {
        let dims = [7, 7, 7];
        let mut voxels = BTreeSet::new();
        voxels.insert(3 + 7 * (3 + 7 * 3));
        let mask = LesionMask::from_voxels(dims, voxels, [3, 3, 3]);
        assert!(matches!(morph_close_open(&mask, 1), Err(PreprocessError::EmptyRegion(_))));
    }

    #[test]
    fn close_open_keeps_component_at_seed() {
        // Two solid cubes; only the one holding the seed survives.
        let dims = [20, 9, 9];
        let mut voxels = BTreeSet::new();
        for z in 2..=6 {
            for y in 2..=6 {
                for x in 2..=6 {
                    voxels.insert(x + 20 * (y + 9 * z));
                }
                for x in 12..=16 {
                    voxels.insert(x + 20 * (y + 9 * z));
                }
            }
        }
        let mask = LesionMask::from_voxels(dims, voxels, [4, 4, 4]);
        let out = morph_close_open(&mask, 1).unwrap();
        assert!(out.contains(4, 4, 4));
        assert!(!out.contains(14, 4, 4));
        assert_eq!(out.len(), 125);
    }

    #[test]
    fn refine_center_finds_sphere_center_from_offset_seed() {
        let center = [10.0, 10.0, 10.0];
        let vol = sphere_volume([21, 21, 21], center, 5.0);
        let finding = Finding {
            case_id: "c".into(),
            finding_id: 1,
            pos_world: [12.0, 10.0, 10.0],
            label: Some(1),
        };
        let refined = refine_lesion_center(&vol, &finding);
        for (got, want) in refined.iter().zip(center.iter()) {
            assert!((got - want).abs() <= 0.5, "refined {refined:?} vs center {center:?}");
        }
        // The centroid must also match direct enumeration of sphere voxels.
        let mask = lesion_mask(&vol, finding.pos_world, RegionGrowParams::default()).unwrap();
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for z in 0..21 {
            for y in 0..21 {
                for x in 0..21 {
                    if vol.at(x, y, z) > 0.0 {
                        acc[0] += x as f64;
                        acc[1] += y as f64;
                        acc[2] += z as f64;
                        n += 1.0;
                    }
                }
            }
        }
        let direct = [acc[0] / n, acc[1] / n, acc[2] / n];
        let centroid = mask_centroid(&mask, &vol);
        for (a, b) in centroid.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 0.6, "centroid {centroid:?} vs sphere enumeration {direct:?}");
        }
    }

    #[test]
    fn refine_center_on_all_zero_volume_returns_original() {
        let vol = volume_from_fn([9, 9, 9], |_, _, _| 0.0);
        let finding = Finding {
            case_id: "c".into(),
            finding_id: 1,
            pos_world: [4.2, 4.8, 4.0],
            label: Some(0),
        };
        assert_eq!(refine_lesion_center(&vol, &finding), [4.2, 4.8, 4.0]);
    }

    #[test]
    fn refine_center_is_idempotent_on_symmetric_blob() {
        let center = [8.0, 8.0, 8.0];
        let vol = sphere_volume([17, 17, 17], center, 4.0);
        let first = refine_lesion_center(
            &vol,
            &Finding { case_id: "c".into(), finding_id: 1, pos_world: [9.5, 8.0, 8.0], label: Some(1) },
        );
        let second = refine_lesion_center(
            &vol,
            &Finding { case_id: "c".into(), finding_id: 1, pos_world: first, label: Some(1) },
        );
        let moved = first
            .iter()
            .zip(second.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(moved < 0.5, "second refinement moved {moved} mm");
    }

    fn one_finding_per_case(n_pos_cases: usize, n_neg_cases: usize) -> Vec<Finding> {
        let mut findings = Vec::new();
        for i in 0..n_pos_cases + n_neg_cases {
            findings.push(Finding {
                case_id: format!("case_{i:03}"),
                finding_id: 1,
                pos_world: [0.0; 3],
                label: Some(u8::from(i < n_pos_cases)),
            });
        }
        findings
    }

    #[test]
    fn split_199_cases_gives_169_train_30_val() {
        let findings = one_finding_per_case(90, 109);
        let plan = stratified_split(&findings, 30.0 / 199.0, 7).unwrap();
        assert_eq!(plan.train_case_ids.len(), 169);
        assert_eq!(plan.val_case_ids.len(), 30);
    }

    #[test]
    fn split_10_cases_puts_one_of_each_stratum_in_val() {
        let findings = one_finding_per_case(5, 5);
        let plan = stratified_split(&findings, 0.2, 3).unwrap();
        assert_eq!(plan.val_case_ids.len(), 2);
        let n_pos_val = plan
            .val_case_ids
            .iter()
            .filter(|c| findings.iter().any(|f| &f.case_id == *c && f.label == Some(1)))
            .count();
        assert_eq!(n_pos_val, 1);
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let findings = one_finding_per_case(20, 30);
        let a = stratified_split(&findings, 0.3, 99).unwrap();
        let b = stratified_split(&findings, 0.3, 99).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&findings, 0.3, 100).unwrap();
        assert!(a != c, "different seeds should give a different shuffle here");
    }

    #[test]
    fn split_rejects_tiny_stratum_and_unlabeled() {
        let findings = one_finding_per_case(1, 5);
        assert!(matches!(
            stratified_split(&findings, 0.3, 1),
            Err(PreprocessError::TooFewCases { .. })
        ));
        let unlabeled = vec![Finding {
            case_id: "c".into(),
            finding_id: 1,
            pos_world: [0.0; 3],
            label: None,
        }];
        assert!(matches!(
            stratified_split(&unlabeled, 0.3, 1),
            Err(PreprocessError::UnlabeledFinding { .. })
        ));
    }

    #[test]
    fn split_ratio_stays_near_global_on_balanced_strata() {
        let findings = one_finding_per_case(20, 20);
        let plan = stratified_split(&findings, 0.3, 11).unwrap();
        let ratio_of = |ids: &[String]| {
            let pos = ids
                .iter()
                .filter(|c| findings.iter().any(|f| &f.case_id == *c && f.label == Some(1)))
                .count() as f64;
            pos / ids.len() as f64
        };
        assert!((ratio_of(&plan.train_case_ids) - 0.5).abs() <= 0.10);
        assert!((ratio_of(&plan.val_case_ids) - 0.5).abs() <= 0.10);
    }

    #[test]
    fn split_plan_round_trips_as_json() {
        let findings = one_finding_per_case(6, 6);
        let plan = stratified_split(&findings, 0.25, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        write_split_plan(&plan, &path).unwrap();
        assert_eq!(read_split_plan(&path).unwrap(), plan);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn split_is_disjoint_and_covering(
            n_pos in 2usize..25,
            n_neg in 2usize..25,
            frac in 0.1f64..0.9,
            seed in 0u64..1000,
        ) {
            let findings = one_finding_per_case(n_pos, n_neg);
            let plan = stratified_split(&findings, frac, seed).unwrap();
            let train: BTreeSet<_> = plan.train_case_ids.iter().collect();
            let val: BTreeSet<_> = plan.val_case_ids.iter().collect();
            prop_assert!(train.is_disjoint(&val));
            prop_assert_eq!(train.len() + val.len(), n_pos + n_neg);
            // Per-stratum validation counts follow round-to-nearest exactly.
            let pos_val = plan.val_case_ids.iter()
                .filter(|c| findings.iter().any(|f| &f.case_id == *c && f.label == Some(1)))
                .count();
            let neg_val = plan.val_case_ids.len() - pos_val;
            prop_assert_eq!(pos_val, ((n_pos as f64) * frac).round() as usize);
            prop_assert_eq!(neg_val, ((n_neg as f64) * frac).round() as usize);
        }

        #[test]
        fn region_grow_mask_indices_in_bounds(
            r in 1.0f64..4.0,
        ) {
            let vol = sphere_volume([13, 13, 13], [6.0, 6.0, 6.0], r);
            let mask = region_grow(&vol, [6.0, 6.0, 6.0], 0.5, 20.0).unwrap();
            for &lin in mask.voxels() {
                prop_assert!(lin < 13 * 13 * 13);
            }
        }
    }
}
