//! Multi-view slicing augmentation.
//!
//! Each training sample is a 32x32 oblique slice through a lesion center,
//! taken at one of 7 slicing orientations, rotated in plane, sheared, and
//! translated by up to one pixel, with three modality channels stacked. The
//! default grids multiply out to 756 views per finding.

use crate::volgrid::{CaseBundle, Finding, Modality, Volume};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SLICE_SIZE: usize = 32;
pub const N_ORIENTATIONS: usize = 7;
/// Scalars per sample: 3 channels x 32 x 32.
pub const SAMPLE_LEN: usize = 3 * SLICE_SIZE * SLICE_SIZE;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("case {case_id} is missing modality {modality}")]
    MissingModality { case_id: String, modality: Modality },
    #[error("finding references unknown case {0}")]
    MissingCase(String),
    #[error("sample archive is malformed: {0}")]
    MalformedArchive(String),
    #[error("while extracting case {case_id} finding {finding_id}: {source}")]
    Provenance {
        case_id: String,
        finding_id: u32,
        #[source]
        source: Box<AugmentError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which three modalities fill channels 0, 1, 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelSet {
    Dak,
    Dat,
    Akt,
    Dkt,
}

impl ChannelSet {
    pub const ALL: [ChannelSet; 4] = [ChannelSet::Dak, ChannelSet::Dat, ChannelSet::Akt, ChannelSet::Dkt];

    pub fn code(self) -> &'static str {
        match self {
            ChannelSet::Dak => "DAK",
            ChannelSet::Dat => "DAT",
            ChannelSet::Akt => "AKT",
            ChannelSet::Dkt => "DKT",
        }
    }

    pub fn from_code(code: &str) -> Option<ChannelSet> {
        match code.to_ascii_uppercase().as_str() {
            "DAK" => Some(ChannelSet::Dak),
            "DAT" => Some(ChannelSet::Dat),
            "AKT" => Some(ChannelSet::Akt),
            "DKT" => Some(ChannelSet::Dkt),
            _ => None,
        }
    }

    pub fn modalities(self) -> [Modality; 3] {
        match self {
            ChannelSet::Dak => [Modality::Dwi, Modality::Adc, Modality::Ktrans],
            ChannelSet::Dat => [Modality::Dwi, Modality::Adc, Modality::T2],
            ChannelSet::Akt => [Modality::Adc, Modality::Ktrans, Modality::T2],
            ChannelSet::Dkt => [Modality::Dwi, Modality::Ktrans, Modality::T2],
        }
    }
}

impl std::fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

/// One augmentation view: slicing orientation, in-plane rotation, shear,
/// sub-pixel translation, and optional mirror.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub orientation_id: u8,
    pub inplane_rotation_deg: f64,
    pub shear: f64,
    pub translation_vox: (i8, i8),
    pub mirror: bool,
}

impl ViewSpec {
    pub fn identity() -> ViewSpec {
        ViewSpec {
            orientation_id: 0,
            inplane_rotation_deg: 0.0,
            shear: 0.0,
            translation_vox: (0, 0),
            mirror: false,
        }
    }
}

/// Slicing-plane basis for an orientation id. Columns are the world
/// directions of the in-plane u axis, in-plane v axis, and plane normal.
/// 0 = axial, 1 = sagittal, 2 = coronal, 3/4 = axial tilted +-45 deg about
/// world x, 5/6 = axial tilted +-45 deg about world y. All have det +1.
pub fn orientation_basis(orientation_id: u8) -> [[f64; 3]; 3] {
    assert!((orientation_id as usize) < N_ORIENTATIONS, "orientation id out of range");
    let rot_x = |deg: f64| {
        let (s, c) = deg.to_radians().sin_cos();
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    };
    let rot_y = |deg: f64| {
        let (s, c) = deg.to_radians().sin_cos();
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
    };
    match orientation_id {
        0 => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        1 => [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        2 => [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
        3 => rot_x(45.0),
        4 => rot_x(-45.0),
        5 => rot_y(45.0),
        6 => rot_y(-45.0),
        _ => unreachable!(),
    }
}

/// The deterministic view grid: all orientations crossed with
/// `rotations_per_orientation` equally spaced in-plane rotations, `shears`
/// shear coefficients spanning [-0.1, 0.1], and the 9 one-pixel translations.
/// Mirroring stays off here; it is applied stochastically during training.
pub fn enumerate_views(rotations_per_orientation: usize, shears: usize) -> Vec<ViewSpec> {
    assert!(rotations_per_orientation >= 1 && shears >= 1, "counts must be at least 1");
    let rotations: Vec<f64> =
        (0..rotations_per_orientation).map(|i| i as f64 * 360.0 / rotations_per_orientation as f64).collect();
    let shear_values: Vec<f64> = if shears == 1 {
        vec![0.0]
    } else {
        (0..shears).map(|i| -0.1 + 0.2 * i as f64 / (shears - 1) as f64).collect()
    };
    let mut views = Vec::with_capacity(N_ORIENTATIONS * rotations.len() * shear_values.len() * 9);
    for orientation_id in 0..N_ORIENTATIONS as u8 {
        for &rot in &rotations {
            for &shear in &shear_values {
                for dx in [-1i8, 0, 1] {
                    for dy in [-1i8, 0, 1] {
                        views.push(ViewSpec {
                            orientation_id,
                            inplane_rotation_deg: rot,
                            shear,
                            translation_vox: (dx, dy),
                            mirror: false,
                        });
                    }
                }
            }
        }
    }
    views
}

pub fn default_views() -> Vec<ViewSpec> {
    enumerate_views(4, 3)
}

/// Robust per-volume intensity window: 1st to 99th percentile, mapped to
/// [0,1] with clamping. A degenerate window maps everything to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityWindow {
    pub lo: f64,
    pub hi: f64,
}

impl IntensityWindow {
    pub fn robust(vol: &Volume) -> IntensityWindow {
        let mut sorted: Vec<f32> = vol.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        IntensityWindow { lo: percentile(&sorted, 0.01), hi: percentile(&sorted, 0.99) }
    }

    pub fn normalize(&self, v: f64) -> f32 {
        let range = self.hi - self.lo;
        if range <= 0.0 {
            return 0.0;
        }
        ((v - self.lo) / range).clamp(0.0, 1.0) as f32
    }
}

fn percentile(sorted: &[f32], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let i = rank.floor() as usize;
    let frac = rank - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1] as f64
    } else {
        sorted[i] as f64 * (1.0 - frac) + sorted[i + 1] as f64 * frac
    }
}

/// Per-modality windows for one case, computed once and reused across views.
#[derive(Debug, Clone)]
pub struct BundleWindows {
    windows: BTreeMap<Modality, IntensityWindow>,
}

impl BundleWindows {
    pub fn new(bundle: &CaseBundle) -> BundleWindows {
        let windows = bundle
            .channels
            .iter()
            .map(|(&m, vol)| (m, IntensityWindow::robust(vol)))
            .collect();
        BundleWindows { windows }
    }

    pub fn get(&self, m: Modality) -> Option<IntensityWindow> {
        self.windows.get(&m).copied()
    }
}

/// A 32x32x3 training sample plus where it came from. Scalars are stored
/// channel-major: channel, then row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTensor {
    pub data: Vec<f32>,
    pub label: Option<u8>,
    pub case_id: String,
    pub finding_id: u32,
    /// Position of the view in the enumerating grid; 0 for ad hoc extractions.
    pub view_index: u32,
    pub view: ViewSpec,
    pub channel_set: ChannelSet,
}

impl SampleTensor {
    #[inline]
    pub fn at(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[ch * SLICE_SIZE * SLICE_SIZE + row * SLICE_SIZE + col]
    }

    /// Horizontal mirror (columns flipped). An exact involution.
    pub fn mirrored(&self) -> SampleTensor {
        let mut out = self.clone();
        for ch in 0..3 {
            for row in 0..SLICE_SIZE {
                for col in 0..SLICE_SIZE {
                    out.data[ch * SLICE_SIZE * SLICE_SIZE + row * SLICE_SIZE + col] =
                        self.at(ch, row, SLICE_SIZE - 1 - col);
                }
            }
        }
        out.view.mirror = !self.view.mirror;
        out
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn view_transform(view: &ViewSpec) -> [[f64; 3]; 3] {
    let (s, c) = view.inplane_rotation_deg.to_radians().sin_cos();
    let rot_z = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let shear = [[1.0, view.shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&orientation_basis(view.orientation_id), &mat_mul(&rot_z, &shear))
}

/// Extract one sample. Pixel (row, col) of the slice sits at in-plane
/// millimeter offset (col - 15.5 + dx, row - 15.5 + dy) from the center,
/// pushed through shear, rotation, and the orientation basis.
pub fn extract_slice(
    bundle: &CaseBundle,
    center_world: [f64; 3],
    view: &ViewSpec,
    chans: ChannelSet,
    label: Option<u8>,
    finding_id: u32,
) -> Result<SampleTensor, AugmentError> {
    let windows = BundleWindows::new(bundle);
    extract_slice_windowed(bundle, &windows, center_world, view, chans, label, finding_id)
}

/// Same as [`extract_slice`], reusing precomputed intensity windows --
/// the form every bulk path uses.
pub fn extract_slice_windowed(
    bundle: &CaseBundle,
    windows: &BundleWindows,
    center_world: [f64; 3],
    view: &ViewSpec,
    chans: ChannelSet,
    label: Option<u8>,
    finding_id: u32,
) -> Result<SampleTensor, AugmentError> {
    let transform = view_transform(view);
    let (dx, dy) = (view.translation_vox.0 as f64, view.translation_vox.1 as f64);
    let mut data = vec![0.0f32; SAMPLE_LEN];
    for (ch, modality) in chans.modalities().into_iter().enumerate() {
        let vol = bundle.channel(modality).ok_or_else(|| AugmentError::MissingModality {
            case_id: bundle.case_id.clone(),
            modality,
        })?;
        let window = windows.get(modality).ok_or_else(|| AugmentError::MissingModality {
            case_id: bundle.case_id.clone(),
            modality,
        })?;
        for row in 0..SLICE_SIZE {
            let v = row as f64 - 15.5 + dy;
            for col in 0..SLICE_SIZE {
                let u = col as f64 - 15.5 + dx;
                let p = [
                    center_world[0] + transform[0][0] * u + transform[0][1] * v,
                    center_world[1] + transform[1][0] * u + transform[1][1] * v,
                    center_world[2] + transform[2][0] * u + transform[2][1] * v,
                ];
                let raw = vol.trilinear_sample(p) as f64;
                data[ch * SLICE_SIZE * SLICE_SIZE + row * SLICE_SIZE + col] =
                    window.normalize(raw);
            }
        }
    }
    let mut sample = SampleTensor {
        data,
        label,
        case_id: bundle.case_id.clone(),
        finding_id,
        view_index: 0,
        view: *view,
        channel_set: chans,
    };
    if view.mirror {
        let mut unmirrored_view = *view;
        unmirrored_view.mirror = false;
        sample.view = unmirrored_view;
        sample = sample.mirrored();
    }
    Ok(sample)
}

/// One planned sample: which finding, which view. Metadata only; lets the
/// full dataset be sized and ordered without touching any voxels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlanEntry {
    pub case_id: String,
    pub finding_id: u32,
    pub view_index: u32,
    pub label: Option<u8>,
}

/// Deterministic dataset order: findings sorted by (case_id, finding_id),
/// views in index order.
pub fn plan_dataset(findings: &[Finding], views: &[ViewSpec]) -> Vec<SamplePlanEntry> {
    let mut sorted: Vec<&Finding> = findings.iter().collect();
    sorted.sort_by(|a, b| (&a.case_id, a.finding_id).cmp(&(&b.case_id, b.finding_id)));
    let mut plan = Vec::with_capacity(sorted.len() * views.len());
    for f in sorted {
        for view_index in 0..views.len() as u32 {
            plan.push(SamplePlanEntry {
                case_id: f.case_id.clone(),
                finding_id: f.finding_id,
                view_index,
                label: f.label,
            });
        }
    }
    plan
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub case_id: String,
    pub finding_id: u32,
    pub view_index: u32,
    pub label: Option<u8>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleArchiveManifest {
    pub channel_set: String,
    pub count: usize,
    pub tensor_shape: [usize; 3],
    pub dtype: String,
    pub views: Vec<ViewSpec>,
    pub records: Vec<SampleRecord>,
}

fn archive_paths(manifest_path: &Path) -> Result<(PathBuf, String), AugmentError> {
    let name = manifest_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| AugmentError::MalformedArchive("invalid archive path".into()))?;
    let stem = name.strip_suffix(".samples.json").ok_or_else(|| {
        AugmentError::MalformedArchive(format!("archive path must end in .samples.json, got {name}"))
    })?;
    let payload_name = format!("{stem}.samples.bin");
    Ok((manifest_path.with_file_name(&payload_name), payload_name))
}

/// Extract and write every (finding x view) sample in deterministic order.
/// Returns the sample count, always |findings| x |views|.
pub fn build_dataset(
    bundles: &BTreeMap<String, CaseBundle>,
    findings: &[Finding],
    views: &[ViewSpec],
    chans: ChannelSet,
    manifest_path: &Path,
) -> Result<usize, AugmentError> {
    let (payload_path, _) = archive_paths(manifest_path)?;
    let plan = plan_dataset(findings, views);
    let finding_pos: BTreeMap<(&str, u32), [f64; 3]> = findings
        .iter()
        .map(|f| ((f.case_id.as_str(), f.finding_id), f.pos_world))
        .collect();

    let mut windows_cache: BTreeMap<&str, BundleWindows> = BTreeMap::new();
    let mut records = Vec::with_capacity(plan.len());
    let file = fs::File::create(&payload_path)?;
    let mut payload = BufWriter::new(file);
    let mut offset = 0u64;
    for entry in &plan {
        let bundle = bundles
            .get(&entry.case_id)
            .ok_or_else(|| AugmentError::MissingCase(entry.case_id.clone()))?;
        let windows = windows_cache
            .entry(bundle.case_id.as_str())
            .or_insert_with(|| BundleWindows::new(bundle));
        let center = finding_pos[&(entry.case_id.as_str(), entry.finding_id)];
        let sample = extract_slice_windowed(
            bundle,
            windows,
            center,
            &views[entry.view_index as usize],
            chans,
            entry.label,
            entry.finding_id,
        )
        .map_err(|e| AugmentError::Provenance {
            case_id: entry.case_id.clone(),
            finding_id: entry.finding_id,
            source: Box::new(e),
        })?;
        for &v in &sample.data {
            payload.write_all(&v.to_le_bytes())?;
        }
        records.push(SampleRecord {
            case_id: entry.case_id.clone(),
            finding_id: entry.finding_id,
            view_index: entry.view_index,
            label: entry.label,
            offset,
        });
        offset += (SAMPLE_LEN * 4) as u64;
    }
    payload.flush()?;

    let manifest = SampleArchiveManifest {
        channel_set: chans.code().to_string(),
        count: records.len(),
        tensor_shape: [SLICE_SIZE, SLICE_SIZE, 3],
        dtype: "f32le".to_string(),
        views: views.to_vec(),
        records,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| AugmentError::MalformedArchive(e.to_string()))?;
    fs::write(manifest_path, json)?;
    Ok(manifest.count)
}

/// Read an archive back into memory.
pub fn read_sample_archive(
    manifest_path: &Path,
) -> Result<(SampleArchiveManifest, Vec<SampleTensor>), AugmentError> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: SampleArchiveManifest =
        serde_json::from_str(&text).map_err(|e| AugmentError::MalformedArchive(e.to_string()))?;
    if manifest.dtype != "f32le" {
        return Err(AugmentError::MalformedArchive(format!(
            "unsupported dtype {}",
            manifest.dtype
        )));
    }
    let chans = ChannelSet::from_code(&manifest.channel_set).ok_or_else(|| {
        AugmentError::MalformedArchive(format!("unknown channel set {}", manifest.channel_set))
    })?;
    let (payload_path, _) = archive_paths(manifest_path)?;
    let bytes = fs::read(payload_path)?;
    if bytes.len() != manifest.count * SAMPLE_LEN * 4 {
        return Err(AugmentError::MalformedArchive(format!(
            "payload has {} bytes, manifest expects {}",
            bytes.len(),
            manifest.count * SAMPLE_LEN * 4
        )));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for record in &manifest.records {
        let start = record.offset as usize;
        let end = start + SAMPLE_LEN * 4;
        if end > bytes.len() {
            return Err(AugmentError::MalformedArchive(format!(
                "record offset {} runs past the payload",
                record.offset
            )));
        }
        let data: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let view = *manifest.views.get(record.view_index as usize).ok_or_else(|| {
            AugmentError::MalformedArchive(format!("view index {} out of range", record.view_index))
        })?;
        samples.push(SampleTensor {
            data,
            label: record.label,
            case_id: record.case_id.clone(),
            finding_id: record.finding_id,
            view_index: record.view_index,
            view,
            channel_set: chans,
        });
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((a[i][j] - b[i][j]).abs());
            }
        }
        worst
    }

    #[test]
    fn orientation_zero_is_identity() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(orientation_basis(0), id);
    }

    #[test]
    fn all_orientations_are_proper_rotations() {
        for id in 0..N_ORIENTATIONS as u8 {
            let r = orientation_basis(id);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12, "orientation {id} not orthonormal");
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-12, "orientation {id} det {det}");
        }
    }

    #[test]
    fn orientations_are_pairwise_distinct() {
        for a in 0..N_ORIENTATIONS as u8 {
            for b in (a + 1)..N_ORIENTATIONS as u8 {
                let d = max_abs_diff(&orientation_basis(a), &orientation_basis(b));
                assert!(d > 0.1, "orientations {a} and {b} differ by only {d}");
            }
        }
    }

    #[test]
    fn default_grid_has_756_distinct_views() {
        let views = default_views();
        assert_eq!(views.len(), 756);
        for i in 0..views.len() {
            for j in (i + 1)..views.len() {
                assert!(views[i] != views[j], "views {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn minimal_grid_has_63_views() {
        assert_eq!(enumerate_views(1, 1).len(), 63);
    }

    #[test]
    fn plan_covers_274_findings_as_207144_samples() {
        let findings: Vec<Finding> = (0..274)
            .map(|i| Finding {
                case_id: format!("case_{:03}", i / 2),
                finding_id: (i % 2) as u32 + 1,
                pos_world: [0.0; 3],
                label: Some((i % 3 == 0) as u8),
            })
            .collect();
        let views = default_views();
        let plan = plan_dataset(&findings, &views);
        assert_eq!(plan.len(), 207_144);
        // Deterministic order: (case_id, finding_id, view_index).
        for w in plan.windows(2) {
            let a = (&w[0].case_id, w[0].finding_id, w[0].view_index);
            let b = (&w[1].case_id, w[1].finding_id, w[1].view_index);
            assert!(a < b);
        }
    }

    fn gaussian_bundle(amplitudes: [f32; 4], sigma: f64, dims: usize) -> CaseBundle {
        let c = (dims as f64 - 1.0) / 2.0;
        let mut channels = BTreeMap::new();
        for (m, amp) in Modality::ALL.into_iter().zip(amplitudes) {
            let mut data = Vec::with_capacity(dims * dims * dims);
            for z in 0..dims {
                for y in 0..dims {
                    for x in 0..dims {
                        let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                        data.push(amp * (-r2 / (2.0 * sigma * sigma)).exp() as f32);
                    }
                }
            }
            channels.insert(m, Volume::axis_aligned([dims; 3], [1.0; 3], [0.0; 3], data).unwrap());
        }
        CaseBundle { case_id: "case_000".into(), channels, findings: Vec::new() }
    }

    fn constant_bundle(value: f32, dims: usize) -> CaseBundle {
        let mut channels = BTreeMap::new();
        for m in Modality::ALL {
            channels.insert(
                m,
                Volume::axis_aligned([dims; 3], [1.0; 3], [0.0; 3], vec![value; dims * dims * dims])
                    .unwrap(),
            );
        }
        CaseBundle { case_id: "case_000".into(), channels, findings: Vec::new() }
    }

    #[test]
    fn constant_volumes_give_constant_tensors() {
        let bundle = constant_bundle(7.5, 64);
        let windows = BundleWindows::new(&bundle);
        let center = [31.5, 31.5, 31.5];
        for view in enumerate_views(2, 2) {
            let s = extract_slice_windowed(&bundle, &windows, center, &view, ChannelSet::Dak, None, 1)
                .unwrap();
            let first = s.data[0];
            assert!(s.data.iter().all(|&v| v == first), "non-constant tensor for {view:?}");
        }
    }

    #[test]
    fn identity_view_matches_direct_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dims = 40;
        let mut channels = BTreeMap::new();
        for m in Modality::ALL {
            let data: Vec<f32> = (0..dims * dims * dims).map(|_| rng.gen_range(0.0..100.0)).collect();
            channels
                .insert(m, Volume::axis_aligned([dims; 3], [1.0; 3], [0.0; 3], data).unwrap());
        }
        let bundle = CaseBundle { case_id: "c".into(), channels, findings: Vec::new() };
        let windows = BundleWindows::new(&bundle);
        let center = [19.5, 19.5, 12.0];
        let view = ViewSpec::identity();
        let s = extract_slice_windowed(&bundle, &windows, center, &view, ChannelSet::Dak, None, 1)
            .unwrap();
        for (ch, m) in ChannelSet::Dak.modalities().into_iter().enumerate() {
            let vol = bundle.channel(m).unwrap();
            let w = windows.get(m).unwrap();
            for row in 0..SLICE_SIZE {
                for col in 0..SLICE_SIZE {
                    let direct = w.normalize(vol.at(4 + col, 4 + row, 12) as f64);
                    let got = s.at(ch, row, col);
                    assert!(
                        (got - direct).abs() < 1e-5,
                        "ch {ch} ({m}) pixel ({row},{col}): {got} vs {direct}"
                    );
                }
            }
        }
    }

    #[test]
    fn mirror_is_exact_column_flip_and_involution() {
        let bundle = gaussian_bundle([200.0, 150.0, 30.0, 120.0], 5.0, 48);
        let windows = BundleWindows::new(&bundle);
        let center = [23.5, 23.5, 23.5];
        let mut view = ViewSpec { inplane_rotation_deg: 90.0, shear: 0.1, ..ViewSpec::identity() };
        let plain = extract_slice_windowed(&bundle, &windows, center, &view, ChannelSet::Dat, None, 1)
            .unwrap();
        view.mirror = true;
        let flipped =
            extract_slice_windowed(&bundle, &windows, center, &view, ChannelSet::Dat, None, 1)
                .unwrap();
        for ch in 0..3 {
            for row in 0..SLICE_SIZE {
                for col in 0..SLICE_SIZE {
                    assert_eq!(flipped.at(ch, row, col), plain.at(ch, row, SLICE_SIZE - 1 - col));
                }
            }
        }
        assert_eq!(plain.mirrored().mirrored().data, plain.data);
    }

    #[test]
    fn full_rotation_is_identity_to_1e9() {
        let bundle = gaussian_bundle([200.0, 150.0, 30.0, 120.0], 5.0, 48);
        let windows = BundleWindows::new(&bundle);
        let center = [23.5, 23.5, 23.5];
        let a = ViewSpec { inplane_rotation_deg: 35.0, orientation_id: 3, ..ViewSpec::identity() };
        let b = ViewSpec { inplane_rotation_deg: 395.0, orientation_id: 3, ..ViewSpec::identity() };
        let sa = extract_slice_windowed(&bundle, &windows, center, &a, ChannelSet::Akt, None, 1)
            .unwrap();
        let sb = extract_slice_windowed(&bundle, &windows, center, &b, ChannelSet::Akt, None, 1)
            .unwrap();
        for (x, y) in sa.data.iter().zip(sb.data.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn radial_lesion_means_agree_across_all_views() {
        let bundle = gaussian_bundle([220.0, 140.0, 25.0, 90.0], 5.0, 64);
        let windows = BundleWindows::new(&bundle);
        let center = [31.5, 31.5, 31.5];
        let views = default_views();
        let mut means: Vec<[f64; 3]> = Vec::with_capacity(views.len());
        for view in &views {
            let s = extract_slice_windowed(&bundle, &windows, center, view, ChannelSet::Dak, None, 1)
                .unwrap();
            let mut m = [0.0f64; 3];
            for (ch, slot) in m.iter_mut().enumerate() {
                for row in 0..SLICE_SIZE {
                    for col in 0..SLICE_SIZE {
                        *slot += s.at(ch, row, col) as f64;
                    }
                }
                *slot /= (SLICE_SIZE * SLICE_SIZE) as f64;
            }
            means.push(m);
        }
        for ch in 0..3 {
            let avg = means.iter().map(|m| m[ch]).sum::<f64>() / means.len() as f64;
            for (i, m) in means.iter().enumerate() {
                let dev = (m[ch] - avg).abs() / avg;
                assert!(dev < 0.02, "view {i} channel {ch}: mean {} vs {} ({dev:.4})", m[ch], avg);
            }
        }
    }

    #[test]
    fn missing_modality_is_reported() {
        let mut bundle = constant_bundle(1.0, 8);
        bundle.channels.remove(&Modality::Ktrans);
        let err = extract_slice(&bundle, [3.5; 3], &ViewSpec::identity(), ChannelSet::Dak, None, 1)
            .unwrap_err();
        assert!(matches!(err, AugmentError::MissingModality { modality: Modality::Ktrans, .. }));
    }

    #[test]
    fn build_dataset_counts_and_reruns_bitwise() {
        let bundle = gaussian_bundle([100.0, 80.0, 20.0, 60.0], 4.0, 24);
        let mut bundles = BTreeMap::new();
        bundles.insert("case_000".to_string(), bundle);
        let findings = vec![
            Finding { case_id: "case_000".into(), finding_id: 1, pos_world: [11.5; 3], label: Some(1) },
            Finding { case_id: "case_000".into(), finding_id: 2, pos_world: [10.0; 3], label: Some(0) },
        ];
        let views = enumerate_views(1, 1);
        let dir = tempfile::tempdir().unwrap();
        let manifest_a = dir.path().join("a.samples.json");
        let n = build_dataset(&bundles, &findings, &views, ChannelSet::Dak, &manifest_a).unwrap();
        assert_eq!(n, 2 * 63);
        let manifest_b = dir.path().join("b.samples.json");
        build_dataset(&bundles, &findings, &views, ChannelSet::Dak, &manifest_b).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.samples.bin")).unwrap(),
            std::fs::read(dir.path().join("b.samples.bin")).unwrap()
        );
        let ja = std::fs::read_to_string(&manifest_a).unwrap();
        let jb = std::fs::read_to_string(&manifest_b).unwrap();
        assert_eq!(ja, jb);

        let (manifest, samples) = read_sample_archive(&manifest_a).unwrap();
        assert_eq!(manifest.count, 126);
        assert_eq!(samples.len(), 126);
        // Spot-check one sample against a direct extraction.
        let windows = BundleWindows::new(&bundles["case_000"]);
        let direct = extract_slice_windowed(
            &bundles["case_000"],
            &windows,
            [11.5; 3],
            &views[5],
            ChannelSet::Dak,
            Some(1),
            1,
        )
        .unwrap();
        let stored = samples.iter().find(|s| s.finding_id == 1 && s.view == views[5]).unwrap();
        assert_eq!(stored.data, direct.data);
        assert_eq!(stored.label, Some(1));
    }

    #[test]
    fn build_dataset_with_756_views_multiplies_out() {
        let bundle = constant_bundle(3.0, 16);
        let mut bundles = BTreeMap::new();
        bundles.insert("case_000".to_string(), bundle);
        let findings = vec![
            Finding { case_id: "case_000".into(), finding_id: 1, pos_world: [7.5; 3], label: Some(1) },
            Finding { case_id: "case_000".into(), finding_id: 2, pos_world: [7.5; 3], label: Some(0) },
        ];
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("full.samples.json");
        let n = build_dataset(&bundles, &findings, &default_views(), ChannelSet::Dkt, &manifest)
            .unwrap();
        assert_eq!(n, 1512);
    }

    #[test]
    fn channel_set_codes_round_trip() {
        for cs in ChannelSet::ALL {
            assert_eq!(ChannelSet::from_code(cs.code()), Some(cs));
            assert_eq!(cs.modalities().len(), 3);
            let mods = cs.modalities();
            assert!(mods[0] != mods[1] && mods[1] != mods[2] && mods[0] != mods[2]);
        }
        assert_eq!(ChannelSet::from_code("XYZ"), None);
    }
}
