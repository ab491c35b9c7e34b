//! Intensity statistics and gray-level co-occurrence texture features
//! computed over lesion masks, for all four channels of a case.

use crate::preprocess::LesionMask;
use crate::volgrid::{CaseBundle, Modality, Volume};
use ndarray::Array2;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Gray levels used for co-occurrence quantization.
pub const N_GRAY_LEVELS: usize = 32;

/// Total length of one extracted feature vector.
pub const FEATURE_COUNT: usize = 87;

#[derive(Debug, Error)]
pub enum RadiomicsError {
    #[error("mask contains no voxels")]
    EmptyMask,
    #[error("no co-occurring in-mask voxel pairs")]
    NoValidPairs,
    #[error("case lacks the {0} channel")]
    MissingModality(Modality),
    #[error("mask dims {mask:?} do not match volume dims {volume:?}")]
    DimsMismatch { mask: [usize; 3], volume: [usize; 3] },
    #[error("mask voxel index {0} outside a volume of {1} voxels")]
    VoxelOutOfRange(usize, usize),
    #[error("malformed feature file: {0}")]
    MalformedFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The 13 unique unit-displacement directions of a 3D grid (26 neighbors,
/// one per antipodal pair).
pub const GLCM_OFFSETS: [[isize; 3]; 13] = [
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 1, 0],
    [1, -1, 0],
    [1, 0, 1],
    [1, 0, -1],
    [0, 1, 1],
    [0, 1, -1],
    [1, 1, 1],
    [1, 1, -1],
    [1, -1, 1],
    [1, -1, -1],
];

fn coords(lin: usize, dims: [usize; 3]) -> [usize; 3] {
    [lin % dims[0], (lin / dims[0]) % dims[1], lin / (dims[0] * dims[1])]
}

/// Map values onto gray levels `0..n_levels` by uniform binning between the
/// minimum and maximum. A constant input maps entirely to level 0; the
/// maximum always lands on the top level.
pub fn quantize(values: &[f32], n_levels: usize) -> Vec<u8> {
    assert!((1..=256).contains(&n_levels), "n_levels must be in 1..=256");
    if values.is_empty() {
        return Vec::new();
    }
    let min = values.iter().fold(f64::INFINITY, |a, &v| a.min(v as f64));
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let range = max - min;
    if !(range > 0.0) {
        return vec![0; values.len()];
    }
    let denom = range * (1.0 + 1e-12);
    let top = (n_levels - 1) as f64;
    values
        .iter()
        .map(|&v| {
            let level = (n_levels as f64 * ((v as f64 - min) / denom)).floor();
            level.clamp(0.0, top) as u8
        })
        .collect()
}

/// Quantized gray level of every mask voxel, keyed by linear voxel index.
pub fn quantized_levels(
    vol: &Volume,
    mask: &LesionMask,
    n_levels: usize,
) -> Result<BTreeMap<usize, u8>, RadiomicsError> {
    check_mask(vol, mask)?;
    let values: Vec<f32> = mask.voxels().iter().map(|&lin| vol.data()[lin]).collect();
    let levels = quantize(&values, n_levels);
    Ok(mask.voxels().iter().copied().zip(levels).collect())
}

fn check_mask(vol: &Volume, mask: &LesionMask) -> Result<(), RadiomicsError> {
    if mask.is_empty() {
        return Err(RadiomicsError::EmptyMask);
    }
    if mask.volume_dims() != vol.dims() {
        return Err(RadiomicsError::DimsMismatch { mask: mask.volume_dims(), volume: vol.dims() });
    }
    if let Some(&last) = mask.voxels().iter().next_back() {
        if last >= vol.num_voxels() {
            return Err(RadiomicsError::VoxelOutOfRange(last, vol.num_voxels()));
        }
    }
    Ok(())
}

/// Symmetric co-occurrence matrix over the 13 unit offsets, counting pairs
/// whose both endpoints lie in the mask, plus the transposed pair, then
/// normalized to sum 1.
pub fn glcm_3d(
    dims: [usize; 3],
    levels: &BTreeMap<usize, u8>,
    n_levels: usize,
) -> Result<Array2<f64>, RadiomicsError> {
    let mut counts = Array2::<f64>::zeros((n_levels, n_levels));
    let mut total = 0.0f64;
    for (&lin, &level) in levels {
        let [x, y, z] = coords(lin, dims);
        for d in GLCM_OFFSETS {
            let nx = x as isize + d[0];
            let ny = y as isize + d[1];
            let nz = z as isize + d[2];
            if nx < 0
                || ny < 0
                || nz < 0
                || nx >= dims[0] as isize
                || ny >= dims[1] as isize
                || nz >= dims[2] as isize
            {
                continue;
            }
            let nlin = nx as usize + dims[0] * (ny as usize + dims[1] * nz as usize);
            if let Some(&nlevel) = levels.get(&nlin) {
                counts[[level as usize, nlevel as usize]] += 1.0;
                counts[[nlevel as usize, level as usize]] += 1.0;
                total += 2.0;
            }
        }
    }
    if total == 0.0 {
        return Err(RadiomicsError::NoValidPairs);
    }
    counts.mapv_inplace(|c| c / total);
    Ok(counts)
}

/// Degenerate co-occurrence matrix of a single-level region: all mass on
/// the (0, 0) cell. Used when a mask yields no valid pairs.
pub fn single_level_glcm(n_levels: usize) -> Array2<f64> {
    let mut g = Array2::<f64>::zeros((n_levels, n_levels));
    g[[0, 0]] = 1.0;
    g
}

/// The texture summary statistics of a normalized co-occurrence matrix.
/// Entropies use base-2 logarithms; zero cells contribute nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaralickFeatures {
    pub energy: f64,
    pub contrast: f64,
    pub correlation: f64,
    pub variance: f64,
    pub homogeneity: f64,
    pub sum_average: f64,
    pub sum_variance: f64,
    pub sum_entropy: f64,
    pub entropy: f64,
    pub difference_variance: f64,
    pub difference_entropy: f64,
    pub imc1: f64,
    pub imc2: f64,
    pub autocorrelation: f64,
    pub dissimilarity: f64,
}

pub const HARALICK_NAMES: [&str; 15] = [
    "energy",
    "contrast",
    "correlation",
    "variance",
    "homogeneity",
    "sum_average",
    "sum_variance",
    "sum_entropy",
    "entropy",
    "difference_variance",
    "difference_entropy",
    "imc1",
    "imc2",
    "autocorrelation",
    "dissimilarity",
];

impl HaralickFeatures {
    pub fn as_array(&self) -> [f64; 15] {
        [
            self.energy,
            self.contrast,
            self.correlation,
            self.variance,
            self.homogeneity,
            self.sum_average,
            self.sum_variance,
            self.sum_entropy,
            self.entropy,
            self.difference_variance,
            self.difference_entropy,
            self.imc1,
            self.imc2,
            self.autocorrelation,
            self.dissimilarity,
        ]
    }
}

/// Compute the 15 texture features from a normalized co-occurrence matrix.
/// Correlation reports 0 when either marginal has zero variance, and imc1
/// reports 0 when both marginal entropies vanish.
pub fn haralick(glcm: &Array2<f64>) -> HaralickFeatures {
    let n = glcm.nrows();
    assert_eq!(n, glcm.ncols(), "co-occurrence matrix must be square");

    let mut px = vec![0.0f64; n];
    let mut py = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            px[i] += glcm[[i, j]];
            py[j] += glcm[[i, j]];
        }
    }
    let mean_x: f64 = px.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
    let mean_y: f64 = py.iter().enumerate().map(|(j, p)| j as f64 * p).sum();
    let var_x: f64 = px.iter().enumerate().map(|(i, p)| (i as f64 - mean_x).powi(2) * p).sum();
    let var_y: f64 = py.iter().enumerate().map(|(j, p)| (j as f64 - mean_y).powi(2) * p).sum();

    let mut p_sum = vec![0.0f64; 2 * n - 1];
    let mut p_diff = vec![0.0f64; n];
    let mut energy = 0.0;
    let mut contrast = 0.0;
    let mut variance = 0.0;
    let mut homogeneity = 0.0;
    let mut entropy = 0.0;
    let mut autocorrelation = 0.0;
    let mut dissimilarity = 0.0;
    let mut cross = 0.0;
    let mut hxy1 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = glcm[[i, j]];
            let (fi, fj) = (i as f64, j as f64);
            let diff = fi - fj;
            energy += p * p;
            contrast += diff * diff * p;
            variance += (fi - mean_x).powi(2) * p;
            homogeneity += p / (1.0 + diff * diff);
            autocorrelation += fi * fj * p;
            dissimilarity += diff.abs() * p;
            cross += fi * fj * p;
            p_sum[i + j] += p;
            p_diff[i.abs_diff(j)] += p;
            if p > 0.0 {
                entropy -= p * p.log2();
                hxy1 -= p * (px[i] * py[j]).log2();
            }
        }
    }

    let sigma = (var_x * var_y).sqrt();
    let correlation = if sigma > 0.0 { (cross - mean_x * mean_y) / sigma } else { 0.0 };

    let sum_average: f64 = p_sum.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
    let sum_variance: f64 =
        p_sum.iter().enumerate().map(|(k, p)| (k as f64 - sum_average).powi(2) * p).sum();
    let sum_entropy: f64 =
        p_sum.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();

    let diff_average: f64 = p_diff.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
    let difference_variance: f64 =
        p_diff.iter().enumerate().map(|(k, p)| (k as f64 - diff_average).powi(2) * p).sum();
    let difference_entropy: f64 =
        p_diff.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();

    let hx: f64 = px.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    let hy: f64 = py.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    let mut hxy2 = 0.0;
    for &pi in &px {
        for &pj in &py {
            let q = pi * pj;
            if q > 0.0 {
                hxy2 -= q * q.log2();
            }
        }
    }
    let hmax = hx.max(hy);
    let imc1 = if hmax > 0.0 { (entropy - hxy1) / hmax } else { 0.0 };
    let imc2 = (1.0 - (-2.0 * (hxy2 - entropy)).exp()).max(0.0).sqrt();

    HaralickFeatures {
        energy,
        contrast,
        correlation,
        variance,
        homogeneity,
        sum_average,
        sum_variance,
        sum_entropy,
        entropy,
        difference_variance,
        difference_entropy,
        imc1,
        imc2,
        autocorrelation,
        dissimilarity,
    }
}

/// Intensity summary statistics of the masked values. `std` is the sample
/// standard deviation; skewness and excess kurtosis use population moments
/// and report 0 for constant input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrder {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

pub const FIRST_ORDER_NAMES: [&str; 6] = ["mean", "std", "min", "max", "skewness", "kurtosis"];

impl FirstOrder {
    pub fn as_array(&self) -> [f64; 6] {
        [self.mean, self.std, self.min, self.max, self.skewness, self.kurtosis]
    }
}

pub fn first_order(values: &[f32]) -> FirstOrder {
    assert!(!values.is_empty(), "first_order needs at least one value");
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &v in values {
        let d = v as f64 - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = if values.len() > 1 { (m2 * n / (n - 1.0)).sqrt() } else { 0.0 };
    let (skewness, kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    let min = values.iter().fold(f64::INFINITY, |a, &v| a.min(v as f64));
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    FirstOrder { mean, std, min, max, skewness, kurtosis }
}

/// Canonical names of the 87 features, in extraction order: per channel the
/// 6 intensity statistics then the 15 texture features, followed by the 3
/// geometry and cross-channel features.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(FEATURE_COUNT);
    for m in Modality::ALL {
        for stat in FIRST_ORDER_NAMES {
            names.push(format!("{}_{stat}", m.stem()));
        }
        for stat in HARALICK_NAMES {
            names.push(format!("{}_{stat}", m.stem()));
        }
    }
    names.push("lesion_volume_mm3".to_string());
    names.push("surface_to_volume".to_string());
    names.push("adc_t2_ratio".to_string());
    names
}

/// Total area of mask faces exposed to out-of-mask or out-of-bounds
/// neighbors, in square millimeters.
pub fn surface_area_mm2(mask: &LesionMask, spacing: [f64; 3]) -> f64 {
    let dims = mask.volume_dims();
    let face_area = [
        spacing[1] * spacing[2],
        spacing[0] * spacing[2],
        spacing[0] * spacing[1],
    ];
    let mut area = 0.0;
    for &lin in mask.voxels() {
        let [x, y, z] = coords(lin, dims);
        let pos = [x as isize, y as isize, z as isize];
        for axis in 0..3 {
            for dir in [-1isize, 1] {
                let mut q = pos;
                q[axis] += dir;
                let exposed = q[axis] < 0
                    || q[axis] >= dims[axis] as isize
                    || !mask.contains(q[0] as usize, q[1] as usize, q[2] as usize);
                if exposed {
                    area += face_area[axis];
                }
            }
        }
    }
    area
}

/// Extract the 87-feature vector for one lesion, ordered as
/// [`feature_names`]. Channels that quantize to a single level fall back to
/// the degenerate single-level texture values instead of failing.
pub fn extract_features(bundle: &CaseBundle, mask: &LesionMask) -> Result<Vec<f64>, RadiomicsError> {
    let mut features = Vec::with_capacity(FEATURE_COUNT);
    for m in Modality::ALL {
        let vol = bundle.channel(m).ok_or(RadiomicsError::MissingModality(m))?;
        check_mask(vol, mask)?;
        let values: Vec<f32> = mask.voxels().iter().map(|&lin| vol.data()[lin]).collect();
        features.extend(first_order(&values).as_array());
        let levels: BTreeMap<usize, u8> = mask
            .voxels()
            .iter()
            .copied()
            .zip(quantize(&values, N_GRAY_LEVELS))
            .collect();
        let glcm = match glcm_3d(vol.dims(), &levels, N_GRAY_LEVELS) {
            Ok(g) => g,
            Err(RadiomicsError::NoValidPairs) => single_level_glcm(N_GRAY_LEVELS),
            Err(e) => return Err(e),
        };
        features.extend(haralick(&glcm).as_array());
    }

    let spacing_source = bundle
        .channel(mask.source_modality())
        .or_else(|| bundle.channels.values().next())
        .expect("channel presence checked above");
    let spacing = spacing_source.spacing();
    let voxel_mm3 = spacing[0] * spacing[1] * spacing[2];
    let volume_mm3 = mask.len() as f64 * voxel_mm3;
    features.push(volume_mm3);
    features.push(surface_area_mm2(mask, spacing) / volume_mm3);

    let mean_in_mask = |m: Modality| -> f64 {
        let vol = bundle.channel(m).expect("checked above");
        let sum: f64 = mask.voxels().iter().map(|&lin| vol.data()[lin] as f64).sum();
        sum / mask.len() as f64
    };
    let adc_mean = mean_in_mask(Modality::Adc);
    let t2_mean = mean_in_mask(Modality::T2);
    let ratio = if t2_mean != 0.0 { adc_mean / t2_mean } else { 0.0 };
    features.push(if ratio.is_finite() { ratio } else { 0.0 });

    debug_assert_eq!(features.len(), FEATURE_COUNT);
    Ok(features)
}

/// Ball of voxels whose centers lie within `radius_mm` of `center_world`,
/// used when region growing produces nothing usable.
pub fn fallback_ball_mask(vol: &Volume, center_world: [f64; 3], radius_mm: f64) -> LesionMask {
    let dims = vol.dims();
    let idx = vol.world_to_index(center_world);
    let spacing = vol.spacing();
    let clamp = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    let seed = [clamp(idx[0], dims[0]), clamp(idx[1], dims[1]), clamp(idx[2], dims[2])];
    let lo = |i: usize| ((idx[i] - radius_mm / spacing[i]).floor().max(0.0)) as usize;
    let hi = |i: usize| (((idx[i] + radius_mm / spacing[i]).ceil()) as usize).min(dims[i] - 1);
    let mut voxels = BTreeSet::new();
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                let p = vol.index_to_world([x as f64, y as f64, z as f64]);
                let d2 = (0..3).map(|i| (p[i] - center_world[i]).powi(2)).sum::<f64>();
                if d2 <= radius_mm * radius_mm {
                    voxels.insert(x + dims[0] * (y + dims[1] * z));
                }
            }
        }
    }
    LesionMask::from_voxels(dims, voxels, seed)
}

/// One lesion's extracted features plus its identity and label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub case_id: String,
    pub finding_id: u32,
    pub label: u8,
    pub values: Vec<f64>,
}

/// Write feature records with header `case_id,finding_id,label,<names...>`.
pub fn write_feature_csv(
    records: &[FeatureRecord],
    names: &[String],
    path: &Path,
) -> Result<(), RadiomicsError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["case_id".to_string(), "finding_id".to_string(), "label".to_string()];
    header.extend(names.iter().cloned());
    writer.write_record(&header).map_err(csv_err)?;
    for record in records {
        if record.values.len() != names.len() {
            return Err(RadiomicsError::MalformedFile(format!(
                "record {}/{} has {} values for {} feature names",
                record.case_id,
                record.finding_id,
                record.values.len(),
                names.len()
            )));
        }
        let mut row = vec![
            record.case_id.clone(),
            record.finding_id.to_string(),
            record.label.to_string(),
        ];
        row.extend(record.values.iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a feature table back; returns the feature names from the header and
/// the records.
pub fn read_feature_csv(path: &Path) -> Result<(Vec<String>, Vec<FeatureRecord>), RadiomicsError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "case_id" || cols[1] != "finding_id" || cols[2] != "label" {
        return Err(RadiomicsError::MalformedFile(
            "feature csv must start with case_id,finding_id,label".into(),
        ));
    }
    let names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != cols.len() {
            return Err(RadiomicsError::MalformedFile(format!(
                "row with {} fields, expected {}",
                row.len(),
                cols.len()
            )));
        }
        let parse_err = |what: &str| RadiomicsError::MalformedFile(format!("bad {what} field"));
        let mut values = Vec::with_capacity(names.len());
        for field in row.iter().skip(3) {
            values.push(field.parse::<f64>().map_err(|_| parse_err("feature"))?);
        }
        records.push(FeatureRecord {
            case_id: row[0].to_string(),
            finding_id: row[1].parse().map_err(|_| parse_err("finding_id"))?,
            label: row[2].parse().map_err(|_| parse_err("label"))?,
            values,
        });
    }
    Ok((names, records))
}

fn csv_err(e: csv::Error) -> RadiomicsError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => RadiomicsError::Io(io),
        other => RadiomicsError::MalformedFile(format!("{other:?}")),
    }
}

/// Write the canonical feature manifest: {"version": 1, "names": [...]}.
pub fn write_feature_manifest(path: &Path) -> Result<(), RadiomicsError> {
    let manifest = serde_json::json!({
        "version": 1,
        "names": feature_names(),
    });
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| RadiomicsError::MalformedFile(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
