//! 3D scalar volumes with world-frame geometry.
//!
//! A [`Volume`] couples an x-fastest scalar grid with the affine placing it in
//! patient coordinates: per-axis spacing in millimeters, the world position of
//! voxel (0,0,0), and an orthonormal direction matrix mapping index axes to
//! world axes. All cross-modality alignment in the toolkit is done by sampling
//! through these affines; nothing ever registers intensities.

pub mod io;

pub use io::{read_exclusion_list, read_findings_csv, read_volume, write_findings_csv, write_volume};

use std::collections::BTreeMap;
use thiserror::Error;

/// Voxel budget guard for resampling (512^3).
pub const DEFAULT_VOXEL_BUDGET: usize = 512 * 512 * 512;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid volume geometry: {0}")]
    InvalidGeometry(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload length mismatch: header dims need {expected} scalars, payload has {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unsupported dtype {0:?} (only \"f32le\")")]
    UnsupportedDtype(String),
    #[error("resampled grid of {voxels} voxels exceeds the budget of {budget}")]
    OversizeGrid { voxels: usize, budget: usize },
    #[error("malformed findings record: {0}")]
    MalformedRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Imaging modality of one channel in a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Dwi,
    Adc,
    Ktrans,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Dwi, Modality::Adc, Modality::Ktrans, Modality::T2];

    /// Single-letter code used in channel-set names (D, A, K, T).
    pub fn letter(self) -> char {
        match self {
            Modality::Dwi => 'D',
            Modality::Adc => 'A',
            Modality::Ktrans => 'K',
            Modality::T2 => 'T',
        }
    }

    /// Lowercase stem used for on-disk volume files.
    pub fn stem(self) -> &'static str {
        match self {
            Modality::Dwi => "dwi",
            Modality::Adc => "adc",
            Modality::Ktrans => "ktrans",
            Modality::T2 => "t2",
        }
    }

    pub fn from_letter(c: char) -> Option<Modality> {
        match c.to_ascii_uppercase() {
            'D' => Some(Modality::Dwi),
            'A' => Some(Modality::Adc),
            'K' => Some(Modality::Ktrans),
            'T' => Some(Modality::T2),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Modality::Dwi => "DWI",
            Modality::Adc => "ADC",
            Modality::Ktrans => "KTRANS",
            Modality::T2 => "T2",
        };
        f.write_str(name)
    }
}

/// A lesion record: where a finding sits in world space and, when known,
/// whether it is clinically significant.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub case_id: String,
    pub finding_id: u32,
    pub pos_world: [f64; 3],
    pub label: Option<u8>,
}

/// One case: every modality volume plus the findings reported for it.
#[derive(Debug, Clone)]
pub struct CaseBundle {
    pub case_id: String,
    pub channels: BTreeMap<Modality, Volume>,
    pub findings: Vec<Finding>,
}

impl CaseBundle {
    pub fn channel(&self, m: Modality) -> Option<&Volume> {
        self.channels.get(&m)
    }
}

/// A 3D scalar grid with physical spacing, origin, and orientation.
///
/// Data is stored x-fastest: index (x, y, z) lives at `x + nx*(y + ny*z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    direction: [[f64; 3]; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        direction: [[f64; 3]; 3],
        data: Vec<f32>,
    ) -> Result<Volume, VolumeError> {
        let n = dims[0] * dims[1] * dims[2];
        if n == 0 {
            return Err(VolumeError::InvalidGeometry("zero-sized volume".into()));
        }
        if data.len() != n {
            return Err(VolumeError::LengthMismatch { expected: n, actual: data.len() });
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::InvalidGeometry(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(VolumeError::InvalidGeometry("non-finite origin".into()));
        }
        if !is_orthonormal(&direction) {
            return Err(VolumeError::InvalidGeometry(
                "direction matrix is not orthonormal".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::InvalidGeometry("non-finite scalar values".into()));
        }
        Ok(Volume { dims, spacing, origin, direction, data })
    }

    /// Axis-aligned volume with identity direction.
    pub fn axis_aligned(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Volume, VolumeError> {
        Volume::new(dims, spacing, origin, IDENTITY_DIRECTION, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn direction(&self) -> [[f64; 3]; 3] {
        self.direction
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.linear_index(x, y, z)]
    }

    /// World position (mm) of the center of voxel (x, y, z), accepting
    /// continuous indices.
    pub fn index_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        let scaled = [idx[0] * self.spacing[0], idx[1] * self.spacing[1], idx[2] * self.spacing[2]];
        let d = &self.direction;
        [
            self.origin[0] + d[0][0] * scaled[0] + d[0][1] * scaled[1] + d[0][2] * scaled[2],
            self.origin[1] + d[1][0] * scaled[0] + d[1][1] * scaled[1] + d[1][2] * scaled[2],
            self.origin[2] + d[2][0] * scaled[0] + d[2][1] * scaled[1] + d[2][2] * scaled[2],
        ]
    }

    /// Continuous voxel index of a world point: diag(1/spacing) * D^T * (p - origin).
    ///
    /// Out-of-bounds indices are returned as-is; callers decide what to do.
    pub fn world_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        let rel = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        let d = &self.direction;
        [
            (d[0][0] * rel[0] + d[1][0] * rel[1] + d[2][0] * rel[2]) / self.spacing[0],
            (d[0][1] * rel[0] + d[1][1] * rel[1] + d[2][1] * rel[2]) / self.spacing[1],
            (d[0][2] * rel[0] + d[1][2] * rel[1] + d[2][2] * rel[2]) / self.spacing[2],
        ]
    }

    /// True if the world point maps into the voxel index box [0, dims-1].
    pub fn contains_world(&self, p: [f64; 3]) -> bool {
        let idx = self.world_to_index(p);
        idx.iter()
            .zip(self.dims.iter())
            .all(|(&v, &n)| v >= 0.0 && v <= (n - 1) as f64)
    }

    /// Trilinear blend of the 8 voxels surrounding a continuous index.
    /// Voxels outside the grid contribute 0.
    pub fn sample_index(&self, idx: [f64; 3]) -> f32 {
        let x0 = idx[0].floor();
        let y0 = idx[1].floor();
        let z0 = idx[2].floor();
        let fx = idx[0] - x0;
        let fy = idx[1] - y0;
        let fz = idx[2] - z0;
        let (x0, y0, z0) = (x0 as i64, y0 as i64, z0 as i64);

        let fetch = |x: i64, y: i64, z: i64| -> f64 {
            if x < 0
                || y < 0
                || z < 0
                || x >= self.dims[0] as i64
                || y >= self.dims[1] as i64
                || z >= self.dims[2] as i64
            {
                0.0
            } else {
                self.at(x as usize, y as usize, z as usize) as f64
            }
        };

        let c00 = fetch(x0, y0, z0) * (1.0 - fx) + fetch(x0 + 1, y0, z0) * fx;
        let c10 = fetch(x0, y0 + 1, z0) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, z0) * fx;
        let c01 = fetch(x0, y0, z0 + 1) * (1.0 - fx) + fetch(x0 + 1, y0, z0 + 1) * fx;
        let c11 = fetch(x0, y0 + 1, z0 + 1) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, z0 + 1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        (c0 * (1.0 - fz) + c1 * fz) as f32
    }

    /// Trilinear sample at a world point (zero outside the grid).
    pub fn trilinear_sample(&self, p: [f64; 3]) -> f32 {
        self.sample_index(self.world_to_index(p))
    }

    /// Resample onto an isotropic grid of the given spacing, keeping the world
    /// origin and direction. Output dims are ceil(extent_mm / spacing) so the
    /// covered extent never shrinks.
    pub fn resample_isotropic(&self, target_spacing: f64) -> Result<Volume, VolumeError> {
        self.resample_isotropic_budgeted(target_spacing, DEFAULT_VOXEL_BUDGET)
    }

    pub fn resample_isotropic_budgeted(
        &self,
        target_spacing: f64,
        budget: usize,
    ) -> Result<Volume, VolumeError> {
        if !(target_spacing > 0.0) || !target_spacing.is_finite() {
            return Err(VolumeError::InvalidGeometry(format!(
                "target spacing must be positive, got {target_spacing}"
            )));
        }
        let out_dims = [
            ((self.dims[0] as f64 * self.spacing[0]) / target_spacing).ceil() as usize,
            ((self.dims[1] as f64 * self.spacing[1]) / target_spacing).ceil() as usize,
            ((self.dims[2] as f64 * self.spacing[2]) / target_spacing).ceil() as usize,
        ];
        let voxels = out_dims[0] * out_dims[1] * out_dims[2];
        if voxels > budget {
            return Err(VolumeError::OversizeGrid { voxels, budget });
        }
        let target = Volume {
            dims: out_dims,
            spacing: [target_spacing; 3],
            origin: self.origin,
            direction: self.direction,
            data: Vec::new(),
        };
        Ok(self.resample_to_geometry(&target))
    }

    /// Resample onto the reference volume's grid, sampling this volume at the
    /// reference voxel world centers. Geometry-only alignment; regions of the
    /// reference frame this volume does not cover come out zero.
    pub fn resample_to_reference(&self, reference: &Volume) -> Volume {
        self.resample_to_geometry(reference)
    }

    fn resample_to_geometry(&self, target: &Volume) -> Volume {
        let [nx, ny, nz] = target.dims;
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = target.index_to_world([x as f64, y as f64, z as f64]);
                    data.push(self.trilinear_sample(p));
                }
            }
        }
        Volume {
            dims: target.dims,
            spacing: target.spacing,
            origin: target.origin,
            direction: target.direction,
            data,
        }
    }
}

pub const IDENTITY_DIRECTION: [[f64; 3]; 3] =
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn is_orthonormal(d: &[[f64; 3]; 3]) -> bool {
    if d.iter().flatten().any(|v| !v.is_finite()) {
        return false;
    }
    // Max-norm of D^T D - I.
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|r| d[r][i] * d[r][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst < ORTHONORMAL_TOL
}
