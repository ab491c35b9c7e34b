//! On-disk formats: the native "nvol" volume pair and the findings CSV.
//!
//! An nvol volume is a UTF-8 JSON header `<name>.nvol.json` plus a raw payload
//! of little-endian f32 scalars in x-fastest order, referenced from the header
//! by relative path. Round trips are bit-exact.

use super::{Finding, Volume, VolumeError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize)]
struct NvolHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    direction: [f64; 9],
    dtype: String,
    data_file: String,
}

/// Write `vol` as `<path>` (must end in `.nvol.json`) plus a sibling
/// `.nvol.raw` payload.
pub fn write_volume(vol: &Volume, header_path: &Path) -> Result<(), VolumeError> {
    let data_name = raw_name_for(header_path)?;
    let d = vol.direction();
    let header = NvolHeader {
        dims: vol.dims(),
        spacing_mm: vol.spacing(),
        origin_mm: vol.origin(),
        direction: [
            d[0][0], d[0][1], d[0][2], d[1][0], d[1][1], d[1][2], d[2][0], d[2][1], d[2][2],
        ],
        dtype: "f32le".to_string(),
        data_file: data_name.clone(),
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| VolumeError::MalformedHeader(e.to_string()))?;
    fs::write(header_path, json)?;

    let raw_path = header_path.with_file_name(&data_name);
    let file = fs::File::create(raw_path)?;
    let mut w = BufWriter::new(file);
    for &v in vol.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(header_path: &Path) -> Result<Volume, VolumeError> {
    let text = fs::read_to_string(header_path)?;
    let header: NvolHeader =
        serde_json::from_str(&text).map_err(|e| VolumeError::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(VolumeError::UnsupportedDtype(header.dtype));
    }
    if header.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(VolumeError::MalformedHeader(format!(
            "spacing must be strictly positive, got {:?}",
            header.spacing_mm
        )));
    }
    let raw_path = header_path.with_file_name(&header.data_file);
    let bytes = fs::read(raw_path)?;
    if bytes.len() % 4 != 0 {
        return Err(VolumeError::MalformedHeader(format!(
            "payload length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    let expected = header.dims[0] * header.dims[1] * header.dims[2];
    let actual = bytes.len() / 4;
    if actual != expected {
        return Err(VolumeError::LengthMismatch { expected, actual });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let dm = header.direction;
    let direction = [[dm[0], dm[1], dm[2]], [dm[3], dm[4], dm[5]], [dm[6], dm[7], dm[8]]];
    Volume::new(header.dims, header.spacing_mm, header.origin_mm, direction, data).map_err(|e| {
        match e {
            VolumeError::LengthMismatch { expected, actual } => {
                VolumeError::LengthMismatch { expected, actual }
            }
            other => VolumeError::MalformedHeader(other.to_string()),
        }
    })
}

fn raw_name_for(header_path: &Path) -> Result<String, VolumeError> {
    let name = header_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| VolumeError::MalformedHeader("invalid header path".into()))?;
    let stem = name.strip_suffix(".nvol.json").ok_or_else(|| {
        VolumeError::MalformedHeader(format!("header path must end in .nvol.json, got {name}"))
    })?;
    Ok(format!("{stem}.nvol.raw"))
}

/// The volume pair paths for a modality stem inside a case directory.
pub fn nvol_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.nvol.json")), dir.join(format!("{stem}.nvol.raw")))
}

/// Findings CSV: `case_id,finding_id,x_mm,y_mm,z_mm,label`, label empty for
/// unlabeled findings.
pub fn write_findings_csv(findings: &[Finding], path: &Path) -> Result<(), VolumeError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["case_id", "finding_id", "x_mm", "y_mm", "z_mm", "label"]).map_err(csv_err)?;
    for f in findings {
        let label = f.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([
            f.case_id.as_str(),
            &f.finding_id.to_string(),
            &f.pos_world[0].to_string(),
            &f.pos_world[1].to_string(),
            &f.pos_world[2].to_string(),
            &label,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_findings_csv(path: &Path) -> Result<Vec<Finding>, VolumeError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(csv_err)?;
        if record.len() != 6 {
            return Err(VolumeError::MalformedRecord(format!(
                "expected 6 fields, got {}",
                record.len()
            )));
        }
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse_f = |i: usize| -> Result<f64, VolumeError> {
            field(i)
                .parse::<f64>()
                .map_err(|_| VolumeError::MalformedRecord(format!("bad float {:?}", field(i))))
        };
        let label = match field(5) {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => {
                return Err(VolumeError::MalformedRecord(format!("label must be 0/1/empty, got {other:?}")))
            }
        };
        out.push(Finding {
            case_id: field(0).to_string(),
            finding_id: field(1)
                .parse()
                .map_err(|_| VolumeError::MalformedRecord(format!("bad finding_id {:?}", field(1))))?,
            pos_world: [parse_f(2)?, parse_f(3)?, parse_f(4)?],
            label,
        });
    }
    Ok(out)
}

/// Exclusion list: plain text, one case_id per line; blank lines ignored.
pub fn read_exclusion_list(path: &Path) -> Result<Vec<String>, VolumeError> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn csv_err(e: csv::Error) -> VolumeError {
    VolumeError::MalformedRecord(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::IDENTITY_DIRECTION;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut data: Vec<f32> = (0..3 * 4 * 5).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
        // Include the finite extremes.
        data[0] = 3.4e38;
        data[1] = -3.4e38;
        data[2] = f32::MIN_POSITIVE;
        let vol = Volume::new(
            [3, 4, 5],
            [0.625, 0.625, 3.6],
            [-87.25, 14.5, 3.125],
            IDENTITY_DIRECTION,
            data,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t2.nvol.json");
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, vol);
        // Payload truly is little-endian f32, x-fastest.
        let raw = std::fs::read(dir.path().join("t2.nvol.raw")).unwrap();
        assert_eq!(raw.len(), vol.num_voxels() * 4);
        assert_eq!(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]), 3.4e38);
    }

    #[test]
    fn payload_shorter_than_dims_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::axis_aligned([2, 2, 2], [1.0; 3], [0.0; 3], vec![1.0; 8]).unwrap();
        let path = dir.path().join("v.nvol.json");
        write_volume(&vol, &path).unwrap();
        std::fs::write(dir.path().join("v.nvol.raw"), vec![0u8; 7 * 4]).unwrap();
        match read_volume(&path) {
            Err(VolumeError::LengthMismatch { expected: 8, actual: 7 }) => {}
            other => panic!("expected LengthMismatch, got {other:?}"),
        }
    }

    #[test]
    fn zero_spacing_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nvol.json");
        std::fs::write(
            &path,
            r#"{"dims":[2,2,2],"spacing_mm":[0.0,1.0,1.0],"origin_mm":[0,0,0],
               "direction":[1,0,0,0,1,0,0,0,1],"dtype":"f32le","data_file":"v.nvol.raw"}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("v.nvol.raw"), vec![0u8; 32]).unwrap();
        assert!(matches!(read_volume(&path), Err(VolumeError::MalformedHeader(_))));
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nvol.json");
        std::fs::write(
            &path,
            r#"{"dims":[1,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],
               "direction":[1,0,0,0,1,0,0,0,1],"dtype":"f64be","data_file":"v.nvol.raw"}"#,
        )
        .unwrap();
        assert!(matches!(read_volume(&path), Err(VolumeError::UnsupportedDtype(_))));
    }

    #[test]
    fn findings_csv_round_trip_and_empty_labels() {
        let findings = vec![
            Finding {
                case_id: "case_000".into(),
                finding_id: 1,
                pos_world: [12.5, -3.25, 40.0],
                label: Some(1),
            },
            Finding {
                case_id: "case_001".into(),
                finding_id: 1,
                pos_world: [0.1, 0.2, 0.3],
                label: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("findings.csv");
        write_findings_csv(&findings, &path).unwrap();
        let back = read_findings_csv(&path).unwrap();
        assert_eq!(back, findings);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("case_id,finding_id,x_mm,y_mm,z_mm,label"));
    }

    #[test]
    fn bad_label_is_malformed_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("findings.csv");
        std::fs::write(&path, "case_id,finding_id,x_mm,y_mm,z_mm,label\nc,1,0,0,0,2\n").unwrap();
        assert!(matches!(read_findings_csv(&path), Err(VolumeError::MalformedRecord(_))));
    }

    #[test]
    fn exclusion_list_skips_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exclude.txt");
        std::fs::write(&path, "case_007\n\n  case_013\n").unwrap();
        assert_eq!(read_exclusion_list(&path).unwrap(), vec!["case_007", "case_013"]);
    }
}
