//! Cohort manifests (JSON lines) and BAGF feature-matrix files.
//!
//! A BAGF file is little-endian: the magic `BAGF`, a `u16` version (1),
//! `u32` rows, `u32` cols, then `rows · cols` `f32` values in row-major order.
//!
//! The manifest holds one JSON object per patient:
//! `{"id": str, "time": float, "censor": 0|1, "path_feat": str|null, "gene_feat": str|null}`.
//! Feature paths are resolved relative to the manifest's directory. An
//! optional first line `{"dispro_manifest": 1, "d_pathology": .., "d_genomics": ..}`
//! pins the expected feature widths; without it they are taken from the
//! first bag of each modality.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Bag, Cohort, Modality, PatientRecord};
use crate::error::{Error, Result};
use crate::survival::Censorship;

pub const BAGF_MAGIC: &[u8; 4] = b"BAGF";
pub const BAGF_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

pub fn write_bag<W: Write>(mut w: W, instances: &Array2<f32>) -> io::Result<()> {
    let (rows, cols) = instances.dim();
    w.write_all(BAGF_MAGIC)?;
    w.write_all(&BAGF_VERSION.to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in instances.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Parses a BAGF buffer. The error string names the failed check.
pub fn read_bag(bytes: &[u8]) -> std::result::Result<Array2<f32>, String> {
    if bytes.len() < HEADER_LEN {
        return Err("truncated header".into());
    }
    if &bytes[..4] != BAGF_MAGIC {
        return Err("corrupt magic bytes (expected BAGF)".into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BAGF_VERSION {
        return Err(format!("unsupported BAGF version {version}"));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err("empty bag".into());
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols * 4 {
        return Err(format!(
            "expected {} bytes of features, found {}",
            rows * cols * 4,
            body.len()
        ));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err("non-finite feature value".into());
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    dispro_manifest: u32,
    d_pathology: usize,
    d_genomics: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    time: f64,
    censor: u8,
    path_feat: Option<String>,
    gene_feat: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path_present: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gene_present: Option<bool>,
}

fn load_feature(
    base: &Path,
    patient: &str,
    modality: Modality,
    path: Option<&str>,
    present: Option<bool>,
    width: &mut Option<usize>,
) -> Result<Option<Bag>> {
    let present = present.unwrap_or(path.is_some());
    let path = match (present, path) {
        (false, _) => return Ok(None),
        (true, Some(p)) => base.join(p),
        (true, None) => {
            return Err(Error::Feature {
                patient: patient.to_string(),
                path: PathBuf::new(),
                reason: format!("{modality} flagged present but has no feature path"),
            })
        }
    };
    let fail = |reason: String| Error::Feature {
        patient: patient.to_string(),
        path: path.clone(),
        reason,
    };
    let bytes = fs::read(&path).map_err(|e| fail(e.to_string()))?;
    let instances = read_bag(&bytes).map_err(fail)?;
    match width {
        Some(w) if *w != instances.ncols() => {
            return Err(fail(format!(
                "{modality} width mismatch: expected {w}, found {}",
                instances.ncols()
            )))
        }
        Some(_) => {}
        None => *width = Some(instances.ncols()),
    }
    Bag::new(patient, modality, instances)
        .map(Some)
        .map_err(|e| fail(e.to_string()))
}

/// Reads a manifest and every referenced feature file, then discretizes
/// survival times into `n_intervals` bands.
pub fn load_manifest(path: impl AsRef<Path>, n_intervals: usize) -> Result<Cohort> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut d_p = None;
    let mut d_g = None;
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        if value.get("dispro_manifest").is_some() {
            let header: ManifestHeader = serde_json::from_value(value).map_err(|e| Error::Manifest {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
            d_p = Some(header.d_pathology);
            d_g = Some(header.d_genomics);
            continue;
        }
        let rec: ManifestRecord = serde_json::from_value(value).map_err(|e| Error::Manifest {
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        let censorship = Censorship::from_bit(rec.censor).ok_or_else(|| Error::Manifest {
            line: lineno + 1,
            reason: format!("censor must be 0 or 1, got {}", rec.censor),
        })?;
        let pathology = load_feature(
            base,
            &rec.id,
            Modality::Pathology,
            rec.path_feat.as_deref(),
            rec.path_present,
            &mut d_p,
        )?;
        let genomics = load_feature(
            base,
            &rec.id,
            Modality::Genomics,
            rec.gene_feat.as_deref(),
            rec.gene_present,
            &mut d_g,
        )?;
        records.push(PatientRecord {
            id: rec.id,
            pathology,
            genomics,
            time_months: rec.time,
            censorship,
        });
    }
    Cohort::new(records, n_intervals, d_p.unwrap_or(0), d_g.unwrap_or(0))
}

/// Writes `manifest.jsonl` and one BAGF file per bag under `dir/features`.
pub fn write_manifest(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("features"))?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = io::BufWriter::new(fs::File::create(&manifest)?);
    serde_json::to_writer(
        &mut out,
        &ManifestHeader {
            dispro_manifest: 1,
            d_pathology: cohort.width(Modality::Pathology),
            d_genomics: cohort.width(Modality::Genomics),
        },
    )?;
    out.write_all(b"\n")?;
    for p in cohort.patients() {
        let feature = |bag: &Option<Bag>, modality: Modality| -> Result<Option<String>> {
            let Some(bag) = bag else { return Ok(None) };
            let rel = format!("features/{}_{}.bagf", p.id, modality.tag());
            let mut file = io::BufWriter::new(fs::File::create(dir.join(&rel))?);
            write_bag(&mut file, bag.instances())?;
            file.flush()?;
            Ok(Some(rel))
        };
        let rec = ManifestRecord {
            id: p.id.clone(),
            time: p.label.time_months,
            censor: p.label.censorship.bit(),
            path_feat: feature(&p.pathology, Modality::Pathology)?,
            gene_feat: feature(&p.genomics, Modality::Genomics)?,
            path_present: None,
            gene_present: None,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest)
}
