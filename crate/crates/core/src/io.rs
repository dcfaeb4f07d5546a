//! File formats: the binary panel tensor, per-subject CSV files with a manifest,
//! the covariate CSV, and a generic binary tensor container used for network
//! artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::data::PanelDataset;
use crate::error::{Error, Result};

pub const PANEL_MAGIC: &[u8; 4] = b"BPMM";
pub const TENSOR_MAGIC: &[u8; 4] = b"BPMT";
const HEADER_LEN: usize = 32;
const MAX_RANK: usize = 6;

/// Options applied while loading a panel.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Subtract the per-subject, per-node mean.
    pub demean: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { demean: true }
    }
}

/// Loads a panel from either a binary tensor file or a CSV manifest, plus a
/// covariate CSV.
///
/// Binary files are recognised by their magic bytes; anything else is parsed as
/// a manifest with header `subject_id,path` whose paths are relative to the
/// manifest's directory. Covariate rows are matched to subjects by id; for
/// binary data the covariate file's row order defines the subject ids.
pub fn load_panel(data_path: &Path, covariate_path: &Path, opts: LoadOptions) -> Result<PanelDataset> {
    let (cov_ids, covariates) = read_covariates(covariate_path)?;
    let panel = if is_binary_panel(data_path)? {
        let data = read_panel_binary(data_path)?;
        PanelDataset::new(data, covariates, None, cov_ids)?
    } else {
        let (ids, data) = read_panel_manifest(data_path)?;
        let covariates = align_covariates(&ids, &cov_ids, &covariates)?;
        PanelDataset::new(data, covariates, None, ids)?
    };
    Ok(if opts.demean { panel.demeaned() } else { panel })
}

fn is_binary_panel(path: &Path) -> Result<bool> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    let n = f.read(&mut magic)?;
    Ok(n == 4 && &magic == PANEL_MAGIC)
}

fn align_covariates(ids: &[String], cov_ids: &[String], cov: &Array2<f64>) -> Result<Array2<f64>> {
    if ids.len() != cov_ids.len() {
        return Err(Error::DimensionMismatch(format!(
            "covariate file has {} rows but data has {} subjects",
            cov_ids.len(),
            ids.len()
        )));
    }
    let mut out = Array2::zeros((ids.len(), cov.ncols()));
    for (i, id) in ids.iter().enumerate() {
        let row = cov_ids.iter().position(|c| c == id).ok_or_else(|| {
            Error::DimensionMismatch(format!("subject {id:?} has no covariate row"))
        })?;
        out.row_mut(i).assign(&cov.row(row));
    }
    Ok(out)
}

fn parse_cell(s: &str, location: impl FnOnce() -> String) -> Result<f64> {
    let t = s.trim();
    match t.parse::<f64>() {
        Ok(x) if x.is_nan() => Err(Error::NonNumeric {
            value: t.to_string(),
            location: format!("{} (NaN present)", location()),
        }),
        Ok(x) if x.is_infinite() => Err(Error::NonNumeric {
            value: t.to_string(),
            location: location(),
        }),
        Ok(x) => Ok(x),
        Err(_) => Err(Error::NonNumeric {
            value: t.to_string(),
            location: location(),
        }),
    }
}

/// Reads a covariate CSV: header row, first column subject id, then `q`
/// numeric columns.
pub fn read_covariates(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let q = rdr.headers()?.len().saturating_sub(1);
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != q + 1 {
            return Err(Error::DimensionMismatch(format!(
                "covariate row {r} has {} fields, expected {}",
                rec.len(),
                q + 1
            )));
        }
        ids.push(rec[0].trim().to_string());
        for c in 0..q {
            values.push(parse_cell(&rec[c + 1], || {
                format!("{}: covariate row {r}, column {c}", path.display())
            })?);
        }
    }
    let n = ids.len();
    let cov = Array2::from_shape_vec((n, q), values).expect("row lengths checked");
    Ok((ids, cov))
}

pub fn write_covariates(path: &Path, ids: &[String], cov: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject_id".to_string()];
    header.extend((0..cov.ncols()).map(|j| format!("x{}", j + 1)));
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(cov.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one subject's CSV (rows = nodes, columns = scans, no header).
pub fn read_subject_csv(path: &Path, subject: usize) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (node, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(scan, cell)| {
                parse_cell(cell, || {
                    format!("subject {subject}, node {node}, scan {scan}")
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::DimensionMismatch(format!(
                    "subject {subject}: node {node} has {} scans, node 0 has {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let v = rows.len();
    let t = rows.first().map_or(0, Vec::len);
    Ok(Array2::from_shape_vec((v, t), rows.concat()).expect("rectangular"))
}

fn read_panel_manifest(path: &Path) -> Result<(Vec<String>, Array3<f64>)> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut ids = Vec::new();
    let mut blocks: Vec<Array2<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Format(format!(
                "manifest row {i} must have fields subject_id,path"
            )));
        }
        ids.push(rec[0].trim().to_string());
        let p = PathBuf::from(rec[1].trim());
        let p = if p.is_absolute() { p } else { base.join(p) };
        let block = read_subject_csv(&p, i)?;
        if let Some(first) = blocks.first() {
            if first.dim() != block.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "subject {i} has shape {:?}, subject 0 has {:?}",
                    block.dim(),
                    first.dim()
                )));
            }
        }
        blocks.push(block);
    }
    if blocks.is_empty() {
        return Err(Error::Format("manifest lists no subjects".into()));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let data = ndarray::stack(ndarray::Axis(0), &views)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    Ok((ids, data))
}

/// Writes one CSV per subject plus `manifest.csv` and `covariates.csv` into `dir`.
pub fn save_panel_csv(panel: &PanelDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
    manifest.write_record(["subject_id", "path"])?;
    for (i, id) in panel.subject_ids().iter().enumerate() {
        let name = format!("subject_{i:04}.csv");
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(dir.join(&name))?;
        for row in panel.subject(i).rows() {
            w.write_record(row.iter().map(|x| x.to_string()))?;
        }
        w.flush()?;
        manifest.write_record([id.as_str(), name.as_str()])?;
    }
    manifest.flush()?;
    write_covariates(&dir.join("covariates.csv"), panel.subject_ids(), panel.covariates())
}

/// Writes the binary panel tensor: 32-byte header (magic, u32 N, V, T, u64
/// reserved, zero padding) followed by little-endian f64 in (subject, node,
/// scan) order.
pub fn write_panel_binary(path: &Path, data: &Array3<f64>) -> Result<()> {
    let (n, v, t) = data.dim();
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(PANEL_MAGIC);
    for (k, d) in [n, v, t].into_iter().enumerate() {
        header[4 + 4 * k..8 + 4 * k].copy_from_slice(&dim_u32(d)?.to_le_bytes());
    }
    w.write_all(&header)?;
    for x in data.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_panel_binary(path: &Path) -> Result<Array3<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated panel header".into()))?;
    if &header[..4] != PANEL_MAGIC {
        return Err(Error::Format("bad panel magic".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (n, v, t) = (dim(0), dim(1), dim(2));
    let values = read_f64s(&mut r, n * v * t)?;
    Ok(Array3::from_shape_vec((n, v, t), values).expect("length checked"))
}

/// Saves a panel's data tensor in binary form and its covariates as CSV.
pub fn save_panel_binary(panel: &PanelDataset, data_path: &Path, covariate_path: &Path) -> Result<()> {
    write_panel_binary(data_path, panel.data())?;
    write_covariates(covariate_path, panel.subject_ids(), panel.covariates())
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() != count * 8 {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            count * 8,
            buf.len()
        )));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes an arbitrary-rank (≤ 6) f64 tensor: 32-byte header (magic `BPMT`,
/// u32 rank, up to six u32 dimensions) followed by little-endian values in
/// row-major order.
pub fn write_tensor(path: &Path, data: &ArrayD<f64>) -> Result<()> {
    let shape = data.shape();
    if shape.len() > MAX_RANK {
        return Err(Error::Format(format!("rank {} exceeds {MAX_RANK}", shape.len())));
    }
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(TENSOR_MAGIC);
    header[4..8].copy_from_slice(&(shape.len() as u32).to_le_bytes());
    for (k, &d) in shape.iter().enumerate() {
        header[8 + 4 * k..12 + 4 * k].copy_from_slice(&dim_u32(d)?.to_le_bytes());
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header)?;
    for x in data.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated tensor header".into()))?;
    if &header[..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let rank = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|k| u32::from_le_bytes(header[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let values = read_f64s(&mut r, shape.iter().product())?;
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), values).expect("length checked"))
}
