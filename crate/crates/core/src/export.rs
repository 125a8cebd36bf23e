//! Raster export as 16-bit PGM or CSV, with readers for round-tripping.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Kind, Split};
use crate::error::{Error, FormatError, Result};
use crate::train::{full_frame_input, prepare_scene, Predictor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Pgm,
    Csv,
}

impl ExportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pgm" => Ok(ExportFormat::Pgm),
            "csv" => Ok(ExportFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown export format `{other}`"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Pgm => "pgm",
            ExportFormat::Csv => "csv",
        }
    }
}

/// A square native-unit raster; `None` marks in-building cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub size: usize,
    pub cells: Vec<Option<f64>>,
}

impl Raster {
    pub fn new(size: usize, values: &[f64], valid: &[bool]) -> Result<Self> {
        if values.len() != size * size || valid.len() != values.len() {
            return Err(Error::Shape(format!("raster of side {size} needs {} cells", size * size)));
        }
        let cells = values.iter().zip(valid).map(|(&v, &ok)| ok.then_some(v)).collect();
        Ok(Raster { size, cells })
    }

    /// Minimum and maximum over valid cells.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.cells.iter().flatten().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}

const PGM_LEVELS: f64 = 65534.0;

/// P5 with maxval 65535. Valid cells map linearly onto 1..=65535, in-building
/// cells are 0, and a comment records the exact min and max.
pub fn encode_pgm(raster: &Raster) -> Vec<u8> {
    let (lo, hi) = raster.range().unwrap_or((0.0, 0.0));
    let span = hi - lo;
    let mut out = format!("P5\n# min={lo:?} max={hi:?}\n{0} {0}\n65535\n", raster.size).into_bytes();
    for cell in &raster.cells {
        let level: u16 = match cell {
            None => 0,
            Some(v) if span > 0.0 => 1 + ((v - lo) / span * PGM_LEVELS).round() as u16,
            Some(_) => 1,
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

/// Parsed PGM: raw levels plus the recorded range.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub size: usize,
    pub levels: Vec<u16>,
    pub min: f64,
    pub max: f64,
}

impl Pgm {
    /// Reconstructs native values; level 0 becomes `None`.
    pub fn dequantize(&self) -> Raster {
        let span = self.max - self.min;
        let cells = self
            .levels
            .iter()
            .map(|&l| (l > 0).then(|| self.min + (l - 1) as f64 / PGM_LEVELS * span))
            .collect();
        Raster { size: self.size, cells }
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    FormatError::Malformed(msg.into()).into()
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut pos = 0;
    let mut line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| FormatError::Truncated("PGM header".into()))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| malformed("PGM header is not UTF-8"))
    };
    if line()? != "P5" {
        return Err(malformed("not a P5 PGM"));
    }
    let comment = line()?;
    let field = |key: &str| -> Result<f64> {
        comment
            .split_whitespace()
            .find_map(|t| t.strip_prefix(key))
            .ok_or_else(|| malformed(format!("missing `{key}` in PGM comment")))?
            .parse()
            .map_err(|_| malformed(format!("bad `{key}` in PGM comment")))
    };
    let (min, max) = (field("min=")?, field("max=")?);
    let dims: Vec<usize> = line()?.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    if dims.len() != 2 || dims[0] != dims[1] {
        return Err(malformed("PGM must be square"));
    }
    if line()? != "65535" {
        return Err(malformed("PGM maxval must be 65535"));
    }
    let size = dims[0];
    let body = &bytes[pos..];
    if body.len() != 2 * size * size {
        return Err(FormatError::Truncated(format!("PGM body has {} bytes, expected {}", body.len(), 2 * size * size)).into());
    }
    let levels = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok(Pgm { size, levels, min, max })
}

/// One line per raster row; values with 9 significant digits, `NA` in buildings.
pub fn encode_csv(raster: &Raster) -> String {
    let mut s = String::new();
    for row in raster.cells.chunks(raster.size.max(1)) {
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            match cell {
                Some(v) => {
                    let _ = write!(s, "{v:.8e}");
                }
                None => s.push_str("NA"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn decode_csv(text: &str) -> Result<Raster> {
    let mut cells = Vec::new();
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.is_empty()) {
        rows += 1;
        for tok in line.split(',') {
            cells.push(match tok.trim() {
                "NA" => None,
                t => Some(t.parse::<f64>().map_err(|_| malformed(format!("bad CSV value `{t}`")))?),
            });
        }
    }
    if cells.len() != rows * rows {
        return Err(malformed(format!("CSV is not square: {rows} rows, {} cells", cells.len())));
    }
    Ok(Raster { size: rows, cells })
}

/// Writes each named raster as `<dir>/<name>.<ext>` and returns the paths.
pub fn export_maps(rasters: &[(String, Raster)], dir: &Path, format: ExportFormat) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(rasters.len());
    for (name, raster) in rasters {
        let path = dir.join(format!("{name}.{}", format.extension()));
        let bytes = match format {
            ExportFormat::Pgm => encode_pgm(raster),
            ExportFormat::Csv => encode_csv(raster).into_bytes(),
        };
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Ground-truth rasters of one scene: the seven characteristics.
pub fn scene_rasters(dataset: &Dataset, index: usize) -> Result<Vec<(String, Raster)>> {
    check_index(dataset, index)?;
    let scene = prepare_scene(dataset, index);
    let all = vec![true; scene.mask.len()];
    Kind::ALL
        .iter()
        .map(|&k| {
            let valid = if k.is_target() { &scene.mask } else { &all };
            Ok((k.name().to_string(), Raster::new(scene.size, &scene.native[k.index()], valid)?))
        })
        .collect()
}

/// Super-resolved target rasters of one scene from `predictor`, in native
/// units, with in-building cells blanked.
pub fn predicted_rasters(predictor: &dyn Predictor, dataset: &Dataset, index: usize) -> Result<Vec<(String, Raster)>> {
    check_index(dataset, index)?;
    let scene = prepare_scene(dataset, index);
    let input = full_frame_input(&scene, predictor.scale(), &dataset.specs)?;
    let out = predictor.predict(&input, &scene)?;
    let mut rasters = Vec::with_capacity(6);
    for (k, kind) in Kind::REGRESSION.iter().enumerate() {
        let spec = dataset.spec(*kind);
        let native: Vec<f64> = out.regression[k].iter().map(|&u| spec.denormalize_value(u)).collect();
        rasters.push((kind.name().to_string(), Raster::new(scene.size, &native, &scene.mask)?));
    }
    let los: Vec<f64> = out.los.iter().map(|&c| c as f64).collect();
    rasters.push((Kind::Los.name().to_string(), Raster::new(scene.size, &los, &scene.mask)?));
    Ok(rasters)
}

fn check_index(dataset: &Dataset, index: usize) -> Result<()> {
    if index >= dataset.len() {
        return Err(Error::InvalidArgument(format!("scene {index} out of range (dataset has {})", dataset.len())));
    }
    Ok(())
}

/// First scene of `split`, or scene 0 when the dataset is unsplit.
pub fn first_of_split(dataset: &Dataset, split: Split) -> usize {
    dataset.indices(split).ok().and_then(|v| v.first().copied()).unwrap_or(0)
}
