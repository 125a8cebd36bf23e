//! Preprocessing of channel-characteristic rasters and dataset persistence.
//!
//! Rasters are square, row-major, and indexed `[row][col]`. In-building
//! cells carry a per-characteristic sentinel placed below the normal range:
//! `min − 0.1·(max − min)`, which normalizes to exactly `−0.1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::rng;
use crate::scene::{SceneSample, Transmitter};

/// Normalized value of every sentinel cell.
pub const NORMALIZED_SENTINEL: f64 = -0.1;
/// Normalized values below this decode as in-building.
pub const IN_BUILDING_THRESHOLD: f64 = -0.05;

/// The seven co-registered characteristics, in file order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kind {
    H,
    Pl,
    Rp,
    Los,
    Ds,
    Phi,
    Theta,
}

impl Kind {
    pub const ALL: [Kind; 7] = [Kind::H, Kind::Pl, Kind::Rp, Kind::Los, Kind::Ds, Kind::Phi, Kind::Theta];
    /// Super-resolution targets in report order.
    pub const TARGETS: [Kind; 6] = [Kind::Pl, Kind::Rp, Kind::Ds, Kind::Phi, Kind::Theta, Kind::Los];
    pub const REGRESSION: [Kind; 5] = [Kind::Pl, Kind::Rp, Kind::Ds, Kind::Phi, Kind::Theta];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::H => "h",
            Kind::Pl => "pl",
            Kind::Rp => "rp",
            Kind::Los => "los",
            Kind::Ds => "ds",
            Kind::Phi => "phi",
            Kind::Theta => "theta",
        }
    }

    pub fn from_name(name: &str) -> Result<Kind> {
        Kind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::UnknownTarget(name.to_string()))
    }

    pub fn unit(self) -> &'static str {
        match self {
            Kind::H => "m",
            Kind::Pl | Kind::Rp => "dB",
            Kind::Los => "class",
            Kind::Ds => "ns",
            Kind::Phi | Kind::Theta => "deg",
        }
    }

    pub fn is_target(self) -> bool {
        self != Kind::H
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OverflowPolicy {
    ToMin,
    ToMax,
    None,
}

/// Normal range and overflow handling of one characteristic, in native units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicSpec {
    pub kind: Kind,
    pub min: f64,
    pub max: f64,
    pub overflow: OverflowPolicy,
}

impl CharacteristicSpec {
    pub fn default_for(kind: Kind) -> Self {
        use OverflowPolicy::*;
        let (min, max, overflow) = match kind {
            Kind::H => (0.0, 80.0, None),
            Kind::Pl => (-160.0, -40.0, ToMin),
            Kind::Rp => (-30.0, 0.0, ToMin),
            Kind::Los => (0.0, 1.0, None),
            Kind::Ds => (0.0, 500.0, ToMax),
            Kind::Phi => (0.0, 120.0, ToMax),
            Kind::Theta => (0.0, 30.0, ToMax),
        };
        CharacteristicSpec { kind, min, max, overflow }
    }

    pub fn defaults() -> [CharacteristicSpec; 7] {
        Kind::ALL.map(Self::default_for)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.min.is_finite() || !self.max.is_finite() || self.min >= self.max {
            return Err(Error::config(self.kind.name(), format!("normal range [{}, {}] is empty", self.min, self.max)));
        }
        Ok(())
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn sentinel(&self) -> f64 {
        self.min - 0.1 * self.range()
    }

    /// Exact match against the sentinel, tolerant to `f32` storage.
    pub fn is_sentinel(&self, value: f64) -> bool {
        self.kind.is_target() && (value - self.sentinel()).abs() <= 1e-6 * self.range()
    }

    pub fn sanitize_value(&self, v: f64) -> f64 {
        if self.is_sentinel(v) || (self.min..=self.max).contains(&v) {
            return v;
        }
        match self.overflow {
            OverflowPolicy::ToMin => self.min,
            OverflowPolicy::ToMax => self.max,
            OverflowPolicy::None => v,
        }
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        if self.is_sentinel(v) {
            NORMALIZED_SENTINEL
        } else {
            (v - self.min) / self.range()
        }
    }

    pub fn denormalize_value(&self, u: f64) -> f64 {
        self.min + u * self.range()
    }
}

/// A square single-characteristic raster in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub size: usize,
    pub values: Vec<f64>,
}

impl Map {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::Shape(format!("{}x{} map given {} values", size, size, values.len())));
        }
        Ok(Map { size, values })
    }

    pub fn from_f32(size: usize, values: &[f32]) -> Result<Self> {
        Map::new(size, values.iter().map(|&v| v as f64).collect())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }
}

/// Replaces out-of-range values per the overflow policy; sentinels untouched.
pub fn sanitize(map: &Map, spec: &CharacteristicSpec) -> Map {
    Map { size: map.size, values: map.values.iter().map(|&v| spec.sanitize_value(v)).collect() }
}

/// Linear map of `[min, max]` onto `[0, 1]`; sentinels become exactly `−0.1`.
pub fn normalize(map: &Map, spec: &CharacteristicSpec) -> Map {
    Map { size: map.size, values: map.values.iter().map(|&v| spec.normalize_value(v)).collect() }
}

pub fn denormalize(map: &Map, spec: &CharacteristicSpec) -> Map {
    Map { size: map.size, values: map.values.iter().map(|&u| spec.denormalize_value(u)).collect() }
}

/// HR → LR reduction by an integer `scale`.
///
/// Continuous kinds take the block mean over non-sentinel cells (an all-sentinel
/// block stays sentinel). LOS takes the block majority, ties going to NLOS.
/// Building height takes the plain block mean.
pub fn downsample(map: &Map, scale: usize, spec: &CharacteristicSpec) -> Result<Map> {
    if !matches!(scale, 2 | 4 | 8) {
        return Err(Error::InvalidArgument(format!("scale must be 2, 4 or 8, got {scale}")));
    }
    if !map.size.is_multiple_of(scale) {
        return Err(Error::InvalidArgument(format!("grid {} is not divisible by scale {scale}", map.size)));
    }
    let lr = map.size / scale;
    let mut out = Vec::with_capacity(lr * lr);
    for br in 0..lr {
        for bc in 0..lr {
            let block = (0..scale)
                .flat_map(|dr| (0..scale).map(move |dc| (br * scale + dr, bc * scale + dc)))
                .map(|(r, c)| map.get(r, c));
            out.push(reduce_block(block, spec));
        }
    }
    Map::new(lr, out)
}

/// Mean in ascending order, so the result does not depend on cell order and
/// downsampling commutes exactly with the dihedral transforms.
fn ordered_mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

fn reduce_block(block: impl Iterator<Item = f64>, spec: &CharacteristicSpec) -> f64 {
    match spec.kind {
        Kind::H => ordered_mean(block.collect()).unwrap_or(0.0),
        Kind::Los => {
            let (mut los, mut nlos) = (0usize, 0usize);
            for v in block.filter(|&v| !spec.is_sentinel(v)) {
                if v >= 0.5 {
                    los += 1;
                } else {
                    nlos += 1;
                }
            }
            match (los, nlos) {
                (0, 0) => spec.sentinel(),
                (l, n) if l > n => 1.0,
                _ => 0.0,
            }
        }
        _ => ordered_mean(block.filter(|&v| !spec.is_sentinel(v)).collect()).unwrap_or_else(|| spec.sentinel()),
    }
}

/// The six dihedral transforms used for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl Transform {
    pub const ALL: [Transform; 6] =
        [Transform::Identity, Transform::Rot90, Transform::Rot180, Transform::Rot270, Transform::FlipH, Transform::FlipV];

    /// Source cell of output cell `(r, c)` in an `n×n` raster.
    /// Rotations are counter-clockwise; `FlipH` mirrors columns, `FlipV` rows.
    pub fn source(self, n: usize, r: usize, c: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Transform::Identity => (r, c),
            Transform::Rot90 => (c, m - r),
            Transform::Rot180 => (m - r, m - c),
            Transform::Rot270 => (m - c, r),
            Transform::FlipH => (r, m - c),
            Transform::FlipV => (m - r, c),
        }
    }

    /// Where source cell `(r, c)` lands.
    pub fn destination(self, n: usize, r: usize, c: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Transform::Identity => (r, c),
            Transform::Rot90 => (m - c, r),
            Transform::Rot180 => (m - r, m - c),
            Transform::Rot270 => (c, m - r),
            Transform::FlipH => (r, m - c),
            Transform::FlipV => (m - r, c),
        }
    }

    pub fn apply<T: Copy>(self, n: usize, values: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = self.source(n, r, c);
                out.push(values[sr * n + sc]);
            }
        }
        out
    }

    pub fn apply_map(self, map: &Map) -> Map {
        Map { size: map.size, values: self.apply(map.size, &map.values) }
    }
}

pub fn transform_sample(sample: &SceneSample, t: Transform) -> SceneSample {
    let n = sample.grid_size;
    let rasters = sample.rasters.each_ref().map(|r| t.apply(n, r));
    let (row, col) = t.destination(n, sample.tx.row as usize, sample.tx.col as usize);
    SceneSample {
        grid_size: n,
        rasters,
        seed: sample.seed,
        tx: Transmitter { row: row as u32, col: col as u32, height_m: sample.tx.height_m },
    }
}

/// The sample under each of the six transforms, identity first.
pub fn augment(sample: &SceneSample) -> Vec<SceneSample> {
    Transform::ALL.iter().map(|&t| transform_sample(sample, t)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(name: &str) -> Result<Split> {
        match name.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

pub const FORMAT_VERSION: u16 = 1;
const MAGIC: [u8; 4] = *b"CSRD";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
    /// Split of each base scene; `None` until [`Dataset::split`] is called.
    pub assignment: Option<Vec<Split>>,
    pub specs: [CharacteristicSpec; 7],
    pub version: u16,
}

impl Dataset {
    pub fn new(samples: Vec<SceneSample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            if let Some(bad) = samples.iter().find(|s| s.grid_size != first.grid_size) {
                return Err(Error::Shape(format!(
                    "all samples must share grid size {}, found {}",
                    first.grid_size, bad.grid_size
                )));
            }
        }
        Ok(Dataset { samples, assignment: None, specs: CharacteristicSpec::defaults(), version: FORMAT_VERSION })
    }

    pub fn grid_size(&self) -> usize {
        self.samples.first().map_or(0, |s| s.grid_size)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn spec(&self, kind: Kind) -> &CharacteristicSpec {
        &self.specs[kind.index()]
    }

    /// Assigns base scenes to train/val/test. Counts use the largest-remainder
    /// rule; membership is a seeded shuffle. Augmentation happens later, per
    /// scene, so all variants of a scene share its split.
    pub fn split(mut self, ratios: [f64; 3], seed: u64) -> Result<Dataset> {
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
        }
        let n = self.samples.len();
        let wanted = ratios.iter().filter(|&&r| r > 0.0).count();
        if n < wanted {
            return Err(Error::InvalidArgument(format!("{n} scenes cannot fill {wanted} splits")));
        }
        let counts = split_counts(n, ratios);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, 0x59117));
        let mut assignment = vec![Split::Train; n];
        let labels = [Split::Train, Split::Val, Split::Test];
        let mut cursor = 0;
        for (label, count) in labels.iter().zip(counts) {
            for &i in &order[cursor..cursor + count] {
                assignment[i] = *label;
            }
            cursor += count;
        }
        self.assignment = Some(assignment);
        Ok(self)
    }

    pub fn indices(&self, split: Split) -> Result<Vec<usize>> {
        let assignment = self
            .assignment
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no split assignment".into()))?;
        Ok((0..assignment.len()).filter(|&i| assignment[i] == split).collect())
    }
}

fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    // every split with a positive ratio gets at least one scene
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            counts[i] = 1;
        }
    }
    while counts.iter().sum::<usize>() > n {
        let i = (0..3).max_by_key(|&i| counts[i]).expect("three splits");
        counts[i] -= 1;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    let mut k = 0;
    while counts.iter().sum::<usize>() < n {
        counts[order[k % 3]] += 1;
        k += 1;
    }
    counts
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let bytes = encode_dataset(dataset)?;
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let grid = dataset.grid_size();
    let mut out = Vec::with_capacity(14 + dataset.len() * (20 + 7 * 4 * grid * grid));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(dataset.len()).map_err(|_| too_large())?.to_le_bytes());
    out.extend_from_slice(&u32::try_from(grid).map_err(|_| too_large())?.to_le_bytes());
    for s in &dataset.samples {
        out.extend_from_slice(&s.seed.to_le_bytes());
        out.extend_from_slice(&s.tx.row.to_le_bytes());
        out.extend_from_slice(&s.tx.col.to_le_bytes());
        out.extend_from_slice(&s.tx.height_m.to_le_bytes());
        for raster in &s.rasters {
            for v in raster {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn too_large() -> Error {
    Error::InvalidArgument("dataset too large for the file format".into())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated(format!("ended inside {what} at byte {}", self.pos)).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.array("magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic { expected: MAGIC, found: magic }.into());
    }
    let version = u16::from_le_bytes(cur.array("version")?);
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch { expected: FORMAT_VERSION, found: version }.into());
    }
    let count = u32::from_le_bytes(cur.array("sample count")?) as usize;
    let grid = u32::from_le_bytes(cur.array("grid size")?) as usize;
    let cells = grid.checked_mul(grid).ok_or_else(|| FormatError::Malformed(format!("grid size {grid}")))?;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let seed = u64::from_le_bytes(cur.array("sample seed")?);
        let row = u32::from_le_bytes(cur.array("tx row")?);
        let col = u32::from_le_bytes(cur.array("tx col")?);
        let height_m = f32::from_le_bytes(cur.array("tx height")?);
        let mut rasters: [Vec<f32>; 7] = Default::default();
        for (k, raster) in rasters.iter_mut().enumerate() {
            let raw = cur.take(cells * 4, &format!("raster {} of sample {i}", Kind::ALL[k].name()))?;
            *raster = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        }
        samples.push(SceneSample { grid_size: grid, rasters, seed, tx: Transmitter { row, col, height_m } });
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - cur.pos)).into());
    }
    Dataset::new(samples)
}
