//! Synthetic urban scenes and their channel-characteristic rasters.
//!
//! Buildings are non-overlapping axis-aligned rectangles separated by at
//! least one street cell. Visibility is decided by walking the grid from the
//! transmitter to each receiver cell with an Amanatides–Woo traversal and
//! comparing building heights with the straight ray's height. The channel
//! characteristics are closed-form surrogates driven by distance, wall
//! crossings, LOS state, and local building clutter.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{CharacteristicSpec, Kind};
use crate::error::{Error, Result};
use crate::rng;

/// Receiver antenna height above ground.
pub const RX_HEIGHT_M: f64 = 1.5;
const MAX_PLACEMENT_ATTEMPTS: usize = 20_000;
const BUILDING_HEIGHT_M: (f64, f64) = (8.0, 60.0);
const TX_HEIGHT_M: (f64, f64) = (10.0, 30.0);
/// Correlation length of the shadowing field, in cells.
const SHADOW_SIGMA_CELLS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transmitter {
    pub row: u32,
    pub col: u32,
    pub height_m: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UrbanScene {
    pub grid_size: usize,
    pub cell_m: f64,
    /// Building id + 1 per cell, 0 on open ground.
    pub occupancy: Vec<u32>,
    pub footprints: Vec<Rect>,
    pub heights: Vec<f64>,
    pub tx: Transmitter,
    pub seed: u64,
    /// Set when the target coverage was not reached within the attempt cap.
    pub coverage_shortfall: bool,
}

impl UrbanScene {
    /// Scene without buildings, transmitter at the given cell.
    pub fn open(grid_size: usize, tx: Transmitter) -> Self {
        UrbanScene {
            grid_size,
            cell_m: 2.0,
            occupancy: vec![0; grid_size * grid_size],
            footprints: vec![],
            heights: vec![],
            tx,
            seed: 0,
            coverage_shortfall: false,
        }
    }

    /// Adds a building; fails if it leaves the grid, overlaps another building,
    /// or covers the transmitter.
    pub fn add_building(&mut self, rect: Rect, height_m: f64) -> Result<()> {
        let g = self.grid_size;
        if rect.rows == 0 || rect.cols == 0 || rect.row + rect.rows > g || rect.col + rect.cols > g {
            return Err(Error::InvalidArgument(format!("building {rect:?} does not fit a {g}x{g} grid")));
        }
        let covers_tx = (rect.row..rect.row + rect.rows).contains(&(self.tx.row as usize))
            && (rect.col..rect.col + rect.cols).contains(&(self.tx.col as usize));
        if covers_tx {
            return Err(Error::InvalidArgument("building covers the transmitter".into()));
        }
        let cells = || (rect.row..rect.row + rect.rows).flat_map(|r| (rect.col..rect.col + rect.cols).map(move |c| (r, c)));
        if cells().any(|(r, c)| self.occupancy[r * g + c] != 0) {
            return Err(Error::InvalidArgument(format!("building {rect:?} overlaps another")));
        }
        self.footprints.push(rect);
        self.heights.push(height_m);
        let id = self.footprints.len() as u32;
        for (r, c) in cells() {
            self.occupancy[r * g + c] = id;
        }
        Ok(())
    }

    pub fn building_at(&self, row: usize, col: usize) -> Option<usize> {
        match self.occupancy[row * self.grid_size + col] {
            0 => None,
            id => Some(id as usize - 1),
        }
    }

    pub fn height_at(&self, row: usize, col: usize) -> f64 {
        self.building_at(row, col).map_or(0.0, |b| self.heights[b])
    }

    pub fn coverage(&self) -> f64 {
        self.occupancy.iter().filter(|&&v| v != 0).count() as f64 / self.occupancy.len() as f64
    }
}

/// Rejection-samples building rectangles until `density` of the grid is built
/// (or the attempt cap is hit), then places the transmitter on open ground.
pub fn generate_scene(seed: u64, grid_size: usize, density: f64) -> Result<UrbanScene> {
    if grid_size < 16 {
        return Err(Error::InvalidArgument(format!("grid_size must be >= 16, got {grid_size}")));
    }
    if !(0.0..0.6).contains(&density) {
        return Err(Error::InvalidArgument(format!("density must be in [0, 0.6), got {density}")));
    }
    let g = grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_side = (g / 32).max(2);
    let max_side = (g / 8).max(min_side + 1);
    let target = (density * (g * g) as f64).ceil() as usize;

    let mut occupancy = vec![0u32; g * g];
    let mut footprints = Vec::new();
    let mut heights = Vec::new();
    let mut built = 0usize;
    let mut attempts = 0;
    while built < target && attempts < MAX_PLACEMENT_ATTEMPTS {
        attempts += 1;
        let rows = rng.random_range(min_side..=max_side);
        let cols = rng.random_range(min_side..=max_side);
        let row = rng.random_range(0..=g - rows);
        let col = rng.random_range(0..=g - cols);
        // keep one street cell between buildings
        let (r0, r1) = (row.saturating_sub(1), (row + rows + 1).min(g));
        let (c0, c1) = (col.saturating_sub(1), (col + cols + 1).min(g));
        if (r0..r1).any(|r| occupancy[r * g + c0..r * g + c1].iter().any(|&v| v != 0)) {
            continue;
        }
        footprints.push(Rect { row, col, rows, cols });
        heights.push(rng.random_range(BUILDING_HEIGHT_M.0..BUILDING_HEIGHT_M.1));
        let id = footprints.len() as u32;
        for r in row..row + rows {
            occupancy[r * g + col..r * g + col + cols].fill(id);
        }
        built += rows * cols;
    }
    let coverage_shortfall = built < target;
    if coverage_shortfall {
        log::warn!("scene {seed:#x}: coverage {built}/{target} cells after {attempts} attempts");
    }

    let open: Vec<usize> = (0..g * g).filter(|&i| occupancy[i] == 0).collect();
    if open.is_empty() {
        return Err(Error::InvalidArgument("scene has no open cell for the transmitter".into()));
    }
    let spot = open[rng.random_range(0..open.len())];
    let tx = Transmitter {
        row: (spot / g) as u32,
        col: (spot % g) as u32,
        height_m: rng.random_range(TX_HEIGHT_M.0..TX_HEIGHT_M.1) as f32,
    };
    Ok(UrbanScene { grid_size: g, cell_m: 2.0, occupancy, footprints, heights, tx, seed, coverage_shortfall })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    Los,
    Nlos,
    /// The queried cell is inside a building.
    Inside,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LosTrace {
    pub visibility: Visibility,
    /// Number of times the ray enters a building taller than itself.
    pub walls: u32,
}

/// Walks the grid from the transmitter cell centre to the centre of
/// `(row, col)` and counts entries into blocking buildings. A traversed
/// building cell blocks when its height exceeds the ray's lowest height
/// inside that cell.
pub fn trace_los(scene: &UrbanScene, row: usize, col: usize) -> Result<LosTrace> {
    let g = scene.grid_size;
    if row >= g || col >= g {
        return Err(Error::InvalidArgument(format!("cell ({row}, {col}) outside {g}x{g} grid")));
    }
    if scene.building_at(row, col).is_some() {
        return Ok(LosTrace { visibility: Visibility::Inside, walls: 0 });
    }
    let (tr, tc) = (scene.tx.row as usize, scene.tx.col as usize);
    let tx_h = scene.tx.height_m as f64;
    let ray_height = |t: f64| tx_h + (RX_HEIGHT_M - tx_h) * t;

    // x runs along columns, y along rows, in cell units
    let (x0, y0) = (tc as f64 + 0.5, tr as f64 + 0.5);
    let (dx, dy) = (col as f64 - tc as f64, row as f64 - tr as f64);
    let step_x: isize = if dx > 0.0 { 1 } else { -1 };
    let step_y: isize = if dy > 0.0 { 1 } else { -1 };
    let delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
    let boundary = |pos: f64, step: isize, d: f64| -> f64 {
        if d == 0.0 {
            f64::INFINITY
        } else {
            let next = if step > 0 { pos.floor() + 1.0 } else { pos.floor() };
            (next - pos) / d
        }
    };
    let mut t_max_x = boundary(x0, step_x, dx);
    let mut t_max_y = boundary(y0, step_y, dy);
    let (mut cx, mut cy) = (tc as isize, tr as isize);
    let mut t_in = 0.0;
    let mut walls = 0u32;
    let mut prev_blocking: Option<usize> = None;
    let max_steps = (dx.abs() + dy.abs()) as usize + 2;

    for _ in 0..=max_steps {
        if (cx as usize, cy as usize) == (col, row) {
            break;
        }
        let t_out = t_max_x.min(t_max_y).min(1.0);
        let (r, c) = (cy as usize, cx as usize);
        let blocking = match scene.building_at(r, c) {
            Some(b) if (r, c) != (tr, tc) => {
                let lowest = ray_height(t_in).min(ray_height(t_out));
                (scene.heights[b] > lowest).then_some(b)
            }
            _ => None,
        };
        if let Some(b) = blocking {
            if prev_blocking != Some(b) {
                walls += 1;
            }
        }
        prev_blocking = blocking;
        t_in = t_out;
        if t_max_x < t_max_y {
            cx += step_x;
            t_max_x += delta_x;
        } else {
            cy += step_y;
            t_max_y += delta_y;
        }
        if cx < 0 || cy < 0 || cx as usize >= g || cy as usize >= g {
            break;
        }
    }
    let visibility = if walls == 0 { Visibility::Los } else { Visibility::Nlos };
    Ok(LosTrace { visibility, walls })
}

/// Per-characteristic clutter slopes of the surrogate model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClutterGain {
    pub ds: f64,
    pub phi: f64,
    pub theta: f64,
    pub rp: f64,
}

impl Default for ClutterGain {
    fn default() -> Self {
        ClutterGain { ds: 4.0, phi: 60.0, theta: 12.0, rp: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationParams {
    pub frequency_mhz: f64,
    pub wall_loss_db: f64,
    pub shadow_sigma_db: f64,
    pub ds0_ns: f64,
    pub clutter_gain: ClutterGain,
    /// Side of the square clutter window, in cells (odd).
    pub clutter_window: usize,
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams {
            frequency_mhz: 2600.0,
            wall_loss_db: 15.0,
            shadow_sigma_db: 3.0,
            ds0_ns: 40.0,
            clutter_gain: ClutterGain::default(),
            clutter_window: 11,
        }
    }
}

impl PropagationParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("frequency_mhz", self.frequency_mhz),
            ("wall_loss_db", self.wall_loss_db),
            ("shadow_sigma_db", self.shadow_sigma_db),
            ("ds0_ns", self.ds0_ns),
            ("clutter_gain.ds", self.clutter_gain.ds),
            ("clutter_gain.phi", self.clutter_gain.phi),
            ("clutter_gain.theta", self.clutter_gain.theta),
            ("clutter_gain.rp", self.clutter_gain.rp),
        ];
        for (field, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if self.clutter_window.is_multiple_of(2) {
            return Err(Error::config("clutter_window", "must be odd"));
        }
        Ok(())
    }
}

/// Seven co-registered HR rasters of one scene, stored as `f32` in
/// [`Kind::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub grid_size: usize,
    pub rasters: [Vec<f32>; 7],
    pub seed: u64,
    pub tx: Transmitter,
}

impl SceneSample {
    pub fn raster(&self, kind: Kind) -> &[f32] {
        &self.rasters[kind.index()]
    }
}

/// Free-space path gain in dB at distance `d_m` (negative).
pub fn free_space_gain_db(d_m: f64, frequency_mhz: f64) -> f64 {
    -(20.0 * d_m.log10() + 20.0 * frequency_mhz.log10() - 27.55)
}

/// Path gain for a receiver at 3-D distance `d_m` behind `walls` walls.
pub fn path_gain_db(d_m: f64, walls: u32, shadow_db: f64, params: &PropagationParams) -> f64 {
    free_space_gain_db(d_m, params.frequency_mhz) - walls as f64 * params.wall_loss_db - shadow_db
}

/// DS, φ, θ and R_p for a receiver with clutter fraction `clutter`.
pub fn spreads(clutter: f64, nlos: bool, params: &PropagationParams) -> [f64; 4] {
    let n = if nlos { 1.0 } else { 0.0 };
    let k = &params.clutter_gain;
    [
        params.ds0_ns * (1.0 + k.ds * clutter + 2.0 * n),
        10.0 + k.phi * clutter + 20.0 * n,
        3.0 + k.theta * clutter + 6.0 * n,
        -1.0 - k.rp * clutter - 8.0 * n,
    ]
}

/// Fraction of built cells in a `window×window` neighbourhood, clipped to the grid.
pub fn clutter_map(scene: &UrbanScene, window: usize) -> Vec<f64> {
    let g = scene.grid_size;
    let half = window / 2;
    // summed-area table of occupancy
    let mut sat = vec![0u32; (g + 1) * (g + 1)];
    for r in 0..g {
        for c in 0..g {
            let occ = (scene.occupancy[r * g + c] != 0) as u32;
            sat[(r + 1) * (g + 1) + c + 1] = occ + sat[r * (g + 1) + c + 1] + sat[(r + 1) * (g + 1) + c] - sat[r * (g + 1) + c];
        }
    }
    let mut out = vec![0.0; g * g];
    for r in 0..g {
        for c in 0..g {
            let (r0, r1) = (r.saturating_sub(half), (r + half + 1).min(g));
            let (c0, c1) = (c.saturating_sub(half), (c + half + 1).min(g));
            let built = sat[r1 * (g + 1) + c1] + sat[r0 * (g + 1) + c0] - sat[r0 * (g + 1) + c1] - sat[r1 * (g + 1) + c0];
            out[r * g + c] = built as f64 / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    out
}

/// Stationary Gaussian-smoothed noise with standard deviation `sigma`.
pub fn shadow_field(seed: u64, grid_size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * SHADOW_SIGMA_CELLS).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * (d / SHADOW_SIGMA_CELLS).powi(2)).exp()
        })
        .collect();
    // unit white noise through the 2-D kernel has variance (Σ k²)²
    let gain = kernel.iter().map(|k| k * k).sum::<f64>();
    let g = grid_size;
    let padded = g + 2 * radius;
    let mut rng = rng::stream(seed, 0x5AD0);
    let noise: Vec<f64> = (0..padded * padded).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut rows_done = vec![0.0; padded * g];
    for r in 0..padded {
        for c in 0..g {
            rows_done[r * g + c] = kernel.iter().enumerate().map(|(i, k)| k * noise[r * padded + c + i]).sum();
        }
    }
    let mut out = vec![0.0; g * g];
    for r in 0..g {
        for c in 0..g {
            let v: f64 = kernel.iter().enumerate().map(|(i, k)| k * rows_done[(r + i) * g + c]).sum();
            out[r * g + c] = v * sigma / gain;
        }
    }
    out
}

/// Evaluates the seven rasters of `scene`.
pub fn synthesize_characteristics(scene: &UrbanScene, params: &PropagationParams) -> Result<SceneSample> {
    params.validate()?;
    let g = scene.grid_size;
    let specs = CharacteristicSpec::defaults();
    let clutter = clutter_map(scene, params.clutter_window);
    let shadow = shadow_field(scene.seed, g, params.shadow_sigma_db);
    let mut rasters: [Vec<f32>; 7] = Default::default();
    for raster in rasters.iter_mut() {
        raster.reserve_exact(g * g);
    }
    let tx_h = scene.tx.height_m as f64;
    for r in 0..g {
        for c in 0..g {
            let i = r * g + c;
            let trace = trace_los(scene, r, c)?;
            let mut values = [0.0f64; 7];
            values[Kind::H.index()] = scene.height_at(r, c);
            if trace.visibility == Visibility::Inside {
                for kind in Kind::TARGETS {
                    values[kind.index()] = specs[kind.index()].sentinel();
                }
            } else {
                let nlos = trace.visibility == Visibility::Nlos;
                let dr = (r as f64 - scene.tx.row as f64) * scene.cell_m;
                let dc = (c as f64 - scene.tx.col as f64) * scene.cell_m;
                let d = (dr * dr + dc * dc + (tx_h - RX_HEIGHT_M).powi(2)).sqrt().max(scene.cell_m);
                let [ds, phi, theta, rp] = spreads(clutter[i], nlos, params);
                values[Kind::Pl.index()] = path_gain_db(d, trace.walls, shadow[i], params);
                values[Kind::Rp.index()] = rp;
                values[Kind::Los.index()] = if nlos { 0.0 } else { 1.0 };
                values[Kind::Ds.index()] = ds;
                values[Kind::Phi.index()] = phi;
                values[Kind::Theta.index()] = theta;
            }
            for (raster, v) in rasters.iter_mut().zip(values) {
                raster.push(v as f32);
            }
        }
    }
    Ok(SceneSample { grid_size: g, rasters, seed: scene.seed, tx: scene.tx })
}

/// Generates `count` scenes with per-scene seeds derived from `master_seed`.
/// The result does not depend on the worker-thread count.
pub fn generate_samples(
    master_seed: u64,
    count: usize,
    grid_size: usize,
    density: f64,
    params: &PropagationParams,
) -> Result<Vec<SceneSample>> {
    use rayon::prelude::*;
    let build = |i: usize| -> Result<SceneSample> {
        let scene = generate_scene(rng::derive_seed(master_seed, i as u64), grid_size, density)?;
        synthesize_characteristics(&scene, params)
    };
    if crate::runtime::is_serial() {
        (0..count).map(build).collect()
    } else {
        (0..count).into_par_iter().map(build).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(row: u32, col: u32, h: f32) -> Transmitter {
        Transmitter { row, col, height_m: h }
    }

    #[test]
    fn zero_density_has_no_buildings() {
        let s = generate_scene(3, 32, 0.0).unwrap();
        assert!(s.footprints.is_empty());
        assert_eq!(s.coverage(), 0.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_scene(1, 8, 0.1).is_err());
        assert!(generate_scene(1, 32, 0.6).is_err());
        assert!(generate_scene(1, 32, -0.1).is_err());
    }

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(generate_scene(99, 64, 0.3).unwrap(), generate_scene(99, 64, 0.3).unwrap());
        assert_ne!(generate_scene(99, 64, 0.3).unwrap(), generate_scene(100, 64, 0.3).unwrap());
    }

    #[test]
    fn tx_never_inside_building() {
        for seed in 0..20 {
            let s = generate_scene(seed, 32, 0.4).unwrap();
            assert!(s.building_at(s.tx.row as usize, s.tx.col as usize).is_none());
        }
    }

    #[test]
    fn empty_scene_is_all_los() {
        let s = UrbanScene::open(16, tx(3, 5, 20.0));
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(trace_los(&s, r, c).unwrap(), LosTrace { visibility: Visibility::Los, walls: 0 });
            }
        }
    }

    #[test]
    fn tall_wall_blocks() {
        let mut s = UrbanScene::open(16, tx(8, 1, 20.0));
        s.add_building(Rect { row: 0, col: 7, rows: 16, cols: 2 }, 79.0).unwrap();
        let t = trace_los(&s, 8, 14).unwrap();
        assert_eq!(t.visibility, Visibility::Nlos);
        assert_eq!(t.walls, 1);
        assert_eq!(trace_los(&s, 8, 8).unwrap().visibility, Visibility::Inside);
        assert_eq!(trace_los(&s, 2, 3).unwrap().visibility, Visibility::Los);
    }

    #[test]
    fn low_wall_under_ray_does_not_block() {
        let mut s = UrbanScene::open(16, tx(8, 1, 30.0));
        s.add_building(Rect { row: 0, col: 4, rows: 16, cols: 1 }, 5.0).unwrap();
        assert_eq!(trace_los(&s, 8, 14).unwrap().visibility, Visibility::Los);
    }

    #[test]
    fn fspl_reference_value() {
        let pl = free_space_gain_db(100.0, 2600.0);
        assert!((pl - (-(40.0 + 20.0 * 2600f64.log10() - 27.55))).abs() < 1e-12);
        assert!((pl + 80.75).abs() < 5e-3, "{pl}");
    }

    #[test]
    fn two_walls_cost_thirty_db() {
        let p = PropagationParams::default();
        let los = path_gain_db(100.0, 0, 0.0, &p);
        let nlos = path_gain_db(100.0, 2, 0.0, &p);
        assert!((los - nlos - 30.0).abs() < 1e-12);
    }

    #[test]
    fn nlos_spreads_exceed_los() {
        let p = PropagationParams::default();
        for c in [0.0, 0.3, 0.9] {
            let a = spreads(c, false, &p);
            let b = spreads(c, true, &p);
            assert!(b[0] > a[0] && b[1] > a[1] && b[2] > a[2]);
        }
    }

    #[test]
    fn shadow_field_has_requested_spread() {
        let f = shadow_field(5, 128, 3.0);
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
        assert!((sd - 3.0).abs() < 0.6, "sd {sd}");
    }

    #[test]
    fn synthesized_rasters_respect_building_rules() {
        let scene = generate_scene(11, 32, 0.3).unwrap();
        let sample = synthesize_characteristics(&scene, &PropagationParams::default()).unwrap();
        let specs = CharacteristicSpec::defaults();
        for r in 0..32 {
            for c in 0..32 {
                let i = r * 32 + c;
                let inside = scene.building_at(r, c).is_some();
                assert_eq!(sample.raster(Kind::H)[i] as f64, scene.height_at(r, c) as f32 as f64);
                for k in Kind::TARGETS {
                    let v = sample.raster(k)[i] as f64;
                    assert!(v.is_finite());
                    assert_eq!(specs[k.index()].is_sentinel(v), inside, "{k:?} at ({r},{c})");
                }
                if !inside {
                    let los = sample.raster(Kind::Los)[i];
                    assert!(los == 0.0 || los == 1.0);
                }
            }
        }
    }
}
