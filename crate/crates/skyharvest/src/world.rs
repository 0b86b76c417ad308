//! 3D urban map: raster building heights, coordinate conversion,
//! line-of-sight raycasting, and per-altitude shortest-path distance
//! fields used by the safety controller.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::DeviceSpec;
use crate::error::{Error, Result};

/// Grid cell index pair. Serialized as `[ix, iy]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "(usize, usize)", from = "(usize, usize)")]
pub struct Cell {
    pub ix: usize,
    pub iy: usize,
}

impl Cell {
    pub fn new(ix: usize, iy: usize) -> Self {
        Cell { ix, iy }
    }
}

impl From<(usize, usize)> for Cell {
    fn from((ix, iy): (usize, usize)) -> Self {
        Cell { ix, iy }
    }
}

impl From<Cell> for (usize, usize) {
    fn from(c: Cell) -> Self {
        (c.ix, c.iy)
    }
}

/// A grid position with an altitude. Devices sit at altitude 0, UAVs above.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPos {
    pub ix: usize,
    pub iy: usize,
    pub altitude_m: f64,
}

impl GridPos {
    pub fn new(ix: usize, iy: usize, altitude_m: f64) -> Self {
        GridPos { ix, iy, altitude_m }
    }

    pub fn cell(&self) -> Cell {
        Cell::new(self.ix, self.iy)
    }
}

/// Raster height map with fixed cell size and the mission's start and
/// terminal cells. Immutable after construction; safe to share read-only.
#[derive(Clone, Debug)]
pub struct CityMap {
    pub cell_size_m: f64,
    pub width_cells: usize,
    pub height_cells: usize,
    heights_m: Vec<f64>, // row-major: heights_m[iy * width + ix]
    pub start_cell: Cell,
    pub terminal_cell: Cell,
}

/// On-disk map file. `devices` travels with the map so a scenario is a
/// single artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapFile {
    pub cell_size_m: f64,
    pub heights_m: Vec<Vec<f64>>,
    pub start_cell: Cell,
    pub terminal_cell: Cell,
    pub devices: Vec<DeviceSpec>,
}

impl MapFile {
    pub fn into_map(self) -> Result<(CityMap, Vec<DeviceSpec>)> {
        let map = CityMap::from_rows(
            self.cell_size_m,
            &self.heights_m,
            self.start_cell,
            self.terminal_cell,
        )?;
        for d in &self.devices {
            if !map.in_bounds(d.cell) {
                return Err(Error::Map(format!(
                    "device {} cell ({}, {}) out of bounds",
                    d.id, d.cell.ix, d.cell.iy
                )));
            }
        }
        Ok((map, self.devices))
    }

    pub fn from_map(map: &CityMap, devices: &[DeviceSpec]) -> Self {
        let mut rows = Vec::with_capacity(map.height_cells);
        for iy in 0..map.height_cells {
            let mut row = Vec::with_capacity(map.width_cells);
            for ix in 0..map.width_cells {
                row.push(map.height_at(Cell::new(ix, iy)));
            }
            rows.push(row);
        }
        MapFile {
            cell_size_m: map.cell_size_m,
            heights_m: rows,
            start_cell: map.start_cell,
            terminal_cell: map.terminal_cell,
            devices: devices.to_vec(),
        }
    }
}

impl CityMap {
    pub fn from_rows(
        cell_size_m: f64,
        rows: &[Vec<f64>],
        start_cell: Cell,
        terminal_cell: Cell,
    ) -> Result<Self> {
        if !(cell_size_m > 0.0) {
            return Err(Error::Map(format!(
                "cell_size_m must be positive, got {cell_size_m}"
            )));
        }
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Map("heights_m must be non-empty".into()));
        }
        let width = rows[0].len();
        let mut heights = Vec::with_capacity(rows.len() * width);
        for (iy, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Map(format!(
                    "heights_m row {iy} has length {}, expected {width}",
                    row.len()
                )));
            }
            for (ix, &h) in row.iter().enumerate() {
                if !(h >= 0.0) {
                    return Err(Error::Map(format!(
                        "height at ({ix}, {iy}) must be >= 0, got {h}"
                    )));
                }
                heights.push(h);
            }
        }
        let map = CityMap {
            cell_size_m,
            width_cells: width,
            height_cells: rows.len(),
            heights_m: heights,
            start_cell,
            terminal_cell,
        };
        for (name, c) in [("start_cell", start_cell), ("terminal_cell", terminal_cell)] {
            if !map.in_bounds(c) {
                return Err(Error::Map(format!(
                    "{name} ({}, {}) out of bounds for {}x{} grid",
                    c.ix, c.iy, map.width_cells, map.height_cells
                )));
            }
        }
        Ok(map)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.ix < self.width_cells && c.iy < self.height_cells
    }

    pub fn height_at(&self, c: Cell) -> f64 {
        self.heights_m[c.iy * self.width_cells + c.ix]
    }

    /// Metric extent along x.
    pub fn width_m(&self) -> f64 {
        self.width_cells as f64 * self.cell_size_m
    }

    /// Metric extent along y.
    pub fn height_m(&self) -> f64 {
        self.height_cells as f64 * self.cell_size_m
    }

    /// Map diagonal in meters, used as a distance normalizer.
    pub fn diagonal_m(&self) -> f64 {
        self.width_m().hypot(self.height_m())
    }

    /// Metric coordinates of a cell center.
    pub fn cell_center(&self, c: Cell) -> (f64, f64) {
        (
            (c.ix as f64 + 0.5) * self.cell_size_m,
            (c.iy as f64 + 0.5) * self.cell_size_m,
        )
    }

    /// Metric point of a grid position (cell center at its altitude).
    pub fn metric(&self, p: GridPos) -> [f64; 3] {
        let (x, y) = self.cell_center(p.cell());
        [x, y, p.altitude_m]
    }

    /// Cell containing a metric point, clamped to the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> Cell {
        let ix = ((x / self.cell_size_m).floor().max(0.0) as usize).min(self.width_cells - 1);
        let iy = ((y / self.cell_size_m).floor().max(0.0) as usize).min(self.height_cells - 1);
        Cell::new(ix, iy)
    }

    /// A cell is flyable at a given altitude when its building is lower.
    pub fn flyable(&self, c: Cell, altitude_m: f64) -> bool {
        self.height_at(c) < altitude_m
    }
}

/// Load a map file, returning the validated map and its device list.
pub fn load_map_file(path: impl AsRef<Path>) -> Result<(CityMap, Vec<DeviceSpec>)> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: MapFile =
        serde_json::from_str(&raw).map_err(|e| Error::parse(path, e.to_string()))?;
    file.into_map()
        .map_err(|e| Error::Map(format!("{}: {e}", path.display())))
}

/// Load a map file, discarding the device list.
pub fn load_map(path: impl AsRef<Path>) -> Result<CityMap> {
    load_map_file(path).map(|(m, _)| m)
}

/// Save a map with its devices. The emitted JSON is canonical: saving a
/// reloaded file reproduces it byte for byte.
pub fn save_map_file(
    path: impl AsRef<Path>,
    map: &CityMap,
    devices: &[DeviceSpec],
) -> Result<()> {
    let path = path.as_ref();
    let file = MapFile::from_map(map, devices);
    let mut out = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    out.push('\n');
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Line of sight between two metric points: the segment is sampled every
/// `cell_size_m / 10` along its arclength, and a sample clears the map when
/// its height is at least the building height of the cell under it.
///
/// Endpoints are ordered canonically before sampling, so the check is
/// exactly symmetric.
pub fn los_between(map: &CityMap, a: [f64; 3], b: [f64; 3]) -> bool {
    let (a, b) = if b < a { (b, a) } else { (a, b) };
    let step = map.cell_size_m / 10.0;
    let n = (dist3(a, b) / step).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = a[0] + t * (b[0] - a[0]);
        let y = a[1] + t * (b[1] - a[1]);
        let z = a[2] + t * (b[2] - a[2]);
        if z < map.height_at(map.cell_at(x, y)) {
            return false;
        }
    }
    true
}

/// Line of sight between two grid positions (cell centers).
pub fn is_los(map: &CityMap, a: GridPos, b: GridPos) -> bool {
    los_between(map, map.metric(a), map.metric(b))
}

/// Marker for cells from which the terminal cannot be reached.
pub const UNREACHABLE: u32 = u32::MAX;

/// Per-altitude 4-neighbor BFS distances to the terminal cell, counting
/// moves over flyable cells. This is the minimum battery (one unit per
/// move) a UAV at that altitude needs to reach the terminal.
#[derive(Clone, Debug)]
pub struct DistanceField {
    pub altitude_m: f64,
    width: usize,
    steps: Vec<u32>,
}

impl DistanceField {
    pub fn steps_to_terminal(&self, c: Cell) -> Option<u32> {
        match self.steps[c.iy * self.width + c.ix] {
            UNREACHABLE => None,
            s => Some(s),
        }
    }

    pub fn raw(&self, c: Cell) -> u32 {
        self.steps[c.iy * self.width + c.ix]
    }
}

/// BFS from the terminal cell over cells flyable at `altitude_m`.
pub fn distance_field(map: &CityMap, altitude_m: f64) -> Result<DistanceField> {
    assert!(altitude_m > 0.0, "altitude must be positive");
    if !map.flyable(map.terminal_cell, altitude_m) {
        return Err(Error::Map(format!(
            "terminal cell ({}, {}) is blocked at altitude {altitude_m} m",
            map.terminal_cell.ix, map.terminal_cell.iy
        )));
    }
    let (w, h) = (map.width_cells, map.height_cells);
    let mut steps = vec![UNREACHABLE; w * h];
    let mut queue = VecDeque::new();
    steps[map.terminal_cell.iy * w + map.terminal_cell.ix] = 0;
    queue.push_back(map.terminal_cell);
    while let Some(c) = queue.pop_front() {
        let d = steps[c.iy * w + c.ix];
        for (nx, ny) in neighbors4(c, w, h) {
            let idx = ny * w + nx;
            if steps[idx] == UNREACHABLE && map.flyable(Cell::new(nx, ny), altitude_m) {
                steps[idx] = d + 1;
                queue.push_back(Cell::new(nx, ny));
            }
        }
    }
    Ok(DistanceField {
        altitude_m,
        width: w,
        steps,
    })
}

fn neighbors4(c: Cell, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (ix, iy) = (c.ix as isize, c.iy as isize);
    [(0, 1), (-1, 0), (0, -1), (1, 0)]
        .into_iter()
        .map(move |(dx, dy)| (ix + dx, iy + dy))
        .filter(move |&(x, y)| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h)
        .map(|(x, y)| (x as usize, y as usize))
}
