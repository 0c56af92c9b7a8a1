//! Manhattan-grid scenario generation, node placement and line-of-sight.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the scenario, in meters. `z` is the height above ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite() && z.is_finite() && z >= 0.0);
        Position { x, y, z }
    }

    pub fn distance_2d(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn distance_3d(&self, other: &Position) -> f64 {
        let dz = self.z - other.z;
        (self.distance_2d(other).powi(2) + dz * dz).sqrt()
    }
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        debug_assert!(min_x < max_x && min_y < max_y);
        Rect { min_x, min_y, max_x, max_y }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.min_x + self.max_x), 0.5 * (self.min_y + self.max_y))
    }

    /// Closed containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.min_x < other.max_x
            && other.min_x < self.max_x
            && self.min_y < other.max_y
            && other.min_y < self.max_y
    }

    /// Liang-Barsky clip of the segment `a + t (b - a)`, `t ∈ [0, 1]`.
    /// Returns the parameter interval that lies inside the rectangle.
    pub fn clip_segment(&self, ax: f64, ay: f64, bx: f64, by: f64) -> Option<(f64, f64)> {
        let dx = bx - ax;
        let dy = by - ay;
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for (p, q) in [
            (-dx, ax - self.min_x),
            (dx, self.max_x - ax),
            (-dy, ay - self.min_y),
            (dy, self.max_y - ay),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub footprint: Rect,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub buildings: Vec<Building>,
    pub bounds: Rect,
    pub street_width: f64,
    pub block_side: f64,
}

pub const DEFAULT_BUILDING_HEIGHT: f64 = 15.0;

/// Builds a `rows × cols` grid of square blocks with streets between the
/// blocks and around the border. Bounds are
/// `(cols·block + (cols+1)·street) × (rows·block + (rows+1)·street)`.
pub fn build_manhattan_grid(block_side: f64, street_width: f64, rows: u32, cols: u32) -> Result<Scenario> {
    build_manhattan_grid_with_height(block_side, street_width, rows, cols, DEFAULT_BUILDING_HEIGHT)
}

pub fn build_manhattan_grid_with_height(
    block_side: f64,
    street_width: f64,
    rows: u32,
    cols: u32,
    building_height: f64,
) -> Result<Scenario> {
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !positive(block_side) || !positive(street_width) || rows == 0 || cols == 0 {
        return Err(Error::config(format!(
            "grid dimensions must be positive (block {block_side}, street {street_width}, {rows}x{cols})"
        )));
    }
    if !positive(building_height) {
        return Err(Error::config("building height must be positive"));
    }
    let pitch = block_side + street_width;
    let width = cols as f64 * pitch + street_width;
    let height = rows as f64 * pitch + street_width;
    let mut buildings = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        for c in 0..cols {
            let min_x = street_width + c as f64 * pitch;
            let min_y = street_width + r as f64 * pitch;
            buildings.push(Building {
                footprint: Rect::new(min_x, min_y, min_x + block_side, min_y + block_side),
                height: building_height,
            });
        }
    }
    Ok(Scenario { buildings, bounds: Rect::new(0.0, 0.0, width, height), street_width, block_side })
}

impl Scenario {
    pub fn is_outdoor(&self, x: f64, y: f64) -> bool {
        self.bounds.contains(x, y) && !self.buildings.iter().any(|b| b.footprint.contains(x, y))
    }

    pub fn outdoor_area(&self) -> f64 {
        self.bounds.area() - self.buildings.iter().map(|b| b.footprint.area()).sum::<f64>()
    }
}

/// Heights used when placing nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeHeights {
    pub gnb: f64,
    pub ue: f64,
}

impl Default for NodeHeights {
    fn default() -> Self {
        NodeHeights { gnb: 10.0, ue: 1.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub donor: Position,
    pub relays: Vec<Position>,
    pub ues: Vec<Position>,
}

pub const MAX_RELAYS: usize = 4;
pub const DEFAULT_RELAY_DISTANCE: f64 = 85.0;

/// Places the donor at the scenario center, up to four relays at
/// `relay_distance` from it (east, north, west, south, in that order) and
/// `n_ues` UEs uniformly over the outdoor area.
///
/// UE positions only depend on `rng`, never on the relay count, so sweeps over
/// the number of relays see the same users for a given seed.
pub fn place_nodes(
    scenario: &Scenario,
    heights: NodeHeights,
    relay_distance: f64,
    n_relays: usize,
    n_ues: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Placement> {
    if n_relays > MAX_RELAYS {
        return Err(Error::config(format!("at most {MAX_RELAYS} relays supported, got {n_relays}")));
    }
    if scenario.outdoor_area() <= 0.0 {
        return Err(Error::config("scenario has no outdoor area"));
    }
    let (cx, cy) = scenario.bounds.center();
    let donor = Position::new(cx, cy, heights.gnb);
    let directions = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
    let relays = directions[..n_relays]
        .iter()
        .map(|(dx, dy)| {
            let p = Position::new(cx + dx * relay_distance, cy + dy * relay_distance, heights.gnb);
            if scenario.bounds.contains(p.x, p.y) {
                Ok(p)
            } else {
                Err(Error::config(format!("relay at ({:.1}, {:.1}) falls outside the scenario", p.x, p.y)))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let b = scenario.bounds;
    let mut ues = Vec::with_capacity(n_ues);
    let mut attempts = 0_u64;
    while ues.len() < n_ues {
        attempts += 1;
        if attempts > 1_000_000 + 1000 * n_ues as u64 {
            return Err(Error::config("could not place UEs outdoors"));
        }
        let x = rng.gen_range(b.min_x..b.max_x);
        let y = rng.gen_range(b.min_y..b.max_y);
        if scenario.is_outdoor(x, y) {
            ues.push(Position::new(x, y, heights.ue));
        }
    }
    Ok(Placement { donor, relays, ues })
}

/// True when the straight segment `a → b` crosses no building below the
/// segment's own height at the crossing.
pub fn is_los(scenario: &Scenario, a: &Position, b: &Position) -> bool {
    let low = a.z.min(b.z);
    scenario.buildings.iter().all(|bld| {
        if bld.height <= low {
            return true;
        }
        match bld.footprint.clip_segment(a.x, a.y, b.x, b.y) {
            None => true,
            Some((t0, t1)) => {
                // Height along the segment is linear in t, so its minimum over
                // the crossing is at one of the clip endpoints.
                let z0 = a.z + t0 * (b.z - a.z);
                let z1 = a.z + t1 * (b.z - a.z);
                z0.min(z1) >= bld.height
            }
        }
    })
}
