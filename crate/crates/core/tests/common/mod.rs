//! Point-sampling line-of-sight oracle shared by the LOS and acceptance tests.
#![allow(dead_code)]

use iabsim::geometry::{build_manhattan_grid, is_los, Position, Rect, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 0.1;

fn dist_to_rect(r: &Rect, x: f64, y: f64) -> f64 {
    let dx = (r.min_x - x).max(0.0).max(x - r.max_x);
    let dy = (r.min_y - y).max(0.0).max(y - r.max_y);
    dx.hypot(dy)
}

pub enum Oracle {
    Blocked,
    Clear,
    /// A sample passed within one step of a roof edge or wall; sampling
    /// cannot settle the case.
    Ambiguous,
}

pub fn sample_oracle(s: &Scenario, a: &Position, b: &Position) -> Oracle {
    let len = a.distance_2d(b);
    let n = (len / STEP).ceil().max(1.0) as usize;
    let dz_per_step = (b.z - a.z).abs() / n as f64;
    let mut near = false;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y, z) = (a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), a.z + t * (b.z - a.z));
        for bld in &s.buildings {
            if bld.footprint.contains(x, y) && z < bld.height {
                return Oracle::Blocked;
            }
            if dist_to_rect(&bld.footprint, x, y) <= STEP && z < bld.height + dz_per_step + 1e-9 {
                near = true;
            }
        }
    }
    if near {
        Oracle::Ambiguous
    } else {
        Oracle::Clear
    }
}

fn random_point<R: Rng>(rng: &mut R, s: &Scenario) -> Position {
    let b = s.bounds;
    // Mix of street-level, rooftop-crossing and high endpoints.
    let z = match rng.gen_range(0..4) {
        0 => 1.6,
        1 => 10.0,
        2 => rng.gen_range(0.0..30.0),
        _ => rng.gen_range(12.0..18.0),
    };
    Position::new(rng.gen_range(b.min_x..b.max_x), rng.gen_range(b.min_y..b.max_y), z)
}

/// Segment inside one street corridor of the 50 m / 10 m grid, at random
/// heights, possibly running diagonally across the corridor.
fn street_segment<R: Rng>(rng: &mut R) -> (Position, Position) {
    let k = rng.gen_range(0..5) as f64;
    let off = |rng: &mut R| k * 60.0 + rng.gen_range(0.0..10.0);
    let (u0, u1) = (rng.gen_range(0.0..250.0), rng.gen_range(0.0..250.0));
    let (v0, v1) = (off(rng), off(rng));
    let (z0, z1) = (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0));
    if rng.gen_bool(0.5) {
        (Position::new(u0, v0, z0), Position::new(u1, v1, z1))
    } else {
        (Position::new(v0, u0, z0), Position::new(v1, u1, z1))
    }
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub compared: u32,
    pub blocked: u32,
    pub ambiguous: u32,
    pub disagreements: u32,
}

/// Compares `is_los` with the sampling oracle on `n` decidable segments in
/// the 4 x 4 grid of 50 m blocks and 10 m streets.
pub fn compare_with_oracle(n: u32, seed: u64) -> OracleReport {
    let s = build_manhattan_grid(50.0, 10.0, 4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = OracleReport::default();
    while rep.compared < n {
        let (a, b) = if rng.gen_bool(0.3) {
            street_segment(&mut rng)
        } else {
            (random_point(&mut rng, &s), random_point(&mut rng, &s))
        };
        let fast = is_los(&s, &a, &b);
        match sample_oracle(&s, &a, &b) {
            Oracle::Ambiguous => rep.ambiguous += 1,
            Oracle::Blocked => {
                rep.compared += 1;
                rep.blocked += 1;
                rep.disagreements += fast as u32;
            }
            Oracle::Clear => {
                rep.compared += 1;
                rep.disagreements += !fast as u32;
            }
        }
    }
    rep
}
