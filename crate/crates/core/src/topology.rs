//! Region geometry: two rows of SBSs on hexagonal cell centres, two straight
//! roads running past them, and rectangular blockers between each road and
//! the row it faces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned rectangle, closed on all four edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// Liang-Barsky clip of the segment `a -> b` against the closed
    /// rectangle. Returns the parameter interval `[t_in, t_out]` of the
    /// overlap, restricted to `[0, 1]`.
    fn clip(&self, a: &Point, b: &Point) -> Option<(f64, f64)> {
        let dx = b.x - a.x;
        let dy = b.y - a.y;
        let edges = [
            (-dx, a.x - self.min.x),
            (dx, self.max.x - a.x),
            (-dy, a.y - self.min.y),
            (dy, self.max.y - a.y),
        ];
        let (mut t_in, mut t_out) = (0.0_f64, 1.0_f64);
        for (p, q) in edges {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t_in = t_in.max(r);
                } else {
                    t_out = t_out.min(r);
                }
            }
        }
        (t_in <= t_out).then_some((t_in, t_out))
    }

    /// True when the open segment `(a, b)` touches the rectangle.
    pub fn blocks_segment(&self, a: &Point, b: &Point) -> bool {
        if a == b {
            return false;
        }
        match self.clip(a, b) {
            Some((t_in, t_out)) => t_in < 1.0 && t_out > 0.0,
            None => false,
        }
    }

    /// Closed-segment intersection, used for road/obstacle overlap.
    fn touches_segment(&self, a: &Point, b: &Point) -> bool {
        if a == b {
            return self.contains(a);
        }
        self.clip(a, b).is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Right,
    Left,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    /// Entry point; vehicles travel from `start` to `end`.
    pub start: Point,
    pub end: Point,
    pub direction: Direction,
    /// Non-IID sample group of users on this road (1 or 2).
    pub group_id: u8,
}

impl Road {
    pub fn length(&self) -> f64 {
        self.start.distance(&self.end)
    }

    /// Unit vector along the direction of travel.
    pub fn heading(&self) -> (f64, f64) {
        let len = self.length();
        ((self.end.x - self.start.x) / len, (self.end.y - self.start.y) / len)
    }

    pub fn point_at(&self, travelled: f64) -> Point {
        let (hx, hy) = self.heading();
        Point::new(self.start.x + hx * travelled, self.start.y + hy * travelled)
    }

    /// Distance from `p` to the closed road segment.
    pub fn distance_to(&self, p: &Point) -> f64 {
        let (dx, dy) = (self.end.x - self.start.x, self.end.y - self.start.y);
        let len2 = dx * dx + dy * dy;
        let t = (((p.x - self.start.x) * dx + (p.y - self.start.y) * dy) / len2).clamp(0.0, 1.0);
        p.distance(&Point::new(self.start.x + t * dx, self.start.y + t * dy))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkState {
    Los,
    Nlos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub num_sbs: usize,
    /// Hexagonal cell radius (m).
    pub cell_radius_m: f64,
    pub road_length_m: f64,
    /// Perpendicular gap between a road and the SBS row it faces (m).
    pub road_clearance_m: f64,
    pub obstacles_per_road: usize,
    /// Obstacle extent along the road (m).
    pub obstacle_width_m: [f64; 2],
    /// Obstacle extent across the road (m).
    pub obstacle_depth_m: [f64; 2],
    pub max_resamples: usize,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            num_sbs: 8,
            cell_radius_m: 100.0,
            road_length_m: 800.0,
            road_clearance_m: 60.0,
            obstacles_per_road: 2,
            obstacle_width_m: [20.0, 60.0],
            obstacle_depth_m: [20.0, 60.0],
            max_resamples: 1000,
        }
    }
}

impl TopologyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sbs == 0 {
            return Err(invalid("num_sbs must be positive"));
        }
        for (name, v) in [
            ("cell_radius_m", self.cell_radius_m),
            ("road_length_m", self.road_length_m),
            ("road_clearance_m", self.road_clearance_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, [lo, hi]) in [("obstacle_width_m", self.obstacle_width_m), ("obstacle_depth_m", self.obstacle_depth_m)] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(invalid(format!("{name} must be a positive range, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTopology {
    pub sbs_positions: Vec<Point>,
    pub roads: Vec<Road>,
    pub obstacles: Vec<Rect>,
    pub cell_radius: f64,
}

impl RegionTopology {
    pub fn num_sbs(&self) -> usize {
        self.sbs_positions.len()
    }

    pub fn road(&self, index: usize) -> Result<&Road> {
        self.roads.get(index).ok_or(Error::OutOfRange { index, len: self.roads.len() })
    }

    pub fn classify_link(&self, user: &Point, sbs_index: usize) -> Result<LinkState> {
        let sbs = self
            .sbs_positions
            .get(sbs_index)
            .ok_or(Error::OutOfRange { index: sbs_index, len: self.num_sbs() })?;
        Ok(self.link_state(user, sbs))
    }

    pub(crate) fn link_state(&self, user: &Point, sbs: &Point) -> LinkState {
        if self.obstacles.iter().any(|o| o.blocks_segment(user, sbs)) {
            LinkState::Nlos
        } else {
            LinkState::Los
        }
    }

    /// JSON dump for inspection with coordinates rounded to centimetres.
    pub fn to_json(&self) -> String {
        fn r(v: f64) -> f64 {
            (v * 100.0).round() / 100.0
        }
        fn rp(p: &Point) -> Point {
            Point::new(r(p.x), r(p.y))
        }
        let rounded = RegionTopology {
            sbs_positions: self.sbs_positions.iter().map(rp).collect(),
            roads: self
                .roads
                .iter()
                .map(|road| Road { start: rp(&road.start), end: rp(&road.end), ..*road })
                .collect(),
            obstacles: self.obstacles.iter().map(|o| Rect { min: rp(&o.min), max: rp(&o.max) }).collect(),
            cell_radius: r(self.cell_radius),
        };
        serde_json::to_string_pretty(&rounded).expect("topology is always serializable")
    }
}

/// Builds the region. The first SBS row sits `road_clearance_m` above road 1,
/// the second row one hexagonal row pitch (1.5 R) further up and shifted by
/// half a column pitch (√3 R); road 2 sits `road_clearance_m` above the
/// second row and runs the opposite way.
pub fn build_region(config: &TopologyConfig, seed: u64) -> Result<RegionTopology> {
    config.validate()?;
    let pitch = config.cell_radius_m * 3f64.sqrt();
    let row_gap = 1.5 * config.cell_radius_m;
    let centre_x = config.road_length_m / 2.0;
    let row1_y = config.road_clearance_m;
    let row2_y = row1_y + row_gap;
    let road2_y = row2_y + config.road_clearance_m;

    let row1 = config.num_sbs.div_ceil(2);
    let row2 = config.num_sbs - row1;
    let mut sbs_positions = Vec::with_capacity(config.num_sbs);
    for i in 0..row1 {
        let x = centre_x + (i as f64 - (row1 as f64 - 1.0) / 2.0) * pitch;
        sbs_positions.push(Point::new(x, row1_y));
    }
    for i in 0..row2 {
        let x = centre_x + (i as f64 - (row2 as f64 - 1.0) / 2.0) * pitch + pitch / 2.0;
        sbs_positions.push(Point::new(x, row2_y));
    }

    let roads = vec![
        Road {
            start: Point::new(0.0, 0.0),
            end: Point::new(config.road_length_m, 0.0),
            direction: Direction::Right,
            group_id: 1,
        },
        Road {
            start: Point::new(config.road_length_m, road2_y),
            end: Point::new(0.0, road2_y),
            direction: Direction::Left,
            group_id: 2,
        },
    ];

    let mut rng = rng::derive_stream(seed, "topology", 0);
    let mut obstacles = Vec::new();
    // Each road gets its obstacles in the strip towards its own SBS row,
    // one per equal slice of the road's extent.
    let strips = [(0.0, row1_y), (row2_y, road2_y)];
    for &(lo, hi) in &strips {
        for slot in 0..config.obstacles_per_road {
            let rect = place_obstacle(config, &mut rng, slot, (lo, hi), &roads, &sbs_positions)?;
            obstacles.push(rect);
        }
    }

    Ok(RegionTopology { sbs_positions, roads, obstacles, cell_radius: config.cell_radius_m })
}

fn place_obstacle(
    config: &TopologyConfig,
    rng: &mut RngStream,
    slot: usize,
    (strip_lo, strip_hi): (f64, f64),
    roads: &[Road],
    sbs: &[Point],
) -> Result<Rect> {
    let slice = config.road_length_m / config.obstacles_per_road as f64;
    let uniform = |rng: &mut RngStream, [lo, hi]: [f64; 2]| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    for _ in 0..config.max_resamples {
        let width = uniform(rng, config.obstacle_width_m);
        let depth = uniform(rng, config.obstacle_depth_m);
        let cx = rng.gen_range(slot as f64 * slice..(slot + 1) as f64 * slice);
        let room = strip_hi - strip_lo - depth;
        if room < 0.0 {
            continue;
        }
        let y0 = strip_lo + rng.gen_range(0.0..=room);
        let rect = Rect {
            min: Point::new(cx - width / 2.0, y0),
            max: Point::new(cx + width / 2.0, y0 + depth),
        };
        if roads.iter().any(|r| rect.touches_segment(&r.start, &r.end)) {
            continue;
        }
        if sbs.iter().any(|p| rect.contains(p)) {
            continue;
        }
        return Ok(rect);
    }
    Err(Error::Placement {
        attempts: config.max_resamples,
        reason: format!(
            "no obstacle of depth {:?} fits the {:.1} m strip without touching a road or SBS",
            config.obstacle_depth_m,
            strip_hi - strip_lo
        ),
    })
}
