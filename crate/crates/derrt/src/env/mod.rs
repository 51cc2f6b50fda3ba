//! 2-D configuration spaces: occupancy maps, collision checks, observation
//! extraction, and the procedural benchmark environments.
//!
//! Everything here is immutable after construction and safe to share across
//! concurrently running planner trials. Generators are pure functions of
//! `(seed, parameters)`.

pub mod generators;
pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disc radius of the planning robot, in cells.
pub const ROBOT_RADIUS: f64 = 1.0;
/// Disc radius of every dynamic agent, in cells.
pub const AGENT_RADIUS: f64 = 1.0;
/// Sample spacing for segment collision checks, in cells.
pub const SEGMENT_STEP: f64 = 0.25;

/// A point in configuration space. Dimension is fixed per environment:
/// 2 for a single robot, `2 * (1 + agents)` for the joint planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(pub Vec<f64>);

impl Configuration {
    pub fn xy(x: f64, y: f64) -> Self {
        Self(vec![x, y])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn dist(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn lerp(&self, other: &Self, s: f64) -> Self {
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + (b - a) * s)
                .collect(),
        )
    }

    /// `self - other`, as a displacement vector.
    pub fn delta(&self, other: &Self) -> Vec<f64> {
        self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// 2-D slice `[2k, 2k+1]` of a joint configuration.
    pub fn block2(&self, k: usize) -> Configuration {
        Configuration::xy(self.0[2 * k], self.0[2 * k + 1])
    }
}

/// Row-major binary occupancy grid; 1 = obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMap {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<u8>,
    pub resolution: f64,
}

impl OccupancyMap {
    pub fn empty(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "map dimensions must be positive");
        Self {
            width,
            height,
            cells: vec![0; width * height],
            resolution: 1.0,
        }
    }

    pub fn cell(&self, cx: usize, cy: usize) -> u8 {
        self.cells[cy * self.width + cx]
    }

    pub fn set_cell(&mut self, cx: usize, cy: usize, v: u8) {
        self.cells[cy * self.width + cx] = v;
    }

    /// Cell containing a world point, or `None` when out of bounds.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (cx, cy) = (x / self.resolution, y / self.resolution);
        if cx < 0.0 || cy < 0.0 {
            return None;
        }
        let (cx, cy) = (cx.floor() as usize, cy.floor() as usize);
        if cx >= self.width || cy >= self.height {
            return None;
        }
        Some((cx, cy))
    }

    /// Occupancy under a world point; out of bounds counts as occupied.
    pub fn occupied_at(&self, x: f64, y: f64) -> bool {
        match self.cell_of(x, y) {
            Some((cx, cy)) => self.cell(cx, cy) == 1,
            None => true,
        }
    }

    /// Occupy all cells whose centers fall inside `[x0, x1) x [y0, y1)`.
    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        let cx0 = (x0 - 0.5).ceil().max(0.0) as usize;
        let cy0 = (y0 - 0.5).ceil().max(0.0) as usize;
        for cy in cy0..self.height {
            if cy as f64 + 0.5 >= y1 {
                break;
            }
            for cx in cx0..self.width {
                if cx as f64 + 0.5 >= x1 {
                    break;
                }
                self.set_cell(cx, cy, 1);
            }
        }
    }

    pub fn free_cell_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 0).count()
    }
}

/// Scripted trajectory of one dynamic agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub waypoints: Vec<Configuration>,
    /// Roundabout agents orbit counter-clockwise.
    pub counter_clockwise: bool,
    /// Maximum distance between consecutive waypoints.
    pub speed_bound: f64,
}

impl AgentTrack {
    /// Position at a discrete time step; clamps past the end of the track.
    pub fn position_at(&self, t: usize) -> &Configuration {
        let idx = t.min(self.waypoints.len() - 1);
        &self.waypoints[idx]
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }
}

/// Extra geometry recorded by each generator, consumed by feature extractors
/// and by tests that recompute the construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorDetail {
    None,
    Passage(PassageInfo),
    Bugtrap(BugtrapInfo),
    Roundabout(RoundaboutInfo),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageInfo {
    /// Wall span along x: `[wall_x0, wall_x1)`.
    pub wall_x0: f64,
    pub wall_x1: f64,
    /// Opening span along y: `[open_y0, open_y1)`.
    pub open_y0: f64,
    pub open_y1: f64,
    /// Passage mouth on the start side, center of the opening.
    pub entrance: [f64; 2],
}

impl PassageInfo {
    pub fn thickness(&self) -> f64 {
        self.open_y1 - self.open_y0
    }

    pub fn length(&self) -> f64 {
        self.wall_x1 - self.wall_x0
    }

    /// Inside the passage's rasterized rectangle; boundary counts as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.wall_x0 && x <= self.wall_x1 && y >= self.open_y0 && y <= self.open_y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugtrapInfo {
    /// Rotation applied to the canonical trap, radians.
    pub angle: f64,
    /// Trap center in map coordinates.
    pub center: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundaboutInfo {
    pub obstacle_center: [f64; 2],
    pub obstacle_half: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub generator: String,
    pub seed: u64,
    pub detail: GeneratorDetail,
}

/// The world a planner searches: static map, dynamic agents, start and goal.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub map: OccupancyMap,
    pub start: Configuration,
    pub goal_center: Configuration,
    pub goal_radius: f64,
    pub agents: Vec<AgentTrack>,
    pub meta: EnvMeta,
}

impl Environment {
    /// True iff the cell under `x` is free and `x` keeps disc clearance from
    /// every agent position at time step `t`. Out of bounds is occupied.
    pub fn point_free(&self, x: &Configuration, t: usize) -> bool {
        if self.map.occupied_at(x.x(), x.y()) {
            return false;
        }
        let min_sep = ROBOT_RADIUS + AGENT_RADIUS;
        for track in &self.agents {
            if x.dist(track.position_at(t)) < min_sep {
                return false;
            }
        }
        true
    }

    /// Point check against the static map only (agents ignored).
    pub fn point_free_static(&self, x: &Configuration) -> bool {
        !self.map.occupied_at(x.x(), x.y())
    }

    /// True iff every sample along `a -> b` at spacing <= 0.25 cells is free
    /// at time step `t`. Symmetric in `a` and `b`.
    pub fn segment_free(&self, a: &Configuration, b: &Configuration, t: usize) -> bool {
        debug_assert!(a.is_finite() && b.is_finite());
        let n = (a.dist(b) / SEGMENT_STEP).ceil() as usize;
        for i in 0..=n {
            let s = i as f64 / n.max(1) as f64;
            if !self.point_free(&a.lerp(b, s), t) {
                return false;
            }
        }
        true
    }

    /// Square occupancy patch of odd side `size`, aligned to the cell grid
    /// and centered on the cell containing `center`. Cells outside the map
    /// are filled with 1.
    pub fn extract_patch(&self, center: &Configuration, size: usize) -> Patch {
        assert!(size % 2 == 1, "patch size must be odd");
        let half = (size / 2) as i64;
        let (ccx, ccy) = (
            (center.x() / self.map.resolution).floor() as i64,
            (center.y() / self.map.resolution).floor() as i64,
        );
        let mut cells = Vec::with_capacity(size * size);
        for dy in -half..=half {
            for dx in -half..=half {
                let (cx, cy) = (ccx + dx, ccy + dy);
                let v = if cx < 0
                    || cy < 0
                    || cx >= self.map.width as i64
                    || cy >= self.map.height as i64
                {
                    1
                } else {
                    self.map.cell(cx as usize, cy as usize)
                };
                cells.push(v);
            }
        }
        Patch { size, cells }
    }

    /// Feature vector for narrow-passage environments:
    /// `[distance to entrance, in-passage indicator, x, y]`.
    pub fn passage_features(&self, x: &Configuration) -> Result<Vec<f64>> {
        let GeneratorDetail::Passage(info) = &self.meta.detail else {
            return Err(Error::Environment(
                "environment lacks passage metadata".into(),
            ));
        };
        let dx = x.x() - info.entrance[0];
        let dy = x.y() - info.entrance[1];
        let dist = (dx * dx + dy * dy).sqrt();
        let inside = if info.contains(x.x(), x.y()) {
            1.0
        } else {
            0.0
        };
        Ok(vec![dist, inside, x.x(), x.y()])
    }

    /// Feature vector describing one agent relative to the robot at `x`:
    /// `[cos(theta), sin(theta), |goal - x|, |agent - x|, relative bearing]`
    /// where `theta` is the robot's angular position around the central
    /// obstacle and the bearing is wrapped to `(-pi, pi]`.
    pub fn agent_features(
        &self,
        x: &Configuration,
        t: usize,
        agent_index: usize,
    ) -> Result<Vec<f64>> {
        if agent_index >= self.agents.len() {
            return Err(Error::Environment(format!(
                "agent index {agent_index} out of range ({} agents)",
                self.agents.len()
            )));
        }
        let center = match &self.meta.detail {
            GeneratorDetail::Roundabout(info) => info.obstacle_center,
            _ => [
                self.map.width as f64 * self.map.resolution / 2.0,
                self.map.height as f64 * self.map.resolution / 2.0,
            ],
        };
        let theta = (x.y() - center[1]).atan2(x.x() - center[0]);
        let goal_dist = x.dist(&self.goal_center);
        let agent = self.agents[agent_index].position_at(t);
        let agent_dist = x.dist(agent);
        let bearing = wrap_angle((agent.y() - x.y()).atan2(agent.x() - x.x()) - theta);
        Ok(vec![
            theta.cos(),
            theta.sin(),
            goal_dist,
            agent_dist,
            bearing,
        ])
    }

    /// Check every structural invariant of the environment.
    pub fn validate(&self) -> Result<()> {
        let map = &self.map;
        if map.width == 0 || map.height == 0 {
            return Err(Error::Environment("zero map dimension".into()));
        }
        if map.cells.len() != map.width * map.height {
            return Err(Error::Environment("cell count mismatch".into()));
        }
        if map.cells.iter().any(|&c| c > 1) {
            return Err(Error::Environment("non-binary cell".into()));
        }
        if self.goal_radius <= 0.0 {
            return Err(Error::Environment("goal radius must be positive".into()));
        }
        if !self.start.is_finite() || !self.goal_center.is_finite() {
            return Err(Error::Environment("non-finite start or goal".into()));
        }
        if !self.point_free(&self.start, 0) {
            return Err(Error::Environment("start is not collision-free".into()));
        }
        if !self.point_free_static(&self.goal_center) {
            return Err(Error::Environment("goal is not collision-free".into()));
        }
        for (i, track) in self.agents.iter().enumerate() {
            if track.is_empty() {
                return Err(Error::Environment(format!("agent {i} has no waypoints")));
            }
            for w in &track.waypoints {
                if !w.is_finite() {
                    return Err(Error::Environment(format!(
                        "agent {i}: non-finite waypoint"
                    )));
                }
                if self.map.occupied_at(w.x(), w.y()) {
                    return Err(Error::Environment(format!(
                        "agent {i}: waypoint collides with static map"
                    )));
                }
            }
            for pair in track.waypoints.windows(2) {
                if pair[0].dist(&pair[1]) > track.speed_bound + 1e-9 {
                    return Err(Error::Environment(format!(
                        "agent {i}: step exceeds speed bound"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Square occupancy patch extracted around a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub size: usize,
    pub cells: Vec<u8>,
}

impl Patch {
    pub fn center(&self) -> u8 {
        self.cells[self.size * self.size / 2]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| c as f64).collect()
    }
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}
