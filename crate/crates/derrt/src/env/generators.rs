//! Procedural benchmark environments: long narrow passage, bug trap, and the
//! multi-agent roundabout. Each generator is a pure function of its seed and
//! parameters; the same inputs rebuild the same environment byte for byte.

use crate::numerics::RngStream;

use super::{
    AgentTrack, BugtrapInfo, Configuration, EnvMeta, Environment, GeneratorDetail, OccupancyMap,
    PassageInfo, RoundaboutInfo,
};

/// Sampling ranges for the narrow-passage generator.
#[derive(Debug, Clone)]
pub struct PassageParams {
    pub thickness_range: (f64, f64),
    /// Passage length as a fraction of map width: long passages are the
    /// point of this benchmark, and they scale with the map.
    pub length_frac_range: (f64, f64),
    /// Wall position as a fraction of map width.
    pub wall_frac_range: (f64, f64),
    /// Start and goal land within this distance of the wall (clamped to the
    /// map margins), keeping journeys centered on the passage.
    pub placement_band: f64,
    pub goal_radius: f64,
}

impl Default for PassageParams {
    fn default() -> Self {
        Self {
            thickness_range: (8.0, 16.0),
            length_frac_range: (0.33, 0.47),
            wall_frac_range: (0.30, 0.45),
            placement_band: 130.0,
            goal_radius: 8.0,
        }
    }
}

impl PassageParams {
    /// Test-time variant: the passage is significantly narrowed relative to
    /// the training maps (one third of the sampled thickness).
    pub fn narrowed() -> Self {
        let d = Self::default();
        Self {
            thickness_range: (d.thickness_range.0 / 3.0, d.thickness_range.1 / 3.0),
            ..d
        }
    }
}

const MARGIN: f64 = 10.0;

/// Two free chambers split by a wall containing one passage. Start lands in
/// the left chamber, goal in the right.
pub fn gen_narrow_passage(seed: u64, width: usize, height: usize) -> Environment {
    gen_narrow_passage_with(seed, width, height, &PassageParams::default())
}

pub fn gen_narrow_passage_with(
    seed: u64,
    width: usize,
    height: usize,
    params: &PassageParams,
) -> Environment {
    assert!(
        width >= 50 && height >= 50,
        "passage map must be at least 50x50"
    );
    let mut rng = RngStream::new(seed, 0xA55A);
    let (w, h) = (width as f64, height as f64);

    let thickness = rng.uniform(params.thickness_range.0, params.thickness_range.1);
    let length = rng.uniform(params.length_frac_range.0, params.length_frac_range.1) * w;
    let wall_x0 = (rng.uniform(params.wall_frac_range.0, params.wall_frac_range.1) * w).floor();
    let wall_x1 = (wall_x0 + length).min(w - 5.0 * MARGIN);
    let open_y0 = rng
        .uniform(3.0 * MARGIN, h - 3.0 * MARGIN - thickness)
        .floor();
    let open_y1 = open_y0 + thickness.ceil();

    let mut map = OccupancyMap::empty(width, height);
    map.fill_rect(wall_x0, 0.0, wall_x1, open_y0);
    map.fill_rect(wall_x0, open_y1, wall_x1, h);

    let start = Configuration::xy(
        rng.uniform(
            (wall_x0 - params.placement_band).max(MARGIN),
            wall_x0 - 3.0 * MARGIN,
        ),
        rng.uniform(MARGIN, h - MARGIN),
    );
    let goal_center = Configuration::xy(
        rng.uniform(
            wall_x1 + 3.0 * MARGIN,
            (wall_x1 + params.placement_band).min(w - MARGIN),
        ),
        rng.uniform(MARGIN, h - MARGIN),
    );

    let info = PassageInfo {
        wall_x0,
        wall_x1,
        open_y0,
        open_y1,
        entrance: [wall_x0, (open_y0 + open_y1) / 2.0],
    };
    let env = Environment {
        map,
        start,
        goal_center,
        goal_radius: params.goal_radius,
        agents: Vec::new(),
        meta: EnvMeta {
            generator: "passage".into(),
            seed,
            detail: GeneratorDetail::Passage(info),
        },
    };
    debug_assert!(env.validate().is_ok());
    env
}

// Canonical bug-trap geometry, axis-aligned rectangles in a frame centered on
// the trap: an outer chamber with one opening in its right wall, a channel
// running from the opening toward the chamber center, and the two pockets
// between channel and chamber walls that act as dead ends.
const TRAP_OUTER: f64 = 28.0;
const TRAP_WALL: f64 = 3.0;
const TRAP_GAP: f64 = 4.0;
const TRAP_CHANNEL_X0: f64 = -10.0;

const TRAP_RECTS: [[f64; 4]; 7] = [
    // top, bottom, left walls
    [-TRAP_OUTER, TRAP_OUTER - TRAP_WALL, TRAP_OUTER, TRAP_OUTER],
    [
        -TRAP_OUTER,
        -TRAP_OUTER,
        TRAP_OUTER,
        -(TRAP_OUTER - TRAP_WALL),
    ],
    [
        -TRAP_OUTER,
        -(TRAP_OUTER - TRAP_WALL),
        -(TRAP_OUTER - TRAP_WALL),
        TRAP_OUTER - TRAP_WALL,
    ],
    // right wall above and below the opening
    [
        TRAP_OUTER - TRAP_WALL,
        TRAP_GAP,
        TRAP_OUTER,
        TRAP_OUTER - TRAP_WALL,
    ],
    [
        TRAP_OUTER - TRAP_WALL,
        -(TRAP_OUTER - TRAP_WALL),
        TRAP_OUTER,
        -TRAP_GAP,
    ],
    // channel walls reaching from the opening toward the center
    [
        TRAP_CHANNEL_X0,
        TRAP_GAP,
        TRAP_OUTER - TRAP_WALL,
        TRAP_GAP + TRAP_WALL,
    ],
    [
        TRAP_CHANNEL_X0,
        -(TRAP_GAP + TRAP_WALL),
        TRAP_OUTER - TRAP_WALL,
        -TRAP_GAP,
    ],
];

/// Wall test in the trap's canonical frame.
pub fn bugtrap_canonical_occupied(u: f64, v: f64) -> bool {
    TRAP_RECTS
        .iter()
        .any(|r| u >= r[0] && u <= r[2] && v >= r[1] && v <= r[3])
}

/// Channel interior (the only corridor between chamber and outside) in the
/// canonical frame.
pub fn bugtrap_in_channel(u: f64, v: f64) -> bool {
    (TRAP_CHANNEL_X0..=TRAP_OUTER).contains(&u) && v.abs() < TRAP_GAP
}

impl BugtrapInfo {
    /// Map coordinates -> canonical trap frame.
    pub fn to_canonical(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

pub const BUGTRAP_MAP_SIZE: usize = 110;

/// The bug-trap benchmark: a 110x110 map holding the trap at a sampled
/// rotation and translation, start inside the chamber, goal outside.
pub fn gen_bugtrap(seed: u64) -> Environment {
    let mut rng = RngStream::new(seed, 0xB067);
    let size = BUGTRAP_MAP_SIZE;
    let half = size as f64 / 2.0;
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let center = [
        half + rng.uniform(-10.0, 10.0),
        half + rng.uniform(-10.0, 10.0),
    ];
    let info = BugtrapInfo { angle, center };

    let mut map = OccupancyMap::empty(size, size);
    for cy in 0..size {
        for cx in 0..size {
            let (u, v) = info.to_canonical(cx as f64 + 0.5, cy as f64 + 0.5);
            if bugtrap_canonical_occupied(u, v) {
                map.set_cell(cx, cy, 1);
            }
        }
    }

    // Start in the chamber, left of the channel mouth.
    let start = loop {
        let u = rng.uniform(-(TRAP_OUTER - TRAP_WALL) + 3.0, TRAP_CHANNEL_X0 - 3.0);
        let v = rng.uniform(
            -(TRAP_OUTER - TRAP_WALL) + 3.0,
            TRAP_OUTER - TRAP_WALL - 3.0,
        );
        let (c, s) = (angle.cos(), angle.sin());
        let x = center[0] + c * u - s * v;
        let y = center[1] + s * u + c * v;
        if !map.occupied_at(x, y) {
            break Configuration::xy(x, y);
        }
    };
    // Goal outside the trap.
    let goal_center = loop {
        let x = rng.uniform(3.0, size as f64 - 3.0);
        let y = rng.uniform(3.0, size as f64 - 3.0);
        let (u, v) = info.to_canonical(x, y);
        if u.abs().max(v.abs()) > TRAP_OUTER + 3.0 && !map.occupied_at(x, y) {
            break Configuration::xy(x, y);
        }
    };

    let env = Environment {
        map,
        start,
        goal_center,
        goal_radius: 5.0,
        agents: Vec::new(),
        meta: EnvMeta {
            generator: "bugtrap".into(),
            seed,
            detail: GeneratorDetail::Bugtrap(info),
        },
    };
    debug_assert!(env.validate().is_ok());
    env
}

pub const ROUNDABOUT_MAP_SIZE: usize = 100;
/// Number of scripted waypoints per agent track.
pub const ROUNDABOUT_TRACK_LEN: usize = 2048;

/// Multi-agent roundabout: a central rectangular obstacle, `n_agents` scripted
/// discs orbiting counter-clockwise, and a robot that must swap sides.
pub fn gen_roundabout(seed: u64, n_agents: usize) -> Environment {
    assert!(
        (1..=8).contains(&n_agents),
        "roundabout supports 1..=8 agents"
    );
    let mut rng = RngStream::new(seed, 0xC1C1);
    let size = ROUNDABOUT_MAP_SIZE;
    let half = size as f64 / 2.0;

    let obstacle_center = [half + rng.uniform(-6.0, 6.0), half + rng.uniform(-6.0, 6.0)];
    let obstacle_half = [rng.uniform(7.0, 10.0), rng.uniform(7.0, 10.0)];
    let mut map = OccupancyMap::empty(size, size);
    map.fill_rect(
        obstacle_center[0] - obstacle_half[0],
        obstacle_center[1] - obstacle_half[1],
        obstacle_center[0] + obstacle_half[0],
        obstacle_center[1] + obstacle_half[1],
    );

    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let radius = rng.uniform(16.0, 26.0);
        let omega = rng.uniform(0.06, 0.12);
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let waypoints = (0..ROUNDABOUT_TRACK_LEN)
            .map(|t| {
                let theta = phase + omega * t as f64;
                Configuration::xy(
                    obstacle_center[0] + radius * theta.cos(),
                    obstacle_center[1] + radius * theta.sin(),
                )
            })
            .collect();
        agents.push(AgentTrack {
            waypoints,
            counter_clockwise: true,
            speed_bound: 2.0 * radius * (omega / 2.0).sin() + 1e-9,
        });
    }

    let env_probe = |start: &Configuration, agents: &[AgentTrack]| {
        let min_sep = super::ROBOT_RADIUS + super::AGENT_RADIUS;
        agents
            .iter()
            .all(|a| start.dist(a.position_at(0)) >= min_sep + 0.5)
    };
    let (start, goal_center) = loop {
        let psi = rng.uniform(0.0, std::f64::consts::TAU);
        let d = rng.uniform(38.0, 43.0);
        let s = Configuration::xy(
            obstacle_center[0] + d * psi.cos(),
            obstacle_center[1] + d * psi.sin(),
        );
        let g = Configuration::xy(
            obstacle_center[0] - d * psi.cos(),
            obstacle_center[1] - d * psi.sin(),
        );
        let in_bounds = |c: &Configuration| {
            c.x() > 2.0 && c.y() > 2.0 && c.x() < size as f64 - 2.0 && c.y() < size as f64 - 2.0
        };
        if in_bounds(&s)
            && in_bounds(&g)
            && !map.occupied_at(s.x(), s.y())
            && !map.occupied_at(g.x(), g.y())
            && env_probe(&s, &agents)
        {
            break (s, g);
        }
    };

    let env = Environment {
        map,
        start,
        goal_center,
        goal_radius: 3.0,
        agents,
        meta: EnvMeta {
            generator: "roundabout".into(),
            seed,
            detail: GeneratorDetail::Roundabout(RoundaboutInfo {
                obstacle_center,
                obstacle_half,
            }),
        },
    };
    debug_assert!(env.validate().is_ok());
    env
}
