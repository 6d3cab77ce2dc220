//! Deterministic synthetic RGB-D worlds.
//!
//! Two templates share one renderer: a corridor patrolled by box-shaped
//! robots (the default) and a table-top lattice with a single manipulated
//! block. Scenes are ray cast through a pinhole camera; depth is the z-depth
//! along the optical axis in metres.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelSpace;
use crate::preproc::{BoundingBox, RawFrame, TruthBox};

// ---------------------------------------------------------------------------
// Poses, actions and dynamics

/// Patrol headings. Turning right adds one (mod 4).
pub const NORTH: usize = 0;
pub const EAST: usize = 1;
pub const SOUTH: usize = 2;
pub const WEST: usize = 3;

/// Patrol actions.
pub const FORWARD: usize = 0;
pub const STOP: usize = 1;
pub const TURN_LEFT: usize = 2;
pub const TURN_RIGHT: usize = 3;

/// Manipulation actions.
pub const M_STOP: usize = 0;
pub const M_ROTATE_CCW: usize = 1;
pub const M_ROTATE_CW: usize = 2;
pub const M_RAISE: usize = 3;
pub const M_LOWER: usize = 4;
pub const M_SLIDE: usize = 5;

pub const MANIP_YAWS: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertPose {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    /// Heading class (patrol: N/E/S/W; manipulation: yaw in 60 degree steps).
    pub theta: usize,
    /// Effective action that produced this pose.
    pub action: usize,
}

impl ExpertPose {
    pub fn cell(&self) -> (usize, usize, usize) {
        (self.x, self.y, self.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    Patrol,
    Manipulation,
}

impl Template {
    pub fn code(self) -> u8 {
        match self {
            Template::Patrol => 0,
            Template::Manipulation => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Template::Patrol),
            1 => Some(Template::Manipulation),
            _ => None,
        }
    }
}

fn heading_delta(theta: usize) -> (isize, isize) {
    match theta {
        NORTH => (0, 1),
        EAST => (1, 0),
        SOUTH => (0, -1),
        _ => (-1, 0),
    }
}

/// Sign of the x step taken by a manipulation slide at yaw class `theta`.
fn slide_dx(theta: usize) -> isize {
    let yaw = theta as f64 * std::f64::consts::TAU / MANIP_YAWS as f64;
    if yaw.cos() > 0.0 {
        1
    } else {
        -1
    }
}

fn offset(v: usize, d: isize, n: usize) -> Option<usize> {
    let r = v as isize + d;
    (r >= 0 && (r as usize) < n).then_some(r as usize)
}

/// One deterministic transition. Moves that would leave the grid (or enter an
/// `occupied` cell) degrade to the stop action; the returned pose records the
/// action actually taken.
pub fn step_dynamics(template: Template, grid: (usize, usize, usize), pose: ExpertPose, action: usize, occupied: &[(usize, usize, usize)]) -> ExpertPose {
    let (nx, ny, nz) = grid;
    let stop_action = match template {
        Template::Patrol => STOP,
        Template::Manipulation => M_STOP,
    };
    let stopped = ExpertPose {
        action: stop_action,
        ..pose
    };
    let moved = |x: Option<usize>, y: Option<usize>, z: Option<usize>| match (x, y, z) {
        (Some(x), Some(y), Some(z)) if !occupied.contains(&(x, y, z)) => ExpertPose { x, y, z, action, ..pose },
        _ => stopped,
    };
    match template {
        Template::Patrol => match action {
            FORWARD => {
                let (dx, dy) = heading_delta(pose.theta);
                moved(offset(pose.x, dx, nx), offset(pose.y, dy, ny), Some(pose.z))
            }
            TURN_LEFT => ExpertPose {
                theta: (pose.theta + 3) % 4,
                action,
                ..pose
            },
            TURN_RIGHT => ExpertPose {
                theta: (pose.theta + 1) % 4,
                action,
                ..pose
            },
            _ => stopped,
        },
        Template::Manipulation => match action {
            M_ROTATE_CCW => ExpertPose {
                theta: (pose.theta + 1) % MANIP_YAWS,
                action,
                ..pose
            },
            M_ROTATE_CW => ExpertPose {
                theta: (pose.theta + MANIP_YAWS - 1) % MANIP_YAWS,
                action,
                ..pose
            },
            M_RAISE => moved(Some(pose.x), Some(pose.y), offset(pose.z, 1, nz)),
            M_LOWER => moved(Some(pose.x), Some(pose.y), offset(pose.z, -1, nz)),
            M_SLIDE => moved(offset(pose.x, slide_dx(pose.theta), nx), Some(pose.y), Some(pose.z)),
            _ => stopped,
        },
    }
}

/// Recovers the action linking two consecutive poses, if any single action does.
pub fn inverse_dynamics(template: Template, prev: &ExpertPose, next: &ExpertPose) -> Option<usize> {
    let same_cell = prev.cell() == next.cell();
    match template {
        Template::Patrol => {
            if same_cell {
                match (next.theta + 4 - prev.theta) % 4 {
                    0 => Some(STOP),
                    1 => Some(TURN_RIGHT),
                    3 => Some(TURN_LEFT),
                    _ => None,
                }
            } else {
                let (dx, dy) = heading_delta(prev.theta);
                let ok = next.theta == prev.theta
                    && next.z == prev.z
                    && next.x as isize == prev.x as isize + dx
                    && next.y as isize == prev.y as isize + dy;
                ok.then_some(FORWARD)
            }
        }
        Template::Manipulation => {
            let n = MANIP_YAWS;
            if same_cell {
                match (next.theta + n - prev.theta) % n {
                    0 => Some(M_STOP),
                    1 => Some(M_ROTATE_CCW),
                    d if d == n - 1 => Some(M_ROTATE_CW),
                    _ => None,
                }
            } else if next.theta != prev.theta {
                None
            } else if next.x == prev.x && next.y == prev.y {
                match next.z as isize - prev.z as isize {
                    1 => Some(M_RAISE),
                    -1 => Some(M_LOWER),
                    _ => None,
                }
            } else {
                let ok = next.y == prev.y && next.z == prev.z && next.x as isize == prev.x as isize + slide_dx(prev.theta);
                ok.then_some(M_SLIDE)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    /// Learner positions along -x, metres behind the grid origin.
    pub vantages: Vec<f64>,
    /// Lateral position of the learner (metres).
    pub y: f64,
    pub height: f64,
    /// Downward pitch in degrees.
    pub pitch_deg: f64,
    /// Horizontal field of view in degrees.
    pub hfov_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            vantages: vec![2.5, 3.0, 3.5],
            y: 0.75,
            height: 3.0,
            pitch_deg: 34.0,
            hfov_deg: 45.0,
        }
    }
}

/// Ranges used to bin learner-to-expert offsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelativeBins {
    /// `dx` bins cover `[0, dx_max)`.
    pub dx_max: f64,
    /// `dy` bins cover `[-dy_half, dy_half)`.
    pub dy_half: f64,
    /// `dz` bins cover `[0, dz_max)`.
    pub dz_max: f64,
}

impl Default for RelativeBins {
    fn default() -> Self {
        Self {
            dx_max: 9.6,
            dy_half: 2.0,
            dz_max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub template: Template,
    pub grid_x: usize,
    pub grid_y: usize,
    pub grid_z: usize,
    /// Cell edge in metres (x and y).
    pub cell_m: f64,
    /// Vertical lattice spacing (manipulation only).
    pub level_m: f64,
    pub camera: CameraConfig,
    pub render_w: usize,
    pub render_h: usize,
    pub expert_colors: Vec<[u8; 3]>,
    /// Probability that a patroller stops for a step.
    pub stop_prob: f64,
    pub burn_in_min: usize,
    pub burn_in_max: usize,
    pub bins: RelativeBins,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::patrol()
    }
}

impl WorldConfig {
    pub fn patrol() -> Self {
        Self {
            template: Template::Patrol,
            grid_x: 10,
            grid_y: 3,
            grid_z: 1,
            cell_m: 0.5,
            level_m: 0.1,
            camera: CameraConfig::default(),
            render_w: 160,
            render_h: 120,
            expert_colors: vec![[220, 40, 40], [40, 70, 220]],
            stop_prob: 0.2,
            burn_in_min: 4,
            burn_in_max: 40,
            bins: RelativeBins::default(),
            seed: 0,
        }
    }

    pub fn manipulation() -> Self {
        Self {
            template: Template::Manipulation,
            grid_x: 4,
            grid_y: 4,
            grid_z: 3,
            cell_m: 0.15,
            level_m: 0.1,
            camera: CameraConfig {
                vantages: vec![0.5, 0.7, 0.9],
                y: 0.3,
                height: 1.2,
                pitch_deg: 35.0,
                hfov_deg: 60.0,
            },
            render_w: 160,
            render_h: 120,
            expert_colors: vec![[220, 40, 40]],
            stop_prob: 0.2,
            burn_in_min: 2,
            burn_in_max: 20,
            bins: RelativeBins {
                dx_max: 2.0,
                dy_half: 0.6,
                dz_max: 0.4,
            },
            seed: 0,
        }
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.grid_x, self.grid_y, self.grid_z)
    }

    pub fn expert_count(&self) -> usize {
        self.expert_colors.len()
    }

    /// Label space matching this world.
    pub fn label_space(&self) -> LabelSpace {
        match self.template {
            Template::Patrol => LabelSpace {
                n_x: self.grid_x,
                n_y: self.grid_y,
                ..LabelSpace::patrol()
            },
            Template::Manipulation => LabelSpace {
                n_x: self.grid_x,
                n_y: self.grid_y,
                n_z: self.grid_z,
                ..LabelSpace::manipulation()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("world.{key}"),
                detail,
            })
        };
        if self.grid_x < 2 || self.grid_y < 2 || self.grid_z < 1 {
            return bad("grid_x", "grid needs at least 2x2 cells".into());
        }
        if self.template == Template::Patrol && self.grid_z != 1 {
            return bad("grid_z", "patrol worlds are planar (grid_z = 1)".into());
        }
        if self.expert_colors.is_empty() {
            return bad("expert_colors", "at least one expert is required".into());
        }
        let n = self.expert_colors.len();
        for i in 0..n {
            for j in i + 1..n {
                if self.expert_colors[i] == self.expert_colors[j] {
                    return bad("expert_colors", format!("experts {i} and {j} share a colour"));
                }
            }
        }
        let cells = match self.template {
            Template::Patrol => 2 * (self.grid_x + self.grid_y) - 4,
            Template::Manipulation => self.grid_x * self.grid_y * self.grid_z,
        };
        if n > cells {
            return bad("expert_colors", format!("{n} experts do not fit in {cells} cells"));
        }
        if self.camera.vantages.is_empty() || self.camera.vantages.len() > 255 {
            return bad("camera.vantages", "between 1 and 255 vantages required".into());
        }
        if self.render_w < 8 || self.render_h < 8 {
            return bad("render_w", "render extent must be at least 8x8".into());
        }
        if !(0.0..=1.0).contains(&self.stop_prob) {
            return bad("stop_prob", format!("{} is not a probability", self.stop_prob));
        }
        if self.burn_in_min > self.burn_in_max {
            return bad("burn_in_min", "exceeds burn_in_max".into());
        }
        if !(self.camera.hfov_deg > 0.0 && self.camera.hfov_deg < 170.0) {
            return bad("camera.hfov_deg", format!("{} out of range", self.camera.hfov_deg));
        }
        Ok(())
    }

    /// Binned learner-to-expert offsets `(dx, dy, dz)` for `pose` seen from `vantage`.
    pub fn relative_bins(&self, pose: &ExpertPose, vantage: usize, space: &LabelSpace) -> (usize, usize, usize) {
        let c = self.expert_center(pose);
        let lx = -self.camera.vantages[vantage];
        let bin = |v: f64, lo: f64, hi: f64, n: usize| -> usize {
            let f = ((v - lo) / (hi - lo) * n as f64).floor();
            f.clamp(0.0, (n - 1) as f64) as usize
        };
        let b = &self.bins;
        let dx = bin(c[0] - lx, 0.0, b.dx_max, space.n_dx);
        let dy = bin(c[1] - self.camera.y, -b.dy_half, b.dy_half, space.n_dy);
        let dz = if space.has_z {
            bin(c[2] - self.base_z(), 0.0, b.dz_max, space.n_dz)
        } else {
            0
        };
        (dx, dy, dz)
    }

    fn base_z(&self) -> f64 {
        match self.template {
            Template::Patrol => 0.0,
            Template::Manipulation => TABLE_H,
        }
    }

    /// Centre of the expert body in world coordinates.
    pub fn expert_center(&self, pose: &ExpertPose) -> [f64; 3] {
        let (hz, z0) = match self.template {
            Template::Patrol => (ROBOT_H / 2.0, 0.0),
            Template::Manipulation => (BLOCK_H / 2.0, TABLE_H + pose.z as f64 * self.level_m),
        };
        [
            (pose.x as f64 + 0.5) * self.cell_m,
            (pose.y as f64 + 0.5) * self.cell_m,
            z0 + hz,
        ]
    }
}

// ---------------------------------------------------------------------------
// Perturbations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    None,
    Distractors,
    DimLight,
    Human,
    Occlusion,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 5] = [
        PerturbationKind::None,
        PerturbationKind::Distractors,
        PerturbationKind::DimLight,
        PerturbationKind::Human,
        PerturbationKind::Occlusion,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::None => "none",
            PerturbationKind::Distractors => "distractors",
            PerturbationKind::DimLight => "dim-light",
            PerturbationKind::Human => "human",
            PerturbationKind::Occlusion => "occlusion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    /// Occlusion fraction, light scale, or distractor count depending on kind.
    pub magnitude: f64,
}

impl Perturbation {
    pub const NONE: Perturbation = Perturbation {
        kind: PerturbationKind::None,
        magnitude: 0.0,
    };

    pub fn distractors(count: usize) -> Self {
        Self {
            kind: PerturbationKind::Distractors,
            magnitude: count as f64,
        }
    }

    pub fn dim_light(scale: f64) -> Self {
        Self {
            kind: PerturbationKind::DimLight,
            magnitude: scale,
        }
    }

    pub fn human() -> Self {
        Self {
            kind: PerturbationKind::Human,
            magnitude: 1.0,
        }
    }

    pub fn occlusion(fraction: f64) -> Self {
        Self {
            kind: PerturbationKind::Occlusion,
            magnitude: fraction,
        }
    }

    /// The standard setting of each kind.
    pub fn standard(kind: PerturbationKind) -> Self {
        match kind {
            PerturbationKind::None => Self::NONE,
            PerturbationKind::Distractors => Self::distractors(2),
            PerturbationKind::DimLight => Self::dim_light(0.4),
            PerturbationKind::Human => Self::human(),
            PerturbationKind::Occlusion => Self::occlusion(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            PerturbationKind::None | PerturbationKind::Human => true,
            PerturbationKind::Occlusion => self.magnitude > 0.0 && self.magnitude < 1.0,
            PerturbationKind::DimLight => self.magnitude > 0.0 && self.magnitude <= 1.0,
            PerturbationKind::Distractors => self.magnitude >= 0.0 && self.magnitude.fract() == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "magnitude {} invalid for perturbation {}",
                self.magnitude,
                self.kind.name()
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// Geometry and rendering

const ROBOT_L: f64 = 0.4;
const ROBOT_W: f64 = 0.24;
const ROBOT_H: f64 = 0.3;
const NOTCH_HALF: f64 = 0.03;
const WALL_H: f64 = 1.5;
const DISTRACTOR: f64 = 0.18;
const TABLE_H: f64 = 0.5;
const BLOCK_L: f64 = 0.12;
const BLOCK_W: f64 = 0.06;
const BLOCK_H: f64 = 0.05;

const FLOOR: [u8; 3] = [46, 46, 42];
const OUTSIDE: [u8; 3] = [16, 20, 16];
const WALL: [u8; 3] = [74, 68, 58];
const END_WALL: [u8; 3] = [52, 58, 66];
const TABLE: [u8; 3] = [150, 120, 90];
const CARDBOARD: [u8; 3] = [156, 118, 74];
const PANTS: [u8; 3] = [45, 45, 60];
const SHIRT: [u8; 3] = [200, 50, 60];

/// Id-buffer values: 0 is static scenery, experts are `1 + index`.
pub const ID_STATIC: u16 = 0;
pub const ID_DISTRACTOR: u16 = 1000;
pub const ID_HUMAN: u16 = 1001;
pub const ID_OCCLUDER: u16 = 1002;

pub fn expert_id(index: usize) -> u16 {
    1 + index as u16
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Box rotated about the vertical axis.
#[derive(Clone, Copy, Debug)]
struct Solid {
    center: V3,
    half: V3,
    yaw: f64,
    color: [u8; 3],
    notch: bool,
    id: u16,
}

impl Solid {
    fn corners(&self) -> [V3; 8] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [[0.0; 3]; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let lx = if i & 1 == 0 { -self.half[0] } else { self.half[0] };
            let ly = if i & 2 == 0 { -self.half[1] } else { self.half[1] };
            let lz = if i & 4 == 0 { -self.half[2] } else { self.half[2] };
            *o = [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
                self.center[2] + lz,
            ];
        }
        out
    }

    /// Nearest positive ray hit: `(t, shaded colour)`.
    fn hit(&self, o: V3, d: V3) -> Option<(f64, [u8; 3])> {
        let (s, c) = self.yaw.sin_cos();
        let rel = [o[0] - self.center[0], o[1] - self.center[1], o[2] - self.center[2]];
        let lo = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
        let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let mut axis = 0;
        let mut neg = false;
        for a in 0..3 {
            if ld[a].abs() < 1e-12 {
                if lo[a].abs() > self.half[a] {
                    return None;
                }
                continue;
            }
            let ta = (-self.half[a] - lo[a]) / ld[a];
            let tb = (self.half[a] - lo[a]) / ld[a];
            let (near, far, near_neg) = if ta < tb { (ta, tb, true) } else { (tb, ta, false) };
            if near > t0 {
                t0 = near;
                axis = a;
                neg = near_neg;
            }
            t1 = t1.min(far);
        }
        if t0 > t1 || t0 <= 1e-9 {
            return None;
        }
        let shade = match (axis, neg) {
            (2, false) => 1.0,
            (2, true) => 0.5,
            (0, _) => 0.82,
            _ => 0.66,
        };
        let mut shade = shade;
        if self.notch && axis == 2 && !neg {
            let ly = lo[1] + t0 * ld[1];
            if ly.abs() < NOTCH_HALF {
                shade = 0.5;
            }
        }
        let col = self.color.map(|v| (v as f64 * shade).round() as u8);
        Some((t0, col))
    }
}

/// Pinhole camera looking along +x, pitched down.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub origin: V3,
    forward: V3,
    right: V3,
    up: V3,
    fx: f64,
    cx: f64,
    cy: f64,
}

impl Camera {
    fn new(cfg: &WorldConfig, vantage: usize) -> Self {
        let p = cfg.camera.pitch_deg.to_radians();
        let fx = (cfg.render_w as f64 / 2.0) / (cfg.camera.hfov_deg.to_radians() / 2.0).tan();
        Self {
            origin: [-cfg.camera.vantages[vantage], cfg.camera.y, cfg.camera.height],
            forward: [p.cos(), 0.0, -p.sin()],
            right: [0.0, -1.0, 0.0],
            up: [p.sin(), 0.0, p.cos()],
            fx,
            cx: cfg.render_w as f64 / 2.0,
            cy: cfg.render_h as f64 / 2.0,
        }
    }

    /// Unnormalised ray direction through the centre of pixel `(px, py)`;
    /// its forward component is 1, so a hit parameter equals z-depth.
    pub fn ray(&self, px: usize, py: usize) -> V3 {
        let u = (px as f64 + 0.5 - self.cx) / self.fx;
        let v = (py as f64 + 0.5 - self.cy) / self.fx;
        [
            self.forward[0] + u * self.right[0] - v * self.up[0],
            self.forward[1] + u * self.right[1] - v * self.up[1],
            self.forward[2] + u * self.right[2] - v * self.up[2],
        ]
    }

    /// Continuous image coordinates and z-depth of a world point.
    pub fn project(&self, p: V3) -> (f64, f64, f64) {
        let r = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        let z = dot(r, self.forward);
        let u = dot(r, self.right) / z;
        let v = -dot(r, self.up) / z;
        (self.cx + u * self.fx, self.cy + v * self.fx, z)
    }
}

/// One frame's worth of scene content.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub vantage: usize,
    pub experts: Vec<ExpertPose>,
    pub perturbation: Perturbation,
    /// Seeds the placement of perturbation props; shared across a triplet.
    pub prop_seed: u64,
}

/// A rendered frame plus its per-pixel object ids.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub frame: RawFrame,
    pub ids: Vec<u16>,
}

/// A world: configuration plus the cached empty-scene render per vantage.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    backgrounds: Vec<Rendered>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut world = Self {
            config,
            backgrounds: Vec::new(),
        };
        world.backgrounds = (0..world.config.camera.vantages.len()).map(|v| world.render_static(v)).collect();
        Ok(world)
    }

    pub fn camera(&self, vantage: usize) -> Camera {
        Camera::new(&self.config, vantage)
    }

    /// The empty-scene render used as the masking background.
    pub fn background(&self, vantage: usize) -> &RawFrame {
        &self.backgrounds[vantage].frame
    }

    pub fn vantage_count(&self) -> usize {
        self.backgrounds.len()
    }

    fn static_solids(&self) -> Vec<Solid> {
        let c = &self.config;
        let len = c.grid_x as f64 * c.cell_m;
        let wid = c.grid_y as f64 * c.cell_m;
        let solid = |lo: V3, hi: V3, color| Solid {
            center: [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0],
            half: [(hi[0] - lo[0]) / 2.0, (hi[1] - lo[1]) / 2.0, (hi[2] - lo[2]) / 2.0],
            yaw: 0.0,
            color,
            notch: false,
            id: ID_STATIC,
        };
        match c.template {
            Template::Patrol => vec![
                solid([-40.0, -40.0, -1.0], [40.0, 40.0, -1e-3], OUTSIDE),
                solid([0.0, 0.0, -1.0], [len, wid, 0.0], FLOOR),
                solid([0.0, -0.2, -1.0], [len, 0.0, WALL_H], WALL),
                solid([0.0, wid, -1.0], [len, wid + 0.2, WALL_H], WALL),
                solid([len, -1.0, -1.0], [len + 1.0, wid + 1.0, WALL_H + 2.0], END_WALL),
            ],
            Template::Manipulation => vec![
                solid([-20.0, -20.0, -1.0], [20.0, 20.0, 0.0], FLOOR),
                solid([len + 0.6, -20.0, 0.0], [len + 1.6, 20.0, 4.0], END_WALL),
                solid([-0.05, -0.05, 0.0], [len + 0.05, wid + 0.05, TABLE_H], TABLE),
            ],
        }
    }

    fn expert_solid(&self, index: usize, pose: &ExpertPose) -> Solid {
        let c = &self.config;
        let center = c.expert_center(pose);
        let (half, yaw) = match c.template {
            Template::Patrol => (
                [ROBOT_L / 2.0, ROBOT_W / 2.0, ROBOT_H / 2.0],
                (1.0 - pose.theta as f64) * std::f64::consts::FRAC_PI_2,
            ),
            Template::Manipulation => (
                [BLOCK_L / 2.0, BLOCK_W / 2.0, BLOCK_H / 2.0],
                pose.theta as f64 * std::f64::consts::TAU / MANIP_YAWS as f64,
            ),
        };
        Solid {
            center,
            half,
            yaw,
            color: c.expert_colors[index],
            notch: true,
            id: expert_id(index),
        }
    }

    /// Free cells for props, excluding every listed expert cell.
    fn prop_cells(&self, taken: &[(usize, usize)]) -> Vec<(usize, usize)> {
        let c = &self.config;
        let mut cells = Vec::new();
        for y in 0..c.grid_y {
            for x in 0..c.grid_x {
                let interior = match c.template {
                    Template::Patrol => x > 0 && x + 1 < c.grid_x && y > 0 && y + 1 < c.grid_y,
                    Template::Manipulation => true,
                };
                if interior && !taken.contains(&(x, y)) {
                    cells.push((x, y));
                }
            }
        }
        cells
    }

    /// Props (distractor boxes, human) for a perturbation, placed away from
    /// every cell in `taken`.
    fn prop_solids(&self, scene: &Scene, taken: &[(usize, usize)]) -> Vec<Solid> {
        use rand::SeedableRng;
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(scene.prop_seed);
        let mut cells = self.prop_cells(taken);
        let mut pick = |rng: &mut ChaCha8Rng| -> Option<(usize, usize)> {
            (!cells.is_empty()).then(|| cells.swap_remove(rng.gen_range(0..cells.len())))
        };
        let base_z = c.base_z();
        let at = |cell: (usize, usize), jx: f64, jy: f64| -> (f64, f64) {
            ((cell.0 as f64 + 0.5 + jx) * c.cell_m, (cell.1 as f64 + 0.5 + jy) * c.cell_m)
        };
        let mut out = Vec::new();
        match scene.perturbation.kind {
            PerturbationKind::Distractors => {
                let size = match c.template {
                    Template::Patrol => DISTRACTOR,
                    Template::Manipulation => BLOCK_W,
                };
                for _ in 0..scene.perturbation.magnitude as usize {
                    let Some(cell) = pick(&mut rng) else { break };
                    let color = c.expert_colors[rng.gen_range(0..c.expert_colors.len())];
                    let (x, y) = at(cell, rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
                    out.push(Solid {
                        center: [x, y, base_z + size / 2.0],
                        half: [size / 2.0; 3],
                        yaw: rng.gen_range(0.0..std::f64::consts::FRAC_PI_2),
                        color,
                        notch: false,
                        id: ID_DISTRACTOR,
                    });
                }
            }
            PerturbationKind::Human => {
                if let Some(cell) = pick(&mut rng) {
                    let (x, y) = at(cell, rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
                    let s = match c.template {
                        Template::Patrol => 1.0,
                        Template::Manipulation => 0.25,
                    };
                    out.push(Solid {
                        center: [x, y, base_z + 0.4 * s],
                        half: [0.15 * s, 0.2 * s, 0.4 * s],
                        yaw: 0.0,
                        color: PANTS,
                        notch: false,
                        id: ID_HUMAN,
                    });
                    out.push(Solid {
                        center: [x, y, base_z + 1.25 * s],
                        half: [0.15 * s, 0.2 * s, 0.45 * s],
                        yaw: 0.0,
                        color: SHIRT,
                        notch: false,
                        id: ID_HUMAN,
                    });
                }
            }
            _ => {}
        }
        out
    }

    fn render_static(&self, vantage: usize) -> Rendered {
        let c = &self.config;
        let cam = self.camera(vantage);
        let solids = self.static_solids();
        let (w, h) = (c.render_w, c.render_h);
        let mut rgb = vec![0u8; w * h * 3];
        let mut depth = vec![f32::NAN; w * h];
        for py in 0..h {
            for px in 0..w {
                let d = cam.ray(px, py);
                let best = solids
                    .iter()
                    .filter_map(|s| s.hit(cam.origin, d))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                if let Some((t, col)) = best {
                    let i = py * w + px;
                    rgb[i * 3..i * 3 + 3].copy_from_slice(&col);
                    depth[i] = t as f32;
                }
            }
        }
        Rendered {
            frame: RawFrame {
                width: w,
                height: h,
                rgb,
                depth,
                timestamp: 0,
                truth: Vec::new(),
            },
            ids: vec![ID_STATIC; w * h],
        }
    }

    /// Pixel bounds of a solid's projection, clipped to the frame.
    fn projected_bounds(&self, cam: &Camera, s: &Solid) -> Option<(usize, usize, usize, usize)> {
        let (w, h) = (self.config.render_w as f64, self.config.render_h as f64);
        let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in s.corners() {
            let (u, v, z) = cam.project(p);
            if z <= 1e-6 {
                return Some((0, 0, w as usize - 1, h as usize - 1));
            }
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        // pixel centres at px + 0.5
        let x1 = (u0 - 0.5).ceil().max(0.0);
        let x2 = (u1 - 0.5).floor().min(w - 1.0);
        let y1 = (v0 - 0.5).ceil().max(0.0);
        let y2 = (v1 - 0.5).floor().min(h - 1.0);
        (x1 <= x2 && y1 <= y2).then_some((x1 as usize, y1 as usize, x2 as usize, y2 as usize))
    }

    fn draw(&self, cam: &Camera, s: &Solid, out: &mut Rendered) {
        let Some((x1, y1, x2, y2)) = self.projected_bounds(cam, s) else {
            return;
        };
        let w = self.config.render_w;
        for py in y1..=y2 {
            for px in x1..=x2 {
                let d = cam.ray(px, py);
                if let Some((t, col)) = s.hit(cam.origin, d) {
                    let i = py * w + px;
                    let z = t as f32;
                    if !(z >= out.frame.depth[i]) {
                        out.frame.depth[i] = z;
                        out.frame.rgb[i * 3..i * 3 + 3].copy_from_slice(&col);
                        out.ids[i] = s.id;
                    }
                }
            }
        }
    }

    /// Ground-truth box of an expert: the projected silhouette's pixel bounds.
    pub fn silhouette_box(&self, vantage: usize, index: usize, pose: &ExpertPose) -> Option<BoundingBox> {
        let cam = self.camera(vantage);
        let s = self.expert_solid(index, pose);
        let (x1, y1, x2, y2) = self.projected_bounds(&cam, &s)?;
        let (w, h) = (self.config.render_w as u32, self.config.render_h as u32);
        let widen = |a: usize, b: usize, n: u32| -> (u32, u32) {
            let (a, b) = (a as u32, b as u32);
            if a < b {
                (a, b)
            } else if b + 1 < n {
                (a, b + 1)
            } else {
                (a - 1, b)
            }
        };
        let (x1, x2) = widen(x1, x2, w);
        let (y1, y2) = widen(y1, y2, h);
        Some(BoundingBox { x1, y1, x2, y2 })
    }

    /// Renders one frame. `taken` lists cells occupied at any time in the
    /// surrounding triplet so props never overlap an expert.
    pub fn render(&self, scene: &Scene, taken: &[(usize, usize)], timestamp: u64) -> Result<Rendered> {
        let c = &self.config;
        if scene.vantage >= self.backgrounds.len() {
            return Err(Error::Argument(format!("vantage {} out of range", scene.vantage)));
        }
        if scene.experts.len() > c.expert_count() {
            return Err(Error::Argument(format!(
                "{} experts in scene, world has {} colours",
                scene.experts.len(),
                c.expert_count()
            )));
        }
        for p in &scene.experts {
            if p.x >= c.grid_x || p.y >= c.grid_y || p.z >= c.grid_z {
                return Err(Error::Argument(format!("pose {p:?} outside the grid")));
            }
        }
        scene.perturbation.validate()?;
        let cam = self.camera(scene.vantage);
        let mut out = self.backgrounds[scene.vantage].clone();
        out.frame.timestamp = timestamp;
        for s in self.prop_solids(scene, taken) {
            self.draw(&cam, &s, &mut out);
        }
        for (i, p) in scene.experts.iter().enumerate() {
            let s = self.expert_solid(i, p);
            self.draw(&cam, &s, &mut out);
        }
        if scene.perturbation.kind == PerturbationKind::Occlusion {
            for i in 0..scene.experts.len() {
                occlude(&mut out, expert_id(i), scene.perturbation.magnitude);
            }
        }
        if scene.perturbation.kind == PerturbationKind::DimLight {
            let k = scene.perturbation.magnitude;
            for v in &mut out.frame.rgb {
                *v = (*v as f64 * k).round() as u8;
            }
        }
        for (i, p) in scene.experts.iter().enumerate() {
            if let Some(bbox) = self.silhouette_box(scene.vantage, i, p) {
                let id = expert_id(i);
                let visible_px = out.ids.iter().filter(|&&v| v == id).count() as u32;
                out.frame.truth.push(TruthBox {
                    expert: i as u32,
                    bbox,
                    visible_px,
                });
            }
        }
        Ok(out)
    }
}

/// Covers the top rows of an expert's visible silhouette with a cardboard
/// rectangle until at least `fraction` of its pixels are hidden.
fn occlude(out: &mut Rendered, id: u16, fraction: f64) {
    let w = out.frame.width;
    let h = out.frame.height;
    let mut rows = vec![0usize; h];
    let (mut x1, mut x2) = (w, 0);
    let mut total = 0;
    for (i, &v) in out.ids.iter().enumerate() {
        if v == id {
            rows[i / w] += 1;
            x1 = x1.min(i % w);
            x2 = x2.max(i % w);
            total += 1;
        }
    }
    if total == 0 {
        return;
    }
    let need = (fraction * total as f64).ceil() as usize;
    let mut min_depth = f32::INFINITY;
    for (i, &v) in out.ids.iter().enumerate() {
        if v == id {
            min_depth = min_depth.min(out.frame.depth[i]);
        }
    }
    let mut hidden = 0;
    for (y, &n) in rows.iter().enumerate() {
        if hidden >= need {
            break;
        }
        if n == 0 && hidden == 0 {
            continue;
        }
        for x in x1..=x2 {
            let i = y * w + x;
            out.frame.rgb[i * 3..i * 3 + 3].copy_from_slice(&CARDBOARD);
            out.frame.depth[i] = (min_depth - 0.05).max(0.0);
            out.ids[i] = ID_OCCLUDER;
        }
        hidden += n;
    }
}

// ---------------------------------------------------------------------------
// Behaviour policies

/// Loop direction around the corridor perimeter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopDirection {
    CounterClockwise,
    Clockwise,
}

/// Heading the patrol loop wants at a perimeter cell.
pub fn loop_heading(grid: (usize, usize), cell: (usize, usize), dir: LoopDirection) -> usize {
    let (nx, ny) = grid;
    let (x, y) = cell;
    match dir {
        LoopDirection::CounterClockwise => {
            if y == 0 && x + 1 < nx {
                EAST
            } else if x + 1 == nx && y + 1 < ny {
                NORTH
            } else if y + 1 == ny && x > 0 {
                WEST
            } else {
                SOUTH
            }
        }
        LoopDirection::Clockwise => {
            if y == 0 && x > 0 {
                WEST
            } else if x == 0 && y + 1 < ny {
                NORTH
            } else if y + 1 == ny && x + 1 < nx {
                EAST
            } else {
                SOUTH
            }
        }
    }
}

/// Perimeter cells in counter-clockwise order starting at the origin.
pub fn perimeter(grid: (usize, usize)) -> Vec<(usize, usize)> {
    let (nx, ny) = grid;
    let mut out = Vec::new();
    out.extend((0..nx).map(|x| (x, 0)));
    out.extend((1..ny).map(|y| (nx - 1, y)));
    out.extend((0..nx - 1).rev().map(|x| (x, ny - 1)));
    out.extend((1..ny - 1).rev().map(|y| (0, y)));
    out
}

/// The patrol policy's intended action for one expert.
pub fn patrol_action(grid: (usize, usize), pose: &ExpertPose, dir: LoopDirection, stop_prob: f64, rng: &mut impl Rng) -> usize {
    if rng.gen::<f64>() < stop_prob {
        return STOP;
    }
    let want = loop_heading(grid, (pose.x, pose.y), dir);
    match (want + 4 - pose.theta) % 4 {
        0 => FORWARD,
        1 => TURN_RIGHT,
        3 => TURN_LEFT,
        _ => match dir {
            LoopDirection::CounterClockwise => TURN_LEFT,
            LoopDirection::Clockwise => TURN_RIGHT,
        },
    }
}

/// Random manipulation action (uniform over the six classes).
pub fn manipulation_action(stop_prob: f64, rng: &mut impl Rng) -> usize {
    if rng.gen::<f64>() < stop_prob {
        M_STOP
    } else {
        rng.gen_range(1..6)
    }
}

/// Advances every expert one step, in index order; each expert sees the
/// already-updated cells of earlier experts and the current cells of later ones.
pub fn step_all(cfg: &WorldConfig, poses: &mut [ExpertPose], dir: LoopDirection, rng: &mut impl Rng) {
    let grid = cfg.grid();
    for i in 0..poses.len() {
        let action = match cfg.template {
            Template::Patrol => patrol_action((grid.0, grid.1), &poses[i], dir, cfg.stop_prob, rng),
            Template::Manipulation => manipulation_action(cfg.stop_prob, rng),
        };
        let occupied: Vec<(usize, usize, usize)> = poses
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, p)| p.cell())
            .collect();
        poses[i] = step_dynamics(cfg.template, grid, poses[i], action, &occupied);
    }
}

/// Random initial poses: distinct cells, headings aligned with the loop.
pub fn initial_poses(cfg: &WorldConfig, dir: LoopDirection, rng: &mut impl Rng) -> Vec<ExpertPose> {
    let n = cfg.expert_count();
    match cfg.template {
        Template::Patrol => {
            let ring = perimeter((cfg.grid_x, cfg.grid_y));
            let picks = rand::seq::index::sample(rng, ring.len(), n);
            picks
                .iter()
                .map(|k| {
                    let (x, y) = ring[k];
                    ExpertPose {
                        x,
                        y,
                        z: 0,
                        theta: loop_heading((cfg.grid_x, cfg.grid_y), (x, y), dir),
                        action: STOP,
                    }
                })
                .collect()
        }
        Template::Manipulation => {
            let cells = cfg.grid_x * cfg.grid_y * cfg.grid_z;
            let picks = rand::seq::index::sample(rng, cells, n);
            picks
                .iter()
                .map(|k| ExpertPose {
                    x: k % cfg.grid_x,
                    y: (k / cfg.grid_x) % cfg.grid_y,
                    z: k / (cfg.grid_x * cfg.grid_y),
                    theta: rng.gen_range(0..MANIP_YAWS),
                    action: M_STOP,
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const G: (usize, usize, usize) = (10, 3, 1);

    fn pose(x: usize, y: usize, theta: usize) -> ExpertPose {
        ExpertPose {
            x,
            y,
            z: 0,
            theta,
            action: STOP,
        }
    }

    #[test]
    fn forward_east() {
        let p = step_dynamics(Template::Patrol, G, pose(2, 0, EAST), FORWARD, &[]);
        assert_eq!((p.x, p.y, p.theta, p.action), (3, 0, EAST, FORWARD));
    }

    #[test]
    fn turn_right_from_north() {
        let p = step_dynamics(Template::Patrol, G, pose(4, 1, NORTH), TURN_RIGHT, &[]);
        assert_eq!((p.x, p.y, p.theta), (4, 1, EAST));
        let p = step_dynamics(Template::Patrol, G, pose(4, 1, NORTH), TURN_LEFT, &[]);
        assert_eq!(p.theta, WEST);
    }

    #[test]
    fn wall_and_occupancy_degrade_to_stop() {
        let p = step_dynamics(Template::Patrol, G, pose(9, 1, EAST), FORWARD, &[]);
        assert_eq!((p.x, p.y, p.action), (9, 1, STOP));
        let p = step_dynamics(Template::Patrol, G, pose(3, 0, EAST), FORWARD, &[(4, 0, 0)]);
        assert_eq!((p.x, p.action), (3, STOP));
    }

    #[test]
    fn inverse_dynamics_recovers_every_action() {
        for theta in 0..4 {
            for a in 0..4 {
                let p = pose(5, 1, theta);
                let q = step_dynamics(Template::Patrol, G, p, a, &[]);
                assert_eq!(inverse_dynamics(Template::Patrol, &p, &q), Some(q.action));
            }
        }
        let g = (4, 4, 3);
        for theta in 0..6 {
            for a in 0..6 {
                let p = ExpertPose {
                    x: 1,
                    y: 2,
                    z: 1,
                    theta,
                    action: M_STOP,
                };
                let q = step_dynamics(Template::Manipulation, g, p, a, &[]);
                assert_eq!(q.action, a);
                assert_eq!(inverse_dynamics(Template::Manipulation, &p, &q), Some(a));
            }
        }
    }

    #[test]
    fn loop_policy_visits_perimeter_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dir in [LoopDirection::CounterClockwise, LoopDirection::Clockwise] {
            let mut p = pose(0, 0, loop_heading((10, 3), (0, 0), dir));
            let mut visited = std::collections::HashSet::new();
            for _ in 0..60 {
                let a = patrol_action((10, 3), &p, dir, 0.0, &mut rng);
                p = step_dynamics(Template::Patrol, G, p, a, &[]);
                assert!(p.y != 1 || p.x == 0 || p.x == 9, "left the loop at {p:?}");
                visited.insert((p.x, p.y));
            }
            assert_eq!(visited.len(), perimeter((10, 3)).len());
        }
    }

    fn world() -> World {
        World::new(WorldConfig {
            render_w: 64,
            render_h: 48,
            ..WorldConfig::patrol()
        })
        .unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let w = world();
        let scene = Scene {
            vantage: 1,
            experts: vec![],
            perturbation: Perturbation::NONE,
            prop_seed: 0,
        };
        let r = w.render(&scene, &[], 0).unwrap();
        assert_eq!(&r.frame, w.background(1));
        assert!(r.frame.depth.iter().all(|d| d.is_finite() && *d > 0.0));
    }

    #[test]
    fn closer_expert_has_smaller_depth() {
        let w = world();
        let mean_depth = |x: usize| {
            let scene = Scene {
                vantage: 0,
                experts: vec![pose(x, 1, NORTH)],
                perturbation: Perturbation::NONE,
                prop_seed: 0,
            };
            let r = w.render(&scene, &[], 0).unwrap();
            let px: Vec<f32> = r.ids.iter().zip(&r.frame.depth).filter(|(&i, _)| i == 1).map(|(_, &d)| d).collect();
            assert!(!px.is_empty());
            px.iter().sum::<f32>() / px.len() as f32
        };
        for x in 0..9 {
            assert!(mean_depth(x) < mean_depth(x + 1));
        }
    }

    #[test]
    fn dim_light_keeps_depth() {
        let w = world();
        let mut scene = Scene {
            vantage: 0,
            experts: vec![pose(3, 0, EAST), pose(6, 2, WEST)],
            perturbation: Perturbation::NONE,
            prop_seed: 4,
        };
        let clean = w.render(&scene, &[], 0).unwrap();
        scene.perturbation = Perturbation::dim_light(0.4);
        let dim = w.render(&scene, &[], 0).unwrap();
        assert_eq!(clean.frame.depth, dim.frame.depth);
        assert_ne!(clean.frame.rgb, dim.frame.rgb);
    }
}
