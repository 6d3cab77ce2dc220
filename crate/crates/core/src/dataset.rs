//! Dataset generation, preprocessing into network inputs, and the on-disk
//! format.
//!
//! A dataset stores scene descriptions (vantage, expert poses over the frame
//! triplet, labels, perturbation) together with the world configuration and
//! the per-vantage background frames. Frames are re-rendered on access;
//! rendering is a pure function of the stored description.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Dec, Enc};
use crate::error::{Error, Result};
use crate::model::{AblationConfig, Head, InputGeometry, LabelSpace, StateActionLabel, TIME_STEPS};
use crate::preproc::{self, BoundingBox, ColorKey, CropConfig, DetectMode, InputLayout, RawFrame, TruthBox};
use crate::world::{
    self, inverse_dynamics, CameraConfig, ExpertPose, LoopDirection, Perturbation, PerturbationKind, RelativeBins, Scene, Template,
    World, WorldConfig,
};

pub const DATASET_MAGIC: &[u8; 4] = b"SAND";
pub const DATASET_VERSION: u32 = 1;

/// Sampling weights over perturbation kinds, each applied at its standard
/// magnitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationMix {
    pub none: f64,
    pub distractors: f64,
    pub dim_light: f64,
    pub human: f64,
    pub occlusion: f64,
}

impl Default for PerturbationMix {
    fn default() -> Self {
        Self {
            none: 0.7,
            distractors: 0.1,
            dim_light: 0.1,
            human: 0.1,
            occlusion: 0.0,
        }
    }
}

impl PerturbationMix {
    pub fn clean() -> Self {
        Self {
            none: 1.0,
            distractors: 0.0,
            dim_light: 0.0,
            human: 0.0,
            occlusion: 0.0,
        }
    }

    fn weights(&self) -> [f64; 5] {
        [self.none, self.distractors, self.dim_light, self.human, self.occlusion]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config {
                key: "generate.mix".into(),
                detail: "weights must be non-negative with a positive sum".into(),
            });
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> Perturbation {
        let w = self.weights();
        let mut u = rng.gen::<f64>() * w.iter().sum::<f64>();
        for (k, wk) in PerturbationKind::ALL.iter().zip(w) {
            if u < wk {
                return Perturbation::standard(*k);
            }
            u -= wk;
        }
        Perturbation::NONE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub samples: usize,
    pub mix: PerturbationMix,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            mix: PerturbationMix::default(),
        }
    }
}

/// One scene: a frame triplet observed from one vantage.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub vantage: usize,
    pub direction: LoopDirection,
    pub perturbation: Perturbation,
    pub prop_seed: u64,
    /// Expert poses at `t-2`, `t-1`, `t`.
    pub poses: [Vec<ExpertPose>; TIME_STEPS],
    /// Per-expert labels at `t`.
    pub labels: Vec<StateActionLabel>,
    /// Expert whose label this sample trains on.
    pub target: usize,
}

impl SceneRecord {
    pub fn target_label(&self) -> &StateActionLabel {
        &self.labels[self.target]
    }

    fn occupied_cells(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self.poses.iter().flatten().map(|p| (p.x, p.y)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Class counts per head, plus classes never observed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenReport {
    pub samples: usize,
    pub histograms: Vec<(String, Vec<usize>)>,
    pub perturbations: Vec<(String, usize)>,
    pub dead_classes: Vec<String>,
}

/// Per-item preprocessing options.
#[derive(Clone, Copy, Debug)]
pub struct PrepOptions {
    pub crop: CropConfig,
    pub layout: InputLayout,
    pub ablation: AblationConfig,
    pub detect: DetectMode,
}

impl PrepOptions {
    pub fn new(geometry: &InputGeometry, ablation: AblationConfig, crop: CropConfig, detect: DetectMode) -> Self {
        Self {
            crop,
            layout: InputLayout::new(geometry, &ablation),
            ablation,
            detect,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub world: World,
    pub space: LabelSpace,
    pub seed: u64,
    pub records: Vec<SceneRecord>,
}

fn label_for(cfg: &WorldConfig, space: &LabelSpace, pose: &ExpertPose, vantage: usize) -> StateActionLabel {
    let (dx, dy, dz) = cfg.relative_bins(pose, vantage, space);
    StateActionLabel {
        x: pose.x,
        y: pose.y,
        z: pose.z,
        theta: pose.theta,
        action: pose.action,
        dx,
        dy,
        dz,
    }
}

fn generate_record(world: &World, space: &LabelSpace, mix: &PerturbationMix, seed: u64, index: usize) -> Result<SceneRecord> {
    let cfg = &world.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let direction = if rng.gen_bool(0.5) {
        LoopDirection::CounterClockwise
    } else {
        LoopDirection::Clockwise
    };
    let vantage = rng.gen_range(0..world.vantage_count());
    let mut poses = world::initial_poses(cfg, direction, &mut rng);
    for _ in 0..rng.gen_range(cfg.burn_in_min..=cfg.burn_in_max) {
        world::step_all(cfg, &mut poses, direction, &mut rng);
    }
    let mut triplet: [Vec<ExpertPose>; TIME_STEPS] = Default::default();
    for (k, slot) in triplet.iter_mut().enumerate() {
        if k > 0 {
            let prev = poses.clone();
            world::step_all(cfg, &mut poses, direction, &mut rng);
            for (a, b) in prev.iter().zip(&poses) {
                if inverse_dynamics(cfg.template, a, b) != Some(b.action) {
                    return Err(Error::State(format!("sample {index}: transition {a:?} -> {b:?} has no consistent action")));
                }
            }
        }
        *slot = poses.clone();
    }
    let perturbation = mix.sample(&mut rng);
    let prop_seed = rng.gen();
    let labels: Vec<StateActionLabel> = triplet[TIME_STEPS - 1].iter().map(|p| label_for(cfg, space, p, vantage)).collect();
    for l in &labels {
        l.validate(space)?;
    }
    Ok(SceneRecord {
        vantage,
        direction,
        perturbation,
        prop_seed,
        poses: triplet,
        labels,
        target: index % cfg.expert_count(),
    })
}

impl Dataset {
    /// Generates `gen.samples` scenes. Each sample is seeded independently
    /// from `(world.seed, index)`, so output is identical for a given seed.
    pub fn generate(world_cfg: &WorldConfig, gen: &GenConfig) -> Result<Self> {
        gen.mix.validate()?;
        if gen.samples == 0 {
            return Err(Error::Config {
                key: "generate.samples".into(),
                detail: "must be at least 1".into(),
            });
        }
        let world = World::new(world_cfg.clone())?;
        let space = world_cfg.label_space();
        let records = (0..gen.samples)
            .map(|i| generate_record(&world, &space, &gen.mix, world_cfg.seed, i))
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            world,
            space,
            seed: world_cfg.seed,
            records,
        };
        let report = ds.report();
        for d in &report.dead_classes {
            log::warn!("class never generated: {d}");
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label(&self, i: usize) -> &StateActionLabel {
        self.records[i].target_label()
    }

    pub fn labels(&self) -> Vec<StateActionLabel> {
        self.records.iter().map(|r| *r.target_label()).collect()
    }

    /// Heads scored for this label space.
    pub fn primary_heads(&self) -> Vec<Head> {
        Head::PRIMARY.into_iter().filter(|h| *h != Head::Z || self.space.has_z).collect()
    }

    pub fn color_keys(&self) -> Vec<ColorKey> {
        self.world
            .config
            .expert_colors
            .iter()
            .enumerate()
            .map(|(i, c)| ColorKey { expert: i as u32, rgb: *c })
            .collect()
    }

    pub fn report(&self) -> GenReport {
        let mut histograms = Vec::new();
        let mut dead = Vec::new();
        for head in self.primary_heads() {
            let mut h = vec![0usize; self.space.width(head)];
            for r in &self.records {
                h[r.target_label().get(head)] += 1;
            }
            for (c, n) in h.iter().enumerate() {
                if *n == 0 {
                    dead.push(format!("{}={c}", head.name()));
                }
            }
            histograms.push((head.name().to_string(), h));
        }
        let perturbations = PerturbationKind::ALL
            .iter()
            .map(|k| (k.name().to_string(), self.records.iter().filter(|r| r.perturbation.kind == *k).count()))
            .collect();
        GenReport {
            samples: self.len(),
            histograms,
            perturbations,
            dead_classes: dead,
        }
    }

    /// Renders sample `i`'s frame triplet, optionally replacing its perturbation.
    pub fn frames(&self, i: usize, perturbation: Option<Perturbation>) -> Result<[RawFrame; TIME_STEPS]> {
        let r = self.records.get(i).ok_or_else(|| Error::Argument(format!("sample {i} out of range")))?;
        let taken = r.occupied_cells();
        let pert = perturbation.unwrap_or(r.perturbation);
        let mut out: [RawFrame; TIME_STEPS] = Default::default();
        for (k, slot) in out.iter_mut().enumerate() {
            let scene = Scene {
                vantage: r.vantage,
                experts: r.poses[k].clone(),
                perturbation: pert,
                prop_seed: r.prop_seed,
            };
            *slot = self.world.render(&scene, &taken, (i * TIME_STEPS + k) as u64)?.frame;
        }
        Ok(out)
    }

    /// Fills one item's inputs. Other experts are masked to the stored
    /// background in every frame. Returns `false` (leaving the buffers
    /// untouched) when the target is not detected at `t`.
    pub fn prepare(&self, i: usize, perturbation: Option<Perturbation>, opts: &PrepOptions, full_out: &mut [f32], seq_out: &mut [f32]) -> Result<bool> {
        let frames = self.frames(i, perturbation)?;
        let r = &self.records[i];
        self.prepare_frames(&frames, r.vantage, r.target as u32, opts, full_out, seq_out)
    }

    pub fn prepare_frames(
        &self,
        frames: &[RawFrame; TIME_STEPS],
        vantage: usize,
        target: u32,
        opts: &PrepOptions,
        full_out: &mut [f32],
        seq_out: &mut [f32],
    ) -> Result<bool> {
        let keys = self.color_keys();
        let bg = self.world.background(vantage);
        let mut masked: Vec<RawFrame> = Vec::with_capacity(TIME_STEPS);
        let mut box_t: Option<BoundingBox> = None;
        for (k, f) in frames.iter().enumerate() {
            let boxes = preproc::detect(f, opts.detect, &keys);
            let own = boxes.iter().find(|(id, _)| *id == target).map(|(_, b)| *b);
            if k == TIME_STEPS - 1 {
                box_t = own;
            }
            masked.push(match own {
                Some(_) => preproc::mask_other_experts(f, &boxes, target, bg)?,
                None => {
                    // Target unseen in this frame: still hide everyone else.
                    let mut with_dummy = boxes.clone();
                    with_dummy.push((target, BoundingBox { x1: 0, y1: 0, x2: 1, y2: 1 }));
                    preproc::mask_other_experts(f, &with_dummy, target, bg)?
                }
            });
        }
        let Some(box_t) = box_t else {
            return Ok(false);
        };
        preproc::assemble_input(
            [&masked[0], &masked[1], &masked[2]],
            &box_t,
            &opts.crop,
            &opts.layout,
            &opts.ablation,
            full_out,
            seq_out,
        )?;
        Ok(true)
    }

    /// Subset view with the given sample indices (cloned).
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            world: self.world.clone(),
            space: self.space,
            seed: self.seed,
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    // -----------------------------------------------------------------------
    // Serialisation

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Enc::default();
        encode_world(&mut e, &self.world.config);
        encode_space(&mut e, &self.space);
        e.u64(self.seed);
        e.usize(self.world.vantage_count());
        for v in 0..self.world.vantage_count() {
            encode_frame(&mut e, self.world.background(v));
        }
        e.usize(self.records.len());
        for r in &self.records {
            e.u32(r.vantage as u32);
            e.u8(matches!(r.direction, LoopDirection::Clockwise) as u8);
            e.u8(r.perturbation.kind.code());
            e.f64(r.perturbation.magnitude);
            e.u64(r.prop_seed);
            e.u32(r.target as u32);
            e.u32(r.labels.len() as u32);
            for step in &r.poses {
                for p in step {
                    for v in [p.x, p.y, p.z, p.theta, p.action] {
                        e.u32(v as u32);
                    }
                }
            }
            for l in &r.labels {
                for h in Head::ALL {
                    e.u32(l.get(h) as u32);
                }
            }
        }
        codec::seal(DATASET_MAGIC, DATASET_VERSION, &e.buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes())
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(path, &bytes)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let body = codec::unseal(path, bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let mut d = Dec::new(body, path);
        let cfg = decode_world(&mut d)?;
        cfg.validate().map_err(|e| d.err(format!("world config: {e}")))?;
        let space = decode_space(&mut d)?;
        space.validate().map_err(|e| d.err(format!("label space: {e}")))?;
        let seed = d.u64("seed")?;
        let n_bg = d.len("background count", 1)?;
        let world = World::new(cfg)?;
        if n_bg != world.vantage_count() {
            return Err(d.err(format!("{n_bg} backgrounds for {} vantages", world.vantage_count())));
        }
        for v in 0..n_bg {
            let f = decode_frame(&mut d)?;
            if &f != world.background(v) {
                return Err(d.err(format!("stored background {v} does not match the world configuration")));
            }
        }
        let n = d.len("sample count", 30)?;
        let grid = world.config.grid();
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let what = |s: &str| format!("sample {i} {s}");
            let vantage = d.u32(&what("vantage"))? as usize;
            let direction = match d.u8(&what("direction"))? {
                0 => LoopDirection::CounterClockwise,
                1 => LoopDirection::Clockwise,
                v => return Err(d.err(format!("sample {i}: invalid direction {v}"))),
            };
            let kind = d.u8(&what("perturbation"))?;
            let kind = PerturbationKind::from_code(kind).ok_or_else(|| d.err(format!("sample {i}: invalid perturbation {kind}")))?;
            let perturbation = Perturbation {
                kind,
                magnitude: d.f64(&what("magnitude"))?,
            };
            perturbation.validate().map_err(|e| d.err(format!("sample {i}: {e}")))?;
            let prop_seed = d.u64(&what("prop seed"))?;
            let target = d.u32(&what("target"))? as usize;
            let n_exp = d.u32(&what("expert count"))? as usize;
            if vantage >= world.vantage_count() || n_exp == 0 || n_exp > world.config.expert_count() || target >= n_exp {
                return Err(d.err(format!("sample {i}: vantage/target/expert count out of range")));
            }
            let mut poses: [Vec<ExpertPose>; TIME_STEPS] = Default::default();
            for step in poses.iter_mut() {
                for _ in 0..n_exp {
                    let mut v = [0usize; 5];
                    for x in v.iter_mut() {
                        *x = d.u32(&what("pose"))? as usize;
                    }
                    let p = ExpertPose {
                        x: v[0],
                        y: v[1],
                        z: v[2],
                        theta: v[3],
                        action: v[4],
                    };
                    if p.x >= grid.0 || p.y >= grid.1 || p.z >= grid.2 || p.theta >= space.n_theta || p.action >= space.n_action {
                        return Err(d.err(format!("sample {i}: pose {p:?} out of range")));
                    }
                    step.push(p);
                }
            }
            let mut labels = Vec::with_capacity(n_exp);
            for _ in 0..n_exp {
                let mut l = StateActionLabel::default();
                for h in Head::ALL {
                    l.set(h, d.u32(&what("label"))? as usize);
                }
                l.validate(&space).map_err(|e| d.err(format!("sample {i}: {e}")))?;
                labels.push(l);
            }
            records.push(SceneRecord {
                vantage,
                direction,
                perturbation,
                prop_seed,
                poses,
                labels,
                target,
            });
        }
        d.finish()?;
        Ok(Self {
            world,
            space,
            seed,
            records,
        })
    }
}

fn encode_world(e: &mut Enc, c: &WorldConfig) {
    e.u8(c.template.code());
    for v in [c.grid_x, c.grid_y, c.grid_z] {
        e.u32(v as u32);
    }
    e.f64(c.cell_m);
    e.f64(c.level_m);
    e.f64s(&c.camera.vantages);
    for v in [c.camera.y, c.camera.height, c.camera.pitch_deg, c.camera.hfov_deg] {
        e.f64(v);
    }
    e.u32(c.render_w as u32);
    e.u32(c.render_h as u32);
    e.usize(c.expert_colors.len());
    for col in &c.expert_colors {
        e.buf.extend_from_slice(col);
    }
    e.f64(c.stop_prob);
    e.u32(c.burn_in_min as u32);
    e.u32(c.burn_in_max as u32);
    for v in [c.bins.dx_max, c.bins.dy_half, c.bins.dz_max] {
        e.f64(v);
    }
    e.u64(c.seed);
}

fn decode_world(d: &mut Dec) -> Result<WorldConfig> {
    let t = d.u8("template")?;
    let template = Template::from_code(t).ok_or_else(|| d.err(format!("unknown template {t}")))?;
    let grid_x = d.u32("grid_x")? as usize;
    let grid_y = d.u32("grid_y")? as usize;
    let grid_z = d.u32("grid_z")? as usize;
    let cell_m = d.f64("cell_m")?;
    let level_m = d.f64("level_m")?;
    let vantages = d.f64s("vantages")?;
    let camera = CameraConfig {
        vantages,
        y: d.f64("camera y")?,
        height: d.f64("camera height")?,
        pitch_deg: d.f64("camera pitch")?,
        hfov_deg: d.f64("camera hfov")?,
    };
    let render_w = d.u32("render_w")? as usize;
    let render_h = d.u32("render_h")? as usize;
    if render_w.saturating_mul(render_h) > 1 << 24 {
        return Err(d.err(format!("render extent {render_w}x{render_h} is implausibly large")));
    }
    let n = d.len("expert colours", 3)?;
    let mut expert_colors = Vec::with_capacity(n);
    for _ in 0..n {
        expert_colors.push([d.u8("colour")?, d.u8("colour")?, d.u8("colour")?]);
    }
    Ok(WorldConfig {
        template,
        grid_x,
        grid_y,
        grid_z,
        cell_m,
        level_m,
        camera,
        render_w,
        render_h,
        expert_colors,
        stop_prob: d.f64("stop_prob")?,
        burn_in_min: d.u32("burn_in_min")? as usize,
        burn_in_max: d.u32("burn_in_max")? as usize,
        bins: RelativeBins {
            dx_max: d.f64("dx_max")?,
            dy_half: d.f64("dy_half")?,
            dz_max: d.f64("dz_max")?,
        },
        seed: d.u64("world seed")?,
    })
}

pub(crate) fn encode_space(e: &mut Enc, s: &LabelSpace) {
    for v in [s.n_x, s.n_y, s.n_z, s.n_theta, s.n_action, s.n_dx, s.n_dy, s.n_dz] {
        e.u32(v as u32);
    }
    e.u8(s.has_z as u8);
}

pub(crate) fn decode_space(d: &mut Dec) -> Result<LabelSpace> {
    let mut v = [0usize; 8];
    for x in v.iter_mut() {
        *x = d.u32("label space")? as usize;
    }
    Ok(LabelSpace {
        n_x: v[0],
        n_y: v[1],
        n_z: v[2],
        n_theta: v[3],
        n_action: v[4],
        n_dx: v[5],
        n_dy: v[6],
        n_dz: v[7],
        has_z: d.bool("has_z")?,
    })
}

pub fn encode_frame(e: &mut Enc, f: &RawFrame) {
    e.u32(f.width as u32);
    e.u32(f.height as u32);
    e.u64(f.timestamp);
    e.bytes(&f.rgb);
    e.f32s(&f.depth);
    e.usize(f.truth.len());
    for t in &f.truth {
        for v in [t.expert, t.bbox.x1, t.bbox.y1, t.bbox.x2, t.bbox.y2, t.visible_px] {
            e.u32(v);
        }
    }
}

pub fn decode_frame(d: &mut Dec) -> Result<RawFrame> {
    let w = d.u32("frame width")? as usize;
    let h = d.u32("frame height")? as usize;
    let ts = d.u64("timestamp")?;
    let rgb = d.bytes("rgb")?.to_vec();
    let depth = d.f32s("depth")?;
    let mut f = RawFrame::new(w, h, rgb, depth, ts).map_err(|e| d.err(e.to_string()))?;
    let n = d.len("truth count", 24)?;
    for _ in 0..n {
        let mut v = [0u32; 6];
        for x in v.iter_mut() {
            *x = d.u32("truth box")?;
        }
        let bbox = BoundingBox::new(v[1], v[2], v[3], v[4]).map_err(|e| d.err(e.to_string()))?;
        f.truth.push(TruthBox {
            expert: v[0],
            bbox,
            visible_px: v[5],
        });
    }
    Ok(f)
}
