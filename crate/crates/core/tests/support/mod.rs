//! Checks shared by the per-crate suites and the acceptance run. Each
//! returns `Err(reason)` instead of panicking so callers can report.
#![allow(dead_code)]

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sanet::checkpoint;
use sanet::codec;
use sanet::dataset::Dataset;
use sanet::model::{AblationConfig, LabelSpace, Model};
use sanet::preproc::{buffered_crop, detect, mask_other_experts, BoundingBox, CropConfig, DetectMode, RawFrame};
use sanet::world::{perimeter, ExpertPose, Perturbation, PerturbationKind, Scene, World, WorldConfig};

pub type Check = Result<(), String>;

/// `round(r * db + c)` for r = r_num / 10 and integer c, rounding halves up,
/// in exact integer arithmetic.
fn expected_extent(db: i64, r_num: i64, c: i64) -> i64 {
    let num = r_num * db + 10 * c;
    (num + 5).div_euclid(10)
}

/// Buffered crop over Δb ∈ 1..500, r ∈ {1, 1.1, 1.5}, c_min ∈ {0, 10} with the
/// box centred, against either frame edge, and in frames too small for it.
pub fn crop_grid() -> Check {
    let mut cases = 0usize;
    for (r, r_num) in [(1.0, 10), (1.1, 11), (1.5, 15)] {
        for c in [0i64, 10] {
            let cfg = CropConfig {
                r,
                c_min: c as f64,
                ..CropConfig::default()
            };
            for db in 1..500i64 {
                let da = expected_extent(db, r_num, c);
                let grow = da - db;
                let wide = 1000i64;
                // (frame width, box start)
                let placements = [
                    (wide, (wide - db) / 2),
                    (wide, 0),
                    (wide, wide - 1 - db),
                    (db + 1, 0),
                    (da.max(db + 1), da.max(db + 1) - 1 - db),
                ];
                for (fw, lo) in placements {
                    let hi = lo + db;
                    let b = BoundingBox {
                        x1: lo as u32,
                        x2: hi as u32,
                        y1: 0,
                        y2: 1,
                    };
                    let out = buffered_crop(&b, &cfg, (fw as usize, 4));
                    let (x1, x2) = (out.x1 as i64, out.x2 as i64);
                    let max = fw - 1;
                    cases += 1;
                    let ctx = || format!("db {db} r {r} c {c} frame {fw} box [{lo}, {hi}] -> [{x1}, {x2}]");
                    if da > max {
                        if (x1, x2) != (0, max) {
                            return Err(format!("{}: expected the whole axis", ctx()));
                        }
                        continue;
                    }
                    if x2 - x1 != da {
                        return Err(format!("{}: extent {} != {da}", ctx(), x2 - x1));
                    }
                    if x1 < 0 || x2 > max {
                        return Err(format!("{}: outside the frame", ctx()));
                    }
                    if x1 > lo || x2 < hi {
                        return Err(format!("{}: does not enclose the box", ctx()));
                    }
                    let centred = lo - grow / 2;
                    let want_x1 = centred.clamp(0, max - da);
                    if x1 != want_x1 {
                        return Err(format!("{}: start {x1}, expected {want_x1}", ctx()));
                    }
                }
            }
        }
    }
    if cases != 3 * 2 * 499 * 5 {
        return Err(format!("only {cases} cases ran"));
    }
    Ok(())
}

fn masking_world() -> World {
    let cfg = WorldConfig {
        render_w: 128,
        render_h: 96,
        expert_colors: vec![[220, 40, 40], [40, 70, 220], [40, 200, 60], [220, 200, 40]],
        ..WorldConfig::patrol()
    };
    World::new(cfg).expect("valid world")
}

fn random_scene(world: &World, rng: &mut ChaCha8Rng) -> Scene {
    let cfg = &world.config;
    let mut cells = perimeter((cfg.grid_x, cfg.grid_y));
    cells.shuffle(rng);
    let n = rng.gen_range(2..=cfg.expert_colors.len());
    let experts = cells[..n]
        .iter()
        .map(|&(x, y)| ExpertPose {
            x,
            y,
            z: 0,
            theta: rng.gen_range(0..4),
            action: rng.gen_range(0..4),
        })
        .collect();
    let kinds = [PerturbationKind::None, PerturbationKind::Distractors, PerturbationKind::Human, PerturbationKind::DimLight];
    Scene {
        vantage: rng.gen_range(0..world.vantage_count()),
        experts,
        perturbation: Perturbation::standard(kinds[rng.gen_range(0..kinds.len())]),
        prop_seed: rng.gen(),
    }
}

fn same_pixels(a: &RawFrame, b: &RawFrame) -> bool {
    a.rgb == b.rgb && a.depth.iter().zip(&b.depth).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Per-pixel masking oracle on `scenes` random multi-expert renders: pixels
/// in another expert's box (and outside the kept box) equal the background,
/// every other pixel is bit-identical to the input, and masking is idempotent.
pub fn masking(scenes: usize, seed: u64) -> Check {
    let world = masking_world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked_px = 0usize;
    for s in 0..scenes {
        let scene = random_scene(&world, &mut rng);
        let taken: Vec<(usize, usize)> = scene.experts.iter().map(|p| (p.x, p.y)).collect();
        let frame = world.render(&scene, &taken, s as u64).map_err(|e| e.to_string())?.frame;
        let bg = world.background(scene.vantage);
        let boxes = detect(&frame, DetectMode::Oracle, &[]);
        if boxes.is_empty() {
            continue;
        }
        let (keep, kb) = boxes[rng.gen_range(0..boxes.len())];
        let out = mask_other_experts(&frame, &boxes, keep, bg).map_err(|e| e.to_string())?;
        let w = frame.width;
        for y in 0..frame.height {
            for x in 0..w {
                let inside = |b: &BoundingBox| (b.x1 as usize..=b.x2 as usize).contains(&x) && (b.y1 as usize..=b.y2 as usize).contains(&y);
                let other = boxes.iter().any(|(id, b)| *id != keep && inside(b));
                let src = if other && !inside(&kb) { bg } else { &frame };
                masked_px += std::ptr::eq(src, bg) as usize;
                let i = y * w + x;
                if out.rgb[i * 3..i * 3 + 3] != src.rgb[i * 3..i * 3 + 3] || out.depth[i].to_bits() != src.depth[i].to_bits() {
                    return Err(format!("scene {s}: pixel ({x}, {y}) differs from the oracle"));
                }
            }
        }
        let again = mask_other_experts(&out, &boxes, keep, bg).map_err(|e| e.to_string())?;
        if !same_pixels(&again, &out) {
            return Err(format!("scene {s}: masking is not idempotent"));
        }
    }
    if masked_px == 0 {
        return Err("no pixel was ever masked".into());
    }
    Ok(())
}

pub fn mini_model(seed: u64) -> Model<f32> {
    Model::build(LabelSpace::patrol(), sanet::gradcheck::mini_geometry(), AblationConfig::default(), seed).expect("mini model")
}

/// Checkpoint bytes with the last parameter record removed, correctly sealed.
pub fn checkpoint_missing_last_param(model: &Model<f32>) -> Vec<u8> {
    let bytes = checkpoint::to_bytes(model);
    let body = codec::unseal(Path::new("x"), &bytes, checkpoint::CHECKPOINT_MAGIC, checkpoint::CHECKPOINT_VERSION)
        .expect("fresh checkpoint")
        .to_vec();
    let record = |name: &str, shape: &[usize], n: usize| 8 + name.len() + 4 + 4 * shape.len() + 8 + 4 * n;
    let entries = model.params.entries();
    let sizes: Vec<usize> = entries.iter().map(|e| record(&e.name, e.tensor.shape(), e.tensor.len())).collect();
    let records: usize = sizes.iter().sum();
    let count_at = body.len() - records - 8;
    let mut out = body[..body.len() - sizes.last().unwrap()].to_vec();
    out[count_at..count_at + 8].copy_from_slice(&((entries.len() - 1) as u64).to_le_bytes());
    codec::seal(checkpoint::CHECKPOINT_MAGIC, checkpoint::CHECKPOINT_VERSION, &out)
}

/// save -> load -> save is byte-identical, on disk and in memory; a missing
/// parameter and a label-space mismatch are rejected with the right errors.
pub fn checkpoint_roundtrip(dir: &Path) -> Check {
    for seed in 0..3 {
        let m = mini_model(seed);
        let a = dir.join(format!("a{seed}.sanc"));
        let b = dir.join(format!("b{seed}.sanc"));
        checkpoint::save(&m, &a).map_err(|e| e.to_string())?;
        let back = checkpoint::load(&a, Some(&LabelSpace::patrol())).map_err(|e| e.to_string())?;
        checkpoint::save(&back, &b).map_err(|e| e.to_string())?;
        let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        if ba != bb {
            return Err(format!("seed {seed}: re-saved checkpoint differs"));
        }
    }
    let m = mini_model(7);
    match checkpoint::from_bytes(Path::new("m"), &checkpoint_missing_last_param(&m), None) {
        Err(sanet::Error::MissingParameter(name)) if name == m.params.entries().last().unwrap().name => {}
        other => return Err(format!("missing parameter not reported: {:?}", other.map(|_| ()))),
    }
    let wrong = LabelSpace {
        n_action: 5,
        ..LabelSpace::patrol()
    };
    match checkpoint::from_bytes(Path::new("m"), &checkpoint::to_bytes(&m), Some(&wrong)) {
        Err(e @ sanet::Error::Geometry { .. }) if e.to_string().contains("head action") => {}
        other => return Err(format!("label-space mismatch not reported: {:?}", other.map(|_| ()))),
    }
    Ok(())
}

pub fn small_dataset(samples: usize) -> Dataset {
    let cfg = WorldConfig {
        render_w: 64,
        render_h: 48,
        seed: 3,
        ..WorldConfig::patrol()
    };
    Dataset::generate(&cfg, &sanet::dataset::GenConfig { samples, ..Default::default() }).expect("dataset")
}

/// Corrupted magic, version, length and every checksummed region are
/// rejected; `fuzz` random truncations plus every header/trailer-adjacent
/// length are rejected without panicking.
pub fn dataset_corruption(fuzz: usize, seed: u64) -> Check {
    let ds = small_dataset(40);
    let bytes = ds.to_bytes();
    let p = Path::new("d.sand");
    Dataset::from_bytes(p, &bytes).map_err(|e| format!("pristine dataset rejected: {e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expect_err = |b: &[u8], what: &str| -> Check {
        match std::panic::catch_unwind(|| Dataset::from_bytes(p, b)) {
            Ok(Err(_)) => Ok(()),
            Ok(Ok(_)) => Err(format!("{what}: accepted")),
            Err(_) => Err(format!("{what}: panicked")),
        }
    };
    for (at, what) in [(0usize, "magic"), (4, "version"), (8, "body length"), (15, "body length high byte")] {
        let mut b = bytes.clone();
        b[at] ^= 0x01;
        expect_err(&b, what)?;
    }
    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&2u32.to_le_bytes());
    if !matches!(Dataset::from_bytes(p, &v), Err(sanet::Error::Version { found: 2, .. })) {
        return Err("version bump not reported as a version error".into());
    }
    for _ in 0..200 {
        let mut b = bytes.clone();
        let at = rng.gen_range(16..b.len());
        b[at] ^= 1 << rng.gen_range(0..8);
        match Dataset::from_bytes(p, &b) {
            Err(sanet::Error::Checksum { .. }) => {}
            other => return Err(format!("bit flip at {at}: {:?}", other.map(|_| ()))),
        }
    }
    let n = bytes.len();
    let mut lengths: Vec<usize> = (0..64.min(n)).chain(n.saturating_sub(64)..n).collect();
    lengths.extend((0..fuzz).map(|_| rng.gen_range(0..n)));
    for len in lengths {
        expect_err(&bytes[..len], &format!("truncation to {len} bytes"))?;
    }
    resealed_truncations(&bytes, sanet::dataset::DATASET_MAGIC, sanet::dataset::DATASET_VERSION, fuzz, &mut rng, |b| {
        Dataset::from_bytes(p, b)
    })
}

/// Bodies cut short and re-sealed with a valid length and checksum, so the
/// decoder itself must notice: all cuts in the first 512 body bytes plus
/// `fuzz` random ones.
fn resealed_truncations<T>(
    bytes: &[u8],
    magic: &[u8; 4],
    version: u32,
    fuzz: usize,
    rng: &mut ChaCha8Rng,
    open: impl Fn(&[u8]) -> sanet::Result<T> + std::panic::RefUnwindSafe,
) -> Check {
    let body = codec::unseal(Path::new("x"), bytes, magic, version).map_err(|e| e.to_string())?;
    let n = body.len();
    let mut cuts: Vec<usize> = (0..512.min(n)).collect();
    cuts.extend((0..fuzz).map(|_| rng.gen_range(0..n)));
    for cut in cuts {
        let sealed = codec::seal(magic, version, &body[..cut]);
        match std::panic::catch_unwind(|| open(&sealed)) {
            Ok(Err(_)) => {}
            Ok(Ok(_)) => return Err(format!("body cut to {cut} of {n} bytes accepted")),
            Err(_) => return Err(format!("body cut to {cut} of {n} bytes panicked")),
        }
    }
    Ok(())
}

/// Every raw truncation of a checkpoint is rejected cleanly, as are
/// re-sealed body truncations.
pub fn checkpoint_truncations(fuzz: usize, seed: u64) -> Check {
    let bytes = checkpoint::to_bytes(&mini_model(1));
    let p = Path::new("m.sanc");
    for len in 0..bytes.len() {
        match std::panic::catch_unwind(|| checkpoint::from_bytes(p, &bytes[..len], None)) {
            Ok(Err(_)) => {}
            Ok(Ok(_)) => return Err(format!("truncation to {len} bytes accepted")),
            Err(_) => return Err(format!("truncation to {len} bytes panicked")),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    resealed_truncations(&bytes, checkpoint::CHECKPOINT_MAGIC, checkpoint::CHECKPOINT_VERSION, fuzz, &mut rng, |b| {
        checkpoint::from_bytes(p, b, None)
    })
}
