//! Detection seam, buffered cropping, resizing, normalisation and
//! multi-expert masking.
//!
//! Frames stay in raw form (8-bit RGB, metric depth) until they are turned
//! into network tensors here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationConfig, InputGeometry, CHANNELS, TIME_STEPS};

/// Depth values are divided by this range (metres) and clamped to `[0, 1]`.
pub const DEPTH_RANGE: f32 = 10.0;

/// Pixel box with inclusive corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BoundingBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Argument(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Whether `other` lies inside this box.
    pub fn encloses(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    /// Multiplicative buffer, `>= 1`.
    pub r: f64,
    /// Additive buffer in pixels.
    pub c_min: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            r: 1.1,
            c_min: 10.0,
            out_w: 150,
            out_h: 100,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 1.0) || !self.r.is_finite() {
            return Err(Error::Config {
                key: "crop.r".into(),
                detail: format!("must be >= 1, got {}", self.r),
            });
        }
        if !(self.c_min >= 0.0) || !self.c_min.is_finite() {
            return Err(Error::Config {
                key: "crop.c_min".into(),
                detail: format!("must be >= 0, got {}", self.c_min),
            });
        }
        if self.out_w == 0 || self.out_h == 0 {
            return Err(Error::Config {
                key: "crop.out_w".into(),
                detail: "output extents must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Ground-truth annotation carried by simulator frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    pub expert: u32,
    /// Full projected silhouette, whether or not it is occluded.
    pub bbox: BoundingBox,
    /// Pixels of the expert actually visible in the frame.
    pub visible_px: u32,
}

/// One RGB-D frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    /// `H x W x 3`, row-major.
    pub rgb: Vec<u8>,
    /// `H x W` metres; NaN marks invalid readings.
    pub depth: Vec<f32>,
    pub timestamp: u64,
    pub truth: Vec<TruthBox>,
}

impl RawFrame {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>, depth: Vec<f32>, timestamp: u64) -> Result<Self> {
        if rgb.len() != width * height * 3 || depth.len() != width * height {
            return Err(Error::Input(format!(
                "frame {}x{} needs {} rgb and {} depth values, got {} and {}",
                width,
                height,
                width * height * 3,
                width * height,
                rgb.len(),
                depth.len()
            )));
        }
        Ok(Self {
            width,
            height,
            rgb,
            depth,
            timestamp,
            truth: Vec::new(),
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3], depth: f32) -> Self {
        Self {
            width,
            height,
            rgb: rgb.iter().copied().cycle().take(width * height * 3).collect(),
            depth: vec![depth; width * height],
            timestamp: 0,
            truth: Vec::new(),
        }
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn truth_for(&self, expert: u32) -> Option<&TruthBox> {
        self.truth.iter().find(|t| t.expert == expert)
    }
}

/// Extent-preserving interval expansion along one axis.
fn expand_axis(lo: u32, hi: u32, r: f64, c_min: f64, limit: u32) -> (u32, u32) {
    let db = (hi - lo) as f64;
    let da = (r * db + c_min).round() as i64;
    let grow = da - (hi - lo) as i64;
    let mut a = lo as i64 - grow / 2;
    let mut b = a + da;
    let max = limit as i64 - 1;
    if da > max {
        return (0, max as u32);
    }
    if a < 0 {
        b -= a;
        a = 0;
    }
    if b > max {
        a -= b - max;
        b = max;
    }
    (a as u32, b as u32)
}

/// Grows `bbox` by `r * extent + c_min` per axis (rounded to the nearest
/// pixel), centred on the original box and shifted inward to stay within a
/// `width x height` frame. When the requested extent exceeds the frame the
/// whole axis is returned.
pub fn buffered_crop(bbox: &BoundingBox, cfg: &CropConfig, frame_extent: (usize, usize)) -> BoundingBox {
    let (w, h) = frame_extent;
    let (x1, x2) = expand_axis(bbox.x1, bbox.x2, cfg.r, cfg.c_min, w as u32);
    let (y1, y2) = expand_axis(bbox.y1, bbox.y2, cfg.r, cfg.c_min, h as u32);
    BoundingBox { x1, y1, x2, y2 }
}

fn normalize_depth(d: f32) -> f32 {
    if d.is_nan() {
        0.0
    } else {
        (d / DEPTH_RANGE).clamp(0.0, 1.0)
    }
}

/// Resamples the region `roi` of `frame` into a `[4, out_h, out_w]` slice:
/// bilinear RGB (pixel-centre aligned), nearest-neighbour depth.
fn resample_into(frame: &RawFrame, roi: &BoundingBox, out_h: usize, out_w: usize, zero_depth: bool, out: &mut [f32]) {
    let rw = (roi.x2 - roi.x1 + 1) as usize;
    let rh = (roi.y2 - roi.y1 + 1) as usize;
    let sx = rw as f32 / out_w as f32;
    let sy = rh as f32 / out_h as f32;
    let plane = out_h * out_w;
    let w = frame.width;
    let xs: Vec<(usize, usize, f32, usize)> = (0..out_w)
        .map(|ox| {
            let f = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (rw - 1) as f32);
            let x0 = f.floor() as usize;
            let x1 = (x0 + 1).min(rw - 1);
            let near = (((ox as f32 + 0.5) * sx) as usize).min(rw - 1);
            (x0 + roi.x1 as usize, x1 + roi.x1 as usize, f - x0 as f32, near + roi.x1 as usize)
        })
        .collect();
    for oy in 0..out_h {
        let f = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (rh - 1) as f32);
        let y0 = f.floor() as usize;
        let y1 = (y0 + 1).min(rh - 1);
        let ty = f - y0 as f32;
        let (y0, y1) = (y0 + roi.y1 as usize, y1 + roi.y1 as usize);
        let ny = (((oy as f32 + 0.5) * sy) as usize).min(rh - 1) + roi.y1 as usize;
        for (ox, &(x0, x1, tx, nx)) in xs.iter().enumerate() {
            let o = oy * out_w + ox;
            for c in 0..3 {
                let p = |x: usize, y: usize| frame.rgb[(y * w + x) * 3 + c] as f32;
                let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                out[c * plane + o] = (top * (1.0 - ty) + bot * ty) / 255.0;
            }
            out[3 * plane + o] = if zero_depth {
                0.0
            } else {
                normalize_depth(frame.depth[ny * w + nx])
            };
        }
    }
}

fn whole(frame: &RawFrame) -> BoundingBox {
    BoundingBox {
        x1: 0,
        y1: 0,
        x2: frame.width as u32 - 1,
        y2: frame.height as u32 - 1,
    }
}

/// Resizes a whole frame to `[4, out_h, out_w]` values.
pub fn frame_to_input(frame: &RawFrame, out_h: usize, out_w: usize, zero_depth: bool, out: &mut [f32]) {
    resample_into(frame, &whole(frame), out_h, out_w, zero_depth, out);
}

fn check_triplet(frames: &[&RawFrame; TIME_STEPS]) -> Result<()> {
    let e = frames[0].extent();
    if frames.iter().any(|f| f.extent() != e) {
        return Err(Error::Input(format!(
            "frame extents differ across the triplet: {:?}",
            frames.iter().map(|f| f.extent()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Buffered crop of the frame-`t` box applied to all three frames and
/// resized to `[3, 4, out_h, out_w]` (flattened, row-major).
pub fn crop_and_resize(frames: [&RawFrame; TIME_STEPS], box_t: &BoundingBox, cfg: &CropConfig) -> Result<Vec<f32>> {
    check_triplet(&frames)?;
    let roi = buffered_crop(box_t, cfg, frames[2].extent());
    let step = CHANNELS * cfg.out_h * cfg.out_w;
    let mut out = vec![0.0; TIME_STEPS * step];
    for (t, f) in frames.iter().enumerate() {
        resample_into(f, &roi, cfg.out_h, cfg.out_w, false, &mut out[t * step..(t + 1) * step]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectMode {
    Oracle,
    Blob,
}

/// Colour key used by the blob detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorKey {
    pub expert: u32,
    pub rgb: [u8; 3],
}

/// Chromaticity tolerance and minimum brightness for blob matching.
const CHROMA_TOL: f32 = 0.08;
const MIN_SUM: u32 = 40;

fn chroma(p: [u8; 3]) -> Option<[f32; 3]> {
    let s = p[0] as u32 + p[1] as u32 + p[2] as u32;
    (s >= MIN_SUM).then(|| {
        let s = s as f32;
        [p[0] as f32 / s, p[1] as f32 / s, p[2] as f32 / s]
    })
}

fn matches_key(p: [u8; 3], key: &[f32; 3]) -> bool {
    chroma(p).is_some_and(|c| c.iter().zip(key).all(|(a, b)| (a - b).abs() <= CHROMA_TOL))
}

/// Bounding box of the largest 4-connected component of `mask`.
fn largest_component(mask: &[bool], w: usize, h: usize) -> Option<BoundingBox> {
    let mut seen = vec![false; mask.len()];
    let mut best: Option<(usize, BoundingBox)> = None;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut n, mut x1, mut y1, mut x2, mut y2) = (0usize, w, h, 0usize, 0usize);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            n += 1;
            x1 = x1.min(x);
            x2 = x2.max(x);
            y1 = y1.min(y);
            y2 = y2.max(y);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if x1 == x2 || y1 == y2 {
            continue;
        }
        if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
            let b = BoundingBox {
                x1: x1 as u32,
                y1: y1 as u32,
                x2: x2 as u32,
                y2: y2 as u32,
            };
            best = Some((n, b));
        }
    }
    best.map(|(_, b)| b)
}

/// Detects experts in `frame`. Oracle mode reports the simulator's
/// annotations for experts with at least one visible pixel; blob mode
/// reports the largest colour-matched component per key.
pub fn detect(frame: &RawFrame, mode: DetectMode, keys: &[ColorKey]) -> Vec<(u32, BoundingBox)> {
    let mut out: Vec<(u32, BoundingBox)> = match mode {
        DetectMode::Oracle => frame
            .truth
            .iter()
            .filter(|t| t.visible_px > 0)
            .map(|t| (t.expert, t.bbox))
            .collect(),
        DetectMode::Blob => keys
            .iter()
            .filter_map(|k| {
                let key = chroma(k.rgb)?;
                let mask: Vec<bool> = frame
                    .rgb
                    .chunks_exact(3)
                    .map(|p| matches_key([p[0], p[1], p[2]], &key))
                    .collect();
                largest_component(&mask, frame.width, frame.height).map(|b| (k.expert, b))
            })
            .collect(),
    };
    out.sort_by_key(|(id, _)| *id);
    out
}

/// Replaces every other expert's box with the stored background (RGB and
/// depth). Pixels inside the kept expert's box always keep their values.
pub fn mask_other_experts(frame: &RawFrame, boxes: &[(u32, BoundingBox)], keep: u32, background: &RawFrame) -> Result<RawFrame> {
    if background.extent() != frame.extent() {
        return Err(Error::Input(format!(
            "background extent {:?} differs from frame extent {:?}",
            background.extent(),
            frame.extent()
        )));
    }
    let keep_box = boxes
        .iter()
        .find(|(id, _)| *id == keep)
        .map(|(_, b)| *b)
        .ok_or_else(|| Error::Argument(format!("expert {keep} is not among the detected boxes")))?;
    let mut out = frame.clone();
    let (w, h) = (frame.width as u32, frame.height as u32);
    for &(id, b) in boxes {
        if id == keep {
            continue;
        }
        for y in b.y1..=b.y2.min(h - 1) {
            for x in b.x1..=b.x2.min(w - 1) {
                if keep_box.contains(x, y) {
                    continue;
                }
                let i = (y * w + x) as usize;
                out.rgb[i * 3..i * 3 + 3].copy_from_slice(&background.rgb[i * 3..i * 3 + 3]);
                out.depth[i] = background.depth[i];
            }
        }
    }
    out.truth.retain(|t| t.expert == keep || boxes.iter().all(|(id, _)| *id != t.expert));
    Ok(out)
}

/// Per-item tensor sizes for a geometry/ablation pair.
#[derive(Clone, Copy, Debug)]
pub struct InputLayout {
    pub frame_h: usize,
    pub frame_w: usize,
    pub seq_h: usize,
    pub seq_w: usize,
}

impl InputLayout {
    pub fn new(geometry: &InputGeometry, ablation: &AblationConfig) -> Self {
        let (seq_h, seq_w) = geometry.sequence_extent(ablation);
        Self {
            frame_h: geometry.frame_h,
            frame_w: geometry.frame_w,
            seq_h,
            seq_w,
        }
    }

    pub fn full_len(&self) -> usize {
        CHANNELS * self.frame_h * self.frame_w
    }

    pub fn seq_len(&self) -> usize {
        TIME_STEPS * CHANNELS * self.seq_h * self.seq_w
    }
}

/// Builds one item's network input from a (masked) frame triplet.
///
/// `box_t` is the detection at frame `t`; the sequence input is the buffered
/// crop unless `no_crop` is set, in which case it is the resized full frame.
/// `no_temporal` repeats frame `t`; `no_depth` zeroes the depth channel.
pub fn assemble_input(
    frames: [&RawFrame; TIME_STEPS],
    box_t: &BoundingBox,
    crop: &CropConfig,
    layout: &InputLayout,
    ablation: &AblationConfig,
    full_out: &mut [f32],
    seq_out: &mut [f32],
) -> Result<()> {
    check_triplet(&frames)?;
    if full_out.len() != layout.full_len() || seq_out.len() != layout.seq_len() {
        return Err(Error::dim("assemble_input", "output buffers do not match the layout"));
    }
    let frames = if ablation.no_temporal { [frames[2]; TIME_STEPS] } else { frames };
    frame_to_input(frames[2], layout.frame_h, layout.frame_w, ablation.no_depth, full_out);
    let step = CHANNELS * layout.seq_h * layout.seq_w;
    let roi = if ablation.no_crop {
        whole(frames[2])
    } else {
        buffered_crop(box_t, crop, frames[2].extent())
    };
    for (t, f) in frames.iter().enumerate() {
        resample_into(
            f,
            &roi,
            layout.seq_h,
            layout.seq_w,
            ablation.no_depth,
            &mut seq_out[t * step..(t + 1) * step],
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: u32, y1: u32, x2: u32, y2: u32) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn crop_width_example() {
        let cfg = CropConfig::default();
        let out = buffered_crop(&bb(200, 100, 300, 150), &cfg, (640, 480));
        assert_eq!(out.width(), 120);
        assert_eq!(out.height(), 65);
        assert_eq!((out.x1, out.x2), (190, 310));
    }

    #[test]
    fn identity_crop_parameters() {
        let cfg = CropConfig {
            r: 1.0,
            c_min: 0.0,
            ..CropConfig::default()
        };
        let b = bb(3, 4, 17, 9);
        assert_eq!(buffered_crop(&b, &cfg, (20, 20)), b);
    }

    #[test]
    fn edge_box_shifts_inward() {
        let cfg = CropConfig::default();
        let out = buffered_crop(&bb(0, 0, 20, 10), &cfg, (100, 100));
        assert_eq!(out.width(), 32);
        assert_eq!(out.height(), 21);
        assert_eq!((out.x1, out.y1), (0, 0));
        let out = buffered_crop(&bb(80, 89, 99, 99), &cfg, (100, 100));
        assert_eq!((out.x2, out.y2), (99, 99));
        assert_eq!(out.width(), 31);
    }

    #[test]
    fn oversized_request_takes_whole_axis() {
        let cfg = CropConfig {
            r: 1.5,
            c_min: 10.0,
            ..CropConfig::default()
        };
        let out = buffered_crop(&bb(5, 5, 90, 20), &cfg, (100, 100));
        assert_eq!((out.x1, out.x2), (0, 99));
    }

    #[test]
    fn constant_frame_gives_constant_crop() {
        let f = RawFrame::filled(40, 30, [10, 20, 30], 2.0);
        let out = crop_and_resize([&f, &f, &f], &bb(5, 5, 12, 9), &CropConfig { out_w: 9, out_h: 6, ..Default::default() }).unwrap();
        assert_eq!(out.len(), 3 * 4 * 6 * 9);
        let plane = 54;
        for t in 0..3 {
            let base = t * 4 * plane;
            assert!(out[base..base + plane].iter().all(|&v| (v - 10.0 / 255.0).abs() < 1e-6));
            assert!(out[base + 3 * plane..base + 4 * plane].iter().all(|&v| v == 2.0 / DEPTH_RANGE));
        }
    }

    #[test]
    fn identity_resize_keeps_pixels() {
        let (w, h) = (7, 5);
        let rgb: Vec<u8> = (0..w * h * 3).map(|i| (i * 13 % 251) as u8).collect();
        let depth: Vec<f32> = (0..w * h).map(|i| i as f32 * 0.1).collect();
        let f = RawFrame::new(w, h, rgb.clone(), depth.clone(), 0).unwrap();
        let cfg = CropConfig {
            r: 1.0,
            c_min: 0.0,
            out_w: w,
            out_h: h,
        };
        let out = crop_and_resize([&f, &f, &f], &bb(0, 0, w as u32 - 1, h as u32 - 1), &cfg).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    assert_eq!(out[c * w * h + y * w + x], rgb[(y * w + x) * 3 + c] as f32 / 255.0);
                }
                assert_eq!(out[3 * w * h + y * w + x], normalize_depth(depth[y * w + x]));
            }
        }
    }

    #[test]
    fn nearest_depth_never_interpolates() {
        let (w, h) = (8, 8);
        let depth: Vec<f32> = (0..w * h).map(|i| if (i % w + i / w) % 2 == 0 { 1.0 } else { 5.0 }).collect();
        let f = RawFrame::new(w, h, vec![0; w * h * 3], depth, 0).unwrap();
        let mut out = vec![0.0; 4 * 4 * 4];
        frame_to_input(&f, 4, 4, false, &mut out);
        for &d in &out[48..] {
            assert!(d == 1.0 / DEPTH_RANGE || d == 5.0 / DEPTH_RANGE, "{d}");
        }
    }

    #[test]
    fn nan_depth_normalises_to_zero() {
        let f = RawFrame::filled(4, 4, [0, 0, 0], f32::NAN);
        let mut out = vec![1.0; 4 * 2 * 2];
        frame_to_input(&f, 2, 2, false, &mut out);
        assert!(out[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extent_mismatch_is_input_error() {
        let a = RawFrame::filled(4, 4, [0, 0, 0], 1.0);
        let b = RawFrame::filled(5, 4, [0, 0, 0], 1.0);
        let err = crop_and_resize([&a, &a, &b], &bb(0, 0, 2, 2), &CropConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    fn scene() -> (RawFrame, RawFrame) {
        let bg = RawFrame::filled(20, 10, [100, 100, 100], 3.0);
        let mut f = bg.clone();
        for y in 2..6 {
            for x in 2..7 {
                let i = (y * 20 + x) * 3;
                f.rgb[i..i + 3].copy_from_slice(&[220, 40, 40]);
                f.depth[y * 20 + x] = 1.5;
            }
            for x in 12..17 {
                let i = (y * 20 + x) * 3;
                f.rgb[i..i + 3].copy_from_slice(&[40, 60, 220]);
                f.depth[y * 20 + x] = 2.0;
            }
        }
        f.truth = vec![
            TruthBox {
                expert: 0,
                bbox: bb(2, 2, 6, 5),
                visible_px: 20,
            },
            TruthBox {
                expert: 1,
                bbox: bb(12, 2, 16, 5),
                visible_px: 20,
            },
        ];
        (f, bg)
    }

    #[test]
    fn oracle_and_blob_detection_agree() {
        let (f, _) = scene();
        let keys = [
            ColorKey {
                expert: 0,
                rgb: [220, 40, 40],
            },
            ColorKey {
                expert: 1,
                rgb: [40, 60, 220],
            },
        ];
        let oracle = detect(&f, DetectMode::Oracle, &keys);
        let blob = detect(&f, DetectMode::Blob, &keys);
        assert_eq!(oracle, blob);
        let empty = RawFrame::filled(20, 10, [100, 100, 100], 3.0);
        assert!(detect(&empty, DetectMode::Oracle, &keys).is_empty());
        assert!(detect(&empty, DetectMode::Blob, &keys).is_empty());
    }

    #[test]
    fn masking_replaces_only_other_boxes() {
        let (f, bg) = scene();
        let boxes = detect(&f, DetectMode::Oracle, &[]);
        let m = mask_other_experts(&f, &boxes, 0, &bg).unwrap();
        assert_eq!(m.pixel(3, 3), [220, 40, 40]);
        assert_eq!(m.pixel(13, 3), [100, 100, 100]);
        assert_eq!(m.depth[3 * 20 + 13], 3.0);
        assert_eq!(detect(&m, DetectMode::Oracle, &[]), vec![boxes[0]]);
        let again = mask_other_experts(&m, &boxes, 0, &bg).unwrap();
        assert_eq!(again, m);
        let err = mask_other_experts(&f, &boxes, 7, &bg).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn single_expert_mask_is_noop() {
        let (f, bg) = scene();
        let boxes = vec![(0, bb(2, 2, 6, 5))];
        let m = mask_other_experts(&f, &boxes, 0, &bg).unwrap();
        assert_eq!(m.rgb, f.rgb);
        assert_eq!(m.depth, f.depth);
    }

    #[test]
    fn ablations_shape_the_input() {
        let (f, _) = scene();
        let mut g = f.clone();
        g.rgb[0] = 1;
        let geo = InputGeometry {
            frame_h: 5,
            frame_w: 10,
            crop_h: 4,
            crop_w: 6,
            hidden: 4,
        };
        let crop = CropConfig {
            out_w: 6,
            out_h: 4,
            ..Default::default()
        };
        let ab = AblationConfig {
            no_temporal: true,
            no_depth: true,
            ..Default::default()
        };
        let layout = InputLayout::new(&geo, &ab);
        let mut full = vec![0.0; layout.full_len()];
        let mut seq = vec![0.0; layout.seq_len()];
        assemble_input([&g, &g, &f], &bb(2, 2, 6, 5), &crop, &layout, &ab, &mut full, &mut seq).unwrap();
        let step = 4 * 4 * 6;
        assert_eq!(seq[..step], seq[2 * step..]);
        assert!(seq[3 * 24..4 * 24].iter().all(|&v| v == 0.0));
        assert!(full[3 * 50..].iter().all(|&v| v == 0.0));

        let ab = AblationConfig {
            no_crop: true,
            ..Default::default()
        };
        let layout = InputLayout::new(&geo, &ab);
        assert_eq!((layout.seq_h, layout.seq_w), (5, 10));
    }
}
