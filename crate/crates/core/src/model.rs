//! The joint state-action network: a coordinate branch over the full RGB-D
//! frame, an orientation branch over the three cropped frames, and an action
//! branch of two stacked ConvLSTMs, wired together by feature concatenation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{split_steps, td_apply, Conv2dLayer, ConvLstmCell, DenseLayer, Graph, Layer, MaxPoolLayer, ParamStore};
use crate::tensor::{self, argmax_row, ConvSpec, Padding, PoolSpec, Scalar, Tensor};

/// Number of frames in an input triplet (`t-2`, `t-1`, `t`).
pub const TIME_STEPS: usize = 3;
/// Input channels: R, G, B, depth.
pub const CHANNELS: usize = 4;
const FILTERS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpace {
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    pub n_theta: usize,
    pub n_action: usize,
    pub n_dx: usize,
    pub n_dy: usize,
    pub n_dz: usize,
    pub has_z: bool,
}

impl LabelSpace {
    /// Corridor patrol task: 10 x 3 grid, 4 headings, 4 actions.
    pub fn patrol() -> Self {
        Self {
            n_x: 10,
            n_y: 3,
            n_z: 1,
            n_theta: 4,
            n_action: 4,
            n_dx: 16,
            n_dy: 16,
            n_dz: 1,
            has_z: false,
        }
    }

    /// End-effector task: 4 x 4 x 3 lattice, 6 orientations, 6 actions.
    pub fn manipulation() -> Self {
        Self {
            n_x: 4,
            n_y: 4,
            n_z: 3,
            n_theta: 6,
            n_action: 6,
            n_dx: 16,
            n_dy: 16,
            n_dz: 8,
            has_z: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_x, self.n_y, self.n_z, self.n_theta, self.n_action, self.n_dx, self.n_dy, self.n_dz];
        if counts.contains(&0) {
            return Err(Error::Argument(format!("label space counts must be >= 1: {self:?}")));
        }
        if !self.has_z && (self.n_z != 1 || self.n_dz != 1) {
            return Err(Error::Argument("a 2D label space needs n_z = 1 and n_dz = 1".into()));
        }
        Ok(())
    }

    pub fn width(&self, head: Head) -> usize {
        match head {
            Head::X => self.n_x,
            Head::Y => self.n_y,
            Head::Z => self.n_z,
            Head::Theta => self.n_theta,
            Head::Action => self.n_action,
            Head::Dx => self.n_dx,
            Head::Dy => self.n_dy,
            Head::Dz => self.n_dz,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    X,
    Y,
    Z,
    Theta,
    Action,
    Dx,
    Dy,
    Dz,
}

impl Head {
    pub const ALL: [Head; 8] = [Head::X, Head::Y, Head::Z, Head::Theta, Head::Action, Head::Dx, Head::Dy, Head::Dz];
    pub const PRIMARY: [Head; 5] = [Head::X, Head::Y, Head::Z, Head::Theta, Head::Action];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::X => "x",
            Head::Y => "y",
            Head::Z => "z",
            Head::Theta => "theta",
            Head::Action => "action",
            Head::Dx => "dx",
            Head::Dy => "dy",
            Head::Dz => "dz",
        }
    }

    pub fn is_relative(self) -> bool {
        matches!(self, Head::Dx | Head::Dy | Head::Dz)
    }
}

/// Network input resolution and hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputGeometry {
    pub frame_h: usize,
    pub frame_w: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub hidden: usize,
}

impl Default for InputGeometry {
    fn default() -> Self {
        Self {
            frame_h: 120,
            frame_w: 160,
            crop_h: 100,
            crop_w: 150,
            hidden: 256,
        }
    }
}

impl InputGeometry {
    /// Extent of the frames fed to the orientation/action trunk.
    pub fn sequence_extent(&self, ablation: &AblationConfig) -> (usize, usize) {
        if ablation.no_crop {
            (self.frame_h, self.frame_w)
        } else {
            (self.crop_h, self.crop_w)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub no_relative: bool,
    pub no_temporal: bool,
    pub no_depth: bool,
    pub no_crop: bool,
}

impl AblationConfig {
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_relative {
            parts.push("no_relative");
        }
        if self.no_temporal {
            parts.push("no_temporal");
        }
        if self.no_depth {
            parts.push("no_depth");
        }
        if self.no_crop {
            parts.push("no_crop");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }

    pub fn to_bits(&self) -> u8 {
        self.no_relative as u8 | (self.no_temporal as u8) << 1 | (self.no_depth as u8) << 2 | (self.no_crop as u8) << 3
    }

    pub fn from_bits(bits: u8) -> Self {
        Self {
            no_relative: bits & 1 != 0,
            no_temporal: bits & 2 != 0,
            no_depth: bits & 4 != 0,
            no_crop: bits & 8 != 0,
        }
    }
}

/// Ground truth (or prediction) for one expert at time `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateActionLabel {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub theta: usize,
    pub action: usize,
    pub dx: usize,
    pub dy: usize,
    pub dz: usize,
}

impl StateActionLabel {
    pub fn get(&self, head: Head) -> usize {
        match head {
            Head::X => self.x,
            Head::Y => self.y,
            Head::Z => self.z,
            Head::Theta => self.theta,
            Head::Action => self.action,
            Head::Dx => self.dx,
            Head::Dy => self.dy,
            Head::Dz => self.dz,
        }
    }

    pub fn set(&mut self, head: Head, v: usize) {
        match head {
            Head::X => self.x = v,
            Head::Y => self.y = v,
            Head::Z => self.z = v,
            Head::Theta => self.theta = v,
            Head::Action => self.action = v,
            Head::Dx => self.dx = v,
            Head::Dy => self.dy = v,
            Head::Dz => self.dz = v,
        }
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        for head in Head::ALL {
            let (v, n) = (self.get(head), space.width(head));
            if v >= n {
                return Err(Error::Label(format!("{} = {v} outside [0, {n})", head.name())));
            }
        }
        Ok(())
    }
}

/// A batch of network inputs.
#[derive(Clone, Debug)]
pub struct NetInput<T: Scalar = f32> {
    /// `[B, 4, H, W]` frame at time `t`.
    pub full_frame: Tensor<T>,
    /// `[B, 3, 4, h, w]` frames `t-2`, `t-1`, `t` seen by the sequence trunk.
    pub crops: Tensor<T>,
}

impl<T: Scalar> NetInput<T> {
    pub fn batch(&self) -> usize {
        self.full_frame.shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> NetInput<U> {
        NetInput {
            full_frame: self.full_frame.cast(),
            crops: self.crops.cast(),
        }
    }
}

/// Per-head probability tensors `[B, n]`. Relative heads are absent when the
/// model was built without them.
#[derive(Clone, Debug)]
pub struct NetOutput<T: Scalar = f32> {
    heads: [Option<Tensor<T>>; 8],
}

impl<T: Scalar> NetOutput<T> {
    pub fn from_heads(heads: [Option<Tensor<T>>; 8]) -> Self {
        Self { heads }
    }

    pub fn head(&self, head: Head) -> Option<&Tensor<T>> {
        self.heads[head.index()].as_ref()
    }

    pub fn batch(&self) -> usize {
        self.heads[0].as_ref().map_or(0, |t| t.shape()[0])
    }

    pub fn row(&self, head: Head, b: usize) -> Option<&[T]> {
        self.head(head).map(|t| {
            let n = t.shape()[1];
            &t.data()[b * n..(b + 1) * n]
        })
    }
}

/// Loss weights per head, indexed like [`Head::ALL`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadWeights {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
    pub action: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl HeadWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            x: w,
            y: w,
            z: w,
            theta: w,
            action: w,
            dx: w,
            dy: w,
            dz: w,
        }
    }

    pub fn get(&self, head: Head) -> f64 {
        match head {
            Head::X => self.x,
            Head::Y => self.y,
            Head::Z => self.z,
            Head::Theta => self.theta,
            Head::Action => self.action,
            Head::Dx => self.dx,
            Head::Dy => self.dy,
            Head::Dz => self.dz,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            x: self.x * factor,
            y: self.y * factor,
            z: self.z * factor,
            theta: self.theta * factor,
            action: self.action * factor,
            dx: self.dx * factor,
            dy: self.dy * factor,
            dz: self.dz * factor,
        }
    }
}

/// Pathway switches used to probe that the cross-branch concatenations are live.
#[derive(Clone, Copy, Debug, Default)]
pub struct PathwayMask {
    /// Zero the relative-head logits concatenated into the coordinate stream.
    pub zero_relative_concat: bool,
    /// Zero the coordinate features concatenated into orientation and action.
    pub zero_coord_features: bool,
}

#[derive(Clone, Debug)]
enum Stage {
    Conv(Conv2dLayer),
    Pool(MaxPoolLayer),
}

impl Stage {
    fn name(&self) -> &str {
        match self {
            Stage::Conv(c) => &c.name,
            Stage::Pool(p) => &p.name,
        }
    }

    fn extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self {
            Stage::Conv(c) => c.spec.output_extent(h, w),
            Stage::Pool(p) => p.spec.output_extent(h, w),
        }
    }
}

impl<T: Scalar> Layer<T> for Stage {
    fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Stage::Conv(c) => c.forward(g, x),
            Stage::Pool(p) => p.forward(g, x),
        }
    }
}

struct Sequential<'s>(&'s [Stage]);

impl<T: Scalar> Layer<T> for Sequential<'_> {
    fn forward(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for s in self.0 {
            x = s.forward(g, x)?;
        }
        Ok(x)
    }
}

/// Runs shapes through the stages, naming the first stage that cannot be placed.
fn trace_extent(stages: &[Stage], mut hw: (usize, usize)) -> Result<(usize, usize)> {
    for s in stages {
        hw = s.extent(hw.0, hw.1).map_err(|e| Error::Build {
            layer: s.name().to_string(),
            detail: format!("input {}x{}: {e}", hw.0, hw.1),
        })?;
    }
    Ok(hw)
}

/// Built network: configuration plus parameter registry.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub space: LabelSpace,
    pub geometry: InputGeometry,
    pub ablation: AblationConfig,
    pub seed: u64,
    pub params: ParamStore<T>,
    coord_trunk: Vec<Stage>,
    rel_hidden: Option<DenseLayer>,
    rel_heads: Vec<DenseLayer>,
    coord_hidden: DenseLayer,
    coord_merge: DenseLayer,
    coord_heads: Vec<DenseLayer>,
    seq_trunk: Vec<Stage>,
    orient_hidden: DenseLayer,
    orient_head: DenseLayer,
    lstm1: ConvLstmCell,
    lstm2: ConvLstmCell,
    action_hidden: DenseLayer,
    action_head: DenseLayer,
}

/// Head logits recorded on a graph.
pub struct HeadLogits {
    pub heads: [Option<Var>; 8],
}

impl HeadLogits {
    pub fn get(&self, head: Head) -> Option<Var> {
        self.heads[head.index()]
    }
}

fn conv(out: usize, k: (usize, usize), s: (usize, usize)) -> ConvSpec {
    ConvSpec::new(out, k, s, Padding::Same)
}

fn pool(k: (usize, usize), s: (usize, usize)) -> PoolSpec {
    PoolSpec::new(k, s, Padding::Same)
}

impl<T: Scalar> Model<T> {
    /// Builds the network with seed-driven initialisation.
    pub fn build(space: LabelSpace, geometry: InputGeometry, ablation: AblationConfig, seed: u64) -> Result<Self> {
        space.validate()?;
        if geometry.hidden == 0 {
            return Err(Error::Build {
                layer: "hidden".into(),
                detail: "hidden width must be >= 1".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let p = &mut params;
        let hidden = geometry.hidden;

        let mut coord_trunk = Vec::new();
        let mut c_in = CHANNELS;
        for i in 1..=5usize {
            let hw = trace_extent(&coord_trunk, (geometry.frame_h, geometry.frame_w))?;
            let spec = conv(FILTERS, (3, 9), (3, 3));
            let layer = Conv2dLayer::for_extent(p, &format!("coord.conv{i}"), c_in, spec, true, Some(hw), &mut rng)?;
            coord_trunk.push(Stage::Conv(layer));
            c_in = FILTERS;
            let pool_spec = match i {
                1 => Some(pool((4, 4), (3, 3))),
                3 => Some(pool((2, 2), (3, 3))),
                5 => Some(pool((2, 2), (2, 2))),
                _ => None,
            };
            if let Some(spec) = pool_spec {
                coord_trunk.push(Stage::Pool(MaxPoolLayer {
                    name: format!("coord.pool{}", i.div_ceil(2)),
                    spec,
                }));
            }
        }
        let (th, tw) = trace_extent(&coord_trunk, (geometry.frame_h, geometry.frame_w))?;
        let trunk_features = FILTERS * th * tw;

        let (rel_hidden, rel_heads, rel_width) = if ablation.no_relative {
            (None, Vec::new(), 0)
        } else {
            let h = DenseLayer::new(p, "relative.fc", trunk_features, hidden, true, &mut rng)?;
            let heads = [(Head::Dx, "relative.dx"), (Head::Dy, "relative.dy"), (Head::Dz, "relative.dz")]
                .iter()
                .map(|&(head, name)| DenseLayer::new(p, name, hidden, space.width(head), false, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            (Some(h), heads, space.n_dx + space.n_dy + space.n_dz)
        };
        let coord_hidden = DenseLayer::new(p, "coord.fc", trunk_features, hidden, true, &mut rng)?;
        let coord_merge = DenseLayer::new(p, "coord.merge", hidden + rel_width, hidden, true, &mut rng)?;
        let coord_heads = [(Head::X, "coord.x"), (Head::Y, "coord.y"), (Head::Z, "coord.z")]
            .iter()
            .map(|&(head, name)| DenseLayer::new(p, name, hidden, space.width(head), false, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let seq_in = geometry.sequence_extent(&ablation);
        let mut seq_trunk = Vec::new();
        for (name, c_in) in [("seq.conv1", CHANNELS), ("seq.conv2", FILTERS), ("seq.conv3", FILTERS)] {
            let hw = trace_extent(&seq_trunk, seq_in)?;
            let spec = conv(FILTERS, (3, 3), (2, 2));
            seq_trunk.push(Stage::Conv(Conv2dLayer::for_extent(p, name, c_in, spec, true, Some(hw), &mut rng)?));
            if name == "seq.conv2" {
                seq_trunk.push(Stage::Pool(MaxPoolLayer {
                    name: "seq.pool".into(),
                    spec: pool((4, 4), (3, 3)),
                }));
            }
        }
        let (sh, sw) = trace_extent(&seq_trunk, seq_in)?;
        let seq_features = FILTERS * sh * sw;

        let orient_hidden = DenseLayer::new(p, "orient.fc", TIME_STEPS * seq_features + trunk_features, hidden, true, &mut rng)?;
        let orient_head = DenseLayer::new(p, "orient.theta", hidden, space.n_theta, false, &mut rng)?;

        let lstm1 = ConvLstmCell::new(p, "action.lstm1", FILTERS, FILTERS, (3, 3), (2, 2), &mut rng)?;
        let lstm2 = ConvLstmCell::new(p, "action.lstm2", FILTERS, FILTERS, (3, 3), (2, 2), &mut rng)?;
        let (l1h, l1w) = lstm1.state_extent(sh, sw).map_err(|e| Error::Build {
            layer: "action.lstm1".into(),
            detail: e.to_string(),
        })?;
        let (l2h, l2w) = lstm2.state_extent(l1h, l1w).map_err(|e| Error::Build {
            layer: "action.lstm2".into(),
            detail: e.to_string(),
        })?;
        let lstm_features = FILTERS * l2h * l2w;
        let action_hidden = DenseLayer::new(p, "action.fc", lstm_features + 2 * hidden, hidden, true, &mut rng)?;
        let action_head = DenseLayer::new(p, "action.out", hidden, space.n_action, false, &mut rng)?;

        Ok(Self {
            space,
            geometry,
            ablation,
            seed,
            params,
            coord_trunk,
            rel_hidden,
            rel_heads,
            coord_hidden,
            coord_merge,
            coord_heads,
            seq_trunk,
            orient_hidden,
            orient_head,
            lstm1,
            lstm2,
            action_hidden,
            action_head,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            space: self.space,
            geometry: self.geometry,
            ablation: self.ablation,
            seed: self.seed,
            params: self.params.cast(),
            coord_trunk: self.coord_trunk.clone(),
            rel_hidden: self.rel_hidden.clone(),
            rel_heads: self.rel_heads.clone(),
            coord_hidden: self.coord_hidden.clone(),
            coord_merge: self.coord_merge.clone(),
            coord_heads: self.coord_heads.clone(),
            seq_trunk: self.seq_trunk.clone(),
            orient_hidden: self.orient_hidden.clone(),
            orient_head: self.orient_head.clone(),
            lstm1: self.lstm1.clone(),
            lstm2: self.lstm2.clone(),
            action_hidden: self.action_hidden.clone(),
            action_head: self.action_head.clone(),
        }
    }

    pub fn has_relative(&self) -> bool {
        self.rel_hidden.is_some()
    }

    fn check_input(&self, input: &NetInput<T>) -> Result<()> {
        let b = input.batch();
        let g = &self.geometry;
        let (sh, sw) = g.sequence_extent(&self.ablation);
        if input.full_frame.shape() != [b, CHANNELS, g.frame_h, g.frame_w] {
            return Err(Error::dim(
                "forward",
                format!("full frame {:?}, model expects [B, 4, {}, {}]", input.full_frame.shape(), g.frame_h, g.frame_w),
            ));
        }
        if input.crops.shape() != [b, TIME_STEPS, CHANNELS, sh, sw] {
            return Err(Error::dim(
                "forward",
                format!("sequence input {:?}, model expects [B, 3, 4, {sh}, {sw}]", input.crops.shape()),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the head logits.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, input: &NetInput<T>, mask: PathwayMask) -> Result<HeadLogits> {
        self.check_input(input)?;
        let b = input.batch();
        let mut heads: [Option<Var>; 8] = [None; 8];

        let frame = g.tape.constant(input.full_frame.clone());
        let trunk = Sequential(&self.coord_trunk).forward(g, frame)?;
        let trunk = g.tape.flatten(trunk)?;

        let coord_h = self.coord_hidden.forward(g, trunk)?;
        let merge_in = if let Some(rel_hidden) = &self.rel_hidden {
            let rh = rel_hidden.forward(g, trunk)?;
            let mut logits = Vec::with_capacity(3);
            for (layer, head) in self.rel_heads.iter().zip([Head::Dx, Head::Dy, Head::Dz]) {
                let l = layer.forward(g, rh)?;
                heads[head.index()] = Some(l);
                logits.push(l);
            }
            let mut rel = g.tape.concat(&logits, 1)?;
            if mask.zero_relative_concat {
                rel = g.tape.scale(rel, T::zero())?;
            }
            g.tape.concat(&[coord_h, rel], 1)?
        } else {
            coord_h
        };
        let coord_feat = self.coord_merge.forward(g, merge_in)?;
        for (layer, head) in self.coord_heads.iter().zip([Head::X, Head::Y, Head::Z]) {
            heads[head.index()] = Some(layer.forward(g, coord_feat)?);
        }

        let (trunk_in, coord_in) = if mask.zero_coord_features {
            (g.tape.scale(trunk, T::zero())?, g.tape.scale(coord_feat, T::zero())?)
        } else {
            (trunk, coord_feat)
        };

        let seq = g.tape.constant(input.crops.clone());
        let seq_feat = td_apply(&Sequential(&self.seq_trunk), g, seq)?;
        let seq_flat = g.tape.reshape(seq_feat, &[b, tensor_numel(g.tape.shape(seq_feat)) / b])?;
        let orient_in = g.tape.concat(&[seq_flat, trunk_in], 1)?;
        let orient_feat = self.orient_hidden.forward(g, orient_in)?;
        heads[Head::Theta.index()] = Some(self.orient_head.forward(g, orient_feat)?);

        let steps = split_steps(g, seq_feat)?;
        let h1 = self.lstm1.run_steps(g, &steps)?;
        let h2 = self.lstm2.run_steps(g, &h1)?;
        let last = g.tape.flatten(*h2.last().expect("three steps"))?;
        let action_in = g.tape.concat(&[last, coord_in, orient_feat], 1)?;
        let action_feat = self.action_hidden.forward(g, action_in)?;
        heads[Head::Action.index()] = Some(self.action_head.forward(g, action_feat)?);

        Ok(HeadLogits { heads })
    }

    pub fn forward(&self, input: &NetInput<T>) -> Result<NetOutput<T>> {
        self.forward_masked(input, PathwayMask::default())
    }

    pub fn forward_masked(&self, input: &NetInput<T>, mask: PathwayMask) -> Result<NetOutput<T>> {
        let mut g = Graph::new(&self.params);
        let logits = self.forward_graph(&mut g, input, mask)?;
        let mut heads: [Option<Tensor<T>>; 8] = Default::default();
        for head in Head::ALL {
            if let Some(v) = logits.get(head) {
                heads[head.index()] = Some(tensor::softmax(g.tape.value(v))?);
            }
        }
        Ok(NetOutput { heads })
    }

    /// Raw logits per head (for tests and inspection).
    pub fn logits(&self, input: &NetInput<T>, mask: PathwayMask) -> Result<[Option<Tensor<T>>; 8]> {
        let mut g = Graph::new(&self.params);
        let logits = self.forward_graph(&mut g, input, mask)?;
        let mut out: [Option<Tensor<T>>; 8] = Default::default();
        for head in Head::ALL {
            out[head.index()] = logits.get(head).map(|v| g.tape.value(v).clone());
        }
        Ok(out)
    }

    /// Per-head argmax (lowest index on ties).
    pub fn predict(&self, input: &NetInput<T>) -> Result<Vec<StateActionLabel>> {
        Ok(predict_from(&self.forward(input)?))
    }

    /// Heads that contribute to the loss for this model.
    pub fn loss_heads(&self) -> Vec<Head> {
        Head::ALL
            .into_iter()
            .filter(|h| self.space.has_z || !matches!(h, Head::Z | Head::Dz))
            .filter(|h| self.has_relative() || !h.is_relative())
            .collect()
    }

    /// Records the weighted multi-head loss on `g`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        logits: &HeadLogits,
        labels: &[StateActionLabel],
        weights: &HeadWeights,
    ) -> Result<Var> {
        for l in labels {
            l.validate(&self.space)?;
        }
        let mut terms = Vec::new();
        for head in self.loss_heads() {
            let v = logits.get(head).expect("head present");
            let targets: Vec<usize> = labels.iter().map(|l| l.get(head)).collect();
            terms.push(g.tape.softmax_cross_entropy(v, &targets, T::lit(weights.get(head)))?);
        }
        g.tape.add_scalars(&terms)
    }
}

fn tensor_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Per-head argmax over a forward output.
pub fn predict_from<T: Scalar>(out: &NetOutput<T>) -> Vec<StateActionLabel> {
    (0..out.batch())
        .map(|b| {
            let mut label = StateActionLabel::default();
            for head in Head::ALL {
                if let Some(row) = out.row(head, b) {
                    label.set(head, argmax_row(row));
                }
            }
            label
        })
        .collect()
}

/// Weighted multi-head cross-entropy over probabilities, averaged over the batch.
/// Z terms are dropped for 2D spaces; absent relative heads contribute nothing.
pub fn loss<T: Scalar>(out: &NetOutput<T>, labels: &[StateActionLabel], space: &LabelSpace, weights: &HeadWeights) -> Result<f64> {
    let mut total = 0.0;
    for l in labels {
        l.validate(space)?;
    }
    for head in Head::ALL {
        if !space.has_z && matches!(head, Head::Z | Head::Dz) {
            continue;
        }
        let Some(probs) = out.head(head) else { continue };
        let targets: Vec<usize> = labels.iter().map(|l| l.get(head)).collect();
        total += weights.get(head) * tensor::cross_entropy(probs, &targets)?.as_f64();
    }
    Ok(total)
}
