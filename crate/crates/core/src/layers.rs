//! Layer building blocks: parameter registry, convolution/dense blocks, the
//! time-distributed wrapper and the ConvLSTM cell.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Padding, PoolSpec, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named parameter registry. Names are unique; registration order is the
/// canonical order used by checkpoints and optimizers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

/// A view of one layer's tensors, grouped by name prefix.
#[derive(Debug)]
pub struct LayerParams<'a, T: Scalar> {
    pub name: String,
    pub tensors: Vec<(&'a str, &'a Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Build {
                layer: name,
                detail: "duplicate parameter name".into(),
            });
        }
        self.entries.push(ParamEntry { name, tensor });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Glorot-uniform initialised tensor.
    pub fn register_glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::lit((rng.gen::<f64>() * 2.0 - 1.0) * limit));
        self.register(name, t)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Tensors whose name starts with `layer.`.
    pub fn layer(&self, layer: &str) -> Option<LayerParams<'_, T>> {
        let tensors: Vec<_> = self
            .entries
            .iter()
            .filter_map(|e| {
                e.name
                    .strip_prefix(layer)
                    .and_then(|rest| rest.strip_prefix('.'))
                    .map(|role| (role, &e.tensor))
            })
            .collect();
        (!tensors.is_empty()).then(|| LayerParams {
            name: layer.to_string(),
            tensors,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// A tape plus lazily bound parameters for one forward pass.
pub struct Graph<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(id.0, self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}

/// Anything applied to one `[N, C, H, W]` (or `[N, F]`) batch.
pub trait Layer<T: Scalar> {
    fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var>;
}

/// Initial bias of rectified convolutions; keeps deep ReLU stacks from
/// starting with dead units.
pub const RELU_BIAS: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub relu: bool,
    weight: ParamId,
    bias: ParamId,
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        spec: ConvSpec,
        relu: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::for_extent(store, name, in_channels, spec, relu, None, rng)
    }

    /// Like [`Conv2dLayer::new`], but when the input extent is known the
    /// Glorot fans count only kernel taps that can reach real input. On maps
    /// smaller than the kernel this keeps activations from shrinking layer
    /// by layer.
    pub fn for_extent<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        spec: ConvSpec,
        relu: bool,
        input_hw: Option<(usize, usize)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let k = match input_hw {
            Some((h, w)) => spec.live_taps(h, w).map_err(|e| Error::Build {
                layer: name.to_string(),
                detail: format!("input {h}x{w}: {e}"),
            })?,
            None => spec.kernel_h * spec.kernel_w,
        };
        let weight = store.register_glorot(
            format!("{name}.weight"),
            &[spec.out_channels, in_channels, spec.kernel_h, spec.kernel_w],
            in_channels * k,
            spec.out_channels * k,
            rng,
        )?;
        let b0 = if relu { T::lit(RELU_BIAS) } else { T::zero() };
        let bias = store.register(format!("{name}.bias"), Tensor::full(&[spec.out_channels], b0))?;
        Ok(Self {
            name: name.into(),
            spec,
            in_channels,
            relu,
            weight,
            bias,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }
}

impl<T: Scalar> Layer<T> for Conv2dLayer {
    fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.tape.conv2d(x, w, Some(b), self.spec).map_err(|e| tag(&self.name, e))?;
        Ok(if self.relu { g.tape.relu(y) } else { y })
    }
}

fn tag(layer: &str, e: Error) -> Error {
    match e {
        Error::Geometry { op, detail } => Error::Geometry {
            op: format!("{layer} ({op})"),
            detail,
        },
        other => other,
    }
}

#[derive(Clone, Debug)]
pub struct MaxPoolLayer {
    pub name: String,
    pub spec: PoolSpec,
}

impl<T: Scalar> Layer<T> for MaxPoolLayer {
    fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.tape.maxpool2d(x, self.spec).map_err(|e| tag(&self.name, e))
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub relu: bool,
    weight: ParamId,
    bias: ParamId,
}

impl DenseLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        relu: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Build {
                layer: name.into(),
                detail: format!("dense extents {inputs} -> {outputs}"),
            });
        }
        let weight = store.register_glorot(format!("{name}.weight"), &[inputs, outputs], inputs, outputs, rng)?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Self {
            name: name.into(),
            inputs,
            outputs,
            relu,
            weight,
            bias,
        })
    }
}

impl<T: Scalar> Layer<T> for DenseLayer {
    fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.tape.dense(x, w, b)?;
        Ok(if self.relu { g.tape.relu(y) } else { y })
    }
}

/// Applies `layer` to every time step of a `[B, T, ...]` sequence with shared
/// parameters. Steps are folded into the batch axis for a single kernel call.
pub fn td_apply<T: Scalar, L: Layer<T> + ?Sized>(layer: &L, g: &mut Graph<'_, T>, input: Var) -> Result<Var> {
    let shape = g.tape.shape(input).to_vec();
    if shape.len() < 3 {
        return Err(Error::dim("td_apply", format!("expected [B, T, ...], got {shape:?}")));
    }
    let (b, t) = (shape[0], shape[1]);
    if t == 0 {
        return Err(Error::dim("td_apply", "sequence length must be >= 1"));
    }
    let mut folded = vec![b * t];
    folded.extend_from_slice(&shape[2..]);
    let x = g.tape.reshape(input, &folded)?;
    let y = match layer.forward(g, x) {
        Ok(y) => y,
        Err(e) => {
            let step = locate_failing_step(layer, g, input, b, t).unwrap_or(0);
            return Err(e.at_step(step));
        }
    };
    let out_shape = g.tape.shape(y).to_vec();
    let mut unfolded = vec![b, t];
    unfolded.extend_from_slice(&out_shape[1..]);
    g.tape.reshape(y, &unfolded)
}

/// Re-runs a failed folded application step by step to find the first failing index.
fn locate_failing_step<T: Scalar, L: Layer<T> + ?Sized>(
    layer: &L,
    g: &mut Graph<'_, T>,
    input: Var,
    b: usize,
    t: usize,
) -> Option<usize> {
    let shape = g.tape.shape(input).to_vec();
    let mut step_shape = vec![b];
    step_shape.extend_from_slice(&shape[2..]);
    (0..t).find(|&s| {
        g.tape
            .slice(input, 1, s, 1)
            .and_then(|x| g.tape.reshape(x, &step_shape))
            .and_then(|x| layer.forward(g, x))
            .is_err()
    })
}

/// Hidden and cell state of a ConvLSTM layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// Convolutional LSTM cell without peepholes. Gates are ordered
/// input, forget, output, candidate along the channel axis.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub name: String,
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    w_input: ParamId,
    w_state: ParamId,
    bias: ParamId,
}

impl ConvLstmCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        hidden: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let k = kernel.0 * kernel.1;
        let gates = 4 * hidden;
        let w_input = store.register_glorot(
            format!("{name}.w_input"),
            &[gates, in_channels, kernel.0, kernel.1],
            in_channels * k,
            gates * k,
            rng,
        )?;
        let w_state = store.register_glorot(
            format!("{name}.w_state"),
            &[gates, hidden, kernel.0, kernel.1],
            hidden * k,
            gates * k,
            rng,
        )?;
        // forget gate starts open
        let bias = Tensor::from_fn(&[gates], |i| if (hidden..2 * hidden).contains(&i) { T::one() } else { T::zero() });
        let bias = store.register(format!("{name}.bias"), bias)?;
        Ok(Self {
            name: name.into(),
            in_channels,
            hidden,
            kernel,
            stride,
            w_input,
            w_state,
            bias,
        })
    }

    pub fn input_spec(&self) -> ConvSpec {
        ConvSpec::new(4 * self.hidden, self.kernel, self.stride, Padding::Same)
    }

    pub fn state_spec(&self) -> ConvSpec {
        ConvSpec::new(4 * self.hidden, self.kernel, (1, 1), Padding::Same)
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// Hidden-state spatial extent for an `h x w` input.
    pub fn state_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.input_spec().output_extent(h, w)
    }

    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: usize, h: usize, w: usize) -> ConvLstmState {
        let shape = [batch, self.hidden, h, w];
        ConvLstmState {
            hidden: g.tape.constant(Tensor::zeros(&shape)),
            cell: g.tape.constant(Tensor::zeros(&shape)),
        }
    }

    /// One recurrence step. Returns the output (the new hidden state) and the next state.
    pub fn step<T: Scalar>(&self, g: &mut Graph<'_, T>, input: Var, state: ConvLstmState) -> Result<(Var, ConvLstmState)> {
        let in_shape = g.tape.shape(input).to_vec();
        let st_shape = g.tape.shape(state.hidden).to_vec();
        if in_shape.len() != 4 || in_shape[1] != self.in_channels {
            return Err(Error::dim(
                "convlstm_step",
                format!("input {:?} for a cell with {} input channels", in_shape, self.in_channels),
            ));
        }
        let expected = self.state_extent(in_shape[2], in_shape[3])?;
        if st_shape != [in_shape[0], self.hidden, expected.0, expected.1] || g.tape.shape(state.cell) != st_shape.as_slice() {
            return Err(Error::dim(
                "convlstm_step",
                format!(
                    "input {:?} maps to state extent {:?} but state is {:?}",
                    in_shape, expected, st_shape
                ),
            ));
        }
        let (wx, wh, b) = (g.param(self.w_input), g.param(self.w_state), g.param(self.bias));
        let gx = g.tape.conv2d(input, wx, Some(b), self.input_spec())?;
        let gh = g.tape.conv2d(state.hidden, wh, None, self.state_spec())?;
        let gates = g.tape.add(gx, gh)?;
        let k = self.hidden;
        let i = g.tape.slice(gates, 1, 0, k)?;
        let i = g.tape.sigmoid(i);
        let f = g.tape.slice(gates, 1, k, k)?;
        let f = g.tape.sigmoid(f);
        let o = g.tape.slice(gates, 1, 2 * k, k)?;
        let o = g.tape.sigmoid(o);
        let c_hat = g.tape.slice(gates, 1, 3 * k, k)?;
        let c_hat = g.tape.tanh(c_hat);
        let keep = g.tape.mul(f, state.cell)?;
        let write = g.tape.mul(i, c_hat)?;
        let cell = g.tape.add(keep, write)?;
        let squashed = g.tape.tanh(cell);
        let hidden = g.tape.mul(o, squashed)?;
        Ok((hidden, ConvLstmState { hidden, cell }))
    }

    /// Runs the cell over per-step inputs from a zero state, returning every hidden state.
    pub fn run_steps<T: Scalar>(&self, g: &mut Graph<'_, T>, steps: &[Var]) -> Result<Vec<Var>> {
        let first = *steps.first().ok_or_else(|| Error::dim("run_sequence", "sequence length must be >= 1"))?;
        let shape = g.tape.shape(first).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("run_sequence", format!("step input {shape:?}")));
        }
        let (h, w) = self.state_extent(shape[2], shape[3]).map_err(|e| e.at_step(0))?;
        let mut state = self.zero_state(g, shape[0], h, w);
        let mut outputs = Vec::with_capacity(steps.len());
        for (t, &x) in steps.iter().enumerate() {
            let (out, next) = self.step(g, x, state).map_err(|e| e.at_step(t))?;
            outputs.push(out);
            state = next;
        }
        Ok(outputs)
    }

    /// Runs the cell over a `[B, T, C, H, W]` sequence; returns `[B, T, K, h, w]`.
    pub fn run_sequence<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: Var) -> Result<Var> {
        let steps = split_steps(g, inputs)?;
        let outs = self.run_steps(g, &steps)?;
        stack_steps(g, &outs)
    }
}

/// Splits `[B, T, ...]` into `T` tensors of shape `[B, ...]`.
pub fn split_steps<T: Scalar>(g: &mut Graph<'_, T>, seq: Var) -> Result<Vec<Var>> {
    let shape = g.tape.shape(seq).to_vec();
    if shape.len() < 3 || shape[1] == 0 {
        return Err(Error::dim("split_steps", format!("expected [B, T>=1, ...], got {shape:?}")));
    }
    let mut step_shape = vec![shape[0]];
    step_shape.extend_from_slice(&shape[2..]);
    (0..shape[1])
        .map(|t| {
            let s = g.tape.slice(seq, 1, t, 1)?;
            g.tape.reshape(s, &step_shape)
        })
        .collect()
}

/// Stacks `[B, ...]` step tensors into `[B, T, ...]`.
pub fn stack_steps<T: Scalar>(g: &mut Graph<'_, T>, steps: &[Var]) -> Result<Var> {
    let shape = g.tape.shape(steps[0]).to_vec();
    let mut one = vec![shape[0], 1];
    one.extend_from_slice(&shape[1..]);
    let parts: Vec<Var> = steps.iter().map(|&s| g.tape.reshape(s, &one)).collect::<Result<_>>()?;
    g.tape.concat(&parts, 1)
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("a.weight", Tensor::zeros(&[1])).unwrap();
        assert!(store.register("a.weight", Tensor::zeros(&[1])).is_err());
        let lp = store.layer("a").unwrap();
        assert_eq!(lp.tensors.len(), 1);
        assert_eq!(lp.tensors[0].0, "weight");
    }

    #[test]
    fn td_single_step_matches_layer() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2dLayer::new(&mut store, "c", 2, ConvSpec::new(3, (3, 3), (2, 2), Padding::Same), true, &mut rng()).unwrap();
        let x = Tensor::from_fn(&[2, 1, 2, 5, 6], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
        let mut g = Graph::new(&store);
        let xv = g.tape.leaf(x.clone());
        let y = td_apply(&conv, &mut g, xv).unwrap();
        let x4 = g.tape.leaf(x.reshape(&[2, 2, 5, 6]).unwrap());
        let y4 = conv.forward(&mut g, x4).unwrap();
        assert_eq!(g.tape.shape(y), &[2, 1, 3, 3, 3]);
        assert_eq!(g.tape.value(y).data(), g.tape.value(y4).data());
    }

    #[test]
    fn td_duplicated_frames_give_identical_slices() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2dLayer::new(&mut store, "c", 1, ConvSpec::new(2, (3, 3), (1, 1), Padding::Same), true, &mut rng()).unwrap();
        let frame: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let data: Vec<f64> = (0..3).flat_map(|_| frame.clone()).collect();
        let mut g = Graph::new(&store);
        let xv = g.tape.leaf(Tensor::new(vec![1, 3, 1, 4, 4], data).unwrap());
        let y = td_apply(&conv, &mut g, xv).unwrap();
        let out = g.tape.value(y).data();
        let n = out.len() / 3;
        assert_eq!(&out[..n], &out[n..2 * n]);
        assert_eq!(&out[..n], &out[2 * n..]);
    }

    #[test]
    fn td_geometry_error_carries_step() {
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2dLayer::new(&mut store, "c", 1, ConvSpec::new(1, (5, 5), (1, 1), Padding::Valid), false, &mut rng()).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.tape.leaf(Tensor::zeros(&[1, 2, 1, 3, 3]));
        let err = td_apply(&conv, &mut g, xv).unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 0, .. }), "{err}");
    }

    #[test]
    fn convlstm_zero_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "l", 2, 3, (3, 3), (2, 2), &mut rng()).unwrap();
        let mut g = Graph::new(&store);
        let x = g.tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let st = cell.zero_state(&mut g, 1, 2, 2);
        let (h, next) = cell.step(&mut g, x, st).unwrap();
        assert!(g.tape.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.tape.value(next.cell).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convlstm_state_geometry_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "l", 2, 3, (3, 3), (2, 2), &mut rng()).unwrap();
        let mut g = Graph::new(&store);
        let x = g.tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let st = cell.zero_state(&mut g, 1, 4, 4);
        assert!(matches!(cell.step(&mut g, x, st), Err(Error::Dimension { .. })));
    }

    #[test]
    fn run_sequence_shapes_are_time_invariant() {
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "l", 2, 3, (3, 3), (2, 2), &mut rng()).unwrap();
        let mut g = Graph::new(&store);
        let x = g.tape.leaf(Tensor::from_fn(&[2, 4, 2, 5, 7], |i| (i as f64 * 0.37).cos()));
        let y = cell.run_sequence(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(y), &[2, 4, 3, 3, 4]);
    }
}
