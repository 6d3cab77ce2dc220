//! Central finite-difference gradient checks in f64, plus a fixed suite
//! covering every layer type and a miniature end-to-end network.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::layers::{td_apply, Conv2dLayer, ConvLstmCell, DenseLayer, Graph, Layer, MaxPoolLayer, ParamStore};
use crate::model::{AblationConfig, Head, InputGeometry, LabelSpace, Model, NetInput, PathwayMask, StateActionLabel};
use crate::tensor::{ConvSpec, Padding, PoolSpec, Tensor};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely; finite
/// differences cannot resolve them relatively.
pub const FLOOR: f64 = 1e-6;
/// One-sided slopes further apart than this mark a kink (ReLU or max-pool
/// switch) inside the probe interval. A probe that misses the tolerance is
/// excused only when it straddles a kink.
const KINK: f64 = 1e-2;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stats {
    pub checked: usize,
    pub kinks: usize,
    pub worst: f64,
}

impl Stats {
    pub fn merge(&mut self, o: Stats) {
        self.checked += o.checked;
        self.kinks += o.kinks;
        self.worst = self.worst.max(o.worst);
    }

    /// Why the check failed, if it did. At most 2% of probes may sit on kinks.
    pub fn failure(&self) -> Option<String> {
        if self.checked == 0 {
            Some("nothing checked".into())
        } else if !(self.worst < TOLERANCE) {
            Some(format!("worst relative error {:.3e}", self.worst))
        } else if self.kinks * 50 > self.checked {
            Some(format!("{} of {} probes hit kinks", self.kinks, self.checked))
        } else {
            None
        }
    }
}

pub type Build<'b> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'b;

fn eval(store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: &Build) -> Result<f64> {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.tape.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.tape.value(loss).item())
}

/// Scores one coordinate. `at(d)` evaluates the loss with the coordinate
/// offset by `d`. A probe missing the tolerance is re-measured on an interval
/// a hundred times narrower; it counts as a kink when that either confirms
/// the analytic value or still shows disagreeing one-sided slopes.
fn record(stats: &mut Stats, analytic: f64, at: &mut dyn FnMut(f64) -> Result<f64>) -> Result<()> {
    stats.checked += 1;
    let (up, down) = (at(STEP)?, at(-STEP)?);
    let err = rel_err(analytic, (up - down) / (2.0 * STEP));
    if err < TOLERANCE {
        stats.worst = stats.worst.max(err);
        return Ok(());
    }
    let h = STEP * 1e-2;
    let (f0, up, down) = (at(0.0)?, at(h)?, at(-h)?);
    let narrow = rel_err(analytic, (up - down) / (2.0 * h));
    if narrow < TOLERANCE || rel_err((up - f0) / h, (f0 - down) / h) > KINK {
        stats.kinks += 1;
    } else {
        stats.worst = stats.worst.max(err);
    }
    Ok(())
}

/// Compares the tape's gradients of the scalar built by `build` against
/// central differences on up to `per_tensor` sampled coordinates of every
/// parameter and input tensor.
pub fn check(store: &mut ParamStore<f64>, inputs: &mut [Tensor<f64>], build: &Build, per_tensor: usize, rng: &mut ChaCha8Rng) -> Result<Stats> {
    let (param_grads, input_grads) = {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.tape.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let grads = g.tape.backward(loss)?;
        let mut pg: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for (id, gr) in grads.params() {
            pg[id] = Some(gr.to_vec());
        }
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs.iter())
            .map(|(&v, t)| grads.of(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        (pg, ig)
    };
    let mut stats = Stats::default();
    for id in 0..store.len() {
        let n = store.entries()[id].tensor.len();
        let analytic = param_grads[id].clone().unwrap_or_else(|| vec![0.0; n]);
        for k in sample(rng, n, per_tensor.min(n)) {
            let base = store.entries()[id].tensor.data()[k];
            let mut at = |d: f64| {
                store.entries_mut()[id].tensor.data_mut()[k] = base + d;
                eval(store, inputs, build)
            };
            let r = record(&mut stats, analytic[k], &mut at);
            store.entries_mut()[id].tensor.data_mut()[k] = base;
            r?;
        }
    }
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        for k in sample(rng, n, per_tensor.min(n)) {
            let base = inputs[i].data()[k];
            let mut at = |d: f64| {
                inputs[i].data_mut()[k] = base + d;
                eval(store, inputs, build)
            };
            let r = record(&mut stats, input_grads[i][k], &mut at);
            inputs[i].data_mut()[k] = base;
            r?;
        }
    }
    Ok(stats)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Loss = sum(y * R) with a fixed random R, so every output element matters.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let r = g.tape.constant(random(g.tape.shape(y), &mut rng));
    let p = g.tape.mul(y, r)?;
    g.tape.sum_all(p)
}

fn conv_case(seed: u64, spec: ConvSpec, relu: bool, hw: (usize, usize)) -> Result<Stats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = Conv2dLayer::new(&mut store, "c", 2, spec, relu, &mut rng)?;
    let mut inputs = vec![random(&[2, 2, hw.0, hw.1], &mut rng)];
    let build = |g: &mut Graph<'_, f64>, x: &[Var]| {
        let y = layer.forward(g, x[0])?;
        project(g, y, seed)
    };
    check(&mut store, &mut inputs, &build, 12, &mut rng)
}

fn dense_case(seed: u64, relu: bool) -> Result<Stats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = DenseLayer::new(&mut store, "d", 7, 5, relu, &mut rng)?;
    // nonzero bias so the rectified case sees both branches
    for v in store.entries_mut()[1].tensor.data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let mut inputs = vec![random(&[3, 7], &mut rng)];
    let build = |g: &mut Graph<'_, f64>, x: &[Var]| {
        let y = layer.forward(g, x[0])?;
        project(g, y, seed)
    };
    check(&mut store, &mut inputs, &build, 16, &mut rng)
}

fn maxpool_case(seed: u64) -> Result<Stats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = MaxPoolLayer {
        name: "p".into(),
        spec: PoolSpec::new((4, 4), (3, 3), Padding::Same),
    };
    let mut inputs = vec![random(&[2, 3, 8, 10], &mut rng)];
    let build = |g: &mut Graph<'_, f64>, x: &[Var]| {
        let y = layer.forward(g, x[0])?;
        project(g, y, seed)
    };
    check(&mut store, &mut inputs, &build, 30, &mut rng)
}

fn time_distributed_case(seed: u64) -> Result<Stats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = Conv2dLayer::new(&mut store, "td", 2, ConvSpec::new(3, (3, 3), (2, 2), Padding::Same), true, &mut rng)?;
    let mut inputs = vec![random(&[2, 3, 2, 5, 6], &mut rng)];
    let build = |g: &mut Graph<'_, f64>, x: &[Var]| {
        let y = td_apply(&layer, g, x[0])?;
        project(g, y, seed)
    };
    check(&mut store, &mut inputs, &build, 16, &mut rng)
}

fn convlstm_case(seed: u64) -> Result<Stats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cell = ConvLstmCell::new(&mut store, "l", 2, 3, (3, 3), (2, 2), &mut rng)?;
    let mut inputs = vec![random(&[2, 3, 2, 5, 4], &mut rng)];
    let build = |g: &mut Graph<'_, f64>, x: &[Var]| {
        let y = cell.run_sequence(g, x[0])?;
        project(g, y, seed)
    };
    check(&mut store, &mut inputs, &build, 16, &mut rng)
}

fn cross_entropy_case(seed: u64) -> Result<Stats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
    let mut inputs = vec![random(&[4, 6], &mut rng).map(|v| 3.0 * v)];
    let build = |g: &mut Graph<'_, f64>, x: &[Var]| g.tape.softmax_cross_entropy(x[0], &targets, 0.7);
    check(&mut store, &mut inputs, &build, 24, &mut rng)
}

/// Geometry of the miniature network used for end-to-end checks.
pub fn mini_geometry() -> InputGeometry {
    InputGeometry {
        frame_h: 24,
        frame_w: 32,
        crop_h: 10,
        crop_w: 15,
        hidden: 8,
    }
}

/// Whole-network loss gradient; the seed also picks the ablation variant.
fn end_to_end_case(seed: u64) -> Result<Stats> {
    let space = LabelSpace::patrol();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ablation = AblationConfig::from_bits((seed % 16) as u8);
    let mut model = Model::<f64>::build(space, mini_geometry(), ablation, seed)?;
    let g = model.geometry;
    let (sh, sw) = g.sequence_extent(&ablation);
    let b = 2;
    let input = NetInput {
        full_frame: Tensor::from_fn(&[b, 4, g.frame_h, g.frame_w], |_| rng.gen::<f64>()),
        crops: Tensor::from_fn(&[b, 3, 4, sh, sw], |_| rng.gen::<f64>()),
    };
    let labels: Vec<StateActionLabel> = (0..b)
        .map(|_| {
            let mut l = StateActionLabel::default();
            for h in Head::ALL {
                l.set(h, rng.gen_range(0..space.width(h)));
            }
            l
        })
        .collect();
    let weights = Default::default();
    let structure = model.clone();
    let build = |g: &mut Graph<'_, f64>, _: &[Var]| {
        let logits = structure.forward_graph(g, &input, PathwayMask::default())?;
        structure.loss_graph(g, &logits, &labels, &weights)
    };
    check(&mut model.params, &mut [], &build, 3, &mut rng)
}

pub type Case = fn(u64) -> Result<Stats>;

/// Named checks; each is run once per seed.
pub const SUITE: &[(&str, Case)] = &[
    ("conv2d same 3x3", |s| conv_case(s, ConvSpec::new(3, (3, 3), (1, 1), Padding::Same), true, (5, 6))),
    ("conv2d same 3x9 stride 3", |s| conv_case(s, ConvSpec::new(2, (3, 9), (3, 3), Padding::Same), true, (7, 11))),
    ("conv2d valid 2x3 linear", |s| conv_case(s, ConvSpec::new(4, (2, 3), (2, 1), Padding::Valid), false, (6, 5))),
    ("maxpool", maxpool_case),
    ("dense linear", |s| dense_case(s, false)),
    ("dense relu", |s| dense_case(s, true)),
    ("time-distributed conv", time_distributed_case),
    ("convlstm sequence", convlstm_case),
    ("softmax cross-entropy", cross_entropy_case),
    ("end-to-end network", end_to_end_case),
];

/// Runs `case` for seeds `0..seeds` and merges the results.
pub fn run_case(case: Case, seeds: u64) -> Result<Stats> {
    let mut total = Stats::default();
    for seed in 0..seeds {
        total.merge(case(seed)?);
    }
    Ok(total)
}
