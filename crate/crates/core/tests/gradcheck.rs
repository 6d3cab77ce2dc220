use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sanet::gradcheck::{run_case, SUITE};
use sanet::layers::{ConvLstmCell, Graph, ParamStore};
use sanet::tensor::{conv2d, ConvSpec, Padding, Tensor};

fn suite_case(name: &str) {
    let (_, case) = SUITE.iter().find(|(n, _)| *n == name).expect("known case");
    let stats = run_case(*case, 20).unwrap();
    if let Some(why) = stats.failure() {
        panic!("{name}: {why} ({stats:?})");
    }
}

#[test]
fn conv_same() {
    suite_case("conv2d same 3x3");
}

#[test]
fn conv_wide_kernel_strided() {
    suite_case("conv2d same 3x9 stride 3");
}

#[test]
fn conv_valid_linear() {
    suite_case("conv2d valid 2x3 linear");
}

#[test]
fn maxpool() {
    suite_case("maxpool");
}

#[test]
fn dense() {
    suite_case("dense linear");
    suite_case("dense relu");
}

#[test]
fn time_distributed() {
    suite_case("time-distributed conv");
}

#[test]
fn convlstm() {
    suite_case("convlstm sequence");
}

#[test]
fn cross_entropy() {
    suite_case("softmax cross-entropy");
}

#[test]
fn end_to_end() {
    suite_case("end-to-end network");
}

#[test]
fn every_case_is_covered() {
    assert_eq!(SUITE.len(), 10);
}

/// Direct six-loop convolution with explicit zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: &ConvSpec) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, kh, kw) = (spec.out_channels, spec.kernel_h, spec.kernel_w);
    let (sh, sw) = (spec.stride_h, spec.stride_w);
    let (oh, ow, ph, pw) = match spec.padding {
        Padding::Same => {
            let oh = h.div_ceil(sh);
            let ow = wd.div_ceil(sw);
            let th = ((oh - 1) * sh + kh).saturating_sub(h);
            let tw = ((ow - 1) * sw + kw).saturating_sub(wd);
            (oh, ow, th / 2, tw / 2)
        }
        Padding::Valid => ((h - kh) / sh + 1, (wd - kw) / sw + 1, 0, 0),
    };
    let mut out = vec![0.0; n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[ki];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * sh + dy) as isize - ph as isize;
                                let ix = (ox * sw + dx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((ki * c + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let specs = [
        ConvSpec::new(3, (3, 9), (3, 3), Padding::Same),
        ConvSpec::new(2, (4, 4), (2, 3), Padding::Same),
        ConvSpec::new(5, (3, 3), (1, 1), Padding::Valid),
        ConvSpec::new(1, (2, 5), (1, 2), Padding::Same),
    ];
    for spec in specs {
        for _ in 0..5 {
            let (h, w) = (rng.gen_range(5..20), rng.gen_range(9..30));
            let x = Tensor::from_fn(&[2, 3, h, w], |_| rng.gen_range(-1.0..1.0));
            let wt = Tensor::from_fn(&[spec.out_channels, 3, spec.kernel_h, spec.kernel_w], |_| rng.gen_range(-1.0..1.0));
            let b = Tensor::from_fn(&[spec.out_channels], |_| rng.gen_range(-1.0..1.0));
            let got = conv2d(&x, &wt, Some(&b), &spec).unwrap();
            let want = naive_conv(&x, &wt, b.data(), &spec);
            assert_eq!(got.len(), want.len());
            for (a, e) in got.data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "{spec:?}: {a} vs {e}");
            }
        }
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A 1x1 ConvLSTM on 1x1 maps is a plain LSTM; compare against scalar loops.
#[test]
fn convlstm_matches_scalar_lstm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let (c, k, t) = (3, 2, 4);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "l", c, k, (1, 1), (1, 1), &mut rng).unwrap();
        for e in store.entries_mut() {
            for v in e.tensor.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let wx = store.entries()[0].tensor.data().to_vec(); // [4k, c]
        let wh = store.entries()[1].tensor.data().to_vec(); // [4k, k]
        let bias = store.entries()[2].tensor.data().to_vec();
        let xs: Vec<Vec<f64>> = (0..t).map(|_| (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();

        let (mut h, mut cst) = (vec![0.0; k], vec![0.0; k]);
        let mut want = Vec::new();
        for x in &xs {
            let z: Vec<f64> = (0..4 * k)
                .map(|r| bias[r] + (0..c).map(|j| wx[r * c + j] * x[j]).sum::<f64>() + (0..k).map(|j| wh[r * k + j] * h[j]).sum::<f64>())
                .collect();
            for u in 0..k {
                let (i, f, o, g) = (sig(z[u]), sig(z[k + u]), sig(z[2 * k + u]), z[3 * k + u].tanh());
                cst[u] = f * cst[u] + i * g;
                h[u] = o * cst[u].tanh();
            }
            want.extend_from_slice(&h);
        }

        let mut g = Graph::new(&store);
        let input = Tensor::new(vec![1, t, c, 1, 1], xs.concat()).unwrap();
        let x = g.tape.constant(input);
        let y = cell.run_sequence(&mut g, x).unwrap();
        let got = g.tape.value(y).data();
        for (a, e) in got.iter().zip(&want) {
            assert!((a - e).abs() < 1e-12, "trial {trial}: {a} vs {e}");
        }
    }
}

#[test]
fn saturated_gates_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let cell = ConvLstmCell::new(&mut store, "l", 2, 3, (3, 3), (1, 1), &mut rng).unwrap();
    let input = Tensor::from_fn(&[1, 3, 2, 4, 4], |i| if i % 2 == 0 { 1e4 } else { -1e4 });
    let mut g = Graph::new(&store);
    let x = g.tape.leaf(input);
    let y = cell.run_sequence(&mut g, x).unwrap();
    let loss = g.tape.sum_all(y).unwrap();
    let out = g.tape.value(y).data().to_vec();
    assert!(out.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    let grads = g.tape.backward(loss).unwrap();
    assert!(grads.of(x).unwrap().iter().all(|v| v.is_finite()));
    for (_, gr) in grads.params() {
        assert!(gr.iter().all(|v| v.is_finite()));
    }
}
