use proptest::prelude::*;
use sanet::autodiff::Tape;
use sanet::tensor::{concat, dense, maxpool2d, slice_axis, softmax, ConvSpec, Padding, PoolSpec, Tensor};

fn padding() -> impl Strategy<Value = Padding> {
    prop_oneof![Just(Padding::Same), Just(Padding::Valid)]
}

/// Window origin offset for `Same` padding: half the total, rounded down.
fn pad_lo(n: usize, k: usize, s: usize, p: Padding) -> usize {
    match p {
        Padding::Same => (((n.div_ceil(s)) - 1) * s + k).saturating_sub(n) / 2,
        Padding::Valid => 0,
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..12, seed in any::<u64>()) {
        let mut s = seed;
        let logits = Tensor::<f32>::from_fn(&[rows, cols], |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f32 / (1u64 << 31) as f32 - 0.5) * 2e4
        });
        let p = softmax(&logits).unwrap();
        for r in p.data().chunks(cols) {
            let sum: f64 = r.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn concat_then_slice_is_identity(
        dims in proptest::collection::vec(1usize..4, 3),
        axis in 0usize..3,
        widths in proptest::collection::vec(1usize..4, 1..4),
    ) {
        let parts: Vec<Tensor<f64>> = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let mut shape = dims.clone();
                shape[axis] = w;
                Tensor::from_fn(&shape, |k| (i * 1000 + k) as f64)
            })
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let joined = concat(&refs, axis).unwrap();
        prop_assert_eq!(joined.shape()[axis], widths.iter().sum::<usize>());
        let mut start = 0;
        for p in &parts {
            let w = p.shape()[axis];
            prop_assert_eq!(&slice_axis(&joined, axis, start, w).unwrap(), p);
            start += w;
        }
    }

    #[test]
    fn maxpool_picks_window_max_and_routes_gradient_there(
        h in 2usize..10, w in 2usize..10, k in 1usize..4, s in 1usize..4, pad in padding(), seed in any::<u64>(),
    ) {
        prop_assume!(pad == Padding::Same || (k <= h && k <= w));
        let spec = PoolSpec::new((k, k), (s, s), pad);
        let mut st = seed | 1;
        // distinct values so the argmax is unique
        let mut vals: Vec<f64> = (0..2 * h * w).map(|i| i as f64).collect();
        for i in (1..vals.len()).rev() {
            st ^= st << 13; st ^= st >> 7; st ^= st << 17;
            vals.swap(i, (st % (i as u64 + 1)) as usize);
        }
        let x = Tensor::new(vec![1, 2, h, w], vals).unwrap();
        let (y, arg) = maxpool2d(&x, &spec).unwrap();
        let (oh, ow) = (y.shape()[2], y.shape()[3]);
        let (ph, pw) = (pad_lo(h, k, s, pad), pad_lo(w, k, s, pad));
        for c in 0..2 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..k {
                        for dx in 0..k {
                            let (iy, ix) = ((oy * s + dy) as isize - ph as isize, (ox * s + dx) as isize - pw as isize);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                best = best.max(x.data()[(c * h + iy as usize) * w + ix as usize]);
                            }
                        }
                    }
                    let o = (c * oh + oy) * ow + ox;
                    prop_assert_eq!(y.data()[o], best);
                    prop_assert_eq!(x.data()[arg[o]], best);
                }
            }
        }

        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let yv = tape.maxpool2d(xv, spec).unwrap();
        let r = tape.constant(Tensor::from_fn(y.shape(), |i| 1.0 + i as f64));
        let prod = tape.mul(yv, r).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.of(xv).unwrap();
        for (i, &v) in gx.iter().enumerate() {
            let expect: f64 = arg.iter().enumerate().filter(|(_, &a)| a == i).map(|(o, _)| 1.0 + o as f64).sum();
            prop_assert_eq!(v, expect);
        }
    }

    #[test]
    fn same_padding_output_is_ceil(h in 1usize..200, w in 1usize..200, kh in 1usize..10, kw in 1usize..10, sh in 1usize..5, sw in 1usize..5) {
        let spec = ConvSpec::new(1, (kh, kw), (sh, sw), Padding::Same);
        prop_assert_eq!(spec.output_extent(h, w).unwrap(), (h.div_ceil(sh), w.div_ceil(sw)));
    }

    #[test]
    fn dense_matches_naive(b in 1usize..4, n in 1usize..9, m in 1usize..9, seed in any::<u32>()) {
        let f = |i: usize| ((i as u64 * 2654435761 + seed as u64) % 1000) as f64 / 500.0 - 1.0;
        let x = Tensor::from_fn(&[b, n], f);
        let wt = Tensor::from_fn(&[n, m], |i| f(i + 7));
        let bias = Tensor::from_fn(&[m], |i| f(i + 13));
        let y = dense(&x, &wt, &bias).unwrap();
        for i in 0..b {
            for j in 0..m {
                let want = bias.data()[j] + (0..n).map(|k| x.data()[i * n + k] * wt.data()[k * m + j]).sum::<f64>();
                prop_assert!((y.data()[i * m + j] - want).abs() < 1e-12);
            }
        }
    }
}
