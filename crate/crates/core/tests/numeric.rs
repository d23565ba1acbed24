use ova::numeric::*;
use ova::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero so kinks (relu, max) are not straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5f32);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = k.shape().try_into().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f64; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                s += f64::from(xv) * f64::from(kv);
                            }
                        }
                    }
                    out[((b * o + oc) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    (vec![n, o, ho, wo], out)
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cases = vec![(vec![1, 2, 4, 4], vec![3, 2, 3, 3], 1, 1)];
    for _ in 0..60 {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let h = rng.random_range(3..=8);
        let w = rng.random_range(3..=8);
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..=2);
        cases.push((
            vec![n, c, h, w],
            vec![rng.random_range(1..=5), c, k, k],
            stride,
            (k - 1) / 2,
        ));
    }
    for (xs, ks, stride, pad) in cases {
        let x = rand_tensor(&mut rng, &xs, -1.0, 1.0);
        let k = rand_tensor(&mut rng, &ks, -1.0, 1.0);
        let mut tape = Tape::<f32>::new();
        let (xv, kv) = (tape.constant(&x).unwrap(), tape.constant(&k).unwrap());
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        let (shape, want) = naive_conv(&x, &k, stride, pad);
        assert_eq!(tape.shape(y), shape.as_slice());
        for (a, b) in tape.data(y).iter().zip(&want) {
            assert!(
                (f64::from(*a) - b).abs() <= 1e-5,
                "{xs:?} {ks:?} s{stride}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn conv_channel_mismatch_is_a_shape_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&Tensor::zeros([1, 2, 4, 4])).unwrap();
    let k = tape.constant(&Tensor::zeros([1, 3, 3, 3])).unwrap();
    assert!(matches!(tape.conv2d(x, k, 1, 1), Err(ova::Error::Shape(_))));
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type GenFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

/// (name, op, input generator)
fn op_suite() -> Vec<(&'static str, OpFn, GenFn)> {
    let one =
        |shape: &'static [usize]| -> GenFn { Box::new(move |r| vec![away_from_zero(r, shape)]) };
    let two = |a: &'static [usize], b: &'static [usize]| -> GenFn {
        Box::new(move |r| vec![away_from_zero(r, a), away_from_zero(r, b)])
    };
    let positive = |shape: &'static [usize]| -> GenFn {
        Box::new(move |r| vec![rand_tensor(r, shape, 0.3, 2.0)])
    };
    // weights the output so the summed objective is not symmetric
    fn weigh(t: &mut Tape<f64>, y: Var) -> Result<Var> {
        let n: usize = t.shape(y).iter().product();
        let w = t.constant_from(
            t.shape(y).to_vec().as_slice(),
            (0..n).map(|i| 0.5 + 0.1 * i as f64).collect(),
        )?;
        t.mul(y, w)
    }
    vec![
        (
            "add",
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                weigh(t, y)
            }),
            two(&[3, 4], &[3, 4]),
        ),
        (
            "sub",
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                weigh(t, y)
            }),
            two(&[3, 4], &[3, 4]),
        ),
        (
            "mul",
            Box::new(|t, v| t.mul(v[0], v[1])),
            two(&[3, 4], &[3, 4]),
        ),
        (
            "div",
            Box::new(|t, v| t.div(v[0], v[1])),
            two(&[3, 4], &[3, 4]),
        ),
        (
            "scale",
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7)?;
                weigh(t, y)
            }),
            one(&[5]),
        ),
        (
            "offset",
            Box::new(|t, v| {
                let y = t.offset(v[0], 0.3)?;
                t.mul(y, y)
            }),
            one(&[5]),
        ),
        (
            "mul_scalar",
            Box::new(|t, v| {
                let y = t.mul_scalar(v[0], v[1])?;
                weigh(t, y)
            }),
            two(&[2, 3], &[1]),
        ),
        (
            "add_scalar",
            Box::new(|t, v| {
                let y = t.add_scalar(v[0], v[1])?;
                t.mul(y, y)
            }),
            two(&[2, 3], &[1]),
        ),
        (
            "add_bias",
            Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1], 1)?;
                t.mul(y, y)
            }),
            two(&[2, 3, 2], &[3]),
        ),
        (
            "neg",
            Box::new(|t, v| {
                let y = t.neg(v[0])?;
                weigh(t, y)
            }),
            one(&[4]),
        ),
        (
            "relu",
            Box::new(|t, v| {
                let y = t.relu(v[0])?;
                weigh(t, y)
            }),
            one(&[8]),
        ),
        ("sigmoid", Box::new(|t, v| t.sigmoid(v[0])), one(&[8])),
        (
            "log_sigmoid",
            Box::new(|t, v| t.log_sigmoid(v[0])),
            one(&[8]),
        ),
        ("tanh", Box::new(|t, v| t.tanh(v[0])), one(&[8])),
        (
            "tan",
            Box::new(|t, v| t.tan(v[0])),
            Box::new(|r| vec![rand_tensor(r, &[6], -1.2, 1.2)]),
        ),
        ("exp", Box::new(|t, v| t.exp(v[0])), one(&[6])),
        ("ln", Box::new(|t, v| t.ln(v[0])), positive(&[6])),
        ("recip", Box::new(|t, v| t.recip(v[0])), positive(&[6])),
        ("square", Box::new(|t, v| t.square(v[0])), one(&[6])),
        (
            "maximum",
            Box::new(|t, v| {
                let y = t.maximum(v[0], v[1])?;
                weigh(t, y)
            }),
            two(&[6], &[6]),
        ),
        (
            "minimum",
            Box::new(|t, v| {
                let y = t.minimum(v[0], v[1])?;
                weigh(t, y)
            }),
            two(&[6], &[6]),
        ),
        (
            "sum",
            Box::new(|t, v| {
                let y = t.sum(v[0])?;
                t.mul(y, y)
            }),
            one(&[2, 3]),
        ),
        (
            "mean",
            Box::new(|t, v| {
                let y = t.mean(v[0])?;
                t.mul(y, y)
            }),
            one(&[2, 3]),
        ),
        (
            "sum_axis",
            Box::new(|t, v| {
                let y = t.sum_axis(v[0], 1)?;
                weigh(t, y)
            }),
            one(&[2, 3, 2]),
        ),
        (
            "matmul",
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                weigh(t, y)
            }),
            two(&[3, 4], &[4, 2]),
        ),
        (
            "conv2d",
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], 1, 1)?;
                weigh(t, y)
            }),
            two(&[1, 2, 4, 4], &[3, 2, 3, 3]),
        ),
        (
            "conv2d_s2",
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], 2, 1)?;
                weigh(t, y)
            }),
            two(&[2, 2, 5, 6], &[2, 2, 3, 3]),
        ),
        (
            "conv2d_1x1",
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], 1, 0)?;
                weigh(t, y)
            }),
            two(&[1, 3, 3, 3], &[2, 3, 1, 1]),
        ),
        (
            "upsample2x",
            Box::new(|t, v| {
                let y = t.upsample2x(v[0])?;
                weigh(t, y)
            }),
            one(&[1, 2, 2, 3]),
        ),
        (
            "downsample2x",
            Box::new(|t, v| {
                let y = t.downsample2x(v[0])?;
                weigh(t, y)
            }),
            one(&[1, 2, 4, 4]),
        ),
        (
            "concat",
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                weigh(t, y)
            }),
            two(&[2, 3], &[2, 2]),
        ),
        (
            "reshape",
            Box::new(|t, v| {
                let y = t.reshape(v[0], &[3, 2])?;
                weigh(t, y)
            }),
            one(&[2, 3]),
        ),
        (
            "transpose",
            Box::new(|t, v| {
                let y = t.transpose(v[0])?;
                weigh(t, y)
            }),
            one(&[2, 3]),
        ),
        (
            "gather_rows",
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], &[2, 0, 2])?;
                weigh(t, y)
            }),
            one(&[3, 2]),
        ),
        (
            "select_cols",
            Box::new(|t, v| {
                let y = t.select_cols(v[0], &[1, 1, 0])?;
                weigh(t, y)
            }),
            one(&[2, 3]),
        ),
    ]
}

#[test]
fn every_op_passes_gradient_check_on_five_seeds() {
    for (name, f, gen) in op_suite() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut inputs = gen(&mut rng);
            if name == "maximum" || name == "minimum" {
                // keep the two arguments apart so no element sits on the kink
                let shifted: Vec<f32> = inputs[0].data().iter().map(|v| v + 0.1).collect();
                let gap: Vec<f32> = inputs[1]
                    .data()
                    .iter()
                    .zip(&shifted)
                    .map(|(b, a)| if (a - b).abs() < 0.05 { b + 0.2 } else { *b })
                    .collect();
                inputs[1] = Tensor::new(inputs[1].shape().to_vec(), gap).unwrap();
            }
            let report = grad_check(&f, &inputs, 1e-3, 1e-3).unwrap();
            assert!(report.passed(), "{name} seed {seed}: {report:?}");
            assert!(report.checked > 0);
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 4, 8, 8], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[4, 4, 3, 3], -1.0, 1.0);
    let run = || {
        let mut tape = Tape::<f32>::new();
        let (xv, kv) = (tape.variable(&x).unwrap(), tape.variable(&k).unwrap());
        let y = tape.conv2d(xv, kv, 1, 1).unwrap();
        let y = tape.sigmoid(y).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(y), g.wrt(&tape, kv).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn every_parameter_gets_one_gradient_of_its_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(&mut rng, &[2, 3], -1.0, 1.0));
    store.insert("b", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0));
    store.insert("unused", rand_tensor(&mut rng, &[5], -1.0, 1.0));
    let mut tape = Tape::<f32>::new();
    let bound = store.bind(&mut tape).unwrap();
    let y = tape
        .matmul(bound.var("a").unwrap(), bound.var("b").unwrap())
        .unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    let grads = bound.collect_grads(&tape, &g);
    assert_eq!(grads.len(), store.len());
    for (g, (name, p)) in grads.iter().zip(store.iter()) {
        assert_eq!(g.shape(), p.shape(), "{name}");
    }
    assert!(grads[2].data().iter().all(|v| *v == 0.0));
    assert!(g.wrt(&tape, bound.var("unused").unwrap()).is_none());
}

proptest! {
    #[test]
    fn down_inverts_up(h in 1usize..5, w in 1usize..5, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 2, h, w], -3.0, 3.0);
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(&x).unwrap();
        let up = tape.upsample2x(v).unwrap();
        let down = tape.downsample2x(up).unwrap();
        prop_assert_eq!(tape.value(down), x);
    }

    #[test]
    fn tensor_length_must_match_shape(a in 1usize..5, b in 1usize..5, extra in 1usize..3) {
        prop_assert!(Tensor::new([a, b], vec![0.0; a * b]).is_ok());
        prop_assert!(Tensor::new([a, b], vec![0.0; a * b + extra]).is_err());
    }

    #[test]
    fn conv_is_linear_in_the_input(seed in 0u64..200, s in -2.0f32..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let sx = Tensor::new([1, 2, 5, 5], x.data().iter().map(|v| v * s).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let (xv, sv, kv) = (tape.constant(&x).unwrap(), tape.constant(&sx).unwrap(), tape.constant(&k).unwrap());
        let y1 = tape.conv2d(xv, kv, 1, 1).unwrap();
        let y2 = tape.conv2d(sv, kv, 1, 1).unwrap();
        for (a, b) in tape.data(y1).iter().zip(tape.data(y2)) {
            prop_assert!((a * f64::from(s) - b).abs() < 1e-5);
        }
    }
}
