use ns3l_core::diffcore::{grad_check_many, Tape, Tensor, Var};
use ns3l_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const OP_TOLERANCE: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[0.2, 1.5], kept away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so no output
/// coordinate is treated symmetrically.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    out_shape: fn(&[Tensor]) -> Vec<usize>,
    op: OpFn,
}

fn same_shape(t: &[Tensor]) -> Vec<usize> {
    t[0].shape().to_vec()
}

fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)],
            out_shape: |_| vec![3, 2],
            op: |t, v| t.matmul(v[0], v[1]),
        },
        OpCase {
            name: "add",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0)],
            out_shape: same_shape,
            op: |t, v| t.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0)],
            out_shape: same_shape,
            op: |t, v| t.sub(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0)],
            out_shape: same_shape,
            op: |t, v| t.mul(v[0], v[1]),
        },
        OpCase {
            name: "add_row",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[1, 4], -1.0, 1.0)],
            out_shape: same_shape,
            op: |t, v| t.add_row(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0)],
            out_shape: same_shape,
            op: |t, v| t.scale(v[0], -1.7),
        },
        OpCase {
            name: "add_scalar",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0)],
            out_shape: same_shape,
            op: |t, v| t.add_scalar(v[0], 0.3),
        },
        OpCase {
            name: "leaky_relu",
            inputs: |r| vec![away_from_zero(r, &[3, 4])],
            out_shape: same_shape,
            op: |t, v| t.leaky_relu(v[0], 0.1),
        },
        OpCase {
            name: "exp",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -2.0, 2.0)],
            out_shape: same_shape,
            op: |t, v| t.exp(v[0]),
        },
        OpCase {
            name: "log",
            inputs: |r| vec![rand_tensor(r, &[3, 4], 0.2, 3.0)],
            out_shape: same_shape,
            op: |t, v| t.log(v[0]),
        },
        OpCase {
            name: "square",
            inputs: |r| vec![away_from_zero(r, &[3, 4])],
            out_shape: same_shape,
            op: |t, v| t.square(v[0]),
        },
        OpCase {
            name: "clamp_min",
            inputs: |r| vec![away_from_zero(r, &[3, 4])],
            out_shape: same_shape,
            op: |t, v| t.clamp_min(v[0], 0.0),
        },
        OpCase {
            name: "row_softmax",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -2.0, 2.0)],
            out_shape: same_shape,
            op: |t, v| t.row_softmax(v[0]),
        },
        OpCase {
            name: "row_sum",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0)],
            out_shape: |t| vec![t[0].rows(), 1],
            op: |t, v| t.row_sum(v[0]),
        },
        OpCase {
            name: "sum",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0)],
            out_shape: |_| vec![1],
            op: |t, v| t.sum(v[0]),
        },
        OpCase {
            name: "mean",
            inputs: |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0)],
            out_shape: |_| vec![1],
            op: |t, v| t.mean(v[0]),
        },
    ]
}

#[test]
fn every_op_passes_finite_differences() {
    for (ci, case) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + ci as u64);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let inputs = (case.inputs)(&mut rng);
            let weights = rand_tensor(&mut rng, &(case.out_shape)(&inputs), 0.5, 1.5);
            let err = grad_check_many(
                |tape, v| {
                    let out = (case.op)(tape, v)?;
                    weighted_sum(tape, out, &weights)
                },
                &inputs,
                H,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < OP_TOLERANCE, "{}: {worst:e}", case.name);
    }
}

#[test]
fn stop_gradient_blocks_only_its_branch() {
    let mut tape = Tape::new();
    let t = tape.leaf(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
    let s = tape.stop_gradient(t);
    assert_eq!(tape.value(s), tape.value(t));
    let both = tape.add(t, s).unwrap();
    let root = tape.sum(both).unwrap();
    let g = tape.backward(root).unwrap().wrt(t);
    assert_eq!(g.data(), &[1.0, 1.0]);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_lie_on_the_simplex(z in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut tape = Tape::new();
        let v = tape.leaf(z.clone());
        let s = tape.row_softmax(v).unwrap();
        for row in tape.value(s).row_iter() {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_the_root(z in matrix(3, 4), w in matrix(3, 4)) {
        let build = |tape: &mut Tape, x: Var, which: u8| -> Var {
            let wv = tape.constant(w.clone());
            let s = tape.row_softmax(x).unwrap();
            let f = {
                let p = tape.mul(s, wv).unwrap();
                tape.sum(p).unwrap()
            };
            let g = {
                let e = tape.square(x).unwrap();
                tape.mean(e).unwrap()
            };
            match which {
                0 => f,
                1 => g,
                _ => tape.add(f, g).unwrap(),
            }
        };
        let grad = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.leaf(z.clone());
            let root = build(&mut tape, x, which);
            tape.backward(root).unwrap().wrt(x)
        };
        let (gf, gg, gs) = (grad(0), grad(1), grad(2));
        for ((a, b), s) in gf.data().iter().zip(gg.data()).zip(gs.data()) {
            prop_assert!((a + b - s).abs() < 1e-12);
        }
    }
}
