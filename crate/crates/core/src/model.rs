//! Multi-layer perceptron classifier.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::rng;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    /// Input dimension, hidden widths, number of classes.
    pub layer_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Result<Self> {
        let spec = Self {
            layer_widths,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(invalid("an MLP needs at least input and output widths"));
        }
        if self.layer_widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if self.num_classes() < 2 {
            return Err(invalid("need at least two classes"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weight: Tensor,
    /// `1 × fan_out`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<Layer>,
}

/// Parameters placed on a tape as differentiable leaves.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

impl ParamVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec) -> Params {
    let mut rng = rng::stream(spec.seed, rng::streams::INIT);
    let layers = spec
        .layer_widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-a..a))
                .collect();
            Layer {
                weight: Tensor::from_parts(vec![fan_in, fan_out], data),
                bias: Tensor::zeros(&[1, fan_out]),
            }
        })
        .collect();
    Params { layers }
}

impl Params {
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    /// Rebuilds parameters from the flat `[w0, b0, w1, b1, ...]` order of
    /// [`Params::tensors`].
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if !tensors.len().is_multiple_of(2) {
            return Err(invalid("parameter list must alternate weight and bias"));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(Layer { weight, bias });
        }
        Ok(Self { layers })
    }

    pub fn on_tape(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Same as [`Params::on_tape`] but without gradients.
    pub fn as_constants(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.constant(l.weight.clone()),
                        tape.constant(l.bias.clone()),
                    )
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            w.write_all(&(layer.weight.rows() as u32).to_le_bytes())?;
            w.write_all(&(layer.weight.cols() as u32).to_le_bytes())?;
            for v in layer.weight.data().iter().chain(layer.bias.data()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_layers = read_u32(r)? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let weight = Tensor::matrix(rows, cols, read_f64s(r, rows * cols)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let bias = Tensor::matrix(1, cols, read_f64s(r, cols)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            layers.push(Layer { weight, bias });
        }
        let params = Self { layers };
        for pair in params.layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::Checkpoint("inconsistent layer widths".into()));
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NS3L";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut b = [0u8; 8];
    (0..n)
        .map(|_| {
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}

/// Pre-softmax scores `n×K`.
pub fn logits(tape: &mut Tape, params: &ParamVars, x: Var, leaky_slope: f64) -> Result<Var> {
    let d = tape.value(params.layers[0].0).rows();
    let xt = tape.value(x);
    if xt.shape().len() != 2 || xt.cols() != d {
        return Err(Error::Shape {
            op: "mlp input",
            lhs: xt.shape().to_vec(),
            rhs: vec![d],
        });
    }
    let mut h = x;
    let last = params.layers.len() - 1;
    for (i, &(w, b)) in params.layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_row(z, b)?;
        if i < last {
            h = tape.leaky_relu(h, leaky_slope)?;
        }
    }
    Ok(h)
}

/// Class probabilities `n×K`; every row sums to one.
pub fn predict_probs(
    tape: &mut Tape,
    params: &ParamVars,
    x: Var,
    leaky_slope: f64,
) -> Result<Var> {
    let z = logits(tape, params, x, leaky_slope)?;
    tape.row_softmax(z)
}

/// Gradient-free forward pass.
pub fn probs(params: &Params, x: &Tensor, leaky_slope: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.as_constants(&mut tape);
    let xv = tape.constant(x.clone());
    let p = predict_probs(&mut tape, &pv, xv, leaky_slope)?;
    Ok(tape.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;

    fn spec() -> MlpSpec {
        MlpSpec::new(vec![3, 5, 4], 7).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = spec();
        let a = init_params(&s);
        let b = init_params(&s);
        assert_eq!(a, b);
        for l in &a.layers {
            assert!(l.bias.data().iter().all(|&v| v == 0.0));
            let bound = (6.0 / (l.weight.rows() + l.weight.cols()) as f64).sqrt();
            assert!(l.weight.data().iter().all(|v| v.abs() <= bound));
        }
        let c = init_params(&MlpSpec::new(vec![3, 5, 4], 8).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(MlpSpec::new(vec![3, 1], 0).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], 0).is_err());
        assert!(MlpSpec::new(vec![3], 0).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let mut p = init_params(&spec());
        for l in &mut p.layers {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap();
        let pr = probs(&p, &x, 0.1).unwrap();
        for &v in pr.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let p = init_params(&spec());
        let x = Tensor::from_rows(&[vec![10.0, -2.0, 3.0], vec![0.0, 0.5, -7.0]]).unwrap();
        let pr = probs(&p, &x, 0.1).unwrap();
        for row in pr.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn hand_computed_forward() {
        // x = (1, -2); W1 = [[1, -1], [0.5, 2]], b1 = (0.1, 0.2)
        // h = (1*1 + -2*0.5 + 0.1, 1*-1 + -2*2 + 0.2) = (0.1, -4.8)
        // leaky(0.1): (0.1, -0.48)
        // W2 = [[2, 0], [1, 1]], b2 = (0, 0.3)
        // z = (0.2 - 0.48, -0.48 + 0.3) = (-0.28, -0.18)
        let params = Params {
            layers: vec![
                Layer {
                    weight: Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap(),
                    bias: Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap(),
                },
                Layer {
                    weight: Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap(),
                    bias: Tensor::from_rows(&[vec![0.0, 0.3]]).unwrap(),
                },
            ],
        };
        let x = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let pr = probs(&params, &x, 0.1).unwrap();
        let (z0, z1): (f64, f64) = (-0.28, -0.18);
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        assert!((pr.data()[0] - p0).abs() < 1e-12);
        assert!((pr.data()[1] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn input_dimension_checked() {
        let p = init_params(&spec());
        let x = Tensor::zeros(&[2, 4]);
        assert!(matches!(probs(&p, &x, 0.1), Err(Error::Shape { .. })));
    }

    #[test]
    fn input_gradient_checks() {
        let p = init_params(&spec());
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.4, -0.5]]).unwrap();
        let weights = Tensor::from_rows(&[vec![0.3, -1.0, 2.0, 0.5], vec![1.0, 0.2, -0.7, 0.1]])
            .unwrap();
        let err = grad_check(
            |tape, xv| {
                let pv = p.as_constants(tape);
                let pr = predict_probs(tape, &pv, xv, 0.1)?;
                let w = tape.constant(weights.clone());
                let m = tape.mul(pr, w)?;
                tape.sum(m)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(&spec());
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NS3L");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        let q = Params::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        buf[0] = b'X';
        assert!(Params::read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
