//! Layer building blocks on top of the autograd tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Matrix, PoolGeometry, Tape, Var};

/// Whether a forward pass is allowed to sample dropout masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Inverted dropout with drop probability `rate`; identity in eval mode.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Var {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let (r, c) = tape.shape(x);
                let mask = Matrix::from_shape_fn((r, c), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }
}

/// A set of trainable matrices with a fixed ordering.
pub trait Module {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    /// Registers every parameter as a trainable leaf, in `params()` order.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Fully-connected layer, `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: uniform(inputs, outputs, bound, rng),
            bias: uniform(1, outputs, bound, rng),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros((inputs, outputs)),
            bias: Matrix::zeros((1, outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let h = tape.matmul(x, vars[0]);
        tape.add_bias(h, vars[1])
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Stack of linear layers. The hidden activation and dropout follow every
/// layer except the last; `output` follows the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an mlp needs at least one layer");
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            hidden,
            output,
            dropout,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn last_layer_mut(&mut self) -> &mut Linear {
        let n = self.layers.len();
        &mut self.layers[n - 1]
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: &mut Mode) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, chunk) in vars.chunks(2).enumerate() {
            h = Linear::apply(tape, chunk, h);
            if l < last {
                h = self.hidden.apply(tape, h);
                h = mode.dropout(tape, h, self.dropout);
            } else {
                h = self.output.apply(tape, h);
            }
        }
        h
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Two valid 5x5 convolutions with 2x2 max pooling followed by two
/// fully-connected layers, for small square RGB inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallConv {
    pub channels: usize,
    pub size: usize,
    pub conv1_weight: Matrix,
    pub conv1_bias: Matrix,
    pub conv2_weight: Matrix,
    pub conv2_bias: Matrix,
    pub fc3: Linear,
    pub fc4: Linear,
    pub dropout: f64,
}

const CONV1_OUT: usize = 32;
const CONV2_OUT: usize = 64;
const KERNEL: usize = 5;
const FC_HIDDEN: usize = 100;

impl SmallConv {
    /// Spatial size after the second pool, or `None` if `size` does not
    /// survive the conv/pool chain evenly.
    pub fn final_spatial(size: usize) -> Option<usize> {
        let a = size.checked_sub(KERNEL - 1)?;
        if a % 2 != 0 {
            return None;
        }
        let b = (a / 2).checked_sub(KERNEL - 1)?;
        if b % 2 != 0 || b == 0 {
            return None;
        }
        Some(b / 2)
    }

    pub fn new(
        channels: usize,
        size: usize,
        feature_dim: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Option<Self> {
        let s = Self::final_spatial(size)?;
        let p1 = channels * KERNEL * KERNEL;
        let p2 = CONV1_OUT * KERNEL * KERNEL;
        let b1 = 1.0 / (p1 as f64).sqrt();
        let b2 = 1.0 / (p2 as f64).sqrt();
        Some(Self {
            channels,
            size,
            conv1_weight: uniform(CONV1_OUT, p1, b1, rng),
            conv1_bias: uniform(1, CONV1_OUT, b1, rng),
            conv2_weight: uniform(CONV2_OUT, p2, b2, rng),
            conv2_bias: uniform(1, CONV2_OUT, b2, rng),
            fc3: Linear::new(CONV2_OUT * s * s, FC_HIDDEN, rng),
            fc4: Linear::new(FC_HIDDEN, feature_dim, rng),
            dropout,
        })
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: &mut Mode) -> Var {
        let g1 = ConvGeometry {
            in_channels: self.channels,
            out_channels: CONV1_OUT,
            height: self.size,
            width: self.size,
            kernel: KERNEL,
        };
        let h = tape.conv2d(x, vars[0], vars[1], g1);
        let h = tape.relu(h);
        let h = mode.dropout(tape, h, self.dropout);
        let p1 = PoolGeometry {
            channels: CONV1_OUT,
            height: g1.out_height(),
            width: g1.out_width(),
            window: 2,
        };
        let h = tape.max_pool2d(h, p1);
        let g2 = ConvGeometry {
            in_channels: CONV1_OUT,
            out_channels: CONV2_OUT,
            height: p1.out_height(),
            width: p1.out_width(),
            kernel: KERNEL,
        };
        let h = tape.conv2d(h, vars[2], vars[3], g2);
        let h = tape.relu(h);
        let h = mode.dropout(tape, h, self.dropout);
        let p2 = PoolGeometry {
            channels: CONV2_OUT,
            height: g2.out_height(),
            width: g2.out_width(),
            window: 2,
        };
        let h = tape.max_pool2d(h, p2);
        let h = Linear::apply(tape, &vars[4..6], h);
        let h = tape.relu(h);
        let h = mode.dropout(tape, h, self.dropout);
        let h = Linear::apply(tape, &vars[6..8], h);
        tape.relu(h)
    }
}

impl Module for SmallConv {
    fn params(&self) -> Vec<&Matrix> {
        let mut p = vec![
            &self.conv1_weight,
            &self.conv1_bias,
            &self.conv2_weight,
            &self.conv2_bias,
        ];
        p.extend(self.fc3.params());
        p.extend(self.fc4.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = vec![
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
        ];
        p.extend(self.fc3.params_mut());
        p.extend(self.fc4.params_mut());
        p
    }
}
