//! Parameterized layers built on the tape primitives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::scalar::sc;
use crate::nn::{Parameter, Scalar, Tape, Tensor, Var};
use crate::Result;

fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| sc(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape, data).expect("xavier shape")
}

pub struct Linear<T> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Parameter::new(format!("{name}.w"), xavier(rng, &[d_in, d_out], d_in, d_out)),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

pub struct Conv1d<T> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(name: &str, kernel: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Parameter::new(
                format!("{name}.w"),
                xavier(rng, &[kernel, c_in, c_out], kernel * c_in, kernel * c_out),
            ),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.conv1d(x, w, b)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

pub struct LayerNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

pub struct Embedding<T> {
    pub table: Parameter<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(name: &str, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let data: Vec<T> = (0..rows * dim).map(|_| sc(rng.gen_range(-0.1..0.1))).collect();
        Self { table: Parameter::new(format!("{name}.table"), Tensor::new(&[rows, dim], data).unwrap()) }
    }

    pub fn forward(&self, tape: &Tape<T>, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let t = tape.param(&self.table);
        tape.embedding(t, ids, batch, len)
    }

    pub fn rows(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.table]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.table]
    }
}

/// Feed-forward transformer block: multi-head self-attention plus a 1-D
/// convolutional feed-forward stack, both with residuals and post layer norm.
/// Valid-position masks are re-applied after each sublayer.
pub struct FftBlock<T> {
    wq: Linear<T>,
    wk: Linear<T>,
    wv: Linear<T>,
    wo: Linear<T>,
    ln_attn: LayerNorm<T>,
    ln_ff: LayerNorm<T>,
    conv1: Conv1d<T>,
    conv2: Conv1d<T>,
    n_heads: usize,
    dropout: f64,
}

impl<T: Scalar> FftBlock<T> {
    pub fn new(
        name: &str,
        hidden: usize,
        ff_hidden: usize,
        ff_kernel: usize,
        n_heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            wq: Linear::new(&format!("{name}.attn.q"), hidden, hidden, rng),
            wk: Linear::new(&format!("{name}.attn.k"), hidden, hidden, rng),
            wv: Linear::new(&format!("{name}.attn.v"), hidden, hidden, rng),
            wo: Linear::new(&format!("{name}.attn.out"), hidden, hidden, rng),
            ln_attn: LayerNorm::new(&format!("{name}.ln_attn"), hidden),
            ln_ff: LayerNorm::new(&format!("{name}.ln_ff"), hidden),
            conv1: Conv1d::new(&format!("{name}.ff1"), ff_kernel, hidden, ff_hidden, rng),
            conv2: Conv1d::new(&format!("{name}.ff2"), 1, ff_hidden, hidden, rng),
            n_heads,
            dropout,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var, valid: &[bool], rng: &mut ChaCha8Rng) -> Result<Var> {
        let q = self.wq.forward(tape, x)?;
        let k = self.wk.forward(tape, x)?;
        let v = self.wv.forward(tape, x)?;
        let attn = tape.scaled_dot_attention(q, k, v, valid, self.n_heads)?;
        let attn = self.wo.forward(tape, attn)?;
        let attn = tape.dropout(attn, self.dropout, rng)?;
        let x = tape.add(x, attn)?;
        let x = self.ln_attn.forward(tape, x)?;
        let x = tape.mask_positions(x, valid)?;

        let f = self.conv1.forward(tape, x)?;
        let f = tape.relu(f)?;
        let f = self.conv2.forward(tape, f)?;
        let f = tape.dropout(f, self.dropout, rng)?;
        let x = tape.add(x, f)?;
        let x = self.ln_ff.forward(tape, x)?;
        tape.mask_positions(x, valid)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = Vec::new();
        p.extend(self.wq.params());
        p.extend(self.wk.params());
        p.extend(self.wv.params());
        p.extend(self.wo.params());
        p.extend(self.ln_attn.params());
        p.extend(self.ln_ff.params());
        p.extend(self.conv1.params());
        p.extend(self.conv2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = Vec::new();
        p.extend(self.wq.params_mut());
        p.extend(self.wk.params_mut());
        p.extend(self.wv.params_mut());
        p.extend(self.wo.params_mut());
        p.extend(self.ln_attn.params_mut());
        p.extend(self.ln_ff.params_mut());
        p.extend(self.conv1.params_mut());
        p.extend(self.conv2.params_mut());
        p
    }
}

/// Two same-padded convolutions with ReLU, layer norm and dropout, then a
/// linear projection: the shared shape of the duration, pitch, energy and
/// severity predictors.
pub struct VariancePredictor<T> {
    conv1: Conv1d<T>,
    ln1: LayerNorm<T>,
    conv2: Conv1d<T>,
    ln2: LayerNorm<T>,
    pub out: Linear<T>,
    dropout: f64,
}

impl<T: Scalar> VariancePredictor<T> {
    pub fn new(
        name: &str,
        hidden: usize,
        kernel: usize,
        d_out: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv1: Conv1d::new(&format!("{name}.conv1"), kernel, hidden, hidden, rng),
            ln1: LayerNorm::new(&format!("{name}.ln1"), hidden),
            conv2: Conv1d::new(&format!("{name}.conv2"), kernel, hidden, hidden, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), hidden),
            out: Linear::new(&format!("{name}.out"), hidden, d_out, rng),
            dropout,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: Var, valid: &[bool], rng: &mut ChaCha8Rng) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.ln1.forward(tape, h)?;
        let h = tape.dropout(h, self.dropout, rng)?;
        let h = tape.mask_positions(h, valid)?;
        let h = self.conv2.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = self.ln2.forward(tape, h)?;
        let h = tape.dropout(h, self.dropout, rng)?;
        let h = tape.mask_positions(h, valid)?;
        self.out.forward(tape, h)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = Vec::new();
        p.extend(self.conv1.params());
        p.extend(self.ln1.params());
        p.extend(self.conv2.params());
        p.extend(self.ln2.params());
        p.extend(self.out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = Vec::new();
        p.extend(self.conv1.params_mut());
        p.extend(self.ln1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.out.params_mut());
        p
    }
}

/// Classic sinusoidal positional encoding, `(len, dim)`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = sc(rate.sin());
            if 2 * i + 1 < dim {
                data[pos * dim + 2 * i + 1] = sc(rate.cos());
            }
        }
    }
    Tensor::new(&[len, dim], data).expect("positional encoding shape")
}
