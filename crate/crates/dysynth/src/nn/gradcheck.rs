//! Finite-difference verification of analytic gradients.

use super::scalar::{sc, Scalar};
use super::tape::Tape;
use super::tensor::Parameter;
use crate::{Error, Result};

/// Anything whose scalar loss can be recomputed from its parameters.
///
/// `forward_loss` must bind every parameter through [`Tape::param`] and be a
/// deterministic function of the parameter values (fix all RNG seeds inside).
pub trait Differentiable<T: Scalar> {
    fn forward_loss(&self, tape: &Tape<T>) -> Result<super::tape::Var>;
    fn parameters(&self) -> Vec<&Parameter<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;
}

/// Compare reverse-mode gradients against central finite differences.
///
/// Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Run in 64-bit mode with dropout disabled; `eps` defaults to 1e-4.
pub fn grad_check<T: Scalar, M: Differentiable<T>>(module: &mut M, eps: T) -> Result<T> {
    grad_check_mode(module, eps, false)
}

/// [`grad_check`] with dropout active. The module's dropout calls must seed
/// their own RNG so every evaluation sees the same mask.
pub fn grad_check_mode<T: Scalar, M: Differentiable<T>>(
    module: &mut M,
    eps: T,
    training: bool,
) -> Result<T> {
    // Analytic pass.
    let tape = Tape::with_mode(true, training);
    let loss = module.forward_loss(&tape)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { context: "grad_check loss".into() });
    }
    let grads = tape.backward(loss)?;
    let analytic = tape.param_gradients(&grads);

    let floor = sc::<T>(1e-8);
    let two_eps = eps + eps;
    let mut max_rel = T::zero();
    let names: Vec<String> = module.parameters().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let n = {
            let params = module.parameters();
            params.iter().find(|p| p.name == name).map(|p| p.value.numel()).unwrap()
        };
        let a = analytic
            .get(&name)
            .ok_or_else(|| Error::Invalid(format!("parameter {name} received no gradient")))?
            .clone();
        for j in 0..n {
            let orig = {
                let mut params = module.parameters_mut();
                let p = params.iter_mut().find(|p| p.name == name).unwrap();
                let v = p.value.data()[j];
                p.value.data_mut()[j] = v + eps;
                v
            };
            let plus = eval_loss(module, training)?;
            {
                let mut params = module.parameters_mut();
                let p = params.iter_mut().find(|p| p.name == name).unwrap();
                p.value.data_mut()[j] = orig - eps;
            }
            let minus = eval_loss(module, training)?;
            {
                let mut params = module.parameters_mut();
                let p = params.iter_mut().find(|p| p.name == name).unwrap();
                p.value.data_mut()[j] = orig;
            }
            let numeric = (plus - minus) / two_eps;
            let ana = a.data()[j];
            let diff = (ana - numeric).abs();
            // Parameters with structurally zero gradient (e.g. embedding rows
            // the input never touches) leave only forward-evaluation roundoff
            // in the numeric estimate; differences at that scale are agreement,
            // not error. A real gradient bug shows up at gradient magnitude,
            // orders above this guard.
            if diff <= sc::<T>(1e-9) {
                continue;
            }
            let denom = ana.abs().max(numeric.abs()).max(floor);
            let rel = diff / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn eval_loss<T: Scalar, M: Differentiable<T>>(module: &M, training: bool) -> Result<T> {
    let tape = Tape::with_mode(false, training);
    let loss = module.forward_loss(&tape)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite { context: "grad_check loss".into() });
    }
    Ok(v)
}

// ----------------------------------------------------------------------
// per-primitive checks
// ----------------------------------------------------------------------

use super::tape::Var;
use super::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

type ForwardFn = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

/// One primitive wired to a scalar loss head for finite-difference testing.
pub struct PrimitiveCheck {
    pub name: &'static str,
    params: Vec<Parameter<f64>>,
    forward: ForwardFn,
    training: bool,
}

impl Differentiable<f64> for PrimitiveCheck {
    fn forward_loss(&self, tape: &Tape<f64>) -> Result<Var> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p)).collect();
        (self.forward)(tape, &vars)
    }
    fn parameters(&self) -> Vec<&Parameter<f64>> {
        self.params.iter().collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        self.params.iter_mut().collect()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    // Keep magnitudes away from ReLU kinks and softmax saturation.
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn mse_head(tape: &Tape<f64>, y: Var, target: Tensor<f64>) -> Result<Var> {
    let shape = tape.shape(y);
    let (rows, cols) = match shape.len() {
        1 => (1usize, shape[0]),
        2 => (shape[0], shape[1]),
        3 => (shape[0] * shape[1], shape[2]),
        _ => (1, 1),
    };
    let y3 = tape.reshape(y, &[1, rows, cols])?;
    let t3 = target.reshaped(&[1, rows, cols])?;
    tape.masked_mse(y3, &t3, &vec![true; rows])
}

/// Every tape primitive, each wrapped in a tiny module with random inputs.
pub fn primitive_checks(seed: u64) -> Vec<PrimitiveCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let a = Parameter::new("a", rand_tensor(&mut rng, &[3, 4]));
    let b = Parameter::new("b", rand_tensor(&mut rng, &[4, 2]));
    let target = rand_tensor(&mut rng, &[3, 2]);
    checks.push(PrimitiveCheck {
        name: "matmul",
        params: vec![a, b],
        forward: Box::new(move |tape, vars| {
            let y = tape.matmul(vars[0], vars[1])?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let a = Parameter::new("a", rand_tensor(&mut rng, &[2, 3, 4]));
    let b = Parameter::new("b", rand_tensor(&mut rng, &[4, 2]));
    let target = rand_tensor(&mut rng, &[2, 3, 2]);
    checks.push(PrimitiveCheck {
        name: "matmul_batched",
        params: vec![a, b],
        forward: Box::new(move |tape, vars| {
            let y = tape.matmul(vars[0], vars[1])?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let a = Parameter::new("a", rand_tensor(&mut rng, &[2, 3, 4]));
    let b = Parameter::new("b", rand_tensor(&mut rng, &[2, 3, 4]));
    let target = rand_tensor(&mut rng, &[2, 3, 4]);
    checks.push(PrimitiveCheck {
        name: "add",
        params: vec![a, b],
        forward: Box::new(move |tape, vars| {
            let y = tape.add(vars[0], vars[1])?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let a = Parameter::new("a", rand_tensor(&mut rng, &[2, 3, 4]));
    let b = Parameter::new("b", rand_tensor(&mut rng, &[4]));
    let target = rand_tensor(&mut rng, &[2, 3, 4]);
    checks.push(PrimitiveCheck {
        name: "add_bias",
        params: vec![a, b],
        forward: Box::new(move |tape, vars| {
            let y = tape.add_bias(vars[0], vars[1])?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let a = Parameter::new("a", rand_tensor(&mut rng, &[3, 5]));
    let target = rand_tensor(&mut rng, &[3, 5]);
    checks.push(PrimitiveCheck {
        name: "relu",
        params: vec![a],
        forward: Box::new(move |tape, vars| {
            let y = tape.relu(vars[0])?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let a = Parameter::new("a", rand_tensor(&mut rng, &[4, 6]));
    let target = rand_tensor(&mut rng, &[4, 6]);
    checks.push(PrimitiveCheck {
        name: "softmax",
        params: vec![a],
        forward: Box::new(move |tape, vars| {
            let y = tape.softmax_rows(vars[0])?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let a = Parameter::new("a", rand_tensor(&mut rng, &[2, 3, 6]));
    let gamma = Parameter::new("gamma", rand_tensor(&mut rng, &[6]));
    let beta = Parameter::new("beta", rand_tensor(&mut rng, &[6]));
    let target = rand_tensor(&mut rng, &[2, 3, 6]);
    checks.push(PrimitiveCheck {
        name: "layer_norm",
        params: vec![a, gamma, beta],
        forward: Box::new(move |tape, vars| {
            let y = tape.layer_norm(vars[0], vars[1], vars[2])?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let x = Parameter::new("x", rand_tensor(&mut rng, &[2, 6, 3]));
    let w = Parameter::new("w", rand_tensor(&mut rng, &[3, 3, 4]));
    let b = Parameter::new("b", rand_tensor(&mut rng, &[4]));
    let target = rand_tensor(&mut rng, &[2, 6, 4]);
    checks.push(PrimitiveCheck {
        name: "conv1d",
        params: vec![x, w, b],
        forward: Box::new(move |tape, vars| {
            let y = tape.conv1d(vars[0], vars[1], vars[2])?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let table = Parameter::new("table", rand_tensor(&mut rng, &[5, 4]));
    let target = rand_tensor(&mut rng, &[2, 3, 4]);
    checks.push(PrimitiveCheck {
        name: "embedding_lookup",
        params: vec![table],
        forward: Box::new(move |tape, vars| {
            let y = tape.embedding(vars[0], &[0, 2, 4, 1, 2, 2], 2, 3)?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let x = Parameter::new("x", rand_tensor(&mut rng, &[2, 4, 5]));
    let target = rand_tensor(&mut rng, &[2, 4, 5]);
    checks.push(PrimitiveCheck {
        name: "dropout",
        params: vec![x],
        forward: Box::new(move |tape, vars| {
            // Frozen seed keeps the mask identical across the analytic pass
            // and every finite-difference evaluation.
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let y = tape.dropout(vars[0], 0.4, &mut rng)?;
            mse_head(tape, y, target.clone())
        }),
        training: true,
    });

    let q = Parameter::new("q", rand_tensor(&mut rng, &[2, 4, 6]));
    let k = Parameter::new("k", rand_tensor(&mut rng, &[2, 4, 6]));
    let v = Parameter::new("v", rand_tensor(&mut rng, &[2, 4, 6]));
    let target = rand_tensor(&mut rng, &[2, 4, 6]);
    checks.push(PrimitiveCheck {
        name: "scaled_dot_attention",
        params: vec![q, k, v],
        forward: Box::new(move |tape, vars| {
            let mask = [true, true, true, true, true, true, true, false];
            let y = tape.scaled_dot_attention(vars[0], vars[1], vars[2], &mask, 2)?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let x = Parameter::new("x", rand_tensor(&mut rng, &[2, 3, 4]));
    let target = rand_tensor(&mut rng, &[2, 3, 4]);
    checks.push(PrimitiveCheck {
        name: "mask_positions",
        params: vec![x],
        forward: Box::new(move |tape, vars| {
            let y = tape.mask_positions(vars[0], &[true, true, false, true, false, true])?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let x = Parameter::new("x", rand_tensor(&mut rng, &[2, 3, 4]));
    let target = rand_tensor(&mut rng, &[2, 5, 4]);
    checks.push(PrimitiveCheck {
        name: "length_regulate",
        params: vec![x],
        forward: Box::new(move |tape, vars| {
            let y = tape.length_regulate(vars[0], &[vec![2, 0, 3], vec![1, 3, 0]])?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let x = Parameter::new("x", rand_tensor(&mut rng, &[2, 4, 3]));
    let target = rand_tensor(&mut rng, &[2, 3]);
    checks.push(PrimitiveCheck {
        name: "masked_mean_pool",
        params: vec![x],
        forward: Box::new(move |tape, vars| {
            let mask = [true, true, false, false, true, true, true, true];
            let y = tape.masked_mean_pool(vars[0], &mask)?;
            mse_head(tape, y, target.clone())
        }),
        training: false,
    });

    let logits = Parameter::new("logits", rand_tensor(&mut rng, &[3, 4]));
    checks.push(PrimitiveCheck {
        name: "cross_entropy",
        params: vec![logits],
        forward: Box::new(move |tape, vars| tape.cross_entropy(vars[0], &[1, 3, 0])),
        training: false,
    });

    checks
}

/// Run every primitive through [`grad_check`]; returns `(name, max rel err)`.
pub fn check_primitives(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for mut check in primitive_checks(seed) {
        let training = check.training;
        let err = grad_check_mode(&mut check, eps, training)?;
        out.push((check.name, err));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_finite_difference_check() {
        for (name, err) in check_primitives(1234, 1e-4).unwrap() {
            assert!(err < 1e-5, "{name}: max relative error {err:.3e} >= 1e-5");
        }
    }
}

