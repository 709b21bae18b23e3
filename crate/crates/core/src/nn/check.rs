//! Finite-difference harness for whole blocks: gradients with respect to the
//! input and every parameter of a block in training mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::Block;
use super::params::{Mode, ParamStore, Session};
use crate::error::Result;
use crate::tensor::{GradCheck, Scalar, Tensor};

/// Arithmetic used for the analytic gradient. Numeric differences are always
/// taken in double precision so that the single-precision result measures
/// the error of the analytic gradient rather than of the difference quotient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Scalar objective `sum(w * f(x))` with fixed random projection weights `w`.
pub struct Objective {
    pub weights: Vec<f64>,
}

impl Objective {
    pub fn random(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weights: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }
}

fn split_flat<'a, T: Scalar>(flat: &'a [f64], x_shape: &[usize]) -> Result<(Tensor<T>, &'a [f64])> {
    let n: usize = x_shape.iter().product();
    let x = Tensor::new(x_shape, flat[..n].iter().map(|&v| T::of(v)).collect())?;
    Ok((x, &flat[n..]))
}

fn objective_and_grad<T: Scalar, B: Block>(
    block: &B,
    store: &ParamStore<T>,
    x: Tensor<T>,
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut s = Session::new(store, Mode::Train);
    let xv = s.input(x, true);
    let y = block.forward(&mut s, xv)?;
    let w: Vec<T> = weights.iter().map(|&v| T::of(v)).collect();
    let out = s.tape.dot(y, w)?;
    let value = s.tape.value(out).data()[0].f64();
    let mut grads = s.tape.backward(out)?;
    let mut flat: Vec<f64> = grads
        .take(xv)
        .unwrap_or_default()
        .iter()
        .map(|v| v.f64())
        .collect();
    for g in s.param_grads(&mut grads) {
        flat.extend(g.iter().map(|v| v.f64()));
    }
    Ok((value, flat))
}

/// Output element count of `block` for an input of `shape`.
pub fn output_len<B: Block>(block: &B, shape: [usize; 4]) -> usize {
    let mut cost = Default::default();
    block.trace(shape, &mut cost).iter().product()
}

/// Maximum relative gradient error of `block` over the input and all
/// parameters (or a sampled subset of coordinates, per `check`).
pub fn check_block<B: Block>(
    block: &B,
    store: &ParamStore<f32>,
    x: &Tensor<f32>,
    precision: Precision,
    check: GradCheck,
    objective_seed: u64,
) -> Result<f64> {
    let shape = x.dims4("check_block")?;
    let objective = Objective::random(output_len(block, shape), objective_seed);
    let store64: ParamStore<f64> = store.cast();
    let x64: Tensor<f64> = x.cast();
    let analytic = match precision {
        Precision::Single => objective_and_grad(block, store, x.clone(), &objective.weights)?.1,
        Precision::Double => objective_and_grad(block, &store64, x64.clone(), &objective.weights)?.1,
    };
    let mut x0: Vec<f64> = x64.data().to_vec();
    x0.extend(store64.flatten());
    let mut probe = store64.clone();
    check.compare_piecewise(&x0, &analytic, |flat| {
        let (xp, params) = split_flat::<f64>(flat, x.shape())?;
        probe.unflatten(params);
        objective_value(block, &probe, xp, &objective.weights)
    })
}

/// Objective value and the max-pool regime it was evaluated in.
fn objective_value<B: Block>(
    block: &B,
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    weights: &[f64],
) -> Result<(f64, u64)> {
    let mut s = Session::new(store, Mode::Train).frozen();
    let xv = s.input(x, false);
    let y = block.forward(&mut s, xv)?;
    let out = s.tape.dot(y, weights.to_vec())?;
    Ok((s.tape.value(out).data()[0], s.tape.pool_signature()))
}

/// Smallest max-pool tie gap inside `block` at input `x` (training mode,
/// double precision); `inf` when the block has no pooling.
pub fn pool_margin<B: Block>(block: &B, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<f64> {
    let store64: ParamStore<f64> = store.cast();
    let mut s = Session::new(&store64, Mode::Train).frozen();
    let xv = s.input(x.cast(), false);
    block.forward(&mut s, xv)?;
    Ok(s.tape.pool_margin())
}

/// Draw `U(-1, 1)` inputs from a seeded stream until every max-pool window
/// inside `block` has a clear winner (gap >= `min_margin`), so the block is
/// differentiable at the returned point.
pub fn tie_free_input<B: Block>(
    block: &B,
    store: &ParamStore<f32>,
    shape: &[usize],
    seed: u64,
    min_margin: f64,
) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let x = Tensor::uniform(shape, -1.0, 1.0, &mut rng);
        if pool_margin(block, store, &x)? >= min_margin {
            return Ok(x);
        }
    }
    Err(crate::Error::Contract(format!(
        "no input with pool margin >= {min_margin} found for seed {seed}"
    )))
}
