use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Scalar, Tape, Tensor, Var};

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    scaled_relative_error(analytic, numeric, 0.0)
}

/// Like [`relative_error`] with the denominator floored at `min_denominator`.
/// Components far below the gradient's own scale are then compared in
/// absolute terms against that scale: their relative error measures only
/// rounding in the larger terms they are accumulated from.
pub fn scaled_relative_error(analytic: &[f64], numeric: &[f64], min_denominator: f64) -> f64 {
    let min_den = min_denominator.max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(min_den))
        .fold(0.0, f64::max)
}

/// Central-difference check of a scalar function recorded on a tape.
///
/// `f` receives a fresh tape and the leaf holding `x`, and returns the scalar
/// output. Every element of `x` is perturbed by `±eps` in the element type `T`.
pub fn finite_diff_check<T: Scalar>(
    f: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(g) => g.iter().map(|v| v.f64()).collect(),
        None => vec![0.0; x.numel()],
    };
    let eval = |t: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t, false);
        let o = f(&mut tape, v)?;
        Ok(tape.value(o).data()[0].f64())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += T::of(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] -= T::of(eps);
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Central-difference stencil used by [`GradCheck`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    ThreePoint,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, error `O(h^4)`.
    FivePoint,
}

/// Finite-difference comparison on a flat parameter vector, optionally
/// restricted to a random subset of coordinates.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    pub max_coords: Option<usize>,
    pub seed: u64,
    pub stencil: Stencil,
    /// Denominator floor as a fraction of the largest analytic component
    /// (over all coordinates, checked or not).
    pub floor: f64,
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            max_coords: None,
            seed: 0,
            stencil: Stencil::ThreePoint,
            floor: 0.0,
        }
    }

    /// See [`scaled_relative_error`].
    pub fn scale_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn five_point(mut self) -> Self {
        self.stencil = Stencil::FivePoint;
        self
    }

    pub fn sampled(mut self, n: usize, seed: u64) -> Self {
        self.max_coords = Some(n);
        self.seed = seed;
        self
    }

    pub fn coords(&self, len: usize) -> Vec<usize> {
        match self.max_coords {
            Some(n) if n < len => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut idx = sample(&mut rng, len, n).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        }
    }

    /// Compare `analytic` (full gradient at `x0`) against central differences
    /// of `f`, returning the maximum relative error over the checked coordinates.
    pub fn compare(
        &self,
        x0: &[f64],
        analytic: &[f64],
        mut f: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<f64> {
        self.compare_piecewise(x0, analytic, |x| Ok((f(x)?, 0)))
    }

    /// Like [`GradCheck::compare`] for piecewise-smooth `f`, which also
    /// returns an identifier of the smooth piece it was evaluated in (for
    /// example the argmax pattern of every max pool). When a stencil point
    /// falls in a different piece than `x0` the step is divided by ten, up to
    /// four times, so differences never straddle a kink.
    pub fn compare_piecewise(
        &self,
        x0: &[f64],
        analytic: &[f64],
        mut f: impl FnMut(&[f64]) -> Result<(f64, u64)>,
    ) -> Result<f64> {
        let (_, base) = f(x0)?;
        let coords = self.coords(x0.len());
        let mut x = x0.to_vec();
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        let offsets: &[f64] = match self.stencil {
            Stencil::ThreePoint => &[1.0, -1.0],
            Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
        };
        for &i in &coords {
            let mut h = self.eps;
            let mut vals = Vec::with_capacity(offsets.len());
            for attempt in 0..5 {
                vals.clear();
                let mut same_piece = true;
                for &o in offsets {
                    x[i] = x0[i] + o * h;
                    let (v, piece) = f(&x)?;
                    same_piece &= piece == base;
                    vals.push(v);
                }
                x[i] = x0[i];
                if same_piece || attempt == 4 {
                    break;
                }
                h /= 10.0;
            }
            let numeric = match self.stencil {
                Stencil::ThreePoint => (vals[0] - vals[1]) / (2.0 * h),
                Stencil::FivePoint => (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * h),
            };
            a.push(analytic[i]);
            n.push(numeric);
        }
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(scaled_relative_error(&a, &n, self.floor * scale))
    }
}
