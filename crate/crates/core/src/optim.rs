//! Adam with bias correction.

use crate::error::{spec_err, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    /// Zeroed state for parameter tensors of the given lengths.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_store(lr: f64, store: &ParamStore<f32>) -> Self {
        let sizes: Vec<usize> = store.params().map(|(_, t)| t.numel()).collect();
        Self::new(lr, &sizes)
    }

    /// One update of every slice in `params` with the matching gradient.
    pub fn update(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(spec_err(format!(
                "adam: state for {} tensors, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(spec_err(format!("adam: tensor {i} length mismatch")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] as f64 / c1;
                let vhat = v[j] as f64 / c2;
                p[j] -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }

    /// Update every trainable tensor of `store` (registration order).
    pub fn update_store(&mut self, store: &mut ParamStore<f32>, grads: &[Vec<f32>]) -> Result<()> {
        let ids: Vec<_> = store.param_ids().collect();
        let mut tensors: Vec<Tensor<f32>> = ids.iter().map(|&id| store.param(id).clone()).collect();
        {
            let mut slices: Vec<&mut [f32]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
            self.update(&mut slices, grads)?;
        }
        for (id, t) in ids.into_iter().zip(tensors) {
            *store.param_mut(id) = t;
        }
        Ok(())
    }

    /// State as named tensors (`prefix` + `step`, `m.<i>`, `v.<i>`).
    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        // the step counter is split into two exactly representable halves
        let step = Tensor::new(&[2], vec![(self.step >> 20) as f32, (self.step & 0xFFFFF) as f32]).unwrap();
        let mut out = vec![(format!("{prefix}step"), step)];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("{prefix}m.{i}"), Tensor::new(&[m.len()], m.clone()).unwrap()));
            out.push((format!("{prefix}v.{i}"), Tensor::new(&[v.len()], v.clone()).unwrap()));
        }
        out
    }

    /// Restore state written by [`Adam::to_tensors`] into `self` (which
    /// fixes the expected tensor count and lengths).
    pub fn load_tensors(&mut self, prefix: &str, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        let find = |name: String| {
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| spec_err(format!("optimizer state is missing {name}")))
        };
        let step = find(format!("{prefix}step"))?;
        if step.numel() != 2 {
            return Err(spec_err("optimizer step counter must hold two values"));
        }
        let mut m = Vec::with_capacity(self.m.len());
        let mut v = Vec::with_capacity(self.v.len());
        for i in 0..self.m.len() {
            let (tm, tv) = (find(format!("{prefix}m.{i}"))?, find(format!("{prefix}v.{i}"))?);
            if tm.numel() != self.m[i].len() || tv.numel() != self.v[i].len() {
                return Err(spec_err(format!("optimizer state {i} has the wrong length")));
            }
            m.push(tm.data().to_vec());
            v.push(tv.data().to_vec());
        }
        self.step = ((step.data()[0] as u64) << 20) | step.data()[1] as u64;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut p = vec![1.5f32, -2.0, 0.25];
        let mut adam = Adam::new(0.001, &[3]);
        for _ in 0..10 {
            adam.update(&mut [&mut p], &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(p, [1.5, -2.0, 0.25]);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_sign() {
        let mut p = vec![0.0f32, 0.0];
        let mut adam = Adam::new(0.001, &[2]);
        let mut last = p.clone();
        for _ in 0..2000 {
            adam.update(&mut [&mut p], &[vec![3.0, -0.02]]).unwrap();
            let step: Vec<f32> = p.iter().zip(&last).map(|(a, b)| a - b).collect();
            last = p.clone();
            if adam.step > 1000 {
                assert!((step[0] + 0.001).abs() < 1e-5, "{step:?}");
                assert!((step[1] - 0.001).abs() < 1e-5, "{step:?}");
            }
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut x = vec![1.0f32; 4];
        let mut adam = Adam::new(0.01, &[4]);
        let mut converged_at = None;
        for i in 0..500 {
            let g: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
            adam.update(&mut [&mut x], &[g]).unwrap();
            let f: f32 = x.iter().map(|v| v * v).sum();
            if f < 1e-3 && converged_at.is_none() {
                converged_at = Some(i);
            }
        }
        assert!(converged_at.is_some());
    }

    #[test]
    fn state_round_trip() {
        let mut p = vec![1.0f32, 2.0];
        let mut adam = Adam::new(0.001, &[2]);
        adam.update(&mut [&mut p], &[vec![0.5, -0.5]]).unwrap();
        let saved = adam.to_tensors("train.adam.");
        let mut fresh = Adam::new(0.001, &[2]);
        fresh.load_tensors("train.adam.", &saved).unwrap();
        assert_eq!(fresh, adam);
        let mut wrong = Adam::new(0.001, &[3]);
        assert!(wrong.load_tensors("train.adam.", &saved).is_err());
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut p = vec![0.0f32; 2];
        let mut adam = Adam::new(0.001, &[2]);
        assert!(adam.update(&mut [&mut p], &[vec![0.0; 3]]).is_err());
        assert_eq!(adam.step, 0);
    }
}
