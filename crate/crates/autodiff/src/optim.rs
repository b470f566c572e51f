use crate::error::{AutodiffError, Result};
use crate::param::ParamSet;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One bias-corrected Adam update of every parameter, then clears the
    /// gradients. Fails before touching anything if a gradient is missing.
    pub fn step<T: Real>(&self, params: &mut ParamSet<T>) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(AutodiffError::MissingGrad(p.name.clone()));
        }
        for p in params.iter_mut() {
            let grad = p.grad.take().expect("checked above");
            let state = &mut p.adam;
            state.step += 1;
            let t = state.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            for (((w, m), v), g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
                .zip(grad.data())
            {
                let g = g.as_f64();
                let mn = self.beta1 * m.as_f64() + (1.0 - self.beta1) * g;
                let vn = self.beta2 * v.as_f64() + (1.0 - self.beta2) * g * g;
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *m = T::from_f64_lossy(mn);
                *v = T::from_f64_lossy(vn);
                *w = T::from_f64_lossy(w.as_f64() - update);
            }
        }
        Ok(())
    }
}
