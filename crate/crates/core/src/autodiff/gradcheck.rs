//! Central finite-difference oracle for gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Rng, Scalar, Tensor};

/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_ad: f64,
    pub max_abs_fd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradReport {
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords_checked).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FiniteDiff {
    pub step: f64,
    /// Coordinates sampled per tensor; smaller tensors are swept fully.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 64,
            seed: 0,
        }
    }
}

impl FiniteDiff {
    /// Compares `analytic` against central differences of `f` around `params`.
    pub fn check<S: Scalar>(
        &self,
        mut f: impl FnMut(&[Tensor<S>]) -> Result<f64>,
        names: &[String],
        params: &[Tensor<S>],
        analytic: &[Tensor<S>],
    ) -> Result<GradReport> {
        if params.len() != analytic.len() || params.len() != names.len() {
            return Err(Error::shape("finite_diff_check", "params/gradients/names differ in length"));
        }
        let mut rng = Rng::new(self.seed);
        let mut work: Vec<Tensor<S>> = params.to_vec();
        let mut report = GradReport {
            step: self.step,
            params: Vec::with_capacity(params.len()),
        };
        for (pi, (name, grad)) in names.iter().zip(analytic).enumerate() {
            if grad.shape() != params[pi].shape() {
                return Err(Error::shape("finite_diff_check", format!("gradient of {name}")));
            }
            let n = grad.numel();
            let mut coords: Vec<usize> = (0..n).collect();
            if n > self.coords_per_tensor {
                rng.shuffle(&mut coords);
                coords.truncate(self.coords_per_tensor);
                coords.sort_unstable();
            }
            let mut check = ParamCheck {
                name: name.clone(),
                coords_checked: coords.len(),
                max_rel_err: 0.0,
                max_abs_ad: 0.0,
                max_abs_fd: 0.0,
            };
            for &c in &coords {
                let orig = work[pi].data()[c];
                let h = S::of(self.step);
                work[pi].data_mut()[c] = orig + h;
                let plus = f(&work)?;
                work[pi].data_mut()[c] = orig - h;
                let minus = f(&work)?;
                work[pi].data_mut()[c] = orig;
                let fd = (plus - minus) / (2.0 * self.step);
                let ad = grad.data()[c].as_f64();
                check.max_rel_err = check.max_rel_err.max(relative_error(ad, fd));
                check.max_abs_ad = check.max_abs_ad.max(ad.abs());
                check.max_abs_fd = check.max_abs_fd.max(fd.abs());
            }
            report.params.push(check);
        }
        Ok(report)
    }
}
