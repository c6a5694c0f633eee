use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tensor};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Linear-β schedule with `ᾱ_0 = 1` and `ᾱ_t = Π_{s ≤ t} (1 − β_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `β_1 … β_T`.
    betas: Vec<f64>,
    /// `ᾱ_0 … ᾱ_T`.
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Config(format!("t_max {t_max} is too small")));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (t_max - 1) as f64)
            .collect();
        let mut alphas_bar = Vec::with_capacity(t_max + 1);
        alphas_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        Ok(Self { betas, alphas_bar })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.t_max() {
            return Err(Error::ScheduleIndex { index: t, t_max: self.t_max() });
        }
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or(Error::ScheduleIndex { index: t, t_max: self.t_max() })
    }

    /// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`.
    pub fn add_noise<S: Scalar>(&self, z0: &Tensor<S>, eps: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
        z0.zip_map(eps, "add_noise", |z, e| a * z + b * e)
    }
}

/// `N` uniformly strided steps descending from `T − 1`.
pub fn inference_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::Config(format!("{steps} steps over a {t_max}-step schedule")));
    }
    let stride = t_max / steps;
    Ok((0..steps).map(|i| t_max - 1 - i * stride).collect())
}

/// Deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step<S: Scalar>(
    z_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    if t_prev >= t && !(t == 0 && t_prev == 0) {
        return Err(Error::ScheduleIndex { index: t_prev, t_max: schedule.t_max() });
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_p = schedule.alpha_bar(t_prev)?;
    let (st, nt) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sp, np) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    z_t.zip_map(eps_hat, "ddim_step", |z, e| {
        let (z, e) = (z.as_f64(), e.as_f64());
        let z0 = (z - nt * e) / st;
        S::of(sp * z0 + np * e)
    })?
    .ensure_finite("ddim_step")
}

/// `eps_u + s·(eps_c − eps_u)`.
pub fn cfg_combine<S: Scalar>(eps_cond: &Tensor<S>, eps_uncond: &Tensor<S>, s: f64) -> Result<Tensor<S>> {
    let s = S::of(s);
    eps_cond.zip_map(eps_uncond, "cfg_combine", |c, u| u + s * (c - u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::linear(100).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        for t in 1..=100 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            assert!(s.beta(t).unwrap() > 0.0 && s.beta(t).unwrap() < 1.0);
        }
        for t in 2..=100 {
            assert!(s.beta(t).unwrap() > s.beta(t - 1).unwrap());
        }
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(100).unwrap() - 0.02).abs() < 1e-17);
        assert!(s.alpha_bar(101).is_err());
        assert!(s.beta(0).is_err());
    }

    #[test]
    fn strided_timesteps() {
        let ts = inference_timesteps(100, 20).unwrap();
        let want: Vec<usize> = (0..20).map(|i| 99 - 5 * i).collect();
        assert_eq!(ts, want);
        assert_eq!(*ts.last().unwrap(), 4);
        assert_eq!(inference_timesteps(100, 1).unwrap(), vec![99]);
        assert!(inference_timesteps(100, 101).is_err());
        assert!(inference_timesteps(100, 0).is_err());
    }

    #[test]
    fn ddim_inverts_true_noise() {
        let s = NoiseSchedule::linear(100).unwrap();
        let mut rng = Rng::new(1);
        let z0 = Tensor::<f64>::from_fn(&[6, 4], |_| rng.uniform(-1.0, 1.0));
        let eps = Tensor::<f64>::from_fn(&[6, 4], |_| rng.normal());
        let zt = s.add_noise(&z0, &eps, 60).unwrap();
        let back = ddim_step(&zt, &eps, 60, 0, &s).unwrap();
        assert!(back.max_abs_diff(&z0).unwrap() < 1e-12);

        // same noise level: consistent eps leaves z unchanged
        let same = ddim_step(&z0, &eps, 0, 0, &s).unwrap();
        assert_eq!(same, z0);
        assert!(ddim_step(&zt, &eps, 10, 20, &s).is_err());
        assert!(ddim_step(&zt, &eps, 200, 0, &s).is_err());
    }

    #[test]
    fn guidance_arithmetic() {
        let c = Tensor::<f64>::full(&[2, 2], 1.0);
        let u = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert!(cfg_combine(&c, &u, 2.0).unwrap().data().iter().all(|&v| v == 2.0));
    }
}
