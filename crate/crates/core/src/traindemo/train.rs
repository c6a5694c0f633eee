use serde::{Deserialize, Serialize};

use super::data::{make_sample, SyntheticSample, TrainConfig};
use crate::autodiff::Tape;
use crate::denoiser::{forward_joint, DenoiserParams, MaskKind, ModelConfig, ReferenceItem, Weights};
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::numkernel::{Rng, Scalar, Tensor};
use crate::sampler::NoiseSchedule;

// Stream tags keep the pool, evaluation set and per-step draws independent.
const POOL_STREAM: u64 = 1 << 40;
const EVAL_STREAM: u64 = 2 << 40;
const STEP_STREAM: u64 = 3 << 40;
const ORDER_STREAM: u64 = 4 << 40;

/// A sample with its draw of timestep, noise and reference dropout.
#[derive(Debug, Clone)]
pub struct Example<S: Scalar> {
    pub x_tokens: Tensor<S>,
    /// The noise that produced `z_t`.
    pub target: Tensor<S>,
    pub t: usize,
    pub items: Vec<ReferenceItem<S>>,
}

/// Timestep in `1..T` and whether this example drops its references.
pub fn draw_plan(rng: &mut Rng, t_max: usize, dropout: f64) -> (usize, bool) {
    let t = rng.range(1, t_max);
    (t, rng.bernoulli(dropout))
}

pub fn prepare_example<S: Scalar>(
    schedule: &NoiseSchedule,
    sample: &SyntheticSample<S>,
    rng: &mut Rng,
    dropout: f64,
) -> Result<Example<S>> {
    let (t, drop) = draw_plan(rng, schedule.t_max(), dropout);
    let eps = Tensor::from_fn(sample.z0.shape(), |_| S::of(rng.normal()));
    let z_t = schedule.add_noise(&sample.z0, &eps, t)?;
    Ok(Example {
        x_tokens: sample.person.input_tokens(&z_t)?,
        target: eps,
        t,
        items: if drop { Vec::new() } else { sample.items.clone() },
    })
}

/// ε-prediction loss of one example.
pub fn example_loss<S: Scalar>(cfg: &ModelConfig, params: &DenoiserParams<S>, ex: &Example<S>) -> Result<f64> {
    let mut g = Eager::new();
    let pass = forward_joint(&mut g, cfg, params, &ex.x_tokens, ex.t, &ex.items, MaskKind::Semi)?;
    Ok(g.mse(&pass.eps, &ex.target)?.data()[0].as_f64())
}

/// Loss and parameter gradients of one example.
pub fn example_loss_and_grads<S: Scalar>(
    cfg: &ModelConfig,
    params: &DenoiserParams<S>,
    ex: &Example<S>,
) -> Result<(f64, DenoiserParams<S>)> {
    let mut tape = Tape::new();
    let w = params.map(|_, t| tape.leaf(t.clone()));
    let pass = forward_joint(&mut tape, cfg, &w, &ex.x_tokens, ex.t, &ex.items, MaskKind::Semi)?;
    let target = tape.constant(ex.target.clone());
    let loss = tape.mse(&pass.eps, &target)?;
    let mut grads = tape.backward(loss)?;
    let loss = tape.value(loss).data()[0].as_f64();
    let g = w.zip_with(params, |_, id, p| Ok(grads.take(*id).unwrap_or_else(|| Tensor::zeros(p.shape()))))?;
    Ok((loss, g))
}

/// Mean loss and mean gradients over a batch, reduced in batch order.
pub fn batch_loss_and_grads<S: Scalar>(
    cfg: &ModelConfig,
    params: &DenoiserParams<S>,
    batch: &[Example<S>],
) -> Result<(f64, DenoiserParams<S>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut total = 0.0;
    let mut acc: Option<DenoiserParams<S>> = None;
    for ex in batch {
        let (l, g) = example_loss_and_grads(cfg, params, ex)?;
        total += l;
        acc = Some(match acc {
            None => g,
            Some(a) => a.zip_with(&g, |_, x, y| crate::numkernel::add(x, y))?,
        });
    }
    let inv = S::of(1.0 / batch.len() as f64);
    let grads = acc.expect("non-empty").map(|_, t| t.map(|v| v * inv));
    Ok((total / batch.len() as f64, grads))
}

/// One draw of a batch from `samples`: noise, timesteps and dropout from
/// `rng`, then the mean loss and gradients.
pub fn training_step<S: Scalar>(
    cfg: &ModelConfig,
    params: &DenoiserParams<S>,
    samples: &[&SyntheticSample<S>],
    rng: &mut Rng,
    dropout: f64,
) -> Result<(f64, DenoiserParams<S>)> {
    let schedule = NoiseSchedule::linear(cfg.t_max)?;
    let batch = samples
        .iter()
        .map(|s| prepare_example(&schedule, s, rng, dropout))
        .collect::<Result<Vec<_>>>()?;
    batch_loss_and_grads(cfg, params, &batch)
}

/// Momentum-free per-parameter RMS scaling with bias-corrected averages.
#[derive(Debug, Clone)]
pub struct RmsProp<S: Scalar> {
    pub sq_avg: DenoiserParams<S>,
    pub updates: u64,
    pub decay: f64,
    pub eps: f64,
}

impl<S: Scalar> RmsProp<S> {
    pub fn new(params: &DenoiserParams<S>, decay: f64, eps: f64) -> Self {
        Self {
            sq_avg: params.map(|_, t| Tensor::zeros(t.shape())),
            updates: 0,
            decay,
            eps,
        }
    }

    pub fn update(&mut self, params: &mut DenoiserParams<S>, grads: &DenoiserParams<S>, lr: f64) {
        self.updates += 1;
        let correction = 1.0 - self.decay.powi(self.updates as i32);
        let (rho, eps) = (S::of(self.decay), S::of(self.eps));
        let lr = S::of(lr);
        let corr = S::of(correction);
        let grads = grads.named();
        for ((p, v), (_, g)) in params.values_mut().into_iter().zip(self.sq_avg.values_mut()).zip(grads) {
            let (pd, vd, gd) = (p.data_mut(), v.data_mut(), g.data());
            for ((pv, vv), &gv) in pd.iter_mut().zip(vd.iter_mut()).zip(gd) {
                *vv = rho * *vv + (S::one() - rho) * gv * gv;
                *pv = *pv - lr * gv / ((*vv / corr).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Training batch loss of the update made at this step.
    pub loss: f64,
    /// Held-out loss of the parameters before this step's update.
    pub eval_loss: Option<f64>,
}

/// Training state that can be checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct Trainer<S: Scalar> {
    pub cfg: ModelConfig,
    pub tc: TrainConfig,
    pub params: DenoiserParams<S>,
    pub opt: RmsProp<S>,
    /// Updates applied so far.
    pub step: usize,
    pub curve: Vec<CurvePoint>,
    pool: Vec<SyntheticSample<S>>,
    eval: Vec<Example<S>>,
}

/// Fixed held-out samples with fixed timesteps and noise, no dropout.
pub fn eval_set<S: Scalar>(cfg: &ModelConfig, tc: &TrainConfig) -> Result<Vec<(SyntheticSample<S>, Example<S>)>> {
    let schedule = NoiseSchedule::linear(cfg.t_max)?;
    (0..tc.eval_samples)
        .map(|i| {
            let mut rng = Rng::with_stream(tc.seed, EVAL_STREAM + i as u64);
            let s = make_sample(&mut rng, cfg, tc)?;
            let ex = prepare_example(&schedule, &s, &mut rng, 0.0)?;
            Ok((s, ex))
        })
        .collect()
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: ModelConfig, tc: TrainConfig, params: DenoiserParams<S>) -> Result<Self> {
        cfg.validate()?;
        tc.validate(&cfg)?;
        params.check_layout(&cfg)?;
        let pool = (0..tc.pool)
            .map(|i| make_sample(&mut Rng::with_stream(tc.seed, POOL_STREAM + i as u64), &cfg, &tc))
            .collect::<Result<Vec<_>>>()?;
        let eval = eval_set(&cfg, &tc)?.into_iter().map(|(_, e)| e).collect();
        let opt = RmsProp::new(&params, tc.rms_decay, tc.rms_eps);
        Ok(Self {
            cfg,
            tc,
            params,
            opt,
            step: 0,
            curve: Vec::new(),
            pool,
            eval,
        })
    }

    pub fn eval_loss(&self) -> Result<f64> {
        let mut acc = 0.0;
        for ex in &self.eval {
            acc += example_loss(&self.cfg, &self.params, ex)?;
        }
        Ok(acc / self.eval.len() as f64)
    }

    /// Pool indices of the batch used at `step`: epochs are seeded
    /// permutations of the pool, consumed in order.
    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.pool.len();
        let mut cache: Option<(usize, Vec<usize>)> = None;
        (0..self.tc.batch)
            .map(|j| {
                let pos = step * self.tc.batch + j;
                let (epoch, off) = (pos / n, pos % n);
                if cache.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut order: Vec<usize> = (0..n).collect();
                    Rng::with_stream(self.tc.seed, ORDER_STREAM + epoch as u64).shuffle(&mut order);
                    cache = Some((epoch, order));
                }
                cache.as_ref().unwrap().1[off]
            })
            .collect()
    }

    /// Applies one update and records the curve point.
    pub fn step_once(&mut self) -> Result<CurvePoint> {
        let step = self.step;
        let eval_loss = if step.is_multiple_of(self.tc.eval_every) {
            Some(self.eval_loss()?)
        } else {
            None
        };
        let idx = self.batch_indices(step);
        let samples: Vec<&SyntheticSample<S>> = idx.iter().map(|&i| &self.pool[i]).collect();
        let mut rng = Rng::with_stream(self.tc.seed, STEP_STREAM + step as u64);
        let (loss, grads) = training_step(&self.cfg, &self.params, &samples, &mut rng, self.tc.ref_dropout)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        self.opt.update(&mut self.params, &grads, self.tc.lr);
        if self.params.named().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        let point = CurvePoint { step, loss, eval_loss };
        self.curve.push(point);
        self.step += 1;
        Ok(point)
    }

    /// Runs until `self.step == until`, then records a final evaluation.
    pub fn run_until(&mut self, until: usize, mut progress: impl FnMut(&CurvePoint)) -> Result<f64> {
        while self.step < until {
            let p = self.step_once()?;
            progress(&p);
        }
        self.eval_loss()
    }

    /// Loss curve as `step,loss,eval_loss` CSV.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss,eval_loss\n");
        for p in &self.curve {
            let e = p.eval_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
            s.push_str(&format!("{},{:.9},{}\n", p.step, p.loss, e));
        }
        s
    }

    /// Writes weights (with the step count) and the optimizer state beside them.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let extra = serde_json::json!({
            "step": self.step,
            "train": self.tc,
            "optimizer_updates": self.opt.updates,
        });
        self.params.save(&self.cfg, extra.clone(), path)?;
        self.opt.sq_avg.save(&self.cfg, extra, &optimizer_path(path))
    }

    /// Restores a checkpoint written by [`Self::save`].
    pub fn resume(path: &std::path::Path, tc: TrainConfig) -> Result<Self> {
        let (cfg, params, extra) = Weights::<Tensor<S>>::load(path)?;
        let (cfg2, sq_avg, _) = Weights::<Tensor<S>>::load(&optimizer_path(path))?;
        if cfg2 != cfg {
            return Err(Error::Format("optimizer state belongs to a different model".into()));
        }
        let step = extra["step"].as_u64().ok_or_else(|| Error::Format("checkpoint lacks a step count".into()))?;
        let mut t = Self::new(cfg, tc, params)?;
        t.step = step as usize;
        t.opt.sq_avg = sq_avg;
        t.opt.updates = extra["optimizer_updates"].as_u64().unwrap_or(step);
        Ok(t)
    }
}

pub fn optimizer_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".opt");
    p.into()
}
