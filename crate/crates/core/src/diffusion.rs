//! Toy conditional denoising diffusion, one decoder per non-text modality.
//!
//! Latents are small vectors: 2-D for image, 1-D for audio, 4-D for video.
//! The backbone is an epsilon-prediction MLP whose hidden layers are
//! modulated (scale and shift) by the mean-pooled condition sequence.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::budget::Role;
use crate::config::{DiffusionConfig, Modality};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Ctx, ParamStore};
use crate::train::optim::Adam;

/// Width of the toy latent for `modality`.
pub fn latent_dim(modality: Modality) -> usize {
    match modality {
        Modality::Text => 0,
        Modality::Image => 2,
        Modality::Audio => 1,
        Modality::Video => 4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `start` to `end` over `steps` (a single step uses `start`).
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("diffusion needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidParameter("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar` at 1-based step `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidInput(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        q_sample_at(x0, self.alpha_bar(t)?, eps)
    }
}

/// Forward noising at an explicit `alpha_bar`.
pub fn q_sample_at(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    Ok(((x0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

/// Per-row forward noising for a batch with one step per row.
fn q_sample_rows(x0: &Tensor, alpha_bars: &[f64], eps: &Tensor) -> Result<Tensor> {
    let dev = x0.device();
    let n = alpha_bars.len();
    let a: Vec<f64> = alpha_bars.iter().map(|v| v.sqrt()).collect();
    let s: Vec<f64> = alpha_bars.iter().map(|v| (1.0 - v).sqrt()).collect();
    let a = Tensor::from_vec(a, (n, 1), dev)?.to_dtype(x0.dtype())?;
    let s = Tensor::from_vec(s, (n, 1), dev)?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Sinusoidal embedding of 1-based steps, `B x dim`.
pub fn time_embedding(steps: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            data.push(if i < half { arg.sin() } else { arg.cos() });
        }
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), device)?.to_dtype(dtype)?)
}

/// Anything that predicts the injected noise.
pub trait EpsPredictor {
    /// `x_t`: `B x D`, `steps`: `B` 1-based steps, `cond`: `B x Q x d_c`.
    fn predict(&self, ctx: &Ctx, x_t: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub modality: Modality,
    pub latent_dim: usize,
    pub time_dim: usize,
    pub input: Linear,
    pub time: Linear,
    pub hidden: Vec<Linear>,
    pub film: Vec<Linear>,
    pub out: Linear,
    pub schedule: NoiseSchedule,
    /// Sampling is refused until the backbone has been pretrained.
    pub trained: bool,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, modality: Modality, cfg: &DiffusionConfig, cond_dim: usize) -> Result<Self> {
        let dim = latent_dim(modality);
        if dim == 0 {
            return Err(Error::WrongModality(modality));
        }
        let p = format!("diffusion.{modality}");
        let h = cfg.hidden;
        let f = Role::Frozen;
        let mut hidden = Vec::with_capacity(cfg.layers);
        let mut film = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            hidden.push(Linear::new(store, &format!("{p}.layer{i}"), h, h, f)?);
            film.push(Linear::with_std(store, &format!("{p}.film{i}"), cond_dim, 2 * h, 0.01, f)?);
        }
        Ok(Self {
            modality,
            latent_dim: dim,
            time_dim: cfg.time_dim,
            input: Linear::new(store, &format!("{p}.input"), dim, h, f)?,
            time: Linear::new(store, &format!("{p}.time"), cfg.time_dim, h, f)?,
            hidden,
            film,
            out: Linear::with_std(store, &format!("{p}.out"), h, dim, 0.01, f)?,
            schedule: NoiseSchedule::from_config(cfg)?,
            trained: false,
        })
    }

    pub fn param_prefix(&self) -> String {
        format!("diffusion.{}.", self.modality)
    }

    /// Noise-prediction MSE at explicit steps and noise; differentiable in
    /// `cond` (and in the backbone if tracked).
    pub fn denoise_loss_fixed(
        &self,
        ctx: &Ctx,
        x0: &Tensor,
        cond: &Tensor,
        steps: &[usize],
        eps: &Tensor,
    ) -> Result<Tensor> {
        denoise_objective(self, &self.schedule, ctx, x0, cond, steps, eps)
    }

    /// Noise-prediction MSE with `t ~ U{1..T}` and `eps ~ N(0, I)` per row.
    pub fn denoise_loss(&self, ctx: &Ctx, x0: &Tensor, cond: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        let (steps, eps) = self.draw_noise(x0, rng)?;
        self.denoise_loss_fixed(ctx, x0, cond, &steps, &eps)
    }

    pub fn draw_noise(&self, x0: &Tensor, rng: &mut impl Rng) -> Result<(Vec<usize>, Tensor)> {
        let (b, d) = x0.dims2()?;
        let steps: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=self.schedule.steps())).collect();
        let eps = normal_tensor(&[b, d], rng, x0.dtype(), x0.device())?;
        Ok((steps, eps))
    }

    /// Ancestral sampling; `cond` is `Q x d_c` for one sample or `B x Q x d_c`.
    pub fn sample(&self, cond: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        if !self.trained {
            return Err(Error::UntrainedDecoder(self.modality));
        }
        let cond = if cond.rank() == 2 { cond.unsqueeze(0)? } else { cond.clone() };
        let b = cond.dims()[0];
        let dtype = cond.dtype();
        let dev = cond.device().clone();
        let ctx = Ctx::eval();
        let s = &self.schedule;
        let mut x = normal_tensor(&[b, self.latent_dim], rng, dtype, &dev)?;
        for t in (1..=s.steps()).rev() {
            let eps = self.predict(&ctx, &x, &vec![t; b], &cond)?;
            let beta = s.betas[t - 1];
            let ab = s.alpha_bars[t - 1];
            let mean = ((&x - (eps * (beta / (1.0 - ab).sqrt()))?)? / s.alphas[t - 1].sqrt())?;
            x = if t > 1 {
                let ab_prev = s.alpha_bars[t - 2];
                let var = beta * (1.0 - ab_prev) / (1.0 - ab);
                let z = normal_tensor(&[b, self.latent_dim], rng, dtype, &dev)?;
                (mean + (z * var.sqrt())?)?
            } else {
                mean
            };
        }
        let values: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("{} diffusion sample", self.modality)));
        }
        Ok(x)
    }
}

impl EpsPredictor for Denoiser {
    fn predict(&self, ctx: &Ctx, x_t: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        let temb = time_embedding(steps, self.time_dim, x_t.dtype(), x_t.device())?;
        let c = cond.mean(1)?;
        let mut h = (self.input.forward(ctx, x_t)? + self.time.forward(ctx, &temb)?)?;
        for (layer, film) in self.hidden.iter().zip(&self.film) {
            h = layer.forward(ctx, &h.gelu()?)?;
            let mod_ = film.forward(ctx, &c)?;
            let width = h.dims()[1];
            let scale = mod_.narrow(D::Minus1, 0, width)?;
            let shift = mod_.narrow(D::Minus1, width, width)?;
            h = (h.mul(&(scale + 1.0)?)? + shift)?;
        }
        self.out.forward(ctx, &h.gelu()?)
    }
}

/// `mean((eps - eps_hat)^2)` over every element.
pub fn denoise_objective(
    model: &impl EpsPredictor,
    schedule: &NoiseSchedule,
    ctx: &Ctx,
    x0: &Tensor,
    cond: &Tensor,
    steps: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let alpha_bars = steps
        .iter()
        .map(|&t| schedule.alpha_bar(t))
        .collect::<Result<Vec<_>>>()?;
    let x_t = q_sample_rows(x0, &alpha_bars, eps)?;
    let eps_hat = model.predict(ctx, &x_t, steps, cond)?;
    let loss = (eps - eps_hat)?.sqr()?.mean_all()?;
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::Numeric("denoising loss".into()));
    }
    Ok(loss)
}

pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Centres of the two-mode test mixture.
pub const TWO_MODE_CENTERS: [[f32; 2]; 2] = [[-1.0, -1.0], [1.0, 1.0]];

/// `n` copies of the one-hot condition (`2 x 4`) selecting `mode` of the
/// two-mode mixture.
pub fn two_mode_condition(mode: usize, n: usize) -> Result<Tensor> {
    let mut row = [0f32; 8];
    row[mode] = 1.0;
    row[4 + mode] = 1.0;
    let data: Vec<f32> = (0..n).flat_map(|_| row).collect();
    Ok(Tensor::from_vec(data, (n, 2, 4), &Device::Cpu)?)
}

/// An image-latent backbone fitted on a 2-D mixture with modes at
/// `TWO_MODE_CENTERS` (std 0.1), each paired with its one-hot condition.
pub fn fit_two_mode_mixture(seed: u64, recipe: BackboneRecipe) -> Result<(ParamStore, Denoiser)> {
    let mut store = ParamStore::new(seed, DType::F32);
    let cfg = DiffusionConfig::default();
    let mut d = Denoiser::new(&mut store, Modality::Image, &cfg, 4)?;
    let mut rng = crate::util::derived_rng(seed, "two-mode");
    let n = 512;
    let mut latents = Vec::with_capacity(n * 2);
    let mut conds = Vec::with_capacity(n);
    for i in 0..n {
        let mode = i % 2;
        conds.push(two_mode_condition(mode, 1)?);
        for c in TWO_MODE_CENTERS[mode] {
            let z: f64 = StandardNormal.sample(&mut rng);
            latents.push(c + 0.1 * z as f32);
        }
    }
    let conds = Tensor::cat(&conds, 0)?;
    let latents = Tensor::from_vec(latents, (n, 2), &Device::Cpu)?;
    pretrain_backbone(&mut d, &store, &conds, &latents, recipe, &mut rng)?;
    Ok((store, d))
}

/// Backbone pretraining settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneRecipe {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for BackboneRecipe {
    fn default() -> Self {
        Self { steps: 1500, batch: 64, lr: 3e-3 }
    }
}

/// Fit a backbone on `(condition, latent)` pairs; conditions are `Q x d_c`,
/// latents have `latent_dim` entries. Marks the denoiser as trained and
/// returns the per-step losses.
pub fn pretrain_backbone(
    denoiser: &mut Denoiser,
    store: &ParamStore,
    conds: &Tensor,
    latents: &Tensor,
    recipe: BackboneRecipe,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let n = latents.dims()[0];
    if n == 0 || conds.dims()[0] != n {
        return Err(Error::InvalidInput("backbone pretraining needs matching conditions and latents".into()));
    }
    let prefix = denoiser.param_prefix();
    let trainable: BTreeSet<String> = store.names_with_prefix(&prefix).cloned().collect();
    let mut adam = Adam::new(0.0);
    let mut losses = Vec::with_capacity(recipe.steps);
    for step in 0..recipe.steps {
        let idx: Vec<u32> = (0..recipe.batch).map(|_| rng.gen_range(0..n as u32)).collect();
        let idx = Tensor::new(idx.as_slice(), latents.device())?;
        let x0 = latents.index_select(&idx, 0)?;
        let c = conds.index_select(&idx, 0)?;
        let ctx = Ctx::train(&trainable, step as u64);
        let loss = denoiser.denoise_loss(&ctx, &x0, &c, rng)?;
        losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        let grads = loss.backward()?;
        // Cosine decay keeps the final iterates stable.
        let frac = step as f64 / recipe.steps as f64;
        let lr = recipe.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        adam.step(store, &trainable, &grads, lr)?;
    }
    denoiser.trained = true;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derived_rng;

    #[test]
    fn alpha_bar_matches_running_product() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut acc = 1.0f64;
        for t in 1..=100 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 99.0;
            acc *= 1.0 - beta;
            assert!((s.alpha_bar(t).unwrap() - acc).abs() < 1e-15);
        }
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(101).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[0.5f64, -1.25], &dev).unwrap();
        let eps = Tensor::new(&[0.3f64, 2.0], &dev).unwrap();
        let same = q_sample_at(&x0, 1.0, &eps).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(same, vec![0.5, -1.25]);
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let zero = Tensor::zeros(2, DType::F64, &dev).unwrap();
        let scaled = s.q_sample(&x0, 40, &zero).unwrap().to_vec1::<f64>().unwrap();
        let ab = s.alpha_bar(40).unwrap().sqrt();
        assert_eq!(scaled, vec![0.5 * ab, -1.25 * ab]);
        let noisy = s.q_sample(&x0, 7, &eps).unwrap().to_vec1::<f64>().unwrap();
        let ab7 = s.alpha_bar(7).unwrap();
        let expect = 0.5 * ab7.sqrt() + 0.3 * (1.0 - ab7).sqrt();
        assert!((noisy[0] - expect).abs() < 1e-12);
        assert!(s.q_sample(&x0, 0, &eps).is_err());
    }

    #[test]
    fn q_sample_variance() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = derived_rng(3, "var");
        let n = 10_000;
        let x0 = Tensor::full(0.7f64, n, &Device::Cpu).unwrap();
        let eps = normal_tensor(&[n], &mut rng, DType::F64, &Device::Cpu).unwrap();
        let xt = s.q_sample(&x0, 60, &eps).unwrap().to_vec1::<f64>().unwrap();
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = 1.0 - s.alpha_bar(60).unwrap();
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    struct Oracle {
        x0: Tensor,
        alpha_bars: Vec<f64>,
    }

    impl EpsPredictor for Oracle {
        fn predict(&self, _: &Ctx, x_t: &Tensor, _: &[usize], _: &Tensor) -> Result<Tensor> {
            let n = self.alpha_bars.len();
            let a: Vec<f64> = self.alpha_bars.iter().map(|v| v.sqrt()).collect();
            let s: Vec<f64> = self.alpha_bars.iter().map(|v| (1.0 - v).sqrt()).collect();
            let a = Tensor::from_vec(a, (n, 1), x_t.device())?;
            let s = Tensor::from_vec(s, (n, 1), x_t.device())?;
            Ok((x_t - self.x0.broadcast_mul(&a)?)?.broadcast_div(&s)?)
        }
    }

    struct Zero;

    impl EpsPredictor for Zero {
        fn predict(&self, _: &Ctx, x_t: &Tensor, _: &[usize], _: &Tensor) -> Result<Tensor> {
            Ok(x_t.zeros_like()?)
        }
    }

    #[test]
    fn objective_limits() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = derived_rng(9, "obj");
        let n = 4000;
        let x0 = normal_tensor(&[n, 2], &mut rng, DType::F64, &Device::Cpu).unwrap();
        let eps = normal_tensor(&[n, 2], &mut rng, DType::F64, &Device::Cpu).unwrap();
        let steps: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=100)).collect();
        let cond = Tensor::zeros((n, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let oracle = Oracle {
            x0: x0.clone(),
            alpha_bars: steps.iter().map(|&t| s.alpha_bar(t).unwrap()).collect(),
        };
        let ctx = Ctx::eval();
        let exact = denoise_objective(&oracle, &s, &ctx, &x0, &cond, &steps, &eps).unwrap();
        assert!(exact.to_scalar::<f64>().unwrap() < 1e-20);
        let zero = denoise_objective(&Zero, &s, &ctx, &x0, &cond, &steps, &eps).unwrap();
        assert!((zero.to_scalar::<f64>().unwrap() - 1.0).abs() < 0.05);
    }

    fn store_and_denoiser(steps: usize) -> (ParamStore, Denoiser) {
        let mut store = ParamStore::new(5, DType::F32);
        let cfg = DiffusionConfig { steps, ..DiffusionConfig::default() };
        let d = Denoiser::new(&mut store, Modality::Image, &cfg, 4).unwrap();
        (store, d)
    }

    #[test]
    fn untrained_backbone_refuses_to_sample() {
        let (_, d) = store_and_denoiser(100);
        let cond = Tensor::zeros((2, 4), DType::F32, &Device::Cpu).unwrap();
        let err = d.sample(&cond, &mut derived_rng(0, "s")).unwrap_err();
        assert!(matches!(err, Error::UntrainedDecoder(Modality::Image)));
    }

    #[test]
    fn single_step_schedule_gives_finite_output() {
        let (_, mut d) = store_and_denoiser(1);
        d.trained = true;
        let cond = Tensor::zeros((2, 4), DType::F32, &Device::Cpu).unwrap();
        let x = d.sample(&cond, &mut derived_rng(0, "s")).unwrap();
        assert_eq!(x.dims(), &[1, 2]);
        let a = d.sample(&cond, &mut derived_rng(1, "s")).unwrap().to_vec2::<f32>().unwrap();
        let b = d.sample(&cond, &mut derived_rng(1, "s")).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_mode_conditioning() {
        let (_, d) = fit_two_mode_mixture(21, BackboneRecipe { steps: 1200, batch: 64, lr: 3e-3 }).unwrap();
        let mut rng = derived_rng(21, "two-mode.sample");
        let samples = d.sample(&two_mode_condition(0, 500).unwrap(), &mut rng).unwrap().to_vec2::<f32>().unwrap();
        // Nearest-mode oracle.
        let near_a = samples
            .iter()
            .filter(|p| {
                let da = (p[0] + 1.0).powi(2) + (p[1] + 1.0).powi(2);
                let db = (p[0] - 1.0).powi(2) + (p[1] - 1.0).powi(2);
                da < db
            })
            .count();
        assert!(near_a >= 450, "{near_a}/500 near the conditioned mode");
    }
}
