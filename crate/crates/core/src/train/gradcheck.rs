//! Finite-difference verification of analytic gradients in float64.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)` where
//! `a` is the backprop value and `n` the central difference.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Modality, ModelConfig};
use crate::diffusion::{normal_tensor, Denoiser};
use crate::error::{Error, Result};
use crate::grouping::{gumbel_tensor, one_hot_argmax, soft_assignment, straight_through, FrozenAssignment, GroupingProjector, Mode};
use crate::outproj::{caption_align_loss, OutputProjection};
use crate::params::{Ctx, ParamStore};
use crate::util::derived_rng;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const DEFAULT_COORDS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradTarget {
    Grouping,
    OutputProjection(Modality),
    /// Denoising loss with respect to its condition sequence.
    DenoiseCond(Modality),
}

impl std::fmt::Display for GradTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradTarget::Grouping => write!(f, "grouping"),
            GradTarget::OutputProjection(m) => write!(f, "outproj.{m}"),
            GradTarget::DenoiseCond(m) => write!(f, "denoise-cond.{m}"),
        }
    }
}

/// Test fixture: distort the analytic gradient before comparing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    None,
    Scale(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub target: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compare backprop against central differences of `f` on up to `coords`
/// coordinates drawn from the variables that receive a gradient.
pub fn check_vars(
    target: &str,
    vars: &[(String, Var)],
    f: &dyn Fn() -> Result<Tensor>,
    coords: usize,
    fault: Fault,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let loss = f()?;
    if loss.dtype() != DType::F64 {
        return Err(Error::InvalidInput("gradient checks run in float64".into()));
    }
    let grads = loss.backward()?;
    let mut pool: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, (_, v)) in vars.iter().enumerate() {
        if let Some(g) = grads.get(v.as_tensor()) {
            pool.push((i, g.flatten_all()?.to_vec1::<f64>()?));
        }
    }
    let total: usize = pool.iter().map(|(_, g)| g.len()).sum();
    if total == 0 {
        return Err(Error::Degenerate(format!("{target}: no variable receives a gradient")));
    }
    let picks = sample(rng, total, coords.min(total)).into_vec();
    let mut report = GradCheckReport { target: target.to_string(), coordinates: picks.len(), max_rel_err: 0.0, worst: None };
    for flat in picks {
        let mut rest = flat;
        let (vi, grad) = pool
            .iter()
            .find(|(_, g)| {
                if rest < g.len() {
                    true
                } else {
                    rest -= g.len();
                    false
                }
            })
            .expect("index within pool");
        let (name, var) = &vars[*vi];
        let original = var.as_tensor().copy()?;
        let mut values = original.flatten_all()?.to_vec1::<f64>()?;
        let shape = original.dims().to_vec();
        let x = values[rest];
        values[rest] = x + STEP;
        var.set(&Tensor::from_vec(values.clone(), shape.as_slice(), original.device())?)?;
        let up = f()?.to_scalar::<f64>()?;
        values[rest] = x - STEP;
        var.set(&Tensor::from_vec(values, shape.as_slice(), original.device())?)?;
        let down = f()?.to_scalar::<f64>()?;
        var.set(&original)?;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = match fault {
            Fault::None => grad[rest],
            Fault::Scale(s) => grad[rest] * s,
        };
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((name.clone(), rest));
        }
    }
    Ok(report)
}

fn store_vars(store: &ParamStore, prefix: &str) -> Vec<(String, Var)> {
    store
        .entries()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, e)| (n.clone(), e.param.var().clone()))
        .collect()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    normal_tensor(shape, rng, DType::F64, &candle_core::Device::Cpu)
}

/// Gradient check of one component on the desk configuration in float64.
pub fn grad_check(target: GradTarget, seed: u64, coords: usize, fault: Fault) -> Result<GradCheckReport> {
    let cfg = ModelConfig::desk();
    let mut store = ParamStore::new(seed, DType::F64);
    let mut rng = derived_rng(seed, &format!("gradcheck.{target}"));
    let name = target.to_string();
    match target {
        GradTarget::Grouping => {
            let g = GroupingProjector::new(&mut store, &cfg)?;
            let n = cfg.encoder.token_count(Modality::Image);
            let x = random(&[2, n, cfg.encoder.feature_dim], &mut rng)?;
            let noise = g.sample_noise(2, n, &mut rng, DType::F64)?;
            let ctx = Ctx::track_all(false, seed);
            // Linearize the straight-through estimator at the current point.
            let base = g.project_with(&ctx, &x, Mode::Train, Some(&noise), None)?;
            let frozen: Vec<FrozenAssignment> = base
                .stages
                .iter()
                .map(|s| FrozenAssignment { hard: s.hard.detach(), soft: s.similarity.detach() })
                .collect();
            let w = random(base.concepts.dims(), &mut rng)?;
            let f = || -> Result<Tensor> {
                let out = g.project_with(&Ctx::track_all(false, seed), &x, Mode::Train, Some(&noise), Some(&frozen))?;
                Ok(out.concepts.mul(&w)?.sum_all()?)
            };
            check_vars(&name, &store_vars(&store, "grouping."), &f, coords, fault, &mut rng)
        }
        GradTarget::OutputProjection(m) => {
            let k = cfg.signal_count(m);
            let p = OutputProjection::new(&mut store, m, &cfg.outproj, k, cfg.llm.dim)?;
            let states = random(&[2, k, cfg.llm.dim], &mut rng)?;
            let target_seq = random(&[2, cfg.outproj.queries, cfg.outproj.cond_dim], &mut rng)?;
            let f = || -> Result<Tensor> {
                let proj = p.project(&Ctx::track_all(false, seed), &states)?;
                caption_align_loss(&proj, &target_seq)
            };
            check_vars(&name, &store_vars(&store, &format!("outproj.{m}.")), &f, coords, fault, &mut rng)
        }
        GradTarget::DenoiseCond(m) => {
            let d = Denoiser::new(&mut store, m, &cfg.diffusion, cfg.outproj.cond_dim)?;
            // Give the modulation paths realistic magnitude.
            for name in store.names_with_prefix(&format!("diffusion.{m}.film")).cloned().collect::<Vec<_>>() {
                let shape = store.get(&name).expect("listed").param.shape();
                let n: usize = shape.iter().product();
                let vals: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.3f32..0.3)).collect();
                store.set_values_f32(&name, &shape, vals)?;
            }
            let cond = Var::from_tensor(&random(&[3, cfg.outproj.queries, cfg.outproj.cond_dim], &mut rng)?)?;
            let x0 = random(&[3, d.latent_dim], &mut rng)?;
            let steps: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=d.schedule.steps())).collect();
            let eps = random(&[3, d.latent_dim], &mut rng)?;
            let f = || -> Result<Tensor> {
                d.denoise_loss_fixed(&Ctx::eval(), &x0, cond.as_tensor(), &steps, &eps)
            };
            check_vars(&name, &[("cond".to_string(), cond.clone())], &f, coords, fault, &mut rng)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JvpReport {
    /// The forward hard assignment is exactly one-hot per column and equals
    /// the argmax of the soft assignment.
    pub one_hot_exact: bool,
    pub directions: usize,
    /// Max over directions of |<u, J_hard v> - <u, J_soft v>|, the former by
    /// backprop through the estimator, the latter by central differences.
    pub max_abs_diff: f64,
}

/// Straight-through identity check on a random assignment problem.
pub fn straight_through_jvp(seed: u64, directions: usize) -> Result<JvpReport> {
    let mut rng = derived_rng(seed, "jvp");
    let dev = candle_core::Device::Cpu;
    let (b, m, n, d) = (2, 8, 16, 32);
    let c = Var::from_tensor(&random(&[b, m, d], &mut rng)?)?;
    let x = Var::from_tensor(&random(&[b, n, d], &mut rng)?)?;
    let tau = Tensor::new(&[0.7f64], &dev)?;
    let noise = gumbel_tensor(&[b, m, n], &mut rng, DType::F64, &dev)?;
    let soft = |c: &Tensor, x: &Tensor| soft_assignment(c, x, &tau, Some(&noise));

    let a = soft(c.as_tensor(), x.as_tensor())?;
    let hard = straight_through(&a)?;
    let onehot = one_hot_argmax(&a)?;
    let hv: Vec<f64> = hard.flatten_all()?.to_vec1()?;
    let ov: Vec<f64> = onehot.flatten_all()?.to_vec1()?;
    let col_sums: Vec<f64> = hard.sum(1)?.flatten_all()?.to_vec1()?;
    let one_hot_exact = hv == ov && hv.iter().all(|&v| v == 0.0 || v == 1.0) && col_sums.iter().all(|&s| s == 1.0);

    let eps = 1e-6;
    let mut max_abs_diff: f64 = 0.0;
    for _ in 0..directions {
        let u = random(&[b, m, n], &mut rng)?;
        let vc = random(&[b, m, d], &mut rng)?;
        let vx = random(&[b, n, d], &mut rng)?;
        let grads = hard.mul(&u)?.sum_all()?.backward()?;
        let dot = |g: Option<&Tensor>, v: &Tensor| -> Result<f64> {
            Ok(match g {
                Some(g) => g.mul(v)?.sum_all()?.to_scalar::<f64>()?,
                None => 0.0,
            })
        };
        let st = dot(grads.get(c.as_tensor()), &vc)? + dot(grads.get(x.as_tensor()), &vx)?;
        let shifted = |s: f64| -> Result<f64> {
            let cs = (c.as_tensor() + (&vc * s)?)?;
            let xs = (x.as_tensor() + (&vx * s)?)?;
            Ok(soft(&cs, &xs)?.mul(&u)?.sum_all()?.to_scalar::<f64>()?)
        };
        let fd = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
        max_abs_diff = max_abs_diff.max((st - fd).abs());
    }
    Ok(JvpReport { one_hot_exact, directions, max_abs_diff })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outproj_gradients_match_differences() {
        let r = grad_check(GradTarget::OutputProjection(Modality::Image), 3, 100, Fault::None).unwrap();
        assert_eq!(r.coordinates, 100);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let r = grad_check(GradTarget::DenoiseCond(Modality::Audio), 3, 100, Fault::Scale(1.5)).unwrap();
        assert!(r.max_rel_err > 1e-2, "{r:?}");
    }

    #[test]
    fn straight_through_matches_soft_directional_derivatives() {
        let r = straight_through_jvp(1, 8).unwrap();
        assert!(r.one_hot_exact);
        assert!(r.max_abs_diff < 1e-6, "{r:?}");
    }
}
