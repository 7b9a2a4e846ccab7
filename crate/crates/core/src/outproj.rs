//! Per-modality output projection: a small encoder-decoder transformer that
//! turns the `k` signal-token hidden states into a `Q x d_c` sequence in the
//! diffusion conditioner space.
//!
//! Each projection also owns its modality's signal-token embedding and output
//! rows, so everything a modality needs to be emitted and decoded lives under
//! `outproj.{modality}.*`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::budget::Role;
use crate::config::{Modality, OutProjConfig};
use crate::error::{Error, Result};
use crate::llm::SignalRows;
use crate::nn::{Block, CrossBlock, LayerNorm, Linear};
use crate::params::{Ctx, Param, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    ProjectedSignal,
    CaptionEncoded,
}

/// `Q x d_c` (or `B x Q x d_c`) conditioner-space sequence.
#[derive(Debug, Clone)]
pub struct ConditionEmbedding {
    pub values: Tensor,
    pub source: ConditionSource,
}

#[derive(Debug, Clone)]
pub struct OutputProjection {
    pub modality: Modality,
    pub signal_count: usize,
    pub signal_embed: Param,
    pub signal_head: Param,
    pub input: Linear,
    pub pos: Param,
    pub encoder: Vec<Block>,
    pub queries: Param,
    pub decoder: Vec<CrossBlock>,
    pub ln_out: LayerNorm,
    pub out: Linear,
}

impl OutputProjection {
    pub fn new(
        store: &mut ParamStore,
        modality: Modality,
        cfg: &OutProjConfig,
        signal_count: usize,
        llm_dim: usize,
    ) -> Result<Self> {
        if modality == Modality::Text {
            return Err(Error::WrongModality(modality));
        }
        let p = format!("outproj.{modality}");
        let h = cfg.hidden;
        let t = Role::Trainable;
        let encoder = (0..cfg.enc_layers)
            .map(|i| Block::new(store, &format!("{p}.enc{i}"), h, cfg.heads, 4 * h, cfg.dropout, t))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.dec_layers)
            .map(|i| CrossBlock::new(store, &format!("{p}.dec{i}"), h, cfg.heads, 4 * h, cfg.dropout, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modality,
            signal_count,
            signal_embed: store.normal(&format!("{p}.signal_embed"), &[signal_count, llm_dim], 0.1, t)?,
            signal_head: store.normal(&format!("{p}.signal_head"), &[signal_count, llm_dim], 0.1, t)?,
            input: Linear::new(store, &format!("{p}.input"), llm_dim, h, t)?,
            pos: store.normal(&format!("{p}.pos"), &[signal_count, h], 0.1, t)?,
            encoder,
            queries: store.normal(&format!("{p}.queries"), &[cfg.queries, h], 1.0, t)?,
            decoder,
            ln_out: LayerNorm::new(store, &format!("{p}.ln_out"), h, t)?,
            out: Linear::new(store, &format!("{p}.out"), h, cfg.cond_dim, t)?,
        })
    }

    /// The signal rows this projection contributes to the LLM vocabulary.
    pub fn signal_rows(&self) -> SignalRows {
        SignalRows {
            modality: self.modality,
            embed: self.signal_embed.clone(),
            head: self.signal_head.clone(),
        }
    }

    /// Project `k x d_llm` states (or a `B x k x d_llm` batch) into
    /// conditioner space. Dropout follows `ctx`'s train flag.
    pub fn project(&self, ctx: &Ctx, states: &Tensor) -> Result<Tensor> {
        let batched = states.rank() == 3;
        let x = if batched { states.clone() } else { states.unsqueeze(0)? };
        let (b, k, _) = x.dims3()?;
        if k != self.signal_count {
            return Err(Error::SignalCountMismatch {
                modality: self.modality,
                expected: self.signal_count,
                got: k,
            });
        }
        let mut mem = self.input.forward(ctx, &x)?.broadcast_add(&ctx.p(&self.pos))?;
        for block in &self.encoder {
            mem = block.forward(ctx, &mem, None, false)?;
        }
        let q = ctx.p(&self.queries);
        let mut h = q.unsqueeze(0)?.broadcast_as((b, q.dims()[0], q.dims()[1]))?.contiguous()?;
        for block in &self.decoder {
            h = block.forward(ctx, &h, &mem)?;
        }
        let y = self.out.forward(ctx, &self.ln_out.forward(ctx, &h)?)?;
        Ok(if batched { y } else { y.squeeze(0)? })
    }

    pub fn project_signal(&self, ctx: &Ctx, states: &Tensor) -> Result<ConditionEmbedding> {
        Ok(ConditionEmbedding {
            values: self.project(ctx, states)?,
            source: ConditionSource::ProjectedSignal,
        })
    }
}

/// Squared L2 distance summed over the conditioner width and averaged over
/// positions (and batch).
pub fn caption_align_loss(proj: &Tensor, target: &Tensor) -> Result<Tensor> {
    if proj.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            name: "caption alignment".into(),
            detail: format!("{:?} vs {:?}", proj.dims(), target.dims()),
        });
    }
    Ok((proj - target)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Cosine similarity of each sample's flattened sequence; `B` values.
pub fn sequence_cosine(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let a = if a.rank() == 2 { a.unsqueeze(0)? } else { a.clone() };
    let b = if b.rank() == 2 { b.unsqueeze(0)? } else { b.clone() };
    let n = a.dims()[0];
    let a = a.reshape((n, ()))?.to_dtype(candle_core::DType::F64)?;
    let b = b.reshape((n, ()))?.to_dtype(candle_core::DType::F64)?;
    let dot = (&a * &b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?.sqrt()?;
    let nb = b.sqr()?.sum(1)?.sqrt()?;
    let cos = dot.div(&(na * nb)?.maximum(1e-12)?)?;
    Ok(cos.to_vec1()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::Rng;

    fn proj(store: &mut ParamStore, m: Modality, k: usize) -> OutputProjection {
        OutputProjection::new(store, m, &OutProjConfig::default(), k, 64).unwrap()
    }

    #[test]
    fn image_projection_shape() {
        let mut store = ParamStore::new(1, DType::F32);
        let p = proj(&mut store, Modality::Image, 5);
        let states = Tensor::randn(0f32, 1.0, (5, 64), &Device::Cpu).unwrap();
        let c = p.project_signal(&Ctx::eval(), &states).unwrap();
        assert_eq!(c.values.dims(), &[8, 32]);
        assert_eq!(c.source, ConditionSource::ProjectedSignal);
        let again = p.project(&Ctx::eval(), &states).unwrap();
        assert_eq!(c.values.to_vec2::<f32>().unwrap(), again.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn wrong_signal_count_is_rejected() {
        let mut store = ParamStore::new(1, DType::F32);
        let p = proj(&mut store, Modality::Image, 5);
        let states = Tensor::zeros((4, 64), DType::F32, &Device::Cpu).unwrap();
        let err = p.project(&Ctx::eval(), &states).unwrap_err();
        assert!(matches!(
            err,
            Error::SignalCountMismatch { modality: Modality::Image, expected: 5, got: 4 }
        ));
        assert!(matches!(
            OutputProjection::new(&mut store, Modality::Text, &OutProjConfig::default(), 1, 64),
            Err(Error::WrongModality(Modality::Text))
        ));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut store = ParamStore::new(2, DType::F32);
        let p = proj(&mut store, Modality::Audio, 9);
        let states = Tensor::randn(0f32, 1.0, (9, 64), &Device::Cpu).unwrap();
        let names = store.names().cloned().collect();
        let a = p.project(&Ctx::train(&names, 1), &states).unwrap();
        let b = p.project(&Ctx::train(&names, 2), &states).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn modality_parameter_sets_are_disjoint() {
        let mut store = ParamStore::new(3, DType::F32);
        for (m, k) in [(Modality::Image, 5), (Modality::Audio, 9), (Modality::Video, 25)] {
            proj(&mut store, m, k);
        }
        let image: Vec<_> = store.names_with_prefix("outproj.image.").cloned().collect();
        let audio: Vec<_> = store.names_with_prefix("outproj.audio.").cloned().collect();
        assert_eq!(image.len(), audio.len());
        assert!(image.iter().all(|n| !audio.contains(n)));
        assert_eq!(store.names().count(), 3 * image.len());
    }

    #[test]
    fn align_loss_limits() {
        let dev = Device::Cpu;
        let t = Tensor::randn(0f64, 1.0, (8, 32), &dev).unwrap();
        let zero = caption_align_loss(&t, &t).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(zero, 0.0);
        let shifted = (&t + 1.0).unwrap();
        let d = caption_align_loss(&shifted, &t).unwrap().to_scalar::<f64>().unwrap();
        assert!((d - 32.0).abs() < 1e-9);
        let wrong = Tensor::zeros((7, 32), DType::F64, &dev).unwrap();
        assert!(matches!(caption_align_loss(&wrong, &t), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn align_loss_matches_scalar_loop() {
        let mut rng = crate::util::derived_rng(5, "align");
        let (q, dc) = (6, 10);
        let a: Vec<f64> = (0..q * dc).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..q * dc).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut oracle = 0.0;
        for i in 0..q {
            let mut row = 0.0;
            for j in 0..dc {
                let diff = a[i * dc + j] - b[i * dc + j];
                row += diff * diff;
            }
            oracle += row;
        }
        oracle /= q as f64;
        let ta = Tensor::from_vec(a, (q, dc), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(b, (q, dc), &Device::Cpu).unwrap();
        let got = caption_align_loss(&ta, &tb).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - oracle).abs() < 1e-6);
        let sym = caption_align_loss(&tb, &ta).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(got, sym);
    }

    #[test]
    fn cosine_of_identical_is_one() {
        let t = Tensor::randn(0f32, 1.0, (2, 8, 4), &Device::Cpu).unwrap();
        for c in sequence_cosine(&t, &t).unwrap() {
            assert!((c - 1.0).abs() < 1e-6);
        }
    }
}
