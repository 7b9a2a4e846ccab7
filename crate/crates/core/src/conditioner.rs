//! Frozen caption encoders, one per decoder, producing the conditioner-space
//! targets (`Q x d_c`) that projected signal states are aligned to.
//!
//! Character embeddings plus positions pass through `tanh`, then `Q` fixed
//! queries attention-pool the sequence and a linear map mixes the result.

use candle_core::Tensor;

use crate::budget::Role;
use crate::config::{Modality, OutProjConfig};
use crate::error::{Error, Result};
use crate::nn::{softmax, Linear};
use crate::outproj::{ConditionEmbedding, ConditionSource};
use crate::params::{Ctx, Param, ParamStore};
use crate::tokenizer::TEXT_VOCAB;

/// Longest caption the conditioner accepts, in characters.
pub const CONDITIONER_MAX_LEN: usize = 128;

#[derive(Debug, Clone)]
pub struct Conditioner {
    pub modality: Modality,
    pub embed: Param,
    pub pos: Param,
    pub queries: Param,
    pub out: Linear,
}

impl Conditioner {
    pub fn new(store: &mut ParamStore, modality: Modality, cfg: &OutProjConfig) -> Result<Self> {
        let p = format!("conditioner.{modality}");
        let dc = cfg.cond_dim;
        let f = Role::Frozen;
        Ok(Self {
            modality,
            embed: store.normal(&format!("{p}.embed"), &[TEXT_VOCAB as usize, dc], 1.0, f)?,
            pos: store.normal(&format!("{p}.pos"), &[CONDITIONER_MAX_LEN, dc], 0.3, f)?,
            queries: store.normal(&format!("{p}.queries"), &[cfg.queries, dc], 1.0, f)?,
            out: Linear::new(store, &format!("{p}.out"), dc, dc, f)?,
        })
    }

    /// Encode caption ids (text ids only) into `Q x d_c`.
    pub fn encode(&self, ctx: &Ctx, ids: &[u32]) -> Result<Tensor> {
        if ids.is_empty() || ids.len() > CONDITIONER_MAX_LEN {
            return Err(Error::InvalidInput(format!(
                "caption length {} outside 1..={CONDITIONER_MAX_LEN}",
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= TEXT_VOCAB) {
            return Err(Error::InvalidInput(format!("caption contains non-text id {bad}")));
        }
        let table = ctx.p(&self.embed);
        let idx = Tensor::new(ids, table.device())?;
        let h = table
            .index_select(&idx, 0)?
            .add(&ctx.p(&self.pos).narrow(0, 0, ids.len())?)?
            .tanh()?;
        let weights = softmax(&ctx.p(&self.queries).matmul(&h.t()?)?, 1)?;
        self.out.forward(ctx, &weights.matmul(&h)?)
    }

    /// Stack of encodings, `B x Q x d_c`.
    pub fn encode_batch(&self, ctx: &Ctx, captions: &[Vec<u32>]) -> Result<Tensor> {
        let rows = captions
            .iter()
            .map(|c| self.encode(ctx, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }

    pub fn condition(&self, ctx: &Ctx, ids: &[u32]) -> Result<ConditionEmbedding> {
        Ok(ConditionEmbedding {
            values: self.encode(ctx, ids)?,
            source: ConditionSource::CaptionEncoded,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outproj::sequence_cosine;
    use crate::tokenizer::tokenize;
    use candle_core::DType;

    #[test]
    fn shape_and_determinism() {
        let mut store = ParamStore::new(4, DType::F32);
        let c = Conditioner::new(&mut store, Modality::Image, &OutProjConfig::default()).unwrap();
        let ids = tokenize("a big red dot, top left").unwrap();
        let a = c.encode(&Ctx::eval(), &ids).unwrap();
        assert_eq!(a.dims(), &[8, 32]);
        let b = c.encode(&Ctx::eval(), &ids).unwrap();
        assert_eq!(a.to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
        assert!(c.encode(&Ctx::eval(), &[]).is_err());
    }

    #[test]
    fn different_captions_differ() {
        let mut store = ParamStore::new(4, DType::F32);
        let c = Conditioner::new(&mut store, Modality::Image, &OutProjConfig::default()).unwrap();
        let a = c.encode(&Ctx::eval(), &tokenize("a big red dot, top left").unwrap()).unwrap();
        let b = c.encode(&Ctx::eval(), &tokenize("a big red dot, top right").unwrap()).unwrap();
        let cos = sequence_cosine(&a, &b).unwrap()[0];
        assert!(cos < 0.9999, "captions collapse: {cos}");
    }
}
