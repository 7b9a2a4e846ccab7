//! Small layer library used by every network in the crate.
//!
//! Everything is built from primitive candle ops so it differentiates in
//! both `f32` and `f64`. Inputs are `(batch, seq, width)` unless noted.

use candle_core::{DType, Device, Tensor, D};

use crate::budget::Role;
use crate::error::Result;
use crate::params::{Ctx, Param, ParamStore};

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Rows scaled to unit L2 norm along the last axis; zero rows stay zero.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(1e-12)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Additive mask: 0 on and below the diagonal, a large negative above it.
pub fn causal_mask(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j <= i { 0.0 } else { -1e9 }))
        .collect();
    Ok(Tensor::from_vec(data, (len, len), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, role: Role) -> Result<Self> {
        let w = store.normal(&format!("{name}.w"), &[d_out, d_in], (1.0 / d_in as f64).sqrt(), role)?;
        let b = store.constant(&format!("{name}.b"), &[d_out], 0.0, role)?;
        Ok(Self { w, b: Some(b) })
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        role: Role,
    ) -> Result<Self> {
        let w = store.normal(&format!("{name}.w"), &[d_out, d_in], std, role)?;
        let b = store.constant(&format!("{name}.b"), &[d_out], 0.0, role)?;
        Ok(Self { w, b: Some(b) })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&ctx.p(&self.w).t()?)?;
        match &self.b {
            Some(b) => Ok(y.broadcast_add(&ctx.p(b))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: Param,
    pub b: Param,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, role: Role) -> Result<Self> {
        Ok(Self {
            g: store.constant(&format!("{name}.g"), &[dim], 1.0, role)?,
            b: store.constant(&format!("{name}.b"), &[dim], 0.0, role)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&ctx.p(&self.g))?
            .broadcast_add(&ctx.p(&self.b))?)
    }
}

/// Low-rank additive adapter: `delta(x) = (alpha / r) * x A^T B^T`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Param,
    pub b: Param,
    pub scale: f64,
}

impl LoraAdapter {
    /// `A` Gaussian, `B` zero, so the adapter starts as an exact no-op.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            a: store.normal(&format!("{name}.a"), &[rank, d_in], (1.0 / d_in as f64).sqrt(), Role::Trainable)?,
            b: store.constant(&format!("{name}.b"), &[d_out, rank], 0.0, Role::Trainable)?,
            scale: alpha / rank as f64,
        })
    }

    pub fn delta(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let down = x.broadcast_matmul(&ctx.p(&self.a).t()?)?;
        Ok((down.broadcast_matmul(&ctx.p(&self.b).t()?)? * self.scale)?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub lora_q: Option<LoraAdapter>,
    pub lora_k: Option<LoraAdapter>,
    pub lora_v: Option<LoraAdapter>,
    pub lora_o: Option<LoraAdapter>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, role: Role) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, role)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, role)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, role)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, role)?,
            heads,
            lora_q: None,
            lora_k: None,
            lora_v: None,
            lora_o: None,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Attention from `xq` onto `xkv`. `mask` is additive, shape `(tq, tk)`.
    pub fn forward(
        &self,
        ctx: &Ctx,
        xq: &Tensor,
        xkv: &Tensor,
        mask: Option<&Tensor>,
        use_lora: bool,
    ) -> Result<Tensor> {
        let (b, tq, d) = xq.dims3()?;
        let q = adapted(ctx, &self.q, self.lora_q.as_ref().filter(|_| use_lora), xq)?;
        let k = adapted(ctx, &self.k, self.lora_k.as_ref().filter(|_| use_lora), xkv)?;
        let v = adapted(ctx, &self.v, self.lora_v.as_ref().filter(|_| use_lora), xkv)?;
        let q = self.split_heads(&q)?;
        let k = self.split_heads(&k)?;
        let v = self.split_heads(&v)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = softmax(&scores, 3)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
        adapted(ctx, &self.o, self.lora_o.as_ref().filter(|_| use_lora), &out)
    }

    /// Incremental self-attention for decoding: `x` holds the new positions,
    /// `cache` the keys and values of every earlier position (per head).
    pub fn forward_cached(
        &self,
        ctx: &Ctx,
        x: &Tensor,
        cache: &mut Option<(Tensor, Tensor)>,
        use_lora: bool,
    ) -> Result<Tensor> {
        let (b, t_new, d) = x.dims3()?;
        let q = adapted(ctx, &self.q, self.lora_q.as_ref().filter(|_| use_lora), x)?;
        let k = adapted(ctx, &self.k, self.lora_k.as_ref().filter(|_| use_lora), x)?;
        let v = adapted(ctx, &self.v, self.lora_v.as_ref().filter(|_| use_lora), x)?;
        let q = self.split_heads(&q)?;
        let (k, v) = match cache.take() {
            Some((pk, pv)) => (
                Tensor::cat(&[&pk, &self.split_heads(&k)?], 2)?,
                Tensor::cat(&[&pv, &self.split_heads(&v)?], 2)?,
            ),
            None => (self.split_heads(&k)?, self.split_heads(&v)?),
        };
        let t_all = k.dims()[2];
        let past = t_all - t_new;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if t_new > 1 {
            let data: Vec<f32> = (0..t_new)
                .flat_map(|i| (0..t_all).map(move |j| if j <= past + i { 0.0 } else { -1e9 }))
                .collect();
            let mask = Tensor::from_vec(data, (t_new, t_all), x.device())?.to_dtype(x.dtype())?;
            scores = scores.broadcast_add(&mask)?;
        }
        let attn = softmax(&scores, 3)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t_new, d))?;
        *cache = Some((k, v));
        adapted(ctx, &self.o, self.lora_o.as_ref().filter(|_| use_lora), &out)
    }
}

/// `linear(x)` plus the adapter's delta when one is given.
fn adapted(ctx: &Ctx, linear: &Linear, lora: Option<&LoraAdapter>, x: &Tensor) -> Result<Tensor> {
    let y = linear.forward(ctx, x)?;
    match lora {
        Some(l) => Ok((y + l.delta(ctx, x)?)?),
        None => Ok(y),
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub lora_fc1: Option<LoraAdapter>,
    pub lora_fc2: Option<LoraAdapter>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, role: Role) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, role)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, role)?,
            lora_fc1: None,
            lora_fc2: None,
        })
    }

    pub fn with_output(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        role: Role,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, role)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, role)?,
            lora_fc1: None,
            lora_fc2: None,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        self.forward_adapted(ctx, x, false)
    }

    pub fn forward_adapted(&self, ctx: &Ctx, x: &Tensor, use_lora: bool) -> Result<Tensor> {
        let h = adapted(ctx, &self.fc1, self.lora_fc1.as_ref().filter(|_| use_lora), x)?.gelu()?;
        adapted(ctx, &self.fc2, self.lora_fc2.as_ref().filter(|_| use_lora), &h)
    }
}

/// Pre-norm transformer block with self-attention.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        dropout: f64,
        role: Role,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, role)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, role)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, role)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, role)?,
            dropout,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor, mask: Option<&Tensor>, use_lora: bool) -> Result<Tensor> {
        let h = self.ln1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, &h, &h, mask, use_lora)?;
        let x = (x + ctx.dropout(&a, self.dropout)?)?;
        let m = self.mlp.forward_adapted(ctx, &self.ln2.forward(ctx, &x)?, use_lora)?;
        Ok((&x + ctx.dropout(&m, self.dropout)?)?)
    }

    /// Causal block over new positions given cached keys and values.
    pub fn forward_cached(
        &self,
        ctx: &Ctx,
        x: &Tensor,
        cache: &mut Option<(Tensor, Tensor)>,
        use_lora: bool,
    ) -> Result<Tensor> {
        let a = self.attn.forward_cached(ctx, &self.ln1.forward(ctx, x)?, cache, use_lora)?;
        let x = (x + a)?;
        let m = self.mlp.forward_adapted(ctx, &self.ln2.forward(ctx, &x)?, use_lora)?;
        Ok((&x + m)?)
    }
}

/// Pre-norm decoder block: self-attention, cross-attention, MLP.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln_c: LayerNorm,
    pub cross_attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
}

impl CrossBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        dropout: f64,
        role: Role,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, role)?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads, role)?,
            ln_c: LayerNorm::new(store, &format!("{name}.ln_c"), dim, role)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, heads, role)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, role)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, role)?,
            dropout,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(ctx, x)?;
        let x = (x + ctx.dropout(&self.self_attn.forward(ctx, &h, &h, None, false)?, self.dropout)?)?;
        let h = self.ln_c.forward(ctx, &x)?;
        let x = (&x + ctx.dropout(&self.cross_attn.forward(ctx, &h, memory, None, false)?, self.dropout)?)?;
        let m = self.mlp.forward(ctx, &self.ln2.forward(ctx, &x)?)?;
        Ok((&x + ctx.dropout(&m, self.dropout)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f32, 2.0, 3.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s = softmax(&x, 1).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_keeps_zero_rows() {
        let x = Tensor::new(&[[3.0f32, 4.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let n = l2_normalize(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(n[0], vec![0.6, 0.8]);
        assert_eq!(n[1], vec![0.0, 0.0]);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = Tensor::new(&[[0.5f64, -1.0, 2.0]], &Device::Cpu).unwrap();
        let a = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        let b = softmax(&x, 1).unwrap().log().unwrap().to_vec2::<f64>().unwrap();
        for (u, v) in a[0].iter().zip(&b[0]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lora_is_identity() {
        let mut store = ParamStore::new(3, DType::F32);
        let mut attn = Attention::new(&mut store, "a", 8, 2, Role::Frozen).unwrap();
        attn.lora_q = Some(LoraAdapter::new(&mut store, "l.q", 8, 8, 2, 4.0).unwrap());
        attn.lora_v = Some(LoraAdapter::new(&mut store, "l.v", 8, 8, 2, 4.0).unwrap());
        let x = Tensor::randn(0f32, 1.0, (1, 5, 8), &Device::Cpu).unwrap();
        let ctx = Ctx::eval();
        let on = attn.forward(&ctx, &x, &x, None, true).unwrap();
        let off = attn.forward(&ctx, &x, &x, None, false).unwrap();
        let diff = (on - off).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }
}
