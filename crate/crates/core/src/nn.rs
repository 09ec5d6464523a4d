//! Differentiable building blocks shared by the encoder, the fusion modules
//! and the teachers. Everything is composed from primitive tensor ops so the
//! same code runs (and backpropagates) in `f32` and `f64`.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Result, SamoraError};
use crate::params::ParamStore;

pub const LN_EPS: f64 = 1e-6;

/// `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        let weight = store.get(&format!("{prefix}.weight"))?;
        let bias = store.get_opt(&format!("{prefix}.bias"));
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_no_bias(x)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }

    pub fn forward_no_bias(&self, x: &Tensor) -> Result<Tensor> {
        let in_dim = x.dims().last().copied().unwrap_or(0);
        if in_dim != self.in_dim() {
            return Err(SamoraError::dim(format!(
                "linear expects last dim {}, got {in_dim}",
                self.in_dim()
            )));
        }
        Ok(x.broadcast_matmul(&self.weight.t()?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{prefix}.weight"))?,
            bias: store.get(&format!("{prefix}.bias"))?,
            eps: LN_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = normalize_last(x, self.eps)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Zero-mean, unit-variance over the last dimension (biased variance).
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax_dim(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

/// Multi-head scaled dot-product attention.
///
/// `q: [B, Lq, d]`, `k, v: [B, Lk, d]`. Returns the merged head outputs
/// `[B, Lq, d]` and the attention weights `[B, heads, Lq, Lk]`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let (b, lq, d) = q.dims3()?;
    let (bk, lk, dk_total) = k.dims3()?;
    if bk != b || dk_total != d || v.dims() != k.dims() {
        return Err(SamoraError::dim(format!(
            "attention shapes q={:?} k={:?} v={:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(SamoraError::dim(format!("dim {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let split = |t: &Tensor, l: usize| -> Result<Tensor> {
        Ok(t.reshape((b, l, heads, dk))?.transpose(1, 2)?.contiguous()?)
    };
    let qh = split(q, lq)?;
    let kh = split(k, lk)?;
    let vh = split(v, lk)?;
    let logits = (qh.matmul(&kh.t()?)? / (dk as f64).sqrt())?;
    let weights = softmax_last(&logits)?;
    let out = weights
        .matmul(&vh)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, lq, d))?;
    Ok((out, weights))
}

/// Ensure a feature tensor is batched `[B, L, d]`.
pub fn batched(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        2 => Ok((x.unsqueeze(0)?, true)),
        3 => Ok((x.clone(), false)),
        r => Err(SamoraError::dim(format!("expected [L, d] or [B, L, d], got rank {r}"))),
    }
}

pub fn unbatch(x: Tensor, squeeze: bool) -> Result<Tensor> {
    if squeeze {
        Ok(x.squeeze(0)?)
    } else {
        Ok(x)
    }
}

pub fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(SamoraError::dim(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `[B, 1, H, W]` image batch to `[B, (H/p)*(W/p), p*p]` flattened patches.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if c != 1 || h % patch != 0 || w % patch != 0 {
        return Err(SamoraError::dim(format!(
            "patchify: image {:?} with patch {patch}",
            images.dims()
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape((b, gh, patch, gw, patch))?
        .permute((0, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, gh * gw, patch * patch))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, patch: usize, grid: (usize, usize)) -> Result<Tensor> {
    let (b, l, pp) = patches.dims3()?;
    if l != grid.0 * grid.1 || pp != patch * patch {
        return Err(SamoraError::dim(format!(
            "unpatchify: {:?} with grid {grid:?}",
            patches.dims()
        )));
    }
    Ok(patches
        .reshape((b, grid.0, grid.1, patch, patch))?
        .permute((0, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, 1, grid.0 * patch, grid.1 * patch))?)
}

/// Stride-2, kernel-2 transposed convolution on channels-last maps.
///
/// `x: [B, h, w, cin]`, `weight: [cout*4, cin]` laid out as `(di, dj, cout)`.
/// Output `[B, 2h, 2w, cout]`.
pub fn upsample2x(x: &Tensor, lin: &Linear) -> Result<Tensor> {
    let (b, h, w, _) = x.dims4()?;
    let cout = lin.out_dim() / 4;
    let y = lin.forward(x)?; // [B, h, w, 4*cout]
    Ok(y.reshape((b, h, w, 2, 2, cout))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, cout))?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn from_f64(values: &[f64], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), shape, device)?.to_dtype(dtype)?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_vec_f64(t)?.iter().all(|v| v.is_finite()))
}
