//! Helpers shared by the integration tests: random tensors and
//! straight-line reference implementations written without candle.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use samora_core::fusion::CrossAttnParams;
use samora_core::model::{BlockAdapters, EncoderBlock, LoraAdapter, LoraExpertSet};
use samora_core::nn::{LayerNorm, Linear, LN_EPS};

pub mod cases;
pub mod fixtures;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

pub fn tensor(values: &[f64], shape: &[usize], dtype: DType) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rows(flat: &[f64], n: usize, m: usize) -> Mat {
    assert_eq!(flat.len(), n * m);
    flat.chunks(m).map(|c| c.to_vec()).collect()
}

/// `x W^T + b` row by row; `w` is `[out][in]`.
pub fn linear_ref(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .enumerate()
                .map(|(o, wr)| wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>() + b.map_or(0.0, |b| b[o]))
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn layer_norm_ref(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

/// Per-head softmax attention, concatenated. Returns the output and the
/// weights `[head][query][key]`.
pub fn attention_ref(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let d = q[0].len();
    let dk = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut all = Vec::new();
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let mut wh = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|x| x / s).collect();
            for c in cols.clone() {
                out[i][c] = w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum();
            }
            wh.push(w);
        }
        all.push(wh);
    }
    (out, all)
}

pub fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Random linear layer with its reference copy.
pub struct RefLinear {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl RefLinear {
    pub fn random(r: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, scale: f64) -> Self {
        Self {
            w: rows(&uniform(r, in_dim * out_dim, scale), out_dim, in_dim),
            b: uniform(r, out_dim, scale),
        }
    }

    pub fn zero(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: vec![vec![0.0; in_dim]; out_dim],
            b: vec![0.0; out_dim],
        }
    }

    pub fn to_linear(&self, dtype: DType) -> Linear {
        let (o, i) = (self.w.len(), self.w[0].len());
        let flat: Vec<f64> = self.w.concat();
        Linear::new(tensor(&flat, &[o, i], dtype), Some(tensor(&self.b, &[o], dtype)))
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        linear_ref(x, &self.w, Some(&self.b))
    }

    pub fn apply_no_bias(&self, x: &Mat) -> Mat {
        linear_ref(x, &self.w, None)
    }
}

pub struct RefNorm {
    pub g: Vec<f64>,
    pub b: Vec<f64>,
}

impl RefNorm {
    pub fn random(r: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            g: uniform(r, d, 1.0).into_iter().map(|v| 1.0 + 0.5 * v).collect(),
            b: uniform(r, d, 0.5),
        }
    }

    pub fn to_layer_norm(&self, dtype: DType) -> LayerNorm {
        let d = self.g.len();
        LayerNorm {
            weight: tensor(&self.g, &[d], dtype),
            bias: tensor(&self.b, &[d], dtype),
            eps: LN_EPS,
        }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        layer_norm_ref(x, &self.g, &self.b)
    }
}

pub struct RefCrossAttn {
    pub q: RefLinear,
    pub k: RefLinear,
    pub v: RefLinear,
    pub out: RefLinear,
    pub norm: Option<RefNorm>,
    pub heads: usize,
}

impl RefCrossAttn {
    pub fn random(r: &mut ChaCha8Rng, d: usize, heads: usize, layer_norm: bool) -> Self {
        Self {
            q: RefLinear::random(r, d, d, 1.0),
            k: RefLinear::random(r, d, d, 1.0),
            v: RefLinear::random(r, d, d, 1.0),
            out: RefLinear::random(r, d, d, 1.0),
            norm: layer_norm.then(|| RefNorm::random(r, d)),
            heads,
        }
    }

    pub fn to_params(&self, dtype: DType) -> CrossAttnParams {
        CrossAttnParams {
            q: self.q.to_linear(dtype),
            k: self.k.to_linear(dtype),
            v: self.v.to_linear(dtype),
            out: self.out.to_linear(dtype),
            norm: self.norm.as_ref().map(|n| n.to_layer_norm(dtype)),
            heads: self.heads,
        }
    }

    /// `LN(q + out(attn(Q, K, V)))`.
    pub fn apply(&self, qf: &Mat, kvf: &Mat) -> Mat {
        let (a, _) = attention_ref(&self.q.apply(qf), &self.k.apply(kvf), &self.v.apply(kvf), self.heads);
        let y = add(qf, &self.out.apply(&a));
        match &self.norm {
            Some(n) => n.apply(&y),
            None => y,
        }
    }
}

pub struct RefAdapter {
    pub a: Mat,
    pub b: Mat,
}

impl RefAdapter {
    pub fn random(r: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, rank: usize, scale: f64) -> Self {
        Self {
            a: rows(&uniform(r, rank * in_dim, scale), rank, in_dim),
            b: rows(&uniform(r, out_dim * rank, scale), out_dim, rank),
        }
    }

    pub fn to_adapter(&self, dtype: DType) -> LoraAdapter {
        let (r, i, o) = (self.a.len(), self.a[0].len(), self.b.len());
        LoraAdapter {
            a: tensor(&self.a.concat(), &[r, i], dtype),
            b: tensor(&self.b.concat(), &[o, r], dtype),
        }
    }

    /// `x (B A)^T`.
    pub fn apply(&self, x: &Mat) -> Mat {
        linear_ref(&linear_ref(x, &self.a, None), &self.b, None)
    }
}

/// One pre-LN transformer block and a one-block LoRA expert.
pub struct RefBlock {
    pub norm1: RefNorm,
    pub q: RefLinear,
    pub k: RefLinear,
    pub v: RefLinear,
    pub out: RefLinear,
    pub norm2: RefNorm,
    pub fc1: RefLinear,
    pub fc2: RefLinear,
    pub heads: usize,
}

pub struct RefExpert {
    pub q: RefAdapter,
    pub v: RefAdapter,
    pub fc1: RefAdapter,
    pub fc2: RefAdapter,
}

impl RefBlock {
    pub fn random(r: &mut ChaCha8Rng, d: usize, mlp: usize, heads: usize) -> Self {
        Self {
            norm1: RefNorm::random(r, d),
            q: RefLinear::random(r, d, d, 0.8),
            k: RefLinear::random(r, d, d, 0.8),
            v: RefLinear::random(r, d, d, 0.8),
            out: RefLinear::random(r, d, d, 0.8),
            norm2: RefNorm::random(r, d),
            fc1: RefLinear::random(r, d, mlp, 0.8),
            fc2: RefLinear::random(r, mlp, d, 0.8),
            heads,
        }
    }

    pub fn to_block(&self, dtype: DType) -> EncoderBlock {
        EncoderBlock {
            norm1: self.norm1.to_layer_norm(dtype),
            q: self.q.to_linear(dtype),
            k: self.k.to_linear(dtype),
            v: self.v.to_linear(dtype),
            out: self.out.to_linear(dtype),
            norm2: self.norm2.to_layer_norm(dtype),
            fc1: self.fc1.to_linear(dtype),
            fc2: self.fc2.to_linear(dtype),
            heads: self.heads,
        }
    }

    /// `x' = x + out(attn(LN x))`, `y = x' + fc2(gelu(fc1(LN x')))`.
    pub fn frozen(&self, x: &Mat) -> Mat {
        let h = self.norm1.apply(x);
        let (a, _) = attention_ref(&self.q.apply(&h), &self.k.apply(&h), &self.v.apply(&h), self.heads);
        let x1 = add(x, &self.out.apply(&a));
        let h2 = self.norm2.apply(&x1);
        let f: Mat = self.fc1.apply(&h2).into_iter().map(|r| r.into_iter().map(gelu_ref).collect()).collect();
        add(&x1, &self.fc2.apply(&f))
    }

    /// Expert block on the pure-delta path: adapted projections use `B A`
    /// alone, `k` and `out` reuse the frozen weights without bias.
    pub fn expert(&self, e: &RefExpert, x: &Mat) -> Mat {
        let h = self.norm1.apply(x);
        let (a, _) = attention_ref(&e.q.apply(&h), &self.k.apply_no_bias(&h), &e.v.apply(&h), self.heads);
        let x1 = add(x, &self.out.apply_no_bias(&a));
        let h2 = self.norm2.apply(&x1);
        let f: Mat = e.fc1.apply(&h2).into_iter().map(|r| r.into_iter().map(gelu_ref).collect()).collect();
        add(&x1, &e.fc2.apply(&f))
    }

    /// Expert block with merged weights `W + B A` on every adapted projection.
    pub fn expert_merged(&self, e: &RefExpert, x: &Mat) -> Mat {
        let h = self.norm1.apply(x);
        let q = add(&self.q.apply(&h), &e.q.apply(&h));
        let v = add(&self.v.apply(&h), &e.v.apply(&h));
        let (a, _) = attention_ref(&q, &self.k.apply(&h), &v, self.heads);
        let x1 = add(x, &self.out.apply(&a));
        let h2 = self.norm2.apply(&x1);
        let f: Mat = add(&self.fc1.apply(&h2), &e.fc1.apply(&h2))
            .into_iter()
            .map(|r| r.into_iter().map(gelu_ref).collect())
            .collect();
        add(&x1, &add(&self.fc2.apply(&f), &e.fc2.apply(&f)))
    }
}

impl RefExpert {
    pub fn random(r: &mut ChaCha8Rng, d: usize, mlp: usize, rank: usize, scale: f64) -> Self {
        Self {
            q: RefAdapter::random(r, d, d, rank, scale),
            v: RefAdapter::random(r, d, d, rank, scale),
            fc1: RefAdapter::random(r, d, mlp, rank, scale),
            fc2: RefAdapter::random(r, mlp, d, rank, scale),
        }
    }

    pub fn to_expert(&self, dtype: DType) -> LoraExpertSet {
        LoraExpertSet {
            level: None,
            rank: self.q.a.len(),
            blocks: vec![BlockAdapters {
                q: self.q.to_adapter(dtype),
                v: self.v.to_adapter(dtype),
                fc1: self.fc1.to_adapter(dtype),
                fc2: self.fc2.to_adapter(dtype),
            }],
        }
    }
}

pub fn mse_ref(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// NT-Xent by enumerating the `2B x 2B` cosine-similarity matrix.
pub fn nt_xent_ref(za: &Mat, zb: &Mat, tau: f64) -> f64 {
    let b = za.len();
    let z: Mat = za
        .iter()
        .chain(zb)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let n = 2 * b;
    let mut total = 0.0;
    for i in 0..n {
        let pos = (i + b) % n;
        let sim = |j: usize| z[i].iter().zip(&z[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
        let denom: f64 = (0..n).filter(|&j| j != i).map(|j| sim(j).exp()).sum();
        total += -(sim(pos).exp() / denom).ln();
    }
    total / n as f64
}

/// Cross-entropy and soft Dice for logits `[B][C][P]` (P = H*W pixels) and
/// labels `[B][P]`. Dice sums pool over the batch, foreground classes only.
pub fn ce_dice_ref(logits: &[Mat], labels: &[Vec<usize>], eps: f64) -> (f64, f64) {
    let c = logits[0].len();
    let p = logits[0][0].len();
    let mut ce = 0.0;
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut qsum = vec![0.0; c];
    for (lb, yb) in logits.iter().zip(labels) {
        for px in 0..p {
            let m = (0..c).map(|k| lb[k][px]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (lb[k][px] - m).exp()).sum();
            for k in 0..c {
                let prob = (lb[k][px] - m).exp() / z;
                let q = (yb[px] == k) as u8 as f64;
                inter[k] += prob * q;
                psum[k] += prob;
                qsum[k] += q;
            }
            ce -= (lb[yb[px]][px] - m) - z.ln();
        }
    }
    ce /= (logits.len() * p) as f64;
    let dice: f64 = (1..c).map(|k| (2.0 * inter[k] + eps) / (psum[k] + qsum[k] + eps)).sum::<f64>() / (c - 1) as f64;
    (ce, 1.0 - dice)
}

/// Boolean volume `[d][h][w]` flattened.
#[derive(Clone, Debug)]
pub struct Vol {
    pub shape: [usize; 3],
    pub data: Vec<bool>,
}

impl Vol {
    pub fn random(r: &mut ChaCha8Rng, shape: [usize; 3], p: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| r.random_bool(p)).collect(),
        }
    }

    fn at(&self, z: i64, y: i64, x: i64) -> Option<bool> {
        let [d, h, w] = self.shape;
        if z < 0 || y < 0 || x < 0 || z >= d as i64 || y >= h as i64 || x >= w as i64 {
            return None;
        }
        Some(self.data[((z as usize) * h + y as usize) * w + x as usize])
    }

    /// Foreground voxels touching background or the grid edge through a
    /// face, along non-singleton axes.
    pub fn boundary(&self) -> Vec<[f64; 3]> {
        let [d, h, w] = self.shape;
        let mut out = Vec::new();
        for z in 0..d as i64 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if self.at(z, y, x) != Some(true) {
                        continue;
                    }
                    let mut nbrs = Vec::new();
                    if d > 1 {
                        nbrs.extend([(z - 1, y, x), (z + 1, y, x)]);
                    }
                    if h > 1 {
                        nbrs.extend([(z, y - 1, x), (z, y + 1, x)]);
                    }
                    if w > 1 {
                        nbrs.extend([(z, y, x - 1), (z, y, x + 1)]);
                    }
                    if nbrs.iter().any(|&(a, b, c)| self.at(a, b, c) != Some(true)) {
                        out.push([z as f64, y as f64, x as f64]);
                    }
                }
            }
        }
        out
    }
}

pub fn dice_ref(a: &Vol, b: &Vol) -> f64 {
    let na = a.data.iter().filter(|&&v| v).count();
    let nb = b.data.iter().filter(|&&v| v).count();
    let both = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

pub fn hausdorff_ref(a: &Vol, b: &Vol) -> f64 {
    let (pa, pb) = (a.boundary(), b.boundary());
    if pa.is_empty() && pb.is_empty() {
        return 0.0;
    }
    if pa.is_empty() || pb.is_empty() {
        return a.shape.iter().map(|&s| (s * s) as f64).sum::<f64>().sqrt();
    }
    let dist = |p: &[f64; 3], q: &[f64; 3]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

/// Central finite difference of `f` at `x[i]`.
pub fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += h;
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
