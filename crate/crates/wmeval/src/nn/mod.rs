//! Minimal dense transformer with hand-written reverse-mode gradients.
//!
//! The model is a small pre-norm bidirectional transformer over token
//! sequences: token + position + segment embeddings plus an additive
//! diffusion-level embedding, full self-attention with PAD keys excluded,
//! GELU feed-forward blocks, and a projection to vocabulary logits at every
//! position. All math is generic over [`Scalar`] so the same code runs in
//! f32 for training and f64 for finite-difference verification.

mod checkpoint;
mod optim;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_verified, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
};
pub use optim::{AdamW, OptimizerConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Training-time float width. The f64 instantiation exists for gradient
/// verification only.
pub type Float = f32;

/// Floating-point scalar the engine is generic over.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Hyperparameters of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub n_segments: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::Config("dim must be divisible by heads".into()));
        }
        if self.layers == 0 || self.heads == 0 || self.ff_mult == 0 {
            return Err(Error::Config("layers, heads, ff_mult must be positive".into()));
        }
        Ok(())
    }

    fn ff_dim(&self) -> usize {
        self.dim * self.ff_mult
    }
}

/// One named region of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn build_registry(config: &ModelConfig) -> Vec<ParamInfo> {
    let d = config.dim;
    let ff = config.ff_dim();
    let mut registry = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        registry.push(ParamInfo { name, offset, shape });
        offset += len;
    };
    push("tok_emb".into(), vec![config.vocab_size, d]);
    push("pos_emb".into(), vec![config.max_seq_len, d]);
    push("seg_emb".into(), vec![config.n_segments, d]);
    push("lambda_emb".into(), vec![d]);
    for l in 0..config.layers {
        push(format!("layer{l}.ln1.gain"), vec![d]);
        push(format!("layer{l}.ln1.bias"), vec![d]);
        push(format!("layer{l}.attn.wq"), vec![d, d]);
        push(format!("layer{l}.attn.bq"), vec![d]);
        push(format!("layer{l}.attn.wk"), vec![d, d]);
        push(format!("layer{l}.attn.bk"), vec![d]);
        push(format!("layer{l}.attn.wv"), vec![d, d]);
        push(format!("layer{l}.attn.bv"), vec![d]);
        push(format!("layer{l}.attn.wo"), vec![d, d]);
        push(format!("layer{l}.attn.bo"), vec![d]);
        push(format!("layer{l}.ln2.gain"), vec![d]);
        push(format!("layer{l}.ln2.bias"), vec![d]);
        push(format!("layer{l}.ff.wfc"), vec![d, ff]);
        push(format!("layer{l}.ff.bfc"), vec![ff]);
        push(format!("layer{l}.ff.wproj"), vec![ff, d]);
        push(format!("layer{l}.ff.bproj"), vec![d]);
    }
    push("lnf.gain".into(), vec![d]);
    push("lnf.bias".into(), vec![d]);
    push("out.w".into(), vec![d, config.vocab_size]);
    push("out.b".into(), vec![config.vocab_size]);
    registry
}

/// Transformer weights over a flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub registry: Vec<ParamInfo>,
    pub params: Vec<F>,
}

impl<F: Scalar> Model<F> {
    /// Deterministic scaled-Gaussian init from the config seed; norm gains
    /// start at one, all biases at zero.
    pub fn new(config: ModelConfig) -> Result<Model<F>> {
        config.validate()?;
        let registry = build_registry(&config);
        let n_params: usize = registry.iter().map(|p| p.len()).sum();
        let mut params = vec![F::ZERO; n_params];
        let std = config.init_scale / (config.dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for info in &registry {
            let is_gain = info.name.ends_with(".gain");
            let is_bias = info.name.ends_with("bias")
                || info.name.ends_with(".bq")
                || info.name.ends_with(".bk")
                || info.name.ends_with(".bv")
                || info.name.ends_with(".bo")
                || info.name.ends_with(".bfc")
                || info.name.ends_with(".bproj")
                || info.name == "out.b";
            for p in &mut params[info.offset..info.offset + info.len()] {
                *p = if is_gain {
                    F::ONE
                } else if is_bias {
                    F::ZERO
                } else {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    F::from_f64(x * std)
                };
            }
        }
        Ok(Model { config, registry, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, name: &str) -> &[F] {
        let info = self
            .registry
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.params[info.offset..info.offset + info.len()]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut [F] {
        let info = self
            .registry
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        &mut self.params[info.offset..info.offset + info.len()]
    }

    /// Name of the parameter region owning flat index `idx`.
    pub fn param_name_at(&self, idx: usize) -> &str {
        self.registry
            .iter()
            .find(|p| idx >= p.offset && idx < p.offset + p.len())
            .map(|p| p.name.as_str())
            .unwrap_or("<out of range>")
    }

    /// Cast parameters into another scalar width (used by the verification
    /// build to replay an f32 model in f64).
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            registry: self.registry.clone(),
            params: self.params.iter().map(|p| G::from_f64(p.to_f64())).collect(),
        }
    }
}

/// Inputs for one forward pass. `key_mask[i] = true` excludes position `i`
/// as an attention key (used for PAD positions).
#[derive(Clone)]
pub struct SequenceInput<'a> {
    pub ids: &'a [u32],
    pub segments: &'a [u8],
    pub key_mask: &'a [bool],
    pub lambda: f64,
}

/// Intermediate activations kept for the backward pass.
struct LayerCache<F> {
    ln1_y: Vec<F>,
    ln1_rstd: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    attn_cat: Vec<F>,
    ln2_y: Vec<F>,
    ln2_rstd: Vec<F>,
    h_pre: Vec<F>,
    h_act: Vec<F>,
}

pub struct ForwardPass<F: Scalar> {
    pub seq_len: usize,
    pub logits: Vec<F>,
    layers: Vec<LayerCache<F>>,
    lnf_y: Vec<F>,
    lnf_rstd: Vec<F>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::ONE + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::ONE + t) + half * x * (F::ONE - t * t) * c * (F::ONE + three * a * x * x)
}

/// out[m,n] = a[m,k] . b[k,n] + bias[n]
fn linear<F: Scalar>(a: &[F], b: &[F], bias: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let o = &mut out[i * n..(i + 1) * n];
        o.copy_from_slice(bias);
        for (p, &av) in row.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
}

/// da[m,k] += dout[m,n] . b^T ; db[k,n] += a^T . dout ; dbias[n] += sum rows
fn linear_backward<F: Scalar>(
    a: &[F],
    b: &[F],
    dout: &[F],
    m: usize,
    k: usize,
    n: usize,
    da: &mut [F],
    db: &mut [F],
    dbias: &mut [F],
) {
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for (j, dv) in drow.iter().enumerate() {
            dbias[j] += *dv;
        }
        let arow = &a[i * k..(i + 1) * k];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::ZERO;
            let dbrow = &mut db[p * n..(p + 1) * n];
            let av = arow[p];
            for j in 0..n {
                acc += drow[j] * brow[j];
                dbrow[j] += av * drow[j];
            }
            darow[p] += acc;
        }
    }
}

/// Per-position layer norm; returns normalized y and reciprocal std.
fn layer_norm<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    t: usize,
    d: usize,
    y_norm: &mut [F],
    rstd: &mut [F],
    out: &mut [F],
) {
    let eps = F::from_f64(1e-5);
    let dn = F::from_f64(d as f64);
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mut mean = F::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / dn;
        let mut var = F::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / dn;
        let r = F::ONE / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let yn = (row[j] - mean) * r;
            y_norm[i * d + j] = yn;
            out[i * d + j] = yn * gain[j] + bias[j];
        }
    }
}

fn layer_norm_backward<F: Scalar>(
    y_norm: &[F],
    rstd: &[F],
    gain: &[F],
    dout: &[F],
    t: usize,
    d: usize,
    dx: &mut [F],
    dgain: &mut [F],
    dbias: &mut [F],
) {
    let dn = F::from_f64(d as f64);
    for i in 0..t {
        let yn = &y_norm[i * d..(i + 1) * d];
        let dr = &dout[i * d..(i + 1) * d];
        let mut sum_g = F::ZERO;
        let mut sum_gy = F::ZERO;
        for j in 0..d {
            let g = dr[j] * gain[j];
            sum_g += g;
            sum_gy += g * yn[j];
            dgain[j] += dr[j] * yn[j];
            dbias[j] += dr[j];
        }
        let mg = sum_g / dn;
        let mgy = sum_gy / dn;
        for j in 0..d {
            let g = dr[j] * gain[j];
            dx[i * d + j] += (g - mg - yn[j] * mgy) * rstd[i];
        }
    }
}

impl<F: Scalar> Model<F> {
    /// Full bidirectional forward pass; deterministic for fixed inputs.
    pub fn forward(&self, input: &SequenceInput<'_>) -> Result<ForwardPass<F>> {
        let t = input.ids.len();
        let d = self.config.dim;
        let v = self.config.vocab_size;
        if t > self.config.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {t} exceeds max {}",
                self.config.max_seq_len
            )));
        }
        for (pos, &id) in input.ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::Decode { pos, id });
            }
        }
        debug_assert_eq!(input.segments.len(), t);
        debug_assert_eq!(input.key_mask.len(), t);

        let tok = self.param("tok_emb");
        let pos = self.param("pos_emb");
        let seg = self.param("seg_emb");
        let lam = self.param("lambda_emb");
        let lambda = F::from_f64(input.lambda);
        let mut x = vec![F::ZERO; t * d];
        for i in 0..t {
            let te = &tok[input.ids[i] as usize * d..];
            let pe = &pos[i * d..];
            let se = &seg[input.segments[i] as usize * d..];
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j] + se[j] + lambda * lam[j];
            }
        }

        let heads = self.config.heads;
        let hd = d / heads;
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());
        let ff = self.config.ff_dim();
        let mut layers = Vec::with_capacity(self.config.layers);

        for l in 0..self.config.layers {
            let mut ln1_y = vec![F::ZERO; t * d];
            let mut ln1_rstd = vec![F::ZERO; t];
            let mut ln1_out = vec![F::ZERO; t * d];
            layer_norm(
                &x,
                self.param(&format!("layer{l}.ln1.gain")),
                self.param(&format!("layer{l}.ln1.bias")),
                t,
                d,
                &mut ln1_y,
                &mut ln1_rstd,
                &mut ln1_out,
            );
            let mut q = vec![F::ZERO; t * d];
            let mut k = vec![F::ZERO; t * d];
            let mut vv = vec![F::ZERO; t * d];
            linear(
                &ln1_out,
                self.param(&format!("layer{l}.attn.wq")),
                self.param(&format!("layer{l}.attn.bq")),
                t,
                d,
                d,
                &mut q,
            );
            linear(
                &ln1_out,
                self.param(&format!("layer{l}.attn.wk")),
                self.param(&format!("layer{l}.attn.bk")),
                t,
                d,
                d,
                &mut k,
            );
            linear(
                &ln1_out,
                self.param(&format!("layer{l}.attn.wv")),
                self.param(&format!("layer{l}.attn.bv")),
                t,
                d,
                d,
                &mut vv,
            );

            let mut probs = vec![F::ZERO; heads * t * t];
            let mut attn_cat = vec![F::ZERO; t * d];
            for h in 0..heads {
                let off = h * hd;
                for i in 0..t {
                    let qrow = &q[i * d + off..i * d + off + hd];
                    let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                    let mut maxv = F::from_f64(f64::NEG_INFINITY);
                    for u in 0..t {
                        if input.key_mask[u] {
                            continue;
                        }
                        let krow = &k[u * d + off..u * d + off + hd];
                        let mut s = F::ZERO;
                        for j in 0..hd {
                            s += qrow[j] * krow[j];
                        }
                        let s = s * scale;
                        prow[u] = s;
                        maxv = maxv.maximum(s);
                    }
                    let mut denom = F::ZERO;
                    for u in 0..t {
                        if input.key_mask[u] {
                            prow[u] = F::ZERO;
                            continue;
                        }
                        let e = (prow[u] - maxv).exp();
                        prow[u] = e;
                        denom += e;
                    }
                    if denom > F::ZERO {
                        for u in 0..t {
                            prow[u] = prow[u] / denom;
                        }
                    }
                    let orow = &mut attn_cat[i * d + off..i * d + off + hd];
                    for u in 0..t {
                        let p = prow[u];
                        if p == F::ZERO {
                            continue;
                        }
                        let vrow = &vv[u * d + off..u * d + off + hd];
                        for j in 0..hd {
                            orow[j] += p * vrow[j];
                        }
                    }
                }
            }

            let mut attn_out = vec![F::ZERO; t * d];
            linear(
                &attn_cat,
                self.param(&format!("layer{l}.attn.wo")),
                self.param(&format!("layer{l}.attn.bo")),
                t,
                d,
                d,
                &mut attn_out,
            );
            for (xv, av) in x.iter_mut().zip(&attn_out) {
                *xv += *av;
            }

            let mut ln2_y = vec![F::ZERO; t * d];
            let mut ln2_rstd = vec![F::ZERO; t];
            let mut ln2_out = vec![F::ZERO; t * d];
            layer_norm(
                &x,
                self.param(&format!("layer{l}.ln2.gain")),
                self.param(&format!("layer{l}.ln2.bias")),
                t,
                d,
                &mut ln2_y,
                &mut ln2_rstd,
                &mut ln2_out,
            );
            let mut h_pre = vec![F::ZERO; t * ff];
            linear(
                &ln2_out,
                self.param(&format!("layer{l}.ff.wfc")),
                self.param(&format!("layer{l}.ff.bfc")),
                t,
                d,
                ff,
                &mut h_pre,
            );
            let h_act: Vec<F> = h_pre.iter().map(|&h| gelu(h)).collect();
            let mut ff_out = vec![F::ZERO; t * d];
            linear(
                &h_act,
                self.param(&format!("layer{l}.ff.wproj")),
                self.param(&format!("layer{l}.ff.bproj")),
                t,
                ff,
                d,
                &mut ff_out,
            );
            for (xv, fv) in x.iter_mut().zip(&ff_out) {
                *xv += *fv;
            }

            layers.push(LayerCache {
                ln1_y,
                ln1_rstd,
                q,
                k,
                v: vv,
                probs,
                attn_cat,
                ln2_y,
                ln2_rstd,
                h_pre,
                h_act,
            });
        }

        let mut lnf_y = vec![F::ZERO; t * d];
        let mut lnf_rstd = vec![F::ZERO; t];
        let mut lnf_out = vec![F::ZERO; t * d];
        layer_norm(
            &x,
            self.param("lnf.gain"),
            self.param("lnf.bias"),
            t,
            d,
            &mut lnf_y,
            &mut lnf_rstd,
            &mut lnf_out,
        );
        let mut logits = vec![F::ZERO; t * v];
        linear(&lnf_out, self.param("out.w"), self.param("out.b"), t, d, v, &mut logits);

        Ok(ForwardPass { seq_len: t, logits, layers, lnf_y, lnf_rstd })
    }
}

/// One weighted reconstruction target: (position, clean token id, weight).
#[derive(Debug, Clone)]
pub struct LossTarget {
    pub pos: usize,
    pub token: u32,
    pub weight: f64,
}

/// One batch item: a (possibly corrupted) sequence plus its reconstruction
/// targets and the per-sample loss scale (the diffusion module sets this to
/// `1 / (m(lambda) * target_len)`).
pub struct LossItem<'a> {
    pub input: SequenceInput<'a>,
    pub targets: Vec<LossTarget>,
    pub scale: f64,
}

pub fn softmax_row<F: Scalar>(row: &[F]) -> Vec<F> {
    let mut maxv = row[0];
    for &x in row {
        maxv = maxv.maximum(x);
    }
    let mut out: Vec<F> = row.iter().map(|&x| (x - maxv).exp()).collect();
    let mut denom = F::ZERO;
    for &e in &out {
        denom += e;
    }
    for e in &mut out {
        *e = *e / denom;
    }
    out
}

/// Weighted masked cross-entropy of one item, forward only. Independent
/// path used by finite-difference verification.
pub fn loss_only<F: Scalar>(model: &Model<F>, item: &LossItem<'_>) -> Result<f64> {
    if item.targets.is_empty() {
        return Ok(0.0);
    }
    let fwd = model.forward(&item.input)?;
    let v = model.config.vocab_size;
    let mut loss = 0.0;
    for tgt in &item.targets {
        let probs = softmax_row(&fwd.logits[tgt.pos * v..(tgt.pos + 1) * v]);
        loss -= tgt.weight * probs[tgt.token as usize].to_f64().ln();
    }
    Ok(loss * item.scale)
}

/// Mean weighted masked cross-entropy over the batch plus gradients for
/// every parameter. Batch items are processed concurrently; gradients are
/// reduced in item order so results do not depend on worker count.
pub fn loss_and_grad<F: Scalar>(model: &Model<F>, batch: &[LossItem<'_>]) -> Result<(f64, Vec<F>)> {
    use rayon::prelude::*;
    let per_item: Vec<Result<(f64, Vec<F>)>> = batch
        .par_iter()
        .map(|item| item_grad(model, item))
        .collect();
    let mut grad = vec![F::ZERO; model.n_params()];
    let mut loss = 0.0;
    let bn = batch.len().max(1) as f64;
    let inv_b = F::from_f64(1.0 / bn);
    for r in per_item {
        let (l, g) = r?;
        loss += l;
        for (acc, gv) in grad.iter_mut().zip(&g) {
            *acc += inv_b * *gv;
        }
    }
    Ok((loss / bn, grad))
}

fn item_grad<F: Scalar>(model: &Model<F>, item: &LossItem<'_>) -> Result<(f64, Vec<F>)> {
    let mut grad = vec![F::ZERO; model.n_params()];
    if item.targets.is_empty() {
        return Ok((0.0, grad));
    }
    let fwd = model.forward(&item.input)?;
    let t = fwd.seq_len;
    let _d = model.config.dim;
    let v = model.config.vocab_size;
    let scale = F::from_f64(item.scale);

    let mut loss = 0.0;
    let mut dlogits = vec![F::ZERO; t * v];
    for tgt in &item.targets {
        let probs = softmax_row(&fwd.logits[tgt.pos * v..(tgt.pos + 1) * v]);
        loss -= tgt.weight * probs[tgt.token as usize].to_f64().ln();
        let w = F::from_f64(tgt.weight) * scale;
        let drow = &mut dlogits[tgt.pos * v..(tgt.pos + 1) * v];
        for (j, p) in probs.iter().enumerate() {
            drow[j] += w * *p;
        }
        drow[tgt.token as usize] += -w;
    }
    let loss = loss * item.scale;

    backward(model, item, &fwd, &dlogits, &mut grad)?;
    Ok((loss, grad))
}

fn backward<F: Scalar>(
    model: &Model<F>,
    item: &LossItem<'_>,
    fwd: &ForwardPass<F>,
    dlogits: &[F],
    grad: &mut [F],
) -> Result<()> {
    let t = fwd.seq_len;
    let d = model.config.dim;
    let v = model.config.vocab_size;
    let ff = model.config.ff_dim();
    let heads = model.config.heads;
    let hd = d / heads;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let input = &item.input;

    let region = |name: &str| {
        let info = model
            .registry
            .iter()
            .find(|p| p.name == name)
            .expect("unknown param");
        (info.offset, info.len())
    };

    // Output projection.
    let mut lnf_out = vec![F::ZERO; t * d];
    // Reconstruct lnf_out = lnf_y * gain + bias.
    {
        let gain = model.param("lnf.gain");
        let bias = model.param("lnf.bias");
        for i in 0..t {
            for j in 0..d {
                lnf_out[i * d + j] = fwd.lnf_y[i * d + j] * gain[j] + bias[j];
            }
        }
    }
    let mut d_lnf_out = vec![F::ZERO; t * d];
    {
        let (wo, wl) = region("out.w");
        let (bo, bl) = region("out.b");
        let w = model.param("out.w").to_vec();
        let mut dw = vec![F::ZERO; wl];
        let mut db = vec![F::ZERO; bl];
        linear_backward(&lnf_out, &w, dlogits, t, d, v, &mut d_lnf_out, &mut dw, &mut db);
        for (gv, x) in grad[wo..wo + wl].iter_mut().zip(&dw) {
            *gv += *x;
        }
        for (gv, x) in grad[bo..bo + bl].iter_mut().zip(&db) {
            *gv += *x;
        }
    }

    let mut dx = vec![F::ZERO; t * d];
    {
        let gain = model.param("lnf.gain").to_vec();
        let (go, gl) = region("lnf.gain");
        let (bo, bl) = region("lnf.bias");
        let mut dgain = vec![F::ZERO; gl];
        let mut dbias = vec![F::ZERO; bl];
        layer_norm_backward(
            &fwd.lnf_y,
            &fwd.lnf_rstd,
            &gain,
            &d_lnf_out,
            t,
            d,
            &mut dx,
            &mut dgain,
            &mut dbias,
        );
        for (gv, x) in grad[go..go + gl].iter_mut().zip(&dgain) {
            *gv += *x;
        }
        for (gv, x) in grad[bo..bo + bl].iter_mut().zip(&dbias) {
            *gv += *x;
        }
    }

    for l in (0..model.config.layers).rev() {
        let cache = &fwd.layers[l];

        // Feed-forward block backward. dx currently holds dL/d(x after ff).
        let mut ln2_out = vec![F::ZERO; t * d];
        {
            let gain = model.param(&format!("layer{l}.ln2.gain"));
            let bias = model.param(&format!("layer{l}.ln2.bias"));
            for i in 0..t {
                for j in 0..d {
                    ln2_out[i * d + j] = cache.ln2_y[i * d + j] * gain[j] + bias[j];
                }
            }
        }
        let d_ffout = dx.clone(); // residual passthrough keeps dx
        let mut d_hact = vec![F::ZERO; t * ff];
        {
            let w = model.param(&format!("layer{l}.ff.wproj")).to_vec();
            let (wo, wl) = region(&format!("layer{l}.ff.wproj"));
            let (bo, bl) = region(&format!("layer{l}.ff.bproj"));
            let mut dw = vec![F::ZERO; wl];
            let mut db = vec![F::ZERO; bl];
            linear_backward(&cache.h_act, &w, &d_ffout, t, ff, d, &mut d_hact, &mut dw, &mut db);
            for (gv, x) in grad[wo..wo + wl].iter_mut().zip(&dw) {
                *gv += *x;
            }
            for (gv, x) in grad[bo..bo + bl].iter_mut().zip(&db) {
                *gv += *x;
            }
        }
        let d_hpre: Vec<F> = d_hact
            .iter()
            .zip(&cache.h_pre)
            .map(|(&dh, &h)| dh * gelu_grad(h))
            .collect();
        let mut d_ln2out = vec![F::ZERO; t * d];
        {
            let w = model.param(&format!("layer{l}.ff.wfc")).to_vec();
            let (wo, wl) = region(&format!("layer{l}.ff.wfc"));
            let (bo, bl) = region(&format!("layer{l}.ff.bfc"));
            let mut dw = vec![F::ZERO; wl];
            let mut db = vec![F::ZERO; bl];
            linear_backward(&ln2_out, &w, &d_hpre, t, d, ff, &mut d_ln2out, &mut dw, &mut db);
            for (gv, x) in grad[wo..wo + wl].iter_mut().zip(&dw) {
                *gv += *x;
            }
            for (gv, x) in grad[bo..bo + bl].iter_mut().zip(&db) {
                *gv += *x;
            }
        }
        {
            let gain = model.param(&format!("layer{l}.ln2.gain")).to_vec();
            let (go, gl) = region(&format!("layer{l}.ln2.gain"));
            let (bo, bl) = region(&format!("layer{l}.ln2.bias"));
            let mut dgain = vec![F::ZERO; gl];
            let mut dbias = vec![F::ZERO; bl];
            layer_norm_backward(
                &cache.ln2_y,
                &cache.ln2_rstd,
                &gain,
                &d_ln2out,
                t,
                d,
                &mut dx,
                &mut dgain,
                &mut dbias,
            );
            for (gv, x) in grad[go..go + gl].iter_mut().zip(&dgain) {
                *gv += *x;
            }
            for (gv, x) in grad[bo..bo + bl].iter_mut().zip(&dbias) {
                *gv += *x;
            }
        }

        // Attention block backward. dx now holds dL/d(x_mid).
        let mut ln1_out = vec![F::ZERO; t * d];
        {
            let gain = model.param(&format!("layer{l}.ln1.gain"));
            let bias = model.param(&format!("layer{l}.ln1.bias"));
            for i in 0..t {
                for j in 0..d {
                    ln1_out[i * d + j] = cache.ln1_y[i * d + j] * gain[j] + bias[j];
                }
            }
        }
        let d_attnout = dx.clone();
        let mut d_attncat = vec![F::ZERO; t * d];
        {
            let w = model.param(&format!("layer{l}.attn.wo")).to_vec();
            let (wo, wl) = region(&format!("layer{l}.attn.wo"));
            let (bo, bl) = region(&format!("layer{l}.attn.bo"));
            let mut dw = vec![F::ZERO; wl];
            let mut db = vec![F::ZERO; bl];
            linear_backward(&cache.attn_cat, &w, &d_attnout, t, d, d, &mut d_attncat, &mut dw, &mut db);
            for (gv, x) in grad[wo..wo + wl].iter_mut().zip(&dw) {
                *gv += *x;
            }
            for (gv, x) in grad[bo..bo + bl].iter_mut().zip(&db) {
                *gv += *x;
            }
        }

        let mut dq = vec![F::ZERO; t * d];
        let mut dk = vec![F::ZERO; t * d];
        let mut dv = vec![F::ZERO; t * d];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..t {
                let prow = &cache.probs[(h * t + i) * t..(h * t + i + 1) * t];
                let dorow = &d_attncat[i * d + off..i * d + off + hd];
                // dprobs and dv.
                let mut dprobs = vec![F::ZERO; t];
                for u in 0..t {
                    let p = prow[u];
                    if p == F::ZERO && input.key_mask[u] {
                        continue;
                    }
                    let vrow = &cache.v[u * d + off..u * d + off + hd];
                    let mut acc = F::ZERO;
                    for j in 0..hd {
                        acc += dorow[j] * vrow[j];
                    }
                    dprobs[u] = acc;
                    let dvrow = &mut dv[u * d + off..u * d + off + hd];
                    for j in 0..hd {
                        dvrow[j] += p * dorow[j];
                    }
                }
                // Softmax backward.
                let mut dot = F::ZERO;
                for u in 0..t {
                    dot += prow[u] * dprobs[u];
                }
                for u in 0..t {
                    if input.key_mask[u] {
                        continue;
                    }
                    let ds = prow[u] * (dprobs[u] - dot) * scale;
                    if ds == F::ZERO {
                        continue;
                    }
                    let krow = &cache.k[u * d + off..u * d + off + hd];
                    let qrow = &cache.q[i * d + off..i * d + off + hd];
                    let dqrow = &mut dq[i * d + off..i * d + off + hd];
                    for j in 0..hd {
                        dqrow[j] += ds * krow[j];
                    }
                    let dkrow = &mut dk[u * d + off..u * d + off + hd];
                    for j in 0..hd {
                        dkrow[j] += ds * qrow[j];
                    }
                }
            }
        }

        let mut d_ln1out = vec![F::ZERO; t * d];
        for (proj, dproj) in [("wq", &dq), ("wk", &dk), ("wv", &dv)] {
            let w = model.param(&format!("layer{l}.attn.{proj}")).to_vec();
            let (wo, wl) = region(&format!("layer{l}.attn.{proj}"));
            let bname = format!("layer{l}.attn.b{}", &proj[1..]);
            let (bo, bl) = region(&bname);
            let mut dw = vec![F::ZERO; wl];
            let mut db = vec![F::ZERO; bl];
            linear_backward(&ln1_out, &w, dproj, t, d, d, &mut d_ln1out, &mut dw, &mut db);
            for (gv, x) in grad[wo..wo + wl].iter_mut().zip(&dw) {
                *gv += *x;
            }
            for (gv, x) in grad[bo..bo + bl].iter_mut().zip(&db) {
                *gv += *x;
            }
        }
        {
            let gain = model.param(&format!("layer{l}.ln1.gain")).to_vec();
            let (go, gl) = region(&format!("layer{l}.ln1.gain"));
            let (bo, bl) = region(&format!("layer{l}.ln1.bias"));
            let mut dgain = vec![F::ZERO; gl];
            let mut dbias = vec![F::ZERO; bl];
            layer_norm_backward(
                &cache.ln1_y,
                &cache.ln1_rstd,
                &gain,
                &d_ln1out,
                t,
                d,
                &mut dx,
                &mut dgain,
                &mut dbias,
            );
            for (gv, x) in grad[go..go + gl].iter_mut().zip(&dgain) {
                *gv += *x;
            }
            for (gv, x) in grad[bo..bo + bl].iter_mut().zip(&dbias) {
                *gv += *x;
            }
        }
    }

    // Embedding gradients.
    {
        let lambda = F::from_f64(input.lambda);
        let (to, _tl) = region("tok_emb");
        let (po, _pl) = region("pos_emb");
        let (so, _sl) = region("seg_emb");
        let (lo, ll) = region("lambda_emb");
        let _ = ll;
        for i in 0..t {
            let drow = &dx[i * d..(i + 1) * d];
            let tok_base = to + input.ids[i] as usize * d;
            let pos_base = po + i * d;
            let seg_base = so + input.segments[i] as usize * d;
            for j in 0..d {
                grad[tok_base + j] += drow[j];
                grad[pos_base + j] += drow[j];
                grad[seg_base + j] += drow[j];
                grad[lo + j] += lambda * drow[j];
            }
        }
    }
    Ok(())
}

/// Compare analytic gradients against central finite differences on
/// `n_samples` randomly chosen parameters. Returns the worst relative error.
/// Meant for the f64 instantiation; the FD side only uses the forward pass.
pub fn finite_difference_check(
    model: &Model<f64>,
    batch: &[LossItem<'_>],
    n_samples: usize,
    h: f64,
    seed: u64,
    mutate: bool,
) -> Result<f64> {
    use rand::Rng;
    let (_, mut grads) = loss_and_grad(model, batch)?;
    if mutate {
        // Negative control: deliberately corrupt one gradient entry.
        if let Some(g) = grads.get_mut(0) {
            *g += 1.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut work = model.clone();
    for sample in 0..n_samples {
        // Under mutation, visit the corrupted entry first so the negative
        // control fails deterministically.
        let idx = if mutate && sample == 0 { 0 } else { rng.gen_range(0..work.n_params()) };
        let orig = work.params[idx];
        work.params[idx] = orig + h;
        let mut lp = 0.0;
        for item in batch {
            lp += loss_only(&work, item)?;
        }
        work.params[idx] = orig - h;
        let mut lm = 0.0;
        for item in batch {
            lm += loss_only(&work, item)?;
        }
        work.params[idx] = orig;
        let fd = (lp - lm) / (2.0 * h) / batch.len().max(1) as f64;
        let an = grads[idx];
        let denom = an.abs().max(fd.abs()).max(1e-6);
        let rel = (an - fd).abs() / denom;
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
