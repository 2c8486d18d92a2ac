//! Conformer building blocks: dense, layer norm, feed-forward, convolution
//! and attention modules.

use crate::autodiff::{Real, Tensor, Var, MASK_NEG};
use crate::error::{Error, Result};

use super::params::{standalone, Init, ParamId, ParamStore, Params};

pub const LN_EPS: f64 = 1e-5;

/// Additive mask letting frame `t` see frames `t + 1 - window ..= t`.
pub fn local_causal_mask<F: Real>(frames: usize, window: usize) -> Tensor<F> {
    let neg = F::lit(MASK_NEG);
    Tensor::from_fn(&[frames, frames], |i| {
        let (t, s) = (i / frames, i % frames);
        if s <= t && t - s < window {
            F::zero()
        } else {
            neg
        }
    })
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub(crate) fn new<F: Real>(init: &mut Init<'_, F>, inputs: usize, outputs: usize) -> Self {
        Self {
            w: init.fan_in_uniform("w", &[inputs, outputs], inputs),
            b: Some(init.constant("b", &[outputs], 0.0)),
        }
    }

    pub(crate) fn without_bias<F: Real>(init: &mut Init<'_, F>, inputs: usize, outputs: usize) -> Self {
        Self {
            w: init.fan_in_uniform("w", &[inputs, outputs], inputs),
            b: None,
        }
    }

    pub(crate) fn zeros<F: Real>(init: &mut Init<'_, F>, inputs: usize, outputs: usize) -> Self {
        Self {
            w: init.constant("w", &[inputs, outputs], 0.0),
            b: Some(init.constant("b", &[outputs], 0.0)),
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Params<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        match self.b {
            Some(b) => x.affine(p.get(self.w), p.get(b)),
            None => x.matmul(p.get(self.w)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<F: Real>(init: &mut Init<'_, F>, dim: usize) -> Self {
        Self {
            gamma: init.constant("gamma", &[dim], 1.0),
            beta: init.constant("beta", &[dim], 0.0),
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Params<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), F::lit(LN_EPS))
    }
}

/// `LN → dense(d → k·d) → swish → dense(k·d → d)`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Dense,
    pub down: Dense,
}

impl FeedForward {
    pub(crate) fn new<F: Real>(init: &mut Init<'_, F>, d: usize, multiplier: usize) -> Self {
        Self {
            norm: LayerNorm::new(&mut init.scope("norm"), d),
            up: Dense::new(&mut init.scope("up"), d, d * multiplier),
            down: Dense::new(&mut init.scope("down"), d * multiplier, d),
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Params<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let h = self.up.forward(p, self.norm.forward(p, x)?)?.swish()?;
        self.down.forward(p, h)
    }

    /// `x + ½·FFN(x)`.
    pub fn half_residual<'t, F: Real>(&self, p: &Params<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.add(self.forward(p, x)?.scale(F::lit(0.5))?)
    }
}

/// `LN → pointwise(d → 2d) → GLU → causal depthwise conv → LN → swish → pointwise(d → d)`.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Dense,
    pub depthwise_w: ParamId,
    pub depthwise_b: ParamId,
    pub norm_mid: LayerNorm,
    pub pointwise_out: Dense,
}

impl ConvModule {
    pub(crate) fn new<F: Real>(init: &mut Init<'_, F>, d: usize, kernel: usize) -> Self {
        Self {
            norm: LayerNorm::new(&mut init.scope("norm"), d),
            pointwise_in: Dense::new(&mut init.scope("pw_in"), d, 2 * d),
            depthwise_w: init.fan_in_uniform("dw_w", &[kernel, d], kernel),
            depthwise_b: init.constant("dw_b", &[d], 0.0),
            norm_mid: LayerNorm::new(&mut init.scope("norm_mid"), d),
            pointwise_out: Dense::new(&mut init.scope("pw_out"), d, d),
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Params<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let h = self.pointwise_in.forward(p, self.norm.forward(p, x)?)?.glu()?;
        let h = h.causal_depthwise_conv1d(p.get(self.depthwise_w), p.get(self.depthwise_b))?;
        let h = self.norm_mid.forward(p, h)?.swish()?;
        self.pointwise_out.forward(p, h)
    }
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    /// Every key, as for a context sequence that lies wholly in the past.
    All,
    /// Keys `t + 1 - window ..= t` for query `t`; queries and keys share a
    /// time axis.
    Causal { window: usize },
}

/// Queries per chunk when evaluating windowed attention.
const QUERY_CHUNK: usize = 64;

fn head_attention<'t, F: Real>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    scale: F,
    mask: Option<&Tensor<F>>,
) -> Result<Var<'t, F>> {
    q.matmul(k.transpose()?)?.scale(scale)?.softmax(mask)?.matmul(v)
}

/// Windowed attention of one head, evaluated chunk by chunk so the cost is
/// linear in sequence length.
fn windowed_head<'t, F: Real>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    scale: F,
    window: usize,
) -> Result<Var<'t, F>> {
    let frames = q.shape()[0];
    if frames <= QUERY_CHUNK {
        return head_attention(q, k, v, scale, Some(&local_causal_mask(frames, window)));
    }
    let neg = F::lit(MASK_NEG);
    let mut chunks = Vec::with_capacity(frames.div_ceil(QUERY_CHUNK));
    for start in (0..frames).step_by(QUERY_CHUNK) {
        let len = QUERY_CHUNK.min(frames - start);
        let k_start = (start + 1).saturating_sub(window);
        let k_len = start + len - k_start;
        let mask = Tensor::from_fn(&[len, k_len], |i| {
            let (t, s) = (start + i / k_len, k_start + i % k_len);
            if s <= t && t - s < window {
                F::zero()
            } else {
                neg
            }
        });
        chunks.push(head_attention(
            q.slice(0, start, len)?,
            k.slice(0, k_start, k_len)?,
            v.slice(0, k_start, k_len)?,
            scale,
            Some(&mask),
        )?);
    }
    q.tape().concat(&chunks, 0)
}

/// Scaled dot-product attention split over `heads` column blocks.
pub fn multi_head_attention<'t, F: Real>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    heads: usize,
    visibility: Visibility,
) -> Result<Var<'t, F>> {
    let (qs, ks) = (q.shape(), k.shape());
    if ks.first() == Some(&0) {
        return Err(Error::EmptyAuxiliary);
    }
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] || k.shape() != v.shape() || qs[1] % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}, {heads} heads", qs, ks, v.shape()),
        ));
    }
    if let Visibility::Causal { window } = visibility {
        if qs[0] != ks[0] || window == 0 {
            return Err(Error::shape(
                "attention",
                format!("causal window {window} over {} queries and {} keys", qs[0], ks[0]),
            ));
        }
    }
    let dh = qs[1] / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let outs = (0..heads)
        .map(|h| {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = k.slice(1, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            match visibility {
                Visibility::All => head_attention(qh, kh, vh, scale, None),
                Visibility::Causal { window } => windowed_head(qh, kh, vh, scale, window),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    q.tape().concat(&outs, 1)
}

/// Pre-norm multi-head attention with output projection. Self-attention uses
/// one norm for all inputs; cross-attention normalises the key/value stream
/// separately.
#[derive(Debug, Clone)]
pub struct Attention {
    pub norm: LayerNorm,
    pub norm_kv: Option<LayerNorm>,
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub out: Dense,
    pub heads: usize,
}

impl Attention {
    pub fn init<F: Real>(d: usize, heads: usize, cross: bool, seed: u64) -> (Self, ParamStore<F>) {
        standalone(seed, |init| Self::new(init, d, heads, cross))
    }

    pub(crate) fn new<F: Real>(init: &mut Init<'_, F>, d: usize, heads: usize, cross: bool) -> Self {
        Self {
            norm: LayerNorm::new(&mut init.scope("norm"), d),
            norm_kv: cross.then(|| LayerNorm::new(&mut init.scope("norm_kv"), d)),
            query: Dense::new(&mut init.scope("q"), d, d),
            // a key bias shifts every score of a query equally, so it has no effect
            key: Dense::without_bias(&mut init.scope("k"), d, d),
            value: Dense::new(&mut init.scope("v"), d, d),
            out: Dense::new(&mut init.scope("o"), d, d),
            heads,
        }
    }

    /// Attend from `x` to `kv` (`None` = self-attention).
    pub fn forward<'t, F: Real>(
        &self,
        p: &Params<'t, F>,
        x: Var<'t, F>,
        kv: Option<Var<'t, F>>,
        visibility: Visibility,
    ) -> Result<Var<'t, F>> {
        let xq = self.norm.forward(p, x)?;
        let src = match (kv, &self.norm_kv) {
            (None, _) => xq,
            (Some(n), Some(norm)) => norm.forward(p, n)?,
            (Some(n), None) => self.norm.forward(p, n)?,
        };
        let q = self.query.forward(p, xq)?;
        let k = self.key.forward(p, src)?;
        let v = self.value.forward(p, src)?;
        let ctx = multi_head_attention(q, k, v, self.heads, visibility)?;
        self.out.forward(p, ctx)
    }
}

/// Speaker modulation `x + r(m) ⊙ x + h(m)` with `r`, `h` zero-initialised.
#[derive(Debug, Clone)]
pub struct Film {
    pub scale: Dense,
    pub shift: Dense,
}

impl Film {
    pub fn init<F: Real>(cond_dim: usize, d: usize, seed: u64) -> (Self, ParamStore<F>) {
        standalone(seed, |init| Self::new(init, cond_dim, d))
    }

    pub(crate) fn new<F: Real>(init: &mut Init<'_, F>, cond_dim: usize, d: usize) -> Self {
        Self {
            scale: Dense::zeros(&mut init.scope("r"), cond_dim, d),
            shift: Dense::zeros(&mut init.scope("h"), cond_dim, d),
        }
    }

    /// `m` is a `[1 × cond_dim]` row.
    pub fn forward<'t, F: Real>(&self, p: &Params<'t, F>, x: Var<'t, F>, m: Var<'t, F>) -> Result<Var<'t, F>> {
        let r = self.scale.forward(p, m)?;
        let h = self.shift.forward(p, m)?;
        if r.shape()[0] != 1 {
            return Err(Error::shape("film", format!("conditioning {:?} is not one row", m.shape())));
        }
        x.add(x.mul_row(r)?)?.add_row(h)
    }
}
