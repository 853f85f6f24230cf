//! Named neural layers: conv-norm-act units, feed-forward networks, multi-head
//! self-attention, separable (linear-complexity) self-attention, and the
//! unfold/fold patch transforms.

use mvtk_tensor::{Element, Result, Rng, Shape, Tensor, TensorError};

use crate::ctx::Cx;

pub const INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    None,
    Silu,
    Sigmoid,
    Relu,
}

pub fn apply_act<T: Element, C: Cx<T>>(cx: &mut C, act: Act, x: &C::V) -> C::V {
    match act {
        Act::None => x.clone(),
        Act::Silu => cx.silu(x),
        Act::Sigmoid => cx.sigmoid(x),
        Act::Relu => cx.relu(x),
    }
}

/// Visit every tensor a layer owns. `Scope::Learnable` covers trainable
/// parameters only; `Scope::All` adds buffers (batchnorm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Learnable,
    All,
}

pub trait Params<T: Element> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

pub fn param_count<T: Element>(p: &dyn Params<T>) -> u64 {
    let mut count = 0u64;
    p.visit("", Scope::Learnable, &mut |_, t| count += t.numel() as u64);
    count
}

// ---------------------------------------------------------------------------
// Norm parameter bundles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BnParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Element> BnParams<T> {
    pub fn new(channels: usize) -> BnParams<T> {
        let s = Shape::nchw(1, channels, 1, 1);
        BnParams {
            gamma: Tensor::full(s, T::ONE),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::full(s, T::ONE),
        }
    }
}

impl<T: Element> Params<T> for BnParams<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
        if scope == Scope::All {
            f(&format!("{prefix}.running_mean"), &self.running_mean);
            f(&format!("{prefix}.running_var"), &self.running_var);
        }
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
        if scope == Scope::All {
            f(&format!("{prefix}.running_mean"), &mut self.running_mean);
            f(&format!("{prefix}.running_var"), &mut self.running_var);
        }
    }
}

/// Affine parameters shared by layernorm and the group-of-one token norm.
#[derive(Debug, Clone)]
pub struct AffineNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> AffineNorm<T> {
    pub fn new(dim: usize) -> AffineNorm<T> {
        AffineNorm {
            gamma: Tensor::full(Shape::nchw(1, dim, 1, 1), T::ONE),
            beta: Tensor::zeros(Shape::nchw(1, dim, 1, 1)),
        }
    }
}

impl<T: Element> Params<T> for AffineNorm<T> {
    fn visit(&self, prefix: &str, _scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, _scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Token-space normalization flavor: layernorm for multi-head transformer
/// stacks, group-of-one norm for the separable-attention stacks.
#[derive(Debug, Clone)]
pub enum TokenNorm<T> {
    Layer(AffineNorm<T>),
    GroupTokens(AffineNorm<T>),
}

impl<T: Element> TokenNorm<T> {
    pub fn forward<C: Cx<T>>(&self, cx: &mut C, x: &C::V, prefix: &str, batch: usize) -> Result<C::V> {
        match self {
            TokenNorm::Layer(a) => {
                let g = cx.param(&format!("{prefix}.gamma"), &a.gamma);
                let b = cx.param(&format!("{prefix}.beta"), &a.beta);
                cx.layernorm(x, &g, &b, 2)
            }
            TokenNorm::GroupTokens(a) => {
                let g = cx.param(&format!("{prefix}.gamma"), &a.gamma);
                let b = cx.param(&format!("{prefix}.beta"), &a.beta);
                cx.groupnorm_tokens(x, &g, &b, batch)
            }
        }
    }

    fn affine(&self) -> &AffineNorm<T> {
        match self {
            TokenNorm::Layer(a) | TokenNorm::GroupTokens(a) => a,
        }
    }
    fn affine_mut(&mut self) -> &mut AffineNorm<T> {
        match self {
            TokenNorm::Layer(a) | TokenNorm::GroupTokens(a) => a,
        }
    }
}

impl<T: Element> Params<T> for TokenNorm<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.affine().visit(prefix, scope, f);
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.affine_mut().visit_mut(prefix, scope, f);
    }
}

// ---------------------------------------------------------------------------
// Conv unit
// ---------------------------------------------------------------------------

/// Convolution with optional batchnorm and activation. Padding follows the
/// "same" rule for odd kernels: p = k/2.
#[derive(Debug, Clone)]
pub struct ConvUnit<T> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub norm: Option<BnParams<T>>,
    pub act: Act,
}

impl<T: Element> ConvUnit<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        norm: bool,
        act: Act,
    ) -> ConvUnit<T> {
        ConvUnit {
            w: rng.trunc_normal_tensor(Shape::nchw(cout, cin / groups, k, k), INIT_SIGMA),
            b: bias.then(|| Tensor::zeros(Shape::nchw(1, cout, 1, 1))),
            stride,
            padding: k / 2,
            groups,
            norm: norm.then(|| BnParams::new(cout)),
            act,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape().n()
    }

    pub fn forward<C: Cx<T>>(&self, cx: &mut C, x: &C::V, prefix: &str) -> Result<C::V> {
        let w = cx.param(&format!("{prefix}.w"), &self.w);
        let b = self.b.as_ref().map(|b| cx.param(&format!("{prefix}.b"), b));
        let mut y = cx.conv2d(x, &w, b.as_ref(), self.stride, self.padding, self.groups)?;
        if let Some(bn) = &self.norm {
            y = cx.batchnorm(&y, &format!("{prefix}.bn"), bn)?;
        }
        Ok(apply_act(cx, self.act, &y))
    }
}

impl<T: Element> Params<T> for ConvUnit<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{prefix}.b"), b);
        }
        if let Some(bn) = &self.norm {
            bn.visit(&format!("{prefix}.bn"), scope, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}.b"), b);
        }
        if let Some(bn) = &mut self.norm {
            bn.visit_mut(&format!("{prefix}.bn"), scope, f);
        }
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LinearLayer<T> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
}

impl<T: Element> LinearLayer<T> {
    pub fn new(rng: &mut Rng, din: usize, dout: usize, bias: bool) -> LinearLayer<T> {
        LinearLayer {
            w: rng.trunc_normal_tensor(Shape::mat(dout, din), INIT_SIGMA),
            b: bias.then(|| Tensor::zeros(Shape::nchw(1, dout, 1, 1))),
        }
    }

    pub fn forward<C: Cx<T>>(&self, cx: &mut C, x: &C::V, prefix: &str) -> Result<C::V> {
        let w = cx.param(&format!("{prefix}.w"), &self.w);
        let b = self.b.as_ref().map(|b| cx.param(&format!("{prefix}.b"), b));
        cx.linear(x, &w, b.as_ref())
    }
}

impl<T: Element> Params<T> for LinearLayer<T> {
    fn visit(&self, prefix: &str, _scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{prefix}.b"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, _scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}.b"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// Patch transforms
// ---------------------------------------------------------------------------

/// Unfold/fold granularity in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub ph: usize,
    pub pw: usize,
}

impl PatchSpec {
    pub fn square(p: usize) -> PatchSpec {
        PatchSpec { ph: p, pw: p }
    }

    pub fn area(&self) -> usize {
        self.ph * self.pw
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    MultiHead,
    SeparableLinear,
}

/// Standard multi-head self-attention: softmax(QK^T / sqrt(d/h)) V per head,
/// concatenated and output-projected. Shape-preserving on `[S, n, d, 1]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub dim: usize,
    pub heads: usize,
    pub qkv: LinearLayer<T>,
    pub out: LinearLayer<T>,
}

impl<T: Element> MultiHeadAttention<T> {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize) -> Result<MultiHeadAttention<T>> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "multihead_attention",
                detail: format!("dim {dim} not divisible by heads {heads}"),
            });
        }
        Ok(MultiHeadAttention {
            dim,
            heads,
            qkv: LinearLayer::new(rng, dim, 3 * dim, true),
            out: LinearLayer::new(rng, dim, dim, true),
        })
    }

    pub fn forward<C: Cx<T>>(&self, cx: &mut C, x: &C::V, prefix: &str) -> Result<C::V> {
        let d = self.dim;
        if cx.shape(x).h() != d {
            return Err(TensorError::ShapeMismatch {
                op: "multihead_attention",
                detail: format!("token dim {} != layer dim {}", cx.shape(x).h(), d),
            });
        }
        let qkv = self.qkv.forward(cx, x, &format!("{prefix}.qkv"))?;
        let q = cx.slice_tokens(&qkv, 0, d);
        let k = cx.slice_tokens(&qkv, d, d);
        let v = cx.slice_tokens(&qkv, 2 * d, d);
        let qh = cx.head_split(&q, self.heads)?;
        let kh = cx.head_split(&k, self.heads)?;
        let vh = cx.head_split(&v, self.heads)?;
        let scores = cx.bmm(&qh, &kh, false, true)?;
        let scaled = cx.scale(&scores, 1.0 / ((d / self.heads) as f64).sqrt());
        let attn = cx.softmax(&scaled, 2);
        let ctx = cx.bmm(&attn, &vh, false, false)?;
        let merged = cx.head_merge(&ctx, self.heads)?;
        self.out.forward(cx, &merged, &format!("{prefix}.out"))
    }
}

impl<T: Element> Params<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.qkv.visit(&format!("{prefix}.qkv"), scope, f);
        self.out.visit(&format!("{prefix}.out"), scope, f);
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.qkv.visit_mut(&format!("{prefix}.qkv"), scope, f);
        self.out.visit_mut(&format!("{prefix}.out"), scope, f);
    }
}

/// Linear-complexity separable self-attention. A learned d->1 projection gives
/// per-token context scores (softmax over tokens); the score-weighted sum of
/// the key projection forms a context vector that gates the value projection.
/// Cost is linear in the token count.
#[derive(Debug, Clone)]
pub struct SeparableAttention<T> {
    pub dim: usize,
    pub qkv: LinearLayer<T>,
    pub out: LinearLayer<T>,
}

impl<T: Element> SeparableAttention<T> {
    pub fn new(rng: &mut Rng, dim: usize) -> SeparableAttention<T> {
        SeparableAttention {
            dim,
            qkv: LinearLayer::new(rng, dim, 1 + 2 * dim, true),
            out: LinearLayer::new(rng, dim, dim, true),
        }
    }

    pub fn forward<C: Cx<T>>(&self, cx: &mut C, x: &C::V, prefix: &str) -> Result<C::V> {
        let d = self.dim;
        if cx.shape(x).h() != d {
            return Err(TensorError::ShapeMismatch {
                op: "separable_attention",
                detail: format!("token dim {} != layer dim {}", cx.shape(x).h(), d),
            });
        }
        let qkv = self.qkv.forward(cx, x, &format!("{prefix}.qkv"))?;
        let q = cx.slice_tokens(&qkv, 0, 1);
        let k = cx.slice_tokens(&qkv, 1, d);
        let v = cx.slice_tokens(&qkv, 1 + d, d);
        // scores over the token axis
        let scores = cx.softmax(&q, 1);
        // context vector: sum_t scores[t] * k[t]  ->  [S, 1, d]
        let ctx = cx.bmm(&scores, &k, true, false)?;
        let gated = cx.mul_bcast_tokens(&v, &ctx)?;
        self.out.forward(cx, &gated, &format!("{prefix}.out"))
    }
}

impl<T: Element> Params<T> for SeparableAttention<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.qkv.visit(&format!("{prefix}.qkv"), scope, f);
        self.out.visit(&format!("{prefix}.out"), scope, f);
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.qkv.visit_mut(&format!("{prefix}.qkv"), scope, f);
        self.out.visit_mut(&format!("{prefix}.out"), scope, f);
    }
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

/// linear(d -> hidden) -> activation -> linear(hidden -> d); residual handled
/// by the caller.
#[derive(Debug, Clone)]
pub struct Ffn<T> {
    pub fc1: LinearLayer<T>,
    pub fc2: LinearLayer<T>,
    pub act: Act,
}

impl<T: Element> Ffn<T> {
    pub fn new(rng: &mut Rng, dim: usize, hidden: usize) -> Ffn<T> {
        Ffn {
            fc1: LinearLayer::new(rng, dim, hidden, true),
            fc2: LinearLayer::new(rng, hidden, dim, true),
            act: Act::Silu,
        }
    }

    pub fn forward<C: Cx<T>>(&self, cx: &mut C, x: &C::V, prefix: &str) -> Result<C::V> {
        let h = self.fc1.forward(cx, x, &format!("{prefix}.fc1"))?;
        let h = apply_act(cx, self.act, &h);
        self.fc2.forward(cx, &h, &format!("{prefix}.fc2"))
    }
}

impl<T: Element> Params<T> for Ffn<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.fc1.visit(&format!("{prefix}.fc1"), scope, f);
        self.fc2.visit(&format!("{prefix}.fc2"), scope, f);
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), scope, f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), scope, f);
    }
}

// ---------------------------------------------------------------------------
// Transformer layer (pre-norm)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum TokenMixer<T> {
    MultiHead(MultiHeadAttention<T>),
    Separable(SeparableAttention<T>),
}

/// Pre-norm transformer layer: x + mixer(norm(x)), then y + ffn(norm(y)).
#[derive(Debug, Clone)]
pub struct TransformerLayer<T> {
    pub norm1: TokenNorm<T>,
    pub mixer: TokenMixer<T>,
    pub norm2: TokenNorm<T>,
    pub ffn: Ffn<T>,
}

impl<T: Element> TransformerLayer<T> {
    pub fn new(
        rng: &mut Rng,
        kind: AttentionKind,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Result<TransformerLayer<T>> {
        let (norm1, norm2, mixer) = match kind {
            AttentionKind::MultiHead => (
                TokenNorm::Layer(AffineNorm::new(dim)),
                TokenNorm::Layer(AffineNorm::new(dim)),
                TokenMixer::MultiHead(MultiHeadAttention::new(rng, dim, heads)?),
            ),
            AttentionKind::SeparableLinear => (
                TokenNorm::GroupTokens(AffineNorm::new(dim)),
                TokenNorm::GroupTokens(AffineNorm::new(dim)),
                TokenMixer::Separable(SeparableAttention::new(rng, dim)),
            ),
        };
        Ok(TransformerLayer {
            norm1,
            mixer,
            norm2,
            ffn: Ffn::new(rng, dim, ffn_dim),
        })
    }

    /// `batch` is the original sample count (token tensors carry
    /// `batch * patch_area` sequences).
    pub fn forward<C: Cx<T>>(&self, cx: &mut C, x: &C::V, prefix: &str, batch: usize) -> Result<C::V> {
        let normed = self.norm1.forward(cx, x, &format!("{prefix}.norm1"), batch)?;
        let mixed = match &self.mixer {
            TokenMixer::MultiHead(m) => m.forward(cx, &normed, &format!("{prefix}.attn"))?,
            TokenMixer::Separable(m) => m.forward(cx, &normed, &format!("{prefix}.attn"))?,
        };
        let y = cx.add(x, &mixed)?;
        let normed = self.norm2.forward(cx, &y, &format!("{prefix}.norm2"), batch)?;
        let f = self.ffn.forward(cx, &normed, &format!("{prefix}.ffn"))?;
        cx.add(&y, &f)
    }
}

impl<T: Element> Params<T> for TransformerLayer<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm1.visit(&format!("{prefix}.norm1"), scope, f);
        match &self.mixer {
            TokenMixer::MultiHead(m) => m.visit(&format!("{prefix}.attn"), scope, f),
            TokenMixer::Separable(m) => m.visit(&format!("{prefix}.attn"), scope, f),
        }
        self.norm2.visit(&format!("{prefix}.norm2"), scope, f);
        self.ffn.visit(&format!("{prefix}.ffn"), scope, f);
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), scope, f);
        match &mut self.mixer {
            TokenMixer::MultiHead(m) => m.visit_mut(&format!("{prefix}.attn"), scope, f),
            TokenMixer::Separable(m) => m.visit_mut(&format!("{prefix}.attn"), scope, f),
        }
        self.norm2.visit_mut(&format!("{prefix}.norm2"), scope, f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), scope, f);
    }
}
