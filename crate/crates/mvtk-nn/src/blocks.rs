//! MV2 inverted-residual blocks and the MobileViT block in v1, v2 and v3
//! modes, with the four fusion-block changes as independent flags.

use mvtk_tensor::{Element, Result, Rng, Tensor, TensorError};

use crate::ctx::Cx;
use crate::layers::{
    Act, AttentionKind, AffineNorm, ConvUnit, Params, PatchSpec, Scope, TokenNorm,
    TransformerLayer,
};

// ---------------------------------------------------------------------------
// Fusion flags
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKernel {
    Conv3x3,
    Conv1x1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcatSource {
    Input,
    Local,
}

/// The fusion-block flag set. Each named block mode is a preset; ablation rows
/// are arbitrary combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub kernel: FusionKernel,
    pub concat: ConcatSource,
    pub input_add: bool,
    pub local_depthwise: bool,
    /// `false` reproduces the fusion-free v2 baseline.
    pub present: bool,
}

impl FusionConfig {
    /// 3x3 conv over concat(input, projected-global).
    pub fn v1() -> FusionConfig {
        FusionConfig {
            kernel: FusionKernel::Conv3x3,
            concat: ConcatSource::Input,
            input_add: false,
            local_depthwise: false,
            present: true,
        }
    }

    /// No fusion block; depthwise local conv.
    pub fn v2() -> FusionConfig {
        FusionConfig {
            kernel: FusionKernel::Conv1x1,
            concat: ConcatSource::Input,
            input_add: false,
            local_depthwise: true,
            present: false,
        }
    }

    /// 1x1 conv over concat(local, global), input residual add, depthwise
    /// local conv.
    pub fn v3() -> FusionConfig {
        FusionConfig {
            kernel: FusionKernel::Conv1x1,
            concat: ConcatSource::Local,
            input_add: true,
            local_depthwise: true,
            present: true,
        }
    }

    /// The ablation flag matrix: baseline, then the four changes added one by
    /// one.
    pub fn ablation_rows() -> [(&'static str, FusionConfig); 5] {
        let base = FusionConfig::v1();
        [
            ("conv3x3+input-concat", base),
            (
                "conv1x1+input-concat",
                FusionConfig {
                    kernel: FusionKernel::Conv1x1,
                    ..base
                },
            ),
            (
                "conv1x1+local-concat",
                FusionConfig {
                    kernel: FusionKernel::Conv1x1,
                    concat: ConcatSource::Local,
                    ..base
                },
            ),
            (
                "conv1x1+local-concat+input-add",
                FusionConfig {
                    kernel: FusionKernel::Conv1x1,
                    concat: ConcatSource::Local,
                    input_add: true,
                    ..base
                },
            ),
            ("full-v3", FusionConfig::v3()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.present && self.concat == ConcatSource::Local {
            return Err(TensorError::Config(
                "concat-source=local requires a fusion block (fusion-present=false forbids it)"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn kernel_size(&self) -> usize {
        match self.kernel {
            FusionKernel::Conv3x3 => 3,
            FusionKernel::Conv1x1 => 1,
        }
    }
}

// ---------------------------------------------------------------------------
// MV2 inverted residual
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mv2Spec {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub expand: usize,
}

impl Mv2Spec {
    pub fn hidden(&self) -> usize {
        self.cin * self.expand
    }

    /// Residual skip exists iff stride == 1 and cin == cout.
    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.cin == self.cout
    }
}

/// 1x1 expand -> depthwise 3x3 (stride) -> 1x1 project, with a skip add when
/// stride and channel counts permit.
#[derive(Debug, Clone)]
pub struct Mv2Block<T> {
    pub spec: Mv2Spec,
    pub expand: Option<ConvUnit<T>>,
    pub dw: ConvUnit<T>,
    pub proj: ConvUnit<T>,
}

impl<T: Element> Mv2Block<T> {
    pub fn new(rng: &mut Rng, spec: Mv2Spec) -> Mv2Block<T> {
        let hidden = spec.hidden();
        Mv2Block {
            spec,
            expand: (spec.expand != 1).then(|| {
                ConvUnit::new(rng, spec.cin, hidden, 1, 1, 1, false, true, Act::Silu)
            }),
            dw: ConvUnit::new(rng, hidden, hidden, 3, spec.stride, hidden, false, true, Act::Silu),
            proj: ConvUnit::new(rng, hidden, spec.cout, 1, 1, 1, false, true, Act::None),
        }
    }

    pub fn forward<C: Cx<T>>(&self, cx: &mut C, x: &C::V, prefix: &str) -> Result<C::V> {
        if cx.shape(x).c() != self.spec.cin {
            return Err(TensorError::ShapeMismatch {
                op: "mv2_forward",
                detail: format!(
                    "input has {} channels, block expects {}",
                    cx.shape(x).c(),
                    self.spec.cin
                ),
            });
        }
        let mut h = match &self.expand {
            Some(e) => e.forward(cx, x, &format!("{prefix}.expand"))?,
            None => x.clone(),
        };
        h = self.dw.forward(cx, &h, &format!("{prefix}.dw"))?;
        h = self.proj.forward(cx, &h, &format!("{prefix}.proj"))?;
        if self.spec.has_skip() {
            h = cx.add(x, &h)?;
        }
        Ok(h)
    }
}

impl<T: Element> Params<T> for Mv2Block<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(e) = &self.expand {
            e.visit(&format!("{prefix}.expand"), scope, f);
        }
        self.dw.visit(&format!("{prefix}.dw"), scope, f);
        self.proj.visit(&format!("{prefix}.proj"), scope, f);
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(e) = &mut self.expand {
            e.visit_mut(&format!("{prefix}.expand"), scope, f);
        }
        self.dw.visit_mut(&format!("{prefix}.dw"), scope, f);
        self.proj.visit_mut(&format!("{prefix}.proj"), scope, f);
    }
}

// ---------------------------------------------------------------------------
// Global representation
// ---------------------------------------------------------------------------

/// unfold -> L transformer layers -> final norm -> fold; shape-preserving.
#[derive(Debug, Clone)]
pub struct GlobalRep<T> {
    pub patch: PatchSpec,
    pub layers: Vec<TransformerLayer<T>>,
    pub final_norm: Option<TokenNorm<T>>,
}

impl<T: Element> GlobalRep<T> {
    pub fn new(
        rng: &mut Rng,
        kind: AttentionKind,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        layers: usize,
        patch: PatchSpec,
    ) -> Result<GlobalRep<T>> {
        let stack = (0..layers)
            .map(|_| TransformerLayer::new(rng, kind, dim, heads, ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = match kind {
            AttentionKind::MultiHead => TokenNorm::Layer(AffineNorm::new(dim)),
            AttentionKind::SeparableLinear => TokenNorm::GroupTokens(AffineNorm::new(dim)),
        };
        Ok(GlobalRep {
            patch,
            layers: stack,
            final_norm: Some(final_norm),
        })
    }

    pub fn forward<C: Cx<T>>(&self, cx: &mut C, x: &C::V, prefix: &str) -> Result<C::V> {
        let s = cx.shape(x);
        let (batch, h, w) = (s.n(), s.h(), s.w());
        let mut t = cx.unfold(x, self.patch.ph, self.patch.pw)?;
        for (i, layer) in self.layers.iter().enumerate() {
            t = layer.forward(cx, &t, &format!("{prefix}.l{i}"), batch)?;
        }
        if let Some(norm) = &self.final_norm {
            t = norm.forward(cx, &t, &format!("{prefix}.norm"), batch)?;
        }
        cx.fold(&t, self.patch.ph, self.patch.pw, h, w)
    }
}

impl<T: Element> Params<T> for GlobalRep<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.l{i}"), scope, f);
        }
        if let Some(n) = &self.final_norm {
            n.visit(&format!("{prefix}.norm"), scope, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.l{i}"), scope, f);
        }
        if let Some(n) = &mut self.final_norm {
            n.visit_mut(&format!("{prefix}.norm"), scope, f);
        }
    }
}

// ---------------------------------------------------------------------------
// MobileViT block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MobileVitBlockSpec {
    /// Input and output channels.
    pub channels: usize,
    /// Transformer embedding dim.
    pub dim: usize,
    /// Transformer layer count.
    pub layers: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub patch: PatchSpec,
    pub attention: AttentionKind,
    pub fusion: FusionConfig,
}

impl MobileVitBlockSpec {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.attention == AttentionKind::MultiHead && self.dim % self.heads != 0 {
            return Err(TensorError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// The folded global features are projected back to C channels before the
    /// fusion concat on the multi-head path (the v1 lineage keeps this conv);
    /// the separable lineage hands the d-channel global features straight to
    /// its fusion conv, so the projection survives only where it is the block
    /// exit or the input-concat needs C channels.
    pub fn has_projection(&self) -> bool {
        match self.attention {
            AttentionKind::MultiHead => true,
            AttentionKind::SeparableLinear => {
                !self.fusion.present || self.fusion.concat == ConcatSource::Input
            }
        }
    }

    /// Input channel count of the fusion conv.
    pub fn fusion_in_channels(&self) -> usize {
        match self.fusion.concat {
            ConcatSource::Input => 2 * self.channels,
            ConcatSource::Local => {
                self.dim
                    + if self.has_projection() {
                        self.channels
                    } else {
                        self.dim
                    }
            }
        }
    }
}

/// local representation -> global representation -> fusion. Output channels
/// equal input channels; spatial dims are preserved.
#[derive(Debug, Clone)]
pub struct MobileVitBlock<T> {
    pub spec: MobileVitBlockSpec,
    pub local_conv: ConvUnit<T>,
    pub local_proj: ConvUnit<T>,
    pub global_rep: GlobalRep<T>,
    pub proj: Option<ConvUnit<T>>,
    pub fusion: Option<ConvUnit<T>>,
}

impl<T: Element> MobileVitBlock<T> {
    pub fn new(rng: &mut Rng, spec: MobileVitBlockSpec) -> Result<MobileVitBlock<T>> {
        spec.validate()?;
        let c = spec.channels;
        let d = spec.dim;
        let local_groups = if spec.fusion.local_depthwise { c } else { 1 };
        let local_conv = ConvUnit::new(rng, c, c, 3, 1, local_groups, false, true, Act::Silu);
        let local_proj = ConvUnit::new(rng, c, d, 1, 1, 1, false, false, Act::None);
        let global_rep = GlobalRep::new(
            rng,
            spec.attention,
            d,
            spec.heads,
            spec.ffn_dim,
            spec.layers,
            spec.patch,
        )?;
        let proj = spec.has_projection().then(|| {
            let act = match spec.attention {
                AttentionKind::MultiHead => Act::Silu,
                AttentionKind::SeparableLinear => Act::None,
            };
            ConvUnit::new(rng, d, c, 1, 1, 1, false, true, act)
        });
        let fusion = spec.fusion.present.then(|| {
            let act = if spec.fusion.input_add { Act::None } else { Act::Silu };
            ConvUnit::new(
                rng,
                spec.fusion_in_channels(),
                c,
                spec.fusion.kernel_size(),
                1,
                1,
                false,
                true,
                act,
            )
        });
        Ok(MobileVitBlock {
            spec,
            local_conv,
            local_proj,
            global_rep,
            proj,
            fusion,
        })
    }

    pub fn forward<C: Cx<T>>(&self, cx: &mut C, x: &C::V, prefix: &str) -> Result<C::V> {
        if cx.shape(x).c() != self.spec.channels {
            return Err(TensorError::ShapeMismatch {
                op: "mobilevit_block",
                detail: format!(
                    "input has {} channels, block expects {}",
                    cx.shape(x).c(),
                    self.spec.channels
                ),
            });
        }
        let local_c = self.local_conv.forward(cx, x, &format!("{prefix}.local.conv"))?;
        let local = self
            .local_proj
            .forward(cx, &local_c, &format!("{prefix}.local.proj"))?;
        let global = self
            .global_rep
            .forward(cx, &local, &format!("{prefix}.global"))?;
        let global = match &self.proj {
            Some(p) => p.forward(cx, &global, &format!("{prefix}.proj"))?,
            None => global,
        };
        let mut out = match &self.fusion {
            Some(fu) => {
                let left = match self.spec.fusion.concat {
                    ConcatSource::Input => x,
                    ConcatSource::Local => &local,
                };
                let cat = cx.concat_channels(left, &global)?;
                fu.forward(cx, &cat, &format!("{prefix}.fusion"))?
            }
            None => global,
        };
        if self.spec.fusion.input_add {
            out = cx.add(&out, x)?;
        }
        Ok(out)
    }
}

impl<T: Element> Params<T> for MobileVitBlock<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.local_conv.visit(&format!("{prefix}.local.conv"), scope, f);
        self.local_proj.visit(&format!("{prefix}.local.proj"), scope, f);
        self.global_rep.visit(&format!("{prefix}.global"), scope, f);
        if let Some(p) = &self.proj {
            p.visit(&format!("{prefix}.proj"), scope, f);
        }
        if let Some(fu) = &self.fusion {
            fu.visit(&format!("{prefix}.fusion"), scope, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.local_conv
            .visit_mut(&format!("{prefix}.local.conv"), scope, f);
        self.local_proj
            .visit_mut(&format!("{prefix}.local.proj"), scope, f);
        self.global_rep.visit_mut(&format!("{prefix}.global"), scope, f);
        if let Some(p) = &mut self.proj {
            p.visit_mut(&format!("{prefix}.proj"), scope, f);
        }
        if let Some(fu) = &mut self.fusion {
            fu.visit_mut(&format!("{prefix}.fusion"), scope, f);
        }
    }
}
