//! Declarative model descriptions and the named model zoo, plus the
//! human-readable spec-file format.

use mvtk_nn::blocks::{ConcatSource, FusionConfig, FusionKernel};
use mvtk_nn::layers::AttentionKind;
use mvtk_tensor::{Result, TensorError};

/// One architecture stage. `repeat` applies the stage `stride` to the first
/// block and stride 1 to the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageSpec {
    ConvStem {
        out: usize,
        stride: usize,
    },
    Mv2 {
        out: usize,
        stride: usize,
        repeat: usize,
        expand: usize,
    },
    MobileVit {
        out: usize,
        dim: usize,
        layers: usize,
        ffn: usize,
        heads: usize,
        patch: usize,
        attention: AttentionKind,
        fusion: FusionConfig,
    },
}

impl StageSpec {
    pub fn out_channels(&self) -> usize {
        match self {
            StageSpec::ConvStem { out, .. }
            | StageSpec::Mv2 { out, .. }
            | StageSpec::MobileVit { out, .. } => *out,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            StageSpec::ConvStem { stride, .. } | StageSpec::Mv2 { stride, .. } => *stride,
            StageSpec::MobileVit { .. } => 1,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            StageSpec::ConvStem { .. } => "conv-stem",
            StageSpec::Mv2 { .. } => "mv2",
            StageSpec::MobileVit { .. } => "mobilevit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    pub num_classes: usize,
    /// Width of the pre-pool 1x1 expansion conv; the separable-attention
    /// family classifies straight off the last stage.
    pub head_width: Option<usize>,
    /// Transformer layer count of the L=4 stage; 2 selects the reduced
    /// latency variant.
    pub layer4_blocks: usize,
    pub stages: Vec<StageSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(TensorError::Config("model has no stages".into()));
        }
        if !matches!(self.layer4_blocks, 2 | 4) {
            return Err(TensorError::Config(format!(
                "layer4-blocks must be 2 or 4, got {}",
                self.layer4_blocks
            )));
        }
        if self.layer4_blocks != 4 && !self.stages.iter().any(
            |s| matches!(s, StageSpec::MobileVit { layers: 4, .. }),
        ) {
            return Err(TensorError::Config(
                "layer4-blocks override requires a 4-layer mobilevit stage".into(),
            ));
        }
        let mut prev = None;
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                StageSpec::ConvStem { stride, .. } => {
                    if i != 0 {
                        return Err(TensorError::Config(format!(
                            "stage {i}: conv-stem only allowed first"
                        )));
                    }
                    if !matches!(stride, 1 | 2) {
                        return Err(TensorError::Config(format!(
                            "stage {i}: stride must be 1 or 2"
                        )));
                    }
                }
                StageSpec::Mv2 {
                    stride, repeat, expand, ..
                } => {
                    if !matches!(stride, 1 | 2) {
                        return Err(TensorError::Config(format!(
                            "stage {i}: stride must be 1 or 2"
                        )));
                    }
                    if *repeat < 1 {
                        return Err(TensorError::Config(format!("stage {i}: repeat must be >= 1")));
                    }
                    if *expand < 1 {
                        return Err(TensorError::Config(format!("stage {i}: expand must be >= 1")));
                    }
                }
                StageSpec::MobileVit {
                    out,
                    dim,
                    heads,
                    patch,
                    fusion,
                    attention,
                    ..
                } => {
                    if Some(*out) != prev {
                        return Err(TensorError::Config(format!(
                            "stage {i}: mobilevit stage needs input channels {} == out channels {} \
                             (chain broken)",
                            prev.map(|c: usize| c.to_string()).unwrap_or_else(|| "?".into()),
                            out
                        )));
                    }
                    if *patch == 0 {
                        return Err(TensorError::Config(format!("stage {i}: patch must be >= 1")));
                    }
                    fusion.validate()?;
                    if *attention == AttentionKind::MultiHead && dim % heads != 0 {
                        return Err(TensorError::Config(format!(
                            "stage {i}: dim {dim} not divisible by {heads} heads"
                        )));
                    }
                }
            }
            prev = Some(stage.out_channels());
        }
        Ok(())
    }

    /// Stage output resolutions for a given input, failing on the first
    /// mobilevit stage whose map is not patch-divisible.
    pub fn stage_resolutions(&self, mut h: usize, mut w: usize) -> Result<Vec<(usize, usize)>> {
        let mut res = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                StageSpec::ConvStem { stride, .. } | StageSpec::Mv2 { stride, .. } => {
                    // 3x3 same-padded convs: floor((d - 1)/s) + 1
                    h = (h - 1) / stride + 1;
                    w = (w - 1) / stride + 1;
                }
                StageSpec::MobileVit { patch, .. } => {
                    if h % patch != 0 || w % patch != 0 {
                        return Err(TensorError::Config(format!(
                            "stage {i} (mobilevit): {h}x{w} map not divisible by patch {patch}x{patch}"
                        )));
                    }
                }
            }
            res.push((h, w));
        }
        Ok(res)
    }

    pub fn with_layer4_blocks(mut self, blocks: usize) -> ModelSpec {
        self.layer4_blocks = blocks;
        if blocks != 4 {
            self.name = format!("{}-{}block", self.name, blocks);
        }
        self
    }

    pub fn with_classes(mut self, classes: usize) -> ModelSpec {
        self.num_classes = classes;
        self
    }

    /// Effective transformer depth of a stage after the layer4 override.
    pub fn effective_layers(&self, stage: &StageSpec) -> usize {
        match stage {
            StageSpec::MobileVit { layers: 4, .. } => self.layer4_blocks,
            StageSpec::MobileVit { layers, .. } => *layers,
            _ => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Named zoo
// ---------------------------------------------------------------------------

pub const NAMED_MODELS: [&str; 13] = [
    "mobilevitv1-xxs",
    "mobilevitv1-xs",
    "mobilevitv1-s",
    "mobilevitv2-0.5",
    "mobilevitv2-0.75",
    "mobilevitv2-1.0",
    "mobilevitv3-xxs",
    "mobilevitv3-xs",
    "mobilevitv3-s",
    "mobilevitv3-0.5",
    "mobilevitv3-0.75",
    "mobilevitv3-1.0",
    "mobilevitv3-s-unscaled",
];

struct MultiHeadFamily {
    widths: [usize; 6], // stem, l1, l2, l3, l4, l5
    dims: [usize; 3],
    ffns: [usize; 3],
    patches: [usize; 3],
    expand: usize,
    head: usize,
    fusion: FusionConfig,
}

fn multihead_spec(name: &str, f: MultiHeadFamily) -> ModelSpec {
    let [stem, c1, c2, c3, c4, c5] = f.widths;
    let vit = |out: usize, dim: usize, layers: usize, ffn: usize, patch: usize| StageSpec::MobileVit {
        out,
        dim,
        layers,
        ffn,
        heads: 4,
        patch,
        attention: AttentionKind::MultiHead,
        fusion: f.fusion,
    };
    ModelSpec {
        name: name.to_string(),
        num_classes: 1000,
        head_width: Some(f.head),
        layer4_blocks: 4,
        stages: vec![
            StageSpec::ConvStem { out: stem, stride: 2 },
            StageSpec::Mv2 { out: c1, stride: 1, repeat: 1, expand: f.expand },
            StageSpec::Mv2 { out: c2, stride: 2, repeat: 3, expand: f.expand },
            StageSpec::Mv2 { out: c3, stride: 2, repeat: 1, expand: f.expand },
            vit(c3, f.dims[0], 2, f.ffns[0], f.patches[0]),
            StageSpec::Mv2 { out: c4, stride: 2, repeat: 1, expand: f.expand },
            vit(c4, f.dims[1], 4, f.ffns[1], f.patches[1]),
            StageSpec::Mv2 { out: c5, stride: 2, repeat: 1, expand: f.expand },
            vit(c5, f.dims[2], 3, f.ffns[2], f.patches[2]),
        ],
    }
}

struct SeparableFamily {
    widths: [usize; 6],
    dims: [usize; 3],
    fusion: FusionConfig,
}

fn separable_spec(name: &str, f: SeparableFamily) -> ModelSpec {
    let [stem, c1, c2, c3, c4, c5] = f.widths;
    let vit = |out: usize, dim: usize, layers: usize| StageSpec::MobileVit {
        out,
        dim,
        layers,
        ffn: 2 * dim,
        heads: 4,
        patch: 2,
        attention: AttentionKind::SeparableLinear,
        fusion: f.fusion,
    };
    ModelSpec {
        name: name.to_string(),
        num_classes: 1000,
        head_width: None,
        layer4_blocks: 4,
        stages: vec![
            StageSpec::ConvStem { out: stem, stride: 2 },
            StageSpec::Mv2 { out: c1, stride: 1, repeat: 1, expand: 2 },
            StageSpec::Mv2 { out: c2, stride: 2, repeat: 2, expand: 2 },
            StageSpec::Mv2 { out: c3, stride: 2, repeat: 1, expand: 2 },
            vit(c3, f.dims[0], 2),
            StageSpec::Mv2 { out: c4, stride: 2, repeat: 1, expand: 2 },
            vit(c4, f.dims[1], 4),
            StageSpec::Mv2 { out: c5, stride: 2, repeat: 1, expand: 2 },
            vit(c5, f.dims[2], 3),
        ],
    }
}

/// Canonical spec for a named model. Transformer dims, feed-forward widths and
/// patch sizes are frozen per model; they were fixed against the published
/// parameter and multiply-accumulate totals.
pub fn named_spec(name: &str) -> Result<ModelSpec> {
    let spec = match name {
        "mobilevitv1-xxs" => multihead_spec(name, MultiHeadFamily {
            widths: [16, 16, 24, 48, 64, 80],
            dims: [64, 80, 96],
            ffns: [144, 176, 208],
            patches: [4, 2, 2],
            expand: 2,
            head: 320,
            fusion: FusionConfig::v1(),
        }),
        "mobilevitv1-xs" => multihead_spec(name, MultiHeadFamily {
            widths: [16, 32, 48, 64, 80, 96],
            dims: [96, 120, 144],
            ffns: [192, 240, 288],
            patches: [4, 2, 2],
            expand: 4,
            head: 384,
            fusion: FusionConfig::v1(),
        }),
        "mobilevitv1-s" => multihead_spec(name, MultiHeadFamily {
            widths: [16, 32, 64, 96, 128, 160],
            dims: [144, 192, 240],
            ffns: [288, 384, 480],
            patches: [2, 2, 2],
            expand: 4,
            head: 640,
            fusion: FusionConfig::v1(),
        }),
        "mobilevitv3-xxs" => multihead_spec(name, MultiHeadFamily {
            widths: [16, 16, 24, 64, 80, 128],
            dims: [64, 80, 96],
            ffns: [128, 160, 192],
            patches: [4, 2, 2],
            expand: 2,
            head: 512,
            fusion: FusionConfig::v3(),
        }),
        "mobilevitv3-xs" => multihead_spec(name, MultiHeadFamily {
            widths: [16, 32, 48, 96, 160, 160],
            dims: [96, 120, 144],
            ffns: [192, 240, 288],
            patches: [4, 2, 2],
            expand: 4,
            head: 640,
            fusion: FusionConfig::v3(),
        }),
        "mobilevitv3-s" => multihead_spec(name, MultiHeadFamily {
            widths: [16, 32, 64, 128, 256, 320],
            dims: [144, 192, 208],
            ffns: [288, 384, 416],
            patches: [2, 2, 2],
            expand: 4,
            head: 1280,
            fusion: FusionConfig::v3(),
        }),
        // v1-S widths with the v3 block changes and nothing rescaled
        "mobilevitv3-s-unscaled" => multihead_spec(name, MultiHeadFamily {
            widths: [16, 32, 64, 96, 128, 160],
            dims: [144, 192, 240],
            ffns: [288, 384, 480],
            patches: [2, 2, 2],
            expand: 4,
            head: 640,
            fusion: FusionConfig::v3(),
        }),
        "mobilevitv2-0.5" => separable_spec(name, SeparableFamily {
            widths: [16, 32, 64, 128, 192, 256],
            dims: [64, 96, 136],
            fusion: FusionConfig::v2(),
        }),
        "mobilevitv2-0.75" => separable_spec(name, SeparableFamily {
            widths: [24, 48, 96, 192, 288, 384],
            dims: [96, 144, 192],
            fusion: FusionConfig::v2(),
        }),
        "mobilevitv2-1.0" => separable_spec(name, SeparableFamily {
            widths: [32, 64, 128, 256, 384, 512],
            dims: [128, 192, 256],
            fusion: FusionConfig::v2(),
        }),
        "mobilevitv3-0.5" => separable_spec(name, SeparableFamily {
            widths: [16, 32, 64, 128, 192, 256],
            dims: [64, 96, 120],
            fusion: FusionConfig::v3(),
        }),
        "mobilevitv3-0.75" => separable_spec(name, SeparableFamily {
            widths: [24, 48, 96, 192, 288, 384],
            dims: [96, 144, 192],
            fusion: FusionConfig::v3(),
        }),
        "mobilevitv3-1.0" => separable_spec(name, SeparableFamily {
            widths: [32, 64, 128, 256, 384, 512],
            dims: [128, 192, 256],
            fusion: FusionConfig::v3(),
        }),
        _ => {
            return Err(TensorError::Config(format!(
                "unknown model '{name}'; valid names: {}",
                NAMED_MODELS.join(", ")
            )))
        }
    };
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Spec-file format
// ---------------------------------------------------------------------------

fn fusion_to_text(f: &FusionConfig) -> String {
    if *f == FusionConfig::v1() {
        return "v1".into();
    }
    if *f == FusionConfig::v2() {
        return "v2".into();
    }
    if *f == FusionConfig::v3() {
        return "v3".into();
    }
    format!(
        "{}:{}:{}:{}:{}",
        match f.kernel {
            FusionKernel::Conv3x3 => "3x3",
            FusionKernel::Conv1x1 => "1x1",
        },
        match f.concat {
            ConcatSource::Input => "input",
            ConcatSource::Local => "local",
        },
        if f.input_add { "add" } else { "noadd" },
        if f.local_depthwise { "dw" } else { "dense" },
        if f.present { "on" } else { "off" },
    )
}

fn fusion_from_text(s: &str) -> Result<FusionConfig> {
    match s {
        "v1" => return Ok(FusionConfig::v1()),
        "v2" => return Ok(FusionConfig::v2()),
        "v3" => return Ok(FusionConfig::v3()),
        _ => {}
    }
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 5 {
        return Err(TensorError::Format(format!("bad fusion flags '{s}'")));
    }
    Ok(FusionConfig {
        kernel: match parts[0] {
            "3x3" => FusionKernel::Conv3x3,
            "1x1" => FusionKernel::Conv1x1,
            k => return Err(TensorError::Format(format!("bad fusion kernel '{k}'"))),
        },
        concat: match parts[1] {
            "input" => ConcatSource::Input,
            "local" => ConcatSource::Local,
            c => return Err(TensorError::Format(format!("bad concat source '{c}'"))),
        },
        input_add: parts[2] == "add",
        local_depthwise: parts[3] == "dw",
        present: parts[4] == "on",
    })
}

/// Render a spec in the text format (`key value` lines plus one `stage` line
/// per stage).
pub fn spec_to_text(spec: &ModelSpec) -> String {
    let mut out = String::new();
    out.push_str("# mvtk model spec v1\n");
    out.push_str(&format!("name {}\n", spec.name));
    out.push_str(&format!("num-classes {}\n", spec.num_classes));
    if let Some(h) = spec.head_width {
        out.push_str(&format!("head-width {h}\n"));
    }
    out.push_str(&format!("layer4-blocks {}\n", spec.layer4_blocks));
    for stage in &spec.stages {
        match stage {
            StageSpec::ConvStem { out: o, stride } => {
                out.push_str(&format!("stage conv-stem out={o} stride={stride}\n"));
            }
            StageSpec::Mv2 {
                out: o,
                stride,
                repeat,
                expand,
            } => {
                out.push_str(&format!(
                    "stage mv2 out={o} stride={stride} repeat={repeat} expand={expand}\n"
                ));
            }
            StageSpec::MobileVit {
                out: o,
                dim,
                layers,
                ffn,
                heads,
                patch,
                attention,
                fusion,
            } => {
                let attn = match attention {
                    AttentionKind::MultiHead => "multihead",
                    AttentionKind::SeparableLinear => "separable",
                };
                out.push_str(&format!(
                    "stage mobilevit out={o} dim={dim} layers={layers} ffn={ffn} heads={heads} \
                     patch={patch} attn={attn} fusion={}\n",
                    fusion_to_text(fusion)
                ));
            }
        }
    }
    out
}

pub fn spec_from_text(text: &str) -> Result<ModelSpec> {
    let mut name = None;
    let mut num_classes = 1000usize;
    let mut head_width = None;
    let mut layer4_blocks = 4usize;
    let mut stages = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| TensorError::Format(format!("line {}: bare key '{line}'", lineno + 1)))?;
        let rest = rest.trim();
        let parse_usize = |v: &str, what: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| TensorError::Format(format!("line {}: bad {what} '{v}'", lineno + 1)))
        };
        match key {
            "name" => name = Some(rest.to_string()),
            "num-classes" => num_classes = parse_usize(rest, "num-classes")?,
            "head-width" => head_width = Some(parse_usize(rest, "head-width")?),
            "layer4-blocks" => layer4_blocks = parse_usize(rest, "layer4-blocks")?,
            "stage" => {
                let mut fields = rest.split_whitespace();
                let kind = fields.next().unwrap_or_default();
                let mut kv = std::collections::HashMap::new();
                for f in fields {
                    let (k, v) = f.split_once('=').ok_or_else(|| {
                        TensorError::Format(format!(
                            "line {}: stage field '{f}' is not key=value",
                            lineno + 1
                        ))
                    })?;
                    kv.insert(k.to_string(), v.to_string());
                }
                let get = |k: &str| -> Result<usize> {
                    parse_usize(
                        kv.get(k).map(String::as_str).ok_or_else(|| {
                            TensorError::Format(format!(
                                "line {}: stage missing field '{k}'",
                                lineno + 1
                            ))
                        })?,
                        k,
                    )
                };
                let stage = match kind {
                    "conv-stem" => StageSpec::ConvStem {
                        out: get("out")?,
                        stride: get("stride")?,
                    },
                    "mv2" => StageSpec::Mv2 {
                        out: get("out")?,
                        stride: get("stride")?,
                        repeat: get("repeat")?,
                        expand: get("expand")?,
                    },
                    "mobilevit" => StageSpec::MobileVit {
                        out: get("out")?,
                        dim: get("dim")?,
                        layers: get("layers")?,
                        ffn: get("ffn")?,
                        heads: get("heads")?,
                        patch: get("patch")?,
                        attention: match kv.get("attn").map(String::as_str) {
                            Some("multihead") | None => AttentionKind::MultiHead,
                            Some("separable") => AttentionKind::SeparableLinear,
                            Some(a) => {
                                return Err(TensorError::Format(format!(
                                    "line {}: unknown attention '{a}'",
                                    lineno + 1
                                )))
                            }
                        },
                        fusion: fusion_from_text(
                            kv.get("fusion").map(String::as_str).unwrap_or("v3"),
                        )?,
                    },
                    other => {
                        return Err(TensorError::Format(format!(
                            "line {}: unknown stage kind '{other}'",
                            lineno + 1
                        )))
                    }
                };
                stages.push(stage);
            }
            other => {
                return Err(TensorError::Format(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }

    let spec = ModelSpec {
        name: name.ok_or_else(|| TensorError::Format("spec has no name".into()))?,
        num_classes,
        head_width,
        layer4_blocks,
        stages,
    };
    spec.validate()?;
    Ok(spec)
}
