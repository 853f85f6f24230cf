//! Runnable networks built from [`ModelSpec`], plus weight-bundle
//! serialization.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mvtk_nn::blocks::{MobileVitBlock, MobileVitBlockSpec, Mv2Block, Mv2Spec};
use mvtk_nn::ctx::{Cx, EvalCx};
use mvtk_nn::layers::{Act, ConvUnit, LinearLayer, Params, PatchSpec, Scope};
use mvtk_tensor::{Element, Result, Rng, Shape, Tensor, TensorError};

use crate::spec::{ModelSpec, StageSpec};

#[derive(Debug, Clone)]
pub enum StageBlocks<T> {
    Stem(ConvUnit<T>),
    Mv2(Vec<Mv2Block<T>>),
    Vit(MobileVitBlock<T>),
}

/// A built network. Immutable for inference; training mutates parameters
/// through `visit_mut` under a single-writer contract.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub stages: Vec<StageBlocks<T>>,
    pub head_conv: Option<ConvUnit<T>>,
    pub classifier: LinearLayer<T>,
}

/// Deterministic build: truncated-normal conv/linear weights from the seed,
/// zero biases, identity norm affine.
pub fn build<T: Element>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = Rng::seed_from(seed);
    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut cin = 3usize;
    for stage in &spec.stages {
        let built = match stage {
            StageSpec::ConvStem { out, stride } => {
                let s = StageBlocks::Stem(ConvUnit::new(
                    &mut rng, cin, *out, 3, *stride, 1, false, true, Act::Silu,
                ));
                cin = *out;
                s
            }
            StageSpec::Mv2 {
                out,
                stride,
                repeat,
                expand,
            } => {
                let mut blocks = Vec::with_capacity(*repeat);
                for i in 0..*repeat {
                    let bspec = Mv2Spec {
                        cin,
                        cout: *out,
                        stride: if i == 0 { *stride } else { 1 },
                        expand: *expand,
                    };
                    blocks.push(Mv2Block::new(&mut rng, bspec));
                    cin = *out;
                }
                StageBlocks::Mv2(blocks)
            }
            StageSpec::MobileVit {
                out,
                dim,
                ffn,
                heads,
                patch,
                attention,
                fusion,
                ..
            } => {
                let bspec = MobileVitBlockSpec {
                    channels: *out,
                    dim: *dim,
                    layers: spec.effective_layers(stage),
                    ffn_dim: *ffn,
                    heads: *heads,
                    patch: PatchSpec::square(*patch),
                    attention: *attention,
                    fusion: *fusion,
                };
                cin = *out;
                StageBlocks::Vit(MobileVitBlock::new(&mut rng, bspec)?)
            }
        };
        stages.push(built);
    }
    let head_conv = spec
        .head_width
        .map(|hw| ConvUnit::new(&mut rng, cin, hw, 1, 1, 1, false, true, Act::Silu));
    let feat = spec.head_width.unwrap_or(cin);
    let classifier = LinearLayer::new(&mut rng, feat, spec.num_classes, true);
    Ok(Model {
        spec: spec.clone(),
        stages,
        head_conv,
        classifier,
    })
}

impl<T: Element> Model<T> {
    pub fn stage_prefix(i: usize) -> String {
        format!("l{i}")
    }

    /// Forward under any context; `x` is `[N, 3, H, W]`, logits come back as
    /// `[N, num_classes, 1, 1]` (no softmax).
    pub fn forward_with<C: Cx<T>>(&self, cx: &mut C, x: &C::V) -> Result<C::V> {
        let in_shape = cx.shape(x);
        self.spec.stage_resolutions(in_shape.h(), in_shape.w())?;
        let mut h = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let prefix = Self::stage_prefix(i);
            h = match stage {
                StageBlocks::Stem(conv) => conv.forward(cx, &h, &prefix)?,
                StageBlocks::Mv2(blocks) => {
                    let mut v = h;
                    for (j, b) in blocks.iter().enumerate() {
                        v = b.forward(cx, &v, &format!("{prefix}.b{j}"))?;
                    }
                    v
                }
                StageBlocks::Vit(block) => block.forward(cx, &h, &format!("{prefix}.mvit"))?,
            };
        }
        if let Some(conv) = &self.head_conv {
            h = conv.forward(cx, &h, "head.conv")?;
        }
        let pooled = cx.global_pool(&h);
        let s = cx.shape(&pooled);
        let tokens = cx.reshape(&pooled, Shape::nchw(s.n(), 1, s.c(), 1))?;
        let logits = self.classifier.forward(cx, &tokens, "head.fc")?;
        let ls = cx.shape(&logits);
        cx.reshape(&logits, Shape::nchw(ls.n(), ls.h(), 1, 1))
    }

    /// Plain inference.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = EvalCx::new();
        self.forward_with(&mut cx, x)
    }

    pub fn param_count(&self) -> u64 {
        mvtk_nn::layers::param_count(self)
    }

    /// Precision conversion, e.g. an f64 twin for gradient checking.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let mut twin: Model<U> = build(&self.spec, 0).expect("spec already validated");
        let mut source: HashMap<String, Tensor<T>> = HashMap::new();
        self.visit("", Scope::All, &mut |n, t| {
            source.insert(n.to_string(), t.clone());
        });
        twin.visit_mut("", Scope::All, &mut |n, t| {
            *t = source[n].cast::<U>();
        });
        twin
    }
}

impl<T: Element> Params<T> for Model<T> {
    fn visit(&self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, stage) in self.stages.iter().enumerate() {
            let p = format!("{prefix}{}", Self::stage_prefix(i));
            match stage {
                StageBlocks::Stem(conv) => conv.visit(&p, scope, f),
                StageBlocks::Mv2(blocks) => {
                    for (j, b) in blocks.iter().enumerate() {
                        b.visit(&format!("{p}.b{j}"), scope, f);
                    }
                }
                StageBlocks::Vit(block) => block.visit(&format!("{p}.mvit"), scope, f),
            }
        }
        if let Some(conv) = &self.head_conv {
            conv.visit(&format!("{prefix}head.conv"), scope, f);
        }
        self.classifier.visit(&format!("{prefix}head.fc"), scope, f);
    }
    fn visit_mut(&mut self, prefix: &str, scope: Scope, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let p = format!("{prefix}l{i}");
            match stage {
                StageBlocks::Stem(conv) => conv.visit_mut(&p, scope, f),
                StageBlocks::Mv2(blocks) => {
                    for (j, b) in blocks.iter_mut().enumerate() {
                        b.visit_mut(&format!("{p}.b{j}"), scope, f);
                    }
                }
                StageBlocks::Vit(block) => block.visit_mut(&format!("{p}.mvit"), scope, f),
            }
        }
        if let Some(conv) = &mut self.head_conv {
            conv.visit_mut(&format!("{prefix}head.conv"), scope, f);
        }
        self.classifier
            .visit_mut(&format!("{prefix}head.fc"), scope, f);
    }
}

// ---------------------------------------------------------------------------
// Weight bundles: embedded spec text + named tensors in the binary format
// ---------------------------------------------------------------------------

const BUNDLE_MAGIC: &[u8; 4] = b"MVTB";
const BUNDLE_VERSION: u8 = 1;

pub fn save_bundle<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&[BUNDLE_VERSION])?;
    let spec_text = crate::spec::spec_to_text(&model.spec);
    w.write_all(&(spec_text.len() as u32).to_le_bytes())?;
    w.write_all(spec_text.as_bytes())?;

    let mut entries: Vec<(String, Tensor<T>)> = Vec::new();
    model.visit("", Scope::All, &mut |n, t| entries.push((n.to_string(), t.clone())));
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        mvtk_tensor::io::write_tensor(&mut w, tensor)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_bundle<T: Element>(path: &Path) -> Result<Model<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 5];
    r.read_exact(&mut head)
        .map_err(|e| TensorError::Format(format!("truncated bundle: {e}")))?;
    if &head[0..4] != BUNDLE_MAGIC {
        return Err(TensorError::Format(format!(
            "bad bundle magic {:02x?}, expected \"MVTB\"",
            &head[0..4]
        )));
    }
    if head[4] != BUNDLE_VERSION {
        return Err(TensorError::Format(format!(
            "unsupported bundle version {}",
            head[4]
        )));
    }
    let spec_len = read_u32(&mut r)? as usize;
    let mut spec_bytes = vec![0u8; spec_len];
    r.read_exact(&mut spec_bytes)
        .map_err(|e| TensorError::Format(format!("truncated bundle spec: {e}")))?;
    let spec_text = String::from_utf8(spec_bytes)
        .map_err(|_| TensorError::Format("bundle spec is not utf-8".into()))?;
    let spec = crate::spec::spec_from_text(&spec_text)?;
    let mut model: Model<T> = build(&spec, 0)?;

    let count = read_u32(&mut r)? as usize;
    let mut tensors: HashMap<String, Tensor<T>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| TensorError::Format(format!("truncated tensor name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Format("tensor name is not utf-8".into()))?;
        let tensor = mvtk_tensor::io::read_tensor(&mut r)?;
        tensors.insert(name, tensor);
    }

    let mut missing = Vec::new();
    let mut shape_err = None;
    model.visit_mut("", Scope::All, &mut |n, t| match tensors.get(n) {
        Some(loaded) if loaded.shape() == t.shape() => *t = loaded.clone(),
        Some(loaded) => {
            shape_err.get_or_insert(format!(
                "tensor {n}: bundle has {}, model expects {}",
                loaded.shape(),
                t.shape()
            ));
        }
        None => missing.push(n.to_string()),
    });
    if let Some(e) = shape_err {
        return Err(TensorError::Format(e));
    }
    if !missing.is_empty() {
        return Err(TensorError::Format(format!(
            "bundle is missing tensors: {}",
            missing.join(", ")
        )));
    }
    Ok(model)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| TensorError::Format(format!("truncated bundle: {e}")))?;
    Ok(u32::from_le_bytes(b))
}
