//! Toy-scale training: a deterministic synthetic classification task, a
//! decoupled-weight-decay adaptive-moment optimizer, and the ablation sweep.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use mvtk_nn::blocks::FusionConfig;
use mvtk_nn::ctx::{Cx, EvalCx, TrainCx};
use mvtk_nn::layers::{AttentionKind, Params, Scope};
use mvtk_tensor::{Element, Result, Rng, Shape, Tensor, TensorError};
use mvtk_zoo::{build, Model, ModelSpec, StageSpec};

/// Synthetic dataset spec. Regeneration from the seed is bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTask {
    pub classes: usize,
    pub per_class: usize,
    pub image: usize,
    pub seed: u64,
}

impl Default for ToyTask {
    fn default() -> ToyTask {
        ToyTask {
            classes: 4,
            per_class: 24,
            image: 64,
            seed: 0,
        }
    }
}

/// Color-blob images: each class has a base color; a brighter blob and mild
/// noise are layered on top. Channel means alone separate the classes.
pub fn generate_dataset(task: &ToyTask) -> (Tensor<f32>, Vec<usize>) {
    const PALETTE: [[f64; 3]; 8] = [
        [0.85, 0.15, 0.15],
        [0.15, 0.85, 0.15],
        [0.15, 0.15, 0.85],
        [0.80, 0.80, 0.15],
        [0.80, 0.15, 0.80],
        [0.15, 0.80, 0.80],
        [0.60, 0.35, 0.10],
        [0.40, 0.40, 0.40],
    ];
    assert!(task.classes <= PALETTE.len());
    let n = task.classes * task.per_class;
    let s = task.image;
    let shape = Shape::nchw(n, 3, s, s);
    let mut rng = Rng::seed_from(task.seed ^ 0x746f79);
    let mut data = vec![0f32; shape.numel()];
    let mut labels = Vec::with_capacity(n);
    for img in 0..n {
        let class = img % task.classes;
        labels.push(class);
        let base = PALETTE[class];
        let (ch, cw) = (rng.below(s), rng.below(s));
        let radius = (s / 6 + rng.below(s / 6 + 1)) as isize;
        for c in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let mut v = base[c];
                    let dy = y as isize - ch as isize;
                    let dx = x as isize - cw as isize;
                    if dy * dy + dx * dx <= radius * radius {
                        v = (v * 1.3).min(1.0);
                    }
                    v += rng.uniform_range(-0.05, 0.05);
                    data[shape.idx(img, c, y, x)] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    (Tensor::new(shape, data).unwrap(), labels)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive moments with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step<T: Element>(&mut self, model: &mut Model<T>, grads: &HashMap<String, Tensor<T>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        model.visit_mut("", Scope::Learnable, &mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let pd = p.data_mut();
            for (i, gv) in g.data().iter().enumerate() {
                let gf = gv.to_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gf;
                v[i] = b2 * v[i] + (1.0 - b2) * gf * gf;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let pv = pd[i].to_f64();
                pd[i] = T::from_f64(pv - lr * (mhat / (vhat.sqrt() + eps) + wd * pv));
            }
        });
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 500,
            batch: 16,
            lr: 2e-3,
            weight_decay: 0.01,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub curve: Vec<CurvePoint>,
    pub final_train_acc: f64,
    pub final_loss: f64,
}

impl TrainRun {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,loss,acc\n");
        for p in &self.curve {
            out.push_str(&format!("{},{},{}\n", p.step, p.loss, p.acc));
        }
        out
    }
}

const BN_MOMENTUM: f64 = 0.1;

fn slice_batch(images: &Tensor<f32>, labels: &[usize], idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
    let s = images.shape();
    let plane = s.c() * s.h() * s.w();
    let mut data = Vec::with_capacity(idx.len() * plane);
    let mut targets = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&images.data()[i * plane..(i + 1) * plane]);
        targets.push(labels[i]);
    }
    (
        Tensor::new(Shape::nchw(idx.len(), s.c(), s.h(), s.w()), data).unwrap(),
        targets,
    )
}

fn apply_bn_updates<T: Element>(model: &mut Model<T>, updates: Vec<mvtk_nn::BnUpdate<T>>) {
    let mut by_name: HashMap<String, (Tensor<T>, Tensor<T>)> = HashMap::new();
    for u in updates {
        by_name.insert(u.prefix, (u.mean, u.var));
    }
    model.visit_mut("", Scope::All, &mut |name, t| {
        let (field, key) = match name.rsplit_once('.') {
            Some((k, "running_mean")) => (0, k),
            Some((k, "running_var")) => (1, k),
            _ => return,
        };
        if let Some((mean, var)) = by_name.get(key) {
            let src = if field == 0 { mean } else { var };
            let td = t.data_mut();
            for (cur, new) in td.iter_mut().zip(src.data()) {
                let c = cur.to_f64();
                *cur = T::from_f64(c + BN_MOMENTUM * (new.to_f64() - c));
            }
        }
    });
}

fn batch_accuracy(logits: &Tensor<f32>, targets: &[usize]) -> f64 {
    let k = logits.shape().c();
    let mut hits = 0usize;
    for (n, &t) in targets.iter().enumerate() {
        let row = &logits.data()[n * k..(n + 1) * k];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == t {
            hits += 1;
        }
    }
    hits as f64 / targets.len() as f64
}

/// Train a model on the synthetic task. Deterministic given the seeds; a
/// non-finite loss is a structured failure.
pub fn train_toy(spec: &ModelSpec, task: &ToyTask, cfg: &TrainConfig) -> Result<TrainRun> {
    if spec.num_classes != task.classes {
        return Err(TensorError::Config(format!(
            "model head has {} classes, task has {}",
            spec.num_classes, task.classes
        )));
    }
    let (images, labels) = generate_dataset(task);
    let n = labels.len();
    let mut model: Model<f32> = build(spec, cfg.seed)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order_rng = Rng::seed_from(cfg.seed ^ 0x6f726465);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if cursor + cfg.batch > n {
            // deterministic reshuffle per epoch
            for i in (1..n).rev() {
                order.swap(i, order_rng.below(i + 1));
            }
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch];
        cursor += cfg.batch;
        let (bx, bt) = slice_batch(&images, &labels, idx);

        let mut cx = TrainCx::new(cfg.seed.wrapping_add(step as u64));
        let xv = cx.input(bx, false);
        let logits = model.forward_with(&mut cx, &xv)?;
        let acc = batch_accuracy(cx.value(&logits), &bt);
        let loss = cx.cross_entropy(&logits, &bt)?;
        let loss_val = cx.value(&loss).data()[0] as f64;
        if !loss_val.is_finite() {
            return Err(TensorError::Config(format!(
                "training diverged: non-finite loss at step {step}"
            )));
        }
        let (grads, bn_updates) = cx.backward(loss)?;
        let grads: HashMap<String, Tensor<f32>> = grads.into_iter().collect();
        apply_bn_updates(&mut model, bn_updates);
        opt.step(&mut model, &grads);
        curve.push(CurvePoint {
            step,
            loss: loss_val,
            acc,
        });
    }

    // final train accuracy over the whole set, inference mode
    let mut hits = 0usize;
    let eval_batch = 16.min(n);
    let mut i = 0;
    while i < n {
        let hi = (i + eval_batch).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let (bx, bt) = slice_batch(&images, &labels, &idx);
        let mut cx = EvalCx::new();
        let logits = model.forward_with(&mut cx, &bx)?;
        hits += (batch_accuracy(&logits, &bt) * bt.len() as f64).round() as usize;
        i = hi;
    }
    let final_loss = curve.last().map(|p| p.loss).unwrap_or(f64::NAN);
    Ok(TrainRun {
        curve,
        final_train_acc: hits as f64 / n as f64,
        final_loss,
    })
}

// ---------------------------------------------------------------------------
// Shrunk specs and the ablation sweep
// ---------------------------------------------------------------------------

/// Quarter-width single-transformer-layer v3 model for the trainability
/// stand-in (64x64 inputs, 4-class head).
pub fn shrunk_v3_spec(classes: usize) -> ModelSpec {
    ModelSpec {
        name: "v3-shrunk".into(),
        num_classes: classes,
        head_width: Some(96),
        layer4_blocks: 4,
        stages: vec![
            StageSpec::ConvStem { out: 8, stride: 2 },
            StageSpec::Mv2 { out: 8, stride: 1, repeat: 1, expand: 2 },
            StageSpec::Mv2 { out: 16, stride: 2, repeat: 2, expand: 2 },
            StageSpec::Mv2 { out: 32, stride: 2, repeat: 1, expand: 2 },
            StageSpec::MobileVit {
                out: 32,
                dim: 36,
                layers: 1,
                ffn: 72,
                heads: 4,
                patch: 2,
                attention: AttentionKind::MultiHead,
                fusion: FusionConfig::v3(),
            },
            StageSpec::Mv2 { out: 48, stride: 2, repeat: 1, expand: 2 },
            StageSpec::MobileVit {
                out: 48,
                dim: 48,
                layers: 1,
                ffn: 96,
                heads: 4,
                patch: 2,
                attention: AttentionKind::MultiHead,
                fusion: FusionConfig::v3(),
            },
        ],
    }
}

/// Tiny two-stage flag-matrix vehicle; dims chosen with d below C so the
/// parameter column is monotone across the ablation rows.
pub fn sweep_spec(classes: usize, fusion: FusionConfig) -> ModelSpec {
    let vit = |out: usize, dim: usize, ffn: usize| StageSpec::MobileVit {
        out,
        dim,
        layers: 1,
        ffn,
        heads: 4,
        patch: 2,
        attention: AttentionKind::MultiHead,
        fusion,
    };
    ModelSpec {
        name: "ablation".into(),
        num_classes: classes,
        head_width: Some(64),
        layer4_blocks: 4,
        stages: vec![
            StageSpec::ConvStem { out: 8, stride: 2 },
            StageSpec::Mv2 { out: 8, stride: 1, repeat: 1, expand: 2 },
            StageSpec::Mv2 { out: 16, stride: 2, repeat: 2, expand: 2 },
            StageSpec::Mv2 { out: 24, stride: 2, repeat: 1, expand: 2 },
            vit(24, 16, 32),
            StageSpec::Mv2 { out: 32, stride: 2, repeat: 1, expand: 2 },
            vit(32, 24, 48),
        ],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub params: u64,
    pub macs: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// One row per flag configuration, trained briefly on the toy task. Asserts
/// nothing about accuracy ordering; only structure and non-divergence.
pub fn ablation_sweep(task: &ToyTask, cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, fusion) in FusionConfig::ablation_rows() {
        let spec = sweep_spec(task.classes, fusion);
        let model: Model<f32> = build(&spec, cfg.seed)?;
        let params = mvtk_cost::count_params(&model);
        let macs = mvtk_cost::count_macs(&model, task.image)?;
        let run = train_toy(&spec, task, cfg)?;
        rows.push(AblationRow {
            label: label.to_string(),
            params,
            macs,
            initial_loss: run.curve.first().map(|p| p.loss).unwrap_or(f64::NAN),
            final_loss: run.final_loss,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,params,macs,initial_loss,final_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label, r.params, r.macs, r.initial_loss, r.final_loss
        ));
    }
    out
}
