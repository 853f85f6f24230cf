//! Static parameter and multiply-accumulate counters over built models.
//!
//! Convention: one MAC is one reported FLOP; counts are per sample at the
//! stated resolution; norms, activations and elementwise adds are excluded by
//! default (they are adds/divides, not MACs) and can be approximated with the
//! pointwise flag. The static census is an independent mirror of the model
//! structure; `instrumented_macs` re-derives the count from an actual forward
//! pass for cross-checking.

use serde::{Deserialize, Serialize};

use mvtk_nn::blocks::{MobileVitBlock, Mv2Block};
use mvtk_nn::ctx::EvalCx;
use mvtk_nn::layers::{Act, ConvUnit, LinearLayer, TokenMixer};
use mvtk_tensor::{Element, Result, Shape, Tensor, TensorError};
use mvtk_zoo::{Model, StageBlocks};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Row {
    pub layer: String,
    pub kind: String,
    pub out_n: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub resolution: usize,
    pub include_pointwise: bool,
    pub rows: Vec<Row>,
    pub total_params: u64,
    pub total_macs: u64,
}

struct Walker {
    rows: Vec<Row>,
    pointwise: bool,
}

impl Walker {
    fn push(&mut self, layer: String, kind: &str, c: usize, h: usize, w: usize, params: u64, macs: u64) {
        self.rows.push(Row {
            layer,
            kind: kind.to_string(),
            out_n: 1,
            out_c: c,
            out_h: h,
            out_w: w,
            params,
            macs,
        });
    }

    /// Conv rows know their own geometry from the stored weights.
    fn conv<T: Element>(
        &mut self,
        prefix: &str,
        cu: &ConvUnit<T>,
        h: usize,
        w: usize,
    ) -> (usize, usize, usize) {
        let ws = cu.w.shape();
        let (cout, cing, kh, kw) = (ws.n(), ws.c(), ws.h(), ws.w());
        let hout = (h + 2 * cu.padding - kh) / cu.stride + 1;
        let wout = (w + 2 * cu.padding - kw) / cu.stride + 1;
        let mut macs = (cout * cing * kh * kw * hout * wout) as u64;
        let mut params = cu.w.numel() as u64;
        if let Some(b) = &cu.b {
            params += b.numel() as u64;
        }
        if self.pointwise && cu.act != Act::None {
            macs += (cout * hout * wout) as u64;
        }
        let kind = if cu.groups > 1 && cing == 1 { "dwconv" } else { "conv" };
        self.push(prefix.to_string(), kind, cout, hout, wout, params, macs);
        if let Some(bn) = &cu.norm {
            let macs = if self.pointwise {
                (cout * hout * wout) as u64
            } else {
                0
            };
            self.push(
                format!("{prefix}.bn"),
                "norm",
                cout,
                hout,
                wout,
                (bn.gamma.numel() + bn.beta.numel()) as u64,
                macs,
            );
        }
        (cout, hout, wout)
    }

    fn linear_tokens<T: Element>(
        &mut self,
        prefix: &str,
        lin: &LinearLayer<T>,
        tokens: usize,
        c: usize,
        h: usize,
        w: usize,
    ) {
        let ws = lin.w.shape();
        let (dout, din) = (ws.n(), ws.c());
        let params = lin.w.numel() as u64 + lin.b.as_ref().map(|b| b.numel() as u64).unwrap_or(0);
        let macs = (tokens * din * dout) as u64;
        self.push(prefix.to_string(), "linear", c, h, w, params, macs);
    }

    fn norm_tokens(&mut self, prefix: &str, dim: usize, tokens: usize, c: usize, h: usize, w: usize) {
        let macs = if self.pointwise { (tokens * dim) as u64 } else { 0 };
        self.push(prefix.to_string(), "norm", c, h, w, 2 * dim as u64, macs);
    }

    fn mv2<T: Element>(&mut self, prefix: &str, b: &Mv2Block<T>, h: usize, w: usize) -> (usize, usize, usize) {
        let mut cur = (0usize, h, w);
        if let Some(e) = &b.expand {
            cur = self.conv(&format!("{prefix}.expand"), e, h, w);
        }
        cur = self.conv(&format!("{prefix}.dw"), &b.dw, cur.1, cur.2);
        self.conv(&format!("{prefix}.proj"), &b.proj, cur.1, cur.2)
    }

    fn mobilevit<T: Element>(
        &mut self,
        prefix: &str,
        blk: &MobileVitBlock<T>,
        h: usize,
        w: usize,
    ) -> (usize, usize, usize) {
        let spec = &blk.spec;
        let (c, d) = (spec.channels, spec.dim);
        self.conv(&format!("{prefix}.local.conv"), &blk.local_conv, h, w);
        self.conv(&format!("{prefix}.local.proj"), &blk.local_proj, h, w);

        let t = h * w;
        let seqs = spec.patch.area();
        let n_tok = t / seqs;
        for (i, layer) in blk.global_rep.layers.iter().enumerate() {
            let p = format!("{prefix}.global.l{i}");
            self.norm_tokens(&format!("{p}.norm1"), d, t, d, h, w);
            match &layer.mixer {
                TokenMixer::MultiHead(m) => {
                    self.linear_tokens(&format!("{p}.attn.qkv"), &m.qkv, t, d, h, w);
                    // score and context batched matmuls
                    self.push(
                        format!("{p}.attn.mix"),
                        "attn",
                        d,
                        h,
                        w,
                        0,
                        2 * (t * n_tok * d) as u64,
                    );
                    self.linear_tokens(&format!("{p}.attn.out"), &m.out, t, d, h, w);
                }
                TokenMixer::Separable(m) => {
                    self.linear_tokens(&format!("{p}.attn.qkv"), &m.qkv, t, d, h, w);
                    // score-weighted context sum, linear in token count
                    self.push(format!("{p}.attn.mix"), "attn", d, h, w, 0, (t * d) as u64);
                    self.linear_tokens(&format!("{p}.attn.out"), &m.out, t, d, h, w);
                }
            }
            self.norm_tokens(&format!("{p}.norm2"), d, t, d, h, w);
            self.linear_tokens(&format!("{p}.ffn.fc1"), &layer.ffn.fc1, t, d, h, w);
            self.linear_tokens(&format!("{p}.ffn.fc2"), &layer.ffn.fc2, t, d, h, w);
        }
        if blk.global_rep.final_norm.is_some() {
            self.norm_tokens(&format!("{prefix}.global.norm"), d, t, d, h, w);
        }
        if let Some(p) = &blk.proj {
            self.conv(&format!("{prefix}.proj"), p, h, w);
        }
        if let Some(f) = &blk.fusion {
            self.conv(&format!("{prefix}.fusion"), f, h, w);
        }
        (c, h, w)
    }
}

/// Exact census of all learnable scalars.
pub fn count_params<T: Element>(model: &Model<T>) -> u64 {
    model.param_count()
}

/// Per-sample MAC count at the given input resolution.
pub fn count_macs<T: Element>(model: &Model<T>, resolution: usize) -> Result<u64> {
    Ok(report(model, resolution, false)?.total_macs)
}

/// Full per-layer report in network order.
pub fn report<T: Element>(
    model: &Model<T>,
    resolution: usize,
    include_pointwise: bool,
) -> Result<CostReport> {
    model.spec.stage_resolutions(resolution, resolution)?;
    let mut w = Walker {
        rows: Vec::new(),
        pointwise: include_pointwise,
    };
    let mut cur = (3usize, resolution, resolution);
    for (i, stage) in model.stages.iter().enumerate() {
        let prefix = Model::<T>::stage_prefix(i);
        cur = match stage {
            StageBlocks::Stem(conv) => w.conv(&prefix, conv, cur.1, cur.2),
            StageBlocks::Mv2(blocks) => {
                let mut c = cur;
                for (j, b) in blocks.iter().enumerate() {
                    c = w.mv2(&format!("{prefix}.b{j}"), b, c.1, c.2);
                }
                c
            }
            StageBlocks::Vit(block) => w.mobilevit(&format!("{prefix}.mvit"), block, cur.1, cur.2),
        };
    }
    if let Some(conv) = &model.head_conv {
        cur = w.conv("head.conv", conv, cur.1, cur.2);
    }
    w.push("head.pool".into(), "pool", cur.0, 1, 1, 0, 0);
    let classes = model.spec.num_classes;
    w.linear_tokens("head.fc", &model.classifier, 1, classes, 1, 1);

    let total_params: u64 = w.rows.iter().map(|r| r.params).sum();
    let total_macs: u64 = w.rows.iter().map(|r| r.macs).sum();
    Ok(CostReport {
        model: model.spec.name.clone(),
        resolution,
        include_pointwise,
        rows: w.rows,
        total_params,
        total_macs,
    })
}

/// Execute a forward pass with every multiply in conv/linear/matmul kernels
/// counted; returns the per-sample count for comparison against the static
/// census.
pub fn instrumented_macs<T: Element>(model: &Model<T>, resolution: usize, batch: usize) -> Result<u64> {
    let mut cx = EvalCx::counting();
    let x = Tensor::<T>::zeros(Shape::nchw(batch, 3, resolution, resolution));
    model.forward_with(&mut cx, &x)?;
    Ok(cx.mac_count() / batch as u64)
}

// ---------------------------------------------------------------------------
// Renderings
// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str = "layer,kind,out_n,out_c,out_h,out_w,params,macs";

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.layer, r.kind, r.out_n, r.out_c, r.out_h, r.out_w, r.params, r.macs
            ));
        }
        out.push_str(&format!(
            "total,total,1,0,0,0,{},{}\n",
            self.total_params, self.total_macs
        ));
        out
    }

    pub fn from_csv(model: &str, resolution: usize, text: &str) -> Result<CostReport> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            other => {
                return Err(TensorError::Format(format!(
                    "bad csv header: {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        let mut totals = None;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(TensorError::Format(format!("bad csv row '{line}'")));
            }
            let num = |s: &str| -> Result<u64> {
                s.parse()
                    .map_err(|_| TensorError::Format(format!("bad number '{s}'")))
            };
            if f[0] == "total" {
                totals = Some((num(f[6])?, num(f[7])?));
                continue;
            }
            rows.push(Row {
                layer: f[0].to_string(),
                kind: f[1].to_string(),
                out_n: num(f[2])? as usize,
                out_c: num(f[3])? as usize,
                out_h: num(f[4])? as usize,
                out_w: num(f[5])? as usize,
                params: num(f[6])?,
                macs: num(f[7])?,
            });
        }
        let (total_params, total_macs) =
            totals.ok_or_else(|| TensorError::Format("csv has no totals row".into()))?;
        Ok(CostReport {
            model: model.to_string(),
            resolution,
            include_pointwise: false,
            rows,
            total_params,
            total_macs,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<34} {:<8} {:>14} {:>12} {:>14}\n",
            "layer", "kind", "output", "params", "macs"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<34} {:<8} {:>14} {:>12} {:>14}\n",
                r.layer,
                r.kind,
                format!("{}x{}x{}x{}", r.out_n, r.out_c, r.out_h, r.out_w),
                r.params,
                r.macs
            ));
        }
        out.push_str(&format!(
            "{:<34} {:<8} {:>14} {:>12} {:>14}\n",
            "total", "", "", self.total_params, self.total_macs
        ));
        out.push_str(&format!(
            "params: {:.2} M   macs @ {}x{}: {:.1} M\n",
            self.total_params as f64 / 1e6,
            self.resolution,
            self.resolution,
            self.total_macs as f64 / 1e6
        ));
        out
    }
}
