//! Finite-difference gradient checking: analytic gradients from the tape
//! against central differences, per parameter group.

use serde::{Deserialize, Serialize};

use mvtk_nn::blocks::{FusionConfig, MobileVitBlock, MobileVitBlockSpec};
use mvtk_nn::ctx::{Cx, TrainCx};
use mvtk_nn::layers::{AttentionKind, LinearLayer, Params, PatchSpec, Scope};
use mvtk_tensor::{Result, Rng, Shape, Tensor, TensorError, Var};

const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub argmax_index: usize,
    pub checked: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub target: String,
    pub threshold: f64,
    pub epsilon: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Check d(loss)/d(params) for `loss = sum(forward(target, input) * proj)`
/// with a fixed random projection. Central differences use a step of
/// `1e-4 * max(1, |theta|)`. Large groups are subsampled deterministically.
pub fn gradcheck<M, F>(
    label: &str,
    target: &M,
    input: &Tensor<f64>,
    fwd: F,
    threshold: f64,
    samples_per_group: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    M: Params<f64> + Clone,
    F: Fn(&mut TrainCx<f64>, &M, Var) -> Result<Var>,
{
    let eps_base = 1e-4;
    let run = |m: &M| -> Result<(f64, Vec<(String, Tensor<f64>)>)> {
        let mut cx = TrainCx::new(seed);
        let xv = cx.input(input.clone(), false);
        let out = fwd(&mut cx, m, xv)?;
        // mean-scale the projection so groups whose true gradient vanishes
        // (e.g. shifts that a downstream batchnorm removes) sit below the
        // rel-err floor instead of amplifying finite-difference noise
        let numel = cx.value(&out).numel() as f64;
        let proj = Rng::seed_from(seed ^ 0x70726f6a)
            .uniform_tensor::<f64>(cx.value(&out).shape(), -1.0 / numel, 1.0 / numel);
        let pv = cx.input(proj, false);
        let prod = cx.mul(&out, &pv)?;
        let loss = cx.sum_all(&prod);
        let lv = cx.value(&loss).data()[0];
        let (grads, _) = cx.backward(loss)?;
        Ok((lv, grads))
    };

    let (loss0, grads) = run(target)?;
    if !loss0.is_finite() {
        return Err(TensorError::Config(format!(
            "gradcheck {label}: non-finite loss at baseline"
        )));
    }
    let grads: std::collections::HashMap<String, Tensor<f64>> = grads.into_iter().collect();

    let mut groups_meta = Vec::new();
    target.visit("", Scope::Learnable, &mut |n, t| {
        groups_meta.push((n.to_string(), t.numel()));
    });

    let mut groups = Vec::new();
    let mut worst = 0.0f64;
    let mut sampler = Rng::seed_from(seed ^ 0x73616d70);
    for (name, numel) in groups_meta {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| TensorError::Config(format!("gradcheck {label}: no gradient for {name}")))?;
        if !analytic.all_finite() {
            return Err(TensorError::Config(format!(
                "gradcheck {label}: non-finite gradient in group {name}"
            )));
        }
        let checked = numel.min(samples_per_group);
        let mut max_err = 0.0f64;
        let mut argmax = 0usize;
        for s in 0..checked {
            let i = if numel <= samples_per_group {
                s
            } else {
                sampler.below(numel)
            };
            let theta = analytic_param_value(target, &name, i);
            let eps = eps_base * theta.abs().max(1.0);
            let eval_at = |delta: f64| -> Result<f64> {
                let mut pert = target.clone();
                pert.visit_mut("", Scope::Learnable, &mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                });
                Ok(run(&pert)?.0)
            };
            // fourth-order central stencil: the composed blocks are curved
            // enough (batch statistics, softmax) that the plain two-point
            // difference truncates above the tightest thresholds
            let fd = (eval_at(-2.0 * eps)? - 8.0 * eval_at(-eps)? + 8.0 * eval_at(eps)?
                - eval_at(2.0 * eps)?)
                / (12.0 * eps);
            if !fd.is_finite() {
                return Err(TensorError::Config(format!(
                    "gradcheck {label}: non-finite finite-difference at {name}[{i}]"
                )));
            }
            let err = rel_err(analytic.data()[i], fd);
            if err > max_err {
                max_err = err;
                argmax = i;
            }
        }
        worst = worst.max(max_err);
        groups.push(GroupReport {
            name,
            max_rel_err: max_err,
            argmax_index: argmax,
            checked,
        });
    }

    Ok(GradCheckReport {
        target: label.to_string(),
        threshold,
        epsilon: eps_base,
        max_rel_err: worst,
        passed: worst < threshold,
        groups,
    })
}

fn analytic_param_value<M: Params<f64>>(m: &M, name: &str, i: usize) -> f64 {
    let mut v = 0.0;
    m.visit("", Scope::Learnable, &mut |n, t| {
        if n == name {
            v = t.data()[i];
        }
    });
    v
}

/// Tiny full block used by the CLI gradcheck entry point: C=8, d=8, L=1 on a
/// 16x16 map.
pub fn tiny_block_spec(mode: &str) -> Result<MobileVitBlockSpec> {
    let (attention, fusion) = match mode {
        "v1" => (AttentionKind::MultiHead, FusionConfig::v1()),
        "v2" => (AttentionKind::SeparableLinear, FusionConfig::v2()),
        "v3" => (AttentionKind::MultiHead, FusionConfig::v3()),
        "v3-separable" => (AttentionKind::SeparableLinear, FusionConfig::v3()),
        other => {
            return Err(TensorError::Config(format!(
                "unknown gradcheck block '{other}' (use v1 | v2 | v3 | v3-separable | linear)"
            )))
        }
    };
    Ok(MobileVitBlockSpec {
        channels: 8,
        dim: 8,
        layers: 1,
        ffn_dim: 16,
        heads: 2,
        patch: PatchSpec::square(2),
        attention,
        fusion,
    })
}

/// Named gradcheck targets for the CLI: a single linear layer or a tiny
/// MobileViT block in each mode.
pub fn run_named(block: &str, threshold: Option<f64>, seed: u64) -> Result<GradCheckReport> {
    match block {
        "linear" => {
            let mut rng = Rng::seed_from(seed);
            let lin = LinearLayer::<f64>::new(&mut rng, 6, 5, true);
            let x = rng.uniform_tensor::<f64>(Shape::nchw(1, 4, 6, 1), -1.0, 1.0);
            gradcheck(
                "linear",
                &lin,
                &x,
                |cx, m, xv| m.forward(cx, &xv, ""),
                threshold.unwrap_or(1e-7),
                25,
                seed,
            )
        }
        mode => {
            let spec = tiny_block_spec(mode)?;
            let mut rng = Rng::seed_from(seed);
            let block = MobileVitBlock::<f64>::new(&mut rng, spec)?;
            let x = rng.uniform_tensor::<f64>(Shape::nchw(1, 8, 16, 16), -1.0, 1.0);
            gradcheck(
                &format!("block-{mode}"),
                &block,
                &x,
                |cx, m, xv| m.forward(cx, &xv, ""),
                threshold.unwrap_or(1e-4),
                25,
                seed,
            )
        }
    }
}
