//! `mvtk` — describe, count, run and verify the MobileViT model family.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error.

mod image;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mvtk_tensor::{Result, Rng, Shape, TensorError};
use mvtk_zoo::{build, load_bundle, named_spec, spec_from_text, Model, ModelSpec, StageSpec};

#[derive(Parser)]
#[command(name = "mvtk", version, about = "MobileViT block-family toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Named model or path to a model spec file
    model: String,
    /// Transformer layer count for the L=4 stage (4 or 2)
    #[arg(long, default_value_t = 4)]
    layer4_blocks: usize,
    /// Classifier classes override
    #[arg(long)]
    num_classes: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelSpec> {
        let mut spec = if Path::new(&self.model).exists() {
            spec_from_text(&std::fs::read_to_string(&self.model)?)?
        } else {
            named_spec(&self.model)?
        };
        if self.layer4_blocks != 4 {
            spec = spec.with_layer4_blocks(self.layer4_blocks);
        }
        if let Some(c) = self.num_classes {
            spec = spec.with_classes(c);
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the stage table of a model
    Describe {
        #[command(flatten)]
        model: ModelArgs,
        /// Input resolution used for the output-size column
        #[arg(long, default_value_t = 256)]
        res: usize,
    },
    /// Parameter and MAC report
    Count {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 256)]
        res: usize,
        /// table | csv | json
        #[arg(long, default_value = "table")]
        format: String,
        /// Write machine formats to a file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Add rough pointwise (norm/activation) multiply estimates
        #[arg(long)]
        include_pointwise: bool,
    },
    /// Classify an image (PPM P6 or tensor file)
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// Weight bundle; random seeded weights when omitted
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 256)]
        res: usize,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Forward-latency and throughput measurement
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 256)]
        res: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Worker threads (default: MVTK_THREADS or 1)
        #[arg(long)]
        threads: Option<usize>,
        /// human | json
        #[arg(long, default_value = "human")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient check of a block or layer
    Gradcheck {
        /// linear | v1 | v2 | v3 | v3-separable
        #[arg(long, default_value = "v3")]
        block: String,
        /// Only `tiny` is available
        #[arg(long, default_value = "tiny")]
        size: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a shrunk model on the synthetic color-blob task
    TrainToy {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Write the step,loss,acc curve here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fusion-flag ablation matrix on the toy task
    Ablate {
        /// Only `table6` is available
        #[arg(long, default_value = "table6")]
        preset: String,
        #[arg(long, default_value_t = 60)]
        steps: usize,
        #[arg(long, default_value_t = 21)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                TensorError::Config(_) | TensorError::Format(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn set_threads(explicit: Option<usize>) {
    let n = explicit.or_else(|| {
        std::env::var("MVTK_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    mvtk_tensor::kernels::set_num_threads(n.unwrap_or(1));
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Describe { model, res } => {
            let spec = model.resolve()?;
            print!("{}", describe(&spec, res)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Count {
            model,
            res,
            format,
            out,
            include_pointwise,
        } => {
            let spec = model.resolve()?;
            let m: Model<f32> = build(&spec, 0)?;
            let rep = mvtk_cost::report(&m, res, include_pointwise)?;
            let rendered = match format.as_str() {
                "table" => rep.to_table(),
                "csv" => rep.to_csv(),
                "json" => rep.to_json(),
                other => {
                    return Err(TensorError::Config(format!(
                        "unknown format '{other}' (table | csv | json)"
                    )))
                }
            };
            emit(rendered, out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Infer {
            model,
            weights,
            image,
            res,
            topk,
            seed,
        } => {
            let spec = model.resolve()?;
            let m: Model<f32> = match &weights {
                Some(path) => {
                    let loaded = load_bundle(path)?;
                    if loaded.spec.stages != spec.stages || loaded.spec.head_width != spec.head_width
                    {
                        return Err(TensorError::Config(format!(
                            "weight bundle was built for '{}', not '{}'",
                            loaded.spec.name, spec.name
                        )));
                    }
                    loaded
                }
                None => build(&spec, seed)?,
            };
            let x = image::load_image(&image, res)?;
            let logits = m.forward(&x)?;
            let probs = mvtk_tensor::kernels::softmax(&logits, 1);
            let k = logits.shape().c();
            let mut ranked: Vec<(usize, f32)> =
                (0..k).map(|i| (i, probs.data()[i])).collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (class, p) in ranked.iter().take(topk.min(k)) {
                println!("class {class:>4}  score {p:.6}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            model,
            res,
            batch,
            iterations,
            warmup,
            threads,
            format,
            out,
            seed,
        } => {
            set_threads(threads);
            let spec = model.resolve()?;
            let m: Model<f32> = build(&spec, seed)?;
            let macs = mvtk_cost::count_macs(&m, res)?;
            let mut rng = Rng::seed_from(seed);
            let x = rng.uniform_tensor::<f32>(Shape::nchw(batch, 3, res, res), 0.0, 1.0);
            for _ in 0..warmup {
                m.forward(&x)?;
            }
            let iterations = iterations.max(1);
            let mut lat_ms = Vec::with_capacity(iterations);
            for _ in 0..iterations {
                let t0 = Instant::now();
                m.forward(&x)?;
                lat_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            let mut sorted = lat_ms.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean = lat_ms.iter().sum::<f64>() / lat_ms.len() as f64;
            let pct = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
            let throughput = batch as f64 / (mean / 1e3);
            let report = serde_json::json!({
                "model": spec.name,
                "resolution": res,
                "batch": batch,
                "iterations": iterations,
                "warmup": warmup,
                "threads": mvtk_tensor::kernels::num_threads(),
                "macs_per_sample": macs,
                "latency_ms": { "mean": mean, "p50": pct(0.5), "p95": pct(0.95) },
                "images_per_sec": throughput,
                "effective_gmacs_per_sec": macs as f64 * throughput / 1e9,
            });
            let rendered = match format.as_str() {
                "human" => format!(
                    "model {name}  batch {batch} @ {res}x{res}  ({iters} iters, {warmup} warmup, {thr} threads)\n\
                     latency  mean {mean:.2} ms   p50 {p50:.2} ms   p95 {p95:.2} ms\n\
                     throughput {tput:.1} images/sec   {g:.2} effective GMAC/s ({macs} MACs/sample)\n",
                    name = spec.name,
                    iters = iterations,
                    thr = mvtk_tensor::kernels::num_threads(),
                    p50 = pct(0.5),
                    p95 = pct(0.95),
                    tput = throughput,
                    g = macs as f64 * throughput / 1e9,
                ),
                "json" => format!("{}\n", serde_json::to_string_pretty(&report).unwrap()),
                other => {
                    return Err(TensorError::Config(format!(
                        "unknown format '{other}' (human | json)"
                    )))
                }
            };
            emit(rendered, out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            block,
            size,
            threshold,
            seed,
            out,
        } => {
            if size != "tiny" {
                return Err(TensorError::Config(format!(
                    "unknown size '{size}' (only tiny)"
                )));
            }
            let rep = mvtk_verify::run_named(&block, threshold, seed)?;
            if let Some(path) = &out {
                std::fs::write(path, rep.to_json())?;
            }
            println!(
                "gradcheck {}: max rel err {:.3e} (threshold {:.0e}) -> {}",
                rep.target,
                rep.max_rel_err,
                rep.threshold,
                if rep.passed { "PASS" } else { "FAIL" }
            );
            Ok(if rep.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::TrainToy {
            seed,
            steps,
            batch,
            lr,
            weight_decay,
            classes,
            out,
        } => {
            let task = mvtk_verify::ToyTask {
                classes,
                ..Default::default()
            };
            let spec = mvtk_verify::shrunk_v3_spec(classes);
            let cfg = mvtk_verify::TrainConfig {
                steps,
                batch,
                lr,
                weight_decay,
                seed,
            };
            let run = mvtk_verify::train_toy(&spec, &task, &cfg)?;
            if let Some(path) = &out {
                std::fs::write(path, run.curve_csv())?;
            }
            println!(
                "train-toy: {} steps, final loss {:.6}, train accuracy {:.4}",
                steps, run.final_loss, run.final_train_acc
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            preset,
            steps,
            seed,
            out,
        } => {
            if preset != "table6" {
                return Err(TensorError::Config(format!(
                    "unknown preset '{preset}' (only table6)"
                )));
            }
            let task = mvtk_verify::ToyTask::default();
            let cfg = mvtk_verify::TrainConfig {
                steps,
                batch: 16,
                lr: 1e-3,
                weight_decay: 0.01,
                seed,
            };
            let rows = mvtk_verify::ablation_sweep(&task, &cfg)?;
            println!(
                "{:<32} {:>9} {:>12} {:>10} {:>10}",
                "config", "params", "macs", "loss0", "lossN"
            );
            for r in &rows {
                println!(
                    "{:<32} {:>9} {:>12} {:>10.4} {:>10.4}",
                    r.label, r.params, r.macs, r.initial_loss, r.final_loss
                );
            }
            if let Some(path) = &out {
                std::fs::write(path, mvtk_verify::ablation_csv(&rows))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn emit(text: String, out: Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn describe(spec: &ModelSpec, res: usize) -> Result<String> {
    let resolutions = spec.stage_resolutions(res, res)?;
    let mut out = String::new();
    out.push_str(&format!("model: {}\n", spec.name));
    out.push_str(&format!(
        "{:<26} {:>10} {:>7} {:>7} {:>9}  {}\n",
        "layer", "size", "stride", "repeat", "channels", "notes"
    ));
    out.push_str(&format!(
        "{:<26} {:>10} {:>7} {:>7} {:>9}\n",
        "image",
        format!("{res}x{res}"),
        1,
        "",
        3
    ));
    let mut cum_stride = 1usize;
    for (stage, (h, w)) in spec.stages.iter().zip(&resolutions) {
        cum_stride *= stage.stride();
        let size = format!("{h}x{w}");
        match stage {
            StageSpec::ConvStem { out: o, .. } => {
                out.push_str(&format!(
                    "{:<26} {:>10} {:>7} {:>7} {:>9}\n",
                    "conv-3x3 \u{2193}2", size, cum_stride, 1, o
                ));
            }
            StageSpec::Mv2 {
                out: o,
                stride,
                repeat,
                expand,
            } => {
                let name = if *stride == 2 { "mv2 \u{2193}2" } else { "mv2" };
                if *stride == 2 && *repeat > 1 {
                    out.push_str(&format!(
                        "{:<26} {:>10} {:>7} {:>7} {:>9}  expand {}\n",
                        name, size, cum_stride, 1, o, expand
                    ));
                    out.push_str(&format!(
                        "{:<26} {:>10} {:>7} {:>7} {:>9}  expand {}\n",
                        "mv2",
                        size,
                        cum_stride,
                        repeat - 1,
                        o,
                        expand
                    ));
                } else {
                    out.push_str(&format!(
                        "{:<26} {:>10} {:>7} {:>7} {:>9}  expand {}\n",
                        name, size, cum_stride, repeat, o, expand
                    ));
                }
            }
            StageSpec::MobileVit {
                out: o,
                dim,
                ffn,
                patch,
                attention,
                fusion,
                ..
            } => {
                let l = spec.effective_layers(stage);
                let attn = match attention {
                    mvtk_nn::layers::AttentionKind::MultiHead => "multihead",
                    mvtk_nn::layers::AttentionKind::SeparableLinear => "separable",
                };
                let mode = if *fusion == mvtk_nn::blocks::FusionConfig::v1() {
                    "v1"
                } else if *fusion == mvtk_nn::blocks::FusionConfig::v2() {
                    "v2"
                } else if *fusion == mvtk_nn::blocks::FusionConfig::v3() {
                    "v3"
                } else {
                    "custom"
                };
                out.push_str(&format!(
                    "{:<26} {:>10} {:>7} {:>7} {:>9}  d={dim} ffn={ffn} patch={patch} {attn} {mode}\n",
                    format!("mobilevit block (L={l})"),
                    size,
                    cum_stride,
                    1,
                    o
                ));
            }
        }
    }
    let (h, w) = *resolutions.last().unwrap();
    if let Some(hw) = spec.head_width {
        out.push_str(&format!(
            "{:<26} {:>10} {:>7} {:>7} {:>9}\n",
            "conv-1x1",
            format!("{h}x{w}"),
            cum_stride,
            1,
            hw
        ));
    }
    let feat = spec.head_width.unwrap_or_else(|| {
        spec.stages.last().map(|s| s.out_channels()).unwrap_or(0)
    });
    out.push_str(&format!(
        "{:<26} {:>10} {:>7} {:>7} {:>9}\n",
        "global pool", "1x1", cum_stride, 1, feat
    ));
    out.push_str(&format!(
        "{:<26} {:>10} {:>7} {:>7} {:>9}\n",
        "linear", "1x1", cum_stride, 1, spec.num_classes
    ));
    let model: Model<f32> = build(spec, 0)?;
    out.push_str(&format!(
        "parameters: {:.2} M ({})\n",
        model.param_count() as f64 / 1e6,
        model.param_count()
    ));
    Ok(out)
}

