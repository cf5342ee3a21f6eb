//! `upix`: command-line driver for the pixel-space unified transformer.
//!
//! Exit status: 0 on success, 1 on invalid input (flags, config files,
//! malformed checkpoints or images), 2 on internal errors. All error text
//! goes to standard error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use upix_core::check::finite_difference_check;
use upix_core::checkpoint::{load_checkpoint, save_checkpoint};
use upix_core::dataset::gen_synthetic_dataset;
use upix_core::distill::run_distillation;
use upix_core::evaluate::evaluate;
use upix_core::model::{init_params, init_params_dense, ModelConfig};
use upix_core::objectives::{run_stage_schedule, FeatureNet};
use upix_core::pixmap::{read_image, write_image};
use upix_core::runconfig::RunConfig;
use upix_core::sampling::{sample, SamplerConfig};
use upix_core::tensor::Tensor;
use upix_core::{Error, Tape};

/// Feature width of the frozen perceptual net.
const FEATURE_WIDTH: usize = 8;

#[derive(Parser)]
#[command(
    name = "upix",
    version,
    about = "Pixel-space unified transformer: train, sample, distill, and evaluate at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the deterministic synthetic shapes dataset to disk.
    DatasetGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Run the progressive stage schedule and write per-stage checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the step count of every stage.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Load a checkpoint and sample one image for a prompt.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        /// Reference image(s) for editing / subject conditioning.
        #[arg(long)]
        condition: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Distill a trained teacher into a few-step student.
    Distill {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Finite-difference check of the full gradient path on a fresh model.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report flow/lm losses and caption-consistency accuracy on a held-out
    /// synthetic split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; everything else is a
            // usage failure with status 1.
            if e.use_stderr() {
                eprintln!("{e}");
                let _ = Cli::command().write_help(&mut std::io::stderr());
                eprintln!();
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// The perceptual net is derived from the run seed so training runs are
/// reproducible from the config alone.
fn feature_net(cfg: &RunConfig, seed: u64) -> FeatureNet {
    FeatureNet::new(cfg.model.channels, FEATURE_WIDTH, seed ^ 0xFEA7_0000_0000_0001)
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::DatasetGen {
            config,
            seed,
            out,
            resolution,
        } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.seed);
            let resolution = resolution.unwrap_or(16);
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir).join("dataset"));
            fs::create_dir_all(&out)?;
            let records = gen_synthetic_dataset(cfg.data_count, resolution, seed)?;
            let mut manifest = String::from("index\ttag\tcaption\ttarget\tcondition\n");
            for (i, record) in records.iter().enumerate() {
                let target_file = format!("target_{i:04}.ppm");
                write_image(&out.join(&target_file), &record.target)?;
                let cond_file = match &record.condition {
                    Some(cond) => {
                        let name = format!("condition_{i:04}.ppm");
                        write_image(&out.join(&name), cond)?;
                        name
                    }
                    None => "-".to_string(),
                };
                manifest.push_str(&format!(
                    "{i}\t{}\t{}\t{target_file}\t{cond_file}\n",
                    record.tag.name(),
                    record.caption
                ));
            }
            fs::write(out.join("records.tsv"), manifest)?;
            println!(
                "wrote {} records at {resolution}x{resolution} to {}",
                records.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Train {
            config,
            seed,
            out,
            steps,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(steps) = steps {
                for stage in &mut cfg.plan.stages {
                    stage.steps = steps;
                }
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            fs::create_dir_all(&out)?;

            let mut data = BTreeMap::new();
            for stage in &cfg.plan.stages {
                data.entry(stage.resolution).or_insert_with(|| {
                    gen_synthetic_dataset(cfg.data_count, stage.resolution, cfg.seed)
                        .expect("stage resolutions validated")
                });
            }

            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut params = init_params(&cfg.model, &mut rng);
            let net = feature_net(&cfg, cfg.seed);
            let mut metrics_file = fs::File::create(out.join("metrics.log"))?;
            let logs = run_stage_schedule(
                &cfg.model,
                &cfg.plan,
                &data,
                &mut params,
                &net,
                &cfg.weights,
                &cfg.hyper,
                cfg.seed,
                |record| {
                    let _ = writeln!(metrics_file, "{}", record.to_line());
                },
            )?;
            for log in &logs {
                let path = out.join(format!("ckpt_{}.upix", log.name));
                save_checkpoint(&path, &cfg.model, &params)?;
                println!(
                    "{}: {} steps at {}x{}, total {:.4} -> {:.4}",
                    log.name, log.steps_run, log.resolution, log.resolution, log.first_total,
                    log.last_total
                );
            }
            let final_path = out.join("model.upix");
            save_checkpoint(&final_path, &cfg.model, &params)?;
            println!("final checkpoint: {}", final_path.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Sample {
            checkpoint,
            prompt,
            condition,
            config,
            seed,
            out,
            steps,
            resolution,
        } => {
            let cfg = load_config(&config)?;
            let (model_cfg, params) = load_checkpoint(&checkpoint)?;
            let mut conditions: Vec<Tensor> = Vec::new();
            for path in &condition {
                conditions.push(read_image(path)?);
            }
            let sampler = SamplerConfig {
                steps: steps.unwrap_or(cfg.sampler.steps),
            };
            let resolution = resolution.unwrap_or(16);
            let seed = seed.unwrap_or(cfg.seed);
            let image = sample(
                &model_cfg,
                &params,
                prompt.as_bytes(),
                &conditions,
                resolution,
                &sampler,
                seed,
            )?;
            let out = out.unwrap_or_else(|| PathBuf::from("sample.ppm"));
            write_image(&out, &image)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Distill {
            checkpoint,
            config,
            seed,
            out,
            steps,
            resolution,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(steps) = steps {
                cfg.distill.steps = steps;
            }
            let (model_cfg, teacher) = load_checkpoint(&checkpoint)?;
            let resolution = resolution.unwrap_or(16);
            let records = gen_synthetic_dataset(cfg.data_count, resolution, cfg.seed)?;
            let net = feature_net(&cfg, cfg.seed);
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            fs::create_dir_all(&out)?;
            let mut metrics_file = fs::File::create(out.join("distill_metrics.log"))?;
            let (student, _stream) = run_distillation(
                &model_cfg,
                &teacher,
                &records,
                &cfg.distill,
                &net,
                cfg.seed,
                |step, m| {
                    let _ = writeln!(metrics_file, "{}", m.to_line(step));
                },
            )?;
            let path = out.join("student.upix");
            save_checkpoint(&path, &model_cfg, &student)?;
            println!(
                "student checkpoint: {} (suggested sampler steps: {})",
                path.display(),
                cfg.distill.student_steps
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::GradCheck { config, seed } => {
            let _ = load_config(&config)?;
            let seed = seed.unwrap_or(51);
            let err = gradcheck_full_model(seed)?;
            println!("max relative error: {err:.3e}");
            if err <= 1e-5 {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check failed the 1e-5 bound");
                Ok(ExitCode::from(2))
            }
        }

        Command::Eval {
            checkpoint,
            config,
            seed,
            steps,
            resolution,
        } => {
            let cfg = load_config(&config)?;
            let (model_cfg, params) = load_checkpoint(&checkpoint)?;
            let resolution = resolution.unwrap_or(16);
            let records =
                gen_synthetic_dataset(cfg.eval_count, resolution, cfg.eval_seed)?;
            let net = feature_net(&cfg, cfg.seed);
            let sampler = SamplerConfig {
                steps: steps.unwrap_or(cfg.sampler.steps),
            };
            let report = evaluate(
                &model_cfg,
                &params,
                &net,
                &records,
                &sampler,
                seed.unwrap_or(cfg.eval_seed),
            )?;
            for line in report.to_lines() {
                println!("{line}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Finite-difference check of the full training loss on the single-block
/// width-16 model: all loss terms, every parameter coordinate, dense random
/// init, with a linear anchor term keeping every gradient well above
/// finite-difference noise.
fn gradcheck_full_model(seed: u64) -> Result<f64, Error> {
    use upix_core::objectives::{build_item_loss, BatchItem, ItemDraw, LossWeights};

    let cfg = ModelConfig::gradcheck_tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params_dense(&cfg, 0.25, &mut rng);
    let net = FeatureNet::new(cfg.channels, FEATURE_WIDTH, 3);
    let clean = Tensor::randn(&[4, 4, cfg.channels], 0.5, &mut rng);
    let noise = Tensor::randn(&[4, 4, cfg.channels], 1.0, &mut rng);
    let cond = Tensor::randn(&[4, 4, cfg.channels], 0.5, &mut rng);
    let item = BatchItem {
        caption: b"A".to_vec(),
        clean: Some(clean),
        conditions: vec![cond],
    };
    let draw = ItemDraw {
        t: 0.42,
        noise: Some(noise),
    };
    let weights = LossWeights::default();
    let anchor_seed = seed.wrapping_add(1);
    finite_difference_check(
        move |tape: &mut Tape, nodes| {
            let loss = build_item_loss(tape, &cfg, nodes, &net, &weights, &item, &draw)?;
            Ok(anchor_all(tape, nodes, loss.total, anchor_seed))
        },
        &params,
        1e-5,
    )
}

/// Linear coupling conditioning described in the core crate's gradient
/// checks: exact under central differences, keeps every coordinate's
/// gradient far from the fd noise floor.
fn anchor_all(
    tape: &mut Tape,
    nodes: &upix_core::ParamNodes,
    data_loss: upix_core::NodeId,
    seed: u64,
) -> upix_core::NodeId {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = data_loss;
    let names: Vec<String> = nodes.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let node = nodes.get(&name).expect("listed name");
        let shape = tape.value(node).shape().to_vec();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let mag = 1.0 + rng.gen::<f64>();
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let r = tape.constant(Tensor::from_vec(shape, data).expect("anchor shape"));
        let prod = tape.mul(node, r).expect("anchor mul");
        let s = tape.sum_all(prod).expect("anchor sum");
        total = tape.add(total, s).expect("anchor add");
    }
    total
}
