use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tinyvim_core::backbone::{
    count_macs, count_params, effective_ratios, fuse_reparam, load_weights, save_weights, Model,
    ModelConfig, Variant,
};
use tinyvim_core::harness::{
    bench_csv, bench_scan, generate_dataset, scaling_ratios, train_toy, write_dataset, BenchConfig,
    ToyDatasetConfig, TrainConfig,
};
use tinyvim_core::io::{read_tvmt, write_tvmt};
use tinyvim_core::laplace::MixerMode;
use tinyvim_core::spectral::{export_magnitude_grid, SpectrumReport};
use tinyvim_core::Tensor;

#[derive(Parser)]
#[command(
    name = "tinyvim",
    version,
    about = "Hybrid convolution / state-space vision backbone toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Model variant: S, B, L or toy.
    #[arg(long, default_value = "S")]
    variant: Variant,
    /// JSON model config; overrides --variant.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Mixer input routing.
    #[arg(long)]
    mode: Option<MixerMode>,
    /// Initialization seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                ModelConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => ModelConfig::variant(self.variant, self.classes),
        };
        if let Some(m) = self.mode {
            cfg.mixer_mode = m;
        }
        Ok(cfg)
    }

    fn build(&self) -> Result<Model<f32>> {
        Ok(Model::new(self.model_config()?, self.seed)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a model, print its layout and optionally save config and weights.
    Build {
        #[command(flatten)]
        model: ModelArgs,
        /// Write TVMW weights here.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Write the JSON config here.
        #[arg(long)]
        config_out: Option<PathBuf>,
    },
    /// Print the number of learnable parameters.
    CountParams {
        #[command(flatten)]
        model: ModelArgs,
        /// Count after folding the reparameterized branches.
        #[arg(long)]
        fused: bool,
    },
    /// Print multiply-accumulates of one forward pass.
    CountMacs {
        #[command(flatten)]
        model: ModelArgs,
        /// Square input side; defaults to the config's input size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Run a forward pass on a TVMT image and write the logits as TVMT.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        /// `[C, H, W]` or `[N, C, H, W]` input.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "logits.tvmt")]
        output: PathBuf,
        /// Fold reparameterized branches before running.
        #[arg(long)]
        fused: bool,
    },
    /// Spectral report of a feature map, or of one stage's output when --variant/--config is given.
    Spectrum {
        /// `[C, H, W]` or `[N, C, H, W]` features, or an image with --stage.
        #[arg(long)]
        input: PathBuf,
        /// Analyze the output of this stage of a freshly built model.
        #[arg(long)]
        stage: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        rho: f64,
        /// Write `rla.csv` and per-channel PGM magnitude images here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the toy model on the synthetic grating set.
    TrainToy(TrainArgs),
    /// Time the selective scan at several sequence lengths; prints CSV.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
    },
    /// Compare fused and multi-branch forwards on a random input.
    FuseCheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write the synthetic dataset as TVMT samples plus labels.csv.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "low-only")]
    mode: MixerMode,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 100)]
    eval_every: usize,
    /// Stop once held-out accuracy reaches this value.
    #[arg(long)]
    target_accuracy: Option<f64>,
    /// JSON training config; replaces all other training flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-step loss CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Save the trained weights as TVMW.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl TrainArgs {
    fn train_config(&self) -> Result<TrainConfig> {
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            return Ok(serde_json::from_str(&text)?);
        }
        let mut cfg = TrainConfig::toy(self.mode, self.seed);
        cfg.steps = self.steps;
        cfg.batch_size = self.batch_size;
        cfg.lr = self.lr;
        cfg.weight_decay = self.weight_decay;
        cfg.data.per_class = self.per_class;
        cfg.eval_every = self.eval_every;
        cfg.target_accuracy = self.target_accuracy;
        Ok(cfg)
    }
}

fn read_batch(path: &Path) -> Result<Tensor<f32>> {
    let t: Tensor<f32> = read_tvmt(path).with_context(|| format!("reading {}", path.display()))?;
    match t.ndim() {
        3 => {
            let d = t.dims().to_vec();
            Ok(t.reshape(vec![1, d[0], d[1], d[2]])?)
        }
        4 => Ok(t),
        n => bail!(
            "{}: expected a 3- or 4-dimensional tensor, got {n} dims",
            path.display()
        ),
    }
}

fn load_model(args: &ModelArgs, weights: Option<&Path>) -> Result<Model<f32>> {
    let mut model = args.build()?;
    if let Some(w) = weights {
        load_weights(&mut model, w).with_context(|| format!("loading weights {}", w.display()))?;
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build {
            model,
            weights,
            config_out,
        } => {
            let m = model.build()?;
            let cfg = &m.config;
            let size = cfg.input_size;
            println!("model {} ({} mixer)", cfg.name, cfg.mixer_mode);
            let ratios = effective_ratios(cfg, size, size);
            for (i, (s, r)) in cfg.stages.iter().zip(ratios).enumerate() {
                let res = size / (4 << i);
                println!(
                    "stage {i}: {res}x{res} dim {} local {} tinyvim {} alpha {} pool {r}",
                    s.channels, s.local_blocks, s.tinyvim_blocks, s.alpha
                );
            }
            println!("params {}", count_params(&m));
            println!("macs {}", count_macs(&m, size, size)?);
            if let Some(p) = config_out {
                fs::write(&p, cfg.to_json()?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(p) = weights {
                save_weights(&m, &p).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::CountParams { model, fused } => {
            let mut m = model.build()?;
            if fused {
                fuse_reparam(&mut m);
            }
            println!("{}", count_params(&m));
        }
        Command::CountMacs { model, size } => {
            let m = model.build()?;
            let s = size.unwrap_or(m.config.input_size);
            println!("{}", count_macs(&m, s, s)?);
        }
        Command::Forward {
            model,
            input,
            weights,
            output,
            fused,
        } => {
            let x = read_batch(&input)?;
            let mut m = load_model(&model, weights.as_deref())?;
            if fused {
                fuse_reparam(&mut m);
            }
            let logits = m.predict(&x)?;
            write_tvmt(&output, &logits)
                .with_context(|| format!("writing {}", output.display()))?;
            let classes = logits.dims()[1];
            for (i, row) in logits.data().chunks_exact(classes).enumerate() {
                let top = (0..classes)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .unwrap_or(0);
                println!("sample {i}: class {top} ({} logits)", classes);
            }
        }
        Command::Spectrum {
            input,
            stage,
            model,
            weights,
            rho,
            out_dir,
        } => {
            let x = read_batch(&input)?;
            let feats = match stage {
                Some(s) => {
                    let m = load_model(&model, weights.as_deref())?;
                    let mut all = m.features(&x)?;
                    if s >= all.len() {
                        bail!("stage {s} out of range, model has {}", all.len());
                    }
                    all.swap_remove(s)
                }
                None => x,
            };
            let report = SpectrumReport::compute(&feats, rho)?;
            println!("energy_ratio(rho={rho}) {}", report.energy_ratio);
            print!("{}", report.rla_csv());
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("rla.csv"), report.rla_csv())?;
                let files = export_magnitude_grid(&feats, &dir)?;
                log::info!(
                    "wrote {} magnitude images to {}",
                    files.len(),
                    dir.display()
                );
            }
        }
        Command::TrainToy(args) => {
            let cfg = args.train_config()?;
            let (model, report) = train_toy(&cfg)?;
            if let Some(p) = &args.loss_csv {
                report
                    .write_loss_csv(p)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(p) = &args.weights {
                save_weights(&model, p).with_context(|| format!("writing {}", p.display()))?;
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&report_summary(&cfg, &report))?
            );
        }
        Command::BenchScan {
            lengths,
            repeats,
            channels,
            state,
        } => {
            let rows = bench_scan(
                &lengths,
                &BenchConfig {
                    channels,
                    state,
                    repeats,
                    ..BenchConfig::default()
                },
            )?;
            print!("{}", bench_csv(&rows));
            log::info!("ratios {:?}", scaling_ratios(&rows));
        }
        Command::FuseCheck { model, size, tol } => {
            let m = model.build()?;
            let s = size.unwrap_or(m.config.input_size);
            let x = Tensor::<f32>::randn(
                vec![1, m.config.in_channels, s, s],
                &mut rand_rng(model.seed),
            );
            let before = m.predict(&x)?;
            let mut fused = m.clone();
            fuse_reparam(&mut fused);
            let after = fused.predict(&x)?;
            let diff = before.max_abs_diff(&after);
            println!(
                "params unfused {} fused {}",
                count_params(&m),
                count_params(&fused)
            );
            println!("max_abs_diff {diff:e}");
            if diff.is_nan() || diff as f64 > tol {
                bail!("fused output differs by {diff:e} (tolerance {tol:e})");
            }
        }
        Command::GenDataset {
            out,
            seed,
            per_class,
            noise,
        } => {
            let cfg = ToyDatasetConfig {
                seed,
                per_class,
                noise,
                ..ToyDatasetConfig::default()
            };
            let ds = generate_dataset(&cfg)?;
            write_dataset(&ds, &out)
                .with_context(|| format!("writing dataset to {}", out.display()))?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn rand_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

fn report_summary(cfg: &TrainConfig, r: &tinyvim_core::harness::TrainReport) -> serde_json::Value {
    serde_json::json!({
        "mode": cfg.mode.name(),
        "steps_run": r.steps_run,
        "final_loss": r.losses.last(),
        "train_accuracy": r.train_accuracy,
        "test_accuracy": r.test_accuracy,
        "evals": r.evals,
        "ssm_tokens": r.ssm_tokens,
        "seconds": r.seconds,
    })
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TINYVIM_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("TINYVIM_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("TINYVIM_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
