//! `adabm`: pretrain, quantize, evaluate and inspect toy SR networks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adabm_core::checkpoint::{load_checkpoint_expecting, save_checkpoint};
use adabm_core::config::RunConfig;
use adabm_core::datapipe::{load_png, save_png, synth_pairs, synth_probe_set};
use adabm_core::pipeline;
use adabm_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "adabm",
    version,
    about = "Adaptive bit-width quantization for toy SR networks"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "ADABM_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the FP network on synthetic pairs.
    Pretrain {
        /// Defaults to `<out>/fp.adbm`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Calibrate (and, for fine-tuning modes, fine-tune) quantizers.
    Quantize {
        /// FP checkpoint; defaults to `<out>/fp.adbm`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Defaults to `<out>/quantized.adbm`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-image complexity, bits, PSNR and SSIM of a quantized network.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of LR PNGs.
        #[arg(long)]
        images: PathBuf,
        /// Directory of same-named HR PNGs; without it the FP output is the
        /// reference.
        #[arg(long)]
        hr: Option<PathBuf>,
    },
    /// Super-resolve one PNG.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Layer-wise error similarity across textured probes.
    Diagnose {
        /// FP checkpoint; defaults to `<out>/fp.adbm`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 4)]
        probe_bits: u32,
        #[arg(long, default_value_t = 100)]
        resamples: usize,
    },
    /// Write synthetic LR/HR PNG pairs to `<out>/lr` and `<out>/hr`.
    GenData {
        #[arg(long, value_enum, default_value_t = DataKind::Mixed)]
        kind: DataKind,
        /// Image count (per family for `probe`).
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// HR side length.
        #[arg(long, default_value_t = 96)]
        size: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DataKind {
    /// The mixture used for calibration pools.
    Mixed,
    /// Constant, ramp, grating, checker and noise families in order.
    Probe,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default().with_derived_seeds(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn or_default(p: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out.join(name))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::Pretrain { checkpoint } => {
            let path = or_default(checkpoint, out, "fp.adbm");
            let t = std::time::Instant::now();
            let (net, losses) = pipeline::pretrain(&cfg)?;
            save_checkpoint(&net, &path)?;
            pipeline::write_manifest(&cfg, "pretrain", out)?;
            println!(
                "pretrain: {} steps in {:.1} s, final loss {:.5}, wrote {}",
                losses.len(),
                t.elapsed().as_secs_f64(),
                losses.last().copied().unwrap_or(f32::NAN),
                path.display()
            );
        }
        Command::Quantize { input, output } => {
            let fp = load_checkpoint_expecting(&or_default(input, out, "fp.adbm"), &cfg.network)?;
            let path = or_default(output, out, "quantized.adbm");
            let res = pipeline::quantize(&fp, &cfg)?;
            pipeline::write_quantize_outputs(&res, &cfg, &path, out)?;
            println!("mode: {}", cfg.mode.name());
            println!("initialization phase: {:.2} s", res.timings.init_secs);
            println!("fine-tuning phase: {:.2} s", res.timings.finetune_secs);
            println!("final FAB: {:.4}", res.fab);
            println!("wrote {}", path.display());
        }
        Command::Eval {
            checkpoint,
            images,
            hr,
        } => {
            let net = load_checkpoint_expecting(
                &or_default(checkpoint, out, "quantized.adbm"),
                &cfg.network,
            )?;
            let items = pipeline::load_eval_items(images, hr.as_deref())?;
            let rows = pipeline::evaluate(&net, &items)?;
            let path = out.join(pipeline::EVAL_FILE);
            pipeline::write_eval_csv(&rows, &path)?;
            pipeline::write_manifest(&cfg, "eval", out)?;
            let m = rows.last().expect("mean row");
            println!(
                "{} images: FAB {:.4} PSNR {:.3} SSIM {:.4}, wrote {}",
                rows.len() - 1,
                m.fab,
                m.psnr,
                m.ssim,
                path.display()
            );
        }
        Command::Infer {
            checkpoint,
            image,
            output,
        } => {
            let net = load_checkpoint_expecting(
                &or_default(checkpoint, out, "quantized.adbm"),
                &cfg.network,
            )?;
            let sr = pipeline::infer(&net, &load_png(image)?)?;
            save_png(&sr, output)?;
            println!("wrote {}", output.display());
        }
        Command::Diagnose {
            checkpoint,
            probes,
            probe_bits,
            resamples,
        } => {
            let net =
                load_checkpoint_expecting(&or_default(checkpoint, out, "fp.adbm"), &cfg.network)?;
            let probe = pipeline::diagnostic_probes(&cfg, *probes);
            let d = pipeline::diagnose(&net, &probe, *probe_bits, *resamples, cfg.seed)?;
            let path = out.join(pipeline::SEPARABILITY_FILE);
            pipeline::write_separability_csv(&d, &path)?;
            pipeline::write_manifest(&cfg, "diagnose", out)?;
            println!(
                "mean similarity {:.4}, shuffle control {:.4} over {} resamples, gap {:.4}, wrote {}",
                d.mean_similarity,
                d.shuffle_mean,
                d.resamples,
                d.gap(),
                path.display()
            );
        }
        Command::GenData { kind, count, size } => {
            let scale = cfg.network.scale;
            if *size == 0 || size % scale != 0 {
                return Err(Error::Config(vec![format!(
                    "--size must be a positive multiple of {scale}"
                )]));
            }
            let pairs = match kind {
                DataKind::Mixed => synth_pairs(*count, *size, scale, cfg.seed),
                DataKind::Probe => synth_probe_set(*count, *size, scale, cfg.seed),
            };
            let (lr_dir, hr_dir) = (out.join("lr"), out.join("hr"));
            std::fs::create_dir_all(&lr_dir)?;
            std::fs::create_dir_all(&hr_dir)?;
            for p in &pairs {
                save_png(&p.lr, &lr_dir.join(format!("{}.png", p.id)))?;
                save_png(&p.hr, &hr_dir.join(format!("{}.png", p.id)))?;
            }
            println!(
                "wrote {} pairs to {} and {}",
                pairs.len(),
                lr_dir.display(),
                hr_dir.display()
            );
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
