//! End-to-end stages behind the command-line tool: pretraining,
//! quantization, evaluation, inference and the separability diagnostic.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::calibration::{run_init_phase, LayerReport};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::datapipe::{
    list_pngs, load_png, lr_pool, sample_calib, synth_pairs, textured_pairs, CalibSet, PoolImage,
};
use crate::error::{Error, Result};
use crate::finetune::{run_finetune, CalibView, EpochRecord, LogRecord};
use crate::metrics::{complexity, fab, psnr, separability_report, shuffle_control, ssim};
use crate::parallel;
use crate::srnet::{pretrain_fp, Mode, SrNetwork};
use crate::tensor::Tensor;

pub const CALIB_REPORT_FILE: &str = "calib_report.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_FILE: &str = "eval.csv";
pub const SEPARABILITY_FILE: &str = "separability.csv";

/// Column order of the evaluation CSV.
pub const EVAL_COLUMNS: [&str; 6] = ["image", "complexity", "b_i", "fab", "psnr", "ssim"];
/// Column order of the separability CSV.
pub const SEPARABILITY_COLUMNS: [&str; 4] = ["kind", "image", "layer", "value"];

/// Seeded network trained on synthetic pairs; returns it with its loss curve.
pub fn pretrain(cfg: &RunConfig) -> Result<(SrNetwork, Vec<f32>)> {
    let mut net = SrNetwork::new(cfg.network, cfg.seed)?;
    let losses = pretrain_fp(&mut net, &cfg.pretrain)?;
    Ok((net, losses))
}

/// Calibration pool: the PNGs of `data.calib_dir`, or seeded synthetic LR
/// images when no directory is configured.
pub fn calibration_pool(cfg: &RunConfig) -> Result<Vec<PoolImage>> {
    match &cfg.data.calib_dir {
        Some(dir) => list_pngs(dir)?
            .iter()
            .map(|p| {
                Ok(PoolImage {
                    id: file_stem(p),
                    image: load_png(p)?,
                })
            })
            .collect(),
        None => {
            let scale = cfg.network.scale;
            Ok(lr_pool(&synth_pairs(
                cfg.data.synth_pool,
                cfg.data.synth_size * scale,
                scale,
                cfg.pool_seed(),
            )))
        }
    }
}

pub fn calibration_set(cfg: &RunConfig) -> Result<CalibSet> {
    let pool = calibration_pool(cfg)?;
    sample_calib(
        &pool,
        cfg.data.calib_count,
        cfg.data.sampling(),
        cfg.data.patch,
        cfg.sampling_seed(),
    )
}

/// Held-out LR images watched during fine-tuning.
pub fn probe_images(cfg: &RunConfig) -> Vec<Tensor> {
    let scale = cfg.network.scale;
    synth_pairs(
        cfg.data.probe_count,
        cfg.data.synth_size * scale,
        scale,
        cfg.probe_seed(),
    )
    .into_iter()
    .map(|p| p.lr)
    .collect()
}

#[derive(Debug, Clone)]
pub struct Timings {
    pub init_secs: f64,
    pub finetune_secs: f64,
}

/// Quantized network plus everything the quantize stage reports.
#[derive(Debug, Clone)]
pub struct QuantizeOutcome {
    pub net: SrNetwork,
    pub calib: CalibSet,
    pub layers: Vec<LayerReport>,
    pub log: Vec<LogRecord>,
    pub epochs: Vec<EpochRecord>,
    pub timings: Timings,
    /// FAB of the calibration set under the final mapping.
    pub fab: f64,
}

/// Initialization then, for fine-tuning modes, fine-tuning of a frozen
/// FP network.
pub fn quantize(fp: &SrNetwork, cfg: &RunConfig) -> Result<QuantizeOutcome> {
    if fp.quant.is_some() {
        return Err(crate::error::invalid(
            "quantize",
            "network is already quantized",
        ));
    }
    if fp.config != cfg.network {
        return Err(Error::Config(vec![format!(
            "network: checkpoint has {:?}, config has {:?}",
            fp.config, cfg.network
        )]));
    }
    let calib = calibration_set(cfg)?;
    let patches = calib.patches();
    let cs = calib.complexities();

    let t = Instant::now();
    let init = run_init_phase(fp, &patches, &cs, &cfg.init_options())?;
    let init_secs = t.elapsed().as_secs_f64();
    log::info!("initialization phase: {init_secs:.2} s");

    let t = Instant::now();
    let (state, log, epochs) = if cfg.mode.finetunes() {
        let probe = probe_images(cfg);
        let out = run_finetune(
            fp,
            init.state,
            CalibView {
                images: &patches,
                complexities: &cs,
            },
            &cfg.finetune,
            &probe,
            |_| {},
        )?;
        (out.state, out.log, out.epochs)
    } else {
        (init.state, Vec::new(), Vec::new())
    };
    let finetune_secs = t.elapsed().as_secs_f64();

    let bit_log: Vec<Vec<u32>> = cs.iter().map(|&c| state.decide_for(c).bits).collect();
    let fab = fab(&bit_log)?;
    let mut net = fp.clone();
    net.frozen = true;
    net.quant = Some(state);
    Ok(QuantizeOutcome {
        net,
        calib,
        layers: init.report,
        log,
        epochs,
        timings: Timings {
            init_secs,
            finetune_secs,
        },
        fab,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

/// Per-layer initialization report.
pub fn write_calib_report(layers: &[LayerReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for l in layers {
        w.serialize(l).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per line.
pub fn write_train_log(log: &[LogRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut f, rec).map_err(|e| Error::Io(e.into()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Manifest written by `command` into `dir`; it is itself a loadable config.
pub fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}_manifest.toml"))
}

pub fn write_manifest(cfg: &RunConfig, command: &str, dir: &Path) -> Result<PathBuf> {
    let path = manifest_path(dir, command);
    std::fs::write(&path, cfg.manifest(command))?;
    Ok(path)
}

/// Write the quantized checkpoint to `checkpoint` and the reports next to
/// it in `dir`.
pub fn write_quantize_outputs(
    out: &QuantizeOutcome,
    cfg: &RunConfig,
    checkpoint: &Path,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&out.net, checkpoint)?;
    write_calib_report(&out.layers, &dir.join(CALIB_REPORT_FILE))?;
    write_train_log(&out.log, &dir.join(TRAIN_LOG_FILE))?;
    write_manifest(cfg, "quantize", dir)?;
    Ok(())
}

/// One evaluation CSV row; the final row holds column means with image
/// `mean`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub image: String,
    pub complexity: f64,
    pub b_i: f64,
    pub fab: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// A named LR image with an optional HR reference.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub name: String,
    pub lr: Tensor,
    pub hr: Option<Tensor>,
}

/// Adaptive-bit inference on one LR image.
pub fn infer(net: &SrNetwork, lr: &Tensor) -> Result<Tensor> {
    match net.quant {
        Some(_) => Ok(net.forward_adaptive(lr)?.0.output),
        None => Ok(net.forward_fp(lr)?.output),
    }
}

/// Per-image rows followed by the mean row. Without an HR reference the
/// quantized output is compared with the FP output of the same network.
pub fn evaluate(net: &SrNetwork, items: &[EvalItem]) -> Result<Vec<EvalRow>> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation images"));
    }
    let state = net.quant_state()?;
    let mut rows: Vec<EvalRow> = parallel::map(items, |it| -> Result<EvalRow> {
        let c = complexity(&it.lr)?;
        let d = state.decide_for(c);
        let out = net.forward(&it.lr, Mode::Quantized(Some(&d)))?.output;
        let reference = match &it.hr {
            Some(hr) => hr.clone(),
            None => net.forward_fp(&it.lr)?.output,
        };
        Ok(EvalRow {
            image: it.name.clone(),
            complexity: c as f64,
            b_i: d.image_factor as f64,
            fab: d.mean_bits(),
            psnr: psnr(&out, &reference)?,
            ssim: ssim(&out, &reference)?,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let summary = EvalRow {
        image: "mean".into(),
        complexity: mean(|r| r.complexity),
        b_i: mean(|r| r.b_i),
        fab: mean(|r| r.fab),
        psnr: mean(|r| r.psnr),
        ssim: mean(|r| r.ssim),
    };
    rows.push(summary);
    Ok(rows)
}

/// LR PNGs of `lr_dir`, each paired with the same-named file of `hr_dir`
/// when one is given.
pub fn load_eval_items(lr_dir: &Path, hr_dir: Option<&Path>) -> Result<Vec<EvalItem>> {
    list_pngs(lr_dir)?
        .iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let hr = match hr_dir {
                Some(d) => Some(load_png(&d.join(&name))?),
                None => None,
            };
            Ok(EvalItem {
                name,
                lr: load_png(p)?,
                hr,
            })
        })
        .collect()
}

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Separability diagnostic on the textured probes.
#[derive(Debug, Clone)]
pub struct Diagnosis {
    pub images: Vec<String>,
    pub errors: Vec<Vec<f64>>,
    pub mean_similarity: f64,
    pub shuffle_mean: f64,
    pub resamples: usize,
    pub probe_bits: u32,
}

impl Diagnosis {
    pub fn gap(&self) -> f64 {
        self.mean_similarity - self.shuffle_mean
    }
}

/// Textured LR probes for the diagnostic.
pub fn diagnostic_probes(cfg: &RunConfig, count: usize) -> Vec<(String, Tensor)> {
    let scale = cfg.network.scale;
    textured_pairs(
        count,
        cfg.data.synth_size * scale,
        scale,
        cfg.probe_seed().wrapping_add(1),
    )
    .into_iter()
    .map(|p| (p.id, p.lr))
    .collect()
}

pub fn diagnose(
    net: &SrNetwork,
    probes: &[(String, Tensor)],
    probe_bits: u32,
    resamples: usize,
    seed: u64,
) -> Result<Diagnosis> {
    let images: Vec<Tensor> = probes.iter().map(|(_, t)| t.clone()).collect();
    let rep = separability_report(net, &images, probe_bits)?;
    Ok(Diagnosis {
        images: probes.iter().map(|(n, _)| n.clone()).collect(),
        mean_similarity: rep.mean_image_similarity(),
        shuffle_mean: shuffle_control(&rep.errors, resamples, seed),
        errors: rep.errors,
        resamples,
        probe_bits,
    })
}

#[derive(Serialize)]
struct SeparabilityRow<'a> {
    kind: &'a str,
    image: &'a str,
    layer: String,
    value: f64,
}

/// Long-format CSV: one `mse` row per (image, layer), then the summary
/// statistics with empty image and layer fields.
pub fn write_separability_csv(d: &Diagnosis, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (name, row) in d.images.iter().zip(&d.errors) {
        for (l, &v) in row.iter().enumerate() {
            w.serialize(SeparabilityRow {
                kind: "mse",
                image: name,
                layer: l.to_string(),
                value: v,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    for (kind, value) in [
        ("probe_bits", d.probe_bits as f64),
        ("mean_similarity", d.mean_similarity),
        ("shuffle_mean", d.shuffle_mean),
        ("shuffle_resamples", d.resamples as f64),
        ("gap", d.gap()),
    ] {
        w.serialize(SeparabilityRow {
            kind,
            image: "",
            layer: String::new(),
            value,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
