//! The six pipeline commands behind the `agpad` binary. Each one reads a
//! resolved [`RunConfig`], writes its outputs under `config.out` and
//! echoes the configuration to `run_config.txt` there.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::synth::{generate_synth, render_sample, Split};
use crate::data::{load_manifest, Dataset, Manifest};
use crate::error::{Error, Result};
use crate::gradcam::{grad_cam, upsample_overlay};
use crate::imaging::{load_image, resize_bilinear, save_gray_png, save_rgb_png};
use crate::metrics::{apcer_bpcer, fdr_target_supported, percent_label, roc, summary, tdr_at_fdr, ScoreSet};
use crate::model::checkpoint::{load_model, save_model};
use crate::model::{FusionMode, ModelConfig, ModelGraph, PA};
use crate::tensor::io::save_tensor;
use crate::tensor::{Tape, Tensor};
use crate::train::{score_dataset, train, TrainLog};

/// Existing manifest, or the synthetic corpus under `out/corpus`, generated
/// unless an identical one is already there.
pub fn corpus(cfg: &RunConfig) -> Result<Manifest> {
    if let Some(path) = &cfg.manifest {
        return load_manifest(path);
    }
    let dir = cfg.out.join("corpus");
    let stamp = dir.join("synth_config.txt");
    if fs::read_to_string(&stamp).ok().as_deref() == Some(cfg.synth.to_kv().as_str()) {
        if let Ok(m) = load_manifest(dir.join("manifest.csv")) {
            return Ok(m);
        }
    }
    eprintln!("generating synthetic corpus in {}", dir.display());
    Ok(generate_synth(&cfg.synth, &dir)?.manifest)
}

fn load_split(cfg: &RunConfig, manifest: &Manifest, split: &str) -> Result<Dataset> {
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(Error::data(&manifest.root, format!("split {split:?} has no records")));
    }
    let b = &cfg.model.backbone;
    Dataset::load(manifest, &records, b.in_channels, b.input_size, cfg.train.parallelism)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.synth.validate()?;
    cfg.write_echo(&cfg.out)?;
    let out = generate_synth(&cfg.synth, &cfg.out)?;
    print!("{}", out.report.to_kv());
    println!(
        "wrote {} images and {}",
        out.manifest.records.len(),
        out.manifest_path.display()
    );
    Ok(out.manifest_path)
}

fn train_model(cfg: &RunConfig, model_cfg: ModelConfig, manifest: &Manifest, dir: &Path) -> Result<(ModelGraph, TrainLog)> {
    fs::create_dir_all(dir)?;
    let data = load_split(cfg, manifest, &cfg.train_split)?;
    let val = if cfg.val_split.is_empty() {
        None
    } else {
        Some(load_split(cfg, manifest, &cfg.val_split)?)
    };
    let mut model = ModelGraph::new(model_cfg, cfg.seed)?;
    let started = Instant::now();
    let log = train(&mut model, &data, val.as_ref(), &cfg.train, Some(dir), |r| {
        let val = r.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
        eprintln!(
            "[{:>7.1}s] {} epoch {:>3} loss {:.5} train_acc {:.4}{val}",
            started.elapsed().as_secs_f64(),
            model_cfg_name(cfg, dir),
            r.epoch,
            r.loss,
            r.train_acc
        );
    })?;
    save_model(dir.join("model.agpd"), &model)?;
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    fs::write(dir.join("train_log.csv"), buf)?;
    Ok((model, log))
}

fn model_cfg_name(cfg: &RunConfig, dir: &Path) -> String {
    dir.strip_prefix(&cfg.out)
        .ok()
        .and_then(|p| p.to_str())
        .filter(|s| !s.is_empty())
        .unwrap_or("train")
        .to_string()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(ModelGraph, TrainLog)> {
    cfg.write_echo(&cfg.out)?;
    let manifest = corpus(cfg)?;
    let out = train_model(cfg, cfg.model.clone(), &manifest, &cfg.out)?;
    println!("wrote {}", cfg.out.join("model.agpd").display());
    Ok(out)
}

fn score_set(data: &Dataset, scores: &[f64]) -> Result<ScoreSet> {
    ScoreSet::from_labelled(data.labels.iter().map(|&l| l == PA).zip(scores.iter().copied()))
        .map_err(|e| Error::data("evaluation set", e.to_string()))
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub scores: ScoreSet,
    pub summary: String,
}

/// Scores the evaluation split and writes `scores.csv`, `roc.csv` and
/// `summary.txt` into `dir`.
fn evaluate(cfg: &RunConfig, model: &ModelGraph, manifest: &Manifest, dir: &Path) -> Result<EvalOutcome> {
    let data = load_split(cfg, manifest, &cfg.eval_split)?;
    let scores = score_dataset(model, &data, cfg.train.parallelism)?;
    let set = score_set(&data, &scores)?;
    fs::create_dir_all(dir)?;

    let mut csv = String::from("path,label,score\n");
    for ((path, &label), s) in data.paths.iter().zip(&data.labels).zip(&scores) {
        writeln!(csv, "{path},{},{s}", if label == PA { "pa" } else { "live" }).unwrap();
    }
    fs::write(dir.join("scores.csv"), csv)?;
    let mut buf = Vec::new();
    roc(&set).write_csv(&mut buf)?;
    fs::write(dir.join("roc.csv"), buf)?;
    let text = summary(&set, &cfg.fdr_targets, cfg.threshold)?;
    fs::write(dir.join("summary.txt"), &text)?;
    Ok(EvalOutcome {
        scores: set,
        summary: text,
    })
}

fn checkpoint_path(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out.join("model.agpd"))
}

fn load_checkpoint(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ModelGraph> {
    let path = checkpoint_path(cfg, checkpoint);
    load_model(&path, cfg.model.backbone.input_size, cfg.model.axis)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalOutcome> {
    cfg.write_echo(&cfg.out)?;
    let model = load_checkpoint(cfg, checkpoint)?;
    let manifest = corpus(cfg)?;
    let out = evaluate(cfg, &model, &manifest, &cfg.out)?;
    print!("{}", out.summary);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub fusion: FusionMode,
    pub final_loss: f64,
    pub train_acc: f64,
    /// `None` where the live sample count cannot resolve the target.
    pub tdr: Vec<Option<f64>>,
    pub apcer: f64,
    pub bpcer: f64,
}

/// Trains and evaluates every fusion variant on the same data with the
/// same root seed; writes `ablation.csv` and `ablation.txt`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.write_echo(&cfg.out)?;
    let manifest = corpus(cfg)?;
    let mut rows = Vec::new();
    for fusion in FusionMode::ALL {
        let dir = cfg.out.join("ablate").join(fusion.name());
        let model_cfg = ModelConfig {
            fusion,
            ..cfg.model.clone()
        };
        let (model, log) = train_model(cfg, model_cfg, &manifest, &dir)?;
        let eval = evaluate(cfg, &model, &manifest, &dir)?;
        let n_live = eval.scores.live().len();
        let tdr = cfg
            .fdr_targets
            .iter()
            .map(|&t| {
                fdr_target_supported(n_live, t)
                    .then(|| tdr_at_fdr(&eval.scores, t).map(|(tdr, _)| tdr))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let (apcer, bpcer) = apcer_bpcer(&eval.scores, cfg.threshold)?;
        let last = log.epochs.last().expect("at least one epoch");
        rows.push(AblationRow {
            fusion,
            final_loss: last.loss,
            train_acc: last.train_acc,
            tdr,
            apcer,
            bpcer,
        });
    }

    let fmt_tdr = |t: &Option<f64>| t.map(|v| format!("{:.2}", v * 100.0)).unwrap_or_else(|| "n/a".into());
    let heads: Vec<String> = cfg.fdr_targets.iter().map(|&t| format!("TDR@{}FDR", percent_label(t))).collect();
    let mut csv = format!("variant,label,final_loss,train_acc,{},apcer,bpcer\n", heads.join(","));
    let mut table = format!(
        "{:<26} {:>10} {:>9} {} {:>8} {:>8}\n",
        "variant",
        "loss",
        "train_acc",
        heads.iter().map(|h| format!("{h:>14}")).collect::<Vec<_>>().join(" "),
        "APCER",
        "BPCER"
    );
    for r in &rows {
        let tdr_csv: Vec<String> = r.tdr.iter().map(|t| t.map(|v| v.to_string()).unwrap_or_default()).collect();
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.fusion.name(),
            r.fusion.label(),
            r.final_loss,
            r.train_acc,
            tdr_csv.join(","),
            r.apcer,
            r.bpcer
        )
        .unwrap();
        writeln!(
            table,
            "{:<26} {:>10.5} {:>9.4} {} {:>7.2}% {:>7.2}%",
            r.fusion.label(),
            r.final_loss,
            r.train_acc,
            r.tdr.iter().map(|t| format!("{:>14}", fmt_tdr(t))).collect::<Vec<_>>().join(" "),
            r.apcer * 100.0,
            r.bpcer * 100.0
        )
        .unwrap();
    }
    fs::write(cfg.out.join("ablation.csv"), csv)?;
    fs::write(cfg.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(rows)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string()
}

/// Heatmaps before (`tap5`) and after (`attention`) the attention modules
/// for each image, as AGTD tensors, heat PNGs and overlays.
pub fn cmd_gradcam(cfg: &RunConfig, checkpoint: Option<&Path>, images: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("gradcam needs at least one image path".into()));
    }
    cfg.write_echo(&cfg.out)?;
    let model = load_checkpoint(cfg, checkpoint)?;
    let b = &model.config().backbone;
    let dir = cfg.out.join("gradcam");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for path in images {
        let img = load_image(path, b.in_channels, b.input_size)?;
        let score = model.pa_score(&img)?;
        let stem = file_stem(path);
        println!("{}: PA score {score:.6}", path.display());
        for (tag, layer) in [("pre", "tap5"), ("post", "attention")] {
            let hm = grad_cam(&model, &img, layer, cfg.cam_target)?;
            let values = hm.values.cast::<f32>();
            let base = dir.join(format!("{stem}_{tag}"));
            let agtd = base.with_extension("agtd");
            save_tensor(&agtd, &values)?;
            let heat = resize_bilinear(&values.reshape([1, hm.height(), hm.width()])?, b.input_size, b.input_size)?;
            let heat_png = dir.join(format!("{stem}_{tag}_heat.png"));
            save_gray_png(&heat_png, &heat)?;
            let overlay_png = dir.join(format!("{stem}_{tag}_overlay.png"));
            save_rgb_png(&overlay_png, &upsample_overlay(&hm, &img, cfg.overlay_opacity)?)?;
            written.extend([agtd, heat_png, overlay_png]);
        }
    }
    Ok(written)
}

/// Parameter table plus the attention maps of one probe image (the given
/// file, or a synthetic live sample).
pub fn cmd_inspect(cfg: &RunConfig, checkpoint: Option<&Path>, probe: Option<&Path>) -> Result<String> {
    cfg.write_echo(&cfg.out)?;
    let model = load_checkpoint(cfg, checkpoint)?;
    let mc = model.config();
    let mut table = format!(
        "fusion: {} ({})\ninput: {}x{}x{}\n{:<36} {:<16} {:>8}\n",
        mc.fusion.name(),
        mc.fusion.label(),
        mc.backbone.in_channels,
        mc.backbone.input_size,
        mc.backbone.input_size,
        "name",
        "shape",
        "count"
    );
    for (name, t) in model.params().iter() {
        let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        writeln!(table, "{name:<36} {shape:<16} {:>8}", t.numel()).unwrap();
    }
    writeln!(table, "total parameters: {}", model.params().numel()).unwrap();

    let b = &mc.backbone;
    let image = match probe {
        Some(p) => load_image(p, b.in_channels, b.input_size)?,
        None => {
            let (img, _) = render_sample(&cfg.synth, Split::Test, 0);
            let img = resize_bilinear(&img, b.input_size, b.input_size)?;
            Tensor::from_fn([b.in_channels, b.input_size, b.input_size], |i| img.data()[i % img.numel()])
        }
    };
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let trace = model.forward_on(&mut tape, x, false)?;
    let dir = cfg.out.join("inspect");
    fs::create_dir_all(&dir)?;
    for (site, v) in &trace.attention_maps {
        let map = tape.value(*v);
        let path = dir.join(format!("attn_{}.agtd", site.replace('.', "_")));
        save_tensor(&path, map)?;
        writeln!(table, "attention map {site}: {:?} -> {}", map.shape(), path.display()).unwrap();
    }
    writeln!(table, "probe PA score: {:.6}", model.pa_score(&image)?).unwrap();
    fs::write(dir.join("params.txt"), &table)?;
    std::io::stdout().write_all(table.as_bytes())?;
    Ok(table)
}
