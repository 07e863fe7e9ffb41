//! Run configuration: `key=value` lines with `#` comments, layered as
//! defaults < config file < command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::SoftmaxAxis;
use crate::data::synth::{PaStyle, SynthConfig};
use crate::error::{Error, Result};
use crate::gradcam::CamTarget;
use crate::model::{FusionMode, ModelConfig};
use crate::parallel::Parallelism;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Existing corpus; when absent a synthetic one is generated.
    pub manifest: Option<PathBuf>,
    pub train_split: String,
    /// Split scored after every epoch; empty disables validation.
    pub val_split: String,
    pub eval_split: String,
    pub synth: SynthConfig,
    synth_seed_set: bool,
    pub fdr_targets: Vec<f64>,
    pub threshold: f64,
    pub cam_target: CamTarget,
    pub overlay_opacity: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            model: ModelConfig {
                fusion: FusionMode::Parallel,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            manifest: None,
            train_split: "train".into(),
            val_split: String::new(),
            eval_split: "test".into(),
            synth: SynthConfig::default(),
            synth_seed_set: false,
            fdr_targets: vec![0.001, 0.002, 0.01],
            threshold: 0.5,
            cam_target: CamTarget::PaProbability,
            overlay_opacity: 0.5,
        }
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|s| num(s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key; the error text describes the offending value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let bb = &mut self.model.backbone;
        let tr = &mut self.train;
        match key {
            "seed" => self.seed = num(v)?,
            "out" => self.out = PathBuf::from(v),
            "model.channels" => {
                let c: Vec<usize> = list(v)?;
                bb.channels = c
                    .try_into()
                    .map_err(|c: Vec<usize>| format!("expected 5 stage widths, got {}", c.len()))?;
            }
            "model.in_channels" => bb.in_channels = num(v)?,
            "model.input_size" => bb.input_size = num(v)?,
            "model.fusion" => self.model.fusion = v.parse().map_err(|e: Error| e.to_string())?,
            "model.reduction" => self.model.reduction = num(v)?,
            "model.softmax_axis" => {
                self.model.axis = SoftmaxAxis::parse(v).ok_or_else(|| format!("unknown axis {v:?}"))?
            }
            "train.lr" => tr.adam.lr = num(v)?,
            "train.beta1" => tr.adam.beta1 = num(v)?,
            "train.beta2" => tr.adam.beta2 = num(v)?,
            "train.eps" => tr.adam.eps = num(v)?,
            "train.batch_size" => tr.batch_size = num(v)?,
            "train.epochs" => tr.epochs = num(v)?,
            "train.checkpoint_every" => tr.checkpoint_every = num(v)?,
            "train.parallel" => {
                tr.parallelism = if flag(v)? {
                    Parallelism::Parallel
                } else {
                    Parallelism::Sequential
                }
            }
            "augment.enabled" => tr.augment.enabled = flag(v)?,
            "augment.flip_prob" => tr.augment.flip_prob = num(v)?,
            "augment.rotation_deg" => tr.augment.rotation_deg = num(v)?,
            "augment.zoom_min" => tr.augment.zoom_min = num(v)?,
            "augment.zoom_max" => tr.augment.zoom_max = num(v)?,
            "augment.translate" => tr.augment.translate = num(v)?,
            "data.manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.train_split" => self.train_split = v.to_string(),
            "data.val_split" => self.val_split = v.to_string(),
            "data.eval_split" => self.eval_split = v.to_string(),
            "synth.seed" => {
                self.synth.seed = num(v)?;
                self.synth_seed_set = true;
            }
            "synth.size" => self.synth.size = num(v)?,
            "synth.train_live" => self.synth.train_live = num(v)?,
            "synth.train_pa" => self.synth.train_pa = num(v)?,
            "synth.test_live" => self.synth.test_live = num(v)?,
            "synth.test_pa" => self.synth.test_pa = num(v)?,
            "synth.pa_styles" => {
                self.synth.pa_styles = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| PaStyle::parse(s).ok_or_else(|| format!("unknown PA style {:?}", s.trim())))
                    .collect::<std::result::Result<_, _>>()?
            }
            "synth.noise" => self.synth.noise = num(v)?,
            "synth.quality" => self.synth.quality = num(v)?,
            "eval.fdr_targets" => self.fdr_targets = list(v)?,
            "eval.threshold" => self.threshold = num(v)?,
            "gradcam.target" => {
                self.cam_target = CamTarget::parse(v).ok_or_else(|| format!("expected probability or logit, got {v:?}"))?
            }
            "gradcam.opacity" => self.overlay_opacity = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Applies `key=value` text, collecting every problem.
    fn apply_text(&mut self, text: &str, origin: &str, errs: &mut Vec<String>) {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errs.push(format!("{origin}:{}: {}: {e}", n + 1, k.trim()));
                    }
                }
                None => errs.push(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)),
            }
        }
    }

    /// Every semantic problem of a fully assembled configuration.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.model.validate() {
            errs.push(format!("model: {e}"));
        }
        errs.extend(self.train.problems());
        if self.manifest.is_none() {
            if let Err(Error::Config(e)) = self.synth.validate() {
                errs.extend(e);
            }
        }
        if self.fdr_targets.is_empty() {
            errs.push("eval.fdr_targets must list at least one rate".into());
        }
        for &t in &self.fdr_targets {
            if !(0.0..1.0).contains(&t) {
                errs.push(format!("eval.fdr_targets: {t} outside [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            errs.push(format!("eval.threshold must lie in [0, 1], got {}", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.overlay_opacity) {
            errs.push(format!("gradcam.opacity must lie in [0, 1], got {}", self.overlay_opacity));
        }
        if self.train_split.is_empty() || self.eval_split.is_empty() {
            errs.push("data.train_split and data.eval_split must be non-empty".into());
        }
        errs
    }

    /// Defaults, then the file, then `overrides` in order. Reports every
    /// invalid key and value in one error.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
            cfg.apply_text(&text, &path.display().to_string(), &mut errs);
        }
        for (k, v) in overrides {
            if let Err(e) = cfg.set(k, v) {
                errs.push(format!("--{}: {e}", k.rsplit('.').next().unwrap_or(k).replace('_', "-")));
            }
        }
        if !cfg.synth_seed_set {
            cfg.synth.seed = cfg.seed;
        }
        errs.extend(cfg.problems());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        cfg.apply_text(text, "config", &mut errs);
        if !cfg.synth_seed_set {
            cfg.synth.seed = cfg.seed;
        }
        errs.extend(cfg.problems());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Fully resolved configuration; feeding it back reproduces `self`.
    pub fn to_kv(&self) -> String {
        let (m, b, t) = (&self.model, &self.model.backbone, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("model.channels", join(&b.channels));
        kv("model.in_channels", b.in_channels.to_string());
        kv("model.input_size", b.input_size.to_string());
        kv("model.fusion", m.fusion.name().into());
        kv("model.reduction", m.reduction.to_string());
        kv("model.softmax_axis", m.axis.name().into());
        kv("train.lr", t.adam.lr.to_string());
        kv("train.beta1", t.adam.beta1.to_string());
        kv("train.beta2", t.adam.beta2.to_string());
        kv("train.eps", t.adam.eps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.parallel", (t.parallelism == Parallelism::Parallel).to_string());
        kv("augment.enabled", t.augment.enabled.to_string());
        kv("augment.flip_prob", t.augment.flip_prob.to_string());
        kv("augment.rotation_deg", t.augment.rotation_deg.to_string());
        kv("augment.zoom_min", t.augment.zoom_min.to_string());
        kv("augment.zoom_max", t.augment.zoom_max.to_string());
        kv("augment.translate", t.augment.translate.to_string());
        kv(
            "data.manifest",
            self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("data.train_split", self.train_split.clone());
        kv("data.val_split", self.val_split.clone());
        kv("data.eval_split", self.eval_split.clone());
        kv("eval.fdr_targets", join(&self.fdr_targets));
        kv("eval.threshold", self.threshold.to_string());
        kv(
            "gradcam.target",
            match self.cam_target {
                CamTarget::PaProbability => "probability",
                CamTarget::PaLogit => "logit",
            }
            .into(),
        );
        kv("gradcam.opacity", self.overlay_opacity.to_string());
        s + &self.synth.to_kv()
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run_config.txt"), self.to_kv())?;
        Ok(())
    }
}
