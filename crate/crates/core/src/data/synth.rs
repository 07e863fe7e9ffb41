//! Deterministic iris-like synthetic corpus.
//!
//! Every image is a dark pupil inside a textured iris annulus on a brighter
//! surround. Live irises carry angular fibre texture, crypts and fine
//! grain. Attacks come in two styles: a printed dot lattice over the live
//! texture (`lattice_overlay`) or a smooth, nearly textureless disc
//! (`flat_disc`). The quality knob adds blur, a larger specular reflection
//! and sensor noise shared by both classes.

use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{Label, Manifest, Record};
use crate::error::{Error, Result};
use crate::imaging::{laplacian_variance, save_gray_png};
use crate::rng::{derive_indexed, derive_seed, rng_from, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PaStyle {
    LatticeOverlay,
    FlatDisc,
}

impl PaStyle {
    pub const ALL: [PaStyle; 2] = [PaStyle::LatticeOverlay, PaStyle::FlatDisc];

    pub fn name(self) -> &'static str {
        match self {
            PaStyle::LatticeOverlay => "lattice_overlay",
            PaStyle::FlatDisc => "flat_disc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s.trim())
    }
}

impl fmt::Display for PaStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    pub train_live: usize,
    pub train_pa: usize,
    pub test_live: usize,
    pub test_pa: usize,
    /// Attack styles, assigned round-robin to PA samples.
    pub pa_styles: Vec<PaStyle>,
    /// Standard deviation of the fine-grain texture noise.
    pub noise: f64,
    /// Capture degradation in `[0, 1]`: 0 is clean, 1 heavily blurred and noisy.
    pub quality: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            size: 64,
            train_live: 500,
            train_pa: 500,
            test_live: 200,
            test_pa: 200,
            pa_styles: PaStyle::ALL.to_vec(),
            noise: 0.01,
            quality: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.size < 8 {
            errs.push(format!("synth.size must be >= 8, got {}", self.size));
        }
        for (key, n) in [
            ("synth.train_live", self.train_live),
            ("synth.train_pa", self.train_pa),
            ("synth.test_live", self.test_live),
            ("synth.test_pa", self.test_pa),
        ] {
            if n == 0 {
                errs.push(format!("{key} must be > 0"));
            }
        }
        if self.pa_styles.is_empty() {
            errs.push("synth.pa_styles must name at least one style".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            errs.push(format!("synth.noise must be >= 0, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.quality) {
            errs.push(format!("synth.quality must lie in [0, 1], got {}", self.quality));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn counts(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (self.train_live, self.train_pa),
            Split::Test => (self.test_live, self.test_pa),
        }
    }

    /// `key=value` lines, readable back by the run configuration parser.
    pub fn to_kv(&self) -> String {
        let styles: Vec<_> = self.pa_styles.iter().map(|s| s.name()).collect();
        format!(
            "synth.seed={}\nsynth.size={}\nsynth.train_live={}\nsynth.train_pa={}\n\
             synth.test_live={}\nsynth.test_pa={}\nsynth.pa_styles={}\nsynth.noise={}\nsynth.quality={}\n",
            self.seed,
            self.size,
            self.train_live,
            self.train_pa,
            self.test_live,
            self.test_pa,
            styles.join(","),
            self.noise,
            self.quality
        )
    }
}

/// What a generated sample depicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Live,
    Pa(PaStyle),
}

impl SampleKind {
    pub fn label(self) -> Label {
        match self {
            SampleKind::Live => Label::Live,
            SampleKind::Pa(_) => Label::Pa,
        }
    }
}

/// Kind of the `index`-th sample of a split: live samples first, then
/// attacks cycling through the configured styles.
pub fn sample_kind(cfg: &SynthConfig, split: Split, index: usize) -> SampleKind {
    let (n_live, _) = cfg.counts(split);
    if index < n_live {
        SampleKind::Live
    } else {
        SampleKind::Pa(cfg.pa_styles[(index - n_live) % cfg.pa_styles.len()])
    }
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // 0 well inside, 1 well outside, linear over one pixel.
    (x - edge + 0.5).clamp(0.0, 1.0)
}

fn gaussian_blur(img: &mut [f64], s: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let clamp = |v: isize| v.clamp(0, s as isize - 1) as usize;
    let mut tmp = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            tmp[y * s + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * img[y * s + clamp(x as isize + k as isize - radius)])
                .sum::<f64>()
                / norm;
        }
    }
    for y in 0..s {
        for x in 0..s {
            img[y * s + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - radius) * s + x])
                .sum::<f64>()
                / norm;
        }
    }
}

/// Renders one `1×size×size` image quantised to 8-bit levels, so that the
/// tensor equals what a PNG round trip yields.
pub fn render(cfg: &SynthConfig, kind: SampleKind, rng: &mut Rng) -> Tensor<f32> {
    let s = cfg.size;
    let sf = s as f64;
    let cx = sf / 2.0 + rng.random_range(-0.05..0.05) * sf;
    let cy = sf / 2.0 + rng.random_range(-0.05..0.05) * sf;
    let r_pupil = rng.random_range(0.10..0.16) * sf;
    let r_iris = rng.random_range(0.36..0.44) * sf;
    let surround = rng.random_range(0.65..0.75);
    let iris_base = rng.random_range(0.35..0.50);
    let pupil_level = rng.random_range(0.04..0.10);

    // Feature sizes are specified for 64-pixel images and scale with size.
    let unit = sf / 64.0;
    let k1 = rng.random_range(6..12) as f64;
    let k2 = rng.random_range(12..20) as f64;
    let (ph1, ph2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let crypts: Vec<(f64, f64, f64)> = (0..rng.random_range(8..15))
        .map(|_| {
            let th = rng.random_range(0.0..2.0 * PI);
            let rho = rng.random_range(0.2..0.8);
            let r = r_pupil + rho * (r_iris - r_pupil);
            (cx + r * th.cos(), cy + r * th.sin(), rng.random_range(1.5..3.0) * unit)
        })
        .collect();
    let period = rng.random_range(5.0..7.0) * unit;
    let (off_x, off_y) = (rng.random_range(0.0..period), rng.random_range(0.0..period));
    let dot_sigma = 0.8 * unit;
    let glint_th = rng.random_range(0.0..2.0 * PI);
    let glint = (cx + 0.5 * r_pupil * glint_th.cos(), cy + 0.5 * r_pupil * glint_th.sin());
    let glint_r = 1.5 + 2.0 * cfg.quality;

    // Grain is shared by all classes; a flat disc differs only in its
    // missing fibre and crypt structure.
    let textured = match kind {
        SampleKind::Pa(PaStyle::FlatDisc) => 0.15,
        _ => 1.0,
    };
    let grain_dist = Normal::new(0.0, cfg.noise.max(1e-12)).unwrap();
    let sensor = Normal::new(0.0, (0.05 * cfg.quality).max(1e-12)).unwrap();

    let mut img = vec![0.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let r = (dx * dx + dy * dy).sqrt();
            let th = dy.atan2(dx);
            let rho = ((r - r_pupil) / (r_iris - r_pupil)).clamp(0.0, 1.0);
            let fibres = 0.08 * (k1 * th + ph1).sin() + 0.06 * (k2 * th + ph2 + 3.0 * rho).sin();
            let crypt: f64 = crypts
                .iter()
                .map(|&(px, py, sg)| {
                    let d2 = (x as f64 + 0.5 - px).powi(2) + (y as f64 + 0.5 - py).powi(2);
                    -0.2 * (-d2 / (2.0 * sg * sg)).exp()
                })
                .sum();
            let mut iris = iris_base + 0.08 * rho + textured * ((PI * rho).sin() * fibres + crypt);
            iris += grain_dist.sample(rng);
            if kind == SampleKind::Pa(PaStyle::LatticeOverlay) && r < r_iris * 1.05 {
                let near = |p: f64, off: f64| ((p - off) / period).round() * period + off;
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let d2 = (px - near(px, off_x)).powi(2) + (py - near(py, off_y)).powi(2);
                iris -= 0.35 * (-d2 / (2.0 * dot_sigma * dot_sigma)).exp();
            }
            let outer = surround + 0.05 * (y as f64 / sf - 0.5) + grain_dist.sample(rng);
            let a = smoothstep(r_pupil, r);
            let b = smoothstep(r_iris, r);
            let mut v = pupil_level * (1.0 - a) + (iris * (1.0 - b) + outer * b) * a;
            let g2 = (x as f64 + 0.5 - glint.0).powi(2) + (y as f64 + 0.5 - glint.1).powi(2);
            let g = 1.0 - smoothstep(glint_r, g2.sqrt());
            v += g * (0.95 - v);
            img[y * s + x] = v;
        }
    }
    // Optics blur everything a little; degraded captures blur more.
    gaussian_blur(&mut img, s, (0.6 + 1.2 * cfg.quality) * unit);
    if cfg.quality > 0.0 {
        for v in img.iter_mut() {
            *v += sensor.sample(rng);
        }
    }
    let data = img
        .into_iter()
        .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32)
        .collect();
    Tensor::new([1, s, s], data).expect("size validated")
}

/// Renders the `index`-th sample of a split from its own seed stream.
pub fn render_sample(cfg: &SynthConfig, split: Split, index: usize) -> (Tensor<f32>, SampleKind) {
    let kind = sample_kind(cfg, split, index);
    let seed = derive_indexed(derive_seed(cfg.seed, "synth"), split as u64, index as u64);
    (render(cfg, kind, &mut rng_from(seed)), kind)
}

/// Mean Laplacian variance per sample kind over a corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextureReport {
    pub live: f64,
    pub lattice_overlay: Option<f64>,
    pub flat_disc: Option<f64>,
}

impl TextureReport {
    /// Ratio of lattice to live high-frequency energy.
    pub fn lattice_margin(&self) -> Option<f64> {
        self.lattice_overlay.map(|l| l / self.live)
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!("laplacian_var.live={:.6}\n", self.live);
        if let Some(v) = self.lattice_overlay {
            writeln!(s, "laplacian_var.lattice_overlay={v:.6}").unwrap();
        }
        if let Some(v) = self.flat_disc {
            writeln!(s, "laplacian_var.flat_disc={v:.6}").unwrap();
        }
        s
    }
}

#[derive(Default)]
struct TextureTally([(f64, usize); 3]);

impl TextureTally {
    fn add(&mut self, kind: SampleKind, img: &Tensor<f32>) {
        let slot = match kind {
            SampleKind::Live => 0,
            SampleKind::Pa(PaStyle::LatticeOverlay) => 1,
            SampleKind::Pa(PaStyle::FlatDisc) => 2,
        };
        self.0[slot].0 += laplacian_variance(img);
        self.0[slot].1 += 1;
    }

    fn report(&self) -> TextureReport {
        let mean = |(t, n): (f64, usize)| (n > 0).then(|| t / n as f64);
        TextureReport {
            live: mean(self.0[0]).unwrap_or(0.0),
            lattice_overlay: mean(self.0[1]),
            flat_disc: mean(self.0[2]),
        }
    }
}

/// Texture statistics of the training split without touching the disk.
pub fn texture_report(cfg: &SynthConfig) -> Result<TextureReport> {
    cfg.validate()?;
    let mut tally = TextureTally::default();
    let (n_live, n_pa) = cfg.counts(Split::Train);
    for i in 0..n_live + n_pa {
        let (img, kind) = render_sample(cfg, Split::Train, i);
        tally.add(kind, &img);
    }
    Ok(tally.report())
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub report: TextureReport,
}

/// Writes `images/{train,test}/*.png`, `manifest.csv`, `synth_config.txt`
/// and `synth_stats.txt` under `out_dir`.
pub fn generate_synth(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let mut records = Vec::new();
    let mut tally = TextureTally::default();
    for split in [Split::Train, Split::Test] {
        let dir = out_dir.join("images").join(split.name());
        fs::create_dir_all(&dir)?;
        let (n_live, n_pa) = cfg.counts(split);
        for i in 0..n_live + n_pa {
            let (img, kind) = render_sample(cfg, split, i);
            let rel = format!("images/{}/{}_{:05}.png", split.name(), kind.label(), i);
            save_gray_png(out_dir.join(&rel), &img)?;
            if split == Split::Train {
                tally.add(kind, &img);
            }
            records.push(Record {
                path: rel,
                label: kind.label(),
                pa_type: match kind {
                    SampleKind::Live => None,
                    SampleKind::Pa(style) => Some(style.name().to_string()),
                },
                split: Some(split.name().to_string()),
            });
        }
    }
    let report = tally.report();
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    let manifest_path = out_dir.join("manifest.csv");
    let mut buf = Vec::new();
    manifest.write_csv(&mut buf)?;
    fs::write(&manifest_path, buf)?;
    fs::write(out_dir.join("synth_config.txt"), cfg.to_kv())?;
    fs::write(out_dir.join("synth_stats.txt"), report.to_kv())?;
    Ok(SynthOutput {
        manifest,
        manifest_path,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            size: 32,
            train_live: 6,
            train_pa: 6,
            test_live: 3,
            test_pa: 3,
            ..SynthConfig::default()
        }
    }

    fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synth(&small(3), a.path()).unwrap();
        generate_synth(&small(3), b.path()).unwrap();
        assert_eq!(read_tree(a.path()), read_tree(b.path()));
        let c = tempfile::tempdir().unwrap();
        generate_synth(&small(4), c.path()).unwrap();
        assert_ne!(read_tree(a.path()), read_tree(c.path()));
    }

    #[test]
    fn corpus_reloads_with_disjoint_splits() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synth(&small(1), dir.path()).unwrap();
        let m = load_manifest(&out.manifest_path).unwrap();
        assert_eq!(m.records.len(), 18);
        let train: Vec<_> = m.split("train").iter().map(|r| r.path.clone()).collect();
        assert!(m.split("test").iter().all(|r| !train.contains(&r.path)));
        assert_eq!(m.records.iter().filter(|r| r.pa_type.as_deref() == Some("flat_disc")).count(), 3 + 1);
        for r in &m.records {
            let img = crate::imaging::load_image(m.resolve(r), 1, 32).unwrap();
            let (orig, _) = render_sample(
                &small(1),
                if r.split.as_deref() == Some("train") { Split::Train } else { Split::Test },
                r.path[r.path.len() - 9..r.path.len() - 4].parse().unwrap(),
            );
            assert!(img.max_abs_diff(&orig).unwrap() < 1e-6);
        }
    }

    #[test]
    fn lattice_has_twice_the_live_texture_energy() {
        let report = texture_report(&SynthConfig {
            train_live: 40,
            train_pa: 40,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(report.lattice_margin().unwrap() >= 2.0, "{report:?}");
    }

    #[test]
    fn degradation_shrinks_the_margin() {
        let margins: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&q| {
                texture_report(&SynthConfig {
                    train_live: 20,
                    train_pa: 20,
                    quality: q,
                    ..SynthConfig::default()
                })
                .unwrap()
                .lattice_margin()
                .unwrap()
            })
            .collect();
        assert!(margins.windows(2).all(|w| w[1] < w[0]), "{margins:?}");
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = SynthConfig {
            train_live: 0,
            quality: 2.0,
            pa_styles: vec![],
            ..SynthConfig::default()
        };
        match cfg.validate().unwrap_err() {
            Error::Config(errs) => assert_eq!(errs.len(), 3),
            e => panic!("{e}"),
        }
    }
}
