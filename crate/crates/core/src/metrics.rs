//! Presentation attack detection metrics.
//!
//! A sample is classified as PA when its score is `>= threshold`.
//! FDR is the fraction of live samples classified PA (equal to BPCER), TDR
//! the fraction of PA samples classified PA (equal to `1 - APCER`).

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};

/// PA scores of live and attack samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    live: Vec<f64>,
    pa: Vec<f64>,
}

impl ScoreSet {
    pub fn new(live: Vec<f64>, pa: Vec<f64>) -> Result<Self> {
        if live.is_empty() || pa.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "score set needs both classes (live: {}, pa: {})",
                live.len(),
                pa.len()
            )));
        }
        if let Some(bad) = live.iter().chain(&pa).find(|s| !s.is_finite() || **s < 0.0 || **s > 1.0) {
            return Err(Error::InvalidArgument(format!("score {bad} outside [0, 1]")));
        }
        Ok(ScoreSet { live, pa })
    }

    /// Splits `(label, score)` pairs, `label` being `true` for PA.
    pub fn from_labelled(pairs: impl IntoIterator<Item = (bool, f64)>) -> Result<Self> {
        let (mut live, mut pa) = (Vec::new(), Vec::new());
        for (is_pa, s) in pairs {
            if is_pa {
                pa.push(s)
            } else {
                live.push(s)
            }
        }
        Self::new(live, pa)
    }

    pub fn live(&self) -> &[f64] {
        &self.live
    }

    pub fn pa(&self) -> &[f64] {
        &self.pa
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fdr: f64,
    pub tdr: f64,
}

/// Operating points ordered by strictly decreasing threshold. The first
/// point has an infinite threshold (nothing flagged), the last one the
/// smallest observed score (everything flagged).
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "threshold,fdr,tdr")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.threshold, p.fdr, p.tdr)?;
        }
        Ok(())
    }

    /// Point whose threshold is the smallest one `>= t`, i.e. the rates of
    /// the rule `score >= t`.
    pub fn at_threshold(&self, t: f64) -> RocPoint {
        let mut best = self.points[0];
        for p in &self.points {
            if p.threshold >= t {
                best = *p;
            }
        }
        best
    }
}

fn sorted_desc(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn roc(scores: &ScoreSet) -> RocCurve {
    let live = sorted_desc(&scores.live);
    let pa = sorted_desc(&scores.pa);
    let mut thresholds: Vec<f64> = live.iter().chain(&pa).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let (n_live, n_pa) = (live.len() as f64, pa.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fdr: 0.0,
        tdr: 0.0,
    }];
    let (mut li, mut pi) = (0, 0);
    for t in thresholds {
        while li < live.len() && live[li] >= t {
            li += 1;
        }
        while pi < pa.len() && pa[pi] >= t {
            pi += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fdr: li as f64 / n_live,
            tdr: pi as f64 / n_pa,
        });
    }
    RocCurve { points }
}

/// Best TDR among thresholds whose FDR stays within `fdr_target`, and the
/// largest threshold reaching it. Returns `(tdr, threshold)`.
pub fn tdr_at_fdr(scores: &ScoreSet, fdr_target: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&fdr_target) {
        return Err(Error::InvalidArgument(format!(
            "FDR target {fdr_target} outside [0, 1)"
        )));
    }
    let curve = roc(scores);
    let mut best = curve.points[0];
    for p in &curve.points {
        if p.fdr <= fdr_target && p.tdr > best.tdr {
            best = *p;
        }
    }
    Ok((best.tdr, best.threshold))
}

/// Whether the live sample count resolves `fdr_target`: a target below
/// `1/|live|` (other than zero) cannot be distinguished from zero.
pub fn fdr_target_supported(n_live: usize, fdr_target: f64) -> bool {
    fdr_target == 0.0 || fdr_target * n_live as f64 >= 1.0 - 1e-9
}

/// `(APCER, BPCER)` at `threshold`.
pub fn apcer_bpcer(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let missed = scores.pa.iter().filter(|&&s| s < threshold).count();
    let false_alarms = scores.live.iter().filter(|&&s| s >= threshold).count();
    Ok((
        missed as f64 / scores.pa.len() as f64,
        false_alarms as f64 / scores.live.len() as f64,
    ))
}

/// `0.002` → `"0.2%"`.
pub fn percent_label(rate: f64) -> String {
    let pct = format!("{:.4}", rate * 100.0);
    let pct = pct.trim_end_matches('0').trim_end_matches('.');
    format!("{pct}%")
}

/// Human-readable evaluation block: TDR at each FDR target, then APCER and
/// BPCER at the decision threshold.
pub fn summary(scores: &ScoreSet, fdr_targets: &[f64], threshold: f64) -> Result<String> {
    let mut out = String::new();
    let n_live = scores.live.len();
    writeln!(out, "samples: {} live, {} PA", n_live, scores.pa.len()).unwrap();
    for &target in fdr_targets {
        let label = percent_label(target);
        if !fdr_target_supported(n_live, target) {
            let needed = (1.0 / target).ceil() as u64;
            writeln!(
                out,
                "TDR @ {label} FDR: unsupported at this sample size (needs >= {needed} live samples)"
            )
            .unwrap();
            continue;
        }
        let (tdr, t) = tdr_at_fdr(scores, target)?;
        writeln!(out, "TDR @ {label} FDR: {:.2}% (threshold {t:.6})", tdr * 100.0).unwrap();
    }
    let (apcer, bpcer) = apcer_bpcer(scores, threshold)?;
    writeln!(
        out,
        "APCER @ {threshold}: {:.2}%\nBPCER @ {threshold}: {:.2}%",
        apcer * 100.0,
        bpcer * 100.0
    )
    .unwrap();
    Ok(out)
}
