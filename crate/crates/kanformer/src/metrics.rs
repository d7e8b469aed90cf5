//! Detection metrics: equal error rate and minimum normalized tandem
//! detection cost, plus plain-text score files.
//!
//! Convention: higher score = more bonafide. At a threshold t the
//! countermeasure accepts scores ≥ t, so
//! `FAR(t) = |{spoof ≥ t}| / n_spoof` and `FRR(t) = |{bonafide < t}| / n_bona`
//! (ties sit on the accept side for spoof and on the accept side for
//! bonafide; this strict/non-strict split is fixed and tested).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Per-utterance detection scores split by ground truth.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub bonafide: Vec<(String, f64)>,
    pub spoof: Vec<(String, f64)>,
}

impl ScoreSet {
    pub fn push(&mut self, id: &str, score: f64, label: Label) {
        match label {
            Label::Bonafide => self.bonafide.push((id.to_string(), score)),
            Label::Spoof => self.spoof.push((id.to_string(), score)),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.bonafide.is_empty() || self.spoof.is_empty() {
            return Err(Error::Input(format!(
                "score set needs both classes (bonafide: {}, spoof: {})",
                self.bonafide.len(),
                self.spoof.len()
            )));
        }
        for (id, s) in self.bonafide.iter().chain(&self.spoof) {
            if !s.is_finite() {
                return Err(Error::Input(format!("non-finite score for '{id}'")));
            }
        }
        Ok(())
    }
}

/// Threshold sweep over all unique scores, with sentinels outside the score
/// range so the sweep always spans FAR=1/FRR=0 to FAR=0/FRR=1.
/// Returns (thresholds, far, frr).
fn sweep(s: &ScoreSet) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut bona: Vec<f64> = s.bonafide.iter().map(|(_, v)| *v).collect();
    let mut spoof: Vec<f64> = s.spoof.iter().map(|(_, v)| *v).collect();
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);

    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let lo = thresholds[0] - 1.0;
    let hi = thresholds[thresholds.len() - 1] + 1.0;
    thresholds.insert(0, lo);
    thresholds.push(hi);

    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    let mut far = Vec::with_capacity(thresholds.len());
    let mut frr = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        // spoof accepted: score >= t
        let accepted = spoof.len() - spoof.partition_point(|&v| v < t);
        far.push(accepted as f64 / ns);
        // bonafide rejected: score < t
        let rejected = bona.partition_point(|&v| v < t);
        frr.push(rejected as f64 / nb);
    }
    (thresholds, far, frr)
}

/// Equal error rate with linear interpolation between adjacent sweep points
/// where the sign of FAR−FRR flips. Returns (eer, threshold).
pub fn compute_eer(s: &ScoreSet) -> Result<(f64, f64)> {
    s.validate()?;
    let (thresholds, far, frr) = sweep(s);
    for i in 0..thresholds.len() {
        let diff = far[i] - frr[i];
        if diff == 0.0 {
            return Ok((far[i], thresholds[i]));
        }
        if diff < 0.0 {
            // crossing happened between i-1 and i (diff is non-increasing
            // and starts at +1 thanks to the low sentinel)
            let prev = far[i - 1] - frr[i - 1];
            let alpha = prev / (prev - diff);
            let eer = far[i - 1] + alpha * (far[i] - far[i - 1]);
            let thr = thresholds[i - 1] + alpha * (thresholds[i] - thresholds[i - 1]);
            return Ok((eer, thr));
        }
    }
    unreachable!("sweep sentinels guarantee a sign change");
}

/// Operating point of the tandem system: one prior for spoofed trials, one
/// (optional) for zero-effort impostors, detection costs, and the fixed
/// error rates of the downstream verification stage.
///
/// The cost evaluated over the countermeasure sweep is the
/// countermeasure-attributable part of the tandem detection cost:
///
/// ```text
/// C1 = π_tar·C_miss·(1 − asv_p_miss) − π_non·C_fa·asv_p_fa
/// C2 = π_spoof·C_fa·asv_p_fa_spoof
/// t-DCF_norm(t) = (C1·P_cm_miss(t) + C2·P_cm_fa(t)) / min(C1, C2)
/// ```
///
/// with π_tar = 1 − π_spoof − π_non. A default countermeasure (accept-all
/// or reject-all) scores exactly 1; perfect separation scores 0.
///
/// All constants are configuration. The defaults below are a documented
/// example operating point, not values claimed from any external toolkit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TdcfParams {
    pub pi_spoof: f64,
    pub pi_non: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub asv_p_miss: f64,
    pub asv_p_fa: f64,
    pub asv_p_fa_spoof: f64,
}

impl Default for TdcfParams {
    fn default() -> Self {
        TdcfParams {
            pi_spoof: 0.05,
            pi_non: 0.01,
            c_miss: 1.0,
            c_fa: 10.0,
            asv_p_miss: 0.01,
            asv_p_fa: 0.01,
            asv_p_fa_spoof: 0.5,
        }
    }
}

impl TdcfParams {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("pi_spoof", self.pi_spoof),
            ("pi_non", self.pi_non),
            ("asv_p_miss", self.asv_p_miss),
            ("asv_p_fa", self.asv_p_fa),
            ("asv_p_fa_spoof", self.asv_p_fa_spoof),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.pi_spoof + self.pi_non > 1.0 {
            return Err(Error::Config(format!(
                "priors sum to {} > 1",
                self.pi_spoof + self.pi_non
            )));
        }
        if self.c_miss <= 0.0 || self.c_fa <= 0.0 {
            return Err(Error::Config("costs must be positive".into()));
        }
        Ok(())
    }

    /// (C1, C2); errors if either cost weight or the normalization
    /// constant min(C1, C2) degenerates to zero or below.
    fn cost_weights(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let pi_tar = 1.0 - self.pi_spoof - self.pi_non;
        let c1 = pi_tar * self.c_miss * (1.0 - self.asv_p_miss)
            - self.pi_non * self.c_fa * self.asv_p_fa;
        let c2 = self.pi_spoof * self.c_fa * self.asv_p_fa_spoof;
        if c1 <= 0.0 || c2 <= 0.0 {
            return Err(Error::Config(format!(
                "degenerate t-DCF normalization: C1 = {c1}, C2 = {c2}"
            )));
        }
        Ok((c1, c2))
    }
}

/// Minimum of the normalized tandem cost over the same threshold sweep as
/// the EER. Returns (min t-DCF, minimizing threshold).
pub fn compute_min_tdcf(s: &ScoreSet, p: &TdcfParams) -> Result<(f64, f64)> {
    s.validate()?;
    let (c1, c2) = p.cost_weights()?;
    let norm = c1.min(c2);
    let (thresholds, far, frr) = sweep(s);
    let mut best = f64::INFINITY;
    let mut best_t = thresholds[0];
    for i in 0..thresholds.len() {
        let cost = (c1 * frr[i] + c2 * far[i]) / norm;
        if cost < best {
            best = cost;
            best_t = thresholds[i];
        }
    }
    Ok((best, best_t))
}

/// Metrics summary serialized as the JSON report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_tdcf: f64,
    pub min_tdcf_threshold: f64,
    pub n_bonafide: usize,
    pub n_spoof: usize,
}

pub fn metrics_report(s: &ScoreSet, p: &TdcfParams) -> Result<MetricsReport> {
    let (eer, eer_threshold) = compute_eer(s)?;
    let (min_tdcf, min_tdcf_threshold) = compute_min_tdcf(s, p)?;
    Ok(MetricsReport {
        eer,
        eer_threshold,
        min_tdcf,
        min_tdcf_threshold,
        n_bonafide: s.bonafide.len(),
        n_spoof: s.spoof.len(),
    })
}

// ── score files ──────────────────────────────────────────────────────

/// One line per utterance: `utt_id<space>score`, score at 6 decimals.
pub fn write_scores(path: &Path, scores: &[(String, f64)]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (id, _) in scores {
        if !seen.insert(id) {
            return Err(Error::Input(format!("duplicate utterance id '{id}'")));
        }
    }
    let mut out = String::new();
    for (id, s) in scores {
        writeln!(out, "{id} {s:.6}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (id, score) = match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(s), None) => (id, s),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected 'utt_id score', got '{line}'"),
                })
            }
        };
        let score: f64 = score.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("unparseable score '{score}'"),
        })?;
        out.push((id.to_string(), score));
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "score file {} is empty",
            path.display()
        )));
    }
    Ok(out)
}

/// Join scores with a label manifest into a [`ScoreSet`].
pub fn join_scores(scores: &[(String, f64)], labels: &BTreeMap<String, Label>) -> Result<ScoreSet> {
    let mut set = ScoreSet::default();
    for (id, score) in scores {
        let label = labels
            .get(id)
            .ok_or_else(|| Error::Input(format!("utterance '{id}' missing from manifest")))?;
        set.push(id, *score, *label);
    }
    Ok(set)
}
