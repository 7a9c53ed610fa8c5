//! FAR/FRR, EER, HTER and AUC over liveness scores.
//!
//! A sample is accepted as real iff `score >= tau`.

mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Label;

pub use io::{read_scores, write_scores};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub score: f64,
    pub label: Label,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::Metric(format!("non-finite score {}", e.score)));
        }
        Ok(ScoreSet { entries })
    }

    /// Builds a set from parallel score/label slices, all in domain 0.
    pub fn from_pairs(scores: &[f64], labels: &[Label]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        Self::new(
            scores
                .iter()
                .zip(labels)
                .map(|(&score, &label)| ScoreEntry {
                    score,
                    label,
                    domain: 0,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_real(&self) -> usize {
        self.entries.iter().filter(|e| e.label == Label::Real).count()
    }

    pub fn n_fake(&self) -> usize {
        self.len() - self.n_real()
    }

    fn class_sizes(&self) -> Result<(usize, usize)> {
        let (nr, nf) = (self.n_real(), self.n_fake());
        if nr == 0 || nf == 0 {
            return Err(Error::Metric(format!(
                "need at least one real and one fake score, have {nr} real and {nf} fake"
            )));
        }
        Ok((nr, nf))
    }

    fn sorted(&self) -> Vec<ScoreEntry> {
        let mut s = self.entries.clone();
        s.sort_by(|a, b| a.score.total_cmp(&b.score));
        s
    }
}

/// `(FAR, FRR)` at `tau`.
pub fn far_frr(set: &ScoreSet, tau: f64) -> Result<(f64, f64)> {
    let (nr, nf) = set.class_sizes()?;
    let (fa, fr) = error_counts(set, tau);
    Ok((fa as f64 / nf as f64, fr as f64 / nr as f64))
}

/// Accepted fakes and rejected reals at `tau`.
fn error_counts(set: &ScoreSet, tau: f64) -> (usize, usize) {
    set.entries.iter().fold((0, 0), |(fa, fr), e| match e.label {
        Label::Fake if e.score >= tau => (fa + 1, fr),
        Label::Real if e.score < tau => (fa, fr + 1),
        _ => (fa, fr),
    })
}

pub fn hter(set: &ScoreSet, tau: f64) -> Result<f64> {
    let (far, frr) = far_frr(set, tau)?;
    Ok((far + frr) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub tau: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub tau: f64,
    pub far: f64,
    pub frr: f64,
    /// `(FAR + FRR) / 2` at `tau`.
    pub eer: f64,
}

/// Candidate thresholds in increasing order with their error counts:
/// `−∞`, midpoints between adjacent distinct scores, `+∞`.
fn sweep(set: &ScoreSet) -> Vec<(f64, usize, usize)> {
    let sorted = set.sorted();
    let nf = set.n_fake();
    // below −∞ nothing is rejected: every fake is accepted
    let (mut fa, mut fr) = (nf, 0usize);
    let mut out = Vec::with_capacity(sorted.len() + 2);
    out.push((f64::NEG_INFINITY, fa, fr));
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            match sorted[i].label {
                Label::Fake => fa -= 1,
                Label::Real => fr += 1,
            }
            i += 1;
        }
        let tau = if i < sorted.len() {
            s + (sorted[i].score - s) / 2.0
        } else {
            f64::INFINITY
        };
        out.push((tau, fa, fr));
    }
    out
}

/// Threshold where FAR and FRR are closest; ties go to the smaller
/// `FAR + FRR`, then to the smaller threshold. Compared in exact integers.
pub fn eer_threshold(set: &ScoreSet) -> Result<EerPoint> {
    let (nr, nf) = set.class_sizes()?;
    let key = |fa: usize, fr: usize| {
        let (a, b) = (fa as i128 * nr as i128, fr as i128 * nf as i128);
        ((a - b).abs(), a + b)
    };
    let (tau, fa, fr) = sweep(set)
        .into_iter()
        .min_by(|x, y| key(x.1, x.2).cmp(&key(y.1, y.2)).then(x.0.total_cmp(&y.0)))
        .expect("sweep always has sentinels");
    let (far, frr) = (fa as f64 / nf as f64, fr as f64 / nr as f64);
    Ok(EerPoint {
        tau,
        far,
        frr,
        eer: (far + frr) / 2.0,
    })
}

/// Twice the Mann–Whitney count: 2 per (real, fake) pair with the real
/// scored higher, 1 per tie.
fn doubled_wins(set: &ScoreSet) -> u128 {
    let sorted = set.sorted();
    let (mut fakes_below, mut total) = (0u128, 0u128);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        let (mut r, mut f) = (0u128, 0u128);
        while i < sorted.len() && sorted[i].score == s {
            match sorted[i].label {
                Label::Real => r += 1,
                Label::Fake => f += 1,
            }
            i += 1;
        }
        total += 2 * r * fakes_below + r * f;
        fakes_below += f;
    }
    total
}

/// Probability that a random real outscores a random fake, ties counted
/// one half. `O(n log n)`.
pub fn auc(set: &ScoreSet) -> Result<f64> {
    let (nr, nf) = set.class_sizes()?;
    Ok(doubled_wins(set) as f64 / (2 * nr as u128 * nf as u128) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Increasing thresholds, `−∞` and `+∞` included.
    pub points: Vec<OperatingPoint>,
    pub eer: EerPoint,
    pub auc: f64,
}

pub fn roc_curve(set: &ScoreSet) -> Result<RocCurve> {
    let (nr, nf) = set.class_sizes()?;
    let points = sweep(set)
        .into_iter()
        .map(|(tau, fa, fr)| OperatingPoint {
            tau,
            far: fa as f64 / nf as f64,
            frr: fr as f64 / nr as f64,
        })
        .collect();
    Ok(RocCurve {
        points,
        eer: eer_threshold(set)?,
        auc: auc(set)?,
    })
}

/// How the HTER threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ThresholdRule {
    /// EER threshold of the scored set itself.
    #[default]
    EerTarget,
    Fixed(f64),
    /// EER threshold of a held-out split of the source domains.
    EerDev,
}

impl fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdRule::EerTarget => write!(f, "eer-target"),
            ThresholdRule::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdRule::EerDev => write!(f, "eer-dev"),
        }
    }
}

impl FromStr for ThresholdRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eer-target" => Ok(ThresholdRule::EerTarget),
            "eer-dev" => Ok(ThresholdRule::EerDev),
            _ => match s.strip_prefix("fixed:").map(str::parse::<f64>) {
                Some(Ok(t)) if t.is_finite() => Ok(ThresholdRule::Fixed(t)),
                _ => Err(Error::Config(format!(
                    "unknown threshold `{s}` (expected eer-target, eer-dev or fixed:<value>)"
                ))),
            },
        }
    }
}

impl Serialize for ThresholdRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ThresholdRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Summary of one scored set at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub hter: f64,
    /// EER of the scored set, independent of the threshold rule.
    pub eer: f64,
    pub tau: f64,
    pub far: f64,
    pub frr: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub threshold: ThresholdRule,
}

impl MetricsReport {
    /// `dev` supplies the threshold for `ThresholdRule::EerDev`.
    pub fn compute(set: &ScoreSet, rule: ThresholdRule, dev: Option<&ScoreSet>) -> Result<Self> {
        let own = eer_threshold(set)?;
        let tau = match rule {
            ThresholdRule::EerTarget => own.tau,
            ThresholdRule::Fixed(t) => t,
            ThresholdRule::EerDev => {
                let dev = dev.ok_or_else(|| Error::Metric("eer-dev threshold needs a dev score set".into()))?;
                eer_threshold(dev)?.tau
            }
        };
        let (far, frr) = far_frr(set, tau)?;
        Ok(MetricsReport {
            auc: auc(set)?,
            hter: (far + frr) / 2.0,
            eer: own.eer,
            tau,
            far,
            frr,
            n_real: set.n_real(),
            n_fake: set.n_fake(),
            threshold: rule,
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
