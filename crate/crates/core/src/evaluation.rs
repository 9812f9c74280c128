//! Trial scoring, equal error rate, and per-attack breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{AudioStore, ConditioningTrack, Label, TrialProtocol};
use crate::error::{Error, Result};
use crate::model::{forward_with_variant, M2SAddParams, Variant};
use crate::persist::write_atomic;
use crate::seeding::utterance_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub utterance_id: String,
    pub attack_id: String,
    pub label: Label,
    /// Higher means more likely bonafide.
    pub score: f64,
}

/// Per-trial scores, one row per protocol entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub rows: Vec<ScoreRow>,
}

impl ScoreFile {
    /// `utt_id attack label score` lines; scores print in shortest
    /// round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(out, "{} {} {} {}", r.utterance_id, r.attack_id, r.label, r.score).expect("string write");
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message,
            };
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let label = fields[2].parse().map_err(|e: Error| err(e.to_string()))?;
            let score: f64 = fields[3]
                .parse()
                .map_err(|_| err(format!("score {:?} is not a number", fields[3])))?;
            if !score.is_finite() {
                return Err(err(format!("score {score} is not finite")));
            }
            rows.push(ScoreRow {
                utterance_id: fields[0].to_string(),
                attack_id: fields[1].to_string(),
                label,
                score,
            });
        }
        Ok(Self { rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    /// Bonafide and spoof score lists.
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let pick = |l: Label| self.rows.iter().filter(|r| r.label == l).map(|r| r.score).collect();
        (pick(Label::Bonafide), pick(Label::Spoof))
    }
}

/// A trial that could not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub utterance_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScoringOutcome {
    pub scores: ScoreFile,
    pub errors: Vec<RowError>,
}

/// Scores every protocol trial. Failures are collected per row; the
/// conditioning draw of each trial is seeded from `(seed, utterance id)`.
pub fn score_trials(
    params: &M2SAddParams,
    protocol: &TrialProtocol,
    store: &dyn AudioStore,
    pool: &[ConditioningTrack],
    seed: u64,
    variant: Variant,
) -> ScoringOutcome {
    let mut out = ScoringOutcome::default();
    for e in &protocol.entries {
        let scored = store.load(&e.utterance_id).and_then(|wave| {
            forward_with_variant(&wave, pool, params, utterance_seed(seed, &e.utterance_id), variant)
        });
        match scored {
            Ok(logits) => out.scores.rows.push(ScoreRow {
                utterance_id: e.utterance_id.clone(),
                attack_id: e.attack_id.clone(),
                label: e.label,
                score: logits.score(),
            }),
            Err(err) => {
                log::warn!("{}: {err}", e.utterance_id);
                out.errors.push(RowError {
                    utterance_id: e.utterance_id.clone(),
                    message: err.to_string(),
                });
            }
        }
    }
    out
}

/// Equal error rate and the threshold where it is reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// One operating point: `frr` = bonafide below threshold, `far` = spoof at or above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

fn check_scores(bona: &[f64], spoof: &[f64]) -> Result<()> {
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::Validation(format!(
            "EER needs both classes (bonafide {}, spoof {})",
            bona.len(),
            spoof.len()
        )));
    }
    if let Some(v) = bona.iter().chain(spoof).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            value: *v,
            context: "score list".into(),
        });
    }
    Ok(())
}

/// Operating points at `-inf`, the midpoints of adjacent distinct scores,
/// and `+inf`, in increasing threshold order.
pub fn roc_points(bona: &[f64], spoof: &[f64]) -> Result<Vec<RocPoint>> {
    check_scores(bona, spoof)?;
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (b, s) = (sorted(bona), sorted(spoof));
    let mut all: Vec<f64> = b.iter().chain(&s).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let (nb, ns) = (b.len() as f64, s.len() as f64);
    let mut points = Vec::with_capacity(all.len() + 1);
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        frr: 0.0,
        far: 1.0,
    });
    for w in all.windows(2) {
        let theta = w[0] / 2.0 + w[1] / 2.0;
        let below_b = b.partition_point(|&x| x < theta);
        let below_s = s.partition_point(|&x| x < theta);
        points.push(RocPoint {
            threshold: theta,
            frr: below_b as f64 / nb,
            far: (s.len() - below_s) as f64 / ns,
        });
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        frr: 1.0,
        far: 0.0,
    });
    Ok(points)
}

/// First crossing of FRR over FAR along the threshold sweep, linearly
/// interpolated between the two bracketing points.
pub fn eer_from_roc(points: &[RocPoint]) -> Eer {
    let i = points
        .iter()
        .position(|p| p.frr >= p.far)
        .expect("the +inf point always has frr >= far");
    let cur = points[i];
    if cur.frr == cur.far || i == 0 {
        return Eer {
            eer: cur.frr,
            threshold: cur.threshold,
        };
    }
    let prev = points[i - 1];
    let gap_prev = prev.far - prev.frr;
    let gap_cur = cur.frr - cur.far;
    let t = gap_prev / (gap_prev + gap_cur);
    let eer = prev.frr + t * (cur.frr - prev.frr);
    let threshold = match (prev.threshold.is_finite(), cur.threshold.is_finite()) {
        (true, true) => prev.threshold + t * (cur.threshold - prev.threshold),
        (true, false) => prev.threshold,
        _ => cur.threshold,
    };
    Eer { eer, threshold }
}

/// Equal error rate of bonafide vs spoof scores (higher = more bonafide).
pub fn compute_eer(bona: &[f64], spoof: &[f64]) -> Result<Eer> {
    Ok(eer_from_roc(&roc_points(bona, spoof)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEer {
    pub attack_id: String,
    pub n_spoof: usize,
    pub eer: f64,
}

/// EER of each attack against all bonafide trials, plus the pooled EER.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub n_bonafide: usize,
    pub attacks: Vec<AttackEer>,
    pub pooled: f64,
}

impl AttackReport {
    /// Plain-text table with EERs in percent.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>8}\n", "attack", "n_spoof", "EER(%)");
        for a in &self.attacks {
            writeln!(out, "{:<10} {:>8} {:>8.2}", a.attack_id, a.n_spoof, 100.0 * a.eer).expect("string write");
        }
        let n: usize = self.attacks.iter().map(|a| a.n_spoof).sum();
        writeln!(out, "{:<10} {:>8} {:>8.2}", "pooled", n, 100.0 * self.pooled).expect("string write");
        out
    }

    /// Tab-separated `attack n_spoof eer` with unrounded fractions.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("attack\tn_spoof\teer\n");
        for a in &self.attacks {
            writeln!(out, "{}\t{}\t{}", a.attack_id, a.n_spoof, a.eer).expect("string write");
        }
        let n: usize = self.attacks.iter().map(|a| a.n_spoof).sum();
        writeln!(out, "pooled\t{n}\t{}", self.pooled).expect("string write");
        out
    }
}

/// Tab-separated `threshold frr far` rows.
pub fn roc_to_tsv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold\tfrr\tfar\n");
    for p in points {
        writeln!(out, "{}\t{}\t{}", p.threshold, p.frr, p.far).expect("string write");
    }
    out
}

pub fn per_attack_report(sf: &ScoreFile) -> Result<AttackReport> {
    let (bona, spoof) = sf.split();
    if bona.is_empty() {
        return Err(Error::Validation("score file has no bonafide rows".into()));
    }
    let mut by_attack: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in sf.rows.iter().filter(|r| r.label == Label::Spoof) {
        by_attack.entry(&r.attack_id).or_default().push(r.score);
    }
    let attacks = by_attack
        .into_iter()
        .map(|(id, scores)| {
            Ok(AttackEer {
                attack_id: id.to_string(),
                n_spoof: scores.len(),
                eer: compute_eer(&bona, &scores)?.eer,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackReport {
        n_bonafide: bona.len(),
        attacks,
        pooled: compute_eer(&bona, &spoof)?.eer,
    })
}
