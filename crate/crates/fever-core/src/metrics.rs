//! Strict evidence recall@5, macro evidence precision, F1, label accuracy,
//! the evidence-conditioned claim score, and threshold sweep curves.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::Claim;
use crate::sentretrieval::select_top;
use crate::verification::Verdict;

pub const EVIDENCE_CAP: usize = 5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("claim id mismatch: {kind} id {id}")]
    IdMismatch { id: i64, kind: &'static str },
    #[error("gold claim {0} has no label; cannot score blind input")]
    UnlabeledGold(i64),
    #[error("predictions file error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A final pipeline prediction: verdict plus up to five evidence coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalPrediction {
    pub id: i64,
    pub label: Verdict,
    pub evidence: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at5: f64,
    pub precision: f64,
    pub f1: f64,
    pub label_accuracy: f64,
    pub fever_score: f64,
    pub verifiable_claims: usize,
    pub total_claims: usize,
    /// confusion[gold][predicted], classes ordered SUPPORTED, REFUTED, NEI
    pub confusion: [[usize; 3]; 3],
    /// Set when no verifiable claim carried any predicted evidence.
    pub precision_undefined: bool,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn zeroed(total_claims: usize, warning: Option<String>) -> EvalReport {
        EvalReport {
            recall_at5: 0.0,
            precision: 0.0,
            f1: 0.0,
            label_accuracy: 0.0,
            fever_score: 0.0,
            verifiable_claims: 0,
            total_claims,
            confusion: [[0; 3]; 3],
            precision_undefined: true,
            warnings: warning.into_iter().collect(),
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        writeln!(f, "claims scored      {}", self.total_claims)?;
        writeln!(f, "verifiable claims  {}", self.verifiable_claims)?;
        writeln!(f, "recall@5 (%)       {}", pct(self.recall_at5))?;
        writeln!(f, "precision (%)      {}", pct(self.precision))?;
        writeln!(f, "f1 (%)             {}", pct(self.f1))?;
        writeln!(f, "label accuracy (%) {}", pct(self.label_accuracy))?;
        writeln!(f, "fever score (%)    {}", pct(self.fever_score))?;
        writeln!(f, "confusion (gold x predicted, S/R/N):")?;
        for (gi, row) in self.confusion.iter().enumerate() {
            let name = Verdict::ALL[gi].as_fever_str();
            writeln!(f, "  {name:<15} {:>6} {:>6} {:>6}", row[0], row[1], row[2])?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

fn check_alignment<'a, I>(gold: &[Claim], pred_ids: I) -> Result<(), MetricsError>
where
    I: Iterator<Item = &'a i64>,
{
    let gold_ids: HashSet<i64> = gold.iter().map(|c| c.claim_id).collect();
    let mut seen = HashSet::new();
    for &id in pred_ids {
        if !gold_ids.contains(&id) {
            return Err(MetricsError::IdMismatch { id, kind: "unexpected" });
        }
        if !seen.insert(id) {
            return Err(MetricsError::IdMismatch { id, kind: "duplicate" });
        }
    }
    for claim in gold {
        if !seen.contains(&claim.claim_id) {
            return Err(MetricsError::IdMismatch {
                id: claim.claim_id,
                kind: "missing",
            });
        }
    }
    Ok(())
}

fn capped_set(evidence: &[(String, usize)]) -> HashSet<(String, usize)> {
    evidence.iter().take(EVIDENCE_CAP).cloned().collect()
}

fn covers_some_group(claim: &Claim, predicted: &HashSet<(String, usize)>) -> bool {
    claim
        .evidence_groups
        .iter()
        .any(|g| !g.is_empty() && g.iter().all(|coord| predicted.contains(coord)))
}

/// Strict recall@5 over verifiable claims: a claim counts iff some complete
/// gold group is a subset of its (capped) predicted evidence.
pub fn strict_recall_at5(
    gold: &[Claim],
    evidence_by_id: &HashMap<i64, Vec<(String, usize)>>,
) -> Result<f64, MetricsError> {
    check_alignment(gold, evidence_by_id.keys())?;
    let mut verifiable = 0usize;
    let mut hits = 0usize;
    for claim in gold {
        if !claim.label.is_verifiable() {
            continue;
        }
        verifiable += 1;
        let predicted = capped_set(&evidence_by_id[&claim.claim_id]);
        if covers_some_group(claim, &predicted) {
            hits += 1;
        }
    }
    if verifiable == 0 {
        return Ok(0.0);
    }
    Ok(hits as f64 / verifiable as f64)
}

/// Macro-averaged precision over verifiable claims with at least one
/// predicted sentence; membership in any gold group counts as correct.
/// The flag is false when no claim qualified for the average.
pub fn evidence_precision(
    gold: &[Claim],
    evidence_by_id: &HashMap<i64, Vec<(String, usize)>>,
) -> Result<(f64, bool), MetricsError> {
    check_alignment(gold, evidence_by_id.keys())?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for claim in gold {
        if !claim.label.is_verifiable() {
            continue;
        }
        let predicted: Vec<(String, usize)> = evidence_by_id[&claim.claim_id]
            .iter()
            .take(EVIDENCE_CAP)
            .cloned()
            .collect();
        if predicted.is_empty() {
            continue;
        }
        let gold_union: HashSet<&(String, usize)> =
            claim.evidence_groups.iter().flatten().collect();
        let correct = predicted.iter().filter(|c| gold_union.contains(c)).count();
        total += correct as f64 / predicted.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        Ok((0.0, false))
    } else {
        Ok((total / counted as f64, true))
    }
}

/// Score final predictions: the claim score requires the right label and,
/// for verifiable claims, a complete gold group inside the capped evidence;
/// label accuracy ignores the evidence condition.
pub fn fever_score(gold: &[Claim], predictions: &[FinalPrediction]) -> Result<EvalReport, MetricsError> {
    if predictions.is_empty() {
        return Ok(EvalReport::zeroed(
            gold.len(),
            Some("empty predictions; reporting zeros".to_string()),
        ));
    }
    check_alignment(gold, predictions.iter().map(|p| &p.id))?;

    let mut warnings = Vec::new();
    let mut by_id: HashMap<i64, &FinalPrediction> = HashMap::new();
    for pred in predictions {
        if pred.evidence.len() > EVIDENCE_CAP {
            warnings.push(format!(
                "claim {}: {} predicted evidence entries, truncated to {EVIDENCE_CAP}",
                pred.id,
                pred.evidence.len()
            ));
        }
        by_id.insert(pred.id, pred);
    }

    let mut evidence_by_id: HashMap<i64, Vec<(String, usize)>> = HashMap::new();
    for pred in predictions {
        evidence_by_id.insert(
            pred.id,
            pred.evidence.iter().take(EVIDENCE_CAP).cloned().collect(),
        );
    }

    let mut label_hits = 0usize;
    let mut fever_hits = 0usize;
    let mut verifiable = 0usize;
    let mut confusion = [[0usize; 3]; 3];
    for claim in gold {
        let gold_verdict = Verdict::from_claim_label(claim.label)
            .ok_or(MetricsError::UnlabeledGold(claim.claim_id))?;
        let pred = by_id[&claim.claim_id];
        confusion[gold_verdict.class_index()][pred.label.class_index()] += 1;
        let label_ok = pred.label == gold_verdict;
        if label_ok {
            label_hits += 1;
        }
        if claim.label.is_verifiable() {
            verifiable += 1;
        }
        let evidence_ok = !claim.label.is_verifiable()
            || covers_some_group(claim, &capped_set(&pred.evidence));
        if label_ok && evidence_ok {
            fever_hits += 1;
        }
    }

    let (precision, precision_defined) = evidence_precision(gold, &evidence_by_id)?;
    let recall_at5 = strict_recall_at5(gold, &evidence_by_id)?;
    let f1 = if precision + recall_at5 > 0.0 {
        2.0 * precision * recall_at5 / (precision + recall_at5)
    } else {
        0.0
    };
    let total = gold.len();
    Ok(EvalReport {
        recall_at5,
        precision,
        f1,
        label_accuracy: if total == 0 { 0.0 } else { label_hits as f64 / total as f64 },
        fever_score: if total == 0 { 0.0 } else { fever_hits as f64 / total as f64 },
        verifiable_claims: verifiable,
        total_claims: total,
        confusion,
        precision_undefined: !precision_defined,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    /// False when every claim was filtered empty and precision fell back to 0.
    pub precision_defined: bool,
}

/// Re-apply each threshold to the stored scored candidates (same filter and
/// top-5 semantics as ranking) and recompute precision and recall.
pub fn pr_curve(
    gold: &[Claim],
    scored: &BTreeMap<i64, Vec<(String, usize, f64)>>,
    thresholds: &[f64],
) -> Result<Vec<PrPoint>, MetricsError> {
    let mut points = Vec::with_capacity(thresholds.len());
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &threshold in &sorted {
        let mut evidence_by_id = HashMap::new();
        for claim in gold {
            let items = scored.get(&claim.claim_id).cloned().unwrap_or_default();
            let top = select_top(&items, Some(threshold), EVIDENCE_CAP);
            evidence_by_id.insert(
                claim.claim_id,
                top.into_iter().map(|(p, i, _)| (p, i)).collect::<Vec<_>>(),
            );
        }
        let recall = strict_recall_at5(gold, &evidence_by_id)?;
        let (precision, defined) = evidence_precision(gold, &evidence_by_id)?;
        points.push(PrPoint {
            threshold,
            precision,
            recall,
            precision_defined: defined,
        });
    }
    Ok(points)
}

pub fn write_pr_csv<W: Write>(points: &[PrPoint], mut w: W) -> Result<(), MetricsError> {
    writeln!(w, "threshold,precision,recall")?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    Ok(())
}

/// Write `{"id", "predicted_label", "predicted_evidence"}` lines.
pub fn write_final_predictions<W: Write>(
    predictions: &[FinalPrediction],
    mut w: W,
) -> Result<(), MetricsError> {
    for pred in predictions {
        let obj = serde_json::json!({
            "id": pred.id,
            "predicted_label": pred.label.as_fever_str(),
            "predicted_evidence": pred.evidence,
        });
        writeln!(w, "{obj}")?;
    }
    Ok(())
}

pub fn read_final_predictions(path: &Path) -> Result<Vec<FinalPrediction>, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| MetricsError::Format {
            line: lineno + 1,
            msg,
        };
        let v: Value = serde_json::from_str(&line).map_err(|e| err(format!("bad json: {e}")))?;
        let id = v
            .get("id")
            .and_then(Value::as_i64)
            .ok_or_else(|| err("missing id".into()))?;
        let label_str = v
            .get("predicted_label")
            .and_then(Value::as_str)
            .ok_or_else(|| err("missing predicted_label".into()))?;
        let label = Verdict::from_fever_str(label_str)
            .ok_or_else(|| err(format!("unknown label {label_str:?}")))?;
        let mut evidence = Vec::new();
        if let Some(entries) = v.get("predicted_evidence").and_then(Value::as_array) {
            for entry in entries {
                let pair = entry
                    .as_array()
                    .filter(|a| a.len() == 2)
                    .ok_or_else(|| err("evidence entry not a pair".into()))?;
                evidence.push((
                    pair[0]
                        .as_str()
                        .ok_or_else(|| err("page not a string".into()))?
                        .to_string(),
                    pair[1]
                        .as_u64()
                        .ok_or_else(|| err("index not an integer".into()))?
                        as usize,
                ));
            }
        }
        out.push(FinalPrediction { id, label, evidence });
    }
    Ok(out)
}
