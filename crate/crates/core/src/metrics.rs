//! Scores for binary paraphrase-style classification, plus the gate
//! histogram.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::data::Encoded;
use crate::embeddings::{partition_tags, PairLexicon, PartitionTags};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2PR/(P+R)`, computed as `2TP/(2TP+FP+FN)` so there is a single
    /// rounding; 0 when there are no positives at all.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }
}

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Invalid(format!("{what}: {a} predictions vs {b} gold labels")));
    }
    Ok(())
}

pub fn confusion(preds: &[usize], golds: &[usize]) -> Result<Confusion> {
    check_lengths("confusion", preds.len(), golds.len())?;
    let mut c = Confusion::default();
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::Invalid(format!("labels must be 0 or 1, got pred {p} gold {g}"))),
        }
    }
    Ok(c)
}

/// F1 of the positive class (label 1).
pub fn f1_binary(preds: &[usize], golds: &[usize]) -> Result<f64> {
    Ok(confusion(preds, golds)?.f1())
}

/// Jaccard similarity of the two token sets; two empty sentences count as
/// identical.
pub fn lexical_overlap<S: AsRef<str>>(first: &[S], second: &[S]) -> f64 {
    let a: HashSet<&str> = first.iter().map(AsRef::as_ref).collect();
    let b: HashSet<&str> = second.iter().map(AsRef::as_ref).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Instances whose label goes against what their overlap suggests:
/// positives below the median overlap and negatives at or above it.
pub fn non_obvious_mask(golds: &[usize], overlaps: &[f64]) -> Result<Vec<bool>> {
    check_lengths("non_obvious_mask", overlaps.len(), golds.len())?;
    if golds.is_empty() {
        return Ok(Vec::new());
    }
    let m = median(overlaps);
    Ok(golds
        .iter()
        .zip(overlaps)
        .map(|(&g, &o)| (g == 1 && o < m) || (g == 0 && o >= m))
        .collect())
}

/// F1 over the non-obvious subset, `None` when that subset is empty.
pub fn non_obvious_f1(preds: &[usize], golds: &[usize], overlaps: &[f64]) -> Result<Option<f64>> {
    check_lengths("non_obvious_f1", preds.len(), golds.len())?;
    let mask = non_obvious_mask(golds, overlaps)?;
    let (p, g): (Vec<usize>, Vec<usize>) = preds
        .iter()
        .zip(golds)
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|((&p, &g), _)| (p, g))
        .unzip();
    if p.is_empty() {
        return Ok(None);
    }
    f1_binary(&p, &g).map(Some)
}

/// True when every prediction is the same class (vacuously for none).
pub fn detect_failed_run(preds: &[usize]) -> bool {
    preds.windows(2).all(|w| w[0] == w[1])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionScore {
    pub count: usize,
    pub fraction: f64,
    /// `None` for an empty partition.
    pub f1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Partitions {
    pub synonym: PartitionScore,
    pub antonym: PartitionScore,
    pub neither: PartitionScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub f1: f64,
    pub non_obvious_f1: Option<f64>,
    pub non_obvious_count: usize,
    pub accuracy: f64,
    pub failed_run: bool,
    pub confusion: Confusion,
    pub partitions: Option<Partitions>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let c = &self.confusion;
        let mut s = String::new();
        let _ = writeln!(s, "examples={}", c.total());
        let _ = writeln!(s, "f1={:.6}", self.f1);
        let _ = writeln!(s, "non_obvious_f1={}", fmt_opt(self.non_obvious_f1));
        let _ = writeln!(s, "non_obvious_count={}", self.non_obvious_count);
        let _ = writeln!(s, "accuracy={:.6}", self.accuracy);
        let _ = writeln!(s, "failed_run={}", self.failed_run);
        if c.total() == 0 {
            let _ = writeln!(s, "note=empty evaluation set, failed_run is vacuous");
        }
        let _ = writeln!(s, "tp={}\nfp={}\ntn={}\nfn={}", c.tp, c.fp, c.tn, c.fn_);
        if let Some(p) = &self.partitions {
            for (name, ps) in [("synonym", p.synonym), ("antonym", p.antonym), ("neither", p.neither)] {
                let _ = writeln!(s, "partition.{name}.count={}", ps.count);
                let _ = writeln!(s, "partition.{name}.fraction={:.6}", ps.fraction);
                let _ = writeln!(s, "partition.{name}.f1={}", fmt_opt(ps.f1));
            }
        }
        s
    }
}

/// Scores predictions; `tags` adds the synonym/antonym/neither breakdown.
pub fn score(preds: &[usize], golds: &[usize], overlaps: &[f64], tags: Option<&[PartitionTags]>) -> Result<EvalReport> {
    let c = confusion(preds, golds)?;
    let mask = non_obvious_mask(golds, overlaps)?;
    let partitions = match tags {
        None => None,
        Some(tags) => {
            check_lengths("partition tags", tags.len(), golds.len())?;
            let part = |keep: &dyn Fn(&PartitionTags) -> bool| -> Result<PartitionScore> {
                let (p, g): (Vec<usize>, Vec<usize>) = tags
                    .iter()
                    .zip(preds.iter().zip(golds))
                    .filter(|(t, _)| keep(t))
                    .map(|(_, (&p, &g))| (p, g))
                    .unzip();
                Ok(PartitionScore {
                    count: p.len(),
                    fraction: if golds.is_empty() {
                        0.0
                    } else {
                        p.len() as f64 / golds.len() as f64
                    },
                    f1: if p.is_empty() { None } else { Some(f1_binary(&p, &g)?) },
                })
            };
            Some(Partitions {
                synonym: part(&|t| t.has_synonym)?,
                antonym: part(&|t| t.has_antonym)?,
                neither: part(&|t| t.neither())?,
            })
        }
    };
    Ok(EvalReport {
        f1: c.f1(),
        non_obvious_f1: non_obvious_f1(preds, golds, overlaps)?,
        non_obvious_count: mask.iter().filter(|&&m| m).count(),
        accuracy: c.accuracy(),
        failed_run: detect_failed_run(preds),
        confusion: c,
        partitions,
    })
}

/// Arg-max class of every example.
pub fn predict(model: &Model, data: &[Encoded]) -> Result<Vec<usize>> {
    data.iter()
        .map(|e| {
            let p = model.predict_proba(&e.seq, e.injection.as_ref())?;
            Ok(p.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, &v)| if v > best.1 { (k, v) } else { best },
                )
                .0)
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &[Encoded], lexicon: Option<&PairLexicon>) -> Result<EvalReport> {
    let preds = predict(model, data)?;
    let golds: Vec<usize> = data.iter().map(|e| e.label).collect();
    let overlaps: Vec<f64> = data
        .iter()
        .map(|e| lexical_overlap(&e.first_tokens, &e.second_tokens))
        .collect();
    let tags: Option<Vec<PartitionTags>> = lexicon.map(|lex| {
        data.iter()
            .map(|e| partition_tags(&e.first_tokens, &e.second_tokens, lex))
            .collect()
    });
    score(&preds, &golds, &overlaps, tags.as_deref())
}

/// Mean over the runs where a value was defined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanOf {
    pub mean: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

impl MeanOf {
    /// Running mean, so k copies of one value reproduce it exactly.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut m = MeanOf {
            mean: None,
            defined: 0,
            undefined: 0,
        };
        for v in values {
            match v {
                None => m.undefined += 1,
                Some(x) => {
                    m.defined += 1;
                    let cur = m.mean.unwrap_or(0.0);
                    m.mean = Some(cur + (x - cur) / m.defined as f64);
                }
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AveragedPartitions {
    pub synonym: MeanOf,
    pub antonym: MeanOf,
    pub neither: MeanOf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AveragedReport {
    pub runs: usize,
    pub f1: f64,
    pub non_obvious_f1: MeanOf,
    pub accuracy: f64,
    pub failed_runs: usize,
    pub partitions: Option<AveragedPartitions>,
}

impl AveragedReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "runs={}", self.runs);
        let _ = writeln!(s, "f1={:.6}", self.f1);
        let _ = writeln!(s, "non_obvious_f1={}", fmt_opt(self.non_obvious_f1.mean));
        let _ = writeln!(s, "non_obvious_f1.undefined_runs={}", self.non_obvious_f1.undefined);
        let _ = writeln!(s, "accuracy={:.6}", self.accuracy);
        let _ = writeln!(s, "failed_runs={}", self.failed_runs);
        if let Some(p) = &self.partitions {
            for (name, m) in [("synonym", p.synonym), ("antonym", p.antonym), ("neither", p.neither)] {
                let _ = writeln!(s, "partition.{name}.f1={}", fmt_opt(m.mean));
                let _ = writeln!(s, "partition.{name}.undefined_runs={}", m.undefined);
            }
        }
        s
    }
}

/// Per-metric means across seeds; undefined values are skipped and
/// counted. Partitions are averaged only if every run has them.
pub fn seed_average(reports: &[EvalReport]) -> Result<AveragedReport> {
    if reports.is_empty() {
        return Err(Error::Invalid("seed_average needs at least one report".into()));
    }
    let mean = |f: &dyn Fn(&EvalReport) -> f64| MeanOf::of(reports.iter().map(|r| Some(f(r)))).mean.unwrap();
    let partitions = if reports.iter().all(|r| r.partitions.is_some()) {
        let parts: Vec<&Partitions> = reports.iter().filter_map(|r| r.partitions.as_ref()).collect();
        Some(AveragedPartitions {
            synonym: MeanOf::of(parts.iter().map(|p| p.synonym.f1)),
            antonym: MeanOf::of(parts.iter().map(|p| p.antonym.f1)),
            neither: MeanOf::of(parts.iter().map(|p| p.neither.f1)),
        })
    } else {
        None
    };
    Ok(AveragedReport {
        runs: reports.len(),
        f1: mean(&|r| r.f1),
        non_obvious_f1: MeanOf::of(reports.iter().map(|r| r.non_obvious_f1)),
        accuracy: mean(&|r| r.accuracy),
        failed_runs: reports.iter().filter(|r| r.failed_run).count(),
        partitions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`, the last one closed. A constant
/// input is centred in a unit-wide range.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("histogram needs finite, non-empty input".into()));
    }
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            left: lo + b as f64 * width,
            right: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in values {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        out[b].count += 1;
    }
    Ok(out)
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("bin_left,bin_right,count\n");
    for b in bins {
        let _ = writeln!(s, "{},{},{}", b.left, b.right, b.count);
    }
    s
}

pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GateSnapshot {
    pub gate: Vec<f64>,
    pub zero_threshold: f64,
    /// Dimensions with `|g_d| < zero_threshold`.
    pub near_zero: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub histogram: Vec<HistogramBin>,
}

impl GateSnapshot {
    pub fn summary(&self) -> String {
        format!(
            "dims={}\nzero_threshold={}\nnear_zero={}\nmin={:.6}\nmax={:.6}\nmean={:.6}\n",
            self.gate.len(),
            self.zero_threshold,
            self.near_zero,
            self.min,
            self.max,
            self.mean
        )
    }
}

pub fn export_gate_snapshot(model: &Model, bins: usize, zero_threshold: f64) -> Result<GateSnapshot> {
    let gate = model
        .gate()
        .ok_or_else(|| {
            Error::Invalid(format!(
                "gate analysis needs a gated model, this one uses mode {}",
                model.config.injection_mode
            ))
        })?
        .data()
        .to_vec();
    gate_snapshot(gate, bins, zero_threshold)
}

pub fn gate_snapshot(gate: Vec<f64>, bins: usize, zero_threshold: f64) -> Result<GateSnapshot> {
    let histogram = histogram(&gate, bins)?;
    Ok(GateSnapshot {
        near_zero: gate.iter().filter(|g| g.abs() < zero_threshold).count(),
        min: gate.iter().copied().fold(f64::INFINITY, f64::min),
        max: gate.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: gate.iter().sum::<f64>() / gate.len() as f64,
        zero_threshold,
        histogram,
        gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_closed_forms() {
        assert_eq!(f1_binary(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(f1_binary(&[0, 0, 0], &[1, 0, 1]).unwrap(), 0.0);
        // TP=2, FP=1, FN=1.
        let f = f1_binary(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert!(f1_binary(&[1], &[1, 0]).is_err());
        assert!(f1_binary(&[2], &[1]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(lexical_overlap(&["a", "b"], &["b", "a"]), 1.0);
        assert_eq!(lexical_overlap(&["a"], &["b"]), 0.0);
        assert_eq!(lexical_overlap(&["a", "b", "c"], &["b", "c", "d"]), 0.5);
    }

    #[test]
    fn non_obvious_subset() {
        // Median of overlaps is 0.5.
        let golds = [1, 1, 1, 0, 0, 0];
        let overlaps = [0.9, 0.2, 0.5, 0.1, 0.5, 0.8];
        let preds = [1, 1, 0, 1, 1, 0];
        assert_eq!(
            non_obvious_mask(&golds, &overlaps).unwrap(),
            [false, true, false, false, true, true]
        );
        // Subset (pred, gold): (1,1), (1,0), (0,0) → P=1/2, R=1.
        let f = non_obvious_f1(&preds, &golds, &overlaps).unwrap().unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        let equal = [0.3; 6];
        let mask = non_obvious_mask(&golds, &equal).unwrap();
        assert_eq!(mask, [false, false, false, true, true, true]);
    }

    #[test]
    fn all_obvious_is_undefined() {
        let golds = [1, 0];
        let overlaps = [0.9, 0.1];
        assert_eq!(non_obvious_f1(&[1, 0], &golds, &overlaps).unwrap(), None);
    }

    #[test]
    fn failed_runs() {
        assert!(detect_failed_run(&[0, 0, 0, 0]));
        assert!(!detect_failed_run(&[0, 1, 0]));
        assert!(detect_failed_run(&[]));
    }

    fn report(f1: f64, non_obvious: Option<f64>) -> EvalReport {
        EvalReport {
            f1,
            non_obvious_f1: non_obvious,
            non_obvious_count: 0,
            accuracy: f1,
            failed_run: false,
            confusion: Confusion::default(),
            partitions: None,
        }
    }

    #[test]
    fn averaging() {
        let avg = seed_average(&[report(0.70, Some(0.4)), report(0.80, None)]).unwrap();
        assert_eq!(avg.f1, 0.75);
        assert_eq!(avg.non_obvious_f1.mean, Some(0.4));
        assert_eq!(avg.non_obvious_f1.undefined, 1);
        let r = report(0.1, Some(0.7));
        let avg = seed_average(&vec![r.clone(); 7]).unwrap();
        assert_eq!(avg.f1, 0.1);
        assert_eq!(avg.non_obvious_f1.mean, Some(0.7));
        assert!(seed_average(&[]).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[-1.0, 0.0, 1.0], 3).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), [1, 1, 1]);
        let h = histogram(&[0.0; 8], 5).unwrap();
        assert_eq!(h.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 8);
        let h = histogram(&[0.3, -2.0, 7.0], 1).unwrap();
        assert_eq!(h[0].count, 3);
        assert!(histogram(&[1.0], 0).is_err());
    }

    #[test]
    fn zero_gate_snapshot() {
        let s = gate_snapshot(vec![0.0; 16], 10, DEFAULT_ZERO_THRESHOLD).unwrap();
        assert_eq!(s.near_zero, 16);
        let zero_bin = s.histogram.iter().find(|b| b.left <= 0.0 && 0.0 < b.right).unwrap();
        assert_eq!(zero_bin.count, 16);
    }
}
