use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;

use super::labels::{LabelKind, ReadabilityLabels};
use super::model::ClassifierModel;

pub const DECISION_THRESHOLD: f64 = 0.5;
pub const CURVE_THRESHOLDS: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], truth: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &t) in scores.iter().zip(truth) {
            match (s >= threshold, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn ratio(num: usize, den: usize, empty: f64) -> f64 {
        if den == 0 {
            empty
        } else {
            num as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.total(), 0.0)
    }

    /// 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp, 0.0)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_, 0.0)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn tpr(&self) -> f64 {
        self.recall()
    }

    pub fn fpr(&self) -> f64 {
        Self::ratio(self.fp, self.fp + self.tn, 0.0)
    }
}

/// One point of a ROC (`x` = FPR, `y` = TPR) or PR (`x` = recall,
/// `y` = precision) curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub label: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// `None` when the test labels hold a single class
    pub auc: Option<f64>,
    pub warning: Option<String>,
    #[serde(skip)]
    pub roc: Vec<CurvePoint>,
    #[serde(skip)]
    pub pr: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadabilityReport {
    pub n_samples: usize,
    pub labels: Vec<LabelReport>,
}

/// Area under the ROC curve by the trapezoid rule over the exact score
/// thresholds; ties contribute half, so this equals the fraction of
/// (positive, negative) pairs ranked correctly. `None` for a single class.
pub fn auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        // consume a whole group of tied scores at once
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Some(area / (pos * neg) as f64)
}

fn curve_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = (0..CURVE_THRESHOLDS)
        .map(|i| i as f64 / (CURVE_THRESHOLDS - 1) as f64)
        .chain(scores.iter().copied())
        .collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

impl LabelReport {
    pub fn from_scores(kind: LabelKind, scores: &[f64], truth: &[bool]) -> Self {
        let confusion = Confusion::at(scores, truth, DECISION_THRESHOLD);
        let auc = auc(scores, truth);
        let warning = auc.is_none().then(|| {
            let msg = format!("label {} has a single class in the test set; AUC undefined", kind.name());
            log::warn!("{msg}");
            msg
        });
        let mut roc = Vec::new();
        let mut pr = Vec::new();
        for t in curve_thresholds(scores) {
            let c = Confusion::at(scores, truth, t);
            roc.push(CurvePoint {
                threshold: t,
                x: c.fpr(),
                y: c.tpr(),
            });
            pr.push(CurvePoint {
                threshold: t,
                x: c.recall(),
                y: if c.tp + c.fp == 0 { 1.0 } else { c.precision() },
            });
        }
        LabelReport {
            label: kind.name().to_string(),
            accuracy: confusion.accuracy(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            f1: confusion.f1(),
            confusion,
            auc,
            warning,
            roc,
            pr,
        }
    }
}

impl ReadabilityReport {
    /// `scores[i]` holds the four probabilities of sample `i`.
    pub fn from_scores(scores: &[[f64; 4]], truth: &[ReadabilityLabels]) -> Result<Self> {
        if scores.is_empty() || scores.len() != truth.len() {
            return Err(invalid("need one score row per test label, and at least one"));
        }
        let labels = LabelKind::ALL
            .iter()
            .map(|&k| {
                let s: Vec<f64> = scores.iter().map(|r| r[k.index()]).collect();
                let t: Vec<bool> = truth.iter().map(|l| l.get(k)).collect();
                LabelReport::from_scores(k, &s, &t)
            })
            .collect();
        Ok(ReadabilityReport {
            n_samples: scores.len(),
            labels,
        })
    }

    pub fn label(&self, kind: LabelKind) -> &LabelReport {
        &self.labels[kind.index()]
    }

    /// Writes `readability_report.json`, `roc_<label>.csv` and `pr_<label>.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("readability_report.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        for l in &self.labels {
            for (name, header, points) in [("roc", "threshold,fpr,tpr", &l.roc), ("pr", "threshold,recall,precision", &l.pr)] {
                let path = dir.join(format!("{name}_{}.csv", l.label));
                let mut out = Vec::new();
                writeln!(out, "{header}").expect("write to memory");
                for p in points.iter() {
                    writeln!(out, "{:.6},{:.6},{:.6}", p.threshold, p.x, p.y).expect("write to memory");
                }
                fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

pub fn evaluate_readability(
    model: &ClassifierModel,
    images: &[&ImageTensor],
    truth: &[ReadabilityLabels],
) -> Result<ReadabilityReport> {
    if images.is_empty() {
        return Err(invalid("test set is empty"));
    }
    let probs = model.predict(images)?;
    let scores: Vec<[f64; 4]> = probs
        .rows()
        .into_iter()
        .map(|r| [r[0], r[1], r[2], r[3]])
        .collect();
    ReadabilityReport::from_scores(&scores, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scores: &[f64], truth: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &ti) in truth.iter().enumerate() {
            for (j, &tj) in truth.iter().enumerate() {
                if ti && !tj {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let scores = [0.9, 0.8, 0.8, 0.6, 0.55, 0.4, 0.3, 0.3];
        let truth = [true, false, true, true, false, true, false, false];
        let a = auc(&scores, &truth).unwrap();
        assert!((a - pairwise_auc(&scores, &truth)).abs() < 1e-9);
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        assert_eq!(auc(&cubed, &truth).unwrap(), a);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let s: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let mut t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            t[0] = true;
            t[1] = false;
            assert!((auc(&s, &t).unwrap() - pairwise_auc(&s, &t)).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_and_chance_predictors() {
        let truth = [true, false, true, false];
        let r = LabelReport::from_scores(LabelKind::Valid, &[0.9, 0.1, 0.8, 0.2], &truth);
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1, r.auc), (1.0, 1.0, 1.0, 1.0, Some(1.0)));
        let r = LabelReport::from_scores(LabelKind::Valid, &[0.5; 4], &truth);
        assert_eq!(r.auc, Some(0.5));
        let single = LabelReport::from_scores(LabelKind::Retina, &[0.3, 0.7], &[true, true]);
        assert!(single.auc.is_none() && single.warning.is_some());
    }

    #[test]
    fn confusion_sums_to_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..37).map(|_| rng.random()).collect();
        let truth: Vec<bool> = (0..37).map(|_| rng.random_bool(0.3)).collect();
        let r = LabelReport::from_scores(LabelKind::Macula, &scores, &truth);
        assert_eq!(r.confusion.total(), 37);
        assert!(r.roc.len() >= CURVE_THRESHOLDS);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let scores = [[0.9, 0.2, 0.6, 0.4], [0.1, 0.7, 0.3, 0.8]];
        let truth = [
            ReadabilityLabels::from_bits([true, false, true, true]),
            ReadabilityLabels::from_bits([false, true, true, false]),
        ];
        let r = ReadabilityReport::from_scores(&scores, &truth).unwrap();
        r.write(dir.path()).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("readability_report.json")).unwrap()).unwrap();
        assert!(json["labels"][2]["auc"].is_null());
        assert_eq!(json["labels"][0]["auc"], 1.0);
        for l in ["valid", "macula", "optic_disc", "retina"] {
            let roc = fs::read_to_string(dir.path().join(format!("roc_{l}.csv"))).unwrap();
            assert!(roc.starts_with("threshold,fpr,tpr\n"));
            assert!(dir.path().join(format!("pr_{l}.csv")).exists());
        }
    }
}
