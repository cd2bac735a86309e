//! Hypothesis-test certainty decisions, PAvPU, predictive log-likelihood
//! and ensemble pooling.

mod stats;

pub use stats::{
    incomplete_beta, independent_t_test, ln_gamma, paired_t_test, t_cdf, t_two_sided_p, TestResult,
};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::PredictiveSampleSet;

/// Thresholds reported by default.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.01, 0.05, 0.1];

/// Predictive probabilities entering a logarithm are clamped here.
pub const LL_CLAMP: f64 = 1e-7;

/// Which two-sample test compares the top two classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    /// Softmax outputs: class probabilities within a sample are dependent.
    #[default]
    Paired,
    /// Independent sigmoid outputs.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyVerdict {
    pub top: usize,
    pub runner_up: usize,
    pub t_stat: f64,
    pub df: f64,
    pub p_value: f64,
    pub degenerate: bool,
    pub thresholds: Vec<f64>,
    /// `certain[i]` iff `p_value < thresholds[i]`.
    pub certain: Vec<bool>,
}

impl UncertaintyVerdict {
    pub fn is_certain(&self, threshold: f64) -> bool {
        self.p_value < threshold
    }
}

/// Indices of the two largest means; ties go to the lower index.
pub fn top_two(means: &[f64]) -> Result<(usize, usize)> {
    if means.len() < 2 {
        return Err(Error::usage("need at least two classes"));
    }
    let mut idx: Vec<usize> = (0..means.len()).collect();
    idx.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    Ok((idx[0], idx[1]))
}

pub fn certainty_verdict(set: &PredictiveSampleSet, thresholds: &[f64]) -> Result<UncertaintyVerdict> {
    certainty_verdict_with(set, thresholds, TestKind::Paired)
}

/// Tests whether the top two classes' probability columns differ.
pub fn certainty_verdict_with(
    set: &PredictiveSampleSet,
    thresholds: &[f64],
    kind: TestKind,
) -> Result<UncertaintyVerdict> {
    if set.len() < 2 {
        return Err(Error::usage("certainty test needs at least two predictive samples"));
    }
    let (top, runner_up) = top_two(&set.mean())?;
    let (a, b) = (set.class_draws(top), set.class_draws(runner_up));
    let r = match kind {
        TestKind::Paired => paired_t_test(&a, &b)?,
        TestKind::Independent => independent_t_test(&a, &b)?,
    };
    Ok(UncertaintyVerdict {
        top,
        runner_up,
        t_stat: r.t_stat,
        df: r.df,
        p_value: r.p_value,
        degenerate: r.degenerate,
        thresholds: thresholds.to_vec(),
        certain: thresholds.iter().map(|&t| r.p_value < t).collect(),
    })
}

/// Evaluation of one test input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub input_id: usize,
    pub true_label: usize,
    pub top_class: usize,
    /// 0/1 for classification; may be fractional (e.g. a soft answer score).
    pub accuracy: f64,
    pub verdict: UncertaintyVerdict,
    /// `ln max(p_mean[true_label], LL_CLAMP)`.
    pub predictive_ll: f64,
}

impl EvalRecord {
    /// Classification record: accurate iff the predictive-mean arg-max is
    /// the label.
    pub fn from_samples(
        input_id: usize,
        true_label: usize,
        set: &PredictiveSampleSet,
        thresholds: &[f64],
    ) -> Result<Self> {
        if true_label >= set.classes() {
            return Err(Error::data(format!(
                "label {true_label} out of range for {} classes",
                set.classes()
            )));
        }
        let verdict = certainty_verdict(set, thresholds)?;
        let mean = set.mean();
        Ok(EvalRecord {
            input_id,
            true_label,
            top_class: verdict.top,
            accuracy: if verdict.top == true_label { 1.0 } else { 0.0 },
            predictive_ll: mean[true_label].max(LL_CLAMP).ln(),
            verdict,
        })
    }
}

/// Accurate/inaccurate by certain/uncertain tallies (possibly fractional).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PavpuCounts {
    pub n_ac: f64,
    pub n_au: f64,
    pub n_ic: f64,
    pub n_iu: f64,
}

impl PavpuCounts {
    pub fn value(&self) -> f64 {
        (self.n_ac + self.n_iu) / (self.n_ac + self.n_au + self.n_ic + self.n_iu)
    }
}

/// Generalized counts: `n_ac = sum Acc * Cer` and so on. With 0/1 accuracy
/// these are the plain binary counts.
pub fn pavpu_counts(records: &[EvalRecord], threshold: f64) -> Result<PavpuCounts> {
    if records.is_empty() {
        return Err(Error::usage("PAvPU of an empty record set"));
    }
    let mut c = PavpuCounts::default();
    for r in records {
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(Error::usage(format!("accuracy {} outside [0, 1]", r.accuracy)));
        }
        let cer = if r.verdict.is_certain(threshold) { 1.0 } else { 0.0 };
        c.n_ac += r.accuracy * cer;
        c.n_au += r.accuracy * (1.0 - cer);
        c.n_ic += (1.0 - r.accuracy) * cer;
        c.n_iu += (1.0 - r.accuracy) * (1.0 - cer);
    }
    Ok(c)
}

pub fn pavpu(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    Ok(pavpu_counts(records, threshold)?.value())
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::usage("accuracy of an empty record set"));
    }
    Ok(records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64)
}

/// Mean predictive log-likelihood of the true labels.
pub fn test_log_likelihood(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::usage("log-likelihood of an empty record set"));
    }
    Ok(records.iter().map(|r| r.predictive_ll).sum::<f64>() / records.len() as f64)
}

/// Pools the predictive samples of several independently trained models
/// for one input.
pub fn ensemble_combine(models: &[PredictiveSampleSet]) -> Result<PredictiveSampleSet> {
    if models.len() == 1 {
        return Ok(models[0].clone());
    }
    PredictiveSampleSet::pool(models)
}

/// CSV of records: id, label, top class, p-value, accuracy, predictive ll.
pub fn write_records_csv<W: Write>(out: W, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["input_id", "true_label", "top_class", "p_value", "accuracy", "predictive_ll"])?;
    for r in records {
        w.write_record([
            r.input_id.to_string(),
            r.true_label.to_string(),
            r.top_class.to_string(),
            format!("{:e}", r.verdict.p_value),
            r.accuracy.to_string(),
            format!("{:e}", r.predictive_ll),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV of raw predictive samples: id, sample index, one column per class.
pub fn write_samples_csv<W: Write>(out: W, sets: &[(usize, &PredictiveSampleSet)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let classes = sets.first().map_or(0, |(_, s)| s.classes());
    let mut header = vec!["input_id".to_string(), "sample".to_string()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for (id, set) in sets {
        if set.classes() != classes {
            return Err(Error::usage("sample sets disagree on class count"));
        }
        for (k, s) in set.samples().enumerate() {
            let mut row = vec![id.to_string(), k.to_string()];
            row.extend(s.iter().map(|p| format!("{p:e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{RngStream, StreamId};

    fn set(rows: Vec<Vec<f64>>) -> PredictiveSampleSet {
        PredictiveSampleSet::new(rows).unwrap()
    }

    fn record(accuracy: f64, p_value: f64) -> EvalRecord {
        EvalRecord {
            input_id: 0,
            true_label: 0,
            top_class: 0,
            accuracy,
            verdict: UncertaintyVerdict {
                top: 0,
                runner_up: 1,
                t_stat: 0.0,
                df: 1.0,
                p_value,
                degenerate: false,
                thresholds: vec![],
                certain: vec![],
            },
            predictive_ll: 0.0,
        }
    }

    #[test]
    fn identical_rows_are_certain_everywhere() {
        let s = set(vec![vec![0.7, 0.2, 0.1]; 5]);
        let v = certainty_verdict(&s, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!((v.top, v.runner_up), (0, 1));
        assert!(v.degenerate);
        assert_eq!(v.certain, vec![true, true, true]);
    }

    #[test]
    fn permuted_tied_columns_are_uncertain() {
        let s = set(vec![vec![0.6, 0.4], vec![0.4, 0.6], vec![0.5, 0.5], vec![0.3, 0.7], vec![0.7, 0.3]]);
        let v = certainty_verdict(&s, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(v.t_stat, 0.0);
        assert_eq!(v.certain, vec![false, false, false]);
        assert_eq!((v.top, v.runner_up), (0, 1));
    }

    #[test]
    fn certain_flags_nest() {
        let mut rng = RngStream::new(1, StreamId::Custom(1));
        for _ in 0..200 {
            let rows: Vec<Vec<f64>> = (0..10)
                .map(|_| {
                    let a = rng.uniform();
                    let b = rng.uniform() * (1.0 - a);
                    vec![a, b, 1.0 - a - b]
                })
                .collect();
            let v = certainty_verdict(&set(rows), &DEFAULT_THRESHOLDS).unwrap();
            assert!((0.0..=1.0).contains(&v.p_value));
            if v.certain[0] {
                assert!(v.certain[1]);
            }
            if v.certain[1] {
                assert!(v.certain[2]);
            }
        }
    }

    #[test]
    fn single_sample_is_rejected() {
        assert!(certainty_verdict(&set(vec![vec![0.5, 0.5]]), &[0.05]).is_err());
    }

    #[test]
    fn pavpu_examples() {
        let all: Vec<_> = (0..4).map(|_| record(1.0, 0.0)).collect();
        assert_eq!(pavpu(&all, 0.05).unwrap(), 1.0);

        let mut rs = Vec::new();
        rs.extend((0..3).map(|_| record(1.0, 0.001)));
        rs.extend((0..2).map(|_| record(0.0, 0.5)));
        rs.push(record(1.0, 0.5));
        rs.extend((0..4).map(|_| record(0.0, 0.001)));
        assert_eq!(pavpu(&rs, 0.05).unwrap(), 0.5);

        assert!((pavpu(&[record(2.0 / 3.0, 0.0)], 0.05).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(pavpu(&[], 0.05), Err(Error::Usage(_))));
    }

    #[test]
    fn pavpu_ignores_record_order() {
        let mut rs: Vec<_> = (0..9).map(|i| record((i % 2) as f64, i as f64 / 10.0)).collect();
        let a = pavpu(&rs, 0.35).unwrap();
        rs.reverse();
        assert_eq!(a, pavpu(&rs, 0.35).unwrap());
    }

    #[test]
    fn log_likelihood_examples() {
        let sure = set(vec![vec![1.0, 0.0]; 3]);
        let r = EvalRecord::from_samples(0, 0, &sure, &[0.05]).unwrap();
        assert_eq!(test_log_likelihood(&[r]).unwrap(), 0.0);

        let uniform = set(vec![vec![0.1; 10]; 3]);
        let r = EvalRecord::from_samples(0, 3, &uniform, &[0.05]).unwrap();
        assert!((r.predictive_ll - 0.1f64.ln()).abs() < 1e-12);

        let a = EvalRecord::from_samples(0, 0, &set(vec![vec![0.5, 0.5]; 2]), &[0.05]).unwrap();
        let b = EvalRecord::from_samples(1, 1, &set(vec![vec![0.75, 0.25]; 2]), &[0.05]).unwrap();
        let ll = test_log_likelihood(&[a, b]).unwrap();
        assert!((ll - (-1.0397)).abs() < 1e-4);

        let zero = set(vec![vec![1.0, 0.0]; 2]);
        let r = EvalRecord::from_samples(0, 1, &zero, &[0.05]).unwrap();
        assert_eq!(r.predictive_ll, LL_CLAMP.ln());
        assert!(matches!(
            EvalRecord::from_samples(0, 2, &zero, &[0.05]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn ensemble_examples() {
        let a = set(vec![vec![0.2, 0.8], vec![0.4, 0.6]]);
        assert_eq!(ensemble_combine(&[a.clone()]).unwrap(), a);
        let two = ensemble_combine(&[a.clone(), a.clone()]).unwrap();
        for (x, y) in two.mean().iter().zip(a.mean()) {
            assert!((x - y).abs() < 1e-15);
        }
        let b = set(vec![vec![0.5, 0.5]; 3]);
        assert_eq!(ensemble_combine(&[a.clone(), b]).unwrap().len(), 5);
        let c = set(vec![vec![0.3, 0.3, 0.4]; 2]);
        assert!(matches!(ensemble_combine(&[a, c]), Err(Error::Usage(_))));
    }

    #[test]
    fn csv_exports() {
        let s = set(vec![vec![0.2, 0.8], vec![0.4, 0.6]]);
        let r = EvalRecord::from_samples(7, 1, &s, &[0.05]).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("input_id,true_label,top_class,p_value,accuracy,predictive_ll\n7,1,1,"));
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &[(7, &s)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("input_id,sample,p0,p1\n7,0,"));
    }
}
