use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts with label 1 as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[usize], labels: &[usize]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape("confusion", &[predictions.len()], &[labels.len()]));
        }
        let mut c = Confusion::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => return Err(Error::invalid(format!("non-binary prediction/label pair ({p}, {y})"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// The five reported metrics, in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub specificity: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 5] = ["precision", "recall", "f1", "accuracy", "specificity"];

    pub fn values(&self) -> [f64; 5] {
        [self.precision, self.recall, self.f1, self.accuracy, self.specificity]
    }

    fn from_values(v: [f64; 5]) -> Self {
        MetricSet {
            precision: v[0],
            recall: v[1],
            f1: v[2],
            accuracy: v[3],
            specificity: v[4],
        }
    }
}

/// Metrics of one evaluation. Ratios with a zero denominator are reported
/// as 0 and their names listed in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub metrics: MetricSet,
    pub confusion: Confusion,
    pub undefined: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion) -> Self {
        let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
        let mut undefined = Vec::new();
        let p = ratio(tp, tp + fp, "precision", &mut undefined);
        let r = ratio(tp, tp + fn_, "recall", &mut undefined);
        let f1 = ratio(2.0 * p * r, p + r, "f1", &mut undefined);
        let acc = ratio(tp + tn, c.total() as f64, "accuracy", &mut undefined);
        let spec = ratio(tn, tn + fp, "specificity", &mut undefined);
        MetricsReport {
            metrics: MetricSet {
                precision: 100.0 * p,
                recall: 100.0 * r,
                f1: 100.0 * f1,
                accuracy: 100.0 * acc,
                specificity: 100.0 * spec,
            },
            confusion: c,
            undefined,
        }
    }

    pub fn from_predictions(predictions: &[usize], labels: &[usize]) -> Result<Self> {
        Ok(Self::from_confusion(Confusion::from_predictions(predictions, labels)?))
    }

    /// True when the stored metrics are exactly what the counts give.
    pub fn is_consistent(&self) -> bool {
        *self == Self::from_confusion(self.confusion)
    }
}

/// Mean and population standard deviation over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    #[serde(flatten)]
    pub mean: MetricSet,
    pub std: MetricSet,
    pub runs: Vec<MetricsReport>,
    pub seeds: Vec<u64>,
}

/// Population mean and standard deviation (divisor `n`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AggregateReport {
    pub fn new(runs: Vec<MetricsReport>, seeds: Vec<u64>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::invalid("cannot aggregate zero runs"));
        }
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for k in 0..5 {
            let column: Vec<f64> = runs.iter().map(|r| r.metrics.values()[k]).collect();
            (mean[k], std[k]) = mean_std(&column);
        }
        Ok(AggregateReport {
            mean: MetricSet::from_values(mean),
            std: MetricSet::from_values(std),
            runs,
            seeds,
        })
    }

    /// `metric,mean,std` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "mean", "std"])?;
        for (k, name) in MetricSet::NAMES.iter().enumerate() {
            out.write_record([
                name.to_string(),
                format!("{:.2}", self.mean.values()[k]),
                format!("{:.2}", self.std.values()[k]),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_classifier_scores_100() {
        let r = MetricsReport::from_confusion(Confusion { tp: 24, fp: 0, fn_: 0, tn: 24 });
        assert_eq!(r.metrics.values(), [100.0; 5]);
        assert!(r.undefined.is_empty());
    }

    #[test]
    fn two_thirds() {
        let r = MetricsReport::from_confusion(Confusion { tp: 2, fp: 1, fn_: 1, tn: 2 });
        for v in [r.metrics.precision, r.metrics.recall, r.metrics.accuracy] {
            assert_eq!(format!("{v:.2}"), "66.67");
        }
    }

    #[test]
    fn empty_denominators_are_flagged() {
        let r = MetricsReport::from_confusion(Confusion { tp: 0, fp: 0, fn_: 3, tn: 3 });
        assert_eq!(r.metrics.precision, 0.0);
        assert_eq!(r.undefined, ["precision", "f1"]);
        assert!(r.is_consistent());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[80.0, 90.0]);
        assert_eq!((m, s), (85.0, 5.0));
    }

    #[test]
    fn json_keys() {
        let r = MetricsReport::from_confusion(Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in MetricSet::NAMES {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
