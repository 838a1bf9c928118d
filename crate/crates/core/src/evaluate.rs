//! Dataset splitting, confusion matrices, classification metrics and
//! correlation-based feature pruning.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub ratio: f64,
    pub seed: u64,
}

/// Number of training items for a split; tolerant of `ratio * n` landing a
/// hair below an integer.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Seeded uniform shuffle; the first `floor(ratio * n)` items train.
pub fn split_dataset<T: Clone>(ids: &[T], ratio: f64, seed: u64) -> Result<DatasetSplit<T>> {
    if ids.len() < 2 {
        return Err(Error::DegenerateData(format!("cannot split {} item(s)", ids.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(train_count(ids.len(), ratio));
    Ok(DatasetSplit { train: shuffled, test, ratio, seed })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[actual][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = classes.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("counts must be {n}x{n}")));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Plain-text table, rows = actual, columns = predicted.
    pub fn render(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(String::len)
            .chain(self.counts.iter().flatten().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max("actual\\pred".len());
        let mut out = format!("{:>width$}", "actual\\pred");
        for c in &self.classes {
            let _ = write!(out, " {c:>width$}");
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            let _ = write!(out, "{c:>width$}");
            for v in row {
                let _ = write!(out, " {v:>width$}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix<S: AsRef<str>>(actual: &[S], predicted: &[S], classes: &[S]) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} actual labels vs {} predicted",
            actual.len(),
            predicted.len()
        )));
    }
    let classes: Vec<String> = classes.iter().map(|c| c.as_ref().to_string()).collect();
    let pos = |l: &str| classes.iter().position(|c| c == l).ok_or_else(|| Error::Label(l.to_string()));
    let n = classes.len();
    let mut counts = vec![vec![0u64; n]; n];
    for (a, p) in actual.iter().zip(predicted) {
        counts[pos(a.as_ref())?][pos(p.as_ref())?] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
    Weighted,
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Macro => "macro",
            Averaging::Micro => "micro",
            Averaging::Weighted => "weighted",
        })
    }
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "micro" => Ok(Averaging::Micro),
            "weighted" => Ok(Averaging::Weighted),
            other => Err(Error::Parameter(format!("unknown averaging mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a denominator was zero and the metric was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub averaging: Averaging,
    pub total: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Aggregate,
    pub micro_avg: Aggregate,
    pub weighted_avg: Aggregate,
}

impl MetricsReport {
    /// The aggregate selected by `averaging`.
    pub fn selected(&self) -> Aggregate {
        match self.averaging {
            Averaging::Macro => self.macro_avg,
            Averaging::Micro => self.micro_avg,
            Averaging::Weighted => self.weighted_avg,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,support,precision,recall,f1,accuracy,undefined\n");
        for c in &self.per_class {
            let mut flags = Vec::new();
            if c.precision_undefined {
                flags.push("precision");
            }
            if c.recall_undefined {
                flags.push("recall");
            }
            if c.f1_undefined {
                flags.push("f1");
            }
            let _ = writeln!(out, "{},{},{},{},{},,{}", c.class, c.support, c.precision, c.recall, c.f1, flags.join("|"));
        }
        for (name, a) in [("macro", self.macro_avg), ("micro", self.micro_avg), ("weighted", self.weighted_avg)] {
            let _ = writeln!(out, "{name},{},{},{},{},{},", self.total, a.precision, a.recall, a.f1, self.accuracy);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(cm: &ConfusionMatrix, averaging: Averaging) -> Result<MetricsReport> {
    let total = cm.total();
    if cm.classes.is_empty() || total == 0 {
        return Err(Error::DegenerateData("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.classes.len())
        .map(|i| {
            let tp = cm.counts[i][i];
            let support = cm.row_sum(i);
            let fp = cm.col_sum(i) - tp;
            let fn_ = support - tp;
            let (precision, precision_undefined) = ratio(tp, tp + fp);
            let (recall, recall_undefined) = ratio(tp, tp + fn_);
            let f1_undefined = precision + recall == 0.0;
            ClassMetrics {
                class: cm.classes[i].clone(),
                support,
                tp,
                fp,
                fn_,
                precision,
                recall,
                f1: f1_score(precision, recall),
                precision_undefined,
                recall_undefined,
                f1_undefined,
            }
        })
        .collect();

    let k = per_class.len() as f64;
    let macro_avg = Aggregate {
        precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
    };
    let (tp, fp, fn_) = per_class.iter().fold((0, 0, 0), |(a, b, c), m| (a + m.tp, b + m.fp, c + m.fn_));
    let micro_p = ratio(tp, tp + fp).0;
    let micro_r = ratio(tp, tp + fn_).0;
    let micro_avg = Aggregate { precision: micro_p, recall: micro_r, f1: f1_score(micro_p, micro_r) };
    let t = total as f64;
    let weighted_avg = Aggregate {
        precision: per_class.iter().map(|c| c.precision * c.support as f64).sum::<f64>() / t,
        recall: per_class.iter().map(|c| c.recall * c.support as f64).sum::<f64>() / t,
        f1: per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / t,
    };
    Ok(MetricsReport {
        averaging,
        total,
        accuracy: cm.trace() as f64 / t,
        per_class,
        macro_avg,
        micro_avg,
        weighted_avg,
    })
}

/// Sample Pearson correlation. Constant series are rejected rather than
/// reported as zero correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("series lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateData("correlation needs at least two samples".into()));
    }
    // shifting by the first sample makes a constant series exactly zero
    let (x0, y0) = (x[0], y[0]);
    let n = x.len() as f64;
    let mx = x.iter().map(|a| a - x0).sum::<f64>() / n;
    let my = y.iter().map(|b| b - y0).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - x0 - mx, b - y0 - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateData("series has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetainedFeature {
    pub name: String,
    pub r: f64,
}

/// Drops features whose correlation with `response` has `|r| <= tolerance`
/// or cannot be computed (constant column).
pub fn prune_features(names: &[String], columns: &[Vec<f64>], response: &[f64], tolerance: f64) -> Result<Vec<RetainedFeature>> {
    if names.len() != columns.len() {
        return Err(Error::Shape(format!("{} names for {} columns", names.len(), columns.len())));
    }
    let mut kept = Vec::new();
    for (name, col) in names.iter().zip(columns) {
        match pearson(col, response) {
            Ok(r) if r.abs() > tolerance => kept.push(RetainedFeature { name: name.clone(), r }),
            Ok(_) | Err(Error::DegenerateData(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let ids: Vec<u32> = (0..4682).collect();
        let s = split_dataset(&ids, 0.8, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (3745, 937));
        let s = split_dataset(&ids[..10], 0.8, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        assert_eq!(train_count(100, 0.29), 29);
        assert!(matches!(split_dataset(&ids[..1], 0.8, 1), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn split_seeding() {
        let ids: Vec<u32> = (0..1000).collect();
        assert_eq!(split_dataset(&ids, 0.8, 5).unwrap(), split_dataset(&ids, 0.8, 5).unwrap());
        assert_ne!(split_dataset(&ids, 0.8, 5).unwrap().train, split_dataset(&ids, 0.8, 6).unwrap().train);
    }

    #[test]
    fn binary_quadrants() {
        // rows actual, columns predicted: [[TN, FP], [FN, TP]]
        let actual = ["neg", "neg", "neg", "pos", "pos", "pos", "pos"];
        let pred = ["neg", "neg", "pos", "neg", "pos", "pos", "pos"];
        let cm = confusion_matrix(&actual, &pred, &["neg", "pos"]).unwrap();
        assert_eq!(cm.counts, vec![vec![2, 1], vec![1, 3]]);
    }

    #[test]
    fn label_and_shape_errors() {
        assert!(matches!(confusion_matrix(&["a"], &["b"], &["a"]), Err(Error::Label(_))));
        assert!(matches!(confusion_matrix(&["a"], &[], &["a"]), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_evaluated_binary_metrics() {
        let cm = ConfusionMatrix::from_counts(vec!["neg".into(), "pos".into()], vec![vec![6, 1], vec![1, 2]]).unwrap();
        let r = metrics(&cm, Averaging::Macro).unwrap();
        let pos = &r.per_class[1];
        assert!((pos.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((pos.recall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.accuracy, 0.8);
    }

    #[test]
    fn perfect_diagonal() {
        let cm = confusion_matrix(&["a", "b", "c", "c"], &["a", "b", "c", "c"], &["a", "b", "c"]).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        let r = metrics(&cm, Averaging::Weighted).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for a in [r.macro_avg, r.micro_avg, r.weighted_avg] {
            assert_eq!((a.precision, a.recall, a.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn undefined_metrics_are_flagged_zero() {
        // class b is never predicted and never occurs
        let cm = ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], vec![vec![3, 0], vec![0, 0]]).unwrap();
        let r = metrics(&cm, Averaging::Macro).unwrap();
        let b = &r.per_class[1];
        assert!(b.precision_undefined && b.recall_undefined && b.f1_undefined);
        assert_eq!((b.precision, b.recall, b.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.macro_avg.f1, 0.5);
        assert!(metrics(&ConfusionMatrix::from_counts(vec!["a".into()], vec![vec![0]]).unwrap(), Averaging::Macro).is_err());
    }

    #[test]
    fn table_two_harmonic_mean() {
        assert!((f1_score(0.9551, 0.9406) - 0.9478).abs() < 5e-4);
    }

    #[test]
    fn pearson_basics() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[3.0; 4]), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn pruning() {
        let y = vec![0.0, 1.0, 0.0, 1.0, 1.0];
        let names = vec!["same".to_string(), "flat".to_string()];
        let kept = prune_features(&names, &[y.clone(), vec![2.0; 5]], &y, 0.0).unwrap();
        assert_eq!(kept, vec![RetainedFeature { name: "same".into(), r: 1.0 }]);
    }

    #[test]
    fn csv_has_aggregate_rows() {
        let cm = ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], vec![vec![3, 1], vec![0, 2]]).unwrap();
        let csv = metrics(&cm, Averaging::Macro).unwrap().to_csv();
        let rows: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(rows, vec!["row", "a", "b", "macro", "micro", "weighted"]);
        assert!(cm.render().lines().next().unwrap().contains("actual\\pred"));
    }
}
