//! Confusion matrix and the three reported metrics: overall accuracy,
//! average accuracy (mean per-class recall), and Cohen's kappa. Values are
//! printed as percentages with two decimals.

use crate::error::{IfgError, Result};

/// C x C counts, rows = true class, cols = predicted class (0-based here;
/// scene labels are 1-based and shifted by the caller).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, true_label: usize, pred: usize) -> u64 {
        self.counts[true_label * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, true_label: usize, pred: usize) -> Result<()> {
        if true_label >= self.classes {
            return Err(IfgError::LabelOutOfRange {
                label: true_label,
                classes: self.classes,
            });
        }
        if pred >= self.classes {
            return Err(IfgError::LabelOutOfRange {
                label: pred,
                classes: self.classes,
            });
        }
        self.counts[true_label * self.classes + pred] += 1;
        Ok(())
    }

    /// Cell-wise sum of two shards; exact and associative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(IfgError::shape("ConfusionMatrix::merge", self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.count(c, p)).sum()
    }

    fn col_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.count(t, c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    /// Fraction correct, in [0, 1].
    pub oa: f64,
    /// Mean per-class recall over classes that appear in the ground truth.
    pub aa: f64,
    /// Chance-corrected agreement.
    pub kappa: f64,
    /// Recall per class; None when the class has no ground-truth samples.
    pub per_class_recall: Vec<Option<f64>>,
    /// Classes excluded from AA for lack of samples (flagged as a warning).
    pub excluded_classes: Vec<usize>,
}

/// OA = trace/total, AA = mean per-class recall, kappa = (OA - p_e)/(1 - p_e)
/// with p_e = sum_c row_c * col_c / total^2.
pub fn oa_aa_kappa(cm: &ConfusionMatrix) -> Result<MetricsSummary> {
    let total = cm.total();
    if total == 0 {
        return Err(IfgError::InvalidArgument("empty confusion matrix".into()));
    }
    let n = total as f64;
    let trace: u64 = (0..cm.classes()).map(|c| cm.count(c, c)).sum();
    let oa = trace as f64 / n;

    let mut per_class = Vec::with_capacity(cm.classes());
    let mut excluded = Vec::new();
    let mut aa_sum = 0.0;
    let mut aa_count = 0usize;
    for c in 0..cm.classes() {
        let row = cm.row_total(c);
        if row == 0 {
            per_class.push(None);
            excluded.push(c);
        } else {
            let recall = cm.count(c, c) as f64 / row as f64;
            per_class.push(Some(recall));
            aa_sum += recall;
            aa_count += 1;
        }
    }
    if aa_count == 0 {
        return Err(IfgError::InvalidArgument(
            "no class has ground-truth samples".into(),
        ));
    }
    let aa = aa_sum / aa_count as f64;

    let p_e: f64 = (0..cm.classes())
        .map(|c| cm.row_total(c) as f64 * cm.col_total(c) as f64)
        .sum::<f64>()
        / (n * n);
    // p_e == 1 only when every sample shares one (true, pred) class pair;
    // agreement is then degenerate and kappa is 1 exactly when OA is 1
    let kappa = if (1.0 - p_e).abs() <= 1e-15 {
        if oa >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - p_e) / (1.0 - p_e)
    };
    Ok(MetricsSummary {
        oa,
        aa,
        kappa,
        per_class_recall: per_class,
        excluded_classes: excluded,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Human-readable per-class table plus the three headline metrics.
pub fn format_table(cm: &ConfusionMatrix, s: &MetricsSummary) -> String {
    let mut out = String::new();
    out.push_str("class  samples  recall(%)\n");
    for (c, recall) in s.per_class_recall.iter().enumerate() {
        let row = cm.row_total(c);
        match recall {
            Some(r) => out.push_str(&format!("{:>5}  {:>7}  {:>9}\n", c + 1, row, pct(*r))),
            None => out.push_str(&format!("{:>5}  {:>7}  {:>9}\n", c + 1, row, "-")),
        }
    }
    out.push_str(&format!("OA(%)    {}\n", pct(s.oa)));
    out.push_str(&format!("AA(%)    {}\n", pct(s.aa)));
    out.push_str(&format!("Kappa(%) {}\n", pct(s.kappa)));
    if !s.excluded_classes.is_empty() {
        let names: Vec<String> = s
            .excluded_classes
            .iter()
            .map(|c| (c + 1).to_string())
            .collect();
        out.push_str(&format!(
            "warning: classes without ground truth excluded from AA: {}\n",
            names.join(",")
        ));
    }
    out
}

/// Machine-readable key=value lines, one metric per line.
pub fn format_kv(cm: &ConfusionMatrix, s: &MetricsSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!("total={}\n", cm.total()));
    out.push_str(&format!("oa={}\n", pct(s.oa)));
    out.push_str(&format!("aa={}\n", pct(s.aa)));
    out.push_str(&format!("kappa={}\n", pct(s.kappa)));
    for (c, recall) in s.per_class_recall.iter().enumerate() {
        match recall {
            Some(r) => out.push_str(&format!("class_{}={}\n", c + 1, pct(*r))),
            None => out.push_str(&format!("class_{}=na\n", c + 1)),
        }
    }
    out
}
