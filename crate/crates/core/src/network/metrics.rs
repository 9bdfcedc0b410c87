/// Confusion counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    /// `TP / (TP + FP + FN)`, undefined when all three are zero.
    pub fn iou(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn dsc(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Accuracy on the members of the class.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        // equals 2PR / (P + R) whenever both are defined
        self.dsc()
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Scores of one evaluation. `None` marks a metric that is undefined because
/// its class never occurs in either the predictions or the targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub counts: Vec<ClassCounts>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub dsc: Vec<Option<f64>>,
    /// F1 of class 1 for two classes, macro average otherwise.
    pub f1: Option<f64>,
    pub mean_iou: Option<f64>,
    pub mean_dsc: Option<f64>,
}

impl MetricsReport {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], num_classes: usize) -> Self {
        assert_eq!(predicted.len(), truth.len(), "prediction and target counts differ");
        let mut counts = vec![ClassCounts::default(); num_classes];
        let mut correct = 0u64;
        for (&p, &t) in predicted.iter().zip(truth) {
            if p == t {
                counts[t].tp += 1;
                correct += 1;
            } else {
                counts[p].fp += 1;
                counts[t].fn_ += 1;
            }
        }
        let per_class_accuracy = counts.iter().map(ClassCounts::recall).collect();
        let iou: Vec<_> = counts.iter().map(ClassCounts::iou).collect();
        let dsc: Vec<_> = counts.iter().map(ClassCounts::dsc).collect();
        let f1 = if num_classes == 2 {
            counts[1].f1()
        } else {
            mean_defined(&counts.iter().map(ClassCounts::f1).collect::<Vec<_>>())
        };
        MetricsReport {
            accuracy: if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 },
            counts,
            per_class_accuracy,
            mean_iou: mean_defined(&iou),
            mean_dsc: mean_defined(&dsc),
            iou,
            dsc,
            f1,
        }
    }

    /// IoU of class 1 for two classes, mean IoU otherwise.
    pub fn headline_iou(&self) -> Option<f64> {
        if self.iou.len() == 2 {
            self.iou[1]
        } else {
            self.mean_iou
        }
    }

    pub fn headline_dsc(&self) -> Option<f64> {
        if self.dsc.len() == 2 {
            self.dsc[1]
        } else {
            self.mean_dsc
        }
    }
}

/// Text form used in CSV output; undefined values print as `nan`.
pub fn format_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}
