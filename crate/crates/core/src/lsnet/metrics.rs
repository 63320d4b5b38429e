use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{} counts for a {classes} x {classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn add(&mut self, truth: u32, pred: u32) -> Result<()> {
        let c = self.classes;
        for v in [truth, pred] {
            if v as usize >= c {
                return Err(Error::LabelOutOfRange {
                    point: 0,
                    label: v,
                    num_classes: c,
                });
            }
        }
        self.counts[truth as usize * c + pred as usize] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }

    pub fn summary(&self) -> Evaluation {
        let c = self.classes;
        let total = self.total();
        let trace: u64 = (0..c).map(|i| self.get(i, i)).sum();
        let iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| self.get(k, p)).sum();
                let fp: u64 = (0..c).filter(|&t| t != k).map(|t| self.get(t, k)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        Evaluation {
            oa: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            miou: if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            },
            iou,
            confusion: self.clone(),
        }
    }
}

/// Overall accuracy, per-class IoU (`None` when a class appears in neither
/// labels nor predictions) and their mean over present classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub oa: f64,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(predictions: &[u32], labels: &[u32], classes: usize) -> Result<Evaluation> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (i, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        cm.add(t, p).map_err(|e| match e {
            Error::LabelOutOfRange { label, num_classes, .. } => Error::LabelOutOfRange {
                point: i,
                label,
                num_classes,
            },
            other => other,
        })?;
    }
    Ok(cm.summary())
}
