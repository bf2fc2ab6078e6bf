//! Accuracy deltas and a loss-threshold membership-inference audit.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::patching::PatchedModel;

/// Predictions of `model` on every row of `data` (raw inputs).
pub fn predictions(model: &PatchedModel, data: &Dataset, exec: Execution) -> Result<Vec<usize>> {
    par::try_map_range(exec, data.len(), |i| model.predict_raw(&data.features[i]))
}

/// Percentage of rows predicted correctly.
pub fn accuracy(model: &PatchedModel, data: &Dataset, exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("accuracy of an empty dataset".into()));
    }
    let pred = predictions(model, data, exec)?;
    let ok = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * ok as f64 / data.len() as f64)
}

/// Softmax cross-entropy of one logit vector against label `y`.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let s: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    m + s.ln() - logits[y]
}

pub fn losses(model: &PatchedModel, data: &Dataset, exec: Execution) -> Result<Vec<f64>> {
    par::try_map_range(exec, data.len(), |i| {
        Ok(cross_entropy(&model.forward(&data.features[i])?, data.labels[i]))
    })
}

/// Mean training loss, the threshold of the attack.
pub fn mean_loss(model: &PatchedModel, data: &Dataset, exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("mean loss of an empty dataset".into()));
    }
    Ok(losses(model, data, exec)?.iter().sum::<f64>() / data.len() as f64)
}

/// Percentage of `data` whose loss is at most `tau`, i.e. flagged as members.
pub fn mia_recall(model: &PatchedModel, data: &Dataset, tau: f64, exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("membership audit of an empty dataset".into()));
    }
    let flagged = losses(model, data, exec)?.iter().filter(|&&l| l <= tau).count();
    Ok(100.0 * flagged as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeforeAfter {
    pub before: f64,
    pub after: f64,
}

impl BeforeAfter {
    /// `before - after`.
    pub fn delta(&self) -> f64 {
        self.before - self.after
    }
}

/// Class-unlearning breakdown: held-out accuracy on the forgotten class and on
/// the others, and training accuracy on the remaining classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: usize,
    pub a_tes_u: BeforeAfter,
    pub a_tes_r: BeforeAfter,
    pub a_r: BeforeAfter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsDelta {
    pub a_tes: BeforeAfter,
    pub a_res: BeforeAfter,
    pub a_u: BeforeAfter,
    pub class: Option<ClassMetrics>,
}

impl MetricsDelta {
    pub const CSV_HEADER: [&'static str; 21] = [
        "A_tes_before",
        "A_tes_after",
        "dA_tes",
        "A_res_before",
        "A_res_after",
        "dA_res",
        "A_u_before",
        "A_u_after",
        "dA_u",
        "class",
        "A_tes_u_before",
        "A_tes_u_after",
        "dA_tes_u",
        "A_tes_r_before",
        "A_tes_r_after",
        "dA_tes_r",
        "A_r_before",
        "A_r_after",
        "dA_r",
        "mia_before",
        "mia_after",
    ];

    /// One CSV row matching [`CSV_HEADER`](Self::CSV_HEADER); the two audit
    /// columns are filled by the caller when available. Undefined values
    /// (empty splits) are left blank.
    pub fn csv_row(&self, mia: Option<BeforeAfter>) -> Vec<String> {
        let f = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.4}") };
        let triple = |b: &BeforeAfter| [f(b.before), f(b.after), f(b.delta())];
        let mut row: Vec<String> = Vec::with_capacity(21);
        row.extend(triple(&self.a_tes));
        row.extend(triple(&self.a_res));
        row.extend(triple(&self.a_u));
        match &self.class {
            Some(c) => {
                row.push(c.label.to_string());
                row.extend(triple(&c.a_tes_u));
                row.extend(triple(&c.a_tes_r));
                row.extend(triple(&c.a_r));
            }
            None => row.extend(std::iter::repeat_n(String::new(), 10)),
        }
        match mia {
            Some(m) => row.extend([f(m.before), f(m.after)]),
            None => row.extend([String::new(), String::new()]),
        }
        row
    }
}

fn acc_pair(before: &PatchedModel, after: &PatchedModel, d: &Dataset, exec: Execution) -> Result<BeforeAfter> {
    if d.is_empty() {
        return Ok(BeforeAfter {
            before: f64::NAN,
            after: f64::NAN,
        });
    }
    Ok(BeforeAfter {
        before: accuracy(before, d, exec)?,
        after: accuracy(after, d, exec)?,
    })
}

fn split_by(d: &Dataset, label: usize) -> (Dataset, Dataset) {
    let (u, r): (Vec<usize>, Vec<usize>) = (0..d.len()).partition(|&i| d.labels[i] == label);
    (d.subset(&u), d.subset(&r))
}

/// Accuracy before and after on the test set, retained data `d_r` and the
/// unlearned data `d_u`; with `class_label`, also the per-class breakdown.
pub fn unlearn_metrics(
    before: &PatchedModel,
    after: &PatchedModel,
    d_u: &Dataset,
    d_r: &Dataset,
    test: &Dataset,
    class_label: Option<usize>,
    exec: Execution,
) -> Result<MetricsDelta> {
    let class = match class_label {
        None => None,
        Some(label) => {
            if label >= test.num_classes {
                return Err(Error::InvalidParameter(format!("class {label} out of range")));
            }
            let (tu, tr) = split_by(test, label);
            let (_, rr) = split_by(d_r, label);
            Some(ClassMetrics {
                label,
                a_tes_u: acc_pair(before, after, &tu, exec)?,
                a_tes_r: acc_pair(before, after, &tr, exec)?,
                a_r: acc_pair(before, after, &rr, exec)?,
            })
        }
    };
    Ok(MetricsDelta {
        a_tes: acc_pair(before, after, test, exec)?,
        a_res: acc_pair(before, after, d_r, exec)?,
        a_u: acc_pair(before, after, d_u, exec)?,
        class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::geometry::DomainBox;
    use crate::net::{AffineLayer, FeatureMap, MlpNetwork};
    use ndarray::array;

    fn identity_model() -> PatchedModel {
        let layer = AffineLayer::new(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]).unwrap();
        PatchedModel::new(
            MlpNetwork::new(vec![layer]).unwrap(),
            FeatureMap::Identity { dim: 2 },
            DomainBox::new(vec![-5.0; 2], vec![5.0; 2]).unwrap(),
        )
        .unwrap()
    }

    fn toy() -> Dataset {
        Dataset::new(
            vec![vec![3.0, 0.0], vec![0.0, 3.0], vec![2.0, 1.0]],
            vec![0, 1, 0],
            2,
            Split::Test,
        )
        .unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let m = identity_model();
        let d = toy();
        assert_eq!(accuracy(&m, &d, Execution::Sequential).unwrap(), 100.0);
        let flipped = Dataset::new(d.features.clone(), vec![1, 0, 1], 2, Split::Test).unwrap();
        assert_eq!(accuracy(&m, &flipped, Execution::Parallel).unwrap(), 0.0);
        let empty = Dataset::new(vec![], vec![], 2, Split::Test).unwrap();
        assert!(accuracy(&m, &empty, Execution::Sequential).is_err());
    }

    #[test]
    fn identical_models_have_zero_deltas() {
        let m = identity_model();
        let d = toy();
        let md = unlearn_metrics(&m, &m, &d, &d, &d, Some(0), Execution::Sequential).unwrap();
        assert_eq!(md.a_tes.delta(), 0.0);
        assert_eq!(md.a_u.delta(), 0.0);
        assert_eq!(md.class.unwrap().a_tes_u.delta(), 0.0);
        assert!(unlearn_metrics(&m, &m, &d, &d, &d, Some(7), Execution::Sequential).is_err());
        assert_eq!(md.csv_row(None).len(), MetricsDelta::CSV_HEADER.len());
    }

    #[test]
    fn membership_recall() {
        let m = identity_model();
        let d = toy();
        assert_eq!(mia_recall(&m, &d, 10.0, Execution::Sequential).unwrap(), 100.0);
        let wrong = Dataset::new(d.features.clone(), vec![1, 0, 1], 2, Split::Test).unwrap();
        assert_eq!(mia_recall(&m, &wrong, 0.5, Execution::Sequential).unwrap(), 0.0);
        // naive recomputation
        let tau = mean_loss(&m, &d, Execution::Sequential).unwrap();
        let naive = d
            .features
            .iter()
            .zip(&d.labels)
            .filter(|(x, &y)| {
                let p: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                -(p[y] / p.iter().sum::<f64>()).ln() <= tau
            })
            .count();
        let naive = 100.0 * naive as f64 / 3.0;
        assert_eq!(mia_recall(&m, &d, tau, Execution::Sequential).unwrap(), naive);
    }

    #[test]
    fn cross_entropy_is_stable() {
        assert!((cross_entropy(&[0.0, 0.0], 0) - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[1000.0, -1000.0], 0).abs() < 1e-12);
        assert!((cross_entropy(&[1000.0, -1000.0], 1) - 2000.0).abs() < 1e-9);
    }
}
