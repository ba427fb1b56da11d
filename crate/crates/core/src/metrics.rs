//! Evaluation: accuracy, normalized accuracy, representation drift,
//! disentanglement maps and normalcy scores.

use serde::Serialize;

use crate::error::{Result, TakError};
use crate::linalg::Matrix;
use crate::linearized::TaskModel;
use crate::network::{argmax_in, jvp, ClassSlice, Dataset, NetSpec, ParamVector};

/// Predicted class per row, restricted to `classes`; ties go to the lowest index.
pub fn predictions(outputs: &Matrix, classes: ClassSlice) -> Vec<usize> {
    (0..outputs.rows())
        .map(|r| argmax_in(outputs.row(r), classes))
        .collect()
}

/// Fraction of rows whose restricted argmax equals the label.
pub fn accuracy_of(outputs: &Matrix, labels: &[usize], classes: ClassSlice) -> Result<f64> {
    if labels.is_empty() {
        return Err(TakError::EmptyData("accuracy of an empty dataset"));
    }
    let correct = predictions(outputs, classes)
        .into_iter()
        .zip(labels)
        .filter(|(p, y)| p == *y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy of `model` (a map from an input batch to outputs) on `data`,
/// competing only among the dataset's own classes.
pub fn accuracy<F>(model: F, data: &Dataset) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    if data.is_empty() {
        return Err(TakError::EmptyData("accuracy of an empty dataset"));
    }
    accuracy_of(&model(&data.inputs)?, &data.labels, data.classes)
}

/// Accuracy with the argmax taken over every output of the head.
pub fn joint_accuracy<F>(model: F, data: &Dataset) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    if data.is_empty() {
        return Err(TakError::EmptyData("accuracy of an empty dataset"));
    }
    let out = model(&data.inputs)?;
    let all = ClassSlice {
        offset: 0,
        count: out.cols(),
    };
    accuracy_of(&out, &data.labels, all)
}

/// Mean over tasks of `merged / individual`, in percent.
pub fn normalized_accuracy(merged: &[f64], individual: &[f64]) -> Result<f64> {
    if merged.len() != individual.len() {
        return Err(crate::error::shape_err(
            "normalized_accuracy",
            individual.len(),
            merged.len(),
        ));
    }
    if merged.is_empty() {
        return Err(TakError::EmptyData("normalized accuracy over zero tasks"));
    }
    if let Some(i) = individual.iter().position(|&v| v <= 0.0) {
        return Err(TakError::Degenerate(format!("individual accuracy of task {i} is zero")));
    }
    let mean = merged.iter().zip(individual).map(|(m, i)| m / i).sum::<f64>() / merged.len() as f64;
    Ok(100.0 * mean)
}

/// Per-task reference accuracies used to normalize and constrain results.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub tests: Vec<Dataset>,
    pub individual: Vec<f64>,
    pub pretrained: Vec<f64>,
    /// Index of the control task for negation.
    pub control: usize,
}

impl EvalSuite {
    pub fn new(tests: Vec<Dataset>, individual: Vec<f64>, pretrained: Vec<f64>, control: usize) -> Result<Self> {
        let t = tests.len();
        if individual.len() != t || pretrained.len() != t {
            return Err(crate::error::shape_err(
                "EvalSuite",
                t,
                individual.len().min(pretrained.len()),
            ));
        }
        if control >= t {
            return Err(TakError::Parameter(format!(
                "control task {control} out of range for {t} tasks"
            )));
        }
        if individual.iter().chain(&pretrained).any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(TakError::Parameter("reference accuracies must lie in [0, 1]".into()));
        }
        Ok(Self {
            tests,
            individual,
            pretrained,
            control,
        })
    }
}

fn mean_sq_row_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.frobenius_norm().powi(2) / a.rows() as f64)
}

/// Mean over `data` of `‖f(θ0 + α_t τ_t + α_t′ τ_t′) − f(θ0 + α_t τ_t)‖²`.
pub fn representation_drift(
    model: &TaskModel,
    tau_t: &ParamVector,
    tau_other: &ParamVector,
    alpha_t: f64,
    alpha_other: f64,
    data: &Dataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(TakError::EmptyData("drift over an empty dataset"));
    }
    let base = tau_t.scaled(alpha_t);
    let mut joint = base.clone();
    joint.add_scaled(alpha_other, tau_other)?;
    let z_joint = model.outputs(&joint, &data.inputs)?;
    let z_base = model.outputs(&base, &data.inputs)?;
    mean_sq_row_diff(&z_joint, &z_base)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisentanglementMap {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    /// `xi[i][j]` for `(alpha1[i], alpha2[j])`.
    pub xi: Vec<Vec<f64>>,
}

impl DisentanglementMap {
    pub fn mean(&self) -> f64 {
        let n: usize = self.xi.iter().map(Vec::len).sum();
        self.xi.iter().flatten().sum::<f64>() / n as f64
    }

    /// Long-format CSV `alpha1,alpha2,xi`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha1,alpha2,xi\n");
        for (i, a1) in self.alpha1.iter().enumerate() {
            for (j, a2) in self.alpha2.iter().enumerate() {
                out.push_str(&format!("{a1},{a2},{}\n", self.xi[i][j]));
            }
        }
        out
    }
}

fn disagreement(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

/// `ξ(α1, α2) = Σ_t E_{x∼μ_t}[1(pred(θ0 + α_t τ_t) ≠ pred(θ0 + α1 τ1 + α2 τ2))]`.
pub fn disentanglement_map(
    model: &TaskModel,
    tau1: &ParamVector,
    tau2: &ParamVector,
    alpha1: &[f64],
    alpha2: &[f64],
    data1: &Dataset,
    data2: &Dataset,
) -> Result<DisentanglementMap> {
    if alpha1.is_empty() || alpha2.is_empty() {
        return Err(TakError::Parameter("disentanglement grids must be nonempty".into()));
    }
    if data1.is_empty() || data2.is_empty() {
        return Err(TakError::EmptyData("disentanglement needs data for both tasks"));
    }
    let preds = |tau: &ParamVector, data: &Dataset| -> Result<Vec<usize>> {
        Ok(predictions(&model.outputs(tau, &data.inputs)?, data.classes))
    };
    let single1: Vec<Vec<usize>> = alpha1
        .iter()
        .map(|&a| preds(&tau1.scaled(a), data1))
        .collect::<Result<_>>()?;
    let single2: Vec<Vec<usize>> = alpha2
        .iter()
        .map(|&a| preds(&tau2.scaled(a), data2))
        .collect::<Result<_>>()?;
    let mut xi = vec![vec![0.0; alpha2.len()]; alpha1.len()];
    for (i, &a1) in alpha1.iter().enumerate() {
        for (j, &a2) in alpha2.iter().enumerate() {
            if a1 == 0.0 && a2 == 0.0 {
                continue;
            }
            let mut joint = tau1.scaled(a1);
            joint.add_scaled(a2, tau2)?;
            xi[i][j] =
                disagreement(&single1[i], &preds(&joint, data1)?) + disagreement(&single2[j], &preds(&joint, data2)?);
        }
    }
    Ok(DisentanglementMap {
        alpha1: alpha1.to_vec(),
        alpha2: alpha2.to_vec(),
        xi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalcyReport {
    pub inlier: Vec<f64>,
    pub outlier: Vec<f64>,
    pub auc: f64,
}

impl NormalcyReport {
    /// CSV `split,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,score\n");
        for s in &self.inlier {
            out.push_str(&format!("inlier,{s}\n"));
        }
        for s in &self.outlier {
            out.push_str(&format!("outlier,{s}\n"));
        }
        out
    }
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half (Mann–Whitney).
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(TakError::EmptyData("AUC needs both positive and negative scores"));
    }
    let mut neg = negative.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positive {
        let below = neg.partition_point(|&v| v < p);
        let not_above = neg.partition_point(|&v| v <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (positive.len() as f64 * negative.len() as f64))
}

/// Per-example `‖J_θ f(x, θ0) τ‖²`.
pub fn normalcy_score(net: &NetSpec, theta0: &ParamVector, tau: &ParamVector, x: &Matrix) -> Result<Vec<f64>> {
    let j = jvp(net, theta0, x, tau)?;
    Ok((0..j.rows()).map(|r| j.row(r).iter().map(|v| v * v).sum()).collect())
}

pub fn normalcy_scores(
    net: &NetSpec,
    theta0: &ParamVector,
    tau: &ParamVector,
    inliers: &Dataset,
    outliers: &Dataset,
) -> Result<NormalcyReport> {
    if inliers.is_empty() || outliers.is_empty() {
        return Err(TakError::EmptyData("normalcy scores need inliers and outliers"));
    }
    let inlier = normalcy_score(net, theta0, tau, &inliers.inputs)?;
    let outlier = normalcy_score(net, theta0, tau, &outliers.inputs)?;
    let auc = auc(&inlier, &outlier)?;
    Ok(NormalcyReport { inlier, outlier, auc })
}
