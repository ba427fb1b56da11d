//! Evaluation of a set of task vectors against a suite.

use serde::{Deserialize, Serialize};
use tak_core::linearized::TaskModel;
use tak_core::metrics::{
    accuracy, disentanglement_map, joint_accuracy, normalcy_scores, normalized_accuracy, representation_drift,
    DisentanglementMap, NormalcyReport,
};
use tak_core::network::{Dataset, ParamVector, Split};
use tak_core::synthtasks::Suite;
use tak_core::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedEval {
    pub alpha: f64,
    pub per_task: Vec<f64>,
    /// Mean per-task accuracy in percent.
    pub absolute: f64,
    /// Mean of merged / individual in percent.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub absolute: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegationRow {
    pub target: usize,
    pub alpha: f64,
    pub target_accuracy: f64,
    pub control_accuracy: f64,
    pub pretrained_target: f64,
    pub pretrained_control: f64,
    pub feasible: bool,
}

/// The anchor model plus the suite's train and test splits.
pub struct Evaluator<'a> {
    pub model: &'a TaskModel,
    pub suite: &'a Suite,
}

pub fn sum_scaled(layout_of: &ParamVector, parts: &[&ParamVector], alpha: f64) -> Result<ParamVector> {
    let mut out = ParamVector::zeros(layout_of.layout());
    for p in parts {
        out.add_scaled(alpha, p)?;
    }
    Ok(out)
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a TaskModel, suite: &'a Suite) -> Self {
        Self { model, suite }
    }

    fn acc(&self, tau: &ParamVector, data: &Dataset) -> Result<f64> {
        accuracy(|x| self.model.outputs(tau, x), data)
    }

    /// Test accuracy of one displacement on every task.
    pub fn per_task(&self, tau: &ParamVector) -> Result<Vec<f64>> {
        self.suite.tasks.iter().map(|td| self.acc(tau, &td.test)).collect()
    }

    /// Training-split accuracy on every task, used for picking `α`.
    pub fn per_task_train(&self, tau: &ParamVector) -> Result<Vec<f64>> {
        self.suite.tasks.iter().map(|td| self.acc(tau, &td.train)).collect()
    }

    pub fn task_accuracy(&self, tau: &ParamVector, task: usize) -> Result<f64> {
        self.acc(tau, &self.suite.tasks[task].test)
    }

    pub fn pretrained(&self) -> Result<Vec<f64>> {
        self.per_task(&ParamVector::zeros(self.model.anchor().layout()))
    }

    /// Each task's own vector on its own test split.
    pub fn individual(&self, taus: &[&ParamVector]) -> Result<Vec<f64>> {
        taus.iter()
            .enumerate()
            .map(|(t, tau)| self.task_accuracy(tau, t))
            .collect()
    }

    pub fn merged(&self, taus: &[&ParamVector], alpha: f64, individual: &[f64]) -> Result<MergedEval> {
        let tau = sum_scaled(self.model.anchor(), taus, alpha)?;
        let per_task = self.per_task(&tau)?;
        Ok(MergedEval {
            alpha,
            absolute: 100.0 * per_task.iter().sum::<f64>() / per_task.len() as f64,
            normalized: normalized_accuracy(&per_task, individual)?,
            per_task,
        })
    }

    /// Union-head accuracy of the composed model on every test example.
    pub fn joint(&self, taus: &[&ParamVector], alpha: f64) -> Result<f64> {
        let tau = sum_scaled(self.model.anchor(), taus, alpha)?;
        let tests: Vec<&Dataset> = self.suite.tasks.iter().map(|td| &td.test).collect();
        let all = Dataset::concat(&tests, "all", Split::Test)?;
        joint_accuracy(|x| self.model.outputs(&tau, x), &all)
    }

    pub fn sweep(&self, taus: &[&ParamVector], alphas: &[f64], individual: &[f64]) -> Result<Vec<SweepRow>> {
        let mut grid = alphas.to_vec();
        grid.sort_by(f64::total_cmp);
        grid.into_iter()
            .map(|alpha| {
                let m = self.merged(taus, alpha, individual)?;
                Ok(SweepRow {
                    alpha,
                    absolute: m.absolute,
                    normalized: m.normalized,
                })
            })
            .collect()
    }

    /// The grid value with the best mean training-split accuracy; ties keep
    /// the smallest `α`.
    pub fn best_alpha(&self, taus: &[&ParamVector], alphas: &[f64]) -> Result<f64> {
        let mut grid = alphas.to_vec();
        grid.sort_by(f64::total_cmp);
        let mut best = (f64::NEG_INFINITY, grid[0]);
        for alpha in grid {
            let tau = sum_scaled(self.model.anchor(), taus, alpha)?;
            let acc = self.per_task_train(&tau)?.iter().sum::<f64>();
            if acc > best.0 {
                best = (acc, alpha);
            }
        }
        Ok(best.1)
    }

    /// Mean drift on each task's test split when every other vector is added.
    pub fn drift(&self, taus: &[&ParamVector], alpha: f64) -> Result<Vec<f64>> {
        (0..taus.len())
            .map(|t| {
                let others: Vec<&ParamVector> = taus
                    .iter()
                    .enumerate()
                    .filter(|(s, _)| *s != t)
                    .map(|(_, v)| *v)
                    .collect();
                let rest = sum_scaled(self.model.anchor(), &others, 1.0)?;
                representation_drift(self.model, taus[t], &rest, alpha, alpha, &self.suite.tasks[t].test)
            })
            .collect()
    }

    pub fn disentanglement(
        &self,
        taus: &[&ParamVector],
        pair: [usize; 2],
        points: usize,
    ) -> Result<DisentanglementMap> {
        let grid: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
        let [i, j] = pair;
        disentanglement_map(
            self.model,
            taus[i],
            taus[j],
            &grid,
            &grid,
            &self.suite.tasks[i].test,
            &self.suite.tasks[j].test,
        )
    }

    /// Normalcy scores of each task vector: own test split against all others.
    pub fn localization(&self, taus: &[&ParamVector]) -> Result<Vec<NormalcyReport>> {
        (0..taus.len())
            .map(|t| {
                let others: Vec<&Dataset> = self
                    .suite
                    .tasks
                    .iter()
                    .enumerate()
                    .filter(|(s, _)| *s != t)
                    .map(|(_, td)| &td.test)
                    .collect();
                let outliers = Dataset::concat(&others, "others", Split::Test)?;
                normalcy_scores(
                    self.model.net(),
                    self.model.anchor(),
                    taus[t],
                    &self.suite.tasks[t].test,
                    &outliers,
                )
            })
            .collect()
    }

    /// For every target other than `control`, the most negative grid value
    /// keeping the control task at `fraction` of its pre-trained accuracy.
    pub fn negation(
        &self,
        taus: &[&ParamVector],
        control: usize,
        grid: &[f64],
        fraction: f64,
        pretrained: &[f64],
    ) -> Result<Vec<NegationRow>> {
        let mut alphas = grid.to_vec();
        alphas.sort_by(f64::total_cmp);
        let floor = fraction * pretrained[control];
        let mut rows = Vec::new();
        for (t, tau) in taus.iter().enumerate() {
            if t == control {
                continue;
            }
            let mut row = NegationRow {
                target: t,
                alpha: 0.0,
                target_accuracy: pretrained[t],
                control_accuracy: pretrained[control],
                pretrained_target: pretrained[t],
                pretrained_control: pretrained[control],
                feasible: false,
            };
            for &alpha in &alphas {
                let scaled = tau.scaled(alpha);
                let control_accuracy = self.task_accuracy(&scaled, control)?;
                if control_accuracy >= floor {
                    row.alpha = alpha;
                    row.control_accuracy = control_accuracy;
                    row.target_accuracy = self.task_accuracy(&scaled, t)?;
                    row.feasible = true;
                    break;
                }
            }
            rows.push(row);
        }
        Ok(rows)
    }
}
