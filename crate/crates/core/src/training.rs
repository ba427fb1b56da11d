//! Mini-batch fine-tuning of a task vector `τ` with `θ0` frozen, minimizing
//! the task loss plus an optional drift penalty.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::curvature::{softmax_in, Criterion};
use crate::driftreg::DriftPenalty;
use crate::error::{shape_err, Result, TakError};
use crate::linalg::{Matrix, Rng};
use crate::linearized::Regime;
use crate::network::{
    backward_from, forward_capture, jvp_from, BatchActivations, ClassSlice, Dataset, NetSpec, ParamVector,
};
use crate::taskvec::TaskVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        /// Decoupled weight decay applied to `τ`.
        weight_decay: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::SgdMomentum { lr, .. } | Optimizer::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, new: f64) -> Self {
        match self {
            Optimizer::SgdMomentum { momentum, .. } => Optimizer::SgdMomentum { lr: new, momentum },
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => Optimizer::Adam {
                lr: new,
                beta1,
                beta2,
                eps,
                weight_decay,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    fn factor(&self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine if total == 0 => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Per-layer trainable flags; `None` trains every layer.
    #[serde(default)]
    pub trainable: Option<Vec<bool>>,
    pub criterion: Criterion,
    /// Record the loss every this many steps (and at the last step).
    pub log_every: usize,
    /// Keep the anchor's activations on the whole dataset between steps
    /// (linearized regime only).
    #[serde(default)]
    pub cache_anchor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Linearized,
            optimizer: Optimizer::adam(3e-4),
            schedule: Schedule::Cosine,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            trainable: None,
            criterion: Criterion::CrossEntropy,
            log_every: 1,
            cache_anchor: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let lr = self.optimizer.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(TakError::Parameter(format!("learning rate {lr} must be positive")));
        }
        if self.batch_size == 0 {
            return Err(TakError::Parameter("batch size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(TakError::Parameter("log_every must be at least 1".into()));
        }
        if let Some(mask) = &self.trainable {
            if mask.len() != n_layers {
                return Err(shape_err("trainable mask", n_layers, mask.len()));
            }
            if !mask.iter().any(|&t| t) {
                return Err(TakError::Parameter("at least one layer must be trainable".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    /// Penalty value `β τᵀGτ` before the step, when a penalty is present.
    pub penalty: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub tau: TaskVector,
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    pub seed: u64,
    pub wall_time_secs: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    task_id: &'a str,
    seed: u64,
    steps: usize,
    final_loss: Option<f64>,
    tau_norm: f64,
    wall_time_secs: f64,
    curve: &'a [CurvePoint],
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|c| c.loss)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&ReportJson {
            task_id: &self.tau.task_id,
            seed: self.seed,
            steps: self.steps,
            final_loss: self.final_loss(),
            tau_norm: self.tau.delta.norm(),
            wall_time_secs: self.wall_time_secs,
            curve: &self.curve,
        })
        .map_err(|e| TakError::Data(e.to_string()))
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,loss,penalty\n");
        for c in &self.curve {
            let pen = c.penalty.map(|p| p.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", c.step, c.loss, pen));
        }
        out
    }
}

/// Mean loss over the batch and its gradient with respect to the outputs.
/// Only the columns in `classes` take part; other columns get zero gradient.
/// The squared loss is `½‖f − onehot(y)‖²` over the slice.
pub fn criterion_loss(
    kind: Criterion,
    outputs: &Matrix,
    labels: &[usize],
    classes: ClassSlice,
) -> Result<(f64, Matrix)> {
    let (n, c) = outputs.shape();
    if labels.len() != n {
        return Err(shape_err("criterion labels", n, labels.len()));
    }
    if classes.end() > c || classes.count == 0 {
        return Err(TakError::Data(format!(
            "class slice {}..{} does not fit {c} outputs",
            classes.offset,
            classes.end()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| !classes.contains(y)) {
        return Err(TakError::Data(format!(
            "label {bad} outside class slice {}..{}",
            classes.offset,
            classes.end()
        )));
    }
    if n == 0 {
        return Err(TakError::EmptyData("loss of an empty batch"));
    }
    let inv = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, c);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = outputs.row(r);
        let g = grad.row_mut(r);
        match kind {
            Criterion::CrossEntropy => {
                let p = softmax_in(row, classes);
                let k = y - classes.offset;
                let logits = &row[classes.offset..classes.end()];
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - logits[k];
                for (j, pj) in p.into_iter().enumerate() {
                    g[classes.offset + j] = inv * pj;
                }
                g[y] -= inv;
            }
            Criterion::Squared => {
                for j in classes.offset..classes.end() {
                    let target = if j == y { 1.0 } else { 0.0 };
                    let d = row[j] - target;
                    total += 0.5 * d * d;
                    g[j] = inv * d;
                }
            }
        }
    }
    Ok((total * inv, grad))
}

struct OptState {
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl OptState {
    fn new(p: usize) -> Self {
        Self {
            first: vec![0.0; p],
            second: vec![0.0; p],
            t: 0,
        }
    }

    fn update(&mut self, opt: &Optimizer, lr: f64, tau: &mut [f64], grad: &[f64], frozen: &[bool]) {
        self.t += 1;
        match *opt {
            Optimizer::SgdMomentum { momentum, .. } => {
                for i in 0..tau.len() {
                    if frozen[i] {
                        continue;
                    }
                    self.first[i] = momentum * self.first[i] + grad[i];
                    tau[i] -= lr * self.first[i];
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..tau.len() {
                    if frozen[i] {
                        continue;
                    }
                    let g = grad[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let mhat = self.first[i] / c1;
                    let vhat = self.second[i] / c2;
                    tau[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * tau[i]);
                }
            }
        }
    }
}

fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::new(idx.len(), m.cols(), data).expect("rows copied from a valid matrix")
}

/// Optimizes `τ` on `data` starting from zero. Every step draws a batch from
/// an epoch-wise permutation seeded by `cfg.seed`.
pub fn finetune(
    net: &NetSpec,
    theta0: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    penalty: Option<&DriftPenalty>,
) -> Result<TrainReport> {
    let started = Instant::now();
    let layout = net.layout();
    theta0.check_layout(&layout, "finetune")?;
    cfg.validate(layout.n_layers())?;
    if data.is_empty() {
        return Err(TakError::EmptyData("fine-tuning needs at least one example"));
    }
    if data.input_dim() != net.input_dim() {
        return Err(shape_err("finetune data", net.input_dim(), data.input_dim()));
    }
    if let Some(p) = penalty {
        if p.layout() != &layout {
            return Err(shape_err("drift penalty layout", layout.total(), p.layout().total()));
        }
    }

    let mut frozen = vec![false; layout.total()];
    if let Some(mask) = &cfg.trainable {
        for (ll, &train) in layout.layers.iter().zip(mask) {
            if !train {
                frozen[ll.range()].iter_mut().for_each(|f| *f = true);
            }
        }
    }

    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = Rng::derive(cfg.seed, 0x7a1);
    let mut tau = ParamVector::zeros(&layout);
    let mut state = OptState::new(layout.total());
    let mut curve = Vec::new();

    let cache: Option<(Matrix, BatchActivations)> =
        if cfg.regime == Regime::Linearized && cfg.cache_anchor && total_steps > 0 {
            Some(forward_capture(net, theta0, &data.inputs)?)
        } else {
            None
        };

    let mut step = 0;
    for _ in 0..cfg.epochs {
        let perm = rng.permutation(n);
        for idx in perm.chunks(cfg.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (loss, mut grad) = match cfg.regime {
                Regime::Linearized => {
                    let (f0, acts) = match &cache {
                        Some((f0_all, acts_all)) => (select_rows(f0_all, idx), acts_all.select(idx)),
                        None => forward_capture(net, theta0, &select_rows(&data.inputs, idx))?,
                    };
                    let mut out = jvp_from(net, theta0, &acts, &tau)?;
                    out.add_scaled(1.0, &f0)?;
                    let (loss, cot) = criterion_loss(cfg.criterion, &out, &labels, data.classes)?;
                    (loss, backward_from(net, theta0, &acts, &cot)?.grad)
                }
                Regime::Nonlinear => {
                    let theta = theta0.plus(&tau)?;
                    let (out, acts) = forward_capture(net, &theta, &select_rows(&data.inputs, idx))?;
                    let (loss, cot) = criterion_loss(cfg.criterion, &out, &labels, data.classes)?;
                    (loss, backward_from(net, &theta, &acts, &cot)?.grad)
                }
            };
            if !loss.is_finite() {
                return Err(TakError::Divergence { step, loss });
            }
            let log = step % cfg.log_every == 0 || step + 1 == total_steps;
            let mut pen_value = None;
            if let Some(p) = penalty {
                if log {
                    pen_value = Some(p.penalty(&tau)?);
                }
                if p.applies_at(step) {
                    grad.add_scaled(1.0, &p.scheduled_penalty_grad(&tau, step)?)?;
                }
            }
            if log {
                curve.push(CurvePoint {
                    step,
                    loss,
                    penalty: pen_value,
                });
            }
            let lr = cfg.optimizer.lr() * cfg.schedule.factor(step, total_steps);
            state.update(&cfg.optimizer, lr, tau.values_mut(), grad.values(), &frozen);
            if tau.values().iter().any(|v| !v.is_finite()) {
                return Err(TakError::Divergence { step, loss: f64::NAN });
            }
            step += 1;
        }
    }

    Ok(TrainReport {
        tau: TaskVector::from_delta(theta0, tau, data.task_id.clone())?,
        curve,
        steps: step,
        seed: cfg.seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Split};

    fn blobs(seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let n = 200;
        let mut x = Matrix::zeros(n, 2);
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -2.0 } else { 2.0 };
            x.set(i, 0, c + 0.5 * rng.normal());
            x.set(i, 1, c + 0.5 * rng.normal());
            labels.push(y);
        }
        Dataset::new(x, labels, "blobs", Split::Train, ClassSlice { offset: 0, count: 2 }).unwrap()
    }

    fn small_net() -> (NetSpec, ParamVector) {
        let net = NetSpec::mlp(&[2, 8, 2], Activation::Tanh).unwrap();
        let theta0 = net.init_params(&mut Rng::new(5));
        (net, theta0)
    }

    #[test]
    fn criterion_closed_forms() {
        let slice = ClassSlice { offset: 0, count: 3 };
        let onehot = Matrix::from_rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        let (l, g) = criterion_loss(Criterion::Squared, &onehot, &[1, 0], slice).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        let uniform = Matrix::zeros(4, 3);
        let (l, _) = criterion_loss(Criterion::CrossEntropy, &uniform, &[0, 1, 2, 0], slice).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        assert!(matches!(
            criterion_loss(Criterion::CrossEntropy, &uniform, &[0, 1, 3, 0], slice),
            Err(TakError::Data(_))
        ));
    }

    #[test]
    fn criterion_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let slice = ClassSlice { offset: 1, count: 3 };
        for kind in [Criterion::CrossEntropy, Criterion::Squared] {
            let out = rng.normal_matrix(4, 5, 2.0);
            let labels = [1, 3, 2, 2];
            let (_, g) = criterion_loss(kind, &out, &labels, slice).unwrap();
            let eps = 1e-6;
            for i in 0..out.data().len() {
                let mut p = out.clone();
                p.data_mut()[i] += eps;
                let mut m = out.clone();
                m.data_mut()[i] -= eps;
                let fd = (criterion_loss(kind, &p, &labels, slice).unwrap().0
                    - criterion_loss(kind, &m, &labels, slice).unwrap().0)
                    / (2.0 * eps);
                let gi = g.data()[i];
                assert!(
                    (fd - gi).abs() <= 1e-6 * gi.abs().max(1e-3),
                    "{kind:?} entry {i}: {fd} vs {gi}"
                );
            }
        }
    }

    #[test]
    fn zero_epochs_leave_tau_zero() {
        let (net, theta0) = small_net();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let r = finetune(&net, &theta0, &blobs(1), &cfg, None).unwrap();
        assert!(r.tau.delta.is_zero());
        assert_eq!(r.steps, 0);
    }

    #[test]
    fn linearized_blobs_are_learned() {
        let (net, theta0) = small_net();
        let data = blobs(2);
        let cfg = TrainConfig {
            optimizer: Optimizer::adam(0.05),
            batch_size: 20,
            epochs: 20,
            ..TrainConfig::default()
        };
        let r = finetune(&net, &theta0, &data, &cfg, None).unwrap();
        assert_eq!(r.steps, 200);
        let model = crate::linearized::LinearizedModel::new(net.clone(), theta0.clone()).unwrap();
        let out = model.forward_delta(&r.tau.delta, &data.inputs).unwrap();
        let correct = (0..data.len())
            .filter(|&i| crate::network::argmax_in(out.row(i), data.classes) == data.labels[i])
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.99);
    }

    #[test]
    fn runs_are_bitwise_reproducible_and_cache_is_transparent() {
        let (net, theta0) = small_net();
        let data = blobs(3);
        let cfg = TrainConfig {
            optimizer: Optimizer::adam(0.01),
            batch_size: 16,
            epochs: 3,
            seed: 42,
            ..TrainConfig::default()
        };
        let a = finetune(&net, &theta0, &data, &cfg, None).unwrap();
        let b = finetune(&net, &theta0, &data, &cfg, None).unwrap();
        assert_eq!(a.tau, b.tau);
        assert_eq!(a.curve, b.curve);
        let cached = TrainConfig {
            cache_anchor: true,
            ..cfg.clone()
        };
        let c = finetune(&net, &theta0, &data, &cached, None).unwrap();
        assert_eq!(a.tau, c.tau);
    }

    #[test]
    fn zero_beta_penalty_changes_nothing() {
        let (net, theta0) = small_net();
        let data = blobs(4);
        let cfg = TrainConfig {
            optimizer: Optimizer::adam(0.01),
            epochs: 2,
            ..TrainConfig::default()
        };
        let diag = ParamVector::from_values(&net.layout(), vec![1.0; theta0.len()]).unwrap();
        let pen = DriftPenalty::diagonal(&diag, 0.0).unwrap();
        let a = finetune(&net, &theta0, &data, &cfg, None).unwrap();
        let b = finetune(&net, &theta0, &data, &cfg, Some(&pen)).unwrap();
        assert_eq!(a.tau, b.tau);
        assert!(b.curve.iter().all(|c| c.penalty == Some(0.0)));
    }

    #[test]
    fn masked_layers_stay_zero() {
        let (net, theta0) = small_net();
        for regime in [Regime::Linearized, Regime::Nonlinear] {
            let cfg = TrainConfig {
                regime,
                optimizer: Optimizer::Adam {
                    lr: 0.01,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    weight_decay: 0.1,
                },
                epochs: 2,
                trainable: Some(vec![false, true]),
                ..TrainConfig::default()
            };
            let r = finetune(&net, &theta0, &blobs(5), &cfg, None).unwrap();
            assert!(r.tau.delta.layer(0).iter().all(|&v| v == 0.0));
            assert!(r.tau.delta.layer(1).iter().any(|&v| v != 0.0));
        }
        let bad = TrainConfig {
            trainable: Some(vec![false, false]),
            ..TrainConfig::default()
        };
        assert!(finetune(&net, &theta0, &blobs(5), &bad, None).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let (net, theta0) = small_net();
        let cfg = TrainConfig {
            regime: Regime::Nonlinear,
            optimizer: Optimizer::SgdMomentum {
                lr: 1e305,
                momentum: 0.0,
            },
            schedule: Schedule::Constant,
            criterion: Criterion::Squared,
            epochs: 3,
            ..TrainConfig::default()
        };
        match finetune(&net, &theta0, &blobs(6), &cfg, None) {
            Err(TakError::Divergence { step, .. }) => assert!(step < 12),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn report_serialization() {
        let (net, theta0) = small_net();
        let cfg = TrainConfig {
            epochs: 1,
            log_every: 2,
            ..TrainConfig::default()
        };
        let r = finetune(&net, &theta0, &blobs(7), &cfg, None).unwrap();
        assert_eq!(r.curve.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 2, 3]);
        assert!(r.curve_csv().starts_with("step,loss,penalty\n0,"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["steps"], 4);
    }
}
