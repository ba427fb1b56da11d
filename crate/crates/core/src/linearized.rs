//! First-order Taylor model of a network around an anchor `θ0`:
//! `f_lin(x, θ) = f(x, θ0) + J_θ f(x, θ0)(θ − θ0)`.
//!
//! [`TaskModel`] wraps either that model or the plain network behind one
//! evaluation contract parameterized by the displacement `τ = θ − θ0`, so
//! training and evaluation do not care which regime they run in.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::linalg::Matrix;
use crate::network::{backward, forward, forward_and_jvp, jvp, NetSpec, ParamVector};

#[derive(Debug, Clone)]
pub struct LinearizedModel {
    net: NetSpec,
    theta0: ParamVector,
}

impl LinearizedModel {
    pub fn new(net: NetSpec, theta0: ParamVector) -> Result<Self> {
        theta0.check_layout(&net.layout(), "LinearizedModel::new")?;
        Ok(Self { net, theta0 })
    }

    pub fn net(&self) -> &NetSpec {
        &self.net
    }

    pub fn anchor(&self) -> &ParamVector {
        &self.theta0
    }

    /// `f(x, θ0)`; callers may keep this around and pass it to
    /// [`LinearizedModel::forward_delta_with_anchor`] across epochs.
    pub fn anchor_outputs(&self, x: &Matrix) -> Result<Matrix> {
        forward(&self.net, &self.theta0, x)
    }

    /// `f_lin(x, θ)`.
    pub fn lin_forward(&self, theta: &ParamVector, x: &Matrix) -> Result<Matrix> {
        let tau = theta.minus(&self.theta0)?;
        self.forward_delta(&tau, x)
    }

    /// `f_lin(x, θ0 + τ)`.
    pub fn forward_delta(&self, tau: &ParamVector, x: &Matrix) -> Result<Matrix> {
        let (mut out, dir) = forward_and_jvp(&self.net, &self.theta0, x, tau)?;
        out.add_scaled(1.0, &dir)?;
        Ok(out)
    }

    /// Same as [`LinearizedModel::forward_delta`] with `f(x, θ0)` supplied.
    pub fn forward_delta_with_anchor(&self, tau: &ParamVector, x: &Matrix, anchor_out: &Matrix) -> Result<Matrix> {
        if anchor_out.shape() != (x.rows(), self.net.output_dim()) {
            return Err(shape_err(
                "anchor outputs",
                format!("{}x{}", x.rows(), self.net.output_dim()),
                format!("{}x{}", anchor_out.rows(), anchor_out.cols()),
            ));
        }
        let mut out = jvp(&self.net, &self.theta0, x, tau)?;
        out.add_scaled(1.0, anchor_out)?;
        Ok(out)
    }

    /// `J_θ f(x, θ0)ᵀ · upstream`; independent of `θ` apart from the layout
    /// check.
    pub fn lin_backward(&self, theta: &ParamVector, x: &Matrix, upstream: &Matrix) -> Result<ParamVector> {
        theta.check_same_layout(&self.theta0, "lin_backward")?;
        self.backward_anchor(x, upstream)
    }

    pub fn backward_anchor(&self, x: &Matrix, upstream: &Matrix) -> Result<ParamVector> {
        Ok(backward(&self.net, &self.theta0, x, upstream)?.grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Linearized,
    Nonlinear,
}

/// A network anchored at `θ0`, evaluated at `θ0 + τ` in either regime.
#[derive(Debug, Clone)]
pub struct TaskModel {
    lin: LinearizedModel,
    regime: Regime,
}

impl TaskModel {
    pub fn new(net: NetSpec, theta0: ParamVector, regime: Regime) -> Result<Self> {
        Ok(Self {
            lin: LinearizedModel::new(net, theta0)?,
            regime,
        })
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn net(&self) -> &NetSpec {
        self.lin.net()
    }

    pub fn anchor(&self) -> &ParamVector {
        self.lin.anchor()
    }

    pub fn linearized(&self) -> &LinearizedModel {
        &self.lin
    }

    /// Outputs at `θ0 + τ`.
    pub fn outputs(&self, tau: &ParamVector, x: &Matrix) -> Result<Matrix> {
        match self.regime {
            Regime::Linearized => self.lin.forward_delta(tau, x),
            Regime::Nonlinear => forward(self.net(), &self.anchor().plus(tau)?, x),
        }
    }

    /// `∂⟨upstream, outputs⟩ / ∂τ` at `θ0 + τ`.
    pub fn vjp(&self, tau: &ParamVector, x: &Matrix, upstream: &Matrix) -> Result<ParamVector> {
        match self.regime {
            Regime::Linearized => {
                tau.check_same_layout(self.anchor(), "TaskModel::vjp")?;
                self.lin.backward_anchor(x, upstream)
            }
            Regime::Nonlinear => Ok(backward(self.net(), &self.anchor().plus(tau)?, x, upstream)?.grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::network::Activation;

    fn random_direction(theta: &ParamVector, rng: &mut Rng) -> ParamVector {
        ParamVector::from_values(theta.layout(), (0..theta.len()).map(|_| rng.normal()).collect()).unwrap()
    }

    fn setup(seed: u64) -> (LinearizedModel, Matrix, Rng) {
        let net = NetSpec::mlp(&[3, 6, 4, 3], Activation::Tanh).unwrap();
        let mut rng = Rng::new(seed);
        let theta0 = net.init_params(&mut rng);
        let x = rng.normal_matrix(5, 3, 1.0);
        (LinearizedModel::new(net, theta0).unwrap(), x, rng)
    }

    #[test]
    fn zero_displacement_is_plain_forward() {
        let (m, x, _) = setup(1);
        let a = m.lin_forward(m.anchor(), &x).unwrap();
        assert_eq!(a, forward(m.net(), m.anchor(), &x).unwrap());
    }

    #[test]
    fn linear_network_linearization_is_exact() {
        let net = NetSpec::new(vec![3, 2], vec![], vec![true]).unwrap();
        let mut rng = Rng::new(4);
        let theta0 = net.init_params(&mut rng);
        let m = LinearizedModel::new(net.clone(), theta0.clone()).unwrap();
        let x = rng.normal_matrix(4, 3, 1.0);
        for _ in 0..3 {
            let theta = theta0.plus(&random_direction(&theta0, &mut rng)).unwrap();
            let lin = m.lin_forward(&theta, &x).unwrap();
            let full = forward(&net, &theta, &x).unwrap();
            assert!(lin.sub(&full).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn linearization_error_is_second_order() {
        let (m, x, mut rng) = setup(2);
        let v = random_direction(m.anchor(), &mut rng);
        let err = |eps: f64| {
            let theta = m.anchor().plus(&v.scaled(eps)).unwrap();
            let lin = m.lin_forward(&theta, &x).unwrap();
            lin.sub(&forward(m.net(), &theta, &x).unwrap()).unwrap().max_abs()
        };
        let ratio = err(1e-2) / err(1e-3);
        assert!(ratio > 50.0 && ratio < 200.0, "ratio {ratio}");
    }

    #[test]
    fn gradient_is_independent_of_theta() {
        let (m, x, mut rng) = setup(3);
        let s = rng.normal_matrix(5, 3, 1.0);
        let t1 = m.anchor().plus(&random_direction(m.anchor(), &mut rng)).unwrap();
        let t2 = m.anchor().plus(&random_direction(m.anchor(), &mut rng)).unwrap();
        assert_eq!(
            m.lin_backward(&t1, &x, &s).unwrap(),
            m.lin_backward(&t2, &x, &s).unwrap()
        );
        let zero = Matrix::zeros(5, 3);
        assert!(m.lin_backward(&t1, &x, &zero).unwrap().is_zero());
    }

    #[test]
    fn jacobians_coincide_at_anchor() {
        let (m, x, mut rng) = setup(5);
        let v = random_direction(m.anchor(), &mut rng);
        // Directional derivative of f_lin at θ0 by central differences is
        // exact because f_lin is affine in θ.
        let eps = 0.5;
        let plus = m.forward_delta(&v.scaled(eps), &x).unwrap();
        let minus = m.forward_delta(&v.scaled(-eps), &x).unwrap();
        let mut fd = plus.sub(&minus).unwrap();
        fd.scale(1.0 / (2.0 * eps));
        let exact = jvp(m.net(), m.anchor(), &x, &v).unwrap();
        let rel = fd.sub(&exact).unwrap().frobenius_norm() / exact.frobenius_norm();
        assert!(rel < 1e-10, "{rel}");
    }

    #[test]
    fn anchor_cache_matches_recompute() {
        let (m, x, mut rng) = setup(6);
        let tau = random_direction(m.anchor(), &mut rng);
        let cached = m.anchor_outputs(&x).unwrap();
        let a = m.forward_delta_with_anchor(&tau, &x, &cached).unwrap();
        let b = m.forward_delta(&tau, &x).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-14);
        assert!(m.forward_delta_with_anchor(&tau, &x, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn task_model_regimes_agree_at_zero_displacement() {
        let (m, x, mut rng) = setup(7);
        let s = rng.normal_matrix(5, 3, 1.0);
        let zero = ParamVector::zeros(m.anchor().layout());
        let lin = TaskModel::new(m.net().clone(), m.anchor().clone(), Regime::Linearized).unwrap();
        let non = TaskModel::new(m.net().clone(), m.anchor().clone(), Regime::Nonlinear).unwrap();
        let a = lin.outputs(&zero, &x).unwrap();
        let b = non.outputs(&zero, &x).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-14);
        assert_eq!(lin.vjp(&zero, &x, &s).unwrap(), non.vjp(&zero, &x, &s).unwrap());
    }
}
