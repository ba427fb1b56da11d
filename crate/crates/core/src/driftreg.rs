//! Quadratic drift penalties `β · τᵀ G τ` for a curvature surrogate `G`.
//!
//! Kronecker sources never materialize `B ⊗ A`: each layer contributes
//! `⟨Tˡ, B Tˡ Aᵀ⟩` where `Tˡ` is the row-major reshape of `τˡ`, with gradient
//! `2 vec_r(B Tˡ Aᵀ)`. A layer carrying a separate bias block splits `Tˡ`
//! into its weight columns (Kronecker term) and bias column (dense term).

use crate::curvature::{ExactGGN, KfacCurvature};
use crate::error::{shape_err, Result, TakError};
use crate::linalg::{kron_matvec, kron_quadratic_form, Matrix};
use crate::network::{LayerLayout, ParamLayout, ParamVector};
use crate::regfactors::MergedCurvature;

#[derive(Debug, Clone)]
struct DenseLayer {
    b: Matrix,
    a: Matrix,
    bias_block: Option<Matrix>,
}

impl DenseLayer {
    fn split(&self, ll: &LayerLayout, tau: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = ll.width();
        let mut weights = Vec::with_capacity(ll.out_dim * ll.in_dim);
        let mut bias = Vec::with_capacity(ll.out_dim);
        for i in 0..ll.out_dim {
            weights.extend_from_slice(&tau[i * w..i * w + ll.in_dim]);
            bias.push(tau[i * w + ll.in_dim]);
        }
        (weights, bias)
    }

    fn quadratic(&self, ll: &LayerLayout, tau: &[f64]) -> Result<f64> {
        match &self.bias_block {
            None => kron_quadratic_form(&self.b, &self.a, tau),
            Some(g) => {
                let (wt, bt) = self.split(ll, tau);
                Ok(kron_quadratic_form(&self.b, &self.a, &wt)? + g.quadratic_form(&bt)?)
            }
        }
    }

    /// `(Gˡ τˡ)` for this layer's block.
    fn apply(&self, ll: &LayerLayout, tau: &[f64]) -> Result<Vec<f64>> {
        match &self.bias_block {
            None => kron_matvec(&self.b, &self.a, tau),
            Some(g) => {
                let (wt, bt) = self.split(ll, tau);
                let gw = kron_matvec(&self.b, &self.a, &wt)?;
                let gb = g.matvec(&bt)?;
                let w = ll.width();
                let mut out = vec![0.0; tau.len()];
                for i in 0..ll.out_dim {
                    out[i * w..i * w + ll.in_dim].copy_from_slice(&gw[i * ll.in_dim..(i + 1) * ll.in_dim]);
                    out[i * w + ll.in_dim] = gb[i];
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Source {
    PerTask(Vec<(f64, Vec<DenseLayer>)>),
    Merged(Vec<DenseLayer>),
    Diagonal(Vec<f64>),
    Exact(Matrix),
}

/// Which curvature surrogate a penalty evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    PerTask,
    Merged,
    Diagonal,
    Exact,
}

#[derive(Debug, Clone)]
pub struct DriftPenalty {
    source: Source,
    layout: ParamLayout,
    beta: f64,
    last_layer_scale: f64,
    apply_every: usize,
    compensate: bool,
}

fn dense_layers(c: &KfacCurvature, layout: &ParamLayout) -> Result<Vec<DenseLayer>> {
    c.check_layout(layout)?;
    Ok(c.layers
        .iter()
        .map(|l| DenseLayer {
            b: l.b.to_dense(),
            a: l.a.to_dense(),
            bias_block: l.bias_block.clone(),
        })
        .collect())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(TakError::Parameter(format!(
            "penalty strength {beta} must be finite and nonnegative"
        )));
    }
    Ok(())
}

impl DriftPenalty {
    fn with_source(source: Source, layout: &ParamLayout, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self {
            source,
            layout: layout.clone(),
            beta,
            last_layer_scale: 1.0,
            apply_every: 1,
            compensate: false,
        })
    }

    /// `β Σ_t λ_t Σ_l ⟨Tˡ, B_tˡ Tˡ A_tˡᵀ⟩`.
    pub fn per_task(layout: &ParamLayout, tasks: &[(f64, &KfacCurvature)], beta: f64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(TakError::EmptyMerge {
                excluded: "<none>".into(),
            });
        }
        let list = tasks
            .iter()
            .map(|&(w, c)| {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(TakError::Parameter(format!(
                        "task weight {w} must be finite and nonnegative"
                    )));
                }
                Ok((w, dense_layers(c, layout)?))
            })
            .collect::<Result<_>>()?;
        Self::with_source(Source::PerTask(list), layout, beta)
    }

    pub fn merged(layout: &ParamLayout, merged: &MergedCurvature, beta: f64) -> Result<Self> {
        if merged.layers.len() != layout.n_layers() {
            return Err(shape_err(
                "merged curvature layers",
                layout.n_layers(),
                merged.layers.len(),
            ));
        }
        let layers: Vec<DenseLayer> = merged
            .layers
            .iter()
            .map(|l| DenseLayer {
                b: l.b.clone(),
                a: l.a.clone(),
                bias_block: l.bias_block.clone(),
            })
            .collect();
        for (dl, ll) in layers.iter().zip(&layout.layers) {
            let a_dim = if dl.bias_block.is_some() { ll.in_dim } else { ll.width() };
            if dl.a.rows() != a_dim || dl.b.rows() != ll.out_dim {
                return Err(shape_err(
                    "merged curvature factors",
                    format!("A {a_dim} / B {}", ll.out_dim),
                    format!("A {} / B {}", dl.a.rows(), dl.b.rows()),
                ));
            }
        }
        Self::with_source(Source::Merged(layers), layout, beta)
    }

    /// `β Σᵢ dᵢ τᵢ²`.
    pub fn diagonal(diag: &ParamVector, beta: f64) -> Result<Self> {
        if diag.values().iter().any(|&d| d < 0.0) {
            return Err(TakError::Contract("diagonal curvature must be nonnegative".into()));
        }
        Self::with_source(Source::Diagonal(diag.values().to_vec()), diag.layout(), beta)
    }

    /// `β τᵀ G τ` with a dense GGN.
    pub fn exact(layout: &ParamLayout, ggn: &ExactGGN, beta: f64) -> Result<Self> {
        if ggn.g.shape() != (layout.total(), layout.total()) {
            return Err(shape_err("exact GGN", layout.total(), ggn.g.rows()));
        }
        Self::with_source(Source::Exact(ggn.g.clone()), layout, beta)
    }

    /// Multiplies the last layer's contribution by `scale`.
    pub fn with_last_layer_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(TakError::Parameter(format!(
                "last-layer scale {scale} must be finite and nonnegative"
            )));
        }
        self.last_layer_scale = scale;
        Ok(self)
    }

    /// Applies the gradient only on steps divisible by `n`.
    pub fn with_apply_every(mut self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(TakError::Parameter("apply_every must be at least 1".into()));
        }
        self.apply_every = n;
        Ok(self)
    }

    /// Multiplies interval-applied gradients by `apply_every`.
    pub fn with_compensation(mut self, compensate: bool) -> Self {
        self.compensate = compensate;
        self
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn apply_every(&self) -> usize {
        self.apply_every
    }

    pub fn last_layer_scale(&self) -> f64 {
        self.last_layer_scale
    }

    pub fn kind(&self) -> SourceKind {
        match self.source {
            Source::PerTask(_) => SourceKind::PerTask,
            Source::Merged(_) => SourceKind::Merged,
            Source::Diagonal(_) => SourceKind::Diagonal,
            Source::Exact(_) => SourceKind::Exact,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn layer_scale(&self, l: usize) -> f64 {
        if l + 1 == self.layout.n_layers() {
            self.last_layer_scale
        } else {
            1.0
        }
    }

    /// Per-coordinate `√scale`, used by the dense sources.
    fn coordinate_root_scales(&self) -> Vec<f64> {
        let mut out = vec![1.0; self.layout.total()];
        if let Some(last) = self.layout.layers.last() {
            let r = self.last_layer_scale.sqrt();
            out[last.range()].iter_mut().for_each(|v| *v = r);
        }
        out
    }

    /// Unscaled `τᵀ G τ` (without `β`).
    fn quadratic(&self, tau: &ParamVector) -> Result<f64> {
        match &self.source {
            Source::PerTask(list) => {
                let mut total = 0.0;
                for (w, layers) in list {
                    total += w * self.kron_sum(layers, tau)?;
                }
                Ok(total)
            }
            Source::Merged(layers) => self.kron_sum(layers, tau),
            Source::Diagonal(d) => {
                let roots = self.coordinate_root_scales();
                Ok(tau
                    .values()
                    .iter()
                    .zip(d)
                    .zip(&roots)
                    .map(|((t, d), r)| d * (r * t) * (r * t))
                    .sum())
            }
            Source::Exact(g) => {
                let scaled = self.scale_coordinates(tau.values());
                g.quadratic_form(&scaled)
            }
        }
    }

    fn scale_coordinates(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.coordinate_root_scales())
            .map(|(x, r)| x * r)
            .collect()
    }

    fn kron_sum(&self, layers: &[DenseLayer], tau: &ParamVector) -> Result<f64> {
        let mut total = 0.0;
        for (l, (dl, ll)) in layers.iter().zip(&self.layout.layers).enumerate() {
            total += self.layer_scale(l) * dl.quadratic(ll, tau.layer(l))?;
        }
        Ok(total)
    }

    fn kron_grad(&self, layers: &[DenseLayer], tau: &ParamVector, weight: f64, out: &mut ParamVector) -> Result<()> {
        for (l, (dl, ll)) in layers.iter().zip(&self.layout.layers).enumerate() {
            let s = 2.0 * weight * self.layer_scale(l);
            if s == 0.0 {
                continue;
            }
            let g = dl.apply(ll, tau.layer(l))?;
            for (o, v) in out.layer_mut(l).iter_mut().zip(g) {
                *o += s * v;
            }
        }
        Ok(())
    }

    /// `β τᵀ G τ`.
    pub fn penalty(&self, tau: &ParamVector) -> Result<f64> {
        tau.check_layout(&self.layout, "penalty")?;
        if self.beta == 0.0 {
            return Ok(0.0);
        }
        Ok((self.beta * self.quadratic(tau)?).max(0.0))
    }

    /// `∇_τ β τᵀ G τ = 2 β G τ`.
    pub fn penalty_grad(&self, tau: &ParamVector) -> Result<ParamVector> {
        tau.check_layout(&self.layout, "penalty_grad")?;
        let mut out = ParamVector::zeros(&self.layout);
        if self.beta == 0.0 {
            return Ok(out);
        }
        match &self.source {
            Source::PerTask(list) => {
                for (w, layers) in list {
                    self.kron_grad(layers, tau, self.beta * w, &mut out)?;
                }
            }
            Source::Merged(layers) => self.kron_grad(layers, tau, self.beta, &mut out)?,
            Source::Diagonal(d) => {
                let roots = self.coordinate_root_scales();
                for (((o, t), d), r) in out.values_mut().iter_mut().zip(tau.values()).zip(d).zip(&roots) {
                    *o = 2.0 * self.beta * d * r * r * t;
                }
            }
            Source::Exact(g) => {
                let gv = g.matvec(&self.scale_coordinates(tau.values()))?;
                let scaled = self.scale_coordinates(&gv);
                for (o, v) in out.values_mut().iter_mut().zip(scaled) {
                    *o = 2.0 * self.beta * v;
                }
            }
        }
        Ok(out)
    }

    /// Whether the gradient is applied at `step`.
    pub fn applies_at(&self, step: usize) -> bool {
        step.is_multiple_of(self.apply_every)
    }

    /// The penalty gradient on scheduled steps (times `apply_every` when
    /// compensating), zero otherwise.
    pub fn scheduled_penalty_grad(&self, tau: &ParamVector, step: usize) -> Result<ParamVector> {
        if !self.applies_at(step) {
            tau.check_layout(&self.layout, "scheduled_penalty_grad")?;
            return Ok(ParamVector::zeros(&self.layout));
        }
        let mut g = self.penalty_grad(tau)?;
        if self.compensate && self.apply_every > 1 {
            g.scale(self.apply_every as f64);
        }
        Ok(g)
    }
}
