//! Dense feedforward classifiers with reverse-mode gradients, tangent
//! propagation and opt-in activation capture.
//!
//! Layer `l` computes `zˡ = Wˡ aˡ + bˡ`. Parameters are stored per layer as the
//! row-major flattening of the bias-augmented matrix `[Wˡ | bˡ]`
//! (`D1 × (D2 + 1)`), so a layer's Kronecker input factor simply acts on the
//! augmented input `[aˡ; 1]`. Hidden layers apply their activation to `zˡ`; the
//! last layer's `zᴸ` is the raw network output (no softmax).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{write_file, ByteReader, ByteWriter};
use crate::error::{shape_err, Result, TakError};
use crate::linalg::{dot, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the activation value `a`.
    /// ReLU uses the subgradient 0 at exactly 0.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_dims: Vec<usize>,
    /// One per hidden layer.
    pub activations: Vec<Activation>,
    /// One per layer.
    pub bias: Vec<bool>,
}

impl NetSpec {
    pub fn new(layer_dims: Vec<usize>, activations: Vec<Activation>, bias: Vec<bool>) -> Result<Self> {
        let spec = Self {
            layer_dims,
            activations,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Multi-layer perceptron with one activation for every hidden layer and
    /// biases everywhere.
    pub fn mlp(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        let layers = layer_dims.len().saturating_sub(1);
        Self::new(
            layer_dims.to_vec(),
            vec![activation; layers.saturating_sub(1)],
            vec![true; layers],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(TakError::Contract("a network needs at least one layer".into()));
        }
        if self.layer_dims.contains(&0) {
            return Err(TakError::Contract("layer dimensions must be positive".into()));
        }
        let layers = self.n_layers();
        if self.activations.len() != layers - 1 {
            return Err(shape_err("NetSpec activations", layers - 1, self.activations.len()));
        }
        if self.bias.len() != layers {
            return Err(shape_err("NetSpec bias flags", layers, self.bias.len()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layout(&self) -> ParamLayout {
        let mut offset = 0;
        let layers = (0..self.n_layers())
            .map(|l| {
                let layer = LayerLayout {
                    offset,
                    out_dim: self.layer_dims[l + 1],
                    in_dim: self.layer_dims[l],
                    has_bias: self.bias[l],
                };
                offset += layer.len();
                layer
            })
            .collect();
        ParamLayout { layers }
    }

    /// Gaussian initialization with variance `1 / fan_in`; biases start at 0.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let layout = self.layout();
        let mut theta = ParamVector::zeros(&layout);
        for (l, layer) in layout.layers.iter().enumerate() {
            let std = (1.0 / layer.in_dim as f64).sqrt();
            let slice = theta.layer_mut(l);
            for i in 0..layer.out_dim {
                for k in 0..layer.in_dim {
                    slice[i * layer.width() + k] = std * rng.normal();
                }
            }
        }
        theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub offset: usize,
    /// `D1`, number of output units.
    pub out_dim: usize,
    /// `D2`, number of input units (before bias augmentation).
    pub in_dim: usize,
    pub has_bias: bool,
}

impl LayerLayout {
    /// Row length of the flattened (possibly bias-augmented) weight matrix.
    pub fn width(&self) -> usize {
        self.in_dim + usize::from(self.has_bias)
    }

    pub fn len(&self) -> usize {
        self.out_dim * self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub layers: Vec<LayerLayout>,
}

impl ParamLayout {
    pub fn total(&self) -> usize {
        self.layers.last().map_or(0, |l| l.offset + l.len())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Flattened parameters (or a direction / task vector) with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            values: vec![0.0; layout.total()],
            layout: layout.clone(),
        }
    }

    pub fn from_values(layout: &ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(shape_err("ParamVector::from_values", layout.total(), values.len()));
        }
        Ok(Self {
            values,
            layout: layout.clone(),
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.values[self.layout.layers[l].range()]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.layout.layers[l].range();
        &mut self.values[r]
    }

    /// Layer `l` reshaped row-major to `D1 × width`.
    pub fn layer_matrix(&self, l: usize) -> Matrix {
        let ll = self.layout.layers[l];
        Matrix::new(ll.out_dim, ll.width(), self.layer(l).to_vec()).expect("layer slice matches its layout")
    }

    pub fn check_same_layout(&self, other: &ParamVector, context: &'static str) -> Result<()> {
        if self.layout != other.layout {
            return Err(shape_err(
                context,
                format!("layout with {} parameters", self.layout.total()),
                format!("layout with {} parameters", other.layout.total()),
            ));
        }
        Ok(())
    }

    pub fn check_layout(&self, layout: &ParamLayout, context: &'static str) -> Result<()> {
        if &self.layout != layout {
            return Err(shape_err(
                context,
                format!("layout with {} parameters", layout.total()),
                format!("layout with {} parameters", self.layout.total()),
            ));
        }
        Ok(())
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &ParamVector) -> Result<()> {
        self.check_same_layout(other, "ParamVector::add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn plus(&self, other: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.add_scaled(1.0, other)?;
        Ok(out)
    }

    pub fn minus(&self, other: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.add_scaled(-1.0, other)?;
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_layout(other, "ParamVector::dot")?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Contiguous block of output classes owned by one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSlice {
    pub offset: usize,
    pub count: usize,
}

impl ClassSlice {
    pub fn contains(&self, label: usize) -> bool {
        label >= self.offset && label < self.offset + self.count
    }

    pub fn end(&self) -> usize {
        self.offset + self.count
    }
}

/// Labelled inputs. Labels are indices into the network's full output head;
/// `classes` restricts which outputs compete for this dataset's predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub task_id: String,
    pub split: Split,
    pub classes: ClassSlice,
}

impl Dataset {
    pub fn new(
        inputs: Matrix,
        labels: Vec<usize>,
        task_id: impl Into<String>,
        split: Split,
        classes: ClassSlice,
    ) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(shape_err("Dataset::new", inputs.rows(), labels.len()));
        }
        if classes.count == 0 {
            return Err(TakError::Data("dataset class slice is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| !classes.contains(y)) {
            return Err(TakError::Data(format!(
                "label {bad} outside class slice {}..{}",
                classes.offset,
                classes.end()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            task_id: task_id.into(),
            split,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        Dataset {
            inputs: Matrix::new(indices.len(), d, data).expect("rows copied from a valid matrix"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            task_id: self.task_id.clone(),
            split: self.split,
            classes: self.classes,
        }
    }

    /// First `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Concatenates datasets sharing an input dimension; the class slice is
    /// widened to cover every part.
    pub fn concat(parts: &[&Dataset], task_id: impl Into<String>, split: Split) -> Result<Dataset> {
        let first = parts.first().ok_or(TakError::EmptyData("nothing to concatenate"))?;
        let d = first.input_dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut lo = usize::MAX;
        let mut hi = 0;
        for p in parts {
            if p.input_dim() != d {
                return Err(shape_err("Dataset::concat", d, p.input_dim()));
            }
            data.extend_from_slice(p.inputs.data());
            labels.extend_from_slice(&p.labels);
            lo = lo.min(p.classes.offset);
            hi = hi.max(p.classes.end());
        }
        let n = labels.len();
        Dataset::new(
            Matrix::new(n, d, data)?,
            labels,
            task_id,
            split,
            ClassSlice {
                offset: lo,
                count: hi - lo,
            },
        )
    }
}

/// Per-layer inputs `aˡ` (not augmented) and pre-activations `zˡ`.
#[derive(Debug, Clone)]
pub struct BatchActivations {
    pub inputs: Vec<Matrix>,
    pub preacts: Vec<Matrix>,
}

impl BatchActivations {
    /// Rows `indices` of every captured matrix.
    pub fn select(&self, indices: &[usize]) -> BatchActivations {
        let pick = |m: &Matrix| {
            let mut data = Vec::with_capacity(indices.len() * m.cols());
            for &i in indices {
                data.extend_from_slice(m.row(i));
            }
            Matrix::new(indices.len(), m.cols(), data).expect("rows copied from a valid matrix")
        };
        BatchActivations {
            inputs: self.inputs.iter().map(pick).collect(),
            preacts: self.preacts.iter().map(pick).collect(),
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Backward {
    /// `Σₙ (J_θ fₙ)ᵀ sₙ`.
    pub grad: ParamVector,
    /// Per layer, the rows `(J_{zₙˡ} fₙ)ᵀ sₙ` (N × D1).
    pub preact_grads: Vec<Matrix>,
}

fn check_theta(net: &NetSpec, theta: &ParamVector, context: &'static str) -> Result<()> {
    theta.check_layout(&net.layout(), context)
}

fn check_input(net: &NetSpec, x: &Matrix, context: &'static str) -> Result<()> {
    if x.cols() != net.input_dim() {
        return Err(shape_err(
            context,
            format!("{} input columns", net.input_dim()),
            x.cols(),
        ));
    }
    Ok(())
}

/// `z = a Wᵀ (+ b)` for one layer.
fn affine(layer: &LayerLayout, params: &[f64], a: &Matrix) -> Matrix {
    let (n, d2, d1, w) = (a.rows(), layer.in_dim, layer.out_dim, layer.width());
    let mut z = Matrix::zeros(n, d1);
    for r in 0..n {
        let arow = a.row(r);
        let zrow = z.row_mut(r);
        for (i, zi) in zrow.iter_mut().enumerate() {
            let wrow = &params[i * w..(i + 1) * w];
            let mut s = dot(arow, &wrow[..d2]);
            if layer.has_bias {
                s += wrow[d2];
            }
            *zi = s;
        }
    }
    z
}

fn activate(act: Activation, z: &Matrix) -> Matrix {
    let data = z.data().iter().map(|&v| act.apply(v)).collect();
    Matrix::new(z.rows(), z.cols(), data).expect("same shape")
}

fn forward_impl(net: &NetSpec, theta: &ParamVector, x: &Matrix, capture: bool) -> (Matrix, Option<BatchActivations>) {
    let layout = theta.layout();
    let mut inputs = Vec::new();
    let mut preacts = Vec::new();
    let mut a = x.clone();
    let last = net.n_layers() - 1;
    for (l, layer) in layout.layers.iter().enumerate() {
        let z = affine(layer, theta.layer(l), &a);
        let next = if l < last {
            activate(net.activations[l], &z)
        } else {
            z.clone()
        };
        if capture {
            inputs.push(std::mem::replace(&mut a, next));
            preacts.push(z);
        } else {
            a = next;
        }
    }
    let acts = capture.then_some(BatchActivations { inputs, preacts });
    (a, acts)
}

/// `f(x, θ)` for every row of `x`.
pub fn forward(net: &NetSpec, theta: &ParamVector, x: &Matrix) -> Result<Matrix> {
    check_theta(net, theta, "forward")?;
    check_input(net, x, "forward")?;
    Ok(forward_impl(net, theta, x, false).0)
}

/// Forward pass that also records every layer's input and pre-activation.
pub fn forward_capture(net: &NetSpec, theta: &ParamVector, x: &Matrix) -> Result<(Matrix, BatchActivations)> {
    check_theta(net, theta, "forward")?;
    check_input(net, x, "forward")?;
    let (out, acts) = forward_impl(net, theta, x, true);
    Ok((out, acts.expect("capture requested")))
}

/// Back-propagates `upstream` (N × C) from a captured forward pass.
pub fn backward_from(
    net: &NetSpec,
    theta: &ParamVector,
    acts: &BatchActivations,
    upstream: &Matrix,
) -> Result<Backward> {
    let layout = theta.layout();
    let n = acts.inputs[0].rows();
    if upstream.shape() != (n, net.output_dim()) {
        return Err(shape_err(
            "backward upstream",
            format!("{n}x{}", net.output_dim()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    let layers = net.n_layers();
    let mut grad = ParamVector::zeros(layout);
    let mut preact_grads = vec![Matrix::zeros(0, 0); layers];
    let mut g = upstream.clone();
    for l in (0..layers).rev() {
        let layer = layout.layers[l];
        let (d2, w) = (layer.in_dim, layer.width());
        let a = &acts.inputs[l];
        {
            let gl = grad.layer_mut(l);
            for r in 0..n {
                let arow = a.row(r);
                for (i, &gi) in g.row(r).iter().enumerate() {
                    if gi == 0.0 {
                        continue;
                    }
                    let out = &mut gl[i * w..(i + 1) * w];
                    for (o, &av) in out[..d2].iter_mut().zip(arow) {
                        *o += gi * av;
                    }
                    if layer.has_bias {
                        out[d2] += gi;
                    }
                }
            }
        }
        if l > 0 {
            let params = theta.layer(l);
            let act = net.activations[l - 1];
            let zprev = &acts.preacts[l - 1];
            let mut h = Matrix::zeros(n, d2);
            for r in 0..n {
                let hrow = h.row_mut(r);
                for (i, &gi) in g.row(r).iter().enumerate() {
                    if gi == 0.0 {
                        continue;
                    }
                    let wrow = &params[i * w..i * w + d2];
                    for (hk, &wk) in hrow.iter_mut().zip(wrow) {
                        *hk += gi * wk;
                    }
                }
                let arow = a.row(r);
                let zrow = zprev.row(r);
                for k in 0..d2 {
                    hrow[k] *= act.derivative(zrow[k], arow[k]);
                }
            }
            preact_grads[l] = std::mem::replace(&mut g, h);
        } else {
            preact_grads[0] = std::mem::replace(&mut g, Matrix::zeros(0, 0));
        }
    }
    Ok(Backward { grad, preact_grads })
}

/// Reverse pass: parameter gradient `Σₙ (J_θ fₙ)ᵀ sₙ` and all pre-activation
/// cotangents.
pub fn backward(net: &NetSpec, theta: &ParamVector, x: &Matrix, upstream: &Matrix) -> Result<Backward> {
    let (_, acts) = forward_capture(net, theta, x)?;
    backward_from(net, theta, &acts, upstream)
}

/// Per-row parameter gradients as a `rows × P` matrix; row `r` is
/// `(J_θ f(x_r))ᵀ s_r`, assembled from the outer products `gˡ ⊗ [aˡ; 1]`.
pub fn per_sample_grads(net: &NetSpec, theta: &ParamVector, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    let (_, acts) = forward_capture(net, theta, x)?;
    let back = backward_from(net, theta, &acts, upstream)?;
    let layout = theta.layout();
    let n = x.rows();
    let p = layout.total();
    let mut out = Matrix::zeros(n, p);
    for (l, layer) in layout.layers.iter().enumerate() {
        let (d2, w) = (layer.in_dim, layer.width());
        let a = &acts.inputs[l];
        let g = &back.preact_grads[l];
        for r in 0..n {
            let row = &mut out.row_mut(r)[layer.range()];
            let arow = a.row(r);
            for (i, &gi) in g.row(r).iter().enumerate() {
                let dst = &mut row[i * w..(i + 1) * w];
                for k in 0..d2 {
                    dst[k] = gi * arow[k];
                }
                if layer.has_bias {
                    dst[d2] = gi;
                }
            }
        }
    }
    Ok(out)
}

/// Jointly evaluates `f(x, θ)` and the directional derivative `J_θ f(x, θ) v`.
pub fn forward_and_jvp(net: &NetSpec, theta: &ParamVector, x: &Matrix, v: &ParamVector) -> Result<(Matrix, Matrix)> {
    check_theta(net, theta, "jvp")?;
    check_input(net, x, "jvp")?;
    v.check_same_layout(theta, "jvp direction")?;
    let layout = theta.layout();
    let last = net.n_layers() - 1;
    let n = x.rows();
    let mut a = x.clone();
    let mut da = Matrix::zeros(n, x.cols());
    for (l, layer) in layout.layers.iter().enumerate() {
        let (d1, d2, w) = (layer.out_dim, layer.in_dim, layer.width());
        let params = theta.layer(l);
        let dir = v.layer(l);
        let z = affine(layer, params, &a);
        // ż = V a (+ v_b) + W ȧ
        let mut dz = affine(layer, dir, &a);
        if l > 0 {
            for r in 0..n {
                let darow = da.row(r);
                let dzrow = dz.row_mut(r);
                for (i, dzi) in dzrow.iter_mut().enumerate().take(d1) {
                    *dzi += dot(darow, &params[i * w..i * w + d2]);
                }
            }
        }
        if l < last {
            let act = net.activations[l];
            let next = activate(act, &z);
            for (idx, dv) in dz.data_mut().iter_mut().enumerate() {
                *dv *= act.derivative(z.data()[idx], next.data()[idx]);
            }
            a = next;
            da = dz;
        } else {
            return Ok((z, dz));
        }
    }
    unreachable!("network has at least one layer")
}

/// Tangent pass reusing activations captured at `theta`; returns
/// `J_θ f(x, θ) v` for the captured rows.
pub fn jvp_from(net: &NetSpec, theta: &ParamVector, acts: &BatchActivations, v: &ParamVector) -> Result<Matrix> {
    check_theta(net, theta, "jvp")?;
    v.check_same_layout(theta, "jvp direction")?;
    let layout = theta.layout();
    let last = net.n_layers() - 1;
    let n = acts.inputs[0].rows();
    let mut da = Matrix::zeros(0, 0);
    for (l, layer) in layout.layers.iter().enumerate() {
        let (d2, w) = (layer.in_dim, layer.width());
        let params = theta.layer(l);
        let mut dz = affine(layer, v.layer(l), &acts.inputs[l]);
        if l > 0 {
            for r in 0..n {
                let darow = da.row(r);
                for (i, dzi) in dz.row_mut(r).iter_mut().enumerate() {
                    *dzi += dot(darow, &params[i * w..i * w + d2]);
                }
            }
        }
        if l == last {
            return Ok(dz);
        }
        let act = net.activations[l];
        let z = &acts.preacts[l];
        let a = &acts.inputs[l + 1];
        for (idx, dv) in dz.data_mut().iter_mut().enumerate() {
            *dv *= act.derivative(z.data()[idx], a.data()[idx]);
        }
        da = dz;
    }
    unreachable!("network has at least one layer")
}

/// `J_θ f(x, θ) v` per row via tangent propagation.
pub fn jvp(net: &NetSpec, theta: &ParamVector, x: &Matrix, v: &ParamVector) -> Result<Matrix> {
    Ok(forward_and_jvp(net, theta, x, v)?.1)
}

/// Index of the largest entry in `row[slice]`, ties to the lowest index; the
/// returned index is relative to the full row.
pub fn argmax_in(row: &[f64], classes: ClassSlice) -> usize {
    let mut best = classes.offset;
    for c in classes.offset..classes.end() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TAKCKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    net: NetSpec,
    layout: ParamLayout,
}

/// Serializes the per-layer parameter matrices after a magic + JSON header.
pub(crate) fn encode_layers(w: &mut ByteWriter, theta: &ParamVector) {
    for l in 0..theta.layout().n_layers() {
        theta.layer_matrix(l).encode(w);
    }
}

pub(crate) fn decode_layers(r: &mut ByteReader<'_>, layout: &ParamLayout) -> Result<ParamVector> {
    let mut values = Vec::with_capacity(layout.total());
    for layer in &layout.layers {
        let at = r.offset();
        let m = Matrix::decode(r)?;
        if m.shape() != (layer.out_dim, layer.width()) {
            return Err(TakError::Format {
                offset: at,
                message: format!(
                    "layer matrix is {}x{}, layout expects {}x{}",
                    m.rows(),
                    m.cols(),
                    layer.out_dim,
                    layer.width()
                ),
            });
        }
        values.extend_from_slice(m.data());
    }
    ParamVector::from_values(layout, values)
}

pub fn encode_checkpoint(net: &NetSpec, theta: &ParamVector) -> Result<Vec<u8>> {
    check_theta(net, theta, "checkpoint")?;
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.json(&CheckpointHeader {
        net: net.clone(),
        layout: theta.layout().clone(),
    })?;
    encode_layers(&mut w, theta);
    Ok(w.into_inner())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetSpec, ParamVector)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let header: CheckpointHeader = r.json()?;
    header.net.validate()?;
    if header.net.layout() != header.layout {
        return Err(TakError::Format {
            offset: at,
            message: "layout does not match network description".into(),
        });
    }
    let theta = decode_layers(&mut r, &header.layout)?;
    r.finish()?;
    Ok((header.net, theta))
}

pub fn save_checkpoint(path: &Path, net: &NetSpec, theta: &ParamVector) -> Result<()> {
    write_file(path, &encode_checkpoint(net, theta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetSpec, ParamVector)> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tanh_net() -> NetSpec {
        NetSpec::mlp(&[3, 4, 2], Activation::Tanh).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn layout_counts_bias_augmented_rows() {
        let net = NetSpec::new(vec![3, 4, 2], vec![Activation::Tanh], vec![true, false]).unwrap();
        let layout = net.layout();
        assert_eq!(layout.layers[0].len(), 4 * 4);
        assert_eq!(layout.layers[1].len(), 2 * 4);
        assert_eq!(layout.total(), 16 + 8);
        assert_eq!(layout.layers[1].offset, 16);
    }

    #[test]
    fn spec_validation() {
        assert!(NetSpec::mlp(&[3], Activation::Tanh).is_err());
        assert!(NetSpec::new(vec![3, 2], vec![Activation::Tanh], vec![true]).is_err());
        assert!(NetSpec::new(vec![3, 0, 2], vec![Activation::Tanh], vec![true, true]).is_err());
    }

    #[test]
    fn single_linear_identity_layer() {
        let net = NetSpec::new(vec![2, 2], vec![], vec![false]).unwrap();
        let theta = ParamVector::from_values(&net.layout(), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Matrix::from_rows(&[&[1.0, 2.0]]);
        assert_eq!(forward(&net, &theta, &x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = NetSpec::mlp(&[3, 5, 2], Activation::Identity).unwrap();
        let theta = ParamVector::zeros(&net.layout());
        let x = Matrix::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 1.0, 1.0]]);
        assert!(forward(&net, &theta, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_reimplementation() {
        let net = tanh_net();
        let theta = net.init_params(&mut Rng::new(7));
        let x = [0.3, -1.2, 0.8];
        // Independent scalar evaluation straight from the flat parameter list.
        let p = theta.values();
        let mut h = [0.0; 4];
        for i in 0..4 {
            let row = &p[i * 4..i * 4 + 4];
            h[i] = (row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + row[3]).tanh();
        }
        let mut y = [0.0; 2];
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &p[16 + i * 5..16 + i * 5 + 5];
            *yi = row[0] * h[0] + row[1] * h[1] + row[2] * h[2] + row[3] * h[3] + row[4];
        }
        let out = forward(&net, &theta, &Matrix::from_rows(&[&x])).unwrap();
        for (c, yc) in y.iter().enumerate() {
            assert!((out.get(0, c) - yc).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_capture_is_consistent() {
        let net = tanh_net();
        let theta = net.init_params(&mut Rng::new(1));
        let x = Rng::new(2).normal_matrix(5, 3, 1.0);
        let (out, acts) = forward_capture(&net, &theta, &x).unwrap();
        assert_eq!(out, forward(&net, &theta, &x).unwrap());
        assert_eq!(acts.inputs[0], x);
        assert_eq!(acts.preacts[1], out);
        assert_eq!(acts.inputs[1].get(2, 1), acts.preacts[0].get(2, 1).tanh());
    }

    #[test]
    fn layout_mismatch_is_shape_error() {
        let net = tanh_net();
        let other = NetSpec::mlp(&[3, 5, 2], Activation::Tanh).unwrap();
        let theta = other.init_params(&mut Rng::new(0));
        let x = Matrix::zeros(1, 3);
        assert!(matches!(forward(&net, &theta, &x), Err(TakError::Shape { .. })));
        assert!(forward(&net, &net.init_params(&mut Rng::new(0)), &Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = tanh_net();
        let theta = net.init_params(&mut Rng::new(3));
        let x = Rng::new(4).normal_matrix(6, 3, 1.0);
        let back = backward(&net, &theta, &x, &Matrix::zeros(6, 2)).unwrap();
        assert!(back.grad.is_zero());
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let net = NetSpec::new(vec![3, 2], vec![], vec![false]).unwrap();
        let theta = net.init_params(&mut Rng::new(9));
        let x = Matrix::from_rows(&[&[1.0, 2.0, -1.0]]);
        let s = Matrix::from_rows(&[&[0.5, -3.0]]);
        let back = backward(&net, &theta, &x, &s).unwrap();
        let expect = [0.5, 1.0, -0.5, -3.0, -6.0, 3.0];
        assert_eq!(back.grad.values(), &expect);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = NetSpec::mlp(&[3, 5, 4, 2], Activation::Tanh).unwrap();
        let mut rng = Rng::new(21);
        let theta = net.init_params(&mut rng);
        let x = rng.normal_matrix(4, 3, 1.0);
        let s = rng.normal_matrix(4, 2, 1.0);
        let back = backward(&net, &theta, &x, &s).unwrap();
        let eps = 1e-5;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            tp.values_mut()[i] += eps;
            let mut tm = theta.clone();
            tm.values_mut()[i] -= eps;
            let fp = forward(&net, &tp, &x).unwrap().frobenius_dot(&s).unwrap();
            let fm = forward(&net, &tm, &x).unwrap().frobenius_dot(&s).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            let g = back.grad.values()[i];
            assert!((fd - g).abs() <= 1e-5 * g.abs().max(1e-3), "param {i}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn per_sample_grads_sum_to_batch_gradient() {
        let net = tanh_net();
        let mut rng = Rng::new(8);
        let theta = net.init_params(&mut rng);
        let x = rng.normal_matrix(3, 3, 1.0);
        let s = rng.normal_matrix(3, 2, 1.0);
        let per = per_sample_grads(&net, &theta, &x, &s).unwrap();
        let total = backward(&net, &theta, &x, &s).unwrap().grad;
        for p in 0..theta.len() {
            let sum: f64 = (0..3).map(|r| per.get(r, p)).sum();
            assert!((sum - total.values()[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn jvp_trivial_cases() {
        let net = tanh_net();
        let theta = net.init_params(&mut Rng::new(5));
        let x = Rng::new(6).normal_matrix(3, 3, 1.0);
        let zero = ParamVector::zeros(theta.layout());
        assert!(jvp(&net, &theta, &x, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let lin = NetSpec::new(vec![2, 3], vec![], vec![false]).unwrap();
        let w = lin.init_params(&mut Rng::new(1));
        let v = ParamVector::from_values(&lin.layout(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = Matrix::from_rows(&[&[1.0, -1.0]]);
        assert_eq!(jvp(&lin, &w, &x, &v).unwrap().data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn jvp_central_difference_error_is_second_order() {
        let net = NetSpec::mlp(&[3, 6, 2], Activation::Tanh).unwrap();
        let mut rng = Rng::new(12);
        let theta = net.init_params(&mut rng);
        let v = ParamVector::from_values(theta.layout(), (0..theta.len()).map(|_| rng.normal()).collect()).unwrap();
        let x = rng.normal_matrix(4, 3, 1.0);
        let exact = jvp(&net, &theta, &x, &v).unwrap();
        let mut errs = Vec::new();
        for eps in [1e-2, 1e-3] {
            let mut tp = theta.clone();
            tp.add_scaled(eps, &v).unwrap();
            let mut tm = theta.clone();
            tm.add_scaled(-eps, &v).unwrap();
            let mut fd = forward(&net, &tp, &x).unwrap();
            fd.add_scaled(-1.0, &forward(&net, &tm, &x).unwrap()).unwrap();
            fd.scale(1.0 / (2.0 * eps));
            errs.push(fd.sub(&exact).unwrap().max_abs());
        }
        // Shrinking ε by 10 shrinks the truncation error by ~100.
        let ratio = errs[0] / errs[1];
        assert!(ratio > 50.0 && ratio < 200.0, "ratio {ratio}, errs {errs:?}");
    }

    #[test]
    fn jvp_and_backward_are_transposes() {
        let net = NetSpec::mlp(&[4, 7, 5, 3], Activation::Tanh).unwrap();
        let mut rng = Rng::new(99);
        let theta = net.init_params(&mut rng);
        let x = rng.normal_matrix(6, 4, 1.0);
        for _ in 0..5 {
            let v = ParamVector::from_values(theta.layout(), (0..theta.len()).map(|_| rng.normal()).collect()).unwrap();
            let s = rng.normal_matrix(6, 3, 1.0);
            let lhs = jvp(&net, &theta, &x, &v).unwrap().frobenius_dot(&s).unwrap();
            let rhs = backward(&net, &theta, &x, &s).unwrap().grad.dot(&v).unwrap();
            assert!(rel(lhs, rhs) < 1e-10);
        }
    }

    #[test]
    fn cached_tangent_pass_matches_fresh_one() {
        let net = NetSpec::mlp(&[3, 5, 4, 2], Activation::Tanh).unwrap();
        let mut rng = Rng::new(31);
        let theta = net.init_params(&mut rng);
        let x = rng.normal_matrix(6, 3, 1.0);
        let v = ParamVector::from_values(theta.layout(), (0..theta.len()).map(|_| rng.normal()).collect()).unwrap();
        let (_, acts) = forward_capture(&net, &theta, &x).unwrap();
        let idx = [4, 1, 1];
        let cached = jvp_from(&net, &theta, &acts.select(&idx), &v).unwrap();
        let fresh = jvp(&net, &theta, &x, &v).unwrap();
        for (r, &i) in idx.iter().enumerate() {
            assert_eq!(cached.row(r), fresh.row(i));
        }
    }

    #[test]
    fn relu_tangent_at_zero_is_zero() {
        let net = NetSpec::new(vec![1, 1, 1], vec![Activation::Relu], vec![false, false]).unwrap();
        let theta = ParamVector::from_values(&net.layout(), vec![1.0, 1.0]).unwrap();
        let x = Matrix::from_rows(&[&[0.0]]);
        let v = ParamVector::from_values(&net.layout(), vec![0.0, 1.0]).unwrap();
        // Only the second-layer direction would matter, and a = relu(0) = 0.
        assert_eq!(jvp(&net, &theta, &x, &v).unwrap().data(), &[0.0]);
        let v = ParamVector::from_values(&net.layout(), vec![1.0, 0.0]).unwrap();
        assert_eq!(jvp(&net, &theta, &x, &v).unwrap().data(), &[0.0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let net = tanh_net();
        let theta = net.init_params(&mut Rng::new(3));
        let x = Rng::new(4).normal_matrix(8, 3, 2.0);
        let a = forward(&net, &theta, &x).unwrap();
        let b = forward(&net, &theta, &x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn argmax_ties_go_low_and_respect_slice() {
        let row = [5.0, 1.0, 3.0, 3.0, 0.0];
        assert_eq!(argmax_in(&row, ClassSlice { offset: 1, count: 3 }), 2);
        assert_eq!(argmax_in(&row, ClassSlice { offset: 0, count: 5 }), 0);
    }

    #[test]
    fn dataset_rejects_out_of_slice_labels() {
        let x = Matrix::zeros(2, 3);
        let slice = ClassSlice { offset: 3, count: 3 };
        assert!(Dataset::new(x.clone(), vec![3, 5], "t", Split::Train, slice).is_ok());
        assert!(matches!(
            Dataset::new(x, vec![3, 6], "t", Split::Train, slice),
            Err(TakError::Data(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let net = tanh_net();
        let theta = net.init_params(&mut Rng::new(17));
        let bytes = encode_checkpoint(&net, &theta).unwrap();
        let (net2, theta2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(net2, net);
        assert_eq!(theta2, theta);

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(decode_checkpoint(truncated), Err(TakError::Format { .. })));
    }
}
