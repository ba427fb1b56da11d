//! Curvature of a task's loss at the anchor: the dense GGN for small
//! networks, its diagonal, and per-layer Kronecker factors.
//!
//! For layer `l` with bias-augmented inputs `ãₙ = [aₙ; 1]` and backpropagated
//! pre-activation vectors `gₙ,ₘ`, the factors are
//!
//! ```text
//! A = (1/N) Σₙ ãₙ ãₙᵀ        B = (1/N) Σₙ Σₘ gₙ,ₘ gₙ,ₘᵀ
//! ```
//!
//! With the exact variant the `gₙ,ₘ` come from the columns of a square root of
//! the loss Hessian `∇²cₙ` (C passes per datum). With `mc(M)` they come from
//! `M` random vectors with `E[s sᵀ] = ∇²cₙ`, each scaled by `1/√M`.
//!
//! `Criterion::Squared` means `∇²c = I` over the whole output head, making
//! the GGN the Jacobian Gram matrix. `Criterion::CrossEntropy` applies a
//! softmax over the dataset's class slice only.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{write_file, ByteReader, ByteWriter};
use crate::error::{shape_err, Result, TakError};
use crate::linalg::{Matrix, Rng};
use crate::network::{
    backward_from, forward_capture, per_sample_grads, BatchActivations, ClassSlice, Dataset, LayerLayout, NetSpec,
    ParamLayout, ParamVector,
};

/// Default parameter-count ceiling for dense GGN construction.
pub const EXACT_GGN_LIMIT: usize = 5_000;

/// Data per chunk when expanding a batch by its backpropagated vectors.
const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Squared,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KfacVariant {
    Exact,
    Mc { samples: usize, seed: u64 },
}

impl KfacVariant {
    pub fn label(&self) -> String {
        match self {
            KfacVariant::Exact => "exact".into(),
            KfacVariant::Mc { samples, .. } => format!("mc({samples})"),
        }
    }
}

/// How many training examples feed the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSize {
    All,
    Fraction(f64),
    Count(usize),
}

impl SampleSize {
    pub fn resolve(&self, n: usize) -> Result<usize> {
        let k = match *self {
            SampleSize::All => n,
            SampleSize::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(TakError::Parameter(format!("sample fraction {f} outside (0, 1]")));
                }
                ((f * n as f64).ceil() as usize).clamp(1, n.max(1))
            }
            SampleSize::Count(c) => {
                if c == 0 {
                    return Err(TakError::Parameter("sample count must be positive".into()));
                }
                c.min(n)
            }
        };
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Bias folded into the input factor through the constant coordinate.
    Augmented,
    /// Weight factors over the raw inputs plus an exact dense bias block.
    SeparateExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KfacOptions {
    pub criterion: Criterion,
    pub variant: KfacVariant,
    pub sample: SampleSize,
    pub bias_mode: BiasMode,
    /// Seed for choosing the subsample.
    pub sample_seed: u64,
}

impl Default for KfacOptions {
    fn default() -> Self {
        Self {
            criterion: Criterion::Squared,
            variant: KfacVariant::Mc { samples: 1, seed: 0 },
            sample: SampleSize::Fraction(0.33),
            bias_mode: BiasMode::Augmented,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureMeta {
    pub task_id: String,
    pub variant: KfacVariant,
    pub criterion: Criterion,
    /// Examples actually used.
    pub n_samples: usize,
    /// `|D_t|`, the size of the full task dataset.
    pub dataset_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseEntry {
    pub row: u32,
    pub col: u32,
    pub value: f64,
}

/// A symmetric factor in one of the supported storage schemes.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Dense(Matrix),
    /// Block-diagonal restriction; blocks cover `0..dim` contiguously.
    Block {
        dim: usize,
        blocks: Vec<Matrix>,
    },
    /// Top eigenpairs; `eigenvectors` is `dim × rank`.
    LowRank {
        dim: usize,
        eigenvalues: Vec<f64>,
        eigenvectors: Matrix,
    },
    /// Upper-triangle coordinate list (`row ≤ col`), mirrored on expansion.
    Sparse {
        dim: usize,
        entries: Vec<SparseEntry>,
    },
    /// Row-wise 8-bit codes with one scale per row.
    Quant8 {
        dim: usize,
        codes: Vec<i8>,
        scales: Vec<f64>,
    },
}

impl Factor {
    pub fn dim(&self) -> usize {
        match self {
            Factor::Dense(m) => m.rows(),
            Factor::Block { dim, .. }
            | Factor::LowRank { dim, .. }
            | Factor::Sparse { dim, .. }
            | Factor::Quant8 { dim, .. } => *dim,
        }
    }

    pub fn scheme(&self) -> &'static str {
        match self {
            Factor::Dense(_) => "dense",
            Factor::Block { .. } => "block",
            Factor::LowRank { .. } => "lowrank",
            Factor::Sparse { .. } => "sparse",
            Factor::Quant8 { .. } => "quant8",
        }
    }

    /// Bytes needed for the numeric payload of this scheme.
    pub fn storage_bytes(&self) -> usize {
        match self {
            Factor::Dense(m) => m.rows() * m.cols() * 8,
            Factor::Block { blocks, .. } => blocks.iter().map(|b| b.rows() * b.cols() * 8).sum(),
            Factor::LowRank { dim, eigenvalues, .. } => (eigenvalues.len() + dim * eigenvalues.len()) * 8,
            Factor::Sparse { entries, .. } => entries.len() * 16,
            Factor::Quant8 { dim, .. } => dim * dim + 8 * dim,
        }
    }

    /// Row-wise dequantization without symmetrization (`q_ij · s_i`).
    pub fn dequantized_rows(&self) -> Option<Matrix> {
        match self {
            Factor::Quant8 { dim, codes, scales } => {
                let n = *dim;
                let data = (0..n * n).map(|idx| codes[idx] as f64 * scales[idx / n]).collect();
                Some(Matrix::new(n, n, data).expect("finite codes and scales"))
            }
            _ => None,
        }
    }

    /// Materializes the factor as a dense symmetric matrix.
    pub fn to_dense(&self) -> Matrix {
        match self {
            Factor::Dense(m) => m.clone(),
            Factor::Block { dim, blocks } => {
                let mut out = Matrix::zeros(*dim, *dim);
                let mut start = 0;
                for b in blocks {
                    for i in 0..b.rows() {
                        for j in 0..b.cols() {
                            out.set(start + i, start + j, b.get(i, j));
                        }
                    }
                    start += b.rows();
                }
                out
            }
            Factor::LowRank {
                dim,
                eigenvalues,
                eigenvectors,
            } => {
                let mut out = Matrix::zeros(*dim, *dim);
                for i in 0..*dim {
                    for j in i..*dim {
                        let s: f64 = eigenvalues
                            .iter()
                            .enumerate()
                            .map(|(k, &l)| l * eigenvectors.get(i, k) * eigenvectors.get(j, k))
                            .sum();
                        out.set(i, j, s);
                        out.set(j, i, s);
                    }
                }
                out
            }
            Factor::Sparse { dim, entries } => {
                let mut out = Matrix::zeros(*dim, *dim);
                for e in entries {
                    out.set(e.row as usize, e.col as usize, e.value);
                    out.set(e.col as usize, e.row as usize, e.value);
                }
                out
            }
            Factor::Quant8 { dim, codes, scales } => {
                let n = *dim;
                let mut out = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in i..n {
                        let v = if i == j {
                            codes[i * n + i] as f64 * scales[i]
                        } else {
                            0.5 * (codes[i * n + j] as f64 * scales[i] + codes[j * n + i] as f64 * scales[j])
                        };
                        out.set(i, j, v);
                        out.set(j, i, v);
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCurvature {
    /// Input factor (`width × width`, or `D2 × D2` with a separate bias block).
    pub a: Factor,
    /// Output-gradient factor (`D1 × D1`).
    pub b: Factor,
    /// Exact dense GGN block of the bias (`D1 × D1`) in separate-bias mode.
    pub bias_block: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfacCurvature {
    pub layers: Vec<LayerCurvature>,
    pub meta: CurvatureMeta,
}

impl KfacCurvature {
    /// Checks factor dimensions against a parameter layout.
    pub fn check_layout(&self, layout: &ParamLayout) -> Result<()> {
        if self.layers.len() != layout.n_layers() {
            return Err(shape_err("curvature layers", layout.n_layers(), self.layers.len()));
        }
        for (lc, ll) in self.layers.iter().zip(&layout.layers) {
            check_layer(lc, ll)?;
        }
        Ok(())
    }

    pub fn storage_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.a.storage_bytes() + l.b.storage_bytes() + l.bias_block.as_ref().map_or(0, |m| m.rows() * m.cols() * 8)
            })
            .sum()
    }
}

fn check_layer(lc: &LayerCurvature, ll: &LayerLayout) -> Result<()> {
    let expected_a = if lc.bias_block.is_some() {
        if !ll.has_bias {
            return Err(TakError::Contract("bias block given for a layer without bias".into()));
        }
        ll.in_dim
    } else {
        ll.width()
    };
    if lc.a.dim() != expected_a {
        return Err(shape_err("curvature A factor", expected_a, lc.a.dim()));
    }
    if lc.b.dim() != ll.out_dim {
        return Err(shape_err("curvature B factor", ll.out_dim, lc.b.dim()));
    }
    if let Some(bb) = &lc.bias_block {
        if bb.shape() != (ll.out_dim, ll.out_dim) {
            return Err(shape_err("curvature bias block", ll.out_dim, bb.rows()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExactGGN {
    pub g: Matrix,
    pub meta: CurvatureMeta,
}

/// Softmax over the class slice of one output row.
pub fn softmax_in(row: &[f64], classes: ClassSlice) -> Vec<f64> {
    let logits = &row[classes.offset..classes.end()];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Backpropagated vectors for one chunk; `per_datum` consecutive rows belong
/// to each datum.
struct Vectors {
    rows: Matrix,
    per_datum: usize,
    /// Weight applied to every outer product (before the 1/N average).
    weight: f64,
}

fn exact_vectors(criterion: Criterion, outputs: &Matrix, classes: ClassSlice) -> Vectors {
    let (n, c) = outputs.shape();
    match criterion {
        Criterion::Squared => {
            let mut rows = Matrix::zeros(n * c, c);
            for i in 0..n {
                for k in 0..c {
                    rows.set(i * c + k, k, 1.0);
                }
            }
            Vectors {
                rows,
                per_datum: c,
                weight: 1.0,
            }
        }
        Criterion::CrossEntropy => {
            // Columns √p_k (e_k − p) of a square root of diag(p) − ppᵀ.
            let k_count = classes.count;
            let mut rows = Matrix::zeros(n * k_count, c);
            for i in 0..n {
                let p = softmax_in(outputs.row(i), classes);
                for k in 0..k_count {
                    let sk = p[k].sqrt();
                    let row = rows.row_mut(i * k_count + k);
                    for (j, &pj) in p.iter().enumerate() {
                        row[classes.offset + j] = -sk * pj;
                    }
                    row[classes.offset + k] += sk;
                }
            }
            Vectors {
                rows,
                per_datum: k_count,
                weight: 1.0,
            }
        }
    }
}

fn mc_vectors(criterion: Criterion, outputs: &Matrix, classes: ClassSlice, samples: usize, rng: &mut Rng) -> Vectors {
    let (n, c) = outputs.shape();
    let mut rows = Matrix::zeros(n * samples, c);
    for i in 0..n {
        let p = match criterion {
            Criterion::CrossEntropy => softmax_in(outputs.row(i), classes),
            Criterion::Squared => Vec::new(),
        };
        for m in 0..samples {
            let row = rows.row_mut(i * samples + m);
            match criterion {
                Criterion::Squared => {
                    for v in row.iter_mut() {
                        *v = rng.normal();
                    }
                }
                Criterion::CrossEntropy => {
                    let y = rng.categorical(&p);
                    for (j, &pj) in p.iter().enumerate() {
                        row[classes.offset + j] = pj;
                    }
                    row[classes.offset + y] -= 1.0;
                }
            }
        }
    }
    Vectors {
        rows,
        per_datum: samples,
        weight: 1.0 / samples as f64,
    }
}

fn repeat_rows(m: &Matrix, times: usize) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * times * m.cols());
    for r in 0..m.rows() {
        for _ in 0..times {
            data.extend_from_slice(m.row(r));
        }
    }
    Matrix::new(m.rows() * times, m.cols(), data).expect("rows copied from a valid matrix")
}

fn expand(acts: &BatchActivations, times: usize) -> BatchActivations {
    BatchActivations {
        inputs: acts.inputs.iter().map(|m| repeat_rows(m, times)).collect(),
        preacts: acts.preacts.iter().map(|m| repeat_rows(m, times)).collect(),
    }
}

fn augmented(a: &Matrix, with_one: bool) -> Matrix {
    if !with_one {
        return a.clone();
    }
    let (n, d) = a.shape();
    let mut out = Matrix::zeros(n, d + 1);
    for r in 0..n {
        let row = out.row_mut(r);
        row[..d].copy_from_slice(a.row(r));
        row[d] = 1.0;
    }
    out
}

fn check_inputs(net: &NetSpec, theta0: &ParamVector, data: &Dataset) -> Result<()> {
    theta0.check_layout(&net.layout(), "curvature")?;
    if data.is_empty() {
        return Err(TakError::EmptyData("curvature estimation needs at least one example"));
    }
    if data.input_dim() != net.input_dim() {
        return Err(shape_err("curvature data", net.input_dim(), data.input_dim()));
    }
    if data.classes.end() > net.output_dim() {
        return Err(TakError::Data(format!(
            "class slice ends at {} but the network has {} outputs",
            data.classes.end(),
            net.output_dim()
        )));
    }
    Ok(())
}

/// Deterministic subsample in dataset index order.
pub fn subsample(data: &Dataset, size: SampleSize, seed: u64) -> Result<Dataset> {
    let k = size.resolve(data.len())?;
    if k >= data.len() {
        return Ok(data.clone());
    }
    let mut idx = Rng::derive(seed, 0x5ab5).permutation(data.len());
    idx.truncate(k);
    idx.sort_unstable();
    Ok(data.subset(&idx))
}

/// KFAC factors of `data`'s loss at `θ0`.
pub fn kfac(net: &NetSpec, theta0: &ParamVector, data: &Dataset, opts: &KfacOptions) -> Result<KfacCurvature> {
    check_inputs(net, theta0, data)?;
    if let KfacVariant::Mc { samples: 0, .. } = opts.variant {
        return Err(TakError::Parameter(
            "Monte-Carlo sample count must be at least 1".into(),
        ));
    }
    let used = subsample(data, opts.sample, opts.sample_seed)?;
    let layout = theta0.layout();
    let n = used.len();
    let inv_n = 1.0 / n as f64;
    let separate = opts.bias_mode == BiasMode::SeparateExact;

    let mut a_acc: Vec<Matrix> = Vec::new();
    let mut b_acc: Vec<Matrix> = Vec::new();
    let mut bias_acc: Vec<Option<Matrix>> = Vec::new();
    for ll in &layout.layers {
        let a_dim = if separate && ll.has_bias { ll.in_dim } else { ll.width() };
        a_acc.push(Matrix::zeros(a_dim, a_dim));
        b_acc.push(Matrix::zeros(ll.out_dim, ll.out_dim));
        bias_acc.push((separate && ll.has_bias).then(|| Matrix::zeros(ll.out_dim, ll.out_dim)));
    }
    let need_exact_bias = separate && layout.layers.iter().any(|l| l.has_bias);

    let mut rng = match opts.variant {
        KfacVariant::Mc { seed, .. } => Some(Rng::new(seed)),
        KfacVariant::Exact => None,
    };
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let chunk = used.subset(&idx);
        let (out, acts) = forward_capture(net, theta0, &chunk.inputs)?;
        for (l, ll) in layout.layers.iter().enumerate() {
            let with_one = ll.has_bias && !separate;
            a_acc[l].add_gram(&augmented(&acts.inputs[l], with_one), inv_n)?;
        }
        let exact = exact_vectors(opts.criterion, &out, chunk.classes);
        let vectors = match (opts.variant, rng.as_mut()) {
            (KfacVariant::Mc { samples, .. }, Some(r)) => mc_vectors(opts.criterion, &out, chunk.classes, samples, r),
            _ => exact_vectors(opts.criterion, &out, chunk.classes),
        };
        let back = backward_from(net, theta0, &expand(&acts, vectors.per_datum), &vectors.rows)?;
        for (acc, g) in b_acc.iter_mut().zip(&back.preact_grads) {
            acc.add_gram(g, vectors.weight * inv_n)?;
        }
        if need_exact_bias {
            let exact_back = if matches!(opts.variant, KfacVariant::Exact) {
                back
            } else {
                backward_from(net, theta0, &expand(&acts, exact.per_datum), &exact.rows)?
            };
            for (l, slot) in bias_acc.iter_mut().enumerate() {
                if let Some(m) = slot {
                    m.add_gram(&exact_back.preact_grads[l], inv_n)?;
                }
            }
        }
    }

    let layers = a_acc
        .into_iter()
        .zip(b_acc)
        .zip(bias_acc)
        .map(|((a, b), bias_block)| LayerCurvature {
            a: Factor::Dense(a),
            b: Factor::Dense(b),
            bias_block,
        })
        .collect();
    Ok(KfacCurvature {
        layers,
        meta: CurvatureMeta {
            task_id: data.task_id.clone(),
            variant: opts.variant,
            criterion: opts.criterion,
            n_samples: n,
            dataset_size: data.len(),
        },
    })
}

/// Task-agnostic factors from a shared reference dataset.
pub fn reference_kfac(
    net: &NetSpec,
    theta0: &ParamVector,
    reference: &Dataset,
    opts: &KfacOptions,
) -> Result<KfacCurvature> {
    let mut c = kfac(net, theta0, reference, opts)?;
    c.meta.task_id = "reference".into();
    Ok(c)
}

/// Dense `G = (1/N) Σₙ Jₙᵀ ∇²cₙ Jₙ` over all parameters.
pub fn exact_ggn(net: &NetSpec, theta0: &ParamVector, data: &Dataset, criterion: Criterion) -> Result<ExactGGN> {
    exact_ggn_with_limit(net, theta0, data, criterion, EXACT_GGN_LIMIT)
}

pub fn exact_ggn_with_limit(
    net: &NetSpec,
    theta0: &ParamVector,
    data: &Dataset,
    criterion: Criterion,
    limit: usize,
) -> Result<ExactGGN> {
    check_inputs(net, theta0, data)?;
    let p = theta0.len();
    if p > limit {
        return Err(TakError::Capacity {
            what: "parameter count for the dense GGN",
            size: p,
            limit,
        });
    }
    let n = data.len();
    let mut g = Matrix::zeros(p, p);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let chunk = data.subset(&idx);
        let (out, _) = forward_capture(net, theta0, &chunk.inputs)?;
        let v = exact_vectors(criterion, &out, chunk.classes);
        let x = repeat_rows(&chunk.inputs, v.per_datum);
        let rows = per_sample_grads(net, theta0, &x, &v.rows)?;
        g.add_gram(&rows, v.weight / n as f64)?;
    }
    Ok(ExactGGN {
        g,
        meta: CurvatureMeta {
            task_id: data.task_id.clone(),
            variant: KfacVariant::Exact,
            criterion,
            n_samples: n,
            dataset_size: n,
        },
    })
}

/// Diagonal of the GGN, computed without forming per-sample Jacobians.
pub fn diag_ggn(net: &NetSpec, theta0: &ParamVector, data: &Dataset, criterion: Criterion) -> Result<ParamVector> {
    check_inputs(net, theta0, data)?;
    let layout = theta0.layout();
    let n = data.len();
    let mut diag = ParamVector::zeros(layout);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let chunk = data.subset(&idx);
        let (out, acts) = forward_capture(net, theta0, &chunk.inputs)?;
        let v = exact_vectors(criterion, &out, chunk.classes);
        let wide = expand(&acts, v.per_datum);
        let back = backward_from(net, theta0, &wide, &v.rows)?;
        for (l, ll) in layout.layers.iter().enumerate() {
            let g2 = squared(&back.preact_grads[l]);
            let a2 = squared(&augmented(&wide.inputs[l], ll.has_bias));
            let contrib = g2.matmul_tn(&a2)?;
            for (d, c) in diag.layer_mut(l).iter_mut().zip(contrib.data()) {
                *d += v.weight * c / n as f64;
            }
        }
    }
    Ok(diag)
}

fn squared(m: &Matrix) -> Matrix {
    let data = m.data().iter().map(|v| v * v).collect();
    Matrix::new(m.rows(), m.cols(), data).expect("same shape")
}

const CURVATURE_MAGIC: &[u8; 8] = b"TAKCURV1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
enum FactorHeader {
    Dense {
        dim: usize,
    },
    Block {
        dim: usize,
        sizes: Vec<usize>,
    },
    #[serde(rename = "lowrank")]
    LowRank {
        dim: usize,
        rank: usize,
    },
    Sparse {
        dim: usize,
        nnz: usize,
    },
    Quant8 {
        dim: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    a: FactorHeader,
    b: FactorHeader,
    bias_block: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CurvatureManifest {
    task_id: String,
    variant: KfacVariant,
    criterion: Criterion,
    n_samples: usize,
    dataset_size: usize,
    layers: Vec<LayerHeader>,
}

fn factor_header(f: &Factor) -> FactorHeader {
    match f {
        Factor::Dense(m) => FactorHeader::Dense { dim: m.rows() },
        Factor::Block { dim, blocks } => FactorHeader::Block {
            dim: *dim,
            sizes: blocks.iter().map(|b| b.rows()).collect(),
        },
        Factor::LowRank { dim, eigenvalues, .. } => FactorHeader::LowRank {
            dim: *dim,
            rank: eigenvalues.len(),
        },
        Factor::Sparse { dim, entries } => FactorHeader::Sparse {
            dim: *dim,
            nnz: entries.len(),
        },
        Factor::Quant8 { dim, .. } => FactorHeader::Quant8 { dim: *dim },
    }
}

fn encode_factor(w: &mut ByteWriter, f: &Factor) {
    match f {
        Factor::Dense(m) => m.encode(w),
        Factor::Block { blocks, .. } => blocks.iter().for_each(|b| b.encode(w)),
        Factor::LowRank {
            eigenvalues,
            eigenvectors,
            ..
        } => {
            Matrix::new(1, eigenvalues.len(), eigenvalues.clone())
                .expect("finite eigenvalues")
                .encode(w);
            eigenvectors.encode(w);
        }
        Factor::Sparse { entries, .. } => {
            for e in entries {
                w.u32(e.row);
                w.u32(e.col);
                w.f64(e.value);
            }
        }
        Factor::Quant8 { codes, scales, .. } => {
            let raw: Vec<u8> = codes.iter().map(|&c| c as u8).collect();
            w.bytes(&raw);
            scales.iter().for_each(|&s| w.f64(s));
        }
    }
}

fn decode_square(r: &mut ByteReader<'_>, dim: usize) -> Result<Matrix> {
    let at = r.offset();
    let m = Matrix::decode(r)?;
    if m.shape() != (dim, dim) {
        return Err(TakError::Format {
            offset: at,
            message: format!("expected a {dim}x{dim} block, found {}x{}", m.rows(), m.cols()),
        });
    }
    Ok(m)
}

fn decode_factor(r: &mut ByteReader<'_>, h: &FactorHeader) -> Result<Factor> {
    match h {
        FactorHeader::Dense { dim } => Ok(Factor::Dense(decode_square(r, *dim)?)),
        FactorHeader::Block { dim, sizes } => {
            if sizes.iter().sum::<usize>() != *dim {
                return Err(r.error("block sizes do not cover the factor dimension"));
            }
            let blocks = sizes.iter().map(|&s| decode_square(r, s)).collect::<Result<_>>()?;
            Ok(Factor::Block { dim: *dim, blocks })
        }
        FactorHeader::LowRank { dim, rank } => {
            let at = r.offset();
            let vals = Matrix::decode(r)?;
            let vecs = Matrix::decode(r)?;
            if vals.shape() != (1, *rank) || vecs.shape() != (*dim, *rank) {
                return Err(TakError::Format {
                    offset: at,
                    message: "low-rank payload shape disagrees with header".into(),
                });
            }
            Ok(Factor::LowRank {
                dim: *dim,
                eigenvalues: vals.into_data(),
                eigenvectors: vecs,
            })
        }
        FactorHeader::Sparse { dim, nnz } => {
            let mut entries = Vec::with_capacity(*nnz);
            for _ in 0..*nnz {
                let at = r.offset();
                let (row, col, value) = (r.u32()?, r.u32()?, r.f64()?);
                if row > col || col as usize >= *dim || !value.is_finite() {
                    return Err(TakError::Format {
                        offset: at,
                        message: format!("invalid sparse entry ({row}, {col}, {value})"),
                    });
                }
                entries.push(SparseEntry { row, col, value });
            }
            Ok(Factor::Sparse { dim: *dim, entries })
        }
        FactorHeader::Quant8 { dim } => {
            let codes = r.take(dim * dim)?.iter().map(|&b| b as i8).collect();
            let mut scales = Vec::with_capacity(*dim);
            for _ in 0..*dim {
                let at = r.offset();
                let s = r.f64()?;
                if !(s.is_finite() && s >= 0.0) {
                    return Err(TakError::Format {
                        offset: at,
                        message: format!("invalid row scale {s}"),
                    });
                }
                scales.push(s);
            }
            Ok(Factor::Quant8 {
                dim: *dim,
                codes,
                scales,
            })
        }
    }
}

pub fn encode_curvature(c: &KfacCurvature) -> Result<Vec<u8>> {
    let manifest = CurvatureManifest {
        task_id: c.meta.task_id.clone(),
        variant: c.meta.variant,
        criterion: c.meta.criterion,
        n_samples: c.meta.n_samples,
        dataset_size: c.meta.dataset_size,
        layers: c
            .layers
            .iter()
            .map(|l| LayerHeader {
                a: factor_header(&l.a),
                b: factor_header(&l.b),
                bias_block: l.bias_block.is_some(),
            })
            .collect(),
    };
    let mut w = ByteWriter::new();
    w.bytes(CURVATURE_MAGIC);
    w.json(&manifest)?;
    for l in &c.layers {
        encode_factor(&mut w, &l.a);
        encode_factor(&mut w, &l.b);
        if let Some(bb) = &l.bias_block {
            bb.encode(&mut w);
        }
    }
    Ok(w.into_inner())
}

pub fn decode_curvature(bytes: &[u8]) -> Result<KfacCurvature> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CURVATURE_MAGIC)?;
    let m: CurvatureManifest = r.json()?;
    let mut layers = Vec::with_capacity(m.layers.len());
    for lh in &m.layers {
        let a = decode_factor(&mut r, &lh.a)?;
        let b = decode_factor(&mut r, &lh.b)?;
        let bias_block = if lh.bias_block {
            Some(decode_square(&mut r, b.dim())?)
        } else {
            None
        };
        layers.push(LayerCurvature { a, b, bias_block });
    }
    r.finish()?;
    Ok(KfacCurvature {
        layers,
        meta: CurvatureMeta {
            task_id: m.task_id,
            variant: m.variant,
            criterion: m.criterion,
            n_samples: m.n_samples,
            dataset_size: m.dataset_size,
        },
    })
}

pub fn save_curvature(path: &Path, c: &KfacCurvature) -> Result<()> {
    write_file(path, &encode_curvature(c)?)
}

pub fn load_curvature(path: &Path) -> Result<KfacCurvature> {
    decode_curvature(&std::fs::read(path)?)
}
