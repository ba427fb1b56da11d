//! Registry of per-task Kronecker factors, their merge into one pair per
//! layer, the merge-error bound, and lossy factor compression.
//!
//! `MergeMode::InputWeighted` sums the output factors unweighted and the
//! input factors with the task weights `λ_t`. With `T` identical tasks and uniform weights
//! this yields `T·(B ⊗ A)`, i.e. `T` times the weighted accumulation; the
//! strength `β` absorbs that scale. `MergeMode::ScaleConsistent` weights both
//! sides, recovering `B ⊗ A` exactly in that case.

use serde::{Deserialize, Serialize};

use crate::curvature::{Factor, KfacCurvature, LayerCurvature, SparseEntry};
use crate::error::{shape_err, Result, TakError};
use crate::linalg::{sym_eig, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    InputWeighted,
    ScaleConsistent,
}

#[derive(Debug, Clone)]
struct Entry {
    curvature: KfacCurvature,
    weight: Option<f64>,
}

/// Per-task curvature in registration order.
#[derive(Debug, Clone, Default)]
pub struct FactorStore {
    entries: Vec<Entry>,
}

impl FactorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a task's curvature. Factor dimensions must agree with the tasks
    /// already registered.
    pub fn register(&mut self, curvature: KfacCurvature) -> Result<()> {
        let id = &curvature.meta.task_id;
        if self.get(id).is_some() {
            return Err(TakError::Parameter(format!("task `{id}` is already registered")));
        }
        if let Some(first) = self.entries.first() {
            check_compatible(&first.curvature, &curvature)?;
        }
        self.entries.push(Entry {
            curvature,
            weight: None,
        });
        Ok(())
    }

    /// Overrides the automatic dataset-size weight of one task.
    pub fn set_weight(&mut self, task_id: &str, weight: f64) -> Result<()> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(TakError::Parameter(format!(
                "task weight {weight} must be finite and nonnegative"
            )));
        }
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.curvature.meta.task_id == task_id)
            .ok_or_else(|| TakError::Parameter(format!("unknown task `{task_id}`")))?;
        e.weight = Some(weight);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.curvature.meta.task_id.as_str()).collect()
    }

    pub fn get(&self, task_id: &str) -> Option<&KfacCurvature> {
        self.entries
            .iter()
            .map(|e| &e.curvature)
            .find(|c| c.meta.task_id == task_id)
    }

    fn others(&self, excluded: Option<&str>) -> Vec<&Entry> {
        self.entries
            .iter()
            .filter(|e| Some(e.curvature.meta.task_id.as_str()) != excluded)
            .collect()
    }

    /// `(task_id, λ_t)` over every task except `excluded`. Without overrides,
    /// `λ_t = |D_t| / Σ_{t≠t′} |D_t|`.
    pub fn weights(&self, excluded: Option<&str>) -> Vec<(String, f64)> {
        let total: usize = self
            .others(excluded)
            .iter()
            .map(|e| e.curvature.meta.dataset_size)
            .sum();
        self.others(excluded)
            .into_iter()
            .map(|e| {
                let auto = if total == 0 {
                    0.0
                } else {
                    e.curvature.meta.dataset_size as f64 / total as f64
                };
                (e.curvature.meta.task_id.clone(), e.weight.unwrap_or(auto))
            })
            .collect()
    }

    /// Curvatures and weights of every task except `excluded`.
    pub fn weighted(&self, excluded: Option<&str>) -> Vec<(f64, &KfacCurvature)> {
        self.weights(excluded)
            .into_iter()
            .zip(self.others(excluded))
            .map(|((_, w), e)| (w, &e.curvature))
            .collect()
    }
}

fn check_compatible(a: &KfacCurvature, b: &KfacCurvature) -> Result<()> {
    if a.layers.len() != b.layers.len() {
        return Err(shape_err("registered curvature layers", a.layers.len(), b.layers.len()));
    }
    for (x, y) in a.layers.iter().zip(&b.layers) {
        if x.a.dim() != y.a.dim() || x.b.dim() != y.b.dim() || x.bias_block.is_some() != y.bias_block.is_some() {
            return Err(shape_err(
                "registered curvature factors",
                format!("A {} / B {}", x.a.dim(), x.b.dim()),
                format!("A {} / B {}", y.a.dim(), y.b.dim()),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedLayer {
    pub b: Matrix,
    pub a: Matrix,
    pub bias_block: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedCurvature {
    pub layers: Vec<MergedLayer>,
    pub mode: MergeMode,
    pub excluded: Option<String>,
    pub tasks: Vec<String>,
}

/// One Kronecker pair per layer summarizing every task except `excluded`
/// (which need not be registered).
pub fn merge(store: &FactorStore, excluded: Option<&str>, mode: MergeMode) -> Result<MergedCurvature> {
    let weighted = store.weighted(excluded);
    if weighted.is_empty() {
        return Err(TakError::EmptyMerge {
            excluded: excluded.unwrap_or("<none>").to_string(),
        });
    }
    let weight_sum: f64 = weighted.iter().map(|(w, _)| w).sum();
    let norm = |w: f64| if weight_sum > 0.0 { w / weight_sum } else { 0.0 };
    let n_layers = weighted[0].1.layers.len();
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let first = &weighted[0].1.layers[l];
        let mut b = Matrix::zeros(first.b.dim(), first.b.dim());
        let mut a = Matrix::zeros(first.a.dim(), first.a.dim());
        let mut bias = first.bias_block.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols()));
        for &(w, c) in &weighted {
            let lc = &c.layers[l];
            let (wb, wa) = match mode {
                MergeMode::InputWeighted => (1.0, w),
                MergeMode::ScaleConsistent => (norm(w), norm(w)),
            };
            b.add_scaled(wb, &lc.b.to_dense())?;
            a.add_scaled(wa, &lc.a.to_dense())?;
            if let (Some(acc), Some(bb)) = (bias.as_mut(), lc.bias_block.as_ref()) {
                acc.add_scaled(wb, bb)?;
            }
        }
        layers.push(MergedLayer { b, a, bias_block: bias });
    }
    Ok(MergedCurvature {
        layers,
        mode,
        excluded: excluded.map(str::to_string),
        tasks: weighted.iter().map(|(_, c)| c.meta.task_id.clone()).collect(),
    })
}

/// Both sides of `‖E‖_F ≤ T σ_A σ_B` for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerMergeError {
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub bound: f64,
    pub actual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeErrorReport {
    pub n_tasks: usize,
    pub layers: Vec<LayerMergeError>,
}

/// Largest layer parameter count `merge_error` accepts.
pub const MERGE_ERROR_LIMIT: usize = 1_000_000;
/// Layers up to this many parameters get `E` materialized densely.
const MATERIALIZE_LIMIT: usize = 2_000;

/// Error of replacing `Σ_t B_t ⊗ A_t` by `(1/T)(Σ B_t) ⊗ (Σ A_t)` (task
/// weights omitted), next to its bound. Separate bias blocks are not part of
/// the Kronecker term and are ignored.
pub fn merge_error(store: &FactorStore, excluded: Option<&str>) -> Result<MergeErrorReport> {
    let curvatures: Vec<&KfacCurvature> = store.weighted(excluded).into_iter().map(|(_, c)| c).collect();
    if curvatures.is_empty() {
        return Err(TakError::EmptyMerge {
            excluded: excluded.unwrap_or("<none>").to_string(),
        });
    }
    let t = curvatures.len();
    let n_layers = curvatures[0].layers.len();
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let bs: Vec<Matrix> = curvatures.iter().map(|c| c.layers[l].b.to_dense()).collect();
        let as_: Vec<Matrix> = curvatures.iter().map(|c| c.layers[l].a.to_dense()).collect();
        layers.push(layer_merge_error(&bs, &as_)?);
    }
    Ok(MergeErrorReport { n_tasks: t, layers })
}

/// Merge error for explicit factor lists (`bs[t]`, `as_[t]` per task).
pub fn layer_merge_error(bs: &[Matrix], as_: &[Matrix]) -> Result<LayerMergeError> {
    let t = bs.len();
    if t == 0 || as_.len() != t {
        return Err(shape_err("merge_error factor lists", t, as_.len()));
    }
    let p = bs[0].rows() * as_[0].rows();
    if p > MERGE_ERROR_LIMIT {
        return Err(TakError::Capacity {
            what: "layer parameter count for merge_error",
            size: p,
            limit: MERGE_ERROR_LIMIT,
        });
    }
    // Mean taken as a shift of the first factor so identical inputs give
    // deviations that are exactly zero.
    let mean = |ms: &[Matrix]| -> Result<Matrix> {
        let mut shift = Matrix::zeros(ms[0].rows(), ms[0].cols());
        for m in &ms[1..] {
            shift.add_scaled(1.0 / t as f64, &m.sub(&ms[0])?)?;
        }
        let mut out = ms[0].clone();
        out.add_scaled(1.0, &shift)?;
        Ok(out)
    };
    let (mean_b, mean_a) = (mean(bs)?, mean(as_)?);
    let delta_b: Vec<Matrix> = bs.iter().map(|b| b.sub(&mean_b)).collect::<Result<_>>()?;
    let delta_a: Vec<Matrix> = as_.iter().map(|a| a.sub(&mean_a)).collect::<Result<_>>()?;
    let sigma = |ds: &[Matrix]| (ds.iter().map(|d| d.frobenius_norm().powi(2)).sum::<f64>() / t as f64).sqrt();
    let (sigma_a, sigma_b) = (sigma(&delta_a), sigma(&delta_b));

    // E = Σ_t ΔB_t ⊗ ΔA_t
    let actual = if p <= MATERIALIZE_LIMIT {
        let mut e = Matrix::zeros(p, p);
        for (db, da) in delta_b.iter().zip(&delta_a) {
            e.add_scaled(1.0, &db.kron(da))?;
        }
        e.frobenius_norm()
    } else {
        // ‖E‖² = Σ_{s,t} ⟨ΔB_s, ΔB_t⟩ ⟨ΔA_s, ΔA_t⟩
        let mut sq = 0.0;
        for s in 0..t {
            for u in 0..t {
                sq += delta_b[s].frobenius_dot(&delta_b[u])? * delta_a[s].frobenius_dot(&delta_a[u])?;
            }
        }
        sq.max(0.0).sqrt()
    };
    Ok(LayerMergeError {
        sigma_a,
        sigma_b,
        bound: t as f64 * sigma_a * sigma_b,
        actual,
    })
}

/// Contiguous partition of `0..n` into `k` blocks of size `⌊n/k⌋`, the last
/// block taking the remainder.
pub fn block_sizes(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(TakError::Parameter("block count must be at least 1".into()));
    }
    if k > n {
        return Err(TakError::Degenerate(format!(
            "cannot split a {n}-dimensional factor into {k} blocks"
        )));
    }
    let base = n / k;
    let mut sizes = vec![base; k];
    sizes[k - 1] += n - base * k;
    Ok(sizes)
}

pub fn block_factor(m: &Matrix, n_blocks: usize) -> Result<Factor> {
    let sizes = block_sizes(m.rows(), n_blocks)?;
    let mut start = 0;
    let mut blocks = Vec::with_capacity(sizes.len());
    for s in sizes {
        let mut b = Matrix::zeros(s, s);
        for i in 0..s {
            for j in 0..s {
                b.set(i, j, m.get(start + i, start + j));
            }
        }
        blocks.push(b);
        start += s;
    }
    Ok(Factor::Block { dim: m.rows(), blocks })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSpec {
    Fixed(usize),
    Fraction(f64),
}

impl RankSpec {
    pub fn resolve(&self, n: usize) -> Result<usize> {
        let k = match *self {
            RankSpec::Fixed(k) => k.min(n),
            RankSpec::Fraction(f) => {
                if !(f.is_finite() && f > 0.0 && f <= 1.0) {
                    return Err(TakError::Parameter(format!("rank fraction {f} outside (0, 1]")));
                }
                (f * n as f64).floor() as usize
            }
        };
        if k == 0 {
            return Err(TakError::Degenerate(format!(
                "rank {self:?} resolves to 0 for dimension {n}"
            )));
        }
        Ok(k)
    }
}

pub fn lowrank_factor(m: &Matrix, rank: RankSpec) -> Result<Factor> {
    let k = rank.resolve(m.rows())?;
    let eig = sym_eig(m)?;
    let n = m.rows();
    let mut vecs = Matrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            vecs.set(i, j, eig.eigenvectors.get(i, j));
        }
    }
    Ok(Factor::LowRank {
        dim: n,
        eigenvalues: eig.eigenvalues[..k].to_vec(),
        eigenvectors: vecs,
    })
}

/// Keeps the `⌈r·n(n+1)/2⌉` largest-magnitude upper-triangle entries; ties go
/// to the lower `(row, col)`.
pub fn prune_factor(m: &Matrix, keep_ratio: f64) -> Result<Factor> {
    if !(keep_ratio.is_finite() && keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(TakError::Parameter(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    let n = m.rows();
    let mut upper: Vec<SparseEntry> = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            upper.push(SparseEntry {
                row: i as u32,
                col: j as u32,
                value: m.get(i, j),
            });
        }
    }
    let keep = ((keep_ratio * upper.len() as f64).ceil() as usize).min(upper.len());
    // Stable sort keeps (row, col) order among equal magnitudes.
    upper.sort_by(|x, y| y.value.abs().total_cmp(&x.value.abs()));
    upper.truncate(keep);
    upper.sort_by_key(|e| (e.row, e.col));
    Ok(Factor::Sparse { dim: n, entries: upper })
}

pub fn quant8_factor(m: &Matrix) -> Factor {
    let n = m.rows();
    let mut codes = Vec::with_capacity(n * n);
    let mut scales = Vec::with_capacity(n);
    for i in 0..n {
        let row = m.row(i);
        let max = row.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let s = max / 127.0;
        scales.push(s);
        for &v in row {
            let q = if s == 0.0 {
                0.0
            } else {
                (v / s).round().clamp(-127.0, 127.0)
            };
            codes.push(q as i8);
        }
    }
    Factor::Quant8 { dim: n, codes, scales }
}

fn map_factors(c: &KfacCurvature, mut f: impl FnMut(&Matrix) -> Result<Factor>) -> Result<KfacCurvature> {
    let layers = c
        .layers
        .iter()
        .map(|l| {
            Ok(LayerCurvature {
                a: f(&l.a.to_dense())?,
                b: f(&l.b.to_dense())?,
                bias_block: l.bias_block.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(KfacCurvature {
        layers,
        meta: c.meta.clone(),
    })
}

/// Block-diagonal restriction of every factor.
pub fn compress_block(c: &KfacCurvature, n_blocks: usize) -> Result<KfacCurvature> {
    map_factors(c, |m| block_factor(m, n_blocks))
}

/// Top-k eigenpair truncation of every factor.
pub fn compress_lowrank(c: &KfacCurvature, rank: RankSpec) -> Result<KfacCurvature> {
    map_factors(c, |m| lowrank_factor(m, rank))
}

/// Magnitude pruning of every factor.
pub fn compress_prune(c: &KfacCurvature, keep_ratio: f64) -> Result<KfacCurvature> {
    map_factors(c, |m| prune_factor(m, keep_ratio))
}

/// 8-bit row-scaled quantization of every factor.
pub fn compress_quant8(c: &KfacCurvature) -> Result<KfacCurvature> {
    map_factors(c, |m| Ok(quant8_factor(m)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{Criterion, CurvatureMeta, KfacVariant};
    use crate::linalg::{kron_quadratic_form, Rng};

    fn spd(n: usize, rng: &mut Rng) -> Matrix {
        let g = rng.normal_matrix(n + 2, n, 1.0);
        g.matmul_tn(&g).unwrap()
    }

    fn curvature(id: &str, size: usize, layers: Vec<(Matrix, Matrix)>) -> KfacCurvature {
        KfacCurvature {
            layers: layers
                .into_iter()
                .map(|(b, a)| LayerCurvature {
                    a: Factor::Dense(a),
                    b: Factor::Dense(b),
                    bias_block: None,
                })
                .collect(),
            meta: CurvatureMeta {
                task_id: id.into(),
                variant: KfacVariant::Exact,
                criterion: Criterion::Squared,
                n_samples: size,
                dataset_size: size,
            },
        }
    }

    fn scalar(v: f64) -> Matrix {
        Matrix::from_rows(&[&[v]])
    }

    #[test]
    fn weights_follow_dataset_sizes() {
        let mut store = FactorStore::new();
        store
            .register(curvature("a", 100, vec![(scalar(1.0), scalar(1.0))]))
            .unwrap();
        store
            .register(curvature("b", 300, vec![(scalar(1.0), scalar(1.0))]))
            .unwrap();
        store
            .register(curvature("c", 600, vec![(scalar(1.0), scalar(1.0))]))
            .unwrap();
        let w = store.weights(Some("c"));
        assert_eq!(w, vec![("a".to_string(), 0.25), ("b".to_string(), 0.75)]);
        let all: f64 = store.weights(None).iter().map(|(_, w)| w).sum();
        assert!((all - 1.0).abs() < 1e-15);
        assert!(store
            .register(curvature("a", 1, vec![(scalar(1.0), scalar(1.0))]))
            .is_err());
        assert!(store
            .register(curvature("d", 1, vec![(Matrix::identity(2), scalar(1.0))]))
            .is_err());
    }

    #[test]
    fn identical_tasks_input_weighted_and_scale_consistent() {
        let mut rng = Rng::new(1);
        let (b, a) = (spd(2, &mut rng), spd(3, &mut rng));
        let mut store = FactorStore::new();
        store
            .register(curvature("x", 10, vec![(b.clone(), a.clone())]))
            .unwrap();
        store
            .register(curvature("y", 10, vec![(b.clone(), a.clone())]))
            .unwrap();
        let m = merge(&store, Some("z"), MergeMode::InputWeighted).unwrap();
        assert_eq!(m.layers[0].b, b.scaled(2.0));
        assert!(m.layers[0].a.sub(&a).unwrap().max_abs() < 1e-15);
        let m = merge(&store, None, MergeMode::ScaleConsistent).unwrap();
        let tau: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let q_merged = kron_quadratic_form(&m.layers[0].b, &m.layers[0].a, &tau).unwrap();
        let q_task = kron_quadratic_form(&b, &a, &tau).unwrap();
        assert!((q_merged - q_task).abs() <= 1e-10 * q_task.abs());
    }

    #[test]
    fn scalar_merge_by_hand() {
        let mut store = FactorStore::new();
        store
            .register(curvature("a", 1, vec![(scalar(2.0), scalar(3.0))]))
            .unwrap();
        store
            .register(curvature("b", 2, vec![(scalar(5.0), scalar(7.0))]))
            .unwrap();
        store
            .register(curvature("c", 1, vec![(scalar(11.0), scalar(13.0))]))
            .unwrap();
        let m = merge(&store, None, MergeMode::InputWeighted).unwrap();
        assert_eq!(m.layers[0].b.get(0, 0), 18.0);
        let expect_a = 0.25 * 3.0 + 0.5 * 7.0 + 0.25 * 13.0;
        assert!((m.layers[0].a.get(0, 0) - expect_a).abs() < 1e-14);
        let m = merge(&store, Some("b"), MergeMode::InputWeighted).unwrap();
        assert_eq!(m.layers[0].b.get(0, 0), 13.0);
        assert!((m.layers[0].a.get(0, 0) - 8.0).abs() < 1e-14);
    }

    #[test]
    fn empty_merge_is_an_error() {
        let mut store = FactorStore::new();
        assert!(matches!(
            merge(&store, None, MergeMode::InputWeighted),
            Err(TakError::EmptyMerge { .. })
        ));
        store
            .register(curvature("only", 1, vec![(scalar(1.0), scalar(1.0))]))
            .unwrap();
        assert!(matches!(
            merge(&store, Some("only"), MergeMode::InputWeighted),
            Err(TakError::EmptyMerge { .. })
        ));
    }

    #[test]
    fn merge_error_trivial_cases() {
        let mut rng = Rng::new(2);
        let (b, a) = (spd(3, &mut rng), spd(4, &mut rng));
        let r = layer_merge_error(&[b.clone(), b.clone(), b.clone()], &[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!((r.sigma_a, r.sigma_b, r.bound), (0.0, 0.0, 0.0));
        assert!(r.actual < 1e-12);
        let r = layer_merge_error(&[b], &[a]).unwrap();
        assert_eq!(r.bound, 0.0);
        assert!(r.actual < 1e-12);
    }

    #[test]
    fn deviation_form_matches_definition() {
        let mut rng = Rng::new(3);
        let bs: Vec<Matrix> = (0..4).map(|_| spd(3, &mut rng)).collect();
        let as_: Vec<Matrix> = (0..4).map(|_| spd(4, &mut rng)).collect();
        let r = layer_merge_error(&bs, &as_).unwrap();
        // Σ B_t ⊗ A_t − (1/T)(Σ B_t) ⊗ (Σ A_t), materialized.
        let mut e = Matrix::zeros(12, 12);
        let mut sb = Matrix::zeros(3, 3);
        let mut sa = Matrix::zeros(4, 4);
        for (b, a) in bs.iter().zip(&as_) {
            e.add_scaled(1.0, &b.kron(a)).unwrap();
            sb.add_scaled(1.0, b).unwrap();
            sa.add_scaled(1.0, a).unwrap();
        }
        e.add_scaled(-0.25, &sb.kron(&sa)).unwrap();
        let dense = e.frobenius_norm();
        assert!((r.actual - dense).abs() < 1e-10 * dense);
        assert!(r.actual <= r.bound);
    }

    #[test]
    fn gram_path_matches_materialized_sum() {
        let mut rng = Rng::new(4);
        let (d1, d2) = (50, 45);
        assert!(d1 * d2 > MATERIALIZE_LIMIT);
        let bs: Vec<Matrix> = (0..3).map(|_| spd(d1, &mut rng)).collect();
        let as_: Vec<Matrix> = (0..3).map(|_| spd(d2, &mut rng)).collect();
        let r = layer_merge_error(&bs, &as_).unwrap();
        let mut e = Matrix::zeros(d1 * d2, d1 * d2);
        let mut sb = Matrix::zeros(d1, d1);
        let mut sa = Matrix::zeros(d2, d2);
        for (b, a) in bs.iter().zip(&as_) {
            e.add_scaled(1.0, &b.kron(a)).unwrap();
            sb.add_scaled(1.0, b).unwrap();
            sa.add_scaled(1.0, a).unwrap();
        }
        e.add_scaled(-1.0 / 3.0, &sb.kron(&sa)).unwrap();
        let dense = e.frobenius_norm();
        assert!((r.actual - dense).abs() < 1e-9 * dense);
        assert!(r.actual <= r.bound);
    }

    #[test]
    fn block_partition_and_storage() {
        assert_eq!(block_sizes(65, 8).unwrap(), vec![8, 8, 8, 8, 8, 8, 8, 9]);
        assert!(matches!(block_sizes(3, 4), Err(TakError::Degenerate(_))));
        let mut rng = Rng::new(4);
        let m = spd(64, &mut rng);
        let f = block_factor(&m, 8).unwrap();
        assert_eq!(f.storage_bytes(), 512 * 8);
        assert_eq!(Factor::Dense(m.clone()).storage_bytes(), 4096 * 8);
        assert_eq!(block_factor(&m, 1).unwrap().to_dense(), m);
        let d = Matrix::from_diag(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(block_factor(&d, 3).unwrap().to_dense(), d);
    }

    #[test]
    fn lowrank_cases() {
        let mut rng = Rng::new(5);
        let m = spd(6, &mut rng);
        let full = lowrank_factor(&m, RankSpec::Fixed(6)).unwrap().to_dense();
        assert!(full.sub(&m).unwrap().frobenius_norm() < 1e-8 * m.frobenius_norm());
        let x = [1.0, -2.0, 0.5];
        let mut xx = Matrix::zeros(3, 3);
        xx.add_gram(&Matrix::from_rows(&[&x]), 1.0).unwrap();
        let r1 = lowrank_factor(&xx, RankSpec::Fixed(1)).unwrap().to_dense();
        assert!(r1.sub(&xx).unwrap().frobenius_norm() < 1e-10);
        assert_eq!(RankSpec::Fraction(0.25).resolve(65).unwrap(), 16);
        assert_eq!(RankSpec::Fixed(32).resolve(10).unwrap(), 10);
        assert!(matches!(
            RankSpec::Fraction(0.1).resolve(5),
            Err(TakError::Degenerate(_))
        ));
    }

    #[test]
    fn prune_cases() {
        let mut rng = Rng::new(6);
        let m = spd(5, &mut rng);
        assert_eq!(prune_factor(&m, 1.0).unwrap().to_dense(), m);
        let z = Matrix::zeros(4, 4);
        assert_eq!(prune_factor(&z, 0.3).unwrap().to_dense(), z);
        match prune_factor(&m, 0.3).unwrap() {
            Factor::Sparse { entries, .. } => assert_eq!(entries.len(), 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(prune_factor(&m, 0.0), Err(TakError::Parameter(_))));
        assert!(matches!(prune_factor(&m, 1.5), Err(TakError::Parameter(_))));
        // Equal magnitudes resolve toward the lowest (row, col).
        let flat = Matrix::from_rows(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        match prune_factor(&flat, 0.5).unwrap() {
            Factor::Sparse { entries, .. } => {
                let coords: Vec<_> = entries.iter().map(|e| (e.row, e.col)).collect();
                assert_eq!(coords, vec![(0, 0), (0, 1)]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quant8_cases() {
        let z = Matrix::zeros(3, 3);
        assert_eq!(quant8_factor(&z).to_dense(), z);
        let m = Matrix::from_rows(&[&[127.0, -127.0], &[-127.0, 127.0]]);
        let q = quant8_factor(&m);
        assert_eq!(q.dequantized_rows().unwrap(), m);
        assert_eq!(q.to_dense(), m);
        assert_eq!(q.storage_bytes(), 4 + 16);
    }
}
