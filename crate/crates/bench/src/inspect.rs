//! Human-readable summaries of curvature files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tak_core::curvature::{load_curvature, Factor, KfacCurvature};
use tak_core::linalg::sym_eig;
use tak_core::regfactors::{
    compress_block, compress_lowrank, compress_prune, compress_quant8, merge_error, FactorStore, MergeErrorReport,
    RankSpec,
};

use crate::error::{BenchError, Result};

/// Eigenvalues below this fraction of the largest count as zero for the
/// numerical rank.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    pub dim: usize,
    pub scheme: &'static str,
    pub min: f64,
    pub max: f64,
    pub trace: f64,
    pub rank: usize,
}

impl Spectrum {
    pub fn of(f: &Factor) -> tak_core::Result<Self> {
        let eig = sym_eig(&f.to_dense())?;
        let max = eig.eigenvalues.first().copied().unwrap_or(0.0);
        let min = eig.eigenvalues.last().copied().unwrap_or(0.0);
        let cutoff = RANK_TOL * max.abs().max(f64::MIN_POSITIVE);
        Ok(Self {
            dim: f.dim(),
            scheme: f.scheme(),
            min,
            max,
            trace: eig.eigenvalues.iter().sum(),
            rank: eig.eigenvalues.iter().filter(|&&l| l > cutoff).count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub a: Spectrum,
    pub b: Spectrum,
    pub bias_block: bool,
}

/// Storage of the file's factors re-encoded in one scheme; `None` when the
/// scheme does not apply to these dimensions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageRow {
    pub scheme: String,
    pub bytes: Option<usize>,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvatureSummary {
    pub path: PathBuf,
    pub task_id: String,
    pub n_samples: usize,
    pub dataset_size: usize,
    pub layers: Vec<LayerSummary>,
    /// Bytes of the factors as stored in this file.
    pub stored_bytes: usize,
    /// Bytes of the same factors held densely.
    pub dense_bytes: usize,
    pub storage: Vec<StorageRow>,
}

impl CurvatureSummary {
    pub fn stored_ratio(&self) -> f64 {
        self.stored_bytes as f64 / self.dense_bytes as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectReport {
    pub files: Vec<CurvatureSummary>,
    pub merge: Option<MergeErrorReport>,
}

fn dense_bytes(c: &KfacCurvature) -> usize {
    c.layers
        .iter()
        .map(|l| {
            let (a, b) = (l.a.dim(), l.b.dim());
            let bias = l.bias_block.as_ref().map_or(0, |m| m.rows() * m.cols());
            (a * a + b * b + bias) * 8
        })
        .sum()
}

pub fn summarize(path: &Path, c: &KfacCurvature) -> Result<CurvatureSummary> {
    let layers = c
        .layers
        .iter()
        .enumerate()
        .map(|(layer, lc)| {
            Ok(LayerSummary {
                layer,
                a: Spectrum::of(&lc.a)?,
                b: Spectrum::of(&lc.b)?,
                bias_block: lc.bias_block.is_some(),
            })
        })
        .collect::<tak_core::Result<Vec<_>>>()?;
    let dense = dense_bytes(c);
    let schemes: [(&str, tak_core::Result<KfacCurvature>); 5] = [
        ("dense", Ok(c.clone())),
        ("block-8", compress_block(c, 8)),
        ("lowrank-25%", compress_lowrank(c, RankSpec::Fraction(0.25))),
        ("prune-10%", compress_prune(c, 0.1)),
        ("quant8", compress_quant8(c)),
    ];
    let storage = schemes
        .into_iter()
        .map(|(scheme, res)| {
            let bytes = res
                .ok()
                .map(|k| if scheme == "dense" { dense } else { k.storage_bytes() });
            StorageRow {
                scheme: scheme.to_string(),
                bytes,
                ratio: bytes.map(|b| b as f64 / dense as f64),
            }
        })
        .collect();
    Ok(CurvatureSummary {
        path: path.to_path_buf(),
        task_id: c.meta.task_id.clone(),
        n_samples: c.meta.n_samples,
        dataset_size: c.meta.dataset_size,
        layers,
        stored_bytes: c.storage_bytes(),
        dense_bytes: dense,
        storage,
    })
}

/// Loads and summarizes every file; two or more files also get a merge
/// error report over all of them.
pub fn inspect(paths: &[PathBuf]) -> Result<InspectReport> {
    if paths.is_empty() {
        return Err(BenchError::Artifact {
            path: PathBuf::new(),
            reason: "no curvature files given".into(),
        });
    }
    let mut files = Vec::with_capacity(paths.len());
    let mut store = FactorStore::new();
    for p in paths {
        let c = load_curvature(p).map_err(|e| BenchError::Artifact {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        files.push(summarize(p, &c)?);
        if paths.len() > 1 {
            store.register(c)?;
        }
    }
    let merge = if paths.len() > 1 {
        Some(merge_error(&store, None)?)
    } else {
        None
    };
    Ok(InspectReport { files, merge })
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

pub fn render(report: &InspectReport) -> String {
    let mut s = String::new();
    for f in &report.files {
        let _ = writeln!(
            s,
            "{} (task {}, {} of {} samples)",
            f.path.display(),
            f.task_id,
            f.n_samples,
            f.dataset_size
        );
        let _ = writeln!(
            s,
            "  {:>5} {:>9} {:>9} {:>11} {:>11} {:>11} {:>6} {:>11} {:>11} {:>11} {:>6}",
            "layer", "A", "B", "A min", "A max", "A trace", "A rank", "B min", "B max", "B trace", "B rank"
        );
        for l in &f.layers {
            let _ = writeln!(
                s,
                "  {:>5} {:>9} {:>9} {:>11.3e} {:>11.3e} {:>11.3e} {:>6} {:>11.3e} {:>11.3e} {:>11.3e} {:>6}",
                l.layer,
                format!("{0}x{0}", l.a.dim),
                format!("{0}x{0}", l.b.dim),
                l.a.min,
                l.a.max,
                l.a.trace,
                l.a.rank,
                l.b.min,
                l.b.max,
                l.b.trace,
                l.b.rank
            );
        }
        let _ = writeln!(
            s,
            "  stored {} bytes, dense {} bytes, ratio {:.4}",
            f.stored_bytes,
            f.dense_bytes,
            f.stored_ratio()
        );
        let _ = writeln!(s, "  {:>12} {:>12} {:>8}", "scheme", "bytes", "ratio");
        for r in &f.storage {
            let _ = writeln!(
                s,
                "  {:>12} {:>12} {:>8}",
                r.scheme,
                opt(r.bytes),
                opt(r.ratio.map(|x| format!("{x:.4}")))
            );
        }
    }
    if let Some(m) = &report.merge {
        let _ = writeln!(s, "merge error over {} tasks", m.n_tasks);
        let _ = writeln!(
            s,
            "  {:>5} {:>11} {:>11} {:>11} {:>11}",
            "layer", "sigma_a", "sigma_b", "actual", "bound"
        );
        for (l, e) in m.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "  {:>5} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e}",
                l, e.sigma_a, e.sigma_b, e.actual, e.bound
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use tak_core::curvature::{Criterion, CurvatureMeta, KfacVariant, LayerCurvature};
    use tak_core::linalg::{Matrix, Rng};

    fn spd(n: usize, rng: &mut Rng) -> Matrix {
        let x = Matrix::new(n, n, (0..n * n).map(|_| rng.normal()).collect()).unwrap();
        x.matmul_tn(&x).unwrap()
    }

    fn curvature(dims: &[(usize, usize)], seed: u64) -> KfacCurvature {
        let mut rng = Rng::new(seed);
        KfacCurvature {
            layers: dims
                .iter()
                .map(|&(a, b)| LayerCurvature {
                    a: Factor::Dense(spd(a, &mut rng)),
                    b: Factor::Dense(spd(b, &mut rng)),
                    bias_block: None,
                })
                .collect(),
            meta: CurvatureMeta {
                task_id: format!("t{seed}"),
                variant: KfacVariant::Exact,
                criterion: Criterion::Squared,
                n_samples: 10,
                dataset_size: 10,
            },
        }
    }

    #[test]
    fn one_row_per_layer_and_block_ratio() {
        let c = curvature(&[(64, 64), (64, 64), (64, 64)], 1);
        let s = summarize(Path::new("x"), &c).unwrap();
        assert_eq!(s.layers.len(), 3);
        let block = s.storage.iter().find(|r| r.scheme == "block-8").unwrap();
        assert_eq!(block.ratio, Some(0.125));
        let compressed = compress_block(&c, 8).unwrap();
        assert_eq!(summarize(Path::new("y"), &compressed).unwrap().stored_ratio(), 0.125);
        assert!(s.layers.iter().all(|l| l.a.min > -1e-8 && l.a.rank == 64));
    }

    #[test]
    fn small_factors_skip_block_scheme() {
        let c = curvature(&[(4, 3)], 2);
        let s = summarize(Path::new("x"), &c).unwrap();
        assert_eq!(s.storage.iter().find(|r| r.scheme == "block-8").unwrap().bytes, None);
        assert!(render(&InspectReport {
            files: vec![s],
            merge: None
        })
        .contains(" - "));
    }
}
