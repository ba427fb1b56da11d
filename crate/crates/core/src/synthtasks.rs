//! Synthetic multi-task benchmark: Gaussian clusters per class, one region
//! (or one rotation) per task, and a pre-training mixture over every task.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{write_file, ByteReader, ByteWriter};
use crate::error::{Result, TakError};
use crate::linalg::{Matrix, Rng};
use crate::linearized::Regime;
use crate::network::{ClassSlice, Dataset, NetSpec, ParamVector, Split};
use crate::training::{finetune, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// Each task lives in its own region of input space.
    DisjointRegions,
    /// Tasks share one region; each task is a random rotation of a common layout.
    RotatedShared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    pub input_dim: usize,
    pub classes_per_task: usize,
    pub clusters_per_class: usize,
    pub sigma: f64,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub pretrain_size: usize,
    /// Clusters per class (the first ones) whose pre-training examples keep
    /// their class label. Examples from the remaining clusters carry only
    /// their task: the label is drawn uniformly from that task's classes.
    pub pretrain_clusters: usize,
    pub seed: u64,
    pub geometry: Geometry,
    /// Distance from the origin to each task region's center.
    pub region_radius: f64,
    /// Distance from a region center to each of its cluster centers.
    pub cluster_radius: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            input_dim: 16,
            classes_per_task: 3,
            clusters_per_class: 2,
            sigma: 0.5,
            train_per_task: 512,
            test_per_task: 256,
            pretrain_size: 1024,
            pretrain_clusters: 1,
            seed: 0,
            geometry: Geometry::DisjointRegions,
            region_radius: 8.0,
            cluster_radius: 3.0,
        }
    }
}

/// Minimum separation between cluster centers, in units of `sigma`.
pub const MIN_SEPARATION: f64 = 4.0;
const MAX_REJECTIONS: usize = 10_000;

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks < 2 {
            return Err(TakError::Parameter(format!(
                "a suite needs at least 2 tasks, got {}",
                self.n_tasks
            )));
        }
        if self.input_dim == 0 || self.classes_per_task < 2 || self.clusters_per_class == 0 {
            return Err(TakError::Parameter(
                "input_dim and clusters_per_class must be positive and classes_per_task at least 2".into(),
            ));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(TakError::Parameter(format!("sigma {} must be positive", self.sigma)));
        }
        if !(self.region_radius >= 0.0 && self.cluster_radius > 0.0) {
            return Err(TakError::Parameter("region and cluster radii must be positive".into()));
        }
        if self.pretrain_clusters == 0 || self.pretrain_clusters > self.clusters_per_class {
            return Err(TakError::Parameter(format!(
                "pretrain_clusters must lie in 1..={}",
                self.clusters_per_class
            )));
        }
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return Err(TakError::Parameter("every split needs at least one example".into()));
        }
        Ok(())
    }

    pub fn n_outputs(&self) -> usize {
        self.n_tasks * self.classes_per_task
    }

    pub fn class_slice(&self, task: usize) -> ClassSlice {
        ClassSlice {
            offset: task * self.classes_per_task,
            count: self.classes_per_task,
        }
    }

    /// The label range spanning every task.
    pub fn union_slice(&self) -> ClassSlice {
        ClassSlice {
            offset: 0,
            count: self.n_outputs(),
        }
    }

    /// `D → h → h → T·C` tanh network over the union label space.
    pub fn default_net(&self, hidden: usize) -> Result<NetSpec> {
        NetSpec::mlp(
            &[self.input_dim, hidden, hidden, self.n_outputs()],
            crate::network::Activation::Tanh,
        )
    }
}

pub fn task_id(t: usize) -> String {
    format!("task-{t}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCenter {
    pub task: usize,
    /// Global (union) label.
    pub label: usize,
    pub cluster: usize,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteMeta {
    pub centers: Vec<ClusterCenter>,
    /// Smallest distance between centers of different tasks.
    pub min_inter_task_distance: f64,
    /// Smallest distance between centers of the same task.
    pub min_intra_task_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub config: SuiteConfig,
    pub meta: SuiteMeta,
    pub pretrain: Dataset,
    pub tasks: Vec<TaskData>,
}

impl Suite {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn test_sets(&self) -> Vec<Dataset> {
        self.tasks.iter().map(|t| t.test.clone()).collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn random_unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random orthogonal matrix via Gram–Schmidt on Gaussian columns.
fn random_rotation(rng: &mut Rng, d: usize) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let rows: Vec<&[f64]> = basis.iter().map(Vec::as_slice).collect();
    Matrix::from_rows(&rows)
}

/// Cluster centers around `origin`, pairwise at least `min_dist` apart.
fn place_clusters(rng: &mut Rng, origin: &[f64], n: usize, radius: f64, min_dist: f64) -> Result<Vec<Vec<f64>>> {
    let d = origin.len();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut rejections = 0;
    while out.len() < n {
        let u = random_unit(rng, d);
        let c: Vec<f64> = origin.iter().zip(&u).map(|(o, x)| o + radius * x).collect();
        if out.iter().all(|p| dist(p, &c) >= min_dist) {
            out.push(c);
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(TakError::Generation(format!(
                    "could not place {n} clusters {min_dist} apart on a radius-{radius} sphere in {d} dimensions"
                )));
            }
        }
    }
    Ok(out)
}

/// Region centers `±R e_i`: task `t` uses axis `t / 2` with sign by parity.
fn region_center(t: usize, d: usize, r: f64) -> Vec<f64> {
    let mut c = vec![0.0; d];
    c[t / 2] = if t.is_multiple_of(2) { r } else { -r };
    c
}

fn make_centers(cfg: &SuiteConfig, rng: &mut Rng) -> Result<Vec<ClusterCenter>> {
    let (t_n, c_n, k_n, d) = (cfg.n_tasks, cfg.classes_per_task, cfg.clusters_per_class, cfg.input_dim);
    let per_task = c_n * k_n;
    let min_dist = MIN_SEPARATION * cfg.sigma;
    let mut centers = Vec::with_capacity(t_n * per_task);
    let mut push = |t: usize, pts: Vec<Vec<f64>>| {
        for (i, center) in pts.into_iter().enumerate() {
            centers.push(ClusterCenter {
                task: t,
                label: t * c_n + i % c_n,
                cluster: i / c_n,
                center,
            });
        }
    };
    match cfg.geometry {
        Geometry::DisjointRegions => {
            if t_n > 2 * d {
                return Err(TakError::Generation(format!(
                    "{t_n} disjoint regions do not fit on the axes of a {d}-dimensional space"
                )));
            }
            // Neighbouring regions are √2·R apart; both spheres must clear each other.
            let gap = if t_n > 2 { std::f64::consts::SQRT_2 } else { 2.0 } * cfg.region_radius;
            if gap - 2.0 * cfg.cluster_radius < min_dist {
                return Err(TakError::Generation(format!(
                    "region radius {} too small for cluster radius {} at separation {min_dist}",
                    cfg.region_radius, cfg.cluster_radius
                )));
            }
            for t in 0..t_n {
                let origin = region_center(t, d, cfg.region_radius);
                let pts = place_clusters(rng, &origin, per_task, cfg.cluster_radius, min_dist)?;
                push(t, pts);
            }
        }
        Geometry::RotatedShared => {
            let base = place_clusters(rng, &vec![0.0; d], per_task, cfg.cluster_radius, min_dist)?;
            for t in 0..t_n {
                let q = random_rotation(rng, d);
                let pts = base.iter().map(|b| q.matvec(b)).collect::<Result<Vec<_>>>()?;
                push(t, pts);
            }
        }
    }
    Ok(centers)
}

fn summarize(centers: Vec<ClusterCenter>) -> SuiteMeta {
    let mut inter = f64::INFINITY;
    let mut intra = f64::INFINITY;
    for (i, a) in centers.iter().enumerate() {
        for b in &centers[i + 1..] {
            let d = dist(&a.center, &b.center);
            if a.task == b.task {
                intra = intra.min(d);
            } else {
                inter = inter.min(d);
            }
        }
    }
    SuiteMeta {
        centers,
        min_inter_task_distance: inter,
        min_intra_task_distance: intra,
    }
}

/// Draws `n` examples cycling through the given centers.
fn sample(rng: &mut Rng, centers: &[&ClusterCenter], n: usize, sigma: f64, d: usize) -> (Matrix, Vec<usize>) {
    let mut x = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = centers[i % centers.len()];
        x.extend(c.center.iter().map(|m| m + sigma * rng.normal()));
        labels.push(c.label);
    }
    (Matrix::new(n, d, x).expect("sized above"), labels)
}

/// Builds the suite. Pre-training data covers every cluster; only the first
/// `pretrain_clusters` clusters of each class are labeled with their class.
pub fn generate_suite(cfg: &SuiteConfig) -> Result<Suite> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let mut geo_rng = Rng::derive(cfg.seed, 0x6e0);
    let meta = summarize(make_centers(cfg, &mut geo_rng)?);

    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let mut rng = Rng::derive(cfg.seed, 0x1000 + t as u64);
        let own: Vec<&ClusterCenter> = meta.centers.iter().filter(|c| c.task == t).collect();
        let n = cfg.train_per_task + cfg.test_per_task;
        let (x, y) = sample(&mut rng, &own, n, cfg.sigma, d);
        let all = Dataset::new(x, y, task_id(t), Split::Train, cfg.class_slice(t))?;
        let order = rng.permutation(n);
        let mut train = all.subset(&order[..cfg.train_per_task]);
        let mut test = all.subset(&order[cfg.train_per_task..]);
        train.split = Split::Train;
        test.split = Split::Test;
        tasks.push(TaskData { train, test });
    }

    let mut rng = Rng::derive(cfg.seed, 0x9e0);
    let all: Vec<&ClusterCenter> = meta.centers.iter().collect();
    let (x, mut y) = sample(&mut rng, &all, cfg.pretrain_size, cfg.sigma, d);
    let c = cfg.classes_per_task;
    for (i, label) in y.iter_mut().enumerate() {
        let center = all[i % all.len()];
        if center.cluster >= cfg.pretrain_clusters {
            *label = center.task * c + rng.below(c);
        }
    }
    let pretrain = Dataset::new(x, y, "pretrain", Split::Train, cfg.union_slice())?;

    Ok(Suite {
        config: cfg.clone(),
        meta,
        pretrain,
        tasks,
    })
}

/// Non-linear training from a seeded initialization; returns `θ0`.
pub fn pretrain(net: &NetSpec, data: &Dataset, cfg: &TrainConfig) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(TakError::EmptyData("pre-training needs data"));
    }
    let init = net.init_params(&mut Rng::derive(cfg.seed, 0x1417));
    if cfg.epochs == 0 {
        return Ok(init);
    }
    let cfg = TrainConfig {
        regime: Regime::Nonlinear,
        ..cfg.clone()
    };
    let report = finetune(net, &init, data, &cfg, None)?;
    init.plus(&report.tau.delta)
}

const DATASET_MAGIC: &[u8; 8] = b"TAKDATA1";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    task_id: String,
    split: Split,
    classes: ClassSlice,
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.json(&DatasetHeader {
        task_id: data.task_id.clone(),
        split: data.split,
        classes: data.classes,
    })?;
    data.inputs.encode(&mut w);
    for &y in &data.labels {
        w.u32(y as u32);
    }
    Ok(w.into_inner())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    let h: DatasetHeader = r.json()?;
    let inputs = Matrix::decode(&mut r)?;
    let at = r.offset();
    let labels = (0..inputs.rows())
        .map(|_| r.u32().map(|y| y as usize))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Dataset::new(inputs, labels, h.task_id, h.split, h.classes).map_err(|e| TakError::Format {
        offset: at,
        message: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct SuiteManifest {
    config: SuiteConfig,
    meta: SuiteMeta,
    pretrain: String,
    tasks: Vec<(String, String)>,
}

/// Writes `suite.json` plus one binary file per dataset into `dir`.
pub fn save_suite(dir: &Path, suite: &Suite) -> Result<()> {
    let mut tasks = Vec::new();
    for (t, td) in suite.tasks.iter().enumerate() {
        let (tr, te) = (format!("task{t}_train.bin"), format!("task{t}_test.bin"));
        write_file(&dir.join(&tr), &encode_dataset(&td.train)?)?;
        write_file(&dir.join(&te), &encode_dataset(&td.test)?)?;
        tasks.push((tr, te));
    }
    write_file(&dir.join("pretrain.bin"), &encode_dataset(&suite.pretrain)?)?;
    let manifest = SuiteManifest {
        config: suite.config.clone(),
        meta: suite.meta.clone(),
        pretrain: "pretrain.bin".into(),
        tasks,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| TakError::Data(e.to_string()))?;
    write_file(&dir.join("suite.json"), &json)
}

pub fn load_suite(dir: &Path) -> Result<Suite> {
    let bytes = std::fs::read(dir.join("suite.json"))?;
    let m: SuiteManifest = serde_json::from_slice(&bytes).map_err(|e| TakError::Format {
        offset: e.column() as u64,
        message: format!("suite manifest: {e}"),
    })?;
    let load = |name: &str| -> Result<Dataset> { decode_dataset(&std::fs::read(dir.join(name))?) };
    let tasks = m
        .tasks
        .iter()
        .map(|(tr, te)| {
            Ok(TaskData {
                train: load(tr)?,
                test: load(te)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Suite {
        config: m.config,
        meta: m.meta,
        pretrain: load(&m.pretrain)?,
        tasks,
    })
}
