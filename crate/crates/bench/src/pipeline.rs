//! The staged run: suite → anchor → per-task curvature → fine-tuning →
//! evaluation. Each stage is cached in the run directory under its content
//! hash and reloaded when the hash and artifact digests match.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tak_core::codec::sha256_hex;
use tak_core::codec::write_file;
use tak_core::curvature::{
    diag_ggn, exact_ggn, kfac, load_curvature, save_curvature, subsample, CurvatureMeta, ExactGGN, Factor,
    KfacCurvature, LayerCurvature,
};
use tak_core::driftreg::DriftPenalty;
use tak_core::linalg::Matrix;
use tak_core::linearized::TaskModel;
use tak_core::network::{load_checkpoint, save_checkpoint, NetSpec, ParamVector};
use tak_core::regfactors::{
    compress_block, compress_lowrank, compress_prune, compress_quant8, merge, merge_error, FactorStore,
    MergeErrorReport, MergedCurvature,
};
use tak_core::synthtasks::{generate_suite, load_suite, pretrain, save_suite, task_id, Suite};
use tak_core::taskvec::{compose_verified, load_task_vector, save_task_vector, TaskVector};
use tak_core::training::finetune;

use crate::config::{AlphaPolicy, Compression, PenaltyConfig, PenaltySource, PipelineConfig, SCHEMA_VERSION};
use crate::error::{BenchError, Result, StageContext};
use crate::eval::{Evaluator, MergedEval, NegationRow, SweepRow};
use crate::manifest::{stage_hash, RunManifest, Seeds};

/// Worker-count environment variable.
pub const WORKERS_ENV: &str = "TAK_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Serial,
    Parallel(usize),
}

impl Exec {
    /// `Serial` when asked for, else the worker count from the environment
    /// (default: rayon's choice).
    pub fn from_env(serial: bool) -> Exec {
        if serial {
            return Exec::Serial;
        }
        let n = std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        if n == 1 {
            Exec::Serial
        } else {
            Exec::Parallel(n)
        }
    }

    /// `f(0..n)` in order, possibly concurrently.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match *self {
            Exec::Serial => (0..n).map(f).collect(),
            Exec::Parallel(workers) => {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build();
                match pool {
                    Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
                    Err(_) => (0..n).map(f).collect(),
                }
            }
        }
    }
}

pub fn config_hash(cfg: &PipelineConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

pub fn network(cfg: &PipelineConfig) -> tak_core::Result<NetSpec> {
    cfg.suite.default_net(cfg.hidden)
}

/// Applies the configured compression to one task's factors.
pub fn compress(c: &KfacCurvature, scheme: Compression) -> tak_core::Result<KfacCurvature> {
    match scheme {
        Compression::None => Ok(c.clone()),
        Compression::Block { blocks } => compress_block(c, blocks),
        Compression::Lowrank { rank } => compress_lowrank(c, rank),
        Compression::Prune { keep_ratio } => compress_prune(c, keep_ratio),
        Compression::Quant8 => compress_quant8(c),
    }
}

/// Registers every task's (compressed) factors with weights `|D_t|`.
pub fn factor_store(curvatures: &[KfacCurvature], scheme: Compression) -> tak_core::Result<FactorStore> {
    let mut store = FactorStore::new();
    for c in curvatures {
        store.register(compress(c, scheme)?)?;
    }
    Ok(store)
}

/// The merged factors excluding `task`, stored as a dense curvature.
pub fn merged_as_curvature(m: &MergedCurvature, template: &CurvatureMeta, store: &FactorStore) -> KfacCurvature {
    let tasks: Vec<&KfacCurvature> = m.tasks.iter().filter_map(|id| store.get(id)).collect();
    KfacCurvature {
        layers: m
            .layers
            .iter()
            .map(|l| LayerCurvature {
                a: Factor::Dense(l.a.clone()),
                b: Factor::Dense(l.b.clone()),
                bias_block: l.bias_block.clone(),
            })
            .collect(),
        meta: CurvatureMeta {
            task_id: format!("merged-excluding-{}", m.excluded.as_deref().unwrap_or("none")),
            variant: template.variant,
            criterion: template.criterion,
            n_samples: tasks.iter().map(|c| c.meta.n_samples).sum(),
            dataset_size: tasks.iter().map(|c| c.meta.dataset_size).sum(),
        },
    }
}

/// Everything needed to build the drift penalty of any task.
pub struct PenaltyInputs<'a> {
    pub cfg: &'a PipelineConfig,
    pub net: &'a NetSpec,
    pub theta0: &'a ParamVector,
    pub suite: &'a Suite,
    pub store: &'a FactorStore,
}

/// The penalty for fine-tuning `task`, or `None` when regularization is off.
pub fn build_penalty(inp: &PenaltyInputs<'_>, task: usize) -> tak_core::Result<Option<DriftPenalty>> {
    let p: &PenaltyConfig = &inp.cfg.penalty;
    if !p.active() {
        return Ok(None);
    }
    let layout = inp.theta0.layout();
    let id = task_id(task);
    let weights = inp.store.weights(Some(&id));
    let penalty = match p.source {
        PenaltySource::None => return Ok(None),
        PenaltySource::Merged => {
            let m = merge(inp.store, Some(&id), p.merge_mode)?;
            DriftPenalty::merged(layout, &m, p.beta)?
        }
        PenaltySource::PerTask => DriftPenalty::per_task(layout, &inp.store.weighted(Some(&id)), p.beta)?,
        PenaltySource::Diagonal => {
            let mut diag = ParamVector::zeros(layout);
            for (other, w) in &weights {
                let s = other_index(inp.suite, other)?;
                let data = subsample(&inp.suite.tasks[s].train, inp.cfg.kfac.sample, inp.cfg.kfac.sample_seed)?;
                diag.add_scaled(*w, &diag_ggn(inp.net, inp.theta0, &data, inp.cfg.kfac.criterion)?)?;
            }
            DriftPenalty::diagonal(&diag, p.beta)?
        }
        PenaltySource::Exact => {
            let n = layout.total();
            let mut g = Matrix::zeros(n, n);
            let mut meta = None;
            for (other, w) in &weights {
                let s = other_index(inp.suite, other)?;
                let data = subsample(&inp.suite.tasks[s].train, inp.cfg.kfac.sample, inp.cfg.kfac.sample_seed)?;
                let e = exact_ggn(inp.net, inp.theta0, &data, inp.cfg.kfac.criterion)?;
                g.add_scaled(*w, &e.g)?;
                meta.get_or_insert(e.meta);
            }
            let meta = meta.ok_or_else(|| tak_core::TakError::EmptyMerge { excluded: id.clone() })?;
            DriftPenalty::exact(layout, &ExactGGN { g, meta }, p.beta)?
        }
    };
    Ok(Some(
        penalty
            .with_last_layer_scale(p.last_layer_scale)?
            .with_apply_every(p.apply_every)?
            .with_compensation(p.compensate),
    ))
}

fn other_index(suite: &Suite, id: &str) -> tak_core::Result<usize> {
    (0..suite.n_tasks())
        .find(|&t| task_id(t) == id)
        .ok_or_else(|| tak_core::TakError::Data(format!("curvature for unknown task {id}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangleSummary {
    pub tasks: [usize; 2],
    pub mean_xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub auc: Vec<f64>,
    pub mean_auc: f64,
}

/// Everything a full run reports. Every key is always present; stages that
/// were switched off are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub schema_version: u32,
    pub config_hash: String,
    pub tasks: Vec<String>,
    pub chance_accuracy: f64,
    pub pretrained: Vec<f64>,
    pub individual: Vec<f64>,
    pub task_vector_norms: Vec<f64>,
    pub merged_fixed: Option<MergedEval>,
    pub merged_best: Option<MergedEval>,
    pub joint_accuracy: Option<f64>,
    pub drift: Vec<f64>,
    pub sweep: Vec<SweepRow>,
    pub disentanglement: Option<DisentangleSummary>,
    pub localization: Option<LocalizationSummary>,
    pub negation: Option<Vec<NegationRow>>,
    pub curvature_storage_bytes: Option<usize>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    dir: PathBuf,
    exec: Exec,
    manifest: RunManifest,
    verbose: bool,
    suite: Option<(String, Suite)>,
    theta0: Option<(String, ParamVector)>,
    curvatures: Option<(String, Vec<KfacCurvature>)>,
    task_vectors: Option<(String, Vec<TaskVector>)>,
}

fn seeds(cfg: &PipelineConfig) -> Seeds {
    Seeds {
        suite: cfg.suite.seed,
        pretrain: cfg.pretrain.seed,
        kfac: cfg.kfac.sample_seed,
        finetune: cfg.finetune.seed,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    write_file(path, &bytes)?;
    Ok(())
}

impl Pipeline {
    /// Opens (or starts) a run in `dir`. Stages recorded by an earlier run
    /// with a different configuration are recomputed on demand.
    pub fn new(cfg: PipelineConfig, dir: impl Into<PathBuf>, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let dir = dir.into();
        let hash = config_hash(&cfg);
        let mut manifest = RunManifest::load(&dir)?.unwrap_or_else(|| RunManifest::new(hash.clone(), seeds(&cfg)));
        manifest.config_hash = hash;
        manifest.seeds = seeds(&cfg);
        manifest.command = std::env::args().collect();
        Ok(Self {
            cfg,
            dir,
            exec,
            manifest,
            verbose: false,
            suite: None,
            theta0: None,
            curvatures: None,
            task_vectors: None,
        })
    }

    pub fn verbose(mut self, on: bool) -> Self {
        self.verbose = on;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn net(&self) -> Result<NetSpec> {
        network(&self.cfg).stage("gen")
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[tak] {}", msg.as_ref());
        }
    }

    fn commit(&mut self, stage: &str, hash: String, files: &[PathBuf]) -> Result<()> {
        self.manifest.record(&self.dir, stage, hash, files)?;
        self.manifest.save(&self.dir)
    }

    fn cached(&self, stage: &str, hash: &str) -> Result<bool> {
        Ok(self.manifest.verified(&self.dir, stage, hash)?.is_some())
    }

    fn suite_stage(&mut self) -> Result<(String, Suite)> {
        if let Some(s) = &self.suite {
            return Ok(s.clone());
        }
        let hash = stage_hash("suite", &self.cfg.suite, &[]);
        let dir = self.dir.join("suite");
        let suite = if self.cached("suite", &hash)? {
            self.log("suite: cached");
            load_suite(&dir).stage("gen")?
        } else {
            self.log("suite: generating");
            let s = generate_suite(&self.cfg.suite).stage("gen")?;
            save_suite(&dir, &s).stage("gen")?;
            let mut files = vec![dir.join("suite.json"), dir.join("pretrain.bin")];
            for t in 0..s.n_tasks() {
                files.push(dir.join(format!("task{t}_train.bin")));
                files.push(dir.join(format!("task{t}_test.bin")));
            }
            self.commit("suite", hash.clone(), &files)?;
            s
        };
        self.suite = Some((hash.clone(), suite.clone()));
        Ok((hash, suite))
    }

    pub fn suite(&mut self) -> Result<Suite> {
        Ok(self.suite_stage()?.1)
    }

    fn theta0_stage(&mut self) -> Result<(String, ParamVector)> {
        if let Some(t) = &self.theta0 {
            return Ok(t.clone());
        }
        let (suite_hash, suite) = self.suite_stage()?;
        let hash = stage_hash("pretrain", &(self.cfg.hidden, &self.cfg.pretrain), &[&suite_hash]);
        let path = self.dir.join("theta0.ckpt");
        let net = self.net()?;
        let theta0 = if self.cached("pretrain", &hash)? {
            self.log("pretrain: cached");
            let (stored_net, theta) = load_checkpoint(&path).stage("pretrain")?;
            if stored_net != net {
                return Err(BenchError::Artifact {
                    path,
                    reason: "checkpoint network differs from configuration".into(),
                });
            }
            theta
        } else {
            self.log("pretrain: training anchor");
            let theta = pretrain(&net, &suite.pretrain, &self.cfg.pretrain).stage("pretrain")?;
            save_checkpoint(&path, &net, &theta).stage("pretrain")?;
            self.commit("pretrain", hash.clone(), &[path])?;
            theta
        };
        self.theta0 = Some((hash.clone(), theta0.clone()));
        Ok((hash, theta0))
    }

    pub fn theta0(&mut self) -> Result<ParamVector> {
        Ok(self.theta0_stage()?.1)
    }

    fn curvature_stage(&mut self) -> Result<(String, Vec<KfacCurvature>)> {
        if let Some(c) = &self.curvatures {
            return Ok(c.clone());
        }
        let (pre_hash, theta0) = self.theta0_stage()?;
        let suite = self.suite()?;
        let hash = stage_hash("kfac", &self.cfg.kfac, &[&pre_hash]);
        let paths: Vec<PathBuf> = (0..suite.n_tasks())
            .map(|t| self.dir.join("curvature").join(format!("{}.kfac", task_id(t))))
            .collect();
        let curvatures = if self.cached("kfac", &hash)? {
            self.log("kfac: cached");
            paths
                .iter()
                .map(|p| load_curvature(p).stage("kfac"))
                .collect::<Result<Vec<_>>>()?
        } else {
            self.log("kfac: estimating per-task factors");
            let net = self.net()?;
            let opts = self.cfg.kfac;
            let out = self.exec.map(suite.n_tasks(), |t| {
                let mut c = kfac(&net, &theta0, &suite.tasks[t].train, &opts)?;
                c.meta.task_id = task_id(t);
                save_curvature(&paths[t], &c)?;
                Ok(c)
            });
            let curvatures = out.into_iter().collect::<tak_core::Result<Vec<_>>>().stage("kfac")?;
            self.commit("kfac", hash.clone(), &paths)?;
            curvatures
        };
        self.curvatures = Some((hash.clone(), curvatures.clone()));
        Ok((hash, curvatures))
    }

    pub fn curvatures(&mut self) -> Result<Vec<KfacCurvature>> {
        Ok(self.curvature_stage()?.1)
    }

    /// Writes, for every task, the merged factors of the others plus the
    /// merge-error report; returns the reports.
    pub fn merge_kfac(&mut self) -> Result<Vec<MergeErrorReport>> {
        let curvatures = self.curvatures()?;
        let store = factor_store(&curvatures, self.cfg.penalty.compression).stage("merge-kfac")?;
        let mut reports = Vec::new();
        for (t, c) in curvatures.iter().enumerate() {
            let id = task_id(t);
            let m = merge(&store, Some(&id), self.cfg.penalty.merge_mode).stage("merge-kfac")?;
            let merged = merged_as_curvature(&m, &c.meta, &store);
            save_curvature(&self.dir.join("merged").join(format!("{id}.kfac")), &merged).stage("merge-kfac")?;
            reports.push(merge_error(&store, Some(&id)).stage("merge-kfac")?);
        }
        write_json(&self.dir.join("merged").join("merge_error.json"), &reports)?;
        Ok(reports)
    }

    fn finetune_stage(&mut self) -> Result<(String, Vec<TaskVector>)> {
        if let Some(v) = &self.task_vectors {
            return Ok(v.clone());
        }
        let (pre_hash, theta0) = self.theta0_stage()?;
        let suite = self.suite()?;
        let active = self.cfg.penalty.active();
        let (kfac_hash, curvatures) = if active {
            self.curvature_stage()?
        } else {
            (String::new(), Vec::new())
        };
        let penalty_key = if active { Some(&self.cfg.penalty) } else { None };
        let hash = stage_hash("finetune", &(&self.cfg.finetune, penalty_key), &[&pre_hash, &kfac_hash]);
        let n = suite.n_tasks();
        let vec_paths: Vec<PathBuf> = (0..n)
            .map(|t| self.dir.join("taskvec").join(format!("{}.tvec", task_id(t))))
            .collect();
        let curve_paths: Vec<PathBuf> = (0..n)
            .map(|t| self.dir.join("curves").join(format!("{}.csv", task_id(t))))
            .collect();
        let vectors = if self.cached("finetune", &hash)? {
            self.log("finetune: cached");
            vec_paths
                .iter()
                .map(|p| load_task_vector(p).map(|(_, tv)| tv).stage("finetune"))
                .collect::<Result<Vec<_>>>()?
        } else {
            self.log(format!(
                "finetune: {} tasks, penalty {}",
                n,
                if active {
                    format!("{:?} beta={}", self.cfg.penalty.source, self.cfg.penalty.beta)
                } else {
                    "off".into()
                }
            ));
            let net = self.net()?;
            let store = factor_store(&curvatures, self.cfg.penalty.compression).stage("finetune")?;
            let inputs = PenaltyInputs {
                cfg: &self.cfg,
                net: &net,
                theta0: &theta0,
                suite: &suite,
                store: &store,
            };
            let ft = &self.cfg.finetune;
            let out = self.exec.map(n, |t| -> tak_core::Result<TaskVector> {
                let penalty = build_penalty(&inputs, t)?;
                let report = finetune(&net, &theta0, &suite.tasks[t].train, ft, penalty.as_ref())?;
                let mut tv = report.tau.clone();
                tv.task_id = task_id(t);
                save_task_vector(&vec_paths[t], &net, &tv)?;
                write_file(&curve_paths[t], report.curve_csv().as_bytes())?;
                Ok(tv)
            });
            let vectors = out
                .into_iter()
                .collect::<tak_core::Result<Vec<_>>>()
                .stage("finetune")?;
            let files: Vec<PathBuf> = vec_paths.iter().chain(&curve_paths).cloned().collect();
            self.commit("finetune", hash.clone(), &files)?;
            vectors
        };
        self.task_vectors = Some((hash.clone(), vectors.clone()));
        Ok((hash, vectors))
    }

    pub fn task_vectors(&mut self) -> Result<Vec<TaskVector>> {
        Ok(self.finetune_stage()?.1)
    }

    fn model(&mut self) -> Result<TaskModel> {
        let theta0 = self.theta0()?;
        TaskModel::new(self.net()?, theta0, self.cfg.finetune.regime).stage("eval")
    }

    /// `θ0 + α Σ τ_t` written as a checkpoint; returns its path.
    pub fn compose(&mut self, alpha: f64) -> Result<PathBuf> {
        let theta0 = self.theta0()?;
        let vectors = self.task_vectors()?;
        let scaled: Vec<(&TaskVector, f64)> = vectors.iter().map(|tv| (tv, alpha)).collect();
        let theta = compose_verified(&theta0, &scaled).stage("compose")?;
        let path = self.dir.join("composed.ckpt");
        save_checkpoint(&path, &self.net()?, &theta).stage("compose")?;
        Ok(path)
    }

    /// Pre-trained, individual and merged accuracies; writes `eval.json`.
    pub fn eval(&mut self) -> Result<Results> {
        let mut cfg = self.cfg.clone();
        cfg.eval.disentangle = false;
        cfg.eval.localize = false;
        cfg.eval.negate = false;
        let r = self.evaluate_with(&cfg)?;
        write_json(&self.dir.join("eval.json"), &r)?;
        Ok(r)
    }

    pub fn sweep(&mut self) -> Result<Vec<SweepRow>> {
        let r = self.eval()?;
        write_csv(&self.dir.join("sweep.csv"), &r.sweep)?;
        Ok(r.sweep)
    }

    pub fn disentangle(&mut self) -> Result<tak_core::metrics::DisentanglementMap> {
        let model = self.model()?;
        let suite = self.suite()?;
        let vectors = self.task_vectors()?;
        let taus: Vec<&ParamVector> = vectors.iter().map(|tv| &tv.delta).collect();
        let e = &self.cfg.eval;
        let map = Evaluator::new(&model, &suite)
            .disentanglement(&taus, e.disentangle_tasks, e.disentangle_points)
            .stage("disentangle")?;
        write_file(&self.dir.join("disentangle.csv"), map.to_csv().as_bytes())?;
        Ok(map)
    }

    pub fn localize(&mut self) -> Result<Vec<tak_core::metrics::NormalcyReport>> {
        let model = self.model()?;
        let suite = self.suite()?;
        let vectors = self.task_vectors()?;
        let taus: Vec<&ParamVector> = vectors.iter().map(|tv| &tv.delta).collect();
        let reports = Evaluator::new(&model, &suite).localization(&taus).stage("localize")?;
        self.write_localization(&reports)?;
        Ok(reports)
    }

    fn write_localization(&self, reports: &[tak_core::metrics::NormalcyReport]) -> Result<()> {
        let mut out = String::from("task,split,score\n");
        for (t, r) in reports.iter().enumerate() {
            for line in r.to_csv().lines().skip(1) {
                out.push_str(&format!("{},{line}\n", task_id(t)));
            }
        }
        write_file(&self.dir.join("localize.csv"), out.as_bytes())?;
        Ok(())
    }

    pub fn negate(&mut self) -> Result<Vec<NegationRow>> {
        let model = self.model()?;
        let suite = self.suite()?;
        let vectors = self.task_vectors()?;
        let taus: Vec<&ParamVector> = vectors.iter().map(|tv| &tv.delta).collect();
        let ev = Evaluator::new(&model, &suite);
        let e = &self.cfg.eval;
        let pre = ev.pretrained().stage("negate")?;
        let rows = ev
            .negation(
                &taus,
                e.control_task,
                &e.negation_grid.values(),
                e.control_fraction,
                &pre,
            )
            .stage("negate")?;
        write_csv(&self.dir.join("negation.csv"), &rows)?;
        Ok(rows)
    }

    fn evaluate_with(&mut self, cfg: &PipelineConfig) -> Result<Results> {
        let model = self.model()?;
        let suite = self.suite()?;
        let vectors = self.task_vectors()?;
        let curvature_bytes = if cfg.penalty.active() {
            let curvatures = self.curvatures()?;
            let store = factor_store(&curvatures, cfg.penalty.compression).stage("eval")?;
            Some(
                store
                    .task_ids()
                    .iter()
                    .filter_map(|id| store.get(id))
                    .map(|c| c.storage_bytes())
                    .sum(),
            )
        } else {
            None
        };
        let taus: Vec<&ParamVector> = vectors.iter().map(|tv| &tv.delta).collect();
        let ev = Evaluator::new(&model, &suite);
        let e = &cfg.eval;
        let stage = "eval";
        let pretrained = ev.pretrained().stage(stage)?;
        let individual = ev.individual(&taus).stage(stage)?;
        let alphas = e.sweep.values();
        let merged_fixed = match e.alpha_policy {
            AlphaPolicy::Fixed | AlphaPolicy::Both => Some(ev.merged(&taus, e.fixed_alpha, &individual).stage(stage)?),
            AlphaPolicy::GridBest => None,
        };
        let merged_best = match e.alpha_policy {
            AlphaPolicy::GridBest | AlphaPolicy::Both => {
                let best = ev.best_alpha(&taus, &alphas).stage(stage)?;
                Some(ev.merged(&taus, best, &individual).stage(stage)?)
            }
            AlphaPolicy::Fixed => None,
        };
        let report_alpha = merged_fixed
            .as_ref()
            .or(merged_best.as_ref())
            .map_or(e.fixed_alpha, |m| m.alpha);
        let joint_accuracy = if e.joint {
            Some(ev.joint(&taus, report_alpha).stage(stage)?)
        } else {
            None
        };
        let drift = ev.drift(&taus, report_alpha).stage(stage)?;
        let sweep = ev.sweep(&taus, &alphas, &individual).stage("sweep")?;

        let disentanglement = if e.disentangle {
            let map = ev
                .disentanglement(&taus, e.disentangle_tasks, e.disentangle_points)
                .stage("disentangle")?;
            write_file(&self.dir.join("disentangle.csv"), map.to_csv().as_bytes())?;
            Some(DisentangleSummary {
                tasks: e.disentangle_tasks,
                mean_xi: map.mean(),
            })
        } else {
            None
        };
        let localization = if e.localize {
            let reports = ev.localization(&taus).stage("localize")?;
            self.write_localization(&reports)?;
            let auc: Vec<f64> = reports.iter().map(|r| r.auc).collect();
            let mean_auc = auc.iter().sum::<f64>() / auc.len() as f64;
            Some(LocalizationSummary { auc, mean_auc })
        } else {
            None
        };
        let negation = if e.negate {
            let rows = ev
                .negation(
                    &taus,
                    e.control_task,
                    &e.negation_grid.values(),
                    e.control_fraction,
                    &pretrained,
                )
                .stage("negate")?;
            write_csv(&self.dir.join("negation.csv"), &rows)?;
            Some(rows)
        } else {
            None
        };

        Ok(Results {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash(&self.cfg),
            tasks: (0..suite.n_tasks()).map(task_id).collect(),
            chance_accuracy: 1.0 / self.cfg.suite.classes_per_task as f64,
            pretrained,
            individual,
            task_vector_norms: taus.iter().map(|t| t.norm()).collect(),
            merged_fixed,
            merged_best,
            joint_accuracy,
            drift,
            sweep,
            disentanglement,
            localization,
            negation,
            curvature_storage_bytes: curvature_bytes,
        })
    }

    /// Every stage, then `results.json`, `sweep.csv` and the manifest.
    pub fn run(&mut self) -> Result<Results> {
        let cfg = self.cfg.clone();
        let results = self.evaluate_with(&cfg)?;
        write_csv(&self.dir.join("sweep.csv"), &results.sweep)?;
        write_json(&self.dir.join("results.json"), &results)?;
        write_file(&self.dir.join("config.json"), cfg.to_json().as_bytes())?;
        self.manifest.verify_all(&self.dir)?;
        self.manifest.save(&self.dir)?;
        Ok(results)
    }
}
