//! Accuracy metrics and the multi-method benchmark.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{HeuristicConfig, Method, SearchBox};
use crate::error::{Error, Result};
use crate::geometry::{sensed_to_reference, transform_points, CameraModel, PointSet2D, PoseParams};
use crate::landscape::{GridIndex, DEFAULT_WINDOW, LABEL_SCALE};
use crate::net::{predict_optimum, OffsetPredictor, PerfectStub};
use crate::similarity::objective;
use crate::synth::{scene_tensor, LandscapeContext, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Parameter threshold in normalized grid units.
    pub t_pm: f64,
    /// Point threshold in pixels.
    pub t_pt: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            t_pm: 1.0 / LABEL_SCALE,
            t_pt: 2.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_pm.is_finite() && self.t_pm > 0.0) {
            return Err(Error::config("eval.t_pm", "must be > 0"));
        }
        if !(self.t_pt.is_finite() && self.t_pt > 0.0) {
            return Err(Error::config("eval.t_pt", "must be > 0"));
        }
        Ok(())
    }
}

fn paired(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} estimates against {b} truths")));
    }
    if a == 0 {
        return Err(Error::EmptyInput("metric needs at least one trial"));
    }
    Ok(())
}

/// Fraction of trials whose every component deviates strictly less than `t_pm`.
pub fn param_accuracy(estimates: &[[f64; 3]], truths: &[[f64; 3]], t_pm: f64) -> Result<f64> {
    paired(estimates.len(), truths.len())?;
    let hits = estimates
        .iter()
        .zip(truths)
        .filter(|(e, t)| (0..3).all(|a| (e[a] - t[a]).abs() < t_pm))
        .count();
    Ok(hits as f64 / estimates.len() as f64)
}

/// Root mean squared Euclidean deviation.
pub fn param_rmse(estimates: &[[f64; 3]], truths: &[[f64; 3]]) -> Result<f64> {
    paired(estimates.len(), truths.len())?;
    let sq: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (0..3).map(|a| (e[a] - t[a]).powi(2)).sum::<f64>())
        .sum();
    Ok((sq / estimates.len() as f64).sqrt())
}

/// Distance from every registered sensed point to its reference partner.
pub fn point_residuals(
    u: &PointSet2D,
    v: &PointSet2D,
    correspondences: &[(usize, usize)],
    pose: &PoseParams,
    cam: &CameraModel,
) -> Result<Vec<f64>> {
    if correspondences.is_empty() {
        return Err(Error::EmptyInput("point metrics need correspondences"));
    }
    let registered = transform_points(u, &sensed_to_reference(pose, cam)?)?;
    correspondences
        .iter()
        .map(|&(i, j)| {
            let (p, q) = (
                registered.points().get(i),
                v.points().get(j),
            );
            match (p, q) {
                (Some(p), Some(q)) => Ok(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()),
                _ => Err(Error::Shape(format!("correspondence ({i}, {j}) out of range"))),
            }
        })
        .collect()
}

pub fn point_accuracy(
    u: &PointSet2D,
    v: &PointSet2D,
    correspondences: &[(usize, usize)],
    pose: &PoseParams,
    cam: &CameraModel,
    t_pt: f64,
) -> Result<f64> {
    let r = point_residuals(u, v, correspondences, pose, cam)?;
    Ok(r.iter().filter(|d| **d < t_pt).count() as f64 / r.len() as f64)
}

pub fn point_rmse(
    u: &PointSet2D,
    v: &PointSet2D,
    correspondences: &[(usize, usize)],
    pose: &PoseParams,
    cam: &CameraModel,
) -> Result<f64> {
    let r = point_residuals(u, v, correspondences, pose, cam)?;
    Ok((r.iter().map(|d| d * d).sum::<f64>() / r.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub eval: EvalConfig,
    pub heuristics: HeuristicConfig,
    pub trials_per_scene: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            eval: EvalConfig::default(),
            heuristics: HeuristicConfig::default(),
            trials_per_scene: 2,
            seed: 0,
        }
    }
}

/// Raw outcome of one method on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub scene: usize,
    pub trial: usize,
    pub method: Method,
    pub init_node: GridIndex,
    pub estimate: [f64; 3],
    pub truth: [f64; 3],
    /// `(estimate - truth) / (22 · grid step)` per axis.
    pub param_deviation: [f64; 3],
    pub param_accurate: bool,
    pub param_rmse: f64,
    pub point_accuracy: f64,
    pub point_rmse: f64,
    pub runtime_seconds: f64,
    pub evaluation_count: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub trials: usize,
    pub failed: usize,
    pub param_accuracy: MeanStd,
    pub param_rmse: MeanStd,
    pub point_accuracy: MeanStd,
    pub point_rmse: MeanStd,
    pub runtime_seconds: MeanStd,
    pub opti_step: MeanStd,
}

impl MethodSummary {
    /// Aggregates the successful records of `method`.
    pub fn from_records(method: Method, records: &[TrialRecord]) -> Self {
        let mine: Vec<&TrialRecord> = records.iter().filter(|r| r.method == method).collect();
        let ok: Vec<&TrialRecord> = mine.iter().copied().filter(|r| r.error.is_none()).collect();
        let col = |f: fn(&TrialRecord) -> f64| MeanStd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        Self {
            method,
            trials: ok.len(),
            failed: mine.len() - ok.len(),
            param_accuracy: col(|r| r.param_accurate as u8 as f64),
            param_rmse: col(|r| r.param_rmse),
            point_accuracy: col(|r| r.point_accuracy),
            point_rmse: col(|r| r.point_rmse),
            runtime_seconds: col(|r| r.runtime_seconds),
            opti_step: col(|r| r.evaluation_count as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSetup {
    pub scene: usize,
    pub argmax: GridIndex,
    pub tensor_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub methods: Vec<MethodSummary>,
    pub trials: Vec<TrialRecord>,
    pub scenes: Vec<SceneSetup>,
    /// SHA-256 of the JSON form of every configuration and seed.
    pub fingerprints: std::collections::BTreeMap<String, String>,
}

fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configs serialize");
    hex::encode(Sha256::digest(json))
}

impl BenchmarkReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Summary table: one row per metric, a mean and std column per method.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("metric");
        for m in &self.methods {
            header += &format!(",{0}_mean,{0}_std", m.method.name());
        }
        writeln!(w, "{header}")?;
        let rows: [(&str, fn(&MethodSummary) -> MeanStd); 6] = [
            ("ParamAcc", |m| m.param_accuracy),
            ("ParamRMSE", |m| m.param_rmse),
            ("PointAcc", |m| m.point_accuracy),
            ("PointRMSE", |m| m.point_rmse),
            ("Runtime", |m| m.runtime_seconds),
            ("OptiStep", |m| m.opti_step),
        ];
        for (name, get) in rows {
            let mut line = name.to_string();
            for m in &self.methods {
                let v = get(m);
                line += &format!(",{},{}", v.mean, v.std);
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// What answers for the learned method.
#[derive(Clone, Copy)]
pub enum IronSource<'a> {
    Model(&'a (dyn OffsetPredictor + Sync)),
    /// Predicts each scene's tensor argmax exactly.
    PerfectStub,
}

/// Seed of trial `t` of scene `s`.
fn trial_seed(master: u64, scene: usize, trial: usize) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((scene as u64) << 20)
        .wrapping_add(trial as u64)
}

/// Runs every requested method on every trial of every scene.
///
/// Each trial draws an admissible initialization node. Heuristics start from
/// its translation inside the continuous box; the learned predictor reads the
/// window at that node. Per-trial failures are recorded, not fatal.
pub fn run_benchmark(
    specs: &[SceneSpec],
    ctx: &LandscapeContext,
    methods: &[Method],
    iron: Option<IronSource<'_>>,
    cfg: &BenchConfig,
) -> Result<BenchmarkReport> {
    cfg.eval.validate()?;
    cfg.heuristics.validate()?;
    if specs.is_empty() {
        return Err(Error::EmptyInput("benchmark scene suite"));
    }
    if methods.is_empty() {
        return Err(Error::config("methods", "at least one method is required"));
    }
    if cfg.trials_per_scene == 0 {
        return Err(Error::config("bench.trials_per_scene", "must be >= 1"));
    }
    if methods.contains(&Method::Iron) && iron.is_none() {
        return Err(Error::MissingModel("the iron method needs a trained model".into()));
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let admissible = ctx.grid.admissible_centers(DEFAULT_WINDOW);
    if admissible.is_empty() {
        return Err(Error::config("grid", "no admissible window centers"));
    }
    let bx = SearchBox::from_grid(&ctx.grid);
    let step = ctx.grid.spacing();

    let per_scene: Vec<(SceneSetup, Vec<TrialRecord>)> = specs
        .par_iter()
        .enumerate()
        .map(|(s, spec)| {
            let t0 = Instant::now();
            let (scene, tensor, argmax) = scene_tensor(spec, ctx, s)?;
            let setup = SceneSetup {
                scene: s,
                argmax,
                tensor_seconds: t0.elapsed().as_secs_f64(),
            };
            let truth = spec.true_pose.translation();
            let angles = spec.true_pose.angles();
            let mut records = Vec::new();
            for trial in 0..cfg.trials_per_scene {
                let seed = trial_seed(cfg.seed, s, trial);
                let init = admissible[ChaCha8Rng::seed_from_u64(seed).gen_range(0..admissible.len())];
                let start = ctx.grid.node_params(init);
                for &method in &methods {
                    let t0 = Instant::now();
                    let outcome = match method {
                        Method::Iron => {
                            let stub = PerfectStub { optimum: argmax };
                            let p: &dyn OffsetPredictor = match iron {
                                Some(IronSource::Model(m)) => m,
                                _ => &stub,
                            };
                            predict_optimum(p, &tensor, init, LABEL_SCALE)
                                .map(|p| (p.translation, p.evaluation_count))
                        }
                        m => cfg
                            .heuristics
                            .run(
                                m,
                                |t| {
                                    objective(
                                        &scene.u,
                                        &scene.v,
                                        &PoseParams::from_translation(t, angles),
                                        &ctx.camera,
                                        &ctx.kernel,
                                        &ctx.objective,
                                    )
                                },
                                &bx,
                                start,
                                seed,
                            )
                            .map(|r| (r.best_params, r.evaluation_count)),
                    };
                    let runtime = t0.elapsed().as_secs_f64();
                    let record = outcome.and_then(|(est, count)| {
                        let pose = PoseParams::from_translation(est, angles);
                        let dev: [f64; 3] =
                            std::array::from_fn(|a| (est[a] - truth[a]) / (LABEL_SCALE * step[a]));
                        let c = &scene.correspondences;
                        Ok(TrialRecord {
                            scene: s,
                            trial,
                            method,
                            init_node: init,
                            estimate: est,
                            truth,
                            param_deviation: dev,
                            param_accurate: param_accuracy(&[dev], &[[0.0; 3]], cfg.eval.t_pm)? == 1.0,
                            param_rmse: param_rmse(&[dev], &[[0.0; 3]])?,
                            point_accuracy: point_accuracy(&scene.u, &scene.v, c, &pose, &ctx.camera, cfg.eval.t_pt)?,
                            point_rmse: point_rmse(&scene.u, &scene.v, c, &pose, &ctx.camera)?,
                            runtime_seconds: runtime,
                            evaluation_count: count,
                            error: None,
                        })
                    });
                    records.push(record.unwrap_or_else(|e| TrialRecord {
                        scene: s,
                        trial,
                        method,
                        init_node: init,
                        estimate: [f64::NAN; 3],
                        truth,
                        param_deviation: [f64::NAN; 3],
                        param_accurate: false,
                        param_rmse: f64::NAN,
                        point_accuracy: f64::NAN,
                        point_rmse: f64::NAN,
                        runtime_seconds: runtime,
                        evaluation_count: 0,
                        error: Some(e.to_string()),
                    }));
                }
            }
            Ok((setup, records))
        })
        .collect::<Result<_>>()?;

    let mut scenes = Vec::new();
    let mut trials = Vec::new();
    for (setup, recs) in per_scene {
        scenes.push(setup);
        trials.extend(recs);
    }
    trials.sort_by(|a, b| (a.scene, a.trial, a.method).cmp(&(b.scene, b.trial, b.method)));
    let summaries = methods
        .iter()
        .map(|&m| MethodSummary::from_records(m, &trials))
        .collect();
    let mut fingerprints = std::collections::BTreeMap::new();
    fingerprints.insert("landscape".into(), fingerprint(ctx));
    fingerprints.insert("heuristics".into(), fingerprint(&cfg.heuristics));
    fingerprints.insert("eval".into(), fingerprint(&cfg.eval));
    fingerprints.insert("scenes".into(), fingerprint(&specs));
    fingerprints.insert("methods".into(), fingerprint(&methods));
    fingerprints.insert(
        "seeds".into(),
        fingerprint(&(cfg.seed, cfg.trials_per_scene)),
    );
    Ok(BenchmarkReport {
        methods: summaries,
        trials,
        scenes,
        fingerprints,
    })
}
