//! Synthetic scenes with known ground truth and dataset assembly.
//!
//! Scene `s` of a dataset with master seed `m` uses seed `m + s`; its points
//! come from stream 0 of that seed and its window centers from stream 1.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_to_homography, transform_points, CameraModel, PointSet2D, PoseParams};
use crate::landscape::{
    argmax_tensor, build_similarity_tensor, extract_subtensor, make_label, GridIndex, GridSpec,
    SimilarityTensor, DEFAULT_WINDOW, LABEL_SCALE,
};
use crate::similarity::{KernelConfig, ObjectiveConfig};
use crate::trainer::{SampleOrigin, TrainingSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_points: usize,
    pub true_pose: PoseParams,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Side of the square reference field, pixels.
    pub field_extent: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 4 {
            return Err(Error::config("scene.n_points", "must be >= 4"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("scene.noise_sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::config("scene.outlier_fraction", "must lie in [0, 1)"));
        }
        if !(self.field_extent.is_finite() && self.field_extent > 0.0) {
            return Err(Error::config("scene.field_extent", "must be > 0"));
        }
        Ok(())
    }

    pub fn inlier_count(&self) -> usize {
        (self.n_points as f64 * (1.0 - self.outlier_fraction)).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Sensed points.
    pub u: PointSet2D,
    /// Reference points.
    pub v: PointSet2D,
    pub true_pose: PoseParams,
    /// `(index in u, index in v)` of every inlier.
    pub correspondences: Vec<(usize, usize)>,
}

/// Samples reference points, projects them into the sensed view through the
/// true pose, perturbs them and swaps a fraction for uniform clutter.
pub fn generate_scene(spec: &SceneSpec, cam: &CameraModel) -> Result<SyntheticScene> {
    spec.validate()?;
    let h = pose_to_homography(&spec.true_pose, cam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.field_extent;
    let v: Vec<[f64; 2]> = (0..spec.n_points)
        .map(|_| [rng.gen_range(0.0..f), rng.gen_range(0.0..f)])
        .collect();
    let v = PointSet2D::new(v)?;
    let mut u = transform_points(&v, &h)?.into_inner();
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for p in &mut u {
            p[0] += noise.sample(&mut rng);
            p[1] += noise.sample(&mut rng);
        }
    }
    let outliers = spec.n_points - spec.inlier_count();
    let mut is_outlier = vec![false; spec.n_points];
    for i in sample(&mut rng, spec.n_points, outliers) {
        is_outlier[i] = true;
        u[i] = [rng.gen_range(0.0..f), rng.gen_range(0.0..f)];
    }
    let correspondences = (0..spec.n_points)
        .filter(|&i| !is_outlier[i])
        .map(|i| (i, i))
        .collect();
    Ok(SyntheticScene {
        u: PointSet2D::new(u)?,
        v,
        true_pose: spec.true_pose,
        correspondences,
    })
}

/// The base pose with its yaw advanced by every multiple of `step_degrees`
/// below a full turn.
pub fn orbit_cluster(base: &PoseParams, step_degrees: f64) -> Result<Vec<PoseParams>> {
    let turns = 360.0 / step_degrees;
    if !(step_degrees.is_finite() && step_degrees > 0.0) || (turns - turns.round()).abs() > 1e-9 {
        return Err(Error::config("orbit.step_degrees", "must divide 360"));
    }
    Ok((0..turns.round() as usize)
        .map(|k| PoseParams {
            alpha: base.alpha + (k as f64 * step_degrees).to_radians(),
            ..*base
        })
        .collect())
}

/// Scene settings shared by every scene of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneTemplate {
    pub n_points: usize,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub field_extent: f64,
    /// Yaw of scene `s` is `s · step` (mod 360); `None` keeps every yaw zero.
    pub orbit_step_degrees: Option<f64>,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        Self {
            n_points: 200,
            noise_sigma: 1.0,
            outlier_fraction: 0.1,
            field_extent: 512.0,
            orbit_step_degrees: Some(30.0),
        }
    }
}

/// `count` scene specs with true translations on uniformly drawn grid nodes.
pub fn random_scene_specs(
    template: &SceneTemplate,
    grid: &GridSpec,
    count: usize,
    master_seed: u64,
) -> Result<Vec<SceneSpec>> {
    grid.validate()?;
    let yaws = match template.orbit_step_degrees {
        Some(step) => orbit_cluster(&PoseParams::default(), step)?
            .into_iter()
            .map(|p| p.alpha)
            .collect(),
        None => vec![0.0],
    };
    Ok((0..count)
        .map(|s| {
            let seed = master_seed.wrapping_add(s as u64);
            // Stream 2: the truth node, kept apart from points and centers.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2);
            let s_n = grid.nodes_per_axis;
            let node: GridIndex = std::array::from_fn(|_| rng.gen_range(0..s_n));
            SceneSpec {
                n_points: template.n_points,
                true_pose: PoseParams::from_translation(
                    grid.node_params(node),
                    [yaws[s % yaws.len()], 0.0, 0.0],
                ),
                noise_sigma: template.noise_sigma,
                outlier_fraction: template.outlier_fraction,
                field_extent: template.field_extent,
                seed,
            }
        })
        .collect())
}

/// Grid node holding `pose`'s translation, if it sits on one.
pub fn node_of(grid: &GridSpec, pose: &PoseParams) -> Option<GridIndex> {
    let t = pose.translation();
    let step = grid.spacing();
    let mut node = [0; 3];
    for a in 0..3 {
        let f = (t[a] - grid.axes()[a].min) / step[a];
        let i = f.round();
        if (f - i).abs() > 1e-6 || i < 0.0 || i as usize >= grid.nodes_per_axis {
            return None;
        }
        node[a] = i as usize;
    }
    Some(node)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub spec: SceneSpec,
    pub true_node: Option<GridIndex>,
    pub argmax: GridIndex,
    pub centers: Vec<GridIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub count: usize,
    pub mean: [f64; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl LabelStats {
    fn of(samples: &[TrainingSample]) -> Self {
        let mut s = LabelStats {
            count: samples.len(),
            mean: [0.0; 3],
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        };
        for x in samples {
            for a in 0..3 {
                let l = x.label[a] as f64;
                s.mean[a] += l;
                s.min[a] = s.min[a].min(l);
                s.max[a] = s.max[a].max(l);
            }
        }
        if s.count > 0 {
            s.mean.iter_mut().for_each(|m| *m /= s.count as f64);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: GridSpec,
    pub camera: CameraModel,
    pub kernel: KernelConfig,
    pub objective: ObjectiveConfig,
    pub window: usize,
    pub label_scale: f64,
    pub centers_per_scene: usize,
    pub seed_rule: String,
    pub scenes: Vec<SceneRecord>,
    pub labels: LabelStats,
}

/// Everything needed to turn scenes into similarity tensors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LandscapeContext {
    pub grid: GridSpec,
    pub camera: CameraModel,
    pub kernel: KernelConfig,
    pub objective: ObjectiveConfig,
}

impl LandscapeContext {
    pub fn tensor(&self, scene: &SyntheticScene, scene_id: String) -> Result<SimilarityTensor> {
        let mut t = build_similarity_tensor(
            &scene.u,
            &scene.v,
            scene.true_pose.angles(),
            &self.grid,
            &self.camera,
            &self.kernel,
            &self.objective,
        )?;
        t.provenance.scene_id = scene_id;
        Ok(t)
    }
}

/// Cuts one sample per center, labelled towards `optimum`.
pub fn cut_samples(
    tensor: &SimilarityTensor,
    optimum: GridIndex,
    centers: &[GridIndex],
    scene: usize,
) -> Result<Vec<TrainingSample>> {
    centers
        .iter()
        .map(|&c| {
            let w = extract_subtensor(tensor, c, DEFAULT_WINDOW)?;
            Ok(TrainingSample {
                input: w.values.iter().map(|&v| v as f32).collect(),
                label: make_label(c, optimum, LABEL_SCALE).map(|l| l as f32),
                origin: Some(SampleOrigin {
                    scene,
                    center: c,
                    optimum,
                }),
            })
        })
        .collect()
}

/// Builds a scene's tensor, checks noiseless scenes peak at their true node
/// and returns the tensor with its argmax.
pub fn scene_tensor(
    spec: &SceneSpec,
    ctx: &LandscapeContext,
    index: usize,
) -> Result<(SyntheticScene, SimilarityTensor, GridIndex)> {
    let scene = generate_scene(spec, &ctx.camera)?;
    let tensor = ctx.tensor(&scene, format!("scene-{index}"))?;
    let argmax = argmax_tensor(&tensor);
    if spec.noise_sigma == 0.0 && spec.outlier_fraction == 0.0 {
        let truth = node_of(&ctx.grid, &spec.true_pose).ok_or_else(|| {
            Error::Generation(format!("scene {index}: true pose is not on a grid node"))
        })?;
        if truth != argmax {
            return Err(Error::Generation(format!(
                "scene {index}: noiseless argmax {argmax:?} differs from true node {truth:?}"
            )));
        }
    }
    Ok((scene, tensor, argmax))
}

/// One tensor per scene, `centers_per_scene` windows drawn from the
/// admissible centers without replacement. Scenes run in parallel; output
/// order is scene order.
pub fn build_dataset(
    specs: &[SceneSpec],
    centers_per_scene: usize,
    ctx: &LandscapeContext,
) -> Result<(Vec<TrainingSample>, DatasetManifest)> {
    if centers_per_scene == 0 {
        return Err(Error::config("dataset.centers_per_scene", "must be >= 1"));
    }
    let admissible = ctx.grid.admissible_centers(DEFAULT_WINDOW);
    if centers_per_scene > admissible.len() {
        return Err(Error::config(
            "dataset.centers_per_scene",
            format!("exceeds the {} admissible centers", admissible.len()),
        ));
    }
    let per_scene: Vec<(Vec<TrainingSample>, SceneRecord)> = specs
        .par_iter()
        .enumerate()
        .map(|(index, spec)| {
            let (_, tensor, argmax) = scene_tensor(spec, ctx, index)?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1);
            let centers: Vec<GridIndex> = sample(&mut rng, admissible.len(), centers_per_scene)
                .into_iter()
                .map(|i| admissible[i])
                .collect();
            let samples = cut_samples(&tensor, argmax, &centers, index)?;
            Ok((
                samples,
                SceneRecord {
                    index,
                    spec: *spec,
                    true_node: node_of(&ctx.grid, &spec.true_pose),
                    argmax,
                    centers,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(specs.len() * centers_per_scene);
    let mut scenes = Vec::with_capacity(specs.len());
    for (s, r) in per_scene {
        samples.extend(s);
        scenes.push(r);
    }
    let manifest = DatasetManifest {
        grid: ctx.grid,
        camera: ctx.camera,
        kernel: ctx.kernel,
        objective: ctx.objective,
        window: DEFAULT_WINDOW,
        label_scale: LABEL_SCALE,
        centers_per_scene,
        seed_rule: "scene s uses seed master + s; points stream 0, centers stream 1, truth node stream 2"
            .into(),
        labels: LabelStats::of(&samples),
        scenes,
    };
    Ok((samples, manifest))
}
