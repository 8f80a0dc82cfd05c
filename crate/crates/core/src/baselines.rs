//! Derivative-free baselines maximizing a score over a translation box:
//! simulated annealing, a real-coded genetic algorithm, compass pattern
//! search and particle swarm optimization.
//!
//! Every call of the score function is counted; every queried point is
//! clamped into the box first.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::GridSpec;

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub min: Point3,
    pub max: Point3,
}

impl SearchBox {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(lo: f64, hi: f64) -> Result<Self> {
        Self::new([lo; 3], [hi; 3])
    }

    pub fn from_grid(grid: &GridSpec) -> Self {
        let a = grid.axes();
        Self {
            min: a.map(|r| r.min),
            max: a.map(|r| r.max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite() && self.max[a] > self.min[a]) {
                return Err(Error::config("box", "needs finite bounds with max > min"));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> Point3 {
        std::array::from_fn(|a| self.max[a] - self.min[a])
    }

    pub fn clamp(&self, p: Point3) -> Point3 {
        std::array::from_fn(|a| p[a].clamp(self.min[a], self.max[a]))
    }

    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    fn uniform(&self, rng: &mut ChaCha8Rng) -> Point3 {
        std::array::from_fn(|a| rng.gen_range(self.min[a]..=self.max[a]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub best_params: Point3,
    pub best_score: f64,
    pub evaluation_count: usize,
    pub runtime_seconds: f64,
}

/// Counts calls and rejects non-finite scores.
struct Counted<F> {
    f: F,
    count: usize,
    bx: SearchBox,
}

impl<F: FnMut(Point3) -> Result<f64>> Counted<F> {
    fn eval(&mut self, p: Point3) -> Result<(Point3, f64)> {
        let p = self.bx.clamp(p);
        self.count += 1;
        let score = (self.f)(p)?;
        if !score.is_finite() {
            return Err(Error::NonFiniteScore { point: p, score });
        }
        Ok((p, score))
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn check_rate(v: f64, field: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(field, "must lie in [0, 1]"));
    }
    Ok(())
}

fn check_count(v: usize, field: &str) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be >= 1"));
    }
    Ok(())
}

fn check_positive(v: f64, field: &str) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::config(field, "must be > 0"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealConfig {
    /// `None` derives the start temperature from the first score:
    /// `0.1 · max(|f(x0)|, 1e-12)`.
    pub initial_temperature: Option<f64>,
    pub cooling_rate: f64,
    /// Iterations spent at each temperature.
    pub stage_length: usize,
    /// Proposal standard deviation as a fraction of the box extent, at the
    /// start temperature; shrinks with the square root of the temperature.
    pub proposal_scale: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            initial_temperature: None,
            cooling_rate: 0.95,
            stage_length: 16,
            proposal_scale: 0.1,
            max_iterations: 4000,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.initial_temperature {
            check_positive(t, "anneal.initial_temperature")?;
        }
        check_rate(self.cooling_rate, "anneal.cooling_rate")?;
        check_count(self.stage_length, "anneal.stage_length")?;
        check_positive(self.proposal_scale, "anneal.proposal_scale")?;
        check_count(self.max_iterations, "anneal.max_iterations")
    }
}

/// Metropolis acceptance with geometric cooling.
pub fn simulated_annealing(
    score_fn: impl FnMut(Point3) -> Result<f64>,
    bx: &SearchBox,
    start: Point3,
    cfg: &AnnealConfig,
) -> Result<OptResult> {
    cfg.validate()?;
    bx.validate()?;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut f = Counted { f: score_fn, count: 0, bx: *bx };
    let (mut x, mut fx) = f.eval(start)?;
    let (mut best, mut best_f) = (x, fx);
    let temp0 = cfg
        .initial_temperature
        .unwrap_or_else(|| 0.1 * fx.abs().max(1e-12));
    let mut temp = temp0;
    let ext = bx.extent();
    for it in 0..cfg.max_iterations {
        if it > 0 && it % cfg.stage_length == 0 {
            temp *= cfg.cooling_rate;
        }
        let scale = cfg.proposal_scale * (temp / temp0).sqrt();
        let proposal: Point3 = std::array::from_fn(|a| x[a] + scale * ext[a] * gauss(&mut rng));
        let (y, fy) = f.eval(proposal)?;
        let accept = fy >= fx || rng.gen::<f64>() < ((fy - fx) / temp).exp();
        if accept {
            x = y;
            fx = fy;
            if fx > best_f {
                best = x;
                best_f = fx;
            }
        }
    }
    Ok(OptResult {
        best_params: best,
        best_score: best_f,
        evaluation_count: f.count,
        runtime_seconds: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elite_count: usize,
    pub tournament_size: usize,
    /// Blend-crossover spread.
    pub blend_alpha: f64,
    /// Mutation standard deviation as a fraction of the box extent, decaying
    /// linearly to zero over the generations.
    pub mutation_scale: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 80,
            generations: 100,
            crossover_rate: 0.8,
            mutation_rate: 0.1,
            elite_count: 2,
            tournament_size: 3,
            blend_alpha: 0.5,
            mutation_scale: 0.1,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        check_count(self.population, "ga.population")?;
        check_count(self.generations, "ga.generations")?;
        check_count(self.tournament_size, "ga.tournament_size")?;
        check_rate(self.crossover_rate, "ga.crossover_rate")?;
        check_rate(self.mutation_rate, "ga.mutation_rate")?;
        if self.elite_count >= self.population {
            return Err(Error::config("ga.elite_count", "must be below the population"));
        }
        if !(self.blend_alpha.is_finite() && self.blend_alpha >= 0.0) {
            return Err(Error::config("ga.blend_alpha", "must be >= 0"));
        }
        check_positive(self.mutation_scale, "ga.mutation_scale")
    }
}

/// Tournament selection, blend crossover, Gaussian mutation and elitism.
/// The start point seeds the first population.
pub fn genetic_algorithm(
    score_fn: impl FnMut(Point3) -> Result<f64>,
    bx: &SearchBox,
    start: Point3,
    cfg: &GaConfig,
) -> Result<OptResult> {
    cfg.validate()?;
    bx.validate()?;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut f = Counted { f: score_fn, count: 0, bx: *bx };
    let ext = bx.extent();
    let mut pop = Vec::with_capacity(cfg.population);
    pop.push(f.eval(start)?);
    while pop.len() < cfg.population {
        let p = bx.uniform(&mut rng);
        pop.push(f.eval(p)?);
    }
    let tournament = |pop: &[(Point3, f64)], rng: &mut ChaCha8Rng| -> Point3 {
        let mut best = rng.gen_range(0..pop.len());
        for _ in 1..cfg.tournament_size {
            let c = rng.gen_range(0..pop.len());
            if pop[c].1 > pop[best].1 {
                best = c;
            }
        }
        pop[best].0
    };
    for gen in 0..cfg.generations {
        // Stable sort: best first, ties keep their order.
        pop.sort_by(|a, b| b.1.total_cmp(&a.1));
        let sigma = cfg.mutation_scale * (1.0 - gen as f64 / cfg.generations as f64);
        let mut next: Vec<(Point3, f64)> = pop[..cfg.elite_count].to_vec();
        while next.len() < cfg.population {
            let a = tournament(&pop, &mut rng);
            let mut child = a;
            if rng.gen::<f64>() < cfg.crossover_rate {
                let b = tournament(&pop, &mut rng);
                for d in 0..3 {
                    let u = rng.gen_range(-cfg.blend_alpha..=1.0 + cfg.blend_alpha);
                    child[d] = a[d] + u * (b[d] - a[d]);
                }
            }
            for d in 0..3 {
                if rng.gen::<f64>() < cfg.mutation_rate {
                    child[d] += sigma * ext[d] * gauss(&mut rng);
                }
            }
            next.push(f.eval(child)?);
        }
        pop = next;
    }
    let best = pop
        .iter()
        .fold(pop[0], |acc, p| if p.1 > acc.1 { *p } else { acc });
    Ok(OptResult {
        best_params: best.0,
        best_score: best.1,
        evaluation_count: f.count,
        runtime_seconds: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternConfig {
    /// Starting poll step, in parameter units.
    pub initial_mesh: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub mesh_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            initial_mesh: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            mesh_tolerance: 1e-3,
            max_iterations: 2000,
        }
    }
}

impl PatternConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive(self.initial_mesh, "ps.initial_mesh")?;
        check_positive(self.mesh_tolerance, "ps.mesh_tolerance")?;
        if !(self.expansion >= 1.0) {
            return Err(Error::config("ps.expansion", "must be >= 1"));
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return Err(Error::config("ps.contraction", "must lie in (0, 1)"));
        }
        check_count(self.max_iterations, "ps.max_iterations")
    }
}

/// Compass search: polls `±mesh` along every axis, moves to the best strict
/// improvement and expands, otherwise contracts; stops once the mesh falls
/// below the tolerance. Deterministic.
pub fn pattern_search(
    score_fn: impl FnMut(Point3) -> Result<f64>,
    bx: &SearchBox,
    start: Point3,
    cfg: &PatternConfig,
) -> Result<OptResult> {
    cfg.validate()?;
    bx.validate()?;
    let t0 = Instant::now();
    let mut f = Counted { f: score_fn, count: 0, bx: *bx };
    let (mut x, mut fx) = f.eval(start)?;
    let mut mesh = cfg.initial_mesh;
    for _ in 0..cfg.max_iterations {
        if mesh < cfg.mesh_tolerance {
            break;
        }
        let mut best: Option<(Point3, f64)> = None;
        for d in 0..3 {
            for s in [1.0, -1.0] {
                let mut p = x;
                p[d] += s * mesh;
                let (q, fq) = f.eval(p)?;
                if fq > best.map_or(fx, |b| b.1) {
                    best = Some((q, fq));
                }
            }
        }
        match best {
            Some((q, fq)) => {
                x = q;
                fx = fq;
                mesh *= cfg.expansion;
            }
            None => mesh *= cfg.contraction,
        }
    }
    Ok(OptResult {
        best_params: x,
        best_score: fx,
        evaluation_count: f.count,
        runtime_seconds: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsoConfig {
    pub swarm_size: usize,
    pub max_iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Velocity cap as a fraction of the box extent.
    pub max_velocity: f64,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            swarm_size: 60,
            max_iterations: 100,
            inertia: 0.729,
            cognitive: 1.49445,
            social: 1.49445,
            max_velocity: 0.2,
            seed: 0,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        check_count(self.swarm_size, "pso.swarm_size")?;
        check_count(self.max_iterations, "pso.max_iterations")?;
        for (v, name) in [
            (self.inertia, "pso.inertia"),
            (self.cognitive, "pso.cognitive"),
            (self.social, "pso.social"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be >= 0"));
            }
        }
        check_positive(self.max_velocity, "pso.max_velocity")
    }
}

/// Global-best particle swarm. Particle 0 starts at `start`.
pub fn particle_swarm(
    score_fn: impl FnMut(Point3) -> Result<f64>,
    bx: &SearchBox,
    start: Point3,
    cfg: &PsoConfig,
) -> Result<OptResult> {
    cfg.validate()?;
    bx.validate()?;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut f = Counted { f: score_fn, count: 0, bx: *bx };
    let ext = bx.extent();
    let vmax: Point3 = ext.map(|e| cfg.max_velocity * e);
    let mut pos = Vec::with_capacity(cfg.swarm_size);
    let mut vel = Vec::with_capacity(cfg.swarm_size);
    let mut pbest = Vec::with_capacity(cfg.swarm_size);
    for i in 0..cfg.swarm_size {
        let p = if i == 0 { start } else { bx.uniform(&mut rng) };
        let (p, fp) = f.eval(p)?;
        pos.push(p);
        vel.push(std::array::from_fn::<f64, 3, _>(|a| {
            rng.gen_range(-vmax[a]..=vmax[a]) * 0.5
        }));
        pbest.push((p, fp));
    }
    let mut gbest = pbest
        .iter()
        .copied()
        .fold(pbest[0], |acc, p| if p.1 > acc.1 { p } else { acc });
    for _ in 0..cfg.max_iterations {
        for i in 0..cfg.swarm_size {
            for a in 0..3 {
                let r1: f64 = rng.gen();
                let r2: f64 = rng.gen();
                let v = cfg.inertia * vel[i][a]
                    + cfg.cognitive * r1 * (pbest[i].0[a] - pos[i][a])
                    + cfg.social * r2 * (gbest.0[a] - pos[i][a]);
                vel[i][a] = v.clamp(-vmax[a], vmax[a]);
            }
            let moved: Point3 = std::array::from_fn(|a| pos[i][a] + vel[i][a]);
            let (p, fp) = f.eval(moved)?;
            pos[i] = p;
            if fp > pbest[i].1 {
                pbest[i] = (p, fp);
                if fp > gbest.1 {
                    gbest = (p, fp);
                }
            }
        }
    }
    Ok(OptResult {
        best_params: gbest.0,
        best_score: gbest.1,
        evaluation_count: f.count,
        runtime_seconds: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Anneal,
    Ga,
    Ps,
    Pso,
    Iron,
}

impl Method {
    pub const HEURISTICS: [Method; 4] = [Method::Anneal, Method::Ga, Method::Ps, Method::Pso];

    pub fn name(self) -> &'static str {
        match self {
            Method::Anneal => "anneal",
            Method::Ga => "ga",
            Method::Ps => "ps",
            Method::Pso => "pso",
            Method::Iron => "iron",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "anneal" | "sa" => Ok(Method::Anneal),
            "ga" => Ok(Method::Ga),
            "ps" => Ok(Method::Ps),
            "pso" => Ok(Method::Pso),
            "iron" => Ok(Method::Iron),
            other => Err(Error::config("methods", format!("unknown method {other:?}"))),
        }
    }
}

/// Settings of all four heuristics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicConfig {
    pub anneal: AnnealConfig,
    pub ga: GaConfig,
    pub ps: PatternConfig,
    pub pso: PsoConfig,
}

impl HeuristicConfig {
    pub fn validate(&self) -> Result<()> {
        self.anneal.validate()?;
        self.ga.validate()?;
        self.ps.validate()?;
        self.pso.validate()
    }

    /// Runs one heuristic with its seed replaced by `seed`.
    pub fn run(
        &self,
        method: Method,
        score_fn: impl FnMut(Point3) -> Result<f64>,
        bx: &SearchBox,
        start: Point3,
        seed: u64,
    ) -> Result<OptResult> {
        match method {
            Method::Anneal => simulated_annealing(score_fn, bx, start, &AnnealConfig { seed, ..self.anneal }),
            Method::Ga => genetic_algorithm(score_fn, bx, start, &GaConfig { seed, ..self.ga }),
            Method::Ps => pattern_search(score_fn, bx, start, &self.ps),
            Method::Pso => particle_swarm(score_fn, bx, start, &PsoConfig { seed, ..self.pso }),
            Method::Iron => Err(Error::config("methods", "iron is not a heuristic")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn quadratic(p: Point3) -> Result<f64> {
        Ok(-(p[0] - 3.0).powi(2) - (p[1] + 1.0).powi(2) - p[2] * p[2])
    }

    fn dist(p: Point3) -> f64 {
        ((p[0] - 3.0).powi(2) + (p[1] + 1.0).powi(2) + p[2].powi(2)).sqrt()
    }

    #[test]
    fn all_methods_recover_quadratic_optimum() {
        let bx = SearchBox::cube(-10.0, 10.0).unwrap();
        let cfg = HeuristicConfig::default();
        for method in Method::HEURISTICS {
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let start = bx.uniform(&mut rng);
                let calls = Cell::new(0usize);
                let r = cfg
                    .run(
                        method,
                        |p| {
                            calls.set(calls.get() + 1);
                            assert!(bx.contains(p));
                            quadratic(p)
                        },
                        &bx,
                        start,
                        seed,
                    )
                    .unwrap();
                assert!(dist(r.best_params) < 1e-2, "{method:?} seed {seed}: {:?}", r.best_params);
                assert_eq!(r.evaluation_count, calls.get());
                assert!(bx.contains(r.best_params));
            }
        }
    }

    #[test]
    fn pattern_search_on_constant_follows_schedule() {
        let bx = SearchBox::cube(-10.0, 10.0).unwrap();
        let start = [1.0, 2.0, 3.0];
        let r = pattern_search(|_| Ok(5.0), &bx, start, &PatternConfig::default()).unwrap();
        assert_eq!(r.best_params, start);
        // 1 → 2^-10 < 1e-3 takes ten failed polls of six points each.
        assert_eq!(r.evaluation_count, 1 + 10 * 6);
    }

    #[test]
    fn pattern_search_is_monotone() {
        let bx = SearchBox::cube(-10.0, 10.0).unwrap();
        let mut seen = Vec::new();
        let mut best = f64::NEG_INFINITY;
        pattern_search(
            |p| {
                let v = quadratic(p)?;
                best = best.max(v);
                seen.push(best);
                Ok(v)
            },
            &bx,
            [-9.0, 9.0, 4.0],
            &PatternConfig::default(),
        )
        .unwrap();
        assert!(seen.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn non_finite_scores_propagate() {
        let bx = SearchBox::cube(-1.0, 1.0).unwrap();
        let cfg = HeuristicConfig::default();
        for method in Method::HEURISTICS {
            let r = cfg.run(method, |_| Ok(f64::NAN), &bx, [0.0; 3], 1);
            assert!(matches!(r, Err(Error::NonFiniteScore { .. })), "{method:?}");
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let bx = SearchBox::cube(-10.0, 10.0).unwrap();
        let cfg = HeuristicConfig::default();
        for method in Method::HEURISTICS {
            let a = cfg.run(method, quadratic, &bx, [5.0, 5.0, 5.0], 3).unwrap();
            let b = cfg.run(method, quadratic, &bx, [5.0, 5.0, 5.0], 3).unwrap();
            assert_eq!((a.best_params, a.evaluation_count), (b.best_params, b.evaluation_count));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(GaConfig { elite_count: 80, ..Default::default() }.validate().is_err());
        assert!(PatternConfig { contraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(PsoConfig { swarm_size: 0, ..Default::default() }.validate().is_err());
        assert!(AnnealConfig { cooling_rate: 1.5, ..Default::default() }.validate().is_err());
        assert!(SearchBox::cube(1.0, 1.0).is_err());
        assert!(Method::parse("newton").is_err());
        assert_eq!(Method::parse("PSO").unwrap(), Method::Pso);
    }
}
