//! Many independent trajectories over a shared, precomputed wave-function
//! history.
//!
//! The history, the spin frames and the per-step jump contexts are built once
//! and shared read-only; trajectory `k` draws from its own ChaCha stream
//! `(base_seed, k)`, so results do not depend on the worker count.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{apply_frame, DynamicsError, Guidance, Interval, DEFAULT_MAX_HALVINGS};
use crate::linalg::{ComplexMatrix, ComplexVector};
use crate::models::eprb::{position_sign, stage2};
use crate::models::{ExperimentSpec, FramePolicy};
use crate::space::ConfigurationSpace;
use crate::spin::{build_frame, build_frame_for, BasisFrame, SpinBasisError, CONDITIONAL_FLOOR};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble setting `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("trajectory {trajectory}: {source}")]
    Trajectory {
        trajectory: usize,
        #[source]
        source: DynamicsError,
    },
    #[error("trajectory {trajectory}: initial index {index} is not a valid starting point")]
    InvalidInitial { trajectory: usize, index: usize },
    #[error("decoder `{0}` is required but missing")]
    MissingDecoder(String),
    #[error(transparent)]
    Frame(#[from] SpinBasisError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n_trajectories: usize,
    pub base_seed: u64,
    pub record_every: usize,
    pub workers: usize,
    pub max_halvings: u32,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 1000,
            base_seed: 0,
            record_every: 1,
            workers: 1,
            max_halvings: DEFAULT_MAX_HALVINGS,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |field, reason: &str| Err(EnsembleError::InvalidConfig { field, reason: reason.into() });
        if self.n_trajectories == 0 {
            return bad("n_trajectories", "must be at least 1");
        }
        if self.record_every == 0 {
            return bad("record_every", "must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        Ok(())
    }
}

/// Wave-function history, frames and step contexts of one experiment.
#[derive(Debug)]
pub struct Prepared {
    pub space: Arc<ConfigurationSpace>,
    pub guidance: Guidance,
    pub times: Vec<f64>,
    /// Raw wave function at every grid time.
    pub history: Vec<ComplexVector>,
    /// Frame at every grid time; `None` when all stages use unrotated bases.
    pub frames: Option<Vec<Arc<BasisFrame>>>,
    /// `|ψ^V_t|²` in the frame of time `t`.
    pub probabilities: Vec<Vec<f64>>,
    pub intervals: Vec<Interval>,
}

fn configuration_weights(psi: &ComplexVector, space: &ConfigurationSpace) -> Vec<f64> {
    let mut w = vec![0.0; space.external_dim()];
    for (n, z) in psi.iter().enumerate() {
        w[space.external_of(n)] += z.norm_sqr();
    }
    w
}

fn compute_frames(spec: &ExperimentSpec, history: &[ComplexVector]) -> Result<Option<Vec<Arc<BasisFrame>>>, EnsembleError> {
    let plan = spec.step_plan();
    if plan.iter().all(|(_, _, f)| *f == FramePolicy::Identity) {
        return Ok(None);
    }
    let space = &spec.space;
    let identity = BasisFrame::identity(space);
    let mut frames: Vec<Arc<BasisFrame>> = Vec::with_capacity(history.len());
    let mut fitted = vec![false; space.external_dim()];
    let mut current_stage = usize::MAX;
    for (t, psi) in history.iter().enumerate() {
        let (stage, _, policy) = plan[t.min(plan.len() - 1)];
        if stage != current_stage {
            fitted.iter_mut().for_each(|f| *f = false);
            current_stage = stage;
        }
        let previous = frames.last().map(|f| &**f).unwrap_or(&identity);
        let frame = match policy {
            FramePolicy::Identity => Arc::new(identity.clone()),
            FramePolicy::Adaptive(mode) => Arc::new(build_frame(psi, space, &spec.spins, mode, Some(previous))?),
            FramePolicy::Static(mode) => {
                let weights = configuration_weights(psi, space);
                let fresh: Vec<usize> = (0..space.external_dim())
                    .filter(|&x| !fitted[x] && weights[x] > CONDITIONAL_FLOOR)
                    .collect();
                if fresh.is_empty() {
                    frames.last().cloned().unwrap_or_else(|| Arc::new(identity.clone()))
                } else {
                    for &x in &fresh {
                        fitted[x] = true;
                    }
                    Arc::new(build_frame_for(psi, space, &spec.spins, mode, Some(previous), &fresh)?)
                }
            }
        };
        frames.push(frame);
    }
    // build_frame without a previous frame would reject empty configurations;
    // unreached ones simply keep the unrotated basis
    Ok(Some(frames))
}

/// Evolves the wave function, fits frames and builds every step context.
pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared, EnsembleError> {
    let mut history = Vec::with_capacity(spec.n_steps() + 1);
    history.push(spec.initial_state.clone());
    let mut steps: Vec<(Arc<ComplexMatrix>, f64)> = Vec::with_capacity(spec.n_steps());
    for stage in &spec.schedule {
        for _ in 0..stage.n_substeps {
            let next = &*stage.step * history.last().expect("non-empty");
            history.push(next);
            steps.push((stage.step.clone(), stage.eps));
        }
    }
    let frames = compute_frames(spec, &history)?;
    let space = spec.space.clone();
    let probabilities: Vec<Vec<f64>> = history
        .iter()
        .enumerate()
        .map(|(t, psi)| {
            let v = match &frames {
                Some(f) => apply_frame(&space, &f[t], psi),
                None => psi.clone(),
            };
            v.iter().map(|z| z.norm_sqr()).collect()
        })
        .collect();
    let intervals = steps
        .into_iter()
        .enumerate()
        .map(|(t, (u, eps))| {
            let pair = frames.as_ref().map(|f| (f[t].clone(), f[t + 1].clone()));
            Interval::new(space.clone(), history[t].clone(), u, pair, eps)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Prepared {
        space,
        guidance: spec.guidance,
        times: spec.times(),
        history,
        frames,
        probabilities,
        intervals,
    })
}

impl Prepared {
    pub fn n_steps(&self) -> usize {
        self.intervals.len()
    }

    /// Per-particle `(θ, φ)` of the basis at composite index `n` and time `t`.
    pub fn angles_at(&self, t: usize, n: usize) -> Option<Vec<(f64, f64)>> {
        self.frames
            .as_ref()
            .map(|f| f[t].at(self.space.external_of(n)).angles())
    }

    /// Initial-time distribution over the index the beable lives on.
    fn initial_distribution(&self) -> Vec<f64> {
        let p = &self.probabilities[0];
        match self.guidance {
            Guidance::Full => p.clone(),
            Guidance::Marginal => {
                let mut out = vec![0.0; self.space.external_dim()];
                for (n, pn) in p.iter().enumerate() {
                    out[self.space.external_of(n)] += pn;
                }
                out
            }
        }
    }
}

fn sample_index(p: &[f64], u: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last = 0;
    for (n, &pn) in p.iter().enumerate() {
        if pn > 0.0 {
            last = n;
            cumulative += pn;
            if u < cumulative {
                return n;
            }
        }
    }
    last
}

/// Sampled trajectories plus the statistics derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun {
    pub config: EnsembleConfig,
    /// Grid time indices that were recorded.
    pub recorded: Vec<usize>,
    /// Composite index per trajectory per recorded time. Under marginal
    /// guidance the spin slot is always 0.
    pub paths: Vec<Vec<u32>>,
    pub counters: RunCounters,
    pub stats: EnsembleStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct RunCounters {
    /// Trajectory steps that needed at least one halving.
    pub halved_steps: u64,
    pub max_halvings: u32,
    pub min_eps_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecoderSeries {
    pub name: String,
    pub labels: Vec<String>,
    /// `[recorded time][label]`.
    pub freq: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub exact: Vec<Vec<f64>>,
}

impl DecoderSeries {
    /// Largest exact probability of a label over all recorded times.
    pub fn max_exact(&self, label: usize) -> f64 {
        self.exact.iter().map(|row| row[label]).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub exact: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub n_trajectories: usize,
    pub times: Vec<f64>,
    pub series: Vec<DecoderSeries>,
    /// Named scalar estimates added by experiment-specific analyses.
    pub correlations: Vec<(String, Estimate)>,
}

impl EnsembleStats {
    pub fn series(&self, name: &str) -> Option<&DecoderSeries> {
        self.series.iter().find(|s| s.name == name)
    }
}

/// Binomial standard error `√(p(1-p)/n)`.
pub fn standard_error(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).max(0.0).sqrt()
}

/// `(f - p)/√(p(1-p)/n)` using the exact `p`; 0 when both agree exactly.
pub fn z_score(freq: f64, exact: f64, n: usize) -> f64 {
    let se = standard_error(exact, n);
    let diff = freq - exact;
    if se > 0.0 {
        diff / se
    } else if diff.abs() < 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn recorded_indices(n_steps: usize, every: usize) -> Vec<usize> {
    let mut r: Vec<usize> = (0..=n_steps).step_by(every).collect();
    if *r.last().expect("non-empty") != n_steps {
        r.push(n_steps);
    }
    r
}

struct Sampled {
    path: Vec<u32>,
    halved: u64,
    max_halvings: u32,
    min_eps: f64,
}

fn run_one(
    prepared: &Prepared,
    cfg: &EnsembleConfig,
    k: usize,
    start: Option<usize>,
    recorded: &[usize],
) -> Result<Sampled, EnsembleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed);
    rng.set_stream(k as u64);
    let guidance = prepared.guidance;
    let space = &prepared.space;
    let mut index = match start {
        Some(n) => {
            let valid = n < space.total_dim() && prepared.probabilities[0][n] > crate::dynamics::P_FLOOR;
            if !valid {
                return Err(EnsembleError::InvalidInitial { trajectory: k, index: n });
            }
            match guidance {
                Guidance::Full => n,
                Guidance::Marginal => space.external_of(n),
            }
        }
        None => sample_index(&prepared.initial_distribution(), rng.gen()),
    };
    let to_composite = |i: usize| match guidance {
        Guidance::Full => i as u32,
        Guidance::Marginal => space.join(i, 0) as u32,
    };
    let mut path = Vec::with_capacity(recorded.len());
    let mut next_record = 0;
    let mut out = Sampled {
        path: Vec::new(),
        halved: 0,
        max_halvings: 0,
        min_eps: f64::INFINITY,
    };
    for t in 0..=prepared.n_steps() {
        if next_record < recorded.len() && recorded[next_record] == t {
            path.push(to_composite(index));
            next_record += 1;
        }
        if t == prepared.n_steps() {
            break;
        }
        let adv = prepared.intervals[t]
            .advance(index, guidance, cfg.max_halvings, &mut rng)
            .map_err(|source| EnsembleError::Trajectory { trajectory: k, source })?;
        if adv.halvings > 0 {
            out.halved += 1;
        }
        out.max_halvings = out.max_halvings.max(adv.halvings);
        out.min_eps = out.min_eps.min(adv.eps_used);
        index = adv.index;
    }
    out.path = path;
    Ok(out)
}

/// Runs `cfg.n_trajectories` trajectories from indices sampled out of the
/// initial distribution.
pub fn run_ensemble(spec: &ExperimentSpec, cfg: &EnsembleConfig) -> Result<(Prepared, EnsembleRun), EnsembleError> {
    let prepared = prepare(spec)?;
    let run = run_prepared(spec, &prepared, cfg, None)?;
    Ok((prepared, run))
}

/// Runs trajectories on a prepared experiment. With `initial`, trajectory `k`
/// starts at composite index `initial[k]` and the ensemble size is
/// `initial.len()`.
pub fn run_prepared(
    spec: &ExperimentSpec,
    prepared: &Prepared,
    cfg: &EnsembleConfig,
    initial: Option<&[usize]>,
) -> Result<EnsembleRun, EnsembleError> {
    let mut cfg = *cfg;
    if let Some(init) = initial {
        cfg.n_trajectories = init.len();
    }
    cfg.validate()?;
    let recorded = recorded_indices(prepared.n_steps(), cfg.record_every);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| EnsembleError::Pool(e.to_string()))?;
    let results: Vec<Result<Sampled, EnsembleError>> = pool.install(|| {
        (0..cfg.n_trajectories)
            .into_par_iter()
            .map(|k| run_one(prepared, &cfg, k, initial.map(|i| i[k]), &recorded))
            .collect()
    });
    let mut paths = Vec::with_capacity(results.len());
    let mut counters = RunCounters {
        min_eps_used: f64::INFINITY,
        ..RunCounters::default()
    };
    for r in results {
        let s = r?;
        counters.halved_steps += s.halved;
        counters.max_halvings = counters.max_halvings.max(s.max_halvings);
        counters.min_eps_used = counters.min_eps_used.min(s.min_eps);
        paths.push(s.path);
    }
    let stats = collect_stats(spec, prepared, &recorded, &paths);
    Ok(EnsembleRun {
        config: cfg,
        recorded,
        paths,
        counters,
        stats,
    })
}

fn collect_stats(spec: &ExperimentSpec, prepared: &Prepared, recorded: &[usize], paths: &[Vec<u32>]) -> EnsembleStats {
    let n = paths.len();
    let marginal = prepared.guidance == Guidance::Marginal;
    let series = spec
        .decoders
        .iter()
        .filter(|d| !(marginal && d.uses_spin))
        .map(|d| {
            let mut freq = Vec::with_capacity(recorded.len());
            let mut exact = Vec::with_capacity(recorded.len());
            for (r, &t) in recorded.iter().enumerate() {
                let mut counts = vec![0usize; d.labels.len()];
                for path in paths {
                    counts[d.decode(path[r] as usize)] += 1;
                }
                freq.push(counts.iter().map(|&c| c as f64 / n as f64).collect::<Vec<_>>());
                exact.push(d.aggregate(&prepared.probabilities[t]));
            }
            let se = freq.iter().map(|row: &Vec<f64>| row.iter().map(|&f| standard_error(f, n)).collect()).collect();
            DecoderSeries {
                name: d.name.clone(),
                labels: d.labels.clone(),
                freq,
                se,
                exact,
            }
        })
        .collect();
    EnsembleStats {
        n_trajectories: n,
        times: recorded.iter().map(|&t| prepared.times[t]).collect(),
        series,
        correlations: Vec::new(),
    }
}

/// Final-time EPRB outcome of one particle: device index and spin sign.
fn eprb_outcome(spec: &ExperimentSpec, n: usize, particle: usize) -> Result<(usize, Option<i8>), EnsembleError> {
    let phi = spec
        .decoder(&format!("phi_{}", particle + 1))
        .ok_or_else(|| EnsembleError::MissingDecoder(format!("phi_{}", particle + 1)))?;
    let x = spec
        .decoder(&format!("x_{}", particle + 1))
        .ok_or_else(|| EnsembleError::MissingDecoder(format!("x_{}", particle + 1)))?;
    Ok((phi.decode(n), position_sign(x.decode(n))))
}

/// `⟨σ₁σ₂⟩` per device pair `(φ₁, φ₂)`, from the spin signs recorded by the
/// final positions. Indexed `[φ₁][φ₂]`. Empty buckets give NaN.
pub fn spin_correlation(spec: &ExperimentSpec, prepared: &Prepared, run: &EnsembleRun) -> Result<[[Estimate; 2]; 2], EnsembleError> {
    let last = run.recorded.len() - 1;
    let mut sums = [[(0usize, 0i64); 2]; 2];
    for path in &run.paths {
        let n = path[last] as usize;
        let (d1, s1) = eprb_outcome(spec, n, 0)?;
        let (d2, s2) = eprb_outcome(spec, n, 1)?;
        if let (Some(a), Some(b)) = (s1, s2) {
            sums[d1][d2].0 += 1;
            sums[d1][d2].1 += i64::from(a * b);
        }
    }
    let exact = exact_correlation(spec, &prepared.probabilities[*run.recorded.last().expect("recorded")])?;
    let mut out = std::array::from_fn(|_| std::array::from_fn(|_| Estimate { value: f64::NAN, se: f64::NAN, exact: f64::NAN, n: 0 }));
    for d1 in 0..2 {
        for d2 in 0..2 {
            let (count, sum) = sums[d1][d2];
            let (value, se) = if count == 0 {
                log::warn!("no trajectories measured devices ({d1}, {d2}); correlation is NaN");
                (f64::NAN, f64::NAN)
            } else {
                let v = sum as f64 / count as f64;
                (v, ((1.0 - v * v).max(0.0) / count as f64).sqrt())
            };
            out[d1][d2] = Estimate {
                value,
                se,
                exact: exact[d1][d2],
                n: count,
            };
        }
    }
    Ok(out)
}

/// Exact `⟨σ₁σ₂⟩` per device pair from a final probability vector.
pub fn exact_correlation(spec: &ExperimentSpec, p: &[f64]) -> Result<[[f64; 2]; 2], EnsembleError> {
    let mut acc = [[(0.0, 0.0); 2]; 2];
    for (n, &pn) in p.iter().enumerate() {
        let (d1, s1) = eprb_outcome(spec, n, 0)?;
        let (d2, s2) = eprb_outcome(spec, n, 1)?;
        if let (Some(a), Some(b)) = (s1, s2) {
            acc[d1][d2].0 += pn;
            acc[d1][d2].1 += pn * f64::from(a * b);
        }
    }
    Ok(acc.map(|row| row.map(|(w, s)| if w > 0.0 { s / w } else { f64::NAN })))
}

/// `⟨σᵢ⟩` per particle and device, indexed `[particle][φ]`.
pub fn single_spin_mean(spec: &ExperimentSpec, prepared: &Prepared, run: &EnsembleRun) -> Result<[[Estimate; 2]; 2], EnsembleError> {
    let last = run.recorded.len() - 1;
    let p_final = &prepared.probabilities[*run.recorded.last().expect("recorded")];
    let mut out = std::array::from_fn(|_| std::array::from_fn(|_| Estimate { value: f64::NAN, se: f64::NAN, exact: f64::NAN, n: 0 }));
    for particle in 0..2 {
        let mut sums = [(0usize, 0i64); 2];
        for path in &run.paths {
            if let (d, Some(s)) = eprb_outcome(spec, path[last] as usize, particle)? {
                sums[d].0 += 1;
                sums[d].1 += i64::from(s);
            }
        }
        let mut exact = [(0.0, 0.0); 2];
        for (n, &pn) in p_final.iter().enumerate() {
            if let (d, Some(s)) = eprb_outcome(spec, n, particle)? {
                exact[d].0 += pn;
                exact[d].1 += pn * f64::from(s);
            }
        }
        for d in 0..stage2::N_PHI {
            let (count, sum) = sums[d];
            let (value, se) = if count == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let v = sum as f64 / count as f64;
                (v, ((1.0 - v * v).max(0.0) / count as f64).sqrt())
            };
            out[particle][d] = Estimate {
                value,
                se,
                exact: if exact[d].0 > 0.0 { exact[d].1 / exact[d].0 } else { f64::NAN },
                n: count,
            };
        }
    }
    Ok(out)
}
