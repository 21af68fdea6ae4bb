//! Runs a configured experiment and gathers everything the writers need.

use beable_core::dynamics::Guidance;
use beable_core::ensemble::{prepare, run_ensemble, run_prepared, single_spin_mean, spin_correlation, EnsembleRun, Estimate, Prepared};
use beable_core::models::eprb::{
    allset_state, position_device, position_sign, restrict_allset, stage1_to_stage2_index, stage2,
};
use beable_core::models::{build_eprb_stage1, build_eprb_stage2, build_larmor, build_surreal, EprbParams, ExperimentSpec};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ParamBlock, RunConfig};
use crate::CliError;

/// One simulated stage of an experiment.
pub struct StageRun {
    /// 1-based position in the experiment's schedule.
    pub stage: usize,
    /// Added to the stage's own times so chained stages share one time axis.
    pub time_offset: f64,
    pub spec: ExperimentSpec,
    pub prepared: Prepared,
    pub run: EnsembleRun,
    /// Experiment-specific checks and estimates for `summary.json`.
    pub analysis: Value,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn model(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn execute(cfg: &RunConfig, stage: Option<usize>) -> Result<Vec<StageRun>, CliError> {
    let ens = cfg.ensemble.ensemble_config();
    match &cfg.params {
        ParamBlock::Larmor(p) => {
            single_stage_only(stage, "larmor")?;
            let spec = build_larmor(&p.params()?).map_err(model)?;
            let (prepared, run) = run_ensemble(&spec, &ens).map_err(runtime)?;
            Ok(vec![StageRun {
                stage: 1,
                time_offset: 0.0,
                spec,
                prepared,
                run,
                analysis: Value::Null,
            }])
        }
        ParamBlock::Surreal(p) => {
            single_stage_only(stage, "surreal")?;
            let spec = build_surreal(&p.params()?).map_err(model)?;
            let (prepared, run) = run_ensemble(&spec, &ens).map_err(runtime)?;
            let analysis = surreal_analysis(&spec, &run);
            Ok(vec![StageRun {
                stage: 1,
                time_offset: 0.0,
                spec,
                prepared,
                run,
                analysis,
            }])
        }
        ParamBlock::Eprb(p) => {
            let params = p.params()?;
            match stage {
                Some(1) => Ok(vec![eprb_stage1(&params, &ens)?]),
                Some(2) => {
                    let spec = build_eprb_stage2(&params, &allset_state(&params)).map_err(model)?;
                    let (prepared, run) = run_ensemble(&spec, &ens).map_err(runtime)?;
                    Ok(vec![eprb_stage2_run(&params, spec, prepared, run, 0.0)?])
                }
                None => {
                    let first = eprb_stage1(&params, &ens)?;
                    let (allset, dropped) = restrict_allset(first.prepared.history.last().expect("history"));
                    log::debug!("stage 1 weight outside the all-set states: {dropped:e}");
                    let last = first.run.recorded.len() - 1;
                    let starts = first
                        .run
                        .paths
                        .iter()
                        .enumerate()
                        .map(|(k, path)| {
                            stage1_to_stage2_index(path[last] as usize).ok_or_else(|| {
                                CliError::Runtime(format!("trajectory {k}: stage 1 did not end in an all-set state"))
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    let spec = build_eprb_stage2(&params, &allset).map_err(model)?;
                    let prepared = prepare(&spec).map_err(runtime)?;
                    let run = run_prepared(&spec, &prepared, &ens, Some(&starts)).map_err(runtime)?;
                    let offset = first.spec.schedule.iter().map(|s| s.duration()).sum();
                    let second = eprb_stage2_run(&params, spec, prepared, run, offset)?;
                    Ok(vec![first, second])
                }
                Some(n) => Err(CliError::config("--stage", format!("eprb has stages 1 and 2, got {n}"))),
            }
        }
    }
}

fn single_stage_only(stage: Option<usize>, name: &str) -> Result<(), CliError> {
    match stage {
        None | Some(1) => Ok(()),
        Some(n) => Err(CliError::config("--stage", format!("{name} has a single stage, got {n}"))),
    }
}

fn eprb_stage1(params: &EprbParams, ens: &beable_core::ensemble::EnsembleConfig) -> Result<StageRun, CliError> {
    let spec = build_eprb_stage1(params).map_err(model)?;
    let (prepared, run) = run_ensemble(&spec, ens).map_err(runtime)?;
    Ok(StageRun {
        stage: 1,
        time_offset: 0.0,
        spec,
        prepared,
        run,
        analysis: Value::Null,
    })
}

#[derive(Debug, Default, Serialize)]
struct Bookkeeping {
    /// Device angle changed during the stage.
    device_changed: usize,
    /// Position outcome belongs to the other device, or none was reached.
    wrong_device: usize,
    /// Spin beable disagrees with the sign recorded by the position.
    sign_mismatch: usize,
    /// Frame polar angle other than π/2 or the device angle of a measured particle.
    frame_mismatch: usize,
}

fn eprb_bookkeeping(params: &EprbParams, spec: &ExperimentSpec, prepared: &Prepared, run: &EnsembleRun) -> Result<Bookkeeping, CliError> {
    let space = &spec.space;
    let mut out = Bookkeeping::default();
    for path in &run.paths {
        let first = space.decode(path[0] as usize).map_err(runtime)?;
        let devices = [first[0].0 / stage2::N_X, first[1].0 / stage2::N_X];
        let mut bad = [false; 4];
        for (r, &n) in path.iter().enumerate() {
            let parts = space.decode(n as usize).map_err(runtime)?;
            let xs = [parts[0].0 % stage2::N_X, parts[1].0 % stage2::N_X];
            let angles = prepared.angles_at(run.recorded[r], n as usize);
            for i in 0..2 {
                bad[0] |= parts[i].0 / stage2::N_X != devices[i];
                if xs[i] != stage2::X_ALLSET {
                    bad[1] |= position_device(xs[i]) != Some(devices[i]);
                    let sign = if parts[i].1 == 0 { 1 } else { -1 };
                    bad[2] |= position_sign(xs[i]) != Some(sign);
                }
                if let Some(a) = &angles {
                    let expected = if xs[i] != stage2::X_ALLSET {
                        params.angle(devices[i])
                    } else if xs[1 - i] != stage2::X_ALLSET {
                        params.angle(devices[1 - i])
                    } else {
                        std::f64::consts::FRAC_PI_2
                    };
                    bad[3] |= (a[i].0 - expected).abs() > 1e-6;
                }
            }
        }
        let last = space.decode(*path.last().expect("path") as usize).map_err(runtime)?;
        bad[1] |= last.iter().any(|&(e, _)| e % stage2::N_X == stage2::X_ALLSET);
        out.device_changed += usize::from(bad[0]);
        out.wrong_device += usize::from(bad[1]);
        out.sign_mismatch += usize::from(bad[2]);
        out.frame_mismatch += usize::from(bad[3]);
    }
    Ok(out)
}

fn estimate_json(e: &Estimate) -> Value {
    json!({"value": e.value, "standard_error": e.se, "exact": e.exact, "count": e.n})
}

fn eprb_stage2_run(params: &EprbParams, spec: ExperimentSpec, prepared: Prepared, run: EnsembleRun, offset: f64) -> Result<StageRun, CliError> {
    let corr = spin_correlation(&spec, &prepared, &run).map_err(runtime)?;
    let means = single_spin_mean(&spec, &prepared, &run).map_err(runtime)?;
    let names = ["alpha", "beta"];
    let mut correlations = Vec::new();
    for d1 in 0..2 {
        for d2 in 0..2 {
            let mut v = estimate_json(&corr[d1][d2]);
            v["device_1"] = json!(names[d1]);
            v["device_2"] = json!(names[d2]);
            v["angle_difference"] = json!(params.angle(d1) - params.angle(d2));
            correlations.push(v);
        }
    }
    let mut single = Vec::new();
    for (particle, row) in means.iter().enumerate() {
        for (d, e) in row.iter().enumerate() {
            let mut v = estimate_json(e);
            v["particle"] = json!(particle + 1);
            v["device"] = json!(names[d]);
            single.push(v);
        }
    }
    let bookkeeping = eprb_bookkeeping(params, &spec, &prepared, &run)?;
    let analysis = json!({
        "spin_correlations": correlations,
        "single_spin_means": single,
        "bookkeeping_violations": bookkeeping,
    });
    Ok(StageRun {
        stage: 2,
        time_offset: offset,
        spec,
        prepared,
        run,
        analysis,
    })
}

fn surreal_analysis(spec: &ExperimentSpec, run: &EnsembleRun) -> Value {
    let side = spec.decoder("side").expect("surreal has a side decoder");
    let internal = spec.decoder("internal").expect("surreal has an internal decoder");
    let crossed = run
        .paths
        .iter()
        .filter(|p| side.decode(p[0] as usize) != side.decode(*p.last().expect("path") as usize))
        .count();
    let mut summary = json!({
        "crossed": crossed,
        "crossed_fraction": crossed as f64 / run.paths.len() as f64,
    });
    if spec.guidance == Guidance::Full {
        let changed = run
            .paths
            .iter()
            .filter(|p| p.iter().any(|&n| internal.decode(n as usize) != internal.decode(p[0] as usize)))
            .count();
        summary["internal_label_changed"] = json!(changed);
    }
    summary
}
