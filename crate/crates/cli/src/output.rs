//! CSV and JSON writers.
//!
//! `probabilities.csv`: `stage,time,observable,label,exact,frequency,standard_error`,
//! one row per recorded time, observable and label.
//!
//! `trajectories.csv`: `trajectory,stage,time`, then one column per observable
//! (union over stages, empty where a stage lacks it), then `theta_i,phi_angle_i`
//! per particle when any stage uses rotated spin bases.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use crate::config::{OutputFormat, RunConfig};
use crate::run::StageRun;
use crate::CliError;

pub const PROBABILITIES_HEADER: [&str; 7] = ["stage", "time", "observable", "label", "exact", "frequency", "standard_error"];

/// Full round-trip precision: 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("writing {}: {e}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

pub fn write_all(dir: &Path, cfg: &RunConfig, stage_flag: Option<usize>, stages: &[StageRun]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let formats = &cfg.output.formats;
    if formats.contains(&OutputFormat::Probabilities) {
        write_probabilities(&dir.join("probabilities.csv"), stages)?;
    }
    if formats.contains(&OutputFormat::Trajectories) {
        write_trajectories(&dir.join("trajectories.csv"), stages)?;
    }
    if formats.contains(&OutputFormat::Summary) {
        let path = dir.join("summary.json");
        let mut f = BufWriter::new(File::create(&path).map_err(|e| io_error(&path, e))?);
        let text = serde_json::to_string_pretty(&summary(cfg, stage_flag, stages)).map_err(|e| io_error(&path, e))?;
        writeln!(f, "{text}").map_err(|e| io_error(&path, e))?;
    }
    Ok(())
}

fn write_probabilities(path: &Path, stages: &[StageRun]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(PROBABILITIES_HEADER).map_err(|e| io_error(path, e))?;
    for s in stages {
        let stage = s.stage.to_string();
        for series in &s.run.stats.series {
            for (r, &t) in s.run.stats.times.iter().enumerate() {
                let time = num(s.time_offset + t);
                for (k, label) in series.labels.iter().enumerate() {
                    let row = [
                        stage.as_str(),
                        &time,
                        &series.name,
                        label,
                        &num(series.exact[r][k]),
                        &num(series.freq[r][k]),
                        &num(series.se[r][k]),
                    ];
                    w.write_record(row).map_err(|e| io_error(path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// Observable columns of `trajectories.csv`, in order of first appearance.
pub fn observable_columns(stages: &[StageRun]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for s in stages {
        for d in &s.spec.decoders {
            if !names.contains(&d.name) {
                names.push(d.name.clone());
            }
        }
    }
    names
}

fn write_trajectories(path: &Path, stages: &[StageRun]) -> Result<(), CliError> {
    let columns = observable_columns(stages);
    let n_particles = stages.iter().map(|s| s.spec.space.n_particles()).max().unwrap_or(0);
    let with_angles = stages.iter().any(|s| s.prepared.frames.is_some());
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = vec!["trajectory".into(), "stage".into(), "time".into()];
    header.extend(columns.iter().cloned());
    if with_angles {
        for i in 1..=n_particles {
            header.push(format!("theta_{i}"));
            header.push(format!("phi_angle_{i}"));
        }
    }
    w.write_record(&header).map_err(|e| io_error(path, e))?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for s in stages {
        let marginal = s.prepared.guidance == beable_core::dynamics::Guidance::Marginal;
        let decoders: Vec<_> = columns
            .iter()
            .map(|c| s.spec.decoder(c).filter(|d| !(marginal && d.uses_spin)))
            .collect();
        for (k, path_k) in s.run.paths.iter().enumerate() {
            for (r, &n) in path_k.iter().enumerate() {
                let n = n as usize;
                let t = s.run.recorded[r];
                row.clear();
                row.push(k.to_string());
                row.push(s.stage.to_string());
                row.push(num(s.time_offset + s.prepared.times[t]));
                for d in &decoders {
                    row.push(d.map(|d| d.labels[d.decode(n)].clone()).unwrap_or_default());
                }
                if with_angles {
                    let angles = s.prepared.angles_at(t, n);
                    for i in 0..n_particles {
                        match angles.as_ref().and_then(|a| a.get(i)) {
                            Some(&(theta, phi)) => {
                                row.push(num(theta));
                                row.push(num(phi));
                            }
                            None => {
                                row.push(String::new());
                                row.push(String::new());
                            }
                        }
                    }
                }
                w.write_record(&row).map_err(|e| io_error(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn summary(cfg: &RunConfig, stage_flag: Option<usize>, stages: &[StageRun]) -> Value {
    let stage_entries: Vec<Value> = stages
        .iter()
        .map(|s| {
            let last = s.run.stats.times.len() - 1;
            let finals: serde_json::Map<String, Value> = s
                .run
                .stats
                .series
                .iter()
                .filter(|series| series.name != "state")
                .map(|series| {
                    let rows: Vec<Value> = series
                        .labels
                        .iter()
                        .enumerate()
                        .map(|(k, label)| {
                            json!({
                                "label": label,
                                "exact": series.exact[last][k],
                                "frequency": series.freq[last][k],
                                "standard_error": series.se[last][k],
                            })
                        })
                        .collect();
                    (series.name.clone(), Value::Array(rows))
                })
                .collect();
            json!({
                "stage": s.stage,
                "experiment": s.spec.name,
                "schedule": s.spec.schedule.iter().map(|st| json!({"label": st.label, "n_substeps": st.n_substeps, "eps": st.eps})).collect::<Vec<_>>(),
                "time_offset": s.time_offset,
                "n_trajectories": s.run.stats.n_trajectories,
                "recorded_times": s.run.recorded.len(),
                "counters": {
                    "halved_steps": s.run.counters.halved_steps,
                    "max_halvings": s.run.counters.max_halvings,
                    "min_eps_used": s.run.counters.min_eps_used,
                },
                "final": finals,
                "analysis": s.analysis,
            })
        })
        .collect();
    json!({
        "code_version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment,
        "stage": stage_flag,
        "seed": cfg.ensemble.seed,
        "config": cfg,
        "stages": stage_entries,
    })
}
