//! Repeated runs over several parameter sets, with summary statistics and
//! mean convergence curves written as CSV.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aco::{run_aco, AcoError, AcoParams};
use crate::instance::{generate_instance, load_instance, GeneratorSettings, InstanceError, ProblemInstance};
use crate::schedule::{parse_schedule, ScheduleError};

/// Where the instance of an experiment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstanceSource {
    Path(PathBuf),
    Generated(GeneratorSettings),
    #[serde(skip)]
    Inline(ProblemInstance),
}

impl InstanceSource {
    pub fn resolve(&self) -> Result<ProblemInstance, InstanceError> {
        match self {
            InstanceSource::Path(p) => load_instance(p),
            InstanceSource::Generated(g) => generate_instance(g, g.seed),
            InstanceSource::Inline(inst) => Ok(inst.clone()),
        }
    }
}

/// One row of the parameter table: schedules kept as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSet {
    pub label: String,
    pub alpha: String,
    pub beta: String,
    pub rho: String,
}

impl ParamSet {
    pub fn new(label: &str, alpha: &str, beta: &str, rho: &str) -> Self {
        Self {
            label: label.into(),
            alpha: alpha.into(),
            beta: beta.into(),
            rho: rho.into(),
        }
    }
}

/// The four reference schedules: fixed weights, pheromone only, decreasing
/// alpha with increasing beta, and the reverse.
pub fn reference_sets() -> Vec<ParamSet> {
    vec![
        ParamSet::new("1", "2.0", "1.0", "0.25"),
        ParamSet::new("2", "2.0", "0.0", "0.25"),
        ParamSet::new("3", "2/(n + 0.01)", "0.1n", "0.25"),
        ParamSet::new("4", "0.2n", "1/(n + 0.01)", "0.25"),
    ]
}

fn default_runs() -> usize {
    30
}
fn default_ants() -> usize {
    20
}
fn default_iterations() -> usize {
    500
}
fn default_seed() -> u64 {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub instance: InstanceSource,
    pub sets: Vec<ParamSet>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_ants")]
    pub ants: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub local_search: bool,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error("set {label}: {source}")]
    Expression { label: String, source: ScheduleError },
    #[error("set {label}: {source}")]
    Run { label: String, source: AcoError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Reads a manifest; a relative instance path is taken relative to the manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ExperimentSpec, ExperimentError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut spec: ExperimentSpec =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Manifest(e.to_string()))?;
    if let InstanceSource::Path(p) = &mut spec.instance {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(spec)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of run `run` of set `set`.
pub fn run_seed(base: u64, set: usize, run: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ set as u64) ^ run as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetResult {
    pub set: ParamSet,
    /// Final cost of each run in run order; `f64::INFINITY` for runs that found nothing.
    pub final_costs: Vec<f64>,
    pub c_min: f64,
    pub c_avg: f64,
    pub cv_percent: f64,
    /// Mean over runs of the best-so-far cost at each iteration.
    pub mean_curve: Vec<f64>,
    /// Best-so-far curve of the run with the lowest final cost.
    pub best_run_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub sets: Vec<SetResult>,
}

/// Minimum, mean and coefficient of variation (percent, n−1 denominator).
pub fn run_statistics(costs: &[f64]) -> (f64, f64, f64) {
    let n = costs.len() as f64;
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = costs.iter().sum::<f64>() / n;
    if costs.len() < 2 || !mean.is_finite() {
        let cv = if mean.is_finite() { 0.0 } else { f64::NAN };
        return (min, mean, cv);
    }
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (min, mean, 100.0 * var.sqrt() / mean)
}

pub fn run_batch(spec: &ExperimentSpec) -> Result<BatchResult, ExperimentError> {
    if spec.sets.is_empty() {
        return Err(ExperimentError::Manifest("at least one parameter set is required".into()));
    }
    if spec.runs < 1 {
        return Err(ExperimentError::Manifest("runs must be at least 1".into()));
    }
    let inst = spec.instance.resolve()?;
    let mut params = Vec::with_capacity(spec.sets.len());
    for set in &spec.sets {
        let parse = |s: &str| {
            parse_schedule(s).map_err(|source| ExperimentError::Expression {
                label: set.label.clone(),
                source,
            })
        };
        let p = AcoParams {
            n_ants: spec.ants,
            n_iterations: spec.iterations,
            alpha: parse(&set.alpha)?,
            beta: parse(&set.beta)?,
            rho: parse(&set.rho)?,
            local_search: spec.local_search,
            ..AcoParams::default()
        };
        p.validate().map_err(|source| ExperimentError::Run {
            label: set.label.clone(),
            source,
        })?;
        params.push(p);
    }

    let jobs: Vec<(usize, usize)> = (0..spec.sets.len())
        .flat_map(|s| (0..spec.runs).map(move |r| (s, r)))
        .collect();
    let runs: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let p = AcoParams {
                seed: run_seed(spec.seed, s, r),
                ..params[s].clone()
            };
            run_aco(&inst, &p)
                .map(|res| res.trace.iter().map(|t| t.best_so_far).collect())
                .map_err(|source| ExperimentError::Run {
                    label: spec.sets[s].label.clone(),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;

    let sets = spec
        .sets
        .iter()
        .zip(runs.chunks(spec.runs))
        .map(|(set, curves)| {
            let final_costs: Vec<f64> = curves
                .iter()
                .map(|c| c.last().copied().unwrap_or(f64::INFINITY))
                .collect();
            let (c_min, c_avg, cv_percent) = run_statistics(&final_costs);
            let best = (0..curves.len())
                .min_by(|&a, &b| final_costs[a].total_cmp(&final_costs[b]))
                .expect("at least one run");
            let mean_curve = (0..spec.iterations)
                .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
                .collect();
            SetResult {
                set: set.clone(),
                final_costs,
                c_min,
                c_avg,
                cv_percent,
                mean_curve,
                best_run_curve: curves[best].clone(),
            }
        })
        .collect();
    Ok(BatchResult { sets })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, ExperimentError> {
    csv::Writer::from_path(path).map_err(|source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// `set_label,iteration,mean_best_so_far,best_run_best_so_far`
pub fn write_convergence_csv(result: &BatchResult, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["set_label", "iteration", "mean_best_so_far", "best_run_best_so_far"])
        .map_err(csv_err(path))?;
    for s in &result.sets {
        for (i, (m, b)) in s.mean_curve.iter().zip(&s.best_run_curve).enumerate() {
            w.write_record([s.set.label.clone(), (i + 1).to_string(), m.to_string(), b.to_string()])
                .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `set_label,rho,alpha,beta,c_min,c_avg,cv_percent`
pub fn write_summary_csv(result: &BatchResult, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["set_label", "rho", "alpha", "beta", "c_min", "c_avg", "cv_percent"])
        .map_err(csv_err(path))?;
    for s in &result.sets {
        w.write_record([
            s.set.label.clone(),
            s.set.rho.clone(),
            s.set.alpha.clone(),
            s.set.beta.clone(),
            s.c_min.to_string(),
            s.c_avg.to_string(),
            s.cv_percent.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{plc_io_devices, plc_io_limits, ControlLoop};
    use crate::schedule::{validate_schedule_range, ParamRole};

    fn small_instance() -> ProblemInstance {
        ProblemInstance {
            devices: plc_io_devices(),
            loops: (1..=6)
                .map(|id| ControlLoop {
                    id,
                    signals: 1 + (id as u32 % 3),
                    mem_demand: 4.0,
                    instr_count: 100,
                })
                .collect(),
            limits: plc_io_limits(2),
        }
    }

    fn spec(runs: usize, iterations: usize) -> ExperimentSpec {
        ExperimentSpec {
            instance: InstanceSource::Inline(small_instance()),
            sets: reference_sets()[..2].to_vec(),
            runs,
            ants: 4,
            iterations,
            seed: 7,
            local_search: true,
        }
    }

    #[test]
    fn statistics() {
        assert_eq!(run_statistics(&[6.0, 6.0, 6.0]), (6.0, 6.0, 0.0));
        let (min, avg, cv) = run_statistics(&[4.0, 6.0]);
        assert_eq!((min, avg), (4.0, 5.0));
        assert!((cv - 100.0 * 2f64.sqrt() / 5.0).abs() < 1e-12);
        assert!((cv - 28.284).abs() < 1e-3);
    }

    #[test]
    fn reference_sets_are_valid() {
        for s in reference_sets() {
            for (e, role) in [(&s.alpha, ParamRole::Alpha), (&s.beta, ParamRole::Beta), (&s.rho, ParamRole::Rho)] {
                assert!(validate_schedule_range(&parse_schedule(e).unwrap(), 500, role).is_empty());
            }
        }
    }

    #[test]
    fn batch_shapes_and_files() {
        let r = run_batch(&spec(3, 10)).unwrap();
        assert_eq!(r.sets.len(), 2);
        for s in &r.sets {
            assert_eq!(s.final_costs.len(), 3);
            assert!(s.c_min <= s.c_avg && s.cv_percent >= 0.0);
            assert!(s.mean_curve.windows(2).all(|w| w[1] <= w[0]));
        }
        let dir = tempfile::tempdir().unwrap();
        let (conv, summ) = (dir.path().join("c.csv"), dir.path().join("s.csv"));
        write_convergence_csv(&r, &conv).unwrap();
        write_summary_csv(&r, &summ).unwrap();
        assert_eq!(fs::read_to_string(&conv).unwrap().lines().count(), 21);
        let text = fs::read_to_string(&summ).unwrap();
        assert_eq!(text.lines().next().unwrap(), "set_label,rho,alpha,beta,c_min,c_avg,cv_percent");
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        for (row, s) in rd.records().zip(&r.sets) {
            let row = row.unwrap();
            assert_eq!(row[4].parse::<f64>().unwrap(), s.c_min);
            assert_eq!(row[5].parse::<f64>().unwrap(), s.c_avg);
            assert_eq!(row[6].parse::<f64>().unwrap(), s.cv_percent);
        }
    }

    #[test]
    fn batch_is_reproducible() {
        assert_eq!(run_batch(&spec(2, 5)).unwrap(), run_batch(&spec(2, 5)).unwrap());
    }

    #[test]
    fn seeds_differ_per_set_and_run() {
        let mut seen = std::collections::HashSet::new();
        for s in 0..4 {
            for r in 0..30 {
                assert!(seen.insert(run_seed(1, s, r)));
            }
        }
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.json");
        fs::write(
            &m,
            r#"{"instance": "inst.json", "sets": [{"label": "a", "alpha": "1", "beta": "1", "rho": "0.5"}]}"#,
        )
        .unwrap();
        let spec = load_manifest(&m).unwrap();
        assert_eq!(spec.instance, InstanceSource::Path(dir.path().join("inst.json")));
        assert_eq!((spec.runs, spec.ants, spec.iterations, spec.seed), (30, 20, 500, 1));
        fs::write(
            &m,
            r#"{"instance": {"profile": "plc-io", "a": 5, "s": 2}, "sets": [], "runs": 2}"#,
        )
        .unwrap();
        let spec = load_manifest(&m).unwrap();
        assert!(matches!(spec.instance, InstanceSource::Generated(ref g) if g.loops == 5));
        assert!(matches!(run_batch(&spec), Err(ExperimentError::Manifest(_))));
        fs::write(&m, r#"{"instance": "x", "sets": [], "bogus": 1}"#).unwrap();
        assert!(matches!(load_manifest(&m), Err(ExperimentError::Manifest(_))));
    }
}
