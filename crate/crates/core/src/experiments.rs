//! Monte-Carlo scenario sweeps over rollout counts and auxiliary weights.
//!
//! Every `(sweep point, repetition)` pair draws fresh true and auxiliary
//! rollouts from seeds derived from the master seed; all weight schedules
//! at that pair are fit to the same data, so schedule comparisons use
//! common random numbers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{theorem1_bound, BoundInputs};
use crate::error::{Error, Result};
use crate::estimator::{error_metrics, wls, WeightSchedule};
use crate::numerics::Matrix;
use crate::simulate::{assemble_batch, simulate_rollouts};
use crate::systems::SystemModel;

/// The example true and auxiliary systems (`n = 3`, `p = 2`, `T = 2`, unit
/// variances). They differ only in the `(1,1)` entries of `A` and `B`.
pub fn paper_models() -> (SystemModel, SystemModel) {
    let a_true = [[0.6, 0.5, 0.4], [0.0, 0.4, 0.3], [0.0, 0.0, 0.3]];
    let b_true = [[1.0, 0.5], [0.5, 1.0], [0.5, 0.5]];
    let a_aux = [[0.7, 0.5, 0.4], [0.0, 0.4, 0.3], [0.0, 0.0, 0.3]];
    let b_aux = [[1.1, 0.5], [0.5, 1.0], [0.5, 0.5]];
    let build = |a: &[[f64; 3]; 3], b: &[[f64; 2]; 3]| {
        SystemModel::time_invariant(
            Matrix::from_rows(a).unwrap(),
            Matrix::from_rows(b).unwrap(),
            1.0,
            1.0,
            1.0,
            2,
        )
        .unwrap()
    };
    (build(&a_true, &b_true), build(&a_aux, &b_aux))
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for a path of labels under `master`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// `N_p = ratio * N_r`, `N_r` swept.
    BothIncreasing,
    /// `N_p` fixed, `N_r` swept.
    FixedAux,
    /// `N_r` fixed, `N_p` swept.
    FixedTrue,
}

impl Scenario {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Scenario::BothIncreasing),
            2 => Ok(Scenario::FixedAux),
            3 => Ok(Scenario::FixedTrue),
            other => Err(Error::Config(format!("unknown scenario {other}; expected 1, 2 or 3"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Scenario::BothIncreasing => 1,
            Scenario::FixedAux => 2,
            Scenario::FixedTrue => 3,
        }
    }
}

/// Default sweep for scenarios 1 and 2.
pub const TRUE_SWEEP: [usize; 7] = [100, 200, 400, 800, 1600, 3200, 4000];
/// Default sweep for scenario 3.
pub const AUX_SWEEP: [usize; 4] = [100, 400, 1600, 4000];

pub fn default_schedules() -> Vec<WeightSchedule> {
    vec![
        WeightSchedule::Constant(0.0),
        WeightSchedule::Constant(0.3),
        WeightSchedule::Constant(0.6),
        WeightSchedule::Constant(1.0),
        WeightSchedule::Constant(1e10),
        WeightSchedule::Decaying(1.0),
    ]
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// Swept counts: `N_r` for scenarios 1-2, `N_p` for scenario 3.
    pub sweep_points: Vec<usize>,
    /// `N_p` for scenario 2, `N_r` for scenario 3, the `N_p / N_r` ratio for scenario 1.
    pub fixed: usize,
    pub schedules: Vec<WeightSchedule>,
    pub repetitions: usize,
    pub master_seed: u64,
    pub true_model: SystemModel,
    pub aux_model: SystemModel,
    /// When set, each row carries the theorem bound at this delta.
    pub bound_delta: Option<f64>,
}

impl ScenarioSpec {
    /// Published setup: example models, default grids, 10 repetitions.
    pub fn paper(scenario: Scenario, master_seed: u64) -> Self {
        let (true_model, aux_model) = paper_models();
        let (sweep_points, fixed) = match scenario {
            Scenario::BothIncreasing => (TRUE_SWEEP.to_vec(), 3),
            Scenario::FixedAux => (TRUE_SWEEP.to_vec(), 2400),
            Scenario::FixedTrue => (AUX_SWEEP.to_vec(), 50),
        };
        Self {
            scenario,
            sweep_points,
            fixed,
            schedules: default_schedules(),
            repetitions: 10,
            master_seed,
            true_model,
            aux_model,
            bound_delta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep_points.is_empty() {
            return Err(Error::Config("empty sweep".into()));
        }
        if self.sweep_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sweep points must be strictly increasing".into()));
        }
        if self.sweep_points[0] == 0 {
            return Err(Error::Config("sweep points must be positive".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.schedules.is_empty() {
            return Err(Error::Config("no weight schedules".into()));
        }
        let mut labels: Vec<String> = self.schedules.iter().map(WeightSchedule::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate weight schedules".into()));
        }
        for s in &self.schedules {
            s.validate(self.true_model.horizon())?;
        }
        if self.scenario != Scenario::BothIncreasing && self.fixed == 0 {
            return Err(Error::Config("fixed rollout count must be positive".into()));
        }
        if self.true_model.horizon() != self.aux_model.horizon() {
            return Err(Error::Config("models must share the rollout length".into()));
        }
        Ok(())
    }

    /// `(N_r, N_p)` at a sweep point.
    pub fn counts(&self, point: usize) -> (usize, usize) {
        match self.scenario {
            Scenario::BothIncreasing => (point, self.fixed * point),
            Scenario::FixedAux => (point, self.fixed),
            Scenario::FixedTrue => (self.fixed, point),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (0 for a single repetition).
    pub std: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRow {
    pub sweep: usize,
    pub label: String,
    pub err_theta: Summary,
    pub err_a: Summary,
    pub err_b: Summary,
    pub bound_total: Option<f64>,
    /// Repetitions whose Gram matrix was singular; they are left out of the means.
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioResult {
    pub rows: Vec<ScenarioRow>,
}

impl ScenarioResult {
    pub fn row(&self, sweep: usize, label: &str) -> Option<&ScenarioRow> {
        self.rows.iter().find(|r| r.sweep == sweep && r.label == label)
    }

    /// Mean `||Theta_hat - Theta||` at a sweep point for a schedule label.
    pub fn mean_err(&self, sweep: usize, label: &str) -> f64 {
        self.row(sweep, label).map_or(f64::NAN, |r| r.err_theta.mean)
    }
}

type Errors = [f64; 3];

pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioResult> {
    spec.validate()?;
    let theta = spec.true_model.theta_at(0);
    let jobs: Vec<(usize, usize)> = spec
        .sweep_points
        .iter()
        .flat_map(|&p| (0..spec.repetitions).map(move |r| (p, r)))
        .collect();

    let outcomes: Vec<(usize, Vec<Option<Errors>>)> = jobs
        .par_iter()
        .map(|&(point, rep)| {
            let (nr, np) = spec.counts(point);
            let base = [spec.scenario.number() as u64, point as u64, rep as u64];
            let seed_true = derive_seed(spec.master_seed, &[base[0], base[1], base[2], 0]);
            let seed_aux = derive_seed(spec.master_seed, &[base[0], base[1], base[2], 1]);
            let tr = simulate_rollouts(&spec.true_model, nr, seed_true);
            let ar = simulate_rollouts(&spec.aux_model, np, seed_aux);
            let batch = assemble_batch(&tr, &ar, &spec.true_model, &spec.aux_model)?;
            let per_schedule = spec
                .schedules
                .iter()
                .map(|s| match wls(&batch, s) {
                    Ok(est) => error_metrics(&est, &theta).map(|e| Some([e.err_theta, e.err_a, e.err_b])),
                    Err(Error::SingularGram { .. }) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((point, per_schedule))
        })
        .collect::<Result<_>>()?;

    // (point, schedule index) -> errors in repetition order
    let mut grouped: BTreeMap<(usize, usize), Vec<Option<Errors>>> = BTreeMap::new();
    for (point, per_schedule) in outcomes {
        for (si, e) in per_schedule.into_iter().enumerate() {
            grouped.entry((point, si)).or_default().push(e);
        }
    }

    let mut rows = Vec::with_capacity(grouped.len());
    for ((point, si), errs) in grouped {
        let ok: Vec<Errors> = errs.iter().flatten().copied().collect();
        let pick = |i: usize| Summary::of(&ok.iter().map(|e| e[i]).collect::<Vec<_>>());
        let schedule = &spec.schedules[si];
        let bound_total = match spec.bound_delta {
            Some(delta) => {
                let (nr, np) = spec.counts(point);
                let inputs =
                    BoundInputs::from_models(&spec.true_model, &spec.aux_model, nr, np, delta, schedule.clone())?;
                Some(theorem1_bound(&inputs)?.total)
            }
            None => None,
        };
        rows.push(ScenarioRow {
            sweep: point,
            label: schedule.label(),
            err_theta: pick(0),
            err_a: pick(1),
            err_b: pick(2),
            bound_total,
            failed: errs.len() - ok.len(),
        });
    }
    rows.sort_by(|a, b| a.sweep.cmp(&b.sweep).then_with(|| a.label.cmp(&b.label)));
    Ok(ScenarioResult { rows })
}

pub const CSV_HEADER: &str =
    "sweep,label,err_theta_mean,err_theta_std,err_a_mean,err_a_std,err_b_mean,err_b_std,bound_total";

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn render_csv(result: &ScenarioResult) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &result.rows {
        let _ = write!(out, "{},{}", r.sweep, r.label);
        for s in [r.err_theta, r.err_a, r.err_b] {
            let _ = write!(out, ",{},{}", format_float(s.mean), format_float(s.std));
        }
        out.push(',');
        if let Some(b) = r.bound_total {
            out.push_str(&format_float(b));
        }
        out.push('\n');
    }
    out
}

pub fn emit_csv(result: &ScenarioResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if result.rows.is_empty() {
        return Err(Error::Config("refusing to write an empty result".into()));
    }
    std::fs::write(path, render_csv(result)).map_err(|e| Error::io(path, e))
}

/// Parses CSV text produced by [`render_csv`]. Failure counts are not stored
/// in the file and come back as zero.
pub fn parse_csv(text: &str) -> Result<ScenarioResult> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::parse("scenario csv", format!("unexpected header {other:?}"))),
    }
    let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| Error::parse("scenario csv", e)) };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::parse(
                "scenario csv",
                format!("line {}: expected 9 fields", i + 2),
            ));
        }
        rows.push(ScenarioRow {
            sweep: f[0].parse().map_err(|e| Error::parse("scenario csv", e))?,
            label: f[1].to_string(),
            err_theta: Summary {
                mean: num(f[2])?,
                std: num(f[3])?,
            },
            err_a: Summary {
                mean: num(f[4])?,
                std: num(f[5])?,
            },
            err_b: Summary {
                mean: num(f[6])?,
                std: num(f[7])?,
            },
            bound_total: if f[8].is_empty() { None } else { Some(num(f[8])?) },
            failed: 0,
        });
    }
    Ok(ScenarioResult { rows })
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<ScenarioResult> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}
