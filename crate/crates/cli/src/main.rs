use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use auxid_core::bounds::{aux_benefit_condition, theorem1_bound, BoundInputs};
use auxid_core::estimator::{error_metrics, select_weight_cv, wls_from_rollouts, Estimate, WeightSchedule, WlsOptions};
use auxid_core::experiments::{derive_seed, emit_csv, run_scenario, Scenario, ScenarioSpec};
use auxid_core::io::{self, EstimateMetadata, RolloutSets};
use auxid_core::simulate::{observation_matrices, simulate_rollouts, Source};
use auxid_core::{Error, Result};

const DEFAULT_DELTA: f64 = 0.05;

#[derive(Parser)]
#[command(name = "auxid", version, about = "Linear system identification with auxiliary data")]
struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Failure probability for bounds; results hold with probability 1 - 4*delta.
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate rollouts of one or two models and write them as CSV.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, requires = "aux_count")]
        aux_model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        aux_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the weighted estimator to rollout CSVs and export it as a model file.
    Estimate {
        /// Rollout CSV files; their true and auxiliary rollouts are pooled.
        #[arg(long, required = true, num_args = 1..)]
        rollouts: Vec<PathBuf>,
        #[command(flatten)]
        weights: WeightArgs,
        /// Regularize a singular Gram matrix instead of failing.
        #[arg(long)]
        ridge: bool,
        /// Model to report estimation errors against.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the finite-sample error bound for a configuration file.
    Bound {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a Monte-Carlo scenario sweep and write the aggregated CSV.
    Experiment {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        scenario: u8,
        /// Overrides for the default scenario setup.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose a constant auxiliary weight by cross-validation.
    CvSelect {
        #[arg(long, required = true, num_args = 1..)]
        rollouts: Vec<PathBuf>,
        /// Comma-separated candidate weights.
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct WeightArgs {
    /// Constant auxiliary weight.
    #[arg(long)]
    q: Option<f64>,
    /// Per-step weights q_0,..,q_{T-1}.
    #[arg(long, value_delimiter = ',')]
    q_steps: Option<Vec<f64>>,
    /// Weight c / sqrt(N_r).
    #[arg(long)]
    q_decay: Option<f64>,
}

impl WeightArgs {
    fn schedule(&self) -> WeightSchedule {
        match (self.q, &self.q_steps, self.q_decay) {
            (Some(q), _, _) => WeightSchedule::Constant(q),
            (_, Some(v), _) => WeightSchedule::PerStep(v.clone()),
            (_, _, Some(c)) => WeightSchedule::Decaying(c),
            _ => unreachable!("clap enforces exactly one weight option"),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundConfig {
    true_model: PathBuf,
    aux_model: PathBuf,
    true_count: usize,
    aux_count: usize,
    weights: WeightSchedule,
    delta: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    true_model: Option<PathBuf>,
    aux_model: Option<PathBuf>,
    sweep: Option<Vec<usize>>,
    fixed: Option<usize>,
    repetitions: Option<usize>,
    schedules: Option<Vec<WeightSchedule>>,
    seed: Option<u64>,
    bound_delta: Option<f64>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Resolves `relative` against the directory holding `config`.
fn beside(config: &Path, relative: &Path) -> PathBuf {
    config
        .parent()
        .map_or_else(|| relative.to_path_buf(), |dir| dir.join(relative))
}

fn load_sets(paths: &[PathBuf]) -> Result<RolloutSets> {
    let mut all = RolloutSets::default();
    for p in paths {
        let s = io::load_rollouts(p)?;
        all.true_rollouts.extend(s.true_rollouts);
        all.aux_rollouts.extend(s.aux_rollouts);
    }
    Ok(all)
}

fn simulate(cli: &Cli, model: &Path, count: usize, aux: Option<(&Path, usize)>, out: &Path) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let true_model = io::load_model(model)?;
    let tr = simulate_rollouts(&true_model, count, derive_seed(seed, &[0]));
    let ar = match aux {
        Some((path, n)) => simulate_rollouts(&io::load_model(path)?, n, derive_seed(seed, &[1])),
        None => Vec::new(),
    };
    io::save_rollouts(&[(Source::True, &tr), (Source::Auxiliary, &ar)], out)?;
    println!(
        "wrote {} true and {} auxiliary rollouts to {}",
        tr.len(),
        ar.len(),
        out.display()
    );
    Ok(())
}

/// Sample variances of the true rollouts: inputs, one-step residuals, initial states.
fn empirical_noise(sets: &RolloutSets, est: &Estimate) -> Result<(f64, f64, f64)> {
    let (x, z, _) = observation_matrices(&sets.true_rollouts, &[])?;
    let resid = &x - &est.theta.matmul(&z)?;
    let n = x.rows();
    let mean_sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>() / v.len().max(1) as f64;
    let inputs: Vec<f64> = (0..z.cols()).flat_map(|j| z.col(j).split_off(n)).collect();
    let x0: Vec<f64> = sets.true_rollouts.iter().flat_map(|r| r.state(0).to_vec()).collect();
    Ok((mean_sq(&inputs), mean_sq(resid.as_slice()), mean_sq(&x0)))
}

fn estimate(
    rollouts: &[PathBuf],
    schedule: WeightSchedule,
    ridge: bool,
    reference: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let sets = load_sets(rollouts)?;
    let options = WlsOptions { ridge_fallback: ridge };
    let est = wls_from_rollouts(&sets.true_rollouts, &sets.aux_rollouts, &schedule, &options)?;
    let horizon = sets
        .true_rollouts
        .first()
        .ok_or_else(|| Error::Config("no true rollouts in input".into()))?
        .horizon();
    let metadata = EstimateMetadata {
        resolved_weights: schedule.per_step(horizon, sets.true_rollouts.len()),
        weights: schedule,
        gram_min_eig: est.gram_min_eig,
        true_columns: sets.true_rollouts.len() * horizon,
        aux_columns: sets.aux_rollouts.len() * horizon,
        ridge_applied: est.ridge_applied,
    };
    let mut noise = empirical_noise(&sets, &est)?;
    if noise.0 <= 0.0 {
        noise.0 = 1.0;
    }
    let text = io::estimate_to_toml(&est, noise, horizon, metadata.clone())?;
    std::fs::write(out, text).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;

    println!("weights        {}", metadata.weights);
    println!(
        "columns        {} true + {} auxiliary",
        metadata.true_columns, metadata.aux_columns
    );
    println!("gram_min_eig   {:e}", est.gram_min_eig);
    if est.ridge_applied {
        println!("warning: Gram matrix was singular; ridge applied");
    }
    if let Some(path) = reference {
        let m = error_metrics(&est, &io::load_model(path)?.theta_at(0))?;
        println!("err_theta      {:.6e}", m.err_theta);
        println!("err_a          {:.6e}", m.err_a);
        println!("err_b          {:.6e}", m.err_b);
    }
    println!("wrote estimate to {}", out.display());
    Ok(())
}

fn bound(cli: &Cli, config: &Path) -> Result<()> {
    let cfg: BoundConfig = read_toml(config)?;
    let delta = cli.delta.or(cfg.delta).unwrap_or(DEFAULT_DELTA);
    let true_model = io::load_model(beside(config, &cfg.true_model))?;
    let aux_model = io::load_model(beside(config, &cfg.aux_model))?;
    let inputs = BoundInputs::from_models(
        &true_model,
        &aux_model,
        cfg.true_count,
        cfg.aux_count,
        delta,
        cfg.weights,
    )?;
    let r = theorem1_bound(&inputs)?;
    let verdict = aux_benefit_condition(&inputs).ok();

    println!(
        "Bound on max(|A_hat - A|, |B_hat - B|) with probability >= {:.4}",
        r.confidence
    );
    println!(
        "  N_r = {}, N_p = {}, weights {}",
        inputs.true_count, inputs.aux_count, inputs.weights
    );
    println!("  noise term  {:.6e}", r.noise_term);
    println!("  bias term   {:.6e}", r.bias_term);
    println!("  total       {:.6e}", r.total);
    println!(
        "  thresholds  N_0 = {:.4}, N_1 = {:.4}",
        r.thresholds.n0, r.thresholds.n1
    );
    if !r.thresholds_met {
        println!("  warning: rollout counts are below the thresholds; the bound is not guaranteed");
    }
    match verdict {
        Some(v) if v.holds => println!("  auxiliary data can tighten the bound ({:.4e} > {:.4e})", v.lhs, v.rhs),
        Some(v) => println!(
            "  auxiliary data cannot tighten the bound ({:.4e} <= {:.4e})",
            v.lhs, v.rhs
        ),
        None => println!("  benefit condition not applicable (needs constant weights and model difference)"),
    }
    println!();
    println!("noise_term={:e}", r.noise_term);
    println!("bias_term={:e}", r.bias_term);
    println!("total={:e}", r.total);
    println!("confidence={}", r.confidence);
    println!("n0={:e}", r.thresholds.n0);
    println!("n1={:e}", r.thresholds.n1);
    println!("thresholds_met={}", r.thresholds_met);
    match verdict {
        Some(v) => {
            println!("benefit_condition={}", v.holds);
            println!("benefit_lhs={:e}", v.lhs);
            println!("benefit_rhs={:e}", v.rhs);
        }
        None => println!("benefit_condition=na"),
    }
    Ok(())
}

fn experiment(cli: &Cli, scenario: u8, config: Option<&Path>, out: &Path) -> Result<()> {
    let scenario = Scenario::from_number(scenario)?;
    let cfg: ExperimentConfig = match config {
        Some(p) => read_toml(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let mut spec = ScenarioSpec::paper(scenario, seed);
    let base = config.unwrap_or(Path::new(""));
    match (&cfg.true_model, &cfg.aux_model) {
        (Some(t), Some(a)) => {
            spec.true_model = io::load_model(beside(base, t))?;
            spec.aux_model = io::load_model(beside(base, a))?;
        }
        (None, None) => {}
        _ => return Err(Error::Config("give both true_model and aux_model or neither".into())),
    }
    if let Some(s) = cfg.sweep {
        spec.sweep_points = s;
    }
    if let Some(f) = cfg.fixed {
        spec.fixed = f;
    }
    if let Some(r) = cfg.repetitions {
        spec.repetitions = r;
    }
    if let Some(s) = cfg.schedules {
        spec.schedules = s;
    }
    spec.bound_delta = cli.delta.or(cfg.bound_delta);

    let result = run_scenario(&spec)?;
    emit_csv(&result, out)?;
    let failed: usize = result.rows.iter().map(|r| r.failed).sum();
    println!(
        "scenario {} with seed {seed}: {} rows written to {}",
        scenario.number(),
        result.rows.len(),
        out.display()
    );
    if failed > 0 {
        println!("warning: {failed} fits had a singular Gram matrix and were left out of the means");
    }
    Ok(())
}

fn cv_select(cli: &Cli, rollouts: &[PathBuf], candidates: &[f64], folds: usize) -> Result<()> {
    let sets = load_sets(rollouts)?;
    let sel = select_weight_cv(
        &sets.true_rollouts,
        &sets.aux_rollouts,
        candidates,
        folds,
        cli.seed.unwrap_or(0),
    )?;
    for (q, score) in &sel.scores {
        println!("q={q:<12} score={score:.6e}");
    }
    println!("chosen={}", sel.chosen);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(d) = cli.delta {
        if !(d > 0.0 && d < 0.25) {
            return Err(Error::Config(format!("--delta must lie in (0, 0.25), got {d}")));
        }
    }
    match &cli.command {
        Command::Simulate {
            model,
            count,
            aux_model,
            aux_count,
            out,
        } => simulate(cli, model, *count, aux_model.as_deref().map(|p| (p, *aux_count)), out),
        Command::Estimate {
            rollouts,
            weights,
            ridge,
            reference,
            out,
        } => estimate(rollouts, weights.schedule(), *ridge, reference.as_deref(), out),
        Command::Bound { config } => bound(cli, config),
        Command::Experiment { scenario, config, out } => experiment(cli, *scenario, config.as_deref(), out),
        Command::CvSelect {
            rollouts,
            candidates,
            folds,
        } => cv_select(cli, rollouts, candidates, *folds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::SingularGram { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
