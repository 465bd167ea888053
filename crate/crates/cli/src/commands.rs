use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gaussvi::diagnostics::{
    compare_variance, matched_states, run_check_suite, CheckLevel, CheckSuiteReport, Fault,
    VarianceCase,
};
use gaussvi::{
    random_coefficients, run as run_cell, synth_logistic, CsvSchema, GaussianVariational,
    Parametrization, QuadraticModel, RunConfig, RunRecord, Termination,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::spec::LoadedSpec;
use crate::{At, CheckArgs, DatagenArgs, GateFailure, RunArgs, VarianceArgs};

fn file_stem(cfg: &RunConfig) -> String {
    format!(
        "{}-order{}-{}",
        cfg.algorithm,
        cfg.order.number(),
        cfg.stepper
    )
}

/// Rows at every `thin`-th iteration, every window boundary and the last iteration.
pub fn write_trajectory(path: &Path, record: &RunRecord, thin: usize) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "iteration".to_string(),
        "elbo".to_string(),
        format!("elbo_avg{}", record.window),
    ])?;
    for t in 1..=record.iterations {
        if t % thin != 0 && t % record.window != 0 && t != record.iterations {
            continue;
        }
        let avg = record
            .averaged_at(t)
            .map(|v| v.to_string())
            .unwrap_or_default();
        w.write_record([t.to_string(), record.elbo_trace[t - 1].to_string(), avg])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    label: String,
    config: &'a RunConfig,
    dataset: String,
    n: usize,
    d: usize,
    sigma0_sq: f64,
    iterations: usize,
    final_averaged_elbo: f64,
    termination: Termination,
    rejected_steps: usize,
    failure: &'a Option<String>,
    wall_time_s: f64,
    trajectory: String,
    final_state: &'a GaussianVariational,
}

pub fn run(args: RunArgs) -> anyhow::Result<()> {
    let mut loaded = LoadedSpec::read(&args.spec)?;
    if let Some(seed) = args.seed {
        loaded.spec.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| loaded.output_dir());
    let data = loaded.dataset()?;
    let model = loaded.model(&data)?;
    let cells = loaded.grid()?;
    let thin = loaded.spec.trace_thin;

    fs::create_dir_all(out.join("trajectories"))
        .with_context(|| format!("creating {}", out.display()))?;
    fs::create_dir_all(out.join("runs"))?;
    fs::copy(&args.spec, out.join("spec.toml")).context("copying the spec file")?;

    let records: Vec<RunRecord> = cells
        .par_iter()
        .map(|cfg| -> anyhow::Result<RunRecord> {
            let state0 = GaussianVariational::standard(data.d(), cfg.algorithm.parametrization());
            let record =
                run_cell(&model, &state0, cfg).with_context(|| format!("cell {}", cfg.label()))?;
            let stem = file_stem(cfg);
            let trajectory = PathBuf::from("trajectories").join(format!("{stem}.csv"));
            write_trajectory(&out.join(&trajectory), &record, thin)?;
            let summary = RunSummary {
                label: cfg.label(),
                config: cfg,
                dataset: data.provenance.clone(),
                n: data.n(),
                d: data.d(),
                sigma0_sq: model.sigma0_sq(),
                iterations: record.iterations,
                final_averaged_elbo: record.final_elbo,
                termination: record.termination,
                rejected_steps: record.rejected_steps,
                failure: &record.failure,
                wall_time_s: record.wall_time_s,
                trajectory: trajectory.display().to_string(),
                final_state: &record.final_state,
            };
            let json = serde_json::to_string_pretty(&summary)?;
            fs::write(out.join("runs").join(format!("{stem}.json")), json + "\n")?;
            Ok(record)
        })
        .collect::<anyhow::Result<_>>()?;

    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record([
        "algorithm",
        "order",
        "stepper",
        "iterations_thousands",
        "final_averaged_elbo",
        "wall_time_s",
        "termination",
    ])?;
    println!(
        "{:<10} {:>5} {:>8} {:>10} {:>14} {:>9}  termination",
        "algorithm", "order", "stepper", "iters (k)", "final elbo", "time (s)"
    );
    for (cfg, r) in cells.iter().zip(&records) {
        let thousands = r.iterations as f64 / 1000.0;
        w.write_record([
            cfg.algorithm.to_string(),
            cfg.order.number().to_string(),
            cfg.stepper.to_string(),
            thousands.to_string(),
            r.final_elbo.to_string(),
            format!("{:.3}", r.wall_time_s),
            r.termination.to_string(),
        ])?;
        println!(
            "{:<10} {:>5} {:>8} {:>10} {:>14.3} {:>9.2}  {}",
            cfg.algorithm,
            cfg.order.number(),
            cfg.stepper,
            thousands,
            r.final_elbo,
            r.wall_time_s,
            r.termination
        );
    }
    w.flush()?;

    let failed: Vec<String> = cells
        .iter()
        .zip(&records)
        .filter(|(_, r)| r.termination == Termination::FactorFailure)
        .map(|(c, _)| c.label())
        .collect();
    if !failed.is_empty() {
        let msg = format!("FACTOR_FAILURE in {}", failed.join(", "));
        if args.keep_going {
            eprintln!("warning: {msg}");
        } else {
            return Err(GateFailure(msg).into());
        }
    }
    Ok(())
}

fn print_check(report: &CheckSuiteReport) {
    for r in &report.identities {
        println!(
            "{:<13} n={:<8} max gap {:.3e} = {:.2} se",
            r.identity.name(),
            r.n_samples,
            r.max_abs_gap,
            r.max_gap_in_se
        );
    }
    for case in &report.variance {
        for r in &case.reports {
            println!(
                "{:<13} {:<10} {:<8} max entry variance {:.3e}",
                format!("{:?}", r.estimator),
                format!("{:?}", case.parametrization).to_lowercase(),
                case.at,
                r.max_entry_variance
            );
        }
    }
}

pub fn check(args: CheckArgs) -> anyhow::Result<()> {
    let level = if args.full {
        CheckLevel::Full
    } else {
        CheckLevel::Quick
    };
    let fault = Fault {
        flip_lhs_sign: args.inject_sign_flip,
    };
    let report = run_check_suite(level, args.seed, fault)?;
    print_check(&report);
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if report.passed() {
        println!("all gates passed");
        return Ok(());
    }
    for failing in report
        .identities
        .iter()
        .filter(|r| !r.passes(gaussvi::diagnostics::IDENTITY_GATE_SE))
    {
        eprintln!("{}", serde_json::to_string(failing)?);
    }
    Err(GateFailure(report.failures.join("; ")).into())
}

#[derive(Serialize)]
struct VarianceOutput {
    target: String,
    at: String,
    n_samples: usize,
    seed: u64,
    cases: Vec<VarianceCase>,
}

pub fn variance(args: VarianceArgs) -> anyhow::Result<()> {
    let mut loaded = LoadedSpec::read(&args.spec)?;
    if let Some(seed) = args.seed {
        loaded.spec.seed = seed;
    }
    let seed = loaded.spec.seed;
    let (target, quad) = match &loaded.spec.quadratic {
        Some(q) => ("quadratic".to_string(), q.build()?),
        None => {
            let data = loaded.dataset()?;
            let model = loaded.model(&data)?;
            let mode = model.mode(100, 1e-10)?;
            (
                format!(
                    "Laplace expansion of the logistic model ({})",
                    data.provenance
                ),
                QuadraticModel::laplace(&model, &mode)?,
            )
        }
    };
    let at = match args.at {
        At::Optimum => "optimum",
        At::Offset => "offset",
    };
    let mut cases = Vec::new();
    for p in [Parametrization::Covariance, Parametrization::Precision] {
        let (optimum, offset) = matched_states(&quad, p)?;
        let state = if args.at == At::Optimum {
            optimum
        } else {
            offset
        };
        let reports = compare_variance(&state, &quad, args.n_samples, seed)?;
        for r in &reports {
            println!(
                "{:?} {at}: max entry variance {:.3e}",
                r.estimator, r.max_entry_variance
            );
        }
        cases.push(VarianceCase {
            at: at.to_string(),
            parametrization: p,
            reports,
        });
    }
    let out = args.out.clone().unwrap_or_else(|| loaded.output_dir());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let doc = VarianceOutput {
        target,
        at: at.to_string(),
        n_samples: args.n_samples,
        seed,
        cases,
    };
    let path = out.join(format!("variance-{at}.json"));
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn datagen(args: DatagenArgs) -> anyhow::Result<()> {
    if args.n == 0 || args.d == 0 || (args.intercept && args.d < 2) {
        return Err(gaussvi::Error::Config(
            "datagen needs n >= 1 and at least one non-intercept column".into(),
        )
        .into());
    }
    let theta = random_coefficients(args.d, args.theta_scale, args.seed);
    let data = synth_logistic(args.n, &theta, args.intercept, args.seed);
    let mut schema = CsvSchema::new("y", "1");
    schema.intercept = args.intercept;
    data.write_csv(&args.out, &schema)?;
    let theta: Vec<f64> = theta.iter().copied().collect();
    eprintln!("wrote {} rows to {}", data.n(), args.out.display());
    println!(
        "{}",
        serde_json::json!({ "theta_true": theta, "intercept": args.intercept })
    );
    Ok(())
}
