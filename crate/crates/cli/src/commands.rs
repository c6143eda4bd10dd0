use std::fs;
use std::path::{Path, PathBuf};

use ebsde_core::ergodic::{
    ebsde_residual, lambda_characterization, lambda_uniqueness, verify_optimality, EvalParams, Feedback, Variant,
};
use ebsde_core::export::{csv_string, fmt, read_rows};
use ebsde_core::grid::{lambda_identities, scalar_coefficients, solve_ergodic_hjb_1d, Grid1D};
use ebsde_core::vanishing::{assemble, schedule_csv};
use ebsde_core::{
    validate_hamiltonian, validate_model, DiscountScheme, DiscountSolution, EbsdeSolution, Error, Experiment,
    ExperimentConfig, Result, StateVec,
};

use crate::lock::DirLock;
use crate::{Common, Outcome};

const VALIDATION_PROBES: usize = 64;

fn load(args: &Common) -> Result<Experiment> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = Some(seed);
    }
    cfg.build()
}

fn out_dir(args: &Common, exp: &Experiment) -> PathBuf {
    args.out.clone().unwrap_or_else(|| exp.config.outputs.dir.clone())
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// `lambda` rounded to nine significant digits for display.
pub fn display_lambda(lambda: f64) -> String {
    if lambda == 0.0 || !lambda.is_finite() {
        return fmt(lambda);
    }
    let rounded: f64 = format!("{lambda:.8e}").parse().unwrap_or(lambda);
    fmt(rounded)
}

pub fn validate(args: &Common) -> Result<Outcome> {
    let exp = load(args)?;
    let model_report = validate_model(&exp.model, VALIDATION_PROBES, exp.run.init.radius, exp.run.seed)?;
    println!("model: {}", exp.model.nonlinear_drift.name);
    println!("{model_report}");
    let ham_report = validate_hamiltonian(&exp.hamiltonian, VALIDATION_PROBES, exp.run.seed)?;
    println!("hamiltonian: {}", exp.hamiltonian.label);
    println!("{ham_report}");
    if let Some(rep) = &exp.heat_report {
        println!("heat: {}", serde_json::to_string(rep).unwrap_or_default());
    }
    let passed = model_report.passed && ham_report.passed;
    println!("validation {}", if passed { "passed" } else { "FAILED" });
    Ok(if passed { Outcome::Pass } else { Outcome::Fail })
}

fn vbar_csv(sol: &EbsdeSolution, points: &[StateVec]) -> String {
    let dim = points.first().map_or(0, |p| p.as_slice().len());
    let m = sol.zetabar.outputs();
    let mut cols: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    cols.push("vbar".into());
    cols.extend((0..m).map(|j| format!("zeta{j}")));
    cols.push("extrapolated".into());
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    csv_string(
        "solve",
        &col_refs,
        points.iter().map(|p| {
            let mut row: Vec<String> = p.as_slice().iter().map(|v| fmt(*v)).collect();
            row.push(fmt(sol.vbar_at(p)));
            row.extend(sol.zetabar_at(p).iter().map(|v| fmt(*v)));
            row.push(sol.vbar.extrapolated(p.as_slice()).to_string());
            row
        }),
    )
}

fn diagnostics_csv(sols: &[DiscountSolution]) -> String {
    csv_string(
        "solve",
        &["alpha", "step", "residual", "condition_number"],
        sols.iter().flat_map(|s| {
            s.diagnostics.steps.iter().map(move |st| {
                vec![fmt(s.alpha), st.step.to_string(), fmt(st.residual), fmt(st.condition_number)]
            })
        }),
    )
}

pub fn solve(args: &Common) -> Result<Outcome> {
    let exp = load(args)?;
    let dir = out_dir(args, &exp);
    let _lock = DirLock::acquire(&dir)?;
    let report = validate_model(&exp.model, VALIDATION_PROBES, exp.run.init.radius, exp.run.seed)?;
    if !report.passed {
        eprintln!("{report}");
        eprintln!("forward model failed validation; not solving");
        return Ok(Outcome::Fail);
    }
    let query = exp.query_points()?;
    let scheme = DiscountScheme::build(&exp.model, &exp.hamiltonian, &exp.run, &query)?;
    let sols = exp
        .run
        .alpha_schedule
        .iter()
        .map(|&a| scheme.solve(a))
        .collect::<Result<Vec<_>>>()?;
    write(&dir, "diagnostics.csv", &diagnostics_csv(&sols))?;
    let sol = match assemble(&exp.model, &exp.hamiltonian, &exp.run, &query, sols) {
        Ok(s) => s,
        Err(Error::ConvergenceFailure { reason, record }) => {
            let path = write(&dir, "schedule_record.csv", &schedule_csv(&record))?;
            eprintln!("schedule record written to {}", path.display());
            return Err(Error::ConvergenceFailure { reason, record });
        }
        Err(e) => return Err(e),
    };
    write(&dir, "schedule_record.csv", &sol.schedule_csv())?;
    write(&dir, "vbar.csv", &vbar_csv(&sol, &query))?;
    write(
        &dir,
        "lambda.csv",
        &csv_string("solve", &["lambda", "lambda_stderr"], [vec![fmt(sol.lambda), fmt(sol.lambda_stderr)]]),
    )?;
    let json = serde_json::to_string(&sol).map_err(|e| Error::Numerical(format!("cannot serialize solution: {e}")))?;
    write(&dir, "solution.json", &json)?;
    if let Some(rep) = &exp.heat_report {
        write(&dir, "heat_report.json", &serde_json::to_string_pretty(rep).unwrap_or_default())?;
    }
    for e in &sol.schedule_record {
        println!("alpha = {:<8} alpha*v(0) = {}", e.alpha, fmt(e.lambda_alpha));
    }
    println!("artifacts written to {}", dir.display());
    println!("lambda = {}", display_lambda(sol.lambda));
    Ok(Outcome::Pass)
}

fn read_solution(dir: &Path) -> Result<EbsdeSolution> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("solution directory {} does not exist", dir.display())));
    }
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))
    };
    let mut sol: EbsdeSolution = serde_json::from_str(&read("solution.json")?)
        .map_err(|e| Error::Config(format!("solution.json is malformed: {e}")))?;
    sol.prepare()?;
    let rows = read_rows(&read("lambda.csv")?);
    let lambda: f64 = rows
        .first()
        .and_then(|r| r.first())
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config("lambda.csv has no lambda value".into()))?;
    Ok(sol.with_lambda(lambda))
}

struct Check {
    name: &'static str,
    statistic: String,
    passed: bool,
    detail: Vec<String>,
}

pub fn verify(args: &Common) -> Result<Outcome> {
    let exp = load(args)?;
    let dir = out_dir(args, &exp);
    let sol = read_solution(&dir)?;
    let _lock = DirLock::acquire(&dir)?;
    let v = &exp.config.verify;
    let seed = exp.run.seed;
    let radius = exp.run.init.radius;
    let center = &exp.run.init.center;
    let mut checks = Vec::new();

    let points: Vec<StateVec> = if v.residual_points.is_empty() {
        [0.0, 0.5, -0.5]
            .iter()
            .map(|s| {
                let mut p = center.clone();
                p[0] += s * radius;
                StateVec::new(p)
            })
            .collect::<Result<_>>()?
    } else {
        v.residual_points.iter().map(|p| StateVec::new(p.clone())).collect::<Result<_>>()?
    };
    let mut statistic: f64 = 0.0;
    let mut detail = Vec::new();
    for (k, &t) in v.residual_horizons.iter().enumerate() {
        let r = ebsde_residual(
            &exp.model,
            &exp.hamiltonian,
            &sol,
            &points,
            t,
            v.residual_paths,
            v.eval_dt,
            seed.wrapping_add(100 + k as u64),
        )?;
        for p in &r.points {
            statistic = statistic.max(p.residual.abs());
        }
        detail.extend(r.failures);
    }
    checks.push(Check {
        name: "ebsde-residual",
        statistic: format!("max |residual| = {statistic:.3e}"),
        passed: detail.is_empty(),
        detail,
    });

    let c = lambda_characterization(&exp.model, &exp.hamiltonian, &sol, v.characterization_samples, v.eval_dt, seed + 200)?;
    checks.push(Check {
        name: "lambda-characterization",
        statistic: format!("gap = {:.3e} (allowed {:.3e})", c.gap, c.allowed),
        passed: c.passed,
        detail: vec![],
    });

    if exp.hamiltonian.control_grid.len() > 1 {
        let controls: Vec<Vec<f64>> = if v.constant_controls.is_empty() {
            exp.hamiltonian.control_grid.clone()
        } else {
            v.constant_controls.clone()
        };
        let perturbations: Vec<Feedback> = controls
            .into_iter()
            .map(|u| Feedback::constant(format!("constant {u:?}"), u))
            .collect();
        let params = EvalParams {
            horizon: v.eval_horizon,
            n_paths: v.eval_paths,
            dt: v.eval_dt,
            seed: seed + 300,
        };
        let x0 = StateVec::new(center.clone())?;
        let o = verify_optimality(&exp.model, &exp.hamiltonian, &sol, &x0, &perturbations, params)?;
        checks.push(Check {
            name: "optimality",
            statistic: format!("J(optimal) - lambda = {:.3e}", o.optimal.cost.mean - o.lambda),
            passed: o.passed,
            detail: o.failures,
        });
    }

    if !v.uniqueness_seeds.is_empty() {
        let mut variants = Vec::new();
        let mut centers = vec![center.clone()];
        centers.extend(v.uniqueness_center.clone());
        for c in &centers {
            for &s in &v.uniqueness_seeds {
                variants.push(Variant {
                    seed: s,
                    init_center: c.clone(),
                    alpha_schedule: exp.run.alpha_schedule.clone(),
                });
            }
        }
        let u = lambda_uniqueness(&exp.model, &exp.hamiltonian, &exp.run, &variants, &[])?;
        checks.push(Check {
            name: "lambda-uniqueness",
            statistic: format!("spread = {:.3e} (allowed {:.3e})", u.spread, u.allowed),
            passed: u.passed,
            detail: vec![],
        });
    }

    println!("{:<26} {:<44} result", "test", "statistic");
    for c in &checks {
        println!("{:<26} {:<44} {}", c.name, c.statistic, if c.passed { "pass" } else { "FAIL" });
    }
    write(
        &dir,
        "verify.csv",
        &csv_string(
            "verify",
            &["test", "statistic", "passed"],
            checks.iter().map(|c| vec![c.name.to_string(), c.statistic.clone(), c.passed.to_string()]),
        ),
    )?;
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed).collect();
    if failed.is_empty() {
        println!("all checks passed");
        return Ok(Outcome::Pass);
    }
    for c in &failed {
        eprintln!("failed: {}", c.name);
        for d in &c.detail {
            eprintln!("  {d}");
        }
    }
    Ok(Outcome::Fail)
}

pub fn oracle(args: &Common) -> Result<Outcome> {
    let exp = load(args)?;
    let (drift, g) = scalar_coefficients(&exp.model)?;
    let grid = Grid1D::symmetric(exp.config.oracle.half_width, exp.config.oracle.nodes)?;
    let sol = solve_ergodic_hjb_1d(&grid, &drift, g, &exp.hamiltonian)?;
    let lambda = sol
        .lambda
        .ok_or_else(|| Error::Numerical("oracle returned no ergodic constant".into()))?;
    let dir = out_dir(args, &exp);
    let _lock = DirLock::acquire(&dir)?;
    let path = write(&dir, "oracle.csv", &sol.csv())?;
    match lambda_identities(&grid, &drift, g, &exp.hamiltonian, &sol) {
        Ok((psi_mean, cost_mean)) => {
            println!("mean of psi(x, 0) under the invariant law = {}", fmt(psi_mean));
            println!("mean running cost under the optimal policy = {}", fmt(cost_mean));
        }
        Err(e) => println!("lambda identities unavailable: {e}"),
    }
    println!("policy iterations = {}", sol.iterations);
    println!("grid solution written to {}", path.display());
    println!("lambda = {}", display_lambda(lambda));
    Ok(Outcome::Pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_display_is_rounded() {
        assert_eq!(display_lambda(3.0000000000000004), "3.0");
        assert_eq!(display_lambda(0.778800783071), "0.778800783");
        assert_eq!(display_lambda(-1.25e-7), "-1.25e-7");
        assert_eq!(display_lambda(0.0), "0.0");
    }
}
