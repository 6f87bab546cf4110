//! Subcommand drivers. Each returns the rendered output; `lib::run` writes it.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{json, Value};
use threshold_iv::bootstrap::{
    bootstrap_2sls, bootstrap_ch, bootstrap_first_stage, bootstrap_gmm_null, BootstrapConfig, BootstrapResult,
    FirstStageBootstrap, Multiplier,
};
use threshold_iv::estimators::fit_first_stage;
use threshold_iv::montecarlo::{
    generate, rejection_frequencies, run_table, table_spec, DgpConfig, ErrorCase, ExperimentConfig, RejectionTable,
};
use threshold_iv::statistics::{tsls_sequences, wg_sequence};
use threshold_iv::{
    build_grid, Dataset, FirstStageMode, FirstStageSpec, ResidualSource, SequenceResult, ThresholdGrid, VarianceMode,
};

use crate::args::{
    BootArgs, DesignArgs, FirstStageArg, FirstStageArgs, Format, GenerateArgs, GridArgs, SequenceArgs, SimulateArgs,
    TestArg, TestArgs,
};
use crate::error::{CliError, CliResult, Context};
use crate::input::load_dataset;

/// JSON number, with non-finite values spelled as strings.
pub fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("NaN")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn echo<T: Serialize>(args: &T) -> Value {
    serde_json::to_value(args).expect("arguments serialize")
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

fn check_trim(name: &str, trim: f64) -> CliResult<()> {
    if trim > 0.0 && trim < 0.5 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must lie in (0, 0.5), got {trim}")))
    }
}

fn check_boot(b: &BootArgs) -> CliResult<()> {
    if b.boot == 0 {
        return Err(CliError::Config("--boot must be at least 1".into()));
    }
    if !(b.alpha > 0.0 && b.alpha <= 1.0) {
        return Err(CliError::Config(format!("--alpha must lie in (0, 1], got {}", b.alpha)));
    }
    Ok(())
}

fn boot_config(b: &BootArgs) -> BootstrapConfig {
    BootstrapConfig::new(b.boot, b.alpha, b.multiplier.into(), b.seed).with_mode(b.variance.into())
}

fn grids(ds: &Dataset, g: &GridArgs) -> CliResult<(ThresholdGrid, ThresholdGrid)> {
    check_trim("--trim", g.trim)?;
    let fs_trim = g.fs_trim.unwrap_or(g.trim);
    check_trim("--fs-trim", fs_trim)?;
    let q = ds.q().as_slice();
    Ok((
        build_grid(q, g.trim).context("building the threshold grid")?,
        build_grid(q, fs_trim).context("building the first-stage grid")?,
    ))
}

fn dedup(tests: &[TestArg]) -> CliResult<Vec<TestArg>> {
    if tests.is_empty() {
        return Err(CliError::Config("--tests must name at least one test".into()));
    }
    let mut out = tests.to_vec();
    out.sort();
    out.dedup();
    Ok(out)
}

fn bootstrap_json(r: &BootstrapResult) -> Value {
    json!({
        "statistic": num(r.observed),
        "critical_value": num(r.critical_value),
        "p_value": num(r.p_value),
        "reject": r.reject,
        "b": r.b,
        "alpha": r.alpha,
        "seed": r.seed,
        "failures": r.failures,
    })
}

/// Resolved first stage, with the pre-test outcome when one was run.
struct FirstStageChoice {
    mode: FirstStageMode,
    pretest: Option<FirstStageBootstrap>,
}

impl FirstStageChoice {
    fn resolve(arg: FirstStageArg, ds: &Dataset, fs_grid: &ThresholdGrid, boot: &BootArgs) -> CliResult<Self> {
        Ok(match arg {
            FirstStageArg::Linear => FirstStageChoice { mode: FirstStageMode::Linear, pretest: None },
            FirstStageArg::Threshold => FirstStageChoice { mode: FirstStageMode::Threshold, pretest: None },
            FirstStageArg::Pretest => {
                let fb =
                    bootstrap_first_stage(ds, fs_grid, &boot_config(boot)).context("first-stage linearity pre-test")?;
                // LR decides; the Wald pre-test is reported alongside.
                let mode = if fb.lr.reject { FirstStageMode::Threshold } else { FirstStageMode::Linear };
                FirstStageChoice { mode, pretest: Some(fb) }
            }
        })
    }

    fn json(&self, fs: &FirstStageSpec) -> Value {
        let mut v = json!({
            "mode": match self.mode { FirstStageMode::Linear => "linear", FirstStageMode::Threshold => "threshold" },
            "rho_hat": fs.rho().map(num),
        });
        if let Some(p) = &self.pretest {
            v["pretest"] = json!({
                "decided_by": "lr",
                "rho_hat": num(p.rho),
                "lr": bootstrap_json(&p.lr),
                "wald": bootstrap_json(&p.wald),
            });
        }
        v
    }
}

fn gmm_source(t: TestArg) -> ResidualSource {
    match t {
        TestArg::GmmBr => ResidualSource::FullSampleNull,
        _ => ResidualSource::PerGamma,
    }
}

/// Statistic sequences of every requested test, in `tests` order.
fn sequences(
    ds: &Dataset,
    grid: &ThresholdGrid,
    fs: &FirstStageSpec,
    tests: &[TestArg],
    mode: VarianceMode,
) -> CliResult<Vec<SequenceResult>> {
    let mut tsls: Option<(SequenceResult, SequenceResult)> = None;
    let mut out = Vec::with_capacity(tests.len());
    for &t in tests {
        let s = if t.is_tsls() {
            if tsls.is_none() {
                tsls = Some(tsls_sequences(ds, grid, fs, mode).context("2SLS statistic sequences")?);
            }
            let (lr, w) = tsls.as_ref().expect("just computed");
            if t == TestArg::Lr {
                lr.clone()
            } else {
                w.clone()
            }
        } else {
            wg_sequence(ds, grid, gmm_source(t), mode).context("GMM statistic sequence")?
        };
        out.push(s);
    }
    Ok(out)
}

fn skipped_json(s: &SequenceResult) -> Value {
    Value::Array(s.skipped.iter().map(|c| json!({ "gamma": num(c.gamma), "reason": c.reason })).collect())
}

pub fn test(a: &TestArgs) -> CliResult<String> {
    check_boot(&a.boot)?;
    let tests = dedup(&a.tests)?;
    let ds = load_dataset(&a.data)?;
    let (grid, fs_grid) = grids(&ds, &a.grid)?;
    let choice = FirstStageChoice::resolve(a.first_stage, &ds, &fs_grid, &a.boot)?;
    let fs = fit_first_stage(&ds, choice.mode, &fs_grid).context("fitting the first stage")?;
    let mode: VarianceMode = a.boot.variance.into();
    let cfg = boot_config(&a.boot);
    let seqs = sequences(&ds, &grid, &fs, &tests, mode)?;

    let mut tsls = None;
    let mut rows = Vec::new();
    for (&t, seq) in tests.iter().zip(&seqs) {
        let r = match t {
            TestArg::GmmCh => bootstrap_ch(&ds, &grid, &cfg).context("CH bootstrap")?,
            TestArg::GmmMix | TestArg::GmmBr => {
                bootstrap_gmm_null(&ds, &grid, &cfg, gmm_source(t)).context("null-residual GMM bootstrap")?
            }
            TestArg::Lr | TestArg::Wald => {
                if tsls.is_none() {
                    tsls = Some(bootstrap_2sls(&ds, &grid, &fs, &cfg).context("2SLS bootstrap")?);
                }
                let b = tsls.as_ref().expect("just computed");
                if t == TestArg::Lr {
                    b.lr.clone()
                } else {
                    b.wald.clone()
                }
            }
        };
        rows.push((t.kind(choice.mode).label(), r, seq));
    }

    match a.output.format.unwrap_or(Format::Json) {
        Format::Json => {
            let tests: Vec<Value> = rows
                .iter()
                .map(|(label, r, seq)| {
                    let mut v = bootstrap_json(r);
                    v["test"] = json!(label);
                    v["gamma_hat"] = num(seq.argmax_gamma);
                    v["skipped"] = skipped_json(seq);
                    v
                })
                .collect();
            Ok(pretty(&json!({
                "command": "test",
                "config": echo(a),
                "t": ds.t(),
                "grid_size": grid.len(),
                "first_stage_grid_size": fs_grid.len(),
                "first_stage": choice.json(&fs),
                "tests": tests,
            })))
        }
        Format::Csv => {
            let mut s =
                String::from("test,statistic,critical_value,p_value,reject,gamma_hat,rho_hat,failures,skipped\n");
            let rho = fs.rho().map(fmt).unwrap_or_default();
            for (label, r, seq) in &rows {
                let _ = writeln!(
                    s,
                    "{label},{},{},{},{},{},{rho},{},{}",
                    fmt(r.observed),
                    fmt(r.critical_value),
                    fmt(r.p_value),
                    r.reject,
                    fmt(seq.argmax_gamma),
                    r.failures,
                    seq.skipped.len()
                );
            }
            Ok(s)
        }
    }
}

pub fn first_stage(a: &FirstStageArgs) -> CliResult<String> {
    check_boot(&a.boot)?;
    if a.trims.is_empty() {
        return Err(CliError::Config("--trims must list at least one value".into()));
    }
    for &tr in &a.trims {
        check_trim("--trims", tr)?;
    }
    let ds = load_dataset(&a.data)?;
    let cfg = boot_config(&a.boot);
    let mut rows = Vec::new();
    for &trim in &a.trims {
        let grid = build_grid(ds.q().as_slice(), trim).context("building the first-stage grid")?;
        let fb = bootstrap_first_stage(&ds, &grid, &cfg).context("first-stage linearity tests")?;
        rows.push((trim, grid.len(), fb));
    }
    let decision = |fb: &FirstStageBootstrap| if fb.lr.reject { "threshold" } else { "linear" };
    match a.output.format.unwrap_or(Format::Json) {
        Format::Json => {
            let rows: Vec<Value> = rows
                .iter()
                .map(|(trim, n, fb)| {
                    json!({
                        "trim": trim,
                        "grid_size": n,
                        "rho_hat": num(fb.rho),
                        "lr": bootstrap_json(&fb.lr),
                        "wald": bootstrap_json(&fb.wald),
                        "decision": decision(fb),
                    })
                })
                .collect();
            Ok(pretty(&json!({ "command": "first-stage", "config": echo(a), "t": ds.t(), "rows": rows })))
        }
        Format::Csv => {
            let mut s = String::from(
                "trim,grid_size,rho_hat,lr,lr_cv,lr_p,lr_reject,wald,wald_cv,wald_p,wald_reject,decision\n",
            );
            for (trim, n, fb) in &rows {
                let _ = writeln!(
                    s,
                    "{trim},{n},{},{},{},{},{},{},{},{},{},{}",
                    fmt(fb.rho),
                    fmt(fb.lr.observed),
                    fmt(fb.lr.critical_value),
                    fmt(fb.lr.p_value),
                    fb.lr.reject,
                    fmt(fb.wald.observed),
                    fmt(fb.wald.critical_value),
                    fmt(fb.wald.p_value),
                    fb.wald.reject,
                    decision(fb)
                );
            }
            Ok(s)
        }
    }
}

pub fn sequence(a: &SequenceArgs) -> CliResult<String> {
    let tests = dedup(&a.tests)?;
    if a.first_stage == FirstStageArg::Pretest {
        check_boot(&a.boot)?;
    }
    let ds = load_dataset(&a.data)?;
    let (grid, fs_grid) = grids(&ds, &a.grid)?;
    let choice = FirstStageChoice::resolve(a.first_stage, &ds, &fs_grid, &a.boot)?;
    let fs = fit_first_stage(&ds, choice.mode, &fs_grid).context("fitting the first stage")?;
    let seqs = sequences(&ds, &grid, &fs, &tests, a.boot.variance.into())?;
    let labels: Vec<String> = tests.iter().map(|t| t.kind(choice.mode).label()).collect();

    match a.output.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut s = String::from("gamma,test,value\n");
            for (label, seq) in labels.iter().zip(&seqs) {
                for (g, v) in seq.gammas.iter().zip(&seq.values) {
                    let _ = writeln!(s, "{},{label},{}", fmt(*g), fmt(*v));
                }
                for c in &seq.skipped {
                    eprintln!("warning: {label}: skipped gamma {}: {}", c.gamma, c.reason);
                }
            }
            Ok(s)
        }
        Format::Json => {
            let tests: Vec<Value> = labels
                .iter()
                .zip(&seqs)
                .map(|(label, seq)| {
                    json!({
                        "test": label,
                        "gammas": seq.gammas.iter().copied().map(num).collect::<Vec<_>>(),
                        "values": seq.values.iter().copied().map(num).collect::<Vec<_>>(),
                        "sup": num(seq.sup),
                        "gamma_hat": num(seq.argmax_gamma),
                        "skipped": skipped_json(seq),
                    })
                })
                .collect();
            Ok(pretty(&json!({
                "command": "sequence",
                "config": echo(a),
                "t": ds.t(),
                "grid_size": grid.len(),
                "first_stage": choice.json(&fs),
                "tests": tests,
            })))
        }
    }
}

fn design(d: &DesignArgs) -> CliResult<DgpConfig> {
    let case = ErrorCase::from_str(&d.case).map_err(|e| CliError::Config(e.to_string()))?;
    if !(d.delta_x.is_finite() && d.delta_pi.is_finite()) {
        return Err(CliError::Config("break sizes must be finite".into()));
    }
    Ok(DgpConfig::new(d.t, case).with_delta_x(d.delta_x).with_delta_pi(d.delta_pi))
}

pub fn simulate(a: &SimulateArgs) -> CliResult<String> {
    let (n_sim, b) = if a.quick { (300, 300) } else { (a.n_sim, a.boot) };
    if n_sim == 0 || b == 0 {
        return Err(CliError::Config("--n-sim and --boot must be at least 1".into()));
    }
    if !(a.alpha > 0.0 && a.alpha <= 1.0) {
        return Err(CliError::Config(format!("--alpha must lie in (0, 1], got {}", a.alpha)));
    }
    check_trim("--trim", a.trim)?;
    let table = match a.table {
        Some(k) => {
            let spec: Vec<ExperimentConfig> = table_spec(k, n_sim, b, a.seed)
                .map_err(|e| CliError::Config(e.to_string()))?
                .into_iter()
                .map(|c| ExperimentConfig { alpha: a.alpha, trim: a.trim, fs_trim: a.trim, ..c })
                .collect();
            run_table(&spec).context("running the table")?
        }
        None => {
            let dgp = design(&a.design)?;
            let mult = match a.multiplier {
                Some(m) => m.into(),
                None if dgp.error_case == ErrorCase::A => Multiplier::IidGaussian,
                None => Multiplier::StdNormal,
            };
            let fs = dgp.matched_first_stage();
            let tests: Vec<_> = dedup(&a.tests)?.into_iter().map(|t| t.kind(fs)).collect();
            let mut cfg = ExperimentConfig::new(dgp, tests[0], mult, a.seed).with_sizes(n_sim, b);
            cfg.alpha = a.alpha;
            cfg.trim = a.trim;
            cfg.fs_trim = a.trim;
            RejectionTable { rows: rejection_frequencies(&cfg, &tests).context("running the design")? }
        }
    };
    eprint!("{}", table.render());
    match a.output.format.unwrap_or(Format::Csv) {
        Format::Csv => Ok(table.to_csv()),
        Format::Json => {
            let rows: Vec<Value> = table
                .rows
                .iter()
                .map(|r| {
                    json!({
                        "case": r.case.label(),
                        "t": r.t,
                        "delta_x": r.delta_x,
                        "delta_pi": r.delta_pi,
                        "test": r.test.label(),
                        "rejection": r.rejection,
                        "mc_se": r.mc_se,
                        "n_sim": r.n_sim,
                        "failures": r.failures,
                    })
                })
                .collect();
            Ok(pretty(&json!({ "command": "simulate", "config": echo(a), "n_sim": n_sim, "b": b, "rows": rows })))
        }
    }
}

pub fn generate_csv(a: &GenerateArgs) -> CliResult<String> {
    let dgp = design(&a.design)?;
    let ds = generate(&dgp, a.seed).context("simulating the dataset")?;
    let mut s = String::from("y,x,z,q\n");
    for t in 0..ds.t() {
        let _ = writeln!(s, "{},{},{},{}", fmt(ds.y()[t]), fmt(ds.x()[(t, 0)]), fmt(ds.z()[(t, 1)]), fmt(ds.q()[t]));
    }
    Ok(s)
}
