use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use active_measure::checks::{run_suite, CheckScale, Suite};
use active_measure::sim::{aggregate, read_results, write_results, Experiment, PoolSource};
use active_measure::{EstimateReport, ExperimentConfig, Format, Method, MetricsRow, WeightScheme};
use active_measure_service::{read_log, replay as fold_log, simulate_log, AppState, SessionStore};

use crate::error::CliError;
use crate::{ReplayArgs, ReportArgs, ServeArgs, SimulateArgs, VerifyArgs};

fn parse_format(raw: &str) -> Result<Format, CliError> {
    raw.parse()
        .map_err(|e: active_measure::Error| CliError::Usage(e.to_string()))
}

/// Output sink: the named file, or stdout.
fn sink(out: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(
            fs::File::create(path).map_err(|e| CliError::io(path.display().to_string(), e))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn relative_to(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// Scheme names for `--schemes`; `inv(0.25)` sets gamma.
fn parse_scheme(raw: &str) -> Result<WeightScheme, CliError> {
    let raw = raw.trim();
    let parsed = match raw.strip_prefix("inv(").and_then(|r| r.strip_suffix(')')) {
        Some(g) => {
            let gamma = g
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad gamma in {raw:?}")))?;
            WeightScheme::inv(gamma)
        }
        None => WeightScheme::parse(raw, None),
    };
    parsed.map_err(|e| CliError::Usage(e.to_string()))
}

fn load_config(a: &SimulateArgs) -> Result<ExperimentConfig, CliError> {
    let path = a.config.display().to_string();
    let mut cfg = ExperimentConfig::load(&a.config).map_err(|source| CliError::Config {
        path: path.clone(),
        source,
    })?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    if let PoolSource::File(p) = &mut cfg.pool {
        relative_to(base, p);
    }
    if let Some(p) = &mut cfg.predictor.checkpoints {
        relative_to(base, p);
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| CliError::Usage(format!("--set {kv}: {e}")))?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = a.trials {
        cfg.trials = trials;
    }
    if let Some(out) = &a.out {
        cfg.out = Some(out.clone());
    }
    if let Some(f) = &a.format {
        cfg.format = parse_format(f)?;
    }
    cfg.validate().map_err(|source| CliError::Config { path, source })?;
    Ok(cfg)
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let cfg = load_config(a)?;
    let methods: Vec<Method> = match &a.methods {
        Some(list) => list
            .split(',')
            .map(|m| {
                m.parse()
                    .map_err(|e: active_measure::Error| CliError::Usage(e.to_string()))
            })
            .collect::<Result<_, _>>()?,
        None => vec![cfg.method],
    };
    let schemes: Option<Vec<WeightScheme>> = a
        .schemes
        .as_ref()
        .map(|list| list.split(',').map(parse_scheme).collect())
        .transpose()?;

    let exp = Experiment::new(&cfg)?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    for &method in &methods {
        let base = active_measure::MethodConfig {
            method,
            ..cfg.method_config()
        };
        let variants: Vec<active_measure::MethodConfig> = match &schemes {
            Some(list) if method.is_wor() => list
                .iter()
                .map(|&scheme| active_measure::MethodConfig { scheme, ..base })
                .collect(),
            _ if a.methods.is_some() && cfg.scheme.is_none() => vec![active_measure::MethodConfig {
                scheme: method.default_scheme(),
                ..base
            }],
            _ => vec![base],
        };
        for mc in variants {
            let trials = exp.with_method(mc).run(cfg.seed, cfg.trials)?;
            rows.extend(aggregate(&mc, &trials, exp.total)?);
        }
    }

    let mut header = format!("active-measure simulate\nconfig_file = {}\n", a.config.display());
    // where the rows go is not part of the experiment
    header.push_str(
        &ExperimentConfig {
            out: None,
            ..cfg.clone()
        }
        .to_kv(),
    );
    if let Some(m) = &a.methods {
        header.push_str(&format!("methods = {m}\n"));
    }
    if let Some(s) = &a.schemes {
        header.push_str(&format!("schemes = {s}\n"));
    }
    header.push_str(&format!("f_true = {:?}\npool_size = {}\n", exp.total, exp.pool.len()));

    let target = cfg.out.as_deref();
    let label = target.map_or("stdout".to_string(), |p| p.display().to_string());
    let mut out = sink(target)?;
    write_results(&mut out, &rows, cfg.format, &header).map_err(|e| match e {
        active_measure::Error::Io(io) => CliError::io(label.clone(), io),
        other => other.into(),
    })?;
    out.flush().map_err(|e| CliError::io(label, e))?;
    Ok(())
}

pub fn verify(a: &VerifyArgs) -> Result<(), CliError> {
    let suite: Suite = a
        .suite
        .parse()
        .map_err(|e: active_measure::Error| CliError::Usage(e.to_string()))?;
    let mut scale = a.trials.map_or_else(CheckScale::default, CheckScale::with_trials);
    if a.trials == Some(0) {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    if let Some(seed) = a.seed {
        scale.seed = seed;
    }
    let outcomes = run_suite(suite, &scale)?;
    let mut stdout = io::stdout().lock();
    let io_err = |e| CliError::io("stdout", e);
    writeln!(
        stdout,
        "# active-measure verify --suite {} (seed {})",
        a.suite, scale.seed
    )
    .map_err(io_err)?;
    for o in &outcomes {
        writeln!(stdout, "{o}").map_err(io_err)?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    writeln!(
        stdout,
        "{} of {} checks passed",
        outcomes.len() - failed,
        outcomes.len()
    )
    .map_err(io_err)?;
    if let Some(path) = &a.out {
        let label = path.display().to_string();
        let mut w = sink(Some(path))?;
        for o in &outcomes {
            let line = serde_json::to_string(o).expect("outcomes serialize");
            writeln!(w, "{line}").map_err(|e| CliError::io(label.clone(), e))?;
        }
        w.flush().map_err(|e| CliError::io(label, e))?;
    }
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: outcomes.len(),
        });
    }
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let store = if a.ephemeral {
        SessionStore::in_memory()
    } else {
        SessionStore::open(&a.data_dir)?
    };
    if let Some(dir) = &a.ui_dir {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!(
                "UI directory {} does not exist",
                dir.display()
            )));
        }
    }
    let state = AppState {
        store: Arc::new(store),
        pool_dir: a.pool_dir.clone(),
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("runtime", e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| CliError::io(format!("bind {}", a.bind), e))?;
        let addr = listener.local_addr().map_err(|e| CliError::io("bind", e))?;
        println!("listening on http://{addr}");
        io::stdout().flush().map_err(|e| CliError::io("stdout", e))?;
        active_measure_service::serve_on(listener, state, a.ui_dir.clone())
            .await
            .map_err(|e| CliError::io("serve", e))
    })
}

fn same_bits(a: &EstimateReport, b: &EstimateReport) -> bool {
    a.t == b.t
        && a.caveat == b.caveat
        && [
            (a.estimate, b.estimate),
            (a.var_cond, b.var_cond),
            (a.var_simp, b.var_simp),
            (a.ci_lo, b.ci_lo),
            (a.ci_hi, b.ci_hi),
            (a.level, b.level),
        ]
        .iter()
        .all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn replay(a: &ReplayArgs) -> Result<(), CliError> {
    let format = a
        .format
        .as_deref()
        .map(parse_format)
        .transpose()?
        .unwrap_or(Format::Jsonl);
    let events = read_log(&a.log).map_err(|e| match e {
        active_measure_service::ServiceError::Io(io) => CliError::io(a.log.display().to_string(), io),
        other => other.into(),
    })?;
    let reports = fold_log(events.clone())?;

    let label = a.out.as_ref().map_or("stdout".to_string(), |p| p.display().to_string());
    let mut out = sink(a.out.as_deref())?;
    let io_err = |e| CliError::io(label.clone(), e);
    match format {
        Format::Jsonl => {
            for r in &reports {
                writeln!(out, "{}", serde_json::to_string(r).expect("reports serialize")).map_err(io_err)?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            if reports.is_empty() {
                w.write_record([
                    "t", "estimate", "var_cond", "var_simp", "ci_lo", "ci_hi", "level", "caveat",
                ])
                .map_err(|e| CliError::io(label.clone(), e.into()))?;
            }
            for r in &reports {
                w.serialize(r).map_err(|e| CliError::io(label.clone(), e.into()))?;
            }
            w.flush().map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)?;

    if a.check {
        let simulated = simulate_log(&events)?;
        let mismatched = if simulated.len() == reports.len() {
            reports.iter().zip(&simulated).filter(|(x, y)| !same_bits(x, y)).count()
        } else {
            reports.len().max(simulated.len())
        };
        if mismatched > 0 {
            return Err(CliError::ChecksFailed {
                failed: mismatched,
                total: reports.len(),
            });
        }
        eprintln!(
            "replay matches the simulation driver bit for bit ({} steps)",
            reports.len()
        );
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let format = match &a.format {
        Some(f) => parse_format(f)?,
        None => match a.results.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json") => Format::Jsonl,
            _ => Format::Csv,
        },
    };
    if !a.results.is_file() {
        return Err(CliError::io(
            a.results.display().to_string(),
            io::Error::new(io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let rows = read_results(&a.results, format)?;
    let mut out = io::stdout().lock();
    let io_err = |e| CliError::io("stdout", e);
    writeln!(
        out,
        "{:<16} {:<10} {:>6} {:>22} {:>9} {:>9} {:>10} {:>7}",
        "method", "scheme", "t", "frac. error (± SE)", "cover", "cover_s", "ci radius", "trials"
    )
    .map_err(io_err)?;
    for r in &rows {
        writeln!(
            out,
            "{:<16} {:<10} {:>6} {:>22} {:>9.4} {:>9.4} {:>10.5} {:>7}",
            r.method,
            r.scheme,
            r.t,
            format!("{:.5} ± {:.5}", r.fractional_error_mean, r.fractional_error_se),
            r.coverage,
            r.coverage_simple,
            r.ci_radius_mean_relative,
            r.trials
        )
        .map_err(io_err)?;
    }
    Ok(())
}
