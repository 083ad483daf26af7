use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use lqshift::io::{
    control_names, instance_digest, parse_control_csv, parse_instance, process_to_csv,
    ReportFile, ReportParameters,
};
use lqshift::model::{cost_direct, forward_state, validate_instance, Violation};
use lqshift::oracle::{
    auto_lambda_max, brute_force_binary, enumeration_size, equivalence_check,
    random_binary_control, EquivalenceOptions,
};
use lqshift::principle::{
    check_general_smp, check_remark1_signs, check_stationarity, msa_candidate_search,
    solve_first_adjoint, solve_second_adjoint, MsaOptions,
};
use lqshift::spectral::{dense_spectrum, lambda_max, SpectralMode};
use lqshift::{AdaptedProcess, ControlDomain, ControlProcess, Error, LqInstance};
use serde_json::{json, Value};

use crate::{Cli, Command, GlobalOpts, Mode};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NONCONVERGENCE: u8 = 3;
pub const EXIT_BUDGET: u8 = 4;
pub const EXIT_CONTROL_FILE: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Format { .. } | Error::Validation(_) | Error::EmptyBinarySet => EXIT_VALIDATION,
        Error::NonConvergence { .. } | Error::ShiftBoundViolated { .. } => EXIT_NONCONVERGENCE,
        Error::BudgetExceeded { .. } => EXIT_BUDGET,
        Error::ControlFile { .. } | Error::InadmissibleControl(_) => EXIT_CONTROL_FILE,
        _ => EXIT_FAILURE,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::new(code_of(&e), e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(inner) => Self {
                code: code_of(inner),
                error: e,
            },
            None => Self::new(EXIT_FAILURE, e),
        }
    }
}

type CmdResult = Result<(), Failure>;

struct Timer {
    enabled: bool,
    phases: BTreeMap<String, f64>,
}

impl Timer {
    fn new(g: &GlobalOpts) -> Self {
        Self {
            enabled: !g.no_timings,
            phases: BTreeMap::new(),
        }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.phases.insert(format!("{phase}Seconds"), start.elapsed().as_secs_f64());
        out
    }

    fn finish(self) -> Option<BTreeMap<String, f64>> {
        self.enabled.then_some(self.phases)
    }
}

pub(crate) struct Loaded {
    pub inst: LqInstance,
    pub domain: ControlDomain,
    pub digest: String,
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load(path: &Path, g: &GlobalOpts) -> Result<Loaded, Failure> {
    let text = read(path)?;
    let parsed = parse_instance(&text, g.depth)?;
    let report = validate_instance(&parsed.instance, &parsed.domain);
    if !report.is_valid() {
        let lines: Vec<String> = report
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.path, v.message))
            .collect();
        return Err(Failure::new(
            EXIT_VALIDATION,
            anyhow!("instance is invalid\n  {}", lines.join("\n  ")),
        ));
    }
    let mut inst = parsed.instance;
    inst.symmetrize();
    let digest = instance_digest(&inst, &parsed.domain);
    Ok(Loaded {
        inst,
        domain: parsed.domain,
        digest,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(report: &ReportFile, out: Option<&Path>) -> anyhow::Result<()> {
    let text = report.to_json_pretty() + "\n";
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `out.json` → `out.<suffix>`.
fn sidecar(out: Option<&Path>, explicit: Option<&PathBuf>, suffix: &str) -> Option<PathBuf> {
    explicit
        .cloned()
        .or_else(|| out.map(|o| o.with_extension(suffix)))
}

fn parameters(g: &GlobalOpts, inst: &LqInstance, extra: Value) -> ReportParameters {
    let extra = match extra {
        Value::Object(m) => m.into_iter().collect(),
        _ => BTreeMap::new(),
    };
    ReportParameters {
        tol: g.tol,
        seed: g.seed,
        depth: inst.tree.depth(),
        extra,
    }
}

pub(crate) fn nodes_json(u: &AdaptedProcess) -> Value {
    Value::Array(
        u.node_ids()
            .map(|id| json!({ "level": id.level, "index": id.index, "u": u.node(id) }))
            .collect(),
    )
}

pub fn run(cli: &Cli) -> CmdResult {
    let g = &cli.global;
    if !(g.tol > 0.0) {
        return Err(Failure::new(EXIT_FAILURE, anyhow!("--tol must be positive")));
    }
    match &cli.command {
        Command::Validate { instance, out } => validate(g, instance, out.as_deref()),
        Command::Spectrum {
            instance,
            mode,
            max_iter,
            csv,
            out,
        } => spectrum(g, instance, *mode, *max_iter, csv.as_deref(), out.as_deref()),
        Command::Solve {
            instance,
            budget,
            msa,
            starts,
            csv,
            out,
        } => solve(g, instance, *budget, *msa, *starts, csv.as_ref(), out.as_deref()),
        Command::Verify {
            instance,
            control,
            mu,
            second_order,
            p_csv,
            out,
        } => verify(g, instance, control, mu, *second_order, p_csv.as_ref(), out.as_deref()),
        Command::Equivalence {
            instance,
            samples,
            budget,
            out,
        } => equivalence(g, instance, *samples, *budget, out.as_deref()),
        Command::Example5 { depths, out } => crate::example5::run(g, depths, out),
    }
}

fn validate(g: &GlobalOpts, path: &Path, out: Option<&Path>) -> CmdResult {
    let text = read(path)?;
    let (violations, digest, depth, binary_set) = match parse_instance(&text, g.depth) {
        Err(Error::Format { pointer, message }) => {
            (vec![Violation { path: pointer, message }], None, 0, Vec::new())
        }
        Err(e) => return Err(e.into()),
        Ok(parsed) => {
            let report = validate_instance(&parsed.instance, &parsed.domain);
            let digest = instance_digest(&parsed.instance, &parsed.domain);
            (
                report.violations,
                Some(digest),
                parsed.instance.tree.depth(),
                report.binary_set,
            )
        }
    };
    let valid = violations.is_empty();
    let report = ReportFile::new(
        "validate",
        digest.unwrap_or_default(),
        ReportParameters {
            tol: g.tol,
            seed: g.seed,
            depth,
            extra: BTreeMap::new(),
        },
        json!({ "valid": valid, "violations": violations, "binarySet": binary_set }),
    );
    emit(&report, out)?;
    if valid {
        Ok(())
    } else {
        let first = &violations[0];
        Err(Failure::new(
            EXIT_VALIDATION,
            anyhow!("{} violation(s); first at {}: {}", violations.len(), first.path, first.message),
        ))
    }
}

fn spectrum(
    g: &GlobalOpts,
    path: &Path,
    mode: Mode,
    max_iter: usize,
    csv: Option<&Path>,
    out: Option<&Path>,
) -> CmdResult {
    let l = load(path, g)?;
    let mut timer = Timer::new(g);
    let spec_mode = match mode {
        Mode::Dense => SpectralMode::Dense,
        Mode::Power => SpectralMode::PowerIteration,
    };
    let rep = timer.time("spectrum", || lambda_max(&l.inst, spec_mode, g.tol, max_iter))?;
    if let Some(csv) = csv {
        if mode != Mode::Dense {
            return Err(Failure::new(EXIT_FAILURE, anyhow!("--csv needs --mode dense")));
        }
        let ev = dense_spectrum(&l.inst)?;
        let mut text = String::from("rank,eigenvalue\n");
        for (i, v) in ev.iter().rev().enumerate() {
            text.push_str(&format!("{i},{v}\n"));
        }
        write_text(csv, &text)?;
    }
    let mut report = ReportFile::new(
        "spectrum",
        l.digest,
        parameters(g, &l.inst, json!({ "mode": format!("{mode:?}").to_lowercase(), "maxIter": max_iter })),
        serde_json::to_value(&rep).expect("serializable"),
    );
    report.timings = timer.finish();
    emit(&report, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn solve(
    g: &GlobalOpts,
    path: &Path,
    budget: u128,
    msa: Option<usize>,
    starts: usize,
    csv: Option<&PathBuf>,
    out: Option<&Path>,
) -> CmdResult {
    let l = load(path, g)?;
    let (inst, domain) = (&l.inst, &l.domain);
    let mut timer = Timer::new(g);
    let spec = timer.time("spectrum", || auto_lambda_max(inst, g.tol.min(1e-10)))?;
    let required = enumeration_size(inst, domain)?;

    let (control, cost, method) = if required <= budget {
        let res = timer.time("bruteForce", || brute_force_binary(inst, domain, budget))?;
        let ties: Vec<Value> = res.ties.iter().map(|t| nodes_json(t.process())).collect();
        let method = json!({
            "method": "brute-force",
            "enumerated": res.enumerated.to_string(),
            "tieCount": res.tie_count.to_string(),
            "ties": ties,
        });
        (res.best_control, res.best_cost, method)
    } else {
        let Some(iters) = msa else {
            return Err(Error::BudgetExceeded { required, budget }.into());
        };
        if starts == 0 {
            return Err(Failure::new(EXIT_FAILURE, anyhow!("--starts must be ≥ 1")));
        }
        let opts = MsaOptions {
            tol: g.tol,
            ..MsaOptions::new(spec.mu, iters)
        };
        let mut runs = Vec::new();
        let mut best: Option<(ControlProcess, f64)> = None;
        timer.time("msa", || -> Result<(), Failure> {
            for s in 0..starts as u64 {
                let start = random_binary_control(inst, domain, g.seed.wrapping_add(s))?;
                let res = msa_candidate_search(inst, domain, &start, &opts)?;
                runs.push(json!({
                    "start": s,
                    "cost": res.cost,
                    "status": res.status,
                    "iterations": res.iterations,
                    "trace": res.trace,
                }));
                if best.as_ref().is_none_or(|(_, c)| res.cost < *c) {
                    best = Some((res.control, res.cost));
                }
            }
            Ok(())
        })?;
        let (control, cost) = best.expect("starts ≥ 1");
        (control, cost, json!({ "method": "msa", "required": required.to_string(), "runs": runs }))
    };

    let x = forward_state(inst, &control)?;
    let pair = solve_first_adjoint(inst, &x, &control)?;
    let st = check_stationarity(inst, &x, &control, &pair, spec.mu, domain, g.tol)?;

    let csv_path = sidecar(out, csv, "control.csv");
    if let Some(p) = &csv_path {
        write_text(p, &process_to_csv(control.process(), &control_names(inst.k)))?;
    }
    let mut results = json!({
        "bestCost": cost,
        "bestControl": nodes_json(control.process()),
        "controlCsv": csv_path.map(|p| p.display().to_string()),
        "lambdaMax": spec.lambda_max,
        "mu": spec.mu,
        "stationarity": st,
    });
    results
        .as_object_mut()
        .expect("object")
        .extend(method.as_object().expect("object").clone());
    let mut report = ReportFile::new(
        "solve",
        l.digest,
        parameters(g, inst, json!({ "budget": budget.to_string(), "msa": msa, "starts": starts })),
        results,
    );
    report.timings = timer.finish();
    emit(&report, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn verify(
    g: &GlobalOpts,
    path: &Path,
    control_path: &Path,
    mu_arg: &str,
    second_order: bool,
    p_csv: Option<&PathBuf>,
    out: Option<&Path>,
) -> CmdResult {
    let l = load(path, g)?;
    let (inst, domain) = (&l.inst, &l.domain);
    let mut timer = Timer::new(g);
    let text = fs::read_to_string(control_path)
        .map_err(|e| Failure::new(EXIT_CONTROL_FILE, anyhow!("reading {}: {e}", control_path.display())))?;
    let raw = parse_control_csv(&text, inst.tree, inst.k)?;
    let control = ControlProcess::binary(raw, domain)?;

    let (mu, lambda) = if mu_arg == "auto" {
        let s = timer.time("spectrum", || auto_lambda_max(inst, g.tol.min(1e-10)))?;
        (s.mu, Some(s.lambda_max))
    } else {
        let mu: f64 = mu_arg
            .parse()
            .map_err(|_| Failure::new(EXIT_FAILURE, anyhow!("--mu must be 'auto' or a number")))?;
        (mu, None)
    };
    let x = forward_state(inst, &control)?;
    let pair = solve_first_adjoint(inst, &x, &control)?;
    let st = check_stationarity(inst, &x, &control, &pair, mu, domain, g.tol)?;
    let signs = check_remark1_signs(inst, &x, &control, &pair, mu, g.tol)?;
    let mut results = json!({
        "cost": cost_direct(inst, &control)?,
        "mu": mu,
        "lambdaMax": lambda,
        "stationarity": st,
        "signs": signs,
    });
    if second_order {
        let second = timer.time("secondOrder", || solve_second_adjoint(inst, &x, &control))?;
        let smp = check_general_smp(inst, &x, &control, &pair, &second, domain, g.tol)?;
        let p_path = sidecar(out, p_csv, "P.csv");
        if let Some(p) = &p_path {
            write_text(p, &p_csv_text(inst, &second.p))?;
        }
        let obj = results.as_object_mut().expect("object");
        obj.insert("generalSmp".into(), serde_json::to_value(&smp).expect("serializable"));
        obj.insert("pCsv".into(), json!(p_path.as_ref().map(|p| p.display().to_string())));
        if p_path.is_none() {
            obj.insert("P".into(), nodes_json(&second.p));
        }
    }
    let mut report = ReportFile::new(
        "verify",
        l.digest,
        parameters(g, inst, json!({ "mu": mu_arg, "secondOrder": second_order })),
        results,
    );
    report.timings = timer.finish();
    emit(&report, out)?;
    Ok(())
}

/// `level,index,t,P11,P12,…` for every node of a path process of n×n matrices.
pub(crate) fn p_csv_text(inst: &LqInstance, p: &AdaptedProcess) -> String {
    let n = inst.n;
    let mut text = String::from("level,index,t");
    for i in 1..=n {
        for j in 1..=n {
            text.push_str(&format!(",P{i}{j}"));
        }
    }
    text.push('\n');
    for id in p.node_ids() {
        text.push_str(&format!("{},{},{}", id.level, id.index, inst.tree.time(id.level)));
        for v in p.node(id) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    text
}

fn equivalence(g: &GlobalOpts, path: &Path, samples: usize, budget: u128, out: Option<&Path>) -> CmdResult {
    let l = load(path, g)?;
    let mut timer = Timer::new(g);
    let opts = EquivalenceOptions {
        budget,
        samples,
        seed: g.seed,
        tol: g.tol,
    };
    let cert = timer.time("equivalence", || equivalence_check(&l.inst, &l.domain, &opts))?;
    let mut report = ReportFile::new(
        "equivalence",
        l.digest,
        parameters(g, &l.inst, json!({ "samples": samples, "budget": budget.to_string() })),
        serde_json::to_value(&cert).expect("serializable"),
    );
    report.timings = timer.finish();
    emit(&report, out)?;
    Ok(())
}
