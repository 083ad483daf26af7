//! Instance files, report envelopes and node-indexed CSV.
//!
//! Instance layout (all matrices row-major, flat or as arrays of rows):
//!
//! ```json
//! {
//!   "n": 1, "k": 1, "T": 1.0, "depth": 4,
//!   "coefficients": {
//!     "A": [[0]], "B": [[0]], "C": [[0]], "D": [[1]],
//!     "b": [[0]], "sigma": [[0]],
//!     "Q": [[2]], "S": [[0]], "R": [[-1]],
//!     "G": [2]
//!   },
//!   "x0": [0],
//!   "domain": { "halfspaces": [ { "g": [1], "h": 1 } ] }
//! }
//! ```
//!
//! Each per-interval coefficient is a list with either `depth` entries or a
//! single entry used on every interval. Missing coefficients are zero,
//! missing `x0` is zero, a missing domain is `C = ℝ^k`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::domain::{ControlDomain, HalfSpace};
use crate::error::{Error, Result};
use crate::model::{LqInstance, StepCoefficients};
use crate::tree::{AdaptedProcess, NodeId, ProcessKind, ScenarioTree};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const STEP_KEYS: [&str; 9] = ["A", "B", "C", "D", "b", "sigma", "Q", "S", "R"];

fn format_err(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Format {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn get_usize(obj: &Map<String, Value>, key: &str) -> Result<usize> {
    let ptr = format!("/{key}");
    let v = obj.get(key).ok_or_else(|| format_err(&ptr, "missing"))?;
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| format_err(&ptr, format!("expected a non-negative integer, got {v}")))
}

fn numbers(v: &Value, ptr: &str, out: &mut Vec<f64>) -> Result<()> {
    match v {
        Value::Number(x) => {
            out.push(x.as_f64().ok_or_else(|| format_err(ptr, "number out of range"))?);
            Ok(())
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                numbers(item, &format!("{ptr}/{i}"), out)?;
            }
            Ok(())
        }
        other => Err(format_err(ptr, format!("expected a number or array, got {other}"))),
    }
}

/// Flattens a (possibly nested) numeric array and checks its length.
fn flat(v: &Value, ptr: &str, len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    numbers(v, ptr, &mut out)?;
    if out.len() != len {
        return Err(format_err(ptr, format!("expected {len} entries, got {}", out.len())));
    }
    Ok(out)
}

fn matrix(v: &Value, ptr: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    Ok(DMatrix::from_row_slice(rows, cols, &flat(v, ptr, rows * cols)?))
}

/// An instance as read from disk, before symmetrization.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedInstance {
    pub instance: LqInstance,
    pub domain: ControlDomain,
    /// Every per-interval coefficient was given once for all intervals.
    pub constant_coefficients: bool,
}

/// Parses an instance file. `depth` replaces the file's depth; this is only
/// allowed when every per-interval coefficient is constant.
pub fn parse_instance(text: &str, depth: Option<usize>) -> Result<ParsedInstance> {
    let root: Value = serde_json::from_str(text).map_err(|e| {
        format_err("", format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    let obj = root
        .as_object()
        .ok_or_else(|| format_err("", "top level must be an object"))?;
    let n = get_usize(obj, "n")?;
    let k = get_usize(obj, "k")?;
    if n == 0 {
        return Err(format_err("/n", "state dimension must be ≥ 1"));
    }
    if k == 0 {
        return Err(format_err("/k", "control dimension must be ≥ 1"));
    }
    let horizon = obj
        .get("T")
        .ok_or_else(|| format_err("/T", "missing"))?
        .as_f64()
        .ok_or_else(|| format_err("/T", "expected a number"))?;
    let file_depth = get_usize(obj, "depth")?;

    let empty = Map::new();
    let coeffs = match obj.get("coefficients") {
        None => &empty,
        Some(Value::Object(m)) => m,
        Some(_) => return Err(format_err("/coefficients", "expected an object")),
    };
    for key in coeffs.keys() {
        if key != "G" && !STEP_KEYS.contains(&key.as_str()) {
            return Err(format_err(format!("/coefficients/{key}"), "unknown coefficient"));
        }
    }
    let mut constant = true;
    for key in STEP_KEYS {
        if let Some(v) = coeffs.get(key) {
            let len = v
                .as_array()
                .ok_or_else(|| format_err(format!("/coefficients/{key}"), "expected an array"))?
                .len();
            if len != 1 {
                constant = false;
            }
            if len != 1 && len != file_depth {
                return Err(format_err(
                    format!("/coefficients/{key}"),
                    format!("expected {file_depth} entries (one per interval) or 1, got {len}"),
                ));
            }
        }
    }
    let depth = match depth {
        Some(d) if d != file_depth && !constant => {
            return Err(format_err(
                "/depth",
                "depth override needs constant coefficients",
            ))
        }
        Some(d) => d,
        None => file_depth,
    };
    let tree = ScenarioTree::new(depth, horizon).map_err(|e| {
        let ptr = if horizon.is_finite() && horizon > 0.0 { "/depth" } else { "/T" };
        format_err(ptr, e.to_string())
    })?;

    let shape = |key: &str| match key {
        "A" | "C" | "Q" => (n, n),
        "B" | "D" => (n, k),
        "S" => (k, n),
        "R" => (k, k),
        _ => (n, 1),
    };
    let entry = |key: &str, level: usize| -> Result<DMatrix<f64>> {
        let (r, c) = shape(key);
        match coeffs.get(key).and_then(Value::as_array) {
            None => Ok(DMatrix::zeros(r, c)),
            Some(items) => {
                let i = if items.len() == 1 { 0 } else { level };
                matrix(&items[i], &format!("/coefficients/{key}/{i}"), r, c)
            }
        }
    };
    let mut steps = Vec::with_capacity(depth);
    for level in 0..depth {
        let vec_of = |m: DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        steps.push(StepCoefficients {
            a: entry("A", level)?,
            b: entry("B", level)?,
            c: entry("C", level)?,
            d: entry("D", level)?,
            drift: vec_of(entry("b", level)?),
            diffusion: vec_of(entry("sigma", level)?),
            q: entry("Q", level)?,
            s: entry("S", level)?,
            r: entry("R", level)?,
        });
    }
    let g = match coeffs.get("G") {
        None => DMatrix::zeros(n, n),
        Some(v) => matrix(v, "/coefficients/G", n, n)?,
    };
    let x0 = match obj.get("x0") {
        None => DVector::zeros(n),
        Some(v) => DVector::from_vec(flat(v, "/x0", n)?),
    };

    let domain = match obj.get("domain") {
        None | Some(Value::Null) => ControlDomain::unconstrained(k),
        Some(Value::Object(d)) => {
            let mut hs = Vec::new();
            if let Some(list) = d.get("halfspaces") {
                let list = list
                    .as_array()
                    .ok_or_else(|| format_err("/domain/halfspaces", "expected an array"))?;
                for (i, item) in list.iter().enumerate() {
                    let ptr = format!("/domain/halfspaces/{i}");
                    let g = item
                        .get("g")
                        .ok_or_else(|| format_err(format!("{ptr}/g"), "missing"))?;
                    let h = item
                        .get("h")
                        .and_then(Value::as_f64)
                        .ok_or_else(|| format_err(format!("{ptr}/h"), "missing or not a number"))?;
                    hs.push(HalfSpace::new(flat(g, &format!("{ptr}/g"), k)?, h));
                }
            }
            ControlDomain::new(k, hs).map_err(|e| format_err("/domain", e.to_string()))?
        }
        Some(_) => return Err(format_err("/domain", "expected an object")),
    };

    Ok(ParsedInstance {
        instance: LqInstance {
            tree,
            n,
            k,
            steps,
            g,
            x0,
        },
        domain,
        constant_coefficients: constant,
    })
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

/// Full-length JSON form; `parse_instance` reads it back unchanged.
pub fn instance_to_json(inst: &LqInstance, domain: &ControlDomain) -> Value {
    let per_step = |f: &dyn Fn(&StepCoefficients) -> Vec<f64>| -> Value {
        Value::Array(inst.steps.iter().map(|s| json!(f(s))).collect())
    };
    let coefficients = json!({
        "A": per_step(&|s| row_major(&s.a)),
        "B": per_step(&|s| row_major(&s.b)),
        "C": per_step(&|s| row_major(&s.c)),
        "D": per_step(&|s| row_major(&s.d)),
        "b": per_step(&|s| s.drift.as_slice().to_vec()),
        "sigma": per_step(&|s| s.diffusion.as_slice().to_vec()),
        "Q": per_step(&|s| row_major(&s.q)),
        "S": per_step(&|s| row_major(&s.s)),
        "R": per_step(&|s| row_major(&s.r)),
        "G": row_major(&inst.g),
    });
    json!({
        "n": inst.n,
        "k": inst.k,
        "T": inst.tree.horizon(),
        "depth": inst.tree.depth(),
        "coefficients": coefficients,
        "x0": inst.x0.as_slice(),
        "domain": { "halfspaces": domain.halfspaces() },
    })
}

/// SHA-256 of the compact, key-sorted JSON form.
pub fn instance_digest(inst: &LqInstance, domain: &ControlDomain) -> String {
    let canonical = instance_to_json(inst, domain).to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportParameters {
    pub tol: f64,
    pub seed: u64,
    pub depth: usize,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReportFile {
    pub schema_version: u32,
    pub instance_digest: String,
    pub command: String,
    pub parameters: ReportParameters,
    pub results: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
    pub version: String,
}

impl ReportFile {
    pub fn new(command: &str, digest: String, parameters: ReportParameters, results: Value) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            instance_digest: digest,
            command: command.to_string(),
            parameters,
            results,
            timings: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// CSV with header `level,index,<names…>`, one row per node.
pub fn process_to_csv(process: &AdaptedProcess, names: &[String]) -> String {
    let mut out = String::from("level,index");
    for name in names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for id in process.node_ids() {
        out.push_str(&format!("{},{}", id.level, id.index));
        for v in process.node(id) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Header names `u1..uk`.
pub fn control_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("u{i}")).collect()
}

/// Reads a control in the layout of [`process_to_csv`]: a header line, then
/// exactly one row `level,index,u1,…,uk` per running node in any order.
pub fn parse_control_csv(text: &str, tree: ScenarioTree, k: usize) -> Result<AdaptedProcess> {
    let err = |line: usize, message: String| Error::ControlFile { line, message };
    let mut out = AdaptedProcess::zeros(tree, k, ProcessKind::Running);
    let mut seen: HashMap<NodeId, usize> = HashMap::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim_start().starts_with("level") => {}
        Some((i, _)) => return Err(err(i + 1, "expected header starting with 'level'".into())),
        None => return Err(err(1, "empty file".into())),
    }
    for (i, line) in lines {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != k + 2 {
            return Err(err(line_no, format!("expected {} fields, got {}", k + 2, fields.len())));
        }
        let parse_idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| err(line_no, format!("bad node index '{s}'")))
        };
        let id = NodeId::new(parse_idx(fields[0])?, parse_idx(fields[1])?);
        if id.level >= tree.depth() || id.index >= tree.nodes_at(id.level) {
            return Err(err(line_no, format!("node {id} is not a running node of the tree")));
        }
        if let Some(prev) = seen.insert(id, line_no) {
            return Err(err(line_no, format!("node {id} already given on line {prev}")));
        }
        let dst = out.node_mut(id);
        for (j, f) in fields[2..].iter().enumerate() {
            dst[j] = f
                .parse::<f64>()
                .map_err(|_| err(line_no, format!("bad value '{f}'")))?;
        }
    }
    if seen.len() != tree.running_nodes() {
        let missing = tree
            .running_ids()
            .find(|id| !seen.contains_key(id))
            .expect("some node missing");
        return Err(err(
            text.lines().count(),
            format!(
                "{} of {} running nodes given; first missing is {missing}",
                seen.len(),
                tree.running_nodes()
            ),
        ));
    }
    Ok(out)
}
