//! JSON and CSV file formats.
//!
//! Matrices are row-major nested arrays. Transition matrices are
//! column-stochastic: `P[i][j]` is the probability of moving from `j` to
//! `i`. CSV series start with a `#` comment line recording the run
//! parameters; floats use the shortest round-trip representation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use qcoupling_core::chain::{validate_matrix, StochasticViolation, TransitionMatrix};
use qcoupling_core::check::CheckResult;
use qcoupling_core::coupling::{pair_index, CoalescenceReport, CouplingMatrix, RandomMappingRep};
use qcoupling_core::evolve::ConvergenceTrace;
use qcoupling_core::linalg::Matrix;
use qcoupling_core::quantize::{ChoiMatrix, FactorOrder, KrausSet};

use crate::error::{CliError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn syntax_error(path: &str, e: &serde_json::Error) -> CliError {
    CliError::format(path, format!("line {}, column {}: {e}", e.line(), e.column()))
}

/// Line of element `index` (row, then optional entry) inside the nested
/// array stored under `key`. Best effort: used only to enrich diagnostics.
fn locate(text: &str, key: &str, row: usize, col: Option<usize>) -> Option<usize> {
    let needle = format!("\"{key}\"");
    let mut start = None;
    let mut from = 0;
    while let Some(off) = text[from..].find(&needle) {
        let after = from + off + needle.len();
        if text[after..].trim_start().starts_with(':') {
            start = Some(after);
            break;
        }
        from = after;
    }
    let start = start?;
    let (mut depth, mut r, mut c, mut in_str) = (0usize, 0usize, 0usize, false);
    let mut line = 1 + text[..start].matches('\n').count();
    let mut prev = ' ';
    for ch in text[start..].chars() {
        if ch == '\n' {
            line += 1;
        }
        if in_str {
            if ch == '"' && prev != '\\' {
                in_str = false;
            }
            prev = ch;
            continue;
        }
        match ch {
            '"' => in_str = true,
            '[' => {
                depth += 1;
                if depth == 2 && r == row && col.is_none() {
                    return Some(line);
                }
            }
            ']' => {
                if depth == 2 {
                    r += 1;
                    c = 0;
                }
                if depth == 1 {
                    return None;
                }
                depth -= 1;
            }
            ',' if depth == 2 => c += 1,
            _ if depth == 2 && r == row && !ch.is_whitespace() && Some(c) == col => return Some(line),
            _ => {}
        }
        prev = ch;
    }
    None
}

fn field_error(path: &str, text: &str, key: &str, row: usize, col: Option<usize>, msg: String) -> CliError {
    let field = match col {
        Some(c) => format!("{key}[{row}][{c}]"),
        None => format!("{key}[{row}]"),
    };
    match locate(text, key, row, col) {
        Some(line) => CliError::format(path, format!("line {line}, field {field}: {msg}")),
        None => CliError::format(path, format!("field {field}: {msg}")),
    }
}

fn square_from_rows(path: &str, text: &str, key: &str, rows: &[Vec<f64>]) -> Result<Matrix> {
    let n = rows.len();
    if n == 0 {
        return Err(CliError::format(path, format!("field {key}: matrix is empty")));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(field_error(path, text, key, i, None, format!("expected {n} entries, found {}", r.len())));
        }
    }
    Matrix::from_rows(rows).map_err(|e| CliError::format(path, format!("field {key}: {e}")))
}

fn check_labels(path: &str, labels: Option<Vec<String>>, n: usize) -> Result<Vec<String>> {
    match labels {
        None => Ok((0..n).map(|i| i.to_string()).collect()),
        Some(l) if l.len() == n => Ok(l),
        Some(l) => Err(CliError::format(path, format!("field labels: expected {n} labels, found {}", l.len()))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
}

/// Parses `{ "labels": [...], "P": [[...]] }`, rejecting matrices that
/// are not column-stochastic with a field (and, where found, line)
/// locator.
pub fn parse_chain(text: &str, path: &str) -> Result<TransitionMatrix> {
    let file: ChainFile = serde_json::from_str(text).map_err(|e| syntax_error(path, &e))?;
    let m = square_from_rows(path, text, "P", &file.p)?;
    let labels = check_labels(path, file.labels, m.rows())?;
    if let Some(v) = validate_matrix(&m).stochastic_violations.first() {
        return Err(match *v {
            StochasticViolation::EntryOutOfRange { row, column, value } => {
                field_error(path, text, "P", row, Some(column), format!("entry {value} is outside [0, 1]"))
            }
            StochasticViolation::ColumnSum { column, sum } => {
                CliError::format(path, format!("field P[*][{column}]: column {column} sums to {sum}, not 1"))
            }
        });
    }
    TransitionMatrix::new(labels, m).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn read_chain(path: &Path) -> Result<TransitionMatrix> {
    parse_chain(&read_text(path)?, &path.display().to_string())
}

pub fn chain_to_json(p: &TransitionMatrix) -> String {
    let file = ChainFile { labels: Some(p.labels().to_vec()), p: p.entries().to_rows() };
    pretty(&file)
}

#[derive(Debug, Serialize, Deserialize)]
struct Outcome {
    label: String,
    prob: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum CouplingFile {
    Dense {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<Vec<String>>,
        #[serde(rename = "C")]
        c: Vec<Vec<f64>>,
    },
    Rmr {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<Vec<String>>,
        #[serde(rename = "R")]
        r: Vec<Outcome>,
        f: Vec<Vec<usize>>,
    },
}

/// A coupling read from disk.
#[derive(Debug, Clone)]
pub enum CouplingInput {
    /// Explicit pair-space matrix. Its base chain is read off the
    /// diagonal starts, so invalid couplings still load and can be
    /// validated.
    Dense(CouplingMatrix),
    /// Random mapping representation; the grand coupling is implied.
    Rmr { labels: Vec<String>, rmr: RandomMappingRep },
}

pub fn parse_coupling(text: &str, path: &str) -> Result<CouplingInput> {
    let file: CouplingFile = serde_json::from_str(text).map_err(|e| syntax_error(path, &e))?;
    match file {
        CouplingFile::Dense { labels, c } => {
            let cm = square_from_rows(path, text, "C", &c)?;
            let nn = cm.rows();
            let n = (nn as f64).sqrt().round() as usize;
            if n * n != nn {
                return Err(CliError::format(path, format!("field C: dimension {nn} is not a square N²")));
            }
            let labels = check_labels(path, labels, n)?;
            let p = Matrix::from_fn(n, n, |xp, x| (0..n).map(|yp| cm[(pair_index(xp, yp, n), pair_index(x, x, n))]).sum());
            let base = TransitionMatrix::new(labels, p)
                .map_err(|e| CliError::format(path, format!("field C: diagonal starts do not induce a transition matrix: {e}")))?;
            Ok(CouplingInput::Dense(CouplingMatrix::from_dense(base, &cm).map_err(|e| CliError::format(path, e.to_string()))?))
        }
        CouplingFile::Rmr { labels, r, f } => {
            let n = f.len();
            if n == 0 {
                return Err(CliError::format(path, "field f: no states"));
            }
            for (x, row) in f.iter().enumerate() {
                if row.len() != r.len() {
                    return Err(field_error(path, text, "f", x, None, format!("expected {} successors, found {}", r.len(), row.len())));
                }
                if let Some(k) = row.iter().position(|&s| s >= n) {
                    return Err(field_error(path, text, "f", x, Some(k), format!("successor {} outside 0..{n}", row[k])));
                }
            }
            let labels = check_labels(path, labels, n)?;
            let (r_labels, probs): (Vec<String>, Vec<f64>) = r.into_iter().map(|o| (o.label, o.prob)).unzip();
            let rmr = RandomMappingRep::new(n, r_labels, probs, f).map_err(|e| CliError::format(path, format!("field R: {e}")))?;
            Ok(CouplingInput::Rmr { labels, rmr })
        }
    }
}

pub fn read_coupling(path: &Path) -> Result<CouplingInput> {
    parse_coupling(&read_text(path)?, &path.display().to_string())
}

pub fn coupling_dense_to_json(c: &CouplingMatrix) -> String {
    pretty(&CouplingFile::Dense { labels: Some(c.base().labels().to_vec()), c: c.to_dense().to_rows() })
}

pub fn rmr_to_json(labels: &[String], rmr: &RandomMappingRep) -> String {
    use qcoupling_core::coupling::RandomMapping;
    let r = rmr
        .labels()
        .iter()
        .zip(rmr.probabilities())
        .map(|(label, &prob)| Outcome { label: label.clone(), prob })
        .collect();
    let f = (0..rmr.num_states()).map(|x| (0..rmr.num_outcomes()).map(|k| rmr.successor(x, k)).collect()).collect();
    pretty(&CouplingFile::Rmr { labels: Some(labels.to_vec()), r, f })
}

pub fn order_name(order: FactorOrder) -> &'static str {
    match order {
        FactorOrder::MapFirst => "map-first",
        FactorOrder::BasisFirst => "basis-first",
    }
}

pub fn parse_order(s: &str) -> Option<FactorOrder> {
    match s {
        "map-first" => Some(FactorOrder::MapFirst),
        "basis-first" => Some(FactorOrder::BasisFirst),
        _ => None,
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChoiFile {
    dim: usize,
    order: String,
    #[serde(rename = "J")]
    j: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eigenvalues: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cp: Option<bool>,
}

/// Choi matrix with its optional recorded spectrum and CP verdict.
pub fn choi_to_json(j: &ChoiMatrix, eigenvalues: Option<&[f64]>, cp: Option<bool>) -> String {
    pretty(&ChoiFile {
        dim: j.dim(),
        order: order_name(j.order).into(),
        j: j.matrix().to_rows(),
        eigenvalues: eigenvalues.map(<[f64]>::to_vec),
        cp,
    })
}

/// Reads a Choi JSON file; returns the matrix and any recorded
/// eigenvalues.
pub fn parse_choi(text: &str, path: &str) -> Result<(ChoiMatrix, Option<Vec<f64>>)> {
    let file: ChoiFile = serde_json::from_str(text).map_err(|e| syntax_error(path, &e))?;
    let order = parse_order(&file.order)
        .ok_or_else(|| CliError::format(path, format!("field order: expected map-first or basis-first, found '{}'", file.order)))?;
    let m = square_from_rows(path, text, "J", &file.j)?;
    let j = ChoiMatrix::new(file.dim, m, order).map_err(|e| CliError::format(path, format!("field J: {e}")))?;
    Ok((j, file.eigenvalues))
}

fn matrix_csv(header: &str, m: &Matrix) -> String {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Header `rows=…,cols=…,dim=…,order=…` followed by the matrix rows.
pub fn choi_to_csv(j: &ChoiMatrix) -> String {
    let n = j.matrix().rows();
    matrix_csv(&format!("rows={n},cols={n},dim={},order={}", j.dim(), order_name(j.order)), j.matrix())
}

pub fn kraus_to_json(k: &KrausSet) -> String {
    let ops: Vec<Value> = k
        .labels()
        .iter()
        .zip(k.ops())
        .map(|(label, m)| json!({ "label": label, "matrix": m.to_rows() }))
        .collect();
    pretty(&json!({ "dim": k.dim(), "ops": ops }))
}

/// One CSV per operator: `(label, contents)`.
pub fn kraus_to_csv(k: &KrausSet) -> Vec<(String, String)> {
    k.labels()
        .iter()
        .zip(k.ops())
        .map(|(label, m)| {
            let header = format!("rows={},cols={},label={label}", m.rows(), m.cols());
            (label.clone(), matrix_csv(&header, m))
        })
        .collect()
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// `# key=value …` comment line.
pub fn meta_line(meta: &[(&str, String)]) -> String {
    let parts: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n", parts.join(" "))
}

/// Columns `m, tail_max` and, for Monte Carlo reports, `tail_ci_hi`;
/// `per_pair` appends one `tail_x_y` column per start pair.
pub fn report_to_csv(report: &CoalescenceReport, meta: &[(&str, String)], per_pair: bool) -> String {
    let mut out = meta_line(meta);
    out.push_str("m,tail_max");
    if report.tail_ci_hi.is_some() {
        out.push_str(",tail_ci_hi");
    }
    if per_pair {
        for p in &report.pairs {
            let _ = write!(out, ",tail_{}_{}", p.x, p.y);
        }
    }
    out.push('\n');
    for (k, m) in report.m_grid.iter().enumerate() {
        let _ = write!(out, "{m},{}", fmt_f64(report.tail_max[k]));
        if let Some(hi) = &report.tail_ci_hi {
            let _ = write!(out, ",{}", fmt_f64(hi[k]));
        }
        if per_pair {
            for p in &report.pairs {
                let _ = write!(out, ",{}", fmt_f64(p.tails[k]));
            }
        }
        out.push('\n');
    }
    out
}

pub const TRACE_COLUMNS: &str = "m,trace_distance,qperp_overlap,classical_tail_max,qperp_bound,theorem_envelope";

/// Missing classical columns are left empty.
pub fn trace_to_csv(trace: &ConvergenceTrace, meta: &[(&str, String)]) -> String {
    let mut out = meta_line(meta);
    out.push_str(TRACE_COLUMNS);
    out.push('\n');
    for r in &trace.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.m,
            fmt_f64(r.trace_distance),
            fmt_f64(r.qperp_overlap),
            fmt_opt(r.classical_tail_max),
            fmt_opt(r.qperp_bound),
            fmt_opt(r.theorem_envelope)
        );
    }
    out
}

/// Non-finite values become strings so the summary stays valid JSON.
pub fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

pub fn check_to_json(c: &CheckResult) -> Value {
    json!({
        "name": c.name,
        "lhs": num(c.lhs),
        "rhs": num(c.rhs),
        "tolerance": num(c.tolerance),
        "pass": c.pass,
        "bound": c.bound,
        "detail": c.detail,
    })
}

pub fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_roundtrip() {
        let p = TransitionMatrix::from_rows(&[[0.5, 0.25], [0.5, 0.75]]).unwrap();
        let text = chain_to_json(&p);
        let q = parse_chain(&text, "t.json").unwrap();
        assert_eq!(p.entries(), q.entries());
        assert_eq!(q.labels(), p.labels());
    }

    #[test]
    fn chain_diagnostics() {
        let text = "{\n  \"P\": [\n    [0.5, 0.5],\n    [0.5, -0.5]\n  ]\n}";
        let msg = parse_chain(text, "c.json").unwrap_err().to_string();
        assert!(msg.contains("line 4") && msg.contains("P[1][1]"), "{msg}");

        let msg = parse_chain("{\"P\": [[1.0], [0.0, 1.0]]}", "c.json").unwrap_err().to_string();
        assert!(msg.contains("P[0]") || msg.contains("P[1]"), "{msg}");

        let msg = parse_chain("{\"P\": [[0.9, 0.5], [0.0, 0.5]]}", "c.json").unwrap_err().to_string();
        assert!(msg.contains("P[*][0]") && msg.contains("sums to"), "{msg}");

        let msg = parse_chain("{\"P\": [[1.0]],\n \"Q\": 1}", "c.json").unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");

        let msg = parse_chain("{\"labels\": [\"a\"], \"P\": [[0.5, 0.5], [0.5, 0.5]]}", "c.json").unwrap_err().to_string();
        assert!(msg.contains("field labels"), "{msg}");
    }

    #[test]
    fn coupling_formats_roundtrip() {
        let m = qcoupling_core::models::hypercube_model(2).unwrap();
        let rmr = m.rmr().unwrap();
        let text = rmr_to_json(&m.state_labels(), &rmr);
        match parse_coupling(&text, "r.json").unwrap() {
            CouplingInput::Rmr { labels, rmr: back } => {
                assert_eq!(labels, m.state_labels());
                assert_eq!(back, rmr);
            }
            other => panic!("{other:?}"),
        }
        let c = m.coupling_matrix().unwrap();
        match parse_coupling(&coupling_dense_to_json(&c), "d.json").unwrap() {
            CouplingInput::Dense(back) => assert_eq!(back.to_dense(), c.to_dense()),
            other => panic!("{other:?}"),
        }
        let msg = parse_coupling("{\"kind\":\"rmr\",\"R\":[{\"label\":\"a\",\"prob\":1.0}],\"f\":[[0],[5]]}", "r.json")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("f[1][0]"), "{msg}");
    }

    #[test]
    fn printed_cycle_coupling_loads() {
        use qcoupling_core::models::{cycle_coupling_model, CycleVariant};
        let (_, c) = cycle_coupling_model(3, 0.5, CycleVariant::Printed).unwrap();
        match parse_coupling(&coupling_dense_to_json(&c), "d.json").unwrap() {
            CouplingInput::Dense(back) => assert_eq!(back.to_dense(), c.to_dense()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_layouts() {
        let m = qcoupling_core::models::hypercube_model(2).unwrap();
        let r = qcoupling_core::coupling::coalescence_tail_exact(&m.coupling_matrix().unwrap(), 3).unwrap();
        let csv = report_to_csv(&r, &[("model", "hypercube2".into())], false);
        assert_eq!(csv, "# model=hypercube2\nm,tail_max\n0,1.0\n1,1.0\n2,0.5\n3,0.25\n");
        let j = qcoupling_core::quantize::choi_matrix(
            &qcoupling_core::quantize::c_star_superop(&m.coupling_matrix().unwrap()).unwrap(),
            FactorOrder::BasisFirst,
        );
        let csv = choi_to_csv(&j);
        assert!(csv.starts_with("rows=16,cols=16,dim=4,order=basis-first\n"));
        assert_eq!(csv.lines().count(), 17);
        let (back, _) = parse_choi(&choi_to_json(&j, None, None), "j.json").unwrap();
        assert_eq!(back, j);
    }
}
