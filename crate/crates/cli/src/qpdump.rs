//! Self-describing text dumps of assembled QP instances, for cross-checking
//! solvers outside a live simulation.
//!
//! The format is line-oriented: a version header, the problem topology
//! (buses, edges, index sets), then each matrix as sparse triplets and each
//! vector densely, every section introduced by a tagged count line.  Floats
//! are written with 17 significant digits so a dump/load round trip is exact.

use nalgebra::DVector;
use std::fmt::Write as _;
use swingsafe_core::prediction::{Owner, QpDims, QpInstance};
use swingsafe_core::sparse::CsrMatrix;
use thiserror::Error;

const HEADER: &str = "swingsafe-qp v1";

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("qp dump schema error at line {line}: {detail}")]
    Schema { line: usize, detail: String },
}

fn schema(line: usize, detail: impl Into<String>) -> DumpError {
    DumpError::Schema {
        line,
        detail: detail.into(),
    }
}

/// Serialises a QP instance to the dump text.
pub fn dump_qp(qp: &QpInstance) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{HEADER}");
    let d = &qp.dims;
    let _ = writeln!(s, "dims {} {} {}", d.n_buses, d.n_edges, d.horizon);
    let _ = write!(s, "controlled {}", d.controlled.len());
    for i in &d.controlled {
        let _ = write!(s, " {i}");
    }
    let _ = writeln!(s);
    let _ = write!(s, "safety {}", d.safety.len());
    for i in &d.safety {
        let _ = write!(s, " {i}");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "edges {}", qp.edges.len());
    for &(a, b) in &qp.edges {
        let _ = writeln!(s, "{a} {b}");
    }
    let _ = writeln!(s, "constant {:.16e}", qp.constant);
    let _ = write!(s, "sign {}", qp.sign_pattern.len());
    for v in &qp.sign_pattern {
        let _ = write!(s, " {v:+.0}");
    }
    let _ = writeln!(s);
    dump_matrix(&mut s, "h", &qp.h);
    dump_vector(&mut s, "f", &qp.f);
    dump_matrix(&mut s, "r1", &qp.r1);
    dump_vector(&mut s, "r1_rhs", &qp.r1_rhs);
    dump_matrix(&mut s, "r2", &qp.r2);
    dump_vector(&mut s, "r2_rhs", &qp.r2_rhs);
    dump_owners(&mut s, "var_owner", &qp.var_owner);
    dump_owners(&mut s, "ineq_owner", &qp.ineq_owner);
    dump_owners(&mut s, "eq_owner", &qp.eq_owner);
    s
}

fn dump_matrix(s: &mut String, tag: &str, m: &CsrMatrix) {
    let _ = writeln!(s, "matrix {tag} {} {} {}", m.nrows(), m.ncols(), m.nnz());
    for (r, c, v) in m.iter() {
        let _ = writeln!(s, "{r} {c} {v:.16e}");
    }
}

fn dump_vector(s: &mut String, tag: &str, v: &DVector<f64>) {
    let _ = writeln!(s, "vector {tag} {}", v.len());
    for x in v.iter() {
        let _ = writeln!(s, "{x:.16e}");
    }
}

fn dump_owners(s: &mut String, tag: &str, owners: &[Owner]) {
    let _ = writeln!(s, "owners {tag} {}", owners.len());
    for o in owners {
        match o {
            Owner::Node(i) => {
                let _ = writeln!(s, "node {i}");
            }
            Owner::Edge(j) => {
                let _ = writeln!(s, "edge {j}");
            }
        }
    }
}

/// Streaming token reader over the dump text with line tracking.
struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Reader {
            lines: text.lines().enumerate(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str), DumpError> {
        for (idx, raw) in self.lines.by_ref() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Ok((idx + 1, line));
        }
        Err(schema(0, "unexpected end of dump"))
    }

    /// Reads a section head `tag <counts...>`, returning the numeric fields.
    fn section(&mut self, tag: &str, n_fields: usize) -> Result<(usize, Vec<usize>), DumpError> {
        let (line_no, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        let mut head = String::new();
        for _ in 0..tag.split_whitespace().count() {
            let p = parts
                .next()
                .ok_or_else(|| schema(line_no, format!("expected section `{tag}`")))?;
            if !head.is_empty() {
                head.push(' ');
            }
            head.push_str(p);
        }
        if head != tag {
            return Err(schema(
                line_no,
                format!("expected section `{tag}`, found `{head}`"),
            ));
        }
        let rest: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| schema(line_no, format!("bad integer `{p}` in `{tag}` head")))
            })
            .collect::<Result<_, _>>()?;
        if rest.len() != n_fields {
            return Err(schema(
                line_no,
                format!(
                    "section `{tag}` head has {} numeric fields, expected {n_fields}",
                    rest.len()
                ),
            ));
        }
        Ok((line_no, rest))
    }
}

fn parse_f64(line_no: usize, text: &str) -> Result<f64, DumpError> {
    text.parse::<f64>()
        .map_err(|_| schema(line_no, format!("bad float `{text}`")))
}

fn load_matrix(r: &mut Reader, tag: &str) -> Result<CsrMatrix, DumpError> {
    let head = format!("matrix {tag}");
    let (_, fields) = r.section(&head, 3)?;
    let (nrows, ncols, nnz) = (fields[0], fields[1], fields[2]);
    let mut triplets = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let (line_no, line) = r.next_line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(schema(line_no, "triplet line needs `row col value`"));
        }
        let row: usize = parts[0]
            .parse()
            .map_err(|_| schema(line_no, "bad row index"))?;
        let col: usize = parts[1]
            .parse()
            .map_err(|_| schema(line_no, "bad column index"))?;
        if row >= nrows || col >= ncols {
            return Err(schema(
                line_no,
                format!("triplet ({row},{col}) outside {nrows}×{ncols}"),
            ));
        }
        triplets.push((row, col, parse_f64(line_no, parts[2])?));
    }
    Ok(CsrMatrix::from_triplets(nrows, ncols, &triplets))
}

fn load_vector(r: &mut Reader, tag: &str) -> Result<DVector<f64>, DumpError> {
    let head = format!("vector {tag}");
    let (_, fields) = r.section(&head, 1)?;
    let mut v = Vec::with_capacity(fields[0]);
    for _ in 0..fields[0] {
        let (line_no, line) = r.next_line()?;
        v.push(parse_f64(line_no, line)?);
    }
    Ok(DVector::from_vec(v))
}

fn load_owners(r: &mut Reader, tag: &str) -> Result<Vec<Owner>, DumpError> {
    let head = format!("owners {tag}");
    let (_, fields) = r.section(&head, 1)?;
    let mut v = Vec::with_capacity(fields[0]);
    for _ in 0..fields[0] {
        let (line_no, line) = r.next_line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(schema(line_no, "owner line needs `node|edge index`"));
        }
        let idx: usize = parts[1]
            .parse()
            .map_err(|_| schema(line_no, "bad owner index"))?;
        v.push(match parts[0] {
            "node" => Owner::Node(idx),
            "edge" => Owner::Edge(idx),
            other => return Err(schema(line_no, format!("unknown owner kind `{other}`"))),
        });
    }
    Ok(v)
}

/// Parses a dump back into a QP instance, validating all cross-references.
pub fn load_qp(text: &str) -> Result<QpInstance, DumpError> {
    let mut r = Reader::new(text);
    let (line_no, first) = r.next_line()?;
    if first != HEADER {
        return Err(schema(
            line_no,
            format!("expected header `{HEADER}`, found `{first}`"),
        ));
    }
    let (_, d) = r.section("dims", 3)?;
    let (n_buses, n_edges, horizon) = (d[0], d[1], d[2]);
    let read_set = |r: &mut Reader, tag: &str| -> Result<Vec<usize>, DumpError> {
        let (line_no, line) = r.next_line()?;
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap_or_default();
        if head != tag {
            return Err(schema(line_no, format!("expected `{tag}` set")));
        }
        let count: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| schema(line_no, format!("bad count in `{tag}`")))?;
        let ids: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| schema(line_no, format!("bad id in `{tag}`")))
            })
            .collect::<Result<_, _>>()?;
        if ids.len() != count {
            return Err(schema(
                line_no,
                format!("`{tag}` lists {} ids, head says {count}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n_buses) {
            return Err(schema(line_no, format!("`{tag}` id {bad} out of range")));
        }
        Ok(ids)
    };
    let controlled = read_set(&mut r, "controlled")?;
    let safety = read_set(&mut r, "safety")?;

    let (edges_line, fields) = r.section("edges", 1)?;
    let mut edges = Vec::with_capacity(fields[0]);
    for _ in 0..fields[0] {
        let (line_no, line) = r.next_line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(schema(line_no, "edge line needs `from to`"));
        }
        let a: usize = parts[0]
            .parse()
            .map_err(|_| schema(line_no, "bad bus index"))?;
        let b: usize = parts[1]
            .parse()
            .map_err(|_| schema(line_no, "bad bus index"))?;
        if a >= n_buses || b >= n_buses {
            return Err(schema(line_no, format!("edge ({a},{b}) out of range")));
        }
        edges.push((a, b));
    }
    if edges.len() != n_edges {
        return Err(schema(
            edges_line,
            format!("{} edges listed, dims says {n_edges}", edges.len()),
        ));
    }

    let (line_no, line) = r.next_line()?;
    let constant = match line.strip_prefix("constant ") {
        Some(rest) => parse_f64(line_no, rest.trim())?,
        None => return Err(schema(line_no, "expected `constant <value>`")),
    };

    let (line_no, line) = r.next_line()?;
    let sign_pattern: Vec<f64> = match line.strip_prefix("sign ") {
        Some(rest) => {
            let mut parts = rest.split_whitespace();
            let count: usize = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| schema(line_no, "bad count in `sign`"))?;
            let vals: Vec<f64> = parts
                .map(|p| parse_f64(line_no, p))
                .collect::<Result<_, _>>()?;
            if vals.len() != count || vals.iter().any(|v| v.abs() != 1.0) {
                return Err(schema(line_no, "`sign` must list ±1 entries"));
            }
            vals
        }
        None => return Err(schema(line_no, "expected `sign <count> <±1...>`")),
    };

    let dims = QpDims {
        n_buses,
        n_edges,
        horizon,
        controlled,
        safety,
    };
    let dim = dims.dim();
    let n_eq = dims.n_eq();
    let n_ineq = dims.n_ineq();

    let h = load_matrix(&mut r, "h")?;
    let f = load_vector(&mut r, "f")?;
    let r1 = load_matrix(&mut r, "r1")?;
    let r1_rhs = load_vector(&mut r, "r1_rhs")?;
    let r2 = load_matrix(&mut r, "r2")?;
    let r2_rhs = load_vector(&mut r, "r2_rhs")?;
    let var_owner = load_owners(&mut r, "var_owner")?;
    let ineq_owner = load_owners(&mut r, "ineq_owner")?;
    let eq_owner = load_owners(&mut r, "eq_owner")?;

    let checks: [(&str, usize, usize); 9] = [
        ("h rows", h.nrows(), dim),
        ("h cols", h.ncols(), dim),
        ("f", f.len(), dim),
        ("r1 cols", r1.ncols(), dim),
        ("r1_rhs", r1_rhs.len(), r1.nrows()),
        ("r2 cols", r2.ncols(), dim),
        ("r2_rhs", r2_rhs.len(), r2.nrows()),
        ("var_owner", var_owner.len(), dim),
        ("sign", sign_pattern.len(), dims.controlled.len()),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(schema(0, format!("{what} has size {got}, expected {want}")));
        }
    }
    if r1.nrows() != n_ineq || r2.nrows() != n_eq {
        return Err(schema(
            0,
            format!(
                "constraint counts {}x{} disagree with dims ({n_ineq} inequalities, {n_eq} equalities)",
                r1.nrows(),
                r2.nrows()
            ),
        ));
    }
    if ineq_owner.len() != r1.nrows() || eq_owner.len() != r2.nrows() {
        return Err(schema(0, "owner lists disagree with constraint counts"));
    }

    Ok(QpInstance {
        h,
        f,
        constant,
        r1,
        r1_rhs,
        r2,
        r2_rhs,
        var_owner,
        ineq_owner,
        eq_owner,
        sign_pattern,
        dims,
        edges,
    })
}
