//! Readers and writers for every on-disk format the tool touches.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use celltopic_core::data::{encode_labels, PathwayDb};
use celltopic_core::Matrix;

use crate::error::{CliError, Result};

/// Writes through a temporary file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}:{line}: {msg}", path.display()))
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| parse_err(path, line, format_args!("not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format_args!("non-finite value {field:?}")));
    }
    Ok(v)
}

fn csv_reader(path: &Path, has_headers: bool) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn record_line(r: &csv::StringRecord) -> usize {
    r.position().map_or(0, |p| p.line() as usize)
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    parse_err(path, line, e)
}

/// Expression matrix with its row and column names.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
    pub values: Matrix,
}

fn check_unique(kind: &str, names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(CliError::Data(format!("duplicate {kind} {n:?}")));
        }
    }
    Ok(())
}

/// Reads a CSV whose header is `<id>,<col>...` and whose rows are
/// `<row name>,<value>...`.
pub fn read_named_csv(path: &Path) -> Result<NamedMatrix> {
    let mut rdr = csv_reader(path, true)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(parse_err(path, 1, "header needs an id column and at least one value column"));
    }
    let col_names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut row_names = Vec::new();
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = record_line(&rec);
        if rec.len() != header.len() {
            return Err(parse_err(path, line, format_args!("expected {} fields, found {}", header.len(), rec.len())));
        }
        row_names.push(rec[0].to_owned());
        for f in rec.iter().skip(1) {
            data.push(parse_f64(path, line, f)?);
        }
    }
    let values = Matrix::new(row_names.len(), col_names.len(), data).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(NamedMatrix { row_names, col_names, values })
}

/// Writes a named matrix. Values use the shortest representation that
/// reads back to the same `f64`.
pub fn write_named_csv(path: &Path, id_header: &str, m: &NamedMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![id_header.to_owned()];
    header.extend(m.col_names.iter().cloned());
    w.write_record(&header).map_err(|e| CliError::Data(e.to_string()))?;
    for (name, row) in m.row_names.iter().zip(m.values.iter_rows()) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| CliError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Cells × genes expression with a `cell_id` header column.
pub fn read_expression_csv(path: &Path) -> Result<NamedMatrix> {
    let m = read_named_csv(path)?;
    check_unique("gene name", &m.col_names)?;
    check_unique("cell id", &m.row_names)?;
    if let Some((i, v)) = m.values.as_slice().iter().enumerate().find(|(_, v)| **v < 0.0) {
        let row = i / m.values.cols();
        return Err(CliError::Data(format!(
            "{}: negative expression {v} for cell {:?}",
            path.display(),
            m.row_names[row]
        )));
    }
    Ok(m)
}

pub fn write_expression_csv(path: &Path, m: &NamedMatrix) -> Result<()> {
    write_named_csv(path, "cell_id", m)
}

/// MatrixMarket coordinate file, rows = cells, columns = genes, 1-based.
/// Names come from optional one-per-line files; otherwise they are
/// generated as `gene_<j>` / `cell_<i>`.
pub fn read_mtx(path: &Path, genes: Option<&Path>, cells: Option<&Path>) -> Result<NamedMatrix> {
    let mut lines = open_lines(path)?;
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header = header.map_err(|e| CliError::io(path, e))?;
    let h: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if h.len() < 5 || h[0] != "%%matrixmarket" || h[1] != "matrix" || h[2] != "coordinate" {
        return Err(parse_err(path, 1, "expected '%%MatrixMarket matrix coordinate <field> general'"));
    }
    if !matches!(h[3].as_str(), "real" | "integer") || h[4] != "general" {
        return Err(parse_err(path, 1, format_args!("unsupported MatrixMarket type {} {}", h[3], h[4])));
    }
    let mut size: Option<(usize, usize, usize)> = None;
    let mut values: Option<Matrix> = None;
    let mut seen = HashSet::new();
    for (no, line) in lines {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        match size {
            None => {
                if f.len() != 3 {
                    return Err(parse_err(path, no, "size line must be 'rows cols nnz'"));
                }
                let p = |s: &str| s.parse::<usize>().map_err(|_| parse_err(path, no, format_args!("bad size {s:?}")));
                let (r, c, nnz) = (p(f[0])?, p(f[1])?, p(f[2])?);
                size = Some((r, c, nnz));
                values = Some(Matrix::zeros(r, c));
            }
            Some((r, c, _)) => {
                if f.len() != 3 {
                    return Err(parse_err(path, no, "entry must be 'row col value'"));
                }
                let idx = |s: &str, max: usize| -> Result<usize> {
                    match s.parse::<usize>() {
                        Ok(i) if (1..=max).contains(&i) => Ok(i - 1),
                        _ => Err(parse_err(path, no, format_args!("index {s:?} out of 1..={max}"))),
                    }
                };
                let (i, j) = (idx(f[0], r)?, idx(f[1], c)?);
                let v = parse_f64(path, no, f[2])?;
                if v < 0.0 {
                    return Err(parse_err(path, no, format_args!("negative value {v}")));
                }
                if !seen.insert((i, j)) {
                    return Err(parse_err(path, no, format_args!("duplicate entry ({}, {})", i + 1, j + 1)));
                }
                values.as_mut().expect("set with size")[(i, j)] = v;
            }
        }
    }
    let (r, c, nnz) = size.ok_or_else(|| parse_err(path, 1, "missing size line"))?;
    if seen.len() != nnz {
        return Err(CliError::Data(format!("{}: header promises {nnz} entries, found {}", path.display(), seen.len())));
    }
    let col_names = match genes {
        Some(p) => read_name_list(p, c)?,
        None => (1..=c).map(|j| format!("gene_{j}")).collect(),
    };
    let row_names = match cells {
        Some(p) => read_name_list(p, r)?,
        None => (1..=r).map(|i| format!("cell_{i}")).collect(),
    };
    check_unique("gene name", &col_names)?;
    check_unique("cell id", &row_names)?;
    Ok(NamedMatrix { row_names, col_names, values: values.expect("set with size") })
}

fn read_name_list(path: &Path, expected: usize) -> Result<Vec<String>> {
    let names: Vec<String> =
        read_to_string(path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect();
    if names.len() != expected {
        return Err(CliError::Data(format!("{}: {} names for {expected} entries", path.display(), names.len())));
    }
    Ok(names)
}

pub fn write_mtx(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = String::from("%%MatrixMarket matrix coordinate real general\n");
    let nnz = m.as_slice().iter().filter(|v| **v != 0.0).count();
    out.push_str(&format!("{} {} {nnz}\n", m.rows(), m.cols()));
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = m[(i, j)];
            if v != 0.0 {
                out.push_str(&format!("{} {} {v}\n", i + 1, j + 1));
            }
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Headerless CSV of reals, one row per cell.
pub fn read_embedding_csv(path: &Path) -> Result<Matrix> {
    let mut rdr = csv_reader(path, false)?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = record_line(&rec);
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(parse_err(path, line, format_args!("expected {w} fields, found {}", rec.len())))
            }
            _ => {}
        }
        for f in rec.iter() {
            data.push(parse_f64(path, line, f)?);
        }
        rows += 1;
    }
    Matrix::new(rows, width.unwrap_or(0), data).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_embedding_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = String::new();
    for row in m.iter_rows() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Labels per cell id from a two-column CSV, in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub cell_ids: Vec<String>,
    pub names: Vec<String>,
    pub ids: Vec<usize>,
}

impl Labels {
    /// Label ids aligned to `cells`; every cell must be labelled.
    pub fn align(&self, cells: &[String]) -> Result<Vec<usize>> {
        let by_cell: HashMap<&str, usize> = self.cell_ids.iter().map(String::as_str).zip(self.ids.iter().copied()).collect();
        cells
            .iter()
            .map(|c| by_cell.get(c.as_str()).copied().ok_or_else(|| CliError::Data(format!("no label for cell {c:?}"))))
            .collect()
    }
}

/// `cell_id,label` rows; a first row exactly equal to that header is skipped.
pub fn read_labels(path: &Path) -> Result<Labels> {
    let mut rdr = csv_reader(path, false)?;
    let mut cell_ids = Vec::new();
    let mut raw = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 2 {
            return Err(parse_err(path, record_line(&rec), format_args!("expected 2 fields, found {}", rec.len())));
        }
        if i == 0 && &rec[0] == "cell_id" && &rec[1] == "label" {
            continue;
        }
        cell_ids.push(rec[0].to_owned());
        raw.push(rec[1].to_owned());
    }
    check_unique("cell id", &cell_ids)?;
    let (ids, names) = encode_labels(&raw);
    Ok(Labels { cell_ids, names, ids })
}

pub fn write_labels(path: &Path, cell_ids: &[String], labels: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cell_id", "label"]).map_err(|e| CliError::Data(e.to_string()))?;
    for (c, l) in cell_ids.iter().zip(labels) {
        w.write_record([c, l]).map_err(|e| CliError::Data(e.to_string()))?;
    }
    atomic_write(path, &w.into_inner().map_err(|e| CliError::Data(e.to_string()))?)
}

/// Tab-separated `name<TAB>description<TAB>gene...`; the description is
/// ignored.
pub fn read_gmt(path: &Path) -> Result<PathwayDb> {
    let mut db = PathwayDb::new();
    for (no, line) in open_lines(path)? {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(parse_err(path, no, format_args!("expected name, description and genes, found {} fields", fields.len())));
        }
        let genes = fields[2..].iter().map(|g| g.trim()).filter(|g| !g.is_empty());
        db.insert(fields[0].trim(), genes).map_err(|e| parse_err(path, no, e))?;
    }
    Ok(db)
}

pub fn write_gmt(path: &Path, db: &PathwayDb) -> Result<()> {
    let mut out = String::new();
    for p in db.iter() {
        out.push_str(&p.name);
        out.push_str("\tna");
        for g in &p.genes {
            out.push('\t');
            out.push_str(g);
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Top genes per topic as `{"topic_0": [...], ...}` in topic order.
pub fn write_top_genes(path: &Path, top: &[Vec<String>]) -> Result<()> {
    let map: serde_json::Map<String, serde_json::Value> =
        top.iter().enumerate().map(|(k, g)| (format!("topic_{k}"), serde_json::json!(g))).collect();
    write_json(path, &map)
}

pub fn read_top_genes(path: &Path) -> Result<Vec<Vec<String>>> {
    let map: BTreeMap<String, Vec<String>> = read_json(path)?;
    let mut out = vec![Vec::new(); map.len()];
    for (k, genes) in map {
        let idx = k
            .strip_prefix("topic_")
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&i| i < out.len())
            .ok_or_else(|| CliError::Data(format!("{}: unexpected key {k:?}", path.display())))?;
        out[idx] = genes;
    }
    Ok(out)
}

pub fn topic_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("topic_{i}")).collect()
}
