//! Tabular CSV / JSON reports with deterministic row order.
//!
//! Floats print in shortest round-trip form. A report may carry a provenance
//! object (the resolved run configuration); CSV writes it as a leading
//! `# {json}` comment line and JSON as a top-level `"config"` field.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Null,
}

impl Cell {
    fn rank(&self) -> u8 {
        match self {
            Cell::Null => 0,
            Cell::Int(_) | Cell::Float(_) => 1,
            Cell::Text(_) => 2,
        }
    }

    fn as_f64(&self) -> Option<f64> {
        match *self {
            Cell::Int(i) => Some(i as f64),
            Cell::Float(f) => Some(f),
            _ => None,
        }
    }

    fn cmp_key(&self, other: &Cell) -> Ordering {
        match (self, other) {
            (Cell::Int(a), Cell::Int(b)) => a.cmp(b),
            (Cell::Text(a), Cell::Text(b)) => a.cmp(b),
            (a, b) if a.rank() == 1 && b.rank() == 1 => {
                a.as_f64().unwrap().total_cmp(&b.as_f64().unwrap())
            }
            (a, b) => a.rank().cmp(&b.rank()),
        }
    }

    fn to_csv_field(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(f) => format_float(*f),
            Cell::Text(s) => s.clone(),
            Cell::Null => String::new(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Int(i) => Value::from(*i),
            Cell::Float(f) => serde_json::Number::from_f64(*f).map_or(Value::Null, Value::Number),
            Cell::Text(s) => Value::from(s.clone()),
            Cell::Null => Value::Null,
        }
    }

    /// Inverse of the CSV rendering, guided by the value's shape.
    pub fn parse_csv(field: &str) -> Cell {
        if field.is_empty() {
            Cell::Null
        } else if let Ok(i) = field.parse::<i64>() {
            Cell::Int(i)
        } else if let Ok(f) = field.parse::<f64>() {
            Cell::Float(f)
        } else {
            Cell::Text(field.to_string())
        }
    }

    pub fn from_json(v: &Value) -> Cell {
        match v {
            Value::Null => Cell::Null,
            Value::Number(n) => n
                .as_i64()
                .map(Cell::Int)
                .unwrap_or_else(|| Cell::Float(n.as_f64().unwrap_or(f64::NAN))),
            Value::String(s) => Cell::Text(s.clone()),
            other => Cell::Text(other.to_string()),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}
impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Null, Into::into)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(f: f64) -> String {
    let a = f.abs();
    if !f.is_finite() || (a != 0.0 && !(1e-5..1e16).contains(&a)) {
        format!("{f:e}")
    } else if f == f.trunc() {
        // keep a decimal point so the column stays visibly float-typed
        format!("{f:.1}")
    } else {
        format!("{f}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    /// Leading columns that define row order.
    pub key_columns: usize,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str], key_columns: usize) -> Self {
        Table {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            key_columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(LabError::Format(format!(
                "row of {} cells for {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    fn sorted_rows(&self) -> Vec<&Vec<Cell>> {
        let mut rows: Vec<&Vec<Cell>> = self.rows.iter().collect();
        let k = self.key_columns;
        rows.sort_by(|a, b| {
            a[..k]
                .iter()
                .zip(&b[..k])
                .map(|(x, y)| x.cmp_key(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        });
        rows
    }

    pub fn write_csv(&self, w: impl Write, provenance: Option<&Value>) -> Result<()> {
        let mut w = w;
        if let Some(p) = provenance {
            writeln!(w, "# {p}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.columns).map_err(csv_err)?;
        for row in self.sorted_rows() {
            out.write_record(row.iter().map(Cell::to_csv_field)).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_json(&self, mut w: impl Write, provenance: Option<&Value>) -> Result<()> {
        let rows: Vec<Value> = self
            .sorted_rows()
            .into_iter()
            .map(|row| {
                Value::Object(
                    self.columns
                        .iter()
                        .cloned()
                        .zip(row.iter().map(Cell::to_json))
                        .collect(),
                )
            })
            .collect();
        let mut doc = serde_json::Map::new();
        if let Some(p) = provenance {
            doc.insert("config".into(), p.clone());
        }
        doc.insert("columns".into(), Value::from(self.columns.clone()));
        doc.insert("rows".into(), Value::Array(rows));
        serde_json::to_writer_pretty(&mut w, &Value::Object(doc))
            .map_err(|e| LabError::Format(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }

    /// Writes the table to `path` in `format`.
    pub fn emit(&self, path: &Path, format: Format, provenance: Option<&Value>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        match format {
            Format::Csv => self.write_csv(file, provenance),
            Format::Json => self.write_json(file, provenance),
        }
    }

    pub fn read_csv(text: &str) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let columns: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec.map_err(csv_err)?.iter().map(Cell::parse_csv).collect());
        }
        Ok(Table {
            key_columns: 0,
            columns,
            rows,
        })
    }

    pub fn read_json(text: &str) -> Result<Table> {
        let doc: Value = serde_json::from_str(text).map_err(|e| LabError::Format(e.to_string()))?;
        let columns: Vec<String> = doc["columns"]
            .as_array()
            .ok_or_else(|| LabError::Format("missing columns".into()))?
            .iter()
            .filter_map(|c| c.as_str().map(String::from))
            .collect();
        let rows = doc["rows"]
            .as_array()
            .ok_or_else(|| LabError::Format("missing rows".into()))?
            .iter()
            .map(|r| columns.iter().map(|c| Cell::from_json(&r[c])).collect())
            .collect();
        Ok(Table {
            key_columns: 0,
            columns,
            rows,
        })
    }
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Format(e.to_string())
}
