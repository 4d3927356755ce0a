//! Tab-separated numeric tables with a versioned, convention-labelled header:
//!
//! ```text
//! # ricci-lab trace v1
//! # column t: flow time
//! # column max_rm: |Rm| with ...
//! t	max_rm
//! 0.0000000000000000e0	6.0000000000000000e0
//! ```

// The example above is real TSV, tabs included.
#![allow(clippy::tabs_in_doc_comments)]

use std::fmt;

use crate::conventions::Column;

const MAGIC: &str = "ricci-lab";

/// 17 significant digits, enough to round-trip every `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub kind: String,
    pub version: u32,
    /// Column names and their conventions.
    pub columns: Vec<(String, String)>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableError {
    /// 1-based line of the problem.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for TableError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for TableError {}

fn fail(line: usize, message: impl Into<String>) -> TableError {
    TableError { line, message: message.into() }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

impl Table {
    pub fn new(kind: &str, version: u32, columns: impl IntoIterator<Item = (String, String)>) -> Self {
        Table { kind: kind.to_string(), version, columns: columns.into_iter().collect(), rows: Vec::new() }
    }

    pub fn from_columns(kind: &str, version: u32, columns: &[Column]) -> Self {
        Self::new(kind, version, columns.iter().map(|c| (c.name.to_string(), c.convention.to_string())))
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|(c, _)| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn render(&self) -> String {
        let mut out = format!("# {MAGIC} {} v{}\n", self.kind, self.version);
        for (name, convention) in &self.columns {
            out.push_str(&format!("# column {name}: {convention}\n"));
        }
        let names: Vec<&str> = self.columns.iter().map(|(n, _)| n.as_str()).collect();
        out.push_str(&names.join("\t"));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }

    /// Parses the output of [`Table::render`]; anything else is rejected with its line.
    pub fn parse(text: &str) -> Result<Table, TableError> {
        let mut lines = text.split('\n').enumerate().map(|(k, l)| (k + 1, l.strip_suffix('\r').unwrap_or(l)));
        let (_, first) = lines.next().ok_or_else(|| fail(1, "empty table"))?;
        let rest = first.strip_prefix("# ").ok_or_else(|| fail(1, "expected `# ricci-lab <kind> v<version>`"))?;
        let mut parts = rest.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(fail(1, format!("expected `{MAGIC}` signature")));
        }
        let kind = parts.next().filter(|k| valid_name(k)).ok_or_else(|| fail(1, "missing table kind"))?;
        let version = parts
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| fail(1, "missing or malformed version"))?;
        if parts.next().is_some() {
            return Err(fail(1, "trailing text after the version"));
        }
        let mut table = Table::new(kind, version, Vec::new());
        let mut header = None;
        for (line, text) in lines.by_ref() {
            if let Some(decl) = text.strip_prefix("# column ") {
                let (name, convention) =
                    decl.split_once(": ").ok_or_else(|| fail(line, "expected `# column <name>: <convention>`"))?;
                if !valid_name(name) {
                    return Err(fail(line, format!("invalid column name `{name}`")));
                }
                if table.columns.iter().any(|(c, _)| c == name) {
                    return Err(fail(line, format!("duplicate column `{name}`")));
                }
                table.columns.push((name.to_string(), convention.to_string()));
            } else {
                header = Some((line, text));
                break;
            }
        }
        let (line, header) = header.ok_or_else(|| fail(1, "missing header row"))?;
        if table.columns.is_empty() {
            return Err(fail(line, "no column declarations"));
        }
        let names: Vec<&str> = header.split('\t').collect();
        if names.len() != table.columns.len() || names.iter().zip(&table.columns).any(|(a, (b, _))| a != b) {
            return Err(fail(line, "header row does not match the column declarations"));
        }
        let mut finished = false;
        for (line, text) in lines {
            if finished {
                return Err(fail(line - 1, "blank line inside the table"));
            }
            if text.is_empty() {
                finished = true;
                continue;
            }
            let cells: Vec<&str> = text.split('\t').collect();
            if cells.len() != table.columns.len() {
                return Err(fail(line, format!("expected {} fields, found {}", table.columns.len(), cells.len())));
            }
            let row = cells
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| fail(line, format!("`{c}` is not a number"))))
                .collect::<Result<Vec<f64>, _>>()?;
            table.rows.push(row);
        }
        Ok(table)
    }
}
