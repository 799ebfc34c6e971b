//! In-memory relational data model.
//!
//! Relations are ordered-schema tables of text cells. Every operation here is
//! a pure function returning a new relation; nothing mutates in place.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde_json::Value;

/// A single cell. `None` is SQL null and is distinct from the empty string.
pub type Cell = Option<String>;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum RelationError {
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("duplicate relation name `{0}`")]
    DuplicateRelation(String),
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("mask has {found} entries, relation has {expected} rows")]
    MaskLength { expected: usize, found: usize },
    #[error("not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("label list has {found} entries, relation has {expected} rows")]
    LabelLength { expected: usize, found: usize },
    #[error("granularity {granularity} is not supported for a {source_kind} source")]
    UnsupportedSource {
        granularity: Granularity,
        source_kind: &'static str,
    },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed {format} input: {message}")]
    Malformed {
        format: &'static str,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    name: String,
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Relation {
    pub fn new(
        name: impl Into<String>,
        columns: Vec<String>,
        rows: Vec<Vec<Cell>>,
    ) -> Result<Self, RelationError> {
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.as_str()) {
                return Err(RelationError::DuplicateColumn(c.clone()));
            }
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != columns.len() {
                return Err(RelationError::RaggedRow {
                    row: i,
                    expected: columns.len(),
                    found: r.len(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            columns,
            rows,
        })
    }

    /// Convenience constructor for tests and fixtures; every cell is non-null.
    pub fn from_strs(
        name: &str,
        columns: &[&str],
        rows: &[&[&str]],
    ) -> Result<Self, RelationError> {
        Self::new(
            name,
            columns.iter().map(|c| c.to_string()).collect(),
            rows.iter()
                .map(|r| r.iter().map(|v| Some(v.to_string())).collect())
                .collect(),
        )
    }

    pub fn empty_like(&self) -> Self {
        Self {
            name: self.name.clone(),
            columns: self.columns.clone(),
            rows: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn column_count(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Result<usize, RelationError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| RelationError::UnknownColumn(name.to_string()))
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&str> {
        self.rows.get(row)?.get(col)?.as_deref()
    }

    pub fn column_values(&self, col: usize) -> Vec<Option<&str>> {
        self.rows.iter().map(|r| r[col].as_deref()).collect()
    }

    pub fn has_nulls(&self) -> bool {
        self.rows.iter().flatten().any(Option::is_none)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        // Writing into a Vec cannot fail.
        w.write_record(&self.columns).expect("in-memory csv write");
        for r in &self.rows {
            w.write_record(r.iter().map(|c| c.as_deref().unwrap_or("")))
                .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    pub fn to_json_value(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|r| {
                    let mut m = serde_json::Map::new();
                    for (c, v) in self.columns.iter().zip(r) {
                        m.insert(
                            c.clone(),
                            v.as_ref().map_or(Value::Null, |s| Value::String(s.clone())),
                        );
                    }
                    Value::Object(m)
                })
                .collect(),
        )
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json_value()).expect("json value");
        s.push('\n');
        s
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv_string())
    }
}

/// Named collection of relations, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Database {
    relations: Vec<Relation>,
}

impl Database {
    pub fn new(relations: Vec<Relation>) -> Result<Self, RelationError> {
        let mut db = Self::default();
        for r in relations {
            db.insert(r)?;
        }
        Ok(db)
    }

    pub fn insert(&mut self, rel: Relation) -> Result<(), RelationError> {
        if self.get(rel.name()).is_some() {
            return Err(RelationError::DuplicateRelation(rel.name().to_string()));
        }
        self.relations.push(rel);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Relation> {
        self.relations.iter().find(|r| r.name() == name)
    }

    pub fn relation(&self, name: &str) -> Result<&Relation, RelationError> {
        self.get(name)
            .ok_or_else(|| RelationError::UnknownRelation(name.to_string()))
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    /// Sub-database keeping the relations at `indices`, in source order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let keep: HashSet<usize> = indices.iter().copied().collect();
        Self {
            relations: self
                .relations
                .iter()
                .enumerate()
                .filter(|(i, _)| keep.contains(i))
                .map(|(_, r)| r.clone())
                .collect(),
        }
    }

    /// Loads every `*.csv` and `*.json` file of a directory; relation names
    /// are file stems. Files are visited in name order.
    pub fn load_dir(dir: &Path, opts: &LoadOptions) -> Result<Self, RelationError> {
        let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("csv") | Some("json")
                )
            })
            .collect();
        paths.sort();
        let mut db = Self::default();
        for p in paths {
            db.insert(load_relation(&p, None, opts)?)?;
        }
        Ok(db)
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Cell,
    Row,
    Column,
    Table,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [Self::Cell, Self::Row, Self::Column, Self::Table];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cell => "cell",
            Self::Row => "row",
            Self::Column => "column",
            Self::Table => "table",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cell" => Ok(Self::Cell),
            "row" => Ok(Self::Row),
            "column" => Ok(Self::Column),
            "table" => Ok(Self::Table),
            other => Err(format!("unknown granularity `{other}`")),
        }
    }
}

/// A relational object borrowed from its source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Element<'a> {
    Cell {
        row: usize,
        col: usize,
        column: &'a str,
        value: Option<&'a str>,
    },
    Row {
        row: usize,
        columns: &'a [String],
        cells: &'a [Cell],
    },
    Column {
        col: usize,
        name: &'a str,
        values: Vec<Option<&'a str>>,
    },
    Table(&'a Relation),
}

#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Relation(&'a Relation),
    Database(&'a Database),
}

pub fn extract_elements(
    source: Source<'_>,
    g: Granularity,
) -> Result<Vec<Element<'_>>, RelationError> {
    match (source, g) {
        (Source::Relation(r), Granularity::Row) => Ok(row_elements(r)),
        (Source::Relation(r), Granularity::Column) => Ok(column_elements(r)),
        (Source::Relation(r), Granularity::Cell) => Ok(cell_elements(r)),
        (Source::Database(db), Granularity::Table) => {
            Ok(db.relations().iter().map(Element::Table).collect())
        }
        (Source::Relation(_), g) => Err(RelationError::UnsupportedSource {
            granularity: g,
            source_kind: "relation",
        }),
        (Source::Database(_), g) => Err(RelationError::UnsupportedSource {
            granularity: g,
            source_kind: "database",
        }),
    }
}

pub fn row_elements(r: &Relation) -> Vec<Element<'_>> {
    r.rows
        .iter()
        .enumerate()
        .map(|(row, cells)| Element::Row {
            row,
            columns: &r.columns,
            cells,
        })
        .collect()
}

pub fn column_elements(r: &Relation) -> Vec<Element<'_>> {
    r.columns
        .iter()
        .enumerate()
        .map(|(col, name)| Element::Column {
            col,
            name,
            values: r.column_values(col),
        })
        .collect()
}

pub fn cell_elements(r: &Relation) -> Vec<Element<'_>> {
    let mut out = Vec::with_capacity(r.row_count() * r.column_count());
    for (row, cells) in r.rows.iter().enumerate() {
        for (col, v) in cells.iter().enumerate() {
            out.push(Element::Cell {
                row,
                col,
                column: &r.columns[col],
                value: v.as_deref(),
            });
        }
    }
    out
}

pub fn project(r: &Relation, cols: &[&str]) -> Result<Relation, RelationError> {
    let idx = cols
        .iter()
        .map(|c| r.column_index(c))
        .collect::<Result<Vec<_>, _>>()?;
    Relation::new(
        r.name.clone(),
        cols.iter().map(|c| c.to_string()).collect(),
        r.rows
            .iter()
            .map(|row| idx.iter().map(|&i| row[i].clone()).collect())
            .collect(),
    )
}

pub fn project_indices(r: &Relation, idx: &[usize]) -> Relation {
    Relation {
        name: r.name.clone(),
        columns: idx.iter().map(|&i| r.columns[i].clone()).collect(),
        rows: r
            .rows
            .iter()
            .map(|row| idx.iter().map(|&i| row[i].clone()).collect())
            .collect(),
    }
}

pub fn filter_by_mask(r: &Relation, mask: &[bool]) -> Result<Relation, RelationError> {
    if mask.len() != r.row_count() {
        return Err(RelationError::MaskLength {
            expected: r.row_count(),
            found: mask.len(),
        });
    }
    Ok(Relation {
        name: r.name.clone(),
        columns: r.columns.clone(),
        rows: r
            .rows
            .iter()
            .zip(mask)
            .filter(|(_, &keep)| keep)
            .map(|(row, _)| row.clone())
            .collect(),
    })
}

pub fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

pub fn apply_permutation(r: &Relation, perm: &[usize]) -> Result<Relation, RelationError> {
    if !is_permutation(perm, r.row_count()) {
        return Err(RelationError::NotAPermutation(r.row_count()));
    }
    Ok(Relation {
        name: r.name.clone(),
        columns: r.columns.clone(),
        rows: perm.iter().map(|&i| r.rows[i].clone()).collect(),
    })
}

pub fn take(r: &Relation, n: usize) -> Relation {
    Relation {
        name: r.name.clone(),
        columns: r.columns.clone(),
        rows: r.rows.iter().take(n).cloned().collect(),
    }
}

/// Appends a column; `values` must have one entry per row.
pub fn append_column(
    r: &Relation,
    name: &str,
    values: Vec<Cell>,
) -> Result<Relation, RelationError> {
    if values.len() != r.row_count() {
        return Err(RelationError::LabelLength {
            expected: r.row_count(),
            found: values.len(),
        });
    }
    let mut columns = r.columns.clone();
    columns.push(name.to_string());
    let rows = r
        .rows
        .iter()
        .zip(values)
        .map(|(row, v)| {
            let mut row = row.clone();
            row.push(v);
            row
        })
        .collect();
    Relation::new(r.name.clone(), columns, rows)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupKey<'a> {
    Columns(&'a [String]),
    Labels(&'a [String]),
}

/// Groups ordered by first appearance; rows keep their relative order inside a group.
pub fn group_rows(
    r: &Relation,
    key: GroupKey<'_>,
) -> Result<Vec<(Vec<Cell>, Relation)>, RelationError> {
    let keys: Vec<Vec<Cell>> = match key {
        GroupKey::Columns(cols) => {
            let idx = cols
                .iter()
                .map(|c| r.column_index(c))
                .collect::<Result<Vec<_>, _>>()?;
            r.rows
                .iter()
                .map(|row| idx.iter().map(|&i| row[i].clone()).collect())
                .collect()
        }
        GroupKey::Labels(labels) => {
            if labels.len() != r.row_count() {
                return Err(RelationError::LabelLength {
                    expected: r.row_count(),
                    found: labels.len(),
                });
            }
            labels.iter().map(|l| vec![Some(l.clone())]).collect()
        }
    };
    let mut groups: Vec<(Vec<Cell>, Relation)> = Vec::new();
    for (row, k) in r.rows.iter().zip(keys) {
        match groups.iter_mut().find(|(gk, _)| *gk == k) {
            Some((_, g)) => g.rows.push(row.clone()),
            None => {
                let mut g = r.empty_like();
                g.rows.push(row.clone());
                groups.push((k, g));
            }
        }
    }
    Ok(groups)
}

/// Concatenates relations that share a schema.
pub fn concat(
    name: &str,
    columns: &[String],
    parts: impl IntoIterator<Item = Relation>,
) -> Relation {
    Relation {
        name: name.to_string(),
        columns: columns.to_vec(),
        rows: parts.into_iter().flat_map(|p| p.rows).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparator {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparator {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Eq => "=",
            Self::Ne => "!=",
            Self::Lt => "<",
            Self::Le => "<=",
            Self::Gt => ">",
            Self::Ge => ">=",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            Self::Eq => ord == Ordering::Equal,
            Self::Ne => ord != Ordering::Equal,
            Self::Lt => ord == Ordering::Less,
            Self::Le => ord != Ordering::Greater,
            Self::Gt => ord == Ordering::Greater,
            Self::Ge => ord != Ordering::Less,
        }
    }
}

/// Numeric when both sides parse as numbers, lexicographic otherwise.
pub fn compare_text(a: &str, b: &str) -> Ordering {
    match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
        (Ok(x), Ok(y)) if !x.is_nan() && !y.is_nan() => {
            x.partial_cmp(&y).unwrap_or(Ordering::Equal)
        }
        _ => a.cmp(b),
    }
}

/// Classical `column <op> literal` filter. Null cells never satisfy a predicate.
pub fn filter_compare(
    r: &Relation,
    column: &str,
    op: Comparator,
    literal: &str,
) -> Result<Relation, RelationError> {
    let c = r.column_index(column)?;
    let mask: Vec<bool> = r
        .rows
        .iter()
        .map(|row| {
            row[c]
                .as_deref()
                .is_some_and(|v| op.holds(compare_text(v, literal)))
        })
        .collect();
    filter_by_mask(r, &mask)
}

/// Total order used for sorting: numbers first (numerically), then text.
fn sort_cmp(a: &str, b: &str) -> Ordering {
    let num = |s: &str| s.trim().parse::<f64>().ok().filter(|x| !x.is_nan());
    match (num(a), num(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.cmp(b),
    }
}

/// Stable classical ORDER BY on one column. Nulls sort last in either direction.
pub fn order_by_column(
    r: &Relation,
    column: &str,
    descending: bool,
) -> Result<Relation, RelationError> {
    let c = r.column_index(column)?;
    let mut perm: Vec<usize> = (0..r.row_count()).collect();
    perm.sort_by(
        |&a, &b| match (r.rows[a][c].as_deref(), r.rows[b][c].as_deref()) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Greater,
            (Some(_), None) => Ordering::Less,
            (Some(x), Some(y)) => {
                let o = sort_cmp(x, y);
                if descending {
                    o.reverse()
                } else {
                    o
                }
            }
        },
    );
    apply_permutation(r, &perm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Map empty CSV fields to null.
    pub empty_as_null: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            empty_as_null: true,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> RelationError {
    RelationError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn load_relation(
    path: &Path,
    format: Option<Format>,
    opts: &LoadOptions,
) -> Result<Relation, RelationError> {
    let format = format
        .or_else(|| Format::from_path(path))
        .ok_or(RelationError::Malformed {
            format: "file",
            message: format!("cannot infer format of {}", path.display()),
        })?;
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("relation");
    match format {
        Format::Csv => parse_csv(name, &text, opts),
        Format::Json => parse_json(name, &text),
    }
}

pub fn parse_csv(name: &str, text: &str, opts: &LoadOptions) -> Result<Relation, RelationError> {
    let malformed = |e: csv::Error| RelationError::Malformed {
        format: "csv",
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let columns: Vec<String> = rdr
        .headers()
        .map_err(malformed)?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(malformed)?;
        if rec.len() != columns.len() {
            return Err(RelationError::RaggedRow {
                row: i,
                expected: columns.len(),
                found: rec.len(),
            });
        }
        rows.push(
            rec.iter()
                .map(|v| (!(opts.empty_as_null && v.is_empty())).then(|| v.to_string()))
                .collect(),
        );
    }
    Relation::new(name, columns, rows)
}

pub fn parse_json(name: &str, text: &str) -> Result<Relation, RelationError> {
    let malformed = |message: String| RelationError::Malformed {
        format: "json",
        message,
    };
    let v: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let items = v
        .as_array()
        .ok_or_else(|| malformed("expected an array of objects".into()))?;
    let mut columns: Vec<String> = Vec::new();
    if let Some(first) = items.first() {
        let obj = first
            .as_object()
            .ok_or_else(|| malformed("expected an array of objects".into()))?;
        columns = obj.keys().cloned().collect();
    }
    let mut rows = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let obj = item
            .as_object()
            .ok_or_else(|| malformed(format!("element {i} is not an object")))?;
        if obj.len() != columns.len() || !columns.iter().all(|c| obj.contains_key(c)) {
            return Err(RelationError::RaggedRow {
                row: i,
                expected: columns.len(),
                found: obj.len(),
            });
        }
        let row = columns
            .iter()
            .map(|c| match &obj[c] {
                Value::Null => Ok(None),
                Value::String(s) => Ok(Some(s.clone())),
                Value::Number(n) => Ok(Some(n.to_string())),
                Value::Bool(b) => Ok(Some(b.to_string())),
                _ => Err(malformed(format!("nested value in element {i}, key `{c}`"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Relation::new(name, columns, rows)
}

pub fn write_relation(path: &Path, r: &Relation, format: Format) -> Result<(), RelationError> {
    let text = match format {
        Format::Csv => r.to_csv_string(),
        Format::Json => r.to_json_string(),
    };
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Relation {
        Relation::from_strs("t", &["k", "v"], &[&["A", "1"], &["B", "2"], &["C", "3"]]).unwrap()
    }

    #[test]
    fn rejects_ragged_and_duplicate_columns() {
        assert_eq!(
            Relation::new("t", vec!["a".into(), "a".into()], vec![]),
            Err(RelationError::DuplicateColumn("a".into()))
        );
        assert!(matches!(
            Relation::new("t", vec!["a".into()], vec![vec![None, None]]),
            Err(RelationError::RaggedRow { .. })
        ));
    }

    #[test]
    fn element_counts_by_granularity() {
        let r = Relation::from_strs("t", &["a", "b"], &[&["1", "2"], &["3", "4"], &["5", "6"]])
            .unwrap();
        assert_eq!(
            extract_elements(Source::Relation(&r), Granularity::Row)
                .unwrap()
                .len(),
            3
        );
        assert_eq!(
            extract_elements(Source::Relation(&r), Granularity::Column)
                .unwrap()
                .len(),
            2
        );
        let cells = extract_elements(Source::Relation(&r), Granularity::Cell).unwrap();
        assert_eq!(cells.len(), 6);
        assert!(matches!(
            cells[1],
            Element::Cell {
                row: 0,
                col: 1,
                value: Some("2"),
                ..
            }
        ));
        let db = Database::new(
            ["w", "x", "y", "z"]
                .iter()
                .map(|n| r.clone().with_name(*n))
                .collect(),
        )
        .unwrap();
        assert_eq!(
            extract_elements(Source::Database(&db), Granularity::Table)
                .unwrap()
                .len(),
            4
        );
        assert!(extract_elements(Source::Relation(&r), Granularity::Table).is_err());
        assert!(extract_elements(Source::Database(&db), Granularity::Row).is_err());
    }

    #[test]
    fn project_orders_and_rejects_unknown() {
        let r = abc();
        let p = project(&r, &["v", "k"]).unwrap();
        assert_eq!(p.columns(), ["v", "k"]);
        assert_eq!(p.row_count(), 3);
        assert_eq!(project(&r, &["k", "v"]).unwrap(), r);
        assert_eq!(
            project(&r, &["zz"]),
            Err(RelationError::UnknownColumn("zz".into()))
        );
    }

    #[test]
    fn mask_filtering() {
        let r = abc();
        assert_eq!(filter_by_mask(&r, &[true; 3]).unwrap(), r);
        let none = filter_by_mask(&r, &[false; 3]).unwrap();
        assert!(none.is_empty());
        assert_eq!(none.columns(), r.columns());
        let some = filter_by_mask(&r, &[true, false, true]).unwrap();
        assert_eq!(some.cell(0, 0), Some("A"));
        assert_eq!(some.cell(1, 0), Some("C"));
        assert!(matches!(
            filter_by_mask(&r, &[true]),
            Err(RelationError::MaskLength { .. })
        ));
    }

    #[test]
    fn permutations() {
        let r = abc();
        assert_eq!(apply_permutation(&r, &[0, 1, 2]).unwrap(), r);
        let p = apply_permutation(&r, &[2, 0, 1]).unwrap();
        let names: Vec<_> = (0..3).map(|i| p.cell(i, 0).unwrap()).collect();
        assert_eq!(names, ["C", "A", "B"]);
        assert!(apply_permutation(&r, &[0, 0, 1]).is_err());
        assert!(apply_permutation(&r, &[0, 1]).is_err());
    }

    #[test]
    fn take_bounds() {
        let r = abc();
        assert!(take(&r, 0).is_empty());
        assert_eq!(take(&r, 10), r);
        assert_eq!(take(&r, 1).row_count(), 1);
    }

    #[test]
    fn grouping_by_labels_and_columns() {
        let r = Relation::from_strs(
            "e",
            &["Enterprise"],
            &[&["Microsoft"], &["Reckitt"], &["Google"], &["P&G"]],
        )
        .unwrap();
        let labels: Vec<String> = ["tech", "retail", "tech", "retail"]
            .map(String::from)
            .to_vec();
        let g = group_rows(&r, GroupKey::Labels(&labels)).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].0, vec![Some("tech".to_string())]);
        assert_eq!(g[0].1.cell(1, 0), Some("Google"));
        assert_eq!(g[1].1.row_count(), 2);

        let cols = vec!["Enterprise".to_string()];
        assert_eq!(group_rows(&r, GroupKey::Columns(&cols)).unwrap().len(), 4);
        let same = Relation::from_strs("s", &["k"], &[&["x"], &["x"]]).unwrap();
        let cols = vec!["k".to_string()];
        assert_eq!(
            group_rows(&same, GroupKey::Columns(&cols)).unwrap().len(),
            1
        );
        assert!(group_rows(&r, GroupKey::Labels(&labels[..2])).is_err());
    }

    #[test]
    fn csv_ingestion() {
        let opts = LoadOptions::default();
        let r = parse_csv("t", "a,b\n1,2\n", &opts).unwrap();
        assert_eq!((r.row_count(), r.column_count()), (1, 2));
        let q = parse_csv("t", "a,b\nx,\"y,z\"\n", &opts).unwrap();
        assert_eq!(q.cell(0, 1), Some("y,z"));
        let n = parse_csv("t", "a,b\nx,\n", &opts).unwrap();
        assert_eq!(n.rows()[0][1], None);
        let e = parse_csv(
            "t",
            "a,b\nx,\n",
            &LoadOptions {
                empty_as_null: false,
            },
        )
        .unwrap();
        assert_eq!(e.rows()[0][1], Some(String::new()));
        assert!(matches!(
            parse_csv("t", "a,b\n1,2,3\n", &opts),
            Err(RelationError::RaggedRow { .. })
        ));
    }

    #[test]
    fn json_ingestion() {
        let r = parse_json("t", r#"[{"b": "x", "a": 1}, {"b": null, "a": 2}]"#).unwrap();
        assert_eq!(r.columns(), ["b", "a"]);
        assert_eq!(r.rows()[1], vec![None, Some("2".to_string())]);
        assert!(parse_json("t", r#"[{"a": 1}, {"b": 2}]"#).is_err());
        assert!(parse_json("t", "{}").is_err());
        let back = parse_json("t", &r.to_json_string()).unwrap();
        assert_eq!(back.columns(), r.columns());
        assert_eq!(back.rows(), r.rows());
    }

    #[test]
    fn classical_filter_and_order() {
        let r = Relation::from_strs("t", &["n"], &[&["10"], &["9"], &["b"], &["a"]]).unwrap();
        let f = filter_compare(&r, "n", Comparator::Gt, "9").unwrap();
        // "b" and "a" compare lexicographically against "9".
        assert_eq!(f.row_count(), 3);
        let o = order_by_column(&r, "n", false).unwrap();
        let v: Vec<_> = (0..4).map(|i| o.cell(i, 0).unwrap()).collect();
        assert_eq!(v, ["9", "10", "a", "b"]);
    }
}
