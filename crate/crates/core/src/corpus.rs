//! Columns, repositories and their on-disk forms.
//!
//! A [`Column`] is a set of cell strings kept in first-occurrence order along
//! with the table metadata the contextualizer can render. A [`Repository`] is
//! the searchable collection of target columns, sorted by id, together with
//! the document frequency of every cell value.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::{Error, Result};

/// Minimum number of distinct cells a column needs to enter a repository.
pub const MIN_COLUMN_CELLS: usize = 5;

const REPO_MAGIC: &[u8; 4] = b"LJN1";
const REPO_VERSION: u32 = 1;

/// A deduplicated column of cell values plus table metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Column {
    pub id: String,
    pub table_title: String,
    pub column_name: String,
    pub table_context: String,
    cells: Vec<String>,
}

impl Column {
    /// Builds a column, trimming cells, dropping empty ones and keeping the
    /// first occurrence of each value.
    pub fn new<I, S>(id: impl Into<String>, cells: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let id = id.into();
        let cells = dedup_cells(cells);
        if cells.is_empty() {
            return Err(Error::EmptyColumn(id));
        }
        Ok(Column {
            id,
            table_title: String::new(),
            column_name: String::new(),
            table_context: String::new(),
            cells,
        })
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.table_title = title.into();
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.column_name = name.into();
        self
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.table_context = context.into();
        self
    }

    pub fn cells(&self) -> &[String] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    /// Always false for a constructed column; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Same column with its cells in a different order. `order` must be a
    /// permutation of `0..len()`.
    pub fn permuted(&self, order: &[usize]) -> Column {
        debug_assert_eq!(order.len(), self.cells.len());
        Column {
            cells: order.iter().map(|&i| self.cells[i].clone()).collect(),
            ..self.clone()
        }
    }
}

fn dedup_cells<I, S>(cells: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for cell in cells {
        let cell = cell.as_ref().trim();
        if cell.is_empty() || seen.contains(cell) {
            continue;
        }
        seen.insert(cell.to_owned());
        out.push(cell.to_owned());
    }
    out
}

/// JSON-lines record for a column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnRecord {
    pub id: String,
    #[serde(default)]
    pub table_title: String,
    #[serde(default)]
    pub column_name: String,
    #[serde(default)]
    pub table_context: String,
    pub cells: Vec<String>,
}

impl TryFrom<ColumnRecord> for Column {
    type Error = Error;

    fn try_from(r: ColumnRecord) -> Result<Column> {
        Ok(Column::new(r.id, r.cells)?
            .with_title(r.table_title)
            .with_name(r.column_name)
            .with_context(r.table_context))
    }
}

impl From<&Column> for ColumnRecord {
    fn from(c: &Column) -> Self {
        ColumnRecord {
            id: c.id.clone(),
            table_title: c.table_title.clone(),
            column_name: c.column_name.clone(),
            table_context: c.table_context.clone(),
            cells: c.cells.clone(),
        }
    }
}

impl<'de> Deserialize<'de> for Column {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let record = ColumnRecord::deserialize(d)?;
        Column::try_from(record).map_err(serde::de::Error::custom)
    }
}

/// Reads one column per non-blank line.
pub fn read_jsonl_columns<R: BufRead>(reader: R) -> Result<Vec<Column>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ColumnRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        out.push(Column::try_from(record)?);
    }
    Ok(out)
}

pub fn write_jsonl_columns<'a, W, I>(mut writer: W, columns: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Column>,
{
    for c in columns {
        serde_json::to_writer(&mut writer, &ColumnRecord::from(c))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Number of repository columns containing a cell value.
pub trait DocFreq {
    fn doc_freq(&self, cell: &str) -> u32;
}

impl DocFreq for HashMap<String, u32> {
    fn doc_freq(&self, cell: &str) -> u32 {
        self.get(cell).copied().unwrap_or(0)
    }
}

/// Every value has the same frequency, so frequency ordering degenerates to
/// the original cell order.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformDocFreq;

impl DocFreq for UniformDocFreq {
    fn doc_freq(&self, _cell: &str) -> u32 {
        1
    }
}

/// Immutable collection of target columns, ordered by ascending id.
#[derive(Debug, Clone, Default)]
pub struct Repository {
    columns: Vec<Column>,
    positions: HashMap<String, usize>,
    doc_freq: HashMap<String, u32>,
}

impl PartialEq for Repository {
    fn eq(&self, other: &Self) -> bool {
        self.columns == other.columns
    }
}

impl Repository {
    pub fn build(mut columns: Vec<Column>) -> Result<Self> {
        columns.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = columns.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::DuplicateId(w[0].id.clone()));
        }
        let positions = columns
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), i))
            .collect();
        let mut doc_freq: HashMap<String, u32> = HashMap::new();
        for c in &columns {
            // cells are distinct within a column, so each column counts once
            for cell in &c.cells {
                *doc_freq.entry(cell.clone()).or_insert(0) += 1;
            }
        }
        Ok(Repository {
            columns,
            positions,
            doc_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Columns in ascending id order; a column's position doubles as its
    /// rank in id order.
    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, pos: usize) -> &Column {
        &self.columns[pos]
    }

    pub fn get(&self, id: &str) -> Option<&Column> {
        self.position(id).map(|i| &self.columns[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn doc_freq_map(&self) -> &HashMap<String, u32> {
        &self.doc_freq
    }

    pub fn into_columns(self) -> Vec<Column> {
        self.columns
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, REPO_MAGIC, REPO_VERSION)?;
        w.write_u64::<LittleEndian>(self.columns.len() as u64)?;
        for c in &self.columns {
            binio::write_str(w, &c.id)?;
            binio::write_str(w, &c.table_title)?;
            binio::write_str(w, &c.column_name)?;
            binio::write_str(w, &c.table_context)?;
            w.write_u64::<LittleEndian>(c.cells.len() as u64)?;
            for cell in &c.cells {
                binio::write_str(w, cell)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, REPO_MAGIC, REPO_VERSION)?;
        let n = binio::read_len(r, u32::MAX as u64, "column")?;
        let mut columns = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let id = binio::read_str(r)?;
            let title = binio::read_str(r)?;
            let name = binio::read_str(r)?;
            let context = binio::read_str(r)?;
            let ncells = binio::read_len(r, u32::MAX as u64, "cell")?;
            let mut cells = Vec::with_capacity(ncells.min(1 << 16));
            for _ in 0..ncells {
                cells.push(binio::read_str(r)?);
            }
            let col = Column::new(id, &cells)?
                .with_title(title)
                .with_name(name)
                .with_context(context);
            if col.cells.len() != cells.len() {
                return Err(Error::Format(format!("column {:?} has non-canonical cells", col.id)));
            }
            columns.push(col);
        }
        binio::expect_eof(r)?;
        Repository::build(columns)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

impl DocFreq for Repository {
    fn doc_freq(&self, cell: &str) -> u32 {
        self.doc_freq.doc_freq(cell)
    }
}

/// A parsed delimited table with optional `# title:` / `# context:` lines
/// ahead of the header row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TableSource {
    pub title: String,
    pub context: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TableSource {
    pub fn parse<R: Read>(mut reader: R, delimiter: u8) -> Result<Self> {
        let mut text = String::new();
        reader
            .read_to_string(&mut text)
            .map_err(|e| Error::Parse(e.to_string()))?;
        let mut title = String::new();
        let mut context = String::new();
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let Some(meta) = line.trim_start().strip_prefix('#') else {
                break;
            };
            body_start += line.len();
            let meta = meta.trim();
            if let Some(v) = meta.strip_prefix("title:") {
                title = v.trim().to_owned();
            } else if let Some(v) = meta.strip_prefix("context:") {
                context = v.trim().to_owned();
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .flexible(false)
            .from_reader(&text.as_bytes()[body_start..]);
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect::<Vec<_>>();
        if header.is_empty() {
            return Err(Error::Parse("table has no header row".into()));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            rows.push(rec.iter().map(str::to_owned).collect());
        }
        Ok(TableSource {
            title,
            context,
            header,
            rows,
        })
    }

    pub fn width(&self) -> usize {
        self.header.len()
    }

    fn column_values(&self, index: usize) -> impl Iterator<Item = &str> {
        self.rows.iter().map(move |r| r[index].as_str())
    }
}

/// Which source column becomes the table's key column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySelector {
    ExplicitIndex(usize),
    /// The column with the most distinct non-empty values; ties go to the
    /// leftmost.
    MaxDistinct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestWarning {
    TooShort { column_index: usize, distinct: usize },
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub columns: Vec<Column>,
    pub warnings: Vec<IngestWarning>,
}

/// Extracts the key column of `src` as `"{table_id}:{index}"`.
pub fn ingest_table(
    src: &TableSource,
    table_id: &str,
    key: KeySelector,
    min_cells: usize,
) -> Result<Ingested> {
    let width = src.width();
    let index = match key {
        KeySelector::ExplicitIndex(i) if i >= width => {
            return Err(Error::ColumnOutOfBounds { index: i, width })
        }
        KeySelector::ExplicitIndex(i) => i,
        KeySelector::MaxDistinct => {
            let mut best = (0, 0);
            for i in 0..width {
                let n = dedup_cells(src.column_values(i)).len();
                if n > best.1 {
                    best = (i, n);
                }
            }
            best.0
        }
    };
    let cells = dedup_cells(src.column_values(index));
    let mut out = Ingested::default();
    if cells.len() < min_cells.max(1) {
        log::warn!(
            "table {table_id}: key column {index} has {} distinct cells, below {min_cells}",
            cells.len()
        );
        out.warnings.push(IngestWarning::TooShort {
            column_index: index,
            distinct: cells.len(),
        });
        return Ok(out);
    }
    let col = Column::new(format!("{table_id}:{index}"), cells)?
        .with_title(src.title.clone())
        .with_name(src.header[index].trim())
        .with_context(src.context.clone());
    out.columns.push(col);
    Ok(out)
}

/// Drops columns below the admission size, returning the rejected ids.
pub fn admit(columns: Vec<Column>, min_cells: usize) -> (Vec<Column>, Vec<String>) {
    let (keep, drop): (Vec<_>, Vec<_>) = columns.into_iter().partition(|c| c.len() >= min_cells);
    (keep, drop.into_iter().map(|c| c.id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(text: &str) -> TableSource {
        TableSource::parse(text.as_bytes(), b',').unwrap()
    }

    #[test]
    fn dedup_trims_and_keeps_first_occurrence() {
        let c = Column::new("c", [" b", "a", "b ", "", "  ", "c", "a"]).unwrap();
        assert_eq!(c.cells(), ["b", "a", "c"]);
    }

    #[test]
    fn empty_column_rejected() {
        assert!(matches!(Column::new("e", ["", " "]), Err(Error::EmptyColumn(_))));
    }

    #[test]
    fn too_short_key_column_is_rejected_with_warning() {
        let src = csv("k\na\na\nb\n\n");
        let out = ingest_table(&src, "t", KeySelector::ExplicitIndex(0), MIN_COLUMN_CELLS).unwrap();
        assert!(out.columns.is_empty());
        assert_eq!(
            out.warnings,
            vec![IngestWarning::TooShort { column_index: 0, distinct: 2 }]
        );
        // `[a, a, b, ""]` as in a ragged-free single column: 2 distinct < 5
        let src = csv("k\na\na\nb\n\"\"\n");
        let out = ingest_table(&src, "t", KeySelector::MaxDistinct, MIN_COLUMN_CELLS).unwrap();
        assert!(out.columns.is_empty());
    }

    #[test]
    fn max_distinct_picks_widest_column() {
        let src = csv("# title: Things\nname,kind\nx1,a\nx2,b\nx3,c\nx4,a\nx5,b\n");
        let out = ingest_table(&src, "t", KeySelector::MaxDistinct, MIN_COLUMN_CELLS).unwrap();
        assert_eq!(out.columns.len(), 1);
        let c = &out.columns[0];
        assert_eq!(c.id, "t:0");
        assert_eq!(c.cells(), ["x1", "x2", "x3", "x4", "x5"]);
        assert_eq!(c.column_name, "name");
        assert_eq!(c.table_title, "Things");
    }

    #[test]
    fn explicit_index_out_of_bounds() {
        let src = csv("a,b\n1,2\n");
        assert!(matches!(
            ingest_table(&src, "t", KeySelector::ExplicitIndex(2), 1),
            Err(Error::ColumnOutOfBounds { index: 2, width: 2 })
        ));
    }

    #[test]
    fn ragged_rows_fail_to_parse() {
        assert!(matches!(
            TableSource::parse("a,b\n1,2\n3\n".as_bytes(), b','),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn quoted_fields_and_tsv() {
        let src = csv("name\n\"Smith, J\"\n\"say \"\"hi\"\"\"\n");
        assert_eq!(src.rows, vec![vec!["Smith, J".to_string()], vec!["say \"hi\"".to_string()]]);
        let tsv = TableSource::parse("a\tb\n1\t2\n".as_bytes(), b'\t').unwrap();
        assert_eq!(tsv.rows, vec![vec!["1".to_string(), "2".to_string()]]);
    }

    #[test]
    fn small_csv_dedup_matches_set_build() {
        let src = csv("a,b\nx,1\nx,2\ny,1\n");
        for i in 0..2 {
            let out = ingest_table(&src, "t", KeySelector::ExplicitIndex(i), 1).unwrap();
            let set: HashSet<&str> = src.rows.iter().map(|r| r[i].as_str()).collect();
            assert_eq!(out.columns[0].len(), set.len());
        }
    }

    #[test]
    fn doc_freq_counts_columns() {
        let a = Column::new("a", ["GE", "Apple"]).unwrap();
        let b = Column::new("b", ["GE", "IBM"]).unwrap();
        let repo = Repository::build(vec![b, a]).unwrap();
        assert_eq!(repo.doc_freq("GE"), 2);
        assert_eq!(repo.doc_freq("IBM"), 1);
        assert_eq!(repo.doc_freq("nope"), 0);
        assert_eq!(repo.column(0).id, "a");
        assert_eq!(repo.position("b"), Some(1));
    }

    #[test]
    fn empty_repository() {
        let repo = Repository::build(vec![]).unwrap();
        assert!(repo.is_empty());
        assert!(repo.doc_freq_map().is_empty());
        let mut buf = Vec::new();
        repo.write_to(&mut buf).unwrap();
        assert_eq!(Repository::read_from(&mut buf.as_slice()).unwrap(), repo);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = Column::new("a", ["x"]).unwrap();
        assert!(matches!(
            Repository::build(vec![a.clone(), a]),
            Err(Error::DuplicateId(id)) if id == "a"
        ));
    }

    #[test]
    fn wrong_magic_is_a_version_error() {
        let mut bytes = b"XXXX\x01\0\0\0".to_vec();
        bytes.extend([0u8; 8]);
        assert!(matches!(
            Repository::read_from(&mut bytes.as_slice()),
            Err(Error::Version(_))
        ));
        let mut bytes = b"LJN1\x09\0\0\0".to_vec();
        assert!(matches!(
            Repository::read_from(&mut bytes.as_slice()),
            Err(Error::Version(_))
        ));
        bytes.clear();
        assert!(matches!(Repository::read_from(&mut bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let repo = Repository::build(vec![Column::new("a", ["x", "y"]).unwrap()]).unwrap();
        let mut buf = Vec::new();
        repo.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(Repository::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn jsonl_round_trip_keeps_metadata() {
        let c = Column::new("q", ["Apple", "GE"])
            .unwrap()
            .with_title("Company information")
            .with_name("Company")
            .with_context("ctx");
        let mut buf = Vec::new();
        write_jsonl_columns(&mut buf, [&c]).unwrap();
        let back = read_jsonl_columns(buf.as_slice()).unwrap();
        assert_eq!(back, vec![c]);
        let partial = read_jsonl_columns(r#"{"id":"z","cells":["a","a"," b"]}"#.as_bytes()).unwrap();
        assert_eq!(partial[0].cells(), ["a", "b"]);
        assert_eq!(partial[0].table_title, "");
    }
}
