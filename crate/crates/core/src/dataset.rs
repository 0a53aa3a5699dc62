//! Observation sets on an `n x p` grid.
//!
//! An [`ObservationSet`] is the set `S` of observed cells. Nothing requires it
//! to be a full matrix or to arise from a missing-data mechanism: it can be an
//! arbitrary region such as a window with a hole cut out of it.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FpcaError, Result};
use crate::rng::{derive_seed, seeded};

/// Maximum number of redraws when a random split leaves a row or column
/// under-covered.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Observed cells `(row, col, value)` on an `n_rows x n_cols` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<Entry>,
}

impl ObservationSet {
    /// Validates dimensions, index ranges, and uniqueness of cells.
    pub fn new(n_rows: usize, n_cols: usize, entries: Vec<Entry>) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(invalid("grid dimensions must be positive"));
        }
        if entries.is_empty() {
            return Err(FpcaError::NoObservations);
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.row >= n_rows || e.col >= n_cols {
                return Err(FpcaError::IndexOutOfRange {
                    row: e.row,
                    col: e.col,
                    n_rows,
                    n_cols,
                });
            }
            if !seen.insert((e.row, e.col)) {
                return Err(FpcaError::Validation(format!(
                    "duplicate cell ({}, {})",
                    e.row, e.col
                )));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            entries,
        })
    }

    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let entries = triplets
            .into_iter()
            .map(|(row, col, value)| Entry { row, col, value })
            .collect();
        Self::new(n_rows, n_cols, entries)
    }

    /// Every cell of a dense row-major matrix.
    pub fn from_dense(n_rows: usize, n_cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n_rows * n_cols {
            return Err(FpcaError::DimensionMismatch(format!(
                "expected {} values, got {}",
                n_rows * n_cols,
                values.len()
            )));
        }
        Self::from_triplets(
            n_rows,
            n_cols,
            (0..n_rows).flat_map(|i| (0..n_cols).map(move |j| (i, j, values[i * n_cols + j]))),
        )
    }

    fn from_parts_unchecked(n_rows: usize, n_cols: usize, entries: Vec<Entry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(FpcaError::NoObservations);
        }
        Ok(Self {
            n_rows,
            n_cols,
            entries,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// `|S|`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.n_rows * self.n_cols
    }

    pub fn row_coverage(&self) -> Vec<usize> {
        let mut cover = vec![0; self.n_rows];
        for e in &self.entries {
            cover[e.row] += 1;
        }
        cover
    }

    pub fn col_coverage(&self) -> Vec<usize> {
        let mut cover = vec![0; self.n_cols];
        for e in &self.entries {
            cover[e.col] += 1;
        }
        cover
    }

    /// Smallest number of observations in any row or column.
    pub fn min_coverage(&self) -> usize {
        let r = self.row_coverage().into_iter().min().unwrap_or(0);
        let c = self.col_coverage().into_iter().min().unwrap_or(0);
        r.min(c)
    }

    /// Fails, naming the offending rows and columns, unless every row and column
    /// holds at least `min` observations.
    pub fn check_coverage(&self, min: usize) -> Result<()> {
        let rows: Vec<usize> = deficient(&self.row_coverage(), min);
        let cols: Vec<usize> = deficient(&self.col_coverage(), min);
        if rows.is_empty() && cols.is_empty() {
            return Ok(());
        }
        Err(FpcaError::Coverage(format!(
            "need at least {min} observations per row and column; deficient rows {}, deficient columns {}",
            list_preview(&rows),
            list_preview(&cols)
        )))
    }

    /// Dense row-major copy with `NaN` for unobserved cells.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![f64::NAN; self.n_rows * self.n_cols];
        for e in &self.entries {
            out[e.row * self.n_cols + e.col] = e.value;
        }
        out
    }

    /// Replaces the values of the cells, keeping the index set.
    pub fn with_values(&self, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let entries: Vec<Entry> = self
            .entries
            .iter()
            .zip(values)
            .map(|(e, value)| Entry { value, ..*e })
            .collect();
        if entries.len() != self.entries.len() {
            return Err(FpcaError::DimensionMismatch("value count differs from |S|".into()));
        }
        Self::from_parts_unchecked(self.n_rows, self.n_cols, entries)
    }

    /// Drops rows and columns that have no observations and renumbers the rest.
    pub fn compact(&self) -> (ObservationSet, IndexMap) {
        let rc = self.row_coverage();
        let cc = self.col_coverage();
        let rows: Vec<usize> = (0..self.n_rows).filter(|&i| rc[i] > 0).collect();
        let cols: Vec<usize> = (0..self.n_cols).filter(|&j| cc[j] > 0).collect();
        let mut row_new = vec![usize::MAX; self.n_rows];
        let mut col_new = vec![usize::MAX; self.n_cols];
        for (k, &i) in rows.iter().enumerate() {
            row_new[i] = k;
        }
        for (k, &j) in cols.iter().enumerate() {
            col_new[j] = k;
        }
        let entries = self
            .entries
            .iter()
            .map(|e| Entry {
                row: row_new[e.row],
                col: col_new[e.col],
                value: e.value,
            })
            .collect();
        let set = ObservationSet {
            n_rows: rows.len(),
            n_cols: cols.len(),
            entries,
        };
        (set, IndexMap { rows, cols })
    }

    /// Writes the `row,col,value` coordinate format.
    pub fn write_coordinate_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_cells(writer, self.entries.iter().map(|e| (e.row, e.col, e.value)))
    }

    pub fn save_coordinate_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_coordinate_csv(std::io::BufWriter::new(File::create(path)?))
    }
}

/// Writes `row,col,value` triplets with a header. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_cells<W: Write>(
    mut writer: W,
    cells: impl IntoIterator<Item = (usize, usize, f64)>,
) -> Result<()> {
    writeln!(writer, "row,col,value")?;
    for (row, col, value) in cells {
        writeln!(writer, "{row},{col},{value:?}")?;
    }
    writer.flush()?;
    Ok(())
}

fn deficient(cover: &[usize], min: usize) -> Vec<usize> {
    cover
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < min)
        .map(|(i, _)| i)
        .collect()
}

fn list_preview(idx: &[usize]) -> String {
    if idx.is_empty() {
        return "[]".into();
    }
    let shown: Vec<String> = idx.iter().take(10).map(|i| i.to_string()).collect();
    if idx.len() > 10 {
        format!("[{}, ... ({} total)]", shown.join(", "), idx.len())
    } else {
        format!("[{}]", shown.join(", "))
    }
}

/// Original indices of the rows and columns kept by [`ObservationSet::compact`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

/// Training and test cells drawn from one observation set.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub train: ObservationSet,
    pub test: ObservationSet,
    /// Seed of the draw that was accepted.
    pub seed: u64,
}

/// Half-open rectangle `[r0, r1) x [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl Rect {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Result<Self> {
        if r1 < r0 || c1 < c0 {
            return Err(invalid(format!(
                "rectangle ({r0},{c0},{r1},{c1}) has negative extent"
            )));
        }
        Ok(Self { r0, c0, r1, c1 })
    }

    pub fn is_empty(&self) -> bool {
        self.r0 == self.r1 || self.c0 == self.c1
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.r0..self.r1).contains(&row) && (self.c0..self.c1).contains(&col)
    }

    /// True when `other` lies inside `self`. Empty rectangles are inside everything.
    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.is_empty()
            || (other.r0 >= self.r0 && other.r1 <= self.r1 && other.c0 >= self.c0 && other.c1 <= self.c1)
    }

    pub fn n_rows(&self) -> usize {
        self.r1 - self.r0
    }

    pub fn n_cols(&self) -> usize {
        self.c1 - self.c0
    }
}

impl FromStr for Rect {
    type Err = FpcaError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(invalid(format!("expected r0,c0,r1,c1, got '{s}'")));
        }
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| invalid(format!("bad rectangle coordinate '{p}'")))?;
        }
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.r0, self.c0, self.r1, self.c1)
    }
}

/// Reads the coordinate format. Dimensions default to one past the largest
/// index; `dims` overrides them.
pub fn read_coordinate_csv<R: Read>(
    reader: R,
    dims: Option<(usize, usize)>,
) -> Result<ObservationSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| FpcaError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    if names != ["row", "col", "value"] {
        return Err(FpcaError::Parse {
            line: 1,
            message: format!("expected header 'row,col,value', got '{}'", names.join(",")),
        });
    }
    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| FpcaError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(FpcaError::Parse {
                line,
                message: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let parse_idx = |s: &str| {
            s.parse::<usize>().map_err(|_| FpcaError::Parse {
                line,
                message: format!("bad index '{s}'"),
            })
        };
        let row = parse_idx(&record[0])?;
        let col = parse_idx(&record[1])?;
        let value: f64 = record[2].parse().map_err(|_| FpcaError::Parse {
            line,
            message: format!("bad value '{}'", &record[2]),
        })?;
        if !value.is_finite() {
            return Err(FpcaError::Parse {
                line,
                message: format!("non-finite value '{}'", &record[2]),
            });
        }
        entries.push(Entry { row, col, value });
    }
    if entries.is_empty() {
        return Err(FpcaError::NoObservations);
    }
    let (n_rows, n_cols) = dims.unwrap_or_else(|| {
        let r = entries.iter().map(|e| e.row).max().unwrap_or(0) + 1;
        let c = entries.iter().map(|e| e.col).max().unwrap_or(0) + 1;
        (r, c)
    });
    ObservationSet::new(n_rows, n_cols, entries)
}

pub fn load_coordinate_csv(
    path: impl AsRef<Path>,
    dims: Option<(usize, usize)>,
) -> Result<ObservationSet> {
    read_coordinate_csv(File::open(path)?, dims)
}

/// Reads a headerless rectangular grid; cells equal to `na_token` are left out of `S`.
pub fn read_dense_csv<R: Read>(reader: R, na_token: &str) -> Result<ObservationSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut n_cols = None;
    let mut n_rows = 0;
    let mut entries = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| FpcaError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let line = i + 1;
        match n_cols {
            None => n_cols = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(FpcaError::Parse {
                    line,
                    message: format!("ragged row: expected {w} fields, got {}", record.len()),
                })
            }
            _ => {}
        }
        for (j, field) in record.iter().enumerate() {
            if field == na_token {
                continue;
            }
            let value: f64 = field.parse().map_err(|_| FpcaError::Parse {
                line,
                message: format!("bad value '{field}' in column {j}"),
            })?;
            if !value.is_finite() {
                return Err(FpcaError::Parse {
                    line,
                    message: format!("non-finite value '{field}' in column {j}"),
                });
            }
            entries.push(Entry { row: i, col: j, value });
        }
        n_rows += 1;
    }
    let n_cols = n_cols.unwrap_or(0);
    if entries.is_empty() {
        return Err(FpcaError::NoObservations);
    }
    ObservationSet::new(n_rows, n_cols, entries)
}

pub fn load_dense_csv(path: impl AsRef<Path>, na_token: &str) -> Result<ObservationSet> {
    read_dense_csv(File::open(path)?, na_token)
}

/// Cells of `full` inside `outer` but outside `inner`.
///
/// The result lives on the grid spanned by `outer`: cell `(r, c)` of `full`
/// becomes `(r - outer.r0, c - outer.c0)`. When `inner == outer` the region is
/// empty, which is an error unless `allow_empty` is set (then `Ok(None)`).
pub fn window_minus_window(
    full: &ObservationSet,
    outer: Rect,
    inner: Rect,
    allow_empty: bool,
) -> Result<Option<ObservationSet>> {
    if outer.is_empty() || outer.r1 > full.n_rows || outer.c1 > full.n_cols {
        return Err(invalid(format!(
            "outer window {outer} must be non-empty and inside the {}x{} grid",
            full.n_rows, full.n_cols
        )));
    }
    if !outer.contains_rect(&inner) {
        return Err(invalid(format!(
            "inner window {inner} is not contained in outer window {outer}"
        )));
    }
    let entries: Vec<Entry> = full
        .entries
        .iter()
        .filter(|e| outer.contains(e.row, e.col) && !inner.contains(e.row, e.col))
        .map(|e| Entry {
            row: e.row - outer.r0,
            col: e.col - outer.c0,
            value: e.value,
        })
        .collect();
    if entries.is_empty() {
        return if allow_empty {
            Ok(None)
        } else {
            Err(FpcaError::NoObservations)
        };
    }
    Ok(Some(ObservationSet {
        n_rows: outer.n_rows(),
        n_cols: outer.n_cols(),
        entries,
    }))
}

/// Removes each cell independently with probability `tau`.
pub fn apply_missing_mechanism(full: &ObservationSet, tau: f64, seed: u64) -> Result<ObservationSet> {
    if !(0.0..1.0).contains(&tau) {
        return Err(invalid(format!("missing probability must lie in [0, 1), got {tau}")));
    }
    let mut rng = seeded(seed);
    let entries: Vec<Entry> = full
        .entries
        .iter()
        .filter(|_| rng.random::<f64>() >= tau)
        .copied()
        .collect();
    ObservationSet::from_parts_unchecked(full.n_rows, full.n_cols, entries)
}

/// Assigns each cell to the test set with probability `q`; the training set
/// must keep at least one observation in every row and column.
pub fn random_split(s: &ObservationSet, q: f64, seed: u64) -> Result<SplitSet> {
    random_split_with_coverage(s, q, seed, 1)
}

/// Like [`random_split`], redrawing (up to [`MAX_REDRAWS`] times) until every
/// row and column of the training set holds at least `min_cover` cells.
pub fn random_split_with_coverage(
    s: &ObservationSet,
    q: f64,
    seed: u64,
    min_cover: usize,
) -> Result<SplitSet> {
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid(format!("test probability must lie in (0, 1), got {q}")));
    }
    let mut last_err = None;
    for attempt in 0..MAX_REDRAWS {
        let draw_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, attempt as u64)
        };
        let mut rng = seeded(draw_seed);
        let mut train = Vec::with_capacity(s.len());
        let mut test = Vec::new();
        for e in &s.entries {
            if rng.random::<f64>() < q {
                test.push(*e);
            } else {
                train.push(*e);
            }
        }
        if train.is_empty() || test.is_empty() {
            last_err = Some(FpcaError::Coverage("split produced an empty part".into()));
            continue;
        }
        let train = ObservationSet::from_parts_unchecked(s.n_rows, s.n_cols, train)?;
        match train.check_coverage(min_cover) {
            Ok(()) => {
                let test = ObservationSet::from_parts_unchecked(s.n_rows, s.n_cols, test)?;
                return Ok(SplitSet {
                    train,
                    test,
                    seed: draw_seed,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    let detail = last_err.map(|e| e.to_string()).unwrap_or_default();
    Err(FpcaError::Coverage(format!(
        "no valid split after {MAX_REDRAWS} draws ({detail})"
    )))
}
