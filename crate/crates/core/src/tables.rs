//! Margins, frequency tables and exact enumeration of the fixed-margin
//! table collection.
//!
//! Enumeration walks the free cells (first `R-1` rows, first `C-1` columns)
//! in row-major order with the first cell varying slowest. The last entry of
//! each row and the whole last row are forced by the margins. At every free
//! cell the admissible range is `[max(0, row_rem - cap_right), min(row_rem,
//! col_rem)]`, which leaves no dead branches: every partial assignment that
//! survives the bound completes to at least one table.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Tables visited per margins before enumeration gives up.
pub const DEFAULT_TABLE_LIMIT: usize = 5_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("invalid margins: {0}")]
    InvalidMargins(String),
    #[error("table limit of {limit} exceeded after {partial} tables")]
    LimitExceeded { limit: usize, partial: usize },
    #[error("invalid table: {0}")]
    InvalidTable(String),
}

/// Row and column totals of one two-way table.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MarginPair {
    rows: Vec<u32>,
    cols: Vec<u32>,
    total: u32,
}

impl MarginPair {
    pub fn new(rows: Vec<u32>, cols: Vec<u32>) -> Result<Self, TableError> {
        if rows.is_empty() || cols.is_empty() {
            return Err(TableError::InvalidMargins(
                "need at least one row and one column".into(),
            ));
        }
        if rows.iter().chain(cols.iter()).any(|&x| x == 0) {
            return Err(TableError::InvalidMargins(
                "all margins must be strictly positive".into(),
            ));
        }
        let row_sum: u64 = rows.iter().map(|&x| u64::from(x)).sum();
        let col_sum: u64 = cols.iter().map(|&x| u64::from(x)).sum();
        if row_sum != col_sum {
            return Err(TableError::InvalidMargins(format!(
                "row totals sum to {row_sum} but column totals sum to {col_sum}"
            )));
        }
        let total = u32::try_from(row_sum)
            .map_err(|_| TableError::InvalidMargins("grand total overflows u32".into()))?;
        Ok(Self { rows, cols, total })
    }

    pub fn rows(&self) -> &[u32] {
        &self.rows
    }

    pub fn cols(&self) -> &[u32] {
        &self.cols
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    /// Cell count `R * C`.
    pub fn cells(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    /// The independence table `n_i0 * n_0j / n`, row-major.
    pub fn independence_table(&self) -> Vec<f64> {
        let n = f64::from(self.total);
        let mut out = Vec::with_capacity(self.cells());
        for &r in &self.rows {
            for &c in &self.cols {
                out.push(f64::from(r) * f64::from(c) / n);
            }
        }
        out
    }
}

impl FromStr for MarginPair {
    type Err = TableError;

    /// Parses `"r1,r2,.../c1,c2,..."`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (rows, cols) = s.split_once('/').ok_or_else(|| {
            TableError::InvalidMargins(format!("expected 'rows/cols', got {s:?}"))
        })?;
        let parse = |part: &str| -> Result<Vec<u32>, TableError> {
            part.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<u32>()
                        .map_err(|e| TableError::InvalidMargins(format!("bad total {x:?}: {e}")))
                })
                .collect()
        };
        MarginPair::new(parse(rows)?, parse(cols)?)
    }
}

impl fmt::Display for MarginPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        write!(f, "{}/{}", join(&self.rows), join(&self.cols))
    }
}

/// An `R x C` table of nonnegative counts stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FreqTable {
    nrows: usize,
    ncols: usize,
    entries: Vec<u32>,
}

impl FreqTable {
    pub fn new(nrows: usize, ncols: usize, entries: Vec<u32>) -> Result<Self, TableError> {
        if nrows == 0 || ncols == 0 || entries.len() != nrows * ncols {
            return Err(TableError::InvalidTable(format!(
                "{} entries do not form a {nrows}x{ncols} table",
                entries.len()
            )));
        }
        Ok(Self {
            nrows,
            ncols,
            entries,
        })
    }

    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Result<Self, TableError> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != ncols) {
            return Err(TableError::InvalidTable("ragged rows".into()));
        }
        let entries = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(nrows, ncols, entries)
    }

    pub(crate) fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: vec![0; nrows * ncols],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.entries[i * self.ncols + j]
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, value: u32) {
        self.entries[i * self.ncols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.entries[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn row_sums(&self) -> Vec<u32> {
        (0..self.nrows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u32> {
        (0..self.ncols)
            .map(|j| (0..self.nrows).map(|i| self.get(i, j)).sum())
            .collect()
    }

    /// True when the row and column sums reproduce `margins`.
    pub fn has_margins(&self, margins: &MarginPair) -> bool {
        self.nrows == margins.nrows()
            && self.ncols == margins.ncols()
            && self.row_sums() == margins.rows()
            && self.col_sums() == margins.cols()
    }

    pub fn margins(&self) -> Result<MarginPair, TableError> {
        MarginPair::new(self.row_sums(), self.col_sums())
    }

    /// Rows and columns rearranged so that original category `k` lands at
    /// position `row_pos[k]` (resp. `col_pos[k]`).
    pub fn rearranged(&self, row_pos: &[usize], col_pos: &[usize]) -> FreqTable {
        let mut out = FreqTable::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for j in 0..self.ncols {
                out.set(row_pos[i], col_pos[j], self.get(i, j));
            }
        }
        out
    }
}

impl fmt::Display for FreqTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.nrows {
            let line = self
                .row(i)
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(",");
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Every table with the given margins, stored as one flat array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableCollection {
    margins: MarginPair,
    entries: Vec<u32>,
    count: usize,
}

impl TableCollection {
    pub fn margins(&self) -> &MarginPair {
        &self.margins
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Entries of table `k`, row-major.
    pub fn entries(&self, k: usize) -> &[u32] {
        let cells = self.margins.cells();
        &self.entries[k * cells..(k + 1) * cells]
    }

    pub fn table(&self, k: usize) -> FreqTable {
        FreqTable {
            nrows: self.margins.nrows(),
            ncols: self.margins.ncols(),
            entries: self.entries(k).to_vec(),
        }
    }

    /// Row-major entry slices in enumeration order.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.entries.chunks_exact(self.margins.cells())
    }

    pub fn tables(&self) -> impl ExactSizeIterator<Item = FreqTable> + '_ {
        (0..self.count).map(move |k| self.table(k))
    }

    /// Position of `table` in enumeration order, if present.
    pub fn position(&self, table: &FreqTable) -> Option<usize> {
        self.iter().position(|t| t == table.entries())
    }
}

struct Walker<'a> {
    rows: &'a [u32],
    col_rem: Vec<u32>,
    table: FreqTable,
}

impl Walker<'_> {
    fn cell<E>(
        &mut self,
        i: usize,
        j: usize,
        row_rem: u32,
        visit: &mut dyn FnMut(&FreqTable) -> Result<(), E>,
    ) -> Result<(), E> {
        let (nrows, ncols) = (self.table.nrows, self.table.ncols);
        if i + 1 == nrows {
            for (k, &rem) in self.col_rem.iter().enumerate() {
                self.table.set(i, k, rem);
            }
            return visit(&self.table);
        }
        if j + 1 == ncols {
            // guaranteed <= col_rem[j] by the lower bound at the previous cell
            self.table.set(i, j, row_rem);
            self.col_rem[j] -= row_rem;
            let res = self.cell(i + 1, 0, self.rows[i + 1], visit);
            self.col_rem[j] += row_rem;
            return res;
        }
        let cap_right: u32 = self.col_rem[j + 1..].iter().sum();
        let lo = row_rem.saturating_sub(cap_right);
        let hi = row_rem.min(self.col_rem[j]);
        for v in lo..=hi {
            self.table.set(i, j, v);
            self.col_rem[j] -= v;
            let res = self.cell(i, j + 1, row_rem - v, visit);
            self.col_rem[j] += v;
            res?;
        }
        Ok(())
    }
}

fn walk<E>(
    margins: &MarginPair,
    visit: &mut dyn FnMut(&FreqTable) -> Result<(), E>,
) -> Result<(), E> {
    let mut walker = Walker {
        rows: margins.rows(),
        col_rem: margins.cols().to_vec(),
        table: FreqTable::zeros(margins.nrows(), margins.ncols()),
    };
    walker.cell(0, 0, margins.rows()[0], visit)
}

/// Visits every table with the given margins in enumeration order without
/// storing them, threading an accumulator through `visitor`.
pub fn fold_tables<A, E, F>(margins: &MarginPair, init: A, mut visitor: F) -> Result<A, E>
where
    F: FnMut(A, &FreqTable) -> Result<A, E>,
{
    let mut acc = Some(init);
    walk(margins, &mut |t: &FreqTable| {
        let a = acc.take().expect("accumulator present between visits");
        acc = Some(visitor(a, t)?);
        Ok(())
    })?;
    Ok(acc.expect("accumulator present after walk"))
}

/// All tables with the given margins, in enumeration order. `limit` defaults
/// to [`DEFAULT_TABLE_LIMIT`].
pub fn enumerate_tables(
    margins: &MarginPair,
    limit: Option<usize>,
) -> Result<TableCollection, TableError> {
    let limit = limit.unwrap_or(DEFAULT_TABLE_LIMIT);
    let cells = margins.cells();
    let mut entries = Vec::new();
    let mut count = 0usize;
    walk(margins, &mut |t: &FreqTable| {
        if count == limit {
            return Err(TableError::LimitExceeded {
                limit,
                partial: count,
            });
        }
        entries.extend_from_slice(t.entries());
        count += 1;
        Ok(())
    })?;
    debug_assert_eq!(entries.len(), count * cells);
    Ok(TableCollection {
        margins: margins.clone(),
        entries,
        count,
    })
}

/// Number of tables with the given margins, stopping at `limit`.
pub fn count_tables(margins: &MarginPair, limit: Option<usize>) -> Result<usize, TableError> {
    let limit = limit.unwrap_or(DEFAULT_TABLE_LIMIT);
    fold_tables(margins, 0usize, |n, _| {
        if n == limit {
            Err(TableError::LimitExceeded { limit, partial: n })
        } else {
            Ok(n + 1)
        }
    })
}

/// Neumaier-compensated running sum; stays within an ulp or two of the
/// exact sum regardless of the number of terms.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::default();
        iter.into_iter().for_each(|x| acc.add(x));
        acc
    }
}

/// Cached `log k!` for `k = 0..=max`.
#[derive(Debug, Clone)]
pub struct LogFactorial {
    values: Vec<f64>,
}

impl LogFactorial {
    pub fn new(max: u32) -> Self {
        let mut values = Vec::with_capacity(max as usize + 1);
        values.push(0.0);
        let mut acc = CompensatedSum::default();
        for k in 1..=max {
            acc.add(f64::from(k).ln());
            values.push(acc.value());
        }
        Self { values }
    }

    pub fn max(&self) -> u32 {
        (self.values.len() - 1) as u32
    }

    #[inline]
    pub fn get(&self, k: u32) -> f64 {
        self.values[k as usize]
    }

    /// `sum_ij log(n_ij!)` for row-major entries bounded by `max()`.
    #[inline]
    pub fn sum(&self, entries: &[u32]) -> f64 {
        entries.iter().map(|&k| self.values[k as usize]).sum()
    }
}

/// `sum_ij log Gamma(n_ij + 1)`, the positive log-factorial mass of a table.
pub fn log_factorial_sum(table: &FreqTable) -> f64 {
    let max = table.entries().iter().copied().max().unwrap_or(0);
    LogFactorial::new(max).sum(table.entries())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[u32], cols: &[u32]) -> MarginPair {
        MarginPair::new(rows.to_vec(), cols.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_margins() {
        assert!(MarginPair::new(vec![1, 2], vec![4]).is_err());
        assert!(MarginPair::new(vec![0, 2], vec![2]).is_err());
        assert!(MarginPair::new(vec![], vec![]).is_err());
        assert!("3,4".parse::<MarginPair>().is_err());
        assert!("3,x/7".parse::<MarginPair>().is_err());
    }

    #[test]
    fn parses_and_prints_literal() {
        let mp: MarginPair = "8,20,12/12,7,21".parse().unwrap();
        assert_eq!(mp.rows(), &[8, 20, 12]);
        assert_eq!(mp.cols(), &[12, 7, 21]);
        assert_eq!(mp.total(), 40);
        assert_eq!(mp.to_string(), "8,20,12/12,7,21");
    }

    #[test]
    fn example_two_count() {
        let tc = enumerate_tables(&m(&[8, 20, 12], &[12, 7, 21]), None).unwrap();
        assert_eq!(tc.len(), 2160);
    }

    #[test]
    fn two_by_two_unit_margins() {
        let tc = enumerate_tables(&m(&[1, 1], &[1, 1]), None).unwrap();
        let tables: Vec<_> = tc.iter().map(<[u32]>::to_vec).collect();
        assert_eq!(tables, vec![vec![0, 1, 1, 0], vec![1, 0, 0, 1]]);
    }

    #[test]
    fn two_by_two_twos() {
        let tc = enumerate_tables(&m(&[2, 2], &[2, 2]), None).unwrap();
        assert_eq!(tc.len(), 3);
        let firsts: Vec<u32> = tc.iter().map(|t| t[0]).collect();
        assert_eq!(firsts, vec![0, 1, 2]);
        let s = fold_tables(&m(&[2, 2], &[2, 2]), 0u32, |a, t| {
            Ok::<_, ()>(a + t.get(0, 0))
        })
        .unwrap();
        assert_eq!(s, 3);
    }

    #[test]
    fn single_cell() {
        assert_eq!(count_tables(&m(&[5], &[5]), None).unwrap(), 1);
        let tc = enumerate_tables(&m(&[1], &[1]), None).unwrap();
        assert_eq!(tc.len(), 1);
    }

    #[test]
    fn single_row_and_column_are_forced() {
        let tc = enumerate_tables(&m(&[6], &[1, 2, 3]), None).unwrap();
        assert_eq!(tc.len(), 1);
        assert_eq!(tc.entries(0), &[1, 2, 3]);
        let tc = enumerate_tables(&m(&[1, 2, 3], &[6]), None).unwrap();
        assert_eq!(tc.entries(0), &[1, 2, 3]);
    }

    #[test]
    fn limit_breach_reports_partial_count() {
        let err = enumerate_tables(&m(&[8, 20, 12], &[12, 7, 21]), Some(100)).unwrap_err();
        assert_eq!(
            err,
            TableError::LimitExceeded {
                limit: 100,
                partial: 100
            }
        );
        assert!(count_tables(&m(&[8, 20, 12], &[12, 7, 21]), Some(2160)).is_ok());
        assert!(count_tables(&m(&[8, 20, 12], &[12, 7, 21]), Some(2159)).is_err());
    }

    #[test]
    fn log_factorial_examples() {
        let t = FreqTable::from_rows(&[[1, 0], [0, 1]]).unwrap();
        assert_eq!(log_factorial_sum(&t), 0.0);
        let t = FreqTable::from_rows(&[[2, 0], [0, 2]]).unwrap();
        assert!((log_factorial_sum(&t) - 2.0 * 2f64.ln()).abs() < 1e-15);
        let t = FreqTable::from_rows(&[[3, 1], [1, 3]]).unwrap();
        assert!((log_factorial_sum(&t) - 2.0 * 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_factorial_cache_matches_direct_sum() {
        let lf = LogFactorial::new(2000);
        for k in [0u32, 1, 2, 10, 170, 1999, 2000] {
            let direct: f64 = (1..=k).map(|x| f64::from(x).ln()).sum();
            assert!((lf.get(k) - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }

    #[test]
    fn rearranged_moves_categories() {
        let t = FreqTable::from_rows(&[[1, 2], [3, 4]]).unwrap();
        let r = t.rearranged(&[1, 0], &[0, 1]);
        assert_eq!(r.entries(), &[3, 4, 1, 2]);
    }
}
