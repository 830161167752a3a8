//! Extreme tables: Fréchet upper-bound tables after relabelling the row and
//! column categories, and their ε-completions.
//!
//! A [`PermutationPair`] sends original category `k` to position `rows[k]`
//! (resp. `cols[k]`). The construction walks the rearranged margins from the
//! top-left cell and the result is mapped back to the original category
//! order. The ε-completion replaces the zeros of the rearranged table by
//! powers of ε and is carried symbolically as `log(coef) - power * xi` with
//! `xi = -log ε`, so that no ε is ever formed in linear scale.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use thiserror::Error;

use crate::par;
use crate::tables::{FreqTable, MarginPair};

/// Permutation pairs examined by [`enumerate_extremes`] unless overridden
/// (`5! * 5!`).
pub const DEFAULT_PERMUTATION_BUDGET: usize = 14_400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtremeError {
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("{pairs} permutation pairs exceed the budget of {budget}")]
    BudgetExceeded { pairs: usize, budget: usize },
    #[error("table is not extreme-structured: cell ({row}, {col}) cannot be classified")]
    NotExtreme { row: usize, col: usize },
    #[error("xi must be positive and finite, got {0}")]
    InvalidXi(f64),
}

/// Positions of the original row and column categories after relabelling.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PermutationPair {
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn check_bijection(p: &[usize]) -> Result<(), ExtremeError> {
    let mut seen = vec![false; p.len()];
    for &x in p {
        if x >= p.len() || std::mem::replace(&mut seen[x], true) {
            return Err(ExtremeError::InvalidPermutation(format!(
                "{:?} is not a permutation of 0..{}",
                p,
                p.len()
            )));
        }
    }
    Ok(())
}

fn inverse(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (k, &pos) in p.iter().enumerate() {
        inv[pos] = k;
    }
    inv
}

impl PermutationPair {
    /// Zero-based positions: category `k` goes to `rows[k]`.
    pub fn new(rows: Vec<usize>, cols: Vec<usize>) -> Result<Self, ExtremeError> {
        check_bijection(&rows)?;
        check_bijection(&cols)?;
        Ok(Self { rows, cols })
    }

    pub fn identity(nrows: usize, ncols: usize) -> Self {
        Self {
            rows: (0..nrows).collect(),
            cols: (0..ncols).collect(),
        }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    /// Rearranged margins: `t[pos[k]] = m[k]`.
    pub fn apply_to_margins(&self, margins: &MarginPair) -> MarginPair {
        let place = |m: &[u32], pos: &[usize]| {
            let mut t = vec![0; m.len()];
            for (k, &p) in pos.iter().enumerate() {
                t[p] = m[k];
            }
            t
        };
        MarginPair::new(
            place(margins.rows(), &self.rows),
            place(margins.cols(), &self.cols),
        )
        .expect("rearranging valid margins keeps them valid")
    }

    /// Table in rearranged category order.
    pub fn apply_to_table(&self, table: &FreqTable) -> FreqTable {
        table.rearranged(&self.rows, &self.cols)
    }

    /// Inverse of [`apply_to_table`](Self::apply_to_table).
    pub fn restore_table(&self, table: &FreqTable) -> FreqTable {
        table.rearranged(&inverse(&self.rows), &inverse(&self.cols))
    }

    /// Row-major matrix given in rearranged order, returned in original order.
    pub fn restore_matrix<T: Copy>(&self, values: &[T]) -> Vec<T> {
        let ncols = self.cols.len();
        let mut out = Vec::with_capacity(values.len());
        for &pi in &self.rows {
            for &pj in &self.cols {
                out.push(values[pi * ncols + pj]);
            }
        }
        out
    }
}

impl FromStr for PermutationPair {
    type Err = ExtremeError;

    /// Parses one-based positions, `"3,4,1,2/2,1,3,4"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, c) = s.split_once('/').ok_or_else(|| {
            ExtremeError::InvalidPermutation(format!("expected 'rows/cols', got {s:?}"))
        })?;
        let parse = |part: &str| -> Result<Vec<usize>, ExtremeError> {
            part.split(',')
                .map(|x| match x.trim().parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v - 1),
                    _ => Err(ExtremeError::InvalidPermutation(format!(
                        "bad position {x:?}"
                    ))),
                })
                .collect()
        };
        PermutationPair::new(parse(r)?, parse(c)?)
    }
}

impl fmt::Display for PermutationPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(|x| (x + 1).to_string()).join(",");
        write!(f, "{}/{}", join(&self.rows), join(&self.cols))
    }
}

/// A table produced by the extreme construction, in original category
/// order, with the permutation pair that generated it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtremeTable {
    table: FreqTable,
    perms: PermutationPair,
}

impl ExtremeTable {
    pub fn table(&self) -> &FreqTable {
        &self.table
    }

    pub fn perms(&self) -> &PermutationPair {
        &self.perms
    }

    /// The table in the rearranged order where it has staircase structure.
    pub fn permuted(&self) -> FreqTable {
        self.perms.apply_to_table(&self.table)
    }
}

/// Upper-bound construction on already-rearranged margins.
fn staircase(rows: &[u32], cols: &[u32]) -> FreqTable {
    let (nrows, ncols) = (rows.len(), cols.len());
    let mut z = FreqTable::zeros(nrows, ncols);
    let mut row_rem = rows.to_vec();
    let mut col_rem = cols.to_vec();
    let (mut i, mut j) = (0, 0);
    while i < nrows && j < ncols {
        let (r, c) = (row_rem[i], col_rem[j]);
        match r.cmp(&c) {
            std::cmp::Ordering::Less => {
                z.set(i, j, r);
                col_rem[j] -= r;
                row_rem[i] = 0;
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                z.set(i, j, c);
                row_rem[i] -= c;
                col_rem[j] = 0;
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                z.set(i, j, r);
                row_rem[i] = 0;
                col_rem[j] = 0;
                i += 1;
                j += 1;
            }
        }
    }
    z
}

/// Builds the extreme table for `margins` under `perms`.
///
/// # Panics
/// If the permutation lengths do not match the margins.
pub fn build_extreme(margins: &MarginPair, perms: &PermutationPair) -> ExtremeTable {
    assert_eq!(perms.rows.len(), margins.nrows(), "row permutation length");
    assert_eq!(
        perms.cols.len(),
        margins.ncols(),
        "column permutation length"
    );
    let t = perms.apply_to_margins(margins);
    let z = staircase(t.rows(), t.cols());
    ExtremeTable {
        table: perms.restore_table(&z),
        perms: perms.clone(),
    }
}

/// Distinct extreme tables over all `R! * C!` permutation pairs, in the order
/// of first appearance when pairs are visited lexicographically (rows
/// slowest). `budget` defaults to [`DEFAULT_PERMUTATION_BUDGET`].
pub fn enumerate_extremes(
    margins: &MarginPair,
    budget: Option<usize>,
) -> Result<Vec<ExtremeTable>, ExtremeError> {
    let budget = budget.unwrap_or(DEFAULT_PERMUTATION_BUDGET);
    let fact = |n: usize| (1..=n).try_fold(1usize, |a, k| a.checked_mul(k));
    let pairs = fact(margins.nrows())
        .zip(fact(margins.ncols()))
        .and_then(|(a, b)| a.checked_mul(b))
        .unwrap_or(usize::MAX);
    if pairs > budget {
        return Err(ExtremeError::BudgetExceeded { pairs, budget });
    }
    let row_perms: Vec<Vec<usize>> = (0..margins.nrows()).permutations(margins.nrows()).collect();
    let col_perms: Vec<Vec<usize>> = (0..margins.ncols()).permutations(margins.ncols()).collect();
    let blocks = par::map(&row_perms, |rp| {
        col_perms
            .iter()
            .map(|cp| {
                let perms = PermutationPair {
                    rows: rp.clone(),
                    cols: cp.clone(),
                };
                build_extreme(margins, &perms)
            })
            .collect::<Vec<_>>()
    });
    let mut seen = HashSet::new();
    Ok(blocks
        .into_iter()
        .flatten()
        .filter(|z| seen.insert(z.table.entries().to_vec()))
        .collect())
}

/// Sub-table type of an interior cell, from the zero pattern of the 2x2
/// block spanned by `(1,1)` and that cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Log-odds identically zero.
    A,
    /// Log-odds of order `xi`.
    B,
    /// Log-odds of order `2 xi`.
    C,
    /// No zeros involved; finite log-odds.
    Full,
}

/// A table with zeros replaced by `coef * ε^power`, rearranged order.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonTable {
    nrows: usize,
    ncols: usize,
    log_coef: Vec<f64>,
    power: Vec<u8>,
    kinds: Vec<Option<BlockKind>>,
}

impl EpsilonTable {
    /// Completes a rearranged table. Zeros in the first row and column become
    /// ε; interior zeros become `ε z_i1/z_11`, `ε z_1j/z_11` or `ε²/z_11`.
    pub fn complete(table: &FreqTable) -> Result<Self, ExtremeError> {
        let (nrows, ncols) = (table.nrows(), table.ncols());
        let idx = |i: usize, j: usize| i * ncols + j;
        if table.get(0, 0) == 0 {
            return Err(ExtremeError::NotExtreme { row: 0, col: 0 });
        }
        let z11 = f64::from(table.get(0, 0)).ln();
        let mut log_coef = vec![0.0; nrows * ncols];
        let mut power = vec![0u8; nrows * ncols];
        let mut kinds = vec![None; nrows * ncols];
        for i in 0..nrows {
            for j in 0..ncols {
                let z = table.get(i, j);
                if z > 0 {
                    log_coef[idx(i, j)] = f64::from(z).ln();
                } else if i == 0 || j == 0 {
                    power[idx(i, j)] = 1;
                }
            }
        }
        for i in 1..nrows {
            for j in 1..ncols {
                let top_zero = table.get(0, j) == 0;
                let left_zero = table.get(i, 0) == 0;
                let k = idx(i, j);
                let kind = if table.get(i, j) == 0 {
                    match (top_zero, left_zero) {
                        (true, false) => {
                            log_coef[k] = log_coef[idx(i, 0)] - z11;
                            power[k] = 1;
                        }
                        (false, true) => {
                            log_coef[k] = log_coef[idx(0, j)] - z11;
                            power[k] = 1;
                        }
                        (true, true) => {
                            log_coef[k] = -z11;
                            power[k] = 2;
                        }
                        (false, false) => return Err(ExtremeError::NotExtreme { row: i, col: j }),
                    }
                    BlockKind::A
                } else {
                    match (top_zero, left_zero) {
                        (true, true) => BlockKind::C,
                        (false, false) => BlockKind::Full,
                        _ => BlockKind::B,
                    }
                };
                kinds[k] = Some(kind);
            }
        }
        Ok(Self {
            nrows,
            ncols,
            log_coef,
            power,
            kinds,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Block classification of interior cell `(i, j)`, `i, j >= 1`.
    pub fn kind(&self, i: usize, j: usize) -> Option<BlockKind> {
        self.kinds[i * self.ncols + j]
    }

    /// `log Z(ε)` entries at `xi = -log ε`, row-major, rearranged order.
    pub fn log_entries(&self, xi: f64) -> Vec<f64> {
        self.log_coef
            .iter()
            .zip(&self.power)
            .map(|(&c, &p)| c - f64::from(p) * xi)
            .collect()
    }

    pub fn log_odds(&self, xi: f64) -> XiLogOdds {
        let (nrows, ncols) = (self.nrows, self.ncols);
        let idx = |i: usize, j: usize| i * ncols + j;
        let mut zero_mask = vec![true; nrows * ncols];
        let mut order = vec![0u8; nrows * ncols];
        let mut offset = vec![0.0; nrows * ncols];
        for i in 1..nrows {
            for j in 1..ncols {
                let k = idx(i, j);
                if self.kinds[k] == Some(BlockKind::A) {
                    continue;
                }
                zero_mask[k] = false;
                let p = |a: usize| i32::from(self.power[a]);
                let ord = p(idx(i, 0)) + p(idx(0, j)) - p(idx(0, 0)) - p(k);
                order[k] = u8::try_from(ord).expect("extreme structure yields order 0..=2");
                offset[k] = self.log_coef[idx(0, 0)] + self.log_coef[k]
                    - self.log_coef[idx(i, 0)]
                    - self.log_coef[idx(0, j)];
            }
        }
        XiLogOdds {
            nrows,
            ncols,
            zero_mask,
            order,
            offset,
            xi,
        }
    }
}

/// Log-odds ratios of an ε-completed table as `order * xi + offset`,
/// anchored at the first row and column of the rearranged order.
#[derive(Debug, Clone, PartialEq)]
pub struct XiLogOdds {
    nrows: usize,
    ncols: usize,
    zero_mask: Vec<bool>,
    order: Vec<u8>,
    offset: Vec<f64>,
    xi: f64,
}

impl XiLogOdds {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn zero_mask(&self) -> &[bool] {
        &self.zero_mask
    }

    pub fn order(&self) -> &[u8] {
        &self.order
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn order_at(&self, i: usize, j: usize) -> u8 {
        self.order[i * self.ncols + j]
    }

    pub fn with_xi(&self, xi: f64) -> Self {
        Self { xi, ..self.clone() }
    }

    /// Full `R x C` log-odds matrix at the stored `xi`, rearranged order.
    pub fn lambda(&self) -> Vec<f64> {
        self.order
            .iter()
            .zip(&self.offset)
            .map(|(&o, &c)| f64::from(o) * self.xi + c)
            .collect()
    }

    /// `V(N, Λ(ε)) - V(Z, Λ(ε))` split into its `xi` coefficient and the
    /// `xi`-free remainder, for tables given in rearranged order.
    pub fn v_difference(&self, table: &[u32], reference: &[u32]) -> (i64, f64) {
        let mut coef = 0i64;
        let mut rest = 0.0;
        for k in 0..self.order.len() {
            let d = i64::from(table[k]) - i64::from(reference[k]);
            coef += i64::from(self.order[k]) * d;
            rest += self.offset[k] * d as f64;
        }
        (coef, rest)
    }
}

/// ε-completion of an extreme table, in the rearranged order of its
/// permutation pair.
pub fn epsilon_complete(z: &ExtremeTable, xi: f64) -> Result<XiLogOdds, ExtremeError> {
    epsilon_complete_table(&z.permuted(), xi)
}

/// ε-completion of a table already in the order where its zeros form an
/// extreme pattern.
pub fn epsilon_complete_table(table: &FreqTable, xi: f64) -> Result<XiLogOdds, ExtremeError> {
    if !(xi.is_finite() && xi > 0.0) {
        return Err(ExtremeError::InvalidXi(xi));
    }
    Ok(EpsilonTable::complete(table)?.log_odds(xi))
}

fn order_pattern_holds(order: &[u8], nrows: usize, ncols: usize) -> bool {
    for i in 1..nrows {
        for j in 1..ncols {
            if order[i * ncols + j] != 2 {
                continue;
            }
            for h in i..nrows {
                for k in j..ncols {
                    if order[h * ncols + k] == 1 {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// True when the rearranged table classifies cleanly and every order-2
/// log-odds has only order-0 or order-2 cells below and to its right.
/// Order-1 cells carry no further constraint (any order is "0 or at least
/// O(xi)").
pub fn monotone_order_check(z: &ExtremeTable) -> bool {
    monotone_order_check_table(&z.permuted())
}

pub fn monotone_order_check_table(table: &FreqTable) -> bool {
    match EpsilonTable::complete(table) {
        Ok(eps) => {
            let lo = eps.log_odds(1.0);
            order_pattern_holds(&lo.order, lo.nrows, lo.ncols)
        }
        Err(_) => false,
    }
}

/// Lower-right tail sums `T[i][j] = sum_{h >= i, k >= j} n_hk`, row-major.
pub fn tail_sums(table: &[u32], nrows: usize, ncols: usize) -> Vec<u64> {
    let mut t = vec![0u64; nrows * ncols];
    for i in (0..nrows).rev() {
        for j in (0..ncols).rev() {
            let below = if i + 1 < nrows {
                t[(i + 1) * ncols + j]
            } else {
                0
            };
            let right = if j + 1 < ncols {
                t[i * ncols + j + 1]
            } else {
                0
            };
            let diag = if i + 1 < nrows && j + 1 < ncols {
                t[(i + 1) * ncols + j + 1]
            } else {
                0
            };
            t[i * ncols + j] = u64::from(table[i * ncols + j]) + below + right - diag;
        }
    }
    t
}
