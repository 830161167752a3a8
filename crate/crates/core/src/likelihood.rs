//! Marginal likelihood of observed margins under row-conditional
//! multinomial sampling.
//!
//! Conditional probabilities are parametrized by column logits `phi_j` and
//! log-odds ratios `lambda_ij`, both anchored at the first row and column:
//!
//! ```text
//! p_{j|i} = exp(phi_j + lambda_ij) / sum_k exp(phi_k + lambda_ik)
//! ```
//!
//! For one table with margins `n_i0, n_0j` the log-likelihood, up to the
//! additive constant `sum_i log n_i0!`, is
//!
//! ```text
//! L = sum_j n_0j phi_j + log sum_N exp(V(N, Λ) - G(N)) - sum_i n_i0 log sum_j exp(phi_j + lambda_ij)
//! ```
//!
//! where `V(N, Λ) = sum n_ij lambda_ij`, `G(N) = sum log n_ij!` and `N` runs
//! over every table with the observed margins. The weights
//! `exp(V - G)` define the extended hypergeometric distribution whose means
//! `M_ij` enter the score. All sums over tables are done in log scale with
//! the maximum exponent subtracted first.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::extreme::{epsilon_complete, EpsilonTable, ExtremeError, ExtremeTable};
use crate::par;
use crate::tables::{
    enumerate_tables, fold_tables, CompensatedSum, LogFactorial, MarginPair, TableCollection,
    TableError, DEFAULT_TABLE_LIMIT,
};

/// Row-sum tolerance for [`CondProbMatrix`].
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("unit {unit}: {source}")]
    UnitTables { unit: usize, source: TableError },
    #[error(transparent)]
    Tables(#[from] TableError),
    #[error(transparent)]
    Extreme(#[from] ExtremeError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid conditional probabilities: {0}")]
    InvalidProbabilities(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("dataset has no units")]
    EmptyDataset,
}

/// Free parameters `(phi_2..phi_C, lambda_22..lambda_RC)`, packed with the
/// `phi` block first and then `lambda` with the column index running faster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamVector {
    nrows: usize,
    ncols: usize,
    phi: Vec<f64>,
    lambda: Vec<f64>,
}

impl ParamVector {
    pub fn new(
        nrows: usize,
        ncols: usize,
        phi: Vec<f64>,
        lambda: Vec<f64>,
    ) -> Result<Self, LikelihoodError> {
        if nrows == 0 || ncols == 0 {
            return Err(LikelihoodError::Dimension("empty table shape".into()));
        }
        if phi.len() != ncols - 1 || lambda.len() != (nrows - 1) * (ncols - 1) {
            return Err(LikelihoodError::Dimension(format!(
                "{}x{} needs {} logits and {} log-odds, got {} and {}",
                nrows,
                ncols,
                ncols - 1,
                (nrows - 1) * (ncols - 1),
                phi.len(),
                lambda.len()
            )));
        }
        if phi.iter().chain(&lambda).any(|x| !x.is_finite()) {
            return Err(LikelihoodError::InvalidParams("non-finite entry".into()));
        }
        Ok(Self {
            nrows,
            ncols,
            phi,
            lambda,
        })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            phi: vec![0.0; ncols.saturating_sub(1)],
            lambda: vec![0.0; nrows.saturating_sub(1) * ncols.saturating_sub(1)],
        }
    }

    pub fn from_packed(
        nrows: usize,
        ncols: usize,
        packed: &[f64],
    ) -> Result<Self, LikelihoodError> {
        let k = ncols.saturating_sub(1);
        if packed.len() != nrows * k {
            return Err(LikelihoodError::Dimension(format!(
                "packed length {} != {}",
                packed.len(),
                nrows * k
            )));
        }
        Self::new(nrows, ncols, packed[..k].to_vec(), packed[k..].to_vec())
    }

    /// Parameters of the row-normalized table `exp(log_entries)`; any row
    /// scaling of the input cancels.
    pub fn from_log_table(
        nrows: usize,
        ncols: usize,
        log_entries: &[f64],
    ) -> Result<Self, LikelihoodError> {
        if log_entries.len() != nrows * ncols {
            return Err(LikelihoodError::Dimension("log table size".into()));
        }
        let l = |i: usize, j: usize| log_entries[i * ncols + j];
        let phi = (1..ncols).map(|j| l(0, j) - l(0, 0)).collect();
        let mut lambda = Vec::with_capacity((nrows - 1) * (ncols - 1));
        for i in 1..nrows {
            for j in 1..ncols {
                lambda.push(l(0, 0) + l(i, j) - l(i, 0) - l(0, j));
            }
        }
        Self::new(nrows, ncols, phi, lambda)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Packed length `R (C - 1)`.
    pub fn len(&self) -> usize {
        self.phi.len() + self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn packed(&self) -> Vec<f64> {
        self.phi.iter().chain(&self.lambda).copied().collect()
    }

    /// `phi` with the reference `phi_1 = 0` prepended.
    pub fn phi_full(&self) -> Vec<f64> {
        std::iter::once(0.0)
            .chain(self.phi.iter().copied())
            .collect()
    }

    /// Full `R x C` log-odds matrix with zero first row and column.
    pub fn lambda_matrix(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows * self.ncols];
        for i in 1..self.nrows {
            for j in 1..self.ncols {
                out[i * self.ncols + j] = self.lambda[(i - 1) * (self.ncols - 1) + (j - 1)];
            }
        }
        out
    }
}

/// Row-stochastic `R x C` matrix of conditional probabilities `p_{j|i}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CondProbMatrix {
    nrows: usize,
    ncols: usize,
    values: Vec<f64>,
}

impl CondProbMatrix {
    pub fn new(nrows: usize, ncols: usize, values: Vec<f64>) -> Result<Self, LikelihoodError> {
        if nrows == 0 || ncols == 0 || values.len() != nrows * ncols {
            return Err(LikelihoodError::Dimension(format!(
                "{} values for a {nrows}x{ncols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(LikelihoodError::InvalidProbabilities(
                "entries must lie in [0, 1]".into(),
            ));
        }
        for (i, row) in values.chunks_exact(ncols).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(LikelihoodError::InvalidProbabilities(format!(
                    "row {} sums to {s}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            nrows,
            ncols,
            values,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LikelihoodError> {
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != ncols) {
            return Err(LikelihoodError::Dimension("ragged rows".into()));
        }
        let values = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(rows.len(), ncols, values)
    }

    /// Rows rescaled to sum to one; entries must be nonnegative with a
    /// positive sum in every row.
    pub fn normalized(
        nrows: usize,
        ncols: usize,
        mut values: Vec<f64>,
    ) -> Result<Self, LikelihoodError> {
        if nrows == 0 || ncols == 0 || values.len() != nrows * ncols {
            return Err(LikelihoodError::Dimension("matrix size".into()));
        }
        for row in values.chunks_exact_mut(ncols) {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) || row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(LikelihoodError::InvalidProbabilities(
                    "rows need nonnegative entries with a positive sum".into(),
                ));
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        Self::new(nrows, ncols, values)
    }

    /// Every row equal to `row`.
    pub fn repeated_row(nrows: usize, row: &[f64]) -> Result<Self, LikelihoodError> {
        Self::new(nrows, row.len(), row.repeat(nrows))
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ncols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks_exact(self.ncols)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

/// Stable `log sum exp`.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values
        .into_iter()
        .map(|x| (x - max).exp())
        .sum::<f64>()
        .ln()
}

/// `log p_{j|i}` row-major, with each row's max exponent subtracted before
/// exponentiating.
pub fn log_link(params: &ParamVector) -> Vec<f64> {
    let (nrows, ncols) = (params.nrows, params.ncols);
    let phi = params.phi_full();
    let lambda = params.lambda_matrix();
    let mut out = Vec::with_capacity(nrows * ncols);
    for i in 0..nrows {
        let eta: Vec<f64> = (0..ncols).map(|j| phi[j] + lambda[i * ncols + j]).collect();
        let lse = log_sum_exp(eta.iter().copied());
        out.extend(eta.iter().map(|e| e - lse));
    }
    out
}

pub fn link(params: &ParamVector) -> CondProbMatrix {
    let (nrows, ncols) = (params.nrows, params.ncols);
    let mut values: Vec<f64> = log_link(params).into_iter().map(f64::exp).collect();
    for row in values.chunks_exact_mut(ncols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    CondProbMatrix {
        nrows,
        ncols,
        values,
    }
}

/// `phi_j = log(p_1j / p_11)`, `lambda_ij = log(p_11 p_ij) - log(p_i1 p_1j)`.
/// Needs strictly positive probabilities.
pub fn inverse_link(probs: &CondProbMatrix) -> Result<ParamVector, LikelihoodError> {
    if probs.values.iter().any(|&p| p <= 0.0) {
        return Err(LikelihoodError::InvalidProbabilities(
            "inverse link needs strictly positive probabilities".into(),
        ));
    }
    let logs: Vec<f64> = probs.values.iter().map(|p| p.ln()).collect();
    ParamVector::from_log_table(probs.nrows, probs.ncols, &logs)
}

/// `V(N, Λ) = sum_ij n_ij lambda_ij` for a full `R x C` log-odds matrix.
pub fn v_stat(entries: &[u32], interaction: &[f64]) -> f64 {
    entries
        .iter()
        .zip(interaction)
        .map(|(&n, &l)| f64::from(n) * l)
        .sum()
}

/// Conditional expectations `M_ij` of the cells given both margins.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedTable {
    margins: MarginPair,
    values: Vec<f64>,
}

impl ExpectedTable {
    pub fn margins(&self) -> &MarginPair {
        &self.margins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.margins.ncols() + j]
    }

    /// Largest absolute deviation of the row and column sums from the margins.
    pub fn margin_error(&self) -> f64 {
        let ncols = self.margins.ncols();
        let rows = self
            .values
            .chunks_exact(ncols)
            .zip(self.margins.rows())
            .map(|(r, &t)| (r.iter().sum::<f64>() - f64::from(t)).abs());
        let cols = self.margins.cols().iter().enumerate().map(|(j, &t)| {
            let s: f64 = self.values.iter().skip(j).step_by(ncols).sum();
            (s - f64::from(t)).abs()
        });
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// The table collection of one unit with cached `G(N)` values.
#[derive(Debug, Clone)]
pub struct UnitTables {
    collection: TableCollection,
    log_fact: Vec<f64>,
}

impl UnitTables {
    pub fn build(margins: &MarginPair, limit: Option<usize>) -> Result<Self, TableError> {
        let collection = enumerate_tables(margins, limit)?;
        Ok(Self::from_collection(collection))
    }

    pub fn from_collection(collection: TableCollection) -> Self {
        let lf = LogFactorial::new(collection.margins().total());
        let log_fact = collection.iter().map(|t| lf.sum(t)).collect();
        Self {
            collection,
            log_fact,
        }
    }

    pub fn margins(&self) -> &MarginPair {
        self.collection.margins()
    }

    pub fn collection(&self) -> &TableCollection {
        &self.collection
    }

    pub fn len(&self) -> usize {
        self.collection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collection.is_empty()
    }

    /// Log weights `V(N, Λ) - G(N)` in enumeration order.
    pub fn log_weights(&self, interaction: &[f64]) -> Vec<f64> {
        self.collection
            .iter()
            .zip(&self.log_fact)
            .map(|(t, g)| v_stat(t, interaction) - g)
            .collect()
    }

    /// Normalized extended hypergeometric probabilities of every table.
    pub fn weights(&self, interaction: &[f64]) -> Vec<f64> {
        let lw = self.log_weights(interaction);
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = lw.iter().map(|x| (x - max).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        w
    }

    fn moments(&self, interaction: &[f64]) -> Moments {
        let cells = self.margins().cells();
        let lw = self.log_weights(interaction);
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut acc = vec![0.0; cells];
        for (t, x) in self.collection.iter().zip(&lw) {
            let e = (x - max).exp();
            sum += e;
            for (a, &n) in acc.iter_mut().zip(t) {
                *a += e * f64::from(n);
            }
        }
        acc.iter_mut().for_each(|a| *a /= sum);
        Moments {
            log_norm: max + sum.ln(),
            expected: acc,
        }
    }

    pub fn cond_expectations(&self, interaction: &[f64]) -> ExpectedTable {
        ExpectedTable {
            margins: self.margins().clone(),
            values: self.moments(interaction).expected,
        }
    }

    pub fn evaluate(&self, params: &ParamVector) -> UnitEval {
        let m = self.moments(&params.lambda_matrix());
        UnitEval::assemble(self.margins(), params, m)
    }

    pub fn loglik(&self, params: &ParamVector) -> f64 {
        self.evaluate(params).loglik
    }

    pub fn score(&self, params: &ParamVector) -> Vec<f64> {
        self.evaluate(params).score
    }
}

#[derive(Debug, Clone)]
struct Moments {
    log_norm: f64,
    expected: Vec<f64>,
}

/// One pass over the tables of `margins` without storing them, rescaling
/// the running sums whenever a larger exponent appears.
fn streaming_moments(
    margins: &MarginPair,
    interaction: &[f64],
    limit: usize,
) -> Result<Moments, TableError> {
    let cells = margins.cells();
    let lf = LogFactorial::new(margins.total());
    let init = (f64::NEG_INFINITY, 0.0f64, vec![0.0f64; cells], 0usize);
    let (max, sum, mut acc, _) = fold_tables(margins, init, |(max, sum, mut acc, count), t| {
        if count == limit {
            return Err(TableError::LimitExceeded {
                limit,
                partial: count,
            });
        }
        let x = v_stat(t.entries(), interaction) - lf.sum(t.entries());
        let (max, sum) = if x > max {
            let scale = (max - x).exp();
            acc.iter_mut().for_each(|a| *a *= scale);
            (x, sum * scale + 1.0)
        } else {
            (max, sum + (x - max).exp())
        };
        let e = (x - max).exp();
        for (a, &n) in acc.iter_mut().zip(t.entries()) {
            *a += e * f64::from(n);
        }
        Ok((max, sum, acc, count + 1))
    })?;
    acc.iter_mut().for_each(|a| *a /= sum);
    Ok(Moments {
        log_norm: max + sum.ln(),
        expected: acc,
    })
}

/// Log-likelihood, score and conditional expectations of one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEval {
    pub loglik: f64,
    pub score: Vec<f64>,
    pub expected: ExpectedTable,
}

impl UnitEval {
    fn assemble(margins: &MarginPair, params: &ParamVector, m: Moments) -> Self {
        let (nrows, ncols) = (params.nrows, params.ncols);
        let phi = params.phi_full();
        let lambda = params.lambda_matrix();
        let probs = link(params);
        let row_lse: Vec<f64> = (0..nrows)
            .map(|i| log_sum_exp((0..ncols).map(|j| phi[j] + lambda[i * ncols + j])))
            .collect();
        let n_rows: Vec<f64> = margins.rows().iter().map(|&x| f64::from(x)).collect();
        let n_cols: Vec<f64> = margins.cols().iter().map(|&x| f64::from(x)).collect();

        let loglik = n_cols.iter().zip(&phi).map(|(n, f)| n * f).sum::<f64>() + m.log_norm
            - n_rows.iter().zip(&row_lse).map(|(n, l)| n * l).sum::<f64>();

        let mut score = Vec::with_capacity(params.len());
        for j in 1..ncols {
            let fitted: f64 = (0..nrows).map(|i| n_rows[i] * probs.get(i, j)).sum();
            score.push(n_cols[j] - fitted);
        }
        for i in 1..nrows {
            for j in 1..ncols {
                score.push(m.expected[i * ncols + j] - n_rows[i] * probs.get(i, j));
            }
        }
        UnitEval {
            loglik,
            score,
            expected: ExpectedTable {
                margins: margins.clone(),
                values: m.expected,
            },
        }
    }
}

fn check_shape(margins: &MarginPair, nrows: usize, ncols: usize) -> Result<(), LikelihoodError> {
    if margins.nrows() != nrows || margins.ncols() != ncols {
        return Err(LikelihoodError::Dimension(format!(
            "margins are {}x{}, parameters {}x{}",
            margins.nrows(),
            margins.ncols(),
            nrows,
            ncols
        )));
    }
    Ok(())
}

/// Evaluates one unit by streaming over its tables.
pub fn evaluate_unit(
    margins: &MarginPair,
    params: &ParamVector,
    limit: Option<usize>,
) -> Result<UnitEval, LikelihoodError> {
    check_shape(margins, params.nrows, params.ncols)?;
    let m = streaming_moments(
        margins,
        &params.lambda_matrix(),
        limit.unwrap_or(DEFAULT_TABLE_LIMIT),
    )?;
    Ok(UnitEval::assemble(margins, params, m))
}

/// `M_ij` for a full `R x C` log-odds matrix (first row and column need not
/// be zero; row and column effects cancel).
pub fn cond_expectations(
    margins: &MarginPair,
    interaction: &[f64],
) -> Result<ExpectedTable, LikelihoodError> {
    if interaction.len() != margins.cells() {
        return Err(LikelihoodError::Dimension("log-odds matrix size".into()));
    }
    let m = streaming_moments(margins, interaction, DEFAULT_TABLE_LIMIT)?;
    Ok(ExpectedTable {
        margins: margins.clone(),
        values: m.expected,
    })
}

pub fn marginal_loglik(margins: &MarginPair, params: &ParamVector) -> Result<f64, LikelihoodError> {
    Ok(evaluate_unit(margins, params, None)?.loglik)
}

pub fn unit_score(margins: &MarginPair, params: &ParamVector) -> Result<Vec<f64>, LikelihoodError> {
    Ok(evaluate_unit(margins, params, None)?.score)
}

/// Log-odds of the ε-completed extreme table at `xi`, as a full matrix in
/// original category order.
pub fn extreme_interaction(z: &ExtremeTable, xi: f64) -> Result<Vec<f64>, ExtremeError> {
    Ok(z.perms().restore_matrix(&epsilon_complete(z, xi)?.lambda()))
}

/// Parameters of `P(Z, ε)`: the ε-completed extreme table scaled to unit
/// row sums, at `xi = -log ε`.
pub fn extreme_params(z: &ExtremeTable, xi: f64) -> Result<ParamVector, LikelihoodError> {
    if !(xi.is_finite() && xi > 0.0) {
        return Err(ExtremeError::InvalidXi(xi).into());
    }
    let eps = EpsilonTable::complete(&z.permuted())?;
    let log_entries = z.perms().restore_matrix(&eps.log_entries(xi));
    ParamVector::from_log_table(z.table().nrows(), z.table().ncols(), &log_entries)
}

/// Parameters of a table turned into conditional probabilities, with zero
/// cells replaced by `exp(-xi)` before scaling rows to one.
pub fn table_params(
    entries: &[u32],
    nrows: usize,
    ncols: usize,
    xi: f64,
) -> Result<ParamVector, LikelihoodError> {
    let logs: Vec<f64> = entries
        .iter()
        .map(|&n| if n == 0 { -xi } else { f64::from(n).ln() })
        .collect();
    ParamVector::from_log_table(nrows, ncols, &logs)
}

/// Margins of many units that share one set of conditional probabilities.
#[derive(Debug, Clone)]
pub struct EIDataset {
    nrows: usize,
    ncols: usize,
    units: Vec<MarginPair>,
    row_totals: Vec<u64>,
    col_totals: Vec<u64>,
    table_limit: usize,
    tables: Option<Vec<UnitTables>>,
}

impl EIDataset {
    pub fn new(units: Vec<MarginPair>) -> Result<Self, LikelihoodError> {
        let first = units.first().ok_or(LikelihoodError::EmptyDataset)?;
        let (nrows, ncols) = (first.nrows(), first.ncols());
        let mut row_totals = vec![0u64; nrows];
        let mut col_totals = vec![0u64; ncols];
        for (h, u) in units.iter().enumerate() {
            if u.nrows() != nrows || u.ncols() != ncols {
                return Err(LikelihoodError::Dimension(format!(
                    "unit {h} is {}x{}, expected {nrows}x{ncols}",
                    u.nrows(),
                    u.ncols()
                )));
            }
            row_totals
                .iter_mut()
                .zip(u.rows())
                .for_each(|(a, &x)| *a += u64::from(x));
            col_totals
                .iter_mut()
                .zip(u.cols())
                .for_each(|(a, &x)| *a += u64::from(x));
        }
        Ok(Self {
            nrows,
            ncols,
            units,
            row_totals,
            col_totals,
            table_limit: DEFAULT_TABLE_LIMIT,
            tables: None,
        })
    }

    pub fn with_table_limit(mut self, limit: usize) -> Self {
        self.table_limit = limit;
        self
    }

    /// Enumerates and caches every unit's table collection. Collections are
    /// built in parallel; the first failing unit (by index) is reported.
    pub fn enumerate(&mut self) -> Result<(), LikelihoodError> {
        if self.tables.is_some() {
            return Ok(());
        }
        let limit = self.table_limit;
        let built = par::map(&self.units, |m| UnitTables::build(m, Some(limit)));
        let mut tables = Vec::with_capacity(built.len());
        for (unit, b) in built.into_iter().enumerate() {
            tables.push(b.map_err(|source| LikelihoodError::UnitTables { unit, source })?);
        }
        self.tables = Some(tables);
        Ok(())
    }

    pub fn enumerated(mut self) -> Result<Self, LikelihoodError> {
        self.enumerate()?;
        Ok(self)
    }

    pub fn is_enumerated(&self) -> bool {
        self.tables.is_some()
    }

    pub fn unit_tables(&self) -> Option<&[UnitTables]> {
        self.tables.as_deref()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Number of units `s`.
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[MarginPair] {
        &self.units
    }

    pub fn row_totals(&self) -> &[u64] {
        &self.row_totals
    }

    pub fn col_totals(&self) -> &[u64] {
        &self.col_totals
    }

    pub fn total(&self) -> u64 {
        self.row_totals.iter().sum()
    }

    /// Aggregate margins summed over units.
    pub fn aggregate(&self) -> Result<MarginPair, LikelihoodError> {
        let conv = |v: &[u64]| -> Result<Vec<u32>, LikelihoodError> {
            v.iter()
                .map(|&x| {
                    u32::try_from(x).map_err(|_| {
                        LikelihoodError::Dimension("aggregate total overflows u32".into())
                    })
                })
                .collect()
        };
        Ok(MarginPair::new(
            conv(&self.row_totals)?,
            conv(&self.col_totals)?,
        )?)
    }

    /// Row shares `U` (`s x R`) and column shares `V` (`s x C`).
    pub fn share_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let s = self.units.len();
        let u = DMatrix::from_fn(s, self.nrows, |h, i| {
            f64::from(self.units[h].rows()[i]) / f64::from(self.units[h].total())
        });
        let v = DMatrix::from_fn(s, self.ncols, |h, j| {
            f64::from(self.units[h].cols()[j]) / f64::from(self.units[h].total())
        });
        (u, v)
    }

    /// Per-unit evaluations in unit order, using cached collections when
    /// present and streaming otherwise.
    pub fn evaluate_units(&self, params: &ParamVector) -> Result<Vec<UnitEval>, LikelihoodError> {
        if params.nrows != self.nrows || params.ncols != self.ncols {
            return Err(LikelihoodError::Dimension(format!(
                "parameters are {}x{}, dataset {}x{}",
                params.nrows, params.ncols, self.nrows, self.ncols
            )));
        }
        match &self.tables {
            Some(tables) => Ok(par::map(tables, |t| t.evaluate(params))),
            None => {
                let limit = self.table_limit;
                par::map(&self.units, |m| evaluate_unit(m, params, Some(limit)))
                    .into_iter()
                    .enumerate()
                    .map(|(unit, r)| {
                        r.map_err(|e| match e {
                            LikelihoodError::Tables(source) => {
                                LikelihoodError::UnitTables { unit, source }
                            }
                            other => other,
                        })
                    })
                    .collect()
            }
        }
    }

    pub fn evaluate(&self, params: &ParamVector) -> Result<DatasetEval, LikelihoodError> {
        let units = self.evaluate_units(params)?;
        // unit values are O(100) while the total is O(1e4); compensated
        // summation keeps ascent comparisons meaningful near the optimum
        let loglik = units
            .iter()
            .map(|u| u.loglik)
            .collect::<CompensatedSum>()
            .value();
        let scores = ScoreSet::from_columns(units.iter().map(|u| u.score.as_slice()), params.len());
        Ok(DatasetEval { loglik, scores })
    }
}

/// Total log-likelihood and per-unit scores at one parameter value.
#[derive(Debug, Clone)]
pub struct DatasetEval {
    pub loglik: f64,
    pub scores: ScoreSet,
}

pub fn dataset_loglik(data: &EIDataset, params: &ParamVector) -> Result<f64, LikelihoodError> {
    Ok(data.evaluate(params)?.loglik)
}

pub fn dataset_score(data: &EIDataset, params: &ParamVector) -> Result<ScoreSet, LikelihoodError> {
    Ok(data.evaluate(params)?.scores)
}

/// Per-unit score vectors as columns of `S`, plus their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    per_unit: DMatrix<f64>,
    total: DVector<f64>,
}

impl ScoreSet {
    pub fn from_columns<'a>(columns: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let cols: Vec<&[f64]> = columns.collect();
        let per_unit = DMatrix::from_fn(dim, cols.len(), |r, c| cols[c][r]);
        let total = DVector::from_fn(dim, |r, _| cols.iter().map(|c| c[r]).sum());
        Self { per_unit, total }
    }

    /// `R(C-1) x s` matrix whose `h`-th column is unit `h`'s score.
    pub fn per_unit(&self) -> &DMatrix<f64> {
        &self.per_unit
    }

    pub fn total(&self) -> &DVector<f64> {
        &self.total
    }

    pub fn units(&self) -> usize {
        self.per_unit.ncols()
    }

    /// `max |u_k|` of the total score.
    pub fn max_abs(&self) -> f64 {
        self.total.amax()
    }
}

/// Centered cross-product of unit scores, `sum_h (u_h - ū)(u_h - ū)ᵀ`.
pub fn empirical_information(scores: &ScoreSet) -> DMatrix<f64> {
    let s = scores.units();
    let mean = if s > 0 {
        &scores.total / s as f64
    } else {
        scores.total.clone()
    };
    let mut centered = scores.per_unit.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    &centered * centered.transpose()
}

/// Numerical rank from singular values, relative tolerance
/// `max(dim) * eps * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * max;
    sv.iter().filter(|&&x| x > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tables::FreqTable;

    fn m(rows: &[u32], cols: &[u32]) -> MarginPair {
        MarginPair::new(rows.to_vec(), cols.to_vec()).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_rows() {
        let p = link(&ParamVector::zeros(3, 4));
        assert!(p.values().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn link_two_by_two() {
        let params = ParamVector::new(2, 2, vec![2f64.ln()], vec![0.0]).unwrap();
        let p = link(&params);
        for i in 0..2 {
            assert!((p.get(i, 0) - 1.0 / 3.0).abs() < 1e-15);
            assert!((p.get(i, 1) - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn packing_order_runs_columns_fastest() {
        let params = ParamVector::from_packed(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(params.phi(), &[1.0, 2.0]);
        assert_eq!(
            params.lambda_matrix(),
            vec![0.0, 0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 5.0, 6.0]
        );
        assert_eq!(params.packed(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(ParamVector::from_packed(3, 3, &[1.0; 5]).is_err());
        assert!(ParamVector::new(2, 2, vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn cond_prob_validation() {
        assert!(CondProbMatrix::from_rows(&[[0.5, 0.6]]).is_err());
        assert!(CondProbMatrix::from_rows(&[[1.5, -0.5]]).is_err());
        assert!(CondProbMatrix::from_rows(&[[0.5, 0.5], [0.1, 0.9]]).is_ok());
        assert!(inverse_link(&CondProbMatrix::from_rows(&[[1.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn v_stat_examples() {
        let t = FreqTable::from_rows(&[[1, 0], [0, 1]]).unwrap();
        assert_eq!(v_stat(t.entries(), &[0.0; 4]), 0.0);
        assert_eq!(v_stat(t.entries(), &[0.0, 0.0, 0.0, 3.0]), 3.0);
    }

    #[test]
    fn two_by_two_expectation_by_hand() {
        // tables n11 = 0, 1, 2 with weights exp(n22 * log 4) / prod n!
        let mp = m(&[2, 2], &[2, 2]);
        let lam = 4f64.ln();
        let e = cond_expectations(&mp, &[0.0, 0.0, 0.0, lam]).unwrap();
        // n11 = k forces n22 = k, n12 = n21 = 2 - k
        let w: Vec<f64> = (0..=2)
            .map(|k: i32| {
                let f = |x: i32| (1..=x).product::<i32>() as f64;
                4f64.powi(k) / (f(k) * f(k) * f(2 - k) * f(2 - k))
            })
            .collect();
        let z: f64 = w.iter().sum();
        let m11: f64 = w.iter().enumerate().map(|(k, x)| k as f64 * x).sum::<f64>() / z;
        assert!((e.get(0, 0) - m11).abs() < 1e-14);
        assert!((e.get(1, 1) - m11).abs() < 1e-14);
        assert!(e.margin_error() < 1e-12);
    }

    #[test]
    fn single_row_is_plain_multinomial() {
        let mp = m(&[10], &[2, 3, 5]);
        let params = ParamVector::new(1, 3, vec![0.3, -0.2], vec![]).unwrap();
        let p = link(&params);
        let direct: f64 = [2u32, 3, 5]
            .iter()
            .enumerate()
            .map(|(j, &n)| f64::from(n) * p.get(0, j).ln() - LogFactorial::new(5).get(n))
            .sum();
        let l = marginal_loglik(&mp, &params).unwrap();
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn cached_and_streaming_agree() {
        let mp = m(&[5, 7, 3], &[6, 4, 5]);
        let params = ParamVector::from_packed(3, 3, &[0.2, -0.4, 1.1, -0.3, 0.5, 2.0]).unwrap();
        let a = UnitTables::build(&mp, None).unwrap().evaluate(&params);
        let b = evaluate_unit(&mp, &params, None).unwrap();
        assert!((a.loglik - b.loglik).abs() < 1e-10);
        for (x, y) in a.score.iter().zip(&b.score) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn weights_are_normalized() {
        let ut = UnitTables::build(&m(&[4, 6], &[3, 3, 4]), None).unwrap();
        let w = ut.weights(&[0.0, 0.0, 0.0, 0.0, 1.5, -2.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn information_examples() {
        let s = ScoreSet::from_columns(
            [[1.0, 0.0].as_slice(), [-1.0, 0.0].as_slice()].into_iter(),
            2,
        );
        let e = empirical_information(&s);
        assert_eq!(e, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let s = ScoreSet::from_columns([[1.0, 2.0].as_slice(); 3].into_iter(), 2);
        assert_eq!(empirical_information(&s), DMatrix::zeros(2, 2));
        assert_eq!(s.total().as_slice(), &[3.0, 6.0]);
    }

    #[test]
    fn dataset_rejects_mixed_shapes() {
        assert!(EIDataset::new(vec![]).is_err());
        assert!(EIDataset::new(vec![m(&[2, 2], &[2, 2]), m(&[4], &[4])]).is_err());
    }

    #[test]
    fn streaming_limit_reports_unit() {
        let data = EIDataset::new(vec![
            m(&[1, 1], &[1, 1]),
            m(&[8, 20, 12], &[12, 7, 21]).clone(),
        ]);
        assert!(data.is_err());
        let data = EIDataset::new(vec![
            m(&[1, 1, 1], &[1, 1, 1]),
            m(&[8, 20, 12], &[12, 7, 21]),
        ])
        .unwrap()
        .with_table_limit(100);
        let err = data.evaluate(&ParamVector::zeros(3, 3)).unwrap_err();
        assert!(matches!(err, LikelihoodError::UnitTables { unit: 1, .. }));
    }
}
