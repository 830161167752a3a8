//! Single-unit likelihood scan.
//!
//! Every table with the observed margins is turned into a candidate set of
//! conditional probabilities (zeros replaced by `exp(-xi)`, rows scaled to
//! one) and the marginal log-likelihood is evaluated there. Independence and
//! optional random mixtures are appended for comparison.

use std::collections::HashSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Uniform};
use serde::Serialize;

use crate::extreme::{enumerate_extremes, ExtremeError};
use crate::likelihood::{inverse_link, table_params, CondProbMatrix, LikelihoodError, UnitTables};
use crate::par;
use crate::tables::MarginPair;

/// `-log(1e-50)`, the default zero replacement.
pub const DEFAULT_SCAN_XI: f64 = 115.129_254_649_702_28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    Ordinary,
    Extreme,
    Independence,
    RandomMixture,
}

impl fmt::Display for ScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanKind::Ordinary => "ordinary",
            ScanKind::Extreme => "extreme",
            ScanKind::Independence => "independence",
            ScanKind::RandomMixture => "random_mixture",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRecord {
    /// Table position in enumeration order; later rows continue the count.
    pub index: usize,
    pub loglik: f64,
    pub kind: ScanKind,
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub xi: f64,
    pub random_mixtures: usize,
    pub seed: u64,
    /// Mixtures whose log-likelihood falls below this are dropped.
    pub floor: Option<f64>,
    pub table_limit: Option<usize>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            xi: DEFAULT_SCAN_XI,
            random_mixtures: 0,
            seed: 0,
            floor: None,
            table_limit: None,
        }
    }
}

fn independence_probs(margins: &MarginPair) -> CondProbMatrix {
    let n = f64::from(margins.total());
    let row: Vec<f64> = margins.cols().iter().map(|&c| f64::from(c) / n).collect();
    CondProbMatrix::repeated_row(margins.nrows(), &row).expect("column shares sum to one")
}

/// Scans one unit. Records come in enumeration order, then independence,
/// then the kept random mixtures.
pub fn scan(margins: &MarginPair, opts: &ScanOptions) -> Result<Vec<ScanRecord>, LikelihoodError> {
    if !(opts.xi.is_finite() && opts.xi > 0.0) {
        return Err(ExtremeError::InvalidXi(opts.xi).into());
    }
    let (nrows, ncols) = (margins.nrows(), margins.ncols());
    let unit = UnitTables::build(margins, opts.table_limit)?;
    let extremes: HashSet<Vec<u32>> = enumerate_extremes(margins, None)?
        .into_iter()
        .map(|z| z.table().entries().to_vec())
        .collect();

    let tables = unit.collection();
    let scored = par::map_range(tables.len(), |k| {
        let entries = tables.entries(k);
        let params = table_params(entries, nrows, ncols, opts.xi)?;
        Ok::<_, LikelihoodError>(ScanRecord {
            index: k,
            loglik: unit.loglik(&params),
            kind: if extremes.contains(entries) {
                ScanKind::Extreme
            } else {
                ScanKind::Ordinary
            },
        })
    });
    let mut records = scored.into_iter().collect::<Result<Vec<_>, _>>()?;

    let indep = independence_probs(margins);
    records.push(ScanRecord {
        index: records.len(),
        loglik: unit.loglik(&inverse_link(&indep)?),
        kind: ScanKind::Independence,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let unit_interval = Uniform::new(0.0, 1.0).expect("valid range");
    for _ in 0..opts.random_mixtures {
        let w: f64 = unit_interval.sample(&mut rng);
        let mut values = Vec::with_capacity(nrows * ncols);
        for i in 0..nrows {
            // flat Dirichlet row from normalized unit exponentials
            let draws: Vec<f64> = (0..ncols).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            values.extend(
                draws
                    .iter()
                    .zip(indep.row(i))
                    .map(|(d, p)| w * p + (1.0 - w) * d / total),
            );
        }
        let probs = CondProbMatrix::normalized(nrows, ncols, values)?;
        let loglik = unit.loglik(&inverse_link(&probs)?);
        if opts.floor.is_some_and(|f| loglik < f) {
            continue;
        }
        records.push(ScanRecord {
            index: records.len(),
            loglik,
            kind: ScanKind::RandomMixture,
        });
    }
    Ok(records)
}
