//! Estimators of shared row-conditional probabilities from the margins of
//! many units, and accuracy metrics against a known truth.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::likelihood::{
    empirical_information, inverse_link, link, numerical_rank, CondProbMatrix, DatasetEval,
    EIDataset, LikelihoodError, ParamVector,
};
use crate::tables::{FreqTable, MarginPair};

/// Lower/upper clipping bound applied to regression estimates before IPF.
pub const CLIP_DELTA: f64 = 1e-6;
/// IPF stops once every margin is matched to this absolute tolerance.
pub const IPF_TOL: f64 = 1e-10;
pub const IPF_MAX_SWEEPS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("row-share matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("{units} units cannot identify {needed} parameters")]
    UnderIdentified { units: usize, needed: usize },
    #[error("empirical information is singular (rank {rank} of {dim})")]
    SingularInformation { rank: usize, dim: usize },
    #[error("IPF did not converge, margin residual {residual:e}")]
    IpfNonConvergence { residual: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("IPF needs strictly positive finite entries")]
    NonPositive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub score_norm: f64,
    pub step: f64,
    pub halvings: usize,
}

/// Outcome of a likelihood-based fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub params: ParamVector,
    pub probs: CondProbMatrix,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `max |u|` of the total score at `params`.
    pub score_norm: f64,
    /// `sigma_max / sigma_min` of the empirical information at `params`.
    pub info_condition: f64,
    /// Initial point followed by one record per accepted step.
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoodmanResult {
    /// Regression estimates, rows completed by `1 - sum`, possibly outside [0, 1].
    pub raw: Vec<f64>,
    pub nrows: usize,
    pub ncols: usize,
    pub repaired: CondProbMatrix,
    /// Raw cells that fell outside `[CLIP_DELTA, 1 - CLIP_DELTA]`.
    pub clipped_cells: usize,
}

/// Least squares of the unit column shares on the unit row shares, with the
/// design `X = U ⊗ I_{C-1}` and response the first `C - 1` column shares
/// stacked unit by unit. Out-of-range estimates are clipped, the implied
/// aggregate joint table is fitted to the aggregate margins by IPF and
/// rescaled into conditional rows.
pub fn goodman(data: &EIDataset) -> Result<GoodmanResult, EstimateError> {
    let (nrows, ncols, s) = (data.nrows(), data.ncols(), data.len());
    if s < nrows {
        return Err(EstimateError::RankDeficient(format!(
            "{s} units for {nrows} row categories"
        )));
    }
    let (u, v) = data.share_matrices();
    let rank = numerical_rank(&u);
    if rank < nrows {
        return Err(EstimateError::RankDeficient(format!(
            "rank {rank} < {nrows}"
        )));
    }
    let k = ncols - 1;
    let mut raw = vec![0.0; nrows * ncols];
    if k > 0 {
        let x = u.kronecker(&DMatrix::<f64>::identity(k, k));
        let y = DVector::from_fn(s * k, |r, _| v[(r / k, r % k)]);
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * y;
        let beta = xtx
            .cholesky()
            .ok_or_else(|| EstimateError::RankDeficient("X'X is not positive definite".into()))?
            .solve(&xty);
        for i in 0..nrows {
            for j in 0..k {
                raw[i * ncols + j] = beta[i * k + j];
            }
        }
    }
    for i in 0..nrows {
        let s: f64 = raw[i * ncols..i * ncols + k].iter().sum();
        raw[i * ncols + k] = 1.0 - s;
    }

    let clipped_cells = raw
        .iter()
        .filter(|&&p| !(CLIP_DELTA..=1.0 - CLIP_DELTA).contains(&p))
        .count();
    let clipped: Vec<f64> = raw
        .iter()
        .map(|p| p.clamp(CLIP_DELTA, 1.0 - CLIP_DELTA))
        .collect();
    let probs = CondProbMatrix::normalized(nrows, ncols, clipped)?;

    let aggregate = data.aggregate()?;
    let joint: Vec<f64> = (0..nrows)
        .flat_map(|i| {
            let n = f64::from(aggregate.rows()[i]);
            probs.row(i).iter().map(move |p| n * p).collect::<Vec<_>>()
        })
        .collect();
    let fitted = ipf_adjust(&joint, &aggregate)?;
    let repaired = CondProbMatrix::normalized(nrows, ncols, fitted)?;
    Ok(GoodmanResult {
        raw,
        nrows,
        ncols,
        repaired,
        clipped_cells,
    })
}

fn margin_residual(joint: &[f64], margins: &MarginPair) -> f64 {
    let ncols = margins.ncols();
    let rows = joint
        .chunks_exact(ncols)
        .zip(margins.rows())
        .map(|(r, &t)| (r.iter().sum::<f64>() - f64::from(t)).abs());
    let cols = (0..ncols).map(|j| {
        let s: f64 = joint.iter().skip(j).step_by(ncols).sum();
        (s - f64::from(margins.cols()[j])).abs()
    });
    rows.chain(cols).fold(0.0, f64::max)
}

/// Iterative proportional fitting: alternate row and column scaling of a
/// strictly positive table until both margins match within [`IPF_TOL`].
/// Cross-product ratios of the input are preserved.
pub fn ipf_adjust(joint: &[f64], margins: &MarginPair) -> Result<Vec<f64>, EstimateError> {
    let (nrows, ncols) = (margins.nrows(), margins.ncols());
    if joint.len() != nrows * ncols {
        return Err(EstimateError::Dimension(format!(
            "{} entries for {nrows}x{ncols} margins",
            joint.len()
        )));
    }
    if joint.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(EstimateError::NonPositive);
    }
    let mut t = joint.to_vec();
    for _ in 0..IPF_MAX_SWEEPS {
        if margin_residual(&t, margins) < IPF_TOL {
            return Ok(t);
        }
        for (row, &target) in t.chunks_exact_mut(ncols).zip(margins.rows()) {
            let f = f64::from(target) / row.iter().sum::<f64>();
            row.iter_mut().for_each(|x| *x *= f);
        }
        for (j, &target) in margins.cols().iter().enumerate() {
            let s: f64 = t.iter().skip(j).step_by(ncols).sum();
            let f = f64::from(target) / s;
            t.iter_mut().skip(j).step_by(ncols).for_each(|x| *x *= f);
        }
    }
    let residual = margin_residual(&t, margins);
    if residual < IPF_TOL {
        Ok(t)
    } else {
        Err(EstimateError::IpfNonConvergence { residual })
    }
}

/// Stopping rules and safeguards for [`fisher_scoring`].
#[derive(Debug, Clone, PartialEq)]
pub struct FisherOptions {
    pub max_iterations: usize,
    pub max_halvings: usize,
    /// Converged once `max |u|` drops below this.
    pub score_tol: f64,
    /// Converged once the log-likelihood gain drops below this, provided
    /// `max |u| < residual_tol`.
    pub loglik_tol: f64,
    pub residual_tol: f64,
}

impl Default for FisherOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            max_halvings: 20,
            score_tol: 1e-6,
            loglik_tol: 1e-9,
            residual_tol: 1e-5,
        }
    }
}

fn information_solve(eval: &DatasetEval) -> Result<(DVector<f64>, f64), EstimateError> {
    let info = empirical_information(&eval.scores);
    let dim = info.nrows();
    let svd = info.clone().svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    let tol = dim as f64 * f64::EPSILON * max;
    let rank = svd.singular_values.iter().filter(|&&x| x > tol).count();
    if rank < dim {
        return Err(EstimateError::SingularInformation { rank, dim });
    }
    let dir = svd
        .solve(eval.scores.total(), 0.0)
        .map_err(|_| EstimateError::SingularInformation { rank, dim })?;
    Ok((dir, max / min))
}

/// Maximizes the exact multinomial likelihood of all units by Fisher
/// scoring with the empirical information, halving the step whenever the
/// log-likelihood would decrease.
///
/// Without `init` the run starts from the inverse link of the repaired
/// regression estimate. Clipped regression cells sit at `CLIP_DELTA`, which
/// can put nearly all table weight on a single table and leave the
/// information singular; the run is then restarted from independence, as it
/// is when the regression itself fails.
pub fn fisher_scoring(
    data: &EIDataset,
    init: Option<ParamVector>,
    opts: &FisherOptions,
) -> Result<FitResult, EstimateError> {
    let (nrows, ncols) = (data.nrows(), data.ncols());
    let dim = nrows * (ncols - 1);
    if data.len() < dim {
        return Err(EstimateError::UnderIdentified {
            units: data.len(),
            needed: dim,
        });
    }
    if let Some(p) = init {
        return scoring_run(data, p, opts);
    }
    let independence = independence_params(data)?;
    match goodman(data) {
        Ok(g) => match scoring_run(data, inverse_link(&g.repaired)?, opts) {
            Err(EstimateError::SingularInformation { .. }) => scoring_run(data, independence, opts),
            other => other,
        },
        Err(_) => scoring_run(data, independence, opts),
    }
}

fn scoring_run(
    data: &EIDataset,
    mut params: ParamVector,
    opts: &FisherOptions,
) -> Result<FitResult, EstimateError> {
    let (nrows, ncols) = (data.nrows(), data.ncols());
    let mut eval = data.evaluate(&params)?;
    let mut trace = vec![IterationRecord {
        iteration: 0,
        loglik: eval.loglik,
        score_norm: eval.scores.max_abs(),
        step: 0.0,
        halvings: 0,
    }];
    let mut converged = eval.scores.max_abs() < opts.score_tol;
    let mut iterations = 0;
    let mut condition = f64::NAN;

    while !converged && iterations < opts.max_iterations {
        let (dir, cond) = information_solve(&eval)?;
        condition = cond;
        let base = params.packed();
        let try_step = |step: f64| -> Result<(ParamVector, DatasetEval), EstimateError> {
            let cand: Vec<f64> = base
                .iter()
                .zip(dir.iter())
                .map(|(b, d)| b + step * d)
                .collect();
            let cand = ParamVector::from_packed(nrows, ncols, &cand)?;
            let ce = data.evaluate(&cand)?;
            Ok((cand, ce))
        };
        let mut step = 1.0;
        let mut accepted = None;
        for halvings in 0..=opts.max_halvings {
            let (cand, ce) = try_step(step)?;
            if ce.loglik >= eval.loglik {
                accepted = Some((cand, ce, halvings));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, ce, halvings)) = accepted else {
            // no ascent possible at working precision
            break;
        };
        iterations += 1;
        let gain = ce.loglik - eval.loglik;
        params = cand;
        eval = ce;
        let norm = eval.scores.max_abs();
        trace.push(IterationRecord {
            iteration: iterations,
            loglik: eval.loglik,
            score_norm: norm,
            step,
            halvings,
        });
        converged =
            norm < opts.score_tol || (gain.abs() < opts.loglik_tol && norm < opts.residual_tol);
    }
    let score_norm = eval.scores.max_abs();
    if !converged {
        converged = score_norm < opts.score_tol;
    }
    if let Ok((_, cond)) = information_solve(&eval) {
        condition = cond;
    }
    Ok(FitResult {
        probs: link(&params),
        params,
        loglik: eval.loglik,
        iterations,
        converged,
        score_norm,
        info_condition: condition,
        trace,
    })
}

fn independence_params(data: &EIDataset) -> Result<ParamVector, LikelihoodError> {
    inverse_link(&independence_probs(data)?)
}

/// Every row equal to the aggregate column shares `n_00j / n`.
pub fn independence_probs(data: &EIDataset) -> Result<CondProbMatrix, LikelihoodError> {
    let n = data.total() as f64;
    let row: Vec<f64> = data.col_totals().iter().map(|&c| c as f64 / n).collect();
    CondProbMatrix::normalized(data.nrows(), data.ncols(), row.repeat(data.nrows()))
}

/// Closed-form independence fit, evaluated under the exact likelihood.
pub fn independence_fit(data: &EIDataset) -> Result<FitResult, EstimateError> {
    evaluate_fit(data, &independence_probs(data)?)
}

/// Wraps fixed conditional probabilities (strictly positive) as a
/// non-iterative [`FitResult`] evaluated under the exact likelihood.
pub fn evaluate_fit(data: &EIDataset, probs: &CondProbMatrix) -> Result<FitResult, EstimateError> {
    let params = inverse_link(probs)?;
    let eval = data.evaluate(&params)?;
    let score_norm = eval.scores.max_abs();
    let info_condition = information_solve(&eval).map_or(f64::INFINITY, |(_, c)| c);
    Ok(FitResult {
        probs: link(&params),
        params,
        loglik: eval.loglik,
        iterations: 0,
        converged: score_norm < FisherOptions::default().score_tol,
        score_norm,
        info_condition,
        trace: Vec::new(),
    })
}

/// Root-mean-square discrepancy over units and cells. A single estimate is
/// taken as shared by all `s` units; otherwise one estimate per unit.
///
/// # Panics
/// On shape mismatch or when the number of per-unit estimates is not `s`.
pub fn metric_me(estimates: &[CondProbMatrix], truth: &CondProbMatrix, s: usize) -> f64 {
    let shape = (truth.nrows(), truth.ncols());
    assert!(
        estimates.iter().all(|e| (e.nrows(), e.ncols()) == shape),
        "estimate and truth shapes differ"
    );
    let sq = |e: &CondProbMatrix| -> f64 {
        e.values()
            .iter()
            .zip(truth.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum()
    };
    let total = match estimates {
        [shared] => s as f64 * sq(shared),
        many => {
            assert_eq!(many.len(), s, "one estimate per unit expected");
            many.iter().map(sq).sum()
        }
    };
    (total / (s * shape.0 * shape.1) as f64).sqrt()
}

/// Root-mean-square gap between the row-conditional distributions of a
/// table and `truth`.
///
/// # Panics
/// On shape mismatch.
pub fn metric_m(z: &FreqTable, truth: &CondProbMatrix) -> f64 {
    assert_eq!((z.nrows(), z.ncols()), (truth.nrows(), truth.ncols()));
    let mut sum = 0.0;
    for i in 0..z.nrows() {
        let row_total: u32 = z.row(i).iter().sum();
        for j in 0..z.ncols() {
            let p = f64::from(z.get(i, j)) / f64::from(row_total);
            sum += (p - truth.get(i, j)).powi(2);
        }
    }
    (sum / (z.nrows() * z.ncols()) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[u32], cols: &[u32]) -> MarginPair {
        MarginPair::new(rows.to_vec(), cols.to_vec()).unwrap()
    }

    #[test]
    fn ipf_fixed_points() {
        let mp = m(&[3, 1], &[2, 2]);
        let fitted = vec![1.5, 1.5, 0.5, 0.5];
        assert_eq!(ipf_adjust(&fitted, &mp).unwrap(), fitted);
        let indep = mp.independence_table();
        assert_eq!(ipf_adjust(&indep, &mp).unwrap(), indep);
    }

    #[test]
    fn ipf_hand_example() {
        let out = ipf_adjust(&[1.0, 1.0, 1.0, 1.0], &m(&[3, 1], &[2, 2])).unwrap();
        for (a, b) in out.iter().zip([1.5, 1.5, 0.5, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ipf_rejects_zero_and_shape() {
        assert_eq!(
            ipf_adjust(&[0.0, 1.0, 1.0, 1.0], &m(&[3, 1], &[2, 2])),
            Err(EstimateError::NonPositive)
        );
        assert!(matches!(
            ipf_adjust(&[1.0; 3], &m(&[3, 1], &[2, 2])),
            Err(EstimateError::Dimension(_))
        ));
    }

    #[test]
    fn metric_me_examples() {
        let truth = CondProbMatrix::from_rows(&[
            [0.49, 0.28, 0.23],
            [0.30, 0.48, 0.22],
            [0.21, 0.32, 0.47],
        ])
        .unwrap();
        assert_eq!(metric_me(std::slice::from_ref(&truth), &truth, 60), 0.0);
        let shifted = CondProbMatrix::from_rows(&[
            [0.49, 0.38, 0.13],
            [0.30, 0.48, 0.22],
            [0.21, 0.32, 0.47],
        ])
        .unwrap();
        let expect = (0.02f64 / 9.0).sqrt();
        for s in [1, 7, 60] {
            assert!((metric_me(std::slice::from_ref(&shifted), &truth, s) - expect).abs() < 1e-12);
        }
        let per_unit = vec![truth.clone(), shifted.clone()];
        let expect = (0.02f64 / 18.0).sqrt();
        assert!((metric_me(&per_unit, &truth, 2) - expect).abs() < 1e-12);
    }

    #[test]
    fn metric_m_zero_when_rows_match() {
        let truth = CondProbMatrix::from_rows(&[[0.25, 0.75], [0.5, 0.5]]).unwrap();
        let z = FreqTable::from_rows(&[[1, 3], [2, 2]]).unwrap();
        assert_eq!(metric_m(&z, &truth), 0.0);
    }

    #[test]
    fn under_identified_is_refused() {
        let data = EIDataset::new(vec![m(&[2, 2], &[1, 3]); 1]).unwrap();
        assert_eq!(
            fisher_scoring(&data, None, &FisherOptions::default()),
            Err(EstimateError::UnderIdentified {
                units: 1,
                needed: 2
            })
        );
    }

    #[test]
    fn goodman_needs_full_rank() {
        let data = EIDataset::new(vec![m(&[2, 2], &[1, 3]), m(&[4, 4], &[3, 5])]).unwrap();
        assert!(matches!(
            goodman(&data),
            Err(EstimateError::RankDeficient(_))
        ));
        let data = EIDataset::new(vec![m(&[2, 2], &[1, 3])]).unwrap();
        assert!(matches!(
            goodman(&data),
            Err(EstimateError::RankDeficient(_))
        ));
    }
}
