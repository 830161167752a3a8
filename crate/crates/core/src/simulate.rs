//! Synthetic ecological-inference datasets with known conditional
//! probabilities.
//!
//! Each unit draws its row margins from `n` uniform categorical draws and
//! then, row by row, its cells from the matching row of `Π`. Units with an
//! empty row or column are redrawn; the number of redraws is reported.

use rand::distr::{weighted::WeightedIndex, Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::likelihood::{CondProbMatrix, EIDataset, LikelihoodError};
use crate::tables::{FreqTable, MarginPair};

/// Conditional probabilities used by the standard 3x3 simulation study.
pub const TABLE3_PI: [[f64; 3]; 3] = [[0.49, 0.28, 0.23], [0.30, 0.48, 0.22], [0.21, 0.32, 0.47]];

pub fn table3_pi() -> CondProbMatrix {
    CondProbMatrix::from_rows(&TABLE3_PI).expect("rows sum to one")
}

#[derive(Debug, Clone)]
pub struct Simulated {
    /// Full unit tables, which the estimators never see.
    pub tables: Vec<FreqTable>,
    pub margins: Vec<MarginPair>,
    /// Units discarded because a margin was zero.
    pub rejections: usize,
}

impl Simulated {
    pub fn dataset(&self) -> Result<EIDataset, LikelihoodError> {
        EIDataset::new(self.margins.clone())
    }
}

/// Draws `s` units of size `n` from `pi` using a ChaCha8 stream seeded by
/// `seed`; the same arguments always produce the same units.
///
/// # Panics
/// If `s` or `n` is zero, or `n` is smaller than both `R` and `C` so that no
/// unit could ever have all margins positive.
pub fn simulate(pi: &CondProbMatrix, s: usize, n: u32, seed: u64) -> Simulated {
    let (nrows, ncols) = (pi.nrows(), pi.ncols());
    assert!(s > 0 && n > 0, "need at least one unit of positive size");
    assert!(
        n as usize >= nrows.max(ncols),
        "unit size {n} cannot fill a {nrows}x{ncols} table"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row_dist = Uniform::new(0, nrows).expect("nonempty range");
    let cell_dists: Vec<WeightedIndex<f64>> = (0..nrows)
        .map(|i| WeightedIndex::new(pi.row(i)).expect("valid probability row"))
        .collect();

    let mut tables = Vec::with_capacity(s);
    let mut margins = Vec::with_capacity(s);
    let mut rejections = 0;
    while tables.len() < s {
        let mut row_counts = vec![0u32; nrows];
        for _ in 0..n {
            row_counts[row_dist.sample(&mut rng)] += 1;
        }
        let mut entries = vec![0u32; nrows * ncols];
        for (i, &count) in row_counts.iter().enumerate() {
            for _ in 0..count {
                entries[i * ncols + cell_dists[i].sample(&mut rng)] += 1;
            }
        }
        let table = FreqTable::new(nrows, ncols, entries).expect("shape matches");
        match table.margins() {
            Ok(m) => {
                margins.push(m);
                tables.push(table);
            }
            Err(_) => rejections += 1,
        }
    }
    Simulated {
        tables,
        margins,
        rejections,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let pi = table3_pi();
        let a = simulate(&pi, 20, 40, 7);
        let b = simulate(&pi, 20, 40, 7);
        assert_eq!(a.margins, b.margins);
        assert_eq!(a.tables.len(), 20);
        for (t, m) in a.tables.iter().zip(&a.margins) {
            assert!(t.has_margins(m));
            assert_eq!(m.total(), 40);
        }
        assert_ne!(simulate(&pi, 20, 40, 8).margins, a.margins);
    }

    #[test]
    fn small_units_get_rejected() {
        let sim = simulate(&table3_pi(), 30, 3, 1);
        assert_eq!(sim.margins.len(), 30);
        assert!(sim.rejections > 0);
    }
}
