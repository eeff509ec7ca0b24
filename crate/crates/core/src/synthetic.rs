//! Seeded synthetic mixed-type table used by demos and end-to-end checks.
//!
//! Rows come from a two-component mixture. Four real features share a
//! component-specific mean and a common latent factor; two categorical
//! features have skewed, component-dependent marginals, so a row's context
//! carries information about every cell.

use crate::data::{Cell, FeatureSpec, MixedTable, TableSchema};
use crate::nn::SeededRng;
use crate::Result;

const MEANS: [[f64; 4]; 2] = [[-2.0, 1.0, 0.0, 3.0], [2.0, -1.0, 4.0, 0.0]];
const LOADINGS: [f64; 4] = [1.0, -0.8, 0.6, 1.2];
const NOISE: f64 = 0.3;
const COLOURS: [[f64; 4]; 2] = [[0.70, 0.20, 0.07, 0.03], [0.03, 0.07, 0.20, 0.70]];
const SIZES: [[f64; 3]; 2] = [[0.80, 0.15, 0.05], [0.10, 0.30, 0.60]];

pub fn mixture_schema() -> TableSchema {
    TableSchema::new(vec![
        FeatureSpec::real("x1"),
        FeatureSpec::real("x2"),
        FeatureSpec::real("x3"),
        FeatureSpec::real("x4"),
        FeatureSpec::categorical("colour", ["red", "green", "blue", "black"]),
        FeatureSpec::categorical("size", ["small", "medium", "large"]),
    ])
    .expect("static schema is valid")
}

/// `n` raw (unstandardized) rows; component 1 has weight 0.4.
pub fn mixture_table(n: usize, seed: u64) -> Result<MixedTable> {
    let mut rng = SeededRng::new(seed);
    let rows = (0..n)
        .map(|_| {
            let c = usize::from(rng.uniform() < 0.4);
            let h = rng.standard_normal();
            let mut row: Vec<Cell> = (0..4)
                .map(|j| Cell::Real(MEANS[c][j] + LOADINGS[j] * h + NOISE * rng.standard_normal()))
                .collect();
            row.push(Cell::Cat(rng.categorical(&COLOURS[c])));
            // size leans one step larger when the latent factor is high
            let mut sizes = SIZES[c];
            if h > 1.0 {
                sizes = [sizes[0] * 0.5, sizes[1], sizes[2] * 2.0];
            }
            row.push(Cell::Cat(rng.categorical(&sizes)));
            row
        })
        .collect();
    MixedTable::new(mixture_schema(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_shaped() {
        let a = mixture_table(300, 4).unwrap();
        assert_eq!(a, mixture_table(300, 4).unwrap());
        assert_ne!(a, mixture_table(300, 5).unwrap());
        assert_eq!((a.n_rows(), a.n_cols()), (300, 6));
        assert!(a.standardize().is_ok());
    }

    #[test]
    fn categorical_marginals_are_skewed() {
        let t = mixture_table(4000, 1).unwrap();
        let mut counts = [0usize; 4];
        for c in t.cat_column(4) {
            counts[c] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64 / 4000.0;
        let min = *counts.iter().min().unwrap() as f64 / 4000.0;
        assert!(max > 0.3 && min < 0.15, "{counts:?}");
    }
}
