//! Feature-space coverage of a selection, and a PCA projection for plots.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dq::{BinPartition, CoresetSelection};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub selected: usize,
    /// Mean over all patches of the distance to the nearest selected patch.
    pub mean_nn_distance: f64,
    /// Covering radius: the largest such distance.
    pub max_nn_distance: f64,
    /// Mean distance over unordered pairs of selected patches (0 for fewer
    /// than two).
    pub mean_pairwise_selected: f64,
    /// Fraction of bins with at least one selected patch.
    pub bin_occupancy: f64,
}

/// Nearest-selected-patch distance for every row of `m`.
pub fn nearest_selected_distances(m: &EmbeddingMatrix, selected: &[usize]) -> Vec<f64> {
    (0..m.n())
        .into_par_iter()
        .map(|i| {
            selected
                .iter()
                .map(|&s| m.sq_dist(i, s))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

pub fn coverage(
    m: &EmbeddingMatrix,
    sel: &CoresetSelection,
    bins: &BinPartition,
) -> Result<CoverageStats> {
    if sel.selected.is_empty() {
        return Err(Error::InvalidArgument("selection is empty".into()));
    }
    for &i in sel.selected.iter().chain(bins.bins.iter().flatten()) {
        m.check_index(i)?;
    }
    let mut selected = sel.selected.clone();
    selected.sort_unstable();
    selected.dedup();

    let nn = nearest_selected_distances(m, &selected);
    let mean_nn_distance = nn.iter().sum::<f64>() / nn.len() as f64;
    let max_nn_distance = nn.iter().copied().fold(0.0, f64::max);

    let pair_sums: Vec<f64> = (0..selected.len())
        .into_par_iter()
        .map(|a| {
            selected[a + 1..]
                .iter()
                .map(|&b| m.dist(selected[a], b))
                .sum::<f64>()
        })
        .collect();
    let pairs = selected.len() * selected.len().saturating_sub(1) / 2;
    let mean_pairwise_selected = if pairs == 0 {
        0.0
    } else {
        pair_sums.iter().sum::<f64>() / pairs as f64
    };

    let mut is_selected = vec![false; m.n()];
    for &s in &selected {
        is_selected[s] = true;
    }
    let occupied = bins
        .bins
        .iter()
        .filter(|b| b.iter().any(|&i| is_selected[i]))
        .count();
    let bin_occupancy = if bins.bins.is_empty() {
        0.0
    } else {
        occupied as f64 / bins.bins.len() as f64
    };

    Ok(CoverageStats {
        selected: selected.len(),
        mean_nn_distance,
        max_nn_distance,
        mean_pairwise_selected,
        bin_occupancy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each of the two components.
    pub variance: [f64; 2],
    /// Set when every row is identical; `coords` are then all zero.
    pub degenerate: bool,
}

/// First two principal components of the mean-centred rows. Each component
/// is oriented so its largest-magnitude loading is positive.
pub fn project_2d(m: &EmbeddingMatrix) -> Result<Projection> {
    let (n, d) = (m.n(), m.d());
    if n < 2 {
        return Err(Error::InvalidArgument(
            "projection needs at least two rows".into(),
        ));
    }
    let first = m.row(0);
    if (1..n).all(|i| m.row(i) == first) {
        return Ok(Projection {
            coords: vec![[0.0; 2]; n],
            variance: [0.0; 2],
            degenerate: true,
        });
    }

    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (acc, &v) in mean.iter_mut().zip(m.row(i)) {
            *acc += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| f64::from(m.row(i)[j]) - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let component = |k: usize| -> Option<(Vec<f64>, f64)> {
        let idx = *order.get(k)?;
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (j, &x)| if x.abs() > best.1 { (j, x.abs()) } else { best })
            .0;
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Some((v, eig.eigenvalues[idx].max(0.0)))
    };
    let pcs: Vec<(Vec<f64>, f64)> = (0..2).filter_map(component).collect();

    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut out = [0.0; 2];
            for (k, (v, _)) in pcs.iter().enumerate() {
                out[k] = row.iter().zip(v).map(|(a, b)| a * b).sum();
            }
            out
        })
        .collect();
    let mut variance = [0.0; 2];
    for (k, (_, var)) in pcs.iter().enumerate() {
        variance[k] = *var;
    }
    Ok(Projection {
        coords,
        variance,
        degenerate: false,
    })
}
