//! Symmetrized k-nearest-neighbour graphs.

use nalgebra::DMatrix;

use crate::data::DistanceMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Adjacency {
    pub matrix: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// A_ij = 1 if j is among the k nearest neighbours of i or vice versa.
///
/// Equal distances are ordered by index, so the graph is fully determined by
/// the distance matrix.
pub fn knn_adjacency(d: &DistanceMatrix, k: usize) -> Result<Adjacency> {
    let n = d.n();
    if k == 0 {
        return Err(Error::InvalidArgument("k_neighbors must be >= 1".into()));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!("need n > k_neighbors, got n={n}, k={k}")));
    }
    let mut a = DMatrix::zeros(n, n);
    let mut duplicates = 0usize;
    let mut boundary_ties = 0usize;
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&x, &y| d.get(i, x).total_cmp(&d.get(i, y)).then(x.cmp(&y)));
        for &j in &others[..k] {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        if d.get(i, others[k - 1]) == d.get(i, others[k]) {
            boundary_ties += 1;
        }
        duplicates += others.iter().filter(|&&j| j > i && d.get(i, j) == 0.0).count();
    }
    let mut warnings = Vec::new();
    if duplicates > 0 {
        warnings.push(format!("{duplicates} pairs of units share coordinates"));
    }
    if boundary_ties > 0 {
        warnings.push(format!(
            "{boundary_ties} units have tied k-th neighbour distances; ties broken by smallest index"
        ));
    }
    Ok(Adjacency { matrix: a, warnings })
}

/// Component label for each node, numbered in order of the smallest member.
pub fn connected_components(a: &DMatrix<f64>) -> Vec<usize> {
    let n = a.nrows();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if j != i && a[(i, j)] != 0.0 && label[j] == usize::MAX {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    label
}
