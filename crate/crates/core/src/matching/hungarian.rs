//! Exact rectangular linear assignment (rows ≤ columns).
//!
//! Shortest augmenting paths with row/column potentials, `O(R²·C)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One-to-one pairs `(row, column)` plus the columns left unassigned.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(gt index, prediction index)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &Tensor) -> Scalar {
        let cols = cost.cols();
        self.pairs.iter().map(|&(r, c)| cost.data()[r * cols + c]).sum()
    }

    /// Prediction index assigned to each row.
    pub fn columns(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, c)| c).collect()
    }
}

/// Minimum-cost assignment of every row of `cost[R, C]` to a distinct column.
pub fn hungarian_assign(cost: &Tensor) -> Result<Assignment> {
    let shape = cost.shape();
    if shape.len() != 2 {
        return Err(Error::Assignment(format!("cost must be a matrix, got {shape:?}")));
    }
    let (rows, cols) = (shape[0], shape[1]);
    if rows > cols {
        return Err(Error::Assignment(format!(
            "{rows} ground-truth rows exceed {cols} prediction columns"
        )));
    }
    if !cost.all_finite() {
        return Err(Error::Assignment("cost matrix has non-finite entries".into()));
    }
    let a = cost.data();
    let at = |r: usize, c: usize| a[(r - 1) * cols + (c - 1)];

    // 1-based; column 0 is the virtual source of each augmenting path.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut col = 0;
        let mut min_slack = vec![Scalar::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[col] = true;
            let row = owner[col];
            let mut delta = Scalar::INFINITY;
            let mut next = 0;
            for c in 1..=cols {
                if used[c] {
                    continue;
                }
                let slack = at(row, c) - u[row] - v[c];
                if slack < min_slack[c] {
                    min_slack[c] = slack;
                    way[c] = col;
                }
                if min_slack[c] < delta {
                    delta = min_slack[c];
                    next = c;
                }
            }
            for c in 0..=cols {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    min_slack[c] -= delta;
                }
            }
            col = next;
            if owner[col] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col];
            owner[col] = owner[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }

    let mut by_row = vec![usize::MAX; rows];
    let mut unmatched = Vec::with_capacity(cols - rows);
    for c in 1..=cols {
        if owner[c] == 0 {
            unmatched.push(c - 1);
        } else {
            by_row[owner[c] - 1] = c - 1;
        }
    }
    Ok(Assignment {
        pairs: by_row.into_iter().enumerate().collect(),
        unmatched,
    })
}
