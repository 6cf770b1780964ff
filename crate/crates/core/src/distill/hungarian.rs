use crate::error::{Error, Result};

/// A perfect matching of rows to columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `mapping[row] = column`.
    pub mapping: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    /// `inverse[column] = row`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.mapping.len()];
        for (r, &c) in self.mapping.iter().enumerate() {
            inv[c] = r;
        }
        inv
    }
}

/// Minimum-cost perfect assignment on a square cost matrix, via shortest
/// augmenting paths with row/column potentials (O(k^3)).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let k = cost.len();
    for row in cost {
        if row.len() != k {
            return Err(Error::Dimension {
                op: "hungarian",
                lhs: vec![k, k],
                rhs: vec![k, row.len()],
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("hungarian: non-finite cost".to_string()));
        }
    }
    if k == 0 {
        return Ok(Assignment {
            mapping: vec![],
            total_cost: 0.0,
        });
    }
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut mapping = vec![0; k];
    for j in 1..=k {
        mapping[owner[j] - 1] = j - 1;
    }
    let total_cost = mapping.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    Ok(Assignment {
        mapping,
        total_cost,
    })
}

/// Pads a rectangular matrix to square with `fill`.
pub fn pad_square(cost: &[Vec<f64>], cols: usize, fill: f64) -> Vec<Vec<f64>> {
    let k = cost.len().max(cols);
    (0..k)
        .map(|r| {
            (0..k)
                .map(|c| cost.get(r).and_then(|row| row.get(c)).copied().unwrap_or(fill))
                .collect()
        })
        .collect()
}
