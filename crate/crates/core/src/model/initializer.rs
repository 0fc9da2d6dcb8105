//! Video query initialization: frame queries are put into a consistent
//! instance order across frames by minimum-cost matching, then blended over
//! time with learned softmax weights.

use crate::error::{Error, Result};
use crate::tensor::{Linear, ParamStore, Scalar, Tape, Tensor, Var};

/// A perfect assignment of rows to columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `permutation[row] = column`.
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

/// Exact minimum-cost perfect assignment on a square `n × n` cost matrix
/// given row-major, in O(n³).
///
/// Among optimal assignments the lexicographically smallest permutation is
/// returned: rows are scanned in order and each takes the smallest column
/// compatible with optimality.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Assignment> {
    if cost.len() != n * n {
        return Err(Error::Validation(format!(
            "cost matrix must be square: {} entries for {n} rows",
            cost.len()
        )));
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::Validation(format!(
            "cost matrix entry ({}, {}) is not finite",
            i / n,
            i % n
        )));
    }
    if n == 0 {
        return Ok(Assignment {
            permutation: Vec::new(),
            total_cost: 0.0,
        });
    }
    let (u, v, mut row_of_col) = solve_duals(cost, n);
    let mut col_of_row = vec![0; n];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }

    // Every perfect matching inside the equality subgraph of the optimal
    // duals is optimal, so ties are resolved there.
    let scale = cost.iter().fold(0.0f64, |m, c| m.max(c.abs())) + 1.0;
    let tol = 1e-9 * scale;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| cost[i * n + j] - u[i] - v[j] <= tol)
                .collect()
        })
        .collect();
    let mut parent = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    for i in 0..n {
        for &j in &tight[i] {
            if j >= col_of_row[i] {
                break;
            }
            let r = row_of_col[j];
            if r < i {
                continue;
            }
            if let Some(path) = alternating_path(
                &tight,
                r,
                j,
                col_of_row[i],
                i,
                &row_of_col,
                &mut parent,
                &mut seen,
            ) {
                // `path` lists (row, new column) moves ending on row i's old column.
                for &(row, col) in &path {
                    col_of_row[row] = col;
                    row_of_col[col] = row;
                }
                col_of_row[i] = j;
                row_of_col[j] = i;
                break;
            }
        }
    }
    let total_cost = (0..n).map(|i| cost[i * n + col_of_row[i]]).sum();
    Ok(Assignment {
        permutation: col_of_row,
        total_cost,
    })
}

/// Searches for a re-matching of `start` (currently on column `taken`) that
/// only moves rows after `fixed` and ends on column `target`. Returns the
/// moves to apply.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    tight: &[Vec<usize>],
    start: usize,
    taken: usize,
    target: usize,
    fixed: usize,
    row_of_col: &[usize],
    parent: &mut [usize],
    seen: &mut [bool],
) -> Option<Vec<(usize, usize)>> {
    seen.iter_mut().for_each(|s| *s = false);
    // parent[col] = row that would move onto col.
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(start);
    seen[taken] = true;
    while let Some(row) = queue.pop_front() {
        for &col in &tight[row] {
            if seen[col] {
                continue;
            }
            if col == target {
                parent[col] = row;
                let mut moves = Vec::new();
                let mut c = col;
                loop {
                    let r = parent[c];
                    moves.push((r, c));
                    if r == start {
                        break;
                    }
                    c = old_col(r, row_of_col);
                }
                return Some(moves);
            }
            let owner = row_of_col[col];
            if owner <= fixed {
                continue;
            }
            seen[col] = true;
            parent[col] = row;
            queue.push_back(owner);
        }
    }
    None
}

fn old_col(row: usize, row_of_col: &[usize]) -> usize {
    row_of_col
        .iter()
        .position(|&r| r == row)
        .expect("matched row")
}

/// Shortest-augmenting-path Hungarian algorithm. Returns row duals, column
/// duals and the optimal `row_of_col` matching.
fn solve_duals(cost: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based arrays with a virtual column 0, following the classic layout.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let row_of_col = (1..=n).map(|j| p[j] - 1).collect();
    (u[1..].to_vec(), v[1..].to_vec(), row_of_col)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// `1 - cosine` between every row of `prev` and every row of `cur`, both
/// `n × c` row-major.
pub fn cosine_cost(prev: &[f64], cur: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(1.0 - cosine(&prev[i * c..(i + 1) * c], &cur[j * c..(j + 1) * c]));
        }
    }
    out
}

/// Per-frame permutations that align frame queries (`frames · n` rows of
/// width `c`) to frame 0: row `i` of reordered frame `t` is row
/// `perms[t][i]` of the input frame. With `chained`, frame `t` is matched
/// against the already reordered frame `t - 1`; otherwise against the raw one.
pub fn reorder_permutations<T: Scalar>(
    queries: &[T],
    frames: usize,
    n: usize,
    c: usize,
    chained: bool,
) -> Result<Vec<Vec<usize>>> {
    if queries.len() != frames * n * c || frames == 0 {
        return Err(Error::Shape {
            op: "reorder",
            lhs: vec![queries.len()],
            rhs: vec![frames, n, c],
        });
    }
    let q: Vec<f64> = queries.iter().map(|x| x.as_f64()).collect();
    let frame = |t: usize| &q[t * n * c..(t + 1) * n * c];
    let mut perms = vec![(0..n).collect::<Vec<_>>()];
    let mut prev: Vec<f64> = frame(0).to_vec();
    for t in 1..frames {
        let cur = frame(t);
        let sigma = hungarian(&cosine_cost(&prev, cur, n, c), n)?.permutation;
        prev = if chained {
            sigma
                .iter()
                .flat_map(|&j| cur[j * c..(j + 1) * c].iter().copied())
                .collect()
        } else {
            cur.to_vec()
        };
        perms.push(sigma);
    }
    Ok(perms)
}

/// Flattens per-frame permutations into row indices over the stacked
/// `frames · n` matrix.
pub fn gather_indices(perms: &[Vec<usize>]) -> Vec<usize> {
    perms
        .iter()
        .enumerate()
        .flat_map(|(t, p)| p.iter().map(move |&j| t * p.len() + j))
        .collect()
}

/// Learned temporal aggregation of reordered frame queries into video
/// queries: one score per (frame, slot), softmax over frames, weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct Aggregator {
    pub score: Linear,
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, channels: usize) -> Self {
        Aggregator {
            score: Linear::new(store, "initializer.score", channels, 1),
        }
    }

    /// Softmax weights `[frames, n]`, each column summing to 1.
    pub fn weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        reordered: Var,
        frames: usize,
    ) -> Result<Var> {
        let rows = tape.shape(reordered)[0];
        let s = self.score.forward(tape, vars, reordered)?;
        let s = tape.reshape(s, &[frames, rows / frames])?;
        tape.softmax(s, 0)
    }

    /// `reordered` is `[frames · n, C]`; returns `[n, C]`.
    pub fn aggregate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        reordered: Var,
        frames: usize,
    ) -> Result<Var> {
        let (rows, c) = (tape.shape(reordered)[0], tape.shape(reordered)[1]);
        let n = rows / frames;
        let w = self.weights(tape, vars, reordered, frames)?;
        let w = tape.reshape(w, &[rows])?;
        let weighted = tape.scale_rows(reordered, w)?;
        let weighted = tape.reshape(weighted, &[frames, n * c])?;
        let mean = tape.mean_rows(weighted)?;
        let total = tape.scale(mean, frames as f64);
        tape.reshape(total, &[n, c])
    }
}

/// Convenience wrapper applying [`reorder_permutations`] to a tensor.
pub fn reorder<T: Scalar>(queries: &Tensor<T>, frames: usize, chained: bool) -> Result<Tensor<T>> {
    let c = queries.cols();
    let n = queries.rows() / frames.max(1);
    let perms = reorder_permutations(queries.data(), frames, n, c, chained)?;
    let data = gather_indices(&perms)
        .into_iter()
        .flat_map(|r| queries.row(r).to_vec())
        .collect();
    Tensor::new([frames * n, c], data)
}
