//! Block-sparse symmetric systems over uniform 6×6 blocks.
//!
//! A robot node contributes two six-blocks (pose, strain) and a rigid body one. The lower
//! triangle is stored column by column on the pattern of the Cholesky factor, so assembly
//! writes straight into the storage that the in-place factorization consumes.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix6};

use super::SolveError;
use crate::factors::FactorEvaluation;
use crate::model::{BlockId, StateLayout};

/// Relative pivot threshold below which the system is declared singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Which half of a state block a six-block holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Pose,
    Strain,
}

/// Pattern of the factor `L` and the bookkeeping reused across Gauss-Newton iterations.
#[derive(Clone, Debug)]
pub struct SymbolicFactor {
    layout: StateLayout,
    six: Vec<(BlockId, Part)>,
    /// Strictly-lower rows of each column of `L`, ascending.
    col_rows: Vec<Vec<usize>>,
    /// For each row `i`, the columns `k < i` with `L[i, k] ≠ 0` and the position of `i` in `col_rows[k]`.
    row_cols: Vec<Vec<(usize, usize)>>,
    /// Strictly-lower pattern of the system matrix itself.
    a_pattern: Vec<BTreeSet<usize>>,
}

impl SymbolicFactor {
    /// `edges` are unordered pairs of six-block indices with a nonzero system block.
    pub fn new(layout: StateLayout, edges: &[(usize, usize)]) -> Self {
        let mut six = Vec::new();
        for b in layout.blocks() {
            six.push((*b, Part::Pose));
            if matches!(b, BlockId::Node { .. }) {
                six.push((*b, Part::Strain));
            }
        }
        let n = six.len();
        let mut a_pattern = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a != b {
                let (hi, lo) = if a > b { (a, b) } else { (b, a) };
                a_pattern[lo].insert(hi);
            }
        }
        let col_rows = symbolic_columns(&a_pattern);
        let mut row_cols = vec![Vec::new(); n];
        for (k, rows) in col_rows.iter().enumerate() {
            for (pos, &i) in rows.iter().enumerate() {
                row_cols[i].push((k, pos));
            }
        }
        Self {
            layout,
            six,
            col_rows,
            row_cols,
            a_pattern,
        }
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.six.len()
    }

    pub fn is_empty(&self) -> bool {
        self.six.is_empty()
    }

    pub fn six_block(&self, i: usize) -> (BlockId, Part) {
        self.six[i]
    }

    /// First six-block of a state block.
    pub fn six_index(&self, block: &BlockId) -> usize {
        self.layout.offset(self.layout.index_of(block)) / 6
    }

    pub fn column_rows(&self, j: usize) -> &[usize] {
        &self.col_rows[j]
    }

    pub fn system_rows(&self, j: usize) -> &BTreeSet<usize> {
        &self.a_pattern[j]
    }

    /// Off-diagonal blocks of `L` that are absent from the system matrix, as `(row, column)`.
    pub fn fill_blocks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (j, rows) in self.col_rows.iter().enumerate() {
            for &i in rows {
                if !self.a_pattern[j].contains(&i) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn fill_count(&self) -> usize {
        self.fill_blocks().len()
    }

    pub fn factor_nnz_blocks(&self) -> usize {
        self.len() + self.col_rows.iter().map(Vec::len).sum::<usize>()
    }
}

/// Column patterns of `L` by merging children along the elimination tree.
fn symbolic_columns(a_pattern: &[BTreeSet<usize>]) -> Vec<Vec<usize>> {
    let n = a_pattern.len();
    let mut cols: Vec<BTreeSet<usize>> = a_pattern.to_vec();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let rows = std::mem::take(&mut cols[j]);
        if let Some(&parent) = rows.iter().next() {
            let merged: Vec<usize> = rows.iter().copied().filter(|&r| r != parent).collect();
            cols[parent].extend(merged);
        }
        out.push(rows.into_iter().collect());
    }
    out
}

/// Symmetric system `A x = b` stored on the pattern of its factor.
#[derive(Clone, Debug)]
pub struct BlockSparseSystem {
    symbolic: Arc<SymbolicFactor>,
    diag: Vec<Matrix6<f64>>,
    lower: Vec<Vec<Matrix6<f64>>>,
    pub rhs: DVector<f64>,
    masked: Vec<bool>,
}

impl BlockSparseSystem {
    pub fn zeros(symbolic: Arc<SymbolicFactor>) -> Self {
        let n = symbolic.len();
        let lower = symbolic.col_rows.iter().map(|r| vec![Matrix6::zeros(); r.len()]).collect();
        Self {
            diag: vec![Matrix6::zeros(); n],
            lower,
            rhs: DVector::zeros(6 * n),
            masked: vec![false; 6 * n],
            symbolic,
        }
    }

    pub fn symbolic(&self) -> &Arc<SymbolicFactor> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        6 * self.symbolic.len()
    }

    fn position(&self, row: usize, col: usize) -> usize {
        self.symbolic.col_rows[col]
            .binary_search(&row)
            .expect("block outside the symbolic pattern")
    }

    /// Adds `m` at block `(row, col)`; the upper triangle is implied.
    pub fn add_block(&mut self, row: usize, col: usize, m: &Matrix6<f64>) {
        match row.cmp(&col) {
            std::cmp::Ordering::Equal => self.diag[row] += m,
            std::cmp::Ordering::Greater => {
                let p = self.position(row, col);
                self.lower[col][p] += m;
            }
            std::cmp::Ordering::Less => {
                let p = self.position(col, row);
                self.lower[row][p] += m.transpose();
            }
        }
    }

    pub fn block(&self, row: usize, col: usize) -> Matrix6<f64> {
        match row.cmp(&col) {
            std::cmp::Ordering::Equal => self.diag[row],
            std::cmp::Ordering::Greater => self.symbolic.col_rows[col]
                .binary_search(&row)
                .map(|p| self.lower[col][p])
                .unwrap_or_else(|_| Matrix6::zeros()),
            std::cmp::Ordering::Less => self.block(col, row).transpose(),
        }
    }

    /// Accumulates `Jᵀ W J` and `−Jᵀ W e` for one linearized factor.
    pub fn add_factor(&mut self, f: &FactorEvaluation) {
        if f.error.is_empty() {
            return;
        }
        let w = &f.information;
        let we = w * &f.error;
        // Split each Jacobian into six-column pieces, dropping all-zero pieces.
        let mut pieces: Vec<(usize, DMatrix<f64>)> = Vec::new();
        for (block, jac) in &f.jacobians {
            let first = self.symbolic.six_index(block);
            for p in 0..jac.ncols() / 6 {
                let cols = jac.columns(6 * p, 6);
                if cols.iter().any(|v| *v != 0.0) {
                    pieces.push((first + p, cols.into_owned()));
                }
            }
        }
        for (a, ja) in &pieces {
            let g = -(ja.transpose() * &we);
            let mut r = self.rhs.rows_mut(6 * a, 6);
            r += g;
            let wja = w * ja;
            for (b, jb) in &pieces {
                if b > a {
                    continue;
                }
                let m = jb.transpose() * &wja;
                let m6 = Matrix6::from_iterator(m.iter().copied());
                // m = J_bᵀ W J_a sits at block (b, a); store it as (a, b) transposed.
                self.add_block(*a, *b, &m6.transpose());
            }
        }
    }

    /// Replaces masked scalar rows and columns by identity with zero right-hand side.
    pub fn apply_mask(&mut self, masked: &[bool]) {
        assert_eq!(masked.len(), self.dim());
        self.masked = masked.to_vec();
        let n = self.symbolic.len();
        for j in 0..n {
            for c in 0..6 {
                if masked[6 * j + c] {
                    for r in 0..6 {
                        self.diag[j][(r, c)] = 0.0;
                        self.diag[j][(c, r)] = 0.0;
                    }
                    self.diag[j][(c, c)] = 1.0;
                    self.rhs[6 * j + c] = 0.0;
                }
            }
            for (p, &i) in self.symbolic.col_rows[j].iter().enumerate() {
                for c in 0..6 {
                    if masked[6 * j + c] {
                        self.lower[j][p].column_mut(c).fill(0.0);
                    }
                    if masked[6 * i + c] {
                        self.lower[j][p].row_mut(c).fill(0.0);
                    }
                }
            }
        }
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.symbolic.len();
        let mut a = DMatrix::zeros(6 * n, 6 * n);
        for j in 0..n {
            a.view_mut((6 * j, 6 * j), (6, 6)).copy_from(&self.diag[j]);
            for (p, &i) in self.symbolic.col_rows[j].iter().enumerate() {
                a.view_mut((6 * i, 6 * j), (6, 6)).copy_from(&self.lower[j][p]);
                a.view_mut((6 * j, 6 * i), (6, 6)).copy_from(&self.lower[j][p].transpose());
            }
        }
        a
    }

    /// `A + λ diag(A)` on unmasked entries.
    pub fn damped(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for (j, d) in out.diag.iter_mut().enumerate() {
            for c in 0..6 {
                if !self.masked[6 * j + c] {
                    d[(c, c)] *= 1.0 + lambda;
                }
            }
        }
        out
    }

    /// In-place left-looking block Cholesky on the symbolic pattern.
    pub fn factor(&self) -> Result<CholeskyFactor, SolveError> {
        let sym = &self.symbolic;
        let n = sym.len();
        let mut diag = self.diag.clone();
        let mut lower = self.lower.clone();
        let mut slot = vec![usize::MAX; n];
        for j in 0..n {
            for (p, &i) in sym.col_rows[j].iter().enumerate() {
                slot[i] = p;
            }
            for &(k, pos) in &sym.row_cols[j] {
                let (head, tail) = lower.split_at_mut(j);
                let col_k = &head[k];
                let l_jk = col_k[pos];
                diag[j] -= l_jk * l_jk.transpose();
                for (idx, &i) in sym.col_rows[k].iter().enumerate().skip(pos + 1) {
                    let p = slot[i];
                    debug_assert!(p != usize::MAX, "symbolic pattern not closed");
                    tail[0][p] -= col_k[idx] * l_jk.transpose();
                }
            }
            let l_jj = dense_cholesky6(&diag[j], &self.diag[j]).ok_or_else(|| {
                let (block, part) = sym.six[j];
                SolveError::UnderConstrained {
                    block,
                    part,
                    detail: "non-positive pivot in the Cholesky factorization".into(),
                }
            })?;
            let inv_t = l_jj
                .try_inverse()
                .expect("triangular factor with positive pivots")
                .transpose();
            for m in lower[j].iter_mut() {
                *m *= inv_t;
            }
            diag[j] = l_jj;
            for &i in &sym.col_rows[j] {
                slot[i] = usize::MAX;
            }
        }
        Ok(CholeskyFactor {
            symbolic: self.symbolic.clone(),
            diag,
            lower,
            masked: self.masked.clone(),
        })
    }
}

/// Lower Cholesky factor of a 6×6 block. Pivots are compared against the block's diagonal
/// before any update so that singular directions are caught at round-off level.
fn dense_cholesky6(m: &Matrix6<f64>, original: &Matrix6<f64>) -> Option<Matrix6<f64>> {
    let mut l = Matrix6::zeros();
    for c in 0..6 {
        let mut d = m[(c, c)];
        for k in 0..c {
            d -= l[(c, k)] * l[(c, k)];
        }
        let scale = original[(c, c)].abs().max(f64::MIN_POSITIVE);
        if !(d > PIVOT_TOLERANCE * scale) {
            return None;
        }
        let d = d.sqrt();
        l[(c, c)] = d;
        for r in c + 1..6 {
            let mut v = m[(r, c)];
            for k in 0..c {
                v -= l[(r, k)] * l[(c, k)];
            }
            l[(r, c)] = v / d;
        }
    }
    Some(l)
}

/// Numeric factor `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicFactor>,
    diag: Vec<Matrix6<f64>>,
    lower: Vec<Vec<Matrix6<f64>>>,
    masked: Vec<bool>,
}

impl CholeskyFactor {
    pub fn symbolic(&self) -> &Arc<SymbolicFactor> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        6 * self.symbolic.len()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.symbolic.len();
        let mut x = b.clone();
        // L y = b
        for j in 0..n {
            let yj = self.diag[j]
                .solve_lower_triangular(&x.fixed_rows::<6>(6 * j).into_owned())
                .expect("positive pivots");
            x.fixed_rows_mut::<6>(6 * j).copy_from(&yj);
            for (p, &i) in self.symbolic.col_rows[j].iter().enumerate() {
                let upd = self.lower[j][p] * yj;
                let mut xi = x.fixed_rows_mut::<6>(6 * i);
                xi -= upd;
            }
        }
        // Lᵀ x = y
        for j in (0..n).rev() {
            let mut v = x.fixed_rows::<6>(6 * j).into_owned();
            for (p, &i) in self.symbolic.col_rows[j].iter().enumerate() {
                v -= self.lower[j][p].transpose() * x.fixed_rows::<6>(6 * i);
            }
            let xj = self.diag[j]
                .transpose()
                .solve_upper_triangular(&v)
                .expect("positive pivots");
            x.fixed_rows_mut::<6>(6 * j).copy_from(&xj);
        }
        x
    }

    /// Columns `cols` of `A⁻¹`, with masked rows and columns zeroed.
    pub fn inverse_columns(&self, cols: &[usize]) -> DMatrix<f64> {
        let dim = self.dim();
        let mut out = DMatrix::zeros(dim, cols.len());
        for (c, &col) in cols.iter().enumerate() {
            if self.masked[col] {
                continue;
            }
            let mut e = DVector::zeros(dim);
            e[col] = 1.0;
            let mut x = self.solve(&e);
            for (r, m) in self.masked.iter().enumerate() {
                if *m {
                    x[r] = 0.0;
                }
            }
            out.set_column(c, &x);
        }
        out
    }

    /// Full `A⁻¹` (masked entries zeroed). Intended for tests and small problems.
    pub fn dense_inverse(&self) -> DMatrix<f64> {
        let cols: Vec<usize> = (0..self.dim()).collect();
        let mut inv = self.inverse_columns(&cols);
        inv = 0.5 * (&inv + inv.transpose());
        inv
    }

    /// `L` as a dense matrix.
    pub fn to_dense_lower(&self) -> DMatrix<f64> {
        let n = self.symbolic.len();
        let mut l = DMatrix::zeros(6 * n, 6 * n);
        for j in 0..n {
            l.view_mut((6 * j, 6 * j), (6, 6)).copy_from(&self.diag[j]);
            for (p, &i) in self.symbolic.col_rows[j].iter().enumerate() {
                l.view_mut((6 * i, 6 * j), (6, 6)).copy_from(&self.lower[j][p]);
            }
        }
        l
    }
}
