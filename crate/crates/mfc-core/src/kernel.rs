//! Movement stencils, sparse cost matrices, and transition kernels.
//!
//! Each species has a one-step movement stencil: all integer offsets
//! `(ddx, ddy)` with `ddx^2 + ddy^2 <= radius_sq`. A move from cell `i` to
//! cell `k` is allowed when every cell touched by the straight segment
//! between the two cell centers (the supercover of the segment, including
//! cells touched only at a corner) has terrain the species may occupy —
//! a species cannot jump over blocked cells. The per-move cost is
//! `alpha * ||x_i - x_k||^2` in domain coordinates; moves outside the
//! stencil or blocked by terrain carry infinite cost and are simply absent
//! from the sparse matrices. Kernel entries are `exp(-cost / epsilon)`, so
//! absent entries are structural zeros and all stored values are positive.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::scenario::{Problem, SpeciesSpec, TerrainGrid};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("coordinate list line {line}: {msg}")]
    InvalidEntry { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// All integer offsets within the squared radius, `(0, 0)` included,
/// sorted by `(ddy, ddx)`.
pub fn build_stencil(radius_sq: u32) -> Vec<(i32, i32)> {
    let r = (radius_sq as f64).sqrt().floor() as i32;
    let mut offsets = Vec::new();
    for ddy in -r..=r {
        for ddx in -r..=r {
            if (ddx * ddx + ddy * ddy) as u32 <= radius_sq {
                offsets.push((ddx, ddy));
            }
        }
    }
    offsets
}

/// Compare fractions `a_num/a_den` and `b_num/b_den` with positive
/// denominators.
fn frac_le(a_num: i64, a_den: i64, b_num: i64, b_den: i64) -> bool {
    a_num * b_den <= b_num * a_den
}

/// True if the segment between the two points (doubled coordinates) touches
/// the closed unit square of the cell at `(cx, cy)` (cell coordinates).
fn segment_touches_cell(ax: i64, ay: i64, bx: i64, by: i64, cx: i64, cy: i64) -> bool {
    // Box in doubled coordinates: boundaries at odd integers.
    let axes = [
        (ax, bx - ax, 2 * cx - 1, 2 * cx + 1),
        (ay, by - ay, 2 * cy - 1, 2 * cy + 1),
    ];
    // Running intersection [t_lo, t_hi] of the slab parameter intervals,
    // kept as exact fractions with positive denominators.
    let (mut lo_n, mut lo_d) = (0i64, 1i64);
    let (mut hi_n, mut hi_d) = (1i64, 1i64);
    for (a, d, lo, hi) in axes {
        if d == 0 {
            if a < lo || a > hi {
                return false;
            }
        } else {
            let (n0, n1, den) = if d > 0 {
                (lo - a, hi - a, d)
            } else {
                (a - hi, a - lo, -d)
            };
            if !frac_le(n0, den, lo_n, lo_d) {
                (lo_n, lo_d) = (n0, den);
            }
            if !frac_le(hi_n, hi_d, n1, den) {
                (hi_n, hi_d) = (n1, den);
            }
        }
    }
    frac_le(lo_n, lo_d, hi_n, hi_d)
}

/// Supercover of the segment between two cell centers: every cell whose
/// closed square the segment touches, corner contacts included. Symmetric in
/// its endpoints.
pub fn supercover(a: (i32, i32), b: (i32, i32)) -> Vec<(i32, i32)> {
    let (ax, ay) = (2 * a.0 as i64, 2 * a.1 as i64);
    let (bx, by) = (2 * b.0 as i64, 2 * b.1 as i64);
    let mut cells = Vec::new();
    for cy in a.1.min(b.1)..=a.1.max(b.1) {
        for cx in a.0.min(b.0)..=a.0.max(b.0) {
            if segment_touches_cell(ax, ay, bx, by, cx as i64, cy as i64) {
                cells.push((cx, cy));
            }
        }
    }
    cells
}

/// True if species may move from cell `i` to cell `k` in one step: every
/// cell on the supercover segment between the centers, endpoints included,
/// has allowed terrain.
pub fn reachable(grid: &TerrainGrid, species: &SpeciesSpec, i: usize, k: usize) -> bool {
    let (ri, ci) = grid.row_col(i);
    let (rk, ck) = grid.row_col(k);
    for (cx, cy) in supercover(
        (ci as i32, ri as i32),
        (ck as i32, rk as i32),
    ) {
        let cell = grid.index(cy as usize, cx as usize);
        if !species.allows(grid.terrain(cell)) {
            return false;
        }
    }
    true
}

/// Square sparse matrix in compressed row form. Column indices within each
/// row are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl SparseMatrix {
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[span.clone()], &self.vals[span])
    }

    /// Value at `(i, k)`, or `None` for a structural zero.
    pub fn get(&self, i: usize, k: usize) -> Option<f64> {
        let (cols, vals) = self.row(i);
        cols.binary_search(&(k as u32)).ok().map(|p| vals[p])
    }

    pub fn transpose(&self) -> SparseMatrix {
        let n = self.n;
        let mut counts = vec![0usize; n + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut cols = vec![0u32; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        let mut next = counts;
        for i in 0..n {
            let (rc, rv) = self.row(i);
            for (&c, &v) in rc.iter().zip(rv) {
                let pos = next[c as usize];
                cols[pos] = i as u32;
                vals[pos] = v;
                next[c as usize] += 1;
            }
        }
        SparseMatrix {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Store the nonzero entries of a row-major dense matrix.
    pub fn from_dense(n: usize, dense: &[f64]) -> SparseMatrix {
        assert_eq!(dense.len(), n * n);
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            for k in 0..n {
                let v = dense[i * n + k];
                if v != 0.0 {
                    cols.push(k as u32);
                    vals.push(v);
                }
            }
            row_ptr[i + 1] = cols.len();
        }
        SparseMatrix {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Expand to a row-major dense matrix with zeros for absent entries.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&k, &v) in cols.iter().zip(vals) {
                dense[i * self.n + k as usize] = v;
            }
        }
        dense
    }

    pub fn map_vals(&self, f: impl Fn(f64) -> f64) -> SparseMatrix {
        SparseMatrix {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            cols: self.cols.clone(),
            vals: self.vals.iter().map(|&v| f(v)).collect(),
        }
    }

    fn from_entries(
        n: usize,
        mut entries: Vec<(u32, u32, f64)>,
    ) -> Result<SparseMatrix, KernelError> {
        entries.sort_by_key(|&(i, k, _)| (i, k));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(KernelError::InvalidEntry {
                    line: 0,
                    msg: format!("duplicate entry ({}, {})", w[0].0, w[0].1),
                });
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _, _) in &entries {
            row_ptr[i as usize + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(SparseMatrix {
            n,
            row_ptr,
            cols: entries.iter().map(|e| e.1).collect(),
            vals: entries.iter().map(|e| e.2).collect(),
        })
    }
}

/// Per-species one-step movement costs; absent entries are infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCostMatrix {
    pub species: usize,
    pub mat: SparseMatrix,
}

/// Per-species transition kernel `exp(-cost / epsilon)` with the same
/// sparsity pattern as the cost matrix; kept in both row orientations and in
/// both linear and log form.
#[derive(Debug, Clone)]
pub struct SparseKernel {
    pub species: usize,
    /// Kernel by source row: `fwd.row(i)` holds the targets of `i`.
    pub fwd: SparseMatrix,
    /// Transposed kernel: `bwd.row(k)` holds the sources of `k`.
    pub bwd: SparseMatrix,
    /// `-cost / epsilon` on the `fwd` pattern.
    pub fwd_log: SparseMatrix,
    /// `-cost / epsilon` on the `bwd` pattern.
    pub bwd_log: SparseMatrix,
}

impl SparseKernel {
    /// Wrap an explicit nonnegative matrix as a kernel. Stored values must
    /// be strictly positive (zeros are structural and simply not stored).
    pub fn from_matrix(species: usize, mat: SparseMatrix) -> SparseKernel {
        debug_assert!(mat.vals.iter().all(|&v| v > 0.0));
        let fwd_log = mat.map_vals(f64::ln);
        SparseKernel {
            species,
            bwd: mat.transpose(),
            bwd_log: fwd_log.transpose(),
            fwd: mat,
            fwd_log,
        }
    }
}

/// Build the sparse movement cost matrix of one species.
pub fn build_cost_matrix(
    grid: &TerrainGrid,
    species: &SpeciesSpec,
    species_index: usize,
) -> SparseCostMatrix {
    let n = grid.n();
    let (dx, dy) = (grid.dx(), grid.dy());
    let stencil = build_stencil(species.radius_sq);
    // Supercover offsets per stencil move, computed once.
    let covers: Vec<Vec<(i32, i32)>> = stencil
        .iter()
        .map(|&(ox, oy)| supercover((0, 0), (ox, oy)))
        .collect();
    let allowed: Vec<bool> = (0..n).map(|i| species.allows(grid.terrain(i))).collect();

    let mut row_ptr = vec![0usize; n + 1];
    let mut cols: Vec<u32> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    for i in 0..n {
        let (row, col) = grid.row_col(i);
        'offset: for (s, &(ox, oy)) in stencil.iter().enumerate() {
            let tc = col as i64 + ox as i64;
            let tr = row as i64 + oy as i64;
            if tc < 0 || tr < 0 || tc >= grid.width as i64 || tr >= grid.height as i64 {
                continue;
            }
            for &(sx, sy) in &covers[s] {
                let cc = col as i64 + sx as i64;
                let cr = row as i64 + sy as i64;
                if cc < 0 || cr < 0 || cc >= grid.width as i64 || cr >= grid.height as i64 {
                    continue 'offset;
                }
                if !allowed[grid.index(cr as usize, cc as usize)] {
                    continue 'offset;
                }
            }
            let k = grid.index(tr as usize, tc as usize);
            let step_x = ox as f64 * dx;
            let step_y = oy as f64 * dy;
            cols.push(k as u32);
            vals.push(species.alpha * (step_x * step_x + step_y * step_y));
        }
        row_ptr[i + 1] = cols.len();
    }
    SparseCostMatrix {
        species: species_index,
        mat: SparseMatrix {
            n,
            row_ptr,
            cols,
            vals,
        },
    }
}

/// Turn a cost matrix into the transition kernel for the given
/// regularization.
pub fn build_kernel(cost: &SparseCostMatrix, epsilon: f64) -> SparseKernel {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let fwd_log = cost.mat.map_vals(|c| -c / epsilon);
    let fwd = fwd_log.map_vals(f64::exp);
    SparseKernel {
        species: cost.species,
        bwd: fwd.transpose(),
        bwd_log: fwd_log.transpose(),
        fwd,
        fwd_log,
    }
}

/// The kernels of every species, either one static kernel per species or a
/// per-time-step sequence (time-varying dynamics).
#[derive(Debug, Clone)]
pub struct KernelSet {
    pub n: usize,
    seqs: Vec<KernelSeq>,
}

#[derive(Debug, Clone)]
enum KernelSeq {
    Static(SparseKernel),
    PerStep(Vec<SparseKernel>),
}

impl KernelSet {
    pub fn from_static(kernels: Vec<SparseKernel>) -> KernelSet {
        assert!(!kernels.is_empty());
        let n = kernels[0].fwd.n;
        KernelSet {
            n,
            seqs: kernels.into_iter().map(KernelSeq::Static).collect(),
        }
    }

    /// One kernel per time step per species; all sequences must cover the
    /// full horizon.
    pub fn from_time_varying(per_species: Vec<Vec<SparseKernel>>) -> KernelSet {
        assert!(!per_species.is_empty() && !per_species[0].is_empty());
        let n = per_species[0][0].fwd.n;
        KernelSet {
            n,
            seqs: per_species.into_iter().map(KernelSeq::PerStep).collect(),
        }
    }

    pub fn num_species(&self) -> usize {
        self.seqs.len()
    }

    /// Kernel of `species` applied between time `step` and `step + 1`.
    pub fn at(&self, species: usize, step: usize) -> &SparseKernel {
        match &self.seqs[species] {
            KernelSeq::Static(k) => k,
            KernelSeq::PerStep(ks) => &ks[step],
        }
    }
}

/// Build the static kernels of every species of a problem.
pub fn build_kernels(problem: &Problem) -> KernelSet {
    let kernels = problem
        .species
        .iter()
        .enumerate()
        .map(|(l, sp)| {
            let cost = build_cost_matrix(&problem.grid, sp, l);
            build_kernel(&cost, problem.epsilon)
        })
        .collect();
    KernelSet::from_static(kernels)
}

/// Write a sparse matrix as a coordinate list: one `i,k,value` line per
/// stored entry.
pub fn write_coo_csv<W: Write>(mat: &SparseMatrix, mut w: W) -> io::Result<()> {
    writeln!(w, "# source,target,value")?;
    for i in 0..mat.n {
        let (cols, vals) = mat.row(i);
        for (&k, &v) in cols.iter().zip(vals) {
            writeln!(w, "{i},{k},{v}")?;
        }
    }
    Ok(())
}

/// Read a coordinate list written by [`write_coo_csv`] (or by hand) into a
/// sparse matrix. Entries must be in range, finite, nonnegative, and unique.
pub fn read_coo_csv<R: BufRead>(n: usize, r: R) -> Result<SparseMatrix, KernelError> {
    let mut entries: Vec<(u32, u32, f64)> = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| KernelError::InvalidEntry {
            line: lineno,
            msg: msg.to_string(),
        };
        let mut parts = line.split(',').map(str::trim);
        let i: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad source index"))?;
        let k: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad target index"))?;
        let v: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad value"))?;
        if i >= n || k >= n {
            return Err(bad(&format!("index out of range for n = {n}")));
        }
        if !(v >= 0.0 && v.is_finite()) {
            return Err(bad("value must be nonnegative and finite"));
        }
        entries.push((i as u32, k as u32, v));
    }
    SparseMatrix::from_entries(n, entries)
}
