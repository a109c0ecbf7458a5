//! Message recursions and marginal projections of the scaled mass tensor.
//!
//! The mass tensor factors into per-step kernel factors and per-index
//! scaling factors, so its species/total marginals at any time index can be
//! computed by propagating `L x N` messages forward and backward through the
//! time chain instead of summing the tensor:
//!
//! - the forward message at index `j` accumulates everything at indices
//!   `< j` (kernel steps and scalings),
//! - the backward message at index `j` accumulates everything at indices
//!   `> j`,
//! - the species marginal at `j` is the entrywise product of the two
//!   messages with the scalings at `j` itself, and the total marginal is its
//!   column sum over species.
//!
//! All arrays can be kept either in the scaled domain (values) or in the log
//! domain (log-values, with `-inf` for structural zeros); the log domain
//! trades speed for robustness when `epsilon` is small. One kernel
//! application moves one `L x N` message across one time step; a full
//! forward plus backward sweep costs exactly `2 T` applications, counted by
//! the propagator.

use std::cell::Cell;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::kernel::{KernelSet, SparseKernel, SparseMatrix};

/// Arithmetic domain of scalings and messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Plain values; products and sums.
    Scaled,
    /// Logarithms; sums and log-sum-exp. Structural zeros are `-inf`.
    Log,
}

impl Domain {
    /// Multiplicative identity in this domain.
    pub fn one(self) -> f64 {
        match self {
            Domain::Scaled => 1.0,
            Domain::Log => 0.0,
        }
    }
}

/// The scaling vectors of the mass tensor: one `L x N` matrix per time index
/// `0..=T` (species scalings) and one length-`N` vector per time index
/// `1..=T` (total-marginal scalings; index 0 carries none because the
/// initial total marginal is not constrained).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingState {
    pub domain: Domain,
    num_species: usize,
    n: usize,
    horizon: usize,
    /// `[j - 1]` holds the total scaling for time `j`, `j` in `1..=T`.
    total: Vec<Array1<f64>>,
    /// `[j]` holds the species scaling matrix for time `j`, `j` in `0..=T`.
    species: Vec<Array2<f64>>,
}

impl ScalingState {
    /// All-ones state (the standard initializer).
    pub fn ones(num_species: usize, n: usize, horizon: usize, domain: Domain) -> ScalingState {
        let one = domain.one();
        ScalingState {
            domain,
            num_species,
            n,
            horizon,
            total: (0..horizon).map(|_| Array1::from_elem(n, one)).collect(),
            species: (0..=horizon)
                .map(|_| Array2::from_elem((num_species, n), one))
                .collect(),
        }
    }

    pub fn num_species(&self) -> usize {
        self.num_species
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Total-marginal scaling at time `j` (`1 <= j <= T`).
    pub fn total(&self, j: usize) -> &Array1<f64> {
        assert!(j >= 1 && j <= self.horizon, "no total scaling at time {j}");
        &self.total[j - 1]
    }

    pub fn total_mut(&mut self, j: usize) -> &mut Array1<f64> {
        assert!(j >= 1 && j <= self.horizon, "no total scaling at time {j}");
        &mut self.total[j - 1]
    }

    /// Species scaling matrix at time `j` (`0 <= j <= T`).
    pub fn species(&self, j: usize) -> &Array2<f64> {
        &self.species[j]
    }

    pub fn species_mut(&mut self, j: usize) -> &mut Array2<f64> {
        &mut self.species[j]
    }

    /// Convert between domains. Zeros map to `-inf` and back.
    pub fn to_domain(&self, domain: Domain) -> ScalingState {
        if domain == self.domain {
            return self.clone();
        }
        let conv: fn(f64) -> f64 = match domain {
            Domain::Log => f64::ln,
            Domain::Scaled => f64::exp,
        };
        ScalingState {
            domain,
            num_species: self.num_species,
            n: self.n,
            horizon: self.horizon,
            total: self.total.iter().map(|v| v.mapv(conv)).collect(),
            species: self.species.iter().map(|m| m.mapv(conv)).collect(),
        }
    }
}

/// Cached messages consistent with some scaling state.
///
/// `forward[j - 1]` (for `j` in `1..=T`) depends only on scalings at indices
/// `< j`; `backward[j]` (for `j` in `0..=T-1`) only on indices `> j`.
#[derive(Debug, Clone)]
pub struct MessageCache {
    pub forward: Vec<Array2<f64>>,
    pub backward: Vec<Array2<f64>>,
}

impl MessageCache {
    pub fn forward_at(&self, j: usize) -> &Array2<f64> {
        &self.forward[j - 1]
    }

    pub fn backward_at(&self, j: usize) -> &Array2<f64> {
        &self.backward[j]
    }
}

/// Applies kernels and runs the message recursions in a fixed domain,
/// counting kernel applications.
pub struct Propagator<'k> {
    kernels: &'k KernelSet,
    domain: Domain,
    parallel: bool,
    applications: Cell<u64>,
}

/// Row chunk size for parallel kernel application. Each output element is a
/// self-contained gather, so chunking only affects scheduling, never values.
const PAR_CHUNK: usize = 512;

fn gather_scaled(mat: &SparseMatrix, a_row: &[f64], out_row: &mut [f64], parallel: bool) {
    let one = |k: usize| -> f64 {
        let (cols, vals) = mat.row(k);
        let mut acc = 0.0;
        for (&c, &v) in cols.iter().zip(vals) {
            acc += v * a_row[c as usize];
        }
        acc
    };
    if parallel {
        out_row
            .par_chunks_mut(PAR_CHUNK)
            .enumerate()
            .for_each(|(ci, chunk)| {
                for (o, slot) in chunk.iter_mut().enumerate() {
                    *slot = one(ci * PAR_CHUNK + o);
                }
            });
    } else {
        for (k, slot) in out_row.iter_mut().enumerate() {
            *slot = one(k);
        }
    }
}

fn gather_log(mat: &SparseMatrix, a_row: &[f64], out_row: &mut [f64], parallel: bool) {
    let one = |k: usize| -> f64 {
        let (cols, logs) = mat.row(k);
        let mut m = f64::NEG_INFINITY;
        for (&c, &lv) in cols.iter().zip(logs) {
            let x = lv + a_row[c as usize];
            if x > m {
                m = x;
            }
        }
        if m == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let mut acc = 0.0;
        for (&c, &lv) in cols.iter().zip(logs) {
            acc += (lv + a_row[c as usize] - m).exp();
        }
        m + acc.ln()
    };
    if parallel {
        out_row
            .par_chunks_mut(PAR_CHUNK)
            .enumerate()
            .for_each(|(ci, chunk)| {
                for (o, slot) in chunk.iter_mut().enumerate() {
                    *slot = one(ci * PAR_CHUNK + o);
                }
            });
    } else {
        for (k, slot) in out_row.iter_mut().enumerate() {
            *slot = one(k);
        }
    }
}

impl<'k> Propagator<'k> {
    pub fn new(kernels: &'k KernelSet, domain: Domain, parallel: bool) -> Propagator<'k> {
        Propagator {
            kernels,
            domain,
            parallel,
            applications: Cell::new(0),
        }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Number of kernel applications performed so far (one per time step per
    /// mapped message, counting all species together).
    pub fn applications(&self) -> u64 {
        self.applications.get()
    }

    fn count(&self) {
        self.applications.set(self.applications.get() + 1);
    }

    fn kernel(&self, species: usize, step: usize) -> &SparseKernel {
        self.kernels.at(species, step)
    }

    /// Map a message from time `step` to `step + 1`:
    /// `out[l, k] = sum_i K_l[i, k] * a[l, i]` (sums over move sources).
    pub fn apply_forward(&self, step: usize, a: &Array2<f64>) -> Array2<f64> {
        self.count();
        let (num_species, n) = a.dim();
        let mut out = Array2::zeros((num_species, n));
        for l in 0..num_species {
            let kernel = self.kernel(l, step);
            let a_row = a.row(l);
            let a_row = a_row.as_slice().unwrap();
            let mut out_row = out.row_mut(l);
            let out_row = out_row.as_slice_mut().unwrap();
            match self.domain {
                Domain::Scaled => gather_scaled(&kernel.bwd, a_row, out_row, self.parallel),
                Domain::Log => gather_log(&kernel.bwd_log, a_row, out_row, self.parallel),
            }
        }
        out
    }

    /// Map a message from time `step + 1` back to `step`:
    /// `out[l, i] = sum_k K_l[i, k] * a[l, k]` (sums over move targets).
    pub fn apply_backward(&self, step: usize, a: &Array2<f64>) -> Array2<f64> {
        self.count();
        let (num_species, n) = a.dim();
        let mut out = Array2::zeros((num_species, n));
        for l in 0..num_species {
            let kernel = self.kernel(l, step);
            let a_row = a.row(l);
            let a_row = a_row.as_slice().unwrap();
            let mut out_row = out.row_mut(l);
            let out_row = out_row.as_slice_mut().unwrap();
            match self.domain {
                Domain::Scaled => gather_scaled(&kernel.fwd, a_row, out_row, self.parallel),
                Domain::Log => gather_log(&kernel.fwd_log, a_row, out_row, self.parallel),
            }
        }
        out
    }

    /// Entrywise combination (product, or sum in the log domain).
    pub fn combine(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        match self.domain {
            Domain::Scaled => a * b,
            Domain::Log => a + b,
        }
    }

    /// Scale the columns of `a` by the total scaling vector `u`.
    pub fn scale_cols(&self, a: &Array2<f64>, u: &Array1<f64>) -> Array2<f64> {
        let mut out = a.clone();
        match self.domain {
            Domain::Scaled => {
                for mut row in out.rows_mut() {
                    row *= u;
                }
            }
            Domain::Log => {
                for mut row in out.rows_mut() {
                    row += u;
                }
            }
        }
        out
    }

    /// The full scaling factor attached to time index `j`: the species
    /// scalings, with the total scaling on the columns when `j >= 1`.
    pub fn index_factor(&self, state: &ScalingState, j: usize) -> Array2<f64> {
        if j == 0 {
            state.species(0).clone()
        } else {
            self.scale_cols(state.species(j), state.total(j))
        }
    }

    /// Advance the forward message to index `j` from the message at `j - 1`
    /// (`None` for the base case `j == 1`).
    pub fn advance_forward(
        &self,
        state: &ScalingState,
        j: usize,
        prev: Option<&Array2<f64>>,
    ) -> Array2<f64> {
        debug_assert_eq!(state.domain, self.domain);
        if j == 1 {
            self.apply_forward(0, state.species(0))
        } else {
            let prev = prev.expect("forward message at j - 1 required");
            let carried = self.combine(prev, &self.index_factor(state, j - 1));
            self.apply_forward(j - 1, &carried)
        }
    }

    /// All forward messages for `j` in `1..=T`.
    pub fn forward_pass(&self, state: &ScalingState) -> Vec<Array2<f64>> {
        let horizon = state.horizon();
        let mut msgs: Vec<Array2<f64>> = Vec::with_capacity(horizon);
        for j in 1..=horizon {
            let msg = self.advance_forward(state, j, msgs.last());
            msgs.push(msg);
        }
        msgs
    }

    /// All backward messages for `j` in `0..=T-1`, returned with index `j`
    /// at position `j`.
    pub fn backward_pass(&self, state: &ScalingState) -> Vec<Array2<f64>> {
        debug_assert_eq!(state.domain, self.domain);
        let horizon = state.horizon();
        let mut msgs: Vec<Array2<f64>> = Vec::with_capacity(horizon);
        // j = T - 1 first, walking down to 0.
        let mut current = self.apply_backward(horizon - 1, &self.index_factor(state, horizon));
        msgs.push(current.clone());
        for j in (0..horizon.saturating_sub(1)).rev() {
            let carried = self.combine(&current, &self.index_factor(state, j + 1));
            current = self.apply_backward(j, &carried);
            msgs.push(current.clone());
        }
        msgs.reverse();
        msgs
    }

    /// Build a full message cache for the state.
    pub fn messages(&self, state: &ScalingState) -> MessageCache {
        MessageCache {
            forward: self.forward_pass(state),
            backward: self.backward_pass(state),
        }
    }

    /// Species-by-cell marginal at time `j` from cached messages: the
    /// product of everything before `j`, everything after `j`, and the
    /// scalings at `j`.
    pub fn project_species(
        &self,
        j: usize,
        state: &ScalingState,
        cache: &MessageCache,
    ) -> Array2<f64> {
        let horizon = state.horizon();
        let own = self.index_factor(state, j);
        if j == 0 {
            self.combine(cache.backward_at(0), &own)
        } else if j == horizon {
            self.combine(cache.forward_at(horizon), &own)
        } else {
            self.combine(
                &self.combine(cache.backward_at(j), cache.forward_at(j)),
                &own,
            )
        }
    }

    /// Total marginal: column sums of a species marginal (log-sum-exp over
    /// species in the log domain).
    pub fn project_total(&self, species_marginal: &Array2<f64>) -> Array1<f64> {
        match self.domain {
            Domain::Scaled => species_marginal.sum_axis(ndarray::Axis(0)),
            Domain::Log => {
                let (num_species, n) = species_marginal.dim();
                Array1::from_shape_fn(n, |i| {
                    let mut m = f64::NEG_INFINITY;
                    for l in 0..num_species {
                        m = m.max(species_marginal[(l, i)]);
                    }
                    if m == f64::NEG_INFINITY {
                        return f64::NEG_INFINITY;
                    }
                    let mut acc = 0.0;
                    for l in 0..num_species {
                        acc += (species_marginal[(l, i)] - m).exp();
                    }
                    m + acc.ln()
                })
            }
        }
    }
}
