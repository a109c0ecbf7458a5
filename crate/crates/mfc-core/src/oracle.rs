//! Dense brute-force reference implementation.
//!
//! Materializes the full mass tensor for desk-scale instances, computes
//! projections by explicit summation, and runs the same sweep loop as the
//! production solver with every `w` factor obtained by dense summation. The
//! update rules and loop bookkeeping are shared with the solver, so any
//! trajectory difference between [`dense_solve`] and the structured solve
//! isolates the message recursions.
//!
//! Entry layout: index order `(l, i_0, ..., i_T)` with `i_T` varying
//! fastest. A hard cap on the entry count rejects instances that would not
//! fit in memory; this module is test support, never part of the production
//! solve path.

use ndarray::{Array1, Array2};

use crate::kernel::KernelSet;
use crate::propagation::{Domain, ScalingState};
use crate::solver::{
    run_solve, ProblemView, ProjectionEngine, Resume, SolveError, SolveHooks, SolveOptions,
    Solution,
};

/// Maximum number of tensor entries the oracle will materialize.
pub const SIZE_CAP: u128 = 10_000_000;

#[derive(Debug)]
pub enum OracleError {
    TooLarge { entries: u128 },
    Solve(SolveError),
}

impl std::fmt::Display for OracleError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleError::TooLarge { entries } => write!(
                f,
                "dense tensor would hold {entries} entries, above the cap of {SIZE_CAP}"
            ),
            OracleError::Solve(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for OracleError {}

impl From<SolveError> for OracleError {
    fn from(e: SolveError) -> Self {
        OracleError::Solve(e)
    }
}

/// Number of tensor entries, checked against the cap.
fn entry_count(num_species: usize, n: usize, horizon: usize) -> Result<usize, OracleError> {
    let count = (n as u128)
        .checked_pow(horizon as u32 + 1)
        .and_then(|p| p.checked_mul(num_species as u128))
        .unwrap_or(u128::MAX);
    if count > SIZE_CAP {
        return Err(OracleError::TooLarge { entries: count });
    }
    Ok(count as usize)
}

/// Fully materialized mass tensor.
#[derive(Debug, Clone)]
pub struct DenseTensor {
    pub num_species: usize,
    pub n: usize,
    /// Number of time steps `T`; paths have `T + 1` cells.
    pub horizon: usize,
    /// `num_species * n^(horizon + 1)` values, `(l, i_0, ..., i_T)` with
    /// `i_T` fastest.
    pub values: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(num_species: usize, n: usize, horizon: usize) -> Result<DenseTensor, OracleError> {
        let count = entry_count(num_species, n, horizon)?;
        Ok(DenseTensor {
            num_species,
            n,
            horizon,
            values: vec![0.0; count],
        })
    }

    fn paths(&self) -> usize {
        self.values.len() / self.num_species
    }

    fn decode(&self, mut flat: usize, path: &mut [usize]) {
        for t in (0..=self.horizon).rev() {
            path[t] = flat % self.n;
            flat /= self.n;
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Total marginal at time `j` by explicit summation.
    pub fn project_total(&self, j: usize) -> Array1<f64> {
        let mut out = Array1::zeros(self.n);
        let mut path = vec![0usize; self.horizon + 1];
        for l in 0..self.num_species {
            for flat in 0..self.paths() {
                self.decode(flat, &mut path);
                out[path[j]] += self.values[l * self.paths() + flat];
            }
        }
        out
    }

    /// Species-by-cell marginal at time `j`.
    pub fn project_species(&self, j: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.num_species, self.n));
        let mut path = vec![0usize; self.horizon + 1];
        for l in 0..self.num_species {
            for flat in 0..self.paths() {
                self.decode(flat, &mut path);
                out[(l, path[j])] += self.values[l * self.paths() + flat];
            }
        }
        out
    }

    /// Adjacent-pair projection over `(l, i_j, i_{j+1})`, one `n x n` matrix
    /// per species.
    pub fn project_pair(&self, j: usize) -> Vec<Array2<f64>> {
        assert!(j < self.horizon);
        let mut out = vec![Array2::zeros((self.n, self.n)); self.num_species];
        let mut path = vec![0usize; self.horizon + 1];
        for l in 0..self.num_species {
            for flat in 0..self.paths() {
                self.decode(flat, &mut path);
                out[l][(path[j], path[j + 1])] += self.values[l * self.paths() + flat];
            }
        }
        out
    }
}

/// Dense per-species per-step kernel matrices (`n * n`, zeros for absent
/// entries).
fn dense_kernels(kernels: &KernelSet, num_species: usize, horizon: usize) -> Vec<Vec<Vec<f64>>> {
    (0..num_species)
        .map(|l| {
            (0..horizon)
                .map(|step| kernels.at(l, step).fwd.to_dense())
                .collect()
        })
        .collect()
}

/// Materialize the scaled mass tensor `K * U` entry by entry.
pub fn materialize(
    kernels: &KernelSet,
    state: &ScalingState,
) -> Result<DenseTensor, OracleError> {
    let state = state.to_domain(Domain::Scaled);
    let (num_species, n, horizon) = (state.num_species(), state.n(), state.horizon());
    let mut tensor = DenseTensor::zeros(num_species, n, horizon)?;
    let dense = dense_kernels(kernels, num_species, horizon);
    let paths = tensor.paths();
    let mut path = vec![0usize; horizon + 1];
    for l in 0..num_species {
        for flat in 0..paths {
            tensor.decode(flat, &mut path);
            let mut v = state.species(0)[(l, path[0])];
            for t in 0..horizon {
                v *= dense[l][t][path[t] * n + path[t + 1]];
            }
            for t in 1..=horizon {
                v *= state.species(t)[(l, path[t])] * state.total(t)[path[t]];
            }
            tensor.values[l * paths + flat] = v;
        }
    }
    Ok(tensor)
}

/// Dense path-cost tensor: per-entry sums of step costs recovered from the
/// kernels (`-epsilon * log K`), infinite where any step is structurally
/// forbidden.
pub fn dense_cost_tensor(
    kernels: &KernelSet,
    epsilon: f64,
    num_species: usize,
    n: usize,
    horizon: usize,
) -> Result<Vec<f64>, OracleError> {
    let count = entry_count(num_species, n, horizon)?;
    let dense_logs: Vec<Vec<Vec<f64>>> = (0..num_species)
        .map(|l| {
            (0..horizon)
                .map(|step| {
                    let mat = &kernels.at(l, step).fwd_log;
                    let mut d = vec![f64::NEG_INFINITY; n * n];
                    for i in 0..n {
                        let (cols, vals) = mat.row(i);
                        for (&k, &v) in cols.iter().zip(vals) {
                            d[i * n + k as usize] = v;
                        }
                    }
                    d
                })
                .collect()
        })
        .collect();
    let paths = count / num_species;
    let mut costs = vec![0.0; count];
    let mut path = vec![0usize; horizon + 1];
    for l in 0..num_species {
        for flat in 0..paths {
            let mut rem = flat;
            for t in (0..=horizon).rev() {
                path[t] = rem % n;
                rem /= n;
            }
            let mut c = 0.0;
            for t in 0..horizon {
                let log_k = dense_logs[l][t][path[t] * n + path[t + 1]];
                if log_k == f64::NEG_INFINITY {
                    c = f64::INFINITY;
                    break;
                }
                c += -epsilon * log_k;
            }
            costs[l * paths + flat] = c;
        }
    }
    Ok(costs)
}

/// `<C, M> + epsilon * sum(M log M - M + 1)` over all entries, with
/// `0 log 0 = 0`; entries with zero mass contribute `epsilon` each (the
/// `+1` convention term) and no transport cost.
pub fn dense_entropy_objective(tensor: &DenseTensor, costs: &[f64], epsilon: f64) -> f64 {
    assert_eq!(tensor.values.len(), costs.len());
    let mut acc = 0.0;
    for (&m, &c) in tensor.values.iter().zip(costs) {
        if m > 0.0 {
            acc += c * m + epsilon * (m * m.ln() - m + 1.0);
        } else {
            acc += epsilon;
        }
    }
    acc
}

/// Projection engine computing every factor by dense summation with the
/// excluded scaling replaced by ones (no divisions, so structural zeros are
/// exact).
struct DenseEngine {
    num_species: usize,
    n: usize,
    horizon: usize,
    kernels: Vec<Vec<Vec<f64>>>,
    paths: usize,
}

impl DenseEngine {
    fn new(view: &ProblemView, kernels: &KernelSet) -> Result<DenseEngine, OracleError> {
        let count = entry_count(view.num_species, view.n, view.horizon)?;
        Ok(DenseEngine {
            num_species: view.num_species,
            n: view.n,
            horizon: view.horizon,
            kernels: dense_kernels(kernels, view.num_species, view.horizon),
            paths: count / view.num_species,
        })
    }

    /// Sum over all paths of the full product with one scaling excluded.
    /// `skip_species` excludes the species scaling at that index,
    /// `skip_total` the total scaling.
    fn factor(
        &self,
        state: &ScalingState,
        at: usize,
        skip_species: bool,
        skip_total: bool,
    ) -> Array2<f64> {
        let mut out = Array2::zeros((self.num_species, self.n));
        let mut path = vec![0usize; self.horizon + 1];
        for l in 0..self.num_species {
            for flat in 0..self.paths {
                let mut rem = flat;
                for t in (0..=self.horizon).rev() {
                    path[t] = rem % self.n;
                    rem /= self.n;
                }
                let mut v = if at == 0 && skip_species {
                    1.0
                } else {
                    state.species(0)[(l, path[0])]
                };
                for t in 0..self.horizon {
                    v *= self.kernels[l][t][path[t] * self.n + path[t + 1]];
                    if v == 0.0 {
                        break;
                    }
                }
                if v != 0.0 {
                    for t in 1..=self.horizon {
                        if !(t == at && skip_species) {
                            v *= state.species(t)[(l, path[t])];
                        }
                        if !(t == at && skip_total) {
                            v *= state.total(t)[path[t]];
                        }
                    }
                }
                out[(l, path[at])] += v;
            }
        }
        out
    }
}

impl ProjectionEngine for DenseEngine {
    fn domain(&self) -> Domain {
        Domain::Scaled
    }

    fn begin_sweep(&mut self, _state: &ScalingState) {}

    fn species_factor(&mut self, j: usize, state: &ScalingState) -> Array2<f64> {
        self.factor(state, j, true, false)
    }

    fn total_factor(&mut self, j: usize, state: &ScalingState) -> Array1<f64> {
        self.factor(state, j, false, true)
            .sum_axis(ndarray::Axis(0))
    }
}

/// Run the solver's sweep loop with dense-summation projections. Scaled
/// domain only; single-threaded by construction.
pub fn dense_solve(
    view: &ProblemView,
    kernels: &KernelSet,
    options: &SolveOptions,
    resume: Option<Resume>,
    hooks: SolveHooks<'_>,
) -> Result<Solution, OracleError> {
    assert!(
        !options.log_domain,
        "the dense oracle runs in the scaled domain only"
    );
    let engine = DenseEngine::new(view, kernels)?;
    Ok(run_solve(view, engine, options, resume, hooks)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{SparseKernel, SparseMatrix};
    use crate::propagation::Propagator;
    use crate::scenario::MarginalCost;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn all_ones_kernels(num_species: usize, n: usize) -> KernelSet {
        let dense = vec![1.0; n * n];
        KernelSet::from_static(
            (0..num_species)
                .map(|l| SparseKernel::from_matrix(l, SparseMatrix::from_dense(n, &dense)))
                .collect(),
        )
    }

    fn random_kernels(rng: &mut ChaCha8Rng, num_species: usize, n: usize) -> KernelSet {
        KernelSet::from_static(
            (0..num_species)
                .map(|l| {
                    let dense: Vec<f64> = (0..n * n)
                        .map(|p| {
                            if p / n == p % n || rng.random::<f64>() < 0.6 {
                                rng.random_range(0.1..2.0)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    SparseKernel::from_matrix(l, SparseMatrix::from_dense(n, &dense))
                })
                .collect(),
        )
    }

    fn random_state(rng: &mut ChaCha8Rng, l: usize, n: usize, horizon: usize) -> ScalingState {
        let mut state = ScalingState::ones(l, n, horizon, Domain::Scaled);
        for j in 0..=horizon {
            state
                .species_mut(j)
                .mapv_inplace(|_| rng.random_range(0.2..3.0));
        }
        for j in 1..=horizon {
            state
                .total_mut(j)
                .mapv_inplace(|_| rng.random_range(0.2..3.0));
        }
        state
    }

    #[test]
    fn all_ones_tensor() {
        let kernels = all_ones_kernels(1, 2);
        let state = ScalingState::ones(1, 2, 1, Domain::Scaled);
        let tensor = materialize(&kernels, &state).unwrap();
        assert_eq!(tensor.values, vec![1.0; 4]);
    }

    #[test]
    fn structural_zero_kills_all_paths_through_it() {
        // Kernel with K[0][0,1] = 0: every path using that transition is 0.
        let dense = vec![1.0, 0.0, 1.0, 1.0];
        let kernels = KernelSet::from_static(vec![SparseKernel::from_matrix(
            0,
            SparseMatrix::from_dense(2, &dense),
        )]);
        let state = ScalingState::ones(1, 2, 2, Domain::Scaled);
        let tensor = materialize(&kernels, &state).unwrap();
        let mut path = vec![0usize; 3];
        for flat in 0..tensor.paths() {
            tensor.decode(flat, &mut path);
            let uses_forbidden = (0..2).any(|t| path[t] == 0 && path[t + 1] == 1);
            assert_eq!(tensor.values[flat] == 0.0, uses_forbidden, "{path:?}");
        }
    }

    /// Second, independently coded product loop (recursive rather than
    /// flat-index decoding).
    fn materialize_by_recursion(kernels: &KernelSet, state: &ScalingState) -> Vec<f64> {
        let (num_species, n, horizon) = (state.num_species(), state.n(), state.horizon());
        let mut out = Vec::new();
        fn recurse(
            l: usize,
            t: usize,
            horizon: usize,
            n: usize,
            prefix: &mut Vec<usize>,
            acc: f64,
            kernels: &KernelSet,
            state: &ScalingState,
            out: &mut Vec<f64>,
        ) {
            if t > horizon {
                out.push(acc);
                return;
            }
            for i in 0..n {
                let mut v = acc;
                if t == 0 {
                    v *= state.species(0)[(l, i)];
                } else {
                    let prev = prefix[t - 1];
                    v *= kernels
                        .at(l, t - 1)
                        .fwd
                        .get(prev, i)
                        .unwrap_or(0.0);
                    v *= state.species(t)[(l, i)] * state.total(t)[i];
                }
                prefix.push(i);
                recurse(l, t + 1, horizon, n, prefix, v, kernels, state, out);
                prefix.pop();
            }
        }
        for l in 0..num_species {
            let mut prefix = Vec::new();
            recurse(l, 0, horizon, n, &mut prefix, 1.0, kernels, state, &mut out);
        }
        out
    }

    #[test]
    fn independent_product_loop_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..5 {
            let kernels = random_kernels(&mut rng, 2, 3);
            let state = random_state(&mut rng, 2, 3, 2);
            let tensor = materialize(&kernels, &state).unwrap();
            let other = materialize_by_recursion(&kernels, &state);
            assert_eq!(tensor.values.len(), other.len());
            for (a, b) in tensor.values.iter().zip(&other) {
                assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn projections_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let kernels = random_kernels(&mut rng, 2, 4);
        let state = random_state(&mut rng, 2, 4, 3);
        let tensor = materialize(&kernels, &state).unwrap();
        let mass = tensor.total_mass();
        for j in 0..=3 {
            let species = tensor.project_species(j);
            let total = tensor.project_total(j);
            // Column sums of the species projection give the total one.
            for i in 0..4 {
                let col: f64 = (0..2).map(|l| species[(l, i)]).sum();
                assert!((col - total[i]).abs() <= 1e-12 * col.abs().max(1.0));
            }
            assert!((species.sum() - mass).abs() <= 1e-12 * mass.max(1.0));
        }
        for j in 0..3 {
            let pair_sum: f64 = tensor.project_pair(j).iter().map(|m| m.sum()).sum();
            assert!((pair_sum - mass).abs() <= 1e-12 * mass.max(1.0));
        }
    }

    #[test]
    fn structured_projections_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let num_species = rng.random_range(1..=2);
            let n = rng.random_range(2..=5);
            let horizon = rng.random_range(1..=3);
            let kernels = random_kernels(&mut rng, num_species, n);
            let state = random_state(&mut rng, num_species, n, horizon);
            let tensor = materialize(&kernels, &state).unwrap();
            let prop = Propagator::new(&kernels, Domain::Scaled, false);
            let cache = prop.messages(&state);
            for j in 0..=horizon {
                let fast = prop.project_species(j, &state, &cache);
                let slow = tensor.project_species(j);
                for (a, b) in fast.iter().zip(slow.iter()) {
                    assert!(
                        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300),
                        "j={j}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn size_cap_rejected() {
        // 10^8 entries with N = 10, T = 7.
        assert!(matches!(
            DenseTensor::zeros(1, 10, 7),
            Err(OracleError::TooLarge { .. })
        ));
        // Overflow-sized instances are also rejected rather than wrapped.
        assert!(matches!(
            DenseTensor::zeros(3, 10_000, 60),
            Err(OracleError::TooLarge { .. })
        ));
    }

    #[test]
    fn entropy_objective_examples() {
        // M = all ones, C = 0: every entry contributes 0.
        let tensor = DenseTensor {
            num_species: 1,
            n: 2,
            horizon: 1,
            values: vec![1.0; 4],
        };
        let objective = dense_entropy_objective(&tensor, &[0.0; 4], 0.5);
        assert_eq!(objective, 0.0);
        // Zero tensor: the +1 convention term remains on every entry.
        let zero = DenseTensor {
            num_species: 1,
            n: 2,
            horizon: 1,
            values: vec![0.0; 4],
        };
        let objective = dense_entropy_objective(&zero, &[0.0; 4], 0.5);
        assert_eq!(objective, 0.5 * 4.0);
    }

    #[test]
    fn free_problem_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let kernels = random_kernels(&mut rng, 2, 3);
        let horizon = 2;
        let total_costs = vec![MarginalCost::Free; horizon + 1];
        // All-free species costs except the mandatory shape; use Free
        // everywhere to probe the no-op fixed point.
        let species_costs = vec![vec![MarginalCost::Free; 2]; horizon + 1];
        let view = ProblemView {
            n: 3,
            num_species: 2,
            horizon,
            epsilon: 0.5,
            dt_weight: 1.0,
            total_costs: &total_costs,
            species_costs: &species_costs,
        };
        let options = SolveOptions {
            max_sweeps: 3,
            ..SolveOptions::default()
        };
        let solution = dense_solve(&view, &kernels, &options, None, SolveHooks::default()).unwrap();
        assert!(solution.converged);
        assert_eq!(solution.sweeps_used, 1);
        assert_eq!(solution.residual_history[0].max_residual, 0.0);
        assert_eq!(solution.residual_history[0].max_log_change, 0.0);
    }
}
