//! Generalized Sinkhorn sweeps over the scaling state.
//!
//! One sweep performs, in order: a backward message pass, the species
//! equality update at time 0, then for each time index `j = 1..=T` (ascending)
//! the species scaling update followed by the total scaling update. The
//! factor `w` feeding each update ("the rest of the tensor") comes from a
//! [`ProjectionEngine`]; the production engine computes it from the message
//! recursions, while the dense oracle engine sums the materialized tensor.
//! Both run through the same sweep loop and the same update rules, so their
//! trajectories are directly comparable.
//!
//! Convergence combines two measures, both of which must drop below the
//! tolerance: the largest L1 violation of any equality constraint (measured
//! before its update) and the largest log-scale movement of any scaling
//! entry. Soft costs have no residual, so the movement measure is what
//! certifies them.
//!
//! After the final sweep the marginals are extracted behind a fresh backward
//! pass and one more time-0 equality update, which re-pins the species
//! masses exactly; every reported marginal then comes from the same tensor,
//! making per-species mass structurally constant across time indices.

use std::fmt;
use std::io::{self, Read, Write};

use ndarray::{Array1, Array2};

use crate::kernel::KernelSet;
use crate::propagation::{Domain, Propagator, ScalingState};
use crate::scenario::{MarginalCost, Problem};
use crate::updates::{self, UpdateError};

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Convergence tolerance on residuals and log-scaling movement.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Run all arithmetic in the log domain (slower, robust for small
    /// epsilon).
    pub log_domain: bool,
    /// Keep every `record_every`-th sweep record (the final sweep is always
    /// kept). Convergence checks are unaffected.
    pub record_every: usize,
    /// Number of worker threads; 1 means strictly sequential. Parallel runs
    /// produce bitwise-identical results (each output element is an
    /// independent in-order gather).
    pub threads: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-6,
            max_sweeps: 5000,
            log_domain: false,
            record_every: 1,
            threads: 1,
        }
    }
}

impl SolveOptions {
    fn domain(&self) -> Domain {
        if self.log_domain {
            Domain::Log
        } else {
            Domain::Scaled
        }
    }
}

/// Convergence measurements of one sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRecord {
    pub sweep: usize,
    /// Largest L1 equality-constraint violation, measured before each
    /// equality update.
    pub max_residual: f64,
    /// Largest absolute log-scale change of any scaling entry (entries that
    /// are structurally zero on either side are skipped; the residual
    /// governs those).
    pub max_log_change: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub scalings: ScalingState,
    /// Total marginal per time index, linear values.
    pub totals: Vec<Array1<f64>>,
    /// Species-by-cell marginal per time index, linear values.
    pub species_marginals: Vec<Array2<f64>>,
    pub residual_history: Vec<SweepRecord>,
    pub converged: bool,
    pub sweeps_used: usize,
}

#[derive(Debug)]
pub enum SolveError {
    /// An equality constraint wants mass where the rest of the tensor
    /// carries none.
    Infeasible {
        sweep: usize,
        time_index: usize,
        /// 0-based species index for species-marginal constraints.
        species: Option<usize>,
        cell: usize,
    },
    /// The congestion scalar solve did not reach tolerance.
    RootSolve {
        sweep: usize,
        time_index: usize,
        cell: usize,
    },
    /// Resume state does not match the problem or options.
    ResumeMismatch(String),
}

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::Infeasible {
                sweep,
                time_index,
                species,
                cell,
            } => {
                write!(
                    f,
                    "infeasible constraint at sweep {sweep}, time {time_index}"
                )?;
                if let Some(l) = species {
                    write!(f, ", species {}", l + 1)?;
                }
                write!(f, ", cell {cell}")
            }
            SolveError::RootSolve {
                sweep,
                time_index,
                cell,
            } => write!(
                f,
                "congestion solve failed at sweep {sweep}, time {time_index}, cell {cell}"
            ),
            SolveError::ResumeMismatch(msg) => write!(f, "cannot resume: {msg}"),
        }
    }
}

impl std::error::Error for SolveError {}

/// The cost data the sweep loop needs, independent of grid geometry.
#[derive(Debug, Clone, Copy)]
pub struct ProblemView<'a> {
    pub n: usize,
    pub num_species: usize,
    pub horizon: usize,
    pub epsilon: f64,
    pub dt_weight: f64,
    pub total_costs: &'a [MarginalCost],
    pub species_costs: &'a [Vec<MarginalCost>],
}

impl<'a> From<&'a Problem> for ProblemView<'a> {
    fn from(p: &'a Problem) -> ProblemView<'a> {
        ProblemView {
            n: p.n(),
            num_species: p.num_species(),
            horizon: p.horizon,
            epsilon: p.epsilon,
            dt_weight: p.dt_weight,
            total_costs: &p.total_costs,
            species_costs: &p.species_costs,
        }
    }
}

impl ProblemView<'_> {
    /// Weight on the cost at time `j` (running indices carry the dt weight).
    pub fn cost_weight(&self, j: usize) -> f64 {
        if j >= 1 && j < self.horizon {
            self.dt_weight
        } else {
            1.0
        }
    }
}

/// Source of the `w` factors for the updates. Implementations must support
/// the call order: `begin_sweep`, then for each `j = 0..=T` ascending
/// `species_factor(j)` followed (for `j >= 1`) by `total_factor(j)`.
pub(crate) trait ProjectionEngine {
    fn domain(&self) -> Domain;
    fn begin_sweep(&mut self, state: &ScalingState);
    /// Factor at time `j` with the species scaling at `j` left out (the
    /// total scaling at `j` is included when `j >= 1`).
    fn species_factor(&mut self, j: usize, state: &ScalingState) -> Array2<f64>;
    /// Factor at time `j` with the total scaling at `j` left out; uses the
    /// current (just updated) species scaling at `j`.
    fn total_factor(&mut self, j: usize, state: &ScalingState) -> Array1<f64>;
}

/// Production engine: one backward pass per sweep caches the messages from
/// above each index (only indices at or below the sweep cursor change while
/// it ascends, so they stay valid); the forward message advances
/// incrementally with the cursor. Each sweep therefore costs `2 T` kernel
/// applications instead of `O(T^2)`.
pub(crate) struct MessageEngine<'k> {
    prop: Propagator<'k>,
    backward: Vec<Array2<f64>>,
    forward: Option<Array2<f64>>,
    /// Product of forward and backward messages at the current index
    /// (species and total scalings at that index excluded).
    pair: Array2<f64>,
}

impl<'k> MessageEngine<'k> {
    pub fn new(prop: Propagator<'k>) -> Self {
        MessageEngine {
            prop,
            backward: Vec::new(),
            forward: None,
            pair: Array2::zeros((0, 0)),
        }
    }
}

impl ProjectionEngine for MessageEngine<'_> {
    fn domain(&self) -> Domain {
        self.prop.domain()
    }

    fn begin_sweep(&mut self, state: &ScalingState) {
        self.backward = self.prop.backward_pass(state);
        self.forward = None;
    }

    fn species_factor(&mut self, j: usize, state: &ScalingState) -> Array2<f64> {
        if j == 0 {
            self.pair = self.backward[0].clone();
            return self.pair.clone();
        }
        let fwd = self.prop.advance_forward(state, j, self.forward.as_ref());
        self.pair = if j < state.horizon() {
            self.prop.combine(&fwd, &self.backward[j])
        } else {
            fwd.clone()
        };
        self.forward = Some(fwd);
        self.prop.scale_cols(&self.pair, state.total(j))
    }

    fn total_factor(&mut self, j: usize, state: &ScalingState) -> Array1<f64> {
        debug_assert!(j >= 1);
        let with_species = self.prop.combine(&self.pair, state.species(j));
        self.prop.project_total(&with_species)
    }
}

/// Hooks into the solve loop.
#[derive(Default)]
pub struct SolveHooks<'a> {
    /// Called after every sweep with the sweep number, state, and record.
    #[allow(clippy::type_complexity)]
    pub on_sweep: Option<&'a mut dyn FnMut(usize, &ScalingState, &SweepRecord)>,
    /// Write a checkpoint every this many sweeps (0 disables).
    pub checkpoint_every: usize,
    pub on_checkpoint: Option<&'a mut dyn FnMut(usize, &ScalingState)>,
}

/// Continue a previous run from its checkpointed state.
#[derive(Debug, Clone)]
pub struct Resume {
    pub state: ScalingState,
    /// Sweeps already performed.
    pub sweeps_done: usize,
}

fn linear_marginal(domain: Domain, scaling: &[f64], w: &[f64], i: usize) -> f64 {
    match domain {
        Domain::Scaled => scaling[i] * w[i],
        Domain::Log => (scaling[i] + w[i]).exp(),
    }
}

/// L1 violation of an equality cost, measured with the pre-update scaling.
fn equality_residual(
    domain: Domain,
    cost: &MarginalCost,
    scaling: &[f64],
    w: &[f64],
) -> Option<f64> {
    match cost {
        MarginalCost::Fixed { target } => {
            let mut acc = 0.0;
            for i in 0..w.len() {
                acc += (linear_marginal(domain, scaling, w, i) - target[i]).abs();
            }
            Some(acc)
        }
        MarginalCost::FixedOnSubset { target, mask } => {
            let mut acc = 0.0;
            for i in 0..w.len() {
                if mask[i] {
                    acc += (linear_marginal(domain, scaling, w, i) - target[i]).abs();
                }
            }
            Some(acc)
        }
        _ => None,
    }
}

/// Largest log-scale movement between two scaling vectors, skipping entries
/// that are structurally zero on either side.
fn log_change(domain: Domain, old: &[f64], new: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &b) in old.iter().zip(new) {
        let delta = match domain {
            Domain::Scaled => {
                if a == 0.0 || b == 0.0 {
                    continue;
                }
                (b / a).ln().abs()
            }
            Domain::Log => {
                if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                    continue;
                }
                (b - a).abs()
            }
        };
        worst = worst.max(delta);
    }
    worst
}

struct SweepOutcome {
    max_residual: f64,
    max_log_change: f64,
}

fn apply_in_domain(
    domain: Domain,
    cost: &MarginalCost,
    w: &[f64],
    epsilon: f64,
    weight: f64,
) -> Result<Vec<f64>, UpdateError> {
    match domain {
        Domain::Scaled => updates::apply(cost, w, epsilon, weight),
        Domain::Log => updates::apply_log(cost, w, epsilon, weight),
    }
}

fn lift_update_error(
    err: UpdateError,
    sweep: usize,
    time_index: usize,
    species: Option<usize>,
) -> SolveError {
    match err {
        UpdateError::Infeasible { cell } => SolveError::Infeasible {
            sweep,
            time_index,
            species,
            cell,
        },
        UpdateError::RootSolve { cell } => SolveError::RootSolve {
            sweep,
            time_index,
            cell,
        },
    }
}

fn run_sweep<E: ProjectionEngine>(
    view: &ProblemView,
    engine: &mut E,
    state: &mut ScalingState,
    sweep: usize,
) -> Result<SweepOutcome, SolveError> {
    let domain = engine.domain();
    let mut max_residual = 0.0f64;
    let mut max_log_change = 0.0f64;
    engine.begin_sweep(state);

    for j in 0..=view.horizon {
        // Species update at time j, row by row.
        let w = engine.species_factor(j, state);
        let weight = view.cost_weight(j);
        for l in 0..view.num_species {
            let cost = &view.species_costs[j][l];
            let w_row = w.row(l);
            let w_row = w_row.as_slice().unwrap();
            let old_row = state.species(j).row(l).to_vec();
            if let Some(r) = equality_residual(domain, cost, &old_row, w_row) {
                max_residual = max_residual.max(r);
            }
            let new_row = apply_in_domain(domain, cost, w_row, view.epsilon, weight)
                .map_err(|e| lift_update_error(e, sweep, j, Some(l)))?;
            max_log_change = max_log_change.max(log_change(domain, &old_row, &new_row));
            state
                .species_mut(j)
                .row_mut(l)
                .iter_mut()
                .zip(&new_row)
                .for_each(|(slot, &v)| *slot = v);
        }

        // Total update at time j (none at time 0: that marginal carries no
        // scaling).
        if j >= 1 {
            let wt = engine.total_factor(j, state);
            let wt = wt.as_slice().unwrap();
            let cost = &view.total_costs[j];
            let old = state.total(j).to_vec();
            if let Some(r) = equality_residual(domain, cost, &old, wt) {
                max_residual = max_residual.max(r);
            }
            let new = apply_in_domain(domain, cost, wt, view.epsilon, weight)
                .map_err(|e| lift_update_error(e, sweep, j, None))?;
            max_log_change = max_log_change.max(log_change(domain, &old, &new));
            state
                .total_mut(j)
                .iter_mut()
                .zip(&new)
                .for_each(|(slot, &v)| *slot = v);
        }
    }

    Ok(SweepOutcome {
        max_residual,
        max_log_change,
    })
}

/// Extract all marginals (linear values) from the state: fresh backward
/// pass, one more time-0 equality update, then one ascending projection
/// sweep without further updates.
fn extract_marginals<E: ProjectionEngine>(
    view: &ProblemView,
    engine: &mut E,
    state: &mut ScalingState,
    sweep: usize,
) -> Result<(Vec<Array1<f64>>, Vec<Array2<f64>>), SolveError> {
    let domain = engine.domain();
    engine.begin_sweep(state);
    let mut species_marginals: Vec<Array2<f64>> = Vec::with_capacity(view.horizon + 1);

    let w0 = engine.species_factor(0, state);
    for l in 0..view.num_species {
        let cost = &view.species_costs[0][l];
        let w_row = w0.row(l);
        let w_row = w_row.as_slice().unwrap();
        let new_row = apply_in_domain(domain, cost, w_row, view.epsilon, 1.0)
            .map_err(|e| lift_update_error(e, sweep, 0, Some(l)))?;
        state
            .species_mut(0)
            .row_mut(l)
            .iter_mut()
            .zip(&new_row)
            .for_each(|(slot, &v)| *slot = v);
    }

    let to_linear = |m: Array2<f64>| -> Array2<f64> {
        match domain {
            Domain::Scaled => m,
            Domain::Log => m.mapv(f64::exp),
        }
    };
    let combined0 = match domain {
        Domain::Scaled => &w0 * state.species(0),
        Domain::Log => &w0 + state.species(0),
    };
    species_marginals.push(to_linear(combined0));

    for j in 1..=view.horizon {
        let w = engine.species_factor(j, state);
        let combined = match domain {
            Domain::Scaled => &w * state.species(j),
            Domain::Log => &w + state.species(j),
        };
        species_marginals.push(to_linear(combined));
    }

    let totals = species_marginals
        .iter()
        .map(|m| m.sum_axis(ndarray::Axis(0)))
        .collect();
    Ok((totals, species_marginals))
}

/// The full solve loop over a projection engine.
pub(crate) fn run_solve<E: ProjectionEngine>(
    view: &ProblemView,
    mut engine: E,
    options: &SolveOptions,
    resume: Option<Resume>,
    mut hooks: SolveHooks<'_>,
) -> Result<Solution, SolveError> {
    let domain = engine.domain();
    let (mut state, start_sweep) = match resume {
        Some(r) => {
            if r.state.domain != domain {
                return Err(SolveError::ResumeMismatch(
                    "checkpoint domain does not match options".into(),
                ));
            }
            if r.state.n() != view.n
                || r.state.num_species() != view.num_species
                || r.state.horizon() != view.horizon
            {
                return Err(SolveError::ResumeMismatch(
                    "checkpoint dimensions do not match the problem".into(),
                ));
            }
            (r.state, r.sweeps_done)
        }
        None => (
            ScalingState::ones(view.num_species, view.n, view.horizon, domain),
            0,
        ),
    };

    let record_every = options.record_every.max(1);
    let mut history: Vec<SweepRecord> = Vec::new();
    let mut converged = false;
    let mut sweeps_used = start_sweep;

    for sweep in start_sweep + 1..=options.max_sweeps {
        let outcome = run_sweep(view, &mut engine, &mut state, sweep)?;
        sweeps_used = sweep;
        let record = SweepRecord {
            sweep,
            max_residual: outcome.max_residual,
            max_log_change: outcome.max_log_change,
        };
        converged = outcome.max_residual <= options.tol && outcome.max_log_change <= options.tol;
        if (sweep - start_sweep) % record_every == 0 || converged || sweep == options.max_sweeps {
            history.push(record);
        }
        if let Some(cb) = hooks.on_sweep.as_mut() {
            cb(sweep, &state, &record);
        }
        if hooks.checkpoint_every > 0 && (sweep - start_sweep) % hooks.checkpoint_every == 0 {
            if let Some(cb) = hooks.on_checkpoint.as_mut() {
                cb(sweep, &state);
            }
        }
        if converged {
            break;
        }
    }

    let (totals, species_marginals) = extract_marginals(view, &mut engine, &mut state, sweeps_used)?;
    Ok(Solution {
        scalings: state,
        totals,
        species_marginals,
        residual_history: history,
        converged,
        sweeps_used,
    })
}

/// Solve with the structured (message-passing) engine.
pub fn solve_view(
    view: &ProblemView,
    kernels: &KernelSet,
    options: &SolveOptions,
    resume: Option<Resume>,
    hooks: SolveHooks<'_>,
) -> Result<Solution, SolveError> {
    let prop = Propagator::new(kernels, options.domain(), options.threads > 1);
    let engine = MessageEngine::new(prop);
    run_solve(view, engine, options, resume, hooks)
}

/// Build the kernels of a problem and solve it.
pub fn solve(problem: &Problem, options: &SolveOptions) -> Result<Solution, SolveError> {
    let kernels = crate::kernel::build_kernels(problem);
    solve_view(
        &ProblemView::from(problem),
        &kernels,
        options,
        None,
        SolveHooks::default(),
    )
}

// ---------------------------------------------------------------------------
// Objective evaluation
// ---------------------------------------------------------------------------

/// Objective of an extracted solution, split into its terms. `value` is
/// `transport + epsilon * entropy + cost terms`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    /// Inner product of the movement cost tensor with the mass tensor.
    pub transport: f64,
    /// Entropy term `sum(M log M - M + 1)` over all tensor entries.
    pub entropy: f64,
    /// Running plus terminal costs on the total marginals.
    pub total_cost_terms: f64,
    /// Running plus terminal costs on the species marginals.
    pub species_cost_terms: f64,
    /// Largest capacity-bound violation found in the marginals.
    pub max_capacity_violation: f64,
    pub value: f64,
}

#[derive(Debug)]
pub enum ObjectiveError {
    /// A congestion cell carries density at or above one; the barrier is
    /// infinite there, so the extracted solution is infeasible.
    CongestionDomain { time_index: usize, cell: usize },
}

impl fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveError::CongestionDomain { time_index, cell } => write!(
                f,
                "density at or above 1 on congestion cell {cell} at time {time_index}"
            ),
        }
    }
}

impl std::error::Error for ObjectiveError {}

/// Evaluate the objective through the factored representation: the
/// transport term comes from adjacent-pair projections and the entropy from
/// the single-index projections, never from the dense tensor.
pub fn objective(
    view: &ProblemView,
    kernels: &KernelSet,
    solution: &Solution,
) -> Result<ObjectiveReport, ObjectiveError> {
    let state = &solution.scalings;
    let domain = state.domain;
    let prop = Propagator::new(kernels, domain, false);
    let cache = prop.messages(state);
    let horizon = view.horizon;
    let epsilon = view.epsilon;

    // Transport term via adjacent-pair projections along the chain; the
    // move cost is recovered as -epsilon * log kernel.
    let mut transport = 0.0;
    let mut mass = 0.0;
    for j in 0..horizon {
        let left = prop.index_factor(state, j);
        let right = prop.index_factor(state, j + 1);
        for l in 0..view.num_species {
            let kernel = kernels.at(l, j);
            for i in 0..view.n {
                let (cols, logs) = kernel.fwd_log.row(i);
                let (_, vals) = kernel.fwd.row(i);
                for (p, &k) in cols.iter().enumerate() {
                    let k = k as usize;
                    let q = match domain {
                        Domain::Scaled => {
                            let fwd = if j == 0 {
                                1.0
                            } else {
                                cache.forward_at(j)[(l, i)]
                            };
                            let bwd = if j + 1 == horizon {
                                1.0
                            } else {
                                cache.backward_at(j + 1)[(l, k)]
                            };
                            fwd * left[(l, i)] * vals[p] * right[(l, k)] * bwd
                        }
                        Domain::Log => {
                            let fwd = if j == 0 {
                                0.0
                            } else {
                                cache.forward_at(j)[(l, i)]
                            };
                            let bwd = if j + 1 == horizon {
                                0.0
                            } else {
                                cache.backward_at(j + 1)[(l, k)]
                            };
                            (fwd + left[(l, i)] + logs[p] + right[(l, k)] + bwd).exp()
                        }
                    };
                    transport += -epsilon * logs[p] * q;
                    if j == 0 {
                        mass += q;
                    }
                }
            }
        }
    }

    // sum(M log M) decomposes into -transport / epsilon plus the per-index
    // scaling terms weighted by the marginals.
    let ln = |v: f64| -> f64 {
        match domain {
            Domain::Scaled => v.ln(),
            Domain::Log => v,
        }
    };
    let mut scaling_terms = 0.0;
    for j in 0..=horizon {
        let marginal = &solution.species_marginals[j];
        for l in 0..view.num_species {
            for i in 0..view.n {
                let p = marginal[(l, i)];
                if p > 0.0 {
                    scaling_terms += p * ln(state.species(j)[(l, i)]);
                }
            }
        }
        if j >= 1 {
            let total = &solution.totals[j];
            for i in 0..view.n {
                let p = total[i];
                if p > 0.0 {
                    scaling_terms += p * ln(state.total(j)[i]);
                }
            }
        }
    }
    let m_log_m = -transport / epsilon + scaling_terms;
    let entry_count = (view.n as f64).powi(horizon as i32 + 1) * view.num_species as f64;
    let entropy = m_log_m - mass + entry_count;

    // Marginal cost terms evaluated on the extracted marginals.
    let mut total_cost_terms = 0.0;
    let mut species_cost_terms = 0.0;
    let mut max_capacity_violation = 0.0f64;
    {
        let mut eval = |cost: &MarginalCost,
                        marginal: &dyn Fn(usize) -> f64,
                        weight: f64,
                        time_index: usize|
         -> Result<f64, ObjectiveError> {
            match cost {
                MarginalCost::Free
                | MarginalCost::Fixed { .. }
                | MarginalCost::FixedOnSubset { .. } => Ok(0.0),
                MarginalCost::LinearWithCapacity { cost, capacity } => {
                    let mut acc = 0.0;
                    for i in 0..view.n {
                        let mu = marginal(i);
                        acc += cost[i] * mu;
                        max_capacity_violation = max_capacity_violation.max(mu - capacity[i]);
                    }
                    Ok(weight * acc)
                }
                MarginalCost::Congestion { mask } => {
                    let mut acc = 0.0;
                    for i in 0..view.n {
                        if mask[i] {
                            let mu = marginal(i);
                            if mu >= 1.0 {
                                return Err(ObjectiveError::CongestionDomain {
                                    time_index,
                                    cell: i,
                                });
                            }
                            acc += mu / (1.0 - mu);
                        }
                    }
                    Ok(weight * acc)
                }
            }
        };
        for j in 1..=horizon {
            let weight = view.cost_weight(j);
            let totals = &solution.totals[j];
            total_cost_terms += eval(&view.total_costs[j], &|i| totals[i], weight, j)?;
            for l in 0..view.num_species {
                let marginals = &solution.species_marginals[j];
                species_cost_terms += eval(
                    &view.species_costs[j][l],
                    &|i| marginals[(l, i)],
                    weight,
                    j,
                )?;
            }
        }
    }

    let value = transport + epsilon * entropy + total_cost_terms + species_cost_terms;
    Ok(ObjectiveReport {
        transport,
        entropy,
        total_cost_terms,
        species_cost_terms,
        max_capacity_violation,
        value,
    })
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"MFCCKPT1";

/// FNV-1a hash of the canonical scenario text plus the arithmetic domain;
/// identifies which run a checkpoint belongs to.
pub fn problem_hash(problem: &Problem, log_domain: bool) -> u64 {
    let text = crate::scenario::render_scenario(problem);
    hash_bytes(text.as_bytes(), log_domain)
}

/// FNV-1a over raw scenario bytes; use when the problem came from a file.
pub fn hash_bytes(bytes: &[u8], log_domain: bool) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let eat = |byte: u8, hash: &mut u64| {
        *hash ^= byte as u64;
        *hash = hash.wrapping_mul(0x100000001b3);
    };
    for b in bytes {
        eat(*b, &mut hash);
    }
    eat(log_domain as u8, &mut hash);
    hash
}

/// Binary checkpoint layout: magic, domain flag byte, problem hash (u64 LE),
/// sweeps done (u64 LE), L (u32 LE), N (u64 LE), T (u32 LE), then the total
/// scaling vectors for `j = 1..=T` followed by the species scaling matrices
/// (row-major) for `j = 0..=T`, all f64 LE.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    state: &ScalingState,
    sweeps_done: usize,
    hash: u64,
) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[matches!(state.domain, Domain::Log) as u8])?;
    w.write_all(&hash.to_le_bytes())?;
    w.write_all(&(sweeps_done as u64).to_le_bytes())?;
    w.write_all(&(state.num_species() as u32).to_le_bytes())?;
    w.write_all(&(state.n() as u64).to_le_bytes())?;
    w.write_all(&(state.horizon() as u32).to_le_bytes())?;
    for j in 1..=state.horizon() {
        for &v in state.total(j).iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for j in 0..=state.horizon() {
        for &v in state.species(j).iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> io::Result<(ScalingState, usize, u64)> {
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    let domain = match byte[0] {
        0 => Domain::Scaled,
        1 => Domain::Log,
        _ => return Err(bad("unknown domain flag")),
    };
    let mut u64buf = [0u8; 8];
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u64buf)?;
    let hash = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf)?;
    let sweeps_done = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u32buf)?;
    let num_species = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u32buf)?;
    let horizon = u32::from_le_bytes(u32buf) as usize;
    if num_species == 0 || n == 0 || horizon == 0 {
        return Err(bad("degenerate checkpoint dimensions"));
    }
    let mut state = ScalingState::ones(num_species, n, horizon, domain);
    let read_f64 = |r: &mut R| -> io::Result<f64> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    };
    for j in 1..=horizon {
        for slot in state.total_mut(j).iter_mut() {
            *slot = read_f64(&mut r)?;
        }
    }
    for j in 0..=horizon {
        for slot in state.species_mut(j).iter_mut() {
            *slot = read_f64(&mut r)?;
        }
    }
    Ok((state, sweeps_done, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{SparseKernel, SparseMatrix};
    use crate::oracle;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

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

    /// A feasible random instance: targets are projections of a reference
    /// tensor, so every equality constraint is jointly attainable and
    /// congestion cells have headroom below one.
    struct Instance {
        num_species: usize,
        n: usize,
        horizon: usize,
        epsilon: f64,
        kernels: KernelSet,
        total_costs: Vec<MarginalCost>,
        species_costs: Vec<Vec<MarginalCost>>,
    }

    impl Instance {
        fn view(&self) -> ProblemView<'_> {
            ProblemView {
                n: self.n,
                num_species: self.num_species,
                horizon: self.horizon,
                epsilon: self.epsilon,
                dt_weight: 1.0,
                total_costs: &self.total_costs,
                species_costs: &self.species_costs,
            }
        }
    }

    fn random_feasible_instance(rng: &mut ChaCha8Rng, mixed: bool) -> Instance {
        let num_species = rng.random_range(1..=2);
        let n = rng.random_range(2..=5);
        let horizon = rng.random_range(1..=3);
        let epsilon = rng.random_range(0.2..1.5);
        let kernels = random_kernels(rng, num_species, n);

        // Reference tensor from a random positive state, mass-normalized so
        // per-cell totals stay well below one.
        let mut gen_state =
            crate::propagation::ScalingState::ones(num_species, n, horizon, Domain::Scaled);
        for j in 0..=horizon {
            gen_state
                .species_mut(j)
                .mapv_inplace(|_| rng.random_range(0.3..2.0));
        }
        for j in 1..=horizon {
            gen_state
                .total_mut(j)
                .mapv_inplace(|_| rng.random_range(0.3..2.0));
        }
        let tensor = oracle::materialize(&kernels, &gen_state).unwrap();
        let mut peak = 0.0f64;
        for j in 0..=horizon {
            for &v in tensor.project_total(j).iter() {
                peak = peak.max(v);
            }
        }
        let scale = 0.5 / peak;
        gen_state.species_mut(0).mapv_inplace(|v| v * scale);
        let tensor = oracle::materialize(&kernels, &gen_state).unwrap();

        let mut total_costs = vec![MarginalCost::Free];
        for j in 1..=horizon {
            let total_target = tensor.project_total(j).to_vec();
            let kind = if mixed { rng.random_range(0..4) } else { 1 };
            total_costs.push(match kind {
                0 => MarginalCost::Free,
                1 => MarginalCost::Fixed {
                    target: total_target,
                },
                2 => {
                    let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.6).collect();
                    MarginalCost::FixedOnSubset {
                        target: total_target,
                        mask,
                    }
                }
                _ => {
                    let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.8).collect();
                    MarginalCost::Congestion { mask }
                }
            });
        }

        let mut species_costs = vec![(0..num_species)
            .map(|l| MarginalCost::Fixed {
                target: tensor.project_species(0).row(l).to_vec(),
            })
            .collect::<Vec<_>>()];
        for j in 1..=horizon {
            let marginal = tensor.project_species(j);
            species_costs.push(
                (0..num_species)
                    .map(|l| {
                        let kind = if mixed { rng.random_range(0..3) } else { 0 };
                        match kind {
                            0 => MarginalCost::Free,
                            1 => MarginalCost::Fixed {
                                target: marginal.row(l).to_vec(),
                            },
                            _ => {
                                let cost: Vec<f64> =
                                    (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
                                let capacity: Vec<f64> = (0..n)
                                    .map(|i| {
                                        marginal[(l, i)] * rng.random_range(1.2..2.5) + 0.01
                                    })
                                    .collect();
                                MarginalCost::LinearWithCapacity { cost, capacity }
                            }
                        }
                    })
                    .collect(),
            );
        }

        Instance {
            num_species,
            n,
            horizon,
            epsilon,
            kernels,
            total_costs,
            species_costs,
        }
    }

    fn max_state_diff(a: &ScalingState, b: &ScalingState) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..=a.horizon() {
            for (x, y) in a.species(j).iter().zip(b.species(j).iter()) {
                worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1.0));
            }
        }
        for j in 1..=a.horizon() {
            for (x, y) in a.total(j).iter().zip(b.total(j).iter()) {
                worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1.0));
            }
        }
        worst
    }

    #[test]
    fn all_free_problem_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let kernels = random_kernels(&mut rng, 2, 3);
        let total_costs = vec![MarginalCost::Free; 3];
        let species_costs = vec![vec![MarginalCost::Free; 2]; 3];
        let view = ProblemView {
            n: 3,
            num_species: 2,
            horizon: 2,
            epsilon: 0.5,
            dt_weight: 1.0,
            total_costs: &total_costs,
            species_costs: &species_costs,
        };
        let solution = solve_view(
            &view,
            &kernels,
            &SolveOptions::default(),
            None,
            SolveHooks::default(),
        )
        .unwrap();
        assert!(solution.converged);
        assert_eq!(solution.sweeps_used, 1);
        assert_eq!(solution.residual_history[0].max_residual, 0.0);
        assert_eq!(solution.residual_history[0].max_log_change, 0.0);
    }

    #[test]
    fn structured_sweep_matches_dense_oracle_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let instance = random_feasible_instance(&mut rng, true);
            let options = SolveOptions {
                max_sweeps: 1,
                tol: 0.0,
                ..SolveOptions::default()
            };
            let mut fast_state = None;
            let mut hooks = SolveHooks::default();
            let mut grab = |_s: usize, state: &ScalingState, _r: &SweepRecord| {
                fast_state = Some(state.clone());
            };
            hooks.on_sweep = Some(&mut grab);
            solve_view(&instance.view(), &instance.kernels, &options, None, hooks).unwrap();

            let mut slow_state = None;
            let mut hooks = SolveHooks::default();
            let mut grab = |_s: usize, state: &ScalingState, _r: &SweepRecord| {
                slow_state = Some(state.clone());
            };
            hooks.on_sweep = Some(&mut grab);
            oracle::dense_solve(&instance.view(), &instance.kernels, &options, None, hooks)
                .unwrap();

            let diff = max_state_diff(&fast_state.unwrap(), &slow_state.unwrap());
            assert!(diff <= 1e-12, "one-sweep divergence {diff}");
        }
    }

    #[test]
    fn full_trajectory_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..10 {
            let instance = random_feasible_instance(&mut rng, true);
            let options = SolveOptions {
                max_sweeps: 60,
                tol: 1e-8,
                ..SolveOptions::default()
            };
            let mut fast_states: Vec<ScalingState> = Vec::new();
            let mut hooks = SolveHooks::default();
            let mut grab = |_s: usize, state: &ScalingState, _r: &SweepRecord| {
                fast_states.push(state.clone());
            };
            hooks.on_sweep = Some(&mut grab);
            let fast =
                solve_view(&instance.view(), &instance.kernels, &options, None, hooks).unwrap();

            let mut slow_states: Vec<ScalingState> = Vec::new();
            let mut hooks = SolveHooks::default();
            let mut grab = |_s: usize, state: &ScalingState, _r: &SweepRecord| {
                slow_states.push(state.clone());
            };
            hooks.on_sweep = Some(&mut grab);
            let slow =
                oracle::dense_solve(&instance.view(), &instance.kernels, &options, None, hooks)
                    .unwrap();

            assert_eq!(fast.converged, slow.converged);
            assert_eq!(fast_states.len(), slow_states.len());
            for (a, b) in fast_states.iter().zip(&slow_states) {
                assert!(max_state_diff(a, b) <= 1e-10);
            }
        }
    }

    #[test]
    fn second_sweep_from_converged_state_barely_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let instance = random_feasible_instance(&mut rng, false);
        let options = SolveOptions {
            tol: 1e-10,
            max_sweeps: 500,
            ..SolveOptions::default()
        };
        let solution = solve_view(
            &instance.view(),
            &instance.kernels,
            &options,
            None,
            SolveHooks::default(),
        )
        .unwrap();
        assert!(solution.converged);
        // One more sweep from the converged scalings.
        let resume = Resume {
            state: solution.scalings.clone(),
            sweeps_done: solution.sweeps_used,
        };
        let options = SolveOptions {
            tol: 1e-10,
            max_sweeps: solution.sweeps_used + 1,
            ..SolveOptions::default()
        };
        let again = solve_view(
            &instance.view(),
            &instance.kernels,
            &options,
            Some(resume),
            SolveHooks::default(),
        )
        .unwrap();
        let last = again.residual_history.last().unwrap();
        assert!(last.max_log_change <= 1e-10, "{last:?}");
    }

    #[test]
    fn vacuous_tolerance_converges_after_one_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let instance = random_feasible_instance(&mut rng, true);
        let options = SolveOptions {
            tol: f64::INFINITY,
            ..SolveOptions::default()
        };
        let solution = solve_view(
            &instance.view(),
            &instance.kernels,
            &options,
            None,
            SolveHooks::default(),
        )
        .unwrap();
        assert!(solution.converged);
        assert_eq!(solution.sweeps_used, 1);
    }

    /// Independent classical two-marginal Sinkhorn.
    fn bimarginal_sinkhorn(
        kernel: &[f64],
        n: usize,
        mu0: &[f64],
        mu1: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![1.0; n];
        let mut v = vec![1.0; n];
        for _ in 0..20000 {
            let mut worst = 0.0f64;
            for i in 0..n {
                let kv: f64 = (0..n).map(|k| kernel[i * n + k] * v[k]).sum();
                let new = mu0[i] / kv;
                worst = worst.max((new - u[i]).abs() / new.abs().max(1e-300));
                u[i] = new;
            }
            for k in 0..n {
                let ktu: f64 = (0..n).map(|i| kernel[i * n + k] * u[i]).sum();
                let new = mu1[k] / ktu;
                worst = worst.max((new - v[k]).abs() / new.abs().max(1e-300));
                v[k] = new;
            }
            if worst < 1e-15 {
                break;
            }
        }
        (u, v)
    }

    #[test]
    fn two_marginal_reduction_matches_classical_sinkhorn() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let n = 4;
        let dense: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.2..2.0)).collect();
        let kernels = KernelSet::from_static(vec![SparseKernel::from_matrix(
            0,
            SparseMatrix::from_dense(n, &dense),
        )]);
        let mu0: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let mass0: f64 = mu0.iter().sum();
        let mut mu1: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let mass1: f64 = mu1.iter().sum();
        mu1.iter_mut().for_each(|x| *x *= mass0 / mass1);

        let total_costs = vec![
            MarginalCost::Free,
            MarginalCost::Fixed {
                target: mu1.clone(),
            },
        ];
        let species_costs = vec![
            vec![MarginalCost::Fixed {
                target: mu0.clone(),
            }],
            vec![MarginalCost::Free],
        ];
        let view = ProblemView {
            n,
            num_species: 1,
            horizon: 1,
            epsilon: 1.0,
            dt_weight: 1.0,
            total_costs: &total_costs,
            species_costs: &species_costs,
        };
        let options = SolveOptions {
            tol: 1e-13,
            max_sweeps: 20000,
            ..SolveOptions::default()
        };
        let solution =
            solve_view(&view, &kernels, &options, None, SolveHooks::default()).unwrap();
        assert!(solution.converged);

        let (u, v) = bimarginal_sinkhorn(&dense, n, &mu0, &mu1);
        // Compare the transport plans entrywise: ours factors as
        // species0[i] * K[i,k] * species1[k] * total1[k].
        let state = &solution.scalings;
        for i in 0..n {
            for k in 0..n {
                let ours = state.species(0)[(0, i)]
                    * dense[i * n + k]
                    * state.species(1)[(0, k)]
                    * state.total(1)[k];
                let theirs = u[i] * dense[i * n + k] * v[k];
                assert!(
                    (ours - theirs).abs() <= 1e-10 * theirs.abs().max(1.0),
                    "plan mismatch at ({i},{k}): {ours} vs {theirs}"
                );
            }
        }
        // And the marginals hit their targets.
        for i in 0..n {
            assert!((solution.species_marginals[0][(0, i)] - mu0[i]).abs() <= 1e-10);
            assert!((solution.totals[1][i] - mu1[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn objective_matches_dense_entropy_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..5 {
            let instance = random_feasible_instance(&mut rng, true);
            let options = SolveOptions {
                tol: 1e-9,
                max_sweeps: 300,
                ..SolveOptions::default()
            };
            let solution = solve_view(
                &instance.view(),
                &instance.kernels,
                &options,
                None,
                SolveHooks::default(),
            )
            .unwrap();
            let report = objective(&instance.view(), &instance.kernels, &solution).unwrap();

            let tensor = oracle::materialize(&instance.kernels, &solution.scalings).unwrap();
            let costs = oracle::dense_cost_tensor(
                &instance.kernels,
                instance.epsilon,
                instance.num_species,
                instance.n,
                instance.horizon,
            )
            .unwrap();
            let dense_core = oracle::dense_entropy_objective(&tensor, &costs, instance.epsilon);
            let factored_core = report.transport + instance.epsilon * report.entropy;
            assert!(
                (dense_core - factored_core).abs() <= 1e-10 * dense_core.abs().max(1.0),
                "{dense_core} vs {factored_core}"
            );
        }
    }

    #[test]
    fn dual_objective_is_nondecreasing_on_fixed_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..5 {
            let instance = random_feasible_instance(&mut rng, false);
            let view = instance.view();
            let mut duals: Vec<f64> = Vec::new();
            let mut hooks = SolveHooks::default();
            let mut grab = |_s: usize, state: &ScalingState, _r: &SweepRecord| {
                // dual = eps * (sum of <log scaling, target> over fixed
                // constraints - total mass of the scaled tensor).
                let mut acc = 0.0;
                for j in 0..=view.horizon {
                    for l in 0..view.num_species {
                        if let MarginalCost::Fixed { target } = &view.species_costs[j][l] {
                            for i in 0..view.n {
                                if target[i] > 0.0 {
                                    acc += state.species(j)[(l, i)].ln() * target[i];
                                }
                            }
                        }
                    }
                    if j >= 1 {
                        if let MarginalCost::Fixed { target } = &view.total_costs[j] {
                            for i in 0..view.n {
                                if target[i] > 0.0 {
                                    acc += state.total(j)[i].ln() * target[i];
                                }
                            }
                        }
                    }
                }
                let mass = oracle::materialize(&instance.kernels, state)
                    .unwrap()
                    .total_mass();
                duals.push(view.epsilon * (acc - mass));
            };
            hooks.on_sweep = Some(&mut grab);
            let options = SolveOptions {
                tol: 1e-9,
                max_sweeps: 120,
                ..SolveOptions::default()
            };
            solve_view(&view, &instance.kernels, &options, None, hooks).unwrap();
            for w in duals.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0),
                    "dual decreased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn per_species_mass_is_constant_across_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let instance = random_feasible_instance(&mut rng, true);
        let solution = solve_view(
            &instance.view(),
            &instance.kernels,
            &SolveOptions {
                tol: 1e-8,
                max_sweeps: 300,
                ..SolveOptions::default()
            },
            None,
            SolveHooks::default(),
        )
        .unwrap();
        for l in 0..instance.num_species {
            let mass0: f64 = solution.species_marginals[0].row(l).sum();
            for j in 1..=instance.horizon {
                let mass: f64 = solution.species_marginals[j].row(l).sum();
                assert!(
                    (mass - mass0).abs() <= 1e-12 * mass0.max(1e-300),
                    "species {l}: {mass} vs {mass0}"
                );
            }
        }
        // Totals are column sums of the species marginals by construction.
        for j in 0..=instance.horizon {
            let direct = solution.species_marginals[j].sum_axis(ndarray::Axis(0));
            assert_eq!(direct, solution.totals[j]);
        }
    }

    #[test]
    fn deterministic_reruns_are_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let instance = random_feasible_instance(&mut rng, true);
        let options = SolveOptions {
            tol: 1e-9,
            max_sweeps: 200,
            ..SolveOptions::default()
        };
        let a = solve_view(
            &instance.view(),
            &instance.kernels,
            &options,
            None,
            SolveHooks::default(),
        )
        .unwrap();
        let b = solve_view(
            &instance.view(),
            &instance.kernels,
            &options,
            None,
            SolveHooks::default(),
        )
        .unwrap();
        assert_eq!(a.residual_history.len(), b.residual_history.len());
        for (x, y) in a.residual_history.iter().zip(&b.residual_history) {
            assert_eq!(x.max_residual.to_bits(), y.max_residual.to_bits());
            assert_eq!(x.max_log_change.to_bits(), y.max_log_change.to_bits());
        }
        for (x, y) in a.totals.iter().zip(&b.totals) {
            for (p, q) in x.iter().zip(y.iter()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let instance = random_feasible_instance(&mut rng, true);
        // Uninterrupted reference run: 40 sweeps, tolerance zero so it never
        // stops early.
        let options = SolveOptions {
            tol: 0.0,
            max_sweeps: 40,
            ..SolveOptions::default()
        };
        let full = solve_view(
            &instance.view(),
            &instance.kernels,
            &options,
            None,
            SolveHooks::default(),
        )
        .unwrap();

        // Interrupted run: stop at 20, checkpoint through bytes, resume.
        let half_options = SolveOptions {
            tol: 0.0,
            max_sweeps: 20,
            ..SolveOptions::default()
        };
        let half = solve_view(
            &instance.view(),
            &instance.kernels,
            &half_options,
            None,
            SolveHooks::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &half.scalings, half.sweeps_used, 0xfeed).unwrap();
        let (state, sweeps_done, hash) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(hash, 0xfeed);
        assert_eq!(sweeps_done, 20);
        assert_eq!(state, half.scalings);

        let resumed = solve_view(
            &instance.view(),
            &instance.kernels,
            &options,
            Some(Resume {
                state,
                sweeps_done,
            }),
            SolveHooks::default(),
        )
        .unwrap();
        assert_eq!(resumed.sweeps_used, full.sweeps_used);
        for (x, y) in full.totals.iter().zip(&resumed.totals) {
            for (p, q) in x.iter().zip(y.iter()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn log_domain_solve_matches_scaled_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let instance = random_feasible_instance(&mut rng, true);
            let options = SolveOptions {
                tol: 1e-9,
                max_sweeps: 300,
                ..SolveOptions::default()
            };
            let scaled = solve_view(
                &instance.view(),
                &instance.kernels,
                &options,
                None,
                SolveHooks::default(),
            )
            .unwrap();
            let log_options = SolveOptions {
                log_domain: true,
                ..options
            };
            let logged = solve_view(
                &instance.view(),
                &instance.kernels,
                &log_options,
                None,
                SolveHooks::default(),
            )
            .unwrap();
            assert_eq!(scaled.converged, logged.converged);
            for (a, b) in scaled.totals.iter().zip(&logged.totals) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!((x - y).abs() <= 1e-8 * x.abs().max(1.0), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn log_domain_survives_kernels_that_underflow() {
        // Costs so large relative to epsilon that exp(-C/eps) is zero in
        // f64: the scaled kernel loses the transition, the log kernel keeps
        // it.
        let n = 2;
        let epsilon = 0.01;
        // Zero-cost diagonal entries are stored explicitly: zero cost is a
        // real transition, unlike a structural zero.
        let cost = crate::kernel::SparseCostMatrix {
            species: 0,
            mat: SparseMatrix {
                n,
                row_ptr: vec![0, 2, 4],
                cols: vec![0, 1, 0, 1],
                vals: vec![0.0, 100.0, 100.0, 0.0],
            },
        };
        let kernel = crate::kernel::build_kernel(&cost, epsilon);
        assert_eq!(kernel.fwd.get(0, 1), Some(0.0), "underflow expected");
        let kernels = KernelSet::from_static(vec![kernel]);

        let total_costs = vec![
            MarginalCost::Free,
            MarginalCost::Fixed {
                target: vec![0.5, 0.5],
            },
        ];
        let species_costs = vec![
            vec![MarginalCost::Fixed {
                target: vec![1.0, 0.0],
            }],
            vec![MarginalCost::Free],
        ];
        let view = ProblemView {
            n,
            num_species: 1,
            horizon: 1,
            epsilon,
            dt_weight: 1.0,
            total_costs: &total_costs,
            species_costs: &species_costs,
        };
        // Scaled domain: mass cannot reach cell 1, infeasible.
        let scaled = solve_view(
            &view,
            &kernels,
            &SolveOptions::default(),
            None,
            SolveHooks::default(),
        );
        assert!(matches!(scaled, Err(SolveError::Infeasible { .. })));
        // Log domain: solves fine.
        let logged = solve_view(
            &view,
            &kernels,
            &SolveOptions {
                log_domain: true,
                tol: 1e-10,
                max_sweeps: 200,
                ..SolveOptions::default()
            },
            None,
            SolveHooks::default(),
        )
        .unwrap();
        assert!(logged.converged);
        assert!((logged.totals[1][1] - 0.5).abs() <= 1e-9);
    }

    #[test]
    fn infeasible_target_reports_sweep_time_and_cell() {
        let kernels = KernelSet::from_static(vec![SparseKernel::from_matrix(
            0,
            SparseMatrix::from_dense(2, &[1.0, 0.0, 0.0, 1.0]),
        )]);
        let total_costs = vec![
            MarginalCost::Free,
            MarginalCost::Fixed {
                target: vec![0.0, 1.0],
            },
        ];
        let species_costs = vec![
            vec![MarginalCost::Fixed {
                target: vec![1.0, 0.0],
            }],
            vec![MarginalCost::Free],
        ];
        let view = ProblemView {
            n: 2,
            num_species: 1,
            horizon: 1,
            epsilon: 1.0,
            dt_weight: 1.0,
            total_costs: &total_costs,
            species_costs: &species_costs,
        };
        let err = solve_view(
            &view,
            &kernels,
            &SolveOptions::default(),
            None,
            SolveHooks::default(),
        )
        .unwrap_err();
        match err {
            SolveError::Infeasible {
                sweep,
                time_index,
                species,
                cell,
            } => {
                assert_eq!(sweep, 1);
                assert_eq!(time_index, 1);
                assert_eq!(species, None);
                assert_eq!(cell, 1);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn zero_capacity_cells_carry_zero_marginal() {
        let kernels = KernelSet::from_static(vec![SparseKernel::from_matrix(
            0,
            SparseMatrix::from_dense(2, &[1.0; 4]),
        )]);
        let total_costs = vec![MarginalCost::Free, MarginalCost::Free];
        let species_costs = vec![
            vec![MarginalCost::Fixed {
                target: vec![0.5, 0.5],
            }],
            vec![MarginalCost::LinearWithCapacity {
                cost: vec![0.0, 0.0],
                capacity: vec![1.0, 0.0],
            }],
        ];
        let view = ProblemView {
            n: 2,
            num_species: 1,
            horizon: 1,
            epsilon: 1.0,
            dt_weight: 1.0,
            total_costs: &total_costs,
            species_costs: &species_costs,
        };
        let solution = solve_view(
            &view,
            &kernels,
            &SolveOptions {
                tol: 1e-10,
                ..SolveOptions::default()
            },
            None,
            SolveHooks::default(),
        )
        .unwrap();
        assert_eq!(solution.species_marginals[1][(0, 1)], 0.0);
        assert!(solution.species_marginals[1][(0, 0)] > 0.0);
    }
}
