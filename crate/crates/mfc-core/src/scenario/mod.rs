//! Problem data model and scenario documents.
//!
//! A [`Problem`] bundles a [`TerrainGrid`], one [`SpeciesSpec`] per species,
//! the entropic regularization, and one [`MarginalCost`] per time index for
//! the total marginal and for each species marginal. Problems can be built
//! programmatically, parsed from scenario documents ([`parse_scenario`]),
//! rendered back to text ([`render_scenario`]), or produced by the built-in
//! example generator ([`generate_example`]).
//!
//! Grid conventions: cells are indexed row-major, `i = row * width + col`,
//! where row 0 is the *bottom* row of the domain (smallest y). Cell centers
//! span the bounds rectangle exactly: the center of `(row, col)` is
//! `(x_min + col * dx, y_min + row * dy)` with `dx = (x_max - x_min) /
//! (width - 1)` (and the full extent when `width == 1`).

mod format;
mod generate;

use std::collections::BTreeSet;
use std::fmt;

pub use format::{parse_scenario, parse_scenario_with_base, render_scenario};
pub use generate::generate_example;

/// Terrain class of a single grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Terrain {
    Water,
    Rough,
    Normal,
    /// Start area of the species with this 0-based index.
    Start(usize),
}

impl fmt::Display for Terrain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terrain::Water => write!(f, "water"),
            Terrain::Rough => write!(f, "rough"),
            Terrain::Normal => write!(f, "normal"),
            Terrain::Start(s) => write!(f, "start:{}", s + 1),
        }
    }
}

/// Discretized state space: a rectangle of grid cells, each carrying one
/// terrain class.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainGrid {
    pub width: usize,
    pub height: usize,
    /// Domain rectangle `[x_min, y_min, x_max, y_max]` spanned by the cell
    /// centers.
    pub bounds: [f64; 4],
    /// Terrain per cell, row-major with row 0 at the bottom.
    pub cells: Vec<Terrain>,
}

impl TerrainGrid {
    /// Number of cells.
    pub fn n(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    pub fn row_col(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    /// Grid spacing along x. For a single-column grid this degenerates to the
    /// full x extent so that spacing stays positive.
    pub fn dx(&self) -> f64 {
        let extent = self.bounds[2] - self.bounds[0];
        if self.width > 1 {
            extent / (self.width - 1) as f64
        } else {
            extent
        }
    }

    /// Grid spacing along y; see [`TerrainGrid::dx`].
    pub fn dy(&self) -> f64 {
        let extent = self.bounds[3] - self.bounds[1];
        if self.height > 1 {
            extent / (self.height - 1) as f64
        } else {
            extent
        }
    }

    /// Domain coordinates of the center of cell `i`.
    pub fn center(&self, i: usize) -> (f64, f64) {
        let (row, col) = self.row_col(i);
        (
            self.bounds[0] + col as f64 * self.dx(),
            self.bounds[1] + row as f64 * self.dy(),
        )
    }

    pub fn terrain(&self, i: usize) -> Terrain {
        self.cells[i]
    }

    /// True if the cell belongs to any species' start area.
    pub fn is_start(&self, i: usize) -> bool {
        matches!(self.cells[i], Terrain::Start(_))
    }

    /// Cells forming the start area of the given species (0-based).
    pub fn start_cells(&self, species: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.cells[i] == Terrain::Start(species))
            .collect()
    }
}

/// One agent class: movement range and cost, terrain restrictions, per-cell
/// capacity, and initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesSpec {
    /// Terrain classes this species may occupy (and cross). Must contain the
    /// species' own start class and no other start class.
    pub allowed: BTreeSet<Terrain>,
    /// Squared movement radius, in units of the squared grid spacing.
    pub radius_sq: u32,
    /// Movement cost weight.
    pub alpha: f64,
    /// Per-step cost of being deployed outside the species' own start area.
    pub deploy_cost: f64,
    /// Per-cell capacity bound on the species marginal.
    pub capacity: Vec<f64>,
    /// Total initial mass.
    pub initial_mass: f64,
    /// Per-cell initial density; sums to `initial_mass`.
    pub initial: Vec<f64>,
}

impl SpeciesSpec {
    /// True if the species may occupy cells of the given terrain.
    pub fn allows(&self, terrain: Terrain) -> bool {
        self.allowed.contains(&terrain)
    }
}

/// Cost (or constraint) attached to one marginal of the mass tensor.
///
/// Each variant determines the scaling update rule of the generalized
/// Sinkhorn iteration at its time index; see the `updates` module.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginalCost {
    /// No cost: the scaling stays at one.
    Free,
    /// Equality constraint: the marginal must equal `target`.
    Fixed { target: Vec<f64> },
    /// Equality constraint on the masked cells only; unmasked cells are free.
    FixedOnSubset { target: Vec<f64>, mask: Vec<bool> },
    /// Linear cost `<cost, mu>` plus the bound `mu <= capacity`.
    LinearWithCapacity { cost: Vec<f64>, capacity: Vec<f64> },
    /// Congestion barrier `x / (1 - x)` on the masked cells, forcing the
    /// marginal strictly below one there.
    Congestion { mask: Vec<bool> },
}

impl MarginalCost {
    /// True for the equality-constraint variants, whose violation is measured
    /// by the solver's residual.
    pub fn is_equality(&self) -> bool {
        matches!(
            self,
            MarginalCost::Fixed { .. } | MarginalCost::FixedOnSubset { .. }
        )
    }

    fn kind_name(&self) -> &'static str {
        match self {
            MarginalCost::Free => "free",
            MarginalCost::Fixed { .. } => "fixed",
            MarginalCost::FixedOnSubset { .. } => "fixed_on_subset",
            MarginalCost::LinearWithCapacity { .. } => "linear_capacity",
            MarginalCost::Congestion { .. } => "congestion",
        }
    }
}

/// A complete problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub grid: TerrainGrid,
    pub species: Vec<SpeciesSpec>,
    /// Number of time steps `T`; marginals carry indices `0..=T`.
    pub horizon: usize,
    /// Entropic regularization, strictly positive.
    pub epsilon: f64,
    /// Weight on running costs (indices `1..=T-1`); terminal costs are
    /// unweighted. Defaults to 1.
    pub dt_weight: f64,
    /// Cost on the total marginal per time index, `horizon + 1` entries.
    /// Index 0 must be `Free` (the initial total marginal is already pinned
    /// by the species constraints).
    pub total_costs: Vec<MarginalCost>,
    /// Cost per time index and species, `horizon + 1` rows of `L` entries.
    /// Index 0 must be `Fixed` with each species' initial density.
    pub species_costs: Vec<Vec<MarginalCost>>,
}

/// Error raised by scenario parsing or validation.
#[derive(Debug)]
pub enum ScenarioError {
    /// Malformed document.
    Syntax { line: usize, msg: String },
    /// Structurally well-formed but invalid data. `cell` is `(row, col)`
    /// when the offense is tied to a grid cell.
    Validation {
        field: String,
        cell: Option<(usize, usize)>,
        msg: String,
    },
    Io(std::io::Error),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Syntax { line, msg } => {
                write!(f, "syntax error at line {line}: {msg}")
            }
            ScenarioError::Validation { field, cell, msg } => {
                write!(f, "invalid `{field}`")?;
                if let Some((r, c)) = cell {
                    write!(f, " at cell ({r}, {c})")?;
                }
                write!(f, ": {msg}")
            }
            ScenarioError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

impl From<std::io::Error> for ScenarioError {
    fn from(e: std::io::Error) -> Self {
        ScenarioError::Io(e)
    }
}

fn invalid(field: &str, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.to_string(),
        cell: None,
        msg: msg.into(),
    }
}

fn invalid_at(field: &str, cell: (usize, usize), msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.to_string(),
        cell: Some(cell),
        msg: msg.into(),
    }
}

impl Problem {
    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn num_species(&self) -> usize {
        self.species.len()
    }

    /// Weight applied to the cost at time index `j`: `dt_weight` on running
    /// indices, 1 on the terminal index.
    pub fn cost_weight(&self, j: usize) -> f64 {
        if j >= 1 && j < self.horizon {
            self.dt_weight
        } else {
            1.0
        }
    }

    /// Check every structural invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let grid = &self.grid;
        let n = grid.n();
        if grid.width == 0 || grid.height == 0 {
            return Err(invalid("grid", "width and height must be positive"));
        }
        if grid.cells.len() != n {
            return Err(invalid(
                "grid.terrain",
                format!("expected {} cells, got {}", n, grid.cells.len()),
            ));
        }
        if !(grid.bounds[2] > grid.bounds[0] && grid.bounds[3] > grid.bounds[1]) {
            return Err(invalid("grid.bounds", "domain rectangle must be nonempty"));
        }
        if !(grid.dx() > 0.0 && grid.dy() > 0.0) {
            return Err(invalid("grid.bounds", "grid spacing must be positive"));
        }
        let num_species = self.species.len();
        if num_species == 0 {
            return Err(invalid("species", "at least one species required"));
        }
        for i in 0..n {
            if let Terrain::Start(s) = grid.cells[i] {
                if s >= num_species {
                    return Err(invalid_at(
                        "grid.terrain",
                        grid.row_col(i),
                        format!("start area for undeclared species {}", s + 1),
                    ));
                }
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("solver.epsilon", "must be positive and finite"));
        }
        if self.horizon < 1 {
            return Err(invalid("solver.horizon", "must be at least 1"));
        }
        if !(self.dt_weight > 0.0 && self.dt_weight.is_finite()) {
            return Err(invalid("solver.dt_weight", "must be positive and finite"));
        }

        for (l, sp) in self.species.iter().enumerate() {
            let field = |name: &str| format!("species {}.{}", l + 1, name);
            for t in &sp.allowed {
                if let Terrain::Start(s) = t {
                    if *s != l {
                        return Err(invalid(
                            &field("allowed"),
                            format!("may not claim the start area of species {}", s + 1),
                        ));
                    }
                }
            }
            if !sp.allowed.contains(&Terrain::Start(l)) {
                return Err(invalid(
                    &field("allowed"),
                    "must include the species' own start class",
                ));
            }
            if !(sp.alpha > 0.0 && sp.alpha.is_finite()) {
                return Err(invalid(&field("alpha"), "must be positive and finite"));
            }
            if !(sp.deploy_cost >= 0.0 && sp.deploy_cost.is_finite()) {
                return Err(invalid(&field("deploy_cost"), "must be nonnegative"));
            }
            if !(sp.initial_mass > 0.0 && sp.initial_mass.is_finite()) {
                return Err(invalid(&field("initial_mass"), "must be positive"));
            }
            if sp.capacity.len() != n {
                return Err(invalid(&field("capacity"), "length must equal cell count"));
            }
            if sp.initial.len() != n {
                return Err(invalid(&field("initial"), "length must equal cell count"));
            }
            let mut sum = 0.0;
            for i in 0..n {
                let cell = grid.row_col(i);
                let kappa = sp.capacity[i];
                if !(kappa >= 0.0) {
                    return Err(invalid_at(&field("capacity"), cell, "must be nonnegative"));
                }
                if !sp.allows(grid.cells[i]) && kappa != 0.0 {
                    return Err(invalid_at(
                        &field("capacity"),
                        cell,
                        format!("must be zero on disallowed terrain `{}`", grid.cells[i]),
                    ));
                }
                let m = sp.initial[i];
                if !(m >= 0.0 && m.is_finite()) {
                    return Err(invalid_at(&field("initial"), cell, "must be nonnegative"));
                }
                if m > 0.0 && !sp.allows(grid.cells[i]) {
                    return Err(invalid_at(
                        &field("initial"),
                        cell,
                        format!("mass placed on disallowed terrain `{}`", grid.cells[i]),
                    ));
                }
                sum += m;
            }
            if (sum - sp.initial_mass).abs() > 1e-12 * sp.initial_mass.max(1.0) {
                return Err(invalid(
                    &field("initial"),
                    format!("sums to {} but initial_mass is {}", sum, sp.initial_mass),
                ));
            }
        }

        if self.total_costs.len() != self.horizon + 1 {
            return Err(invalid(
                "costs.total",
                format!(
                    "expected {} entries (time 0..={}), got {}",
                    self.horizon + 1,
                    self.horizon,
                    self.total_costs.len()
                ),
            ));
        }
        if self.species_costs.len() != self.horizon + 1 {
            return Err(invalid(
                "costs.species",
                format!("expected {} time entries", self.horizon + 1),
            ));
        }
        if self.total_costs[0] != MarginalCost::Free {
            return Err(invalid(
                "costs.total",
                "time index 0 must be free (the initial total marginal carries no scaling)",
            ));
        }
        for (j, cost) in self.total_costs.iter().enumerate() {
            self.validate_cost(cost, &format!("costs.total[{j}]"), None)?;
        }
        for (j, row) in self.species_costs.iter().enumerate() {
            if row.len() != num_species {
                return Err(invalid(
                    &format!("costs.species[{j}]"),
                    "one cost required per species",
                ));
            }
            for (l, cost) in row.iter().enumerate() {
                let field = format!("costs.species {}[{}]", l + 1, j);
                if j == 0 {
                    match cost {
                        MarginalCost::Fixed { target } if *target == self.species[l].initial => {}
                        _ => {
                            return Err(invalid(
                                &field,
                                "time index 0 must fix the species' initial density",
                            ));
                        }
                    }
                }
                self.validate_cost(cost, &field, Some(l))?;
            }
        }
        Ok(())
    }

    fn validate_cost(
        &self,
        cost: &MarginalCost,
        field: &str,
        _species: Option<usize>,
    ) -> Result<(), ScenarioError> {
        let n = self.grid.n();
        let check_len = |len: usize, what: &str| {
            if len != n {
                Err(invalid(
                    field,
                    format!("{what} length {len} does not match cell count {n}"),
                ))
            } else {
                Ok(())
            }
        };
        let check_nonneg = |v: &[f64], what: &str| {
            for (i, &x) in v.iter().enumerate() {
                if !(x >= 0.0) || !x.is_finite() {
                    return Err(invalid_at(
                        field,
                        self.grid.row_col(i),
                        format!("{what} must be nonnegative and finite"),
                    ));
                }
            }
            Ok(())
        };
        match cost {
            MarginalCost::Free => {}
            MarginalCost::Fixed { target } => {
                check_len(target.len(), "target")?;
                check_nonneg(target, "target")?;
            }
            MarginalCost::FixedOnSubset { target, mask } => {
                check_len(target.len(), "target")?;
                check_len(mask.len(), "mask")?;
                check_nonneg(target, "target")?;
            }
            MarginalCost::LinearWithCapacity { cost, capacity } => {
                check_len(cost.len(), "cost")?;
                check_len(capacity.len(), "capacity")?;
                for (i, &x) in cost.iter().enumerate() {
                    if !x.is_finite() {
                        return Err(invalid_at(field, self.grid.row_col(i), "cost must be finite"));
                    }
                }
                for (i, &x) in capacity.iter().enumerate() {
                    if !(x >= 0.0) {
                        return Err(invalid_at(
                            field,
                            self.grid.row_col(i),
                            "capacity must be nonnegative",
                        ));
                    }
                }
            }
            MarginalCost::Congestion { mask } => {
                check_len(mask.len(), "mask")?;
                for (i, &m) in mask.iter().enumerate() {
                    if m && self.grid.is_start(i) {
                        return Err(invalid_at(
                            field,
                            self.grid.row_col(i),
                            "congestion mask must exclude start areas",
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
