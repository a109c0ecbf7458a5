//! Built-in search-and-rescue coverage scenario.
//!
//! Three robot types must cover a square map with a lake, a rough-terrain
//! region, and three start areas in the lower-left corner, at minimal cost:
//!
//! - species 1 moves on water and normal terrain (radius `sqrt(6) dx`,
//!   movement weight 400, deploy cost 0.2),
//! - species 2 moves on rough and normal terrain (radius `sqrt(6) dx`,
//!   weight 400, deploy cost 0.2),
//! - species 3 moves on normal terrain only (radius `3 dx`, weight 100,
//!   deploy cost 0.1).
//!
//! Each species carries total mass 10 spread uniformly over its own start
//! area. Running costs are a congestion barrier on the total density outside
//! the start areas plus the per-species deployment costs with capacity
//! bounds; the terminal constraint pins the total density to a uniform value
//! of total mass 10 on every non-start cell. Region boundaries are fixed
//! fractions of the domain rectangle (see the constants below), so the map
//! scales consistently with the grid resolution.

use std::collections::BTreeSet;

use super::{invalid, MarginalCost, Problem, ScenarioError, SpeciesSpec, Terrain, TerrainGrid};

/// Region rectangles as fractions `[x0, y0, x1, y1]` of the domain, with 0
/// at the min edge and 1 at the max edge. Intervals are half-open `[lo, hi)`
/// except that `hi == 1` includes the max edge. Start areas take precedence
/// over base terrain.
const WATER_REGION: [f64; 4] = [0.0, 0.6, 0.4, 1.0];
const ROUGH_REGION: [f64; 4] = [0.7, 0.2, 1.0, 1.0];
const START_REGIONS: [[f64; 4]; 3] = [
    [0.0, 0.0, 0.1, 0.1],
    [0.125, 0.0, 0.225, 0.1],
    [0.25, 0.0, 0.35, 0.1],
];

const ALPHAS: [f64; 3] = [400.0, 400.0, 100.0];
const DEPLOY_COSTS: [f64; 3] = [0.2, 0.2, 0.1];
const RADII_SQ: [u32; 3] = [6, 6, 9];
const SPECIES_MASS: f64 = 10.0;
const START_CAPACITY: f64 = 10.0;
const EPSILON: f64 = 0.2;

fn in_region(region: &[f64; 4], fx: f64, fy: f64) -> bool {
    let inside = |f: f64, lo: f64, hi: f64| f >= lo && (f < hi || (hi == 1.0 && f <= 1.0));
    inside(fx, region[0], region[2]) && inside(fy, region[1], region[3])
}

fn terrain_at(width: usize, height: usize, row: usize, col: usize) -> Terrain {
    let fx = if width > 1 {
        col as f64 / (width - 1) as f64
    } else {
        0.0
    };
    let fy = if height > 1 {
        row as f64 / (height - 1) as f64
    } else {
        0.0
    };
    for (s, region) in START_REGIONS.iter().enumerate() {
        if in_region(region, fx, fy) {
            return Terrain::Start(s);
        }
    }
    if in_region(&WATER_REGION, fx, fy) {
        Terrain::Water
    } else if in_region(&ROUGH_REGION, fx, fy) {
        Terrain::Rough
    } else {
        Terrain::Normal
    }
}

/// Generate the built-in coverage scenario on a `grid_side x grid_side` grid
/// with `horizon` time steps.
pub fn generate_example(grid_side: usize, horizon: usize) -> Result<Problem, ScenarioError> {
    if grid_side < 10 {
        return Err(invalid("grid_side", "must be at least 10"));
    }
    if horizon < 2 {
        return Err(invalid("horizon", "must be at least 2"));
    }

    let width = grid_side;
    let height = grid_side;
    let n = width * height;
    let cells: Vec<Terrain> = (0..n)
        .map(|i| terrain_at(width, height, i / width, i % width))
        .collect();
    let grid = TerrainGrid {
        width,
        height,
        bounds: [-1.0, -1.0, 1.0, 1.0],
        cells,
    };

    let allowed_sets: [BTreeSet<Terrain>; 3] = [
        BTreeSet::from([Terrain::Water, Terrain::Normal, Terrain::Start(0)]),
        BTreeSet::from([Terrain::Rough, Terrain::Normal, Terrain::Start(1)]),
        BTreeSet::from([Terrain::Normal, Terrain::Start(2)]),
    ];

    let mut species = Vec::with_capacity(3);
    for l in 0..3 {
        let allowed = allowed_sets[l].clone();
        let start_cells = grid.start_cells(l);
        assert!(
            !start_cells.is_empty(),
            "start region {} maps to no cells at side {}",
            l + 1,
            grid_side
        );
        let per_cell = SPECIES_MASS / start_cells.len() as f64;
        let mut initial = vec![0.0; n];
        for &i in &start_cells {
            initial[i] = per_cell;
        }
        let capacity: Vec<f64> = (0..n)
            .map(|i| {
                let t = grid.cells[i];
                if !allowed.contains(&t) {
                    0.0
                } else if t == Terrain::Start(l) {
                    START_CAPACITY
                } else {
                    1.0
                }
            })
            .collect();
        species.push(SpeciesSpec {
            allowed,
            radius_sq: RADII_SQ[l],
            alpha: ALPHAS[l],
            deploy_cost: DEPLOY_COSTS[l],
            capacity,
            initial_mass: SPECIES_MASS,
            initial,
        });
    }

    let non_start: Vec<bool> = (0..n).map(|i| !grid.is_start(i)).collect();
    let non_start_count = non_start.iter().filter(|&&m| m).count();
    let terminal_value = SPECIES_MASS / non_start_count as f64;
    let terminal_target: Vec<f64> = non_start
        .iter()
        .map(|&m| if m { terminal_value } else { 0.0 })
        .collect();

    let mut total_costs = Vec::with_capacity(horizon + 1);
    total_costs.push(MarginalCost::Free);
    for _ in 1..horizon {
        total_costs.push(MarginalCost::Congestion {
            mask: non_start.clone(),
        });
    }
    total_costs.push(MarginalCost::FixedOnSubset {
        target: terminal_target,
        mask: non_start,
    });

    let mut species_costs = Vec::with_capacity(horizon + 1);
    species_costs.push(
        species
            .iter()
            .map(|sp| MarginalCost::Fixed {
                target: sp.initial.clone(),
            })
            .collect::<Vec<_>>(),
    );
    for j in 1..=horizon {
        let row = species
            .iter()
            .enumerate()
            .map(|(l, sp)| {
                let cost = if j < horizon {
                    (0..n)
                        .map(|i| {
                            if grid.cells[i] == Terrain::Start(l) {
                                0.0
                            } else {
                                sp.deploy_cost
                            }
                        })
                        .collect()
                } else {
                    vec![0.0; n]
                };
                MarginalCost::LinearWithCapacity {
                    cost,
                    capacity: sp.capacity.clone(),
                }
            })
            .collect::<Vec<_>>();
        species_costs.push(row);
    }

    let problem = Problem {
        grid,
        species,
        horizon,
        epsilon: EPSILON,
        dt_weight: 1.0,
        total_costs,
        species_costs,
    };
    debug_assert!(problem.validate().is_ok());
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_dimensions() {
        let p = generate_example(100, 60).unwrap();
        assert_eq!(p.n(), 10000);
        assert_eq!(p.horizon, 60);
        assert_eq!(p.num_species(), 3);
        assert_eq!(p.epsilon, 0.2);
        assert_eq!(p.species[0].alpha, 400.0);
        assert_eq!(p.species[1].alpha, 400.0);
        assert_eq!(p.species[2].alpha, 100.0);
        assert_eq!(p.species[0].deploy_cost, 0.2);
        assert_eq!(p.species[1].deploy_cost, 0.2);
        assert_eq!(p.species[2].deploy_cost, 0.1);
        assert_eq!(p.species[0].radius_sq, 6);
        assert_eq!(p.species[2].radius_sq, 9);
        p.validate().unwrap();
    }

    #[test]
    fn terminal_target_is_mass_over_nonstart_count() {
        let p = generate_example(100, 60).unwrap();
        // Independent count of non-start cells straight off the map.
        let non_start = (0..p.n()).filter(|&i| !p.grid.is_start(i)).count();
        let expected = 10.0 / non_start as f64;
        match &p.total_costs[60] {
            MarginalCost::FixedOnSubset { target, mask } => {
                for i in 0..p.n() {
                    if mask[i] {
                        assert_eq!(target[i], expected);
                    } else {
                        assert_eq!(target[i], 0.0);
                    }
                }
                let masked = mask.iter().filter(|&&m| m).count();
                assert_eq!(masked, non_start);
            }
            other => panic!("terminal cost is {:?}", other.kind_name()),
        }
    }

    #[test]
    fn desk_scale_spacing() {
        let p = generate_example(30, 20).unwrap();
        assert_eq!(p.grid.dx(), 2.0 / 29.0);
        assert_eq!(p.grid.dy(), 2.0 / 29.0);
        p.validate().unwrap();
    }

    #[test]
    fn generated_scenarios_validate_across_sizes() {
        for side in [10, 16, 30, 64] {
            let p = generate_example(side, 8).unwrap();
            p.validate()
                .unwrap_or_else(|e| panic!("side {side}: {e}"));
            // Every species has a nonempty start area and mass 10.
            for (l, sp) in p.species.iter().enumerate() {
                let sum: f64 = sp.initial.iter().sum();
                assert!((sum - 10.0).abs() < 1e-12, "species {l} mass {sum}");
            }
        }
    }

    #[test]
    fn capacity_zero_exactly_on_disallowed_cells() {
        let p = generate_example(30, 8).unwrap();
        for sp in &p.species {
            for i in 0..p.n() {
                let allowed = sp.allows(p.grid.cells[i]);
                assert_eq!(sp.capacity[i] == 0.0, !allowed, "cell {i}");
            }
        }
    }

    #[test]
    fn below_minimum_arguments_rejected() {
        assert!(generate_example(9, 20).is_err());
        assert!(generate_example(30, 1).is_err());
    }

    #[test]
    fn start_areas_disjoint_and_in_lower_left() {
        let p = generate_example(30, 8).unwrap();
        let mut counts = [0usize; 3];
        for i in 0..p.n() {
            if let Terrain::Start(s) = p.grid.cells[i] {
                counts[s] += 1;
                let (row, col) = p.grid.row_col(i);
                assert!(row < 4 && col < 12, "start cell out of corner: ({row},{col})");
            }
        }
        assert!(counts.iter().all(|&c| c > 0));
    }
}
