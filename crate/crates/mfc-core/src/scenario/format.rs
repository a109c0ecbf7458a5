//! Scenario document format.
//!
//! A scenario is a single text file. `#` starts a comment, blank lines are
//! ignored. The first significant line must be the header `mfc-scenario v1`.
//! Sections:
//!
//! ```text
//! [grid]
//! width = 30
//! height = 30
//! bounds = -1 -1 1 1            # x_min y_min x_max y_max, optional
//! terrain = inline              # `height` rows follow, TOP row first
//! nnn...                        # chars: w r n, digits 1..9 for start areas
//!
//! [solver]
//! epsilon = 0.2
//! horizon = 20
//! dt_weight = 1                 # optional, weight on running costs
//!
//! [species 1]
//! allowed = water normal start:1
//! radius_sq = 6
//! alpha = 400
//! deploy_cost = 0.2
//! initial_mass = 10
//! initial = uniform_start       # or: inline | const V | csv PATH
//! capacity = const 1            # or: inline | csv PATH
//!
//! [cost total 1..19]            # index, inclusive range `a..b`, or `default`
//! kind = congestion
//! mask = non_start              # or: all | inline | csv PATH
//!
//! [cost species 1 1..19]
//! kind = linear_capacity
//! cost = deploy                 # or: const V | inline | csv PATH
//! capacity = species_capacity
//! ```
//!
//! Cost kinds: `free`, `fixed` (`target`), `fixed_on_subset` (`target`,
//! `mask`), `linear_capacity` (`cost`, `capacity`), `congestion` (`mask`).
//! Time index 0 is reserved: the total marginal at 0 is always free and each
//! species marginal at 0 is fixed to the species' initial density. Explicit
//! cost sections must not overlap; indices not covered by any section take
//! the `default` section of their group, or `free`.
//!
//! All per-cell data (inline blocks and referenced CSV files) is laid out
//! one grid row per line with the TOP row (largest y) first. Inline numeric
//! rows are whitespace-separated; CSV rows may use commas or whitespace.
//! Masks are rows of contiguous `0`/`1` characters.

use std::collections::BTreeSet;
use std::path::Path;

use super::{
    MarginalCost, Problem, ScenarioError, SpeciesSpec, Terrain, TerrainGrid,
};

const HEADER: &str = "mfc-scenario v1";

/// Parse a scenario document. CSV references are resolved relative to the
/// current directory; use [`parse_scenario_with_base`] to anchor them.
pub fn parse_scenario(text: &str) -> Result<Problem, ScenarioError> {
    parse_scenario_with_base(text, Path::new("."))
}

/// Parse a scenario document, resolving referenced files against `base`.
pub fn parse_scenario_with_base(text: &str, base: &Path) -> Result<Problem, ScenarioError> {
    let sections = tokenize(text)?;
    build_problem(sections, base)
}

fn syntax(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Syntax {
        line,
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

struct Entry {
    key: String,
    value: String,
    line: usize,
    rows: Vec<String>,
}

struct Section {
    name: String,
    args: Vec<String>,
    line: usize,
    entries: Vec<Entry>,
}

impl Section {
    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn require(&self, key: &str) -> Result<&Entry, ScenarioError> {
        self.get(key).ok_or_else(|| {
            syntax(
                self.line,
                format!("section [{}] is missing `{key}`", self.name),
            )
        })
    }
}

fn tokenize(text: &str) -> Result<Vec<Section>, ScenarioError> {
    let mut sections: Vec<Section> = Vec::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != HEADER {
                return Err(syntax(lineno, format!("expected header `{HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| syntax(lineno, "unterminated section header"))?;
            let mut parts = inner.split_whitespace().map(str::to_string);
            let name = parts
                .next()
                .ok_or_else(|| syntax(lineno, "empty section header"))?;
            sections.push(Section {
                name,
                args: parts.collect(),
                line: lineno,
                entries: Vec::new(),
            });
        } else if let Some(eq) = line.find('=') {
            let section = sections
                .last_mut()
                .ok_or_else(|| syntax(lineno, "key outside any section"))?;
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(syntax(lineno, "malformed `key = value` line"));
            }
            section.entries.push(Entry {
                key,
                value,
                line: lineno,
                rows: Vec::new(),
            });
        } else {
            // A data row belonging to the most recent `... = inline` entry.
            let entry = sections
                .last_mut()
                .and_then(|s| s.entries.last_mut())
                .filter(|e| e.value == "inline")
                .ok_or_else(|| syntax(lineno, "data row without a preceding `= inline`"))?;
            entry.rows.push(line.to_string());
        }
    }
    if !saw_header {
        return Err(syntax(1, format!("expected header `{HEADER}`")));
    }
    Ok(sections)
}

// ---------------------------------------------------------------------------
// Interpretation
// ---------------------------------------------------------------------------

fn parse_f64(s: &str, line: usize, what: &str) -> Result<f64, ScenarioError> {
    s.parse::<f64>()
        .map_err(|_| syntax(line, format!("cannot parse {what} `{s}` as a number")))
}

fn parse_usize(s: &str, line: usize, what: &str) -> Result<usize, ScenarioError> {
    s.parse::<usize>()
        .map_err(|_| syntax(line, format!("cannot parse {what} `{s}` as an integer")))
}

/// Read an inline or referenced block of `height` numeric rows into a
/// bottom-up row-major vector.
fn numeric_rows(
    rows: &[String],
    width: usize,
    height: usize,
    line: usize,
    what: &str,
) -> Result<Vec<f64>, ScenarioError> {
    if rows.len() != height {
        return Err(syntax(
            line,
            format!("{what}: expected {height} rows, got {}", rows.len()),
        ));
    }
    let mut out = vec![0.0; width * height];
    for (k, row) in rows.iter().enumerate() {
        let grid_row = height - 1 - k; // top row first in the document
        let values: Vec<&str> = row
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if values.len() != width {
            return Err(syntax(
                line,
                format!("{what}: row {k} has {} values, expected {width}", values.len()),
            ));
        }
        for (col, v) in values.iter().enumerate() {
            out[grid_row * width + col] = parse_f64(v, line, what)?;
        }
    }
    Ok(out)
}

fn mask_rows(
    rows: &[String],
    width: usize,
    height: usize,
    line: usize,
    what: &str,
) -> Result<Vec<bool>, ScenarioError> {
    if rows.len() != height {
        return Err(syntax(
            line,
            format!("{what}: expected {height} rows, got {}", rows.len()),
        ));
    }
    let mut out = vec![false; width * height];
    for (k, row) in rows.iter().enumerate() {
        let grid_row = height - 1 - k;
        let chars: Vec<char> = row.chars().filter(|c| !c.is_whitespace()).collect();
        if chars.len() != width {
            return Err(syntax(
                line,
                format!("{what}: row {k} has {} cells, expected {width}", chars.len()),
            ));
        }
        for (col, &c) in chars.iter().enumerate() {
            out[grid_row * width + col] = match c {
                '0' => false,
                '1' => true,
                other => {
                    return Err(syntax(line, format!("{what}: invalid mask char `{other}`")))
                }
            };
        }
    }
    Ok(out)
}

fn read_file_rows(path: &str, base: &Path, line: usize) -> Result<Vec<String>, ScenarioError> {
    let full = base.join(path);
    let text = std::fs::read_to_string(&full).map_err(|e| {
        syntax(line, format!("cannot read `{}`: {e}", full.display()))
    })?;
    Ok(text
        .lines()
        .map(|l| match l.find('#') {
            Some(pos) => l[..pos].trim().to_string(),
            None => l.trim().to_string(),
        })
        .filter(|l| !l.is_empty())
        .collect())
}

/// Context for resolving vector/mask forms that reference species fields.
struct SpeciesCtx<'a> {
    species_index: usize,
    deploy_cost: f64,
    capacity: &'a [f64],
}

fn resolve_vector(
    entry: &Entry,
    grid: &TerrainGrid,
    base: &Path,
    ctx: Option<&SpeciesCtx>,
    what: &str,
) -> Result<Vec<f64>, ScenarioError> {
    let (w, h, n) = (grid.width, grid.height, grid.n());
    let mut parts = entry.value.split_whitespace();
    let form = parts.next().unwrap_or("");
    match form {
        "inline" => numeric_rows(&entry.rows, w, h, entry.line, what),
        "const" => {
            let v = parse_f64(parts.next().unwrap_or(""), entry.line, what)?;
            Ok(vec![v; n])
        }
        "csv" => {
            let path = parts
                .next()
                .ok_or_else(|| syntax(entry.line, format!("{what}: csv needs a path")))?;
            let rows = read_file_rows(path, base, entry.line)?;
            numeric_rows(&rows, w, h, entry.line, what)
        }
        "deploy" => {
            let ctx = ctx.ok_or_else(|| {
                syntax(entry.line, format!("{what}: `deploy` only valid in species costs"))
            })?;
            Ok((0..n)
                .map(|i| {
                    if grid.cells[i] == Terrain::Start(ctx.species_index) {
                        0.0
                    } else {
                        ctx.deploy_cost
                    }
                })
                .collect())
        }
        "species_capacity" => {
            let ctx = ctx.ok_or_else(|| {
                syntax(
                    entry.line,
                    format!("{what}: `species_capacity` only valid in species costs"),
                )
            })?;
            Ok(ctx.capacity.to_vec())
        }
        other => Err(syntax(
            entry.line,
            format!("{what}: unknown vector form `{other}`"),
        )),
    }
}

fn resolve_mask(
    entry: &Entry,
    grid: &TerrainGrid,
    base: &Path,
    what: &str,
) -> Result<Vec<bool>, ScenarioError> {
    let (w, h, n) = (grid.width, grid.height, grid.n());
    let mut parts = entry.value.split_whitespace();
    let form = parts.next().unwrap_or("");
    match form {
        "inline" => mask_rows(&entry.rows, w, h, entry.line, what),
        "all" => Ok(vec![true; n]),
        "non_start" => Ok((0..n).map(|i| !grid.is_start(i)).collect()),
        "csv" => {
            let path = parts
                .next()
                .ok_or_else(|| syntax(entry.line, format!("{what}: csv needs a path")))?;
            let rows = read_file_rows(path, base, entry.line)?;
            let nums = numeric_rows(&rows, w, h, entry.line, what)?;
            Ok(nums.iter().map(|&v| v != 0.0).collect())
        }
        other => Err(syntax(
            entry.line,
            format!("{what}: unknown mask form `{other}`"),
        )),
    }
}

fn parse_terrain_token(token: &str, line: usize) -> Result<Terrain, ScenarioError> {
    match token {
        "water" => Ok(Terrain::Water),
        "rough" => Ok(Terrain::Rough),
        "normal" => Ok(Terrain::Normal),
        _ => {
            if let Some(id) = token.strip_prefix("start:") {
                let id = parse_usize(id, line, "start species id")?;
                if id == 0 {
                    return Err(syntax(line, "species ids are 1-based"));
                }
                Ok(Terrain::Start(id - 1))
            } else {
                Err(syntax(line, format!("unknown terrain class `{token}`")))
            }
        }
    }
}

/// Time range covered by a cost section.
#[derive(Debug, Clone, Copy, PartialEq)]
enum TimeRange {
    Default,
    Span(usize, usize),
}

fn parse_range(token: &str, line: usize) -> Result<TimeRange, ScenarioError> {
    if token == "default" {
        return Ok(TimeRange::Default);
    }
    if let Some((a, b)) = token.split_once("..") {
        let a = parse_usize(a, line, "range start")?;
        let b = parse_usize(b, line, "range end")?;
        if a > b {
            return Err(syntax(line, format!("empty range `{token}`")));
        }
        Ok(TimeRange::Span(a, b))
    } else {
        let j = parse_usize(token, line, "time index")?;
        Ok(TimeRange::Span(j, j))
    }
}

fn build_cost(
    section: &Section,
    grid: &TerrainGrid,
    base: &Path,
    ctx: Option<&SpeciesCtx>,
) -> Result<MarginalCost, ScenarioError> {
    let kind = section.require("kind")?;
    match kind.value.as_str() {
        "free" => Ok(MarginalCost::Free),
        "fixed" => {
            let target = resolve_vector(section.require("target")?, grid, base, ctx, "target")?;
            Ok(MarginalCost::Fixed { target })
        }
        "fixed_on_subset" => {
            let target = resolve_vector(section.require("target")?, grid, base, ctx, "target")?;
            let mask = resolve_mask(section.require("mask")?, grid, base, "mask")?;
            Ok(MarginalCost::FixedOnSubset { target, mask })
        }
        "linear_capacity" => {
            let cost = resolve_vector(section.require("cost")?, grid, base, ctx, "cost")?;
            let capacity =
                resolve_vector(section.require("capacity")?, grid, base, ctx, "capacity")?;
            Ok(MarginalCost::LinearWithCapacity { cost, capacity })
        }
        "congestion" => {
            let mask = resolve_mask(section.require("mask")?, grid, base, "mask")?;
            Ok(MarginalCost::Congestion { mask })
        }
        other => Err(syntax(kind.line, format!("unknown cost kind `{other}`"))),
    }
}

fn build_problem(sections: Vec<Section>, base: &Path) -> Result<Problem, ScenarioError> {
    // Grid first: everything else needs its dimensions.
    let grid_section = sections
        .iter()
        .find(|s| s.name == "grid")
        .ok_or_else(|| syntax(1, "missing [grid] section"))?;
    let width_e = grid_section.require("width")?;
    let width = parse_usize(&width_e.value, width_e.line, "width")?;
    let height_e = grid_section.require("height")?;
    let height = parse_usize(&height_e.value, height_e.line, "height")?;
    if width == 0 || height == 0 {
        return Err(syntax(grid_section.line, "grid dimensions must be positive"));
    }
    let bounds = match grid_section.get("bounds") {
        Some(e) => {
            let vals: Vec<&str> = e.value.split_whitespace().collect();
            if vals.len() != 4 {
                return Err(syntax(e.line, "bounds needs four numbers"));
            }
            let mut b = [0.0; 4];
            for (k, v) in vals.iter().enumerate() {
                b[k] = parse_f64(v, e.line, "bounds")?;
            }
            b
        }
        None => [-1.0, -1.0, 1.0, 1.0],
    };
    let terrain_e = grid_section.require("terrain")?;
    if terrain_e.value != "inline" {
        return Err(syntax(terrain_e.line, "terrain must be `inline`"));
    }
    if terrain_e.rows.len() != height {
        return Err(syntax(
            terrain_e.line,
            format!("terrain: expected {height} rows, got {}", terrain_e.rows.len()),
        ));
    }
    let mut cells = vec![Terrain::Normal; width * height];
    for (k, row) in terrain_e.rows.iter().enumerate() {
        let grid_row = height - 1 - k;
        let chars: Vec<char> = row.chars().filter(|c| !c.is_whitespace()).collect();
        if chars.len() != width {
            return Err(syntax(
                terrain_e.line,
                format!("terrain row {k} has {} cells, expected {width}", chars.len()),
            ));
        }
        for (col, &c) in chars.iter().enumerate() {
            cells[grid_row * width + col] = match c {
                'w' => Terrain::Water,
                'r' => Terrain::Rough,
                'n' => Terrain::Normal,
                '1'..='9' => Terrain::Start(c as usize - '1' as usize),
                other => {
                    return Err(syntax(
                        terrain_e.line,
                        format!("unknown terrain char `{other}` in row {k}, column {col}"),
                    ))
                }
            };
        }
    }
    let grid = TerrainGrid {
        width,
        height,
        bounds,
        cells,
    };

    // Solver parameters.
    let solver_section = sections
        .iter()
        .find(|s| s.name == "solver")
        .ok_or_else(|| syntax(1, "missing [solver] section"))?;
    let eps_e = solver_section.require("epsilon")?;
    let epsilon = parse_f64(&eps_e.value, eps_e.line, "epsilon")?;
    let hor_e = solver_section.require("horizon")?;
    let horizon = parse_usize(&hor_e.value, hor_e.line, "horizon")?;
    let dt_weight = match solver_section.get("dt_weight") {
        Some(e) => parse_f64(&e.value, e.line, "dt_weight")?,
        None => 1.0,
    };

    // Species, in id order, ids must form 1..=L.
    let mut species_sections: Vec<(usize, &Section)> = Vec::new();
    for s in sections.iter().filter(|s| s.name == "species") {
        let id_str = s
            .args
            .first()
            .ok_or_else(|| syntax(s.line, "species section needs an id"))?;
        let id = parse_usize(id_str, s.line, "species id")?;
        if id == 0 {
            return Err(syntax(s.line, "species ids are 1-based"));
        }
        species_sections.push((id - 1, s));
    }
    species_sections.sort_by_key(|(id, _)| *id);
    let num_species = species_sections.len();
    for (k, (id, s)) in species_sections.iter().enumerate() {
        if *id != k {
            return Err(syntax(
                s.line,
                format!("species ids must form 1..{num_species} without gaps"),
            ));
        }
    }
    if num_species == 0 {
        return Err(syntax(1, "at least one [species N] section required"));
    }

    let mut species: Vec<SpeciesSpec> = Vec::with_capacity(num_species);
    for (l, s) in &species_sections {
        let allowed_e = s.require("allowed")?;
        let mut allowed = BTreeSet::new();
        for token in allowed_e.value.split_whitespace() {
            allowed.insert(parse_terrain_token(token, allowed_e.line)?);
        }
        let radius_e = s.require("radius_sq")?;
        let radius_sq = parse_usize(&radius_e.value, radius_e.line, "radius_sq")? as u32;
        let alpha_e = s.require("alpha")?;
        let alpha = parse_f64(&alpha_e.value, alpha_e.line, "alpha")?;
        let deploy_e = s.require("deploy_cost")?;
        let deploy_cost = parse_f64(&deploy_e.value, deploy_e.line, "deploy_cost")?;
        let mass_e = s.require("initial_mass")?;
        let initial_mass = parse_f64(&mass_e.value, mass_e.line, "initial_mass")?;

        let capacity = resolve_vector(s.require("capacity")?, &grid, base, None, "capacity")?;

        let initial_e = s.require("initial")?;
        let initial = if initial_e.value == "uniform_start" {
            let cells = grid.start_cells(*l);
            if cells.is_empty() {
                return Err(syntax(
                    initial_e.line,
                    format!("species {} has no start cells on the grid", l + 1),
                ));
            }
            let per_cell = initial_mass / cells.len() as f64;
            let mut v = vec![0.0; grid.n()];
            for &i in &cells {
                v[i] = per_cell;
            }
            v
        } else {
            resolve_vector(initial_e, &grid, base, None, "initial")?
        };

        species.push(SpeciesSpec {
            allowed,
            radius_sq,
            alpha,
            deploy_cost,
            capacity,
            initial_mass,
            initial,
        });
    }

    // Costs: default is Free everywhere; index 0 is reserved.
    let mut total_costs: Vec<Option<MarginalCost>> = vec![None; horizon + 1];
    let mut total_default: Option<MarginalCost> = None;
    let mut species_costs: Vec<Vec<Option<MarginalCost>>> =
        vec![vec![None; num_species]; horizon + 1];
    let mut species_default: Vec<Option<MarginalCost>> = vec![None; num_species];

    for s in sections.iter().filter(|s| s.name == "cost") {
        let kind = s
            .args
            .first()
            .map(String::as_str)
            .ok_or_else(|| syntax(s.line, "cost section needs `total` or `species N`"))?;
        match kind {
            "total" => {
                let range_tok = s
                    .args
                    .get(1)
                    .ok_or_else(|| syntax(s.line, "cost section needs a time range"))?;
                let range = parse_range(range_tok, s.line)?;
                let cost = build_cost(s, &grid, base, None)?;
                match range {
                    TimeRange::Default => {
                        if total_default.replace(cost).is_some() {
                            return Err(syntax(s.line, "duplicate [cost total default]"));
                        }
                    }
                    TimeRange::Span(a, b) => {
                        if a == 0 {
                            return Err(syntax(s.line, "time index 0 is reserved"));
                        }
                        if b > horizon {
                            return Err(syntax(s.line, format!("time index {b} beyond horizon")));
                        }
                        for j in a..=b {
                            if total_costs[j].replace(cost.clone()).is_some() {
                                return Err(syntax(
                                    s.line,
                                    format!("total cost at time {j} declared twice"),
                                ));
                            }
                        }
                    }
                }
            }
            "species" => {
                let id_tok = s
                    .args
                    .get(1)
                    .ok_or_else(|| syntax(s.line, "species cost needs an id"))?;
                let id = parse_usize(id_tok, s.line, "species id")?;
                if id == 0 || id > num_species {
                    return Err(syntax(s.line, format!("unknown species id {id}")));
                }
                let l = id - 1;
                let range_tok = s
                    .args
                    .get(2)
                    .ok_or_else(|| syntax(s.line, "cost section needs a time range"))?;
                let range = parse_range(range_tok, s.line)?;
                let ctx = SpeciesCtx {
                    species_index: l,
                    deploy_cost: species[l].deploy_cost,
                    capacity: &species[l].capacity,
                };
                let cost = build_cost(s, &grid, base, Some(&ctx))?;
                match range {
                    TimeRange::Default => {
                        if species_default[l].replace(cost).is_some() {
                            return Err(syntax(s.line, "duplicate species default cost"));
                        }
                    }
                    TimeRange::Span(a, b) => {
                        if a == 0 {
                            return Err(syntax(s.line, "time index 0 is reserved"));
                        }
                        if b > horizon {
                            return Err(syntax(s.line, format!("time index {b} beyond horizon")));
                        }
                        for j in a..=b {
                            if species_costs[j][l].replace(cost.clone()).is_some() {
                                return Err(syntax(
                                    s.line,
                                    format!("species {id} cost at time {j} declared twice"),
                                ));
                            }
                        }
                    }
                }
            }
            other => return Err(syntax(s.line, format!("unknown cost group `{other}`"))),
        }
    }

    let total_costs: Vec<MarginalCost> = total_costs
        .into_iter()
        .enumerate()
        .map(|(j, c)| match c {
            Some(c) => c,
            None if j == 0 => MarginalCost::Free,
            None => total_default.clone().unwrap_or(MarginalCost::Free),
        })
        .collect();
    let species_costs: Vec<Vec<MarginalCost>> = species_costs
        .into_iter()
        .enumerate()
        .map(|(j, row)| {
            row.into_iter()
                .enumerate()
                .map(|(l, c)| match c {
                    Some(c) => c,
                    None if j == 0 => MarginalCost::Fixed {
                        target: species[l].initial.clone(),
                    },
                    None => species_default[l].clone().unwrap_or(MarginalCost::Free),
                })
                .collect()
        })
        .collect();

    let problem = Problem {
        grid,
        species,
        horizon,
        epsilon,
        dt_weight,
        total_costs,
        species_costs,
    };
    problem.validate()?;
    Ok(problem)
}

// ---------------------------------------------------------------------------
// Renderer
// ---------------------------------------------------------------------------

fn push_rows(out: &mut String, grid: &TerrainGrid, values: &[f64]) {
    for row in (0..grid.height).rev() {
        let mut line = String::new();
        for col in 0..grid.width {
            if col > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{}", values[row * grid.width + col]));
        }
        out.push_str(&line);
        out.push('\n');
    }
}

fn push_mask_rows(out: &mut String, grid: &TerrainGrid, mask: &[bool]) {
    for row in (0..grid.height).rev() {
        for col in 0..grid.width {
            out.push(if mask[row * grid.width + col] { '1' } else { '0' });
        }
        out.push('\n');
    }
}

fn push_cost(out: &mut String, grid: &TerrainGrid, cost: &MarginalCost) {
    out.push_str(&format!("kind = {}\n", cost.kind_name()));
    match cost {
        MarginalCost::Free => {}
        MarginalCost::Fixed { target } => {
            out.push_str("target = inline\n");
            push_rows(out, grid, target);
        }
        MarginalCost::FixedOnSubset { target, mask } => {
            out.push_str("target = inline\n");
            push_rows(out, grid, target);
            out.push_str("mask = inline\n");
            push_mask_rows(out, grid, mask);
        }
        MarginalCost::LinearWithCapacity { cost, capacity } => {
            out.push_str("cost = inline\n");
            push_rows(out, grid, cost);
            out.push_str("capacity = inline\n");
            push_rows(out, grid, capacity);
        }
        MarginalCost::Congestion { mask } => {
            out.push_str("mask = inline\n");
            push_mask_rows(out, grid, mask);
        }
    }
}

/// Group `1..=horizon` into maximal runs of equal costs, skipping `Free`.
fn cost_runs(costs: &[&MarginalCost]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut j = 1;
    while j < costs.len() {
        if *costs[j] == MarginalCost::Free {
            j += 1;
            continue;
        }
        let start = j;
        while j + 1 < costs.len() && costs[j + 1] == costs[start] {
            j += 1;
        }
        runs.push((start, j));
        j += 1;
    }
    runs
}

/// Render a problem as a scenario document. Parsing the result reproduces
/// the problem exactly, including every floating-point field.
pub fn render_scenario(p: &Problem) -> String {
    let grid = &p.grid;
    let mut out = String::new();
    out.push_str(HEADER);
    out.push_str("\n\n[grid]\n");
    out.push_str(&format!("width = {}\n", grid.width));
    out.push_str(&format!("height = {}\n", grid.height));
    out.push_str(&format!(
        "bounds = {} {} {} {}\n",
        grid.bounds[0], grid.bounds[1], grid.bounds[2], grid.bounds[3]
    ));
    out.push_str("terrain = inline\n");
    for row in (0..grid.height).rev() {
        for col in 0..grid.width {
            out.push(match grid.cells[row * grid.width + col] {
                Terrain::Water => 'w',
                Terrain::Rough => 'r',
                Terrain::Normal => 'n',
                Terrain::Start(s) => (b'1' + s as u8) as char,
            });
        }
        out.push('\n');
    }

    out.push_str("\n[solver]\n");
    out.push_str(&format!("epsilon = {}\n", p.epsilon));
    out.push_str(&format!("horizon = {}\n", p.horizon));
    out.push_str(&format!("dt_weight = {}\n", p.dt_weight));

    for (l, sp) in p.species.iter().enumerate() {
        out.push_str(&format!("\n[species {}]\n", l + 1));
        let allowed: Vec<String> = sp.allowed.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!("allowed = {}\n", allowed.join(" ")));
        out.push_str(&format!("radius_sq = {}\n", sp.radius_sq));
        out.push_str(&format!("alpha = {}\n", sp.alpha));
        out.push_str(&format!("deploy_cost = {}\n", sp.deploy_cost));
        out.push_str(&format!("initial_mass = {}\n", sp.initial_mass));
        out.push_str("initial = inline\n");
        push_rows(&mut out, grid, &sp.initial);
        out.push_str("capacity = inline\n");
        push_rows(&mut out, grid, &sp.capacity);
    }

    let total_refs: Vec<&MarginalCost> = p.total_costs.iter().collect();
    for (a, b) in cost_runs(&total_refs) {
        if a == b {
            out.push_str(&format!("\n[cost total {a}]\n"));
        } else {
            out.push_str(&format!("\n[cost total {a}..{b}]\n"));
        }
        push_cost(&mut out, grid, total_refs[a]);
    }
    for l in 0..p.species.len() {
        let refs: Vec<&MarginalCost> = p.species_costs.iter().map(|row| &row[l]).collect();
        for (a, b) in cost_runs(&refs) {
            if a == b {
                out.push_str(&format!("\n[cost species {} {a}]\n", l + 1));
            } else {
                out.push_str(&format!("\n[cost species {} {a}..{b}]\n", l + 1));
            }
            push_cost(&mut out, grid, refs[a]);
        }
    }
    out
}
