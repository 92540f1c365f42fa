//! Network case data: loading, validation, admittance assembly and the
//! input/output variable layout shared by the learning and optimization code.
//!
//! Case files are JSON documents in physical units (MW, MVAr, MVA, p.u.
//! impedances). [`GridCase`] holds everything in per-unit on `base_mva`,
//! except the generator cost coefficients which stay in $/MW², $/MW and $.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("cannot read case file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("case parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("invalid case: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Generator,
    Load,
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BusKind::Slack => "slack",
            BusKind::Generator => "generator",
            BusKind::Load => "load",
        };
        f.write_str(s)
    }
}

/// Bus data in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: i64,
    pub kind: BusKind,
    pub v_min: f64,
    pub v_max: f64,
    pub p_load: f64,
    pub q_load: f64,
    pub p_res: f64,
    pub q_res: f64,
}

impl Bus {
    /// True when the bus carries a load or renewable injection.
    pub fn has_injection(&self) -> bool {
        self.p_load != 0.0 || self.q_load != 0.0 || self.p_res != 0.0 || self.q_res != 0.0
    }
}

/// Plain π-model branch. `from`/`to` are bus positions, not ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b_shunt: f64,
    pub s_max: f64,
}

impl Line {
    /// Series conductance.
    pub fn g(&self) -> f64 {
        self.r / (self.r * self.r + self.x * self.x)
    }

    /// Series susceptance.
    pub fn b(&self) -> f64 {
        -self.x / (self.r * self.r + self.x * self.x)
    }
}

/// Generator limits in per-unit; cost coefficients in $/MW², $/MW, $.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub v_set: f64,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
}

// ---------------------------------------------------------------------------
// file format

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusRecord {
    id: i64,
    kind: BusKind,
    v_min: f64,
    v_max: f64,
    p_load: f64,
    q_load: f64,
    p_res: f64,
    q_res: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    from: i64,
    to: i64,
    r: f64,
    x: f64,
    b_shunt: f64,
    s_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorRecord {
    bus: i64,
    p_min: f64,
    p_max: f64,
    q_min: f64,
    q_max: f64,
    v_set: f64,
    c2: f64,
    c1: f64,
    c0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseRecord {
    base_mva: f64,
    buses: Vec<BusRecord>,
    lines: Vec<LineRecord>,
    generators: Vec<GeneratorRecord>,
}

/// Reads and validates a case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<GridCase, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_case(&text)
}

/// Parses a case document and converts it to per-unit.
pub fn parse_case(text: &str) -> Result<GridCase, GridError> {
    let rec: CaseRecord = serde_json::from_str(text).map_err(|e| GridError::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    GridCase::from_record(rec)
}

impl GridCase {
    fn from_record(rec: CaseRecord) -> Result<Self, GridError> {
        let base = rec.base_mva;
        if !(base.is_finite() && base > 0.0) {
            return Err(GridError::Validation(format!("base_mva must be positive, got {base}")));
        }
        let mut bus_recs = rec.buses;
        bus_recs.sort_by_key(|b| b.id);
        let mut index = HashMap::new();
        for (k, b) in bus_recs.iter().enumerate() {
            if index.insert(b.id, k).is_some() {
                return Err(GridError::Validation(format!("duplicate bus id {}", b.id)));
            }
        }
        let lookup = |id: i64, what: &str| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| GridError::Validation(format!("{what} references unknown bus {id}")))
        };
        let buses = bus_recs
            .iter()
            .map(|b| Bus {
                id: b.id,
                kind: b.kind,
                v_min: b.v_min,
                v_max: b.v_max,
                p_load: b.p_load / base,
                q_load: b.q_load / base,
                p_res: b.p_res / base,
                q_res: b.q_res / base,
            })
            .collect();
        let lines = rec
            .lines
            .iter()
            .enumerate()
            .map(|(k, l)| {
                Ok(Line {
                    from: lookup(l.from, &format!("line {k}"))?,
                    to: lookup(l.to, &format!("line {k}"))?,
                    r: l.r,
                    x: l.x,
                    b_shunt: l.b_shunt,
                    s_max: l.s_max / base,
                })
            })
            .collect::<Result<Vec<_>, GridError>>()?;
        let generators = rec
            .generators
            .iter()
            .enumerate()
            .map(|(k, g)| {
                Ok(Generator {
                    bus: lookup(g.bus, &format!("generator {k}"))?,
                    p_min: g.p_min / base,
                    p_max: g.p_max / base,
                    q_min: g.q_min / base,
                    q_max: g.q_max / base,
                    v_set: g.v_set,
                    c2: g.c2,
                    c1: g.c1,
                    c0: g.c0,
                })
            })
            .collect::<Result<Vec<_>, GridError>>()?;
        let case = GridCase {
            base_mva: base,
            buses,
            lines,
            generators,
        };
        case.validate()?;
        Ok(case)
    }

    /// Checks every structural and numeric invariant of the case.
    pub fn validate(&self) -> Result<(), GridError> {
        let fail = |msg: String| Err(GridError::Validation(msg));
        let n = self.buses.len();
        if n == 0 {
            return fail("case has no buses".into());
        }
        let slack: Vec<_> = self.buses.iter().filter(|b| b.kind == BusKind::Slack).collect();
        if slack.len() != 1 {
            return fail(format!("exactly one slack bus required, found {}", slack.len()));
        }
        for b in &self.buses {
            if !(b.v_min < b.v_max) {
                return fail(format!("bus {}: v_min {} must be below v_max {}", b.id, b.v_min, b.v_max));
            }
            if b.p_load < 0.0 || b.p_res < 0.0 {
                return fail(format!("bus {}: p_load and p_res must be nonnegative", b.id));
            }
        }
        for (k, l) in self.lines.iter().enumerate() {
            if l.from >= n || l.to >= n {
                return fail(format!("line {k}: endpoint out of range"));
            }
            if l.from == l.to {
                return fail(format!("line {k}: from and to are the same bus"));
            }
            if !(l.s_max > 0.0) {
                return fail(format!("line {k}: s_max must be positive"));
            }
            if !(l.r * l.r + l.x * l.x > 0.0) {
                return fail(format!("line {k}: zero series impedance"));
            }
        }
        let mut seen = vec![false; n];
        for (k, g) in self.generators.iter().enumerate() {
            if g.bus >= n {
                return fail(format!("generator {k}: bus out of range"));
            }
            if seen[g.bus] {
                return fail(format!("generator {k}: second generator on bus {}", self.buses[g.bus].id));
            }
            seen[g.bus] = true;
            if !(g.p_min < g.p_max) {
                return fail(format!("generator {k}: p_min must be below p_max"));
            }
            if !(g.q_min < g.q_max) {
                return fail(format!("generator {k}: q_min must be below q_max"));
            }
            if g.c2 < 0.0 || g.c1 < 0.0 || g.c0 < 0.0 {
                return fail(format!("generator {k}: cost coefficients must be nonnegative"));
            }
            if self.buses[g.bus].kind == BusKind::Load {
                return fail(format!("generator {k}: bus {} has kind load", self.buses[g.bus].id));
            }
        }
        for (i, b) in self.buses.iter().enumerate() {
            if b.kind != BusKind::Load && !seen[i] {
                return fail(format!("bus {} has kind {} but no generator", b.id, b.kind));
            }
        }
        Ok(())
    }

    /// Serializes back to the physical-unit case document.
    pub fn to_json(&self) -> String {
        let base = self.base_mva;
        let rec = CaseRecord {
            base_mva: base,
            buses: self
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id,
                    kind: b.kind,
                    v_min: b.v_min,
                    v_max: b.v_max,
                    p_load: b.p_load * base,
                    q_load: b.q_load * base,
                    p_res: b.p_res * base,
                    q_res: b.q_res * base,
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    from: self.buses[l.from].id,
                    to: self.buses[l.to].id,
                    r: l.r,
                    x: l.x,
                    b_shunt: l.b_shunt,
                    s_max: l.s_max * base,
                })
                .collect(),
            generators: self
                .generators
                .iter()
                .map(|g| GeneratorRecord {
                    bus: self.buses[g.bus].id,
                    p_min: g.p_min * base,
                    p_max: g.p_max * base,
                    q_min: g.q_min * base,
                    q_max: g.q_max * base,
                    v_set: g.v_set,
                    c2: g.c2,
                    c1: g.c1,
                    c0: g.c0,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&rec).expect("case record serializes")
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn slack_bus(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// Position of the slack generator in `generators`.
    pub fn slack_generator(&self) -> usize {
        let s = self.slack_bus();
        self.generators
            .iter()
            .position(|g| g.bus == s)
            .expect("validated case has a slack generator")
    }

    /// Generator position per bus, if any.
    pub fn generator_at(&self) -> Vec<Option<usize>> {
        let mut at = vec![None; self.n_bus()];
        for (k, g) in self.generators.iter().enumerate() {
            at[g.bus] = Some(k);
        }
        at
    }

    /// Net forecast demand Σ p_load − Σ p_res in p.u.
    pub fn net_load(&self) -> f64 {
        self.buses.iter().map(|b| b.p_load - b.p_res).sum()
    }

    /// Bus index by external id.
    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }
}

/// Bus admittance matrix split into real (G) and imaginary (B) parts.
pub fn build_admittance(case: &GridCase) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = case.n_bus();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for l in &case.lines {
        let (gs, bs) = (l.g(), l.b());
        let (i, j) = (l.from, l.to);
        g[(i, i)] += gs;
        g[(j, j)] += gs;
        g[(i, j)] -= gs;
        g[(j, i)] -= gs;
        b[(i, i)] += bs + 0.5 * l.b_shunt;
        b[(j, j)] += bs + 0.5 * l.b_shunt;
        b[(i, j)] -= bs;
        b[(j, i)] -= bs;
    }
    (g, b)
}

/// Ordering of the regression inputs `x = [p_g, p_l, p_r]` and outputs
/// `y = [v, q_g, s]`.
///
/// The slack generator is not an input: its active power follows from the
/// balance. Voltage outputs cover the non-generator buses that carry a load
/// or renewable injection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoSchema {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub n_x: usize,
    pub n_y: usize,
    /// Generator positions of the p_g inputs.
    pub gen_inputs: Vec<usize>,
    /// Bus positions of the p_l inputs.
    pub load_inputs: Vec<usize>,
    /// Bus positions of the p_r inputs.
    pub res_inputs: Vec<usize>,
    /// Bus positions of the voltage outputs.
    pub v_outputs: Vec<usize>,
    pub n_gen: usize,
    pub n_lines: usize,
}

pub fn io_schema(case: &GridCase) -> IoSchema {
    let slack_gen = case.slack_generator();
    let mut gens: Vec<usize> = (0..case.generators.len()).collect();
    gens.sort_by_key(|&k| case.generators[k].bus);
    let gen_inputs: Vec<usize> = gens.iter().copied().filter(|&k| k != slack_gen).collect();
    let load_inputs: Vec<usize> = (0..case.n_bus()).filter(|&i| case.buses[i].p_load > 0.0).collect();
    let res_inputs: Vec<usize> = (0..case.n_bus()).filter(|&i| case.buses[i].p_res > 0.0).collect();
    let v_outputs: Vec<usize> = (0..case.n_bus())
        .filter(|&i| case.buses[i].kind == BusKind::Load && case.buses[i].has_injection())
        .collect();

    let id = |i: usize| case.buses[i].id;
    let mut input_names = Vec::new();
    input_names.extend(gen_inputs.iter().map(|&k| format!("pg:{}", id(case.generators[k].bus))));
    input_names.extend(load_inputs.iter().map(|&i| format!("pl:{}", id(i))));
    input_names.extend(res_inputs.iter().map(|&i| format!("pr:{}", id(i))));

    let mut output_names = Vec::new();
    output_names.extend(v_outputs.iter().map(|&i| format!("v:{}", id(i))));
    output_names.extend(case.generators.iter().map(|g| format!("qg:{}", id(g.bus))));
    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    for l in &case.lines {
        let base = format!("s:{}-{}", id(l.from), id(l.to));
        let n = used.entry(base.clone()).or_insert(0);
        *n += 1;
        output_names.push(if *n == 1 { base } else { format!("{base}#{n}") });
    }

    IoSchema {
        n_x: input_names.len(),
        n_y: output_names.len(),
        input_names,
        output_names,
        gen_inputs,
        load_inputs,
        res_inputs,
        v_outputs,
        n_gen: case.generators.len(),
        n_lines: case.lines.len(),
    }
}

impl IoSchema {
    /// Number of voltage outputs.
    pub fn n_v(&self) -> usize {
        self.v_outputs.len()
    }

    /// Number of uncertain inputs (loads plus renewables).
    pub fn n_d(&self) -> usize {
        self.load_inputs.len() + self.res_inputs.len()
    }

    pub fn n_pg_inputs(&self) -> usize {
        self.gen_inputs.len()
    }

    /// Offset of the q_g block in `y`.
    pub fn qg_offset(&self) -> usize {
        self.n_v()
    }

    /// Offset of the s block in `y`.
    pub fn s_offset(&self) -> usize {
        self.n_v() + self.n_gen
    }

    pub fn input_index(&self, label: &str) -> Option<usize> {
        self.input_names.iter().position(|n| n == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus(lines: &str) -> String {
        format!(
            r#"{{"base_mva": 100,
            "buses": [
              {{"id": 1, "kind": "slack", "v_min": 0.9, "v_max": 1.1, "p_load": 0, "q_load": 0, "p_res": 0, "q_res": 0}},
              {{"id": 2, "kind": "load", "v_min": 0.9, "v_max": 1.1, "p_load": 50, "q_load": 0, "p_res": 0, "q_res": 0}}],
            "lines": [{lines}],
            "generators": [{{"bus": 1, "p_min": 0, "p_max": 200, "q_min": -100, "q_max": 100, "v_set": 1.0, "c2": 0.01, "c1": 1, "c0": 0}}]}}"#
        )
    }

    #[test]
    fn two_bus_admittance_by_hand() {
        let case = parse_case(&two_bus(r#"{"from": 1, "to": 2, "r": 0, "x": 0.1, "b_shunt": 0, "s_max": 100}"#)).unwrap();
        let (g, b) = build_admittance(&case);
        assert!(g.iter().all(|&v| v == 0.0));
        let expect = [[-10.0, 10.0], [10.0, -10.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((b[(i, j)] - expect[i][j]).abs() < 1e-12);
            }
        }
        assert!((case.buses[1].p_load - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_line_list_gives_zero_admittance() {
        let case = parse_case(&two_bus("")).unwrap();
        let (g, b) = build_admittance(&case);
        assert!(g.iter().chain(b.iter()).all(|&v| v == 0.0));
        let schema = io_schema(&case);
        assert_eq!(schema.n_y, 1 + 1);
        assert!(schema.output_names.iter().all(|n| !n.starts_with("s:")));
    }

    #[test]
    fn duplicate_slack_is_rejected() {
        let text = two_bus("").replace(r#""kind": "load""#, r#""kind": "slack""#);
        match parse_case(&text) {
            Err(GridError::Validation(msg)) => assert!(msg.contains("slack"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_position() {
        match parse_case("{\n \"base_mva\": 100,\n \"buses\": [ oops ] }") {
            Err(GridError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_line_endpoint_is_rejected() {
        let text = two_bus(r#"{"from": 1, "to": 7, "r": 0, "x": 0.1, "b_shunt": 0, "s_max": 100}"#);
        assert!(matches!(parse_case(&text), Err(GridError::Validation(_))));
    }

    #[test]
    fn series_parameters_from_impedance() {
        let l = Line { from: 0, to: 1, r: 0.03, x: 0.04, b_shunt: 0.0, s_max: 1.0 };
        assert!((l.g() - 12.0).abs() < 1e-12);
        assert!((l.b() + 16.0).abs() < 1e-12);
    }
}
