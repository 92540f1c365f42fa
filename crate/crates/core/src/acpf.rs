//! Newton–Raphson AC power flow in polar coordinates and branch-flow
//! evaluation. This is the ground truth the learned models are trained on
//! and validated against.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::{build_admittance, BusKind, GridCase, IoSchema};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20;

#[derive(Debug, Clone, thiserror::Error)]
pub enum AcpfError {
    #[error("power flow did not converge after {iterations} iterations (max mismatch {max_mismatch:.3e} p.u.)")]
    NonConvergence { iterations: usize, max_mismatch: f64 },
    #[error("singular power-flow Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("injection vectors have length {got}, case has {expected} buses")]
    Dimension { expected: usize, got: usize },
    #[error("tolerance must be positive")]
    BadTolerance,
}

/// Per-bus injections in p.u.: net active injection is `p_gen - p_demand`.
///
/// `p_gen` at the slack bus is ignored (the slack balances the network);
/// `v_set` is used at generator and slack buses only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injections {
    pub p_gen: Vec<f64>,
    pub p_demand: Vec<f64>,
    pub q_demand: Vec<f64>,
    pub v_set: Vec<f64>,
}

impl Injections {
    /// Injections at the forecast operating point with the given generator
    /// dispatch (one entry per generator, p.u.).
    pub fn forecast(case: &GridCase, p_g: &[f64]) -> Self {
        let n = case.n_bus();
        let mut inj = Injections {
            p_gen: vec![0.0; n],
            p_demand: case.buses.iter().map(|b| b.p_load - b.p_res).collect(),
            q_demand: case.buses.iter().map(|b| b.q_load - b.q_res).collect(),
            v_set: vec![1.0; n],
        };
        for (k, g) in case.generators.iter().enumerate() {
            inj.p_gen[g.bus] = p_g[k];
            inj.v_set[g.bus] = g.v_set;
        }
        inj
    }

    /// Injections for a regression input vector `x = [p_g, p_l, p_r]`.
    ///
    /// Reactive demand follows active demand at each bus's forecast power
    /// factor (`q = γ p` with `γ = q_forecast / p_forecast`).
    pub fn from_input(case: &GridCase, schema: &IoSchema, x: &[f64]) -> Self {
        Self::from_input_with(case, schema, x, None)
    }

    /// Like [`Injections::from_input`], with an optional common reactive
    /// fluctuation factor: `q = q_forecast + γ (p − p_forecast)`.
    pub fn from_input_with(case: &GridCase, schema: &IoSchema, x: &[f64], gamma: Option<f64>) -> Self {
        let mut p_g: Vec<f64> = case.generators.iter().map(|_| 0.0).collect();
        for (j, &k) in schema.gen_inputs.iter().enumerate() {
            p_g[k] = x[j];
        }
        let mut inj = Self::forecast(case, &p_g);
        let n_g = schema.n_pg_inputs();
        let mut p_l: Vec<f64> = case.buses.iter().map(|b| b.p_load).collect();
        let mut p_r: Vec<f64> = case.buses.iter().map(|b| b.p_res).collect();
        for (j, &i) in schema.load_inputs.iter().enumerate() {
            p_l[i] = x[n_g + j];
        }
        for (j, &i) in schema.res_inputs.iter().enumerate() {
            p_r[i] = x[n_g + schema.load_inputs.len() + j];
        }
        for (i, b) in case.buses.iter().enumerate() {
            let (q_l, q_r) = match gamma {
                Some(g) => (b.q_load + g * (p_l[i] - b.p_load), b.q_res + g * (p_r[i] - b.p_res)),
                None => (
                    if b.p_load > 0.0 { b.q_load / b.p_load * p_l[i] } else { b.q_load },
                    if b.p_res > 0.0 { b.q_res / b.p_res * p_r[i] } else { b.q_res },
                ),
            };
            inj.p_demand[i] = p_l[i] - p_r[i];
            inj.q_demand[i] = q_l - q_r;
        }
        inj
    }

    pub fn p(&self) -> Vec<f64> {
        self.p_gen.iter().zip(&self.p_demand).map(|(g, d)| g - d).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    /// Reactive output per generator (p.u.).
    pub q_g: Vec<f64>,
    /// Active output of the slack generator (p.u.).
    pub p_slack: f64,
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Bus power injections `P_i(v, θ)`, `Q_i(v, θ)`.
pub fn bus_powers(g: &DMatrix<f64>, b: &DMatrix<f64>, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let (gij, bij) = (g[(i, j)], b[(i, j)]);
            if gij == 0.0 && bij == 0.0 {
                continue;
            }
            let (s, c) = (theta[i] - theta[j]).sin_cos();
            p[i] += v[i] * v[j] * (gij * c + bij * s);
            q[i] += v[i] * v[j] * (gij * s - bij * c);
        }
    }
    (p, q)
}

/// Partial derivatives of bus injections with respect to all angles and
/// magnitudes.
pub struct PowerJacobian {
    pub dp_dth: DMatrix<f64>,
    pub dp_dv: DMatrix<f64>,
    pub dq_dth: DMatrix<f64>,
    pub dq_dv: DMatrix<f64>,
}

pub fn power_jacobian(
    g: &DMatrix<f64>,
    b: &DMatrix<f64>,
    v: &[f64],
    theta: &[f64],
    p: &[f64],
    q: &[f64],
) -> PowerJacobian {
    let n = v.len();
    let mut jac = PowerJacobian {
        dp_dth: DMatrix::zeros(n, n),
        dp_dv: DMatrix::zeros(n, n),
        dq_dth: DMatrix::zeros(n, n),
        dq_dv: DMatrix::zeros(n, n),
    };
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (gij, bij) = (g[(i, j)], b[(i, j)]);
            if gij == 0.0 && bij == 0.0 {
                continue;
            }
            let (s, c) = (theta[i] - theta[j]).sin_cos();
            let a = gij * s - bij * c;
            let d = gij * c + bij * s;
            jac.dp_dth[(i, j)] = v[i] * v[j] * a;
            jac.dp_dv[(i, j)] = v[i] * d;
            jac.dq_dth[(i, j)] = -v[i] * v[j] * d;
            jac.dq_dv[(i, j)] = v[i] * a;
        }
        let vi = v[i];
        jac.dp_dth[(i, i)] = -q[i] - b[(i, i)] * vi * vi;
        jac.dp_dv[(i, i)] = p[i] / vi + g[(i, i)] * vi;
        jac.dq_dth[(i, i)] = p[i] - g[(i, i)] * vi * vi;
        jac.dq_dv[(i, i)] = q[i] / vi - b[(i, i)] * vi;
    }
    jac
}

/// Largest absolute active/reactive mismatch at the buses whose balance the
/// power flow enforces (P at non-slack buses, Q at load buses).
pub fn max_mismatch(case: &GridCase, inj: &Injections, v: &[f64], theta: &[f64]) -> f64 {
    let (g, b) = build_admittance(case);
    let (p, q) = bus_powers(&g, &b, v, theta);
    let p_spec = inj.p();
    let mut worst: f64 = 0.0;
    for (i, bus) in case.buses.iter().enumerate() {
        if bus.kind != BusKind::Slack {
            worst = worst.max((p[i] - p_spec[i]).abs());
        }
        if bus.kind == BusKind::Load {
            worst = worst.max((q[i] + inj.q_demand[i]).abs());
        }
    }
    worst
}

/// Solves the AC power flow from a flat start.
///
/// Generator reactive limits are not enforced: PV buses keep `v_set`.
pub fn solve_acpf(case: &GridCase, inj: &Injections, tol: f64, max_iter: usize) -> Result<PfSolution, AcpfError> {
    let n = case.n_bus();
    for len in [inj.p_gen.len(), inj.p_demand.len(), inj.q_demand.len(), inj.v_set.len()] {
        if len != n {
            return Err(AcpfError::Dimension { expected: n, got: len });
        }
    }
    if !(tol > 0.0) {
        return Err(AcpfError::BadTolerance);
    }
    let (g, b) = build_admittance(case);
    let slack = case.slack_bus();
    let pvpq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| case.buses[i].kind == BusKind::Load).collect();
    let p_spec = inj.p();
    let q_spec: Vec<f64> = inj.q_demand.iter().map(|q| -q).collect();

    let mut v: Vec<f64> = (0..n)
        .map(|i| if case.buses[i].kind == BusKind::Load { 1.0 } else { inj.v_set[i] })
        .collect();
    let mut theta = vec![0.0; n];
    let (n_a, n_m) = (pvpq.len(), pq.len());

    let mismatch = |v: &[f64], theta: &[f64]| {
        let (p, q) = bus_powers(&g, &b, v, theta);
        let mut f = DVector::zeros(n_a + n_m);
        for (k, &i) in pvpq.iter().enumerate() {
            f[k] = p[i] - p_spec[i];
        }
        for (k, &i) in pq.iter().enumerate() {
            f[n_a + k] = q[i] - q_spec[i];
        }
        (f, p, q)
    };

    let (mut f, mut p, mut q) = mismatch(&v, &theta);
    let mut norm = f.amax();
    let mut iterations = 0;
    while !(norm <= tol) {
        if iterations >= max_iter || !norm.is_finite() {
            return Err(AcpfError::NonConvergence { iterations, max_mismatch: norm });
        }
        iterations += 1;
        let jac = power_jacobian(&g, &b, &v, &theta, &p, &q);
        let mut j = DMatrix::zeros(n_a + n_m, n_a + n_m);
        for (r, &i) in pvpq.iter().enumerate() {
            for (c, &k) in pvpq.iter().enumerate() {
                j[(r, c)] = jac.dp_dth[(i, k)];
            }
            for (c, &k) in pq.iter().enumerate() {
                j[(r, n_a + c)] = jac.dp_dv[(i, k)];
            }
        }
        for (r, &i) in pq.iter().enumerate() {
            for (c, &k) in pvpq.iter().enumerate() {
                j[(n_a + r, c)] = jac.dq_dth[(i, k)];
            }
            for (c, &k) in pq.iter().enumerate() {
                j[(n_a + r, n_a + c)] = jac.dq_dv[(i, k)];
            }
        }
        let dx = j
            .lu()
            .solve(&(-&f))
            .ok_or(AcpfError::SingularJacobian { iteration: iterations })?;
        for (k, &i) in pvpq.iter().enumerate() {
            theta[i] += dx[k];
        }
        for (k, &i) in pq.iter().enumerate() {
            v[i] += dx[n_a + k];
        }
        (f, p, q) = mismatch(&v, &theta);
        norm = f.amax();
    }

    let at = case.generator_at();
    let mut q_g = vec![0.0; case.generators.len()];
    for (i, gk) in at.iter().enumerate() {
        if let Some(k) = gk {
            q_g[*k] = q[i] + inj.q_demand[i];
        }
    }
    Ok(PfSolution {
        p_slack: p[slack] + inj.p_demand[slack],
        q_g,
        v,
        theta,
        iterations,
        max_mismatch: norm,
    })
}

/// Active/reactive flows at both ends of a line (p.u.).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchFlow {
    pub p_ft: f64,
    pub q_ft: f64,
    pub p_tf: f64,
    pub q_tf: f64,
}

impl BranchFlow {
    pub fn s_ft(&self) -> f64 {
        self.p_ft.hypot(self.q_ft)
    }

    pub fn s_tf(&self) -> f64 {
        self.p_tf.hypot(self.q_tf)
    }

    /// Apparent flow checked against the limit: the larger end.
    pub fn s(&self) -> f64 {
        self.s_ft().max(self.s_tf())
    }
}

pub fn branch_flows(case: &GridCase, v: &[f64], theta: &[f64]) -> Vec<BranchFlow> {
    case.lines
        .iter()
        .map(|l| {
            let y = Complex64::new(l.g(), l.b());
            let ysh = Complex64::new(0.0, 0.5 * l.b_shunt);
            let vf = Complex64::from_polar(v[l.from], theta[l.from]);
            let vt = Complex64::from_polar(v[l.to], theta[l.to]);
            let i_ft = (y + ysh) * vf - y * vt;
            let i_tf = (y + ysh) * vt - y * vf;
            let s_ft = vf * i_ft.conj();
            let s_tf = vt * i_tf.conj();
            BranchFlow {
                p_ft: s_ft.re,
                q_ft: s_ft.im,
                p_tf: s_tf.re,
                q_tf: s_tf.im,
            }
        })
        .collect()
}

/// Packs `y = [v, q_g, s]` in schema order.
pub fn evaluate_outputs(case: &GridCase, schema: &IoSchema, sol: &PfSolution) -> DVector<f64> {
    let flows = branch_flows(case, &sol.v, &sol.theta);
    let mut y = DVector::zeros(schema.n_y);
    for (k, &i) in schema.v_outputs.iter().enumerate() {
        y[k] = sol.v[i];
    }
    let off = schema.qg_offset();
    for (k, q) in sol.q_g.iter().enumerate() {
        y[off + k] = *q;
    }
    let off = schema.s_offset();
    for (k, f) in flows.iter().enumerate() {
        y[off + k] = f.s();
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_case;

    fn two_bus_pv(load_mw: f64) -> GridCase {
        parse_case(&format!(
            r#"{{"base_mva": 100,
            "buses": [
              {{"id": 1, "kind": "slack", "v_min": 0.9, "v_max": 1.1, "p_load": 0, "q_load": 0, "p_res": 0, "q_res": 0}},
              {{"id": 2, "kind": "generator", "v_min": 0.9, "v_max": 1.1, "p_load": {load_mw}, "q_load": 0, "p_res": 0, "q_res": 0}}],
            "lines": [{{"from": 1, "to": 2, "r": 0, "x": 0.1, "b_shunt": 0, "s_max": 100}}],
            "generators": [
              {{"bus": 1, "p_min": 0, "p_max": 200, "q_min": -100, "q_max": 100, "v_set": 1.0, "c2": 0, "c1": 1, "c0": 0}},
              {{"bus": 2, "p_min": 0, "p_max": 200, "q_min": -100, "q_max": 100, "v_set": 1.0, "c2": 0, "c1": 1, "c0": 0}}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn flat_solution_for_zero_injections() {
        let case = two_bus_pv(0.0);
        let inj = Injections::forecast(&case, &[0.0, 0.0]);
        let sol = solve_acpf(&case, &inj, 1e-10, 20).unwrap();
        assert!(sol.iterations <= 1);
        assert!(sol.v.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(sol.theta.iter().all(|&t| t.abs() < 1e-12));
    }

    #[test]
    fn two_bus_closed_form_angle() {
        let case = two_bus_pv(50.0);
        let inj = Injections::forecast(&case, &[0.0, 0.0]);
        let sol = solve_acpf(&case, &inj, 1e-12, 20).unwrap();
        let expect = -(0.05f64).asin();
        assert!((sol.theta[1] - expect).abs() < 1e-10, "{} vs {}", sol.theta[1], expect);
        // substitute back: 10 v1 v2 sin(θ2 - θ1) = -0.5
        assert!((10.0 * (sol.theta[1] - sol.theta[0]).sin() + 0.5).abs() < 1e-10);
        assert!((sol.p_slack - 0.5).abs() < 1e-10);
        let flows = branch_flows(&case, &sol.v, &sol.theta);
        assert!((flows[0].p_ft - 0.5).abs() < 1e-10);
        assert!((flows[0].p_ft + flows[0].p_tf).abs() < 1e-10);
    }

    #[test]
    fn flat_state_flow_is_shunt_only() {
        let mut case = two_bus_pv(0.0);
        case.lines[0].b_shunt = 0.2;
        let flows = branch_flows(&case, &[1.0, 1.0], &[0.0, 0.0]);
        assert!(flows[0].p_ft.abs() < 1e-14);
        assert!((flows[0].q_ft + 0.1).abs() < 1e-14);
    }

    #[test]
    fn reports_non_convergence() {
        let case = two_bus_pv(5000.0);
        let inj = Injections::forecast(&case, &[0.0, 0.0]);
        assert!(matches!(
            solve_acpf(&case, &inj, 1e-8, 20),
            Err(AcpfError::NonConvergence { .. }) | Err(AcpfError::SingularJacobian { .. })
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let case = two_bus_pv(0.0);
        let mut inj = Injections::forecast(&case, &[0.0, 0.0]);
        inj.p_gen.pop();
        assert!(matches!(solve_acpf(&case, &inj, 1e-8, 20), Err(AcpfError::Dimension { .. })));
    }
}
