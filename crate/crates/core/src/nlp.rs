//! Primal-dual interior-point solver for smooth nonlinear programs
//!
//! ```text
//! min f(x)  s.t.  h(x) = 0,  g(x) ≤ 0,  lb ≤ x ≤ ub
//! ```
//!
//! Inequalities (including finite variable bounds) get slacks; the search
//! direction comes from the reduced KKT system, steps obey the
//! fraction-to-boundary rule and are accepted on an ℓ1-penalty merit
//! function. The Lagrangian Hessian is either supplied by the problem or
//! approximated by damped BFGS.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::optim::{minimize, BfgsOptions};

/// A smooth nonlinear program.
pub trait Nlp {
    fn n_vars(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;
    /// Variable bounds; use infinities for free directions.
    fn var_bounds(&self) -> (DVector<f64>, DVector<f64>);
    fn objective(&self, x: &DVector<f64>) -> (f64, DVector<f64>);
    /// `h(x)` and its `n_eq × n` Jacobian.
    fn equalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
    /// `g(x)` (feasible when `≤ 0`) and its `n_ineq × n` Jacobian.
    fn inequalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
    /// Hessian of `f + yᵀh + zᵀg`, if available.
    fn lagrangian_hessian(&self, _x: &DVector<f64>, _y: &DVector<f64>, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct IpmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub mu_init: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions { tol: 1e-5, max_iter: 500, mu_init: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct IpmResult {
    pub x: DVector<f64>,
    /// Equality multipliers.
    pub y: DVector<f64>,
    /// Multipliers of the user inequalities (bounds excluded).
    pub z: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    /// Largest violation of `h = 0` and `g ≤ 0` (bounds included).
    pub infeasibility: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// Problem view with finite variable bounds folded into the inequalities.
struct Folded<'a, P: Nlp + ?Sized> {
    p: &'a P,
    lower: Vec<(usize, f64)>,
    upper: Vec<(usize, f64)>,
}

impl<'a, P: Nlp + ?Sized> Folded<'a, P> {
    fn new(p: &'a P) -> Self {
        let (lb, ub) = p.var_bounds();
        let lower = lb.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| (i, v)).collect();
        let upper = ub.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| (i, v)).collect();
        Folded { p, lower, upper }
    }

    fn m(&self) -> usize {
        self.p.n_ineq() + self.lower.len() + self.upper.len()
    }

    fn ineq(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (g0, j0) = self.p.inequalities(x);
        let m0 = g0.len();
        let n = x.len();
        let mut g = DVector::zeros(self.m());
        let mut j = DMatrix::zeros(self.m(), n);
        g.rows_mut(0, m0).copy_from(&g0);
        j.view_mut((0, 0), (m0, n)).copy_from(&j0);
        let mut r = m0;
        for &(i, v) in &self.lower {
            g[r] = v - x[i];
            j[(r, i)] = -1.0;
            r += 1;
        }
        for &(i, v) in &self.upper {
            g[r] = x[i] - v;
            j[(r, i)] = 1.0;
            r += 1;
        }
        (g, j)
    }

    /// Hessian of the user Lagrangian (bounds are linear).
    fn hessian(&self, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.p.lagrangian_hessian(x, y, &z.rows(0, self.p.n_ineq()).into_owned())
    }
}

fn infeasibility(h: &DVector<f64>, g: &DVector<f64>) -> f64 {
    let a = h.amax();
    let b = g.iter().fold(0.0f64, |m, &v| m.max(v));
    a.max(b)
}

struct Eval {
    f: f64,
    df: DVector<f64>,
    h: DVector<f64>,
    jh: DMatrix<f64>,
    g: DVector<f64>,
    jg: DMatrix<f64>,
}

fn evaluate<P: Nlp + ?Sized>(fp: &Folded<P>, x: &DVector<f64>) -> Option<Eval> {
    let (f, df) = fp.p.objective(x);
    let (h, jh) = fp.p.equalities(x);
    let (g, jg) = fp.ineq(x);
    let finite = f.is_finite()
        && df.iter().all(|v| v.is_finite())
        && h.iter().all(|v| v.is_finite())
        && g.iter().all(|v| v.is_finite())
        && jh.iter().all(|v| v.is_finite())
        && jg.iter().all(|v| v.is_finite());
    finite.then_some(Eval { f, df, h, jh, g, jg })
}

const S_MAX: f64 = 100.0;
const TAU_MIN: f64 = 0.99;
const KAPPA_EPS: f64 = 10.0;
const KAPPA_SIGMA: f64 = 1e10;

fn kkt_error(e: &Eval, s: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>, mu: f64) -> f64 {
    let m = s.len();
    let me = y.len();
    let dual = &e.df + e.jh.transpose() * y + e.jg.transpose() * z;
    let sd = (S_MAX.max((y.lp_norm(1) + z.lp_norm(1)) / ((m + me).max(1) as f64))) / S_MAX;
    let sc = (S_MAX.max(z.lp_norm(1) / (m.max(1) as f64))) / S_MAX;
    let comp = s.iter().zip(z.iter()).fold(0.0f64, |a, (&si, &zi)| a.max((si * zi - mu).abs()));
    let prim_g = (&e.g + s).amax();
    (dual.amax() / sd).max(e.h.amax()).max(prim_g).max(comp / sc)
}

/// Solves `problem` from `x0`.
pub fn solve<P: Nlp + ?Sized>(problem: &P, x0: &DVector<f64>, opts: &IpmOptions) -> IpmResult {
    let fp = Folded::new(problem);
    let n = problem.n_vars();
    let me = problem.n_eq();
    let m = fp.m();
    let mut x = x0.clone();
    let Some(mut e) = evaluate(&fp, &x) else {
        return IpmResult {
            x,
            y: DVector::zeros(me),
            z: DVector::zeros(problem.n_ineq()),
            objective: f64::NAN,
            kkt_residual: f64::INFINITY,
            infeasibility: f64::INFINITY,
            iterations: 0,
            status: SolveStatus::Infeasible,
        };
    };
    let mut mu = opts.mu_init;
    let mut s = DVector::from_fn(m, |i, _| (-e.g[i]).max(1e-2));
    let mut z = DVector::from_fn(m, |i, _| mu / s[i]);
    let mut y = DVector::zeros(me);
    let mut w = DMatrix::<f64>::identity(n, n);
    let mut bfgs_started = false;
    let mut nu = 1.0f64;
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut restorations = 0;

    while iterations < opts.max_iter {
        if kkt_error(&e, &s, &y, &z, 0.0) <= opts.tol {
            status = SolveStatus::Optimal;
            break;
        }
        while kkt_error(&e, &s, &y, &z, mu) <= KAPPA_EPS * mu && mu > opts.tol / 10.0 {
            mu = (opts.tol / 10.0).max((0.2 * mu).min(mu.powf(1.5)));
        }
        iterations += 1;

        let exact = fp.hessian(&x, &y, &z);
        let wk = exact.as_ref().unwrap_or(&w);
        let sigma = DVector::from_fn(m, |i, _| z[i] / s[i]);
        let mut h_mat = wk.clone();
        for i in 0..m {
            let row = e.jg.row(i);
            h_mat.ger(sigma[i], &row.transpose(), &row.transpose(), 1.0);
        }
        // keep the reduced Hessian positive definite
        let mut delta = 0.0;
        loop {
            let mut t = h_mat.clone();
            for i in 0..n {
                t[(i, i)] += delta;
            }
            if t.clone().cholesky().is_some() {
                h_mat = t;
                break;
            }
            delta = if delta == 0.0 { 1e-8 * (1.0 + h_mat.diagonal().amax()) } else { delta * 10.0 };
            if delta > 1e20 {
                break;
            }
        }

        let r_d = &e.df + e.jh.transpose() * &y + e.jg.transpose() * &z;
        let r_g = &e.g + &s;
        let r_c = DVector::from_fn(m, |i, _| mu - s[i] * z[i]);
        let corr = DVector::from_fn(m, |i, _| (r_c[i] + z[i] * r_g[i]) / s[i]);
        let rhs_x = -(&r_d + e.jg.transpose() * &corr);
        let mut kkt = DMatrix::zeros(n + me, n + me);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h_mat);
        kkt.view_mut((n, 0), (me, n)).copy_from(&e.jh);
        kkt.view_mut((0, n), (n, me)).copy_from(&e.jh.transpose());
        for i in 0..me {
            kkt[(n + i, n + i)] = -1e-10;
        }
        let mut rhs = DVector::zeros(n + me);
        rhs.rows_mut(0, n).copy_from(&rhs_x);
        rhs.rows_mut(n, me).copy_from(&(-&e.h));
        let Some(sol) = kkt.lu().solve(&rhs) else {
            debug!("singular KKT system at iteration {iterations}");
            status = SolveStatus::Infeasible;
            break;
        };
        let dx = sol.rows(0, n).into_owned();
        let dy = sol.rows(n, me).into_owned();
        let ds = -&r_g - &e.jg * &dx;
        let dz = DVector::from_fn(m, |i, _| (r_c[i] - z[i] * ds[i]) / s[i]);

        let tau = TAU_MIN.max(1.0 - mu);
        let max_step = |v: &DVector<f64>, dv: &DVector<f64>| {
            let mut a = 1.0f64;
            for i in 0..v.len() {
                if dv[i] < 0.0 {
                    a = a.min(-tau * v[i] / dv[i]);
                }
            }
            a
        };
        let alpha_p = max_step(&s, &ds);
        let alpha_d = max_step(&z, &dz);

        let infeas1 = e.h.lp_norm(1) + r_g.lp_norm(1);
        let barrier_dir = e.df.dot(&dx) - mu * (0..m).map(|i| ds[i] / s[i]).sum::<f64>();
        if infeas1 > 0.0 {
            let curv = 0.5 * dx.dot(&(&h_mat * &dx)).max(0.0);
            let need = (barrier_dir + curv) / (0.9 * infeas1);
            if nu < need {
                nu = need + 1.0;
            }
        }
        let merit = |ev: &Eval, sv: &DVector<f64>| {
            ev.f - mu * sv.iter().map(|v| v.ln()).sum::<f64>() + nu * (ev.h.lp_norm(1) + (&ev.g + sv).lp_norm(1))
        };
        let phi0 = merit(&e, &s);
        let dphi = barrier_dir - nu * infeas1;

        let mut alpha = alpha_p;
        let mut accepted = None;
        while alpha > 1e-14 {
            let xn = &x + &dx * alpha;
            let sn = &s + &ds * alpha;
            if let Some(en) = evaluate(&fp, &xn) {
                let phi = merit(&en, &sn);
                if phi.is_finite() && phi <= phi0 + 1e-4 * alpha * dphi.min(0.0) {
                    accepted = Some((xn, sn, en));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, sn, en)) = accepted else {
            restorations += 1;
            if restorations > 3 {
                status = SolveStatus::Infeasible;
                break;
            }
            debug!("line search failed at iteration {iterations}; restoring feasibility");
            match restore(&fp, &x) {
                Some(xr) => {
                    x = xr;
                    match evaluate(&fp, &x) {
                        Some(en) => e = en,
                        None => {
                            status = SolveStatus::Infeasible;
                            break;
                        }
                    }
                    mu = mu.max(1e-2);
                    s = DVector::from_fn(m, |i, _| (-e.g[i]).max(mu));
                    z = DVector::from_fn(m, |i, _| mu / s[i]);
                    w = DMatrix::identity(n, n);
                    bfgs_started = false;
                    continue;
                }
                None => {
                    status = SolveStatus::Infeasible;
                    break;
                }
            }
        };

        let yn = &y + &dy * alpha;
        let mut zn = &z + &dz * alpha_d.min(1.0);
        for i in 0..m {
            let lo = mu / (KAPPA_SIGMA * sn[i]);
            let hi = KAPPA_SIGMA * mu / sn[i];
            zn[i] = zn[i].clamp(lo, hi);
        }

        if exact.is_none() {
            let grad_l = |ev: &Eval| &ev.df + ev.jh.transpose() * &yn + ev.jg.transpose() * &zn;
            let sk = &xn - &x;
            let yk = grad_l(&en) - grad_l(&e);
            let sy = sk.dot(&yk);
            if sk.norm() > 0.0 {
                if !bfgs_started && sy > 0.0 {
                    w = DMatrix::identity(n, n) * (yk.norm_squared() / sy);
                    bfgs_started = true;
                }
                let ws = &w * &sk;
                let sws = sk.dot(&ws);
                if sws > 0.0 {
                    let theta = if sy >= 0.2 * sws { 1.0 } else { 0.8 * sws / (sws - sy) };
                    let r = &yk * theta + &ws * (1.0 - theta);
                    let sr = sk.dot(&r);
                    if sr > 0.0 {
                        w -= &ws * ws.transpose() / sws;
                        w += &r * r.transpose() / sr;
                    }
                }
            }
        }

        x = xn;
        s = sn;
        e = en;
        y = yn;
        z = zn;
        if x.amax() > 1e15 || e.f < -1e30 {
            break;
        }
    }

    let kkt_residual = kkt_error(&e, &s, &y, &z, 0.0);
    let infeas = infeasibility(&e.h, &e.g);
    IpmResult {
        objective: e.f,
        y,
        z: z.rows(0, problem.n_ineq()).into_owned(),
        kkt_residual,
        infeasibility: infeas,
        iterations,
        status,
        x,
    }
}

/// Minimizes the squared constraint violation from `x0`.
fn restore<P: Nlp + ?Sized>(fp: &Folded<P>, x0: &DVector<f64>) -> Option<DVector<f64>> {
    let fg = |x: &DVector<f64>| {
        let (h, jh) = fp.p.equalities(x);
        let (g, jg) = fp.ineq(x);
        let gp = g.map(|v| v.max(0.0));
        let v = 0.5 * (h.norm_squared() + gp.norm_squared());
        let grad = jh.transpose() * &h + jg.transpose() * &gp;
        v.is_finite().then_some((v, grad))
    };
    let res = minimize(fg, x0.clone(), &BfgsOptions { max_iter: 500, grad_tol: 1e-12, max_step: 1.0 })?;
    (res.f.sqrt() < 1e-6).then_some(res.x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `min ½xᵀQx + cᵀx  s.t.  A x = b,  G x ≤ d`.
    struct Qp {
        q: DMatrix<f64>,
        c: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
        g: DMatrix<f64>,
        d: DVector<f64>,
        exact: bool,
    }

    impl Nlp for Qp {
        fn n_vars(&self) -> usize {
            self.c.len()
        }
        fn n_eq(&self) -> usize {
            self.b.len()
        }
        fn n_ineq(&self) -> usize {
            self.d.len()
        }
        fn var_bounds(&self) -> (DVector<f64>, DVector<f64>) {
            let n = self.c.len();
            (DVector::from_element(n, f64::NEG_INFINITY), DVector::from_element(n, f64::INFINITY))
        }
        fn objective(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
            (0.5 * x.dot(&(&self.q * x)) + self.c.dot(x), &self.q * x + &self.c)
        }
        fn equalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
            (&self.a * x - &self.b, self.a.clone())
        }
        fn inequalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
            (&self.g * x - &self.d, self.g.clone())
        }
        fn lagrangian_hessian(&self, _x: &DVector<f64>, _y: &DVector<f64>, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
            self.exact.then(|| self.q.clone())
        }
    }

    fn qp(exact: bool) -> Qp {
        // min (x0-1)² + (x1-2)² + x2²  s.t. x0 + x1 + x2 = 1,  x0 ≤ 0.2,  x1 - x2 ≤ 0.5
        Qp {
            q: DMatrix::from_diagonal_element(3, 3, 2.0),
            c: DVector::from_vec(vec![-2.0, -4.0, 0.0]),
            a: DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]),
            b: DVector::from_vec(vec![1.0]),
            g: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, -1.0]),
            d: DVector::from_vec(vec![0.2, 0.5]),
            exact,
        }
    }

    /// Solves the QP's KKT system with a given active set.
    fn kkt_oracle(p: &Qp, active: &[usize]) -> DVector<f64> {
        let n = 3;
        let k = 1 + active.len();
        let mut a = DMatrix::zeros(k, n);
        let mut b = DVector::zeros(k);
        a.row_mut(0).copy_from(&p.a.row(0));
        b[0] = p.b[0];
        for (r, &i) in active.iter().enumerate() {
            a.row_mut(r + 1).copy_from(&p.g.row(i));
            b[r + 1] = p.d[i];
        }
        let mut m = DMatrix::zeros(n + k, n + k);
        m.view_mut((0, 0), (n, n)).copy_from(&p.q);
        m.view_mut((n, 0), (k, n)).copy_from(&a);
        m.view_mut((0, n), (n, k)).copy_from(&a.transpose());
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&p.c));
        rhs.rows_mut(n, k).copy_from(&b);
        m.lu().solve(&rhs).unwrap().rows(0, n).into_owned()
    }

    #[test]
    fn qp_matches_kkt_oracle() {
        for exact in [true, false] {
            let p = qp(exact);
            let r = solve(&p, &DVector::zeros(3), &IpmOptions { tol: 1e-9, ..Default::default() });
            assert_eq!(r.status, SolveStatus::Optimal, "exact {exact}");
            let oracle = kkt_oracle(&p, &[0, 1]);
            assert!((&r.x - &oracle).amax() < 1e-6, "exact {exact}: {} vs {oracle}", r.x);
            assert!(r.z.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn bounded_variables() {
        struct Boxed;
        impl Nlp for Boxed {
            fn n_vars(&self) -> usize {
                2
            }
            fn n_eq(&self) -> usize {
                0
            }
            fn n_ineq(&self) -> usize {
                0
            }
            fn var_bounds(&self) -> (DVector<f64>, DVector<f64>) {
                (DVector::from_vec(vec![-1.0, 0.5]), DVector::from_vec(vec![1.0, 2.0]))
            }
            fn objective(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
                ((x[0] - 3.0).powi(2) + x[1].powi(2), DVector::from_vec(vec![2.0 * (x[0] - 3.0), 2.0 * x[1]]))
            }
            fn equalities(&self, _x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
                (DVector::zeros(0), DMatrix::zeros(0, 2))
            }
            fn inequalities(&self, _x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
                (DVector::zeros(0), DMatrix::zeros(0, 2))
            }
        }
        let r = solve(&Boxed, &DVector::from_vec(vec![0.0, 1.0]), &IpmOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn nonconvex_constraint() {
        // min x0 + x1 on the unit disk: optimum at −(1, 1)/√2
        struct Disk;
        impl Nlp for Disk {
            fn n_vars(&self) -> usize {
                2
            }
            fn n_eq(&self) -> usize {
                0
            }
            fn n_ineq(&self) -> usize {
                1
            }
            fn var_bounds(&self) -> (DVector<f64>, DVector<f64>) {
                (DVector::from_element(2, f64::NEG_INFINITY), DVector::from_element(2, f64::INFINITY))
            }
            fn objective(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
                (x[0] + x[1], DVector::from_element(2, 1.0))
            }
            fn equalities(&self, _x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
                (DVector::zeros(0), DMatrix::zeros(0, 2))
            }
            fn inequalities(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
                (DVector::from_element(1, x.norm_squared() - 1.0), DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 2.0 * x[1]]))
            }
        }
        let r = solve(&Disk, &DVector::from_vec(vec![0.3, -0.2]), &IpmOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        let t = -std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.x[0] - t).abs() < 1e-4 && (r.x[1] - t).abs() < 1e-4);
    }

    #[test]
    fn unbounded_objective_stops_cleanly() {
        struct Down;
        impl Nlp for Down {
            fn n_vars(&self) -> usize {
                1
            }
            fn n_eq(&self) -> usize {
                0
            }
            fn n_ineq(&self) -> usize {
                0
            }
            fn var_bounds(&self) -> (DVector<f64>, DVector<f64>) {
                (DVector::from_element(1, f64::NEG_INFINITY), DVector::from_element(1, f64::INFINITY))
            }
            fn objective(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
                (-x[0], DVector::from_element(1, -1.0))
            }
            fn equalities(&self, _x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
                (DVector::zeros(0), DMatrix::zeros(0, 1))
            }
            fn inequalities(&self, _x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
                (DVector::zeros(0), DMatrix::zeros(0, 1))
            }
        }
        let r = solve(&Down, &DVector::zeros(1), &IpmOptions { max_iter: 50, ..Default::default() });
        assert_eq!(r.status, SolveStatus::MaxIter);
    }

    #[test]
    fn deterministic_iterates() {
        let p = qp(false);
        let a = solve(&p, &DVector::zeros(3), &IpmOptions::default());
        let b = solve(&p, &DVector::zeros(3), &IpmOptions::default());
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
    }
}
