//! Variable-order, variable-step linear multistep integrator.
//!
//! Nordsieck-form Adams-Moulton (orders 1 to 12) corrected by functional
//! iteration. When functional iteration keeps failing to converge the
//! problem is treated as stiff and the integrator switches, once, to BDF
//! (orders 1 to 5) with a matrix-free Newton-GMRES corrector.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const ADAMS_MAX_ORDER: usize = 12;
const BDF_MAX_ORDER: usize = 5;
const MAX_CORRECTOR_ITERS: usize = 3;
const MAX_CONVERGENCE_FAILURES: usize = 10;
const MAX_ERROR_FAILURES: i32 = 10;
const STIFF_WINDOW: u64 = 20;
const STIFF_TRIGGER: usize = 5;

/// Right-hand side of `y' = f(t, y)` for a real state vector.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&mut self, t: f64, y: &[f64], dydt: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adams,
    Bdf,
}

#[derive(Debug, Clone)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: u64,
    pub h_init: Option<f64>,
    pub h_max: f64,
    pub h_min: f64,
    pub max_adams_order: usize,
    pub stiffness_fallback: bool,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rtol: 1e-9,
            atol: 1e-11,
            max_steps: 50_000_000,
            h_init: None,
            h_max: f64::INFINITY,
            h_min: 0.0,
            max_adams_order: ADAMS_MAX_ORDER,
            stiffness_fallback: true,
            cancel: None,
        }
    }
}

impl IntegratorOptions {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        IntegratorOptions { rtol, atol, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorStats {
    pub steps: u64,
    pub rhs_evals: u64,
    pub error_test_failures: u64,
    pub convergence_failures: u64,
    pub method_switches: u32,
    pub final_method: Method,
    pub last_order: usize,
    pub last_step: f64,
    pub rtol: f64,
    pub atol: f64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum IntegrationError {
    #[error("invalid tolerances rtol = {rtol}, atol = {atol}")]
    InvalidTolerance { rtol: f64, atol: f64 },
    #[error("invalid interval: t0 = {t0}, t_end = {t_end}")]
    InvalidInterval { t0: f64, t_end: f64 },
    #[error("step size underflow at t = {t} (h = {h:e}); problem may be stiff or singular")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("repeated {kind} failures at t = {t} (h = {h:e})")]
    RepeatedFailures { kind: &'static str, t: f64, h: f64 },
    #[error("step limit {steps} reached at t = {t}")]
    MaxSteps { t: f64, steps: u64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("cancelled at t = {t}")]
    Cancelled { t: f64 },
}

/// Method coefficients `l_j` and error constants for each order.
#[derive(Debug, Clone)]
struct Coefficients {
    el: Vec<[f64; 13]>,
    tesco: Vec<[f64; 3]>,
}

impl Coefficients {
    fn adams() -> Self {
        let mut el = vec![[0.0; 13]; ADAMS_MAX_ORDER + 1];
        let mut tesco = vec![[0.0; 3]; ADAMS_MAX_ORDER + 2];
        el[1][0] = 1.0;
        el[1][1] = 1.0;
        tesco[1][0] = 0.0;
        tesco[1][1] = 2.0;
        tesco[2][0] = 1.0;
        tesco[ADAMS_MAX_ORDER][2] = 0.0;
        let mut pc = [0.0f64; 13];
        pc[0] = 1.0;
        let mut rqfac = 1.0;
        for nq in 2..=ADAMS_MAX_ORDER {
            // p(x) <- p(x) * (x + nq - 1); p has degree nq - 1 after the update.
            let rq1fac = rqfac;
            rqfac /= nq as f64;
            let fnqm1 = (nq - 1) as f64;
            pc[nq - 1] = 0.0;
            for i in (1..nq).rev() {
                pc[i] = pc[i - 1] + fnqm1 * pc[i];
            }
            pc[0] *= fnqm1;
            // Integrals over [-1, 0] of p(x) and x p(x).
            let mut pint = pc[0];
            let mut xpin = pc[0] / 2.0;
            let mut tsign = 1.0;
            for i in 1..nq {
                tsign = -tsign;
                pint += tsign * pc[i] / (i + 1) as f64;
                xpin += tsign * pc[i] / (i + 2) as f64;
            }
            el[nq][0] = pint * rq1fac;
            el[nq][1] = 1.0;
            for i in 1..nq {
                el[nq][i + 1] = rq1fac * pc[i] / (i + 1) as f64;
            }
            let ragq = 1.0 / (rqfac * xpin);
            tesco[nq][1] = ragq;
            if nq < ADAMS_MAX_ORDER {
                tesco[nq + 1][0] = ragq * rqfac / (nq + 1) as f64;
            }
            tesco[nq - 1][2] = ragq;
        }
        Coefficients { el, tesco }
    }

    fn bdf() -> Self {
        let mut el = vec![[0.0; 13]; BDF_MAX_ORDER + 1];
        let mut tesco = vec![[0.0; 3]; BDF_MAX_ORDER + 2];
        let mut pc = [0.0f64; 13];
        pc[0] = 1.0;
        let mut rq1fac = 1.0;
        for nq in 1..=BDF_MAX_ORDER {
            let fnq = nq as f64;
            pc[nq] = 0.0;
            for i in (1..=nq).rev() {
                pc[i] = pc[i - 1] + fnq * pc[i];
            }
            pc[0] *= fnq;
            for i in 0..=nq {
                el[nq][i] = pc[i] / pc[1];
            }
            el[nq][1] = 1.0;
            tesco[nq][0] = rq1fac;
            tesco[nq][1] = (nq + 1) as f64 / el[nq][0];
            tesco[nq][2] = (nq + 2) as f64 / el[nq][0];
            rq1fac /= fnq;
        }
        Coefficients { el, tesco }
    }
}

fn wrms(v: &[f64], ewt: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let s: f64 = v.iter().zip(ewt).map(|(a, w)| (a / w) * (a / w)).sum();
    (s / v.len() as f64).sqrt()
}

/// Advance the Nordsieck history by one step of the current size.
fn predict(z: &mut [Vec<f64>], q: usize) {
    for k in 0..q {
        for j in (k..q).rev() {
            let (lo, hi) = z.split_at_mut(j + 1);
            for (a, b) in lo[j].iter_mut().zip(&hi[0]) {
                *a += *b;
            }
        }
    }
}

/// Exact inverse of [`predict`].
fn retract(z: &mut [Vec<f64>], q: usize) {
    for k in 0..q {
        for j in k..q {
            let j = q - 1 - (j - k);
            let (lo, hi) = z.split_at_mut(j + 1);
            for (a, b) in lo[j].iter_mut().zip(&hi[0]) {
                *a -= *b;
            }
        }
    }
}

struct Solver<'a, S: OdeSystem> {
    sys: &'a mut S,
    opts: &'a IntegratorOptions,
    n: usize,
    method: Method,
    coef: Coefficients,
    z: Vec<Vec<f64>>,
    q: usize,
    h: f64,
    t: f64,
    ewt: Vec<f64>,
    acor: Vec<f64>,
    y: Vec<f64>,
    f: Vec<f64>,
    scratch: Vec<f64>,
    crate_: f64,
    ialth: usize,
    rmax: f64,
    stats: IntegratorStats,
    conv_fail_steps: VecDeque<u64>,
}

enum Corrector {
    Converged { acnrm: f64 },
    Failed,
}

impl<'a, S: OdeSystem> Solver<'a, S> {
    fn max_order(&self) -> usize {
        match self.method {
            Method::Adams => self.opts.max_adams_order.clamp(1, ADAMS_MAX_ORDER),
            Method::Bdf => BDF_MAX_ORDER,
        }
    }

    // Slot holding the previous step's correction, used when estimating
    // the benefit of raising the order.
    fn saved_slot(&self) -> usize {
        ADAMS_MAX_ORDER + 1
    }

    fn eval(&mut self, t: f64, which_y: bool) {
        let y = if which_y { &self.y } else { &self.z[0] };
        self.sys.rhs(t, y, &mut self.f);
        self.stats.rhs_evals += 1;
    }

    fn update_weights(&mut self) {
        let (rtol, atol) = (self.opts.rtol, self.opts.atol);
        for (w, y) in self.ewt.iter_mut().zip(&self.z[0]) {
            *w = rtol * y.abs() + atol;
        }
    }

    fn rescale(&mut self, rh: f64) {
        let mut r = 1.0;
        for j in 1..=self.q {
            r *= rh;
            for v in self.z[j].iter_mut() {
                *v *= r;
            }
        }
        self.h *= rh;
        self.ialth = self.q + 1;
    }

    fn limited_ratio(&self, rh: f64) -> f64 {
        let mut rh = rh.min(self.rmax);
        if self.opts.h_min > 0.0 {
            rh = rh.max(self.opts.h_min / self.h.abs());
        }
        rh / (self.h.abs() * rh / self.opts.h_max).max(1.0)
    }

    fn corrector(&mut self, t_new: f64) -> Corrector {
        match self.method {
            Method::Adams => self.functional_iteration(t_new),
            Method::Bdf => self.newton_krylov(t_new),
        }
    }

    fn convergence_ok(&mut self, m: usize, del: f64, delp: f64) -> Option<bool> {
        if m > 0 {
            self.crate_ = (0.2 * self.crate_).max(del / delp);
        }
        let conit = 0.5 / (self.q + 2) as f64;
        let dcon = del * (1.5 * self.crate_).min(1.0) / (self.coef.tesco[self.q][1] * conit);
        if dcon <= 1.0 {
            return Some(true);
        }
        if m + 1 == MAX_CORRECTOR_ITERS || (m >= 1 && del > 2.0 * delp) {
            return Some(false);
        }
        None
    }

    fn functional_iteration(&mut self, t_new: f64) -> Corrector {
        let el0 = self.coef.el[self.q][0];
        let h = self.h;
        self.y.copy_from_slice(&self.z[0]);
        self.acor.iter_mut().for_each(|v| *v = 0.0);
        let mut delp = 0.0;
        for m in 0..MAX_CORRECTOR_ITERS {
            self.eval(t_new, true);
            // scratch <- h f - z1 (new correction); increment = scratch - acor.
            for i in 0..self.n {
                self.scratch[i] = h * self.f[i] - self.z[1][i];
            }
            let mut s = 0.0;
            for i in 0..self.n {
                let d = (self.scratch[i] - self.acor[i]) / self.ewt[i];
                s += d * d;
            }
            let del = (s / self.n.max(1) as f64).sqrt();
            for i in 0..self.n {
                self.y[i] = self.z[0][i] + el0 * self.scratch[i];
            }
            std::mem::swap(&mut self.acor, &mut self.scratch);
            if !del.is_finite() {
                return Corrector::Failed;
            }
            match self.convergence_ok(m, del, delp) {
                Some(true) => {
                    let acnrm = if m == 0 { del } else { wrms(&self.acor, &self.ewt) };
                    return Corrector::Converged { acnrm };
                }
                Some(false) => return Corrector::Failed,
                None => delp = del,
            }
        }
        Corrector::Failed
    }

    fn newton_krylov(&mut self, t_new: f64) -> Corrector {
        let el0 = self.coef.el[self.q][0];
        let h = self.h;
        let n = self.n;
        self.y.copy_from_slice(&self.z[0]);
        self.acor.iter_mut().for_each(|v| *v = 0.0);
        let mut delp = 0.0;
        let mut residual = vec![0.0; n];
        let mut delta = vec![0.0; n];
        for m in 0..MAX_CORRECTOR_ITERS {
            self.eval(t_new, true);
            for i in 0..n {
                residual[i] = h * self.f[i] - self.z[1][i] - self.acor[i];
            }
            let f0 = self.f.clone();
            let conit = 0.5 / (self.q + 2) as f64;
            if !self.gmres(t_new, &f0, el0 * h, &residual, &mut delta, 0.05 * conit) {
                return Corrector::Failed;
            }
            let del = wrms(&delta, &self.ewt);
            for i in 0..n {
                self.acor[i] += delta[i];
                self.y[i] = self.z[0][i] + el0 * self.acor[i];
            }
            if !del.is_finite() {
                return Corrector::Failed;
            }
            match self.convergence_ok(m, del, delp) {
                Some(true) => {
                    let acnrm = wrms(&self.acor, &self.ewt);
                    return Corrector::Converged { acnrm };
                }
                Some(false) => return Corrector::Failed,
                None => delp = del,
            }
        }
        Corrector::Failed
    }

    /// Solve `(I - gamma J) x = b` by restarted GMRES in the error-weighted
    /// scaling; `J v` is a forward difference of `f` about the current `y`.
    fn gmres(&mut self, t: f64, f0: &[f64], gamma: f64, b: &[f64], x: &mut [f64], tol: f64) -> bool {
        const KRYLOV_DIM: usize = 20;
        const MAX_RESTARTS: usize = 3;
        let n = self.n;
        let ewt = self.ewt.clone();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() / n as f64;
        let bs: Vec<f64> = b.iter().zip(&ewt).map(|(v, w)| v / w).collect();
        x.iter_mut().for_each(|v| *v = 0.0);
        let mut xs = vec![0.0; n];
        let mut ytmp = vec![0.0; n];
        let mut ftmp = vec![0.0; n];

        let mut apply = |solver: &mut Self, vs: &[f64], out: &mut [f64]| {
            // out = (I - gamma J) v in scaled variables.
            let norm = dot(vs, vs).sqrt();
            if norm == 0.0 {
                out.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            let sig = 1.0 / norm;
            for i in 0..n {
                ytmp[i] = solver.y[i] + sig * vs[i] * ewt[i];
            }
            solver.sys.rhs(t, &ytmp, &mut ftmp);
            solver.stats.rhs_evals += 1;
            for i in 0..n {
                let jv = (ftmp[i] - f0[i]) / sig / ewt[i];
                out[i] = vs[i] - gamma * jv;
            }
        };

        let bnorm = dot(&bs, &bs).sqrt();
        if bnorm == 0.0 {
            return true;
        }
        let mut av = vec![0.0; n];
        for _ in 0..MAX_RESTARTS {
            apply(self, &xs, &mut av);
            let r: Vec<f64> = bs.iter().zip(&av).map(|(b, a)| b - a).collect();
            let beta = dot(&r, &r).sqrt();
            if beta <= tol {
                break;
            }
            let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
            let mut hess = vec![vec![0.0; KRYLOV_DIM]; KRYLOV_DIM + 1];
            let mut cs = vec![0.0; KRYLOV_DIM];
            let mut sn = vec![0.0; KRYLOV_DIM];
            let mut g = vec![0.0; KRYLOV_DIM + 1];
            g[0] = beta;
            let mut k_used = 0;
            for k in 0..KRYLOV_DIM {
                let mut w = vec![0.0; n];
                apply(self, &basis[k], &mut w);
                for (i, v) in basis.iter().enumerate() {
                    let hik = dot(&w, v);
                    hess[i][k] = hik;
                    w.iter_mut().zip(v).for_each(|(a, b)| *a -= hik * b);
                }
                let wn = dot(&w, &w).sqrt();
                hess[k + 1][k] = wn;
                for i in 0..k {
                    let tmp = cs[i] * hess[i][k] + sn[i] * hess[i + 1][k];
                    hess[i + 1][k] = -sn[i] * hess[i][k] + cs[i] * hess[i + 1][k];
                    hess[i][k] = tmp;
                }
                let denom = hess[k][k].hypot(hess[k + 1][k]);
                if denom == 0.0 {
                    return false;
                }
                cs[k] = hess[k][k] / denom;
                sn[k] = hess[k + 1][k] / denom;
                hess[k][k] = denom;
                hess[k + 1][k] = 0.0;
                g[k + 1] = -sn[k] * g[k];
                g[k] *= cs[k];
                k_used = k + 1;
                if g[k + 1].abs() <= tol || wn == 0.0 {
                    break;
                }
                basis.push(w.iter().map(|v| v / wn).collect());
            }
            let mut coeffs = vec![0.0; k_used];
            for i in (0..k_used).rev() {
                let mut s = g[i];
                for j in i + 1..k_used {
                    s -= hess[i][j] * coeffs[j];
                }
                coeffs[i] = s / hess[i][i];
            }
            for (c, v) in coeffs.iter().zip(&basis) {
                xs.iter_mut().zip(v).for_each(|(a, b)| *a += c * b);
            }
            if g[k_used].abs() <= tol {
                break;
            }
        }
        for i in 0..n {
            x[i] = xs[i] * ewt[i];
        }
        x.iter().all(|v| v.is_finite())
    }

    fn set_order(&mut self, q: usize) {
        self.q = q;
    }

    fn switch_to_bdf(&mut self) {
        self.method = Method::Bdf;
        self.coef = Coefficients::bdf();
        if self.q > BDF_MAX_ORDER {
            self.q = BDF_MAX_ORDER;
        }
        self.ialth = self.q + 1;
        self.crate_ = 0.7;
        self.stats.method_switches += 1;
        self.conv_fail_steps.clear();
    }

    fn initial_step(&mut self, t0: f64, t_end: f64) -> f64 {
        let span = t_end - t0;
        if let Some(h) = self.opts.h_init {
            return h.min(span).min(self.opts.h_max);
        }
        let d0 = wrms(&self.z[0], &self.ewt);
        let d1 = wrms(&self.f, &self.ewt);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        for i in 0..self.n {
            self.y[i] = self.z[0][i] + h0 * self.f[i];
        }
        let f0 = self.f.clone();
        self.eval(t0 + h0, true);
        let diff: Vec<f64> = self.f.iter().zip(&f0).map(|(a, b)| a - b).collect();
        let d2 = wrms(&diff, &self.ewt) / h0;
        self.f.copy_from_slice(&f0);
        let h1 = if d1.max(d2) <= 1e-15 {
            (1e-6f64).max(h0 * 1e-3)
        } else {
            (0.01 / d1.max(d2)).sqrt()
        };
        (100.0 * h0).min(h1).min(span).min(self.opts.h_max)
    }

    fn check_cancel(&self) -> Result<(), IntegrationError> {
        if let Some(flag) = &self.opts.cancel {
            if flag.load(Ordering::Relaxed) {
                return Err(IntegrationError::Cancelled { t: self.t });
            }
        }
        Ok(())
    }

    /// Evaluate the interpolating polynomial of the last accepted step.
    fn interpolate(&self, t: f64, out: &mut [f64]) {
        let s = (t - self.t) / self.h;
        out.copy_from_slice(&self.z[self.q]);
        for j in (0..self.q).rev() {
            for (o, zj) in out.iter_mut().zip(&self.z[j]) {
                *o = *o * s + zj;
            }
        }
    }
}

/// Integrate `sys` from `t0` to `t_end`, overwriting `y` with the final state.
///
/// `on_sample` is called for each time in `samples` (ascending, inside
/// `[t0, t_end]`) with the interpolated state; returning `false` stops the
/// integration with [`IntegrationError::Cancelled`].
pub fn integrate<S, F>(
    sys: &mut S,
    t0: f64,
    y: &mut [f64],
    t_end: f64,
    samples: &[f64],
    opts: &IntegratorOptions,
    mut on_sample: F,
) -> Result<IntegratorStats, IntegrationError>
where
    S: OdeSystem,
    F: FnMut(f64, &[f64]) -> bool,
{
    if !(opts.rtol > 0.0 && opts.atol > 0.0 && opts.rtol.is_finite() && opts.atol.is_finite()) {
        return Err(IntegrationError::InvalidTolerance { rtol: opts.rtol, atol: opts.atol });
    }
    if !(t_end >= t0) || !t0.is_finite() || !t_end.is_finite() {
        return Err(IntegrationError::InvalidInterval { t0, t_end });
    }
    let n = sys.dim();
    assert_eq!(y.len(), n, "state length does not match system dimension");
    // Tolerances finer than round-off in the state can never be met.
    let ewt0: Vec<f64> = y.iter().map(|v| opts.rtol * v.abs() + opts.atol).collect();
    if opts.rtol < f64::EPSILON || f64::EPSILON * wrms(y, &ewt0) > 1.0 {
        return Err(IntegrationError::InvalidTolerance { rtol: opts.rtol, atol: opts.atol });
    }
    let mut stats = IntegratorStats {
        steps: 0,
        rhs_evals: 0,
        error_test_failures: 0,
        convergence_failures: 0,
        method_switches: 0,
        final_method: Method::Adams,
        last_order: 1,
        last_step: 0.0,
        rtol: opts.rtol,
        atol: opts.atol,
    };

    let mut next_sample = 0;
    let mut sample_buf = vec![0.0; n];
    while next_sample < samples.len() && samples[next_sample] <= t0 {
        if !on_sample(samples[next_sample], y) {
            return Err(IntegrationError::Cancelled { t: t0 });
        }
        next_sample += 1;
    }
    if t_end == t0 {
        return Ok(stats);
    }

    let mut z = vec![vec![0.0; n]; ADAMS_MAX_ORDER + 2];
    z[0].copy_from_slice(y);
    stats.final_method = Method::Adams;
    let mut s = Solver {
        sys,
        opts,
        n,
        method: Method::Adams,
        coef: Coefficients::adams(),
        z,
        q: 1,
        h: 0.0,
        t: t0,
        ewt: vec![0.0; n],
        acor: vec![0.0; n],
        y: vec![0.0; n],
        f: vec![0.0; n],
        scratch: vec![0.0; n],
        crate_: 0.7,
        ialth: 2,
        rmax: 1e4,
        stats,
        conv_fail_steps: VecDeque::new(),
    };

    s.update_weights();
    s.eval(t0, false);
    let h = s.initial_step(t0, t_end);
    s.h = h;
    for i in 0..n {
        s.z[1][i] = h * s.f[i];
    }

    let mut error_failures: i32 = 0;
    let mut conv_failures = 0usize;
    while s.t < t_end {
        s.check_cancel()?;
        if s.stats.steps >= opts.max_steps {
            return Err(IntegrationError::MaxSteps { t: s.t, steps: s.stats.steps });
        }
        let mut hit_end = false;
        if s.t + s.h >= t_end || (t_end - (s.t + s.h)) < 1e-12 * s.h.abs() {
            let rh = (t_end - s.t) / s.h;
            if rh != 1.0 {
                let ialth = s.ialth;
                s.rescale(rh);
                s.ialth = ialth.max(1);
            }
            hit_end = true;
        }
        if s.t + s.h == s.t {
            return Err(IntegrationError::StepSizeUnderflow { t: s.t, h: s.h });
        }

        s.update_weights();
        let t_old = s.t;
        let t_new = if hit_end { t_end } else { s.t + s.h };
        predict(&mut s.z, s.q);

        let acnrm = match s.corrector(t_new) {
            Corrector::Converged { acnrm } => acnrm,
            Corrector::Failed => {
                retract(&mut s.z, s.q);
                s.stats.convergence_failures += 1;
                conv_failures += 1;
                if s.method == Method::Adams && opts.stiffness_fallback {
                    let step = s.stats.steps;
                    s.conv_fail_steps.push_back(step);
                    while let Some(&first) = s.conv_fail_steps.front() {
                        if step.saturating_sub(first) > STIFF_WINDOW {
                            s.conv_fail_steps.pop_front();
                        } else {
                            break;
                        }
                    }
                    if s.conv_fail_steps.len() >= STIFF_TRIGGER {
                        s.switch_to_bdf();
                        conv_failures = 0;
                        continue;
                    }
                }
                if conv_failures >= MAX_CONVERGENCE_FAILURES {
                    return Err(IntegrationError::RepeatedFailures {
                        kind: "corrector convergence",
                        t: s.t,
                        h: s.h,
                    });
                }
                if s.h.abs() <= opts.h_min * 1.00001 {
                    return Err(IntegrationError::StepSizeUnderflow { t: s.t, h: s.h });
                }
                s.rmax = 2.0;
                s.crate_ = 0.7;
                let rh = s.limited_ratio(0.25);
                s.rescale(rh);
                continue;
            }
        };
        conv_failures = 0;

        let dsm = acnrm / s.coef.tesco[s.q][1];
        if !(dsm <= 1.0) {
            retract(&mut s.z, s.q);
            s.stats.error_test_failures += 1;
            error_failures += 1;
            s.rmax = 2.0;
            if !dsm.is_finite() && error_failures >= MAX_ERROR_FAILURES {
                return Err(IntegrationError::NonFinite { t: s.t });
            }
            if s.h.abs() <= opts.h_min * 1.00001 {
                return Err(IntegrationError::StepSizeUnderflow { t: s.t, h: s.h });
            }
            if error_failures >= MAX_ERROR_FAILURES {
                return Err(IntegrationError::RepeatedFailures {
                    kind: "error test",
                    t: s.t,
                    h: s.h,
                });
            }
            if error_failures >= 3 {
                // Restart at order 1 from a fresh derivative.
                let rh = s.limited_ratio(0.1).min(0.1);
                s.h *= rh;
                s.q = 1;
                s.eval(s.t, false);
                for i in 0..n {
                    s.z[1][i] = s.h * s.f[i];
                }
                s.ialth = 5;
                continue;
            }
            let rhsm = if dsm.is_finite() {
                1.0 / (1.2 * dsm.powf(1.0 / (s.q + 1) as f64) + 1.2e-6)
            } else {
                0.1
            };
            let mut rh = rhsm;
            let mut newq = s.q;
            if s.q > 1 {
                let ddn = wrms(&s.z[s.q], &s.ewt) / s.coef.tesco[s.q][0];
                let rhdn = 1.0 / (1.3 * ddn.powf(1.0 / s.q as f64) + 1.3e-6);
                if rhdn > rhsm {
                    rh = rhdn;
                    newq = s.q - 1;
                }
            }
            if error_failures >= 2 {
                rh = rh.min(0.2);
            }
            s.set_order(newq);
            let rh = s.limited_ratio(rh.min(1.0));
            s.rescale(rh);
            continue;
        }

        // Accepted.
        error_failures = 0;
        s.stats.steps += 1;
        s.t = t_new;
        for j in 0..=s.q {
            let e = s.coef.el[s.q][j];
            let (zj, acor) = (&mut s.z[j], &s.acor);
            for (a, c) in zj.iter_mut().zip(acor) {
                *a += e * c;
            }
        }
        if s.z[0].iter().any(|v| !v.is_finite()) {
            return Err(IntegrationError::NonFinite { t: s.t });
        }
        s.stats.last_order = s.q;
        s.stats.last_step = s.h;

        while next_sample < samples.len() && samples[next_sample] <= s.t {
            let ts = samples[next_sample].max(t_old);
            s.interpolate(ts, &mut sample_buf);
            if !on_sample(samples[next_sample], &sample_buf) {
                return Err(IntegrationError::Cancelled { t: s.t });
            }
            next_sample += 1;
        }
        if s.t >= t_end {
            break;
        }

        s.ialth -= 1;
        let max_q = s.max_order();
        let slot = s.saved_slot();
        if s.ialth == 0 {
            let mut rhup = 0.0;
            if s.q < max_q {
                let diff: Vec<f64> = s.acor.iter().zip(&s.z[slot]).map(|(a, b)| a - b).collect();
                let dup = wrms(&diff, &s.ewt) / s.coef.tesco[s.q][2];
                rhup = 1.0 / (1.4 * dup.powf(1.0 / (s.q + 2) as f64) + 1.4e-6);
            }
            let rhsm = 1.0 / (1.2 * dsm.powf(1.0 / (s.q + 1) as f64) + 1.2e-6);
            let mut rhdn = 0.0;
            if s.q > 1 {
                let ddn = wrms(&s.z[s.q], &s.ewt) / s.coef.tesco[s.q][0];
                rhdn = 1.0 / (1.3 * ddn.powf(1.0 / s.q as f64) + 1.3e-6);
            }
            let (mut newq, mut rh) = (s.q, rhsm);
            if rhup > rhsm && rhup > rhdn {
                newq = s.q + 1;
                rh = rhup;
            } else if rhdn > rhsm {
                newq = s.q - 1;
                rh = rhdn;
            }
            if rh < 1.1 {
                s.ialth = 3;
            } else {
                if newq > s.q {
                    let r = s.coef.el[s.q][s.q] / (s.q + 1) as f64;
                    let (z_new, acor) = (&mut s.z[newq], &s.acor);
                    for (a, c) in z_new.iter_mut().zip(acor) {
                        *a = c * r;
                    }
                }
                s.set_order(newq);
                let rh = s.limited_ratio(rh);
                s.rescale(rh);
            }
        } else if s.ialth == 1 && s.q < max_q {
            let acor = s.acor.clone();
            s.z[slot].copy_from_slice(&acor);
        }
        s.rmax = 10.0;
    }

    y.copy_from_slice(&s.z[0]);
    s.stats.final_method = s.method;
    Ok(s.stats)
}
