//! Trajectory integration, flow maps and linearization along paths.
//!
//! Reversed-time integration (`t_to < t_from`) is handled by the time
//! substitution `s = -t`, so there is a single forward-stepping code path;
//! returned trajectories always carry strictly increasing times.

use nalgebra::{DMatrix, DVector};

use crate::sysmodel::{Control, StateVector, Trajectory, TriangularSystem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Classic fixed-step fourth-order Runge-Kutta.
    FixedRk4 { step: f64 },
    /// Dormand-Prince 5(4) with per-component error control.
    AdaptiveRk45 { abs_tol: f64, rel_tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Integration stops (and the trajectory is marked blown up) when the
    /// state norm exceeds this radius.
    pub guard_radius: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::AdaptiveRk45 {
                abs_tol: 1e-9,
                rel_tol: 1e-9,
            },
            guard_radius: 1e6,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tols(abs_tol: f64, rel_tol: f64) -> Self {
        Self {
            method: Method::AdaptiveRk45 { abs_tol, rel_tol },
            guard_radius: 1e6,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OdeError {
    #[error("control defined on [{clo}, {chi}] does not cover [{lo}, {hi}]")]
    ControlDomain { lo: f64, hi: f64, clo: f64, chi: f64 },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("step budget exhausted at t = {t}")]
    TooManySteps { t: f64 },
    #[error("cannot linearize along a blown-up trajectory (blow-up at t = {t})")]
    BlownUpTrajectory { t: f64 },
    #[error("non-finite right-hand side at t = {t}")]
    NonFinite { t: f64 },
}

const MAX_STEPS: usize = 2_000_000;

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct Collected {
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    derivs: Vec<DVector<f64>>,
}

/// Integrates `x' = rhs(t, x)` from `t_from` to `t_to` (either direction).
pub fn integrate<F>(
    rhs: F,
    t_from: f64,
    t_to: f64,
    x0: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, OdeError>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    integrate_monitored(rhs, t_from, t_to, x0, cfg, |_, _| false).map(|(traj, _)| traj)
}

/// Like [`integrate`], with an event monitor called on dense-output samples
/// in integration order. When the monitor returns `true`, the crossing is
/// located by bisection on the dense interpolant and integration stops
/// there; the stop time is returned alongside the (truncated) trajectory.
pub fn integrate_monitored<F, M>(
    rhs: F,
    t_from: f64,
    t_to: f64,
    x0: &DVector<f64>,
    cfg: &IntegratorConfig,
    mut monitor: M,
) -> Result<(Trajectory, Option<f64>), OdeError>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
    M: FnMut(f64, &DVector<f64>) -> bool,
{
    let span = (t_to - t_from).abs();
    if span == 0.0 {
        let d = rhs(t_from, x0);
        let mut traj = Trajectory::new(vec![t_from], vec![x0.clone()], vec![d]);
        traj.blown_up = x0.norm() > cfg.guard_radius;
        return Ok((traj, None));
    }
    // Forward sweep in s with t = t_from + dir * s.
    let dir = if t_to > t_from { 1.0 } else { -1.0 };
    let srhs = |s: f64, x: &DVector<f64>| -> DVector<f64> { rhs(t_from + dir * s, x) * dir };

    let mut col = Collected {
        times: vec![t_from],
        states: vec![x0.clone()],
        derivs: vec![rhs(t_from, x0)],
    };
    if !col.derivs[0].iter().all(|v| v.is_finite()) {
        return Err(OdeError::NonFinite { t: t_from });
    }

    let mut s = 0.0;
    let mut x = x0.clone();
    let mut f = col.derivs[0].clone() * dir;
    let mut stop_at: Option<f64> = None;
    let mut blow_at: Option<f64> = None;

    if monitor(t_from, x0) {
        stop_at = Some(t_from);
    } else if x0.norm() > cfg.guard_radius {
        blow_at = Some(t_from);
    } else {
        match cfg.method {
            Method::FixedRk4 { step } => {
                assert!(step > 0.0, "step must be positive");
                let nsteps = (span / step).ceil().max(1.0) as usize;
                let h = span / nsteps as f64;
                for _ in 0..nsteps {
                    let (xn, _) = rk4_step(&srhs, s, &x, h);
                    let sn = s + h;
                    let fn_ = srhs(sn, &xn);
                    let tn = t_from + dir * sn;
                    push_sample(&mut col, tn, &xn, &fn_, dir);
                    let hit = check_events(
                        &mut monitor,
                        cfg,
                        &col,
                        s,
                        &x,
                        &f,
                        sn,
                        &xn,
                        &fn_,
                        t_from,
                        dir,
                    );
                    s = sn;
                    x = xn;
                    f = fn_;
                    match hit {
                        Event::None => {}
                        Event::Monitor(ts, xs) => {
                            truncate_at(&mut col, ts, &xs, &rhs);
                            stop_at = Some(ts);
                            break;
                        }
                        Event::BlowUp(ts, xs) => {
                            truncate_at(&mut col, ts, &xs, &rhs);
                            blow_at = Some(ts);
                            break;
                        }
                    }
                }
            }
            Method::AdaptiveRk45 { abs_tol, rel_tol } => {
                let mut h = (span / 100.0).min(span);
                let mut steps = 0usize;
                while s < span {
                    if steps > MAX_STEPS {
                        return Err(OdeError::TooManySteps { t: t_from + dir * s });
                    }
                    steps += 1;
                    h = h.min(span - s);
                    if h < 1e-14 * span.max(1.0) {
                        return Err(OdeError::StepUnderflow { t: t_from + dir * s });
                    }
                    let (xn, err_norm, k_last) = dopri_step(&srhs, s, &x, h, &f, abs_tol, rel_tol);
                    if !err_norm.is_finite() || !xn.iter().all(|v| v.is_finite()) {
                        // treat as a rejected step; shrink hard
                        h *= 0.25;
                        continue;
                    }
                    if err_norm <= 1.0 {
                        let sn = s + h;
                        let fn_ = k_last;
                        let tn = t_from + dir * sn;
                        push_sample(&mut col, tn, &xn, &fn_, dir);
                        let hit = check_events(
                            &mut monitor,
                            cfg,
                            &col,
                            s,
                            &x,
                            &f,
                            sn,
                            &xn,
                            &fn_,
                            t_from,
                            dir,
                        );
                        s = sn;
                        x = xn;
                        f = fn_;
                        match hit {
                            Event::None => {}
                            Event::Monitor(ts, xs) => {
                                truncate_at(&mut col, ts, &xs, &rhs);
                                stop_at = Some(ts);
                                break;
                            }
                            Event::BlowUp(ts, xs) => {
                                truncate_at(&mut col, ts, &xs, &rhs);
                                blow_at = Some(ts);
                                break;
                            }
                        }
                        h *= (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0);
                    } else {
                        h *= (0.9 * err_norm.powf(-0.2)).clamp(0.1, 1.0);
                    }
                }
            }
        }
    }

    let mut traj = finalize(col, dir);
    if let Some(t) = blow_at {
        traj.blown_up = true;
        traj.blow_up_time = Some(t);
    }
    Ok((traj, stop_at))
}

enum Event {
    None,
    Monitor(f64, DVector<f64>),
    BlowUp(f64, DVector<f64>),
}

/// Dense Hermite interpolation inside one accepted step (in s-time).
fn dense_state(
    s0: f64,
    x0: &DVector<f64>,
    f0: &DVector<f64>,
    s1: f64,
    x1: &DVector<f64>,
    f1: &DVector<f64>,
    s: f64,
) -> DVector<f64> {
    let h = s1 - s0;
    let u = (s - s0) / h;
    let u2 = u * u;
    let u3 = u2 * u;
    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    let h10 = u3 - 2.0 * u2 + u;
    let h01 = -2.0 * u3 + 3.0 * u2;
    let h11 = u3 - u2;
    x0 * h00 + f0 * (h10 * h) + x1 * h01 + f1 * (h11 * h)
}

#[allow(clippy::too_many_arguments)]
fn check_events<M>(
    monitor: &mut M,
    cfg: &IntegratorConfig,
    _col: &Collected,
    s0: f64,
    x0: &DVector<f64>,
    f0: &DVector<f64>,
    s1: f64,
    x1: &DVector<f64>,
    f1: &DVector<f64>,
    t_from: f64,
    dir: f64,
) -> Event
where
    M: FnMut(f64, &DVector<f64>) -> bool,
{
    let t1 = t_from + dir * s1;
    let guard = |x: &DVector<f64>| x.norm() > cfg.guard_radius;
    let m_hit = monitor(t1, x1);
    let g_hit = guard(x1);
    if !m_hit && !g_hit {
        return Event::None;
    }
    // Bisect on the dense interpolant for the earliest crossing in s.
    let mut lo = s0;
    let mut hi = s1;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let xm = dense_state(s0, x0, f0, s1, x1, f1, mid);
        let tm = t_from + dir * mid;
        if monitor(tm, &xm) || guard(&xm) {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-12 * (s1 - s0).max(1e-30) {
            break;
        }
    }
    let xs = dense_state(s0, x0, f0, s1, x1, f1, hi);
    let ts = t_from + dir * hi;
    if monitor(ts, &xs) && !guard(&xs) {
        Event::Monitor(ts, xs)
    } else if guard(&xs) {
        Event::BlowUp(ts, xs)
    } else {
        Event::Monitor(ts, xs)
    }
}

fn push_sample(col: &mut Collected, t: f64, x: &DVector<f64>, f_s: &DVector<f64>, dir: f64) {
    // f_s is the derivative in s-time; the stored slope is in original time.
    col.times.push(t);
    col.states.push(x.clone());
    col.derivs.push(f_s * dir);
}

fn truncate_at<F>(col: &mut Collected, t_stop: f64, x_stop: &DVector<f64>, rhs: &F)
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    // Drop the overshooting sample and append the located stop point.
    col.times.pop();
    col.states.pop();
    col.derivs.pop();
    if let Some(&last) = col.times.last() {
        if (t_stop - last).abs() < 1e-15 * t_stop.abs().max(1.0) {
            return;
        }
    }
    col.times.push(t_stop);
    col.states.push(x_stop.clone());
    col.derivs.push(rhs(t_stop, x_stop));
}

fn finalize(mut col: Collected, dir: f64) -> Trajectory {
    if dir < 0.0 {
        col.times.reverse();
        col.states.reverse();
        col.derivs.reverse();
    }
    // Guard against duplicated sample times from stop-point insertion.
    let mut times = Vec::with_capacity(col.times.len());
    let mut states = Vec::with_capacity(col.times.len());
    let mut derivs = Vec::with_capacity(col.times.len());
    for ((t, x), d) in col
        .times
        .into_iter()
        .zip(col.states)
        .zip(col.derivs)
    {
        if let Some(&last) = times.last() {
            if t <= last {
                continue;
            }
        }
        times.push(t);
        states.push(x);
        derivs.push(d);
    }
    Trajectory::new(times, states, derivs)
}

fn rk4_step<F>(rhs: &F, s: f64, x: &DVector<f64>, h: f64) -> (DVector<f64>, DVector<f64>)
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = rhs(s, x);
    let k2 = rhs(s + 0.5 * h, &(x + &k1 * (0.5 * h)));
    let k3 = rhs(s + 0.5 * h, &(x + &k2 * (0.5 * h)));
    let k4 = rhs(s + h, &(x + &k3 * h));
    let xn = x + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
    (xn, k1)
}

/// One Dormand-Prince step; returns `(x_next, err_norm, f(s+h, x_next))`
/// where `err_norm` is the embedded error scaled against the mixed
/// tolerance (accept when `<= 1`).
fn dopri_step<F>(
    rhs: &F,
    s: f64,
    x: &DVector<f64>,
    h: f64,
    f0: &DVector<f64>,
    abs_tol: f64,
    rel_tol: f64,
) -> (DVector<f64>, f64, DVector<f64>)
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
    k.push(f0.clone());
    for i in 1..7 {
        let mut xi = x.clone();
        for (j, kj) in k.iter().enumerate() {
            let a = A[i][j];
            if a != 0.0 {
                xi.axpy(a * h, kj, 1.0);
            }
        }
        k.push(rhs(s + C[i] * h, &xi));
    }
    let mut x5 = x.clone();
    let mut x4 = x.clone();
    for (j, kj) in k.iter().enumerate() {
        if B5[j] != 0.0 {
            x5.axpy(B5[j] * h, kj, 1.0);
        }
        if B4[j] != 0.0 {
            x4.axpy(B4[j] * h, kj, 1.0);
        }
    }
    let mut err: f64 = 0.0;
    for i in 0..n {
        let tol = abs_tol + rel_tol * x[i].abs().max(x5[i].abs());
        err = err.max((x5[i] - x4[i]).abs() / tol);
    }
    (x5, err, k.pop().unwrap())
}

/// The flow map of a triangular system under a stored control signal.
/// Supports reversed time (`t_to < t_from`); the control must be defined on
/// the closed interval between the two times.
pub fn simulate(
    sys: &TriangularSystem,
    t_from: f64,
    t_to: f64,
    x0: &StateVector,
    u: &Control,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, OdeError> {
    let (lo, hi) = (t_from.min(t_to), t_from.max(t_to));
    if !u.covers(lo, hi) {
        let (clo, chi) = u.domain();
        return Err(OdeError::ControlDomain { lo, hi, clo, chi });
    }
    let rhs = |t: f64, x: &DVector<f64>| {
        let uv = u.eval(t);
        sys.eval_rhs(t, x.as_slice(), uv.as_slice())
    };
    integrate(rhs, t_from, t_to, &x0.as_dvector(), cfg)
}

/// Right-hand side of the stage subsystem made of blocks `1..=p` where block
/// `p` receives `v` in place of `x_{p+1}`.
pub fn stage_rhs(sys: &TriangularSystem, p: usize, t: f64, y: &[f64], v: &[f64]) -> DVector<f64> {
    let k = sys.head_dim(p);
    assert_eq!(y.len(), k, "stage state length");
    let mut out = DVector::zeros(k);
    for i in 0..p {
        let head = &y[..sys.head_dim(i + 1)];
        let next = if i + 1 < p {
            &y[sys.head_dim(i + 1)..sys.head_dim(i + 2)]
        } else {
            v
        };
        let fi = sys.eval_block(i, t, head, next);
        out.rows_mut(sys.head_dim(i), sys.block_dim(i)).copy_from(&fi);
    }
    out
}

/// Sampled time-varying linearization of a stage subsystem along a path:
/// `A(t) = d(stage rhs)/dy`, `B(t) = d(stage rhs)/dv`. Entries are
/// interpolated linearly between samples.
#[derive(Debug, Clone)]
pub struct LtvSystem {
    times: Vec<f64>,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
}

impl LtvSystem {
    pub fn new(times: Vec<f64>, a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> Self {
        assert!(times.len() >= 2);
        assert_eq!(times.len(), a.len());
        assert_eq!(times.len(), b.len());
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|m| m.iter().all(|v| v.is_finite())), "A samples finite");
        assert!(b.iter().all(|m| m.iter().all(|v| v.is_finite())), "B samples finite");
        Self { times, a, b }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    fn weights(&self, t: f64) -> (usize, f64) {
        let (lo, hi) = self.domain();
        let t = t.clamp(lo, hi);
        let j = match self.times.binary_search_by(|b| b.partial_cmp(&t).unwrap()) {
            Ok(j) => j.min(self.times.len() - 2),
            Err(j) => j - 1,
        };
        let w = (t - self.times[j]) / (self.times[j + 1] - self.times[j]);
        (j, w)
    }

    pub fn a_at(&self, t: f64) -> DMatrix<f64> {
        let (j, w) = self.weights(t);
        &self.a[j] * (1.0 - w) + &self.a[j + 1] * w
    }

    pub fn b_at(&self, t: f64) -> DMatrix<f64> {
        let (j, w) = self.weights(t);
        &self.b[j] * (1.0 - w) + &self.b[j + 1] * w
    }
}

/// Samples the stage-p linearization along `(traj, u)` on `grid`.
pub fn linearize_along(
    sys: &TriangularSystem,
    p: usize,
    traj: &Trajectory,
    u: &Control,
    grid: &[f64],
) -> Result<LtvSystem, OdeError> {
    if traj.blown_up {
        return Err(OdeError::BlownUpTrajectory {
            t: traj.blow_up_time.unwrap_or(traj.last_time()),
        });
    }
    Ok(linearize_path(
        sys,
        p,
        |t| traj.state_at(t),
        |t| u.eval(t),
        grid,
    ))
}

/// Samples the stage-p linearization along an arbitrary `(y(t), v(t))` path.
pub fn linearize_path<Y, V>(
    sys: &TriangularSystem,
    p: usize,
    y_of_t: Y,
    v_of_t: V,
    grid: &[f64],
) -> LtvSystem
where
    Y: Fn(f64) -> DVector<f64>,
    V: Fn(f64) -> DVector<f64>,
{
    let k = sys.head_dim(p);
    let mut a_samples = Vec::with_capacity(grid.len());
    let mut b_samples = Vec::with_capacity(grid.len());
    for &t in grid {
        let y = y_of_t(t);
        let v = v_of_t(t);
        let (a, b) = stage_jacobians(sys, p, t, y.as_slice(), v.as_slice());
        debug_assert_eq!(a.nrows(), k);
        a_samples.push(a);
        b_samples.push(b);
    }
    LtvSystem::new(grid.to_vec(), a_samples, b_samples)
}

/// `(d/dy, d/dv)` of the stage-p right-hand side at `(t, y, v)`.
pub fn stage_jacobians(
    sys: &TriangularSystem,
    p: usize,
    t: f64,
    y: &[f64],
    v: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = sys.head_dim(p);
    let mut a = DMatrix::zeros(k, k);
    for i in 0..p {
        let head = &y[..sys.head_dim(i + 1)];
        let next: &[f64] = if i + 1 < p {
            &y[sys.head_dim(i + 1)..sys.head_dim(i + 2)]
        } else {
            v
        };
        let jh = sys.jac_block_head(i, t, head, next);
        a.view_mut((sys.head_dim(i), 0), (sys.block_dim(i), sys.head_dim(i + 1)))
            .copy_from(&jh);
        if i + 1 < p {
            let jn = sys.jac_block_next(i, t, head, next);
            a.view_mut(
                (sys.head_dim(i), sys.head_dim(i + 1)),
                (sys.block_dim(i), sys.block_dim(i + 1)),
            )
            .copy_from(&jn);
        }
    }
    let mut b = DMatrix::zeros(k, sys.block_dim(p));
    let jb = sys.jac_block_next(p - 1, t, &y[..k], v);
    b.view_mut(
        (sys.head_dim(p - 1), 0),
        (sys.block_dim(p - 1), sys.block_dim(p)),
    )
    .copy_from(&jb);
    (a, b)
}

/// Simulates the interpolated LTV dynamics `z' = A(t) z + B(t) w(t)`.
pub fn simulate_ltv<W>(
    ltv: &LtvSystem,
    t_from: f64,
    t_to: f64,
    z0: &DVector<f64>,
    w: W,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, OdeError>
where
    W: Fn(f64) -> DVector<f64>,
{
    let rhs = |t: f64, z: &DVector<f64>| ltv.a_at(t) * z + ltv.b_at(t) * w(t);
    integrate(rhs, t_from, t_to, z0, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::builtin;
    use approx::assert_abs_diff_eq;

    fn dblint_v1_control(t_end: f64) -> Control {
        // v1(t) = 6/T^2 - 12 t / T^3 is affine, so a single Hermite segment
        // represents it exactly.
        let v = |t: f64| 6.0 / t_end.powi(2) - 12.0 * t / t_end.powi(3);
        let d = -12.0 / t_end.powi(3);
        Control::cubic_hermite(
            vec![0.0, t_end],
            vec![vec![v(0.0)], vec![v(t_end)]],
            vec![vec![d], vec![d]],
        )
    }

    fn dblint_v2_control(t_end: f64) -> Control {
        let v = |t: f64| -2.0 / t_end + 6.0 * t / t_end.powi(2);
        let d = 6.0 / t_end.powi(2);
        Control::cubic_hermite(
            vec![0.0, t_end],
            vec![vec![v(0.0)], vec![v(t_end)]],
            vec![vec![d], vec![d]],
        )
    }

    #[test]
    fn explicit_double_integrator_controls_reach_unit_vectors() {
        let cfg = IntegratorConfig::default();
        for t_end in [0.5, 1.0, 2.0] {
            let sys = crate::registry::dblint_on(0.0, t_end);
            let x0 = StateVector::new(vec![0.0, 0.0], vec![1, 1]);
            let traj = simulate(&sys, 0.0, t_end, &x0, &dblint_v1_control(t_end), &cfg).unwrap();
            let end = traj.last_state();
            assert_abs_diff_eq!(end[0], 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(end[1], 0.0, epsilon = 1e-9);

            let traj = simulate(&sys, 0.0, t_end, &x0, &dblint_v2_control(t_end), &cfg).unwrap();
            let end = traj.last_state();
            assert_abs_diff_eq!(end[0], 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(end[1], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_length_interval_returns_initial_state() {
        let sys = builtin("dblint").unwrap();
        let x0 = StateVector::new(vec![0.25, -0.5], vec![1, 1]);
        let u = Control::constant(0.0, 1.0, vec![0.0]);
        let traj = simulate(&sys, 0.3, 0.3, &x0, &u, &IntegratorConfig::default()).unwrap();
        assert_eq!(traj.times().len(), 1);
        assert_eq!(traj.last_state().as_slice(), &[0.25, -0.5]);
    }

    #[test]
    fn control_domain_mismatch_is_an_error() {
        let sys = builtin("dblint").unwrap();
        let x0 = StateVector::new(vec![0.0, 0.0], vec![1, 1]);
        let u = Control::constant(0.0, 0.5, vec![0.0]);
        let err = simulate(&sys, 0.0, 1.0, &x0, &u, &IntegratorConfig::default()).unwrap_err();
        assert!(matches!(err, OdeError::ControlDomain { .. }));
    }

    #[test]
    fn reversed_time_matches_forward() {
        // Integrate forward, then from the endpoint backward; recover x0.
        let sys = builtin("example11").unwrap();
        let x0 = StateVector::new(vec![0.2, 2.7], vec![1, 1]);
        let u = Control::cubic_hermite(
            vec![0.0, 1.0],
            vec![vec![0.5], vec![-0.5]],
            vec![vec![0.0], vec![0.0]],
        );
        let cfg = IntegratorConfig::default();
        let fwd = simulate(&sys, 0.0, 1.0, &x0, &u, &cfg).unwrap();
        let xe = StateVector::new(fwd.last_state().as_slice().to_vec(), vec![1, 1]);
        let back = simulate(&sys, 1.0, 0.0, &xe, &u, &cfg).unwrap();
        assert!(back.times().windows(2).all(|w| w[0] < w[1]));
        let x_rec = back.first_state();
        assert_abs_diff_eq!(x_rec[0], 0.2, epsilon = 1e-7);
        assert_abs_diff_eq!(x_rec[1], 2.7, epsilon = 1e-7);
    }

    #[test]
    fn semigroup_property() {
        let sys = builtin("example11").unwrap();
        let x0 = StateVector::new(vec![0.0, 2.5], vec![1, 1]);
        let u = Control::cubic_hermite(
            vec![0.0, 1.0],
            vec![vec![1.0], vec![-1.0]],
            vec![vec![0.0], vec![0.0]],
        );
        let cfg = IntegratorConfig::with_tols(1e-10, 1e-10);
        let full = simulate(&sys, 0.0, 1.0, &x0, &u, &cfg).unwrap();
        let mid = full.state_at(0.4);
        let tail = simulate(
            &sys,
            0.4,
            1.0,
            &StateVector::new(mid.as_slice().to_vec(), vec![1, 1]),
            &u,
            &cfg,
        )
        .unwrap();
        let d = (full.last_state() - tail.last_state()).norm();
        assert!(d <= 10.0 * 1e-9, "semigroup defect {d}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        // Single-segment cubic control on the double integrator: the state
        // response is polynomial of degree 5, outside RK4's exactness class,
        // with a known closed form.
        let sys = builtin("dblint").unwrap();
        let u = Control::cubic_hermite(
            vec![0.0, 1.0],
            vec![vec![1.0], vec![3.0]],
            vec![vec![-8.0], vec![10.0]],
        );
        // u(t) = 1 + c1 t + c2 t^2 + c3 t^3 reconstructed from Hermite data.
        let a = u.eval(0.0)[0];
        let b = u.eval_deriv(0.0)[0];
        let (v1, d1) = (u.eval(1.0)[0], u.eval_deriv(1.0)[0]);
        let c2 = 3.0 * (v1 - a) - 2.0 * b - d1;
        let c3 = -2.0 * (v1 - a) + b + d1;
        let x2_exact = a + b / 2.0 + c2 / 3.0 + c3 / 4.0;
        let x1_exact = a / 2.0 + b / 6.0 + c2 / 12.0 + c3 / 20.0;
        let x0 = StateVector::new(vec![0.0, 0.0], vec![1, 1]);

        let endpoint_err = |step: f64| {
            let cfg = IntegratorConfig {
                method: Method::FixedRk4 { step },
                guard_radius: 1e6,
            };
            let traj = simulate(&sys, 0.0, 1.0, &x0, &u, &cfg).unwrap();
            let e = traj.last_state();
            ((e[0] - x1_exact).powi(2) + (e[1] - x2_exact).powi(2)).sqrt()
        };
        let e1 = endpoint_err(0.1);
        let e2 = endpoint_err(0.05);
        assert!(e1 / e2 >= 8.0, "order ratio {} (e1={e1:.3e}, e2={e2:.3e})", e1 / e2);
    }

    #[test]
    fn blow_up_guard_stops_integration() {
        let sys = builtin("dblint").unwrap();
        let x0 = StateVector::new(vec![0.0, 0.0], vec![1, 1]);
        let u = Control::constant(0.0, 100.0, vec![1e4]);
        let cfg = IntegratorConfig {
            method: Method::AdaptiveRk45 {
                abs_tol: 1e-6,
                rel_tol: 1e-6,
            },
            guard_radius: 1e3,
        };
        let traj = simulate(&sys, 0.0, 100.0, &x0, &u, &cfg).unwrap();
        assert!(traj.blown_up);
        let t_blow = traj.blow_up_time.unwrap();
        assert!(t_blow > 0.0 && t_blow <= 100.0);
        assert!(traj.last_state().norm() >= 1e3 * 0.99);
    }

    #[test]
    fn linearize_dblint_is_constant() {
        let sys = builtin("dblint").unwrap();
        let x0 = StateVector::new(vec![0.0, 0.0], vec![1, 1]);
        let u = Control::constant(0.0, 1.0, vec![0.3]);
        let traj = simulate(&sys, 0.0, 1.0, &x0, &u, &IntegratorConfig::default()).unwrap();
        let grid: Vec<f64> = (0..=8).map(|q| q as f64 / 8.0).collect();
        let ltv = linearize_along(&sys, 2, &traj, &u, &grid).unwrap();
        for &t in &grid {
            let a = ltv.a_at(t);
            assert_abs_diff_eq!(a[(0, 1)], 1.0, epsilon = 1e-7);
            assert_abs_diff_eq!(a[(0, 0)], 0.0, epsilon = 1e-7);
            assert_abs_diff_eq!(a[(1, 0)], 0.0, epsilon = 1e-7);
            assert_abs_diff_eq!(a[(1, 1)], 0.0, epsilon = 1e-7);
            let b = ltv.b_at(t);
            assert_abs_diff_eq!(b[(0, 0)], 0.0, epsilon = 1e-7);
            assert_abs_diff_eq!(b[(1, 0)], 1.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn linearize_example11_flat_and_active() {
        let sys = builtin("example11").unwrap();
        let u = Control::constant(0.0, 1.0, vec![0.0]);
        // Flat branch: x2 = 1 => dg/dx2 = 0.
        let mk_traj = |x2: f64| {
            let times = vec![0.0, 0.5, 1.0];
            let states: Vec<_> = times
                .iter()
                .map(|_| nalgebra::dvector![0.0, x2])
                .collect();
            let derivs: Vec<_> = times.iter().map(|_| nalgebra::dvector![0.0, 0.0]).collect();
            Trajectory::new(times, states, derivs)
        };
        let grid = vec![0.0, 0.5, 1.0];
        let ltv = linearize_along(&sys, 2, &mk_traj(1.0), &u, &grid).unwrap();
        assert_abs_diff_eq!(ltv.a_at(0.5)[(0, 1)], 0.0, epsilon = 1e-9);
        // Active branch: dg/dx2 at 3 equals 2 sin(1) + cos(1).
        let ltv = linearize_along(&sys, 2, &mk_traj(3.0), &u, &grid).unwrap();
        let expected = 2.0 * 1.0_f64.sin() + 1.0_f64.cos();
        assert_abs_diff_eq!(ltv.a_at(0.5)[(0, 1)], expected, epsilon = 1e-6);
        assert_abs_diff_eq!(expected, 2.2232442754839328, epsilon = 1e-12);
    }

    #[test]
    fn fd_jacobians_match_analytic() {
        // dblint with installed analytic Jacobians: compare against the
        // finite-difference fallback on random points.
        use rand::{Rng, SeedableRng};
        let sys_fd = builtin("dblint").unwrap();
        let sys_an = crate::registry::dblint_analytic();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let y = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let v = [rng.gen_range(-3.0..3.0)];
            let (a1, b1) = stage_jacobians(&sys_fd, 2, t, &y, &v);
            let (a2, b2) = stage_jacobians(&sys_an, 2, t, &y, &v);
            assert!((a1 - a2).norm() < 1e-5);
            assert!((b1 - b2).norm() < 1e-5);
        }
    }

    #[test]
    fn monitored_integration_stops_at_crossing() {
        let rhs = |_t: f64, _x: &DVector<f64>| nalgebra::dvector![1.0];
        let (traj, stop) = integrate_monitored(
            rhs,
            0.0,
            1.0,
            &nalgebra::dvector![0.0],
            &IntegratorConfig::default(),
            |_t, x| x[0] >= 0.35,
        )
        .unwrap();
        let stop = stop.unwrap();
        assert_abs_diff_eq!(stop, 0.35, epsilon = 1e-6);
        assert_abs_diff_eq!(traj.last_time(), stop, epsilon = 1e-12);
    }
}
