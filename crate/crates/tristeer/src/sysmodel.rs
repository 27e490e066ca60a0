//! Triangular system definitions, state partitioning and control signals.
//!
//! A triangular system with `nu` blocks has state `x = (x_1, ..., x_nu)`
//! with `x_i` of dimension `m_i`, and block dynamics
//! `d/dt x_i = f_i(t, x_1, ..., x_i, x_{i+1})` where the last block receives
//! the control `u = x_{nu+1}`. The dimension chain `m_i <= m_{i+1}` is
//! enforced on construction.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Block right-hand side: `(t, head, next) -> R^{m_i}` where `head` is the
/// concatenation of `x_1..x_i` and `next` is `x_{i+1}` (the control for the
/// last block). Must be pure and reentrant.
pub type BlockFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Analytic Jacobian callback with the same argument layout as [`BlockFn`].
pub type BlockJacFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> DMatrix<f64> + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum SysError {
    #[error("dimension chain violated: m_{i} = {mi} > m_{} = {minext}", i + 1)]
    DimensionChain { i: usize, mi: usize, minext: usize },
    #[error("dims must contain at least two positive entries")]
    BadDims,
    #[error("expected {expected} blocks, got {got}")]
    BlockCount { expected: usize, got: usize },
}

/// A cascade system block structure on a fixed time window.
#[derive(Clone)]
pub struct TriangularSystem {
    dims: Vec<usize>,
    blocks: Vec<BlockFn>,
    jac_x: Vec<Option<BlockJacFn>>,
    jac_next: Vec<Option<BlockJacFn>>,
    t0: f64,
    t_end: f64,
}

impl fmt::Debug for TriangularSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TriangularSystem")
            .field("dims", &self.dims)
            .field("t0", &self.t0)
            .field("T", &self.t_end)
            .finish()
    }
}

impl TriangularSystem {
    /// `dims` is `m_1..m_{nu+1}` (the last entry is the control dimension).
    pub fn new(
        dims: Vec<usize>,
        blocks: Vec<BlockFn>,
        t0: f64,
        t_end: f64,
    ) -> Result<Self, SysError> {
        if dims.len() < 2 || dims.iter().any(|&m| m == 0) {
            return Err(SysError::BadDims);
        }
        for i in 0..dims.len() - 1 {
            if dims[i] > dims[i + 1] {
                return Err(SysError::DimensionChain {
                    i,
                    mi: dims[i],
                    minext: dims[i + 1],
                });
            }
        }
        let nu = dims.len() - 1;
        if blocks.len() != nu {
            return Err(SysError::BlockCount {
                expected: nu,
                got: blocks.len(),
            });
        }
        Ok(Self {
            jac_x: vec![None; nu],
            jac_next: vec![None; nu],
            dims,
            blocks,
            t0,
            t_end,
        })
    }

    /// Installs analytic Jacobians for block `i` (zero-based): `jac_x` is
    /// the derivative w.r.t. the head `(x_1..x_i)`, `jac_next` w.r.t.
    /// `x_{i+1}`. Finite differences are used for blocks without callbacks.
    pub fn with_block_jacobians(
        mut self,
        i: usize,
        jac_x: Option<BlockJacFn>,
        jac_next: Option<BlockJacFn>,
    ) -> Self {
        self.jac_x[i] = jac_x;
        self.jac_next[i] = jac_next;
        self
    }

    pub fn nu(&self) -> usize {
        self.dims.len() - 1
    }

    /// All of `m_1..m_{nu+1}`.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// State dimension `n = m_1 + ... + m_nu`.
    pub fn state_dim(&self) -> usize {
        self.dims[..self.nu()].iter().sum()
    }

    pub fn control_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn block_dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    /// `m_1 + ... + m_i` (head length of block i, zero-based: head_dim(0) = 0).
    pub fn head_dim(&self, i: usize) -> usize {
        self.dims[..i].iter().sum()
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    /// State partition `m_1..m_nu`.
    pub fn state_dims(&self) -> Vec<usize> {
        self.dims[..self.nu()].to_vec()
    }

    /// Evaluates block `i` (zero-based); `head` is `x_1..x_{i+1}` in block
    /// units (the block's own coordinates included). Panics on argument
    /// length mismatch.
    pub fn eval_block(&self, i: usize, t: f64, head: &[f64], next: &[f64]) -> DVector<f64> {
        assert_eq!(head.len(), self.head_dim(i + 1), "block {i} head length");
        assert_eq!(next.len(), self.dims[i + 1], "block {i} next length");
        let out = (self.blocks[i])(t, head, next);
        assert_eq!(out.len(), self.dims[i], "block {i} output length");
        DVector::from_vec(out)
    }

    /// Stacked block outputs `(f_1, ..., f_nu)`. Panics on dimension mismatch.
    pub fn eval_rhs(&self, t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        let nu = self.nu();
        assert_eq!(x.len(), self.state_dim(), "state length");
        assert_eq!(u.len(), self.control_dim(), "control length");
        let mut out = DVector::zeros(self.state_dim());
        for i in 0..nu {
            let head = &x[..self.head_dim(i + 1)];
            let next = if i + 1 < nu {
                &x[self.head_dim(i + 1)..self.head_dim(i + 2)]
            } else {
                u
            };
            let fi = self.eval_block(i, t, head, next);
            out.rows_mut(self.head_dim(i), self.dims[i]).copy_from(&fi);
        }
        out
    }

    /// `d f_i / d x_{i+1}`, analytic when installed, else central differences.
    pub fn jac_block_next(&self, i: usize, t: f64, head: &[f64], next: &[f64]) -> DMatrix<f64> {
        if let Some(jac) = &self.jac_next[i] {
            return jac(t, head, next);
        }
        fd_jacobian(next, self.dims[i], |v| self.eval_block(i, t, head, v))
    }

    /// `d f_i / d (x_1..x_i)`, analytic when installed, else central differences.
    pub fn jac_block_head(&self, i: usize, t: f64, head: &[f64], next: &[f64]) -> DMatrix<f64> {
        if let Some(jac) = &self.jac_x[i] {
            return jac(t, head, next);
        }
        fd_jacobian(head, self.dims[i], |h| self.eval_block(i, t, h, next))
    }

    /// The system run backwards through the window `[a, b]`: block i becomes
    /// `g_i(s, .) = -f_i(a + b - s, .)` on the window `[a, b]`. A trajectory
    /// of the reversed system traversed in reverse time is a trajectory of
    /// the original one.
    pub fn reversed(&self, a: f64, b: f64) -> TriangularSystem {
        let blocks: Vec<BlockFn> = self
            .blocks
            .iter()
            .map(|f| {
                let f = f.clone();
                let s: BlockFn = Arc::new(move |t, head, next| {
                    let mut out = f(a + b - t, head, next);
                    for v in &mut out {
                        *v = -*v;
                    }
                    out
                });
                s
            })
            .collect();
        let wrap = |jacs: &[Option<BlockJacFn>]| -> Vec<Option<BlockJacFn>> {
            jacs.iter()
                .map(|j| {
                    j.as_ref().map(|j| {
                        let j = j.clone();
                        let s: BlockJacFn = Arc::new(move |t, head, next| -j(a + b - t, head, next));
                        s
                    })
                })
                .collect()
        };
        TriangularSystem {
            dims: self.dims.clone(),
            blocks,
            jac_x: wrap(&self.jac_x),
            jac_next: wrap(&self.jac_next),
            t0: a,
            t_end: b,
        }
    }
}

/// Central finite-difference Jacobian with step `1e-6 * max(1, |x_j|)`.
pub fn fd_jacobian<F>(x: &[f64], rows: usize, f: F) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let mut jac = DMatrix::zeros(rows, x.len());
    let mut work = x.to_vec();
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        work[j] = x[j] + h;
        let fp = f(&work);
        work[j] = x[j] - h;
        let fm = f(&work);
        work[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// A state with its block partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    data: Vec<f64>,
    dims: Vec<usize>,
}

impl StateVector {
    pub fn new(data: Vec<f64>, dims: Vec<usize>) -> Self {
        assert_eq!(data.len(), dims.iter().sum::<usize>(), "partition length");
        Self { data, dims }
    }

    pub fn from_blocks(blocks: &[Vec<f64>]) -> Self {
        let dims = blocks.iter().map(|b| b.len()).collect();
        let data = blocks.concat();
        Self { data, dims }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Block `i` (zero-based) as a slice of length `m_{i+1}`.
    pub fn block(&self, i: usize) -> &[f64] {
        let lo: usize = self.dims[..i].iter().sum();
        &self.data[lo..lo + self.dims[i]]
    }

    pub fn blocks(&self) -> Vec<Vec<f64>> {
        (0..self.dims.len()).map(|i| self.block(i).to_vec()).collect()
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }
}

/// Evaluates the two cubic Hermite basis pairs at `s in [0, 1]`.
///
/// Returns `(h00, h10, h01, h11)` with the property that at `s = 0` and
/// `s = 1` the values are exactly `(1,0,0,0)` and `(0,0,1,0)` in floating
/// point, so endpoint evaluation reproduces stored node data bit-for-bit.
#[inline]
fn hermite_basis(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        2.0 * s3 - 3.0 * s2 + 1.0,
        s3 - 2.0 * s2 + s,
        -2.0 * s3 + 3.0 * s2,
        s3 - s2,
    )
}

#[inline]
fn hermite_basis_deriv(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    (
        6.0 * s2 - 6.0 * s,
        3.0 * s2 - 4.0 * s + 1.0,
        -6.0 * s2 + 6.0 * s,
        3.0 * s2 - 2.0 * s,
    )
}

/// One cubic segment in Hermite form (value and slope at both ends). Slopes
/// are in real time units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicSeg {
    pub v_lo: Vec<f64>,
    pub d_lo: Vec<f64>,
    pub v_hi: Vec<f64>,
    pub d_hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlData {
    /// One value per segment, held constant.
    Constant(Vec<Vec<f64>>),
    /// One Hermite segment per breakpoint interval.
    Cubic(Vec<CubicSeg>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlKind {
    PiecewiseConstant,
    PiecewiseCubic,
}

/// A time-parameterized input signal on `[breaks[0], breaks[last]]`.
///
/// Piecewise-cubic controls built through [`Control::cubic_hermite`] share
/// node values and slopes across interior breakpoints and are therefore C¹
/// there to machine precision. Evaluation at a breakpoint returns the stored
/// node data exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    dim: usize,
    breaks: Vec<f64>,
    #[serde(rename = "coefficients")]
    data: ControlData,
}

impl Control {
    pub fn piecewise_constant(breaks: Vec<f64>, values: Vec<Vec<f64>>) -> Self {
        assert!(breaks.len() >= 2, "need at least one segment");
        assert_eq!(values.len(), breaks.len() - 1, "one value per segment");
        assert!(
            breaks.windows(2).all(|w| w[0] < w[1]),
            "breakpoints must be strictly increasing"
        );
        let dim = values[0].len();
        assert!(values.iter().all(|v| v.len() == dim));
        Self {
            dim,
            breaks,
            data: ControlData::Constant(values),
        }
    }

    /// C¹ cubic Hermite spline through `(times[i], values[i])` with slopes
    /// `derivs[i]`.
    pub fn cubic_hermite(times: Vec<f64>, values: Vec<Vec<f64>>, derivs: Vec<Vec<f64>>) -> Self {
        assert!(times.len() >= 2);
        assert_eq!(values.len(), times.len());
        assert_eq!(derivs.len(), times.len());
        assert!(
            times.windows(2).all(|w| w[0] < w[1]),
            "breakpoints must be strictly increasing"
        );
        let dim = values[0].len();
        let segs = (0..times.len() - 1)
            .map(|j| CubicSeg {
                v_lo: values[j].clone(),
                d_lo: derivs[j].clone(),
                v_hi: values[j + 1].clone(),
                d_hi: derivs[j + 1].clone(),
            })
            .collect();
        Self {
            dim,
            breaks: times,
            data: ControlData::Cubic(segs),
        }
    }

    /// Constant signal as a (single segment) piecewise-cubic control.
    pub fn constant(a: f64, b: f64, value: Vec<f64>) -> Self {
        let zero = vec![0.0; value.len()];
        Control::cubic_hermite(vec![a, b], vec![value.clone(), value], vec![zero.clone(), zero])
    }

    pub fn kind(&self) -> ControlKind {
        match self.data {
            ControlData::Constant(_) => ControlKind::PiecewiseConstant,
            ControlData::Cubic(_) => ControlKind::PiecewiseCubic,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.breaks[0], *self.breaks.last().unwrap())
    }

    pub fn covers(&self, a: f64, b: f64) -> bool {
        let (lo, hi) = self.domain();
        let slack = 1e-9 * (hi - lo).max(1.0);
        a.min(b) >= lo - slack && a.max(b) <= hi + slack
    }

    /// Segment index such that `t` lies in `[breaks[j], breaks[j+1])`, with
    /// the final breakpoint assigned to the last segment.
    fn segment_of(&self, t: f64) -> (usize, f64) {
        let (lo, hi) = self.domain();
        let slack = 1e-9 * (hi - lo).max(1.0);
        assert!(
            t >= lo - slack && t <= hi + slack,
            "control evaluated at t = {t} outside [{lo}, {hi}]"
        );
        let t = t.clamp(lo, hi);
        let j = match self.breaks.binary_search_by(|b| b.partial_cmp(&t).unwrap()) {
            Ok(j) => j.min(self.breaks.len() - 2),
            Err(j) => j - 1,
        };
        (j, t)
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let (j, t) = self.segment_of(t);
        match &self.data {
            ControlData::Constant(values) => DVector::from_column_slice(&values[j]),
            ControlData::Cubic(segs) => {
                let seg = &segs[j];
                let h = self.breaks[j + 1] - self.breaks[j];
                // Map the final breakpoint exactly to s = 1.
                let s = if t == self.breaks[j + 1] {
                    1.0
                } else {
                    (t - self.breaks[j]) / h
                };
                let (h00, h10, h01, h11) = hermite_basis(s);
                DVector::from_fn(self.dim, |i, _| {
                    h00 * seg.v_lo[i]
                        + h10 * h * seg.d_lo[i]
                        + h01 * seg.v_hi[i]
                        + h11 * h * seg.d_hi[i]
                })
            }
        }
    }

    /// Time derivative; zero inside piecewise-constant segments. At an
    /// interior breakpoint returns the left segment's one-sided derivative
    /// for constants and the shared node slope for C¹ splines.
    pub fn eval_deriv(&self, t: f64) -> DVector<f64> {
        let (j, t) = self.segment_of(t);
        match &self.data {
            ControlData::Constant(_) => DVector::zeros(self.dim),
            ControlData::Cubic(segs) => {
                let seg = &segs[j];
                let h = self.breaks[j + 1] - self.breaks[j];
                let s = if t == self.breaks[j + 1] {
                    1.0
                } else {
                    (t - self.breaks[j]) / h
                };
                let (g00, g10, g01, g11) = hermite_basis_deriv(s);
                DVector::from_fn(self.dim, |i, _| {
                    (g00 * seg.v_lo[i] + g01 * seg.v_hi[i]) / h + g10 * seg.d_lo[i] + g11 * seg.d_hi[i]
                })
            }
        }
    }

    /// Largest value/slope mismatch across interior breakpoints (0 for
    /// splines built from shared nodes; concatenations may carry a
    /// value-continuous junction with a slope kink).
    pub fn c1_defect(&self) -> f64 {
        match &self.data {
            ControlData::Constant(values) => values
                .windows(2)
                .map(|w| {
                    w[0].iter()
                        .zip(&w[1])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max),
            ControlData::Cubic(segs) => segs
                .windows(2)
                .map(|w| {
                    let v = w[0]
                        .v_hi
                        .iter()
                        .zip(&w[1].v_lo)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    let d = w[0]
                        .d_hi
                        .iter()
                        .zip(&w[1].d_lo)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    v.max(d)
                })
                .fold(0.0, f64::max),
        }
    }

    /// Inserts breakpoints (cubic only). Node data at inserted points is the
    /// evaluated value/slope, which reproduces the same piecewise polynomial.
    pub fn refined(&self, extra: &[f64]) -> Control {
        assert!(
            matches!(self.data, ControlData::Cubic(_)),
            "refined is only defined for piecewise-cubic controls"
        );
        let (lo, hi) = self.domain();
        let mut all: Vec<f64> = self.breaks.clone();
        for &t in extra {
            assert!(t >= lo && t <= hi, "refinement point outside domain");
            if self
                .breaks
                .iter()
                .chain(all.iter())
                .all(|&b| b != t)
            {
                all.push(t);
            }
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.dedup();
        let mut out = Vec::with_capacity(all.len() - 1);
        for w in all.windows(2) {
            let (j, _) = self.segment_of(w[0]);
            let _ = j;
            out.push(CubicSeg {
                v_lo: self.eval(w[0]).as_slice().to_vec(),
                d_lo: self.eval_deriv_right(w[0]).as_slice().to_vec(),
                v_hi: self.eval(w[1]).as_slice().to_vec(),
                d_hi: if w[1] == hi {
                    self.eval_deriv(w[1]).as_slice().to_vec()
                } else {
                    self.eval_deriv_right_limit_at(w[1]).as_slice().to_vec()
                },
            });
        }
        // For interior inserted points the left/right slopes agree unless the
        // original control had a junction kink exactly there; segment data is
        // taken side-correctly above so kinks are preserved.
        Control {
            dim: self.dim,
            breaks: all,
            data: ControlData::Cubic(out),
        }
    }

    fn eval_deriv_right(&self, t: f64) -> DVector<f64> {
        // Right-sided slope: evaluate in the segment that starts at t when t
        // is a breakpoint other than the last.
        let (hi_idx, hi) = (self.breaks.len() - 1, self.domain().1);
        if t == hi {
            return self.eval_deriv(t);
        }
        let j = match self.breaks.binary_search_by(|b| b.partial_cmp(&t).unwrap()) {
            Ok(j) => j.min(hi_idx - 1),
            Err(j) => j - 1,
        };
        let ControlData::Cubic(segs) = &self.data else { unreachable!() };
        let seg = &segs[j];
        let h = self.breaks[j + 1] - self.breaks[j];
        let s = (t - self.breaks[j]) / h;
        let (g00, g10, g01, g11) = hermite_basis_deriv(s);
        DVector::from_fn(self.dim, |i, _| {
            (g00 * seg.v_lo[i] + g01 * seg.v_hi[i]) / h + g10 * seg.d_lo[i] + g11 * seg.d_hi[i]
        })
    }

    fn eval_deriv_right_limit_at(&self, t: f64) -> DVector<f64> {
        // Left-sided slope at an interior point (end of the segment to its left).
        let j = match self.breaks.binary_search_by(|b| b.partial_cmp(&t).unwrap()) {
            Ok(j) if j > 0 => j - 1,
            Ok(j) => j,
            Err(j) => j - 1,
        };
        let ControlData::Cubic(segs) = &self.data else { unreachable!() };
        let seg = &segs[j];
        let h = self.breaks[j + 1] - self.breaks[j];
        let s = if t == self.breaks[j + 1] { 1.0 } else { (t - self.breaks[j]) / h };
        let (g00, g10, g01, g11) = hermite_basis_deriv(s);
        DVector::from_fn(self.dim, |i, _| {
            (g00 * seg.v_lo[i] + g01 * seg.v_hi[i]) / h + g10 * seg.d_lo[i] + g11 * seg.d_hi[i]
        })
    }

    /// `self + sum_j coeffs[j] * others[j]` at the coefficient level.
    /// All controls must be cubic on the same domain; breakpoints are merged
    /// exactly before combining.
    pub fn affine_combine(&self, others: &[(&Control, f64)]) -> Control {
        let mut union: Vec<f64> = self.breaks.clone();
        for (c, _) in others {
            assert_eq!(c.dim, self.dim);
            union.extend_from_slice(&c.breaks);
        }
        union.sort_by(|a, b| a.partial_cmp(b).unwrap());
        union.dedup();
        let base = self.refined(&union);
        let refined: Vec<Control> = others.iter().map(|(c, _)| c.refined(&union)).collect();
        let ControlData::Cubic(mut segs) = base.data else { unreachable!() };
        for (k, (_, w)) in others.iter().enumerate() {
            let ControlData::Cubic(osegs) = &refined[k].data else { unreachable!() };
            for (seg, oseg) in segs.iter_mut().zip(osegs) {
                for i in 0..self.dim {
                    seg.v_lo[i] += w * oseg.v_lo[i];
                    seg.d_lo[i] += w * oseg.d_lo[i];
                    seg.v_hi[i] += w * oseg.v_hi[i];
                    seg.d_hi[i] += w * oseg.d_hi[i];
                }
            }
        }
        Control {
            dim: self.dim,
            breaks: base.breaks,
            data: ControlData::Cubic(segs),
        }
    }

    /// Joins two cubic controls end to start. Node data at the junction is
    /// kept per side, so a value-continuous junction with a slope kink is
    /// representable.
    pub fn concat(&self, right: &Control) -> Control {
        assert_eq!(self.dim, right.dim);
        let (_, hi) = self.domain();
        let (rlo, _) = right.domain();
        assert!(
            hi == rlo,
            "concat requires touching domains (left ends at {hi}, right starts at {rlo})"
        );
        let (ControlData::Cubic(a), ControlData::Cubic(b)) = (&self.data, &right.data) else {
            panic!("concat is only defined for piecewise-cubic controls");
        };
        let mut breaks = self.breaks.clone();
        breaks.extend_from_slice(&right.breaks[1..]);
        let mut segs = a.clone();
        segs.extend_from_slice(b);
        Control {
            dim: self.dim,
            breaks,
            data: ControlData::Cubic(segs),
        }
    }

    /// The signal run through the substitution `t -> about - t` (time
    /// reflection); slopes change sign. Exact at the coefficient level.
    pub fn reversed(&self, about: f64) -> Control {
        let breaks: Vec<f64> = self.breaks.iter().rev().map(|&b| about - b).collect();
        let data = match &self.data {
            ControlData::Constant(values) => {
                ControlData::Constant(values.iter().rev().cloned().collect())
            }
            ControlData::Cubic(segs) => ControlData::Cubic(
                segs.iter()
                    .rev()
                    .map(|s| CubicSeg {
                        v_lo: s.v_hi.clone(),
                        d_lo: s.d_hi.iter().map(|d| -d).collect(),
                        v_hi: s.v_lo.clone(),
                        d_hi: s.d_lo.iter().map(|d| -d).collect(),
                    })
                    .collect(),
            ),
        };
        Control {
            dim: self.dim,
            breaks,
            data,
        }
    }

    /// Restriction to `[a, b]` (cubic only), with exact node insertion at the cut points.
    pub fn restricted(&self, a: f64, b: f64) -> Control {
        assert!(a < b);
        let refined = self.refined(&[a, b]);
        let lo = refined.breaks.iter().position(|&t| t == a).unwrap();
        let hi = refined.breaks.iter().position(|&t| t == b).unwrap();
        let ControlData::Cubic(segs) = &refined.data else { unreachable!() };
        Control {
            dim: self.dim,
            breaks: refined.breaks[lo..=hi].to_vec(),
            data: ControlData::Cubic(segs[lo..hi].to_vec()),
        }
    }

    /// Sup norm of the max-abs component, sampled densely per segment plus
    /// at all nodes.
    pub fn sup_norm(&self, samples_per_seg: usize) -> f64 {
        let mut best: f64 = 0.0;
        for j in 0..self.breaks.len() - 1 {
            for q in 0..=samples_per_seg {
                let t = self.breaks[j]
                    + (self.breaks[j + 1] - self.breaks[j]) * q as f64 / samples_per_seg as f64;
                best = best.max(self.eval(t).amax());
            }
        }
        best
    }
}

/// A dense-output state path: cubic Hermite interpolation between stored
/// samples, with a blow-up marker when the guard radius was exceeded.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    derivs: Vec<DVector<f64>>,
    pub blown_up: bool,
    pub blow_up_time: Option<f64>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<DVector<f64>>, derivs: Vec<DVector<f64>>) -> Self {
        assert_eq!(times.len(), states.len());
        assert_eq!(times.len(), derivs.len());
        assert!(times.windows(2).all(|w| w[0] < w[1]), "times must increase");
        Self {
            times,
            states,
            derivs,
            blown_up: false,
            blow_up_time: None,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn first_time(&self) -> f64 {
        self.times[0]
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn first_state(&self) -> &DVector<f64> {
        &self.states[0]
    }

    pub fn last_state(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }

    /// Interpolated state; returns the stored sample exactly when `t` is a
    /// sample time.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        let (lo, hi) = (self.first_time(), self.last_time());
        let slack = 1e-9 * (hi - lo).max(1.0);
        assert!(
            t >= lo - slack && t <= hi + slack,
            "trajectory queried at t = {t} outside [{lo}, {hi}]"
        );
        let t = t.clamp(lo, hi);
        let j = match self.times.binary_search_by(|b| b.partial_cmp(&t).unwrap()) {
            Ok(j) => return self.states[j].clone(),
            Err(j) => j - 1,
        };
        let h = self.times[j + 1] - self.times[j];
        let s = (t - self.times[j]) / h;
        let (h00, h10, h01, h11) = hermite_basis(s);
        &self.states[j] * h00
            + &self.derivs[j] * (h10 * h)
            + &self.states[j + 1] * h01
            + &self.derivs[j + 1] * (h11 * h)
    }

    pub fn deriv_at(&self, t: f64) -> DVector<f64> {
        let t = t.clamp(self.first_time(), self.last_time());
        let j = match self.times.binary_search_by(|b| b.partial_cmp(&t).unwrap()) {
            Ok(j) => return self.derivs[j].clone(),
            Err(j) => j - 1,
        };
        let h = self.times[j + 1] - self.times[j];
        let s = (t - self.times[j]) / h;
        let (g00, g10, g01, g11) = hermite_basis_deriv(s);
        &self.states[j] * (g00 / h)
            + &self.derivs[j] * g10
            + &self.states[j + 1] * (g01 / h)
            + &self.derivs[j + 1] * g11
    }
}

/// Structural diagnostics for [`validate_system`]. `violations` empty means
/// every checkable condition passed; `assumptions` lists conditions that are
/// not decidable from point evaluations and remain user-asserted.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    pub assumptions: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the dimension chain and probes each block at random points for
/// declared output length and finite values. Surjectivity of the blocks in
/// their next argument and the required smoothness cannot be decided from
/// point probes and are reported as unchecked assumptions.
pub fn validate_system(sys: &TriangularSystem, probes: usize, seed: u64) -> ValidationReport {
    let mut report = ValidationReport::default();
    let dims = sys.dims();
    for i in 0..dims.len() - 1 {
        if dims[i] > dims[i + 1] {
            report
                .violations
                .push(format!("m_{} > m_{}: {} > {}", i + 1, i + 2, dims[i], dims[i + 1]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..sys.nu() {
        for _ in 0..probes {
            let t = sys.t0() + rng.gen::<f64>() * (sys.t_end() - sys.t0());
            let head: Vec<f64> = (0..sys.head_dim(i + 1))
                .map(|_| rng.gen_range(-5.0..5.0))
                .collect();
            let next: Vec<f64> = (0..dims[i + 1]).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let out = (sys.blocks[i])(t, &head, &next);
            if out.len() != dims[i] {
                report.violations.push(format!(
                    "block {} returned length {} (expected {}) at t = {t}",
                    i + 1,
                    out.len(),
                    dims[i]
                ));
                break;
            }
            if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
                report.violations.push(format!(
                    "block {} returned non-finite component {pos} at t = {t}, head = {head:?}, next = {next:?}",
                    i + 1
                ));
                break;
            }
        }
    }
    report.assumptions.push(
        "surjectivity of each block in its next argument (and the required smoothness) \
         is an unchecked assumption"
            .to_string(),
    );
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn example11() -> TriangularSystem {
        crate::registry::builtin("example11").unwrap()
    }

    fn dblint() -> TriangularSystem {
        crate::registry::builtin("dblint").unwrap()
    }

    #[test]
    fn dimension_chain_rejected() {
        let blocks: Vec<BlockFn> = vec![
            Arc::new(|_, _, next: &[f64]| vec![next[0], next[0]]),
            Arc::new(|_, _, next: &[f64]| vec![next[0]]),
        ];
        let err = TriangularSystem::new(vec![2, 1, 1], blocks, 0.0, 1.0).unwrap_err();
        assert!(matches!(err, SysError::DimensionChain { i: 0, .. }));
    }

    #[test]
    fn validate_flags_chain_and_nan() {
        let blocks: Vec<BlockFn> = vec![
            Arc::new(|_, _, next: &[f64]| vec![(next[0] - 2.0).ln()]),
            Arc::new(|_, _, next: &[f64]| vec![next[0]]),
        ];
        let sys = TriangularSystem::new(vec![1, 1, 1], blocks, 0.0, 1.0).unwrap();
        let report = validate_system(&sys, 64, 7);
        assert!(!report.is_ok());
        assert!(report.violations[0].contains("block 1"));
        assert_eq!(report.assumptions.len(), 1);
    }

    #[test]
    fn validate_example11_clean() {
        let report = validate_system(&example11(), 64, 7);
        assert!(report.is_ok(), "{:?}", report.violations);
        assert!(report.assumptions[0].contains("unchecked"));
    }

    #[test]
    fn eval_rhs_example11_flat_and_active_branch() {
        let sys = example11();
        let rhs = sys.eval_rhs(0.3, &[0.5, 1.0], &[0.7]);
        assert_eq!(rhs[0], 0.0);
        assert_eq!(rhs[1], 0.7);
        let rhs = sys.eval_rhs(0.3, &[0.5, 3.0], &[0.0]);
        assert_abs_diff_eq!(rhs[0], 1.0_f64.sin(), epsilon = 1e-15);
    }

    #[test]
    fn eval_rhs_dblint() {
        let sys = dblint();
        let rhs = sys.eval_rhs(0.0, &[0.0, 1.0], &[0.0]);
        assert_eq!(rhs.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn reversed_system_negates_and_reflects_time() {
        let sys = example11();
        let rev = sys.reversed(0.0, 0.5);
        let orig = sys.eval_rhs(0.5 - 0.2, &[0.1, 3.0], &[0.4]);
        let back = rev.eval_rhs(0.2, &[0.1, 3.0], &[0.4]);
        assert_abs_diff_eq!(orig[0], -back[0], epsilon = 1e-15);
        assert_abs_diff_eq!(orig[1], -back[1], epsilon = 1e-15);
    }

    #[test]
    fn control_constant_and_hermite_endpoints_exact() {
        let c = Control::cubic_hermite(
            vec![0.0, 0.4, 1.0],
            vec![vec![1.0], vec![-2.0], vec![0.5]],
            vec![vec![0.25], vec![1.0], vec![-0.125]],
        );
        assert_eq!(c.eval(0.0)[0], 1.0);
        assert_eq!(c.eval_deriv(0.0)[0], 0.25);
        assert_eq!(c.eval(0.4)[0], -2.0);
        assert_eq!(c.eval_deriv(0.4)[0], 1.0);
        assert_eq!(c.eval(1.0)[0], 0.5);
        assert_eq!(c.eval_deriv(1.0)[0], -0.125);
        assert_eq!(c.c1_defect(), 0.0);
    }

    #[test]
    fn control_refine_preserves_polynomial() {
        let c = Control::cubic_hermite(
            vec![0.0, 1.0],
            vec![vec![1.0], vec![2.0]],
            vec![vec![-3.0], vec![4.0]],
        );
        let r = c.refined(&[0.3, 0.77]);
        for q in 0..=50 {
            let t = q as f64 / 50.0;
            assert_abs_diff_eq!(c.eval(t)[0], r.eval(t)[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn control_reversal_round_trip() {
        let c = Control::cubic_hermite(
            vec![0.0, 0.5, 1.0],
            vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]],
            vec![vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, -1.0]],
        );
        let r = c.reversed(1.0);
        for q in 0..=20 {
            let t = q as f64 / 20.0;
            let a = c.eval(t);
            let b = r.eval(1.0 - t);
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-14);
            assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-14);
        }
        let rr = r.reversed(1.0);
        assert_eq!(c, rr);
    }

    #[test]
    fn piecewise_cubic_derivative_matches_numeric() {
        // O(h^2) agreement of the stored slope with a central difference of
        // the evaluated signal at interior points.
        let c = Control::cubic_hermite(
            vec![0.0, 0.6, 1.0],
            vec![vec![1.0], vec![-1.0], vec![2.0]],
            vec![vec![0.5], vec![3.0], vec![-2.0]],
        );
        for &t in &[0.2, 0.45, 0.72, 0.8] {
            let h = 1e-6;
            let num = (c.eval(t + h)[0] - c.eval(t - h)[0]) / (2.0 * h);
            assert_abs_diff_eq!(num, c.eval_deriv(t)[0], epsilon = 1e-7);
        }
        // at a breakpoint only one-sided differences converge (the second
        // derivative may jump); both sides must agree with the shared slope
        let h = 1e-7;
        let right = (c.eval(0.6 + h)[0] - c.eval(0.6)[0]) / h;
        let left = (c.eval(0.6)[0] - c.eval(0.6 - h)[0]) / h;
        assert_abs_diff_eq!(right, 3.0, epsilon = 1e-5);
        assert_abs_diff_eq!(left, 3.0, epsilon = 1e-5);
    }

    proptest! {
        #[test]
        fn state_vector_split_concat_round_trip(data in proptest::collection::vec(-1e6f64..1e6, 1..24)) {
            // carve random dims out of the data length
            let n = data.len();
            let mut dims = Vec::new();
            let mut left = n;
            while left > 0 {
                let take = (left % 3) + 1;
                let take = take.min(left);
                dims.push(take);
                left -= take;
            }
            let sv = StateVector::new(data.clone(), dims);
            let blocks = sv.blocks();
            let sv2 = StateVector::from_blocks(&blocks);
            prop_assert_eq!(sv, sv2);
        }

        #[test]
        fn hermite_c1_across_breakpoints(vals in proptest::collection::vec(-10.0f64..10.0, 4),
                                          ders in proptest::collection::vec(-10.0f64..10.0, 4)) {
            let times = vec![0.0, 0.3, 0.7, 1.0];
            let c = Control::cubic_hermite(
                times.clone(),
                vals.iter().map(|&v| vec![v]).collect(),
                ders.iter().map(|&d| vec![d]).collect(),
            );
            prop_assert_eq!(c.c1_defect(), 0.0);
            for (i, &t) in times.iter().enumerate() {
                prop_assert_eq!(c.eval(t)[0], vals[i]);
                prop_assert_eq!(c.eval_deriv(t)[0], ders[i]);
            }
        }
    }
}
