//! Small dense nonlinear least-squares engine: manifold parameter blocks,
//! Huber IRLS, Levenberg-Marquardt and Schur-complement marginalization.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::se3::{quat_exp, quat_from_array, quat_log, quat_mul, quat_to_array, right_jacobian_inv};

pub type BlockKey = u64;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("unknown parameter block {0}")]
    UnknownBlock(BlockKey),
    #[error("parameter block {0} already exists")]
    DuplicateBlock(BlockKey),
    #[error("residual dimension mismatch: block {key} expects {expected} values, got {got}")]
    DimensionMismatch { key: BlockKey, expected: usize, got: usize },
    #[error("problem has no residual blocks")]
    Empty,
    #[error("normal equations not positive definite ({dim} dof, min diagonal {min_diag:e}, lambda {lambda:e})")]
    Singular { dim: usize, min_diag: f64, lambda: f64 },
    #[error("non-finite cost {0}")]
    NonFinite(f64),
    #[error("block {0} is constant; no covariance")]
    ConstantBlock(BlockKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    Euclidean,
    /// Values stored as [w, x, y, z]; increments are body-frame rotation vectors.
    UnitQuaternion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub key: BlockKey,
    pub manifold: Manifold,
    pub values: DVector<f64>,
    pub constant: bool,
}

impl ParameterBlock {
    pub fn tangent_dim(&self) -> usize {
        tangent_dim(self.manifold, self.values.len())
    }

    pub fn plus(&self, delta: &[f64]) -> DVector<f64> {
        plus(self.manifold, &self.values, delta)
    }
}

fn tangent_dim(m: Manifold, ambient: usize) -> usize {
    match m {
        Manifold::Euclidean => ambient,
        Manifold::UnitQuaternion => 3,
    }
}

pub(crate) fn plus(m: Manifold, x: &DVector<f64>, delta: &[f64]) -> DVector<f64> {
    match m {
        Manifold::Euclidean => x + DVector::from_column_slice(delta),
        Manifold::UnitQuaternion => {
            let q = quat_from_array(x.as_slice());
            let dq = quat_exp(&Vector3::from_column_slice(delta));
            DVector::from_row_slice(&quat_to_array(&quat_mul(&q, &dq)))
        }
    }
}

/// Tangent vector `d` such that `plus(base, d) == x`.
fn minus(m: Manifold, x: &DVector<f64>, base: &DVector<f64>) -> DVector<f64> {
    match m {
        Manifold::Euclidean => x - base,
        Manifold::UnitQuaternion => {
            let q = quat_from_array(x.as_slice());
            let q0 = quat_from_array(base.as_slice());
            let d = quat_log(&(q0.inverse() * q));
            DVector::from_column_slice(d.as_slice())
        }
    }
}

/// Residual and Jacobian provider. `params[k]` holds the ambient values of the
/// k-th attached block; Jacobians are taken w.r.t. tangent increments and come
/// preallocated as `residual_dim x tangent_dim`. Residuals are whitened.
pub trait CostFunction {
    fn residual_dim(&self) -> usize;
    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    Trivial,
    Huber(f64),
}

impl Loss {
    /// IRLS weight for a residual block with whitened norm `r`.
    pub fn weight(&self, r: f64) -> f64 {
        match *self {
            Loss::Trivial => 1.0,
            Loss::Huber(d) => huber_weight(r, d),
        }
    }

    /// rho(s) for squared norm s.
    pub fn rho(&self, s: f64) -> f64 {
        match *self {
            Loss::Trivial => s,
            Loss::Huber(d) => {
                if s <= d * d {
                    s
                } else {
                    2.0 * d * s.sqrt() - d * d
                }
            }
        }
    }
}

pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

pub struct ResidualBlock {
    pub cost: Box<dyn CostFunction>,
    pub loss: Loss,
    pub blocks: Vec<BlockKey>,
    /// Caller-defined label, e.g. an association id.
    pub tag: u64,
}

/// Linearized Gaussian prior `r_p + H_p (x - x_lin)` over a set of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFactor {
    pub keys: Vec<BlockKey>,
    pub manifolds: Vec<Manifold>,
    pub x_lin: Vec<DVector<f64>>,
    pub sqrt_info: DMatrix<f64>,
    pub residual: DVector<f64>,
}

impl PriorFactor {
    pub fn tangent_dims(&self) -> Vec<usize> {
        self.manifolds.iter().zip(&self.x_lin).map(|(m, x)| tangent_dim(*m, x.len())).collect()
    }

    /// Information matrix H_p^T H_p.
    pub fn information(&self) -> DMatrix<f64> {
        self.sqrt_info.transpose() * &self.sqrt_info
    }

    /// Gaussian prior with diagonal standard deviations centered at `x_lin`.
    pub fn from_std(keys: Vec<BlockKey>, manifolds: Vec<Manifold>, x_lin: Vec<DVector<f64>>, std: &[f64]) -> Self {
        let n: usize = manifolds.iter().zip(&x_lin).map(|(m, x)| tangent_dim(*m, x.len())).sum();
        assert_eq!(n, std.len());
        let sqrt_info = DMatrix::from_diagonal(&DVector::from_iterator(n, std.iter().map(|s| 1.0 / s)));
        Self { keys, manifolds, x_lin, sqrt_info, residual: DVector::zeros(n) }
    }

    /// Keeps only the listed blocks, marginalizing the rest out in
    /// information form.
    pub fn restricted(&self, keep: &[BlockKey]) -> PriorFactor {
        let dims = self.tangent_dims();
        let mut offs = Vec::with_capacity(dims.len());
        let mut o = 0;
        for d in &dims {
            offs.push(o);
            o += d;
        }
        let h = self.information();
        let b = self.sqrt_info.transpose() * &self.residual;
        let (mut ki, mut di) = (Vec::new(), Vec::new());
        for (k, key) in self.keys.iter().enumerate() {
            let range = offs[k]..offs[k] + dims[k];
            if keep.contains(key) {
                ki.extend(range);
            } else {
                di.extend(range);
            }
        }
        let (hm, bm) = schur(&h, &b, &ki, &di);
        let (j, r) = sqrt_factor(&hm, &bm);
        let sel: Vec<usize> = (0..self.keys.len()).filter(|k| keep.contains(&self.keys[*k])).collect();
        PriorFactor {
            keys: sel.iter().map(|k| self.keys[*k]).collect(),
            manifolds: sel.iter().map(|k| self.manifolds[*k]).collect(),
            x_lin: sel.iter().map(|k| self.x_lin[*k].clone()).collect(),
            sqrt_info: j,
            residual: r,
        }
    }
}

impl CostFunction for PriorFactor {
    fn residual_dim(&self) -> usize {
        self.residual.len()
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
        let dims = self.tangent_dims();
        let n: usize = dims.iter().sum();
        let mut dx = DVector::zeros(n);
        let mut off = 0;
        let mut deltas = Vec::with_capacity(params.len());
        for (k, p) in params.iter().enumerate() {
            let x = DVector::from_column_slice(p);
            let d = minus(self.manifolds[k], &x, &self.x_lin[k]);
            dx.rows_mut(off, dims[k]).copy_from(&d);
            off += dims[k];
            deltas.push(d);
        }
        if let Some(jac) = jacobians {
            let mut off = 0;
            for (k, j) in jac.iter_mut().enumerate() {
                let cols = self.sqrt_info.columns(off, dims[k]);
                match self.manifolds[k] {
                    Manifold::Euclidean => j.copy_from(&cols),
                    Manifold::UnitQuaternion => {
                        let jr = right_jacobian_inv(&Vector3::from_column_slice(deltas[k].as_slice()));
                        j.copy_from(&(cols * jr));
                    }
                }
                off += dims[k];
            }
        }
        assert_eq!(self.sqrt_info.ncols(), n, "prior keys {:?} dims {:?} params {:?}", self.keys, dims, params.iter().map(|p| p.len()).collect::<Vec<_>>());
        &self.residual + &self.sqrt_info * dx
    }
}

/// Schur complement of `h` onto `keep` after eliminating `drop`; returns
/// (H_m, b_m) where b is the gradient-side vector J^T r.
fn schur(h: &DMatrix<f64>, b: &DVector<f64>, keep: &[usize], drop: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let hkk = h.select_rows(keep).select_columns(keep);
    let bk = b.select_rows(keep);
    if drop.is_empty() {
        return (hkk, bk);
    }
    let hkd = h.select_rows(keep).select_columns(drop);
    let hdd = h.select_rows(drop).select_columns(drop);
    let bd = b.select_rows(drop);
    let hdd_inv = pseudo_inverse_sym(&hdd);
    let t = &hkd * hdd_inv;
    let mut hm = hkk - &t * hkd.transpose();
    hm = (&hm + hm.transpose()) * 0.5;
    (hm, bk - t * bd)
}

fn pseudo_inverse_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = max * 1e-12 * a.nrows() as f64;
    let inv = eig.eigenvalues.map(|l| if l > tol { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Square-root form of (H, b): J^T J = H and J^T r = b, with negative and
/// numerically null eigenvalues dropped.
fn sqrt_factor(h: &DMatrix<f64>, b: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = h.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), DVector::zeros(0));
    }
    let eig = h.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let tol = max * 1e-14 * n as f64;
    let keep: Vec<usize> = (0..n).filter(|i| eig.eigenvalues[*i] > tol).collect();
    let mut j = DMatrix::zeros(keep.len(), n);
    let mut r = DVector::zeros(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let l = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        j.row_mut(row).copy_from(&(v.transpose() * l.sqrt()));
        r[row] = v.dot(b) / l.sqrt();
    }
    (j, r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub parameter_tolerance: f64,
    pub function_tolerance: f64,
    pub initial_lambda: f64,
    /// Try an undamped Gauss-Newton step first.
    pub gauss_newton_first: bool,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            gradient_tolerance: 1e-8,
            parameter_tolerance: 1e-8,
            function_tolerance: 1e-6,
            initial_lambda: 1e-4,
            gauss_newton_first: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    Parameter,
    Function,
    MaxIterations,
    /// Damping grew without finding a descent step.
    NoProgress,
    /// Nothing to optimize.
    NoVariables,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub termination: Termination,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

struct Linearization {
    h: DMatrix<f64>,
    g: DVector<f64>,
    cost: f64,
}

#[derive(Default)]
pub struct Problem {
    blocks: Vec<ParameterBlock>,
    lookup: HashMap<BlockKey, usize>,
    residuals: Vec<ResidualBlock>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, key: BlockKey, manifold: Manifold, values: DVector<f64>) -> Result<(), SolverError> {
        if self.lookup.contains_key(&key) {
            return Err(SolverError::DuplicateBlock(key));
        }
        let values = match manifold {
            Manifold::UnitQuaternion => {
                if values.len() != 4 {
                    return Err(SolverError::DimensionMismatch { key, expected: 4, got: values.len() });
                }
                values.normalize()
            }
            Manifold::Euclidean => values,
        };
        self.lookup.insert(key, self.blocks.len());
        self.blocks.push(ParameterBlock { key, manifold, values, constant: false });
        Ok(())
    }

    pub fn set_constant(&mut self, key: BlockKey, constant: bool) -> Result<(), SolverError> {
        let i = *self.lookup.get(&key).ok_or(SolverError::UnknownBlock(key))?;
        self.blocks[i].constant = constant;
        Ok(())
    }

    pub fn block(&self, key: BlockKey) -> Option<&ParameterBlock> {
        self.lookup.get(&key).map(|i| &self.blocks[*i])
    }

    pub fn values(&self, key: BlockKey) -> Option<&DVector<f64>> {
        self.block(key).map(|b| &b.values)
    }

    pub fn blocks(&self) -> &[ParameterBlock] {
        &self.blocks
    }

    pub fn add_residual(
        &mut self,
        cost: Box<dyn CostFunction>,
        loss: Loss,
        blocks: Vec<BlockKey>,
        tag: u64,
    ) -> Result<usize, SolverError> {
        for k in &blocks {
            if !self.lookup.contains_key(k) {
                return Err(SolverError::UnknownBlock(*k));
            }
        }
        self.residuals.push(ResidualBlock { cost, loss, blocks, tag });
        Ok(self.residuals.len() - 1)
    }

    pub fn add_prior(&mut self, prior: PriorFactor, tag: u64) -> Result<usize, SolverError> {
        let keys = prior.keys.clone();
        for (k, m) in keys.iter().zip(&prior.manifolds) {
            let b = self.block(*k).ok_or(SolverError::UnknownBlock(*k))?;
            if b.manifold != *m {
                return Err(SolverError::DimensionMismatch { key: *k, expected: b.values.len(), got: 0 });
            }
        }
        self.add_residual(Box::new(prior), Loss::Trivial, keys, tag)
    }

    pub fn residuals(&self) -> &[ResidualBlock] {
        &self.residuals
    }

    pub fn num_residuals(&self) -> usize {
        self.residuals.len()
    }

    /// Removes residual blocks for which `f` returns false.
    pub fn retain_residuals(&mut self, f: impl FnMut(&ResidualBlock) -> bool) {
        self.residuals.retain(f);
    }

    fn params_of(&self, r: &ResidualBlock) -> Vec<&[f64]> {
        r.blocks.iter().map(|k| self.blocks[self.lookup[k]].values.as_slice()).collect()
    }

    /// Whitened residual vector of residual block `i` at the current values.
    pub fn residual_value(&self, i: usize) -> DVector<f64> {
        let r = &self.residuals[i];
        r.cost.evaluate(&self.params_of(r), None)
    }

    /// Total cost 0.5 * sum rho(|r|^2).
    pub fn cost(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| 0.5 * r.loss.rho(r.cost.evaluate(&self.params_of(r), None).norm_squared()))
            .sum()
    }

    /// Offsets of the blocks in `order` within the stacked tangent vector.
    fn offsets(&self, order: &[usize]) -> (Vec<Option<usize>>, usize) {
        let mut offs = vec![None; self.blocks.len()];
        let mut n = 0;
        for &b in order {
            offs[b] = Some(n);
            n += self.blocks[b].tangent_dim();
        }
        (offs, n)
    }

    fn linearize(&self, residuals: &[usize], offs: &[Option<usize>], n: usize) -> Linearization {
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut cost = 0.0;
        // global tangent index of each column of the stacked local Jacobian
        let mut cols: Vec<usize> = Vec::new();
        for &ri in residuals {
            let rb = &self.residuals[ri];
            let idx: Vec<usize> = rb.blocks.iter().map(|k| self.lookup[k]).collect();
            let m = rb.cost.residual_dim();
            let mut jac: Vec<DMatrix<f64>> = idx.iter().map(|b| DMatrix::zeros(m, self.blocks[*b].tangent_dim())).collect();
            let r = rb.cost.evaluate(&self.params_of(rb), Some(&mut jac));
            let s = r.norm_squared();
            cost += 0.5 * rb.loss.rho(s);
            let w = rb.loss.weight(s.sqrt());

            cols.clear();
            for (b, jb) in idx.iter().zip(&jac) {
                if let Some(o) = offs[*b] {
                    cols.extend(o..o + jb.ncols());
                }
            }
            if cols.is_empty() {
                continue;
            }
            let mut j = DMatrix::zeros(m, cols.len());
            let mut c = 0;
            for (b, jb) in idx.iter().zip(&jac) {
                if offs[*b].is_some() {
                    j.columns_mut(c, jb.ncols()).copy_from(jb);
                    c += jb.ncols();
                }
            }
            let jtj = j.tr_mul(&j);
            let jtr = j.tr_mul(&r);
            for (a, &ga) in cols.iter().enumerate() {
                g[ga] += w * jtr[a];
                for (b, &gb) in cols.iter().enumerate() {
                    h[(ga, gb)] += w * jtj[(a, b)];
                }
            }
        }
        Linearization { h, g, cost }
    }

    fn variable_order(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|b| !self.blocks[*b].constant).collect()
    }

    fn apply(&self, order: &[usize], offs: &[Option<usize>], dx: &DVector<f64>) -> Vec<DVector<f64>> {
        order
            .iter()
            .map(|&b| {
                let blk = &self.blocks[b];
                let o = offs[b].unwrap();
                blk.plus(&dx.as_slice()[o..o + blk.tangent_dim()])
            })
            .collect()
    }

    pub fn solve_lm(&mut self, opts: &LmOptions) -> Result<SolveSummary, SolverError> {
        if self.residuals.is_empty() {
            return Err(SolverError::Empty);
        }
        let order = self.variable_order();
        let (offs, n) = self.offsets(&order);
        let all: Vec<usize> = (0..self.residuals.len()).collect();
        let mut lin = self.linearize(&all, &offs, n);
        if !lin.cost.is_finite() {
            return Err(SolverError::NonFinite(lin.cost));
        }
        let mut summary = SolveSummary {
            initial_cost: lin.cost,
            final_cost: lin.cost,
            iterations: 0,
            accepted_steps: 0,
            termination: Termination::MaxIterations,
            cost_history: vec![lin.cost],
        };
        if n == 0 {
            summary.termination = Termination::NoVariables;
            return Ok(summary);
        }
        let mut lambda = opts.initial_lambda;
        let mut nu = 2.0;
        let mut undamped = opts.gauss_newton_first;
        let mut failures = 0;
        while summary.iterations < opts.max_iterations {
            if lin.g.amax() <= opts.gradient_tolerance {
                summary.termination = Termination::Gradient;
                break;
            }
            summary.iterations += 1;
            let mut a = lin.h.clone();
            if !undamped {
                for i in 0..n {
                    a[(i, i)] += lambda * lin.h[(i, i)].clamp(1e-6, 1e32);
                }
            }
            let Some(chol) = a.cholesky() else {
                failures += 1;
                if failures > 20 {
                    let min_diag = (0..n).map(|i| lin.h[(i, i)]).fold(f64::INFINITY, f64::min);
                    return Err(SolverError::Singular { dim: n, min_diag, lambda });
                }
                if undamped {
                    undamped = false;
                } else {
                    lambda = (lambda * nu).max(1e-4);
                    nu *= 2.0;
                }
                continue;
            };
            let dx = -chol.solve(&lin.g);
            let trial = self.apply(&order, &offs, &dx);
            let saved: Vec<DVector<f64>> = order.iter().map(|&b| self.blocks[b].values.clone()).collect();
            for (&b, v) in order.iter().zip(&trial) {
                self.blocks[b].values = v.clone();
            }
            let new_cost = self.cost();
            // predicted decrease of the quadratic model
            let pred = -(lin.g.dot(&dx) + 0.5 * dx.dot(&(&lin.h * &dx)));
            let actual = lin.cost - new_cost;
            if new_cost.is_finite() && actual >= 0.0 && (actual > 0.0 || new_cost == 0.0) {
                summary.accepted_steps += 1;
                summary.cost_history.push(new_cost);
                let rho = if pred > 0.0 { actual / pred } else { 1.0 };
                if !undamped {
                    lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                    nu = 2.0;
                }
                undamped = false;
                failures = 0;
                let xnorm: f64 = trial.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
                let old_cost = lin.cost;
                lin = self.linearize(&all, &offs, n);
                if dx.norm() <= opts.parameter_tolerance * (xnorm + opts.parameter_tolerance) {
                    summary.termination = Termination::Parameter;
                    break;
                }
                if actual <= opts.function_tolerance * old_cost {
                    summary.termination = Termination::Function;
                    break;
                }
            } else {
                for (&b, v) in order.iter().zip(saved) {
                    self.blocks[b].values = v;
                }
                if undamped {
                    undamped = false;
                } else {
                    lambda *= nu;
                    nu *= 2.0;
                }
                if lambda > 1e16 {
                    summary.termination = Termination::NoProgress;
                    break;
                }
            }
        }
        summary.final_cost = lin.cost;
        Ok(summary)
    }

    /// Marginal covariance (tangent space) of the listed variable blocks at
    /// the current values.
    pub fn covariance(&self, keys: &[BlockKey]) -> Result<DMatrix<f64>, SolverError> {
        let order = self.variable_order();
        let (offs, n) = self.offsets(&order);
        let all: Vec<usize> = (0..self.residuals.len()).collect();
        let lin = self.linearize(&all, &offs, n);
        let mut idx = Vec::new();
        for k in keys {
            let b = *self.lookup.get(k).ok_or(SolverError::UnknownBlock(*k))?;
            let o = offs[b].ok_or(SolverError::ConstantBlock(*k))?;
            idx.extend(o..o + self.blocks[b].tangent_dim());
        }
        let min_diag = (0..n).map(|i| lin.h[(i, i)]).fold(f64::INFINITY, f64::min);
        let chol = lin.h.cholesky().ok_or(SolverError::Singular { dim: n, min_diag, lambda: 0.0 })?;
        let cov = chol.inverse();
        Ok(cov.select_rows(&idx).select_columns(&idx))
    }

    /// Eliminates `drop` blocks: every residual touching them is linearized at
    /// the current values, folded into a prior on the remaining connected
    /// blocks, and removed together with the dropped blocks. The new prior is
    /// added to the problem (when it is non-empty) and returned.
    pub fn marginalize(&mut self, drop: &[BlockKey], prior_tag: u64) -> Result<PriorFactor, SolverError> {
        let mut drop_idx = Vec::new();
        for k in drop {
            drop_idx.push(*self.lookup.get(k).ok_or(SolverError::UnknownBlock(*k))?);
        }
        let connected: Vec<usize> = (0..self.residuals.len())
            .filter(|r| self.residuals[*r].blocks.iter().any(|k| drop.contains(k)))
            .collect();
        let mut keep_idx: Vec<usize> = Vec::new();
        for &r in &connected {
            for k in &self.residuals[r].blocks {
                let b = self.lookup[k];
                if !drop.contains(k) && !keep_idx.contains(&b) {
                    keep_idx.push(b);
                }
            }
        }
        keep_idx.sort_unstable();
        let mut order = keep_idx.clone();
        order.extend(&drop_idx);
        let (offs, n) = self.offsets(&order);
        let lin = self.linearize(&connected, &offs, n);
        let nk: usize = keep_idx.iter().map(|b| self.blocks[*b].tangent_dim()).sum();
        let ki: Vec<usize> = (0..nk).collect();
        let di: Vec<usize> = (nk..n).collect();
        let (hm, bm) = schur(&lin.h, &lin.g, &ki, &di);
        let (j, r) = sqrt_factor(&hm, &bm);
        let prior = PriorFactor {
            keys: keep_idx.iter().map(|b| self.blocks[*b].key).collect(),
            manifolds: keep_idx.iter().map(|b| self.blocks[*b].manifold).collect(),
            x_lin: keep_idx.iter().map(|b| self.blocks[*b].values.clone()).collect(),
            sqrt_info: j,
            residual: r,
        };
        let mut i = 0;
        self.residuals.retain(|_| {
            let keep = !connected.contains(&i);
            i += 1;
            keep
        });
        self.blocks.retain(|b| !drop.contains(&b.key));
        self.lookup = self.blocks.iter().enumerate().map(|(i, b)| (b.key, i)).collect();
        if prior.residual.len() > 0 {
            self.add_prior(prior.clone(), prior_tag)?;
        }
        Ok(prior)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// r = A x - b over one Euclidean block.
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl CostFunction for Linear {
        fn residual_dim(&self) -> usize {
            self.b.len()
        }
        fn evaluate(&self, p: &[&[f64]], j: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            if let Some(j) = j {
                j[0].copy_from(&self.a);
            }
            &self.a * DVector::from_column_slice(p[0]) - &self.b
        }
    }

    /// r = A_0 x_0 + A_1 x_1 - b over two Euclidean blocks.
    struct Linear2 {
        a0: DMatrix<f64>,
        a1: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl CostFunction for Linear2 {
        fn residual_dim(&self) -> usize {
            self.b.len()
        }
        fn evaluate(&self, p: &[&[f64]], j: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            if let Some(j) = j {
                j[0].copy_from(&self.a0);
                j[1].copy_from(&self.a1);
            }
            &self.a0 * DVector::from_column_slice(p[0]) + &self.a1 * DVector::from_column_slice(p[1]) - &self.b
        }
    }

    struct Rosenbrock;

    impl CostFunction for Rosenbrock {
        fn residual_dim(&self) -> usize {
            2
        }
        fn evaluate(&self, p: &[&[f64]], j: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            let (x, y) = (p[0][0], p[0][1]);
            if let Some(j) = j {
                j[0].copy_from(&DMatrix::from_row_slice(2, 2, &[-20.0 * x, 10.0, -1.0, 0.0]));
            }
            DVector::from_vec(vec![10.0 * (y - x * x), 1.0 - x])
        }
    }

    /// r = Log(q_meas^T q)
    struct RotationMeas(crate::se3::Quat);

    impl CostFunction for RotationMeas {
        fn residual_dim(&self) -> usize {
            3
        }
        fn evaluate(&self, p: &[&[f64]], j: Option<&mut [DMatrix<f64>]>) -> DVector<f64> {
            let q = quat_from_array(p[0]);
            let r = quat_log(&(self.0.inverse() * q));
            if let Some(j) = j {
                j[0].copy_from(&right_jacobian_inv(&r));
            }
            DVector::from_column_slice(r.as_slice())
        }
    }

    fn random_linear(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        (a, b)
    }

    #[test]
    fn huber_weight_examples() {
        assert_eq!(huber_weight(0.0, 1.0), 1.0);
        assert_eq!(huber_weight(1.0, 1.0), 1.0);
        assert_eq!(huber_weight(4.0, 1.0), 0.25);
        assert_eq!(huber_weight(-4.0, 2.0), 0.5);
    }

    #[test]
    fn linear_problem_one_accepted_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = random_linear(&mut rng, 12, 5);
        let mut p = Problem::new();
        p.add_block(0, Manifold::Euclidean, DVector::zeros(5)).unwrap();
        p.add_residual(Box::new(Linear { a: a.clone(), b: b.clone() }), Loss::Trivial, vec![0], 0).unwrap();
        let s = p.solve_lm(&LmOptions::default()).unwrap();
        assert_eq!(s.accepted_steps, 1);
        let exact = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * b));
        assert!((p.values(0).unwrap() - exact).amax() < 1e-12);
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let mut p = Problem::new();
        p.add_block(0, Manifold::Euclidean, DVector::from_vec(vec![-1.2, 1.0])).unwrap();
        p.add_residual(Box::new(Rosenbrock), Loss::Trivial, vec![0], 0).unwrap();
        let opts = LmOptions { max_iterations: 200, gauss_newton_first: false, ..Default::default() };
        let s = p.solve_lm(&opts).unwrap();
        let x = p.values(0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8, "{x} {s:?}");
        assert!(s.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quaternion_block_stays_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Problem::new();
        p.add_block(0, Manifold::UnitQuaternion, DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        for k in 0..20 {
            let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            p.add_residual(Box::new(RotationMeas(quat_exp(&v))), Loss::Huber(1.0), vec![0], k).unwrap();
        }
        for _ in 0..10 {
            let opts = LmOptions { max_iterations: 1, ..Default::default() };
            p.solve_lm(&opts).unwrap();
            assert!((p.values(0).unwrap().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejected_steps_never_raise_cost() {
        let mut p = Problem::new();
        p.add_block(0, Manifold::Euclidean, DVector::from_vec(vec![3.0, -2.0])).unwrap();
        p.add_residual(Box::new(Rosenbrock), Loss::Huber(1.0), vec![0], 0).unwrap();
        let s = p.solve_lm(&LmOptions { max_iterations: 100, ..Default::default() }).unwrap();
        assert!(s.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(s.final_cost <= s.initial_cost);
    }

    #[test]
    fn singular_problem_is_reported() {
        let mut p = Problem::new();
        p.add_block(0, Manifold::Euclidean, DVector::zeros(2)).unwrap();
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        p.add_residual(Box::new(Linear { a, b: DVector::from_element(1, 1.0) }), Loss::Trivial, vec![0], 0).unwrap();
        // zero gradient: terminates immediately
        let s = p.solve_lm(&LmOptions::default()).unwrap();
        assert_eq!(s.termination, Termination::Gradient);
        assert!(p.covariance(&[0]).is_err());
    }

    #[test]
    fn schur_matches_dense_marginal() {
        // x0, x1 scalar, joint information from three linear factors
        let mut p = Problem::new();
        p.add_block(0, Manifold::Euclidean, DVector::from_element(1, 0.3)).unwrap();
        p.add_block(1, Manifold::Euclidean, DVector::from_element(1, -0.7)).unwrap();
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        p.add_residual(Box::new(Linear { a: one(2.0), b: DVector::from_element(1, 1.0) }), Loss::Trivial, vec![0], 0)
            .unwrap();
        p.add_residual(
            Box::new(Linear2 { a0: one(-1.5), a1: one(1.5), b: DVector::from_element(1, 0.4) }),
            Loss::Trivial,
            vec![0, 1],
            1,
        )
        .unwrap();
        p.add_residual(Box::new(Linear { a: one(0.5), b: DVector::from_element(1, 2.0) }), Loss::Trivial, vec![1], 2)
            .unwrap();
        // oracle: joint H, covariance, marginal of x1
        let h = Matrix2::new(4.0 + 2.25, -2.25, -2.25, 2.25 + 0.25);
        let cov = h.try_inverse().unwrap();
        let prior = p.marginalize(&[0], 99).unwrap();
        let info = prior.information();
        assert_eq!(prior.keys, vec![1]);
        // factor 2 stays in the problem; prior plus it gives the marginal
        assert!((info[(0, 0)] + 0.25 - 1.0 / cov[(1, 1)]).abs() < 1e-10);
        // the marginalized problem keeps the same minimizer for x1
        let mut joint = Problem::new();
        joint.add_block(0, Manifold::Euclidean, DVector::zeros(1)).unwrap();
        joint.add_block(1, Manifold::Euclidean, DVector::zeros(1)).unwrap();
        joint.add_residual(Box::new(Linear { a: one(2.0), b: DVector::from_element(1, 1.0) }), Loss::Trivial, vec![0], 0)
            .unwrap();
        joint
            .add_residual(
                Box::new(Linear2 { a0: one(-1.5), a1: one(1.5), b: DVector::from_element(1, 0.4) }),
                Loss::Trivial,
                vec![0, 1],
                1,
            )
            .unwrap();
        joint.add_residual(Box::new(Linear { a: one(0.5), b: DVector::from_element(1, 2.0) }), Loss::Trivial, vec![1], 2)
            .unwrap();
        joint.solve_lm(&LmOptions::default()).unwrap();
        p.solve_lm(&LmOptions::default()).unwrap();
        assert!((p.values(1).unwrap()[0] - joint.values(1).unwrap()[0]).abs() < 1e-10);
    }

    #[test]
    fn dropping_unconnected_block_leaves_prior() {
        let mut p = Problem::new();
        for k in 0..3 {
            p.add_block(k, Manifold::Euclidean, DVector::from_element(2, k as f64)).unwrap();
        }
        let old = PriorFactor::from_std(
            vec![0, 1],
            vec![Manifold::Euclidean; 2],
            vec![DVector::zeros(2), DVector::zeros(2)],
            &[0.1, 0.2, 0.3, 0.4],
        );
        p.add_prior(old.clone(), 7).unwrap();
        let new = p.marginalize(&[2], 8).unwrap();
        assert!(new.keys.is_empty());
        assert_eq!(p.num_residuals(), 1);
        assert_eq!(p.residuals()[0].tag, 7);
        assert!(p.block(2).is_none());
        let h = p.covariance(&[0, 1]).unwrap().try_inverse().unwrap();
        assert!((h - old.information()).amax() < 1e-9);
    }

    #[test]
    fn sliding_linear_chain_matches_batch() {
        // chain x0 - x1 - ... - x5 of 2-vectors with unary and binary factors
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let mut unary = Vec::new();
        let mut binary = Vec::new();
        for _ in 0..n {
            unary.push(random_linear(&mut rng, 2, 2));
        }
        for _ in 0..n - 1 {
            let (a0, b) = random_linear(&mut rng, 3, 2);
            let (a1, _) = random_linear(&mut rng, 3, 2);
            binary.push((a0, a1, b));
        }
        let build = |keys: std::ops::Range<u64>| {
            let mut p = Problem::new();
            for k in keys.clone() {
                p.add_block(k, Manifold::Euclidean, DVector::zeros(2)).unwrap();
            }
            for k in keys.clone() {
                let (a, b) = &unary[k as usize];
                p.add_residual(Box::new(Linear { a: a.clone(), b: b.clone() }), Loss::Trivial, vec![k], 0).unwrap();
                if k + 1 < keys.end {
                    let (a0, a1, b) = &binary[k as usize];
                    p.add_residual(
                        Box::new(Linear2 { a0: a0.clone(), a1: a1.clone(), b: b.clone() }),
                        Loss::Trivial,
                        vec![k, k + 1],
                        0,
                    )
                    .unwrap();
                }
            }
            p
        };
        let mut batch = build(0..n as u64);
        batch.solve_lm(&LmOptions::default()).unwrap();
        let mut slide = build(0..n as u64);
        slide.solve_lm(&LmOptions::default()).unwrap();
        for k in 0..3 {
            slide.marginalize(&[k], 100 + k).unwrap();
            slide.solve_lm(&LmOptions::default()).unwrap();
            let info = slide.residuals().iter().find(|r| r.tag == 100 + k).map(|_| ());
            assert!(info.is_some());
        }
        for k in 3..n as u64 {
            assert!((slide.values(k).unwrap() - batch.values(k).unwrap()).amax() < 1e-10);
        }
        let cb = batch.covariance(&[5]).unwrap();
        let cs = slide.covariance(&[5]).unwrap();
        assert!((cb - cs).amax() < 1e-10);
    }

    #[test]
    fn constant_blocks_do_not_move() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a0, b) = random_linear(&mut rng, 6, 2);
        let (a1, _) = random_linear(&mut rng, 6, 2);
        let mut p = Problem::new();
        p.add_block(0, Manifold::Euclidean, DVector::zeros(2)).unwrap();
        p.add_block(1, Manifold::Euclidean, DVector::from_element(2, 0.5)).unwrap();
        p.set_constant(1, true).unwrap();
        p.add_residual(Box::new(Linear2 { a0, a1, b }), Loss::Trivial, vec![0, 1], 0).unwrap();
        p.solve_lm(&LmOptions::default()).unwrap();
        assert_eq!(p.values(1).unwrap(), &DVector::from_element(2, 0.5));
        assert!(matches!(p.covariance(&[1]), Err(SolverError::ConstantBlock(1))));
    }

    #[test]
    fn prior_factor_jacobian_on_quaternion() {
        let q0 = quat_exp(&Vector3::new(0.2, -0.1, 0.4));
        let prior = PriorFactor {
            keys: vec![0],
            manifolds: vec![Manifold::UnitQuaternion],
            x_lin: vec![DVector::from_row_slice(&quat_to_array(&q0))],
            sqrt_info: DMatrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64 * 0.3 + if i == j { 1.0 } else { 0.0 }),
            residual: DVector::from_vec(vec![0.1, 0.2, -0.3]),
        };
        let q = quat_mul(&q0, &quat_exp(&Vector3::new(0.3, 0.2, -0.1)));
        let x = quat_to_array(&q);
        let mut j = [DMatrix::zeros(3, 3)];
        prior.evaluate(&[&x], Some(&mut j));
        let h = 1e-6;
        for c in 0..3 {
            let mut e = Vector3::zeros();
            e[c] = h;
            let xp = quat_to_array(&quat_mul(&q, &quat_exp(&e)));
            let xm = quat_to_array(&quat_mul(&q, &quat_exp(&-e)));
            let fd = (prior.evaluate(&[&xp], None) - prior.evaluate(&[&xm], None)) / (2.0 * h);
            assert!((fd - j[0].column(c)).amax() < 1e-7);
        }
    }

    #[test]
    fn restricted_prior_matches_marginal_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let l = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let prior = PriorFactor {
            keys: vec![0, 1],
            manifolds: vec![Manifold::Euclidean; 2],
            x_lin: vec![DVector::zeros(3), DVector::zeros(3)],
            sqrt_info: l.clone(),
            residual: DVector::zeros(6),
        };
        let cov = (l.transpose() * &l).try_inverse().unwrap();
        let r = prior.restricted(&[1]);
        let got = r.information().try_inverse().unwrap();
        assert!((got - cov.view((3, 3), (3, 3))).amax() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn marginal_prior_is_psd(seed in 0u64..10_000, m in 3usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a0, b) = random_linear(&mut rng, m, 3);
            let (a1, _) = random_linear(&mut rng, m, 2);
            let mut p = Problem::new();
            p.add_block(0, Manifold::Euclidean, DVector::zeros(3)).unwrap();
            p.add_block(1, Manifold::Euclidean, DVector::zeros(2)).unwrap();
            p.add_residual(Box::new(Linear2 { a0, a1, b }), Loss::Huber(1.0), vec![0, 1], 0).unwrap();
            let prior = p.marginalize(&[0], 1).unwrap();
            let h = prior.information();
            if h.nrows() > 0 {
                let ev = h.symmetric_eigen().eigenvalues;
                let max = ev.amax();
                prop_assert!(ev.iter().all(|l| *l >= -1e-12 * max.max(1.0)));
            }
        }

        #[test]
        fn huber_weight_bounded(r in -100.0..100.0f64, d in 0.01..10.0f64) {
            let w = huber_weight(r, d);
            prop_assert!(w > 0.0 && w <= 1.0);
            prop_assert!((w * r.abs() - r.abs().min(d)).abs() < 1e-12);
        }
    }
}
