//! Stability diagnostics in score space.
//!
//! With `y = ∇x log p` and `M(λ) = (−S(λ))⁻¹`, the quadratic form
//! `V = yᵀ M(λ) y` is a Lyapunov function of the score: along the
//! zero-diffusion flow it is exactly conserved, and for nonzero diffusion its
//! drift under the flow's diffusion operator is
//!
//! ```text
//! LV = −yᵀ Q y + tr(Q (−S(λ))),
//! ```
//!
//! negative where the score is large (pull toward the mode) and positive
//! where it is small (repulsion from the mode), which keeps particles close
//! to, but never collapsed onto, the maximum likelihood point. The module
//! also evaluates the drift of the blended log-density (`L log p`) and a
//! finite-difference residual of the Fokker–Planck compatibility condition
//! that any valid (drift, diffusion) pair must satisfy.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::flow_dynamics;
use crate::quadratic_model::Homotopy;
use crate::sde_integrator::Ensemble;

/// Lyapunov weight matrices: `M(λ) = (−S(λ))⁻¹` together with the two
/// λ-independent extremes `M1 = (−S(0))⁻¹` and `M2 = (−S(1))⁻¹`, which
/// bracket `M(λ)` in the definite order: `M2 ⪯ M(λ) ⪯ M1`.
#[derive(Debug, Clone)]
pub struct LyapunovWeights {
    pub m_lambda: DMatrix<f64>,
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
}

impl LyapunovWeights {
    pub fn at(hom: &Homotopy, lambda: f64) -> Result<Self> {
        Ok(Self {
            m_lambda: hom.neg_hessian_factor(lambda)?.inverse(),
            m1: hom.neg_hessian_factor(0.0)?.inverse(),
            m2: hom.neg_hessian_factor(1.0)?.inverse(),
        })
    }
}

/// Sign regions of `LV` in score space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    /// `yᵀQy > tr(Q M2⁻¹)`: `LV < 0` for every λ.
    S1,
    /// `yᵀQy < tr(Q M1⁻¹)`: `LV > 0` for every λ.
    S2,
    /// Between the thresholds: the sign of `LV` depends on λ.
    S3,
}

impl Partition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::S1 => "S1",
            Partition::S2 => "S2",
            Partition::S3 => "S3",
        }
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-(λ, particle) diagnostics snapshot.
#[derive(Debug, Clone)]
pub struct DiagnosticsRecord {
    pub lambda: f64,
    pub particle_id: u64,
    pub x: DVector<f64>,
    pub log_p: f64,
    /// Score `y = ∇x log p`.
    pub y: DVector<f64>,
    pub v: f64,
    pub v1: f64,
    pub v2: f64,
    pub lv: f64,
    pub gamma: f64,
    pub partition: Partition,
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// The x-independent part of `L log p`:
/// `γ(λ) = c_h − βᵀS⁻¹b_h + ½ βᵀS⁻¹ A_h S⁻¹ β + ½ tr(Q S)` with
/// `β = b_g + λ b_h`.
pub fn gamma(hom: &Homotopy, lambda: f64, q: &DMatrix<f64>) -> Result<f64> {
    let factor = hom.neg_hessian_factor(lambda)?;
    let beta = hom.blended_b(lambda);
    let s = hom.hessian_log_p(lambda);
    // S⁻¹ v = −(−S)⁻¹ v
    let s_inv_beta = -factor.solve(&beta);
    Ok(
        hom.likelihood().c() - beta.dot(&(-factor.solve(hom.likelihood().b())))
            + 0.5 * s_inv_beta.dot(&(hom.likelihood().a() * &s_inv_beta))
            + 0.5 * trace_product(q, &s),
    )
}

/// Drift of the blended log-density under the flow's diffusion operator:
/// `L log p = ½ yᵀQy + γ(λ)`. The quadratic term is nonnegative; the drift
/// applies to the potential `log g + λ log h` (the normalizer's λ-derivative
/// is not included).
pub fn l_log_p(hom: &Homotopy, x: &DVector<f64>, lambda: f64, q: &DMatrix<f64>) -> Result<f64> {
    let y = hom.grad_log_p(x, lambda);
    Ok(0.5 * y.dot(&(q * &y)) + gamma(hom, lambda, q)?)
}

/// `V(x,λ) = yᵀ M(λ) y`.
pub fn v(hom: &Homotopy, x: &DVector<f64>, lambda: f64) -> Result<f64> {
    let y = hom.grad_log_p(x, lambda);
    let factor = hom.neg_hessian_factor(lambda)?;
    Ok(y.dot(&factor.solve(&y)))
}

/// `V1(y) = yᵀ M1 y` with `M1 = (−S(0))⁻¹`, evaluated at `y = ∇x log p(x,λ)`.
pub fn v1(hom: &Homotopy, x: &DVector<f64>, lambda: f64) -> Result<f64> {
    let y = hom.grad_log_p(x, lambda);
    let factor = hom.neg_hessian_factor(0.0)?;
    Ok(y.dot(&factor.solve(&y)))
}

/// `V2(y) = yᵀ M2 y` with `M2 = (−S(1))⁻¹`.
pub fn v2(hom: &Homotopy, x: &DVector<f64>, lambda: f64) -> Result<f64> {
    let y = hom.grad_log_p(x, lambda);
    let factor = hom.neg_hessian_factor(1.0)?;
    Ok(y.dot(&factor.solve(&y)))
}

/// `LV = −yᵀQy + tr(Q(−S(λ)))`.
pub fn lv(hom: &Homotopy, x: &DVector<f64>, lambda: f64, q: &DMatrix<f64>) -> f64 {
    let y = hom.grad_log_p(x, lambda);
    let s = hom.hessian_log_p(lambda);
    -y.dot(&(q * &y)) - trace_product(q, &s)
}

/// Classify a score vector by the sign of `LV` over all λ. Boundary ties go
/// to `S3` (the thresholds belong to the closed middle region).
pub fn classify_partition(hom: &Homotopy, y: &DVector<f64>, q: &DMatrix<f64>) -> Partition {
    let t1 = -trace_product(q, &hom.hessian_log_p(0.0));
    let t2 = -trace_product(q, &hom.hessian_log_p(1.0));
    classify_with_thresholds(y.dot(&(q * y)), t1, t2)
}

fn classify_with_thresholds(quad: f64, t1: f64, t2: f64) -> Partition {
    if quad > t2 {
        Partition::S1
    } else if quad < t1 {
        Partition::S2
    } else {
        Partition::S3
    }
}

/// Residual of the Fokker–Planck compatibility condition for the flow's own
/// drift; near zero (up to finite-difference noise) exactly when the
/// transported ensemble keeps the blended density.
pub fn cond1_residual(
    hom: &Homotopy,
    x: &DVector<f64>,
    lambda: f64,
    q: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let qc = q.clone();
    let hc = hom.clone();
    cond1_residual_for_drift(hom, x, lambda, q, move |x, l| {
        flow_dynamics::drift_f(&hc, x, l, &qc).expect("drift evaluation failed")
    })
}

/// Same residual, for an arbitrary drift. The λ-gradient, the Hessian term,
/// and the score are analytic; the drift's divergence gradient and Jacobian
/// come from central differences of `drift` itself, and the diffusion term
/// from central differences of `log p`, so a corrupted drift is detected.
///
/// Steps are `1e−4·(1 + |x_k|)` per coordinate. For quadratic log-densities
/// the third-derivative part of the diffusion term is identically zero
/// (constant Hessian) and is not evaluated.
pub fn cond1_residual_for_drift(
    hom: &Homotopy,
    x: &DVector<f64>,
    lambda: f64,
    q: &DMatrix<f64>,
    drift: impl Fn(&DVector<f64>, f64) -> DVector<f64>,
) -> Result<DVector<f64>> {
    let n = hom.dim();
    let steps: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();

    let shifted = |base: &DVector<f64>, k: usize, delta: f64| {
        let mut u = base.clone();
        u[k] += delta;
        u
    };

    // lhs: ∇x ∂(log p)/∂λ = A_h x + b_h
    let lhs = hom.likelihood().grad(x);

    // Jacobian of the drift (exact for affine drifts up to roundoff).
    let jac = {
        let mut j = DMatrix::zeros(n, n);
        for k in 0..n {
            let fp = drift(&shifted(x, k, steps[k]), lambda);
            let fm = drift(&shifted(x, k, -steps[k]), lambda);
            for i in 0..n {
                j[(i, k)] = (fp[i] - fm[i]) / (2.0 * steps[k]);
            }
        }
        j
    };

    // ∇x div(f), differencing the finite-difference divergence.
    let div_at = |u: &DVector<f64>| {
        let mut acc = 0.0;
        for k in 0..n {
            let d = 1e-4 * (1.0 + u[k].abs());
            let fp = drift(&shifted(u, k, d), lambda);
            let fm = drift(&shifted(u, k, -d), lambda);
            acc += (fp[k] - fm[k]) / (2.0 * d);
        }
        acc
    };
    let mut grad_div = DVector::zeros(n);
    for k in 0..n {
        let dp = div_at(&shifted(x, k, steps[k]));
        let dm = div_at(&shifted(x, k, -steps[k]));
        grad_div[k] = (dp - dm) / (2.0 * steps[k]);
    }

    // Finite-difference score and Hessian of log p for the diffusion term.
    let lp = |u: &DVector<f64>| hom.log_p(u, lambda).expect("log_p evaluation failed");
    let mut y_fd = DVector::zeros(n);
    for k in 0..n {
        y_fd[k] = (lp(&shifted(x, k, steps[k])) - lp(&shifted(x, k, -steps[k]))) / (2.0 * steps[k]);
    }
    let mut hess_fd = DMatrix::zeros(n, n);
    let lp0 = lp(x);
    for k in 0..n {
        hess_fd[(k, k)] = (lp(&shifted(x, k, steps[k])) - 2.0 * lp0
            + lp(&shifted(x, k, -steps[k])))
            / (steps[k] * steps[k]);
        for l in (k + 1)..n {
            let pp = lp(&shifted(&shifted(x, k, steps[k]), l, steps[l]));
            let pm = lp(&shifted(&shifted(x, k, steps[k]), l, -steps[l]));
            let mp = lp(&shifted(&shifted(x, k, -steps[k]), l, steps[l]));
            let mm = lp(&shifted(&shifted(x, k, -steps[k]), l, -steps[l]));
            let mixed = (pp - pm - mp + mm) / (4.0 * steps[k] * steps[l]);
            hess_fd[(k, l)] = mixed;
            hess_fd[(l, k)] = mixed;
        }
    }
    // ∇[ (1/2p) Σ Q_ij ∂²p/∂x_i∂x_j ] = ½∇tr(QH) + H Q y, and the first part
    // vanishes for a constant Hessian.
    let q_term = &hess_fd * (q * &y_fd);

    let f_x = drift(x, lambda);
    let s = hom.hessian_log_p(lambda);
    let y = hom.grad_log_p(x, lambda);
    let rhs = -grad_div - &s * f_x - jac.transpose() * y + q_term;
    Ok(lhs - rhs)
}

/// One diagnostics record per particle of the ensemble, at its current λ.
pub fn record(hom: &Homotopy, ens: &Ensemble, q: &DMatrix<f64>) -> Result<Vec<DiagnosticsRecord>> {
    let lambda = ens.lambda();
    let weights = LyapunovWeights::at(hom, lambda)?;
    let gamma_val = gamma(hom, lambda, q)?;
    let log_gamma = hom.log_gamma(lambda)?;
    let s = hom.hessian_log_p(lambda);
    let beta = hom.blended_b(lambda);
    let neg_trace_qs = -trace_product(q, &s);
    let t1 = -trace_product(q, &hom.hessian_log_p(0.0));
    let t2 = -trace_product(q, &hom.hessian_log_p(1.0));

    let mut out = Vec::with_capacity(ens.len());
    for i in 0..ens.len() {
        let x = ens.particle(i);
        let y = &s * &x + &beta;
        let log_p = hom.prior().eval(&x) + lambda * hom.likelihood().eval(&x) - log_gamma;
        let quad = y.dot(&(q * &y));
        out.push(DiagnosticsRecord {
            lambda,
            particle_id: ens.ids()[i],
            log_p,
            v: y.dot(&(&weights.m_lambda * &y)),
            v1: y.dot(&(&weights.m1 * &y)),
            v2: y.dot(&(&weights.m2 * &y)),
            lv: -quad + neg_trace_qs,
            gamma: gamma_val,
            partition: classify_with_thresholds(quad, t1, t2),
            x,
            y,
        });
    }
    Ok(out)
}
