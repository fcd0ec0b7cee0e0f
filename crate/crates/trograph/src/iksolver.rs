//! Joint-limited inverse kinematics from target link poses.
//!
//! The solver minimizes the summed squared log of the per-link pose error
//! over the joint vector and a free base transform, using Levenberg-
//! Marquardt with box projection onto the joint limits. The base absorbs
//! the rigid component of the targets, so poses predicted in an object
//! frame need no reachable-wrist assumption. Solves are pure functions of
//! the problem, the initial guess, and the RNG seed; batches parallelize
//! across problems without changing any per-problem result.

use crate::kinematics::{fk_jacobian, forward_kinematics, KinematicHand};
use crate::se3::{self, Pose6, TransformMatrix};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Random restarts tried when a solve stalls above the success residual.
pub const RESTART_COUNT: usize = 8;
/// Residual below which a solve counts as successful and restarts stop.
const SUCCESS_RESIDUAL: f64 = 1e-8;
/// Infinity-norm of the projected gradient that declares convergence.
const GRAD_TOL: f64 = 1e-9;
/// Looser gradient bound used when damping escalation runs out; a point
/// that is first-order stationary to this precision still counts as
/// converged even though no further step could be accepted.
const GRAD_TOL_STALLED: f64 = 1e-6;
const DAMPING_INIT: f64 = 1e-4;
const DAMPING_MAX: f64 = 1e14;

/// One inverse-kinematics instance: a hand, per-link pose targets in the
/// object frame, and solver settings.
#[derive(Debug, Clone)]
pub struct IkProblem {
    pub hand: KinematicHand,
    /// One target twist per link, in document order; only rows with a true
    /// mask entry constrain the solve.
    pub targets: Vec<Pose6>,
    pub mask: Vec<bool>,
    /// Per-link residual weights; ignored for masked-out links.
    pub weights: Vec<f64>,
    /// Initial guess for the hand-base transform, solved jointly with q.
    pub base_init: TransformMatrix,
    pub max_iters: usize,
    /// Minimum decrease of the objective between accepted steps; smaller
    /// progress stops the iteration as converged.
    pub tol: f64,
}

impl IkProblem {
    /// Problem with unit weights, an identity base guess, and default
    /// iteration settings.
    pub fn new(hand: KinematicHand, targets: Vec<Pose6>, mask: Vec<bool>) -> Result<Self> {
        let weights = vec![1.0; hand.link_count()];
        let problem = IkProblem {
            hand,
            targets,
            mask,
            weights,
            base_init: TransformMatrix::identity(),
            max_iters: 200,
            tol: 1e-14,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.hand.link_count();
        if self.targets.len() != n || self.mask.len() != n || self.weights.len() != n {
            return Err(Error::invalid(format!(
                "targets/mask/weights must have one entry per link ({n}), got {}/{}/{}",
                self.targets.len(),
                self.mask.len(),
                self.weights.len()
            )));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::invalid("at least one link must be targeted"));
        }
        for (i, target) in self.targets.iter().enumerate() {
            if self.mask[i] && !target.is_finite() {
                return Err(Error::invalid(format!("target for link {i} is not finite")));
            }
            if self.mask[i] && !(self.weights[i] > 0.0 && self.weights[i].is_finite()) {
                return Err(Error::invalid(format!(
                    "weight for targeted link {i} must be positive, got {}",
                    self.weights[i]
                )));
            }
        }
        self.base_init.validate()?;
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::invalid("tolerance must be positive and max_iters nonzero"));
        }
        Ok(())
    }
}

/// Solver output. `residual` is the weighted sum of squared log errors over
/// the targeted links at the returned point.
#[derive(Debug, Clone)]
pub struct IkSolution {
    pub q: Vec<f64>,
    pub base: TransformMatrix,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted step, starting at the initial
    /// point; never increasing.
    pub cost_trace: Vec<f64>,
}

struct Evaluation {
    cost: f64,
    /// Per targeted link: (link index, residual twist, error rotation).
    residuals: Vec<(usize, Pose6, Matrix3<f64>)>,
    link_poses: Vec<TransformMatrix>,
}

/// Targets as transforms, precomputed once per solve.
fn target_transforms(problem: &IkProblem) -> Result<Vec<Option<TransformMatrix>>> {
    let mut out = Vec::with_capacity(problem.targets.len());
    for (i, target) in problem.targets.iter().enumerate() {
        if problem.mask[i] {
            out.push(Some(se3::exp_map(target)?));
        } else {
            out.push(None);
        }
    }
    Ok(out)
}

fn evaluate(
    problem: &IkProblem,
    targets: &[Option<TransformMatrix>],
    base: &TransformMatrix,
    q: &[f64],
) -> Result<Evaluation> {
    let fk = forward_kinematics(&problem.hand, q)?;
    let mut cost = 0.0;
    let mut residuals = Vec::new();
    for (i, target) in targets.iter().enumerate() {
        let Some(target) = target else { continue };
        let world = se3::compose(base, &fk[i]);
        let err = se3::compose(&se3::inverse(target), &world);
        let r = se3::log_map(&err)?;
        cost += problem.weights[i] * (r.rho.norm_squared() + r.theta.norm_squared());
        residuals.push((i, r, err.rotation));
    }
    Ok(Evaluation { cost, residuals, link_poses: fk })
}

/// Stacked residual vector and its Jacobian with respect to
/// `[base twist (6), q (dof)]`, both scaled by the square-rooted weights.
///
/// The base moves multiplicatively (`base * exp(delta)`), so its columns
/// are the body-frame adjoint of each link pose. The translation rows use
/// the inverse left Jacobian of the residual rotation; the cross-coupling
/// of the translation rows into the rotation perturbation is dropped,
/// which leaves the zero-residual minimizer exact and only affects the
/// step direction far from it.
fn residual_jacobian(
    problem: &IkProblem,
    eval: &Evaluation,
    q: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dof = problem.hand.dof();
    let m = eval.residuals.len();
    let mut r = DVector::zeros(6 * m);
    let mut jac = DMatrix::zeros(6 * m, 6 + dof);
    for (row_block, (link, res, err_rot)) in eval.residuals.iter().enumerate() {
        let sqw = problem.weights[*link].sqrt();
        let base_row = 6 * row_block;
        let rv = res.to_vector();
        for k in 0..6 {
            r[base_row + k] = sqw * rv[k];
        }

        let v_inv = se3::so3_left_jacobian_inv(&res.theta);
        // d rho / d u for a body perturbation u of the error transform.
        let d_rho = v_inv * err_rot;
        // Right-Jacobian inverse of the rotation residual.
        let d_theta = se3::so3_left_jacobian_inv(&res.theta).transpose();

        let fk = &eval.link_poses[*link];
        let rt = fk.rotation.transpose();
        // Body twist of the link per unit base twist: the adjoint of the
        // inverse link pose.
        let tb = -(rt * fk.translation);
        let ad_top_right = skew(&tb) * rt;
        let top_left = d_rho * rt;
        let top_right = d_rho * ad_top_right;
        let bot_right = d_theta * rt;
        for rr in 0..3 {
            for cc in 0..3 {
                jac[(base_row + rr, cc)] = sqw * top_left[(rr, cc)];
                jac[(base_row + rr, 3 + cc)] = sqw * top_right[(rr, cc)];
                jac[(base_row + 3 + rr, 3 + cc)] = sqw * bot_right[(rr, cc)];
            }
        }

        if dof > 0 {
            let geo = fk_jacobian(&problem.hand, q, *link)?;
            for col in 0..dof {
                let v = Vector3::new(geo[(0, col)], geo[(1, col)], geo[(2, col)]);
                let w = Vector3::new(geo[(3, col)], geo[(4, col)], geo[(5, col)]);
                let u_body = rt * v;
                let w_body = rt * w;
                let rho_col = d_rho * u_body;
                let theta_col = d_theta * w_body;
                for k in 0..3 {
                    jac[(base_row + k, 6 + col)] = sqw * rho_col[k];
                    jac[(base_row + 3 + k, 6 + col)] = sqw * theta_col[k];
                }
            }
        }
    }
    Ok((r, jac))
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Gradient with the components that point out of the feasible box zeroed;
/// its norm going to zero is the first-order optimality condition under
/// the joint limits.
fn projected_gradient(g: &DVector<f64>, q: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..g.len() {
        let gk = g[k];
        let pg = if k < 6 {
            gk
        } else {
            let j = k - 6;
            if q[j] <= lo[j] {
                gk.min(0.0)
            } else if q[j] >= hi[j] {
                gk.max(0.0)
            } else {
                gk
            }
        };
        worst = worst.max(pg.abs());
    }
    worst
}

struct Attempt {
    q: Vec<f64>,
    base: TransformMatrix,
    cost: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn attempt(
    problem: &IkProblem,
    targets: &[Option<TransformMatrix>],
    q0: Vec<f64>,
    base0: TransformMatrix,
) -> Result<Attempt> {
    let (lo, hi) = problem.hand.limit_bounds();
    let mut q = q0;
    for (k, v) in q.iter_mut().enumerate() {
        *v = v.clamp(lo[k], hi[k]);
    }
    let mut base = base0;
    let mut eval = evaluate(problem, targets, &base, &q)?;
    let mut trace = vec![eval.cost];
    let mut mu = DAMPING_INIT;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..problem.max_iters {
        iterations = iter;
        let (r, mut jac) = residual_jacobian(problem, &eval, &q)?;
        let g = jac.transpose() * &r;
        if projected_gradient(&g, &q, &lo, &hi) < GRAD_TOL {
            converged = true;
            break;
        }

        // Active set: a joint pinned at a bound whose gradient points out
        // of the box is frozen for this iteration, so the base and free
        // joints get a step that is consistent without it.
        let mut frozen = vec![false; q.len()];
        for (k, f) in frozen.iter_mut().enumerate() {
            let gk = g[6 + k];
            *f = (q[k] <= lo[k] && gk >= 0.0) || (q[k] >= hi[k] && gk <= 0.0);
            if *f {
                for row in 0..jac.nrows() {
                    jac[(row, 6 + k)] = 0.0;
                }
            }
        }
        let g = jac.transpose() * &r;

        let jtj = jac.transpose() * &jac;
        let mut accepted = false;
        while mu <= DAMPING_MAX {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += mu * jtj[(k, k)].max(1e-12);
            }
            let Some(chol) = a.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let mut step = chol.solve(&(-&g));
            for (k, f) in frozen.iter().enumerate() {
                if *f {
                    step[6 + k] = 0.0;
                }
            }
            let delta = Pose6::from_vector(nalgebra::Vector6::new(
                step[0], step[1], step[2], step[3], step[4], step[5],
            ));
            let trial_base = se3::compose(&base, &se3::exp_map(&delta)?);
            let mut trial_q = q.clone();
            for k in 0..trial_q.len() {
                trial_q[k] = (q[k] + step[6 + k]).clamp(lo[k], hi[k]);
            }
            match evaluate(problem, targets, &trial_base, &trial_q) {
                Ok(trial) if trial.cost < eval.cost => {
                    let drop = eval.cost - trial.cost;
                    q = trial_q;
                    base = trial_base;
                    eval = trial;
                    trace.push(eval.cost);
                    mu = (mu / 3.0).max(1e-12);
                    accepted = true;
                    if drop < problem.tol {
                        converged = true;
                    }
                    break;
                }
                // A trial point whose error log lands in the singular band
                // is simply rejected like any non-improving step.
                Ok(_) | Err(Error::NearSingularity(_)) => mu *= 10.0,
                Err(e) => return Err(e),
            }
        }
        if converged {
            break;
        }
        if !accepted {
            // Damping ran out: no improving step exists at this scale.
            let (r2, jac2) = residual_jacobian(problem, &eval, &q)?;
            let g2 = jac2.transpose() * &r2;
            converged = projected_gradient(&g2, &q, &lo, &hi) < GRAD_TOL_STALLED;
            break;
        }
    }

    Ok(Attempt { q, base, cost: eval.cost, iterations: iterations + 1, converged, trace })
}

/// Solves one problem. `q_init` seeds the first attempt when present
/// (clamped into the limits); otherwise the mid-range configuration is
/// used. While the best residual stays above the success threshold, up to
/// [`RESTART_COUNT`] random restarts draw joint values uniformly inside
/// the limits and perturb the base guess.
pub fn solve_ik(
    problem: &IkProblem,
    q_init: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Result<IkSolution> {
    problem.validate()?;
    if let Some(q) = q_init {
        if q.len() != problem.hand.dof() {
            return Err(Error::invalid(format!(
                "q_init has {} entries, hand has {} actuated joints",
                q.len(),
                problem.hand.dof()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("q_init contains non-finite values"));
        }
    }
    let targets = target_transforms(problem)?;
    let (lo, hi) = problem.hand.limit_bounds();
    let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();

    let first_q = q_init.map(|q| q.to_vec()).unwrap_or_else(|| mid.clone());
    let mut best: Option<Attempt> = None;
    for restart in 0..=RESTART_COUNT {
        let (q0, base0) = if restart == 0 {
            (first_q.clone(), problem.base_init)
        } else {
            let q0 = lo
                .iter()
                .zip(&hi)
                .map(|(a, b)| a + rng.gen::<f64>() * (b - a))
                .collect();
            let axis_raw = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            let axis = if axis_raw.norm() < 1e-9 { Vector3::x() } else { axis_raw.normalize() };
            let jitter = Pose6::new(
                Vector3::new(
                    0.2 * (rng.gen::<f64>() - 0.5),
                    0.2 * (rng.gen::<f64>() - 0.5),
                    0.2 * (rng.gen::<f64>() - 0.5),
                ),
                axis * (rng.gen::<f64>() * 2.5),
            );
            (q0, se3::compose(&problem.base_init, &se3::exp_map(&jitter)?))
        };
        match attempt(problem, &targets, q0, base0) {
            Ok(result) => {
                let better = best.as_ref().map_or(true, |b| result.cost < b.cost);
                if better {
                    best = Some(result);
                }
            }
            // A start point whose initial error log is singular is skipped.
            Err(Error::NearSingularity(_)) => {}
            Err(e) => return Err(e),
        }
        if best.as_ref().is_some_and(|b| b.converged && b.cost <= SUCCESS_RESIDUAL) {
            break;
        }
    }

    let best = best.ok_or_else(|| {
        Error::Numerical("every start point landed in the singular rotation band".into())
    })?;
    Ok(IkSolution {
        q: best.q,
        base: best.base,
        residual: best.cost,
        iterations: best.iterations,
        converged: best.converged,
        cost_trace: best.trace,
    })
}

/// Solves many problems in parallel. Every problem is solved with its own
/// generator seeded identically from `seed`, so results depend only on the
/// problem itself, never on batch order or thread scheduling. Failures
/// stay per-item.
pub fn batch_solve(problems: &[IkProblem], seed: u64) -> Vec<Result<IkSolution>> {
    problems
        .par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            solve_ik(p, None, &mut rng)
        })
        .collect()
}
