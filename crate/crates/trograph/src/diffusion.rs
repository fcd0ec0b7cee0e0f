//! Noise schedules, forward noising, and DDIM reverse sampling over link
//! pose rows, with gradient-guidance hooks for pose- and contact-conditioned
//! synthesis.
//!
//! Noise lives purely in the six Lie-algebra coordinates of each link pose.
//! Object nodes and geometry embeddings never change; every reverse step
//! rebuilds the graph so its edges stay consistent with the denoised poses.

use crate::graph::{LinkNodeSet, TroGraph};
use crate::pointcloud::PointCloud;
use crate::se3::{
    geodesic_grad, left_jacobian_jacobian, rotation_jacobian, so3_exp, so3_left_jacobian,
    TransformMatrix,
};
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Default diffusion step count.
pub const DEFAULT_STEP_COUNT: usize = 1000;
/// Default variance at the first step.
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
/// Default variance at the last step.
pub const DEFAULT_BETA_MAX: f64 = 0.02;
/// Default number of DDIM inference steps.
pub const DEFAULT_DDIM_STEPS: usize = 20;
/// Default scale on the random-noise term of each reverse step.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Variance schedule plus the DDIM sub-grid used at inference time.
///
/// `beta` and `alpha_bar` are indexed by step `t` directly; index 0 is the
/// clean state, so `beta(0) = 0` and `alpha_bar(0) = 1` by definition, which
/// is what makes the final reverse hop to `t = 0` well defined.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    ddim: Vec<usize>,
    lambda: f64,
}

/// Builds a linearly spaced variance schedule with exact endpoints:
/// `beta(1) = beta_min` and `beta(t_count) = beta_max` bit for bit.
///
/// The DDIM grid defaults to `min(20, t_count)` evenly spaced steps and the
/// noise scale to 0.2; adjust with [`DiffusionSchedule::with_ddim_steps`] and
/// [`DiffusionSchedule::with_lambda`].
pub fn linear_schedule(t_count: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if t_count < 2 {
        return Err(Error::invalid(format!(
            "schedule needs at least 2 steps to hold both endpoints, got {t_count}"
        )));
    }
    if !(beta_min.is_finite() && beta_max.is_finite())
        || beta_min <= 0.0
        || beta_max >= 1.0
        || beta_min >= beta_max
    {
        return Err(Error::invalid(format!(
            "variance bounds must satisfy 0 < {beta_min} < {beta_max} < 1"
        )));
    }
    let mut beta = Vec::with_capacity(t_count + 1);
    let mut alpha_bar = Vec::with_capacity(t_count + 1);
    beta.push(0.0);
    alpha_bar.push(1.0);
    let mut running = 1.0f64;
    for t in 1..=t_count {
        // Lerp form rather than min + step * k: s hits exactly 0 and 1 at the
        // ends, so the endpoints reproduce the bounds bit for bit.
        let s = (t - 1) as f64 / (t_count - 1) as f64;
        let b = beta_min * (1.0 - s) + beta_max * s;
        beta.push(b);
        running *= 1.0 - b;
        alpha_bar.push(running);
    }
    let schedule = DiffusionSchedule { beta, alpha_bar, ddim: Vec::new(), lambda: DEFAULT_LAMBDA };
    schedule.with_ddim_steps(DEFAULT_DDIM_STEPS.min(t_count))
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        linear_schedule(DEFAULT_STEP_COUNT, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule parameters are valid")
    }
}

impl DiffusionSchedule {
    /// Total number of diffusion steps `T`.
    pub fn t_count(&self) -> usize {
        self.beta.len() - 1
    }

    /// Variance at step `t`, `1 <= t <= T` (`beta(0) = 0`).
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t < self.beta.len(), "step {t} outside schedule");
        self.beta[t]
    }

    /// `alpha(t) = 1 - beta(t)`.
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t < self.alpha_bar.len(), "step {t} outside schedule");
        self.alpha_bar[t]
    }

    /// The ascending DDIM sub-grid; its last entry is always `T`.
    pub fn ddim_steps(&self) -> &[usize] {
        &self.ddim
    }

    /// Scale on the fresh-noise term of each reverse step.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Replaces the DDIM grid with `m` evenly spaced steps `i * T / m`.
    pub fn with_ddim_steps(mut self, m: usize) -> Result<Self> {
        let t = self.t_count();
        if m == 0 || m > t {
            return Err(Error::invalid(format!(
                "ddim step count must lie in 1..={t}, got {m}"
            )));
        }
        self.ddim = (1..=m).map(|i| i * t / m).collect();
        Ok(self)
    }

    /// Replaces the noise scale.
    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid(format!(
                "noise scale must be finite and non-negative, got {lambda}"
            )));
        }
        self.lambda = lambda;
        Ok(self)
    }

    /// 1-based position of `t` in the DDIM grid, if it lies on the grid.
    pub fn grid_position(&self, t: usize) -> Option<usize> {
        self.ddim.iter().position(|&g| g == t).map(|i| i + 1)
    }

    /// The grid step closest to `t`; ties resolve to the smaller step.
    pub fn nearest_grid_step(&self, t: usize) -> usize {
        let mut best = self.ddim[0];
        let mut best_dist = best.abs_diff(t);
        for &g in &self.ddim[1..] {
            let d = g.abs_diff(t);
            if d < best_dist {
                best = g;
                best_dist = d;
            }
        }
        best
    }
}

/// One noisy sample of the pose rows at step `t` along with the exact noise
/// that produced it: `psi_t = sqrt(abar_t) psi_0 + sqrt(1 - abar_t) eps`.
///
/// Masked rows stay zero and draw no noise.
pub fn forward_noise(
    psi0: &[[f64; 6]],
    mask: &[bool],
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<[f64; 6]>, Vec<[f64; 6]>)> {
    let mut eps = vec![[0.0; 6]; psi0.len()];
    for (row, &real) in eps.iter_mut().zip(mask.iter()) {
        if real {
            for x in row.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
        }
    }
    let noisy = forward_noise_with_eps(psi0, mask, t, schedule, &eps)?;
    Ok((noisy, eps))
}

/// Deterministic counterpart of [`forward_noise`] with caller-supplied noise.
pub fn forward_noise_with_eps(
    psi0: &[[f64; 6]],
    mask: &[bool],
    t: usize,
    schedule: &DiffusionSchedule,
    eps: &[[f64; 6]],
) -> Result<Vec<[f64; 6]>> {
    if psi0.len() != mask.len() || eps.len() != mask.len() {
        return Err(Error::invalid(format!(
            "row counts disagree: {} poses, {} noise rows, {} mask entries",
            psi0.len(),
            eps.len(),
            mask.len()
        )));
    }
    if t == 0 || t > schedule.t_count() {
        return Err(Error::invalid(format!(
            "noising step must lie in 1..={}, got {t}",
            schedule.t_count()
        )));
    }
    let scale_signal = schedule.alpha_bar(t).sqrt();
    let scale_noise = (1.0 - schedule.alpha_bar(t)).sqrt();
    let mut out = vec![[0.0; 6]; psi0.len()];
    for j in 0..psi0.len() {
        if mask[j] {
            for k in 0..6 {
                out[j][k] = scale_signal * psi0[j][k] + scale_noise * eps[j][k];
            }
        }
    }
    Ok(out)
}

/// Noises a clean graph's pose rows to step `t` and rebuilds the link nodes
/// and edges around them. Geometry embeddings are untouched.
pub fn renoise_graph(
    g0: &TroGraph,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<TroGraph> {
    let (noisy, _) = forward_noise(&g0.link_nodes.poses, &g0.link_nodes.mask, t, schedule, rng)?;
    g0.with_poses(&noisy)
}

/// DDIM posterior noise scale for the hop `t -> t_prev`:
/// `sigma = sqrt((1 - abar_{t'}) / (1 - abar_t)) * sqrt(1 - abar_t / abar_{t'})`.
///
/// With `alpha_bar(0) = 1` the final hop gets `sigma = 0`, making the last
/// step deterministic.
pub fn ddim_sigma(t: usize, t_prev: usize, schedule: &DiffusionSchedule) -> f64 {
    assert!(t_prev < t, "hop must go backwards: {t_prev} !< {t}");
    let a_t = schedule.alpha_bar(t);
    let a_p = schedule.alpha_bar(t_prev);
    ((1.0 - a_p) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_p).max(0.0).sqrt()
}

/// What to steer toward while sampling.
#[derive(Debug, Clone)]
pub enum GuidanceKind {
    /// No steering.
    None,
    /// Pull the palm rotation toward a target orientation.
    Pose { r_init: Matrix3<f64> },
    /// Pull the palm toward a contact frame and link centers toward a
    /// heat-weighted contact region on the object surface.
    Contact { points: Vec<Vector3<f64>>, heat: Vec<f64>, r_cont: Matrix3<f64> },
}

/// Full conditioning recipe for a sampling run.
#[derive(Debug, Clone)]
pub struct GuidanceSpec {
    pub kind: GuidanceKind,
    /// Conditioned runs renoise the template poses to this step and sample
    /// down from there; it must lie on the DDIM grid. `None` samples the
    /// whole grid from pure noise.
    pub t_star: Option<usize>,
    /// Peak steering strength `g_s`; per-step strength ramps up to it.
    pub strength_max: f64,
    /// Row of the palm link in the padded link set.
    pub palm_row: usize,
}

impl GuidanceSpec {
    /// A spec that conditions nothing and steers nothing.
    pub fn none() -> Self {
        GuidanceSpec { kind: GuidanceKind::None, t_star: None, strength_max: 0.0, palm_row: 0 }
    }

    pub fn validate(&self, schedule: &DiffusionSchedule, links: &LinkNodeSet) -> Result<()> {
        if !self.strength_max.is_finite() || self.strength_max < 0.0 {
            return Err(Error::invalid(format!(
                "guidance strength must be finite and non-negative, got {}",
                self.strength_max
            )));
        }
        if let Some(t_star) = self.t_star {
            if schedule.grid_position(t_star).is_none() {
                return Err(Error::invalid(format!(
                    "conditioning step {t_star} is not on the ddim grid {:?}",
                    schedule.ddim_steps()
                )));
            }
        }
        let check_palm = |what: &str| -> Result<()> {
            if self.palm_row >= links.slot_count() || !links.mask[self.palm_row] {
                return Err(Error::invalid(format!(
                    "{what} guidance needs an unmasked palm row, got row {} of {}",
                    self.palm_row,
                    links.slot_count()
                )));
            }
            Ok(())
        };
        match &self.kind {
            GuidanceKind::None => {}
            GuidanceKind::Pose { r_init } => {
                check_palm("pose")?;
                TransformMatrix::new(*r_init, Vector3::zeros())?;
            }
            GuidanceKind::Contact { points, heat, r_cont } => {
                check_palm("contact")?;
                TransformMatrix::new(*r_cont, Vector3::zeros())?;
                if points.is_empty() || points.len() != heat.len() {
                    return Err(Error::invalid(format!(
                        "contact region needs matching non-empty points and heat, got {} and {}",
                        points.len(),
                        heat.len()
                    )));
                }
                if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
                    return Err(Error::invalid("contact points contain non-finite values"));
                }
                if heat.iter().any(|&h| !h.is_finite() || h < 0.0) {
                    return Err(Error::invalid("contact heat values must be finite and >= 0"));
                }
                if !heat.iter().any(|&h| h > 0.0) {
                    return Err(Error::invalid("contact heat must have at least one positive value"));
                }
            }
        }
        Ok(())
    }
}

/// Steering strength for the `step_index`-th of `m` sampler iterations
/// (1-based): `g_s * sin(i pi / 2m)`. Weak early, peaking at the final step,
/// so early steps keep their diversity.
pub fn guidance_strength(strength_max: f64, step_index: usize, m: usize) -> f64 {
    strength_max * ((step_index as f64) * PI / (2.0 * m as f64)).sin()
}

/// World-frame center of each unmasked link under the candidate pose rows:
/// the local centroid pushed through `exp` of the row's twist.
fn link_world_centers(psi: &[[f64; 6]], links: &LinkNodeSet) -> Vec<Option<Vector3<f64>>> {
    psi.iter()
        .zip(&links.mask)
        .zip(&links.centers)
        .map(|((row, &real), center)| {
            if !real {
                return None;
            }
            let rho = Vector3::new(row[0], row[1], row[2]);
            let theta = Vector3::new(row[3], row[4], row[5]);
            let c = Vector3::new(center[0], center[1], center[2]);
            Some(so3_exp(&theta) * c + so3_left_jacobian(&theta) * rho)
        })
        .collect()
}

/// Heat-weighted mean squared distance from the contact points to their
/// nearest unmasked link centers under the candidate poses.
pub fn contact_distance_loss(
    psi: &[[f64; 6]],
    links: &LinkNodeSet,
    points: &[Vector3<f64>],
    heat: &[f64],
) -> Result<f64> {
    let centers = link_world_centers(psi, links);
    let wsum: f64 = heat.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::invalid("contact heat sums to zero"));
    }
    let mut loss = 0.0;
    for (p, &h) in points.iter().zip(heat) {
        let nearest = centers
            .iter()
            .flatten()
            .map(|c| (p - c).norm_squared())
            .fold(f64::INFINITY, f64::min);
        loss += h * nearest;
    }
    Ok(loss / wsum)
}

/// Analytic gradient of [`contact_distance_loss`] with respect to every pose
/// coordinate. Each contact point pulls only on its nearest link (ties go to
/// the lowest row index); rows that are nearest to no point get zero rows.
pub fn contact_distance_grad(
    psi: &[[f64; 6]],
    links: &LinkNodeSet,
    points: &[Vector3<f64>],
    heat: &[f64],
) -> Result<Vec<[f64; 6]>> {
    let centers = link_world_centers(psi, links);
    let wsum: f64 = heat.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::invalid("contact heat sums to zero"));
    }
    let mut grad = vec![[0.0; 6]; psi.len()];
    for (p, &h) in points.iter().zip(heat) {
        let mut best: Option<(usize, f64)> = None;
        for (j, c) in centers.iter().enumerate() {
            if let Some(c) = c {
                let d = (p - c).norm_squared();
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
        }
        let Some((j, _)) = best else { continue };
        let c = centers[j].expect("nearest row is unmasked");
        let rho = Vector3::new(psi[j][0], psi[j][1], psi[j][2]);
        let theta = Vector3::new(psi[j][3], psi[j][4], psi[j][5]);
        let local = Vector3::new(links.centers[j][0], links.centers[j][1], links.centers[j][2]);
        let w = h / wsum;
        // d ||p - x||^2 = -2 (p - x) . dx, with x = R(theta) c + V(theta) rho.
        let pull = (p - c) * (-2.0 * w);
        let v = so3_left_jacobian(&theta);
        let dr = rotation_jacobian(&theta);
        let dv = left_jacobian_jacobian(&theta);
        let rho_part = v.transpose() * pull;
        for k in 0..3 {
            grad[j][k] += rho_part[k];
            grad[j][3 + k] += pull.dot(&(dr[k] * local + dv[k] * rho));
        }
    }
    Ok(grad)
}

/// One steering update on the denoised pose estimate:
/// `psi0_hat <- psi0_hat - s(i) * grad(loss)`.
///
/// Pose guidance moves only the palm row's rotation coordinates; contact
/// guidance additionally moves whole rows toward the contact region.
pub fn apply_guidance(
    psi0_hat: &mut [[f64; 6]],
    links: &LinkNodeSet,
    step_index: usize,
    spec: &GuidanceSpec,
    schedule: &DiffusionSchedule,
) -> Result<()> {
    let m = schedule.ddim_steps().len();
    if step_index == 0 || step_index > m {
        return Err(Error::invalid(format!(
            "guidance step index must lie in 1..={m}, got {step_index}"
        )));
    }
    let s = guidance_strength(spec.strength_max, step_index, m);
    match &spec.kind {
        GuidanceKind::None => {}
        GuidanceKind::Pose { r_init } => {
            let row = &mut psi0_hat[spec.palm_row];
            let theta = Vector3::new(row[3], row[4], row[5]);
            let g = geodesic_grad(r_init, &theta);
            for k in 0..3 {
                row[3 + k] -= s * g[k];
            }
        }
        GuidanceKind::Contact { points, heat, r_cont } => {
            let palm = &mut psi0_hat[spec.palm_row];
            let theta = Vector3::new(palm[3], palm[4], palm[5]);
            let g = geodesic_grad(r_cont, &theta);
            for k in 0..3 {
                palm[3 + k] -= s * g[k];
            }
            let grad = contact_distance_grad(psi0_hat, links, points, heat)?;
            for (row, g) in psi0_hat.iter_mut().zip(&grad) {
                for k in 0..6 {
                    row[k] -= s * g[k];
                }
            }
        }
    }
    Ok(())
}

/// Result of one reverse step: the rebuilt graph at `t_prev` and whether the
/// direction-term radicand had to be clamped at zero (float rounding only;
/// it is non-negative analytically).
#[derive(Debug)]
pub struct StepOutcome {
    pub graph: TroGraph,
    pub radicand_clamped: bool,
}

/// One DDIM hop `t -> t_prev` given the predicted noise:
/// recover `psi0_hat`, optionally steer it, re-derive the noise if steered,
/// then form `sqrt(abar_{t'}) psi0_hat + sqrt(1 - abar_{t'} - sigma^2) eps
/// + lambda sigma z` and rebuild the graph around the new rows.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    g_t: &TroGraph,
    t: usize,
    t_prev: usize,
    eps_pred: &[[f64; 6]],
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
    guidance: Option<&GuidanceSpec>,
    step_index: usize,
) -> Result<StepOutcome> {
    let links = &g_t.link_nodes;
    if eps_pred.len() != links.slot_count() {
        return Err(Error::invalid(format!(
            "{} noise rows for {} link slots",
            eps_pred.len(),
            links.slot_count()
        )));
    }
    if eps_pred.iter().any(|row| row.iter().any(|x| !x.is_finite())) {
        return Err(Error::invalid("predicted noise contains non-finite values"));
    }
    let a_t = schedule.alpha_bar(t);
    let a_p = schedule.alpha_bar(t_prev);
    let noise_scale = (1.0 - a_t).sqrt();
    let signal_scale = a_t.sqrt();

    let mut psi0_hat = vec![[0.0; 6]; links.slot_count()];
    for j in 0..links.slot_count() {
        if links.mask[j] {
            for k in 0..6 {
                psi0_hat[j][k] = (links.poses[j][k] - noise_scale * eps_pred[j][k]) / signal_scale;
            }
        }
    }

    let mut eps = eps_pred.to_vec();
    if let Some(spec) = guidance {
        if !matches!(spec.kind, GuidanceKind::None) {
            apply_guidance(&mut psi0_hat, links, step_index, spec, schedule)?;
            for j in 0..links.slot_count() {
                if links.mask[j] {
                    for k in 0..6 {
                        eps[j][k] =
                            (links.poses[j][k] - signal_scale * psi0_hat[j][k]) / noise_scale;
                    }
                }
            }
        }
    }

    let sigma = ddim_sigma(t, t_prev, schedule);
    let radicand = 1.0 - a_p - sigma * sigma;
    let radicand_clamped = radicand < 0.0;
    let dir_scale = radicand.max(0.0).sqrt();
    let prev_signal = a_p.sqrt();
    let fresh_scale = schedule.lambda() * sigma;

    let mut out = vec![[0.0; 6]; links.slot_count()];
    for j in 0..links.slot_count() {
        if !links.mask[j] {
            continue;
        }
        for k in 0..6 {
            out[j][k] = prev_signal * psi0_hat[j][k] + dir_scale * eps[j][k];
        }
        if t_prev >= 1 {
            for k in 0..6 {
                let z: f64 = rng.sample(StandardNormal);
                out[j][k] += fresh_scale * z;
            }
        }
    }
    Ok(StepOutcome { graph: g_t.with_poses(&out)?, radicand_clamped })
}

/// A noise predictor the sampler can drive: given the noisy graph at step
/// `t`, produce the per-row noise estimate.
pub trait NoisePredictor {
    fn predict_noise(&self, graph: &TroGraph, t: usize) -> Result<Vec<[f64; 6]>>;
}

/// Counters from one sampling run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleStats {
    /// Reverse steps actually executed.
    pub steps: usize,
    /// Steps whose direction-term radicand was clamped at zero.
    pub radicand_clamps: usize,
}

/// Runs the reverse chain down the DDIM grid and returns the clean graph.
///
/// The template supplies everything except the pose rows. Without a
/// conditioning step the rows start as fresh standard normal draws at `T`
/// and the whole grid is traversed; with `t_star` set the template's own
/// rows are renoised to `t_star` and only the grid portion at or below it
/// runs, so the output stays near the template.
pub fn sample(
    template: &TroGraph,
    schedule: &DiffusionSchedule,
    denoiser: &dyn NoisePredictor,
    guidance: Option<&GuidanceSpec>,
    rng: &mut ChaCha8Rng,
) -> Result<(TroGraph, SampleStats)> {
    if let Some(spec) = guidance {
        spec.validate(schedule, &template.link_nodes)?;
    }
    let grid = schedule.ddim_steps();
    let m = grid.len();
    let start_pos = match guidance.and_then(|g| g.t_star) {
        Some(t_star) => schedule.grid_position(t_star).ok_or_else(|| {
            Error::invalid(format!("conditioning step {t_star} is not on the ddim grid"))
        })?,
        None => m,
    };

    let mut g = match guidance.and_then(|g| g.t_star) {
        Some(t_star) => renoise_graph(template, t_star, schedule, rng)?,
        None => {
            let mut rows = vec![[0.0; 6]; template.link_nodes.slot_count()];
            for (row, &real) in rows.iter_mut().zip(&template.link_nodes.mask) {
                if real {
                    for x in row.iter_mut() {
                        *x = rng.sample(StandardNormal);
                    }
                }
            }
            template.with_poses(&rows)?
        }
    };

    let mut stats = SampleStats { steps: 0, radicand_clamps: 0 };
    for pos in (1..=start_pos).rev() {
        let t = grid[pos - 1];
        let t_prev = if pos > 1 { grid[pos - 2] } else { 0 };
        let step_index = m - pos + 1;
        let eps = denoiser.predict_noise(&g, t)?;
        let outcome = ddim_step(&g, t, t_prev, &eps, schedule, rng, guidance, step_index)?;
        g = outcome.graph;
        stats.steps += 1;
        if outcome.radicand_clamped {
            stats.radicand_clamps += 1;
        }
    }
    Ok((g, stats))
}

/// Draws `count` independent chains, one ChaCha stream per chain index, so
/// results are deterministic per index no matter how the batch is scheduled.
pub fn sample_batch(
    template: &TroGraph,
    schedule: &DiffusionSchedule,
    denoiser: &(dyn NoisePredictor + Sync),
    guidance: Option<&GuidanceSpec>,
    root_seed: u64,
    count: usize,
) -> Vec<Result<(TroGraph, SampleStats)>> {
    (0..count)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
            rng.set_stream(index as u64);
            sample(template, schedule, denoiser, guidance, &mut rng)
        })
        .collect()
}

/// Builds a contact region around one cloud point: its `k` nearest
/// neighbours, Gaussian heat falling off with distance from the center, and
/// a palm frame whose approach axis (local `+z`) opposes the estimated
/// outward surface normal at the center.
///
/// The normal is the smallest principal axis of the neighbourhood, oriented
/// away from the cloud centroid. Deterministic for a fixed cloud.
pub fn contact_region_from_cloud(
    cloud: &PointCloud,
    center_index: usize,
    k: usize,
    heat_sigma: f64,
) -> Result<(Vec<Vector3<f64>>, Vec<f64>, Matrix3<f64>)> {
    if center_index >= cloud.points.len() {
        return Err(Error::invalid(format!(
            "contact center index {center_index} outside cloud of {} points",
            cloud.points.len()
        )));
    }
    if k < 3 || k > cloud.points.len() {
        return Err(Error::invalid(format!(
            "contact region needs 3..={} points, got {k}",
            cloud.points.len()
        )));
    }
    if !(heat_sigma.is_finite() && heat_sigma > 0.0) {
        return Err(Error::invalid(format!("heat width must be positive, got {heat_sigma}")));
    }
    let center = cloud.points[center_index];
    let mut order: Vec<usize> = (0..cloud.points.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (cloud.points[a] - center).norm_squared();
        let db = (cloud.points[b] - center).norm_squared();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    let points: Vec<Vector3<f64>> = order[..k].iter().map(|&i| cloud.points[i]).collect();
    let heat: Vec<f64> = points
        .iter()
        .map(|p| (-(p - center).norm_squared() / (2.0 * heat_sigma * heat_sigma)).exp())
        .collect();

    let local_mean = points.iter().sum::<Vector3<f64>>() / k as f64;
    let mut cov = Matrix3::zeros();
    for p in &points {
        let d = p - local_mean;
        cov += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut smallest = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[smallest] {
            smallest = i;
        }
    }
    let mut normal: Vector3<f64> = eig.eigenvectors.column(smallest).into();
    if normal.norm() < 1e-12 {
        return Err(Error::Numerical("degenerate contact neighbourhood".into()));
    }
    normal /= normal.norm();
    let outward = center - cloud.centroid();
    let along = normal.dot(&outward);
    if along < 0.0 || (along == 0.0 && leading_sign(&normal) < 0.0) {
        normal = -normal;
    }

    // Palm approach axis opposes the surface normal; tangent picked from the
    // coordinate axis least aligned with it for a deterministic frame.
    let z_axis = -normal;
    let mut seed_axis = Vector3::x();
    let mut best = z_axis.x.abs();
    if z_axis.y.abs() < best {
        seed_axis = Vector3::y();
        best = z_axis.y.abs();
    }
    if z_axis.z.abs() < best {
        seed_axis = Vector3::z();
    }
    let mut x_axis = seed_axis - z_axis * seed_axis.dot(&z_axis);
    x_axis /= x_axis.norm();
    let y_axis = z_axis.cross(&x_axis);
    let r_cont = Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
    Ok((points, heat, r_cont))
}

fn leading_sign(v: &Vector3<f64>) -> f64 {
    for &x in v.iter() {
        if x != 0.0 {
            return x.signum();
        }
    }
    1.0
}
