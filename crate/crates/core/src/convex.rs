//! Strongly convex testbed for the convergence rate of partial training.
//!
//! Each device holds `F_k(w) = ½ (w − w_k°)ᵀ Q_k (w − w_k°)` with
//! `Q_k = A_kᵀA_k + μI`. The parameter vector is cut into contiguous blocks
//! that play the role of layers: a device of width `i` only applies the
//! gradient on the blocks its mask covers, and the server averages each block
//! over the devices that updated it. Optima are known in closed form, so the
//! loss gap `F(w^t) − F*` is exact.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::aggregation::compute_weights;
use crate::error::{Error, Result};
use crate::masking::{BpMask, WidthMenu};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticTaskConfig {
    pub devices: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heterogeneity: f64,
    pub mu: f64,
    pub seed: u64,
}

impl Default for QuadraticTaskConfig {
    fn default() -> Self {
        Self {
            devices: 5,
            dim: 12,
            blocks: 3,
            heterogeneity: 1.0,
            mu: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticTask {
    pub q: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    /// Planted per-device minimizers `w_k°`.
    pub planted: Vec<DVector<f64>>,
    pub mu: f64,
    pub blocks: Vec<Range<usize>>,
    w_star: DVector<f64>,
    f_star: f64,
}

pub fn build_quadratic_task(cfg: &QuadraticTaskConfig) -> Result<QuadraticTask> {
    let QuadraticTaskConfig {
        devices,
        dim,
        blocks,
        heterogeneity,
        mu,
        seed,
    } = *cfg;
    if devices == 0 || blocks == 0 || dim == 0 || dim % blocks != 0 {
        return Err(Error::InvalidArgument(format!(
            "need positive devices and a dim ({dim}) divisible by blocks ({blocks})"
        )));
    }
    if !(mu > 0.0) || !(heterogeneity >= 0.0) {
        return Err(Error::InvalidArgument(
            "mu must be positive and heterogeneity non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let base = DVector::from_fn(dim, |_, _| normal());
    let scale = 1.0 / (dim as f64).sqrt();
    let mut q = Vec::with_capacity(devices);
    let mut b = Vec::with_capacity(devices);
    let mut planted = Vec::with_capacity(devices);
    for _ in 0..devices {
        let a = DMatrix::from_fn(dim, dim, |_, _| scale * normal());
        let qk = a.transpose() * &a + DMatrix::identity(dim, dim) * mu;
        let wk = &base + DVector::from_fn(dim, |_, _| heterogeneity * normal());
        b.push(&qk * &wk);
        q.push(qk);
        planted.push(wk);
    }
    let q_sum = q.iter().fold(DMatrix::zeros(dim, dim), |acc, m| acc + m);
    let b_sum = b.iter().fold(DVector::zeros(dim), |acc, v| acc + v);
    let w_star = q_sum
        .cholesky()
        .expect("sum of positive-definite matrices is positive definite")
        .solve(&b_sum);
    let width = dim / blocks;
    let mut task = QuadraticTask {
        q,
        b,
        planted,
        mu,
        blocks: (0..blocks).map(|i| i * width..(i + 1) * width).collect(),
        w_star,
        f_star: 0.0,
    };
    task.f_star = task.global_loss(&task.w_star.clone());
    Ok(task)
}

impl QuadraticTask {
    pub fn dim(&self) -> usize {
        self.w_star.len()
    }

    pub fn devices(&self) -> usize {
        self.q.len()
    }

    pub fn w_star(&self) -> &DVector<f64> {
        &self.w_star
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn device_loss(&self, k: usize, w: &DVector<f64>) -> f64 {
        let d = w - &self.planted[k];
        0.5 * d.dot(&(&self.q[k] * &d))
    }

    pub fn global_loss(&self, w: &DVector<f64>) -> f64 {
        (0..self.devices()).map(|k| self.device_loss(k, w)).sum::<f64>() / self.devices() as f64
    }

    pub fn device_grad(&self, k: usize, w: &DVector<f64>) -> DVector<f64> {
        &self.q[k] * w - &self.b[k]
    }

    pub fn global_grad(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for k in 0..self.devices() {
            g += self.device_grad(k, w);
        }
        g / self.devices() as f64
    }

    /// Device minimizer from `Q_k w = b_k`.
    pub fn device_optimum(&self, k: usize) -> DVector<f64> {
        self.q[k]
            .clone()
            .cholesky()
            .expect("Q_k is positive definite")
            .solve(&self.b[k])
    }

    /// Largest eigenvalue over all `Q_k` (smoothness constant).
    pub fn smoothness(&self) -> f64 {
        self.q
            .iter()
            .map(|m| SymmetricEigen::new(m.clone()).eigenvalues.max())
            .fold(0.0, f64::max)
    }

    /// Smallest eigenvalue over all `Q_k` (at least `mu`).
    pub fn strong_convexity(&self) -> f64 {
        self.q
            .iter()
            .map(|m| SymmetricEigen::new(m.clone()).eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Mean gap between the global optimum value and each device's own optimum.
pub fn compute_lambda(task: &QuadraticTask) -> f64 {
    let k = task.devices();
    (0..k)
        .map(|d| task.f_star - task.device_loss(d, &task.device_optimum(d)))
        .sum::<f64>()
        / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsiValues {
    /// `Σ_i |I||S| / Σ_{j≥i} p_j`, the form carried through the bound.
    pub proof_form: f64,
    /// `Σ_i 1 / Σ_{j≥i} p_j`.
    pub statement_form: f64,
}

/// Model-splitting constant from the proportions `p_j` of devices per width.
pub fn compute_psi(proportions: &[f64], num_selected: usize) -> Result<PsiValues> {
    if proportions.is_empty() || proportions.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::InvalidArgument(
            "proportions must be non-negative and non-empty".into(),
        ));
    }
    let total: f64 = proportions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "proportions sum to {total}, expected 1"
        )));
    }
    let widths = proportions.len() as f64;
    let mut statement_form = 0.0;
    for i in 0..proportions.len() {
        let tail: f64 = proportions[i..].iter().sum();
        if tail <= 0.0 {
            return Err(Error::ZeroTailSum { width: i + 1 });
        }
        statement_form += 1.0 / tail;
    }
    Ok(PsiValues {
        proof_form: widths * num_selected as f64 * statement_form,
        statement_form,
    })
}

/// Constants entering the convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundConstants {
    pub gamma1: f64,
    pub lambda: f64,
    pub local_steps: usize,
    pub g: f64,
    pub smoothness: f64,
    pub mu: f64,
    pub delta_sq: f64,
    pub epsilon: f64,
    pub psi: f64,
    pub widths: usize,
    pub selected: usize,
    pub heterogeneity: f64,
}

/// `1/(T+λ) · ((λ+1)Γ₁/2 + 2Δ̃/μ²)` with
/// `Δ̃ = (8(τ−1)²G² + 2L(|I|ψ+|S|+ε)Λ + 2δ²ψ)/ε²`.
pub fn theorem1_bound(c: &BoundConstants, rounds: usize) -> Result<f64> {
    if c.epsilon == 0.0 {
        return Err(Error::InvalidArgument("epsilon must be non-zero".into()));
    }
    if !(c.mu > 0.0) || !(c.lambda > 0.0) {
        return Err(Error::InvalidArgument(
            "mu and lambda must be positive".into(),
        ));
    }
    let tau = c.local_steps as f64;
    let delta_tilde = (8.0 * (tau - 1.0).powi(2) * c.g * c.g
        + 2.0
            * c.smoothness
            * (c.widths as f64 * c.psi + c.selected as f64 + c.epsilon)
            * c.heterogeneity
        + 2.0 * c.delta_sq * c.psi)
        / (c.epsilon * c.epsilon);
    Ok(
        ((c.lambda + 1.0) * c.gamma1 / 2.0 + 2.0 * delta_tilde / (c.mu * c.mu))
            / (rounds as f64 + c.lambda),
    )
}

/// How widths are handed to devices each round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ConvexAssignment {
    /// Device `k` always uses `widths[k]`.
    Fixed(Vec<usize>),
    /// The multiset `widths` is shuffled over devices every round.
    Shuffled(Vec<usize>),
}

impl ConvexAssignment {
    fn widths(&self) -> &[usize] {
        match self {
            ConvexAssignment::Fixed(w) | ConvexAssignment::Shuffled(w) => w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexRunConfig {
    pub menu: WidthMenu,
    pub assignment: ConvexAssignment,
    pub epsilon: f64,
    /// Step-size offset; `None` picks `2L/(με)` so the first step is at most `1/L`.
    pub lambda: Option<f64>,
    pub local_steps: usize,
    pub rounds: usize,
    /// Variance `δ²` of the Gaussian noise added to each local gradient.
    pub noise_variance: f64,
    pub seed: u64,
    pub fit_window: (usize, usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    /// `(t, F(w^t) − F*)` for `t = 1..=T+1`.
    pub gaps: Vec<(usize, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub window: (usize, usize),
    pub lambda: f64,
    pub constants: BoundConstants,
    /// Rounds where the measured gap exceeded the bound (logged, not enforced).
    pub bound_violations: usize,
}

impl RateFit {
    pub fn terminal_gap(&self) -> f64 {
        self.gaps.last().map_or(f64::NAN, |&(_, g)| g)
    }
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept)`.
pub fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `log mean_s gap_s(t)` against `log(t + λ)` over the window, for
/// runs that share a schedule (the bound is on the expected gap).
pub fn mean_gap_slope(fits: &[RateFit], window: (usize, usize)) -> Result<f64> {
    let Some(first) = fits.first() else {
        return Err(Error::InvalidArgument("no runs to average".into()));
    };
    if fits
        .iter()
        .any(|f| f.gaps.len() != first.gaps.len() || f.lambda != first.lambda)
    {
        return Err(Error::InvalidArgument(
            "runs differ in length or step schedule".into(),
        ));
    }
    let points: Vec<(f64, f64)> = (0..first.gaps.len())
        .filter_map(|i| {
            let t = first.gaps[i].0;
            let mean = fits.iter().map(|f| f.gaps[i].1).sum::<f64>() / fits.len() as f64;
            (t >= window.0 && t <= window.1 && mean > 0.0)
                .then(|| ((t as f64 + first.lambda).ln(), mean.ln()))
        })
        .collect();
    if points.len() < 2 {
        return Err(Error::InvalidArgument("fewer than two points in window".into()));
    }
    Ok(fit_line(&points).0)
}

/// Block-masked federated descent with `η_t = 2/(με(t+λ))` and per-block
/// weighted aggregation.
pub fn run_convex_fedpmt(task: &QuadraticTask, cfg: &ConvexRunConfig) -> Result<RateFit> {
    let devices = task.devices();
    let widths = cfg.assignment.widths();
    if widths.len() != devices {
        return Err(Error::InvalidArgument(format!(
            "{} widths for {devices} devices",
            widths.len()
        )));
    }
    if cfg.menu.num_layers() != task.blocks.len() {
        return Err(Error::MaskLength {
            expected: task.blocks.len(),
            got: cfg.menu.num_layers(),
        });
    }
    if widths.iter().any(|&w| w == 0 || w > cfg.menu.num_widths()) {
        return Err(Error::InvalidArgument("width outside the menu".into()));
    }
    if !(cfg.epsilon > 0.0 && cfg.epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be in (0, 1], got {}",
            cfg.epsilon
        )));
    }
    if cfg.local_steps == 0 {
        return Err(Error::InvalidArgument("local steps must be >= 1".into()));
    }
    let mu = task.mu;
    let smoothness = task.smoothness();
    let lambda = cfg
        .lambda
        .unwrap_or(2.0 * smoothness / (mu * cfg.epsilon));
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }

    let dim = task.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, (cfg.noise_variance / dim as f64).sqrt())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let block_of: Vec<usize> = (0..dim)
        .map(|i| task.blocks.iter().position(|r| r.contains(&i)).unwrap())
        .collect();

    let mut w = DVector::zeros(dim);
    let initial = task.global_loss(&w) - task.f_star;
    let mut gaps = Vec::with_capacity(cfg.rounds + 1);
    gaps.push((1, initial));
    let mut g_sq_max: f64 = 0.0;
    let mut current: Vec<usize> = widths.to_vec();

    for t in 1..=cfg.rounds {
        if let ConvexAssignment::Shuffled(_) = cfg.assignment {
            current.shuffle(&mut rng);
        }
        let masks: Vec<BpMask> = current.iter().map(|&i| cfg.menu.mask(i).clone()).collect();
        let weights = compute_weights(&masks)?;
        let eta = 2.0 / (mu * cfg.epsilon * (t as f64 + lambda));

        let mut combined = DVector::zeros(dim);
        for k in 0..devices {
            let mut delta = DVector::<f64>::zeros(dim);
            for _ in 0..cfg.local_steps {
                let local = &w - &delta;
                let mut g = task.device_grad(k, &local);
                if cfg.noise_variance > 0.0 {
                    for v in g.iter_mut() {
                        *v += noise.sample(&mut rng);
                    }
                }
                g_sq_max = g_sq_max.max(g.norm_squared());
                for i in 0..dim {
                    if masks[k].is_on(block_of[i]) {
                        delta[i] += eta * g[i];
                    }
                }
            }
            for i in 0..dim {
                combined[i] += weights.per_device[k][block_of[i]] * delta[i];
            }
        }
        w -= combined;

        let gap = task.global_loss(&w) - task.f_star;
        if !gap.is_finite() || gap > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence {
                round: t,
                gap,
                initial,
            });
        }
        gaps.push((t + 1, gap));
    }

    let (lo, hi) = cfg.fit_window;
    let points: Vec<(f64, f64)> = gaps
        .iter()
        .filter(|&&(t, g)| t >= lo && t <= hi && g > 0.0)
        .map(|&(t, g)| ((t as f64 + lambda).ln(), g.ln()))
        .collect();
    let (slope, intercept) = if points.len() >= 2 {
        fit_line(&points)
    } else {
        (f64::NAN, f64::NAN)
    };

    let mut counts = vec![0usize; cfg.menu.num_widths()];
    for &i in widths {
        counts[i - 1] += 1;
    }
    let proportions: Vec<f64> = counts.iter().map(|&c| c as f64 / devices as f64).collect();
    let psi = compute_psi(&proportions, devices)
        .map(|p| p.proof_form)
        .unwrap_or(f64::INFINITY);
    let constants = BoundConstants {
        gamma1: (DVector::<f64>::zeros(dim) - task.w_star()).norm_squared(),
        lambda,
        local_steps: cfg.local_steps,
        g: g_sq_max.sqrt(),
        smoothness,
        mu,
        delta_sq: cfg.noise_variance,
        epsilon: cfg.epsilon,
        psi,
        widths: cfg.menu.num_widths(),
        selected: devices,
        heterogeneity: compute_lambda(task),
    };
    let mut bound_violations = 0;
    for &(t, gap) in &gaps {
        // gap at w^t is compared with the bound after t - 1 rounds
        if gap > theorem1_bound(&constants, t - 1)? {
            bound_violations += 1;
        }
    }

    Ok(RateFit {
        gaps,
        slope,
        intercept,
        window: cfg.fit_window,
        lambda,
        constants,
        bound_violations,
    })
}

/// Full-width runs against shuffled partial-width runs on the same tasks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonConfig {
    /// `seed` is replaced by each entry of `seeds`.
    pub task: QuadraticTaskConfig,
    /// Width of every device in the partial runs (menu size = largest entry).
    pub widths: Vec<usize>,
    pub epsilon: f64,
    pub local_steps: usize,
    pub rounds: usize,
    pub noise_variance: f64,
    pub fit_window: (usize, usize),
    pub seeds: Vec<u64>,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            task: QuadraticTaskConfig::default(),
            widths: vec![1, 2, 2, 3, 3],
            epsilon: 0.5,
            local_steps: 1,
            rounds: 10_000,
            noise_variance: 1.0,
            fit_window: (100, 10_000),
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedPair {
    pub seed: u64,
    pub full_gap: f64,
    pub partial_gap: f64,
    pub full_slope: f64,
    pub partial_slope: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    /// Shared step-size offset: the largest `2L/(με)` over the tasks.
    pub lambda: f64,
    pub full_slope: f64,
    pub partial_slope: f64,
    pub pairs: Vec<SeedPair>,
    /// Seeds on which the partial run ended no closer to the optimum.
    pub partial_not_better: usize,
    pub psi: PsiValues,
    pub bound_violations: usize,
}

pub fn compare_full_vs_partial(cfg: &ComparisonConfig) -> Result<Comparison> {
    use rayon::prelude::*;

    let widths = cfg.widths.iter().copied().max().unwrap_or(0);
    if cfg.widths.len() != cfg.task.devices || widths == 0 || cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "need one width per device and at least one seed".into(),
        ));
    }
    let tasks: Vec<QuadraticTask> = cfg
        .seeds
        .iter()
        .map(|&seed| build_quadratic_task(&QuadraticTaskConfig { seed, ..cfg.task }))
        .collect::<Result<_>>()?;
    let lambda = tasks
        .iter()
        .map(|t| 2.0 * t.smoothness() / (t.mu * cfg.epsilon))
        .fold(0.0, f64::max);
    let run = |task: &QuadraticTask, seed: u64, menu: WidthMenu, assignment| {
        run_convex_fedpmt(
            task,
            &ConvexRunConfig {
                menu,
                assignment,
                epsilon: cfg.epsilon,
                lambda: Some(lambda),
                local_steps: cfg.local_steps,
                rounds: cfg.rounds,
                noise_variance: cfg.noise_variance,
                seed,
                fit_window: cfg.fit_window,
            },
        )
    };
    let blocks = cfg.task.blocks;
    let fits: Vec<(RateFit, RateFit)> = tasks
        .par_iter()
        .zip(cfg.seeds.par_iter())
        .map(|(task, &seed)| {
            let full = run(
                task,
                seed,
                crate::masking::build_width_menu(blocks, 1, None)?,
                ConvexAssignment::Fixed(vec![1; cfg.task.devices]),
            )?;
            let partial = run(
                task,
                seed,
                crate::masking::build_width_menu(blocks, widths, None)?,
                ConvexAssignment::Shuffled(cfg.widths.clone()),
            )?;
            Ok((full, partial))
        })
        .collect::<Result<_>>()?;
    let (full, partial): (Vec<RateFit>, Vec<RateFit>) = fits.into_iter().unzip();
    let pairs: Vec<SeedPair> = cfg
        .seeds
        .iter()
        .zip(full.iter().zip(&partial))
        .map(|(&seed, (f, p))| SeedPair {
            seed,
            full_gap: f.terminal_gap(),
            partial_gap: p.terminal_gap(),
            full_slope: f.slope,
            partial_slope: p.slope,
        })
        .collect();
    let mut counts = vec![0usize; widths];
    for &w in &cfg.widths {
        counts[w - 1] += 1;
    }
    let proportions: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / cfg.task.devices as f64)
        .collect();
    Ok(Comparison {
        lambda,
        full_slope: mean_gap_slope(&full, cfg.fit_window)?,
        partial_slope: mean_gap_slope(&partial, cfg.fit_window)?,
        partial_not_better: pairs.iter().filter(|p| p.partial_gap >= p.full_gap).count(),
        pairs,
        psi: compute_psi(&proportions, cfg.task.devices)?,
        bound_violations: full
            .iter()
            .chain(&partial)
            .map(|f| f.bound_violations)
            .sum(),
    })
}
