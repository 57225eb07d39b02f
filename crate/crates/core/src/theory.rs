//! Numerical checks of the step-size / flip-rate law and of how flips move OUI.
//!
//! A parameter step `θ⁺ = θ − ηg` flips the gate of sample `b` at a unit when the
//! preactivation `X_b` crosses zero. To first order the crossing probability is
//! `η · f_b(0) · E|U_b|` with `U_b = −⟨∇X_b, g⟩`, so flip rates are linear in `η`.
//! Between two masks, each unit's positivity count moves by exactly
//! `N₋₊ − N₊₋`, and OUI moves by `−(2/d) Σ sgn(p_j − ½) Δp_j` as long as no
//! `p_j` crosses one half.

use ndarray::{s, Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::envs::{EnvId, ProbeBatch};
use crate::error::{contract, LabError, Result};
use crate::nn::{backward_from, clip_global_norm, forward, Dense, ForwardTrace, Gradients, HeadKind, Network};
use crate::oui::{flip_fraction, oui_from_counts, positive_counts, ActivationMask};
use crate::ppo::{
    derive_seed, minibatch_gradients, train_run_with, Learner, PpoConfig, TrainOutcome, TrainingSnapshot, UpdateBatch,
};
use crate::sweep::RunRecord;

/// Probe entries with `|X_b|` below this are treated as sitting on the kink and skipped.
pub const KINK_TOLERANCE: f64 = 1e-9;
/// Largest mean flip probability for which the small-step regime is assumed.
pub const FLIP_GUARD: f64 = 0.2;

/// `U_b = −⟨∇_θ X_b, g⟩` for every probe row, where `X_b` is the preactivation of
/// `neuron` in hidden `layer`. Each row gets its own reverse-mode pass.
pub fn directional_derivative(
    net: &Network,
    inputs: &Array2<f64>,
    direction: &Gradients,
    layer: usize,
    neuron: usize,
) -> Result<Vec<f64>> {
    direction.check_shape(net)?;
    contract!(layer < net.num_hidden(), "layer {layer} is not a hidden layer");
    contract!(
        neuron < net.layers()[layer].out_dim(),
        "neuron {neuron} out of range for layer {layer}"
    );
    let trace = forward(net, inputs.view())?;
    let width = net.layers()[layer].out_dim();
    (0..trace.batch_size())
        .map(|b| {
            let row = ForwardTrace {
                inputs: trace.inputs.slice(s![b..b + 1, ..]).to_owned(),
                preactivations: trace
                    .preactivations
                    .iter()
                    .map(|z| z.slice(s![b..b + 1, ..]).to_owned())
                    .collect(),
                outputs: trace.outputs.slice(s![b..b + 1, ..]).to_owned(),
            };
            let mut seed = Array2::zeros((1, width));
            seed[[0, neuron]] = 1.0;
            let grad = backward_from(net, &row, layer, seed)?;
            Ok(-grad.dot(direction))
        })
        .collect()
}

/// Source of update directions `g` for a flip experiment.
pub enum DirectionSampler<'a> {
    /// Uniform on the unit sphere of parameter space.
    Isotropic,
    /// Unit-normalized PPO gradient of a random minibatch of `batch`, taken for the branch
    /// matching the experiment network's head.
    PpoMinibatch {
        other: &'a Network,
        batch: &'a UpdateBatch,
        config: &'a PpoConfig,
    },
}

impl DirectionSampler<'_> {
    fn sample(&self, net: &Network, rng: &mut ChaCha8Rng) -> Result<Gradients> {
        let mut g = Gradients::zeros_like(net);
        match self {
            DirectionSampler::Isotropic => {
                g.values_mut().for_each(|v| *v = rng.sample(StandardNormal));
            }
            DirectionSampler::PpoMinibatch { other, batch, config } => {
                let n = batch.trajectory.len();
                let size = config.minibatch.min(n);
                let mut idx = sample(rng, n, size).into_vec();
                idx.sort_unstable();
                g = match net.head() {
                    HeadKind::PolicyLogits => minibatch_gradients(net, other, batch, &idx, config)?.actor,
                    HeadKind::ScalarValue => minibatch_gradients(other, net, batch, &idx, config)?.critic,
                };
            }
        }
        let norm = g.global_norm();
        if norm > 0.0 {
            g.scale(1.0 / norm);
        }
        Ok(g)
    }
}

pub struct FlipExperiment<'a> {
    pub net: &'a Network,
    pub probe: &'a ProbeBatch,
    pub sampler: DirectionSampler<'a>,
    pub eta_grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlipRateCurve {
    pub eta: Vec<f64>,
    pub mean_flip_prob: Vec<f64>,
    pub std_err: Vec<f64>,
    pub fit_slope: f64,
    pub fit_intercept: f64,
    pub intercept_std_err: f64,
    pub r_squared: f64,
    /// Set when the mean flip probability at the largest step reaches [`FLIP_GUARD`].
    pub guard_violated: bool,
}

impl FlipRateCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eta,mean_flip_prob,std_err\n");
        for i in 0..self.eta.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.eta[i], self.mean_flip_prob[i], self.std_err[i]
            ));
        }
        out
    }

    pub fn fit_summary_json(&self) -> String {
        serde_json::json!({
            "slope": self.fit_slope,
            "intercept": self.fit_intercept,
            "intercept_std_err": self.intercept_std_err,
            "r_squared": self.r_squared,
            "guard_violated": self.guard_violated,
        })
        .to_string()
    }

    /// `|intercept| / (slope · η_max)`
    pub fn relative_intercept(&self) -> f64 {
        let eta_max = self.eta.iter().cloned().fold(f64::MIN, f64::max);
        self.fit_intercept.abs() / (self.fit_slope * eta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub intercept_std_err: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    contract!(x.len() == y.len(), "OLS inputs differ in length");
    contract!(x.len() >= 3, "OLS needs at least three points");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    contract!(sxx > 0.0, "OLS needs at least two distinct x values");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    let sigma2 = ssr / (n - 2.0);
    let intercept_std_err = (sigma2 * (1.0 / n + mx * mx / sxx)).sqrt();
    Ok(LinearFit {
        slope,
        intercept,
        intercept_std_err,
        r_squared,
    })
}

/// Flip counts of one perturbation direction at every step size: `(flips, eligible)` pairs.
fn flips_along(
    net: &Network,
    inputs: &Array2<f64>,
    base: &ForwardTrace,
    direction: &Gradients,
    eta_grid: &[f64],
) -> Result<Vec<(u64, u64)>> {
    eta_grid
        .iter()
        .map(|&eta| {
            let mut moved = net.clone();
            moved.add_scaled(direction, -eta)?;
            let after = forward(&moved, inputs.view())?;
            let (mut flips, mut eligible) = (0u64, 0u64);
            for (z0, z1) in base.preactivations.iter().zip(&after.preactivations) {
                for (&a, &b) in z0.iter().zip(z1.iter()) {
                    if a.abs() < KINK_TOLERANCE {
                        continue;
                    }
                    eligible += 1;
                    flips += u64::from((a > 0.0) != (b > 0.0));
                }
            }
            Ok((flips, eligible))
        })
        .collect()
}

fn summarize(eta_grid: &[f64], per_trial: &[Vec<f64>]) -> Result<FlipRateCurve> {
    let trials = per_trial.len() as f64;
    let mut mean = vec![0.0; eta_grid.len()];
    let mut std_err = vec![0.0; eta_grid.len()];
    for i in 0..eta_grid.len() {
        // summed in trial order, independent of how trials were scheduled
        let m = per_trial.iter().map(|r| r[i]).sum::<f64>() / trials;
        let var = if per_trial.len() > 1 {
            per_trial.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / (trials - 1.0)
        } else {
            0.0
        };
        mean[i] = m;
        std_err[i] = (var / trials).sqrt();
    }
    let fit = ols(eta_grid, &mean)?;
    Ok(FlipRateCurve {
        eta: eta_grid.to_vec(),
        guard_violated: mean.last().copied().unwrap_or(0.0) >= FLIP_GUARD,
        mean_flip_prob: mean,
        std_err,
        fit_slope: fit.slope,
        fit_intercept: fit.intercept,
        intercept_std_err: fit.intercept_std_err,
        r_squared: fit.r_squared,
    })
}

fn check_grid(eta_grid: &[f64], trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(LabError::Config("flip experiment needs at least one trial".into()));
    }
    if eta_grid.iter().any(|&e| !(e > 0.0)) || eta_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LabError::Config(
            "eta grid must be positive and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Monte Carlo flip probability per step size over the probe batch, with an OLS line
/// through `(η, rate)`. Every trial draws its own direction from a seed derived from the
/// experiment seed and the trial index.
pub fn estimate_flip_rate(exp: &FlipExperiment<'_>) -> Result<FlipRateCurve> {
    check_grid(&exp.eta_grid, exp.trials)?;
    contract!(
        exp.probe.obs_dim() == exp.net.input_dim(),
        "probe width does not match network input"
    );
    let inputs = exp.probe.observations();
    let base = forward(exp.net, inputs.view())?;
    let per_trial: Vec<Vec<f64>> = (0..exp.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(exp.seed, t as u64));
            let g = exp.sampler.sample(exp.net, &mut rng)?;
            let counts = flips_along(exp.net, inputs, &base, &g, &exp.eta_grid)?;
            Ok(counts
                .into_iter()
                .map(|(f, e)| if e == 0 { 0.0 } else { f as f64 / e as f64 })
                .collect())
        })
        .collect::<Result<_>>()?;
    summarize(&exp.eta_grid, &per_trial)
}

/// Exact flip probability of the single-unit model with `X ~ U(−1, 1)` and `|U| = u`.
pub fn linear_uniform_flip_prob(eta: f64, u: f64) -> f64 {
    0.5 * (eta * u).min(1.0)
}

/// Single linear unit `X = x` fed by `probe_size` fresh draws of `x ~ U(−1, 1)` per trial,
/// pushed along its bias by `±u` with a random sign.
pub fn linear_uniform_experiment(
    eta_grid: &[f64],
    u: f64,
    probe_size: usize,
    trials: usize,
    seed: u64,
) -> Result<FlipRateCurve> {
    check_grid(eta_grid, trials)?;
    contract!(probe_size > 0, "probe must be nonempty");
    let net = Network::from_layers(
        vec![
            Dense {
                weight: ndarray::array![[1.0]],
                bias: ndarray::array![0.0],
            },
            Dense {
                weight: ndarray::array![[1.0]],
                bias: ndarray::array![0.0],
            },
        ],
        HeadKind::ScalarValue,
    )?;
    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
            let inputs = Array2::from_shape_fn((probe_size, 1), |_| rng.gen_range(-1.0..1.0));
            let mut g = Gradients::zeros_like(&net);
            g.layers[0].bias[0] = if rng.gen_bool(0.5) { u } else { -u };
            let base = forward(&net, inputs.view())?;
            let counts = flips_along(&net, &inputs, &base, &g, eta_grid)?;
            Ok(counts
                .into_iter()
                .map(|(f, e)| if e == 0 { 0.0 } else { f as f64 / e as f64 })
                .collect())
        })
        .collect::<Result<_>>()?;
    summarize(eta_grid, &per_trial)
}

/// Mean isotropic flip probability at a single step size.
fn isotropic_rate(net: &Network, probe: &ProbeBatch, eta: f64, trials: usize, seed: u64) -> Result<f64> {
    let curve = estimate_flip_rate(&FlipExperiment {
        net,
        probe,
        sampler: DirectionSampler::Isotropic,
        eta_grid: vec![eta],
        trials,
        seed,
    });
    // a single-point grid cannot be fitted; compute the mean directly
    match curve {
        Ok(c) => Ok(c.mean_flip_prob[0]),
        Err(_) => {
            let inputs = probe.observations();
            let base = forward(net, inputs.view())?;
            let mut total = 0.0;
            for t in 0..trials {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
                let g = DirectionSampler::Isotropic.sample(net, &mut rng)?;
                let (f, e) = flips_along(net, inputs, &base, &g, &[eta])?[0];
                total += if e == 0 { 0.0 } else { f as f64 / e as f64 };
            }
            Ok(total / trials as f64)
        }
    }
}

/// Step size at which the isotropic flip probability reaches [`FLIP_GUARD`], by bisection
/// in log space.
pub fn guard_step_size(net: &Network, probe: &ProbeBatch, trials: usize, seed: u64) -> Result<f64> {
    let (mut lo, mut hi) = (1e-8f64, 1e-8f64);
    while isotropic_rate(net, probe, hi, trials, seed)? < FLIP_GUARD {
        lo = hi;
        hi *= 4.0;
        if hi > 1e6 {
            return Err(LabError::Config("flip probability never reaches the guard".into()));
        }
    }
    for _ in 0..30 {
        let mid = (lo * hi).sqrt();
        if isotropic_rate(net, probe, mid, trials, seed)? < FLIP_GUARD {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.01 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

/// `points` log-spaced step sizes covering the decade `[guard/100, guard/10]`.
pub fn decade_below(guard: f64, points: usize) -> Vec<f64> {
    let (lo, hi) = (guard / 100.0, guard / 10.0);
    (0..points)
        .map(|i| lo * (hi / lo).powf(i as f64 / (points - 1) as f64))
        .collect()
}

/// Per-layer flip accounting between two masks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDrift {
    pub n_minus_plus: Vec<u64>,
    pub n_plus_minus: Vec<u64>,
    pub delta_p: Vec<f64>,
    pub delta_oui_exact: f64,
    pub delta_oui_first_order: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftDecomposition {
    pub layers: Vec<LayerDrift>,
    /// Units for which `s⁺ = s + N₋₊ − N₊₋` was verified.
    pub checks: u64,
}

impl DriftDecomposition {
    /// `Σ_l |ΔOUI_exact − ΔOUI_first_order|`
    pub fn first_order_error(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| (l.delta_oui_exact - l.delta_oui_first_order).abs())
            .sum()
    }
}

/// Counts 0→1 and 1→0 transitions per unit, verifies the positivity-count identity in
/// integer arithmetic, and compares the exact OUI change with its first-order prediction.
/// Units sitting exactly at `p = ½` contribute nothing to the prediction.
pub fn drift_decomposition(prev: &ActivationMask, curr: &ActivationMask) -> Result<DriftDecomposition> {
    contract!(
        prev.layer_sizes() == curr.layer_sizes() && prev.batch_size() == curr.batch_size(),
        "masks have different shapes"
    );
    let batch = prev.batch_size() as u64;
    let mut layers = Vec::with_capacity(prev.layers().len());
    let mut checks = 0u64;
    for (a, b) in prev.layers().iter().zip(curr.layers()) {
        let d = a.ncols();
        let mut n_minus_plus = vec![0u64; d];
        let mut n_plus_minus = vec![0u64; d];
        for (row_a, row_b) in a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))) {
            for j in 0..d {
                match (row_a[j], row_b[j]) {
                    (false, true) => n_minus_plus[j] += 1,
                    (true, false) => n_plus_minus[j] += 1,
                    _ => {}
                }
            }
        }
        let s_prev = positive_counts(a.view());
        let s_curr = positive_counts(b.view());
        for j in 0..d {
            let lhs = s_curr[j] as i64;
            let rhs = s_prev[j] as i64 + n_minus_plus[j] as i64 - n_plus_minus[j] as i64;
            if lhs != rhs {
                return Err(LabError::Contract(format!(
                    "positivity count identity violated at unit {j}: {lhs} != {rhs}"
                )));
            }
            checks += 1;
        }
        let delta_p: Vec<f64> = (0..d)
            .map(|j| (n_minus_plus[j] as i64 - n_plus_minus[j] as i64) as f64 / batch as f64)
            .collect();
        let first_order = -2.0 / d as f64
            * (0..d)
                .map(|j| {
                    let side = (2 * s_prev[j]).cmp(&batch) as i8 as f64;
                    side * delta_p[j]
                })
                .sum::<f64>();
        layers.push(LayerDrift {
            delta_oui_exact: oui_from_counts(&s_curr, batch)? - oui_from_counts(&s_prev, batch)?,
            delta_oui_first_order: first_order,
            n_minus_plus,
            n_plus_minus,
            delta_p,
        });
    }
    Ok(DriftDecomposition { layers, checks })
}

/// Same as [`drift_decomposition`], additionally checking caller-supplied positivity
/// fractions of the previous mask.
pub fn drift_decomposition_with_p(
    prev: &ActivationMask,
    curr: &ActivationMask,
    p_prev: &[Vec<f64>],
) -> Result<DriftDecomposition> {
    let batch = prev.batch_size() as f64;
    contract!(
        p_prev.len() == prev.layers().len(),
        "p_prev has the wrong number of layers"
    );
    for (l, (layer, p)) in prev.layers().iter().zip(p_prev).enumerate() {
        let s = positive_counts(layer.view());
        contract!(p.len() == s.len(), "p_prev layer {l} has the wrong width");
        for (j, (&sj, &pj)) in s.iter().zip(p).enumerate() {
            contract!(
                (sj as f64 / batch - pj).abs() <= 1e-12,
                "p_prev[{l}][{j}] = {pj} disagrees with the mask ({sj}/{batch})"
            );
        }
    }
    drift_decomposition(prev, curr)
}

/// Mean first-order error of a real PPO step of size `eta` from `learner`: for every
/// minibatch of `batch` (in order) the clipped gradient is passed through a copy of the
/// branch's Adam state, the branch is moved by `−eta` times the Adam direction, and the
/// per-layer errors of both branches are summed.
pub fn ppo_step_first_order_error(
    learner: &Learner,
    batch: &UpdateBatch,
    probe: &ProbeBatch,
    config: &PpoConfig,
    eta: f64,
) -> Result<f64> {
    let base_actor = crate::oui::compute_mask(&learner.actor, probe)?;
    let base_critic = crate::oui::compute_mask(&learner.critic, probe)?;
    let n = batch.trajectory.len();
    let order: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in order.chunks(config.minibatch) {
        let mut g = minibatch_gradients(&learner.actor, &learner.critic, batch, chunk, config)?;
        clip_global_norm(&mut g.actor, config.max_grad_norm)?;
        clip_global_norm(&mut g.critic, config.max_grad_norm)?;

        let mut actor = learner.actor.clone();
        let dir = learner.actor_opt.clone().advance(&g.actor)?;
        actor.add_scaled(&dir, -eta)?;
        let mut critic = learner.critic.clone();
        let dir = learner.critic_opt.clone().advance(&g.critic)?;
        critic.add_scaled(&dir, -eta)?;

        let after_actor = crate::oui::compute_mask(&actor, probe)?;
        let after_critic = crate::oui::compute_mask(&critic, probe)?;
        total += drift_decomposition(&base_actor, &after_actor)?.first_order_error()
            + drift_decomposition(&base_critic, &after_critic)?.first_order_error();
        count += 1;
    }
    Ok(total / count as f64)
}

/// Learner and rollout right before one PPO update.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub update: usize,
    pub learner: Learner,
    pub batch: UpdateBatch,
}

/// Trains one run and keeps `count` snapshots at evenly spaced updates.
pub fn train_with_snapshots(
    env_id: EnvId,
    config: &PpoConfig,
    probe: &ProbeBatch,
    count: usize,
) -> Result<(TrainOutcome, Vec<Snapshot>)> {
    let total = config.num_updates();
    let wanted: Vec<usize> = (1..=count).map(|i| (i * total).div_ceil(count).max(1)).collect();
    let mut snaps = Vec::with_capacity(count);
    let outcome = train_run_with(env_id, config, probe, &mut |s: &TrainingSnapshot<'_>| {
        if wanted.contains(&s.update) {
            snaps.push(Snapshot {
                update: s.update,
                learner: s.learner.clone(),
                batch: s.batch.clone(),
            });
        }
    })?;
    Ok((outcome, snaps))
}

/// Flip activity against OUI motion between consecutive checkpoints of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub f: f64,
    pub flip: f64,
    pub delta_oui_actor: f64,
    pub delta_oui_critic: f64,
}

pub fn oui_sensitivity_report(run: &RunRecord) -> Result<Vec<SensitivityRow>> {
    contract!(
        run.checkpoints.len() >= 2,
        "sensitivity report needs at least two checkpoints, run has {}",
        run.checkpoints.len()
    );
    Ok(run
        .checkpoints
        .windows(2)
        .map(|w| SensitivityRow {
            f: w[1].f,
            flip: w[1].flip,
            delta_oui_actor: w[1].oui_a - w[0].oui_a,
            delta_oui_critic: w[1].oui_c - w[0].oui_c,
        })
        .collect())
}

/// Flip fraction and exact per-layer OUI change between two masks.
pub fn flips_versus_drift(prev: &ActivationMask, curr: &ActivationMask) -> Result<(f64, Vec<f64>)> {
    let flips = flip_fraction(prev, curr)?;
    let drift = drift_decomposition(prev, curr)?;
    Ok((flips, drift.layers.iter().map(|l| l.delta_oui_exact).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_probe_batch, EnvId};
    use crate::nn::init_network;
    use ndarray::array;

    fn mask(batch: usize, cols: &[&[usize]]) -> ActivationMask {
        // each column lists the rows that are active
        let mut m = Array2::from_elem((batch, cols.len()), false);
        for (j, rows) in cols.iter().enumerate() {
            for &b in rows.iter() {
                m[[b, j]] = true;
            }
        }
        ActivationMask::from_layers(vec![m]).unwrap()
    }

    #[test]
    fn accounting_hand_case() {
        let prev = mask(10, &[&[0, 1, 2]]);
        let curr = mask(10, &[&[0, 1, 5, 6]]); // 2 rows on (5, 6), 1 row off (2)
        let d = drift_decomposition(&prev, &curr).unwrap();
        assert_eq!(d.layers[0].n_minus_plus, vec![2]);
        assert_eq!(d.layers[0].n_plus_minus, vec![1]);
        assert!((d.layers[0].delta_p[0] - 0.1).abs() < 1e-15);
        assert_eq!(d.checks, 1);
    }

    #[test]
    fn no_flips_no_drift() {
        let m = mask(8, &[&[0, 1], &[2, 3, 4, 5]]);
        let d = drift_decomposition(&m, &m).unwrap();
        assert_eq!(d.layers[0].delta_p, vec![0.0, 0.0]);
        assert_eq!(d.layers[0].delta_oui_exact, 0.0);
        assert_eq!(d.layers[0].delta_oui_first_order, 0.0);
    }

    #[test]
    fn first_order_is_exact_without_crossing() {
        // p: 0.2 → 0.3 and 0.9 → 0.8, both toward ½
        let prev = mask(10, &[&[0, 1], &[0, 1, 2, 3, 4, 5, 6, 7, 8]]);
        let curr = mask(10, &[&[0, 1, 2], &[0, 1, 2, 3, 4, 5, 6, 7]]);
        let d = drift_decomposition(&prev, &curr).unwrap();
        let l = &d.layers[0];
        assert!((l.delta_oui_exact - 0.2).abs() < 1e-12);
        assert!((l.delta_oui_first_order - 0.2).abs() < 1e-12);
    }

    #[test]
    fn balanced_units_use_zero_sign() {
        let prev = mask(4, &[&[0, 1]]);
        let curr = mask(4, &[&[0, 1, 2]]);
        let d = drift_decomposition(&prev, &curr).unwrap();
        assert_eq!(d.layers[0].delta_oui_first_order, 0.0);
        assert!((d.layers[0].delta_oui_exact + 0.5).abs() < 1e-15);
    }

    #[test]
    fn p_prev_must_match() {
        let prev = mask(4, &[&[0, 1]]);
        assert!(drift_decomposition_with_p(&prev, &prev, &[vec![0.5]]).is_ok());
        assert!(matches!(
            drift_decomposition_with_p(&prev, &prev, &[vec![0.25]]),
            Err(LabError::Contract(_))
        ));
    }

    #[test]
    fn balanced_flips_leave_oui_unchanged() {
        let prev = mask(10, &[&[0, 1, 2], &[5, 6, 7, 8]]);
        let curr = mask(10, &[&[3, 4, 2], &[0, 1, 7, 8]]);
        let (flips, delta) = flips_versus_drift(&prev, &curr).unwrap();
        assert!(flips > 0.0);
        assert_eq!(delta, vec![0.0]);
    }

    #[test]
    fn drift_away_and_toward_balance() {
        let prev = mask(10, &[&[0, 1, 2], &[0, 1, 2, 3, 4, 5, 6]]);
        // 0.3 → 0.1 and 0.7 → 0.9
        let away = mask(10, &[&[9], &[0, 1, 2, 3, 4, 5, 6, 7, 9]]);
        let (flips, delta) = flips_versus_drift(&prev, &away).unwrap();
        assert!(flips > 0.0 && delta[0] < 0.0);
        // 0.3 → 0.4 and 0.7 → 0.6
        let toward = mask(10, &[&[0, 1, 2, 8], &[0, 1, 2, 3, 4, 5]]);
        let (_, delta) = flips_versus_drift(&prev, &toward).unwrap();
        assert!(delta[0] > 0.0);
    }

    #[test]
    fn directional_derivative_linear_unit() {
        let net = Network::from_layers(
            vec![
                Dense {
                    weight: array![[1.5]],
                    bias: array![0.2],
                },
                Dense {
                    weight: array![[1.0]],
                    bias: array![0.0],
                },
            ],
            HeadKind::ScalarValue,
        )
        .unwrap();
        let inputs = array![[-1.0], [0.5], [2.0]];
        let mut g = Gradients::zeros_like(&net);
        assert!(directional_derivative(&net, &inputs, &g, 0, 0)
            .unwrap()
            .iter()
            .all(|&u| u == 0.0));
        g.layers[0].weight[[0, 0]] = 0.7;
        let u = directional_derivative(&net, &inputs, &g, 0, 0).unwrap();
        assert_eq!(u, vec![0.7, -0.35, -1.4]);
        assert!(directional_derivative(&net, &inputs, &g, 1, 0).is_err());
    }

    #[test]
    fn directional_derivative_matches_finite_difference() {
        let net = init_network(&[4, 16, 16, 2], HeadKind::PolicyLogits, 11).unwrap();
        let probe = make_probe_batch(EnvId::CartPole, 32, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = DirectionSampler::Isotropic.sample(&net, &mut rng).unwrap();
        let inputs = probe.observations().clone();
        let eta = 1e-6;
        let mut moved = net.clone();
        moved.add_scaled(&g, -eta).unwrap();
        let z0 = forward(&net, inputs.view()).unwrap();
        let z1 = forward(&moved, inputs.view()).unwrap();
        for (layer, neuron) in [(0, 3), (1, 5), (1, 12)] {
            let u = directional_derivative(&net, &inputs, &g, layer, neuron).unwrap();
            for b in 0..inputs.nrows() {
                let fd = (z1.preactivations[layer][[b, neuron]] - z0.preactivations[layer][[b, neuron]]) / eta;
                // skip rows where the first layer sits near a kink
                let near_kink = z0.preactivations[0].row(b).iter().any(|v| v.abs() < 1e-4);
                if near_kink {
                    continue;
                }
                assert!(
                    (u[b] - fd).abs() <= 1e-4 * u[b].abs().max(1e-3),
                    "b={b}: {} vs {fd}",
                    u[b]
                );
            }
        }
    }

    #[test]
    fn ols_exact_line() {
        let fit = ols(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(ols(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn linear_uniform_model_matches_closed_form() {
        let grid = [0.01, 0.02, 0.04, 0.08, 0.16];
        let curve = linear_uniform_experiment(&grid, 1.0, 2000, 400, 3).unwrap();
        for i in 0..grid.len() {
            let exact = linear_uniform_flip_prob(grid[i], 1.0);
            assert!(
                (curve.mean_flip_prob[i] - exact).abs() <= 3.0 * curve.std_err[i],
                "eta {}: {} vs {exact} (se {})",
                grid[i],
                curve.mean_flip_prob[i],
                curve.std_err[i]
            );
        }
        assert!(curve.r_squared > 0.999);
        assert!(!curve.guard_violated);
    }

    #[test]
    fn flip_rate_doubles_with_step() {
        let net = init_network(&[4, 32, 32, 2], HeadKind::PolicyLogits, 5).unwrap();
        let probe = make_probe_batch(EnvId::CartPole, 256, 0).unwrap();
        let guard = guard_step_size(&net, &probe, 50, 1).unwrap();
        let eta = guard / 50.0;
        let curve = estimate_flip_rate(&FlipExperiment {
            net: &net,
            probe: &probe,
            sampler: DirectionSampler::Isotropic,
            eta_grid: vec![eta, 2.0 * eta, 4.0 * eta],
            trials: 10_000,
            seed: 0,
        })
        .unwrap();
        let ratio = curve.mean_flip_prob[1] / curve.mean_flip_prob[0];
        assert!((ratio - 2.0).abs() / 2.0 <= 0.1, "ratio {ratio}");
        assert!(
            curve.fit_intercept.abs() <= 2.0 * curve.intercept_std_err,
            "intercept {} (se {})",
            curve.fit_intercept,
            curve.intercept_std_err
        );
    }

    #[test]
    fn trial_results_do_not_depend_on_scheduling() {
        let net = init_network(&[4, 8, 2], HeadKind::PolicyLogits, 5).unwrap();
        let probe = make_probe_batch(EnvId::CartPole, 64, 0).unwrap();
        let exp = FlipExperiment {
            net: &net,
            probe: &probe,
            sampler: DirectionSampler::Isotropic,
            eta_grid: vec![1e-3, 2e-3, 3e-3],
            trials: 50,
            seed: 9,
        };
        let a = estimate_flip_rate(&exp).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| estimate_flip_rate(&exp)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_checks() {
        assert!(linear_uniform_experiment(&[0.2, 0.1, 0.3], 1.0, 10, 1, 0).is_err());
        assert!(linear_uniform_experiment(&[0.1, 0.2, 0.3], 1.0, 10, 0, 0).is_err());
        let d = decade_below(1.0, 5);
        assert!((d[0] - 0.01).abs() < 1e-15 && (d[4] - 0.1).abs() < 1e-15);
    }
}
