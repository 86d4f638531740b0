//! Supervised dataset, the two-term training loss with its Jacobian
//! penalty, Adam, and the PRE/JAC training phases.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{mse, Image, Sinogram};
use crate::net::{
    forward, spectral_norm_l, DenoiserParams, Linearization, ParamGradient, PowerConfig, PowerStart,
};
use crate::recon::{osem_reconstruct, uniform_start, LikelihoodModel, OsemConfig};
use crate::sim::{build_system_model, make_phantom, simulate_counts, GeometryConfig, PhantomSpec, SystemModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One simulated acquisition.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub phantom_id: usize,
    pub dose_index: usize,
    pub dose: f64,
    pub seed: u64,
    pub split: Split,
    pub counts: Sinogram<u64>,
    /// OSEM reconstruction of `counts`, the denoiser input.
    pub x_noisy: Image,
    /// Noise-free activity map, the training target.
    pub x_ref: Image,
}

/// Simulated data plus the per-phantom system models needed to rebuild the
/// likelihood of each item.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    /// Indexed by phantom id, without the dose factor.
    pub models: Vec<Arc<SystemModel>>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn likelihood(&self, index: usize) -> Result<LikelihoodModel> {
        let item = &self.items[index];
        let model = Arc::new(self.models[item.phantom_id].with_dose(item.dose)?);
        LikelihoodModel::from_counts(model, &item.counts)
    }
}

/// Settings shared by all simulated acquisitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationPlan {
    pub geometry: GeometryConfig,
    pub background_fraction: f64,
    /// Per phantom, the dose levels to simulate.
    pub doses: Vec<Vec<f64>>,
    pub n_test_phantoms: usize,
    pub seed: u64,
    pub osem: OsemConfig,
}

/// `n` doses log-uniform over `[low, high]`.
pub fn log_uniform_doses(n: usize, low: f64, high: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (low.ln(), high.ln());
    (0..n).map(|_| rng.random_range(a..=b).exp()).collect()
}

/// Deterministic 64-bit mixing of a seed with a tuple of indices.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Activity map and dose-free system model of phantom `pid`, with its
/// seeded normalization and background.
pub fn phantom_system(plan: &SimulationPlan, pid: usize, spec: &PhantomSpec) -> Result<(Image, SystemModel)> {
    let (activity, mu) = make_phantom(spec)?;
    let norm_seed = derive_seed(plan.seed, &[pid as u64, 0]);
    let model = build_system_model(plan.geometry, &mu, Some(norm_seed))?
        .with_background_fraction(plan.background_fraction, &activity)?;
    Ok((activity, model))
}

/// Simulates, reconstructs and pairs every (phantom, dose). The last
/// `n_test_phantoms` phantoms form the test split.
pub fn build_dataset(phantoms: &[PhantomSpec], plan: &SimulationPlan) -> Result<Dataset> {
    if phantoms.len() < 2 {
        return Err(Error::invalid("at least two phantoms are needed for a train/test split"));
    }
    if plan.n_test_phantoms == 0 || plan.n_test_phantoms >= phantoms.len() {
        return Err(Error::invalid(format!(
            "n_test_phantoms must be in 1..{}, got {}",
            phantoms.len(),
            plan.n_test_phantoms
        )));
    }
    if plan.doses.len() != phantoms.len() {
        return Err(Error::invalid("one dose list per phantom is required"));
    }
    plan.osem.validate(plan.geometry.n_angles)?;
    let first_test = phantoms.len() - plan.n_test_phantoms;

    let per_phantom: Vec<Result<(Arc<SystemModel>, Vec<DatasetItem>)>> = phantoms
        .par_iter()
        .enumerate()
        .map(|(pid, spec)| {
            let (activity, model) = phantom_system(plan, pid, spec)?;
            let split = if pid >= first_test { Split::Test } else { Split::Train };
            let mut items = Vec::new();
            for (k, &dose) in plan.doses[pid].iter().enumerate() {
                let seed = derive_seed(plan.seed, &[pid as u64, 1, k as u64]);
                let counts = simulate_counts(&model, &activity, dose, seed)?;
                let scaled = Arc::new(model.with_dose(dose)?);
                let lm = LikelihoodModel::from_counts(Arc::clone(&scaled), &counts)?;
                let x_noisy = osem_reconstruct(&lm, &plan.osem, &uniform_start(&scaled))?;
                items.push(DatasetItem {
                    phantom_id: pid,
                    dose_index: k,
                    dose,
                    seed,
                    split,
                    counts,
                    x_noisy,
                    x_ref: activity.clone(),
                });
            }
            Ok((Arc::new(model), items))
        })
        .collect();

    let mut models = Vec::new();
    let mut items = Vec::new();
    for r in per_phantom {
        let (m, its) = r?;
        models.push(m);
        items.extend(its);
    }
    Ok(Dataset { items, models })
}

/// `κ x_ref + (1 − κ) d_out`.
pub fn sample_tilde(x_ref: &Image, d_out: &Image, kappa: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::invalid(format!("kappa {kappa} outside [0, 1]")));
    }
    x_ref.check_shape(d_out, "convex combination")?;
    Ok(x_ref.zip_map(d_out, |r, d| kappa * r + (1.0 - kappa) * d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Jac,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pre => "pre",
            Phase::Jac => "jac",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub power_iters: usize,
    /// Power iterations for the per-epoch test-split norm estimates.
    pub eval_power_iters: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// 50 epochs of MSE-only training at learning rate 1e-3, batch size 1.
    pub fn pre_defaults(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Pre,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 1,
            beta: 0.0,
            alpha: 0.1,
            epsilon: 0.05,
            power_iters: 10,
            eval_power_iters: 10,
            seed,
        }
    }

    /// 14 epochs with the penalty: learning rate 5e-4, batch size 5,
    /// β = 10, α = 0.1, ε = 0.05.
    pub fn jac_defaults(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Jac,
            epochs: 14,
            learning_rate: 5e-4,
            batch_size: 5,
            beta: 10.0,
            ..Self::pre_defaults(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.beta >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::invalid("beta and alpha must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::invalid("epsilon must lie in [0, 1)"));
        }
        if self.power_iters == 0 || self.eval_power_iters == 0 {
            return Err(Error::invalid("power iteration counts must be positive"));
        }
        Ok(())
    }

    /// Penalty weight actually applied: zero in the PRE phase.
    pub fn effective_beta(&self) -> f64 {
        match self.phase {
            Phase::Pre => 0.0,
            Phase::Jac => self.beta,
        }
    }
}

/// One batch element as seen by the loss.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub x: &'a Image,
    pub target: &'a Image,
    /// Warm-start direction for the power iteration.
    pub warm: Option<&'a Image>,
    /// Seed for the cold-start direction.
    pub power_seed: u64,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub total: f64,
    pub mse: f64,
    pub penalty: f64,
    pub grad: ParamGradient,
    /// Per element: the penalty direction after power iteration and `σ̂`.
    pub directions: Vec<Option<(Image, f64)>>,
}

/// `Σ_b ‖D(x_b) − x̄_b‖² + β Σ_b h(‖∇L(x̃_b)‖)` and its gradient, with
/// `x̃_b = κ_b x̄_b + (1 − κ_b) D(x_b)` and `κ_b ~ U[0, 1]` drawn from `rng`.
pub fn loss_and_grad(
    params: &DenoiserParams,
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let beta = cfg.effective_beta();
    // κ is drawn up front so the stream does not depend on evaluation order
    let kappas: Vec<f64> = batch.iter().map(|_| rng.random_range(0.0..=1.0)).collect();
    let power = PowerConfig { max_iters: cfg.power_iters, tol: 0.0 };

    let per_item: Vec<Result<(f64, ParamGradient, f64, Option<ParamGradient>, Option<(Image, f64)>)>> = batch
        .par_iter()
        .zip(kappas.par_iter())
        .map(|(item, &kappa)| {
            let lin = Linearization::new(params, item.x)?;
            let (mse_val, mse_grad) = lin.mse_grad(item.target)?;
            if beta == 0.0 {
                return Ok((mse_val, mse_grad, 0.0, None, None));
            }
            let x_tilde = sample_tilde(item.target, &lin.output(), kappa)?;
            let start = match item.warm {
                Some(u) => PowerStart::Warm(u.clone()),
                None => PowerStart::Seed(item.power_seed),
            };
            let est = spectral_norm_l(params, &x_tilde, &power, &start)?;
            let pen = crate::net::param_grad_penalty(params, &x_tilde, &est.u, cfg.epsilon, cfg.alpha)?;
            let grad = if pen.value > 0.0 { Some(pen.grad) } else { None };
            Ok((mse_val, mse_grad, pen.value, grad, Some((est.u, pen.sigma))))
        })
        .collect();

    let mut grad = ParamGradient::zeros(params.theta.len());
    let mut mse_total = 0.0;
    let mut pen_total = 0.0;
    let mut directions = Vec::with_capacity(batch.len());
    for r in per_item {
        let (m, g, p, pg, dir) = r?;
        mse_total += m;
        grad.add_scaled(&g, 1.0);
        pen_total += p;
        if let Some(pg) = pg {
            grad.add_scaled(&pg, beta);
        }
        directions.push(dir);
    }
    let total = mse_total + beta * pen_total;
    Ok(LossEval { total, mse: mse_total, penalty: pen_total, grad, directions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != state.m.len() {
        return Err(Error::dim("Adam parameter, gradient and state lengths differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for k in 0..theta.len() {
        let g = grad[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        theta[k] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Per training item averages of the loss components.
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_pen: f64,
    /// Mean per-pixel MSE of the denoiser on the test split.
    pub test_mse: f64,
    pub test_sigma_max: f64,
    pub test_sigma_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub phase: Phase,
    pub adam: (f64, f64, f64),
    pub rows: Vec<EpochLog>,
}

pub const TRAINING_LOG_HEADER: &str = "epoch,loss_total,loss_mse,loss_pen,test_mse,test_sigma_max,test_sigma_mean";

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# phase={} adam_beta1={} adam_beta2={} adam_eps={}\n{}\n",
            self.phase.as_str(),
            self.adam.0,
            self.adam.1,
            self.adam.2,
            TRAINING_LOG_HEADER
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                fmt_f64(r.loss_total),
                fmt_f64(r.loss_mse),
                fmt_f64(r.loss_pen),
                fmt_f64(r.test_mse),
                fmt_f64(r.test_sigma_max),
                fmt_f64(r.test_sigma_mean)
            ));
        }
        out
    }
}

/// 17 significant digits, so that the text round-trips to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `σ̂` at one fixed `x̃` per test item (κ seeded per item), plus mean MSE.
pub fn evaluate_test(params: &DenoiserParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64, f64)> {
    let test = dataset.indices(Split::Test);
    if test.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let power = PowerConfig { max_iters: cfg.eval_power_iters, tol: 0.0 };
    let rows: Vec<Result<(f64, f64)>> = test
        .par_iter()
        .map(|&i| {
            let item = &dataset.items[i];
            let out = forward(params, &item.x_noisy)?;
            let err = mse(&out, &item.x_ref);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xE7A1, i as u64]));
            let kappa = rng.random_range(0.0..=1.0);
            let x_tilde = sample_tilde(&item.x_ref, &out, kappa)?;
            let est = spectral_norm_l(params, &x_tilde, &power, &PowerStart::Seed(derive_seed(cfg.seed, &[0xE7A2, i as u64])))?;
            Ok((err, est.sigma))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let test_mse = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let sigma_max = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let sigma_mean = rows.iter().map(|r| r.1).sum::<f64>() / n;
    Ok((test_mse, sigma_max, sigma_mean))
}

/// Epoch loop with seeded shuffling. Warm-start directions for the power
/// iteration persist per training item across steps.
pub fn train_phase(params0: &DenoiserParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<(DenoiserParams, TrainingLog)> {
    cfg.validate()?;
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut params = params0.clone();
    let mut adam = AdamState::new(params.theta.len());
    let mut warm: Vec<Option<Image>> = vec![None; dataset.items.len()];
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, 0x5A])));
        let (mut sum_total, mut sum_mse, mut sum_pen) = (0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    x: &dataset.items[i].x_noisy,
                    target: &dataset.items[i].x_ref,
                    warm: warm[i].as_ref(),
                    power_seed: derive_seed(cfg.seed, &[0xB0, i as u64]),
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, step as u64, 0x4B]));
            let eval = loss_and_grad(&params, &batch, cfg, &mut rng)?;
            if !eval.total.is_finite() || eval.grad.0.iter().any(|g| !g.is_finite()) {
                return Err(Error::non_finite(format!(
                    "{} training loss at epoch {epoch}, step {step}",
                    cfg.phase.as_str()
                )));
            }
            for (&i, dir) in chunk.iter().zip(eval.directions) {
                if let Some((u, _)) = dir {
                    warm[i] = Some(u);
                }
            }
            sum_total += eval.total;
            sum_mse += eval.mse;
            sum_pen += eval.penalty;
            adam_step(&mut params.theta, &eval.grad.0, &mut adam, cfg.learning_rate)?;
        }
        let n = train.len() as f64;
        let (test_mse, test_sigma_max, test_sigma_mean) = evaluate_test(&params, dataset, cfg)?;
        rows.push(EpochLog {
            epoch: epoch + 1,
            loss_total: sum_total / n,
            loss_mse: sum_mse / n,
            loss_pen: sum_pen / n,
            test_mse,
            test_sigma_max,
            test_sigma_mean,
        });
    }
    let log = TrainingLog { phase: cfg.phase, adam: (adam.beta1, adam.beta2, adam.eps), rows };
    Ok((params, log))
}
