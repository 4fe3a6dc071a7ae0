//! Variance schedule, forward noising, the masked occupancy objective and the
//! conditional reverse sampler.
//!
//! Only the free region (voxels not observed in the input) is diffused. The
//! condition region holds the clean observed occupancy `c0` at every step.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{invalid, mismatch, Error, Result};
use crate::grid::{ConditionMask, OccupancyGrid};
use crate::seed::Rng;

/// Lower/upper clamp applied to predicted probabilities before the BCE.
pub const PROB_EPS: f64 = 1e-7;

/// Final binarization threshold of a generated sample.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// Precomputed per-step tables. Steps are 1-based: `beta(1)` .. `beta(T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl VarianceSchedule {
    /// `beta` linearly spaced from `beta0` (step 1) to `beta_t` (step T).
    pub fn linear(steps: usize, beta0: f64, beta_t: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs T >= 1"));
        }
        if !(beta0 > 0.0 && beta0 <= beta_t) {
            return Err(invalid(format!("need 0 < beta0 <= betaT, got {beta0}, {beta_t}")));
        }
        if beta_t >= 1.0 {
            return Err(invalid(format!("betaT must be < 1, got {beta_t}")));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta0]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta0 + (beta_t - beta0) * i as f64 / span)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(invalid("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of `alpha` up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Reverse-process variance of the direct sampler (equal to `beta`).
    pub fn sigma2(&self, t: usize) -> f64 {
        self.beta(t)
    }

    /// Variance of the true posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Weights of the combined objective `l1 * L_t + l2 * L_S + l3 * L_D`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.5, lambda3: 0.5 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2, lambda3 };
        if [lambda1, lambda2, lambda3].iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(invalid(format!("loss weights must be finite and >= 0, got {w:?}")));
        }
        Ok(w)
    }
}

/// Reverse update rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// `x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - abar_t) * (x_t - x0_pred)) / sqrt(a_t) + sqrt(b_t) z`.
    Direct,
    /// Mean and variance of `q(x_{t-1} | x_t, x0 = x0_pred)`.
    #[default]
    DdpmPosterior,
}

/// Training phase of the occupancy objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Loss over the free region only.
    Masked,
    /// Loss over every voxel.
    Full,
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise`, elementwise.
pub fn q_sample(x0: &[f64], t: usize, noise: &[f64], sched: &VarianceSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x0.len() != noise.len() {
        return Err(mismatch(format!("x0 has {} values, noise {}", x0.len(), noise.len())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, z)| a * x + b * z).collect())
}

/// Builds the network input `x_t`: the free region of `target` diffused to
/// step `t`, the condition region set to `c0 = 1`.
pub fn noise_free_region(
    target: &OccupancyGrid,
    mask: &ConditionMask,
    t: usize,
    noise: &[f64],
    sched: &VarianceSchedule,
) -> Result<OccupancyGrid> {
    target.spec().check_same(mask.spec(), "noise_free_region")?;
    let mut values = q_sample(target.values(), t, noise, sched)?;
    for (v, &c) in values.iter_mut().zip(mask.bits()) {
        if c {
            *v = 1.0;
        }
    }
    OccupancyGrid::noised(*target.spec(), values)
}

/// Mean binary cross-entropy and its gradient with respect to `pred`.
///
/// Predictions are clamped to `[PROB_EPS, 1 - PROB_EPS]`; the gradient is the
/// BCE derivative evaluated at the clamped value. In the masked phase the
/// condition voxels carry neither loss nor gradient.
pub fn masked_bce_loss(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    mask: &ConditionMask,
    phase: Phase,
) -> Result<(f64, Vec<f64>)> {
    pred.spec().check_same(gt.spec(), "masked_bce_loss")?;
    pred.spec().check_same(mask.spec(), "masked_bce_loss")?;
    let in_support = |c: bool| phase == Phase::Full || !c;
    let n = mask.bits().iter().filter(|&&c| in_support(c)).count();
    if n == 0 {
        return Err(invalid("masked BCE has an empty support (every voxel is conditioned)"));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.values().len()];
    for (i, ((&p, &g), &c)) in pred.values().iter().zip(gt.values()).zip(mask.bits()).enumerate() {
        if !in_support(c) {
            continue;
        }
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
        grad[i] = (p - g) / (p * (1.0 - p)) * inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Sampler state at step `t`.
#[derive(Clone, Debug)]
pub struct DiffusionState {
    pub x_t: OccupancyGrid,
    pub mask: ConditionMask,
    /// Clean input occupancy; its values on the mask are `c0`.
    pub condition: OccupancyGrid,
    pub t: usize,
}

impl DiffusionState {
    /// Whether every condition voxel of `x_t` still equals `c0`.
    pub fn condition_intact(&self) -> bool {
        self.x_t
            .values()
            .iter()
            .zip(self.condition.values())
            .zip(self.mask.bits())
            .all(|((x, c), &m)| !m || x == c)
    }
}

/// One reverse step followed by replacement of the condition region.
/// `z` is ignored at `t = 1`.
pub fn reverse_step(
    state: &DiffusionState,
    x0_pred: &OccupancyGrid,
    sched: &VarianceSchedule,
    z: &[f64],
    mode: SamplerMode,
) -> Result<DiffusionState> {
    let t = state.t;
    sched.check_step(t)?;
    let spec = state.x_t.spec();
    spec.check_same(x0_pred.spec(), "reverse_step")?;
    if z.len() != spec.len() {
        return Err(mismatch(format!("noise has {} values, grid {}", z.len(), spec.len())));
    }
    let (a, b, ab, ab_prev) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let noise_scale = if t == 1 {
        0.0
    } else {
        match mode {
            SamplerMode::Direct => b.sqrt(),
            SamplerMode::DdpmPosterior => sched.posterior_variance(t).sqrt(),
        }
    };
    let xs = state.x_t.values();
    let preds = x0_pred.values();
    let mut next: Vec<f64> = match mode {
        SamplerMode::Direct => {
            let k = (1.0 - a) / (1.0 - ab).sqrt();
            let inv = 1.0 / a.sqrt();
            xs.iter()
                .zip(preds)
                .zip(z)
                .map(|((&x, &p), &zz)| inv * (x - k * (x - p)) + noise_scale * zz)
                .collect()
        }
        SamplerMode::DdpmPosterior => {
            let c_pred = ab_prev.sqrt() * b / (1.0 - ab);
            let c_x = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            xs.iter()
                .zip(preds)
                .zip(z)
                .map(|((&x, &p), &zz)| c_pred * p + c_x * x + noise_scale * zz)
                .collect()
        }
    };
    for ((v, &m), &c) in next.iter_mut().zip(state.mask.bits()).zip(state.condition.values()) {
        if m {
            *v = c;
        }
    }
    Ok(DiffusionState {
        x_t: OccupancyGrid::noised(*spec, next)?,
        mask: state.mask.clone(),
        condition: state.condition.clone(),
        t: t - 1,
    })
}

pub(crate) fn normal_field(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Runs the reverse chain from `T` to 0 and binarizes the result at 0.5.
pub fn generate(
    denoiser: &dyn Denoiser,
    condition: &OccupancyGrid,
    mask: &ConditionMask,
    sched: &VarianceSchedule,
    rng: &mut Rng,
    mode: SamplerMode,
) -> Result<OccupancyGrid> {
    generate_observed(denoiser, condition, mask, sched, rng, mode, |_| {})
}

/// [`generate`] with a callback invoked on the initial state and after
/// every reverse step.
pub fn generate_observed(
    denoiser: &dyn Denoiser,
    condition: &OccupancyGrid,
    mask: &ConditionMask,
    sched: &VarianceSchedule,
    rng: &mut Rng,
    mode: SamplerMode,
    mut observe: impl FnMut(&DiffusionState),
) -> Result<OccupancyGrid> {
    let spec = *condition.spec();
    spec.check_same(mask.spec(), "generate")?;
    if condition.is_noised()
        || condition
            .values()
            .iter()
            .zip(mask.bits())
            .any(|(&v, &m)| m && v != 0.0 && v != 1.0)
    {
        return Err(invalid("condition must be binary on the conditioned region"));
    }
    let mut values = normal_field(spec.len(), rng);
    for ((v, &m), &c) in values.iter_mut().zip(mask.bits()).zip(condition.values()) {
        if m {
            *v = c;
        }
    }
    let mut state = DiffusionState {
        x_t: OccupancyGrid::noised(spec, values)?,
        mask: mask.clone(),
        condition: condition.clone(),
        t: sched.steps(),
    };
    observe(&state);
    while state.t > 0 {
        let pred = denoiser.predict(&state.x_t, &state.mask, state.t)?;
        let z = normal_field(spec.len(), rng);
        state = reverse_step(&state, &pred, sched, &z, mode)?;
        if !state.condition_intact() {
            return Err(Error::InvalidInput(format!(
                "condition region modified at step {}",
                state.t
            )));
        }
        observe(&state);
    }
    let mut out = state.x_t.values().to_vec();
    for (v, (&m, &c)) in out.iter_mut().zip(mask.bits().iter().zip(condition.values())) {
        *v = if m { c } else if *v >= BINARIZE_THRESHOLD { 1.0 } else { 0.0 };
    }
    OccupancyGrid::from_values(spec, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ConstantDenoiser, OracleDenoiser};
    use crate::grid::{condition_split, GridSpec};
    use crate::seed::rng_from;
    use approx::assert_relative_eq;
    use rand::Rng as _;

    fn full_schedule() -> VarianceSchedule {
        VarianceSchedule::linear(1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn linear_schedule_endpoints() {
        let s = full_schedule();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 2e-2);
        assert_relative_eq!(s.alpha_bar(1), 0.9999, epsilon = 1e-15);
        let one = VarianceSchedule::linear(1, 3e-3, 5e-2).unwrap();
        assert_eq!(one.betas(), &[3e-3]);
    }

    #[test]
    fn linear_schedule_rejects() {
        assert!(VarianceSchedule::linear(0, 1e-4, 2e-2).is_err());
        assert!(VarianceSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(VarianceSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn schedule_invariants() {
        let s = full_schedule();
        for t in 1..=s.steps() {
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert_eq!(s.sigma2(t), s.beta(t));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() <= 1e-12);
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn q_sample_zero_noise_and_range() {
        let s = full_schedule();
        let x0 = [0.0, 1.0, 0.3];
        let out = q_sample(&x0, 10, &[0.0; 3], &s).unwrap();
        for (o, x) in out.iter().zip(x0) {
            assert_eq!(*o, s.alpha_bar(10).sqrt() * x);
        }
        assert!(q_sample(&x0, 0, &[0.0; 3], &s).is_err());
        assert!(q_sample(&x0, 1001, &[0.0; 3], &s).is_err());
        assert!(q_sample(&x0, 3, &[0.0; 2], &s).is_err());
    }

    #[test]
    fn q_sample_at_final_step_is_mostly_noise() {
        let s = full_schedule();
        let out = q_sample(&[1.0], 1000, &[0.5], &s).unwrap()[0];
        let ab = s.alpha_bar(1000);
        assert!(ab < 5e-5 && ab > 3e-5, "abar_T = {ab}");
        assert!((out - 0.5).abs() < 0.01);
    }

    fn spec8() -> GridSpec {
        GridSpec::new([4, 4, 4], 0.25, [0.0; 3]).unwrap()
    }

    fn random_binary(spec: GridSpec, p: f64, seed: u64) -> OccupancyGrid {
        let mut rng = rng_from(seed);
        let v = (0..spec.len()).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect();
        OccupancyGrid::from_values(spec, v).unwrap()
    }

    #[test]
    fn bce_perfect_and_half() {
        let spec = spec8();
        let gt = random_binary(spec, 0.3, 1);
        let mask = ConditionMask::empty(spec);
        let (loss, _) = masked_bce_loss(&gt, &gt, &mask, Phase::Masked).unwrap();
        assert!(loss <= 1e-5);
        let half = OccupancyGrid::filled(spec, 0.5).unwrap();
        let (loss, _) = masked_bce_loss(&half, &gt, &mask, Phase::Full).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn bce_masked_region_is_inert() {
        let spec = spec8();
        let gt = random_binary(spec, 0.4, 2);
        let mask = condition_split(&random_binary(spec, 0.3, 3)).unwrap();
        let pred = OccupancyGrid::filled(spec, 0.3).unwrap();
        let (base, grad) = masked_bce_loss(&pred, &gt, &mask, Phase::Masked).unwrap();
        let i = mask.bits().iter().position(|&b| b).unwrap();
        let mut v = pred.values().to_vec();
        v[i] = 0.9;
        let bumped = OccupancyGrid::from_values(spec, v).unwrap();
        let (loss, _) = masked_bce_loss(&bumped, &gt, &mask, Phase::Masked).unwrap();
        assert_eq!(loss, base);
        assert_eq!(grad[i], 0.0);
        let (full, _) = masked_bce_loss(&bumped, &gt, &mask, Phase::Full).unwrap();
        assert_ne!(full, base);
    }

    #[test]
    fn bce_rejects_fully_conditioned_phase1() {
        let spec = spec8();
        let ones = OccupancyGrid::filled(spec, 1.0).unwrap();
        let mask = condition_split(&ones).unwrap();
        assert!(masked_bce_loss(&ones, &ones, &mask, Phase::Masked).is_err());
        assert!(masked_bce_loss(&ones, &ones, &mask, Phase::Full).is_ok());
    }

    #[test]
    fn bce_gradient_matches_central_differences() {
        let spec = spec8();
        let gt = random_binary(spec, 0.4, 4);
        let mask = condition_split(&random_binary(spec, 0.2, 5)).unwrap();
        let mut rng = rng_from(6);
        let pv: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(0.05..0.95)).collect();
        let pred = OccupancyGrid::from_values(spec, pv.clone()).unwrap();
        for phase in [Phase::Masked, Phase::Full] {
            let (_, grad) = masked_bce_loss(&pred, &gt, &mask, phase).unwrap();
            for i in 0..spec.len() {
                let eps = 1e-6;
                let eval = |d: f64| {
                    let mut v = pv.clone();
                    v[i] += d;
                    masked_bce_loss(&OccupancyGrid::from_values(spec, v).unwrap(), &gt, &mask, phase)
                        .unwrap()
                        .0
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                assert!((fd - grad[i]).abs() <= 1e-7 * grad[i].abs().max(1.0), "{i}: {fd} vs {}", grad[i]);
            }
        }
    }

    fn state_for(gt: &OccupancyGrid, x_t: Vec<f64>, t: usize) -> DiffusionState {
        let condition = gt.clone();
        DiffusionState {
            x_t: OccupancyGrid::noised(*gt.spec(), x_t).unwrap(),
            mask: condition_split(gt).unwrap(),
            condition,
            t,
        }
    }

    #[test]
    fn direct_step_with_pred_equal_to_state_rescales() {
        let s = full_schedule();
        let spec = spec8();
        let empty = OccupancyGrid::zeros(spec);
        let xs: Vec<f64> = (0..spec.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let state = state_for(&empty, xs.clone(), 500);
        let pred = OccupancyGrid::noised(spec, xs.clone()).unwrap();
        let next = reverse_step(&state, &pred, &s, &vec![0.0; spec.len()], SamplerMode::Direct).unwrap();
        for (n, x) in next.x_t.values().iter().zip(&xs) {
            assert_relative_eq!(*n, x / s.alpha(500).sqrt(), epsilon = 1e-14);
        }
        assert_eq!(next.t, 499);
    }

    #[test]
    fn reverse_step_replaces_condition() {
        let s = full_schedule();
        let spec = spec8();
        let c0 = random_binary(spec, 0.3, 7);
        let state = state_for(&c0, vec![0.2; spec.len()], 40);
        let pred = OccupancyGrid::zeros(spec);
        let z = vec![1.5; spec.len()];
        for mode in [SamplerMode::Direct, SamplerMode::DdpmPosterior] {
            let next = reverse_step(&state, &pred, &s, &z, mode).unwrap();
            assert!(next.condition_intact());
        }
        let mut bad = state.clone();
        bad.t = 0;
        assert!(reverse_step(&bad, &pred, &s, &z, SamplerMode::Direct).is_err());
    }

    #[test]
    fn posterior_at_first_step_returns_prediction() {
        let s = full_schedule();
        assert_eq!(s.posterior_variance(1), 0.0);
        let spec = spec8();
        let empty = OccupancyGrid::zeros(spec);
        let state = state_for(&empty, vec![0.7; spec.len()], 1);
        let pv: Vec<f64> = (0..spec.len()).map(|i| (i % 7) as f64 / 7.0).collect();
        let pred = OccupancyGrid::from_values(spec, pv.clone()).unwrap();
        let next = reverse_step(&state, &pred, &s, &vec![3.0; spec.len()], SamplerMode::DdpmPosterior).unwrap();
        for (a, b) in next.x_t.values().iter().zip(&pv) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn generate_with_oracle_recovers_target() {
        let s = VarianceSchedule::linear(50, 2e-3, 0.4).unwrap();
        let spec = GridSpec::new([6, 6, 6], 1.0, [0.0; 3]).unwrap();
        let gt = random_binary(spec, 0.3, 11);
        // condition = a subset of gt
        let mut rng = rng_from(12);
        let cv: Vec<f64> = gt.values().iter().map(|&v| if v == 1.0 && rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let cond = OccupancyGrid::from_values(spec, cv).unwrap();
        let mask = condition_split(&cond).unwrap();
        let oracle = OracleDenoiser::new(&gt).unwrap();
        let mut steps = 0;
        let out = generate_observed(&oracle, &cond, &mask, &s, &mut rng_from(3), SamplerMode::DdpmPosterior, |st| {
            assert!(st.condition_intact());
            steps += 1;
        })
        .unwrap();
        assert_eq!(steps, 51);
        assert_eq!(out, gt);
        let again = generate(&oracle, &cond, &mask, &s, &mut rng_from(3), SamplerMode::DdpmPosterior).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn generate_constant_low_prediction_is_empty() {
        let s = VarianceSchedule::linear(50, 2e-3, 0.4).unwrap();
        let spec = GridSpec::new([6, 6, 6], 1.0, [0.0; 3]).unwrap();
        let cond = OccupancyGrid::zeros(spec);
        let mask = condition_split(&cond).unwrap();
        let den = ConstantDenoiser(0.1);
        for seed in 0..3 {
            let out = generate(&den, &cond, &mask, &s, &mut rng_from(seed), SamplerMode::DdpmPosterior).unwrap();
            assert_eq!(out.occupied_count(), 0);
        }
    }
}
