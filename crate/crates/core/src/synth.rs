//! Synthetic transformation-model data with known hazard.
//!
//! Event times solve `log H(T̃) = -m(Z) + ε` with `H(t) = e^t - 1`, where `e^ε`
//! has cumulative hazard `G_θ`. Equivalently the conditional log-hazard is
//! `ν(t, Z) = t + m(Z)` under frailty `G_θ`. Censoring times use the same form
//! with independent noise shifted by a constant chosen to hit a target
//! censoring rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{CensoredSample, Dataset};
use crate::derive_seed;
use crate::error::{NfmError, Result};
use crate::frailty::{FrailtyFamily, FrailtySpec};

pub const DEFAULT_BETA: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const PILOT_SIZE: usize = 20_000;
pub const CENSORING_TOLERANCE: f64 = 0.01;

const STREAM_MAIN: u64 = 10;
const STREAM_CENSOR: u64 = 11;
const STREAM_PILOT: u64 = 12;
const STREAM_HOLDOUT: u64 = 13;
const STREAM_FRAILTY: u64 = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub beta: Vec<f64>,
    pub frailty: FrailtySpec,
    pub target_censoring: f64,
    pub seed: u64,
    /// `false` forces `m ≡ 0`.
    pub covariate_effect: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 1000,
            beta: DEFAULT_BETA.to_vec(),
            frailty: FrailtySpec { family: FrailtyFamily::Gamma, theta: 1.0 },
            target_censoring: 0.40,
            seed: 0,
            covariate_effect: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(NfmError::Config("synthetic sample count must be at least 1".into()));
        }
        if self.beta.is_empty() || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(NfmError::Config("beta must be a non-empty finite vector".into()));
        }
        if !(self.target_censoring > 0.0 && self.target_censoring < 1.0) {
            return Err(NfmError::Config(format!("target censoring must lie in (0, 1), got {}", self.target_censoring)));
        }
        self.frailty.validate()
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|j| format!("z{j}")).collect()
    }
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub beta: Vec<f64>,
    pub frailty: FrailtySpec,
    pub covariate_effect: bool,
    /// Log-scale shift of the censoring noise.
    pub censoring_shift: f64,
    /// Uncensored event times, in sample order.
    pub latent_times: Vec<f64>,
    pub censor_times: Vec<f64>,
}

impl SynthTruth {
    /// `m(Z) = sin(⟨Z, β⟩) + ⟨sin Z, β⟩`.
    pub fn m(&self, z: &[f64]) -> f64 {
        covariate_effect(&self.beta, self.covariate_effect, z)
    }

    pub fn h(&self, t: f64) -> f64 {
        t
    }

    /// `H(t) = ∫_0^t e^s ds = e^t - 1`.
    pub fn big_h(&self, t: f64) -> f64 {
        t.exp_m1()
    }

    pub fn big_h_inv(&self, y: f64) -> f64 {
        y.ln_1p()
    }

    pub fn nu(&self, t: f64, z: &[f64]) -> f64 {
        self.h(t) + self.m(z)
    }

    /// Marginal `Λ(t | Z) = G_θ(e^{m(Z)} H(t))`.
    pub fn cum_hazard(&self, t: f64, z: &[f64]) -> Result<f64> {
        self.frailty.transform(self.m(z).exp() * self.big_h(t))
    }

    pub fn survival(&self, t: f64, z: &[f64]) -> Result<f64> {
        Ok((-self.cum_hazard(t, z)?).exp())
    }
}

fn covariate_effect(beta: &[f64], enabled: bool, z: &[f64]) -> f64 {
    if !enabled {
        return 0.0;
    }
    let linear: f64 = z.iter().zip(beta).map(|(z, b)| z * b).sum();
    let sines: f64 = z.iter().zip(beta).map(|(z, b)| z.sin() * b).sum();
    linear.sin() + sines
}

/// A draw `x` with `P(x > y) = exp(-G_θ(y))`.
fn noise(frailty: &FrailtySpec, rng: &mut ChaCha8Rng) -> Result<f64> {
    // 1 - U lies in (0, 1], so the log is finite
    let u: f64 = 1.0 - rng.gen::<f64>();
    frailty.inverse(-u.ln())
}

fn draw_covariates(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.gen::<f64>()).collect()
}

/// Censoring fraction `P(x_event > e^s x_censor)` on paired pilot draws.
fn pilot_rate(log_ratios: &[f64], shift: f64) -> f64 {
    log_ratios.iter().filter(|&&r| r > shift).count() as f64 / log_ratios.len() as f64
}

/// Location shift `s` of the censoring noise such that the censoring fraction
/// on a fixed pilot sample is within `CENSORING_TOLERANCE` of the target.
/// The fraction is non-increasing in `s`.
pub fn calibrate_censoring(config: &SynthConfig) -> Result<f64> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_PILOT));
    let mut log_ratios = Vec::with_capacity(PILOT_SIZE);
    for _ in 0..PILOT_SIZE {
        // m(Z) cancels in T̃ > C, so only the two noises matter
        let x = noise(&config.frailty, &mut rng)?;
        let xc = noise(&config.frailty, &mut rng)?;
        log_ratios.push(x.ln() - xc.ln());
    }
    let target = config.target_censoring;
    let rate = |s: f64| pilot_rate(&log_ratios, s);
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut expansions = 0;
    while !(rate(lo) >= target && rate(hi) <= target) {
        lo *= 2.0;
        hi *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(NfmError::NonBracketing(format!("censoring target {target} is not reachable")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = rate(mid);
        if (r - target).abs() < CENSORING_TOLERANCE {
            return Ok(mid);
        }
        if r > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(NfmError::NonBracketing(format!("bisection did not reach censoring target {target}")))
}

fn draw(config: &SynthConfig, n: usize, shift: f64, stream: u64) -> Result<(Dataset, SynthTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream));
    let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(config.seed, stream), STREAM_CENSOR));
    let mut samples = Vec::with_capacity(n);
    let mut latent_times = Vec::with_capacity(n);
    let mut censor_times = Vec::with_capacity(n);
    for _ in 0..n {
        let z = draw_covariates(config.dim(), &mut rng);
        let em = (-covariate_effect(&config.beta, config.covariate_effect, &z)).exp();
        let t = (em * noise(&config.frailty, &mut rng)?).ln_1p();
        let c = (em * shift.exp() * noise(&config.frailty, &mut crng)?).ln_1p();
        latent_times.push(t);
        censor_times.push(c);
        samples.push(CensoredSample::new(t.min(c), t <= c, z));
    }
    let dataset = Dataset::new(samples, config.covariate_names())?;
    let truth = SynthTruth {
        beta: config.beta.clone(),
        frailty: config.frailty,
        covariate_effect: config.covariate_effect,
        censoring_shift: shift,
        latent_times,
        censor_times,
    };
    Ok((dataset, truth))
}

/// `config.n` samples from the transformation model with calibrated censoring.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    let shift = calibrate_censoring(config)?;
    draw(config, config.n, shift, STREAM_MAIN)
}

/// Training data plus an independent hold-out sample from the same model.
pub fn generate_with_holdout(config: &SynthConfig, n_holdout: usize) -> Result<(Dataset, Dataset, SynthTruth)> {
    let shift = calibrate_censoring(config)?;
    let (train, truth) = draw(config, config.n, shift, STREAM_MAIN)?;
    let (holdout, _) = draw(config, n_holdout, shift, STREAM_HOLDOUT)?;
    Ok((train, holdout, truth))
}

/// Two-stage sampler for gamma frailty: `ω ~ Gamma(mean 1, variance θ)`, then
/// `T̃` from the conditional survival `exp(-ω e^{m(Z)} H(t))`. Censoring is as
/// in [`generate`].
pub fn frailty_path_generate(config: &SynthConfig) -> Result<Dataset> {
    frailty_path_generate_with(config, None)
}

/// As [`frailty_path_generate`], with every `ω` pinned to `omega` when given.
pub fn frailty_path_generate_with(config: &SynthConfig, omega: Option<f64>) -> Result<Dataset> {
    Ok(frailty_path_draw(config, omega)?.0)
}

/// Two-stage dataset plus its uncensored event times.
fn frailty_path_draw(config: &SynthConfig, omega: Option<f64>) -> Result<(Dataset, Vec<f64>)> {
    if config.frailty.family != FrailtyFamily::Gamma {
        return Err(NfmError::Config("the two-stage sampler needs gamma frailty".into()));
    }
    if let Some(w) = omega {
        if !(w > 0.0 && w.is_finite()) {
            return Err(NfmError::Domain(format!("frailty must be positive, got {w}")));
        }
    }
    let shift = calibrate_censoring(config)?;
    let theta = config.frailty.theta;
    let gamma = if theta > 0.0 {
        Some(Gamma::new(1.0 / theta, theta).map_err(|e| NfmError::Domain(e.to_string()))?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_FRAILTY));
    let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(config.seed, STREAM_FRAILTY), STREAM_CENSOR));
    let mut samples = Vec::with_capacity(config.n);
    let mut latent = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let z = draw_covariates(config.dim(), &mut rng);
        let m = covariate_effect(&config.beta, config.covariate_effect, &z);
        let w = match (omega, &gamma) {
            (Some(w), _) => w,
            (None, Some(g)) => g.sample(&mut rng),
            (None, None) => 1.0,
        };
        let e = -(1.0 - rng.gen::<f64>()).ln();
        let t = (e / (w * m.exp())).ln_1p();
        let c = ((-m).exp() * shift.exp() * noise(&config.frailty, &mut crng)?).ln_1p();
        latent.push(t);
        samples.push(CensoredSample::new(t.min(c), t <= c, z));
    }
    Ok((Dataset::new(samples, config.covariate_names())?, latent))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, theta: f64, seed: u64) -> SynthConfig {
        SynthConfig { n, frailty: FrailtySpec::gamma(theta).unwrap(), seed, ..Default::default() }
    }

    fn empirical_survival(times: &[f64], t: f64) -> f64 {
        times.iter().filter(|&&x| x > t).count() as f64 / times.len() as f64
    }

    /// Two-sample Kolmogorov-Smirnov statistic.
    fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn h_and_inverse_agree() {
        let truth = generate(&cfg(5, 1.0, 0)).unwrap().1;
        for k in 0..=200 {
            let t = k as f64 * 0.1;
            assert!((truth.big_h_inv(truth.big_h(t)) - t).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_frailty_is_unit_exponential_in_h() {
        let config = SynthConfig { covariate_effect: false, ..cfg(100_000, 0.0, 3) };
        let (_, truth) = generate(&config).unwrap();
        let s = empirical_survival(&truth.latent_times, std::f64::consts::LN_2);
        assert!((s / (-1.0f64).exp() - 1.0).abs() < 0.02, "{s}");
    }

    #[test]
    fn gamma_one_noise_has_unit_median() {
        let config = SynthConfig { covariate_effect: false, ..cfg(100_000, 1.0, 4) };
        let (_, truth) = generate(&config).unwrap();
        let mut x: Vec<f64> = truth.latent_times.iter().map(|t| truth.big_h(*t)).collect();
        x.sort_by(f64::total_cmp);
        let median = x[x.len() / 2];
        assert!((median - 1.0).abs() < 0.03, "{median}");
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&cfg(500, 1.0, 9)).unwrap();
        let b = generate(&cfg(500, 1.0, 9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, generate(&cfg(500, 1.0, 10)).unwrap().0);
    }

    #[test]
    fn indicators_and_times_are_consistent() {
        let (ds, truth) = generate(&cfg(2000, 1.0, 1)).unwrap();
        for ((s, t), c) in ds.samples().iter().zip(&truth.latent_times).zip(&truth.censor_times) {
            assert_eq!(s.event, t <= c);
            assert_eq!(s.time, t.min(*c));
            assert_eq!(s.covariates.len(), 5);
            assert!(s.covariates.iter().all(|z| (0.0..1.0).contains(z)));
        }
    }

    #[test]
    fn censoring_hits_target_band() {
        let (ds, truth) = generate(&cfg(10_000, 1.0, 2)).unwrap();
        let rate = ds.censoring_rate();
        assert!((0.37..=0.43).contains(&rate), "{rate}");
        assert_eq!(calibrate_censoring(&cfg(10_000, 1.0, 2)).unwrap(), truth.censoring_shift);
    }

    #[test]
    fn censoring_rate_decreases_with_shift() {
        let low = calibrate_censoring(&SynthConfig { target_censoring: 0.1, ..cfg(10, 1.0, 5) }).unwrap();
        let mid = calibrate_censoring(&SynthConfig { target_censoring: 0.4, ..cfg(10, 1.0, 5) }).unwrap();
        let high = calibrate_censoring(&SynthConfig { target_censoring: 0.8, ..cfg(10, 1.0, 5) }).unwrap();
        assert!(low > mid && mid > high);
        assert!(calibrate_censoring(&SynthConfig { target_censoring: 1.0, ..cfg(10, 1.0, 5) }).is_err());
    }

    #[test]
    fn two_stage_sampler_matches_marginal() {
        let config = cfg(50_000, 1.0, 6);
        let direct = generate(&config).unwrap().1.latent_times;
        let (_, two_stage) = frailty_path_draw(&config, None).unwrap();
        let d = ks(direct, two_stage);
        assert!(d < 1.628 * (2.0f64 / 50_000.0).sqrt(), "{d}");
    }

    #[test]
    fn fixed_unit_frailty_reproduces_degenerate_marginal() {
        let config = SynthConfig { covariate_effect: false, ..cfg(100_000, 1.0, 7) };
        let (_, times) = frailty_path_draw(&config, Some(1.0)).unwrap();
        let s = empirical_survival(&times, std::f64::consts::LN_2);
        assert!((s / (-1.0f64).exp() - 1.0).abs() < 0.02, "{s}");
    }

    #[test]
    fn fixed_frailty_two_matches_conditional_survival() {
        let config = SynthConfig { covariate_effect: false, ..cfg(100_000, 1.0, 8) };
        let (_, times) = frailty_path_draw(&config, Some(2.0)).unwrap();
        for t in [0.05f64, 0.1, 0.25, 0.5] {
            let want = (-2.0 * t.exp_m1()).exp();
            let got = empirical_survival(&times, t);
            assert!((got / want - 1.0).abs() < 0.02, "t = {t}: {got} vs {want}");
        }
    }

    #[test]
    fn two_stage_dataset_is_censored_like_generate() {
        let rate = frailty_path_generate(&cfg(10_000, 1.0, 3)).unwrap().censoring_rate();
        assert!((0.37..=0.43).contains(&rate), "{rate}");
    }

    #[test]
    fn truth_survival_is_gamma_marginal() {
        let truth = generate(&cfg(10, 1.0, 0)).unwrap().1;
        let z = [0.2, 0.4, 0.6, 0.8, 0.1];
        let t = 0.7f64;
        let want = 1.0 / (1.0 + truth.m(&z).exp() * t.exp_m1());
        assert!((truth.survival(t, &z).unwrap() - want).abs() < 1e-14);
        assert_eq!(truth.nu(t, &z), t + truth.m(&z));
    }

    #[test]
    fn two_stage_requires_gamma() {
        let config = SynthConfig { frailty: FrailtySpec::box_cox(0.5).unwrap(), ..cfg(10, 1.0, 0) };
        assert!(frailty_path_generate(&config).is_err());
    }
}
