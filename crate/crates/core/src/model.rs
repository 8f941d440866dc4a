//! NFM models: likelihood, gradients, training and prediction.
//!
//! Both schemes model the log conditional hazard `ν(t, Z)`; the frailty
//! transform turns the integrated intensity `I(t, Z) = ∫_0^t exp(ν(s, Z)) ds`
//! into the marginal cumulative hazard `Λ(t | Z) = G_θ(I(t, Z))`. Per sample the
//! observed log-likelihood is
//!
//! ```text
//! ℓ = δ · (log g_θ(I(T, Z)) + ν(T, Z)) - G_θ(I(T, Z))
//! ```
//!
//! where for the proportional scheme `ν = h(t) + m(Z)` and `I = exp(m(Z)) ∫ exp(h)`.
//! Integrals use a fixed Clenshaw-Curtis rule mapped onto `[0, T]`, so the
//! gradient of `I` is the same weighted sum over nodes of `exp(ν) ∂ν`.
//! Networks see time as `t / τ`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CensoredSample, Dataset, Scaler};
use crate::derive_seed;
use crate::error::{NfmError, Result};
use crate::frailty::{FrailtyFamily, FrailtySpec, ThetaBounds};
use crate::metrics::SurvivalCurve;
use crate::nn::{AdamConfig, AdamState, MlpNet, MlpSpec, Tape};
use crate::quadrature::QuadratureRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// `ν(t, Z) = h(t) + m(Z)`.
    Pf,
    /// Unrestricted `ν(t, Z)`.
    Fn,
}

impl std::str::FromStr for Scheme {
    type Err = NfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pf" => Ok(Scheme::Pf),
            "fn" => Ok(Scheme::Fn),
            other => Err(NfmError::Config(format!("unknown scheme '{other}', expected pf or fn"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Networks {
    Pf { h_net: MlpNet, m_net: MlpNet },
    Fn { nu_net: MlpNet },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NfmModel {
    nets: Networks,
    frailty: FrailtySpec,
    tau: f64,
    quad: QuadratureRule,
    eval_quad: QuadratureRule,
    covariate_dim: usize,
    pub scaler: Option<Scaler>,
    pub covariate_names: Vec<String>,
}

/// Gradient of the batch-mean log-likelihood. `nets` follows the order of
/// [`NfmModel::nets`]: `[h, m]` for PF, `[ν]` for FN.
#[derive(Debug, Clone, PartialEq)]
pub struct OllGradient {
    pub value: f64,
    pub nets: Vec<Vec<f64>>,
    pub theta: f64,
}

/// The pieces of one sample's log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTerms {
    /// `∫_0^T exp(ν(s, Z)) ds`.
    pub integral: f64,
    pub nu_at_time: f64,
    pub log_g: f64,
    pub g_big: f64,
    pub value: f64,
}

#[derive(Default)]
struct Workspace {
    tapes: Vec<Tape>,
    tape_t: Tape,
    tape_m: Tape,
    points: Vec<f64>,
    weights: Vec<f64>,
    input: Vec<f64>,
    node_nu: Vec<f64>,
}

impl NfmModel {
    pub fn new_pf(h_net: MlpNet, m_net: MlpNet, frailty: FrailtySpec, tau: f64, quad_order: usize) -> Result<Self> {
        if h_net.input_dim() != 1 {
            return Err(NfmError::Shape(format!("h-net must take one input, has {}", h_net.input_dim())));
        }
        let covariate_dim = m_net.input_dim();
        Self::assemble(Networks::Pf { h_net, m_net }, frailty, tau, quad_order, covariate_dim)
    }

    pub fn new_fn(nu_net: MlpNet, frailty: FrailtySpec, tau: f64, quad_order: usize) -> Result<Self> {
        if nu_net.input_dim() < 2 {
            return Err(NfmError::Shape("nu-net needs time plus at least one covariate".into()));
        }
        let covariate_dim = nu_net.input_dim() - 1;
        Self::assemble(Networks::Fn { nu_net }, frailty, tau, quad_order, covariate_dim)
    }

    fn assemble(nets: Networks, frailty: FrailtySpec, tau: f64, quad_order: usize, covariate_dim: usize) -> Result<Self> {
        frailty.validate()?;
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(NfmError::Domain(format!("horizon tau must be positive, got {tau}")));
        }
        Ok(NfmModel {
            nets,
            frailty,
            tau,
            quad: QuadratureRule::new(quad_order)?,
            eval_quad: QuadratureRule::new(64)?,
            covariate_dim,
            scaler: None,
            covariate_names: Vec::new(),
        })
    }

    pub fn with_eval_order(mut self, order: usize) -> Result<Self> {
        self.eval_quad = QuadratureRule::new(order)?;
        Ok(self)
    }

    pub fn scheme(&self) -> Scheme {
        match self.nets {
            Networks::Pf { .. } => Scheme::Pf,
            Networks::Fn { .. } => Scheme::Fn,
        }
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn nets(&self) -> Vec<&MlpNet> {
        match &self.nets {
            Networks::Pf { h_net, m_net } => vec![h_net, m_net],
            Networks::Fn { nu_net } => vec![nu_net],
        }
    }

    pub fn nets_mut(&mut self) -> Vec<&mut MlpNet> {
        match &mut self.nets {
            Networks::Pf { h_net, m_net } => vec![h_net, m_net],
            Networks::Fn { nu_net } => vec![nu_net],
        }
    }

    pub fn frailty(&self) -> FrailtySpec {
        self.frailty
    }

    pub fn set_theta(&mut self, theta: f64) -> Result<()> {
        self.frailty = self.frailty.with_theta(theta)?;
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn quad_order(&self) -> usize {
        self.quad.order()
    }

    pub fn eval_order(&self) -> usize {
        self.eval_quad.order()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    fn check_sample(&self, idx: usize, s: &CensoredSample) -> Result<()> {
        if s.covariates.len() != self.covariate_dim {
            return Err(NfmError::Shape(format!(
                "sample {idx}: expected {} covariates, got {}",
                self.covariate_dim,
                s.covariates.len()
            )));
        }
        self.check_time(s.time)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0) {
            return Err(NfmError::Domain(format!("time must be >= 0, got {t}")));
        }
        if t > self.tau * (1.0 + 1e-12) {
            return Err(NfmError::Horizon { t, tau: self.tau });
        }
        Ok(())
    }

    /// Forward passes for one sample plus, when `grad` is given, accumulation
    /// of `scale * ∂ℓ/∂params` into it.
    fn sample_pass(
        &self,
        idx: usize,
        s: &CensoredSample,
        ws: &mut Workspace,
        grad: Option<(&mut OllGradient, f64)>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<SampleTerms> {
        self.check_sample(idx, s)?;
        let inv_tau = 1.0 / self.tau;
        if s.time > 0.0 {
            self.quad.map_into(0.0, s.time, &mut ws.points, &mut ws.weights);
        } else {
            ws.points.clear();
            ws.weights.clear();
        }
        let nodes = ws.points.len();
        if ws.tapes.len() < nodes {
            ws.tapes.resize_with(nodes, Tape::default);
        }
        ws.node_nu.clear();

        let nu_at_time = match &self.nets {
            Networks::Pf { h_net, m_net } => {
                let m = m_net.forward_with(&s.covariates, &mut ws.tape_m, reborrow(&mut rng))?;
                for k in 0..nodes {
                    let h = h_net.forward_with(&[ws.points[k] * inv_tau], &mut ws.tapes[k], reborrow(&mut rng))?;
                    ws.node_nu.push(h + m);
                }
                h_net.forward_with(&[s.time * inv_tau], &mut ws.tape_t, reborrow(&mut rng))? + m
            }
            Networks::Fn { nu_net } => {
                ws.input.clear();
                ws.input.push(0.0);
                ws.input.extend_from_slice(&s.covariates);
                for k in 0..nodes {
                    ws.input[0] = ws.points[k] * inv_tau;
                    let v = nu_net.forward_with(&ws.input, &mut ws.tapes[k], reborrow(&mut rng))?;
                    ws.node_nu.push(v);
                }
                ws.input[0] = s.time * inv_tau;
                nu_net.forward_with(&ws.input, &mut ws.tape_t, reborrow(&mut rng))?
            }
        };

        let mut integral = 0.0;
        for (w, nu) in ws.weights.iter().zip(&ws.node_nu) {
            integral += w * nu.exp();
        }
        let terms = self
            .frailty
            .terms(integral)
            .map_err(|_| NfmError::NonFinite(format!("sample {idx}: integrated intensity is {integral}")))?;
        let delta = s.delta();
        let value = delta * (terms.log_g + nu_at_time) - terms.g_big;
        if !value.is_finite() {
            return Err(NfmError::NonFinite(format!("sample {idx}: log-likelihood term is {value}")));
        }

        if let Some((grad, scale)) = grad {
            let d_integral = delta * terms.dlog_g_dx - terms.g;
            grad.theta += scale * (delta * terms.dlog_g_dtheta - terms.dg_big_dtheta);
            match &self.nets {
                Networks::Pf { h_net, m_net } => {
                    let (gh, rest) = grad.nets.split_at_mut(1);
                    for k in 0..nodes {
                        let up = scale * d_integral * ws.weights[k] * ws.node_nu[k].exp();
                        h_net.backward_into(&mut ws.tapes[k], up, &mut gh[0])?;
                    }
                    if delta != 0.0 {
                        h_net.backward_into(&mut ws.tape_t, scale * delta, &mut gh[0])?;
                    }
                    let up_m = scale * (d_integral * integral + delta);
                    m_net.backward_into(&mut ws.tape_m, up_m, &mut rest[0])?;
                }
                Networks::Fn { nu_net } => {
                    let g = &mut grad.nets[0];
                    for k in 0..nodes {
                        let up = scale * d_integral * ws.weights[k] * ws.node_nu[k].exp();
                        nu_net.backward_into(&mut ws.tapes[k], up, g)?;
                    }
                    if delta != 0.0 {
                        nu_net.backward_into(&mut ws.tape_t, scale * delta, g)?;
                    }
                }
            }
        }

        Ok(SampleTerms { integral, nu_at_time, log_g: terms.log_g, g_big: terms.g_big, value })
    }

    pub fn sample_terms(&self, s: &CensoredSample) -> Result<SampleTerms> {
        self.sample_pass(0, s, &mut Workspace::default(), None, None)
    }

    /// Batch-mean observed log-likelihood.
    pub fn oll(&self, batch: &[CensoredSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(NfmError::EmptyBatch);
        }
        let mut ws = Workspace::default();
        let mut total = 0.0;
        for (i, s) in batch.iter().enumerate() {
            total += self.sample_pass(i, s, &mut ws, None, None)?.value;
        }
        Ok(total / batch.len() as f64)
    }

    /// Batch-mean log-likelihood and its exact gradient (evaluation mode).
    pub fn oll_grad(&self, batch: &[CensoredSample]) -> Result<OllGradient> {
        let refs: Vec<&CensoredSample> = batch.iter().collect();
        self.grad_impl(&refs, &mut Workspace::default(), None)
    }

    fn zero_gradient(&self) -> OllGradient {
        OllGradient { value: 0.0, nets: self.nets().iter().map(|n| vec![0.0; n.param_count()]).collect(), theta: 0.0 }
    }

    /// Samples are reduced sequentially in batch order.
    fn grad_impl(&self, batch: &[&CensoredSample], ws: &mut Workspace, mut rng: Option<&mut dyn RngCore>) -> Result<OllGradient> {
        if batch.is_empty() {
            return Err(NfmError::EmptyBatch);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grad = self.zero_gradient();
        let mut total = 0.0;
        for (i, s) in batch.iter().enumerate() {
            total += self.sample_pass(i, s, ws, Some((&mut grad, scale)), reborrow(&mut rng))?.value;
        }
        grad.value = total * scale;
        if let Some(i) = grad.nets.iter().flatten().position(|g| !g.is_finite()) {
            return Err(NfmError::NonFinite(format!("gradient entry {i} is not finite")));
        }
        if !grad.theta.is_finite() {
            return Err(NfmError::NonFinite("theta gradient is not finite".into()));
        }
        Ok(grad)
    }

    /// ReLU on/off pattern over every network evaluation the likelihood of
    /// `batch` performs. Finite-difference checks use it to detect kinks.
    pub fn relu_signature(&self, batch: &[CensoredSample]) -> Result<Vec<bool>> {
        Ok(self.oll_and_signature(batch)?.1)
    }

    /// Batch-mean log-likelihood together with its ReLU signature.
    pub fn oll_and_signature(&self, batch: &[CensoredSample]) -> Result<(f64, Vec<bool>)> {
        if batch.is_empty() {
            return Err(NfmError::EmptyBatch);
        }
        let mut ws = Workspace::default();
        let mut sig = Vec::new();
        let mut total = 0.0;
        for (i, s) in batch.iter().enumerate() {
            total += self.sample_pass(i, s, &mut ws, None, None)?.value;
            let nodes = ws.points.len();
            for tape in ws.tapes[..nodes].iter().chain([&ws.tape_t]) {
                sig.extend(tape.relu_pattern());
            }
            if self.scheme() == Scheme::Pf {
                sig.extend(ws.tape_m.relu_pattern());
            }
        }
        Ok((total / batch.len() as f64, sig))
    }

    /// Smallest |hidden pre-activation| over the batch's network evaluations.
    pub fn preactivation_margin(&self, batch: &[CensoredSample]) -> Result<f64> {
        let mut ws = Workspace::default();
        let mut margin = f64::INFINITY;
        for (i, s) in batch.iter().enumerate() {
            self.sample_pass(i, s, &mut ws, None, None)?;
            let nodes = ws.points.len();
            for tape in ws.tapes[..nodes].iter().chain([&ws.tape_t]) {
                margin = margin.min(tape.preactivation_margin());
            }
            if self.scheme() == Scheme::Pf {
                margin = margin.min(ws.tape_m.preactivation_margin());
            }
        }
        Ok(margin)
    }

    /// `ν̂(t, Z)`. Not restricted to `[0, τ]`; beyond it the networks extrapolate.
    pub fn log_hazard(&self, t: f64, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        match &self.nets {
            Networks::Pf { h_net, m_net } => Ok(h_net.eval(&[t / self.tau])? + m_net.eval(z)?),
            Networks::Fn { nu_net } => nu_net.eval(&self.fn_input(t, z)),
        }
    }

    /// `m̂(Z)` of a PF model.
    pub fn covariate_effect(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        match &self.nets {
            Networks::Pf { m_net, .. } => m_net.eval(z),
            Networks::Fn { .. } => Err(NfmError::Config("covariate effect is only defined for the pf scheme".into())),
        }
    }

    fn fn_input(&self, t: f64, z: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(z.len() + 1);
        x.push(t / self.tau);
        x.extend_from_slice(z);
        x
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.covariate_dim {
            return Err(NfmError::Shape(format!("expected {} covariates, got {}", self.covariate_dim, z.len())));
        }
        Ok(())
    }

    /// `∫_a^b exp(ν̂(s, Z)) ds` with the evaluation rule.
    fn intensity_between(&self, a: f64, b: f64, z: &[f64], points: &mut Vec<f64>, weights: &mut Vec<f64>) -> Result<f64> {
        if b <= a {
            return Ok(0.0);
        }
        self.eval_quad.map_into(a, b, points, weights);
        let mut acc = 0.0;
        for (&s, &w) in points.iter().zip(weights.iter()) {
            acc += w * self.log_hazard(s, z)?.exp();
        }
        if !acc.is_finite() {
            return Err(NfmError::NonFinite(format!("integrated intensity on [{a}, {b}] is {acc}")));
        }
        Ok(acc)
    }

    /// `∫_0^t exp(ν̂(s, Z)) ds`.
    pub fn cumulative_intensity(&self, t: f64, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        self.check_time(t)?;
        self.intensity_between(0.0, t, z, &mut Vec::new(), &mut Vec::new())
    }

    /// `Λ̂(t | Z) = G_θ(∫_0^t exp(ν̂))`.
    pub fn cum_hazard(&self, t: f64, z: &[f64]) -> Result<f64> {
        self.frailty.transform(self.cumulative_intensity(t, z)?)
    }

    pub fn survival(&self, t: f64, z: &[f64]) -> Result<f64> {
        Ok((-self.cum_hazard(t, z)?).exp())
    }

    fn check_grid(&self, grid: &[f64]) -> Result<()> {
        if grid.is_empty() {
            return Err(NfmError::Domain("empty time grid".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(NfmError::Domain("time grid must be strictly increasing".into()));
        }
        self.check_time(grid[0])?;
        self.check_time(grid[grid.len() - 1])
    }

    fn curve_from_intensity(&self, grid: &[f64], cumulative: impl Iterator<Item = f64>) -> Result<SurvivalCurve> {
        let mut values = Vec::with_capacity(grid.len());
        let mut prev = 1.0f64;
        for c in cumulative {
            // running minimum absorbs last-ulp wobble in G
            let s = (-self.frailty.transform(c)?).exp().min(prev);
            values.push(s);
            prev = s;
        }
        SurvivalCurve::new(grid.to_vec(), values)
    }

    /// `Ŝ(t | Z)` on an increasing grid inside `[0, τ]`, integrating piecewise
    /// between consecutive grid points.
    pub fn survival_curve(&self, z: &[f64], grid: &[f64]) -> Result<SurvivalCurve> {
        self.check_dim(z)?;
        self.check_grid(grid)?;
        let (mut pts, mut wts) = (Vec::new(), Vec::new());
        let mut cum = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        let mut prev_t = 0.0;
        for &t in grid {
            acc += self.intensity_between(prev_t, t, z, &mut pts, &mut wts)?;
            cum.push(acc);
            prev_t = t;
        }
        self.curve_from_intensity(grid, cum.into_iter())
    }

    /// Curves for many covariate vectors on one grid. The PF scheme integrates
    /// `exp(ĥ)` once and rescales by `exp(m̂(Z))` per subject.
    pub fn survival_curves(&self, zs: &[Vec<f64>], grid: &[f64]) -> Result<Vec<SurvivalCurve>> {
        self.check_grid(grid)?;
        match &self.nets {
            Networks::Pf { h_net, m_net } => {
                let (mut pts, mut wts) = (Vec::new(), Vec::new());
                let mut base = Vec::with_capacity(grid.len());
                let mut acc = 0.0;
                let mut prev_t = 0.0;
                for &t in grid {
                    if t > prev_t {
                        self.eval_quad.map_into(prev_t, t, &mut pts, &mut wts);
                        for (&s, &w) in pts.iter().zip(&wts) {
                            acc += w * h_net.eval(&[s / self.tau])?.exp();
                        }
                    }
                    base.push(acc);
                    prev_t = t;
                }
                zs.iter()
                    .map(|z| {
                        self.check_dim(z)?;
                        let scale = m_net.eval(z)?.exp();
                        self.curve_from_intensity(grid, base.iter().map(|b| b * scale))
                    })
                    .collect()
            }
            Networks::Fn { .. } => zs.iter().map(|z| self.survival_curve(z, grid)).collect(),
        }
    }

    /// The FN model whose ν-net computes `ĥ(t) + m̂(Z)` exactly, built from
    /// block-diagonal copies of the two PF networks (which must have equal depth).
    pub fn to_fn_embedding(&self) -> Result<NfmModel> {
        let (h, m) = match &self.nets {
            Networks::Pf { h_net, m_net } => (h_net, m_net),
            Networks::Fn { .. } => return Ok(self.clone()),
        };
        let (hs, ms) = (h.spec(), m.spec());
        if hs.hidden_widths.len() != ms.hidden_widths.len() {
            return Err(NfmError::Shape("pf networks must have the same depth to embed".into()));
        }
        let widths: Vec<usize> = hs.hidden_widths.iter().zip(&ms.hidden_widths).map(|(a, b)| a + b).collect();
        let spec = MlpSpec::new(1 + ms.input_dim, widths);
        let mut nu = MlpNet::zeros(spec)?;
        let h_sizes = hs.layer_sizes();
        let m_sizes = ms.layer_sizes();
        let last = nu.num_layers() - 1;
        for l in 0..nu.num_layers() {
            let (hi, ho) = (h_sizes[l], h_sizes[l + 1]);
            let (mi, mo) = (m_sizes[l], m_sizes[l + 1]);
            let row_shift = if l == last { 0 } else { ho };
            for r in 0..ho {
                for c in 0..hi {
                    let idx = nu.weight_index(l, r, c);
                    nu.params_mut()[idx] = h.params()[h.weight_index(l, r, c)];
                }
                let b = nu.bias_index(l, r);
                nu.params_mut()[b] += h.params()[h.bias_index(l, r)];
            }
            for r in 0..mo {
                for c in 0..mi {
                    let idx = nu.weight_index(l, r + row_shift, c + hi);
                    nu.params_mut()[idx] = m.params()[m.weight_index(l, r, c)];
                }
                let b = nu.bias_index(l, r + row_shift);
                nu.params_mut()[b] += m.params()[m.bias_index(l, r)];
            }
        }
        let mut out = NfmModel::new_fn(nu, self.frailty, self.tau, self.quad.order())?.with_eval_order(self.eval_quad.order())?;
        out.scaler = self.scaler.clone();
        out.covariate_names = self.covariate_names.clone();
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            frailty: self.frailty,
            tau: self.tau,
            quad_order: self.quad.order(),
            eval_quad_order: self.eval_quad.order(),
            covariate_names: self.covariate_names.clone(),
            scaler: self.scaler.clone(),
            networks: self.nets.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| NfmError::Json { path: "<model>".into(), source: e })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| NfmError::Json { path: "<model>".into(), source: e })?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(NfmError::Config(format!("unsupported model format {} v{}", file.format, file.version)));
        }
        let model = match file.networks {
            Networks::Pf { h_net, m_net } => NfmModel::new_pf(h_net, m_net, file.frailty, file.tau, file.quad_order)?,
            Networks::Fn { nu_net } => NfmModel::new_fn(nu_net, file.frailty, file.tau, file.quad_order)?,
        };
        let mut model = model.with_eval_order(file.eval_quad_order)?;
        model.scaler = file.scaler;
        model.covariate_names = file.covariate_names;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| NfmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NfmError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            NfmError::Json { source, .. } => NfmError::Json { path: path.to_path_buf(), source },
            other => other,
        })
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

const MODEL_FORMAT: &str = "nfm-model";
const MODEL_VERSION: u32 = 1;

/// On-disk model container (JSON).
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    frailty: FrailtySpec,
    tau: f64,
    quad_order: usize,
    eval_quad_order: usize,
    covariate_names: Vec<String>,
    scaler: Option<Scaler>,
    networks: Networks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub hidden_widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub quad_order: usize,
    pub eval_quad_order: usize,
    pub seed: u64,
    pub frailty: FrailtyFamily,
    pub theta_init: f64,
    pub theta_bounds: ThetaBounds,
    pub learn_theta: bool,
    /// Study horizon; defaults to the largest observed time.
    pub tau: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Pf,
            hidden_widths: vec![64],
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            dropout_p: 0.0,
            quad_order: 16,
            eval_quad_order: 64,
            seed: 0,
            frailty: FrailtyFamily::Gamma,
            theta_init: 0.5,
            theta_bounds: ThetaBounds::default(),
            learn_theta: true,
            tau: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NfmError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(NfmError::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(NfmError::Config(format!("invalid hidden widths {:?}", self.hidden_widths)));
        }
        FrailtySpec::new(self.frailty, self.theta_init)?;
        QuadratureRule::new(self.quad_order)?;
        QuadratureRule::new(self.eval_quad_order)?;
        Ok(())
    }

    /// Untrained model for `dim` covariates with horizon `tau`.
    pub fn init_model(&self, dim: usize, tau: f64) -> Result<NfmModel> {
        let theta = self.theta_bounds.project(self.theta_init);
        let frailty = FrailtySpec::new(self.frailty, theta)?;
        let net = |input: usize, stream: u64| {
            MlpNet::init(
                MlpSpec::new(input, self.hidden_widths.clone())
                    .with_dropout(self.dropout_p)
                    .with_seed(derive_seed(self.seed, stream)),
            )
        };
        let model = match self.scheme {
            Scheme::Pf => NfmModel::new_pf(net(1, 1)?, net(dim, 2)?, frailty, tau, self.quad_order)?,
            Scheme::Fn => NfmModel::new_fn(net(dim + 1, 3)?, frailty, tau, self.quad_order)?,
        };
        model.with_eval_order(self.eval_quad_order)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Average of the minibatch objectives seen during the epoch.
    pub mean_batch_oll: f64,
    /// Full-data objective (evaluation mode) after the epoch.
    pub oll: f64,
    pub theta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NfmModel,
    pub trace: Vec<EpochRecord>,
}

/// Minibatch Adam ascent on the observed log-likelihood. Deterministic given
/// `config.seed`: network initialisation, shuffling and dropout each draw from
/// their own seeded stream.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(NfmError::Dataset("cannot train on an empty dataset".into()));
    }
    if dataset.events() == 0 {
        return Err(NfmError::Dataset("all samples are censored".into()));
    }
    let max_time = dataset.max_time();
    let tau = config.tau.unwrap_or(max_time);
    if !(tau > 0.0) || tau < max_time {
        return Err(NfmError::Config(format!("horizon tau = {tau} must be positive and cover the largest time {max_time}")));
    }
    let mut model = config.init_model(dataset.dim(), tau)?;
    model.covariate_names = dataset.covariate_names().to_vec();
    model.scaler = dataset.scaler().cloned();

    let adam = AdamConfig { learning_rate: config.learning_rate, weight_decay: config.weight_decay, ..Default::default() };
    let mut net_states: Vec<AdamState> = model.nets().iter().map(|n| AdamState::for_net(n, adam)).collect();
    let mut theta_state = AdamState::new(1, AdamConfig { weight_decay: 0.0, ..adam });

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 4));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 5));
    let use_dropout = config.dropout_p > 0.0;

    let samples = dataset.samples();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut ws = Workspace::default();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut batch_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let wrap = |e| NfmError::Training { epoch, batch: b, source: Box::new(e) };
            let batch: Vec<&CensoredSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let rng: Option<&mut dyn RngCore> = if use_dropout { Some(&mut dropout_rng) } else { None };
            let grad = model.grad_impl(&batch, &mut ws, rng).map_err(wrap)?;
            for ((net, state), g) in model.nets_mut().into_iter().zip(&mut net_states).zip(&grad.nets) {
                state.step(net.params_mut(), g, true).map_err(wrap)?;
            }
            if config.learn_theta {
                let mut theta = [model.frailty.theta];
                theta_state.step(&mut theta, &[grad.theta], true).map_err(wrap)?;
                model.set_theta(config.theta_bounds.project(theta[0])).map_err(wrap)?;
            }
            batch_sum += grad.value;
            batches += 1;
        }
        let oll = model.oll(samples).map_err(|e| NfmError::Training { epoch, batch: batches, source: Box::new(e) })?;
        trace.push(EpochRecord { epoch, mean_batch_oll: batch_sum / batches as f64, oll, theta: model.frailty.theta });
    }
    Ok(TrainOutcome { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn zero_pf(theta: f64, dim: usize, tau: f64) -> NfmModel {
        let h = MlpNet::zeros(MlpSpec::new(1, vec![4])).unwrap();
        let m = MlpNet::zeros(MlpSpec::new(dim, vec![4])).unwrap();
        NfmModel::new_pf(h, m, FrailtySpec::gamma(theta).unwrap(), tau, 16).unwrap()
    }

    fn zero_fn(theta: f64, dim: usize, tau: f64) -> NfmModel {
        let nu = MlpNet::zeros(MlpSpec::new(dim + 1, vec![4])).unwrap();
        NfmModel::new_fn(nu, FrailtySpec::gamma(theta).unwrap(), tau, 16).unwrap()
    }

    fn sample(t: f64, event: bool, z: &[f64]) -> CensoredSample {
        CensoredSample::new(t, event, z.to_vec())
    }

    fn perturbed(mut net: MlpNet, rng: &mut ChaCha8Rng, amount: f64) -> MlpNet {
        for p in net.params_mut() {
            *p += rng.gen_range(-amount..amount);
        }
        net
    }

    fn random_pf(seed: u64, family: FrailtyFamily, theta: f64, dim: usize, widths: Vec<usize>) -> NfmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = perturbed(MlpNet::init(MlpSpec::new(1, widths.clone()).with_seed(seed)).unwrap(), &mut rng, 0.1);
        let m = perturbed(MlpNet::init(MlpSpec::new(dim, widths).with_seed(seed + 1)).unwrap(), &mut rng, 0.1);
        NfmModel::new_pf(h, m, FrailtySpec::new(family, theta).unwrap(), 3.0, 16).unwrap()
    }

    #[test]
    fn unit_exponential_reductions() {
        for model in [zero_pf(0.0, 2, 5.0), zero_fn(0.0, 2, 5.0)] {
            assert!((model.oll(&[sample(1.0, true, &[0.3, -1.0])]).unwrap() + 1.0).abs() < 1e-12);
            assert!((model.oll(&[sample(0.5, false, &[0.3, -1.0])]).unwrap() + 0.5).abs() < 1e-12);
            assert!((model.oll(&[sample(2.0, false, &[0.0, 0.0])]).unwrap() + 2.0).abs() < 1e-12);
            assert!((model.survival(1.0, &[0.1, 0.2]).unwrap() - (-1.0f64).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn gamma_one_marginal_survival() {
        for model in [zero_pf(1.0, 1, 4.0), zero_fn(1.0, 1, 4.0)] {
            assert!((model.survival(1.0, &[0.7]).unwrap() - 0.5).abs() < 1e-10);
            for t in [0.0, 0.25, 2.0, 4.0] {
                assert!((model.survival(t, &[0.7]).unwrap() - 1.0 / (1.0 + t)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn time_zero_is_certain_survival() {
        let model = random_pf(3, FrailtyFamily::Gamma, 0.8, 2, vec![6]);
        assert_eq!(model.cum_hazard(0.0, &[0.2, 0.4]).unwrap(), 0.0);
        assert_eq!(model.survival(0.0, &[0.2, 0.4]).unwrap(), 1.0);
    }

    #[test]
    fn frailty_off_terms_reduce_to_cox() {
        let model = {
            let mut m = random_pf(5, FrailtyFamily::Gamma, 0.0, 3, vec![8]);
            m.set_theta(0.0).unwrap();
            m
        };
        let s = sample(1.4, true, &[0.1, -0.5, 0.9]);
        let t = model.sample_terms(&s).unwrap();
        assert_eq!(t.log_g, 0.0);
        assert_eq!(t.g_big, t.integral);
        assert!((t.value - (t.nu_at_time - t.integral)).abs() < 1e-14);
    }

    /// High-resolution trapezoid + direct formula, independent of the quadrature rule.
    fn oracle_term(model: &NfmModel, s: &CensoredSample) -> f64 {
        let n = 200_000;
        let h = s.time / n as f64;
        let f = |t: f64| model.log_hazard(t, &s.covariates).unwrap().exp();
        let mut integral = 0.5 * (f(0.0) + f(s.time));
        for i in 1..n {
            integral += f(i as f64 * h);
        }
        integral *= h;
        let fr = model.frailty();
        let nu_t = model.log_hazard(s.time, &s.covariates).unwrap();
        s.delta() * (fr.log_gdx(integral).unwrap() + nu_t) - fr.transform(integral).unwrap()
    }

    /// Single hidden layer with every unit active on `[0, τ]`, so `ν` is affine
    /// in time and the integrand is smooth.
    fn active_net(input: usize, seed: u64) -> MlpNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = MlpNet::zeros(MlpSpec::new(input, vec![5])).unwrap();
        for p in net.params_mut() {
            *p = rng.gen_range(-0.4..0.4);
        }
        for r in 0..5 {
            let b = net.bias_index(0, r);
            net.params_mut()[b] = 2.0;
        }
        net
    }

    #[test]
    fn oll_matches_trapezoid_oracle() {
        let pf = NfmModel::new_pf(active_net(1, 1), active_net(2, 2), FrailtySpec::gamma(0.8).unwrap(), 3.0, 16).unwrap();
        let fnm = NfmModel::new_fn(active_net(3, 3), FrailtySpec::gamma(0.8).unwrap(), 3.0, 16).unwrap();
        for (model, s) in [(&pf, sample(2.2, true, &[0.4, -0.3])), (&fnm, sample(1.7, true, &[0.2, 0.9]))] {
            assert!(model.relu_signature(std::slice::from_ref(&s)).unwrap().iter().all(|&on| on));
            let got = model.oll(std::slice::from_ref(&s)).unwrap();
            let want = oracle_term(model, &s);
            assert!((got - want).abs() / want.abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn theta_gradient_for_censored_unit_sample() {
        let model = zero_fn(1.0, 1, 2.0);
        let g = model.oll_grad(&[sample(1.0, false, &[0.0])]).unwrap();
        let want = std::f64::consts::LN_2 - 0.5;
        assert!((g.theta - want).abs() < 1e-13, "{}", g.theta);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let model = zero_pf(0.5, 1, 1.0);
        assert!(matches!(model.oll_grad(&[]), Err(NfmError::EmptyBatch)));
        assert!(matches!(model.oll(&[]), Err(NfmError::EmptyBatch)));
    }

    #[test]
    fn horizon_and_shape_errors() {
        let model = zero_pf(0.5, 2, 1.0);
        assert!(matches!(model.survival(1.5, &[0.0, 0.0]), Err(NfmError::Horizon { .. })));
        assert!(matches!(model.oll(&[sample(2.0, true, &[0.0, 0.0])]), Err(NfmError::Horizon { .. })));
        assert!(matches!(model.oll(&[sample(0.5, true, &[0.0])]), Err(NfmError::Shape(_))));
        assert!(model.survival_curve(&[0.0, 0.0], &[0.5, 0.2]).is_err());
    }

    #[test]
    fn non_finite_likelihood_reports_sample() {
        let mut model = zero_fn(0.0, 1, 1.0);
        let b = model.nets()[0].bias_index(1, 0);
        model.nets_mut()[0].params_mut()[b] = 800.0;
        let batch = [sample(0.5, true, &[0.0]), sample(0.5, true, &[0.0])];
        match model.oll(&batch) {
            Err(NfmError::NonFinite(msg)) => assert!(msg.contains("sample 0"), "{msg}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    fn fd_check(model: &NfmModel, batch: &[CensoredSample]) -> (f64, usize, usize) {
        let h = 1e-5;
        let grad = model.oll_grad(batch).unwrap();
        let base_sig = model.relu_signature(batch).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let mut worst: f64 = 0.0;
        let (mut checked, mut skipped) = (0, 0);
        for net_idx in 0..grad.nets.len() {
            for p in 0..grad.nets[net_idx].len() {
                let mut plus = model.clone();
                plus.nets_mut()[net_idx].params_mut()[p] += h;
                let mut minus = model.clone();
                minus.nets_mut()[net_idx].params_mut()[p] -= h;
                if plus.relu_signature(batch).unwrap() != base_sig || minus.relu_signature(batch).unwrap() != base_sig {
                    skipped += 1;
                    continue;
                }
                let fd = (plus.oll(batch).unwrap() - minus.oll(batch).unwrap()) / (2.0 * h);
                worst = worst.max(rel(grad.nets[net_idx][p], fd));
                checked += 1;
            }
        }
        let theta = model.frailty().theta;
        let mut plus = model.clone();
        plus.set_theta(theta + h).unwrap();
        let mut minus = model.clone();
        minus.set_theta(theta - h).unwrap();
        let fd = (plus.oll(batch).unwrap() - minus.oll(batch).unwrap()) / (2.0 * h);
        worst = worst.max(rel(grad.theta, fd));
        (worst, checked, skipped)
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, tau: f64) -> Vec<CensoredSample> {
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                sample(rng.gen_range(0.05..tau), rng.gen_bool(0.6), &z)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (i, family) in [FrailtyFamily::Gamma, FrailtyFamily::BoxCox, FrailtyFamily::Igg { alpha: 0.25 }].into_iter().enumerate() {
            let pf = random_pf(30 + i as u64, family, 0.7, 2, vec![6, 5]);
            let batch = random_batch(&mut rng, 5, 2, 3.0);
            let (err, checked, _) = fd_check(&pf, &batch);
            assert!(err < 1e-4 && checked > 0, "pf {family:?}: {err}");

            let fnm = pf.to_fn_embedding().unwrap();
            let (err, checked, _) = fd_check(&fnm, &batch);
            assert!(err < 1e-4 && checked > 0, "fn {family:?}: {err}");
        }
    }

    #[test]
    fn fn_embedding_reproduces_pf() {
        let pf = random_pf(12, FrailtyFamily::Igg { alpha: 0.75 }, 1.3, 3, vec![7, 4]);
        let fnm = pf.to_fn_embedding().unwrap();
        assert_eq!(fnm.scheme(), Scheme::Fn);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = random_batch(&mut rng, 20, 3, 3.0);
        assert!((pf.oll(&batch).unwrap() - fnm.oll(&batch).unwrap()).abs() < 1e-10);
        let grid: Vec<f64> = (0..=30).map(|k| k as f64 * 0.1).collect();
        for s in &batch {
            let a = pf.survival_curve(&s.covariates, &grid).unwrap();
            let b = fnm.survival_curve(&s.covariates, &grid).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        let depth_mismatch = {
            let h = MlpNet::zeros(MlpSpec::new(1, vec![3])).unwrap();
            let m = MlpNet::zeros(MlpSpec::new(2, vec![3, 3])).unwrap();
            NfmModel::new_pf(h, m, FrailtySpec::gamma(1.0).unwrap(), 1.0, 8).unwrap()
        };
        assert!(depth_mismatch.to_fn_embedding().is_err());
    }

    #[test]
    fn curves_are_monotone_and_consistent() {
        let pf = random_pf(17, FrailtyFamily::BoxCox, 0.4, 2, vec![8]);
        let grid: Vec<f64> = (0..=60).map(|k| k as f64 * 0.05).collect();
        let zs = vec![vec![0.3, -0.2], vec![-1.0, 1.0]];
        let batch_curves = pf.survival_curves(&zs, &grid).unwrap();
        for (z, c) in zs.iter().zip(&batch_curves) {
            assert_eq!(c.values[0], 1.0);
            assert!(c.values.windows(2).all(|w| w[1] <= w[0]));
            let single = pf.survival_curve(z, &grid).unwrap();
            for ((a, b), &t) in c.values.iter().zip(&single.values).zip(&grid) {
                assert!((a - b).abs() < 1e-12);
                // one-shot rule over [0, t] versus piecewise: both resolve the ReLU kinks only algebraically
                assert!((a - pf.survival(t, z).unwrap()).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut pf = random_pf(2, FrailtyFamily::Igg { alpha: 0.25 }, 0.9, 2, vec![4]);
        pf.covariate_names = vec!["a".into(), "b".into()];
        let back = NfmModel::from_json(&pf.to_json().unwrap()).unwrap();
        assert_eq!(back, pf);
        assert_eq!(back.to_json().unwrap(), pf.to_json().unwrap());
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let e: f64 = -rng.gen::<f64>().ln() / (0.5 * z).exp();
                let c: f64 = rng.gen_range(0.0..3.0);
                CensoredSample::new(e.min(c), e <= c, vec![z])
            })
            .collect();
        Dataset::new(samples, vec!["z".into()]).unwrap()
    }

    #[test]
    fn training_improves_and_respects_bounds() {
        let ds = toy_dataset(300, 1);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-2,
            hidden_widths: vec![8],
            theta_bounds: ThetaBounds::new(0.0, 0.6).unwrap(),
            ..Default::default()
        };
        for scheme in [Scheme::Pf, Scheme::Fn] {
            let out = train(&ds, &TrainConfig { scheme, ..cfg.clone() }).unwrap();
            assert_eq!(out.trace.len(), 15);
            assert!(out.trace.last().unwrap().oll > out.trace[0].oll);
            assert!(out.trace.iter().all(|r| (0.0..=0.6).contains(&r.theta)));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_dataset(120, 2);
        let cfg = TrainConfig { epochs: 3, batch_size: 16, learning_rate: 1e-3, hidden_widths: vec![6], dropout_p: 0.2, ..Default::default() };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
        let c = train(&ds, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn training_rejects_all_censored() {
        let samples = vec![CensoredSample::new(1.0, false, vec![0.0]); 4];
        let ds = Dataset::new(samples, vec!["z".into()]).unwrap();
        assert!(matches!(train(&ds, &TrainConfig::default()), Err(NfmError::Dataset(_))));
        let cfg = TrainConfig { tau: Some(0.5), ..Default::default() };
        assert!(train(&toy_dataset(10, 0), &cfg).is_err());
    }

    #[test]
    fn all_censored_batches_still_step() {
        let model = random_pf(1, FrailtyFamily::Gamma, 0.5, 1, vec![4]);
        let g = model.oll_grad(&[sample(1.0, false, &[0.2]), sample(0.4, false, &[-0.1])]).unwrap();
        assert!(g.value < 0.0);
        assert!(g.nets.iter().flatten().any(|&x| x != 0.0));
    }
}
