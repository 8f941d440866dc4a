//! Evaluation of predicted survival curves on censored test data:
//! Kaplan-Meier censoring survival, IBS, INBLL and the time-dependent C-index.

use serde::Serialize;

use crate::data::CensoredSample;
use crate::error::{NfmError, Result};

/// Floor applied to the censoring survival before inverse weighting.
pub const CENSORING_FLOOR: f64 = 1e-4;
/// Survival probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` for INBLL.
pub const P_CLAMP: f64 = 1e-7;

/// Right-continuous non-increasing step function starting at 1.
///
/// `values[j]` holds on `[times[j], times[j+1])`; the value before `times[0]` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at `t`, counting a jump located exactly at `t`.
    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 1.0,
            k => self.values[k - 1],
        }
    }

    /// Left limit at `t` (jumps strictly before `t` only).
    pub fn eval_left(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => 1.0,
            k => self.values[k - 1],
        }
    }
}

/// Predicted survival `t ↦ Ŝ(t | Z)` sampled on an increasing grid.
///
/// Between grid points the curve is read as a right-continuous step: the value
/// at `t` is the one at the largest grid time `<= t`, and 1 before the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SurvivalCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(NfmError::Shape(format!("{} times but {} values", times.len(), values.len())));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(NfmError::Domain("survival curve times must be strictly increasing".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(NfmError::Domain("survival values must lie in [0, 1]".into()));
        }
        if values.windows(2).any(|w| w[1] > w[0]) {
            return Err(NfmError::Domain("survival values must be non-increasing".into()));
        }
        Ok(SurvivalCurve { times, values })
    }

    /// Survival that is constant in time.
    pub fn constant(value: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![value])
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 1.0,
            k => self.values[k - 1],
        }
    }
}

/// Kaplan-Meier estimate of the censoring survival `S_C`, treating `δ = 0` as
/// the event. At tied times deaths are taken to occur first, so subjects that
/// die at `t_j` are not at risk of being censored at `t_j`.
pub fn km_censoring(data: &[CensoredSample]) -> Result<StepFunction> {
    if data.is_empty() {
        return Err(NfmError::Dataset("Kaplan-Meier estimate needs at least one sample".into()));
    }
    let mut order: Vec<(f64, bool)> = data.iter().map(|s| (s.time, s.event)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut surv = 1.0;
    let mut at_risk = order.len();
    let mut i = 0;
    while i < order.len() {
        let t = order[i].0;
        let mut deaths = 0;
        let mut censored = 0;
        while i < order.len() && order[i].0 == t {
            if order[i].1 {
                deaths += 1;
            } else {
                censored += 1;
            }
            i += 1;
        }
        if censored > 0 {
            let r = at_risk - deaths;
            surv *= 1.0 - censored as f64 / r as f64;
            times.push(t);
            values.push(surv);
        }
        at_risk -= deaths + censored;
    }
    Ok(StepFunction { times, values })
}

/// Integration window for IBS/INBLL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalWindow {
    pub t1: f64,
    pub t2: f64,
    pub grid_size: usize,
}

impl EvalWindow {
    pub fn new(t1: f64, t2: f64, grid_size: usize) -> Result<Self> {
        if !(t1.is_finite() && t2.is_finite() && t1 < t2) {
            return Err(NfmError::Domain(format!("evaluation window needs t1 < t2, got [{t1}, {t2}]")));
        }
        if grid_size < 2 {
            return Err(NfmError::Domain(format!("grid size must be at least 2, got {grid_size}")));
        }
        Ok(EvalWindow { t1, t2, grid_size })
    }

    /// `[0, q90(test times)]` with 100 grid points.
    pub fn default_for(data: &[CensoredSample]) -> Result<Self> {
        let mut times: Vec<f64> = data.iter().map(|s| s.time).collect();
        if times.is_empty() {
            return Err(NfmError::Dataset("cannot derive an evaluation window from no data".into()));
        }
        times.sort_by(f64::total_cmp);
        Self::new(0.0, quantile_sorted(&times, 0.9), 100)
    }

    /// Equally spaced grid including both end points.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_size - 1;
        (0..=n)
            .map(|k| if k == n { self.t2 } else { self.t1 + (self.t2 - self.t1) * k as f64 / n as f64 })
            .collect()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreLoss {
    Squared,
    Bernoulli,
}

impl ScoreLoss {
    /// `ℓ(y, S)` where `y = 1` means still alive and `S` is the predicted survival.
    fn loss(self, alive: bool, s: f64) -> f64 {
        match self {
            ScoreLoss::Squared => {
                if alive {
                    (1.0 - s) * (1.0 - s)
                } else {
                    s * s
                }
            }
            ScoreLoss::Bernoulli => {
                let p = s.clamp(P_CLAMP, 1.0 - P_CLAMP);
                if alive {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            }
        }
    }
}

/// Inverse-probability-of-censoring weighted score integrated over the window
/// by the trapezoid rule on `window.grid()` and divided by `t2 - t1`.
///
/// A subject with an observed event at `T_i <= t` contributes
/// `ℓ(0, Ŝ_i(t)) / Ŝ_C(T_i-)`; a subject still at risk (`T_i > t`) contributes
/// `ℓ(1, Ŝ_i(t)) / Ŝ_C(t)`; censored subjects with `T_i <= t` contribute nothing.
pub fn integrated_score(
    curves: &[SurvivalCurve],
    data: &[CensoredSample],
    window: EvalWindow,
    loss: ScoreLoss,
) -> Result<f64> {
    if curves.len() != data.len() {
        return Err(NfmError::Shape(format!("{} curves for {} subjects", curves.len(), data.len())));
    }
    let km = km_censoring(data)?;
    let event_weight: Vec<f64> = data.iter().map(|s| 1.0 / km.eval_left(s.time).max(CENSORING_FLOOR)).collect();
    let n = data.len() as f64;
    let grid = window.grid();
    let integrand: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let at_risk_weight = 1.0 / km.eval(t).max(CENSORING_FLOOR);
            let mut acc = 0.0;
            for ((s, c), &ew) in data.iter().zip(curves).zip(&event_weight) {
                if s.time <= t {
                    if s.event {
                        acc += loss.loss(false, c.eval(t)) * ew;
                    }
                } else {
                    acc += loss.loss(true, c.eval(t)) * at_risk_weight;
                }
            }
            acc / n
        })
        .collect();
    let mut area = 0.0;
    for k in 1..grid.len() {
        area += 0.5 * (integrand[k] + integrand[k - 1]) * (grid[k] - grid[k - 1]);
    }
    Ok(area / (window.t2 - window.t1))
}

pub fn ibs(curves: &[SurvivalCurve], data: &[CensoredSample], window: EvalWindow) -> Result<f64> {
    integrated_score(curves, data, window, ScoreLoss::Squared)
}

pub fn inbll(curves: &[SurvivalCurve], data: &[CensoredSample], window: EvalWindow) -> Result<f64> {
    integrated_score(curves, data, window, ScoreLoss::Bernoulli)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Concordance {
    pub value: f64,
    pub n_pairs: usize,
}

/// Time-dependent concordance: over pairs with `T_i < T_j` and `δ_i = 1`, the
/// fraction with `Ŝ_i(T_i) < Ŝ_j(T_i)`, both curves read at the earlier time.
/// Ties in predicted survival count one half.
pub fn c_index(curves: &[SurvivalCurve], data: &[CensoredSample]) -> Result<Concordance> {
    if curves.len() != data.len() {
        return Err(NfmError::Shape(format!("{} curves for {} subjects", curves.len(), data.len())));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data[a].time.total_cmp(&data[b].time));
    let mut concordant = 0.0;
    let mut pairs = 0usize;
    for (pos, &i) in order.iter().enumerate() {
        if !data[i].event {
            continue;
        }
        let ti = data[i].time;
        let si = curves[i].eval(ti);
        let later = order[pos + 1..].iter().skip_while(|&&j| data[j].time <= ti);
        for &j in later {
            let sj = curves[j].eval(ti);
            pairs += 1;
            if si < sj {
                concordant += 1.0;
            } else if si == sj {
                concordant += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(NfmError::NoComparablePairs);
    }
    Ok(Concordance { value: concordant / pairs as f64, n_pairs: pairs })
}

/// All three metrics on one test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub window: EvalWindow,
    pub ibs: f64,
    pub inbll: f64,
    pub cindex: f64,
    pub n_pairs: usize,
    pub n_subjects: usize,
}

impl MetricsReport {
    pub fn compute(
        window_curves: &[SurvivalCurve],
        concordance_curves: &[SurvivalCurve],
        data: &[CensoredSample],
        window: EvalWindow,
    ) -> Result<Self> {
        let conc = c_index(concordance_curves, data)?;
        Ok(MetricsReport {
            window,
            ibs: ibs(window_curves, data, window)?,
            inbll: inbll(window_curves, data, window)?,
            cindex: conc.value,
            n_pairs: conc.n_pairs,
            n_subjects: data.len(),
        })
    }

    /// Line-oriented `key=value` text, one metric per line.
    pub fn to_text(&self) -> String {
        let w = self.window;
        format!(
            "metric=ibs t1={} t2={} n_grid={} value={}\n\
             metric=inbll t1={} t2={} n_grid={} value={}\n\
             metric=cindex n_pairs={} value={}\n",
            w.t1, w.t2, w.grid_size, self.ibs, w.t1, w.t2, w.grid_size, self.inbll, self.n_pairs, self.cindex
        )
    }
}
