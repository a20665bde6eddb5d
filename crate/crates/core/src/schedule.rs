//! Variance-preserving noise schedules and the three prediction
//! parameterizations.
//!
//! Index convention: `t = 0` is clean data (`alpha = 1`, `sigma = 0`) and
//! `t = T` is the terminal noise level. All coefficients are computed in
//! double precision; tensor arithmetic happens in the tensor's own precision.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use latseg_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear,
    ScaledLinear,
}

impl fmt::Display for BetaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BetaKind::Linear => "linear",
            BetaKind::ScaledLinear => "scaled_linear",
        })
    }
}

impl FromStr for BetaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BetaKind::Linear),
            "scaled_linear" => Ok(BetaKind::ScaledLinear),
            other => Err(Error::config("schedule.kind", format!("unknown beta schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaScheduleConfig {
    pub kind: BetaKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_steps: usize,
}

impl Default for BetaScheduleConfig {
    fn default() -> Self {
        BetaScheduleConfig { kind: BetaKind::Linear, beta_start: 1e-4, beta_end: 0.02, num_steps: 1000 }
    }
}

impl BetaScheduleConfig {
    pub fn new(kind: BetaKind, beta_start: f64, beta_end: f64, num_steps: usize) -> Self {
        BetaScheduleConfig { kind, beta_start, beta_end, num_steps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return Err(Error::config("schedule.beta_start", format!("{} is outside (0, 1)", self.beta_start)));
        }
        if !(self.beta_end > 0.0 && self.beta_end < 1.0) {
            return Err(Error::config("schedule.beta_end", format!("{} is outside (0, 1)", self.beta_end)));
        }
        if self.beta_start > self.beta_end {
            return Err(Error::config(
                "schedule.beta_end",
                format!("beta_end {} is below beta_start {}", self.beta_end, self.beta_start),
            ));
        }
        if self.num_steps == 0 {
            return Err(Error::config("schedule.num_steps", "must be at least 1"));
        }
        Ok(())
    }

    /// Short label such as `linear 0.0001-0.02`.
    pub fn label(&self) -> String {
        format!("{} {}-{}", self.kind, self.beta_start, self.beta_end)
    }

    /// The five beta schedules compared in the schedule sweep.
    pub fn sweep_grid(num_steps: usize) -> Vec<BetaScheduleConfig> {
        vec![
            BetaScheduleConfig::new(BetaKind::Linear, 0.0001, 0.02, num_steps),
            BetaScheduleConfig::new(BetaKind::Linear, 0.00085, 0.012, num_steps),
            BetaScheduleConfig::new(BetaKind::Linear, 0.0015, 0.0155, num_steps),
            BetaScheduleConfig::new(BetaKind::ScaledLinear, 0.0001, 0.02, num_steps),
            BetaScheduleConfig::new(BetaKind::ScaledLinear, 0.0015, 0.0155, num_steps),
        ]
    }
}

/// Precomputed `alpha_t`, `sigma_t` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: BetaScheduleConfig,
    betas: Vec<f64>,
    log_alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| start + step * i as f64).collect();
    v[n - 1] = end;
    v
}

pub fn build_schedule(config: BetaScheduleConfig) -> Result<NoiseSchedule> {
    config.validate()?;
    let n = config.num_steps;
    let mut betas = match config.kind {
        BetaKind::Linear => linspace(config.beta_start, config.beta_end, n),
        BetaKind::ScaledLinear => {
            linspace(config.beta_start.sqrt(), config.beta_end.sqrt(), n).into_iter().map(|b| b * b).collect()
        }
    };
    // Squaring sqrt(beta) may be off by an ulp; endpoints are pinned.
    betas[0] = config.beta_start;
    if n > 1 {
        betas[n - 1] = config.beta_end;
    }
    let mut log_alpha_bar = Vec::with_capacity(n + 1);
    log_alpha_bar.push(0.0);
    let mut acc = 0.0f64;
    for &b in &betas {
        acc += (-b).ln_1p();
        log_alpha_bar.push(acc);
    }
    let alpha = log_alpha_bar.iter().map(|&l| (0.5 * l).exp()).collect();
    let sigma = log_alpha_bar.iter().map(|&l| (-l.exp_m1()).sqrt()).collect();
    Ok(NoiseSchedule { config, betas, log_alpha_bar, alpha, sigma })
}

impl NoiseSchedule {
    pub fn config(&self) -> &BetaScheduleConfig {
        &self.config
    }

    pub fn num_steps(&self) -> usize {
        self.config.num_steps
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.log_alpha_bar[t].exp()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(Error::Validation(format!("timestep {t} exceeds T = {}", self.num_steps())));
        }
        Ok(())
    }

    /// Three-column CSV `t,alpha,sigma` for `t = 0..=T`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "alpha", "sigma"])?;
        for t in 0..=self.num_steps() {
            out.write_record([t.to_string(), format!("{:.17e}", self.alpha[t]), format!("{:.17e}", self.sigma[t])])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Epsilon,
    V,
    X0,
}

impl Parameterization {
    pub const ALL: [Parameterization; 3] = [Parameterization::Epsilon, Parameterization::V, Parameterization::X0];
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameterization::Epsilon => "epsilon",
            Parameterization::V => "v",
            Parameterization::X0 => "x0",
        })
    }
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" => Ok(Parameterization::Epsilon),
            "v" => Ok(Parameterization::V),
            "x0" => Ok(Parameterization::X0),
            other => Err(Error::config("parameterization", format!("unknown parameterization `{other}`"))),
        }
    }
}

/// `ca·a + cb·b`, evaluated in f64 and rounded once.
fn combine<T: Scalar>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.zip_map(b, |x, y| T::from_f64_lossy(ca * x.as_f64() + cb * y.as_f64()))?)
}

/// `z_t = alpha_t * z + sigma_t * eps`.
pub fn forward_noise<T: Scalar>(z: &Tensor<T>, eps: &Tensor<T>, t: usize, s: &NoiseSchedule) -> Result<Tensor<T>> {
    s.check_timestep(t)?;
    combine(z, s.alpha(t), eps, s.sigma(t))
}

/// `v = alpha_t * eps - sigma_t * z`.
pub fn velocity<T: Scalar>(z: &Tensor<T>, eps: &Tensor<T>, t: usize, s: &NoiseSchedule) -> Result<Tensor<T>> {
    s.check_timestep(t)?;
    combine(eps, s.alpha(t), z, -s.sigma(t))
}

/// Clean-latent estimate from a network prediction and the noisy input.
/// No clamping is applied.
pub fn reconstruct<T: Scalar>(
    pred: &Tensor<T>,
    z_t: &Tensor<T>,
    t: usize,
    p: Parameterization,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_timestep(t)?;
    if pred.shape() != z_t.shape() {
        return Err(Error::Dimension(format!("prediction {:?} vs noisy latent {:?}", pred.shape(), z_t.shape())));
    }
    let (alpha, sigma) = (s.alpha(t), s.sigma(t));
    match p {
        Parameterization::Epsilon => {
            if alpha < 1e-12 {
                return Err(Error::NumericalDomain(format!(
                    "alpha_{t} = {alpha:e} is too small to invert an epsilon prediction"
                )));
            }
            Ok(z_t.zip_map(pred, |zt, e| T::from_f64_lossy((zt.as_f64() - sigma * e.as_f64()) / alpha))?)
        }
        Parameterization::V => combine(z_t, alpha, pred, -sigma),
        Parameterization::X0 => Ok(pred.clone()),
    }
}

/// Regression target for the network under parameterization `p`.
pub fn training_target<T: Scalar>(
    z: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    p: Parameterization,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if z.shape() != eps.shape() {
        return Err(Error::Dimension(format!("latent {:?} vs noise {:?}", z.shape(), eps.shape())));
    }
    match p {
        Parameterization::Epsilon => Ok(eps.clone()),
        Parameterization::V => velocity(z, eps, t, s),
        Parameterization::X0 => Ok(z.clone()),
    }
}

/// `|d z_hat / d pred|`: `sigma/alpha` for epsilon, `sigma` for v, 1 for x0.
pub fn amplification_factor(t: usize, p: Parameterization, s: &NoiseSchedule) -> Result<f64> {
    if t == 0 || t > s.num_steps() {
        return Err(Error::Validation(format!("timestep {t} outside 1..={}", s.num_steps())));
    }
    Ok(match p {
        Parameterization::Epsilon => s.sigma(t) / s.alpha(t),
        Parameterization::V => s.sigma(t),
        Parameterization::X0 => 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        build_schedule(BetaScheduleConfig::default()).unwrap()
    }

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn variance_preserving_and_monotone() {
        for cfg in BetaScheduleConfig::sweep_grid(1000) {
            let s = build_schedule(cfg).unwrap();
            assert_eq!(s.alpha(0), 1.0);
            assert_eq!(s.sigma(0), 0.0);
            for t in 0..=1000 {
                let vp = s.alpha(t).powi(2) + s.sigma(t).powi(2);
                assert!((vp - 1.0).abs() < 1e-10, "t={t}");
                if t > 0 {
                    assert!(s.alpha(t) < s.alpha(t - 1));
                    assert!(s.sigma(t) > s.sigma(t - 1));
                }
            }
        }
    }

    #[test]
    fn endpoints_are_exact_for_both_kinds() {
        for kind in [BetaKind::Linear, BetaKind::ScaledLinear] {
            let s = build_schedule(BetaScheduleConfig::new(kind, 0.0001, 0.02, 1000)).unwrap();
            assert_eq!(s.beta(1), 0.0001);
            assert_eq!(s.beta(1000), 0.02);
        }
    }

    #[test]
    fn terminal_alpha_bar_matches_log_domain_oracle() {
        // Frozen from an independent numpy script: cumsum(log1p(-linspace)).
        let s = default_schedule();
        let want = 4.035_829_765_375_687e-5;
        assert!((s.alpha_bar(1000) - want).abs() / want < 1e-10);
        let want_scaled = 7.334_124_595_808_106e-4;
        let s2 = build_schedule(BetaScheduleConfig::new(BetaKind::ScaledLinear, 0.0001, 0.02, 1000)).unwrap();
        assert!((s2.alpha_bar(1000) - want_scaled).abs() / want_scaled < 1e-10);
    }

    #[test]
    fn rejects_invalid_configs_naming_the_field() {
        let bad = [
            (BetaScheduleConfig::new(BetaKind::Linear, 0.0, 0.02, 10), "schedule.beta_start"),
            (BetaScheduleConfig::new(BetaKind::Linear, 0.01, 1.0, 10), "schedule.beta_end"),
            (BetaScheduleConfig::new(BetaKind::Linear, 0.03, 0.02, 10), "schedule.beta_end"),
            (BetaScheduleConfig::new(BetaKind::Linear, 0.01, 0.02, 0), "schedule.num_steps"),
        ];
        for (cfg, field) in bad {
            match build_schedule(cfg) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn forward_noise_cases() {
        let s = default_schedule();
        let z = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let e = Tensor::from_fn(&[2, 3], |i| (i as f64).cos());
        assert_eq!(forward_noise(&z, &e, 0, &s).unwrap(), z);
        let zero = Tensor::zeros(&[2, 3]);
        let zt = forward_noise(&z, &zero, 400, &s).unwrap();
        for (a, b) in zt.data().iter().zip(z.data()) {
            assert_eq!(*a, s.alpha(400) * b);
        }
        assert!(forward_noise(&z, &Tensor::zeros(&[3, 2]), 1, &s).is_err());
    }

    #[test]
    fn forward_noise_hand_evaluation() {
        // A one-step schedule with beta = 0.64 gives (alpha, sigma) = (0.6, 0.8).
        let s = build_schedule(BetaScheduleConfig::new(BetaKind::Linear, 0.64, 0.64, 1)).unwrap();
        assert!((s.alpha(1) - 0.6).abs() < 1e-14 && (s.sigma(1) - 0.8).abs() < 1e-14);
        let zt = forward_noise(&t1(1.0), &t1(0.5), 1, &s).unwrap();
        assert!((zt.item() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn velocity_special_cases() {
        let s = default_schedule();
        let e = t1(0.7);
        let z = t1(-1.3);
        assert_eq!(velocity(&t1(0.0), &e, 250, &s).unwrap().item(), s.alpha(250) * 0.7);
        assert_eq!(velocity(&z, &t1(0.0), 250, &s).unwrap().item(), -s.sigma(250) * -1.3);
    }

    #[test]
    fn reconstruct_branches() {
        let s = default_schedule();
        let z = t1(0.4);
        let e = t1(-1.1);
        for t in [1, 10, 500, 999, 1000] {
            let zt = forward_noise(&z, &e, t, &s).unwrap();
            for p in Parameterization::ALL {
                let target = training_target(&z, &e, t, p, &s).unwrap();
                let zhat = reconstruct(&target, &zt, t, p, &s).unwrap();
                assert!((zhat.item() - 0.4).abs() < 1e-12, "{p} t={t}: {}", zhat.item());
            }
            let pred = t1(3.3);
            assert_eq!(reconstruct(&pred, &zt, t, Parameterization::X0, &s).unwrap(), pred);
        }
    }

    #[test]
    fn perturbed_epsilon_shifts_by_sigma_over_alpha() {
        let s = default_schedule();
        let (z, e, delta) = (t1(0.25), t1(0.9), 1e-3);
        for t in [1, 300, 1000] {
            let zt = forward_noise(&z, &e, t, &s).unwrap();
            let zhat = reconstruct(&t1(0.9 + delta), &zt, t, Parameterization::Epsilon, &s).unwrap();
            let want = 0.25 - s.sigma(t) / s.alpha(t) * delta;
            assert!((zhat.item() - want).abs() < 1e-9 * (1.0 + s.sigma(t) / s.alpha(t)));
        }
    }

    #[test]
    fn epsilon_reconstruction_refuses_vanishing_alpha() {
        // beta close to 1 for many steps drives alpha below 1e-12.
        let s = build_schedule(BetaScheduleConfig::new(BetaKind::Linear, 0.9, 0.9, 40)).unwrap();
        assert!(s.alpha(40) < 1e-12);
        let x = t1(0.0);
        assert!(matches!(reconstruct(&x, &x, 40, Parameterization::Epsilon, &s), Err(Error::NumericalDomain(_))));
        assert!(reconstruct(&x, &x, 40, Parameterization::V, &s).is_ok());
    }

    #[test]
    fn amplification_ordering_at_terminal_step() {
        let s = default_schedule();
        let eps = amplification_factor(1000, Parameterization::Epsilon, &s).unwrap();
        // sigma_T / alpha_T from the independent log-domain oracle.
        assert!((eps - 157.407_280_810_407_37).abs() < 1e-8);
        let v = amplification_factor(1000, Parameterization::V, &s).unwrap();
        let x0 = amplification_factor(1000, Parameterization::X0, &s).unwrap();
        assert!(eps > 100.0 && eps > v && v <= 1.0 && x0 == 1.0);
        assert!(amplification_factor(0, Parameterization::X0, &s).is_err());
    }

    #[test]
    fn csv_export_has_header_and_t_plus_one_rows() {
        let s = build_schedule(BetaScheduleConfig::new(BetaKind::Linear, 0.001, 0.01, 5)).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,alpha,sigma");
        assert_eq!(lines.len(), 7);
    }
}
