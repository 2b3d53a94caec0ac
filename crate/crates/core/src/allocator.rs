//! Per-layer cache budgets.
//!
//! A strategy produces fractions `alpha_l` of each layer's prompt cache to
//! keep, with `Σ alpha_l = L·ρ` so the overall retention is `ρ`:
//!
//! * `Meda`: softmax of the layers' cross-modal entropies scaled by `L·ρ`,
//!   so diffuse (high-entropy) layers keep more tokens than focused ones.
//! * `Uniform`: `alpha_l = ρ` everywhere.
//! * `Pyramid`: a linear ramp from `1.5ρ` at the first layer to `0.5ρ` at
//!   the last, rescaled to the same total.
//!
//! Fractions above 1 are clamped and their excess handed to the unclamped
//! layers in proportion to their weights. Integer budgets are rounded per
//! layer and then corrected by largest remainder so the token total equals
//! `round(ρ · Σ full_len)`. Each budget is split into a recent window and a
//! top-scored part by `recent_ratio` (3:1 by default).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyProfile;
use crate::error::{contract_err, shape_err, Error, Result};

/// Smallest starting fraction for the last layer of a pyramid.
pub const PYRAMID_MIN_ALPHA: f64 = 1e-3;

pub const DEFAULT_RECENT_RATIO: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Meda,
    Uniform,
    Pyramid,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Meda, Strategy::Uniform, Strategy::Pyramid];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Meda => "meda",
            Strategy::Uniform => "uniform",
            Strategy::Pyramid => "pyramid",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "meda" => Ok(Strategy::Meda),
            "uniform" => Ok(Strategy::Uniform),
            "pyramid" => Ok(Strategy::Pyramid),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressionConfig {
    /// Fraction of the prompt cache kept across all layers, in (0, 1].
    pub rho: f64,
    /// Share of each layer budget given to the recent window, in (0, 1).
    pub recent_ratio: f64,
    pub strategy: Strategy,
    /// Merge dropped tokens into their nearest kept token instead of evicting them.
    pub merge_enabled: bool,
    /// Lift every text token's score by the maximum score before selection.
    pub text_boost_enabled: bool,
    /// Restrict cross-modal attention to earlier positions when profiling.
    pub causal_cross_attention: bool,
    /// Whether recent-window tokens may absorb merged tokens.
    pub merge_into_recent: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            recent_ratio: DEFAULT_RECENT_RATIO,
            strategy: Strategy::Meda,
            merge_enabled: true,
            text_boost_enabled: true,
            causal_cross_attention: false,
            merge_into_recent: true,
        }
    }
}

impl CompressionConfig {
    pub fn with_rho(rho: f64) -> Self {
        Self { rho, ..Self::default() }
    }

    /// Uniform allocation, no text boost, eviction: an H2O-style baseline.
    pub fn uniform_eviction(rho: f64) -> Self {
        Self {
            rho,
            strategy: Strategy::Uniform,
            merge_enabled: false,
            text_boost_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.recent_ratio > 0.0 && self.recent_ratio < 1.0) {
            return Err(Error::Config(format!(
                "recent_ratio must lie in (0, 1), got {}",
                self.recent_ratio
            )));
        }
        Ok(())
    }
}

/// Budget of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub alpha: f64,
    /// Tokens kept, `recent + important`.
    pub budget: usize,
    pub recent: usize,
    pub important: usize,
    pub full_len: usize,
}

impl LayerBudget {
    /// Splits `budget` into a recent window and a top-scored part.
    pub fn from_budget(alpha: f64, budget: usize, full_len: usize, recent_ratio: f64) -> Self {
        let mut recent = round_half_up(recent_ratio * budget as f64).min(budget);
        if budget >= 2 && recent == 0 {
            recent = 1;
        }
        Self {
            alpha,
            budget,
            recent,
            important: budget - recent,
            full_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    layers: Vec<LayerBudget>,
}

#[derive(Serialize)]
struct PlanRow {
    layer: usize,
    alpha: f64,
    budget: usize,
    recent: usize,
    important: usize,
}

impl AllocationPlan {
    pub fn from_layers(layers: Vec<LayerBudget>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerBudget] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerBudget {
        &self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.alpha).collect()
    }

    pub fn budgets(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.budget).collect()
    }

    pub fn total_budget(&self) -> usize {
        self.layers.iter().map(|l| l.budget).sum()
    }

    pub fn total_full_len(&self) -> usize {
        self.layers.iter().map(|l| l.full_len).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for (layer, b) in self.layers.iter().enumerate() {
            out.serialize(PlanRow {
                layer,
                alpha: b.alpha,
                budget: b.budget,
                recent: b.recent,
                important: b.important,
            })?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Numerically stable softmax over layers.
pub fn layer_softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Scales positive `weights` so they sum to `total`, capping each share at 1
/// and handing the excess to the uncapped entries in proportion to their
/// weights until no share exceeds 1. Requires `total <= weights.len()`.
pub fn scale_with_clamp(weights: &[f64], total: f64) -> Vec<f64> {
    let n = weights.len();
    let mut alpha = vec![0.0; n];
    let mut capped = vec![false; n];
    // each pass caps at least one more entry or finishes
    for _ in 0..=n {
        let remaining = total - capped.iter().filter(|&&c| c).count() as f64;
        let open: Vec<usize> = (0..n).filter(|&i| !capped[i]).collect();
        if open.is_empty() {
            break;
        }
        let wsum: f64 = open.iter().map(|&i| weights[i]).sum();
        let share = |i: usize| {
            if wsum > 0.0 {
                remaining * weights[i] / wsum
            } else {
                remaining / open.len() as f64
            }
        };
        let over: Vec<usize> = open.iter().copied().filter(|&i| share(i) > 1.0).collect();
        if over.is_empty() {
            for &i in &open {
                alpha[i] = share(i);
            }
            break;
        }
        for i in over {
            capped[i] = true;
            alpha[i] = 1.0;
        }
    }
    alpha
}

/// Per-layer integer budgets: round half up, floor at one token (taking the
/// deficit from the largest budget), then move single tokens by largest
/// remainder until the total is `round(ρ · Σ full_len)`.
fn integer_budgets(alpha: &[f64], full_len: &[usize], rho: f64) -> Vec<usize> {
    let total_full: usize = full_len.iter().sum();
    let target = round_half_up(rho * total_full as f64).clamp(full_len.len(), total_full);
    let raw: Vec<f64> = alpha.iter().zip(full_len).map(|(a, &n)| a * n as f64).collect();
    let mut s: Vec<usize> = raw
        .iter()
        .zip(full_len)
        .map(|(&r, &n)| round_half_up(r).min(n))
        .collect();

    for l in 0..s.len() {
        if s[l] == 0 {
            s[l] = 1;
            let donor = (0..s.len())
                .filter(|&j| s[j] > 1)
                .max_by(|&a, &b| s[a].cmp(&s[b]).then(b.cmp(&a)));
            if let Some(d) = donor {
                s[d] -= 1;
            }
        }
    }

    loop {
        let current: usize = s.iter().sum();
        if current == target {
            break;
        }
        let mut order: Vec<usize> = (0..s.len()).collect();
        // remainder: how far the rounded budget sits below its exact share
        let remainder = |l: usize, s: &[usize]| raw[l] - s[l] as f64;
        let mut changed = false;
        if current < target {
            order.sort_by(|&a, &b| remainder(b, &s).total_cmp(&remainder(a, &s)).then(a.cmp(&b)));
            let mut need = target - current;
            for l in order {
                if need == 0 {
                    break;
                }
                if s[l] < full_len[l] {
                    s[l] += 1;
                    need -= 1;
                    changed = true;
                }
            }
        } else {
            order.sort_by(|&a, &b| remainder(a, &s).total_cmp(&remainder(b, &s)).then(a.cmp(&b)));
            let mut excess = current - target;
            for l in order {
                if excess == 0 {
                    break;
                }
                if s[l] > 1 {
                    s[l] -= 1;
                    excess -= 1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    s
}

fn check_inputs(cfg: &CompressionConfig, full_len: &[usize]) -> Result<()> {
    cfg.validate()?;
    if full_len.is_empty() {
        return contract_err("allocation needs at least one layer");
    }
    if full_len.contains(&0) {
        return contract_err("every layer needs a non-empty prompt cache");
    }
    Ok(())
}

fn finish(alpha: Vec<f64>, cfg: &CompressionConfig, full_len: &[usize]) -> AllocationPlan {
    let budgets = integer_budgets(&alpha, full_len, cfg.rho);
    AllocationPlan::from_layers(
        alpha
            .into_iter()
            .zip(budgets)
            .zip(full_len)
            .map(|((a, s), &n)| LayerBudget::from_budget(a, s, n, cfg.recent_ratio))
            .collect(),
    )
}

/// Entropy-softmax allocation.
pub fn allocate_meda(profile: &EntropyProfile, cfg: &CompressionConfig, full_len: &[usize]) -> Result<AllocationPlan> {
    check_inputs(cfg, full_len)?;
    if profile.num_layers() != full_len.len() {
        return shape_err(format!(
            "profile has {} layers, cache has {}",
            profile.num_layers(),
            full_len.len()
        ));
    }
    let weights = layer_softmax(&profile.e_cm());
    let total = full_len.len() as f64 * cfg.rho;
    Ok(finish(scale_with_clamp(&weights, total), cfg, full_len))
}

pub fn allocate_uniform(cfg: &CompressionConfig, full_len: &[usize]) -> Result<AllocationPlan> {
    check_inputs(cfg, full_len)?;
    Ok(finish(vec![cfg.rho; full_len.len()], cfg, full_len))
}

pub fn allocate_pyramid(cfg: &CompressionConfig, full_len: &[usize]) -> Result<AllocationPlan> {
    check_inputs(cfg, full_len)?;
    let layers = full_len.len();
    let top = (1.5 * cfg.rho).min(1.0);
    let bottom = (0.5 * cfg.rho).max(PYRAMID_MIN_ALPHA);
    let ramp: Vec<f64> = (0..layers)
        .map(|l| {
            if layers == 1 {
                top
            } else {
                top + (bottom - top) * l as f64 / (layers - 1) as f64
            }
        })
        .collect();
    let total = layers as f64 * cfg.rho;
    Ok(finish(scale_with_clamp(&ramp, total), cfg, full_len))
}

/// Dispatches on `cfg.strategy`; `Meda` needs a profile.
pub fn allocate(
    profile: Option<&EntropyProfile>,
    cfg: &CompressionConfig,
    full_len: &[usize],
) -> Result<AllocationPlan> {
    match cfg.strategy {
        Strategy::Meda => {
            let profile =
                profile.ok_or_else(|| Error::Contract("entropy-guided allocation needs an entropy profile".into()))?;
            allocate_meda(profile, cfg, full_len)
        }
        Strategy::Uniform => allocate_uniform(cfg, full_len),
        Strategy::Pyramid => allocate_pyramid(cfg, full_len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy as PropStrategy};

    fn meda(e: &[f64], rho: f64, full: &[usize]) -> AllocationPlan {
        allocate_meda(
            &EntropyProfile::from_values(e).unwrap(),
            &CompressionConfig::with_rho(rho),
            full,
        )
        .unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn symmetric_entropies_give_rho() {
        let p = meda(&[1.3; 4], 0.25, &[40; 4]);
        assert_close(&p.alphas(), &[0.25; 4], 1e-12);
        assert_eq!(p.budgets(), vec![10; 4]);
    }

    #[test]
    fn two_layer_softmax_case() {
        let p = meda(&[2f64.ln(), 0.0], 0.3, &[100, 100]);
        assert_close(&p.alphas(), &[0.4, 0.2], 1e-12);
        assert_eq!(p.budgets(), vec![40, 20]);
    }

    #[test]
    fn clamp_redistributes_excess() {
        let raw = layer_softmax(&[9f64.ln(), 0.0]);
        assert_close(&[raw[0] * 1.2, raw[1] * 1.2], &[1.08, 0.12], 1e-12);
        let p = meda(&[9f64.ln(), 0.0], 0.6, &[50, 50]);
        assert_close(&p.alphas(), &[1.0, 0.2], 1e-12);
        assert_eq!(p.budgets(), vec![50, 10]);
    }

    #[test]
    fn uniform_examples() {
        let p = allocate_uniform(&CompressionConfig::with_rho(0.1), &[10, 10, 10]).unwrap();
        assert_eq!(p.alphas(), vec![0.1; 3]);
        let p = allocate_uniform(&CompressionConfig::with_rho(0.2), &[100]).unwrap();
        let l = p.layer(0);
        assert_eq!((l.budget, l.recent, l.important), (20, 15, 5));
        let p = allocate_uniform(&CompressionConfig::with_rho(1.0), &[7, 9]).unwrap();
        assert_eq!(p.budgets(), vec![7, 9]);
    }

    #[test]
    fn pyramid_examples() {
        let p = allocate_pyramid(&CompressionConfig::with_rho(0.4), &[10]).unwrap();
        assert_close(&p.alphas(), &[0.4], 1e-12);
        let p = allocate_pyramid(&CompressionConfig::with_rho(0.2), &[10, 10, 10]).unwrap();
        assert_close(&p.alphas(), &[0.3, 0.2, 0.1], 1e-12);
        let p = allocate_pyramid(&CompressionConfig::with_rho(0.9), &[10; 6]).unwrap();
        assert!(p.alphas().iter().all(|&a| a <= 1.0));
        assert!((p.alphas().iter().sum::<f64>() - 5.4).abs() < 1e-9);
    }

    #[test]
    fn dispatch_and_errors() {
        let cfg = CompressionConfig::with_rho(0.5);
        assert!(allocate(None, &cfg, &[4]).is_err());
        let uni = CompressionConfig {
            strategy: Strategy::Uniform,
            ..cfg
        };
        assert_eq!(allocate(None, &uni, &[4]).unwrap().budgets(), vec![2]);
        assert!(allocate_uniform(&cfg, &[]).is_err());
        assert!(allocate_uniform(&CompressionConfig::with_rho(0.0), &[3]).is_err());
        assert!(allocate_uniform(&CompressionConfig::with_rho(1.5), &[3]).is_err());
        let bad_split = CompressionConfig {
            recent_ratio: 1.0,
            ..cfg
        };
        assert!(bad_split.validate().is_err());
        let profile = EntropyProfile::from_values(&[0.0, 1.0]).unwrap();
        assert!(allocate_meda(&profile, &cfg, &[4]).is_err());
        assert_eq!("Pyramid".parse::<Strategy>().unwrap(), Strategy::Pyramid);
        assert!("snap".parse::<Strategy>().is_err());
    }

    #[test]
    fn budgets_never_drop_to_zero() {
        // one layer takes almost everything; the other still keeps a token
        let p = meda(&[30.0, 0.0], 0.5, &[10, 10]);
        assert!(p.budgets().iter().all(|&s| s >= 1));
        assert_eq!(p.total_budget(), 10);
        let l = LayerBudget::from_budget(0.1, 2, 20, 0.1);
        assert_eq!((l.recent, l.important), (1, 1));
        let l = LayerBudget::from_budget(0.05, 1, 20, 0.75);
        assert_eq!((l.recent, l.important), (1, 0));
    }

    #[test]
    fn plan_csv_schema() {
        let p = meda(&[2f64.ln(), 0.0], 0.3, &[100, 100]);
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("layer,alpha,budget,recent,important"));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "0");
        assert!((first[1].parse::<f64>().unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(&first[2..], &["40", "30", "10"]);
    }

    fn arb_profile() -> impl PropStrategy<Value = (Vec<f64>, f64, usize)> {
        (1usize..=16).prop_flat_map(|l| (prop::collection::vec(0.0f64..8.0, l), 0.01f64..=1.0, 1usize..300))
    }

    proptest! {
        #[test]
        fn budgets_conserve((e, rho, n) in arb_profile(), strategy in 0usize..3) {
            let l = e.len();
            let cfg = CompressionConfig { strategy: Strategy::ALL[strategy], ..CompressionConfig::with_rho(rho) };
            let profile = EntropyProfile::from_values(&e).unwrap();
            let p = allocate(Some(&profile), &cfg, &vec![n; l]).unwrap();
            let sum: f64 = p.alphas().iter().sum();
            prop_assert!((sum - l as f64 * rho).abs() < 1e-9);
            prop_assert!(p.alphas().iter().all(|&a| a > 0.0 && a <= 1.0));
            let target = round_half_up(rho * (n * l) as f64).max(l);
            prop_assert_eq!(p.total_budget(), target);
            for b in p.layers() {
                prop_assert!(b.budget >= 1 && b.budget <= n);
                prop_assert_eq!(b.recent + b.important, b.budget);
            }
        }

        #[test]
        fn higher_entropy_never_gets_less((e, rho, n) in arb_profile()) {
            let p = meda(&e, rho, &vec![n; e.len()]);
            let a = p.alphas();
            for i in 0..e.len() {
                for j in 0..e.len() {
                    if e[i] > e[j] {
                        prop_assert!(a[i] >= a[j]);
                        if a[i] < 1.0 {
                            prop_assert!(a[i] > a[j]);
                        }
                    }
                }
            }
        }

        #[test]
        fn shift_invariant((e, rho, n) in arb_profile(), c in -5.0f64..5.0) {
            let shifted: Vec<f64> = e.iter().map(|x| x + c).collect();
            let a = meda(&e, rho, &vec![n; e.len()]);
            let b = meda(&shifted, rho, &vec![n; e.len()]);
            for (x, y) in a.alphas().iter().zip(b.alphas()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn full_retention_is_identity((e, _rho, n) in arb_profile(), strategy in 0usize..3) {
            let cfg = CompressionConfig { strategy: Strategy::ALL[strategy], ..CompressionConfig::with_rho(1.0) };
            let profile = EntropyProfile::from_values(&e).unwrap();
            let p = allocate(Some(&profile), &cfg, &vec![n; e.len()]).unwrap();
            prop_assert!(p.budgets().iter().all(|&s| s == n));
        }
    }
}
