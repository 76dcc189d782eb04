//! Projection-network training: cross-entropy plus a pull toward the class
//! centers, Adam with a per-epoch cosine schedule, EMA center updates after
//! every optimizer step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::centers::{save_centers, CenterBank, DEFAULT_GAMMA2};
use crate::decompose::{decompose_record, DecompositionConfig, IndVocab, ObjectSample};
use crate::error::{Error, Result};
use crate::net::{self, cosine_lr, AdamConfig, AdamState, NetConfig, ParamGrads, ProjectionParams};
use crate::store::{Split, Store, StoreError};

pub const PARAMS_FILE: &str = "params.tgpn";
pub const CENTERS_FILE: &str = "centers.tgcb";
pub const REPORT_FILE: &str = "train_report.csv";

/// Granularity of the EMA center update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaMode {
    /// One update per class present in the batch, toward the class's batch mean.
    Batch,
    /// One update per sample, in batch order.
    Sample,
}

/// Which projected features feed the EMA update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaSource {
    /// Features from the forward pass that produced the gradients.
    SamePass,
    /// Features recomputed with the parameters after the optimizer step.
    Recompute,
}

impl FromStr for EmaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "batch" => Ok(EmaMode::Batch),
            "sample" => Ok(EmaMode::Sample),
            _ => Err(format!("unknown ema mode {s:?} (batch|sample)")),
        }
    }
}

impl FromStr for EmaSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "same_pass" => Ok(EmaSource::SamePass),
            "recompute" => Ok(EmaSource::Recompute),
            _ => Err(format!("unknown ema source {s:?} (same_pass|recompute)")),
        }
    }
}

impl EmaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EmaMode::Batch => "batch",
            EmaMode::Sample => "sample",
        }
    }
}

impl EmaSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EmaSource::SamePass => "same_pass",
            EmaSource::Recompute => "recompute",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f32,
    pub max_tokens: usize,
    pub gamma2: f64,
    pub seed: u64,
    pub width: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub ema_mode: EmaMode,
    pub ema_source: EmaSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.1,
            lr0: 0.01,
            epochs: 100,
            batch_size: 256,
            tau: 0.5,
            max_tokens: 256,
            gamma2: DEFAULT_GAMMA2,
            seed: 0,
            width: 512,
            n_blocks: 2,
            n_heads: 4,
            mlp_ratio: 2,
            ema_mode: EmaMode::Sample,
            ema_source: EmaSource::SamePass,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Data(format!("invalid train config: {m}")));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma2) {
            return bad("gamma2 outside [0, 1]");
        }
        if !self.tau.is_finite() || self.max_tokens == 0 {
            return bad("tau must be finite and max_tokens positive");
        }
        Ok(())
    }

    pub fn decomposition(&self) -> DecompositionConfig {
        DecompositionConfig { tau: self.tau, max_tokens: self.max_tokens, ..DecompositionConfig::default() }
    }

    pub fn net_config(&self, input_dim: usize, n_classes: usize) -> NetConfig {
        NetConfig {
            input_dim,
            width: self.width,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
            n_classes,
            seed: self.seed,
        }
    }
}

/// Loss value and gradients for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub mse: f64,
    pub grad_logits: Array1<f64>,
    pub grad_projected: Array1<f64>,
}

/// `alpha·CE(logits, label) + beta·mean((projected − center)²)`; the center is
/// a constant.
pub fn combined_loss(
    logits: ArrayView1<'_, f64>,
    label: usize,
    projected: ArrayView1<'_, f64>,
    center: ArrayView1<'_, f64>,
    alpha: f64,
    beta: f64,
) -> LossTerms {
    assert!(label < logits.len(), "label {label} out of range for {} logits", logits.len());
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let shifted = logits.mapv(|v| (v - max).exp());
    let z = shifted.sum();
    let ce = z.ln() - (logits[label] - max);
    let mut grad_logits = shifted.mapv(|v| alpha * v / z);
    grad_logits[label] -= alpha;

    let e = projected.len() as f64;
    let diff = &projected - &center;
    let mse = diff.dot(&diff) / e;
    let grad_projected = diff.mapv(|v| beta * 2.0 * v / e);
    LossTerms { total: alpha * ce + beta * mse, ce, mse, grad_logits, grad_projected }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub n_samples: usize,
    pub skipped: usize,
    pub params_path: Option<PathBuf>,
    pub centers_path: Option<PathBuf>,
}

impl TrainReport {
    /// `epoch,ce,mse,total,lr` per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,ce,mse,total,lr\n");
        for s in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", s.epoch, s.ce, s.mse, s.total, s.lr);
        }
        out
    }
}

/// Model, centers and optimizer state carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ProjectionParams,
    pub bank: CenterBank,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(net: NetConfig, cfg: &TrainConfig) -> Result<TrainState> {
        let params = ProjectionParams::init(net)?;
        // offset so the center draw does not mirror the weight draw
        let bank = CenterBank::init_gaussian(net.n_classes, net.width, cfg.seed ^ 0xC3A5_C85C_97CB_3127, cfg.gamma2);
        let adam = AdamState::new(&params);
        Ok(TrainState { params, bank, adam })
    }
}

/// The sample order of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One pass over `samples`: per batch one Adam step on the batch-averaged
/// gradient, then the EMA center updates.
pub fn train_epoch(
    state: &mut TrainState,
    samples: &[ObjectSample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let k = state.params.config.n_classes;
    if let Some(s) = samples.iter().find(|s| s.label_id < 0 || s.label_id as usize >= k) {
        return Err(Error::Data(format!("sample {} has label {} outside 0..{k}", s.record_id, s.label_id)));
    }
    let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
    let order = epoch_permutation(samples.len(), cfg.seed, epoch);
    let (mut ce_sum, mut mse_sum, mut total_sum) = (0.0, 0.0, 0.0);
    let mut grads = ParamGrads::zeros(state.params.config);

    for batch in order.chunks(cfg.batch_size) {
        grads.scale(0.0);
        let mut projected = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &samples[i];
            let label = s.label_id as usize;
            let out = net::forward(&state.params, s.tokens.view()).map_err(|e| Error::in_record(&s.record_id, e))?;
            let loss = combined_loss(
                out.logits.view(),
                label,
                out.projected.view(),
                state.bank.center(label),
                cfg.alpha,
                cfg.beta,
            );
            ce_sum += loss.ce;
            mse_sum += loss.mse;
            total_sum += loss.total;
            net::backward(&state.params, &out.trace, &loss.grad_projected, &loss.grad_logits, &mut grads)?;
            projected.push((label, out.projected));
        }
        grads.scale(1.0 / batch.len() as f64);
        state.adam.step(&mut state.params, &grads, lr, AdamConfig::default())?;

        if cfg.ema_source == EmaSource::Recompute {
            for (slot, &i) in projected.iter_mut().zip(batch) {
                slot.1 = net::forward(&state.params, samples[i].tokens.view())?.projected;
            }
        }
        match cfg.ema_mode {
            EmaMode::Sample => {
                for (label, p) in &projected {
                    state.bank.ema_update(*label, p.view())?;
                }
            }
            EmaMode::Batch => {
                let width = state.params.config.width;
                let mut sums = vec![(0usize, Array1::<f64>::zeros(width)); k];
                for (label, p) in &projected {
                    sums[*label].0 += 1;
                    sums[*label].1 += p;
                }
                for (class, (count, sum)) in sums.into_iter().enumerate() {
                    if count > 0 {
                        state.bank.ema_update(class, (sum / count as f64).view())?;
                    }
                }
            }
        }
    }
    if !state.params.is_finite() {
        return Err(net::NetError::NonFinite("parameters after update").into());
    }
    let n = samples.len() as f64;
    Ok(EpochStats { epoch, ce: ce_sum / n, mse: mse_sum / n, total: total_sum / n, lr })
}

/// Decomposes every train record; returns the samples and the number skipped.
pub fn decompose_split(
    store: &Store,
    split: Split,
    vocab: &IndVocab,
    cfg: &DecompositionConfig,
) -> Result<(Vec<ObjectSample>, usize)> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for entry in store.manifest.split(split) {
        let record = store.read(entry).map_err(|e| Error::in_record(&entry.id, e))?;
        match decompose_record(&record, vocab, cfg) {
            Some(s) => samples.push(s),
            None => skipped += 1,
        }
    }
    Ok((samples, skipped))
}

/// Trains on pre-decomposed samples. Parameters and centers are rounded to
/// the 32-bit values their checkpoints hold.
pub fn train_samples(samples: &[ObjectSample], n_classes: usize, cfg: &TrainConfig) -> Result<(TrainState, Vec<EpochStats>)> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::Data("no training data after decomposition".into()))?;
    let net = cfg.net_config(first.tokens.ncols(), n_classes);
    let mut state = TrainState::new(net, cfg)?;
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        stats.push(train_epoch(&mut state, samples, cfg, epoch)?);
    }
    state.params.round_to_f32();
    state.bank.round_to_f32();
    Ok((state, stats))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ProjectionParams,
    pub bank: CenterBank,
    pub report: TrainReport,
}

/// Full training run over the store's train split. With `out_dir`, writes the
/// parameter and center checkpoints and the per-epoch report there.
pub fn train(store: &Store, vocab: &IndVocab, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (samples, skipped) = decompose_split(store, Split::Train, vocab, &cfg.decomposition())?;
    if samples.is_empty() {
        return Err(Error::Data(format!("all {skipped} train records decompose to nothing; no training data")));
    }
    let (state, epochs) = train_samples(&samples, vocab.num_classes(), cfg)?;
    let mut report = TrainReport { epochs, n_samples: samples.len(), skipped, ..Default::default() };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
        let params_path = dir.join(PARAMS_FILE);
        let centers_path = dir.join(CENTERS_FILE);
        net::save_params(&state.params, &params_path)?;
        save_centers(&state.bank, &centers_path)?;
        let report_path = dir.join(REPORT_FILE);
        fs::write(&report_path, report.to_csv()).map_err(|e| StoreError::io(&report_path, e))?;
        report.params_path = Some(params_path);
        report.centers_path = Some(centers_path);
    }
    Ok(TrainOutcome { params: state.params, bank: state.bank, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { width: 8, n_heads: 2, epochs: 3, batch_size: 4, seed: 9, ..Default::default() }
    }

    fn toy_samples(n: usize, k: usize) -> Vec<ObjectSample> {
        (0..n)
            .map(|i| {
                let c = i % k;
                let tokens = Array2::from_shape_fn((1 + i % 3, 4), |(t, j)| {
                    (if j == c { 2.0 } else { 0.0 }) + 0.1 * ((i * 7 + t * 3 + j) % 5) as f32
                });
                ObjectSample { record_id: format!("s{i}"), tokens, label_id: c as i32, locations: vec![] }
            })
            .collect()
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let l = combined_loss(array![0.0, 0.0, 0.0, 0.0].view(), 2, array![1.0].view(), array![1.0].view(), 1.0, 0.1);
        assert!((l.ce - 4f64.ln()).abs() < 1e-15);
        assert_eq!(l.mse, 0.0);
        assert_eq!(l.total, l.ce);
        assert!((l.grad_logits.sum()).abs() < 1e-15);
        assert!((l.grad_logits[2] + 0.75).abs() < 1e-15);
    }

    #[test]
    fn loss_decomposes_and_beta_zero_ignores_projection() {
        let logits = array![1.5, -0.3, 0.2];
        let p = array![0.5, -1.0, 2.0, 0.0];
        let mu = array![0.0, 1.0, 1.0, -1.0];
        let l = combined_loss(logits.view(), 0, p.view(), mu.view(), 0.7, 0.3);
        assert!((l.total - (0.7 * l.ce + 0.3 * l.mse)).abs() < 1e-12);
        assert!((l.mse - (0.25 + 4.0 + 1.0 + 1.0) / 4.0).abs() < 1e-15);
        let l0 = combined_loss(logits.view(), 0, p.view(), mu.view(), 0.7, 0.0);
        assert_eq!(l0.total, 0.7 * l0.ce);
        assert!(l0.grad_projected.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_gradients_match_differences() {
        let logits = array![0.4, -1.2, 0.9];
        let p = array![0.3, -0.2];
        let mu = array![-0.1, 0.5];
        let l = combined_loss(logits.view(), 1, p.view(), mu.view(), 1.3, 0.4);
        let h = 1e-6;
        for i in 0..3 {
            let (mut a, mut b) = (logits.clone(), logits.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (combined_loss(a.view(), 1, p.view(), mu.view(), 1.3, 0.4).total
                - combined_loss(b.view(), 1, p.view(), mu.view(), 1.3, 0.4).total)
                / (2.0 * h);
            assert!((fd - l.grad_logits[i]).abs() < 1e-8);
        }
        for i in 0..2 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (combined_loss(logits.view(), 1, a.view(), mu.view(), 1.3, 0.4).total
                - combined_loss(logits.view(), 1, b.view(), mu.view(), 1.3, 0.4).total)
                / (2.0 * h);
            assert!((fd - l.grad_projected[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_weights_leave_params_unchanged() {
        let cfg = TrainConfig { alpha: 0.0, beta: 0.0, ..tiny_cfg() };
        let samples = toy_samples(10, 3);
        let mut state = TrainState::new(cfg.net_config(4, 3), &cfg).unwrap();
        let before = state.params.clone();
        let bank_before = state.bank.clone();
        train_epoch(&mut state, &samples, &cfg, 0).unwrap();
        assert_eq!(state.params, before);
        // centers still move
        assert_ne!(state.bank, bank_before);
    }

    #[test]
    fn single_sample_epoch_reports_initial_loss() {
        let cfg = tiny_cfg();
        let samples = toy_samples(1, 3);
        let mut state = TrainState::new(cfg.net_config(4, 3), &cfg).unwrap();
        let out = net::forward(&state.params, samples[0].tokens.view()).unwrap();
        let expected = combined_loss(out.logits.view(), 0, out.projected.view(), state.bank.center(0), 1.0, 0.1);
        let stats = train_epoch(&mut state, &samples, &cfg, 0).unwrap();
        assert_eq!(stats.total, expected.total);
        assert_eq!(stats.lr, 0.01);
        assert_eq!(state.adam.t, 1);
        assert_eq!(state.bank.update_count(0), 1);
    }

    #[test]
    fn ema_modes_count_updates() {
        let samples = toy_samples(8, 2);
        for (mode, per_class) in [(EmaMode::Batch, 1), (EmaMode::Sample, 4)] {
            let cfg = TrainConfig { ema_mode: mode, epochs: 1, batch_size: 8, ..tiny_cfg() };
            let (state, _) = train_samples(&samples, 2, &cfg).unwrap();
            assert_eq!(state.bank.update_count(0), per_class);
            assert_eq!(state.bank.update_count(1), per_class);
        }
        // without the center pull the source only affects the centers
        let base = TrainConfig { beta: 0.0, ..tiny_cfg() };
        let cfg = TrainConfig { ema_source: EmaSource::Recompute, ..base.clone() };
        let (a, _) = train_samples(&samples, 2, &cfg).unwrap();
        let (b, _) = train_samples(&samples, 2, &base).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.bank, b.bank);
    }

    #[test]
    fn training_is_deterministic() {
        let samples = toy_samples(12, 3);
        let (a, sa) = train_samples(&samples, 3, &tiny_cfg()).unwrap();
        let (b, sb) = train_samples(&samples, 3, &tiny_cfg()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.bank, b.bank);
        assert_eq!(sa, sb);
        let (c, _) = train_samples(&samples, 3, &TrainConfig { seed: 10, ..tiny_cfg() }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn loss_falls_on_separable_toy_data() {
        let samples = toy_samples(24, 3);
        let cfg = TrainConfig { epochs: 20, ..tiny_cfg() };
        let (_, stats) = train_samples(&samples, 3, &cfg).unwrap();
        assert!(stats.last().unwrap().ce < 0.5 * stats[0].ce, "{stats:?}");
        assert!(stats.iter().all(|s| s.ce >= 0.0 && s.mse >= 0.0 && s.total.is_finite()));
    }

    #[test]
    fn permutation_depends_only_on_seed_and_epoch() {
        assert_eq!(epoch_permutation(50, 1, 3), epoch_permutation(50, 1, 3));
        assert_ne!(epoch_permutation(50, 1, 3), epoch_permutation(50, 1, 4));
        let mut p = epoch_permutation(50, 2, 0);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(train_samples(&[], 3, &tiny_cfg()).is_err());
        let mut s = toy_samples(2, 2);
        s[1].label_id = 5;
        assert!(train_samples(&s, 2, &tiny_cfg()).is_err());
        assert!(train_samples(&toy_samples(2, 2), 2, &TrainConfig { epochs: 0, ..tiny_cfg() }).is_err());
        assert!(train_samples(&toy_samples(2, 2), 2, &TrainConfig { beta: -1.0, ..tiny_cfg() }).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let r = TrainReport {
            epochs: vec![EpochStats { epoch: 0, ce: 1.5, mse: 0.25, total: 1.525, lr: 0.01 }],
            ..Default::default()
        };
        assert_eq!(r.to_csv(), "epoch,ce,mse,total,lr\n0,1.5,0.25,1.525,0.01\n");
    }
}
