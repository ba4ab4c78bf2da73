//! Optimiser, schedule, training steps and inference requests.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::backbone::{FeatureProvider, ProviderConfig, ProviderKind, ToyBackbone};
use crate::data::{augment, epoch_order, prepare_record, stream_seed, AugmentConfig, Sample, TrainRecord};
use crate::error::{cfg_err, input_err};
use crate::granularity::{blend, candidate_sweep, candidate_suffix, check_zeta, DEFAULT_ZETA};
use crate::losses::{objective, Ablation, LossWeights};
use crate::params::ParamStore;
use crate::stn::{maps_from_tape, BundleVars, EdgeMapSet, Stn, StnConfig};
use crate::{Map, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 penalty added to the gradient before the Adam update.
    pub weight_decay: f64,
    pub epochs: u64,
    /// First epoch (0-based) trained at the decayed rate; `None` means
    /// two thirds of the way through.
    pub decay_epoch: Option<u64>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub zeta: f64,
    pub seed: u64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub ablation: Ablation,
    pub augment: AugmentConfig,
    pub provider: ProviderConfig,
    pub stn: StnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            epochs: 6,
            decay_epoch: None,
            decay_factor: 0.1,
            batch_size: 3,
            weights: LossWeights::default(),
            zeta: DEFAULT_ZETA,
            seed: 0,
            grad_clip: 1.0,
            ablation: Ablation::default(),
            augment: AugmentConfig::default(),
            provider: ProviderConfig::default(),
            stn: StnConfig::base(),
        }
    }
}

fn parse<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| cfg_err!("`{key}`: cannot parse `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(cfg_err!("`{key}`: `{v}` is not a boolean")),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Epoch at which the learning rate drops.
    pub fn milestone(&self) -> u64 {
        self.decay_epoch.unwrap_or((2 * self.epochs).div_ceil(3))
    }

    pub fn learning_rate_at(&self, epoch: u64) -> f64 {
        if epoch >= self.milestone() {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [("learning_rate", self.learning_rate), ("decay_factor", self.decay_factor)];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(cfg_err!("{k} must be positive"));
            }
        }
        let nonneg =
            [("weight_decay", self.weight_decay), ("lambda", self.weights.lambda), ("beta", self.weights.beta), ("grad_clip", self.grad_clip)];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(cfg_err!("{k} must be non-negative"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(cfg_err!("epochs and batch_size must be positive"));
        }
        check_zeta(self.zeta)?;
        self.provider.validate()?;
        self.stn.validate()
    }

    /// Flat `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("epochs", self.epochs.to_string());
        put("decay_epoch", self.decay_epoch.map_or_else(|| "auto".to_string(), |e| e.to_string()));
        put("decay_factor", format!("{:?}", self.decay_factor));
        put("batch_size", self.batch_size.to_string());
        put("lambda", format!("{:?}", self.weights.lambda));
        put("beta", format!("{:?}", self.weights.beta));
        put("zeta", format!("{:?}", self.zeta));
        put("seed", self.seed.to_string());
        put("grad_clip", format!("{:?}", self.grad_clip));
        put("soc_off", self.ablation.soc_off.to_string());
        put("guide_off", self.ablation.guide_off.to_string());
        put("differ_off", self.ablation.differ_off.to_string());
        put("augment.hflip", self.augment.hflip.to_string());
        put("augment.vflip", self.augment.vflip.to_string());
        put("augment.rot90", self.augment.rot90.to_string());
        put("augment.scales", join(&self.augment.scales.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>()));
        put("augment.crop", self.augment.crop.map_or_else(|| "none".to_string(), |(h, w)| format!("{h}x{w}")));
        put("provider.kind", self.provider.kind.as_str().to_string());
        put("provider.grid_side", self.provider.grid_side.to_string());
        put("provider.checkpoint_path", self.provider.checkpoint_path.clone().unwrap_or_default());
        put("provider.seed", self.provider.seed.map_or_else(String::new, |s| s.to_string()));
        put("provider.toy_stride", self.provider.toy_stride.to_string());
        for (k, v) in self.stn.to_pairs() {
            put(&format!("stn.{k}"), v);
        }
        out
    }

    /// Replace the network configuration with a preset: `base`, or `toy`
    /// sized for the current toy provider settings. The network seed is kept.
    pub fn apply_stn_preset(&mut self, name: &str) -> Result<()> {
        let seed = self.stn.seed;
        self.stn = match name {
            "base" => StnConfig::base(),
            "toy" => StnConfig::for_toy(&ToyBackbone::from_config(&self.provider)?, self.provider.grid_side),
            other => return Err(cfg_err!("unknown network preset `{other}`")),
        };
        self.stn.seed = seed;
        Ok(())
    }

    /// Set one `key=value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "decay_epoch" => self.decay_epoch = if v == "auto" { None } else { Some(parse(key, v)?) },
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lambda" => self.weights.lambda = parse(key, v)?,
            "beta" => self.weights.beta = parse(key, v)?,
            "zeta" => self.zeta = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "soc_off" => self.ablation.soc_off = parse_bool(key, v)?,
            "guide_off" => self.ablation.guide_off = parse_bool(key, v)?,
            "differ_off" => self.ablation.differ_off = parse_bool(key, v)?,
            "augment.hflip" => self.augment.hflip = parse_bool(key, v)?,
            "augment.vflip" => self.augment.vflip = parse_bool(key, v)?,
            "augment.rot90" => self.augment.rot90 = parse_bool(key, v)?,
            "augment.scales" => {
                self.augment.scales = v.split(',').map(|s| parse(key, s)).collect::<Result<Vec<f64>>>()?;
            }
            "augment.crop" => {
                self.augment.crop = if v == "none" || v.is_empty() {
                    None
                } else {
                    let (h, w) = v.split_once('x').ok_or_else(|| cfg_err!("`augment.crop` takes HxW"))?;
                    Some((parse(key, h)?, parse(key, w)?))
                }
            }
            "provider.kind" => self.provider.kind = ProviderKind::parse(v)?,
            "provider.grid_side" => self.provider.grid_side = parse(key, v)?,
            "provider.checkpoint_path" => {
                self.provider.checkpoint_path = if v.is_empty() { None } else { Some(v.to_string()) }
            }
            "provider.seed" => self.provider.seed = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "provider.toy_stride" => self.provider.toy_stride = parse(key, v)?,
            "stn.preset" => self.apply_stn_preset(v)?,
            _ => {
                let known = match key.strip_prefix("stn.") {
                    Some(k) => self.stn.set(k, v)?,
                    None => false,
                };
                if !known {
                    return Err(cfg_err!("unknown configuration key `{key}`"));
                }
            }
        }
        Ok(())
    }
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// One update; `grads` is in parameter order.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64, weight_decay: f64) {
        self.step += 1;
        let b1 = 1.0 - crate::math::powi(ADAM_BETA1, self.step);
        let b2 = 1.0 - crate::math::powi(ADAM_BETA2, self.step);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, g) in grads[i].data().iter().enumerate() {
                let g = g + weight_decay * p[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let mh = m[j] / b1;
                let vh = v[j] / b2;
                p[j] -= lr * mh / (crate::math::sqrt(vh) + ADAM_EPS);
            }
        }
    }
}

/// Scale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = crate::math::sqrt(grads.iter().map(Tensor::norm_sq).sum());
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// One per-step log record.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub l_side: f64,
    pub l_differ: f64,
    pub l_guide: f64,
    pub l_total: f64,
    pub lr: f64,
}

/// Loss and parameter gradients of one record.
pub fn record_gradients(
    stn: &Stn,
    rec: &TrainRecord,
    weights: LossWeights,
    ablation: Ablation,
) -> Result<(crate::losses::LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let b = BundleVars::bind(&mut tape, &rec.bundle, false);
    let vars = stn.forward(&mut tape, &b, rec.bundle.frame_side, rec.bundle.source_size)?;
    let maps = maps_from_tape(&tape, &vars.outputs);
    let (breakdown, grads) = objective(&maps, &rec.ladder, &rec.guidance, weights, ablation)?;
    let seeds: Vec<_> = vars
        .outputs
        .iter()
        .zip(grads)
        .filter(|(_, g)| g.data().iter().any(|&v| v != 0.0))
        .map(|(&v, g)| {
            let (h, w) = g.size();
            (v, Tensor::from_vec(&[1, h, w], g.into_vec()).expect("map size"))
        })
        .collect();
    let g = tape.backward(&seeds)?;
    let params = stn.params();
    let out = params
        .iter()
        .map(|(id, _, t)| g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((breakdown, out))
}

/// Network, optimiser state and counters of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub stn: Stn,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: u64,
    /// Optimiser steps taken.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let stn = Stn::new(config.stn.clone())?;
        let adam = AdamState::new(stn.params());
        Ok(Self { config, stn, adam, epoch: 0, step: 0 })
    }

    /// Whether the trained network provides granularity-specific outputs.
    pub fn multi_granularity(&self) -> bool {
        !self.config.ablation.soc_off
    }

    /// One optimiser step on the mean gradient of `records`. On a
    /// non-finite loss or gradient the parameters are left untouched.
    pub fn train_step(&mut self, records: &[TrainRecord]) -> Result<StepLog> {
        if records.is_empty() {
            return Err(input_err!("empty batch"));
        }
        let cfg = &self.config;
        let mut total = crate::losses::LossBreakdown::default();
        let mut grads: Option<Vec<Tensor>> = None;
        for rec in records {
            let (b, g) = record_gradients(&self.stn, rec, cfg.weights, cfg.ablation).map_err(|e| e.context(&rec.id))?;
            total.side += b.side;
            total.differ += b.differ;
            total.guide += b.guide;
            total.total += b.total;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let n = records.len() as f64;
        let log = StepLog {
            step: self.step + 1,
            epoch: self.epoch,
            l_side: total.side / n,
            l_differ: total.differ / n,
            l_guide: total.guide / n,
            l_total: total.total / n,
            lr: cfg.learning_rate_at(self.epoch),
        };
        let mut grads = grads.expect("non-empty batch");
        for g in grads.iter_mut() {
            g.scale(1.0 / n);
        }
        if !log.l_total.is_finite() || !grads.iter().all(Tensor::is_finite) {
            return Err(crate::Error::NonFinite(format!("step {}: loss {}", log.step, log.l_total)));
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        let (lr, wd) = (log.lr, cfg.weight_decay);
        self.adam.update(self.stn.params_mut(), &grads, lr, wd);
        self.step += 1;
        Ok(log)
    }

    /// Records for the samples at `indices` of epoch `self.epoch`.
    pub fn prepare(&self, samples: &[Sample], indices: &[usize], provider: &dyn FeatureProvider) -> Result<Vec<TrainRecord>> {
        indices
            .iter()
            .map(|&i| {
                let s = &samples[i];
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, self.epoch, i as u64));
                let s = augment(s, &self.config.augment, &mut rng).map_err(|e| e.context(&s.id))?;
                prepare_record(&s, provider, self.config.zeta, &mut rng).map_err(|e| e.context(&s.id))
            })
            .collect()
    }

    /// Train one epoch. Every sample gets its own random stream derived
    /// from `(seed, epoch, index)`, so resuming at an epoch boundary
    /// reproduces an uninterrupted run.
    pub fn run_epoch(&mut self, samples: &[Sample], provider: &dyn FeatureProvider) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        self.run_epoch_with(samples, provider, &mut |l| logs.push(*l))?;
        Ok(logs)
    }

    /// [`Trainer::run_epoch`] reporting each step as it completes. On error
    /// the epoch counter is not advanced.
    pub fn run_epoch_with(
        &mut self,
        samples: &[Sample],
        provider: &dyn FeatureProvider,
        on_step: &mut dyn FnMut(&StepLog),
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(input_err!("no training samples"));
        }
        let order = epoch_order(samples.len(), self.config.seed, self.epoch);
        for chunk in order.chunks(self.config.batch_size) {
            let records = self.prepare(samples, chunk, provider)?;
            on_step(&self.train_step(&records)?);
        }
        self.epoch += 1;
        Ok(())
    }
}

/// What `infer` should produce.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InferRequest {
    /// The final output.
    Final,
    /// One blend at granularity α.
    Alpha(f64),
    /// `M` blends at evenly spaced granularities.
    Sweep(usize),
}

/// Named output maps for a request. `multi_granularity` is false for
/// networks trained without side outputs; those only answer `Final`.
pub fn infer_maps(maps: &EdgeMapSet, request: InferRequest, multi_granularity: bool) -> Result<Vec<(String, Map)>> {
    if !multi_granularity && request != InferRequest::Final {
        return Err(input_err!("this network was trained without granularity outputs; only the final map is available"));
    }
    match request {
        InferRequest::Final => Ok(alloc::vec![(String::new(), maps.fused.clone())]),
        InferRequest::Alpha(a) => Ok(alloc::vec![(format!("a{:02}", crate::math::round(a * 10.0) as i64), blend(maps, a)?)]),
        InferRequest::Sweep(m) => {
            Ok(candidate_sweep(maps, m)?.into_iter().enumerate().map(|(k, map)| (candidate_suffix(k), map)).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ToyBackbone;
    use crate::granularity::AnnotationSet;
    use crate::{Image, Mask};
    use alloc::vec;

    fn toy_setup() -> (ToyBackbone, TrainConfig, Vec<Sample>) {
        let toy = ToyBackbone::new(1, 2, 4).unwrap();
        let mut cfg = TrainConfig { provider: ProviderConfig { grid_side: 2, ..ProviderConfig::toy(1) }, ..Default::default() };
        cfg.stn = StnConfig::for_toy(&toy, 2);
        cfg.batch_size = 2;
        cfg.learning_rate = 1e-2;
        let samples = (0..3)
            .map(|i| {
                let g = Map::from_fn(16, 16, |y, x| if x + i > 7 + y / 4 { 0.8 } else { 0.2 });
                let e = Mask::from_fn(16, 16, |y, x| x + i == 8 + y / 4);
                let e2 = Mask::from_fn(16, 16, |y, x| x + i == 8 + y / 4 || y == 3);
                let ann = AnnotationSet::new(vec![e, e2]).unwrap();
                Sample::new(format!("s{i}"), Image::from_gray(&g).unwrap(), ann).unwrap()
            })
            .collect();
        (toy, cfg, samples)
    }

    #[test]
    fn schedule_decays_at_two_thirds() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.milestone(), 4);
        assert_eq!(cfg.learning_rate_at(3), 1e-4);
        assert!((cfg.learning_rate_at(4) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::filled(&[4], 3.0), Tensor::filled(&[1], 4.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - libm::sqrt(52.0)).abs() < 1e-12);
        let after: f64 = g.iter().map(Tensor::norm_sq).sum();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut adam = AdamState::new(&store);
        adam.update(&mut store, &[Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap()], 0.1, 0.0);
        let v = store.get(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.augment.crop = Some((64, 48));
        cfg.decay_epoch = Some(2);
        cfg.ablation.guide_off = true;
        let mut back = TrainConfig { seed: 77, ..Default::default() };
        for (k, v) in cfg.to_pairs() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(back.set("bogus", "1").is_err());
        assert!(back.set("soc_off", "maybe").is_err());
    }

    #[test]
    fn training_reduces_the_loss_and_freezes_the_provider() {
        let (toy, cfg, samples) = toy_setup();
        let digest = toy.state_digest();
        let mut t = Trainer::new(cfg).unwrap();
        let first = t.run_epoch(&samples, &toy).unwrap();
        for _ in 0..15 {
            t.run_epoch(&samples, &toy).unwrap();
        }
        let last = t.run_epoch(&samples, &toy).unwrap();
        let mean = |l: &[StepLog]| l.iter().map(|s| s.l_total).sum::<f64>() / l.len() as f64;
        assert!(mean(&last) < mean(&first), "{} !< {}", mean(&last), mean(&first));
        assert_eq!(toy.state_digest(), digest);
        assert_eq!(t.step, 17 * 2);
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let (toy, cfg, samples) = toy_setup();
        let mut a = Trainer::new(cfg).unwrap();
        let mut trace_a = Vec::new();
        for _ in 0..4 {
            trace_a.extend(a.run_epoch(&samples, &toy).unwrap());
        }
        let mut b = Trainer::new(a.config.clone()).unwrap();
        let mut trace_b = Vec::new();
        for _ in 0..2 {
            trace_b.extend(b.run_epoch(&samples, &toy).unwrap());
        }
        let mut c = Trainer { config: b.config.clone(), stn: b.stn.clone(), adam: b.adam.clone(), epoch: b.epoch, step: b.step };
        for _ in 0..2 {
            trace_b.extend(c.run_epoch(&samples, &toy).unwrap());
        }
        assert_eq!(trace_a, trace_b);
    }

    #[test]
    fn differ_off_equals_zero_lambda() {
        let (toy, mut cfg, samples) = toy_setup();
        cfg.ablation.differ_off = true;
        let mut a = Trainer::new(cfg.clone()).unwrap();
        cfg.ablation.differ_off = false;
        cfg.weights.lambda = 0.0;
        let mut b = Trainer::new(cfg).unwrap();
        for _ in 0..3 {
            assert_eq!(a.run_epoch(&samples, &toy).unwrap(), b.run_epoch(&samples, &toy).unwrap());
        }
    }

    #[test]
    fn infer_requests() {
        let f = |v| Map::filled(2, 2, v);
        let maps = EdgeMapSet { coarse: f(0.1), medium: f(0.5), fine: f(0.9), fused: f(0.3) };
        let out = infer_maps(&maps, InferRequest::Alpha(0.5), true).unwrap();
        assert_eq!(out[0].1, maps.medium);
        let out = infer_maps(&maps, InferRequest::Sweep(11), true).unwrap();
        assert_eq!(out.len(), 11);
        assert_eq!(out[10].0, "a10");
        assert_eq!(infer_maps(&maps, InferRequest::Final, false).unwrap()[0].1, maps.fused);
        assert!(infer_maps(&maps, InferRequest::Alpha(0.2), false).is_err());
        assert!(infer_maps(&maps, InferRequest::Alpha(1.2), true).is_err());
    }
}
