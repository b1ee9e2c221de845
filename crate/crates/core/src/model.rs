//! The two classifiers: per-epoch sleep staging from multichannel PSG and
//! night-level health discrimination from a hypnogram.
//!
//! ```text
//! stage:  x[C×S] → normalize → (conv → relu → pool → dropout)* → ECA
//!         → BiMamba* → mean over time → dropout → linear → 5 logits
//! health: x[6×T] → linear embed, masked → BiMamba* → masked mean
//!         → linear → 2 logits
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bimamba::{BiMambaBlock, BiMambaConfig};
use crate::data::{ChannelNorm, EpochBatch, Hypnogram, StageLabel, DEFAULT_MAX_CYCLES, HEALTH_INPUT_ROWS};
use crate::eca::{Eca, EcaConfig};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::math;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::rng::{derive, seeded, uniform};
use crate::tape::{conv_output_len, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool window (and stride) after the activation; 1 disables it.
    #[serde(default = "no_pool")]
    pub pool: usize,
}

fn no_pool() -> usize {
    1
}

impl ConvLayerSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            pool: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageModelConfig {
    pub channels: usize,
    pub epoch_samples: usize,
    pub n_bimamba: usize,
    pub state_dim: usize,
    pub cnn: Vec<ConvLayerSpec>,
    pub dropout: f64,
    pub eca: bool,
    pub eca_cfg: EcaConfig,
    pub expand: usize,
    pub conv_width: usize,
    pub classes: usize,
}

impl Default for StageModelConfig {
    fn default() -> Self {
        Self {
            channels: 10,
            epoch_samples: 1000,
            n_bimamba: 1,
            state_dim: 16,
            cnn: vec![
                ConvLayerSpec::new(64, 7, 2),
                ConvLayerSpec::new(96, 5, 2),
                ConvLayerSpec::new(128, 3, 2),
            ],
            dropout: 0.2,
            eca: true,
            eca_cfg: EcaConfig::default(),
            expand: 2,
            conv_width: 4,
            classes: StageLabel::COUNT,
        }
    }
}

impl StageModelConfig {
    /// Width and length of the sequence entering the BiMamba stack.
    pub fn feature_shape(&self) -> Result<(usize, usize)> {
        let mut c = self.channels;
        let mut l = self.epoch_samples;
        for (i, layer) in self.cnn.iter().enumerate() {
            if layer.out_channels == 0 || layer.kernel == 0 || layer.stride == 0 || layer.pool == 0 {
                return Err(Error::Config(format!("conv layer {i} has a zero dimension: {layer:?}")));
            }
            l = conv_output_len(l, layer.kernel, layer.stride, 2 * (layer.kernel / 2))
                .ok_or_else(|| Error::Config(format!("conv layer {i}: kernel {} longer than input {l}", layer.kernel)))?;
            if layer.pool > 1 {
                l = conv_output_len(l, layer.pool, layer.pool, 0)
                    .ok_or_else(|| Error::Config(format!("conv layer {i}: pool {} longer than input {l}", layer.pool)))?;
            }
            c = layer.out_channels;
        }
        Ok((c, l))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bimamba < 1 {
            return Err(Error::Config("n_bimamba must be >= 1".into()));
        }
        if self.epoch_samples < 64 {
            return Err(Error::Config(format!(
                "epoch_samples must be >= 64, got {}",
                self.epoch_samples
            )));
        }
        if self.channels == 0 || self.state_dim == 0 || self.classes < 2 {
            return Err(Error::Config(format!(
                "need channels >= 1, state_dim >= 1, classes >= 2; got {}, {}, {}",
                self.channels, self.state_dim, self.classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let (_, l) = self.feature_shape()?;
        let limit = self.epoch_samples.div_ceil(8);
        if l > limit {
            return Err(Error::Config(format!(
                "front end leaves {l} time steps, more than epoch_samples/8 = {limit}"
            )));
        }
        Ok(())
    }

    fn block_config(&self, d_model: usize) -> BiMambaConfig {
        BiMambaConfig {
            expand: self.expand,
            conv_width: self.conv_width,
            ..BiMambaConfig::new(d_model, self.state_dim)
        }
    }
}

/// A model that maps one input tensor to class logits on a tape.
pub trait Classifier: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn classes(&self) -> usize;
    /// Expected shape of one input.
    fn input_shape(&self) -> Vec<usize>;
    /// Logits `[K]` for `x`. Dropout draws from `rng` when the tape is in
    /// training mode.
    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, rng: &mut dyn RngCore) -> Result<Var>;
}

fn check_input(model: &impl Classifier, x: &Tensor) -> Result<()> {
    let want = model.input_shape();
    if x.shape() != want.as_slice() {
        return Err(crate::dim_err!("model expects input {:?}, got {:?}", want, x.shape()));
    }
    Ok(())
}

/// Evaluation-mode logits for one input.
pub fn logits(model: &impl Classifier, x: &Tensor) -> Result<Vec<f64>> {
    check_input(model, x)?;
    let mut tape = Tape::new();
    let vars = model.store().bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut rng = seeded(0);
    let y = model.forward(&mut tape, &vars, xv, &mut rng)?;
    Ok(tape.value(y).data().to_vec())
}

/// Cross-entropy of one labelled input and its parameter gradients, in
/// training mode with dropout seeded by `dropout_seed`.
pub fn loss_and_grad(model: &impl Classifier, x: &Tensor, label: usize, dropout_seed: u64) -> Result<(f64, Gradients)> {
    check_input(model, x)?;
    let mut tape = Tape::training();
    let vars = model.store().bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut rng = seeded(dropout_seed);
    let y = model.forward(&mut tape, &vars, xv, &mut rng)?;
    let loss = tape.softmax_cross_entropy(y, &[label])?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "training loss".into(),
            index: 0,
        });
    }
    tape.backward(loss)?;
    Ok((value, Gradients::from_tape(model.store(), &tape, &vars)))
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities of a logit vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| math::exp(x - mx)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Evaluation-mode logits `[B×K]` for a batch `[B×…]`, computed per sample
/// so rows never influence each other.
pub fn forward_batch(model: &impl Classifier, batch: &Tensor, exec: &impl Executor) -> Result<Tensor> {
    let b = batch.shape().first().copied().unwrap_or(0);
    let rows = exec.map_indexed(b, |i| batch.index_outer(i).and_then(|x| logits(model, &x)));
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Tensor::new(&[b, model.classes()], rows.concat())
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    spec: ConvLayerSpec,
}

/// The per-epoch stage classifier.
#[derive(Clone, Debug)]
pub struct StageModel {
    pub cfg: StageModelConfig,
    store: ParamStore,
    norm_shift: ParamId,
    norm_scale: ParamId,
    convs: Vec<ConvLayer>,
    eca: Option<Eca>,
    blocks: Vec<BiMambaBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| uniform(rng, -bound, bound)).collect())
}

/// Builds a stage model; the same `cfg` and `seed` give identical
/// parameters.
pub fn build_stage_model(cfg: &StageModelConfig, seed: u64) -> Result<StageModel> {
    cfg.validate()?;
    let mut rng = seeded(derive(seed, &[0x57a6e]));
    let mut store = ParamStore::new();
    let norm_shift = store.add_buffer("norm.shift", Tensor::zeros(&[cfg.channels]));
    let norm_scale = store.add_buffer("norm.scale", Tensor::full(&[cfg.channels], 1.0));
    let mut convs = Vec::new();
    let mut cin = cfg.channels;
    for (i, spec) in cfg.cnn.iter().enumerate() {
        let bound = 1.0 / math::sqrt((cin * spec.kernel) as f64);
        let w = store.add(&format!("cnn.{i}.w"), uniform_tensor(&[spec.out_channels, cin, spec.kernel], bound, &mut rng)?);
        let b = store.add(&format!("cnn.{i}.b"), uniform_tensor(&[spec.out_channels], bound, &mut rng)?);
        convs.push(ConvLayer {
            w,
            b,
            spec: spec.clone(),
        });
        cin = spec.out_channels;
    }
    let eca = if cfg.eca {
        // Own stream, so toggling ECA leaves every other initial weight unchanged.
        let mut eca_rng = seeded(derive(seed, &[0x57a6e, 0xeca]));
        Some(Eca::new(&mut store, "eca", cin, &cfg.eca_cfg, &mut eca_rng)?)
    } else {
        None
    };
    let block_cfg = cfg.block_config(cin);
    let blocks = (0..cfg.n_bimamba)
        .map(|i| BiMambaBlock::new(&mut store, &format!("bimamba.{i}"), &block_cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let bound = 1.0 / math::sqrt(cin as f64);
    let head_w = store.add("head.w", uniform_tensor(&[cfg.classes, cin], bound, &mut rng)?);
    let head_b = store.add("head.b", Tensor::zeros(&[cfg.classes]));
    Ok(StageModel {
        cfg: cfg.clone(),
        store,
        norm_shift,
        norm_scale,
        convs,
        eca,
        blocks,
        head_w,
        head_b,
    })
}

impl StageModel {
    /// Stores per-channel input standardization as `(x − mean)/std`.
    pub fn set_normalization(&mut self, norm: &ChannelNorm) -> Result<()> {
        if norm.mean.len() != self.cfg.channels || norm.std.len() != self.cfg.channels {
            return Err(crate::dim_err!(
                "normalization for {} channels, model has {}",
                norm.mean.len(),
                self.cfg.channels
            ));
        }
        let shift = norm.mean.iter().map(|m| -m).collect();
        let scale = norm.std.iter().map(|s| 1.0 / s).collect();
        self.store.set("norm.shift", Tensor::vector(shift))?;
        self.store.set("norm.scale", Tensor::vector(scale))
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Feature sequence `[D×L']` entering the pooling stage.
    pub fn features(&self, tape: &mut Tape, vars: &[Var], x: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let mut h = tape.add_bias(x, vars[self.norm_shift.index()])?;
        h = tape.scale_rows(h, vars[self.norm_scale.index()])?;
        for layer in &self.convs {
            let s = &layer.spec;
            h = tape.conv1d(h, vars[layer.w.index()], Some(vars[layer.b.index()]), s.stride, s.kernel / 2)?;
            h = tape.relu(h);
            if s.pool > 1 {
                h = tape.max_pool1d(h, s.pool, s.pool)?;
            }
            h = tape.dropout(h, self.cfg.dropout, rng)?;
        }
        if let Some(eca) = &self.eca {
            h = eca.forward(tape, vars, h)?;
        }
        for block in &self.blocks {
            h = block.forward(tape, vars, h)?;
        }
        Ok(h)
    }

    /// Evaluation-mode logits `[B×5]` for an epoch batch.
    pub fn forward_stage(&self, batch: &EpochBatch, exec: &impl Executor) -> Result<Tensor> {
        forward_batch(self, &batch.data, exec)
    }
}

impl Classifier for StageModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn classes(&self) -> usize {
        self.cfg.classes
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.cfg.channels, self.cfg.epoch_samples]
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let h = self.features(tape, vars, x, rng)?;
        let d = tape.shape(h)[0];
        let pooled = tape.mean_axis(h, 1)?;
        let pooled = tape.dropout(pooled, self.cfg.dropout, rng)?;
        let pooled = tape.reshape(pooled, &[d, 1])?;
        let y = tape.matmul(vars[self.head_w.index()], pooled)?;
        let y = tape.add_bias(y, vars[self.head_b.index()])?;
        tape.reshape(y, &[self.cfg.classes])
    }
}

/// Argmax stage per epoch across time-ordered batches.
pub fn predict_hypnogram(model: &StageModel, epochs: &[EpochBatch], exec: &impl Executor) -> Result<Hypnogram> {
    let subject: String = epochs
        .iter()
        .find_map(|b| b.subjects.first().cloned())
        .unwrap_or_default();
    let mut stages = Vec::new();
    for batch in epochs {
        let l = model.forward_stage(batch, exec)?;
        let k = model.classes();
        for row in l.data().chunks(k) {
            stages.push(StageLabel::from_index(argmax(row)).expect("five classes"));
        }
    }
    Ok(Hypnogram::new(&subject, stages))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HealthModelConfig {
    pub max_cycles: usize,
    pub d_model: usize,
    pub state_dim: usize,
    pub n_bimamba: usize,
    pub classes: usize,
}

impl Default for HealthModelConfig {
    fn default() -> Self {
        Self {
            max_cycles: DEFAULT_MAX_CYCLES,
            d_model: 8,
            state_dim: 8,
            n_bimamba: 1,
            classes: 2,
        }
    }
}

impl HealthModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_cycles == 0 || self.d_model == 0 || self.state_dim == 0 || self.n_bimamba == 0 || self.classes < 2 {
            return Err(Error::Config(format!("invalid health model config {self:?}")));
        }
        Ok(())
    }
}

/// Night-level classifier over encoded hypnograms `[6×max_cycles]`.
#[derive(Clone, Debug)]
pub struct HealthModel {
    pub cfg: HealthModelConfig,
    store: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    blocks: Vec<BiMambaBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

pub fn build_health_model(cfg: &HealthModelConfig, seed: u64) -> Result<HealthModel> {
    cfg.validate()?;
    let mut rng = seeded(derive(seed, &[0x4ea17]));
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let bound = 1.0 / math::sqrt(HEALTH_INPUT_ROWS as f64);
    let embed_w = store.add("embed.w", uniform_tensor(&[d, HEALTH_INPUT_ROWS], bound, &mut rng)?);
    let embed_b = store.add("embed.b", Tensor::zeros(&[d]));
    let block_cfg = BiMambaConfig::new(d, cfg.state_dim);
    let blocks = (0..cfg.n_bimamba)
        .map(|i| BiMambaBlock::new(&mut store, &format!("bimamba.{i}"), &block_cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let head_w = store.add("head.w", uniform_tensor(&[cfg.classes, d], 1.0 / math::sqrt(d as f64), &mut rng)?);
    let head_b = store.add("head.b", Tensor::zeros(&[cfg.classes]));
    Ok(HealthModel {
        cfg: cfg.clone(),
        store,
        embed_w,
        embed_b,
        blocks,
        head_w,
        head_b,
    })
}

impl HealthModel {
    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }
}

impl Classifier for HealthModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn classes(&self) -> usize {
        self.cfg.classes
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![HEALTH_INPUT_ROWS, self.cfg.max_cycles]
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, _rng: &mut dyn RngCore) -> Result<Var> {
        let t = self.cfg.max_cycles;
        let mask: Vec<f64> = tape.value(x).row(HEALTH_INPUT_ROWS - 1).to_vec();
        let count: f64 = mask.iter().sum();
        let m = tape.constant(Tensor::vector(mask));
        let h = tape.matmul(vars[self.embed_w.index()], x)?;
        let h = tape.add_bias(h, vars[self.embed_b.index()])?;
        let mut h = tape.scale_cols(h, m)?;
        for block in &self.blocks {
            h = block.forward(tape, vars, h)?;
        }
        let h = tape.scale_cols(h, m)?;
        let pooled = tape.sum_axis(h, 1)?;
        let pooled = tape.scale(pooled, if count > 0.0 { 1.0 / count } else { 0.0 });
        let pooled = tape.reshape(pooled, &[self.cfg.d_model, 1])?;
        debug_assert_eq!(tape.shape(x)[1], t);
        let y = tape.matmul(vars[self.head_w.index()], pooled)?;
        let y = tape.add_bias(y, vars[self.head_b.index()])?;
        tape.reshape(y, &[self.cfg.classes])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_health_input;
    use crate::exec::Sequential;
    use crate::rng::normal;

    fn tiny() -> StageModelConfig {
        StageModelConfig {
            channels: 2,
            epoch_samples: 128,
            state_dim: 2,
            cnn: vec![
                ConvLayerSpec::new(4, 5, 2),
                ConvLayerSpec::new(4, 3, 2),
                ConvLayerSpec::new(4, 3, 2),
            ],
            ..StageModelConfig::default()
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut r = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal(&mut r)).collect()).unwrap()
    }

    #[test]
    fn default_parameter_count() {
        let m = build_stage_model(&StageModelConfig::default(), 0).unwrap();
        let n = m.num_parameters();
        assert!((100_000..=1_500_000).contains(&n), "{n}");
        assert_eq!(StageModelConfig::default().feature_shape().unwrap(), (128, 125));
    }

    #[test]
    fn seed_determinism() {
        let a = build_stage_model(&tiny(), 4).unwrap();
        let b = build_stage_model(&tiny(), 4).unwrap();
        assert_eq!(a.store(), b.store());
        let c = build_stage_model(&tiny(), 5).unwrap();
        assert_ne!(a.store(), c.store());
    }

    #[test]
    fn zeros_give_finite_logits() {
        let m = build_stage_model(&tiny(), 1).unwrap();
        let l = logits(&m, &Tensor::zeros(&[2, 128])).unwrap();
        assert_eq!(l.len(), 5);
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(logits(&m, &Tensor::zeros(&[3, 128])).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_bimamba = 0;
        assert!(build_stage_model(&c, 0).is_err());
        let mut c = tiny();
        c.epoch_samples = 32;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.cnn.pop();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn batch_rows_independent() {
        let m = build_stage_model(&tiny(), 2).unwrap();
        let x = randn(&[7, 2, 128], 3);
        let all = forward_batch(&m, &x, &Sequential).unwrap();
        let one = logits(&m, &x.index_outer(4).unwrap()).unwrap();
        assert_eq!(&all.data()[20..25], one.as_slice());
        assert_eq!(all, forward_batch(&m, &x, &Sequential).unwrap());
    }

    #[test]
    fn eca_flag_changes_output() {
        let mut c = tiny();
        let with = build_stage_model(&c, 9).unwrap();
        c.eca = false;
        let without = build_stage_model(&c, 9).unwrap();
        assert!(without.store().by_name("eca.conv_w").is_none());
        let x = randn(&[2, 128], 1);
        assert_ne!(logits(&with, &x).unwrap(), logits(&without, &x).unwrap());
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[1.0; 5]), 0);
    }

    #[test]
    fn health_padding_and_empty() {
        let m = build_health_model(&HealthModelConfig::default(), 3).unwrap();
        let empty = Hypnogram::new("s", vec![]);
        let l = logits(&m, &encode_health_input(&empty, 850)).unwrap();
        assert_eq!(l, m.store().by_name("head.b").unwrap().data());

        let h = Hypnogram::new("s", vec![StageLabel::W, StageLabel::N2, StageLabel::N3, StageLabel::Rem]);
        let x = encode_health_input(&h, 850);
        let mut y = x.clone();
        // Put junk into the padded stage rows; the mask row stays 0 there.
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let (r, c) = (i / 850, i % 850);
            if r < 5 && c >= 4 {
                *v = ((i * 7919) % 13) as f64 / 13.0;
            }
        }
        assert_eq!(logits(&m, &x).unwrap(), logits(&m, &y).unwrap());
    }
}
