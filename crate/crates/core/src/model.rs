//! The convolutional-recurrent anchor detector and transfer-learning surgery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{
    BatchNorm2d, BiGru, Checkpoint, Conv2d, Mode, Padding2d, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::rng::Rng;

/// Parameter-name prefixes of the layers rebuilt by [`DetectionModel::replace_input_layers`].
pub const INPUT_LAYER_PREFIXES: [&str; 2] = ["mix.", "conv1."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input channels `C`.
    pub channels: usize,
    /// Segment length `T` in samples.
    pub segment_samples: usize,
    /// Base feature maps `f0`.
    pub f0: usize,
    /// Temporal kernel size `c`.
    pub kernel: usize,
    /// Temporal stride `s`.
    pub stride: usize,
    pub k_max: usize,
    /// Event classes `K`.
    pub classes: usize,
    /// Default windows per anchor position `N_d`.
    pub windows_per_anchor: usize,
    /// Decimated steps averaged into one anchor position.
    pub anchor_pool: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 5,
            segment_samples: 15360,
            f0: 4,
            kernel: 3,
            stride: 2,
            k_max: 6,
            classes: 1,
            windows_per_anchor: 1,
            anchor_pool: 15,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("channels", self.channels),
            ("segment_samples", self.segment_samples),
            ("f0", self.f0),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("k_max", self.k_max),
            ("classes", self.classes),
            ("windows_per_anchor", self.windows_per_anchor),
            ("anchor_pool", self.anchor_pool),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.kernel < self.stride {
            return Err(Error::Config(format!(
                "model.kernel ({}) must be at least model.stride ({})",
                self.kernel, self.stride
            )));
        }
        let decimation = self
            .stride
            .checked_pow(self.k_max as u32)
            .ok_or_else(|| Error::Config("model.stride^k_max overflows".into()))?;
        if !self.segment_samples.is_multiple_of(decimation) {
            return Err(Error::Config(format!(
                "model.segment_samples ({}) must be divisible by stride^k_max ({decimation})",
                self.segment_samples
            )));
        }
        if !self.decimated_len().is_multiple_of(self.anchor_pool) {
            return Err(Error::Config(format!(
                "decimated length {} must be divisible by model.anchor_pool ({})",
                self.decimated_len(),
                self.anchor_pool
            )));
        }
        Ok(())
    }

    /// `T' = T / s^k_max`
    pub fn decimated_len(&self) -> usize {
        self.segment_samples / self.stride.pow(self.k_max as u32)
    }

    /// `f' = f0 * 2^k_max`
    pub fn final_features(&self) -> usize {
        self.f0 << self.k_max
    }

    /// `T'' = T' / anchor_pool`
    pub fn anchor_positions(&self) -> usize {
        self.decimated_len() / self.anchor_pool
    }

    pub fn n_anchors(&self) -> usize {
        self.anchor_positions() * self.windows_per_anchor
    }

    /// Feature maps after block `k` (1-based).
    pub fn block_features(&self, k: usize) -> usize {
        self.f0 << k
    }

    /// Scalar parameter count of the mixing layer and the first conv block.
    pub fn input_layer_census(&self) -> usize {
        let c = self.channels;
        let f1 = self.block_features(1);
        (c * c + c) + f1 * c * self.kernel + 2 * f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainablePolicy {
    All,
    InputLayersOnly,
}

/// Tape handles to the two heads: `p` is `[N, A, K+1]`, `y` is `[N, A, 2]`,
/// anchor index `a = t * N_d + d`.
#[derive(Debug, Clone, Copy)]
pub struct OutputVars {
    pub p: Var,
    pub y: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput {
    pub p: Tensor,
    pub y: Tensor,
}

impl NetworkOutput {
    pub fn batch(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn n_anchors(&self) -> usize {
        self.p.shape()[1]
    }

    /// Probability of event class 1 (arousal) for anchor `a` of item `b`.
    pub fn arousal_prob(&self, b: usize, a: usize) -> f64 {
        self.p.at(&[b, a, 1])
    }

    pub fn offsets(&self, b: usize, a: usize) -> [f64; 2] {
        [self.y.at(&[b, a, 0]), self.y.at(&[b, a, 1])]
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct DetectionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Id of the checkpoint this model's weights were transplanted from.
    pub source_checkpoint: Option<String>,
    mix: Conv2d,
    blocks: Vec<Block>,
    rec: BiGru,
    clf: Conv2d,
    loc: Conv2d,
}

fn is_input_layer(name: &str) -> bool {
    INPUT_LAYER_PREFIXES.iter().any(|p| name.starts_with(p))
}

impl DetectionModel {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let c = config.channels;
        let mix = Conv2d::new(&mut store, &mut rng, "mix", 1, c, (c, 1), (1, 1), Padding2d::NONE, true)?;
        let pad_total = config.kernel - config.stride;
        let pad = Padding2d::width(pad_total / 2, pad_total - pad_total / 2);
        let mut blocks = Vec::with_capacity(config.k_max);
        let mut cin = c;
        for k in 1..=config.k_max {
            let cout = config.block_features(k);
            let name = format!("conv{k}");
            let conv = Conv2d::new(
                &mut store,
                &mut rng,
                &name,
                cin,
                cout,
                (1, config.kernel),
                (1, config.stride),
                pad,
                false,
            )?;
            let bn = BatchNorm2d::new(&mut store, &format!("{name}.bn"), cout)?;
            blocks.push(Block { conv, bn });
            cin = cout;
        }
        let fp = config.final_features();
        let rec = BiGru::new(&mut store, &mut rng, "rec", fp, fp)?;
        let nd = config.windows_per_anchor;
        let clf = Conv2d::new(
            &mut store,
            &mut rng,
            "clf",
            fp,
            (config.classes + 1) * nd,
            (2, 1),
            (1, 1),
            Padding2d::NONE,
            true,
        )?;
        let loc = Conv2d::new(&mut store, &mut rng, "loc", fp, 2 * nd, (2, 1), (1, 1), Padding2d::NONE, true)?;
        Ok(Self {
            config,
            store,
            source_checkpoint: None,
            mix,
            blocks,
            rec,
            clf,
            loc,
        })
    }

    /// Runs the network on `x: [N, 1, C, T]`. Batch norm layers use batch
    /// statistics in training mode unless their affine parameters are frozen.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<OutputVars> {
        let cfg = &self.config;
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != 1 || xs[2] != cfg.channels || xs[3] != cfg.segment_samples {
            return Err(Error::Shape(format!(
                "model expects input [N, 1, {}, {}], got {xs:?}",
                cfg.channels, cfg.segment_samples
            )));
        }
        let n = xs[0];
        let mut h = self.mix.forward(tape, &self.store, x)?;
        h = tape.relu(h);
        for block in &self.blocks {
            h = block.conv.forward(tape, &self.store, h)?;
            let bn_mode = if self.store.get(block.bn.gamma).frozen { Mode::Eval } else { mode };
            h = block.bn.forward(tape, &mut self.store, h, bn_mode)?;
            h = tape.relu(h);
        }
        let (fp, tp) = (cfg.final_features(), cfg.decimated_len());
        let seq = tape.reshape(h, &[n, fp, tp])?;
        let r = self.rec.forward(tape, &self.store, seq)?;
        let pooled = tape.avgpool1d(r, cfg.anchor_pool, cfg.anchor_pool)?;
        let (nd, k1, tpp) = (cfg.windows_per_anchor, cfg.classes + 1, cfg.anchor_positions());

        let logits = self.clf.forward(tape, &self.store, pooled)?;
        let logits = tape.reshape(logits, &[n, nd, k1, tpp])?;
        let p = tape.softmax(logits, 2)?;
        let p = tape.permute(p, &[0, 3, 1, 2])?;
        let p = tape.reshape(p, &[n, tpp * nd, k1])?;

        let y = self.loc.forward(tape, &self.store, pooled)?;
        let y = tape.reshape(y, &[n, nd, 2, tpp])?;
        let y = tape.permute(y, &[0, 3, 1, 2])?;
        let y = tape.reshape(y, &[n, tpp * nd, 2])?;
        Ok(OutputVars { p, y })
    }

    /// Inference with running batch-norm statistics.
    pub fn predict(&mut self, x: Tensor) -> Result<NetworkOutput> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(NetworkOutput {
            p: tape.value(out.p).clone(),
            y: tape.value(out.y).clone(),
        })
    }

    /// Returns a model for `new_channels` inputs whose mixing layer and first
    /// conv block (including its batch-norm statistics) are freshly
    /// initialized from `seed`; every other tensor is copied unchanged.
    pub fn replace_input_layers(&self, new_channels: usize, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            channels: new_channels,
            ..self.config.clone()
        };
        let mut out = Self::build(config, seed)?;
        for p in self.store.params() {
            if is_input_layer(&p.name) {
                continue;
            }
            let id = out.store.id(&p.name).expect("same architecture");
            let dst = out.store.get_mut(id);
            dst.value = p.value.clone();
            dst.frozen = p.frozen;
        }
        for b in self.store.buffers() {
            if is_input_layer(&b.name) {
                continue;
            }
            let id = out.store.buffer_id(&b.name).expect("same architecture");
            out.store.buffer_mut(id).value = b.value.clone();
        }
        out.source_checkpoint = self.source_checkpoint.clone();
        Ok(out)
    }

    pub fn set_trainable(&mut self, policy: TrainablePolicy) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let frozen = match policy {
                TrainablePolicy::All => false,
                TrainablePolicy::InputLayersOnly => !is_input_layer(&self.store.get(id).name),
            };
            self.store.set_frozen(id, frozen);
        }
    }

    pub fn is_input_layer(name: &str) -> bool {
        is_input_layer(name)
    }

    /// Snapshot with the config, provenance and any extra metadata.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "source_checkpoint": self.source_checkpoint,
            "extra": extra,
        });
        Checkpoint {
            store: self.store.clone(),
            meta,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ck.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Validation("checkpoint has no model config".into()))?,
        )?;
        let mut model = Self::build(config, 0)?;
        let expected = model.store.params().len() + model.store.buffers().len();
        let found = ck.store.params().len() + ck.store.buffers().len();
        if expected != found {
            return Err(Error::Validation(format!(
                "checkpoint holds {found} tensors, architecture needs {expected}"
            )));
        }
        for p in ck.store.params() {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Validation(format!("unexpected parameter `{}`", p.name)))?;
            let dst = model.store.get_mut(id);
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Validation(format!("shape mismatch for `{}`", p.name)));
            }
            dst.value = p.value.clone();
            dst.frozen = p.frozen;
        }
        for b in ck.store.buffers() {
            let id = model
                .store
                .buffer_id(&b.name)
                .ok_or_else(|| Error::Validation(format!("unexpected buffer `{}`", b.name)))?;
            let dst = model.store.buffer_mut(id);
            if dst.value.shape() != b.value.shape() {
                return Err(Error::Validation(format!("shape mismatch for `{}`", b.name)));
            }
            dst.value = b.value.clone();
        }
        model.source_checkpoint = ck
            .meta
            .get("source_checkpoint")
            .and_then(|v| v.as_str())
            .map(str::to_string);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{Adam, OptimizerConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 2,
            segment_samples: 64,
            f0: 2,
            kernel: 3,
            stride: 2,
            k_max: 2,
            classes: 1,
            windows_per_anchor: 1,
            anchor_pool: 2,
        }
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn default_shape_algebra() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.decimated_len(), 240);
        assert_eq!(cfg.final_features(), 256);
        assert_eq!(cfg.anchor_positions(), 16);
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig {
            segment_samples: 15361,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            anchor_pool: 7,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            kernel: 1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let cfg = tiny();
        let mut m = DetectionModel::build(cfg.clone(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(noise(&[3, 1, 2, 64], 9));
        let out = m.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(out.p).shape(), &[3, 8, 2]);
        assert_eq!(tape.value(out.y).shape(), &[3, 8, 2]);
        for row in tape.value(out.p).data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_input_shape() {
        let mut m = DetectionModel::build(tiny(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 64]));
        assert!(matches!(m.forward(&mut tape, x, Mode::Train), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_heads_give_uniform_probabilities() {
        let mut m = DetectionModel::build(tiny(), 4).unwrap();
        for name in ["clf.weight", "clf.bias"] {
            let id = m.store.id(name).unwrap();
            m.store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 2, 64]));
        let out = m.forward(&mut tape, x, Mode::Train).unwrap();
        assert!(tape.value(out.p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn surgery_preserves_downstream_tensors() {
        let src = DetectionModel::build(tiny(), 1).unwrap();
        let dst = src.replace_input_layers(1, 77).unwrap();
        assert_eq!(dst.config.channels, 1);
        for p in src.store.params() {
            if DetectionModel::is_input_layer(&p.name) {
                continue;
            }
            let q = dst.store.get(dst.store.id(&p.name).unwrap());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.value), bits(&q.value), "{}", p.name);
        }
        let mix = dst.store.get(dst.store.id("mix.weight").unwrap());
        assert_eq!(mix.value.shape(), &[1, 1, 1, 1]);
        let conv1 = dst.store.get(dst.store.id("conv1.weight").unwrap());
        assert_eq!(conv1.value.shape(), &[4, 1, 1, 3]);

        let mut dst = dst;
        let mut tape = Tape::new();
        let x = tape.constant(noise(&[2, 1, 1, 64], 3));
        let out = dst.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(out.p).shape(), &[2, 8, 2]);
    }

    #[test]
    fn self_replacement_reinitializes_inputs_only() {
        let src = DetectionModel::build(tiny(), 1).unwrap();
        let dst = src.replace_input_layers(2, 99).unwrap();
        let name = |m: &DetectionModel, n: &str| m.store.get(m.store.id(n).unwrap()).value.clone();
        assert_ne!(name(&src, "mix.weight"), name(&dst, "mix.weight"));
        assert_eq!(name(&src, "rec.fwd.w_hh"), name(&dst, "rec.fwd.w_hh"));
    }

    #[test]
    fn trainable_census() {
        let mut m = DetectionModel::build(tiny(), 1).unwrap().replace_input_layers(1, 2).unwrap();
        m.set_trainable(TrainablePolicy::InputLayersOnly);
        // mix: 1x1x1x1 weight + 1 bias; conv1: 4x1x1x3; bn: 2x4
        assert_eq!(m.store.trainable_count(), 2 + 12 + 8);
        assert_eq!(m.store.trainable_count(), m.config.input_layer_census());
        m.set_trainable(TrainablePolicy::All);
        assert!(m.store.params().iter().all(|p| !p.frozen));
    }

    #[test]
    fn frozen_body_unchanged_after_step() {
        let mut m = DetectionModel::build(tiny(), 1).unwrap();
        m.set_trainable(TrainablePolicy::InputLayersOnly);
        // Seed running statistics of the frozen blocks.
        let mut warm = DetectionModel::build(tiny(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(noise(&[2, 1, 2, 64], 5));
        warm.forward(&mut tape, x, Mode::Train).unwrap();
        m.store = {
            let mut s = warm.store.clone();
            for (dst, src) in s.params_mut().iter_mut().zip(m.store.params()) {
                dst.frozen = src.frozen;
            }
            s
        };
        let before = m.store.clone();
        let mut tape = Tape::new();
        let x = tape.constant(noise(&[2, 1, 2, 64], 6));
        let out = m.forward(&mut tape, x, Mode::Train).unwrap();
        let s = tape.sum(out.y);
        tape.backward(s, &mut m.store).unwrap();
        Adam::new(OptimizerConfig::default()).unwrap().step(&mut m.store, 1).unwrap();
        for (a, b) in before.params().iter().zip(m.store.params()) {
            if DetectionModel::is_input_layer(&a.name) {
                assert_ne!(a.value, b.value, "{}", a.name);
            } else {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
        for (a, b) in before.buffers().iter().zip(m.store.buffers()) {
            if !DetectionModel::is_input_layer(&a.name) {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = DetectionModel::build(tiny(), 8).unwrap();
        m.source_checkpoint = Some("abc".into());
        let ck = m.to_checkpoint(serde_json::json!({"tau": 0.5}));
        let back = DetectionModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.config, m.config);
        assert_eq!(back.source_checkpoint.as_deref(), Some("abc"));
    }
}
