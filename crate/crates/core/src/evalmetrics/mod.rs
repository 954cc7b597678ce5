//! Masked-region reconstruction metrics and the fine-tuning harness.

mod dataset;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{DiffMae, ModelConfig};
use crate::numerics::{tag, RngStream, Scalar, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore};
use crate::patching::{PatchGrid, PatchPartition};
use crate::training::{adamw_step, lr_at, AdamState, Checkpoint, OptimConfig};

pub use dataset::{textured_shape, textured_shapes, LabeledSet, SHAPE_CLASSES};

/// Peak-to-peak range of pixels in `[-1, 1]`.
pub const PSNR_PEAK: f64 = 2.0;

/// Standard deviation of the classifier's linear weights at init.
pub const HEAD_INIT_STD: f64 = 0.03125;

/// Mean squared error over the pixels of the masked patches only.
pub fn masked_mse<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, grid: &PatchGrid, partition: &PatchPartition) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return invalid(format!("image shapes differ: {:?} vs {:?}", pred.shape(), truth.shape()));
    }
    if partition.masked.is_empty() {
        return invalid("masked metrics need at least one masked patch");
    }
    let p = grid.patchify(pred)?.gather_rows(&partition.masked)?;
    let t = grid.patchify(truth)?.gather_rows(&partition.masked)?;
    let sq: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(sq / p.numel() as f64)
}

/// `10 log10(peak^2 / mse)`; infinite for a perfect match.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
    }
}

pub fn masked_psnr<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, grid: &PatchGrid, partition: &PatchPartition) -> Result<f64> {
    masked_mse(pred, truth, grid, partition).map(psnr_from_mse)
}

/// Named scalar results, printed as `key=value` lines and saved as JSON.
/// Non-finite values print as `inf`/`nan` and serialize as `null`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.values.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn kv_lines(&self) -> Vec<String> {
        self.values.iter().map(|(k, v)| format!("{k}={v}")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Number::from_f64(*v).map_or(serde_json::Value::Null, serde_json::Value::Number)))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// Pooled features, layer norm, then a linear map to class logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T> {
    params: ParamStore<T>,
    norm_g: ParamId,
    norm_b: ParamId,
    weight: ParamId,
    bias: ParamId,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(width: usize, classes: usize, rng: &mut RngStream) -> Self {
        let mut params = ParamStore::new();
        let norm_g = params.push_const("head.norm.gamma", &[width], 1.0);
        let norm_b = params.push_const("head.norm.beta", &[width], 0.0);
        let w = Tensor::from_fn(&[width, classes], |_| T::cast(rng.normal() * HEAD_INIT_STD));
        let weight = params.push("head.linear.weight", w, true);
        let bias = params.push_const("head.linear.bias", &[classes], 0.0);
        Self { params, norm_g, norm_b, weight, bias }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn weight(&self) -> &Tensor<T> {
        self.params.get(self.weight)
    }

    fn logits_on(&self, g: &mut Tape<T>, p: &[Var], features: Var) -> Result<Var> {
        let h = g.layer_norm(features, p[self.norm_g.0], p[self.norm_b.0])?;
        g.linear(h, p[self.weight.0], p[self.bias.0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Per-block learning-rate factor, applied multiplicatively from the
    /// head down to the patch embedding.
    pub layer_decay: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 32, seed: 0, optim: OptimConfig::finetune(), layer_decay: 0.75 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    /// Held-out accuracy before the first update.
    pub initial_accuracy: f64,
    pub accuracy: f64,
    pub final_loss: f64,
}

/// Learning-rate factor of every model parameter: `decay^(L + 1 - group)`
/// for encoder parameters, 0 for the (unused) decoders.
pub fn layer_scales<T: Scalar>(model: &DiffMae<T>, decay: f64) -> Vec<f64> {
    let top = model.config().enc_depth + 1;
    model
        .params()
        .iter()
        .map(|p| if p.name.starts_with("encoder.") { decay.powi((top - model.layer_group(&p.name)) as i32) } else { 0.0 })
        .collect()
}

fn same_encoder(a: &ModelConfig, b: &ModelConfig) -> bool {
    (a.image_h, a.image_w, a.channels, a.patch_size, a.enc_depth, a.enc_width, a.enc_heads, a.mlp_ratio)
        == (b.image_h, b.image_w, b.channels, b.patch_size, b.enc_depth, b.enc_width, b.enc_heads, b.mlp_ratio)
}

/// Encoder plus classification head over all patches.
pub struct Classifier<T: Scalar> {
    pub model: DiffMae<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Scalar> Classifier<T> {
    /// Random encoder, or the encoder of `pretrained` when given.
    pub fn new(config: &ModelConfig, pretrained: Option<&Checkpoint<T>>, classes: usize, seed: u64) -> Result<Self> {
        let root = RngStream::new(seed).derive(&[tag("finetune")]);
        let mut model = DiffMae::init(config.clone(), &mut root.derive(&[tag("encoder")]))?;
        if let Some(ck) = pretrained {
            if !same_encoder(&ck.model, config) {
                return invalid("pretrained encoder config does not match the fine-tune model");
            }
            let source = ck.build_model()?;
            let enc = model.params().iter().filter(|p| p.name.starts_with("encoder.")).count();
            let copied = model.params_mut().load_matching(source.params());
            if copied < enc {
                return invalid(format!("only {copied} of {enc} encoder tensors found in the checkpoint"));
            }
        }
        let head = ClassifierHead::new(config.enc_width, classes, &mut root.derive(&[tag("head")]));
        Ok(Self { model, head })
    }

    fn logits_on(&self, g: &mut Tape<T>, pm: &[Var], ph: &[Var], images: &[&Tensor<T>]) -> Result<Var> {
        let grid = self.model.grid();
        let patches: Vec<Tensor<T>> = images.iter().map(|im| grid.patchify(im)).collect::<Result<_>>()?;
        let x = g.constant(Tensor::vstack(&patches)?);
        let feats = self.model.pooled_features_on(g, pm, x, images.len())?;
        self.head.logits_on(g, ph, feats)
    }

    pub fn predict(&self, images: &[Tensor<T>]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Tape::new();
            let pm = self.model.params().bind(&mut g, false);
            let ph = self.head.params().bind(&mut g, false);
            let refs: Vec<&Tensor<T>> = chunk.iter().collect();
            let logits = self.logits_on(&mut g, &pm, &ph, &refs)?;
            let l = g.value(logits);
            out.extend((0..l.rows()).map(|r| {
                let row = l.row(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            }));
        }
        Ok(out)
    }

    pub fn accuracy(&self, set: &LabeledSet<T>) -> Result<f64> {
        if set.is_empty() {
            return invalid("empty evaluation set");
        }
        let pred = self.predict(&set.images)?;
        Ok(pred.iter().zip(&set.labels).filter(|(a, b)| a == b).count() as f64 / set.len() as f64)
    }
}

/// Train encoder and head end to end on `train`, report accuracy on `test`.
pub fn finetune<T: Scalar>(
    config: &ModelConfig,
    pretrained: Option<&Checkpoint<T>>,
    train: &LabeledSet<T>,
    test: &LabeledSet<T>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    if train.is_empty() || cfg.steps == 0 || cfg.batch_size == 0 {
        return invalid("fine-tuning needs data, steps and a batch size");
    }
    if !(cfg.layer_decay > 0.0 && cfg.layer_decay <= 1.0) {
        return invalid(format!("layer_decay must be in (0, 1], got {}", cfg.layer_decay));
    }
    cfg.optim.validate()?;
    let classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1).max(2);
    let mut clf = Classifier::new(config, pretrained, classes, cfg.seed)?;
    let initial_accuracy = clf.accuracy(test)?;
    let scales = layer_scales(&clf.model, cfg.layer_decay);
    let mut adam_m = AdamState::new(clf.model.params());
    let mut adam_h = AdamState::new(clf.head.params());
    let order = RngStream::new(cfg.seed).derive(&[tag("finetune-order")]);
    let n = train.len();
    let mut final_loss = f64::NAN;
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|i| {
                let q = (step - 1) * cfg.batch_size + i;
                let mut perm: Vec<usize> = (0..n).collect();
                order.derive(&[(q / n) as u64]).shuffle(&mut perm);
                perm[q % n]
            })
            .collect();
        let images: Vec<&Tensor<T>> = idx.iter().map(|&i| &train.images[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let mut g = Tape::new();
        let pm = clf.model.params().bind(&mut g, true);
        let ph = clf.head.params().bind(&mut g, true);
        let logits = clf.logits_on(&mut g, &pm, &ph, &images)?;
        let loss = g.cross_entropy(logits, &labels)?;
        final_loss = g.value(loss).item().as_f64();
        g.backward(loss)?;
        let gm = clf.model.params().grads(&mut g, &pm);
        let gh = clf.head.params().grads(&mut g, &ph);
        let lr = lr_at(step, cfg.steps, &cfg.optim);
        adamw_step(clf.model.params_mut(), &gm, &mut adam_m, lr, &cfg.optim, Some(&scales))?;
        adamw_step(&mut clf.head.params, &gh, &mut adam_h, lr, &cfg.optim, None)?;
    }
    Ok(FinetuneReport { initial_accuracy, accuracy: clf.accuracy(test)?, final_loss })
}
