use crate::error::{invalid, Error, Result};
use crate::model::{DiffMae, Head};
use crate::numerics::{tag, RngStream, Scalar, Tape, Tensor, Var};
use crate::patching::{per_patch_normalize, PatchGrid, PatchPartition};
use crate::schedule::Schedule;

use super::{
    adamw_step, clip_grad_norm, global_norm, loss_feature, loss_simple, lr_at, AdamState, Checkpoint,
    FeatureExtractor, RandomProjection, Target, TrainConfig,
};

/// Flip an `[H, W, C]` image left to right.
pub(crate) fn hflip<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let (w, c) = (image.shape()[1], image.shape()[2]);
    Tensor::from_fn(image.shape(), |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        image.data()[(y * w + (w - 1 - x)) * c + ch]
    })
}

/// Everything one training step feeds the model, stacked over the batch.
#[derive(Clone, Debug)]
pub struct BatchInputs<T> {
    pub batch: usize,
    /// `[batch * visible, patch_dim]` clean visible patches.
    pub visible: Tensor<T>,
    pub visible_pos: Vec<usize>,
    /// `[batch * masked, patch_dim]` noised masked patches.
    pub noisy: Tensor<T>,
    pub masked_pos: Vec<usize>,
    pub ts: Vec<usize>,
    /// Regression target of the pixel decoder (clean patches or noise).
    pub target: Tensor<T>,
    pub feature_target: Option<Tensor<T>>,
}

impl<T: Scalar> BatchInputs<T> {
    /// Draw partitions, timesteps and noise for each image. `streams[i]`
    /// supplies all randomness for image `i`.
    pub fn draw(
        grid: &PatchGrid,
        images: &[Tensor<T>],
        streams: &[RngStream],
        schedule: &Schedule,
        cfg: &TrainConfig,
        feature: Option<&dyn FeatureExtractor<T>>,
    ) -> Result<Self> {
        if images.is_empty() || images.len() != streams.len() {
            return invalid(format!("{} images with {} streams", images.len(), streams.len()));
        }
        let mut parts = Vec::with_capacity(images.len());
        for (img, rng) in images.iter().zip(streams) {
            let img = if cfg.hflip && rng.derive(&[tag("flip")]).uniform() < 0.5 { hflip(img) } else { img.clone() };
            let partition = cfg.mask.draw(grid, &mut rng.derive(&[tag("mask")]))?;
            let t = schedule.sample_t(&mut rng.derive(&[tag("t")]), cfg.schedule.fixed_t)?;
            let nm = partition.masked.len();
            let eps = rng.derive(&[tag("eps")]).randn(&[nm, grid.patch_dim()]);
            parts.push((grid.patchify(&img)?, partition, t, eps));
        }
        Self::assemble(grid, &parts, schedule, cfg.target, feature)
    }

    /// Stack explicitly chosen `(patches, partition, t, eps)` per sample.
    pub fn assemble(
        grid: &PatchGrid,
        parts: &[(Tensor<T>, PatchPartition, usize, Tensor<T>)],
        schedule: &Schedule,
        target: Target,
        feature: Option<&dyn FeatureExtractor<T>>,
    ) -> Result<Self> {
        if target == Target::PixelPlusFeature && feature.is_none() {
            return invalid("feature target needs a feature extractor");
        }
        if parts.is_empty() {
            return invalid("empty batch");
        }
        let (nv, nm) = (parts[0].1.visible.len(), parts[0].1.masked.len());
        let mut vis = Vec::new();
        let mut noisy = Vec::new();
        let mut tgt = Vec::new();
        let mut feat = Vec::new();
        let mut out = Self {
            batch: parts.len(),
            visible: Tensor::zeros(&[0]),
            visible_pos: Vec::new(),
            noisy: Tensor::zeros(&[0]),
            masked_pos: Vec::new(),
            ts: Vec::new(),
            target: Tensor::zeros(&[0]),
            feature_target: None,
        };
        for (patches, partition, t, eps) in parts {
            if partition.visible.len() != nv || partition.masked.len() != nm || partition.num_patches() != grid.num_patches() {
                return invalid("every sample in a batch needs the same visible/masked counts");
            }
            let raw = patches.gather_rows(&partition.masked)?;
            let x0 = if target.normalized() { per_patch_normalize(&raw).0 } else { raw.clone() };
            vis.push(patches.gather_rows(&partition.visible)?);
            let xt = schedule.q_sample(&x0, *t, eps)?;
            tgt.push(if target.predicts_eps() { eps.clone() } else { x0 });
            noisy.push(xt);
            if let (Target::PixelPlusFeature, Some(f)) = (target, feature) {
                feat.push(f.features(&raw)?);
            }
            out.visible_pos.extend(&partition.visible);
            out.masked_pos.extend(&partition.masked);
            out.ts.push(*t);
        }
        out.visible = Tensor::vstack(&vis)?;
        out.noisy = Tensor::vstack(&noisy)?;
        out.target = Tensor::vstack(&tgt)?;
        if !feat.is_empty() {
            out.feature_target = Some(Tensor::vstack(&feat)?);
        }
        Ok(out)
    }

    /// Training loss on a tape whose parameters are `p`.
    pub fn loss_on(&self, model: &DiffMae<T>, g: &mut Tape<T>, p: &[Var], feature_weight: f64) -> Result<Var> {
        let visible = g.constant(self.visible.clone());
        let trace = model.encode_on(g, p, visible, &self.visible_pos, self.batch)?;
        let noisy = g.constant(self.noisy.clone());
        let pred = model.decode_on(g, p, Head::Pixel, noisy, &self.masked_pos, &self.ts, &trace)?;
        let target = g.constant(self.target.clone());
        let loss = loss_simple(g, pred, target)?;
        match &self.feature_target {
            None => Ok(loss),
            Some(ft) => {
                let fp = model.decode_on(g, p, Head::Feature, noisy, &self.masked_pos, &self.ts, &trace)?;
                let ft = g.constant(ft.clone());
                let lf = loss_feature(g, fp, ft)?;
                let lf = g.scale(lf, T::cast(feature_weight))?;
                g.add(loss, lf)
            }
        }
    }

    pub fn t_mean(&self) -> f64 {
        self.ts.iter().sum::<usize>() as f64 / self.ts.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based index of the update just applied.
    pub step: usize,
    pub loss: f64,
    pub t_mean: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Seeded pre-training loop over an in-memory image set.
pub struct Trainer<T: Scalar> {
    model: DiffMae<T>,
    config: TrainConfig,
    schedule: Schedule,
    adam: AdamState<T>,
    step: usize,
    rng: RngStream,
    feature: Option<RandomProjection<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: DiffMae<T>, config: TrainConfig) -> Result<Self> {
        let adam = AdamState::new(model.params());
        let rng = RngStream::new(config.seed).derive(&[tag("train")]);
        Self::assemble(model, config, adam, 0, rng)
    }

    fn assemble(model: DiffMae<T>, config: TrainConfig, adam: AdamState<T>, step: usize, rng: RngStream) -> Result<Self> {
        config.validate()?;
        let schedule = Schedule::from_config(&config.schedule)?;
        let wants_feature = config.target == Target::PixelPlusFeature;
        let feature = match (wants_feature, model.config().feature_dim) {
            (true, Some(dim)) => Some(RandomProjection::new(model.grid().patch_dim(), dim, config.seed)),
            (true, None) => return invalid("pixel_plus_feature target needs a model with feature_dim set"),
            (false, _) => None,
        };
        Ok(Self { model, config, schedule, adam, step, rng, feature })
    }

    pub fn model(&self) -> &DiffMae<T> {
        &self.model
    }

    pub fn into_model(self) -> DiffMae<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    /// Updates applied so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn feature_extractor(&self) -> Option<&dyn FeatureExtractor<T>> {
        self.feature.as_ref().map(|f| f as &dyn FeatureExtractor<T>)
    }

    /// Dataset indices of the batch for update `step` (1-based): consecutive
    /// slices of a fresh permutation per epoch.
    pub fn batch_indices(&self, step: usize, dataset_len: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (0..b)
            .map(|i| {
                let q = (step - 1) * b + i;
                let epoch = q / dataset_len;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..dataset_len).collect();
                    self.rng.derive(&[tag("epoch"), epoch as u64]).shuffle(&mut perm);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("set above").1[q % dataset_len]
            })
            .collect()
    }

    /// Inputs of update `step` (1-based) without applying it.
    pub fn batch_inputs(&self, step: usize, data: &[Tensor<T>]) -> Result<BatchInputs<T>> {
        if data.is_empty() {
            return invalid("empty training set");
        }
        let idx = self.batch_indices(step, data.len());
        let images: Vec<Tensor<T>> = idx.iter().map(|&i| data[i].clone()).collect();
        let streams: Vec<RngStream> =
            (0..idx.len()).map(|i| self.rng.derive(&[tag("sample"), step as u64, i as u64])).collect();
        BatchInputs::draw(&self.model.grid(), &images, &streams, &self.schedule, &self.config, self.feature_extractor())
    }

    /// Loss of update `step`'s batch under the current parameters.
    pub fn eval_loss(&self, step: usize, data: &[Tensor<T>]) -> Result<f64> {
        let inputs = self.batch_inputs(step, data)?;
        let mut g = Tape::new();
        let p = self.model.params().bind(&mut g, false);
        let loss = inputs.loss_on(&self.model, &mut g, &p, self.config.feature_weight)?;
        Ok(g.value(loss).item().as_f64())
    }

    /// One forward, backward and AdamW update.
    pub fn train_step(&mut self, data: &[Tensor<T>]) -> Result<StepStats> {
        let k = self.step + 1;
        let inputs = self.batch_inputs(k, data)?;
        let mut g = Tape::new();
        let p = self.model.params().bind(&mut g, true);
        let loss = inputs.loss_on(&self.model, &mut g, &p, self.config.feature_weight)?;
        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        g.backward(loss)?;
        let mut grads = self.model.params().grads(&mut g, &p);
        let grad_norm = match self.config.optim.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        let lr = lr_at(k, self.config.steps, &self.config.optim);
        adamw_step(self.model.params_mut(), &grads, &mut self.adam, lr, &self.config.optim, None)?;
        self.step = k;
        Ok(StepStats { step: k, loss: loss_value, t_mean: inputs.t_mean(), lr, grad_norm })
    }

    /// Run until `until` updates have been applied (capped at the configured
    /// total), calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &[Tensor<T>],
        until: usize,
        mut on_step: impl FnMut(&Self, &StepStats) -> Result<()>,
    ) -> Result<()> {
        while self.step < until.min(self.config.steps) {
            let stats = self.train_step(data)?;
            on_step(self, &stats)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.config().clone(),
            train: self.config.clone(),
            params: self.model.params().iter().map(|p| p.value.clone()).collect(),
            names: self.model.params().iter().map(|p| p.name.clone()).collect(),
            adam: self.adam.clone(),
            rng: self.rng.state(),
            step: self.step as u64,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let model = ck.build_model()?;
        if ck.adam.m.len() != model.params().len() || ck.adam.v.len() != model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        Self::assemble(model, ck.train, ck.adam, ck.step as usize, RngStream::from_state(ck.rng))
    }
}
