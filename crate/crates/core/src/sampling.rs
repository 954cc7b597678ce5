//! Inpainting by ancestral sampling over the masked patches.
//!
//! The visible patches are encoded once. The masked tokens start as pure
//! noise and every reverse step asks the decoder for the clean patches,
//! then draws the previous, less noisy state from the Gaussian posterior
//! around that prediction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{DiffMae, EncoderTrace, Head};
use crate::numerics::{tag, RngStream, Scalar, Tensor};
use crate::patching::{denormalize, per_patch_normalize, PatchPartition};
use crate::schedule::Schedule;
use crate::training::{x0_from_eps, Target};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Reverse steps; `None` visits every timestep.
    #[serde(default)]
    pub steps: Option<usize>,
    pub clamp_x0: bool,
    /// Timesteps whose clean-image prediction is recorded; 0 is the output.
    pub snapshot_ts: Vec<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: None, clamp_x0: true, snapshot_ts: vec![1000, 500, 0], seed: 0 }
    }
}

/// Anything that predicts clean masked patches from noisy ones, conditioned
/// on the visible patches.
pub trait Denoiser<T: Scalar> {
    type Context;

    /// Called once per image.
    fn condition(&self, visible: &Tensor<T>, visible_pos: &[usize]) -> Result<Self::Context>;

    /// Raw head output for `x_t` at `t` (clean patches or noise, per target).
    fn predict(&self, ctx: &Self::Context, x_t: &Tensor<T>, masked_pos: &[usize], t: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar> Denoiser<T> for DiffMae<T> {
    type Context = EncoderTrace<T>;

    fn condition(&self, visible: &Tensor<T>, visible_pos: &[usize]) -> Result<EncoderTrace<T>> {
        self.encode(visible, visible_pos, 1)
    }

    fn predict(&self, ctx: &EncoderTrace<T>, x_t: &Tensor<T>, masked_pos: &[usize], t: usize) -> Result<Tensor<T>> {
        self.decode(Head::Pixel, x_t, masked_pos, &[t], ctx)
    }
}

/// One reverse step from `t` to `s < t` given a clean prediction. Returns
/// `(x_s, x0_hat)` where `x0_hat` is the (optionally clamped) prediction.
/// No noise is added when `s == 0`.
pub fn reverse_step<T: Scalar>(
    x0_pred: &Tensor<T>,
    x_t: &Tensor<T>,
    t: usize,
    s: usize,
    schedule: &Schedule,
    clamp: bool,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = schedule.posterior_between(t, s)?;
    let x0 = if clamp { x0_pred.map(|v| v.max(-T::one()).min(T::one())) } else { x0_pred.clone() };
    let (a, b) = (T::cast(c.coef_x0), T::cast(c.coef_xt));
    let mut out = x0.zip_map(x_t, |p, x| a * p + b * x)?;
    if s > 0 {
        let sd = T::cast(c.var.sqrt());
        for v in out.data_mut() {
            *v += sd * T::cast(rng.normal());
        }
    }
    if !out.all_finite() {
        return Err(Error::NonFinite { op: "reverse_step" });
    }
    Ok((out, x0))
}

#[derive(Clone, Debug)]
pub struct InpaintResult<T> {
    /// `[H, W, C]` input with the masked patches replaced.
    pub image: Tensor<T>,
    /// `(t, image)` for each requested snapshot, in the requested order.
    pub snapshots: Vec<(usize, Tensor<T>)>,
    /// The final masked patches, `[masked, patch_dim]`.
    pub masked_patches: Tensor<T>,
}

/// Reverse diffusion over the masked patches of `image`.
///
/// `target` is the objective the model was trained with: it decides whether
/// the head output is noise and whether diffusion ran on standardized
/// patches (then the prediction is mapped back with the input's own
/// per-patch statistics and never clamped).
pub fn inpaint<T: Scalar, D: Denoiser<T>>(
    model: &D,
    grid: &crate::patching::PatchGrid,
    image: &Tensor<T>,
    partition: &PatchPartition,
    schedule: &Schedule,
    cfg: &SamplerConfig,
    target: Target,
) -> Result<InpaintResult<T>> {
    if partition.visible.is_empty() || partition.masked.is_empty() {
        return invalid("inpainting needs at least one visible and one masked patch");
    }
    if partition.num_patches() != grid.num_patches() {
        return invalid(format!("partition over {} patches, grid has {}", partition.num_patches(), grid.num_patches()));
    }
    let ts = schedule.sampling_timesteps(cfg.steps.unwrap_or(schedule.steps()))?;
    for &t in &cfg.snapshot_ts {
        if t != 0 && !ts.contains(&t) {
            return invalid(format!("snapshot t={t} is not visited by a {}-step sampler", ts.len()));
        }
    }
    let patches = grid.patchify(image)?;
    let visible = patches.gather_rows(&partition.visible)?;
    let stats = target.normalized().then(|| per_patch_normalize(&patches.gather_rows(&partition.masked).expect("valid rows")).1);
    let clamp = cfg.clamp_x0 && !target.normalized();
    let compose = |x0: &Tensor<T>| -> Result<Tensor<T>> {
        let pixels = match &stats {
            Some(s) => denormalize(x0, s)?,
            None => x0.clone(),
        };
        let mut out = image.clone();
        grid.write_patches(&mut out, &pixels, &partition.masked)?;
        Ok(out)
    };

    let root = RngStream::new(cfg.seed);
    let ctx = model.condition(&visible, &partition.visible)?;
    let mut x = root.derive(&[tag("init")]).randn(&[partition.masked.len(), grid.patch_dim()]);
    let mut snapshots = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let s = ts.get(i + 1).copied().unwrap_or(0);
        let raw = model.predict(&ctx, &x, &partition.masked, t)?;
        let pred = if target.predicts_eps() { x0_from_eps(&x, &raw, schedule.alpha_bar(t))? } else { raw };
        let mut rng = root.derive(&[tag("z"), t as u64]);
        let (next, x0_hat) = reverse_step(&pred, &x, t, s, schedule, clamp, &mut rng)?;
        if cfg.snapshot_ts.contains(&t) {
            snapshots.push((t, compose(&x0_hat)?));
        }
        x = next;
    }
    // the last step lands on s = 0 without noise, so x is the final sample
    let final_image = compose(&x)?;
    let mut ordered = Vec::with_capacity(cfg.snapshot_ts.len());
    for &t in &cfg.snapshot_ts {
        if t == 0 {
            ordered.push((0, final_image.clone()));
        } else if let Some((_, img)) = snapshots.iter().find(|(st, _)| *st == t) {
            ordered.push((t, img.clone()));
        }
    }
    let masked_patches = match &stats {
        Some(s) => denormalize(&x, s)?,
        None => x,
    };
    Ok(InpaintResult { image: final_image, snapshots: ordered, masked_patches })
}

/// One decode at `t = T` from pure noise; the prediction is the output.
pub fn single_step_mode<T: Scalar, D: Denoiser<T>>(
    model: &D,
    grid: &crate::patching::PatchGrid,
    image: &Tensor<T>,
    partition: &PatchPartition,
    schedule: &Schedule,
    seed: u64,
    target: Target,
) -> Result<Tensor<T>> {
    let cfg = SamplerConfig { steps: Some(1), clamp_x0: true, snapshot_ts: vec![schedule.steps()], seed };
    let out = inpaint(model, grid, image, partition, schedule, &cfg, target)?;
    Ok(out.image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderVariant, ModelConfig};
    use crate::patching::{random_mask, PatchGrid};

    fn schedule() -> Schedule {
        Schedule::from_config(&Default::default()).unwrap()
    }

    /// Knows the clean masked patches and returns them.
    struct Truth(Tensor<f64>);

    impl Denoiser<f64> for Truth {
        type Context = ();
        fn condition(&self, _: &Tensor<f64>, _: &[usize]) -> Result<()> {
            Ok(())
        }
        fn predict(&self, _: &(), _: &Tensor<f64>, _: &[usize], _: usize) -> Result<Tensor<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn t1_step_returns_prediction_exactly() {
        let s = schedule();
        let mut rng = RngStream::new(0);
        let pred: Tensor<f64> = rng.randn::<f64>(&[3, 4]).map(|v| 0.5 * v.tanh());
        let xt: Tensor<f64> = rng.randn(&[3, 4]);
        let (x, x0) = reverse_step(&pred, &xt, 1, 0, &s, true, &mut rng).unwrap();
        assert_eq!(x, pred);
        assert_eq!(x0, pred);
        let big = pred.map(|v| v * 10.0);
        let (x, _) = reverse_step(&big, &xt, 1, 0, &s, true, &mut rng).unwrap();
        assert_eq!(x, big.map(|v| v.clamp(-1.0, 1.0)));
        assert!(reverse_step(&pred, &xt, 1001, 1000, &s, true, &mut rng).is_err());
    }

    #[test]
    fn zero_prediction_mean_is_scaled_state() {
        let s = schedule();
        let xt: Tensor<f64> = RngStream::new(1).randn(&[2, 3]);
        let zero = Tensor::zeros(&[2, 3]);
        let c = s.posterior_coeffs(600).unwrap();
        let n = 4000;
        let mut acc = Tensor::<f64>::zeros(&[2, 3]);
        for i in 0..n {
            let (x, _) = reverse_step(&zero, &xt, 600, 599, &s, true, &mut RngStream::new(100 + i)).unwrap();
            acc = acc.zip_map(&x, |a, b| a + b).unwrap();
        }
        let mean = acc.map(|v| v / n as f64);
        let expect = xt.map(|v| c.coef_xt * v);
        assert!(mean.max_abs_diff(&expect) < 5.0 * (c.var / n as f64).sqrt());
    }

    fn setup() -> (DiffMae<f64>, PatchGrid, Tensor<f64>, PatchPartition) {
        let mut mc = ModelConfig::gradcheck(DecoderVariant::CrossSelf);
        mc.image_h = 12;
        let model = DiffMae::init(mc.clone(), &mut RngStream::new(0)).unwrap();
        let grid = mc.grid();
        let image = RngStream::new(2).randn::<f64>(&grid.image_shape()).map(|v| v.tanh());
        let part = random_mask(&mut RngStream::new(3), grid.num_patches(), 0.5).unwrap();
        (model, grid, image, part)
    }

    #[test]
    fn visible_region_passes_through_and_encodes_once() {
        let (model, grid, image, part) = setup();
        let cfg = SamplerConfig { steps: Some(50), ..SamplerConfig::default() };
        let before = model.encode_calls();
        let out = inpaint(&model, &grid, &image, &part, &schedule(), &cfg, Target::Pixel).unwrap();
        assert_eq!(model.encode_calls() - before, 1);
        let src = grid.patchify(&image).unwrap().gather_rows(&part.visible).unwrap();
        assert_eq!(out.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1000, 500, 0]);
        for img in std::iter::once(&out.image).chain(out.snapshots.iter().map(|s| &s.1)) {
            assert_eq!(grid.patchify(img).unwrap().gather_rows(&part.visible).unwrap(), src);
        }
        assert_eq!(grid.patchify(&out.image).unwrap().gather_rows(&part.masked).unwrap(), out.masked_patches);
    }

    #[test]
    fn same_seed_same_output() {
        let (model, grid, image, part) = setup();
        let cfg = SamplerConfig { steps: Some(20), snapshot_ts: vec![0], ..SamplerConfig::default() };
        let a = inpaint(&model, &grid, &image, &part, &schedule(), &cfg, Target::Pixel).unwrap();
        let b = inpaint(&model, &grid, &image, &part, &schedule(), &cfg, Target::Pixel).unwrap();
        assert_eq!(a.image, b.image);
        let c = inpaint(&model, &grid, &image, &part, &schedule(), &SamplerConfig { seed: 1, ..cfg }, Target::Pixel).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn single_step_is_one_step_inpaint() {
        let (model, grid, image, part) = setup();
        let s = schedule();
        let one = single_step_mode(&model, &grid, &image, &part, &s, 4, Target::Pixel).unwrap();
        let cfg = SamplerConfig { steps: Some(1), clamp_x0: true, snapshot_ts: vec![1000], seed: 4 };
        let r = inpaint(&model, &grid, &image, &part, &s, &cfg, Target::Pixel).unwrap();
        assert_eq!(one, r.snapshots[0].1);
        assert_eq!(one, r.image);
    }

    #[test]
    fn perfect_model_recovers_truth() {
        let (_, grid, image, part) = setup();
        let truth = grid.patchify(&image).unwrap().gather_rows(&part.masked).unwrap();
        let out = inpaint(&Truth(truth.clone()), &grid, &image, &part, &schedule(), &SamplerConfig::default(), Target::Pixel).unwrap();
        assert!(out.masked_patches.max_abs_diff(&truth) <= 1e-4);
        assert!(out.image.max_abs_diff(&image) <= 1e-4);
    }

    #[test]
    fn normalized_target_maps_back_with_input_stats() {
        let (_, grid, image, part) = setup();
        let raw = grid.patchify(&image).unwrap().gather_rows(&part.masked).unwrap();
        let (normed, _) = per_patch_normalize(&raw);
        let out = inpaint(&Truth(normed), &grid, &image, &part, &schedule(), &SamplerConfig::default(), Target::PixelNorm).unwrap();
        assert!(out.image.max_abs_diff(&image) < 1e-6);
    }

    #[test]
    fn unvisited_snapshot_rejected() {
        let (model, grid, image, part) = setup();
        let cfg = SamplerConfig { steps: Some(3), snapshot_ts: vec![500], ..SamplerConfig::default() };
        assert!(inpaint(&model, &grid, &image, &part, &schedule(), &cfg, Target::Pixel).is_err());
    }
}
