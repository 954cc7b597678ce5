//! Full finite-difference suite: every tape op in isolation, then the whole
//! training loss of a small model with respect to every parameter, for each
//! decoder variant and prediction target.

use crate::error::Result;
use crate::model::{DecoderVariant, DiffMae, ModelConfig};
use crate::numerics::{check_all_ops, check_gradients, GradCheckReport, OpKind, RngStream, Tensor};
use crate::patching::{random_mask, PatchGrid};
use crate::schedule::Schedule;
use crate::training::{BatchInputs, FeatureExtractor, RandomProjection, Target};

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the relative error of every entry.
    pub tol: f64,
    /// Perturb at most this many coordinates per tensor.
    pub max_coords: Option<usize>,
    /// Negate one backward rule, to prove the suite can fail.
    pub fault: Option<OpKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 0, h: 1e-5, tol: 1e-6, max_coords: None, fault: None }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub tol: f64,
    pub ops: Vec<(OpKind, GradCheckReport)>,
    /// One report per `(variant, target)` case, one entry per parameter.
    pub models: Vec<(String, GradCheckReport)>,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.ops.iter().map(|(_, r)| r.max_rel_err()).chain(self.models.iter().map(|(_, r)| r.max_rel_err())).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.ops.iter().all(|(_, r)| r.passed(self.tol)) && self.models.iter().all(|(_, r)| r.passed(self.tol))
    }

    /// One line per op and per model case.
    pub fn lines(&self) -> Vec<String> {
        let verdict = |r: &GradCheckReport| if r.passed(self.tol) { "ok" } else { "FAIL" };
        let mut out: Vec<String> = self
            .ops
            .iter()
            .map(|(k, r)| format!("op={} max_rel_err={:.3e} {}", k.name(), r.max_rel_err(), verdict(r)))
            .collect();
        for (name, r) in &self.models {
            let worst = r.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err));
            out.push(format!(
                "model={name} params={} coords={} max_rel_err={:.3e} worst={} {}",
                r.entries.len(),
                r.entries.iter().map(|e| e.checked).sum::<usize>(),
                r.max_rel_err(),
                worst.map_or("-", |e| e.name.as_str()),
                verdict(r)
            ));
        }
        out
    }
}

/// The model cases: every decoder variant on pixels, plus the noise,
/// normalized-pixel and feature targets on the cross-self decoder.
pub fn model_cases() -> Vec<(DecoderVariant, Target)> {
    vec![
        (DecoderVariant::Joint, Target::Pixel),
        (DecoderVariant::CrossSelf, Target::Pixel),
        (DecoderVariant::Cross, Target::Pixel),
        (DecoderVariant::CrossSelf, Target::Eps),
        (DecoderVariant::CrossSelf, Target::PixelNorm),
        (DecoderVariant::Cross, Target::PixelPlusFeature),
    ]
}

/// Gradient check of the training loss of one small model.
pub fn check_model(variant: DecoderVariant, target: Target, cfg: &SuiteConfig) -> Result<GradCheckReport> {
    let mut mc = ModelConfig::gradcheck(variant);
    if target == Target::PixelPlusFeature {
        mc.feature_dim = Some(4);
    }
    let root = RngStream::new(cfg.seed);
    let model = DiffMae::<f64>::init(mc.clone(), &mut root.derive(&[1]))?;
    let grid: PatchGrid = mc.grid();
    let schedule = Schedule::from_config(&Default::default())?;
    let feature = RandomProjection::<f64>::new(grid.patch_dim(), 4, cfg.seed);
    let mut parts = Vec::new();
    for b in 0..2u64 {
        let mut rng = root.derive(&[2, b]);
        let image: Tensor<f64> = rng.randn::<f64>(&grid.image_shape()).map(|v| v.tanh());
        let partition = random_mask(&mut rng, grid.num_patches(), 0.5)?;
        let t = rng.int_in(1, 1000);
        let eps = rng.randn(&[partition.masked.len(), grid.patch_dim()]);
        parts.push((grid.patchify(&image)?, partition, t, eps));
    }
    let fx: Option<&dyn FeatureExtractor<f64>> = Some(&feature);
    let inputs = BatchInputs::assemble(&grid, &parts, &schedule, target, fx)?;
    let named: Vec<(String, Tensor<f64>)> = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    check_gradients(&named, cfg.h, cfg.max_coords, cfg.fault, |g, vars| inputs.loss_on(&model, g, vars, 1.0))
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let ops = check_all_ops::<f64>(cfg.seed, cfg.h, cfg.fault)?;
    let mut models = Vec::new();
    for (variant, target) in model_cases() {
        let report = check_model(variant, target, cfg)?;
        models.push((format!("{}/{}", variant.name(), target.name()), report));
    }
    Ok(SuiteReport { tol: cfg.tol, ops, models })
}
