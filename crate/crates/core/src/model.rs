//! Asymmetric encoder-decoder.
//!
//! The ViT encoder embeds only the visible patches and keeps the output of
//! every block. The decoder embeds noisy masked patches with its own input
//! projection and predicts their clean content, conditioned on the encoder
//! in one of three ways:
//!
//! * `joint`: self-attention over the last encoder output concatenated with
//!   the noise tokens;
//! * `cross_self`: per block, cross-attention from the noise tokens to one
//!   encoder block's output (deepest first), then self-attention among the
//!   noise tokens, then an MLP;
//! * `cross`: as `cross_self` without the self-attention, so every noise
//!   token is decoded independently of the others.
//!
//! All blocks are pre-norm. Positional embeddings are fixed 2-D sin-cos
//! tables added at both inputs.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{RngStream, Scalar, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore};
use crate::patching::PatchGrid;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Joint,
    CrossSelf,
    Cross,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 3] = [DecoderVariant::Joint, DecoderVariant::CrossSelf, DecoderVariant::Cross];

    pub fn name(self) -> &'static str {
        match self {
            DecoderVariant::Joint => "joint",
            DecoderVariant::CrossSelf => "cross_self",
            DecoderVariant::Cross => "cross",
        }
    }
}

impl std::str::FromStr for DecoderVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        DecoderVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown decoder variant `{s}` (joint, cross_self, cross)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub enc_depth: usize,
    pub enc_width: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub decoder: DecoderVariant,
    pub use_t_embedding: bool,
    /// Output width of a second decoder regressing patch features, if any.
    #[serde(default)]
    pub feature_dim: Option<usize>,
}

impl ModelConfig {
    /// Desk-scale profile: 32x32 RGB, 16 patches of 8x8.
    pub fn tiny() -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch_size: 8,
            enc_depth: 4,
            enc_width: 128,
            enc_heads: 4,
            dec_depth: 2,
            dec_width: 128,
            dec_heads: 4,
            mlp_ratio: 2,
            decoder: DecoderVariant::CrossSelf,
            use_t_embedding: false,
            feature_dim: None,
        }
    }

    /// Smallest useful shape for finite-difference checks: 2 blocks,
    /// width 16, 2 heads, 4 patches.
    pub fn gradcheck(decoder: DecoderVariant) -> Self {
        Self {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch_size: 4,
            enc_depth: 2,
            enc_width: 16,
            enc_heads: 2,
            dec_depth: 2,
            dec_width: 16,
            dec_heads: 2,
            mlp_ratio: 2,
            decoder,
            use_t_embedding: true,
            feature_dim: None,
        }
    }

    /// ViT-L/16 encoder with the 8-block, 512-wide decoder on 224x224 inputs.
    /// Documentation only; far too large for this engine.
    pub fn vit_large() -> Self {
        Self {
            image_h: 224,
            image_w: 224,
            channels: 3,
            patch_size: 16,
            enc_depth: 24,
            enc_width: 1024,
            enc_heads: 16,
            dec_depth: 8,
            dec_width: 512,
            dec_heads: 16,
            mlp_ratio: 4,
            decoder: DecoderVariant::CrossSelf,
            use_t_embedding: false,
            feature_dim: None,
        }
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid { image_h: self.image_h, image_w: self.image_w, channels: self.channels, patch_size: self.patch_size }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().validate()?;
        for (name, width, heads) in [("encoder", self.enc_width, self.enc_heads), ("decoder", self.dec_width, self.dec_heads)] {
            if heads == 0 || width == 0 || width % heads != 0 {
                return invalid(format!("{name} width {width} not divisible by {heads} heads"));
            }
            if width % 4 != 0 {
                return invalid(format!("{name} width {width} must be a multiple of 4 for 2-D sin-cos embeddings"));
            }
        }
        if self.enc_depth == 0 || self.dec_depth == 0 || self.mlp_ratio == 0 {
            return invalid("depths and mlp_ratio must be positive");
        }
        if self.dec_depth > self.enc_depth {
            return invalid(format!("dec_depth {} exceeds enc_depth {}", self.dec_depth, self.enc_depth));
        }
        if self.feature_dim == Some(0) {
            return invalid("feature_dim must be positive when set");
        }
        Ok(())
    }
}

/// Encoder block feeding each decoder block: deepest first, uniform stride.
pub fn block_map(enc_depth: usize, dec_depth: usize) -> Result<Vec<usize>> {
    if dec_depth == 0 || dec_depth > enc_depth {
        return invalid(format!("cannot map {dec_depth} decoder blocks onto {enc_depth} encoder blocks"));
    }
    Ok((0..dec_depth).map(|i| enc_depth - 1 - i * enc_depth / dec_depth).collect())
}

/// Transformer sinusoid of a scalar position: `[sin(pos w_i) .., cos(pos w_i) ..]`
/// with `w_i = 10000^(-i/(dim/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 == 1 {
        return invalid(format!("timestep embedding dim must be even, got {dim}"));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    Ok(freqs.iter().map(|f| (t * f).sin()).chain(freqs.iter().map(|f| (t * f).cos())).collect())
}

/// Fixed 2-D sin-cos table `[grid_h * grid_w, dim]`: first half encodes the
/// column, second half the row.
pub fn sincos_2d<T: Scalar>(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(4) {
        return invalid(format!("2-D sin-cos embedding dim must be a multiple of 4, got {dim}"));
    }
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for y in 0..grid_h {
        for x in 0..grid_w {
            data.extend(timestep_embedding(x as f64, dim / 2)?.into_iter().map(T::cast));
            data.extend(timestep_embedding(y as f64, dim / 2)?.into_iter().map(T::cast));
        }
    }
    Tensor::new(vec![grid_h * grid_w, dim], data)
}

#[derive(Clone, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct AttnIds {
    norm: NormIds,
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Clone, Debug)]
struct MlpIds {
    norm: NormIds,
    fc1: LinearIds,
    fc2: LinearIds,
}

#[derive(Clone, Debug)]
struct EncoderBlockIds {
    attn: AttnIds,
    mlp: MlpIds,
}

#[derive(Clone, Debug)]
struct DecoderBlockIds {
    cross: Option<AttnIds>,
    self_attn: Option<AttnIds>,
    mlp: MlpIds,
}

#[derive(Clone, Debug)]
struct DecoderIds {
    embed: LinearIds,
    latent: LinearIds,
    blocks: Vec<DecoderBlockIds>,
    norm: NormIds,
    head: LinearIds,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_embed: LinearIds,
    enc_blocks: Vec<EncoderBlockIds>,
    enc_norm: NormIds,
    pixel: DecoderIds,
    feature: Option<DecoderIds>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut RngStream,
}

impl<T: Scalar> Builder<'_, T> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            w: self.store.push_weight(format!("{name}.weight"), &[fan_in, fan_out], INIT_STD, self.rng),
            b: self.store.push_const(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> NormIds {
        NormIds {
            g: self.store.push_const(format!("{name}.gamma"), &[width], 1.0),
            b: self.store.push_const(format!("{name}.beta"), &[width], 0.0),
        }
    }

    fn attn(&mut self, name: &str, width: usize) -> AttnIds {
        AttnIds {
            norm: self.norm(&format!("{name}.norm"), width),
            q: self.linear(&format!("{name}.q"), width, width),
            k: self.linear(&format!("{name}.k"), width, width),
            v: self.linear(&format!("{name}.v"), width, width),
            o: self.linear(&format!("{name}.out"), width, width),
        }
    }

    fn mlp(&mut self, name: &str, width: usize, ratio: usize) -> MlpIds {
        MlpIds {
            norm: self.norm(&format!("{name}.norm"), width),
            fc1: self.linear(&format!("{name}.fc1"), width, width * ratio),
            fc2: self.linear(&format!("{name}.fc2"), width * ratio, width),
        }
    }

    fn decoder(&mut self, prefix: &str, cfg: &ModelConfig, out_dim: usize) -> DecoderIds {
        let w = cfg.dec_width;
        let embed = self.linear(&format!("{prefix}.embed"), cfg.grid().patch_dim(), w);
        let latent = self.linear(&format!("{prefix}.latent"), cfg.enc_width, w);
        let blocks = (0..cfg.dec_depth)
            .map(|i| {
                let name = format!("{prefix}.blocks.{i}");
                let (cross, self_attn) = match cfg.decoder {
                    DecoderVariant::Joint => (None, Some(self.attn(&format!("{name}.self_attn"), w))),
                    DecoderVariant::CrossSelf => (
                        Some(self.attn(&format!("{name}.cross_attn"), w)),
                        Some(self.attn(&format!("{name}.self_attn"), w)),
                    ),
                    DecoderVariant::Cross => (Some(self.attn(&format!("{name}.cross_attn"), w)), None),
                };
                DecoderBlockIds { cross, self_attn, mlp: self.mlp(&format!("{name}.mlp"), w, cfg.mlp_ratio) }
            })
            .collect();
        let norm = self.norm(&format!("{prefix}.norm"), w);
        let head = self.linear(&format!("{prefix}.head"), w, out_dim);
        DecoderIds { embed, latent, blocks, norm, head }
    }
}

/// Which decoder produces the prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Denoised masked pixels (or noise, in noise-prediction mode).
    Pixel,
    /// Regressed features of the masked patches.
    Feature,
}

/// Per-block encoder outputs for a batch of visible-token sets.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrace<T> {
    /// One `[batch * visible, enc_width]` tensor per encoder block; the last
    /// one has the final layer norm applied.
    pub entries: Vec<Tensor<T>>,
    /// Grid index of every visible row, flattened over the batch.
    pub visible_pos: Vec<usize>,
    pub batch: usize,
}

/// Tape-resident encoder outputs.
#[derive(Clone, Debug)]
pub struct TraceVars {
    pub entries: Vec<Var>,
    pub visible_pos: Vec<usize>,
    pub batch: usize,
}

/// Model parameters plus the fixed tables derived from the config.
pub struct DiffMae<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    enc_pos: Tensor<T>,
    dec_pos: Tensor<T>,
    encode_calls: AtomicUsize,
}

impl<T: Scalar> Clone for DiffMae<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            enc_pos: self.enc_pos.clone(),
            dec_pos: self.dec_pos.clone(),
            encode_calls: AtomicUsize::new(self.encode_calls.load(Ordering::Relaxed)),
        }
    }
}

fn positions_in_range(pos: &[usize], n: usize) -> Result<()> {
    if let Some(&bad) = pos.iter().find(|&&p| p >= n) {
        return invalid(format!("patch position {bad} outside grid of {n}"));
    }
    Ok(())
}

impl<T: Scalar> DiffMae<T> {
    /// Fresh parameters: truncated-normal weights, zero biases, unit norms.
    pub fn init(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng };
        let pd = config.grid().patch_dim();
        let enc_embed = b.linear("encoder.embed", pd, config.enc_width);
        let enc_blocks = (0..config.enc_depth)
            .map(|i| EncoderBlockIds {
                attn: b.attn(&format!("encoder.blocks.{i}.attn"), config.enc_width),
                mlp: b.mlp(&format!("encoder.blocks.{i}.mlp"), config.enc_width, config.mlp_ratio),
            })
            .collect();
        let enc_norm = b.norm("encoder.norm", config.enc_width);
        let pixel = b.decoder("decoder", &config, pd);
        let feature = config.feature_dim.map(|fd| b.decoder("feature_decoder", &config, fd));
        let layout = Layout { enc_embed, enc_blocks, enc_norm, pixel, feature };
        let grid = config.grid();
        let enc_pos = sincos_2d(grid.grid_h(), grid.grid_w(), config.enc_width)?;
        let dec_pos = sincos_2d(grid.grid_h(), grid.grid_w(), config.dec_width)?;
        Ok(Self { config, params, layout, enc_pos, dec_pos, encode_calls: AtomicUsize::new(0) })
    }

    /// Rebuild a model around stored parameter values (checkpoint load),
    /// given in registration order.
    pub fn with_values(config: ModelConfig, values: Vec<Tensor<T>>) -> Result<Self> {
        let mut model = Self::init(config, &mut RngStream::new(0))?;
        model.params.set_values(values)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn grid(&self) -> PatchGrid {
        self.config.grid()
    }

    /// Number of encoder forward passes run so far.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    fn linear(&self, g: &mut Tape<T>, p: &[Var], ids: &LinearIds, x: Var) -> Result<Var> {
        g.linear(x, p[ids.w.0], p[ids.b.0])
    }

    fn norm(&self, g: &mut Tape<T>, p: &[Var], ids: &NormIds, x: Var) -> Result<Var> {
        g.layer_norm(x, p[ids.g.0], p[ids.b.0])
    }

    /// Pre-norm attention sub-layer; queries come from `x`, keys and values
    /// from `memory` (or from the normed `x` itself when `memory` is `None`).
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Tape<T>,
        p: &[Var],
        ids: &AttnIds,
        x: Var,
        memory: Option<Var>,
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let h = self.norm(g, p, &ids.norm, x)?;
        let kv_src = memory.unwrap_or(h);
        let q = self.linear(g, p, &ids.q, h)?;
        let k = self.linear(g, p, &ids.k, kv_src)?;
        let v = self.linear(g, p, &ids.v, kv_src)?;
        let a = g.attention(q, k, v, batch, heads)?;
        let o = self.linear(g, p, &ids.o, a)?;
        g.add(x, o)
    }

    fn mlp(&self, g: &mut Tape<T>, p: &[Var], ids: &MlpIds, x: Var) -> Result<Var> {
        let h = self.norm(g, p, &ids.norm, x)?;
        let h = self.linear(g, p, &ids.fc1, h)?;
        let h = g.gelu(h)?;
        let h = self.linear(g, p, &ids.fc2, h)?;
        g.add(x, h)
    }

    /// Encoder over `batch` equally sized sets of visible patches stacked
    /// as `[batch * visible, patch_dim]`.
    pub fn encode_on(
        &self,
        g: &mut Tape<T>,
        p: &[Var],
        visible: Var,
        visible_pos: &[usize],
        batch: usize,
    ) -> Result<TraceVars> {
        let rows = g.shape(visible)[0];
        if rows == 0 {
            return invalid("encoder needs at least one visible patch");
        }
        if rows != visible_pos.len() || batch == 0 || !rows.is_multiple_of(batch) {
            return shape_err("encode", format!("{rows} rows, {} positions, batch {batch}", visible_pos.len()));
        }
        positions_in_range(visible_pos, self.grid().num_patches())?;
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let l = &self.layout;
        let x = self.linear(g, p, &l.enc_embed, visible)?;
        let pos = g.constant(self.enc_pos.gather_rows(visible_pos)?);
        let mut x = g.add(x, pos)?;
        let mut entries = Vec::with_capacity(l.enc_blocks.len());
        for block in &l.enc_blocks {
            x = self.attention(g, p, &block.attn, x, None, batch, self.config.enc_heads)?;
            x = self.mlp(g, p, &block.mlp, x)?;
            entries.push(x);
        }
        let last = entries.len() - 1;
        entries[last] = self.norm(g, p, &l.enc_norm, x)?;
        Ok(TraceVars { entries, visible_pos: visible_pos.to_vec(), batch })
    }

    /// Decoder prediction for `[batch * masked, patch_dim]` noisy patches at
    /// per-sample timesteps `ts` (ignored unless the timestep embedding is on).
    #[allow(clippy::too_many_arguments)]
    pub fn decode_on(
        &self,
        g: &mut Tape<T>,
        p: &[Var],
        head: Head,
        noisy: Var,
        masked_pos: &[usize],
        ts: &[usize],
        trace: &TraceVars,
    ) -> Result<Var> {
        let dec = match head {
            Head::Pixel => &self.layout.pixel,
            Head::Feature => self
                .layout
                .feature
                .as_ref()
                .ok_or_else(|| crate::Error::Invalid("model has no feature decoder".into()))?,
        };
        let batch = trace.batch;
        let rows = g.shape(noisy)[0];
        if rows != masked_pos.len() || !rows.is_multiple_of(batch) || ts.len() != batch || rows == 0 {
            return shape_err(
                "decode",
                format!("{rows} noisy rows, {} positions, {} timesteps, batch {batch}", masked_pos.len(), ts.len()),
            );
        }
        if trace.entries.len() != self.config.enc_depth {
            return shape_err("decode", format!("trace has {} entries", trace.entries.len()));
        }
        positions_in_range(masked_pos, self.grid().num_patches())?;
        let nm = rows / batch;
        let nv = trace.visible_pos.len() / batch;
        let w = self.config.dec_width;

        let tokens = self.linear(g, p, &dec.embed, noisy)?;
        let mut add = self.dec_pos.gather_rows(masked_pos)?;
        if self.config.use_t_embedding {
            for (b, &t) in ts.iter().enumerate() {
                let emb = timestep_embedding(t as f64, w)?;
                for r in b * nm..(b + 1) * nm {
                    for (v, e) in add.row_mut(r).iter_mut().zip(&emb) {
                        *v += T::cast(*e);
                    }
                }
            }
        }
        let add = g.constant(add);
        let mut x = g.add(tokens, add)?;

        let last = self.config.enc_depth - 1;
        let mut memory: HashMap<usize, Var> = HashMap::new();
        let mut latent = |g: &mut Tape<T>, j: usize| -> Result<Var> {
            if let Some(&m) = memory.get(&j) {
                return Ok(m);
            }
            // intermediate entries get the shared final encoder norm first
            let src = if j == last {
                trace.entries[j]
            } else {
                self.norm(g, p, &self.layout.enc_norm, trace.entries[j])?
            };
            let m = self.linear(g, p, &dec.latent, src)?;
            memory.insert(j, m);
            Ok(m)
        };

        match self.config.decoder {
            DecoderVariant::Joint => {
                let vis = latent(g, last)?;
                let vis_pos = g.constant(self.dec_pos.gather_rows(&trace.visible_pos)?);
                let vis = g.add(vis, vis_pos)?;
                let stacked = g.concat(&[vis, x], 0)?;
                let n = nv + nm;
                let order: Vec<usize> = (0..batch)
                    .flat_map(|b| (b * nv..(b + 1) * nv).chain(batch * nv + b * nm..batch * nv + (b + 1) * nm))
                    .collect();
                let mut seq = g.gather_rows(stacked, &order)?;
                for block in &dec.blocks {
                    let sa = block.self_attn.as_ref().expect("joint block has self-attention");
                    seq = self.attention(g, p, sa, seq, None, batch, self.config.dec_heads)?;
                    seq = self.mlp(g, p, &block.mlp, seq)?;
                }
                let noise_rows: Vec<usize> = (0..batch).flat_map(|b| b * n + nv..(b + 1) * n).collect();
                x = g.gather_rows(seq, &noise_rows)?;
            }
            DecoderVariant::CrossSelf | DecoderVariant::Cross => {
                let map = block_map(self.config.enc_depth, self.config.dec_depth)?;
                for (block, &j) in dec.blocks.iter().zip(&map) {
                    let mem = latent(g, j)?;
                    let cross = block.cross.as_ref().expect("cross block has cross-attention");
                    x = self.attention(g, p, cross, x, Some(mem), batch, self.config.dec_heads)?;
                    if let Some(sa) = &block.self_attn {
                        x = self.attention(g, p, sa, x, None, batch, self.config.dec_heads)?;
                    }
                    x = self.mlp(g, p, &block.mlp, x)?;
                }
            }
        }
        let x = self.norm(g, p, &dec.norm, x)?;
        self.linear(g, p, &dec.head, x)
    }

    /// Gradient-free encoder pass over one or more samples.
    pub fn encode(&self, visible: &Tensor<T>, visible_pos: &[usize], batch: usize) -> Result<EncoderTrace<T>> {
        let mut g = Tape::new();
        let p = self.params.bind(&mut g, false);
        let v = g.constant(visible.clone());
        let tv = self.encode_on(&mut g, &p, v, visible_pos, batch)?;
        Ok(EncoderTrace {
            entries: tv.entries.iter().map(|&e| g.value(e).clone()).collect(),
            visible_pos: tv.visible_pos,
            batch,
        })
    }

    /// Gradient-free decoder pass reusing an encoder trace.
    pub fn decode(
        &self,
        head: Head,
        noisy: &Tensor<T>,
        masked_pos: &[usize],
        ts: &[usize],
        trace: &EncoderTrace<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Tape::new();
        let p = self.params.bind(&mut g, false);
        let tv = TraceVars {
            entries: trace.entries.iter().map(|e| g.constant(e.clone())).collect(),
            visible_pos: trace.visible_pos.clone(),
            batch: trace.batch,
        };
        let n = g.constant(noisy.clone());
        let out = self.decode_on(&mut g, &p, head, n, masked_pos, ts, &tv)?;
        Ok(g.value(out).clone())
    }

    /// Encoder over every patch of a batch of images, mean-pooled per image:
    /// `[batch, enc_width]`. Used by the classifier.
    pub fn pooled_features_on(&self, g: &mut Tape<T>, p: &[Var], patches: Var, batch: usize) -> Result<Var> {
        let n = self.grid().num_patches();
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let trace = self.encode_on(g, p, patches, &pos, batch)?;
        let last = *trace.entries.last().expect("non-empty trace");
        let r = g.reshape(last, &[batch, n, self.config.enc_width])?;
        g.mean_axis(r, 1)
    }

    pub fn has_feature_decoder(&self) -> bool {
        self.layout.feature.is_some()
    }

    /// Layer-decay group of a parameter: 0 for the patch embedding, `i + 1`
    /// for encoder block `i`, `enc_depth + 1` for everything after the blocks.
    pub fn layer_group(&self, name: &str) -> usize {
        if name.starts_with("encoder.embed.") {
            return 0;
        }
        if let Some(rest) = name.strip_prefix("encoder.blocks.") {
            if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
                return i + 1;
            }
        }
        self.config.enc_depth + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: DecoderVariant) -> ModelConfig {
        let mut c = ModelConfig::gradcheck(variant);
        c.image_h = 16;
        c.image_w = 16;
        c
    }

    fn forward(
        model: &DiffMae<f64>,
        visible: &Tensor<f64>,
        vis_pos: &[usize],
        noisy: &Tensor<f64>,
        masked_pos: &[usize],
        t: usize,
    ) -> Tensor<f64> {
        let trace = model.encode(visible, vis_pos, 1).unwrap();
        model.decode(Head::Pixel, noisy, masked_pos, &[t], &trace).unwrap()
    }

    #[test]
    fn block_map_examples() {
        assert_eq!(block_map(24, 8).unwrap(), vec![23, 20, 17, 14, 11, 8, 5, 2]);
        assert_eq!(block_map(7, 1).unwrap(), vec![6]);
        assert_eq!(block_map(8, 8).unwrap(), vec![7, 6, 5, 4, 3, 2, 1, 0]);
        assert!(block_map(4, 5).is_err());
        for l in 1..30 {
            for d in 1..=l {
                let m = block_map(l, d).unwrap();
                assert!(m.windows(2).all(|w| w[0] > w[1]));
                assert_eq!(m[0], l - 1);
            }
        }
    }

    #[test]
    fn timestep_embedding_properties() {
        let e = timestep_embedding(0.0, 8).unwrap();
        assert!(e[..4].iter().all(|&v| v == 0.0) && e[4..].iter().all(|&v| v == 1.0));
        assert!(timestep_embedding(3.0, 7).is_err());
        for dim in [2, 4, 16] {
            let embs: Vec<Vec<f64>> = (0..=1000).map(|t| timestep_embedding(t as f64, dim).unwrap()).collect();
            for i in 0..embs.len() {
                for j in i + 1..embs.len() {
                    let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).sum();
                    assert!(d > 1e-9, "dim {dim}: t={i} and t={j} collide");
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_bounded_and_finite() {
        let cfg = ModelConfig::tiny();
        let a = DiffMae::<f32>::init(cfg.clone(), &mut RngStream::new(4)).unwrap();
        let b = DiffMae::<f32>::init(cfg, &mut RngStream::new(4)).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.params().all_finite());
        for p in a.params().iter() {
            if p.decay {
                assert!(p.value.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD as f32 + 1e-7), "{}", p.name);
            } else if p.name.ends_with(".gamma") {
                assert!(p.value.data().iter().all(|&v| v == 1.0));
            } else {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn distinct_input_projections() {
        let m = DiffMae::<f32>::init(ModelConfig::tiny(), &mut RngStream::new(0)).unwrap();
        let enc = m.params().find("encoder.embed.weight").unwrap();
        let dec = m.params().find("decoder.embed.weight").unwrap();
        assert_eq!(enc.value.shape(), &[192, 128]);
        assert_eq!(dec.value.shape(), &[192, 128]);
        assert_ne!(enc.value, dec.value);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny();
        c.enc_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.dec_depth = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        assert!(ModelConfig::vit_large().validate().is_ok());
    }

    #[test]
    fn trace_shapes_and_depth() {
        let mut cfg = ModelConfig::tiny();
        cfg.enc_depth = 6;
        let m = DiffMae::<f32>::init(cfg, &mut RngStream::new(0)).unwrap();
        let vis: Tensor<f32> = RngStream::new(1).randn(&[4, 192]);
        let trace = m.encode(&vis, &[0, 5, 10, 15], 1).unwrap();
        assert_eq!(trace.entries.len(), 6);
        for e in &trace.entries {
            assert_eq!(e.shape(), &[4, 128]);
        }
        assert!(m.encode(&Tensor::zeros(&[0, 192]), &[], 1).is_err());
    }

    #[test]
    fn output_shape_for_every_variant() {
        for variant in DecoderVariant::ALL {
            let m = DiffMae::<f64>::init(small(variant), &mut RngStream::new(2)).unwrap();
            let mut rng = RngStream::new(3);
            let vis: Tensor<f64> = rng.randn(&[5, 16]);
            let noisy: Tensor<f64> = rng.randn(&[11, 16]);
            let out = forward(&m, &vis, &[0, 3, 6, 9, 12], &noisy, &[1, 2, 4, 5, 7, 8, 10, 11, 13, 14, 15], 500);
            assert_eq!(out.shape(), &[11, 16]);
            assert!(out.all_finite());
        }
    }

    #[test]
    fn t_embedding_off_ignores_timestep() {
        let mut cfg = small(DecoderVariant::CrossSelf);
        cfg.use_t_embedding = false;
        let m = DiffMae::<f64>::init(cfg, &mut RngStream::new(2)).unwrap();
        let mut rng = RngStream::new(3);
        let vis: Tensor<f64> = rng.randn(&[2, 16]);
        let noisy: Tensor<f64> = rng.randn(&[3, 16]);
        let a = forward(&m, &vis, &[0, 1], &noisy, &[2, 3, 4], 10);
        let b = forward(&m, &vis, &[0, 1], &noisy, &[2, 3, 4], 900);
        assert_eq!(a, b);
        let mut cfg = small(DecoderVariant::CrossSelf);
        cfg.use_t_embedding = true;
        let m = DiffMae::<f64>::init(cfg, &mut RngStream::new(2)).unwrap();
        assert_ne!(
            forward(&m, &vis, &[0, 1], &noisy, &[2, 3, 4], 10),
            forward(&m, &vis, &[0, 1], &noisy, &[2, 3, 4], 900)
        );
    }

    #[test]
    fn masked_positions_permute_with_outputs() {
        for variant in DecoderVariant::ALL {
            let m = DiffMae::<f64>::init(small(variant), &mut RngStream::new(5)).unwrap();
            let mut rng = RngStream::new(6);
            let vis: Tensor<f64> = rng.randn(&[3, 16]);
            let noisy: Tensor<f64> = rng.randn(&[4, 16]);
            let pos = [4, 9, 2, 13];
            let out = forward(&m, &vis, &[0, 1, 5], &noisy, &pos, 100);
            let perm = [2, 0, 3, 1];
            let noisy_p = noisy.gather_rows(&perm).unwrap();
            let pos_p: Vec<usize> = perm.iter().map(|&i| pos[i]).collect();
            let out_p = forward(&m, &vis, &[0, 1, 5], &noisy_p, &pos_p, 100);
            assert!(out_p.max_abs_diff(&out.gather_rows(&perm).unwrap()) < 1e-12, "{variant:?}");
        }
    }

    #[test]
    fn batched_decode_matches_per_sample() {
        for variant in DecoderVariant::ALL {
            let m = DiffMae::<f64>::init(small(variant), &mut RngStream::new(7)).unwrap();
            let mut rng = RngStream::new(8);
            let vis: Tensor<f64> = rng.randn(&[4, 16]);
            let noisy: Tensor<f64> = rng.randn(&[6, 16]);
            let (vp, mp) = ([0, 1, 7, 8], [2, 3, 4, 9, 10, 11]);
            let trace = m.encode(&vis, &vp, 2).unwrap();
            let both = m.decode(Head::Pixel, &noisy, &mp, &[5, 7], &trace).unwrap();
            for b in 0..2 {
                let v = vis.gather_rows(&[2 * b, 2 * b + 1]).unwrap();
                let n = noisy.gather_rows(&[3 * b, 3 * b + 1, 3 * b + 2]).unwrap();
                let one = forward(&m, &v, &vp[2 * b..2 * b + 2], &n, &mp[3 * b..3 * b + 3], [5, 7][b]);
                let part = both.gather_rows(&[3 * b, 3 * b + 1, 3 * b + 2]).unwrap();
                assert!(one.max_abs_diff(&part) < 1e-12, "{variant:?}");
            }
        }
    }

    #[test]
    fn layer_groups() {
        let m = DiffMae::<f32>::init(ModelConfig::tiny(), &mut RngStream::new(0)).unwrap();
        let groups: std::collections::BTreeSet<usize> = m.params().iter().map(|p| m.layer_group(&p.name)).collect();
        assert_eq!(groups.len(), m.config().enc_depth + 2);
        assert_eq!(m.layer_group("encoder.embed.weight"), 0);
        assert_eq!(m.layer_group("encoder.blocks.3.mlp.fc1.bias"), 4);
        assert_eq!(m.layer_group("encoder.norm.gamma"), 5);
    }

    fn perturbed_rows(variant: DecoderVariant, seed: u64) -> Vec<usize> {
        let m = DiffMae::<f64>::init(small(variant), &mut RngStream::new(seed)).unwrap();
        let mut rng = RngStream::new(seed + 1);
        let vis: Tensor<f64> = rng.randn(&[3, 16]);
        let noisy: Tensor<f64> = rng.randn(&[5, 16]);
        let pos = [3, 4, 8, 11, 15];
        let base = forward(&m, &vis, &[0, 1, 2], &noisy, &pos, 300);
        let mut bumped = noisy.clone();
        for v in bumped.row_mut(2) {
            *v += 0.5;
        }
        let out = forward(&m, &vis, &[0, 1, 2], &bumped, &pos, 300);
        (0..5).filter(|&r| base.row(r) != out.row(r)).collect()
    }

    #[test]
    fn cross_decoder_rows_are_independent() {
        for seed in 0..5 {
            assert_eq!(perturbed_rows(DecoderVariant::Cross, seed), vec![2]);
        }
    }

    #[test]
    fn self_attending_decoders_mix_rows() {
        for variant in [DecoderVariant::Joint, DecoderVariant::CrossSelf] {
            assert!(perturbed_rows(variant, 9).len() > 1, "{variant:?}");
        }
    }
}
