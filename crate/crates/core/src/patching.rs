//! Patch grids, visible/masked partitions and per-patch target normalization.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{RngStream, Scalar, Tensor};

/// Epsilon added to the per-patch variance before taking the square root.
pub const PATCH_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(image_h: usize, image_w: usize, channels: usize, patch_size: usize) -> Result<Self> {
        let g = Self { image_h, image_w, channels, patch_size };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.channels == 0 || self.image_h == 0 || self.image_w == 0 {
            return invalid(format!("degenerate patch grid {self:?}"));
        }
        if !self.image_h.is_multiple_of(p) || !self.image_w.is_multiple_of(p) {
            return invalid(format!("patch size {p} does not divide {}x{}", self.image_h, self.image_w));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_h, self.image_w, self.channels]
    }

    /// Flat offsets into an `[h, w, c]` image for each element of patch `idx`,
    /// in patch-row order `(py, px, c)`.
    fn patch_offsets(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (p, c, w) = (self.patch_size, self.channels, self.image_w);
        let (gy, gx) = (idx / self.grid_w(), idx % self.grid_w());
        (0..p).flat_map(move |py| {
            let row = (gy * p + py) * w + gx * p;
            (0..p * c).map(move |k| row * c + k)
        })
    }

    /// `[h, w, c]` image to `[N, patch_dim]`, patches in row-major grid order.
    pub fn patchify<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.shape() != self.image_shape() {
            return shape_err("patchify", format!("image {:?} vs grid {:?}", image.shape(), self.image_shape()));
        }
        let src = image.data();
        let data = (0..self.num_patches()).flat_map(|i| self.patch_offsets(i).map(|o| src[o])).collect();
        Tensor::new(vec![self.num_patches(), self.patch_dim()], data)
    }

    pub fn unpatchify<T: Scalar>(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        if patches.shape() != [self.num_patches(), self.patch_dim()] {
            return shape_err("unpatchify", format!("{:?}", patches.shape()));
        }
        let mut out = Tensor::zeros(&self.image_shape());
        self.write_patches(&mut out, patches, &(0..self.num_patches()).collect::<Vec<_>>())?;
        Ok(out)
    }

    /// Overwrite the listed patches of `image` with rows of `patches`.
    pub fn write_patches<T: Scalar>(&self, image: &mut Tensor<T>, patches: &Tensor<T>, indices: &[usize]) -> Result<()> {
        if patches.rows() != indices.len() || patches.cols() != self.patch_dim() {
            return shape_err("write_patches", format!("{:?} for {} indices", patches.shape(), indices.len()));
        }
        let dst = image.data_mut();
        for (r, &idx) in indices.iter().enumerate() {
            for (o, &v) in self.patch_offsets(idx).zip(patches.row(r)) {
                dst[o] = v;
            }
        }
        Ok(())
    }
}

/// Disjoint split of the flattened patch grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPartition {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl PatchPartition {
    /// Partition with the given masked set; everything else is visible.
    pub fn from_masked(num_patches: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; num_patches];
        for &m in masked {
            if m >= num_patches || is_masked[m] {
                return invalid(format!("bad masked index {m} for {num_patches} patches"));
            }
            is_masked[m] = true;
        }
        Ok(Self {
            visible: (0..num_patches).filter(|&i| !is_masked[i]).collect(),
            masked: (0..num_patches).filter(|&i| is_masked[i]).collect(),
        })
    }

    pub fn num_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn mask_ratio(&self) -> f64 {
        self.masked.len() as f64 / self.num_patches() as f64
    }
}

/// `round(ratio * n)`, halves rounded up.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Uniformly random subset of `round(ratio * n)` masked patches.
pub fn random_mask(rng: &mut RngStream, n: usize, ratio: f64) -> Result<PatchPartition> {
    if !(ratio > 0.0 && ratio < 1.0) || n < 2 {
        return invalid(format!("random mask needs 0 < ratio < 1 and n >= 2, got {ratio}, {n}"));
    }
    let k = masked_count(n, ratio);
    if k == 0 || k == n {
        return invalid(format!("mask ratio {ratio} on {n} patches masks {k}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    PatchPartition::from_masked(n, &order[..k])
}

/// Mask the centered `(grid_h/2) x (grid_w/2)` block: a quarter of the patches.
pub fn center_mask(grid_h: usize, grid_w: usize) -> Result<PatchPartition> {
    if grid_h == 0 || grid_w == 0 || grid_h % 2 == 1 || grid_w % 2 == 1 {
        return invalid(format!("center mask needs even grid extents, got {grid_h}x{grid_w}"));
    }
    let (bh, bw) = (grid_h / 2, grid_w / 2);
    let (y0, x0) = ((grid_h - bh).div_ceil(2), (grid_w - bw).div_ceil(2));
    let masked: Vec<usize> = (y0..y0 + bh).flat_map(|y| (x0..x0 + bw).map(move |x| y * grid_w + x)).collect();
    PatchPartition::from_masked(grid_h * grid_w, &masked)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Random,
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub kind: MaskKind,
    /// Masked fraction for random masking; center masking is always 25%.
    pub ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { kind: MaskKind::Random, ratio: 0.75 }
    }
}

impl MaskConfig {
    pub fn draw(&self, grid: &PatchGrid, rng: &mut RngStream) -> Result<PatchPartition> {
        match self.kind {
            MaskKind::Random => random_mask(rng, grid.num_patches(), self.ratio),
            MaskKind::Center => center_mask(grid.grid_h(), grid.grid_w()),
        }
    }
}

/// Per-row mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchNormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standardize every row to zero mean and unit population variance.
pub fn per_patch_normalize<T: Scalar>(patches: &Tensor<T>) -> (Tensor<T>, PatchNormStats) {
    let d = patches.cols().max(1);
    let mut stats = PatchNormStats { mean: Vec::new(), std: Vec::new() };
    let mut out = patches.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let denom = (var + PATCH_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = T::cast((v.as_f64() - mean) / denom);
        }
        stats.mean.push(mean);
        stats.std.push(var.sqrt());
    }
    (out, stats)
}

pub fn denormalize<T: Scalar>(normed: &Tensor<T>, stats: &PatchNormStats) -> Result<Tensor<T>> {
    let d = normed.cols().max(1);
    if normed.numel() / d != stats.mean.len() {
        return shape_err("denormalize", format!("{} rows vs {} stats", normed.numel() / d, stats.mean.len()));
    }
    let mut out = normed.clone();
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let scale = (stats.std[r].powi(2) + PATCH_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = T::cast(v.as_f64() * scale + stats.mean[r]);
        }
    }
    Ok(out)
}
