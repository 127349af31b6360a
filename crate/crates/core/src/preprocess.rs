//! Resampling, intensity whitening, patch geometry and augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volgrid::{voxel_count, LabelMask, Shape3, Spacing, Volume, VoxelGrid};

/// Scalar whitening transform estimated on the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Window size and stride of a patch grid, in voxels `(d, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch: Shape3,
    pub stride: Shape3,
}

impl PatchSpec {
    pub fn new(patch: Shape3, stride: Shape3) -> Result<Self> {
        let spec = PatchSpec { patch, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if self.patch[axis] == 0 || self.stride[axis] == 0 || self.stride[axis] > self.patch[axis] {
                return Err(Error::usage(format!(
                    "need 1 <= stride <= patch on every axis, got patch {:?} stride {:?}",
                    self.patch, self.stride
                )));
            }
        }
        Ok(())
    }

    /// Every window origin covering a volume of `shape`, depth-major order.
    pub fn window_origins(&self, shape: Shape3) -> Vec<Shape3> {
        let per_axis: Vec<Vec<usize>> = (0..3)
            .map(|a| patch_origins(shape[a], self.patch[a], self.stride[a]))
            .collect();
        let mut out = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
        for &d in &per_axis[0] {
            for &h in &per_axis[1] {
                for &w in &per_axis[2] {
                    out.push([d, h, w]);
                }
            }
        }
        out
    }
}

/// Augmentation strengths. Noise is in whitened intensity units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub noise_sigma: f64,
    pub flip_prob: f64,
    pub jitter_mm: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            noise_sigma: 0.1,
            flip_prob: 0.5,
            jitter_mm: 0.2,
        }
    }
}

impl AugmentParams {
    pub const DISABLED: AugmentParams = AugmentParams {
        noise_sigma: 0.0,
        flip_prob: 0.0,
        jitter_mm: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::usage(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::usage(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        if !(self.jitter_mm >= 0.0 && self.jitter_mm < 1.0) {
            return Err(Error::usage(format!("jitter_mm must lie in [0, 1), got {}", self.jitter_mm)));
        }
        Ok(())
    }
}

/// Output length along one axis when resampling `n` voxels of size `from` to size `to`.
fn resampled_len(n: usize, from: f32, to: f32) -> usize {
    let extent = n as f64 * from as f64;
    ((extent / to as f64).round() as usize).max(1)
}

/// Source index for each output voxel along one axis: the input voxel whose
/// half-open extent `[i*from, (i+1)*from)` contains the output voxel centre.
/// This is the nearest input centre, with exact ties going to the higher index.
fn nearest_source_indices(n_in: usize, from: f32, n_out: usize, to: f32) -> Vec<usize> {
    (0..n_out)
        .map(|o| {
            let centre = (o as f64 + 0.5) * to as f64;
            ((centre / from as f64).floor() as usize).min(n_in - 1)
        })
        .collect()
}

/// Nearest-neighbour resampling onto a grid of voxel size `target`.
///
/// Both grids share the corner at the origin; output extent per axis is
/// `round(n * spacing / target)`, at least one voxel.
pub fn resample_nearest<G: VoxelGrid>(grid: &G, target: Spacing) -> Result<G> {
    target.validate()?;
    let shape = grid.shape();
    let from = grid.spacing().as_array();
    let to = target.as_array();
    if from == to {
        return Ok(G::from_parts(shape, target, grid.data().to_vec()));
    }
    let out_shape: Shape3 = std::array::from_fn(|a| resampled_len(shape[a], from[a], to[a]));
    let maps: Vec<Vec<usize>> = (0..3)
        .map(|a| nearest_source_indices(shape[a], from[a], out_shape[a], to[a]))
        .collect();
    let src = grid.data();
    let mut data = Vec::with_capacity(voxel_count(out_shape));
    for &sd in &maps[0] {
        for &sh in &maps[1] {
            let row = (sd * shape[1] + sh) * shape[2];
            data.extend(maps[2].iter().map(|&sw| src[row + sw]));
        }
    }
    Ok(G::from_parts(out_shape, target, data))
}

/// Pooled mean and population standard deviation over every voxel of every volume.
pub fn compute_norm_stats(training_volumes: &[&Volume]) -> Result<NormStats> {
    if training_volumes.is_empty() {
        return Err(Error::usage("cannot compute normalization statistics from no volumes"));
    }
    let n: usize = training_volumes.iter().map(|v| v.data().len()).sum();
    let sum: f64 = training_volumes
        .iter()
        .flat_map(|v| v.data())
        .map(|&x| x as f64)
        .sum();
    let mean = sum / n as f64;
    let sq: f64 = training_volumes
        .iter()
        .flat_map(|v| v.data())
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum();
    let std = (sq / n as f64).sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Degenerate(format!(
            "training intensities have zero variance (mean {mean})"
        )));
    }
    Ok(NormStats { mean, std })
}

/// Whitens intensities: `x -> (x - mean) / std`.
pub fn normalize(v: &Volume, s: &NormStats) -> Volume {
    let mut out = v.clone();
    out.map_in_place(|x| ((x as f64 - s.mean) / s.std) as f32);
    out
}

/// Origins of windows of length `patch` stepping by `stride` along an axis of
/// length `axis_len`. The last window is clamped to end at the axis edge;
/// axes no longer than one patch get the single origin 0.
pub fn patch_origins(axis_len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if axis_len <= patch {
        return vec![0];
    }
    let last = axis_len - patch;
    let mut origins: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

/// Copies the window `[origin, origin + size)`; voxels beyond the grid take
/// the grid's pad value (0 for whitened volumes and for labels).
pub fn extract_patch<G: VoxelGrid>(grid: &G, origin: Shape3, size: Shape3) -> Result<G> {
    let shape = grid.shape();
    if (0..3).any(|a| origin[a] >= shape[a]) {
        return Err(Error::Bounds {
            d: origin[0],
            h: origin[1],
            w: origin[2],
            shape,
        });
    }
    if size.iter().any(|&s| s == 0) {
        return Err(Error::usage(format!("patch size must be positive, got {size:?}")));
    }
    let src = grid.data();
    let mut data = vec![G::PAD; voxel_count(size)];
    let copy_w = size[2].min(shape[2] - origin[2]);
    for pd in 0..size[0].min(shape[0] - origin[0]) {
        for ph in 0..size[1].min(shape[1] - origin[1]) {
            let src_row = ((origin[0] + pd) * shape[1] + origin[1] + ph) * shape[2] + origin[2];
            let dst_row = (pd * size[1] + ph) * size[2];
            data[dst_row..dst_row + copy_w].copy_from_slice(&src[src_row..src_row + copy_w]);
        }
    }
    Ok(G::from_parts(size, grid.spacing(), data))
}

/// Mirrors a grid along `axis` (0 = depth, 1 = height, 2 = width).
pub fn flip_axis<G: VoxelGrid>(grid: &G, axis: usize) -> G {
    let [nd, nh, nw] = grid.shape();
    let src = grid.data();
    let mut data = Vec::with_capacity(src.len());
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let (sd, sh, sw) = match axis {
                    0 => (nd - 1 - d, h, w),
                    1 => (d, nh - 1 - h, w),
                    _ => (d, h, nw - 1 - w),
                };
                data.push(src[(sd * nh + sh) * nw + sw]);
            }
        }
    }
    G::from_parts(grid.shape(), grid.spacing(), data)
}

/// Centre-crops or centre-pads a grid to `target` shape.
fn fit_centered<G: VoxelGrid>(grid: &G, target: Shape3, spacing: Spacing) -> G {
    let shape = grid.shape();
    // source coordinate = target coordinate + shift (may be negative)
    let shift: [isize; 3] = std::array::from_fn(|a| (shape[a] as isize - target[a] as isize) / 2);
    let src = grid.data();
    let mut data = Vec::with_capacity(voxel_count(target));
    for d in 0..target[0] {
        for h in 0..target[1] {
            for w in 0..target[2] {
                let s = [d as isize + shift[0], h as isize + shift[1], w as isize + shift[2]];
                let inside = (0..3).all(|a| s[a] >= 0 && (s[a] as usize) < shape[a]);
                data.push(if inside {
                    src[(s[0] as usize * shape[1] + s[1] as usize) * shape[2] + s[2] as usize]
                } else {
                    G::PAD
                });
            }
        }
    }
    G::from_parts(target, spacing, data)
}

/// Stochastic augmentation of an aligned CT/label patch pair.
///
/// Applied in order: additive Gaussian noise on the CT, a height flip and a
/// width flip (each with `flip_prob`, shared by both patches), then a voxel
/// size perturbation that resamples both patches to a random spacing in
/// `[1 - jitter, 1 + jitter]` mm per axis and fits them back to the input shape.
pub fn augment<R: Rng + ?Sized>(
    ct: &Volume,
    label: &LabelMask,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<(Volume, LabelMask)> {
    params.validate()?;
    if ct.shape() != label.shape() {
        return Err(Error::usage(format!(
            "CT patch shape {:?} differs from label patch shape {:?}",
            ct.shape(),
            label.shape()
        )));
    }
    let mut ct = ct.clone();
    let mut label = label.clone();

    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::usage(format!("invalid noise distribution: {e}")))?;
        for v in ct.data_mut() {
            *v += normal.sample(rng) as f32;
        }
    }

    for axis in [1, 2] {
        if params.flip_prob > 0.0 && rng.random::<f64>() < params.flip_prob {
            ct = flip_axis(&ct, axis);
            label = flip_axis(&label, axis);
        }
    }

    if params.jitter_mm > 0.0 {
        let base = ct.spacing().as_array();
        let target: [f32; 3] = std::array::from_fn(|a| {
            let factor = rng.random_range(1.0 - params.jitter_mm..=1.0 + params.jitter_mm);
            (base[a] as f64 * factor) as f32
        });
        let target = Spacing::from_array(target);
        let shape = ct.shape();
        let spacing = ct.spacing();
        ct = fit_centered(&resample_nearest(&ct, target)?, shape, spacing);
        label = fit_centered(&resample_nearest(&label, target)?, shape, spacing);
    }

    Ok((ct, label))
}
