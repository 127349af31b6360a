//! Synthetic CT-like phantoms with bone-analog solids and thin nerve-analog
//! tubes, plus exact labels.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::volgrid::{
    voxel_count, write_svol_labels, write_svol_volume_i16, Class, LabelMask, Shape3, Spacing, Volume,
};

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_TAG: &str = "# phantom-manifest v1";

/// Mean and standard deviation of a tissue band, in HU-like units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub mean: f32,
    pub sigma: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomConfig {
    pub shape: Shape3,
    pub spacing: Spacing,
    pub background: Band,
    pub bone: Band,
    pub nerve: Band,
    /// Inclusive tube radius range in voxels.
    pub nerve_radius: (f32, f32),
    /// Inclusive edge length range of bone solids in voxels.
    pub bone_size: (usize, usize),
    pub bone_count: (usize, usize),
    pub nerve_count: (usize, usize),
    /// Straight pieces per nerve centerline.
    pub nerve_segments: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [48, 64, 64],
            spacing: Spacing::ISOTROPIC_1MM,
            background: Band {
                mean: -50.0,
                sigma: 30.0,
            },
            bone: Band {
                mean: 700.0,
                sigma: 80.0,
            },
            nerve: Band {
                mean: 60.0,
                sigma: 20.0,
            },
            nerve_radius: (1.0, 3.0),
            bone_size: (8, 18),
            bone_count: (1, 2),
            nerve_count: (2, 4),
            nerve_segments: 3,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        self.spacing.validate()?;
        let bands = [self.background, self.nerve, self.bone];
        if bands.iter().any(|b| !(b.mean.is_finite() && b.sigma >= 0.0 && b.sigma.is_finite())) {
            return Err(Error::usage("intensity bands need finite means and nonnegative sigmas"));
        }
        if !(self.background.mean < self.nerve.mean && self.nerve.mean < self.bone.mean) {
            return Err(Error::usage("intensity band means must satisfy background < nerve < bone"));
        }
        let (r0, r1) = self.nerve_radius;
        if !(r0 >= 1.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::usage(format!("nerve radius range {r0}..{r1} must satisfy 1 <= min <= max")));
        }
        let ranges = [("bone_size", self.bone_size), ("bone_count", self.bone_count), ("nerve_count", self.nerve_count)];
        for (name, (lo, hi)) in ranges {
            if lo == 0 || lo > hi {
                return Err(Error::usage(format!("{name} range {lo}..{hi} must satisfy 1 <= min <= max")));
            }
        }
        if self.nerve_segments == 0 {
            return Err(Error::usage("nerve_segments must be >= 1"));
        }
        let min_dim = self.bone_size.1.max(2 * r1.ceil() as usize + 3);
        if self.shape.iter().any(|&s| s < min_dim) {
            return Err(Error::usage(format!(
                "phantom shape {:?} too small for the configured structures (need >= {min_dim} per axis)",
                self.shape
            )));
        }
        Ok(())
    }

    /// Stable digest of every field; changes iff the configuration changes.
    pub fn hash_hex(&self) -> String {
        let mut s = String::new();
        let f = |v: f32| v.to_bits();
        let _ = write!(
            s,
            "shape={:?};spacing={:?};bg={},{};bone={},{};nerve={},{};radius={},{};bone_size={:?};bone_count={:?};nerve_count={:?};segments={};seed={}",
            self.shape,
            self.spacing.as_array().map(f),
            f(self.background.mean),
            f(self.background.sigma),
            f(self.bone.mean),
            f(self.bone.sigma),
            f(self.nerve.mean),
            f(self.nerve.sigma),
            f(self.nerve_radius.0),
            f(self.nerve_radius.1),
            self.bone_size,
            self.bone_count,
            self.nerve_count,
            self.nerve_segments,
            self.seed
        );
        hex::encode(Sha256::digest(s.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoneSolid {
    /// Axis-aligned box, inclusive-exclusive voxel bounds.
    Block { lo: [f32; 3], hi: [f32; 3] },
    /// Cylinder along `axis` between `lo` and `hi` on that axis.
    Cylinder {
        axis: usize,
        center: [f32; 2],
        radius: f32,
        lo: f32,
        hi: f32,
    },
}

impl BoneSolid {
    fn contains(&self, p: [f32; 3]) -> bool {
        match *self {
            BoneSolid::Block { lo, hi } => (0..3).all(|i| p[i] >= lo[i] && p[i] < hi[i]),
            BoneSolid::Cylinder {
                axis,
                center,
                radius,
                lo,
                hi,
            } => {
                let others: Vec<usize> = (0..3).filter(|&i| i != axis).collect();
                let a = p[others[0]] - center[0];
                let b = p[others[1]] - center[1];
                p[axis] >= lo && p[axis] < hi && a * a + b * b <= radius * radius
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NerveTube {
    pub points: Vec<[f32; 3]>,
    pub radius: f32,
}

impl NerveTube {
    fn contains(&self, p: [f32; 3]) -> bool {
        self.points
            .windows(2)
            .any(|s| segment_dist2(p, s[0], s[1]) <= self.radius * self.radius)
    }
}

fn segment_dist2(p: [f32; 3], a: [f32; 3], b: [f32; 3]) -> f32 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f32>();
    let t = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f32>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum()
}

/// The structures of one phantom, in voxel coordinates (voxel centres at integers).
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub bones: Vec<BoneSolid>,
    pub nerves: Vec<NerveTube>,
}

impl PhantomGeometry {
    /// Class of the voxel centred at `p`; bone wins over nerve.
    pub fn class_at(&self, p: [f32; 3]) -> Class {
        if self.bones.iter().any(|b| b.contains(p)) {
            Class::Bone
        } else if self.nerves.iter().any(|n| n.contains(p)) {
            Class::Nerve
        } else {
            Class::Background
        }
    }

    pub fn rasterize(&self, shape: Shape3, spacing: Spacing) -> LabelMask {
        let [dd, hh, ww] = shape;
        let mut data = Vec::with_capacity(voxel_count(shape));
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    data.push(self.class_at([d as f32, h as f32, w as f32]).code());
                }
            }
        }
        LabelMask::new(shape, spacing, data).expect("codes come from Class")
    }
}

fn sample_bone<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> BoneSolid {
    let (s0, s1) = cfg.bone_size;
    if rng.random_bool(0.5) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for i in 0..3 {
            let len = rng.random_range(s0..=s1);
            let start = rng.random_range(0..=cfg.shape[i] - len);
            lo[i] = start as f32;
            hi[i] = (start + len) as f32;
        }
        BoneSolid::Block { lo, hi }
    } else {
        let axis = rng.random_range(0..3);
        let len = rng.random_range(s0..=s1);
        let start = rng.random_range(0..=cfg.shape[axis] - len);
        let diameter = rng.random_range(s0..=s1);
        let radius = diameter as f32 / 2.0;
        let others: Vec<usize> = (0..3).filter(|&i| i != axis).collect();
        let center = [0, 1].map(|k| {
            let n = cfg.shape[others[k]] as f32;
            rng.random_range(radius..=(n - 1.0 - radius).max(radius))
        });
        BoneSolid::Cylinder {
            axis,
            center,
            radius,
            lo: start as f32,
            hi: (start + len) as f32,
        }
    }
}

/// Nerve centerlines run along depth, drifting sideways at each control point.
fn sample_nerve<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> NerveTube {
    let (r0, r1) = cfg.nerve_radius;
    let radius = if r1 > r0 { rng.random_range(r0..=r1) } else { r0 };
    let [dd, hh, ww] = cfg.shape.map(|s| s as f32);
    let margin = radius + 1.0;
    let segs = cfg.nerve_segments;
    let mut lateral = [rng.random_range(margin..=hh - 1.0 - margin), rng.random_range(margin..=ww - 1.0 - margin)];
    let max_step = [hh, ww].map(|n| n / 4.0);
    let mut points = Vec::with_capacity(segs + 1);
    for k in 0..=segs {
        let d = (dd - 1.0) * k as f32 / segs as f32;
        points.push([d, lateral[0], lateral[1]]);
        for (i, lim) in [hh, ww].into_iter().enumerate() {
            let step = rng.random_range(-max_step[i]..=max_step[i]);
            lateral[i] = (lateral[i] + step).clamp(margin, lim - 1.0 - margin);
        }
    }
    NerveTube { points, radius }
}

pub fn sample_geometry<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> PhantomGeometry {
    let nb = rng.random_range(cfg.bone_count.0..=cfg.bone_count.1);
    let bones = (0..nb).map(|_| sample_bone(cfg, rng)).collect();
    let nn = rng.random_range(cfg.nerve_count.0..=cfg.nerve_count.1);
    let nerves = (0..nn).map(|_| sample_nerve(cfg, rng)).collect();
    PhantomGeometry { bones, nerves }
}

/// Geometry draws allowed before giving up on a layout that shows every class.
const MAX_LAYOUT_ATTEMPTS: usize = 64;

/// Samples one phantom. Intensities are whole numbers so int16 storage is exact.
pub fn generate_case_with_geometry(cfg: &PhantomConfig, case_seed: u64) -> Result<(Volume, LabelMask, PhantomGeometry)> {
    cfg.validate()?;
    let mut rng = stream(case_seed, &[]);
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let geometry = sample_geometry(cfg, &mut rng);
        let mask = geometry.rasterize(cfg.shape, cfg.spacing);
        if Class::ALL.iter().any(|&c| mask.count(c) == 0) {
            continue;
        }
        let dists = [cfg.background, cfg.bone, cfg.nerve].map(|b| {
            Normal::new(b.mean as f64, b.sigma as f64).expect("validated band")
        });
        let data = mask
            .data()
            .iter()
            .map(|&c| dists[c as usize].sample(&mut rng).round().clamp(-32768.0, 32767.0) as f32)
            .collect();
        let ct = Volume::new(cfg.shape, cfg.spacing, data)?;
        return Ok((ct, mask, geometry));
    }
    Err(Error::usage(format!(
        "could not place structures showing every class in shape {:?}",
        cfg.shape
    )))
}

pub fn generate_case(cfg: &PhantomConfig, case_seed: u64) -> Result<(Volume, LabelMask)> {
    generate_case_with_geometry(cfg, case_seed).map(|(v, m, _)| (v, m))
}

/// Per-case seed for case `id` of a dataset generated with `cfg.seed`.
pub fn case_seed(cfg: &PhantomConfig, id: usize) -> u64 {
    derive_seed(cfg.seed, &[0x7068_616e, id as u64])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: usize,
    pub seed: u64,
    /// Paths relative to the manifest directory.
    pub ct_path: PathBuf,
    pub label_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_TAG} config_hash={} cases={}\n", self.config_hash, self.entries.len());
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {} {}", e.id, e.seed, e.ct_path.display(), e.label_path.display());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Format("empty manifest".into()))?;
        let rest = header
            .strip_prefix(MANIFEST_TAG)
            .ok_or_else(|| Error::Format("manifest header missing".into()))?;
        let mut config_hash = None;
        let mut cases = None;
        for tok in rest.split_whitespace() {
            match tok.split_once('=') {
                Some(("config_hash", v)) => config_hash = Some(v.to_string()),
                Some(("cases", v)) => {
                    cases = Some(v.parse::<usize>().map_err(|_| Error::Format(format!("bad case count {v:?}")))?)
                }
                _ => return Err(Error::Format(format!("unexpected manifest header field {tok:?}"))),
            }
        }
        let config_hash = config_hash.ok_or_else(|| Error::Format("manifest header lacks config_hash".into()))?;
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("manifest line {}: expected `id seed ct_path label_path`", i + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad());
            }
            entries.push(ManifestEntry {
                id: f[0].parse().map_err(|_| bad())?,
                seed: f[1].parse().map_err(|_| bad())?,
                ct_path: f[2].into(),
                label_path: f[3].into(),
            });
        }
        if cases.is_some_and(|n| n != entries.len()) {
            return Err(Error::Format(format!(
                "manifest declares {} cases but lists {}",
                cases.unwrap_or(0),
                entries.len()
            )));
        }
        Ok(Manifest { config_hash, entries })
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Manifest::parse(&text)
    }
}

/// Generates `n_cases` phantoms into `out_dir` as `ct_{i}.svol` / `label_{i}.svol`
/// plus a manifest.
pub fn generate_dataset(cfg: &PhantomConfig, n_cases: usize, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if n_cases == 0 {
        return Err(Error::usage("phantom dataset needs at least one case"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries: Vec<ManifestEntry> = (0..n_cases)
        .into_par_iter()
        .map(|id| -> Result<ManifestEntry> {
            let seed = case_seed(cfg, id);
            let (ct, mask) = generate_case(cfg, seed)?;
            let entry = ManifestEntry {
                id,
                seed,
                ct_path: format!("ct_{id}.svol").into(),
                label_path: format!("label_{id}.svol").into(),
            };
            write_bytes(&out_dir.join(&entry.ct_path), &write_svol_volume_i16(&ct)?)?;
            write_bytes(&out_dir.join(&entry.label_path), &write_svol_labels(&mask))?;
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        config_hash: cfg.hash_hex(),
        entries,
    };
    write_bytes(&out_dir.join(MANIFEST_NAME), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
