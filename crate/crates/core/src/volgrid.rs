//! Volumetric grids and the SVOL binary container.
//!
//! All grids are stored depth-major, row-major: voxel `(d, h, w)` of a grid
//! with shape `(D, H, W)` lives at `(d * H + h) * W + w`.
//!
//! SVOL layout (little-endian):
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 8         | magic `SVOL0001`                        |
//! | 8      | 4         | dtype: 0 = int16, 1 = float32, 2 = uint8 labels |
//! | 12     | 12        | D, H, W as u32                          |
//! | 24     | 12        | spacing sd, sh, sw as f32 (mm)          |
//! | 36     | D·H·W·sz  | payload in linear-index order           |

use crate::error::{Error, Result};

pub const SVOL_MAGIC: &[u8; 8] = b"SVOL0001";
pub const SVOL_HEADER_LEN: usize = 36;

/// Number of segmentation classes (background, bone, nerve).
pub const NUM_CLASSES: usize = 3;

pub type Shape3 = [usize; 3];

/// Segmentation class codes as stored in label masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Bone = 1,
    Nerve = 2,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Background, Class::Bone, Class::Nerve];
    /// Classes reported by the evaluation (background is excluded).
    pub const FOREGROUND: [Class; 2] = [Class::Bone, Class::Nerve];

    pub fn from_code(code: u8) -> Option<Class> {
        match code {
            0 => Some(Class::Background),
            1 => Some(Class::Bone),
            2 => Some(Class::Nerve),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Bone => "bone",
            Class::Nerve => "nerve",
        }
    }
}

/// Voxel size in millimetres along depth, height and width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub sd: f32,
    pub sh: f32,
    pub sw: f32,
}

impl Spacing {
    pub const ISOTROPIC_1MM: Spacing = Spacing {
        sd: 1.0,
        sh: 1.0,
        sw: 1.0,
    };

    pub fn new(sd: f32, sh: f32, sw: f32) -> Result<Self> {
        let s = Spacing { sd, sh, sw };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for v in self.as_array() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::usage(format!("spacing must be positive and finite, got {self:?}")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f32; 3] {
        [self.sd, self.sh, self.sw]
    }

    pub fn from_array(a: [f32; 3]) -> Self {
        Spacing {
            sd: a[0],
            sh: a[1],
            sw: a[2],
        }
    }
}

/// Row-major linear index of `(d, h, w)` in a grid of `shape`.
pub fn linear_index(d: usize, h: usize, w: usize, shape: Shape3) -> Result<usize> {
    let [dd, hh, ww] = shape;
    if d >= dd || h >= hh || w >= ww {
        return Err(Error::Bounds { d, h, w, shape });
    }
    Ok((d * hh + h) * ww + w)
}

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

fn check_shape(shape: Shape3, len: usize) -> Result<()> {
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::usage(format!("grid dimensions must be positive, got {shape:?}")));
    }
    if voxel_count(shape) != len {
        return Err(Error::usage(format!(
            "data length {len} does not match shape {shape:?}"
        )));
    }
    Ok(())
}

/// A CT intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        check_shape(shape, data.len())?;
        spacing.validate()?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Content(format!("non-finite intensity at linear index {i}")));
        }
        Ok(Volume {
            shape,
            spacing,
            data,
        })
    }

    pub fn filled(shape: Shape3, spacing: Spacing, value: f32) -> Result<Self> {
        Volume::new(shape, spacing, vec![value; voxel_count(shape)])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> Result<f32> {
        Ok(self.data[linear_index(d, h, w, self.shape)?])
    }

    /// Applies `f` to every voxel. `f` must keep values finite.
    pub(crate) fn map_in_place(&mut self, f: impl Fn(f32) -> f32) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Per-voxel class codes aligned to a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    shape: Shape3,
    spacing: Spacing,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(shape: Shape3, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        check_shape(shape, data.len())?;
        spacing.validate()?;
        if let Some(i) = data.iter().position(|&c| Class::from_code(c).is_none()) {
            return Err(Error::Content(format!(
                "label code {} at linear index {i} is not a valid class",
                data[i]
            )));
        }
        Ok(LabelMask {
            shape,
            spacing,
            data,
        })
    }

    pub fn filled(shape: Shape3, spacing: Spacing, class: Class) -> Result<Self> {
        LabelMask::new(shape, spacing, vec![class.code(); voxel_count(shape)])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> Result<u8> {
        Ok(self.data[linear_index(d, h, w, self.shape)?])
    }

    /// Number of voxels carrying `class`.
    pub fn count(&self, class: Class) -> usize {
        self.data.iter().filter(|&&c| c == class.code()).count()
    }

    pub(crate) fn set_spacing(&mut self, spacing: Spacing) {
        self.spacing = spacing;
    }
}

/// Shared access to the two scalar grid kinds so geometric operations
/// (resampling, cropping, flipping) are written once.
pub trait VoxelGrid: Sized + Clone {
    type Elem: Copy + PartialEq + std::fmt::Debug + Send + Sync;
    /// Fill value for voxels outside the source grid.
    const PAD: Self::Elem;

    fn shape(&self) -> Shape3;
    fn spacing(&self) -> Spacing;
    fn data(&self) -> &[Self::Elem];
    /// Builds a grid from parts already known to satisfy the type's invariants.
    fn from_parts(shape: Shape3, spacing: Spacing, data: Vec<Self::Elem>) -> Self;
}

impl VoxelGrid for Volume {
    type Elem = f32;
    const PAD: f32 = 0.0;

    fn shape(&self) -> Shape3 {
        self.shape
    }
    fn spacing(&self) -> Spacing {
        self.spacing
    }
    fn data(&self) -> &[f32] {
        &self.data
    }
    fn from_parts(shape: Shape3, spacing: Spacing, data: Vec<f32>) -> Self {
        debug_assert_eq!(voxel_count(shape), data.len());
        Volume { shape, spacing, data }
    }
}

impl VoxelGrid for LabelMask {
    type Elem = u8;
    const PAD: u8 = 0;

    fn shape(&self) -> Shape3 {
        self.shape
    }
    fn spacing(&self) -> Spacing {
        self.spacing
    }
    fn data(&self) -> &[u8] {
        &self.data
    }
    fn from_parts(shape: Shape3, spacing: Spacing, data: Vec<u8>) -> Self {
        debug_assert_eq!(voxel_count(shape), data.len());
        LabelMask { shape, spacing, data }
    }
}

/// Channel-last per-voxel class scores, shape `(D, H, W, 3)`.
///
/// Holds either one softmax output (channels sum to one) or scores
/// accumulated over several overlapping windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    shape: Shape3,
    data: Vec<f32>,
}

impl ProbMask {
    pub fn zeros(shape: Shape3) -> Self {
        ProbMask {
            shape,
            data: vec![0.0; voxel_count(shape) * NUM_CLASSES],
        }
    }

    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) || voxel_count(shape) * NUM_CLASSES != data.len() {
            return Err(Error::usage(format!(
                "probability data length {} does not match shape {shape:?} x {NUM_CLASSES}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Content(format!(
                "probability score {} at index {i} is negative or non-finite",
                data[i]
            )));
        }
        Ok(ProbMask { shape, data })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The three channel scores of voxel `idx` (a linear index).
    pub fn voxel(&self, idx: usize) -> &[f32] {
        &self.data[idx * NUM_CLASSES..(idx + 1) * NUM_CLASSES]
    }
}

/// Element type stored in an SVOL payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum SvolDtype {
    Int16 = 0,
    Float32 = 1,
    Labels = 2,
}

impl SvolDtype {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(SvolDtype::Int16),
            1 => Ok(SvolDtype::Float32),
            2 => Ok(SvolDtype::Labels),
            other => Err(Error::Format(format!("unknown SVOL dtype code {other}"))),
        }
    }

    fn element_size(self) -> usize {
        match self {
            SvolDtype::Int16 => 2,
            SvolDtype::Float32 => 4,
            SvolDtype::Labels => 1,
        }
    }
}

/// Contents of an SVOL file. Int16 payloads decode to a float [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub enum SvolObject {
    Volume(Volume),
    Labels(LabelMask),
}

impl SvolObject {
    pub fn into_volume(self) -> Result<Volume> {
        match self {
            SvolObject::Volume(v) => Ok(v),
            SvolObject::Labels(_) => Err(Error::Format("expected an intensity volume, found a label mask".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelMask> {
        match self {
            SvolObject::Labels(m) => Ok(m),
            SvolObject::Volume(_) => Err(Error::Format("expected a label mask, found an intensity volume".into())),
        }
    }
}

fn write_header(out: &mut Vec<u8>, dtype: SvolDtype, shape: Shape3, spacing: Spacing) {
    out.extend_from_slice(SVOL_MAGIC);
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    for dim in shape {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for s in spacing.as_array() {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

/// Serializes a volume with a float32 payload.
pub fn write_svol_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(SVOL_HEADER_LEN + v.data.len() * 4);
    write_header(&mut out, SvolDtype::Float32, v.shape, v.spacing);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Serializes a volume with an int16 payload. Every voxel must be an
/// integer representable as `i16`.
pub fn write_svol_volume_i16(v: &Volume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(SVOL_HEADER_LEN + v.data.len() * 2);
    write_header(&mut out, SvolDtype::Int16, v.shape, v.spacing);
    for (i, &x) in v.data.iter().enumerate() {
        if x.fract() != 0.0 || x < i16::MIN as f32 || x > i16::MAX as f32 {
            return Err(Error::Content(format!(
                "voxel {i} value {x} is not representable as int16"
            )));
        }
        out.extend_from_slice(&(x as i16).to_le_bytes());
    }
    Ok(out)
}

pub fn write_svol_labels(m: &LabelMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(SVOL_HEADER_LEN + m.data.len());
    write_header(&mut out, SvolDtype::Labels, m.shape, m.spacing);
    out.extend_from_slice(&m.data);
    out
}

pub fn write_svol(obj: &SvolObject) -> Vec<u8> {
    match obj {
        SvolObject::Volume(v) => write_svol_volume(v),
        SvolObject::Labels(m) => write_svol_labels(m),
    }
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn le_f32(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn read_svol(bytes: &[u8]) -> Result<SvolObject> {
    if bytes.len() < SVOL_MAGIC.len() || &bytes[..8] != SVOL_MAGIC {
        return Err(Error::Format("bad SVOL magic".into()));
    }
    if bytes.len() < SVOL_HEADER_LEN {
        return Err(Error::Truncated {
            expected: SVOL_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let dtype = SvolDtype::from_code(le_u32(bytes, 8))?;
    let shape = [
        le_u32(bytes, 12) as usize,
        le_u32(bytes, 16) as usize,
        le_u32(bytes, 20) as usize,
    ];
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::Format(format!("SVOL dimensions must be positive, got {shape:?}")));
    }
    let spacing = Spacing::from_array([le_f32(bytes, 24), le_f32(bytes, 28), le_f32(bytes, 32)]);
    spacing
        .validate()
        .map_err(|_| Error::Format(format!("invalid SVOL spacing {spacing:?}")))?;

    let payload = &bytes[SVOL_HEADER_LEN..];
    let expected = voxel_count(shape)
        .checked_mul(dtype.element_size())
        .ok_or_else(|| Error::Format("SVOL dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }

    match dtype {
        SvolDtype::Labels => Ok(SvolObject::Labels(LabelMask::new(shape, spacing, payload.to_vec())?)),
        SvolDtype::Float32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(SvolObject::Volume(Volume::new(shape, spacing, data)?))
        }
        SvolDtype::Int16 => {
            let data = payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect();
            Ok(SvolObject::Volume(Volume::new(shape, spacing, data)?))
        }
    }
}

pub fn read_svol_file(path: &std::path::Path) -> Result<SvolObject> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_svol(&bytes)
}

pub fn write_svol_file(path: &std::path::Path, obj: &SvolObject) -> Result<()> {
    std::fs::write(path, write_svol(obj)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_index_examples() {
        assert_eq!(linear_index(0, 0, 0, [5, 6, 7]).unwrap(), 0);
        assert_eq!(linear_index(1, 0, 0, [2, 3, 4]).unwrap(), 12);
        // enumerate the 24 cells of a 2x3x4 grid in order; (1,2,3) is last
        let mut n = 0;
        let mut last = None;
        for d in 0..2 {
            for h in 0..3 {
                for w in 0..4 {
                    if (d, h, w) == (1, 2, 3) {
                        last = Some(n);
                    }
                    n += 1;
                }
            }
        }
        assert_eq!(linear_index(1, 2, 3, [2, 3, 4]).unwrap(), last.unwrap());
        assert_eq!(last, Some(23));
    }

    #[test]
    fn linear_index_out_of_bounds() {
        assert!(matches!(linear_index(2, 0, 0, [2, 3, 4]), Err(Error::Bounds { .. })));
        assert!(matches!(linear_index(0, 0, 4, [2, 3, 4]), Err(Error::Bounds { .. })));
    }

    #[test]
    fn linear_index_is_bijective() {
        let shape = [3, 4, 5];
        let mut seen = vec![false; 60];
        for d in 0..3 {
            for h in 0..4 {
                for w in 0..5 {
                    let i = linear_index(d, h, w, shape).unwrap();
                    assert!(!seen[i]);
                    seen[i] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn single_voxel_float_layout() {
        let v = Volume::new([1, 1, 1], Spacing::ISOTROPIC_1MM, vec![0.0]).unwrap();
        let bytes = write_svol_volume(&v);
        let mut expected = b"SVOL0001".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        for _ in 0..3 {
            expected.extend_from_slice(&1u32.to_le_bytes());
        }
        for _ in 0..3 {
            expected.extend_from_slice(&1.0f32.to_le_bytes());
        }
        expected.extend_from_slice(&[0, 0, 0, 0]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn label_payload_bytes() {
        let m = LabelMask::new([2, 1, 1], Spacing::ISOTROPIC_1MM, vec![1, 2]).unwrap();
        let bytes = write_svol_labels(&m);
        assert_eq!(le_u32(&bytes, 8), 2);
        assert_eq!(&bytes[SVOL_HEADER_LEN..], &[0x01, 0x02]);
    }

    #[test]
    fn bad_magic() {
        let v = Volume::new([1, 1, 1], Spacing::ISOTROPIC_1MM, vec![0.0]).unwrap();
        let mut bytes = write_svol_volume(&v);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_svol(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_dtype() {
        let v = Volume::new([1, 1, 1], Spacing::ISOTROPIC_1MM, vec![0.0]).unwrap();
        let mut bytes = write_svol_volume(&v);
        bytes[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(read_svol(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_label_payload() {
        let m = LabelMask::filled([2, 2, 2], Spacing::ISOTROPIC_1MM, Class::Bone).unwrap();
        let mut bytes = write_svol_labels(&m);
        bytes.pop();
        assert!(matches!(
            read_svol(&bytes),
            Err(Error::Truncated { expected: 8, found: 7 })
        ));
    }

    #[test]
    fn invalid_label_code() {
        let m = LabelMask::filled([1, 1, 2], Spacing::ISOTROPIC_1MM, Class::Bone).unwrap();
        let mut bytes = write_svol_labels(&m);
        bytes[SVOL_HEADER_LEN + 1] = 7;
        assert!(matches!(read_svol(&bytes), Err(Error::Content(_))));
    }

    #[test]
    fn int16_round_trip_and_rejection() {
        let v = Volume::new([1, 2, 2], Spacing::new(0.5, 0.7, 0.7).unwrap(), vec![-1000.0, 0.0, 40.0, 1200.0]).unwrap();
        let back = read_svol(&write_svol_volume_i16(&v).unwrap()).unwrap().into_volume().unwrap();
        assert_eq!(back, v);
        let frac = Volume::new([1, 1, 1], Spacing::ISOTROPIC_1MM, vec![0.5]).unwrap();
        assert!(write_svol_volume_i16(&frac).is_err());
    }

    fn arb_shape() -> impl Strategy<Value = Shape3> {
        [1usize..=8, 1usize..=8, 1usize..=8]
    }

    fn arb_spacing() -> impl Strategy<Value = Spacing> {
        [0.1f32..4.0, 0.1f32..4.0, 0.1f32..4.0].prop_map(Spacing::from_array)
    }

    proptest! {
        #[test]
        fn volume_round_trip(shape in arb_shape(), spacing in arb_spacing(), seed in any::<u64>()) {
            let n = voxel_count(shape);
            let data: Vec<f32> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 10007) as f32) * 0.37 - 1500.0).collect();
            let v = Volume::new(shape, spacing, data).unwrap();
            let back = read_svol(&write_svol_volume(&v)).unwrap();
            prop_assert_eq!(back, SvolObject::Volume(v));
        }

        #[test]
        fn label_round_trip(shape in arb_shape(), spacing in arb_spacing(), codes in proptest::collection::vec(0u8..3, 512)) {
            let n = voxel_count(shape);
            let m = LabelMask::new(shape, spacing, codes[..n].to_vec()).unwrap();
            let back = read_svol(&write_svol_labels(&m)).unwrap();
            prop_assert_eq!(back, SvolObject::Labels(m));
        }
    }
}
