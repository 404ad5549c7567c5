//! CT volumes and the MetaImage (`.mhd` + `.raw`) container.
//!
//! Voxels are stored as signed 16-bit Hounsfield units, x fastest and z
//! slowest. World coordinates follow the MetaImage convention: the world
//! position of voxel `(i, j, k)` is `origin + (i, j, k) * spacing`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("malformed header line {line}: {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("missing header key {0}")]
    MissingKey(&'static str),
    #[error("invalid value for {key}: {value:?}")]
    InvalidValue { key: String, value: String },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("payload size mismatch: expected {expected} bytes, got {actual}")]
    Size { expected: usize, actual: usize },
    #[error("degenerate size: {0}")]
    DegenerateSize(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Grid geometry of a volume: extent, voxel size and world placement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeGeometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl VolumeGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::Invalid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::Invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::Invalid(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn world_to_voxel(&self, point_mm: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (point_mm[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn voxel_to_world(&self, voxel: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + voxel[a] * self.spacing[a])
    }

    /// Whether a continuous voxel position lies within the sampled grid
    /// (half a voxel of slack on either side of each axis).
    pub fn contains_voxel(&self, voxel: [f64; 3]) -> bool {
        (0..3).all(|a| voxel[a] >= -0.5 && voxel[a] < self.dims[a] as f64 - 0.5)
    }

    /// Mean in-plane (x, y) spacing.
    pub fn inplane_spacing(&self) -> f64 {
        0.5 * (self.spacing[0] + self.spacing[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    geometry: VolumeGeometry,
    voxels: Vec<i16>,
}

impl CtVolume {
    pub fn new(geometry: VolumeGeometry, voxels: Vec<i16>) -> Result<Self, VolumeError> {
        if voxels.len() != geometry.voxel_count() {
            return Err(VolumeError::Invalid(format!(
                "voxel count {} does not match dims {:?}",
                voxels.len(),
                geometry.dims
            )));
        }
        Ok(Self { geometry, voxels })
    }

    pub fn filled(geometry: VolumeGeometry, value: i16) -> Self {
        let n = geometry.voxel_count();
        Self { geometry, voxels: vec![value; n] }
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<i16> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.geometry.dims;
        x + nx * (y + ny * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[self.index(x, y, z)]
    }

    /// One axial slice (fixed z), x fastest.
    pub fn slice(&self, z: usize) -> &[i16] {
        let [nx, ny, _] = self.geometry.dims;
        &self.voxels[z * nx * ny..(z + 1) * nx * ny]
    }

    pub fn world_to_voxel(&self, point_mm: [f64; 3]) -> [f64; 3] {
        self.geometry.world_to_voxel(point_mm)
    }

    pub fn voxel_to_world(&self, voxel: [f64; 3]) -> [f64; 3] {
        self.geometry.voxel_to_world(voxel)
    }

    pub fn min_max(&self) -> (i16, i16) {
        self.voxels.iter().fold((i16::MAX, i16::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub fn world_to_voxel(volume: &CtVolume, point_mm: [f64; 3]) -> [f64; 3] {
    volume.world_to_voxel(point_mm)
}

pub fn voxel_to_world(volume: &CtVolume, voxel: [f64; 3]) -> [f64; 3] {
    volume.voxel_to_world(voxel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Char,
    UChar,
    Short,
    UShort,
    Int,
    UInt,
    Float,
    Double,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self, VolumeError> {
        Ok(match s {
            "MET_CHAR" => Self::Char,
            "MET_UCHAR" => Self::UChar,
            "MET_SHORT" => Self::Short,
            "MET_USHORT" => Self::UShort,
            "MET_INT" => Self::Int,
            "MET_UINT" => Self::UInt,
            "MET_FLOAT" => Self::Float,
            "MET_DOUBLE" => Self::Double,
            other => return Err(VolumeError::Unsupported(format!("ElementType {other}"))),
        })
    }

    pub fn width(self) -> usize {
        match self {
            Self::Char | Self::UChar => 1,
            Self::Short | Self::UShort => 2,
            Self::Int | Self::UInt | Self::Float => 4,
            Self::Double => 8,
        }
    }

    fn decode(self, bytes: &[u8], msb: bool) -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let arr = bytes.try_into().expect("element width");
                if msb {
                    <$t>::from_be_bytes(arr) as f64
                } else {
                    <$t>::from_le_bytes(arr) as f64
                }
            }};
        }
        match self {
            Self::Char => bytes[0] as i8 as f64,
            Self::UChar => bytes[0] as f64,
            Self::Short => num!(i16),
            Self::UShort => num!(u16),
            Self::Int => num!(i32),
            Self::UInt => num!(u32),
            Self::Float => num!(f32),
            Self::Double => num!(f64),
        }
    }
}

/// Parsed MetaImage header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub ndims: usize,
    pub dim_size: [usize; 3],
    pub element_spacing: [f64; 3],
    pub offset: [f64; 3],
    pub element_type: ElementType,
    pub element_data_file: String,
    pub byte_order_msb: bool,
    pub transform_matrix: Option<[f64; 9]>,
}

impl VolumeHeader {
    pub fn parse(text: &str) -> Result<Self, VolumeError> {
        let mut ndims = None;
        let mut dim_size = None;
        let mut spacing = None;
        let mut offset = None;
        let mut element_type = None;
        let mut data_file = None;
        let mut msb = false;
        let mut transform = None;

        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(VolumeError::MalformedLine { line: i + 1, text: raw.to_string() });
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(VolumeError::MalformedLine { line: i + 1, text: raw.to_string() });
            }
            match key {
                "NDims" => ndims = Some(parse_scalar::<usize>(key, value)?),
                "DimSize" => dim_size = Some(parse_triple::<usize>(key, value)?),
                "ElementSpacing" | "ElementSize" => {
                    if key == "ElementSpacing" || spacing.is_none() {
                        spacing = Some(parse_triple::<f64>(key, value)?);
                    }
                }
                "Offset" | "Origin" | "Position" => offset = Some(parse_triple::<f64>(key, value)?),
                "ElementType" => element_type = Some(ElementType::parse(value)?),
                "ElementDataFile" => data_file = Some(value.to_string()),
                "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => msb = parse_bool(key, value)?,
                "CompressedData" => {
                    if parse_bool(key, value)? {
                        return Err(VolumeError::Unsupported("compressed payload".into()));
                    }
                }
                "TransformMatrix" | "Rotation" | "Orientation" => {
                    let vals = parse_list::<f64>(key, value)?;
                    let m: [f64; 9] = vals
                        .try_into()
                        .map_err(|_| VolumeError::InvalidValue { key: key.to_string(), value: value.to_string() })?;
                    transform = Some(m);
                }
                _ => {}
            }
        }

        let ndims = ndims.ok_or(VolumeError::MissingKey("NDims"))?;
        if ndims != 3 {
            return Err(VolumeError::Unsupported(format!("NDims = {ndims}, only 3 is supported")));
        }
        let dim_size = dim_size.ok_or(VolumeError::MissingKey("DimSize"))?;
        if dim_size.contains(&0) {
            return Err(VolumeError::InvalidValue { key: "DimSize".into(), value: format!("{dim_size:?}") });
        }
        if let Some(m) = transform {
            const IDENTITY: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
            if m.iter().zip(IDENTITY).any(|(a, b)| (a - b).abs() > 1e-6) {
                return Err(VolumeError::Unsupported(format!("non-identity TransformMatrix {m:?}")));
            }
        }
        Ok(Self {
            ndims,
            dim_size,
            element_spacing: spacing.unwrap_or([1.0; 3]),
            offset: offset.unwrap_or([0.0; 3]),
            element_type: element_type.ok_or(VolumeError::MissingKey("ElementType"))?,
            element_data_file: data_file.ok_or(VolumeError::MissingKey("ElementDataFile"))?,
            byte_order_msb: msb,
            transform_matrix: transform,
        })
    }

    pub fn expected_payload_len(&self) -> usize {
        self.dim_size.iter().product::<usize>() * self.element_type.width()
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, VolumeError> {
    value.parse().map_err(|_| VolumeError::InvalidValue { key: key.to_string(), value: value.to_string() })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, VolumeError> {
    value.split_whitespace().map(|v| parse_scalar(key, v)).collect()
}

fn parse_triple<T: std::str::FromStr + Copy>(key: &str, value: &str) -> Result<[T; 3], VolumeError> {
    let vals = parse_list::<T>(key, value)?;
    vals.try_into().map_err(|_| VolumeError::InvalidValue { key: key.to_string(), value: value.to_string() })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, VolumeError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(VolumeError::InvalidValue { key: key.to_string(), value: value.to_string() }),
    }
}

fn to_hu(v: f64) -> i16 {
    v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Builds a volume from header text and the raw payload it describes.
pub fn parse_mhd(header_text: &str, raw_bytes: &[u8]) -> Result<CtVolume, VolumeError> {
    let header = VolumeHeader::parse(header_text)?;
    decode_payload(&header, raw_bytes)
}

fn decode_payload(header: &VolumeHeader, raw_bytes: &[u8]) -> Result<CtVolume, VolumeError> {
    let expected = header.expected_payload_len();
    if raw_bytes.len() != expected {
        return Err(VolumeError::Size { expected, actual: raw_bytes.len() });
    }
    let geometry = VolumeGeometry::new(header.dim_size, header.element_spacing, header.offset)?;
    let et = header.element_type;
    let voxels = if et == ElementType::Short && !header.byte_order_msb {
        raw_bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect()
    } else {
        raw_bytes.chunks_exact(et.width()).map(|c| to_hu(et.decode(c, header.byte_order_msb))).collect()
    };
    CtVolume::new(geometry, voxels)
}

/// Serializes a volume as MET_SHORT little-endian. `data_file` is the name
/// written into `ElementDataFile`.
pub fn write_mhd(volume: &CtVolume, data_file: &str) -> (String, Vec<u8>) {
    let g = volume.geometry();
    let triple = |v: [f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
    let mut header = String::new();
    let _ = writeln!(header, "ObjectType = Image");
    let _ = writeln!(header, "NDims = 3");
    let _ = writeln!(header, "BinaryData = True");
    let _ = writeln!(header, "BinaryDataByteOrderMSB = False");
    let _ = writeln!(header, "CompressedData = False");
    let _ = writeln!(header, "TransformMatrix = 1 0 0 0 1 0 0 0 1");
    let _ = writeln!(header, "Offset = {}", triple(g.origin));
    let _ = writeln!(header, "CenterOfRotation = 0 0 0");
    let _ = writeln!(header, "AnatomicalOrientation = RAI");
    let _ = writeln!(header, "ElementSpacing = {}", triple(g.spacing));
    let _ = writeln!(header, "DimSize = {} {} {}", g.dims[0], g.dims[1], g.dims[2]);
    let _ = writeln!(header, "ElementType = MET_SHORT");
    let _ = writeln!(header, "ElementDataFile = {data_file}");

    let mut raw = Vec::with_capacity(volume.voxels().len() * 2);
    for v in volume.voxels() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    (header, raw)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io { path: path.to_path_buf(), source }
}

/// Reads an `.mhd` file and its payload (a sibling file, or `LOCAL` data
/// appended after the header).
pub fn read_mhd(path: &Path) -> Result<CtVolume, VolumeError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let text = String::from_utf8_lossy(&bytes);
    // Only the header is text; locate ElementDataFile, which ends it.
    let mut header_end = None;
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        offset += line.len();
        if line.trim_start().starts_with("ElementDataFile") {
            header_end = Some(offset);
            break;
        }
    }
    let header_end = header_end.ok_or(VolumeError::MissingKey("ElementDataFile"))?;
    let header = VolumeHeader::parse(&text[..header_end])?;
    if header.element_data_file.eq_ignore_ascii_case("LOCAL") {
        return decode_payload(&header, &bytes[header_end..]);
    }
    let raw_path = path.parent().unwrap_or_else(|| Path::new(".")).join(&header.element_data_file);
    let raw = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    decode_payload(&header, &raw)
}

/// Writes `<stem>.mhd` and `<stem>.raw` next to each other.
pub fn save_mhd(volume: &CtVolume, mhd_path: &Path) -> Result<(), VolumeError> {
    let raw_path = mhd_path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| VolumeError::Invalid(format!("bad path {}", mhd_path.display())))?
        .to_string();
    let (header, raw) = write_mhd(volume, &raw_name);
    fs::write(mhd_path, header).map_err(io_err(mhd_path))?;
    fs::write(&raw_path, raw).map_err(io_err(&raw_path))?;
    Ok(())
}

/// Trilinear resampling to isotropic spacing. The origin is kept, output
/// voxel `i` samples the input at physical offset `i * target`.
pub fn resample_isotropic(volume: &CtVolume, target_spacing_mm: f64) -> Result<CtVolume, VolumeError> {
    if !(target_spacing_mm > 0.0) || !target_spacing_mm.is_finite() {
        return Err(VolumeError::Invalid(format!("target spacing must be positive, got {target_spacing_mm}")));
    }
    let g = volume.geometry();
    let out_dims: [usize; 3] =
        std::array::from_fn(|a| (g.dims[a] as f64 * g.spacing[a] / target_spacing_mm).round() as usize);
    if out_dims.contains(&0) {
        return Err(VolumeError::DegenerateSize(format!(
            "target spacing {target_spacing_mm} collapses dims {:?} to {out_dims:?}",
            g.dims
        )));
    }

    // Per-axis source index pairs and weights.
    let axis_samples = |a: usize| -> Vec<(usize, usize, f64)> {
        let n = g.dims[a];
        (0..out_dims[a])
            .map(|i| {
                let pos = (i as f64 * target_spacing_mm / g.spacing[a]).clamp(0.0, (n - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let xs = axis_samples(0);
    let ys = axis_samples(1);
    let zs = axis_samples(2);

    let mut out = Vec::with_capacity(out_dims.iter().product());
    for &(z0, z1, wz) in &zs {
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let v = |x, y, z| volume.get(x, y, z) as f64;
                let c00 = v(x0, y0, z0) * (1.0 - wx) + v(x1, y0, z0) * wx;
                let c10 = v(x0, y1, z0) * (1.0 - wx) + v(x1, y1, z0) * wx;
                let c01 = v(x0, y0, z1) * (1.0 - wx) + v(x1, y0, z1) * wx;
                let c11 = v(x0, y1, z1) * (1.0 - wx) + v(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                out.push(to_hu(c0 * (1.0 - wz) + c1 * wz));
            }
        }
    }
    let geometry = VolumeGeometry::new(out_dims, [target_spacing_mm; 3], g.origin)?;
    CtVolume::new(geometry, out)
}

/// Axes to mirror.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlipAxes {
    pub x: bool,
    pub y: bool,
    pub z: bool,
}

impl FlipAxes {
    pub const NONE: Self = Self { x: false, y: false, z: false };

    fn as_array(self) -> [bool; 3] {
        [self.x, self.y, self.z]
    }

    /// Parses strings like `"xz"`; the empty string means no axes.
    pub fn parse(s: &str) -> Option<Self> {
        let mut axes = Self::NONE;
        for c in s.chars() {
            match c.to_ascii_lowercase() {
                'x' => axes.x = true,
                'y' => axes.y = true,
                'z' => axes.z = true,
                _ => return None,
            }
        }
        Some(axes)
    }
}

pub fn flip_volume(volume: &CtVolume, axes: FlipAxes) -> CtVolume {
    let [nx, ny, nz] = volume.dims();
    let f = axes.as_array();
    let mut out = Vec::with_capacity(volume.voxels().len());
    for z in 0..nz {
        let sz = if f[2] { nz - 1 - z } else { z };
        for y in 0..ny {
            let sy = if f[1] { ny - 1 - y } else { y };
            for x in 0..nx {
                let sx = if f[0] { nx - 1 - x } else { x };
                out.push(volume.get(sx, sy, sz));
            }
        }
    }
    CtVolume { geometry: volume.geometry, voxels: out }
}

/// Where a world point lands after `flip_volume` with the same axes.
pub fn flip_point(geometry: &VolumeGeometry, axes: FlipAxes, point_mm: [f64; 3]) -> [f64; 3] {
    let f = axes.as_array();
    std::array::from_fn(|a| {
        if f[a] {
            let extent = (geometry.dims[a] - 1) as f64 * geometry.spacing[a];
            geometry.origin[a] + extent - (point_mm[a] - geometry.origin[a])
        } else {
            point_mm[a]
        }
    })
}
