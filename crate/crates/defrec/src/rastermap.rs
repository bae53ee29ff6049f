//! Grids, defined-ness and raster maps in canonical coordinates.
//!
//! Every per-point quantity in the engine (geometry, derivatives, flow,
//! texture, local deformation) lives on an integer grid addressed by
//! *canonical* coordinates `(u, v)`. A [`GridDomain`] is a rectangle of that
//! coordinate space; its `offset` places the rectangle, so grids can extend
//! to negative coordinates as the model grows past the original image
//! borders. A [`ParamSet`] is a subset of a domain's cells, and a
//! [`RasterMap`] attaches channel values to the defined cells. Definedness is
//! explicit: there are no sentinel values, and values at undefined cells are
//! zeroed and never read.
//!
//! Maps are value objects. Operations return new maps; nothing mutates in
//! place once a map is handed off.

use std::fmt;
use std::fs;
use std::io::{self, Read as _, Write as _};
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Number of pixels added per growing side when a domain has to expand.
pub const GROWTH_MARGIN: i32 = 16;

/// Errors from raster-map operations and the RTF container format.
#[derive(Debug, Error)]
pub enum RasterError {
    #[error("target domain {target} does not contain source domain {have}")]
    DomainTooSmall { have: GridDomain, target: GridDomain },
    #[error("crop domain {target} is not contained in source domain {have}")]
    CropOutside { have: GridDomain, target: GridDomain },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad magic {found:02x?}, expected \"RTEN\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported format version {found}")]
    BadVersion { path: PathBuf, found: u32 },
    #[error("{path}: unknown dtype code {code}")]
    UnknownDtype { path: PathBuf, code: u32 },
    #[error("{path}: dtype is {found:?} but the read requires {expected:?}")]
    DtypeMismatch { path: PathBuf, expected: Dtype, found: Dtype },
    #[error("{path}: truncated payload, wanted {wanted} more bytes")]
    Truncated { path: PathBuf, wanted: usize },
    #[error("{path}: implausible header ({width}x{height}, {channels} channels)")]
    BadShape { path: PathBuf, width: u32, height: u32, channels: u32 },
}

// ===================== grid domain =====================

/// A rectangle of canonical grid coordinates.
///
/// Cell `(u, v)` is inside the domain when `offset.0 <= u <
/// offset.0 + width` and likewise for `v`. Linear indexing is row-major
/// with `v` as the slow axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDomain {
    pub width: usize,
    pub height: usize,
    /// Canonical coordinate of the cell at linear index 0.
    pub offset: (i32, i32),
}

impl GridDomain {
    pub fn new(width: usize, height: usize, offset: (i32, i32)) -> Self {
        Self { width, height, offset }
    }

    /// Image-sized domain whose center cell sits at the canonical origin.
    ///
    /// Frame inputs always use this placement, so image pixel `(i, j)`
    /// and canonical cell `(i - w/2, j - h/2)` are the same point.
    pub fn image_centered(width: usize, height: usize) -> Self {
        Self { width, height, offset: (-((width / 2) as i32), -((height / 2) as i32)) }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, u: i32, v: i32) -> bool {
        u >= self.offset.0
            && v >= self.offset.1
            && (u - self.offset.0) < self.width as i32
            && (v - self.offset.1) < self.height as i32
    }

    pub fn contains_domain(&self, other: &GridDomain) -> bool {
        other.is_empty()
            || (self.contains(other.offset.0, other.offset.1)
                && self.contains(
                    other.offset.0 + other.width as i32 - 1,
                    other.offset.1 + other.height as i32 - 1,
                ))
    }

    /// Linear index of a canonical cell, if inside the domain.
    #[inline]
    pub fn index_of(&self, u: i32, v: i32) -> Option<usize> {
        if self.contains(u, v) {
            let i = (u - self.offset.0) as usize;
            let j = (v - self.offset.1) as usize;
            Some(j * self.width + i)
        } else {
            None
        }
    }

    /// Canonical coordinate of a linear index.
    #[inline]
    pub fn coord_of(&self, index: usize) -> (i32, i32) {
        let i = (index % self.width) as i32;
        let j = (index / self.width) as i32;
        (self.offset.0 + i, self.offset.1 + j)
    }

    /// Row-major iteration over all cells of the domain.
    pub fn iter(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        let d = *self;
        (0..d.len()).map(move |k| d.coord_of(k))
    }

    /// Smallest domain containing `self` and every listed cell, with
    /// [`GROWTH_MARGIN`] added on each side that had to move.
    pub fn grown_to_include(&self, cells: impl IntoIterator<Item = (i32, i32)>) -> GridDomain {
        let mut lo = (self.offset.0, self.offset.1);
        let mut hi = (
            self.offset.0 + self.width as i32 - 1,
            self.offset.1 + self.height as i32 - 1,
        );
        let mut grew = [false; 4];
        for (u, v) in cells {
            if u < lo.0 {
                lo.0 = u;
                grew[0] = true;
            }
            if v < lo.1 {
                lo.1 = v;
                grew[1] = true;
            }
            if u > hi.0 {
                hi.0 = u;
                grew[2] = true;
            }
            if v > hi.1 {
                hi.1 = v;
                grew[3] = true;
            }
        }
        if grew[0] {
            lo.0 -= GROWTH_MARGIN;
        }
        if grew[1] {
            lo.1 -= GROWTH_MARGIN;
        }
        if grew[2] {
            hi.0 += GROWTH_MARGIN;
        }
        if grew[3] {
            hi.1 += GROWTH_MARGIN;
        }
        GridDomain {
            width: (hi.0 - lo.0 + 1) as usize,
            height: (hi.1 - lo.1 + 1) as usize,
            offset: lo,
        }
    }
}

impl fmt::Display for GridDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@({},{})", self.width, self.height, self.offset.0, self.offset.1)
    }
}

// ===================== parameter set =====================

/// A subset of a domain's cells, stored as an explicit boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSet {
    domain: GridDomain,
    defined: Vec<bool>,
    count: usize,
}

impl ParamSet {
    pub fn empty(domain: GridDomain) -> Self {
        Self { domain, defined: vec![false; domain.len()], count: 0 }
    }

    pub fn full(domain: GridDomain) -> Self {
        Self { domain, defined: vec![true; domain.len()], count: domain.len() }
    }

    pub fn from_fn(domain: GridDomain, mut f: impl FnMut(i32, i32) -> bool) -> Self {
        let mut s = Self::empty(domain);
        for k in 0..domain.len() {
            let (u, v) = domain.coord_of(k);
            if f(u, v) {
                s.defined[k] = true;
                s.count += 1;
            }
        }
        s
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }

    /// Number of defined cells.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    #[inline]
    pub fn contains(&self, u: i32, v: i32) -> bool {
        self.domain.index_of(u, v).map_or(false, |k| self.defined[k])
    }

    pub fn insert(&mut self, u: i32, v: i32) -> bool {
        match self.domain.index_of(u, v) {
            Some(k) if !self.defined[k] => {
                self.defined[k] = true;
                self.count += 1;
                true
            }
            _ => false,
        }
    }

    pub fn remove(&mut self, u: i32, v: i32) -> bool {
        match self.domain.index_of(u, v) {
            Some(k) if self.defined[k] => {
                self.defined[k] = false;
                self.count -= 1;
                true
            }
            _ => false,
        }
    }

    /// Defined cells in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        self.defined
            .iter()
            .enumerate()
            .filter(|(_, d)| **d)
            .map(|(k, _)| self.domain.coord_of(k))
    }

    /// Union over this set's domain; `other` must fit inside it.
    pub fn union(&self, other: &ParamSet) -> ParamSet {
        assert!(
            self.domain.contains_domain(&other.domain),
            "union target domain must contain the other operand"
        );
        let mut out = self.clone();
        for (u, v) in other.iter() {
            out.insert(u, v);
        }
        out
    }

    /// Cells of this set also defined in `other` (any domains).
    pub fn intersection(&self, other: &ParamSet) -> ParamSet {
        ParamSet::from_fn(self.domain, |u, v| self.contains(u, v) && other.contains(u, v))
    }

    /// Cells of this set not defined in `other` (any domains).
    pub fn difference(&self, other: &ParamSet) -> ParamSet {
        ParamSet::from_fn(self.domain, |u, v| self.contains(u, v) && !other.contains(u, v))
    }

    /// Same membership on a larger domain.
    pub fn expand_to(&self, domain: GridDomain) -> Result<ParamSet, RasterError> {
        if !domain.contains_domain(&self.domain) {
            return Err(RasterError::DomainTooSmall { have: self.domain, target: domain });
        }
        let mut out = ParamSet::empty(domain);
        for (u, v) in self.iter() {
            out.insert(u, v);
        }
        Ok(out)
    }
}

// ===================== raster map =====================

/// Storage type of a map's channel payload in the RTF container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::U8),
            _ => None,
        }
    }
}

/// Multi-channel raster over a [`GridDomain`] with explicit definedness.
///
/// Values are stored interleaved per cell (`channels` floats per cell);
/// undefined cells hold zeros and are never exposed by the accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterMap {
    domain: GridDomain,
    channels: usize,
    dtype: Dtype,
    values: Vec<f32>,
    defined: ParamSet,
}

/// 3D surface points, mm.
pub type Point3Map = RasterMap;
/// Tangent derivatives `(dx/du, dy/du, dz/du, dx/dv, dy/dv, dz/dv)`, mm per px.
pub type Deriv6Map = RasterMap;
/// 3D displacements, mm.
pub type Disp3Map = RasterMap;
/// 2D optical flow, px.
pub type Flow2Map = RasterMap;
/// Local deformation `(r1, r2, r3, xi_uu, xi_vv, xi_uv)` per cell.
pub type LocalDefMap = RasterMap;
/// RGB texture in `[0, 1]`.
pub type TextureMap = RasterMap;

impl RasterMap {
    /// Fully undefined f32 map.
    pub fn undefined(domain: GridDomain, channels: usize) -> Self {
        Self {
            domain,
            channels,
            dtype: Dtype::F32,
            values: vec![0.0; domain.len() * channels],
            defined: ParamSet::empty(domain),
        }
    }

    pub fn undefined_u8(domain: GridDomain, channels: usize) -> Self {
        Self { dtype: Dtype::U8, ..Self::undefined(domain, channels) }
    }

    /// Build a map by evaluating `f` at every cell; `None` leaves the cell
    /// undefined.
    pub fn from_fn(
        domain: GridDomain,
        channels: usize,
        mut f: impl FnMut(i32, i32) -> Option<Vec<f32>>,
    ) -> Self {
        let mut m = Self::undefined(domain, channels);
        for k in 0..domain.len() {
            let (u, v) = domain.coord_of(k);
            if let Some(vals) = f(u, v) {
                m.set(u, v, &vals);
            }
        }
        m
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn defined(&self) -> &ParamSet {
        &self.defined
    }

    pub fn is_defined(&self, u: i32, v: i32) -> bool {
        self.defined.contains(u, v)
    }

    /// Channel values at a defined cell.
    #[inline]
    pub fn get(&self, u: i32, v: i32) -> Option<&[f32]> {
        let k = self.domain.index_of(u, v)?;
        if self.defined.contains(u, v) {
            Some(&self.values[k * self.channels..(k + 1) * self.channels])
        } else {
            None
        }
    }

    pub fn set(&mut self, u: i32, v: i32, values: &[f32]) {
        assert_eq!(values.len(), self.channels);
        let k = self
            .domain
            .index_of(u, v)
            .expect("set() outside the map domain");
        self.values[k * self.channels..(k + 1) * self.channels].copy_from_slice(values);
        self.defined.insert(u, v);
    }

    /// Undefine a cell, zeroing its storage.
    pub fn unset(&mut self, u: i32, v: i32) {
        if let Some(k) = self.domain.index_of(u, v) {
            if self.defined.remove(u, v) {
                self.values[k * self.channels..(k + 1) * self.channels].fill(0.0);
            }
        }
    }

    /// Restrict definedness to `keep`, zeroing dropped cells.
    pub fn restricted_to(&self, keep: &ParamSet) -> RasterMap {
        let mut out = self.clone();
        let dropped: Vec<(i32, i32)> =
            out.defined.iter().filter(|&(u, v)| !keep.contains(u, v)).collect();
        for (u, v) in dropped {
            out.unset(u, v);
        }
        out
    }

    /// Bilinear sample at continuous canonical coordinates.
    ///
    /// Only neighbors with nonzero blend weight participate, so a query at
    /// an exact integer coordinate returns that cell's stored values. The
    /// sample is undefined if any participating neighbor is undefined or
    /// outside the domain.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        assert_eq!(out.len(), self.channels);
        if !(x.is_finite() && y.is_finite()) {
            return false;
        }
        let u0 = x.floor();
        let v0 = y.floor();
        let fx = x - u0;
        let fy = y - v0;
        let (u0, v0) = (u0 as i32, v0 as i32);
        out.fill(0.0);
        let mut blend = |u: i32, v: i32, w: f64| -> bool {
            if w == 0.0 {
                return true;
            }
            match self.get(u, v) {
                Some(vals) => {
                    for (o, val) in out.iter_mut().zip(vals) {
                        *o += w * *val as f64;
                    }
                    true
                }
                None => false,
            }
        };
        blend(u0, v0, (1.0 - fx) * (1.0 - fy))
            && blend(u0 + 1, v0, fx * (1.0 - fy))
            && blend(u0, v0 + 1, (1.0 - fx) * fy)
            && blend(u0 + 1, v0 + 1, fx * fy)
    }

    /// Same membership and values on a larger domain.
    pub fn expand_to(&self, domain: GridDomain) -> Result<RasterMap, RasterError> {
        if !domain.contains_domain(&self.domain) {
            return Err(RasterError::DomainTooSmall { have: self.domain, target: domain });
        }
        let mut out = RasterMap {
            domain,
            channels: self.channels,
            dtype: self.dtype,
            values: vec![0.0; domain.len() * self.channels],
            defined: ParamSet::empty(domain),
        };
        for (u, v) in self.defined.iter() {
            let src = self.domain.index_of(u, v).unwrap();
            out.set(u, v, &self.values[src * self.channels..(src + 1) * self.channels]);
        }
        Ok(out)
    }

    /// View of the map restricted to a sub-domain.
    pub fn crop_to(&self, domain: GridDomain) -> Result<RasterMap, RasterError> {
        if !self.domain.contains_domain(&domain) {
            return Err(RasterError::CropOutside { have: self.domain, target: domain });
        }
        let mut out = RasterMap {
            domain,
            channels: self.channels,
            dtype: self.dtype,
            values: vec![0.0; domain.len() * self.channels],
            defined: ParamSet::empty(domain),
        };
        for (u, v) in domain.iter() {
            if let Some(vals) = self.get(u, v) {
                out.set(u, v, vals);
            }
        }
        Ok(out)
    }

    // ===================== typed accessors =====================

    pub fn get3(&self, u: i32, v: i32) -> Option<nalgebra::Vector3<f64>> {
        self.get(u, v)
            .map(|s| nalgebra::Vector3::new(s[0] as f64, s[1] as f64, s[2] as f64))
    }

    pub fn get2(&self, u: i32, v: i32) -> Option<(f64, f64)> {
        self.get(u, v).map(|s| (s[0] as f64, s[1] as f64))
    }

    pub fn get6(&self, u: i32, v: i32) -> Option<[f64; 6]> {
        self.get(u, v).map(|s| {
            let mut a = [0.0; 6];
            for (o, v) in a.iter_mut().zip(s) {
                *o = *v as f64;
            }
            a
        })
    }

    pub fn set3(&mut self, u: i32, v: i32, p: nalgebra::Vector3<f64>) {
        self.set(u, v, &[p.x as f32, p.y as f32, p.z as f32]);
    }

    pub fn set6(&mut self, u: i32, v: i32, a: [f64; 6]) {
        let vals: Vec<f32> = a.iter().map(|x| *x as f32).collect();
        self.set(u, v, &vals);
    }

    pub fn sample3(&self, x: f64, y: f64) -> Option<nalgebra::Vector3<f64>> {
        let mut out = [0.0; 3];
        if self.sample_bilinear(x, y, &mut out) {
            Some(nalgebra::Vector3::new(out[0], out[1], out[2]))
        } else {
            None
        }
    }

    pub fn sample2(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let mut out = [0.0; 2];
        if self.sample_bilinear(x, y, &mut out) {
            Some((out[0], out[1]))
        } else {
            None
        }
    }

    // ===================== RTF container =====================
    //
    // Little-endian layout:
    //   0  magic "RTEN"
    //   4  u32 version (1)
    //   8  u32 width
    //   12 u32 height
    //   16 u32 channels
    //   20 u32 dtype (0 = f32, 1 = u8)
    //   24 i32 offset_u
    //   28 i32 offset_v
    //   32 u32 reserved x3 (zero)
    //   44 payload, channel-planar, rows in row-major order
    //   .. defined mask, height x width u8 (1 = defined)

    const MAGIC: [u8; 4] = *b"RTEN";
    const VERSION: u32 = 1;
    pub const HEADER_LEN: usize = 44;

    /// Serialize to the RTF container format.
    pub fn write_rtf(&self, path: &Path) -> Result<(), RasterError> {
        let io_err = |source| RasterError::Io { path: path.to_path_buf(), source };
        let mut buf = Vec::with_capacity(
            Self::HEADER_LEN + self.domain.len() * (self.channels * 4 + 1),
        );
        buf.extend_from_slice(&Self::MAGIC);
        for word in [
            Self::VERSION,
            self.domain.width as u32,
            self.domain.height as u32,
            self.channels as u32,
            self.dtype.code(),
            self.domain.offset.0 as u32,
            self.domain.offset.1 as u32,
            0,
            0,
            0,
        ] {
            buf.extend_from_slice(&word.to_le_bytes());
        }
        debug_assert_eq!(buf.len(), Self::HEADER_LEN);
        let cells = self.domain.len();
        for c in 0..self.channels {
            for k in 0..cells {
                let v = self.values[k * self.channels + c];
                match self.dtype {
                    Dtype::F32 => buf.extend_from_slice(&v.to_le_bytes()),
                    Dtype::U8 => buf.push(v.clamp(0.0, 255.0).round() as u8),
                }
            }
        }
        for k in 0..cells {
            let (u, v) = self.domain.coord_of(k);
            buf.push(self.defined.contains(u, v) as u8);
        }
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&buf).map_err(io_err)?;
        Ok(())
    }

    /// Deserialize from the RTF container format.
    pub fn read_rtf(path: &Path) -> Result<RasterMap, RasterError> {
        let io_err = |source| RasterError::Io { path: path.to_path_buf(), source };
        let mut file = fs::File::open(path).map_err(io_err)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err)?;
        if bytes.len() < Self::HEADER_LEN {
            return Err(RasterError::Truncated {
                path: path.to_path_buf(),
                wanted: Self::HEADER_LEN - bytes.len(),
            });
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[0..4]);
        if magic != Self::MAGIC {
            return Err(RasterError::BadMagic { path: path.to_path_buf(), found: magic });
        }
        let word = |i: usize| {
            let mut w = [0u8; 4];
            w.copy_from_slice(&bytes[4 + 4 * i..8 + 4 * i]);
            u32::from_le_bytes(w)
        };
        let version = word(0);
        if version != Self::VERSION {
            return Err(RasterError::BadVersion { path: path.to_path_buf(), found: version });
        }
        let (width, height, channels) = (word(1), word(2), word(3));
        if width == 0 || height == 0 || channels == 0 || width > 1 << 20 || height > 1 << 20
            || channels > 64 || (width as u64 * height as u64) > 1 << 28
        {
            return Err(RasterError::BadShape {
                path: path.to_path_buf(),
                width,
                height,
                channels,
            });
        }
        let dtype = Dtype::from_code(word(4)).ok_or_else(|| RasterError::UnknownDtype {
            path: path.to_path_buf(),
            code: word(4),
        })?;
        let offset = (word(5) as i32, word(6) as i32);
        let domain = GridDomain::new(width as usize, height as usize, offset);
        let cells = domain.len();
        let channels = channels as usize;
        let value_bytes = match dtype {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        } * cells
            * channels;
        let need = Self::HEADER_LEN + value_bytes + cells;
        if bytes.len() < need {
            return Err(RasterError::Truncated {
                path: path.to_path_buf(),
                wanted: need - bytes.len(),
            });
        }
        let mut values = vec![0.0f32; cells * channels];
        let payload = &bytes[Self::HEADER_LEN..];
        match dtype {
            Dtype::F32 => {
                for c in 0..channels {
                    for k in 0..cells {
                        let at = (c * cells + k) * 4;
                        let mut w = [0u8; 4];
                        w.copy_from_slice(&payload[at..at + 4]);
                        values[k * channels + c] = f32::from_le_bytes(w);
                    }
                }
            }
            Dtype::U8 => {
                for c in 0..channels {
                    for k in 0..cells {
                        values[k * channels + c] = payload[c * cells + k] as f32;
                    }
                }
            }
        }
        let mask = &bytes[Self::HEADER_LEN + value_bytes..need];
        let mut defined = ParamSet::empty(domain);
        for (k, flag) in mask.iter().enumerate() {
            if *flag != 0 {
                let (u, v) = domain.coord_of(k);
                defined.insert(u, v);
            }
        }
        Ok(RasterMap { domain, channels, dtype, values, defined })
    }

    /// Read an RTF file, requiring a specific payload dtype.
    pub fn read_rtf_expect(path: &Path, expected: Dtype) -> Result<RasterMap, RasterError> {
        let m = Self::read_rtf(path)?;
        if m.dtype != expected {
            return Err(RasterError::DtypeMismatch {
                path: path.to_path_buf(),
                expected,
                found: m.dtype,
            });
        }
        Ok(m)
    }
}

/// Write a cell set as a single-channel u8 RTF (1 inside the set).
///
/// The defined mask of the file covers the whole domain; membership is
/// carried by the payload values, which is how instrument masks are stored.
pub fn write_mask_rtf(set: &ParamSet, path: &Path) -> Result<(), RasterError> {
    let mut m = RasterMap::undefined_u8(*set.domain(), 1);
    for (u, v) in set.domain().iter() {
        m.set(u, v, &[set.contains(u, v) as u8 as f32]);
    }
    m.write_rtf(path)
}

/// Read a u8 mask RTF back into the cell set of its nonzero payload.
pub fn read_mask_rtf(path: &Path) -> Result<ParamSet, RasterError> {
    let m = RasterMap::read_rtf_expect(path, Dtype::U8)?;
    Ok(ParamSet::from_fn(*m.domain(), |u, v| {
        m.get(u, v).map_or(false, |s| s[0] != 0.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(domain: GridDomain, channels: usize) -> RasterMap {
        RasterMap::from_fn(domain, channels, |u, v| {
            if (u + v).rem_euclid(3) == 0 {
                None
            } else {
                Some((0..channels).map(|c| (u * 17 + v * 5 + c as i32) as f32 * 0.25).collect())
            }
        })
    }

    #[test]
    fn centered_domain_puts_origin_at_image_center() {
        let d = GridDomain::image_centered(64, 64);
        assert_eq!(d.offset, (-32, -32));
        assert_eq!(d.index_of(0, 0), Some(32 * 64 + 32));
        assert!(d.contains(-32, -32));
        assert!(d.contains(31, 31));
        assert!(!d.contains(32, 0));
    }

    #[test]
    fn param_set_algebra() {
        let d = GridDomain::new(8, 8, (0, 0));
        let a = ParamSet::from_fn(d, |u, _| u < 5);
        let b = ParamSet::from_fn(d, |u, _| u >= 3);
        assert_eq!(a.union(&b).len(), 64);
        assert_eq!(a.intersection(&b).len(), 16);
        assert_eq!(a.difference(&b).len(), 24);
        assert_eq!(a.len(), 40);
    }

    #[test]
    fn bilinear_matches_hand_computation() {
        let d = GridDomain::new(2, 2, (0, 0));
        let mut m = RasterMap::undefined(d, 1);
        m.set(0, 0, &[1.0]);
        m.set(1, 0, &[2.0]);
        m.set(0, 1, &[3.0]);
        m.set(1, 1, &[4.0]);
        let mut out = [0.0];
        assert!(m.sample_bilinear(0.5, 0.5, &mut out));
        assert_eq!(out[0], 2.5);
        assert!(m.sample_bilinear(0.25, 0.0, &mut out));
        assert_eq!(out[0], 1.25);
    }

    #[test]
    fn bilinear_integer_query_is_the_stored_value() {
        let d = GridDomain::new(3, 3, (-1, -1));
        let mut m = RasterMap::undefined(d, 1);
        m.set(1, 1, &[7.5]);
        let mut out = [0.0];
        assert!(m.sample_bilinear(1.0, 1.0, &mut out));
        assert_eq!(out[0], 7.5);
    }

    #[test]
    fn bilinear_undefined_neighbor_kills_the_sample() {
        let d = GridDomain::new(2, 2, (0, 0));
        let mut m = RasterMap::undefined(d, 1);
        m.set(0, 0, &[1.0]);
        m.set(1, 0, &[2.0]);
        m.set(0, 1, &[3.0]);
        let mut out = [0.0];
        assert!(!m.sample_bilinear(0.5, 0.5, &mut out));
        assert!(m.sample_bilinear(0.25, 0.0, &mut out));
    }

    #[test]
    fn bilinear_is_exact_on_affine_fields() {
        let d = GridDomain::new(9, 7, (-3, -2));
        let m = RasterMap::from_fn(d, 1, |u, v| Some(vec![2.5 * u as f32 - 1.25 * v as f32 + 0.5]));
        let mut out = [0.0];
        for &(x, y) in &[(0.3, 0.7), (-2.1, 3.9), (4.99, -1.01), (1.0, 2.0)] {
            assert!(m.sample_bilinear(x, y, &mut out));
            let want = 2.5 * x - 1.25 * y + 0.5;
            assert!((out[0] - want).abs() < 1e-9, "at ({x},{y}): {} vs {want}", out[0]);
        }
    }

    #[test]
    fn expand_preserves_values_at_shifted_indices() {
        let d = GridDomain::new(4, 4, (0, 0));
        let m = checker(d, 2);
        let big = GridDomain::new(8, 8, (-2, -2));
        let e = m.expand_to(big).unwrap();
        for (u, v) in d.iter() {
            assert_eq!(m.get(u, v), e.get(u, v));
        }
        assert_eq!(e.defined().len(), m.defined().len());
        let back = e.crop_to(d).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn expand_to_smaller_domain_is_an_error() {
        let m = checker(GridDomain::new(4, 4, (0, 0)), 1);
        let err = m.expand_to(GridDomain::new(3, 4, (0, 0))).unwrap_err();
        assert!(matches!(err, RasterError::DomainTooSmall { .. }));
    }

    #[test]
    fn rtf_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rtf");
        let d = GridDomain::new(2, 2, (-1, 3));
        let mut m = RasterMap::undefined(d, 1);
        m.set(-1, 3, &[1.5]);
        m.set(0, 4, &[-2.0]);
        m.write_rtf(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 44 + 16 + 4);
        assert_eq!(&bytes[0..4], b"RTEN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(i32::from_le_bytes(bytes[24..28].try_into().unwrap()), -1);
        assert_eq!(i32::from_le_bytes(bytes[28..32].try_into().unwrap()), 3);
        assert_eq!(
            f32::from_le_bytes(bytes[44..48].try_into().unwrap()),
            1.5,
        );
        assert_eq!(&bytes[60..64], &[1, 0, 0, 1]);
        let back = RasterMap::read_rtf(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rtf_round_trip_multichannel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rtf");
        let m = checker(GridDomain::new(16, 16, (-8, -8)), 3);
        m.write_rtf(&path).unwrap();
        assert_eq!(RasterMap::read_rtf(&path).unwrap(), m);
    }

    #[test]
    fn rtf_error_variants_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rtf");
        let m = checker(GridDomain::new(4, 4, (0, 0)), 1);
        m.write_rtf(&path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            RasterMap::read_rtf(&path),
            Err(RasterError::BadMagic { .. })
        ));

        bytes[0] = b'R';
        bytes[20] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            RasterMap::read_rtf(&path),
            Err(RasterError::UnknownDtype { code: 9, .. })
        ));

        bytes[20] = 0;
        bytes.truncate(50);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            RasterMap::read_rtf(&path),
            Err(RasterError::Truncated { .. })
        ));

        m.write_rtf(&path).unwrap();
        assert!(matches!(
            RasterMap::read_rtf_expect(&path, Dtype::U8),
            Err(RasterError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.rtf");
        let d = GridDomain::image_centered(8, 8);
        let set = ParamSet::from_fn(d, |u, v| u * u + v * v <= 4);
        write_mask_rtf(&set, &path).unwrap();
        assert_eq!(read_mask_rtf(&path).unwrap(), set);
    }

    #[test]
    fn growth_adds_margin_only_on_moved_sides() {
        let d = GridDomain::new(10, 10, (0, 0));
        let g = d.grown_to_include([(12, 4)]);
        assert_eq!(g.offset, (0, 0));
        assert_eq!(g.width, 13 + 16);
        assert_eq!(g.height, 10);
        let g2 = d.grown_to_include([(-1, -2)]);
        assert_eq!(g2.offset, (-17, -18));
    }
}
