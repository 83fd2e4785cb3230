//! Four-dimensional look-up tables over a 17-knot lattice.
//!
//! Each input coordinate in `[0, 255]` splits into a cell index `x / 16`
//! and a fraction inside the cell. Lookup interpolates the table entries at
//! the cell's vertices. The default scheme is simplex interpolation: the
//! fractions are sorted in descending order (ties by ascending dimension)
//! and the walk from the cell origin along that order visits 5 vertices.
//!
//! File layout (little-endian):
//!
//! ```text
//! "ALUT" | version u16 | interpolation u8 | dims u8 | knots u8 | channels u16 | 5 reserved
//! entries: 17^4 * channels bytes, index ((i0*17 + i1)*17 + i2)*17 + i3, channels innermost
//! ```

use crate::error::{format_error, invalid_input, Result};

pub const DIMS: usize = 4;
pub const KNOTS: usize = 17;
/// Intensity distance between neighbouring knots.
pub const KNOT_SPACING: f64 = 16.0;
/// Number of lattice points, 17^4.
pub const LATTICE_POINTS: usize = KNOTS * KNOTS * KNOTS * KNOTS;

pub const MAGIC: &[u8; 4] = b"ALUT";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

/// Lattice stride of each dimension, dimension 0 most significant.
const STRIDES: [usize; DIMS] = [KNOTS * KNOTS * KNOTS, KNOTS * KNOTS, KNOTS, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Simplex,
    Multilinear,
}

impl Interpolation {
    fn code(self) -> u8 {
        match self {
            Interpolation::Simplex => 0,
            Interpolation::Multilinear => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Interpolation::Simplex),
            1 => Some(Interpolation::Multilinear),
            _ => None,
        }
    }
}

/// Input intensity represented by knot `i`. Knot 16 is the virtual value 256.
pub fn knot_value(i: usize) -> Result<u32> {
    if i >= KNOTS {
        return Err(invalid_input(format!("knot index {i} outside 0..{KNOTS}")));
    }
    Ok(16 * i as u32)
}

/// Flat lattice index of a knot tuple.
#[inline]
pub fn lattice_index(knots: [usize; DIMS]) -> usize {
    ((knots[0] * KNOTS + knots[1]) * KNOTS + knots[2]) * KNOTS + knots[3]
}

/// Inverse of [`lattice_index`].
#[inline]
pub fn lattice_knots(mut index: usize) -> [usize; DIMS] {
    let mut k = [0; DIMS];
    for d in (0..DIMS).rev() {
        k[d] = index % KNOTS;
        index /= KNOTS;
    }
    k
}

/// Vertices and convex weights selected by one simplex lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexTrace {
    /// Lattice indices of the walk `v0 .. v4`.
    pub vertices: [usize; 5],
    /// `(1 - f1, f1 - f2, f2 - f3, f3 - f4, f4)`.
    pub weights: [f64; 5],
    /// Dimensions in walk order (descending fraction).
    pub order: [usize; DIMS],
}

#[inline]
fn split(x: f64) -> (usize, f64) {
    let cell = ((x / KNOT_SPACING).floor() as usize).min(KNOTS - 2);
    (cell, (x - cell as f64 * KNOT_SPACING) / KNOT_SPACING)
}

/// Simplex decomposition of `coords`. Coordinates must already be in range.
#[inline]
pub fn simplex_trace(coords: [f64; DIMS]) -> SimplexTrace {
    let mut base = 0;
    let mut frac = [0.0; DIMS];
    for d in 0..DIMS {
        let (cell, f) = split(coords[d]);
        base += cell * STRIDES[d];
        frac[d] = f;
    }
    // Descending fraction; insertion sort keeps equal fractions in
    // ascending dimension order.
    let mut order = [0, 1, 2, 3];
    for i in 1..DIMS {
        let mut j = i;
        while j > 0 && frac[order[j]] > frac[order[j - 1]] {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let f = [frac[order[0]], frac[order[1]], frac[order[2]], frac[order[3]]];
    let mut vertices = [base; 5];
    for m in 1..5 {
        vertices[m] = vertices[m - 1] + STRIDES[order[m - 1]];
    }
    SimplexTrace {
        vertices,
        weights: [1.0 - f[0], f[0] - f[1], f[1] - f[2], f[2] - f[3], f[3]],
        order,
    }
}

pub(crate) fn check_coords(coords: &[f64; DIMS]) -> Result<()> {
    for &x in coords {
        if !(0.0..=255.0).contains(&x) {
            return Err(invalid_input(format!("lookup coordinate {x} outside [0, 255]")));
        }
    }
    Ok(())
}

/// Anything that can supply lattice entries: the 8-bit table at inference,
/// real-valued shadow entries during fine-tuning.
pub trait Entries: Sync {
    fn channels(&self) -> usize;
    fn entry(&self, lattice: usize, channel: usize) -> f64;

    /// Simplex interpolation into `out` (length = channels).
    #[inline]
    fn interpolate_simplex(&self, trace: &SimplexTrace, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&v, &w) in trace.vertices.iter().zip(&trace.weights) {
            if w == 0.0 {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.entry(v, c);
            }
        }
    }
}

/// Immutable 4-D table of 8-bit entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LutTable {
    interpolation: Interpolation,
    channels: usize,
    entries: Vec<u8>,
}

impl Entries for LutTable {
    fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    fn entry(&self, lattice: usize, channel: usize) -> f64 {
        self.entries[lattice * self.channels + channel] as f64
    }
}

impl LutTable {
    pub fn new(channels: usize, entries: Vec<u8>) -> Result<Self> {
        Self::with_interpolation(Interpolation::Simplex, channels, entries)
    }

    pub fn with_interpolation(
        interpolation: Interpolation,
        channels: usize,
        entries: Vec<u8>,
    ) -> Result<Self> {
        if channels == 0 || channels > u16::MAX as usize {
            return Err(invalid_input(format!("unsupported channel count {channels}")));
        }
        if entries.len() != LATTICE_POINTS * channels {
            return Err(invalid_input(format!(
                "table has {} entries, expected {}",
                entries.len(),
                LATTICE_POINTS * channels
            )));
        }
        Ok(Self {
            interpolation,
            channels,
            entries,
        })
    }

    /// Table whose entry at each lattice point is `f(knot values, channel)`.
    pub fn from_fn(channels: usize, mut f: impl FnMut([u32; DIMS], usize) -> u8) -> Result<Self> {
        let mut entries = Vec::with_capacity(LATTICE_POINTS * channels);
        for idx in 0..LATTICE_POINTS {
            let k = lattice_knots(idx);
            let v = k.map(|i| 16 * i as u32);
            for c in 0..channels {
                entries.push(f(v, c));
            }
        }
        Self::new(channels, entries)
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn out_channels(&self) -> usize {
        self.channels
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    /// Entry at a knot tuple.
    pub fn at(&self, knots: [usize; DIMS], channel: usize) -> u8 {
        self.entries[lattice_index(knots) * self.channels + channel]
    }

    /// Interpolated lookup. `out` must hold `out_channels` values.
    pub fn lookup(&self, coords: [f64; DIMS], out: &mut [f64]) -> Result<()> {
        check_coords(&coords)?;
        if out.len() != self.channels {
            return Err(invalid_input(format!(
                "output buffer holds {} values, table has {} channels",
                out.len(),
                self.channels
            )));
        }
        self.lookup_unchecked(coords, out);
        Ok(())
    }

    /// Lookup without range checks; coordinates must lie in `[0, 255]`.
    #[inline]
    pub fn lookup_unchecked(&self, coords: [f64; DIMS], out: &mut [f64]) {
        match self.interpolation {
            Interpolation::Simplex => self.interpolate_simplex(&simplex_trace(coords), out),
            Interpolation::Multilinear => self.multilinear(coords, out),
        }
    }

    fn multilinear(&self, coords: [f64; DIMS], out: &mut [f64]) {
        let mut base = 0;
        let mut frac = [0.0; DIMS];
        for d in 0..DIMS {
            let (cell, f) = split(coords[d]);
            base += cell * STRIDES[d];
            frac[d] = f;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for corner in 0..16usize {
            let mut w = 1.0;
            let mut idx = base;
            for d in 0..DIMS {
                if corner >> (DIMS - 1 - d) & 1 == 1 {
                    w *= frac[d];
                    idx += STRIDES[d];
                } else {
                    w *= 1.0 - frac[d];
                }
            }
            if w == 0.0 {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.entry(idx, c);
            }
        }
    }

    /// Serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.entries.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.interpolation.code());
        out.push(DIMS as u8);
        out.push(KNOTS as u8);
        out.extend_from_slice(&(self.channels as u16).to_le_bytes());
        out.extend_from_slice(&[0u8; 5]);
        out.extend_from_slice(&self.entries);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        self.write_to(&mut out);
        out
    }

    /// Parses one table from the front of `bytes`; returns it with the number
    /// of bytes consumed. `base` offsets reported error positions.
    pub fn read_from(bytes: &[u8], base: usize) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(format_error(base + bytes.len(), "truncated LUT header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_error(base, "bad LUT magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(format_error(base + 4, format!("unsupported LUT version {version}")));
        }
        let interpolation = Interpolation::from_code(bytes[6])
            .ok_or_else(|| format_error(base + 6, format!("unknown interpolation {}", bytes[6])))?;
        if bytes[7] as usize != DIMS {
            return Err(format_error(base + 7, format!("unsupported dims {}", bytes[7])));
        }
        if bytes[8] as usize != KNOTS {
            return Err(format_error(base + 8, format!("unsupported knot count {}", bytes[8])));
        }
        let channels = u16::from_le_bytes([bytes[9], bytes[10]]) as usize;
        if channels == 0 {
            return Err(format_error(base + 9, "zero output channels"));
        }
        let len = LATTICE_POINTS * channels;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < len {
            return Err(format_error(
                base + bytes.len(),
                format!("truncated LUT payload: {} of {len} bytes", payload.len()),
            ));
        }
        let table = Self {
            interpolation,
            channels,
            entries: payload[..len].to_vec(),
        };
        Ok((table, HEADER_LEN + len))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (table, used) = Self::read_from(bytes, 0)?;
        if used != bytes.len() {
            return Err(format_error(used, "trailing bytes after LUT payload"));
        }
        Ok(table)
    }
}
