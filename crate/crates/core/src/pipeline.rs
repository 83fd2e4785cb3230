//! Multi-group LUT inference.
//!
//! Group `n` reads the two most recent feature planes, `X[n-1]` and
//! `X[n-2]` (the input image stands in for both before the first group).
//! Every branch samples a window from each plane, blends the two quads,
//! and looks the result up in its table; branch outputs are averaged.
//! Intermediate groups emit one channel per pixel and are re-quantized to
//! 8 bits; the final group emits `scale²` channels which are rearranged
//! depth-to-space (channel `c` → sub-pixel `(c / scale, c % scale)`).
//!
//! Container layout (little-endian):
//!
//! ```text
//! "ALSR" | version u16 | scale u8 | groups u8
//! per group:  branches u8 (bit 7 = fixed sampling) | k u8 | out_channels u16
//! per branch: [learned only] current logits k*k*4 f32 | previous logits k*k*4 f32 | residual 4 f32
//!             LUT container
//! ```
//!
//! Version 1 runs without the rotation ensemble, version 2 applies it to
//! every group.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adarl::ResidualWeights;
use crate::autosample::{check_sample_size, NormalizedSampler, SamplerWeights, QUAD};
use crate::error::{format_error, invalid_config, invalid_input, Result};
use crate::image::{FloatPlane, Plane, PlaneView};
use crate::lut::{Entries, LutTable, LATTICE_POINTS};
use crate::par::Exec;

pub const MAGIC: &[u8; 4] = b"ALSR";
pub const VERSION_PLAIN: u16 = 1;
pub const VERSION_ENSEMBLE: u16 = 2;
/// Bytes before the first group record.
pub const HEADER_LEN: usize = 8;
/// Bytes of each group record header.
pub const GROUP_HEADER_LEN: usize = 4;
const FIXED_FLAG: u8 = 0x80;

/// Fixed four-pixel patterns of the prior three-branch design, anchored at
/// the window's top-left: square, dilated, and "Y"-shaped.
pub const FIXED_PATTERNS: [[(usize, usize); QUAD]; 3] = [
    [(0, 0), (0, 1), (1, 0), (1, 1)],
    [(0, 0), (0, 2), (2, 0), (2, 2)],
    [(0, 0), (1, 1), (1, 2), (2, 1)],
];

/// Where the k×k window sits relative to the pixel it serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PatchAnchor {
    /// Window spans `row..row+k`, `col..col+k`.
    #[default]
    TopLeft,
    /// Window centred on the pixel.
    Center,
}

/// Copies the k×k window into `out` (row-major) with replicate padding.
pub fn extract_patch<P: PlaneView + ?Sized>(
    plane: &P,
    row: usize,
    col: usize,
    k: usize,
    anchor: PatchAnchor,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), k * k);
    let off = match anchor {
        PatchAnchor::TopLeft => 0,
        PatchAnchor::Center => (k / 2) as isize,
    };
    let (r0, c0) = (row as isize - off, col as isize - off);
    let (h, w) = (plane.height(), plane.width());
    let interior = r0 >= 0 && c0 >= 0 && r0 as usize + k <= h && c0 as usize + k <= w;
    let mut i = 0;
    for dr in 0..k as isize {
        for dc in 0..k as isize {
            out[i] = if interior {
                plane.at((r0 + dr) as usize, (c0 + dc) as usize)
            } else {
                plane.at_clamped(r0 + dr, c0 + dc)
            };
            i += 1;
        }
    }
}

/// How a group's samplers are defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Trainable logits stored with the pipeline.
    #[default]
    Learned,
    /// Code-defined one-hot patterns ([`FIXED_PATTERNS`]); nothing stored.
    Fixed,
}

/// One sampler pair + residual + table.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Applied to `X[n-1]`.
    pub sampler_current: SamplerWeights,
    /// Applied to `X[n-2]`.
    pub sampler_previous: SamplerWeights,
    pub residual: ResidualWeights,
    pub lut: LutTable,
}

impl Branch {
    pub fn fixed(index: usize, lut: LutTable) -> Result<Self> {
        let pattern = FIXED_PATTERNS
            .get(index)
            .ok_or_else(|| invalid_config(format!("no fixed sampling pattern for branch {index}")))?;
        let sampler = SamplerWeights::one_hot(3, *pattern)?;
        Ok(Self {
            sampler_current: sampler.clone(),
            sampler_previous: sampler,
            residual: ResidualWeights::splat(0.0)?,
            lut,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupConfig {
    pub sample_size: usize,
    pub out_channels: usize,
    pub sampling: Sampling,
    pub branches: Vec<Branch>,
}

impl GroupConfig {
    fn validate(&self, index: usize) -> Result<()> {
        check_sample_size(self.sample_size)?;
        if self.branches.is_empty() || self.branches.len() > 127 {
            return Err(invalid_config(format!(
                "group {index}: branch count {} outside 1..=127",
                self.branches.len()
            )));
        }
        if self.sampling == Sampling::Fixed && self.sample_size != 3 {
            return Err(invalid_config(format!("group {index}: fixed sampling needs k = 3")));
        }
        for (b, br) in self.branches.iter().enumerate() {
            if br.sampler_current.k() != self.sample_size || br.sampler_previous.k() != self.sample_size {
                return Err(invalid_config(format!(
                    "group {index} branch {b}: sampler size differs from k = {}",
                    self.sample_size
                )));
            }
            if br.lut.out_channels() != self.out_channels {
                return Err(invalid_config(format!(
                    "group {index} branch {b}: table has {} channels, group declares {}",
                    br.lut.out_channels(),
                    self.out_channels
                )));
            }
            if self.sampling == Sampling::Fixed && *br != Branch::fixed(b, br.lut.clone())? {
                return Err(invalid_config(format!(
                    "group {index} branch {b}: fixed-sampling branch carries custom weights"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub scale: usize,
    pub ensemble: bool,
    pub groups: Vec<GroupConfig>,
}

/// Shape of one group, without weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTopology {
    pub branches: usize,
    pub k: usize,
    pub out_channels: usize,
    #[serde(default, skip_serializing_if = "is_learned")]
    pub sampling: Sampling,
}

fn is_learned(s: &Sampling) -> bool {
    *s == Sampling::Learned
}

/// Shape of a whole pipeline, without weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub scale: usize,
    #[serde(default = "default_true")]
    pub ensemble: bool,
    pub groups: Vec<GroupTopology>,
}

fn default_true() -> bool {
    true
}

impl Topology {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.scale) {
            return Err(invalid_config(format!("scale {} outside 1..=8", self.scale)));
        }
        if self.groups.is_empty() || self.groups.len() > 255 {
            return Err(invalid_config("a pipeline needs 1..=255 groups"));
        }
        let last = self.groups.len() - 1;
        for (i, g) in self.groups.iter().enumerate() {
            check_sample_size(g.k)?;
            if g.k > 255 {
                return Err(invalid_config(format!("group {i}: k = {} does not fit a byte", g.k)));
            }
            if g.branches == 0 || g.branches > 127 {
                return Err(invalid_config(format!("group {i}: branches must be 1..=127")));
            }
            let want = if i == last { self.scale * self.scale } else { 1 };
            if g.out_channels != want {
                return Err(invalid_config(format!(
                    "group {i}: out_channels {} but expected {want}",
                    g.out_channels
                )));
            }
            if g.sampling == Sampling::Fixed && (g.k != 3 || g.branches > FIXED_PATTERNS.len()) {
                return Err(invalid_config(format!(
                    "group {i}: fixed sampling supports k = 3 and at most 3 branches"
                )));
            }
        }
        Ok(())
    }
}

/// Shipped configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// One single-branch, single-pixel group at scale 1.
    Identity,
    /// Two groups of three fixed-pattern branches.
    Mulut,
    /// Two learned groups with `branches` × `k`.
    MulutOurs { branches: usize, k: usize },
    /// Linear chain of single-branch learned groups (stand-in graph).
    SpfLight { groups: usize, k: usize },
}

/// Branch × sample-size grid shipped for the learned two-group layout.
pub const MULUT_OURS_GRID: [(usize, usize); 6] = [(2, 3), (3, 3), (3, 5), (3, 7), (4, 3), (1, 5)];
pub const SPF_LIGHT_GROUPS: usize = 6;
pub const SPF_LIGHT_K: usize = 5;

impl Preset {
    pub fn names() -> Vec<String> {
        let mut names = vec!["identity".to_string(), "mulut".into(), "mulut-ours".into()];
        names.extend(MULUT_OURS_GRID.iter().map(|(b, k)| format!("mulut-ours-{b}x{k}")));
        names.push("spf-light".into());
        names
    }

    pub fn parse(name: &str) -> Result<Self> {
        let unknown = || {
            invalid_config(format!(
                "unknown preset `{name}` (known: {})",
                Preset::names().join(", ")
            ))
        };
        match name {
            "identity" => return Ok(Preset::Identity),
            "mulut" => return Ok(Preset::Mulut),
            "mulut-ours" => return Ok(Preset::MulutOurs { branches: 3, k: 5 }),
            "spf-light" => {
                return Ok(Preset::SpfLight {
                    groups: SPF_LIGHT_GROUPS,
                    k: SPF_LIGHT_K,
                })
            }
            _ => {}
        }
        let grid = name.strip_prefix("mulut-ours-").ok_or_else(unknown)?;
        let (b, k) = grid.split_once('x').ok_or_else(unknown)?;
        let branches = b.parse().map_err(|_| unknown())?;
        let k = k.parse().map_err(|_| unknown())?;
        Ok(Preset::MulutOurs { branches, k })
    }

    pub fn topology(self, scale: usize) -> Topology {
        let learned = |branches, k, out_channels| GroupTopology {
            branches,
            k,
            out_channels,
            sampling: Sampling::Learned,
        };
        let groups = match self {
            Preset::Identity => {
                return Topology {
                    scale: 1,
                    ensemble: false,
                    groups: vec![learned(1, 1, 1)],
                }
            }
            Preset::Mulut => (0..2)
                .map(|i| GroupTopology {
                    branches: 3,
                    k: 3,
                    out_channels: if i == 1 { scale * scale } else { 1 },
                    sampling: Sampling::Fixed,
                })
                .collect(),
            Preset::MulutOurs { branches, k } => {
                vec![learned(branches, k, 1), learned(branches, k, scale * scale)]
            }
            Preset::SpfLight { groups, k } => (0..groups)
                .map(|i| learned(1, k, if i + 1 == groups { scale * scale } else { 1 }))
                .collect(),
        };
        Topology {
            scale,
            ensemble: true,
            groups,
        }
    }
}

/// Table whose every channel holds the mean of the four knot intensities
/// (knot 16 read as 255).
pub fn mean_table(channels: usize) -> Result<LutTable> {
    LutTable::from_fn(channels, |v, _| {
        let s: f64 = v.iter().map(|&x| x.min(255) as f64).sum();
        crate::image::quantize_u8(s / 4.0)
    })
}

impl PipelineConfig {
    /// Weights for an untrained pipeline: uniform sampling, residual 0.5,
    /// mean tables.
    pub fn initialized(topology: &Topology) -> Result<Self> {
        topology.validate()?;
        let mut tables: Vec<(usize, LutTable)> = Vec::new();
        let mut groups = Vec::with_capacity(topology.groups.len());
        for g in &topology.groups {
            let lut = match tables.iter().find(|(c, _)| *c == g.out_channels) {
                Some((_, t)) => t.clone(),
                None => {
                    let t = mean_table(g.out_channels)?;
                    tables.push((g.out_channels, t.clone()));
                    t
                }
            };
            let branches = (0..g.branches)
                .map(|b| match g.sampling {
                    Sampling::Fixed => Branch::fixed(b, lut.clone()),
                    Sampling::Learned => Ok(Branch {
                        sampler_current: SamplerWeights::uniform(g.k)?,
                        sampler_previous: SamplerWeights::uniform(g.k)?,
                        residual: ResidualWeights::splat(0.5)?,
                        lut: lut.clone(),
                    }),
                })
                .collect::<Result<_>>()?;
            groups.push(GroupConfig {
                sample_size: g.k,
                out_channels: g.out_channels,
                sampling: g.sampling,
                branches,
            });
        }
        let cfg = Self {
            scale: topology.scale,
            ensemble: topology.ensemble,
            groups,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_preset(preset: Preset, scale: usize) -> Result<Self> {
        Self::initialized(&preset.topology(scale))
    }

    pub fn topology(&self) -> Topology {
        Topology {
            scale: self.scale,
            ensemble: self.ensemble,
            groups: self
                .groups
                .iter()
                .map(|g| GroupTopology {
                    branches: g.branches.len(),
                    k: g.sample_size,
                    out_channels: g.out_channels,
                    sampling: g.sampling,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.topology().validate()?;
        for (i, g) in self.groups.iter().enumerate() {
            g.validate(i)?;
        }
        Ok(())
    }

    /// Serialized container size.
    pub fn byte_len(&self) -> usize {
        container_overhead(&self.topology())
            + crate::export::storage_size(&self.topology()).total
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        let version = if self.ensemble {
            VERSION_ENSEMBLE
        } else {
            VERSION_PLAIN
        };
        out.extend_from_slice(&version.to_le_bytes());
        out.push(self.scale as u8);
        out.push(self.groups.len() as u8);
        for g in &self.groups {
            let flag = if g.sampling == Sampling::Fixed { FIXED_FLAG } else { 0 };
            out.push(g.branches.len() as u8 | flag);
            out.push(g.sample_size as u8);
            out.extend_from_slice(&(g.out_channels as u16).to_le_bytes());
            for b in &g.branches {
                if g.sampling == Sampling::Learned {
                    for v in b.sampler_current.logits().iter().chain(b.sampler_previous.logits()) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    for v in b.residual.values() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                b.lut.write_to(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_error(0, "bad pipeline magic"));
        }
        let ensemble = match r.u16()? {
            VERSION_PLAIN => false,
            VERSION_ENSEMBLE => true,
            v => return Err(format_error(4, format!("unsupported pipeline version {v}"))),
        };
        let scale = r.u8()? as usize;
        let n_groups = r.u8()? as usize;
        let mut groups = Vec::with_capacity(n_groups);
        for gi in 0..n_groups {
            let at = r.pos;
            let raw = r.u8()?;
            let sampling = if raw & FIXED_FLAG != 0 {
                Sampling::Fixed
            } else {
                Sampling::Learned
            };
            let n_branches = (raw & !FIXED_FLAG) as usize;
            let k = r.u8()? as usize;
            let out_channels = r.u16()? as usize;
            if k == 0 || k.is_multiple_of(2) {
                return Err(format_error(at + 1, format!("group {gi}: invalid sample size {k}")));
            }
            let mut branches = Vec::with_capacity(n_branches);
            for bi in 0..n_branches {
                let learned = if sampling == Sampling::Learned {
                    let n = k * k * QUAD;
                    let cur = r.f32s(n)?;
                    let prev = r.f32s(n)?;
                    let res_at = r.pos;
                    let res = r.f32s(QUAD)?;
                    let res = ResidualWeights::new([res[0], res[1], res[2], res[3]])
                        .map_err(|e| format_error(res_at, e.to_string()))?;
                    Some((SamplerWeights::new(k, cur)?, SamplerWeights::new(k, prev)?, res))
                } else {
                    None
                };
                let (lut, used) = LutTable::read_from(&bytes[r.pos..], r.pos)?;
                r.pos += used;
                if lut.out_channels() != out_channels {
                    return Err(format_error(
                        r.pos - used,
                        format!("group {gi} branch {bi}: table channel count mismatch"),
                    ));
                }
                branches.push(match learned {
                    Some((sampler_current, sampler_previous, residual)) => Branch {
                        sampler_current,
                        sampler_previous,
                        residual,
                        lut,
                    },
                    None => Branch::fixed(bi, lut)?,
                });
            }
            groups.push(GroupConfig {
                sample_size: k,
                out_channels,
                sampling,
                branches,
            });
        }
        if r.pos != bytes.len() {
            return Err(format_error(r.pos, "trailing bytes after pipeline"));
        }
        let cfg = Self {
            scale,
            ensemble,
            groups,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Container bytes that are not weights: headers and per-table headers.
pub fn container_overhead(topology: &Topology) -> usize {
    HEADER_LEN
        + topology
            .groups
            .iter()
            .map(|g| GROUP_HEADER_LEN + g.branches * crate::lut::HEADER_LEN)
            .sum::<usize>()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_error(self.bytes.len(), "truncated pipeline container"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let at = self.pos;
        let b = self.take(4 * n)?;
        let v: Vec<f32> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(format_error(at, "non-finite weight"));
        }
        Ok(v)
    }
}

/// Per-pixel multi-channel output of a group.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Rearranges `scale²` channels into `scale × scale` blocks.
pub fn depth_to_space(features: &FeatureMap, scale: usize) -> Result<FloatPlane> {
    if features.channels != scale * scale {
        return Err(invalid_input(format!(
            "depth-to-space by {scale} needs {} channels, got {}",
            scale * scale,
            features.channels
        )));
    }
    if scale == 1 {
        return FloatPlane::new(features.height, features.width, features.data.clone());
    }
    let (h, w) = (features.height * scale, features.width * scale);
    let mut out = FloatPlane::zeros(h, w);
    for r in 0..features.height {
        for c in 0..features.width {
            for (ch, &v) in features.pixel(r, c).iter().enumerate() {
                *out.get_mut(r * scale + ch / scale, c * scale + ch % scale) = v;
            }
        }
    }
    Ok(out)
}

/// Normalized view of one branch, generic over what serves the lookup.
pub struct BranchView<'a, E: ?Sized> {
    pub current: NormalizedSampler,
    pub previous: NormalizedSampler,
    pub residual: [f64; QUAD],
    pub entries: &'a E,
}

impl<'a> BranchView<'a, LutTable> {
    pub fn of(branch: &'a Branch) -> Self {
        Self {
            current: branch.sampler_current.normalize(),
            previous: branch.sampler_previous.normalize(),
            residual: branch.residual.values().map(|v| v as f64),
            entries: &branch.lut,
        }
    }
}

/// Anything that can serve lookups on real coordinates in `[0, 255]`.
pub trait Lookup: Sync {
    fn out_channels(&self) -> usize;
    fn lookup_into(&self, coords: [f64; QUAD], out: &mut [f64]);
}

impl Lookup for LutTable {
    fn out_channels(&self) -> usize {
        self.channels()
    }

    #[inline]
    fn lookup_into(&self, coords: [f64; QUAD], out: &mut [f64]) {
        self.lookup_unchecked(coords, out)
    }
}

/// Real-valued table entries (fine-tuning shadow copy).
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowTable {
    pub channels: usize,
    pub entries: Vec<f64>,
}

impl ShadowTable {
    pub fn from_lut(lut: &LutTable) -> Self {
        Self {
            channels: lut.out_channels(),
            entries: lut.entries().iter().map(|&v| v as f64).collect(),
        }
    }

    /// Rounds half away from zero and clamps into an 8-bit table.
    pub fn to_lut(&self) -> Result<LutTable> {
        debug_assert_eq!(self.entries.len(), LATTICE_POINTS * self.channels);
        LutTable::new(
            self.channels,
            self.entries.iter().map(|&v| crate::image::quantize_u8(v)).collect(),
        )
    }
}

impl Entries for ShadowTable {
    fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    fn entry(&self, lattice: usize, channel: usize) -> f64 {
        self.entries[lattice * self.channels + channel]
    }
}

impl Lookup for ShadowTable {
    fn out_channels(&self) -> usize {
        self.channels
    }

    #[inline]
    fn lookup_into(&self, coords: [f64; QUAD], out: &mut [f64]) {
        self.interpolate_simplex(&crate::lut::simplex_trace(coords), out)
    }
}

/// Scratch buffers for one worker.
struct Scratch {
    patch_cur: Vec<f64>,
    patch_prev: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn new(k: usize, channels: usize) -> Self {
        Self {
            patch_cur: vec![0.0; k * k],
            patch_prev: vec![0.0; k * k],
            tmp: vec![0.0; channels],
        }
    }
}

/// Quad fed to a branch's table at one pixel.
#[inline]
pub fn branch_coords<P: PlaneView + ?Sized, E: ?Sized>(
    x_cur: &P,
    x_prev: &P,
    row: usize,
    col: usize,
    k: usize,
    branch: &BranchView<'_, E>,
    patch_cur: &mut [f64],
    patch_prev: &mut [f64],
) -> [f64; QUAD] {
    extract_patch(x_cur, row, col, k, PatchAnchor::TopLeft, patch_cur);
    extract_patch(x_prev, row, col, k, PatchAnchor::TopLeft, patch_prev);
    let a = branch.current.sample(patch_cur);
    let b = branch.previous.sample(patch_prev);
    std::array::from_fn(|i| crate::adarl::blend(a[i], b[i], branch.residual[i]))
}

#[inline]
fn eval_pixel<P: PlaneView + ?Sized, E: Lookup + ?Sized>(
    x_cur: &P,
    x_prev: &P,
    row: usize,
    col: usize,
    k: usize,
    branches: &[BranchView<'_, E>],
    s: &mut Scratch,
    out: &mut [f64],
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for br in branches {
        let coords = branch_coords(x_cur, x_prev, row, col, k, br, &mut s.patch_cur, &mut s.patch_prev);
        br.entries.lookup_into(coords, &mut s.tmp);
        for (o, t) in out.iter_mut().zip(&s.tmp) {
            *o += t;
        }
    }
    let n = branches.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
}

/// Evaluates one group (no ensemble) at every pixel.
pub fn run_group_with<P: PlaneView + ?Sized, E: Lookup + ?Sized>(
    x_cur: &P,
    x_prev: &P,
    k: usize,
    channels: usize,
    branches: &[BranchView<'_, E>],
    exec: Exec,
) -> Result<FeatureMap> {
    if x_cur.height() != x_prev.height() || x_cur.width() != x_prev.width() {
        return Err(invalid_input(format!(
            "group inputs differ in size: {}x{} vs {}x{}",
            x_cur.height(),
            x_cur.width(),
            x_prev.height(),
            x_prev.width()
        )));
    }
    if x_cur.height() == 0 || x_cur.width() == 0 {
        return Err(invalid_input("empty group input"));
    }
    let (h, w) = (x_cur.height(), x_cur.width());
    let mut data = vec![0.0; h * w * channels];
    exec.for_each_chunk(&mut data, w * channels, |row, chunk| {
        let mut s = Scratch::new(k, channels);
        for (col, out) in chunk.chunks_mut(channels).enumerate() {
            eval_pixel(x_cur, x_prev, row, col, k, branches, &mut s, out);
        }
    });
    Ok(FeatureMap {
        height: h,
        width: w,
        channels,
        data,
    })
}

/// Evaluates a configured group (no ensemble).
pub fn run_group<P: PlaneView + ?Sized>(
    x_cur: &P,
    x_prev: &P,
    group: &GroupConfig,
    exec: Exec,
) -> Result<FeatureMap> {
    group.validate(0)?;
    let views: Vec<_> = group.branches.iter().map(BranchView::of).collect();
    run_group_with(x_cur, x_prev, group.sample_size, group.out_channels, &views, exec)
}

/// Inputs that can be rotated by quarter turns.
pub trait Rotate: Sized {
    fn rotated(&self, quarter_turns: u32) -> Self;
}

impl Rotate for Plane {
    fn rotated(&self, quarter_turns: u32) -> Self {
        self.rotate90(quarter_turns)
    }
}

impl Rotate for FloatPlane {
    fn rotated(&self, quarter_turns: u32) -> Self {
        self.rotate90(quarter_turns)
    }
}

impl<A: Rotate, B: Rotate> Rotate for (A, B) {
    fn rotated(&self, quarter_turns: u32) -> Self {
        (self.0.rotated(quarter_turns), self.1.rotated(quarter_turns))
    }
}

/// Mean of four values, summed in ascending order so the result does not
/// depend on which rotation produced which value.
#[inline]
pub fn order_free_mean4(mut v: [f64; 4]) -> f64 {
    v.sort_by(f64::total_cmp);
    (((v[0] + v[1]) + v[2]) + v[3]) / 4.0
}

/// Averages `run` over the four rotations of `input`, rotating each output
/// back. `run` may change the spatial size (e.g. upscale) as long as it
/// commutes with the rotation geometry.
pub fn rotation_ensemble<I, F>(input: &I, run: F) -> Result<FloatPlane>
where
    I: Rotate,
    F: Fn(&I) -> Result<FloatPlane>,
{
    let outs = (0..4u32)
        .map(|t| Ok(run(&input.rotated(t))?.rotate90((4 - t) % 4)))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (outs[0].height, outs[0].width);
    if outs.iter().any(|o| o.height != h || o.width != w) {
        return Err(invalid_input("rotated runs disagree on output size"));
    }
    let data = (0..h * w)
        .map(|i| order_free_mean4([outs[0].data[i], outs[1].data[i], outs[2].data[i], outs[3].data[i]]))
        .collect();
    FloatPlane::new(h, w, data)
}

/// Group output after depth-to-space and (optionally) the rotation ensemble.
pub fn group_response<P, E>(
    x_cur: &P,
    x_prev: &P,
    k: usize,
    channels: usize,
    branches: &[BranchView<'_, E>],
    ensemble: bool,
    exec: Exec,
) -> Result<FloatPlane>
where
    P: PlaneView + Rotate,
    E: Lookup + ?Sized,
{
    let scale = (channels as f64).sqrt().round() as usize;
    if scale * scale != channels {
        return Err(invalid_config(format!("{channels} output channels is not a square")));
    }
    let run = |(a, b): &(&P, &P)| -> Result<FloatPlane> {
        depth_to_space(&run_group_with(*a, *b, k, channels, branches, exec)?, scale)
    };
    if !ensemble {
        return run(&(x_cur, x_prev));
    }
    let inputs = (x_cur.rotated(0), x_prev.rotated(0));
    rotation_ensemble(&inputs, |(a, b)| run(&(a, b)))
}

/// Wall time per group of one [`super_resolve_timed`] call.
#[derive(Debug, Clone, Default)]
pub struct StageTimings {
    pub groups: Vec<Duration>,
}

/// Full inference. Output is `scale·H × scale·W`.
pub fn super_resolve(x: &Plane, cfg: &PipelineConfig, exec: Exec) -> Result<Plane> {
    Ok(super_resolve_timed(x, cfg, exec)?.0)
}

pub fn super_resolve_timed(
    x: &Plane,
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<(Plane, StageTimings)> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(invalid_input("empty input image"));
    }
    exec.install(|| {
        let mut timings = StageTimings::default();
        let mut older = x.clone();
        let mut newer = x.clone();
        let last = cfg.groups.len() - 1;
        for (i, g) in cfg.groups.iter().enumerate() {
            let start = Instant::now();
            let views: Vec<_> = g.branches.iter().map(BranchView::of).collect();
            let out = group_response(&newer, &older, g.sample_size, g.out_channels, &views, cfg.ensemble, exec)?
                .quantize();
            timings.groups.push(start.elapsed());
            if i == last {
                return Ok((out, timings));
            }
            older = std::mem::replace(&mut newer, out);
        }
        unreachable!("validated pipelines have at least one group")
    })?
}
