//! Backbone networks, checkpoint I/O, LUT export and storage accounting.
//!
//! A checkpoint is a directory with `manifest.json` and `weights.bin`. The
//! manifest lists every tensor (`name`, `shape`, `dtype = "f32"`,
//! `byte_offset` into the little-endian blob) and the pipeline topology.
//! Tensor names per group `g` and branch `b`:
//!
//! ```text
//! g{g}.b{b}.sampler_current     [k, k, 4]   logits applied to X[n-1]
//! g{g}.b{b}.sampler_previous    [k, k, 4]   logits applied to X[n-2]
//! g{g}.b{b}.residual            [2, 2]
//! g{g}.b{b}.backbone.{l}.weight [out, in]
//! g{g}.b{b}.backbone.{l}.bias   [out]
//! ```
//!
//! Fixed-sampling groups carry no sampler or residual tensors. Backbone
//! layers use ReLU everywhere except the last.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adarl::{clamp_weights, ResidualWeights};
use crate::autosample::{SamplerWeights, QUAD};
use crate::error::{Error, Result};
use crate::image::{quantize_u8, FloatPlane, Plane};
use crate::lut::{lattice_knots, LutTable, LATTICE_POINTS};
use crate::par::Exec;
use crate::pipeline::{
    group_response, Branch, BranchView, GroupConfig, FIXED_PATTERNS, Lookup, PipelineConfig, Sampling, Topology,
};

fn bad_checkpoint(msg: impl Into<String>) -> Error {
    Error::InvalidCheckpoint(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Dense layer: `weight` is `out × in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

/// Feed-forward network cached into a table. The first layer reduces the
/// 2×2 quad (4 inputs); later layers are pointwise.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    layers: Vec<Layer>,
    width: usize,
}

impl BackboneWeights {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| bad_checkpoint("backbone has no layers"))?;
        if first.in_channels != QUAD {
            return Err(bad_checkpoint(format!(
                "first layer takes {} inputs, expected {QUAD}",
                first.in_channels
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.in_channels * l.out_channels || l.bias.len() != l.out_channels {
                return Err(bad_checkpoint(format!("layer {i}: weight or bias shape mismatch")));
            }
            if i > 0 && layers[i - 1].out_channels != l.in_channels {
                return Err(bad_checkpoint(format!(
                    "layer {i} takes {} channels but layer {} emits {}",
                    l.in_channels,
                    i - 1,
                    layers[i - 1].out_channels
                )));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(bad_checkpoint(format!("layer {i}: non-finite weights")));
            }
        }
        if layers.last().is_some_and(|l| l.activation != Activation::None) {
            return Err(bad_checkpoint("last layer must not have an activation"));
        }
        let width = layers.iter().map(|l| l.out_channels.max(l.in_channels)).max().unwrap_or(0);
        Ok(Self { layers, width })
    }

    /// Single linear layer.
    pub fn linear(weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        let out_channels = bias.len();
        Self::new(vec![Layer {
            in_channels: QUAD,
            out_channels,
            weight,
            bias,
            activation: Activation::None,
        }])
    }

    /// Fan-in-scaled uniform init: `hidden` widths between the quad and
    /// `out_channels` outputs.
    pub fn random(hidden: &[usize], out_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut dims = vec![QUAD];
        dims.extend_from_slice(hidden);
        dims.push(out_channels);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let bound = 1.0 / (d[0] as f32).sqrt();
                Layer {
                    in_channels: d[0],
                    out_channels: d[1],
                    weight: (0..d[0] * d[1]).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: (0..d[1]).map(|_| rng.random_range(-bound..bound)).collect(),
                    activation: if i + 2 == dims.len() {
                        Activation::None
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Evaluates the network on intensities in `[0, 256]`; outputs are in
    /// intensity units clamped to `[0, 255]`.
    pub fn forward(&self, quad: [f64; QUAD]) -> Result<Vec<f64>> {
        if let Some(bad) = quad.iter().find(|v| !(0.0..=256.0).contains(*v)) {
            return Err(crate::error::invalid_input(format!("backbone input {bad} outside [0, 256]")));
        }
        let mut out = vec![0.0; self.out_channels()];
        self.forward_into(quad, &mut out);
        Ok(out)
    }

    fn forward_into(&self, quad: [f64; QUAD], out: &mut [f64]) {
        let mut a = vec![0.0f64; self.width];
        let mut b = vec![0.0f64; self.width];
        for (i, v) in quad.iter().enumerate() {
            a[i] = v / 255.0;
        }
        for l in &self.layers {
            for o in 0..l.out_channels {
                let row = &l.weight[o * l.in_channels..(o + 1) * l.in_channels];
                let mut acc = l.bias[o] as f64;
                for (w, x) in row.iter().zip(&a[..l.in_channels]) {
                    acc += *w as f64 * x;
                }
                b[o] = match l.activation {
                    Activation::Relu => acc.max(0.0),
                    Activation::None => acc,
                };
            }
            std::mem::swap(&mut a, &mut b);
        }
        for (o, v) in out.iter_mut().zip(&a) {
            *o = (v * 255.0).clamp(0.0, 255.0);
        }
    }
}

impl Lookup for BackboneWeights {
    fn out_channels(&self) -> usize {
        BackboneWeights::out_channels(self)
    }

    fn lookup_into(&self, coords: [f64; QUAD], out: &mut [f64]) {
        self.forward_into(coords, out)
    }
}

/// Alias matching the operation name used by the CLI and docs.
pub fn forward_backbone(w: &BackboneWeights, quad: [f64; QUAD]) -> Result<Vec<f64>> {
    w.forward(quad)
}

/// Lattice points handed to one export task.
const EXPORT_BLOCK: usize = 1024;

/// Evaluates the backbone at every lattice point (knot 16 read as 255).
pub fn export_lut(w: &BackboneWeights, exec: Exec) -> Result<LutTable> {
    let c = w.out_channels();
    let mut entries = vec![0u8; LATTICE_POINTS * c];
    exec.install(|| {
        exec.for_each_chunk(&mut entries, EXPORT_BLOCK * c, |block, chunk| {
            let mut out = vec![0.0; c];
            for (i, px) in chunk.chunks_mut(c).enumerate() {
                let knots = lattice_knots(block * EXPORT_BLOCK + i);
                let quad = knots.map(|k| ((16 * k) as f64).min(255.0));
                w.forward_into(quad, &mut out);
                for (e, v) in px.iter_mut().zip(&out) {
                    *e = quantize_u8(*v);
                }
            }
        })
    })?;
    LutTable::new(c, entries)
}

/// Byte breakdown of a pipeline's weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageBreakdown {
    pub lut_bytes: usize,
    pub sampler_bytes: usize,
    pub residual_bytes: usize,
    pub total: usize,
}

impl StorageBreakdown {
    /// Total in binary megabytes (2^20 bytes).
    pub fn megabytes(&self) -> f64 {
        self.total as f64 / (1u64 << 20) as f64
    }
}

/// Table, sampler and residual bytes. Fixed-sampling groups store no
/// sampler or residual weights.
pub fn storage_size(topology: &Topology) -> StorageBreakdown {
    let mut s = StorageBreakdown {
        lut_bytes: 0,
        sampler_bytes: 0,
        residual_bytes: 0,
        total: 0,
    };
    for g in &topology.groups {
        s.lut_bytes += g.branches * LATTICE_POINTS * g.out_channels;
        if g.sampling == Sampling::Learned {
            s.sampler_bytes += g.branches * 2 * (g.k * g.k * QUAD) * 4;
            s.residual_bytes += g.branches * QUAD * 4;
        }
    }
    s.total = s.lut_bytes + s.sampler_bytes + s.residual_bytes;
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub topology: Topology,
    pub tensors: Vec<TensorEntry>,
}

/// Trainer-to-engine weight container.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blob: Vec<u8>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

impl Checkpoint {
    pub fn empty(topology: Topology) -> Self {
        Self {
            manifest: Manifest {
                topology,
                tensors: Vec::new(),
            },
            blob: Vec::new(),
        }
    }

    /// Appends a tensor at the end of the blob.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f32]) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(bad_checkpoint(format!("{name}: shape {shape:?} vs {} values", data.len())));
        }
        if self.manifest.tensors.iter().any(|t| t.name == name) {
            return Err(bad_checkpoint(format!("duplicate tensor {name}")));
        }
        self.manifest.tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            byte_offset: self.blob.len(),
        });
        for v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let t = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad_checkpoint(format!("missing tensor {name}")))?;
        let n: usize = t.shape.iter().product();
        let end = t.byte_offset + 4 * n;
        let raw = self
            .blob
            .get(t.byte_offset..end)
            .ok_or_else(|| bad_checkpoint(format!("{name}: bytes {}..{end} outside blob", t.byte_offset)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((t.shape.clone(), data))
    }

    fn has(&self, name: &str) -> bool {
        self.manifest.tensors.iter().any(|t| t.name == name)
    }

    /// Checks dtypes, bounds, overlaps and that the topology's tensors exist.
    pub fn validate(&self) -> Result<()> {
        self.manifest.topology.validate()?;
        let mut spans: Vec<(usize, usize, &str)> = Vec::new();
        let mut seen = BTreeMap::new();
        for t in &self.manifest.tensors {
            if t.dtype != "f32" {
                return Err(bad_checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
            }
            if seen.insert(t.name.as_str(), ()).is_some() {
                return Err(bad_checkpoint(format!("duplicate tensor {}", t.name)));
            }
            let end = t.byte_offset + 4 * t.shape.iter().product::<usize>();
            if end > self.blob.len() {
                return Err(bad_checkpoint(format!("{} extends past the blob", t.name)));
            }
            spans.push((t.byte_offset, end, &t.name));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad_checkpoint(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        for (gi, g) in self.manifest.topology.groups.iter().enumerate() {
            for bi in 0..g.branches {
                let p = format!("g{gi}.b{bi}");
                let mut required = vec![format!("{p}.backbone.0.weight"), format!("{p}.backbone.0.bias")];
                if g.sampling == Sampling::Learned {
                    required.push(format!("{p}.sampler_current"));
                    required.push(format!("{p}.sampler_previous"));
                    required.push(format!("{p}.residual"));
                }
                if let Some(missing) = required.iter().find(|n| !self.has(n)) {
                    return Err(bad_checkpoint(format!("missing tensor {missing}")));
                }
            }
        }
        Ok(())
    }

    pub fn backbone(&self, group: usize, branch: usize) -> Result<BackboneWeights> {
        let mut layers = Vec::new();
        let prefix = format!("g{group}.b{branch}.backbone");
        while self.has(&format!("{prefix}.{}.weight", layers.len())) {
            let l = layers.len();
            let (ws, w) = self.tensor(&format!("{prefix}.{l}.weight"))?;
            let (bs, b) = self.tensor(&format!("{prefix}.{l}.bias"))?;
            if ws.len() != 2 || bs.len() != 1 || ws[0] != bs[0] {
                return Err(bad_checkpoint(format!("{prefix}.{l}: bad weight/bias shapes")));
            }
            layers.push(Layer {
                in_channels: ws[1],
                out_channels: ws[0],
                weight: w,
                bias: b,
                activation: Activation::Relu,
            });
        }
        if let Some(last) = layers.last_mut() {
            last.activation = Activation::None;
        }
        let net = BackboneWeights::new(layers)?;
        let want = self.manifest.topology.groups[group].out_channels;
        if net.out_channels() != want {
            return Err(bad_checkpoint(format!(
                "{prefix}: emits {} channels, topology says {want}",
                net.out_channels()
            )));
        }
        Ok(net)
    }

    fn sampler(&self, name: &str, k: usize) -> Result<SamplerWeights> {
        let (shape, data) = self.tensor(name)?;
        if shape != [k, k, QUAD] {
            return Err(bad_checkpoint(format!("{name}: shape {shape:?}, expected [{k}, {k}, 4]")));
        }
        SamplerWeights::new(k, data).map_err(|e| bad_checkpoint(format!("{name}: {e}")))
    }

    /// Residual weights are projected onto `[0, 1]` on load.
    fn residual(&self, name: &str) -> Result<ResidualWeights> {
        let (shape, data) = self.tensor(name)?;
        if shape != [2, 2] {
            return Err(bad_checkpoint(format!("{name}: shape {shape:?}, expected [2, 2]")));
        }
        clamp_weights(std::array::from_fn(|i| data[i] as f64))
    }

    /// Random backbones (`hidden` widths), zero logits, residual 0.5.
    pub fn initialize(topology: Topology, hidden: &[usize], seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ck = Checkpoint::empty(topology.clone());
        for (gi, g) in topology.groups.iter().enumerate() {
            for bi in 0..g.branches {
                let p = format!("g{gi}.b{bi}");
                if g.sampling == Sampling::Learned {
                    let zeros = vec![0.0f32; g.k * g.k * QUAD];
                    ck.push(format!("{p}.sampler_current"), vec![g.k, g.k, QUAD], &zeros)?;
                    ck.push(format!("{p}.sampler_previous"), vec![g.k, g.k, QUAD], &zeros)?;
                    ck.push(format!("{p}.residual"), vec![2, 2], &[0.5; QUAD])?;
                }
                let net = BackboneWeights::random(hidden, g.out_channels, &mut rng)?;
                ck.push_backbone(&p, &net)?;
            }
        }
        Ok(ck)
    }

    pub fn push_backbone(&mut self, prefix: &str, net: &BackboneWeights) -> Result<()> {
        for (l, layer) in net.layers().iter().enumerate() {
            self.push(
                format!("{prefix}.backbone.{l}.weight"),
                vec![layer.out_channels, layer.in_channels],
                &layer.weight,
            )?;
            self.push(format!("{prefix}.backbone.{l}.bias"), vec![layer.out_channels], &layer.bias)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        let blob = std::fs::read(dir.join(WEIGHTS_FILE))?;
        let ck = Self { manifest, blob };
        ck.validate()?;
        Ok(ck)
    }

    /// Writes both files via temp-file + rename.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        for (name, bytes) in [(WEIGHTS_FILE, &self.blob), (MANIFEST_FILE, &json)] {
            let tmp = dir.join(format!(".{name}.tmp"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, dir.join(name))?;
        }
        Ok(())
    }

    /// Pipeline evaluated with backbones in place of tables and no 8-bit
    /// quantization between groups. Output is `scale·H × scale·W`.
    pub fn float_forward(&self, x: &Plane, exec: Exec) -> Result<FloatPlane> {
        self.validate()?;
        let topo = &self.manifest.topology;
        let nets = self.nets()?;
        exec.install(|| {
            let input = x.to_float();
            let mut older = input.clone();
            let mut newer = input;
            for (gi, g) in topo.groups.iter().enumerate() {
                let views = nets[gi]
                    .iter()
                    .map(|(branch, net)| BranchView {
                        current: branch.0.normalize(),
                        previous: branch.1.normalize(),
                        residual: branch.2.values().map(|v| v as f64),
                        entries: net,
                    })
                    .collect::<Vec<_>>();
                let out = group_response(&newer, &older, g.k, g.out_channels, &views, topo.ensemble, exec)?;
                older = std::mem::replace(&mut newer, out);
            }
            Ok(newer)
        })?
    }

    #[allow(clippy::type_complexity)]
    fn nets(
        &self,
    ) -> Result<Vec<Vec<((SamplerWeights, SamplerWeights, ResidualWeights), BackboneWeights)>>> {
        let topo = &self.manifest.topology;
        topo.groups
            .iter()
            .enumerate()
            .map(|(gi, g)| {
                (0..g.branches)
                    .map(|bi| {
                        let p = format!("g{gi}.b{bi}");
                        let weights = match g.sampling {
                            Sampling::Learned => (
                                self.sampler(&format!("{p}.sampler_current"), g.k)?,
                                self.sampler(&format!("{p}.sampler_previous"), g.k)?,
                                self.residual(&format!("{p}.residual"))?,
                            ),
                            Sampling::Fixed => {
                                let pattern = FIXED_PATTERNS.get(bi).ok_or_else(|| {
                                    bad_checkpoint(format!("no fixed sampling pattern for branch {bi}"))
                                })?;
                                let s = SamplerWeights::one_hot(3, *pattern)?;
                                (s.clone(), s, ResidualWeights::splat(0.0)?)
                            }
                        };
                        Ok((weights, self.backbone(gi, bi)?))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Converts a checkpoint into an inference pipeline by exporting every
/// backbone to a table.
pub fn export_pipeline(ck: &Checkpoint, exec: Exec) -> Result<PipelineConfig> {
    ck.validate()?;
    let topo = &ck.manifest.topology;
    let mut groups = Vec::with_capacity(topo.groups.len());
    for (g, nets) in topo.groups.iter().zip(ck.nets()?) {
        let branches = nets
            .into_iter()
            .map(|((cur, prev, res), net)| {
                Ok(Branch {
                    sampler_current: cur,
                    sampler_previous: prev,
                    residual: res,
                    lut: export_lut(&net, exec)?,
                })
            })
            .collect::<Result<_>>()?;
        groups.push(GroupConfig {
            sample_size: g.k,
            out_channels: g.out_channels,
            sampling: g.sampling,
            branches,
        });
    }
    let cfg = PipelineConfig {
        scale: topo.scale,
        ensemble: topo.ensemble,
        groups,
    };
    cfg.validate()?;
    Ok(cfg)
}
