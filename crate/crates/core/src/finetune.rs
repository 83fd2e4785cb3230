//! LUT-aware fine-tuning.
//!
//! Table entries, sampler logits and residual weights are trained together
//! with analytic gradients through the interpolated inference path. Entries
//! live in a real-valued shadow copy and are re-quantized only when the
//! pipeline is rebuilt. Rounding between groups is crossed with a
//! straight-through estimator.

use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adarl::{blend, clamp_weights};
use crate::autosample::{softmax_positions, NormalizedSampler, SampledQuad, SamplerWeights, QUAD};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::image::{load_y, resize, FloatPlane, Kernel, Plane};
use crate::lut::{simplex_trace, Entries, Interpolation, SimplexTrace, KNOT_SPACING};
use crate::par::Exec;
use crate::pipeline::{
    depth_to_space, extract_patch, order_free_mean4, BranchView, FeatureMap, GroupConfig,
    PatchAnchor, PipelineConfig, Sampling, ShadowTable,
};

/// Entries are stepped in normalized units (`entry / 255`), so one unit of
/// learning rate moves an entry by 255 levels.
pub const ENTRY_STEP_SCALE: f64 = 255.0;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Samples whose sparse gradients are held in memory at once.
const MERGE_WAVE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Side of the low-resolution training crop.
    pub patch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Round intermediate group outputs to 8 bits in the forward pass.
    pub quantize_features: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            patch_size: 48,
            steps: 1000,
            seed: 0,
            quantize_features: true,
        }
    }
}

impl FinetuneConfig {
    /// `steps` may be zero; everything else must be positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid_config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(invalid_config("batch size and patch size must be positive"));
        }
        Ok(())
    }
}

/// Low-resolution input and its high-resolution target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub lr: Plane,
    pub hr: Plane,
}

impl TrainingPair {
    fn check(&self, scale: usize) -> Result<()> {
        if self.lr.is_empty()
            || self.hr.height() != self.lr.height() * scale
            || self.hr.width() != self.lr.width() * scale
        {
            return Err(invalid_input(format!(
                "pair {}x{} -> {}x{} does not match scale {scale}",
                self.lr.height(),
                self.lr.width(),
                self.hr.height(),
                self.hr.width()
            )));
        }
        Ok(())
    }
}

fn window(p: &Plane, row: usize, col: usize, h: usize, w: usize) -> Plane {
    Plane::from_fn(h, w, |r, c| p.get(row + r, col + c))
}

/// Image pairs to crop training patches from.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub scale: usize,
    pub pairs: Vec<TrainingPair>,
}

impl Dataset {
    pub fn from_pairs(scale: usize, pairs: Vec<TrainingPair>) -> Result<Self> {
        for p in &pairs {
            p.check(scale)?;
        }
        Ok(Self { scale, pairs })
    }

    /// Crops each HR plane to a multiple of `scale` and bicubic-downscales it.
    pub fn from_hr(scale: usize, hr: Vec<Plane>) -> Result<Self> {
        let pairs = hr
            .into_iter()
            .map(|h| {
                let hr = h.crop_to_multiple(scale)?;
                if hr.is_empty() {
                    return Err(Error::InvalidDataset(format!("image smaller than scale {scale}")));
                }
                let lr = resize(&hr, hr.height() / scale, hr.width() / scale, Kernel::Bicubic)?;
                Ok(TrainingPair { lr, hr })
            })
            .collect::<Result<_>>()?;
        Self::from_pairs(scale, pairs)
    }

    /// Every `.png` in `dir` (sorted by name), converted to luma.
    pub fn load_dir(dir: impl AsRef<Path>, scale: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        Self::from_hr(scale, paths.iter().map(load_y).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Random aligned crops; crops shrink to fit small images.
    pub fn sample_batch(&self, rng: &mut impl Rng, batch: usize, patch: usize) -> Result<Vec<TrainingPair>> {
        if self.pairs.is_empty() {
            return Err(invalid_input("empty dataset"));
        }
        let s = self.scale;
        Ok((0..batch)
            .map(|_| {
                let p = &self.pairs[rng.random_range(0..self.pairs.len())];
                let (h, w) = (patch.min(p.lr.height()), patch.min(p.lr.width()));
                let r = rng.random_range(0..=p.lr.height() - h);
                let c = rng.random_range(0..=p.lr.width() - w);
                TrainingPair {
                    lr: window(&p.lr, r, c, h, w),
                    hr: window(&p.hr, r * s, c * s, h * s, w * s),
                }
            })
            .collect())
    }
}

/// Gradient of one lookup's output with respect to its table entries:
/// `(flat entry index, gradient)` for every touched entry.
pub fn grad_lut_entries(upstream: &[f64], trace: &SimplexTrace, channels: usize) -> Result<Vec<(usize, f64)>> {
    if upstream.len() != channels {
        return Err(Error::Internal(format!(
            "upstream gradient has {} values for a {channels}-channel lookup",
            upstream.len()
        )));
    }
    let mut out = Vec::with_capacity(5 * channels);
    for (&v, &w) in trace.vertices.iter().zip(&trace.weights) {
        if w != 0.0 {
            out.extend(upstream.iter().enumerate().map(|(c, g)| (v * channels + c, g * w)));
        }
    }
    Ok(out)
}

/// Gradient of one lookup with respect to its four coordinates.
pub fn grad_lookup_coords<E: Entries + ?Sized>(upstream: &[f64], trace: &SimplexTrace, table: &E) -> [f64; QUAD] {
    let mut g = [0.0; QUAD];
    for j in 1..5 {
        let (hi, lo) = (trace.vertices[j], trace.vertices[j - 1]);
        let s: f64 = upstream
            .iter()
            .enumerate()
            .map(|(c, u)| u * (table.entry(hi, c) - table.entry(lo, c)))
            .sum();
        g[trace.order[j - 1]] += s / KNOT_SPACING;
    }
    g
}

/// Backward of a per-channel softmax over positions: `W∘(g − Σ W g)`.
pub fn softmax_backward(weights: &[f64], grad_weights: &[f64]) -> Vec<f64> {
    let n = weights.len() / QUAD;
    let mut out = vec![0.0; weights.len()];
    for q in 0..QUAD {
        let dot: f64 = (0..n).map(|p| weights[p * QUAD + q] * grad_weights[p * QUAD + q]).sum();
        for p in 0..n {
            let i = p * QUAD + q;
            out[i] = weights[i] * (grad_weights[i] - dot);
        }
    }
    out
}

/// Forward quantities of one branch lookup needed by the backward pass.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub patch_current: Vec<f64>,
    pub patch_previous: Vec<f64>,
    pub current: SampledQuad,
    pub previous: SampledQuad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerResidualGrad {
    pub logits_current: Vec<f64>,
    pub logits_previous: Vec<f64>,
    pub residual: [f64; QUAD],
}

/// Chains a coordinate gradient through the blend, both samplers and their
/// softmax normalizations.
pub fn grad_sampler_and_residual(
    coord_grad: [f64; QUAD],
    trace: &SampleTrace,
    current: &NormalizedSampler,
    previous: &NormalizedSampler,
    residual: [f64; QUAD],
) -> SamplerResidualGrad {
    let n = current.weights().len();
    let mut gw_cur = vec![0.0; n];
    let mut gw_prev = vec![0.0; n];
    let mut g_res = [0.0; QUAD];
    blend_backward(
        coord_grad,
        &trace.current,
        &trace.previous,
        residual,
        &trace.patch_current,
        &trace.patch_previous,
        &mut gw_cur,
        &mut gw_prev,
        &mut g_res,
    );
    SamplerResidualGrad {
        logits_current: softmax_backward(current.weights(), &gw_cur),
        logits_previous: softmax_backward(previous.weights(), &gw_prev),
        residual: g_res,
    }
}

/// Accumulates sampling-weight and residual gradients; returns the quad
/// gradients `(d/da, d/db)`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn blend_backward(
    gc: [f64; QUAD],
    a: &SampledQuad,
    b: &SampledQuad,
    residual: [f64; QUAD],
    patch_cur: &[f64],
    patch_prev: &[f64],
    gw_cur: &mut [f64],
    gw_prev: &mut [f64],
    g_res: &mut [f64; QUAD],
) -> (SampledQuad, SampledQuad) {
    let ga: SampledQuad = std::array::from_fn(|q| gc[q] * (1.0 - residual[q]));
    let gb: SampledQuad = std::array::from_fn(|q| gc[q] * residual[q]);
    for q in 0..QUAD {
        g_res[q] += gc[q] * (b[q] - a[q]);
    }
    for (p, (&xc, &xp)) in patch_cur.iter().zip(patch_prev).enumerate() {
        for q in 0..QUAD {
            gw_cur[p * QUAD + q] += ga[q] * xc;
            gw_prev[p * QUAD + q] += gb[q] * xp;
        }
    }
    (ga, gb)
}

/// Trainable copy of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableBranch {
    pub table: ShadowTable,
    pub logits_current: Vec<f64>,
    pub logits_previous: Vec<f64>,
    pub residual: [f64; QUAD],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableGroup {
    pub k: usize,
    pub out_channels: usize,
    pub sampling: Sampling,
    pub branches: Vec<TrainableBranch>,
}

/// Real-valued parameter space of a pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainablePipeline {
    pub scale: usize,
    pub ensemble: bool,
    pub groups: Vec<TrainableGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchGradients {
    pub entries: Vec<f64>,
    pub logits_current: Vec<f64>,
    pub logits_previous: Vec<f64>,
    pub residual: [f64; QUAD],
}

/// Same layout as [`TrainablePipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub groups: Vec<Vec<BranchGradients>>,
}

struct Record {
    a: SampledQuad,
    b: SampledQuad,
    trace: SimplexTrace,
}

struct RotationTape {
    turns: u32,
    cur: FloatPlane,
    prev: FloatPlane,
    /// `(pixel * branches + branch)`.
    records: Vec<Record>,
}

struct Tape {
    groups: Vec<Vec<RotationTape>>,
    output: FloatPlane,
}

/// Per-sample gradient: sparse entries, dense sampling-weight (pre-softmax
/// Jacobian) and residual gradients.
struct SampleGrad {
    entries: Vec<(u32, f64)>,
    gw_cur: Vec<f64>,
    gw_prev: Vec<f64>,
    residual: [f64; QUAD],
}

fn add_into(dst: &mut FloatPlane, src: &FloatPlane) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

type Views<'a> = Vec<Vec<BranchView<'a, ShadowTable>>>;

impl TrainablePipeline {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = cfg
            .groups
            .iter()
            .map(|g| {
                let branches = g
                    .branches
                    .iter()
                    .map(|b| {
                        if b.lut.interpolation() != Interpolation::Simplex {
                            return Err(invalid_config("fine-tuning requires simplex tables"));
                        }
                        Ok(TrainableBranch {
                            table: ShadowTable::from_lut(&b.lut),
                            logits_current: b.sampler_current.logits().iter().map(|&v| v as f64).collect(),
                            logits_previous: b.sampler_previous.logits().iter().map(|&v| v as f64).collect(),
                            residual: b.residual.values().map(|v| v as f64),
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(TrainableGroup {
                    k: g.sample_size,
                    out_channels: g.out_channels,
                    sampling: g.sampling,
                    branches,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            scale: cfg.scale,
            ensemble: cfg.ensemble,
            groups,
        })
    }

    /// Re-quantizes entries to 8 bits and logits to f32.
    pub fn to_pipeline(&self) -> Result<PipelineConfig> {
        let groups = self
            .groups
            .iter()
            .map(|g| {
                let branches = g
                    .branches
                    .iter()
                    .map(|b| {
                        let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
                        Ok(crate::pipeline::Branch {
                            sampler_current: SamplerWeights::new(g.k, f32s(&b.logits_current))?,
                            sampler_previous: SamplerWeights::new(g.k, f32s(&b.logits_previous))?,
                            residual: clamp_weights(b.residual)?,
                            lut: b.table.to_lut()?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(GroupConfig {
                    sample_size: g.k,
                    out_channels: g.out_channels,
                    sampling: g.sampling,
                    branches,
                })
            })
            .collect::<Result<_>>()?;
        let cfg = PipelineConfig {
            scale: self.scale,
            ensemble: self.ensemble,
            groups,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn views(&self) -> Result<Views<'_>> {
        self.groups
            .iter()
            .map(|g| {
                g.branches
                    .iter()
                    .map(|b| {
                        for v in &b.residual {
                            if !(0.0..=1.0).contains(v) {
                                return Err(Error::ContractViolation(format!("residual weight {v} outside [0, 1]")));
                            }
                        }
                        Ok(BranchView {
                            current: NormalizedSampler::from_weights(g.k, softmax_positions(&b.logits_current, g.k))?,
                            previous: NormalizedSampler::from_weights(g.k, softmax_positions(&b.logits_previous, g.k))?,
                            residual: b.residual,
                            entries: &b.table,
                        })
                    })
                    .collect()
            })
            .collect()
    }

    fn forward(&self, views: &Views<'_>, x: &Plane, quantize: bool, keep: bool) -> Result<Tape> {
        let input = x.to_float();
        let mut older = input.clone();
        let mut newer = input;
        let last = self.groups.len() - 1;
        let turns = if self.ensemble { 4 } else { 1 };
        let mut tapes = Vec::with_capacity(self.groups.len());
        for (gi, g) in self.groups.iter().enumerate() {
            let mut outs = Vec::with_capacity(turns as usize);
            let mut rots = Vec::new();
            for t in 0..turns {
                let cur = newer.rotate90(t);
                let prev = older.rotate90(t);
                let (y, records) = forward_rotation(&cur, &prev, g.k, g.out_channels, &views[gi])?;
                outs.push(y.rotate90((4 - t) % 4));
                if keep {
                    rots.push(RotationTape { turns: t, cur, prev, records });
                }
            }
            let mut out = if turns == 1 {
                outs.pop().expect("one rotation")
            } else {
                let data = (0..outs[0].data.len())
                    .map(|i| order_free_mean4([outs[0].data[i], outs[1].data[i], outs[2].data[i], outs[3].data[i]]))
                    .collect();
                FloatPlane::new(outs[0].height, outs[0].width, data)?
            };
            if quantize && gi != last {
                out = out.quantize().to_float();
            }
            tapes.push(rots);
            older = std::mem::replace(&mut newer, out);
        }
        Ok(Tape {
            groups: tapes,
            output: newer,
        })
    }

    /// Float output (no final rounding) of the trainable pipeline.
    pub fn predict(&self, x: &Plane, quantize: bool) -> Result<FloatPlane> {
        let views = self.views()?;
        Ok(self.forward(&views, x, quantize, false)?.output)
    }

    fn backward(&self, views: &Views<'_>, tape: &Tape, upstream: FloatPlane) -> Vec<Vec<SampleGrad>> {
        let ng = self.groups.len();
        let mut grads: Vec<Vec<SampleGrad>> = self
            .groups
            .iter()
            .map(|g| {
                g.branches
                    .iter()
                    .map(|_| SampleGrad {
                        entries: Vec::new(),
                        gw_cur: vec![0.0; g.k * g.k * QUAD],
                        gw_prev: vec![0.0; g.k * g.k * QUAD],
                        residual: [0.0; QUAD],
                    })
                    .collect()
            })
            .collect();
        let mut g_out: Vec<Option<FloatPlane>> = (0..ng).map(|_| None).collect();
        g_out[ng - 1] = Some(upstream);
        for gi in (0..ng).rev() {
            let Some(gy) = g_out[gi].take() else { continue };
            let group = &self.groups[gi];
            let need_input = gi > 0;
            let rots = &tape.groups[gi];
            let share = 1.0 / rots.len() as f64;
            let (h, w) = (rots[0].cur.height, rots[0].cur.width);
            let (h, w) = if rots[0].turns % 2 == 1 { (w, h) } else { (h, w) };
            let mut gx_cur = FloatPlane::zeros(h, w);
            let mut gx_prev = FloatPlane::zeros(h, w);
            for rt in rots {
                let mut gt = gy.rotate90(rt.turns);
                gt.data.iter_mut().for_each(|v| *v *= share);
                let (gc, gp) = backward_rotation(rt, &gt, group, &views[gi], &mut grads[gi], need_input);
                if need_input {
                    let back = (4 - rt.turns) % 4;
                    add_into(&mut gx_cur, &gc.rotate90(back));
                    add_into(&mut gx_prev, &gp.rotate90(back));
                }
            }
            // Straight-through: the rounding between groups passes gradients unchanged.
            if gi >= 1 {
                match &mut g_out[gi - 1] {
                    Some(acc) => add_into(acc, &gx_cur),
                    slot => *slot = Some(gx_cur),
                }
            }
            if gi >= 2 {
                match &mut g_out[gi - 2] {
                    Some(acc) => add_into(acc, &gx_prev),
                    slot => *slot = Some(gx_prev),
                }
            }
        }
        grads
    }

    fn sample_loss_grad(&self, views: &Views<'_>, pair: &TrainingPair, quantize: bool, weight: f64) -> Result<(f64, Vec<Vec<SampleGrad>>)> {
        pair.check(self.scale)?;
        let tape = self.forward(views, &pair.lr, quantize, true)?;
        let n = tape.output.data.len() as f64;
        let mut loss = 0.0;
        let mut upstream = FloatPlane::zeros(tape.output.height, tape.output.width);
        for ((u, &y), &t) in upstream.data.iter_mut().zip(&tape.output.data).zip(pair.hr.data()) {
            let d = y - t as f64;
            loss += d * d;
            *u = 2.0 * d / n * weight;
        }
        let grads = self.backward(views, &tape, upstream);
        Ok((loss / n, grads))
    }

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            groups: self
                .groups
                .iter()
                .map(|g| {
                    g.branches
                        .iter()
                        .map(|b| BranchGradients {
                            entries: vec![0.0; b.table.entries.len()],
                            logits_current: vec![0.0; b.logits_current.len()],
                            logits_previous: vec![0.0; b.logits_previous.len()],
                            residual: [0.0; QUAD],
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Mean per-sample MSE over `batch` and its gradient. Samples are
    /// processed in parallel; their contributions are merged in batch order.
    pub fn loss_and_gradients(&self, batch: &[TrainingPair], quantize: bool, exec: Exec) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(invalid_input("empty batch"));
        }
        let views = self.views()?;
        let weight = 1.0 / batch.len() as f64;
        let mut total = self.zero_gradients();
        let mut gw: Vec<Vec<(Vec<f64>, Vec<f64>)>> = total
            .groups
            .iter()
            .map(|g| g.iter().map(|b| (vec![0.0; b.logits_current.len()], vec![0.0; b.logits_previous.len()])).collect())
            .collect();
        let mut loss = 0.0;
        for wave in batch.chunks(MERGE_WAVE) {
            let results = exec.map_range(wave.len(), |i| self.sample_loss_grad(&views, &wave[i], quantize, weight));
            for r in results {
                let (l, sample) = r?;
                loss += l * weight;
                for (gi, branches) in sample.into_iter().enumerate() {
                    for (bi, s) in branches.into_iter().enumerate() {
                        let dst = &mut total.groups[gi][bi];
                        for (idx, v) in s.entries {
                            dst.entries[idx as usize] += v;
                        }
                        let (c, p) = &mut gw[gi][bi];
                        c.iter_mut().zip(&s.gw_cur).for_each(|(d, v)| *d += v);
                        p.iter_mut().zip(&s.gw_prev).for_each(|(d, v)| *d += v);
                        for q in 0..QUAD {
                            dst.residual[q] += s.residual[q];
                        }
                    }
                }
            }
        }
        for (gi, g) in self.groups.iter().enumerate() {
            if g.sampling == Sampling::Fixed {
                continue;
            }
            for (bi, v) in views[gi].iter().enumerate() {
                let (c, p) = &gw[gi][bi];
                let dst = &mut total.groups[gi][bi];
                dst.logits_current = softmax_backward(v.current.weights(), c);
                dst.logits_previous = softmax_backward(v.previous.weights(), p);
            }
        }
        for (g, grads) in self.groups.iter().zip(&mut total.groups) {
            if g.sampling == Sampling::Fixed {
                grads.iter_mut().for_each(|b| b.residual = [0.0; QUAD]);
            }
        }
        Ok((loss, total))
    }

    /// Mean per-sample MSE over `batch`.
    pub fn loss(&self, batch: &[TrainingPair], quantize: bool, exec: Exec) -> Result<f64> {
        if batch.is_empty() {
            return Err(invalid_input("empty batch"));
        }
        let views = self.views()?;
        let losses = exec.map_range(batch.len(), |i| -> Result<f64> {
            let pair = &batch[i];
            pair.check(self.scale)?;
            let y = self.forward(&views, &pair.lr, quantize, false)?.output;
            Ok(mse(&y, &pair.hr))
        });
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Hash of every simplex visited on `batch`. Two parameter settings with
    /// the same signature lie in the same linear piece of the lookups.
    pub fn trace_signature(&self, batch: &[TrainingPair], quantize: bool) -> Result<u64> {
        let views = self.views()?;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for pair in batch {
            let tape = self.forward(&views, &pair.lr, quantize, true)?;
            for rots in &tape.groups {
                for rt in rots {
                    for r in &rt.records {
                        r.trace.vertices.hash(&mut h);
                    }
                }
            }
        }
        Ok(h.finish())
    }
}

fn mse(y: &FloatPlane, target: &Plane) -> f64 {
    let n = y.data.len() as f64;
    y.data.iter().zip(target.data()).map(|(&a, &b)| (a - b as f64).powi(2)).sum::<f64>() / n
}

fn forward_rotation(
    cur: &FloatPlane,
    prev: &FloatPlane,
    k: usize,
    channels: usize,
    views: &[BranchView<'_, ShadowTable>],
) -> Result<(FloatPlane, Vec<Record>)> {
    let (h, w) = (cur.height, cur.width);
    let nb = views.len();
    let mut data = vec![0.0; h * w * channels];
    let mut records = Vec::with_capacity(h * w * nb);
    let mut pc = vec![0.0; k * k];
    let mut pp = vec![0.0; k * k];
    let mut tmp = vec![0.0; channels];
    for row in 0..h {
        for col in 0..w {
            let out = &mut data[(row * w + col) * channels..][..channels];
            for v in views {
                extract_patch(cur, row, col, k, PatchAnchor::TopLeft, &mut pc);
                extract_patch(prev, row, col, k, PatchAnchor::TopLeft, &mut pp);
                let a = v.current.sample(&pc);
                let b = v.previous.sample(&pp);
                let coords = std::array::from_fn(|i| blend(a[i], b[i], v.residual[i]));
                let trace = simplex_trace(coords);
                v.entries.interpolate_simplex(&trace, &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o += t;
                }
                records.push(Record { a, b, trace });
            }
            let n = nb as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
    }
    let scale = (channels as f64).sqrt().round() as usize;
    let fm = FeatureMap {
        height: h,
        width: w,
        channels,
        data,
    };
    Ok((depth_to_space(&fm, scale)?, records))
}

fn scatter_patch(g: &mut FloatPlane, row: usize, col: usize, k: usize, grad: &[f64]) {
    let (h, w) = (g.height as isize, g.width as isize);
    for (p, &v) in grad.iter().enumerate() {
        let r = (row + p / k) as isize;
        let c = (col + p % k) as isize;
        *g.get_mut(r.clamp(0, h - 1) as usize, c.clamp(0, w - 1) as usize) += v;
    }
}

fn backward_rotation(
    rt: &RotationTape,
    gt: &FloatPlane,
    group: &TrainableGroup,
    views: &[BranchView<'_, ShadowTable>],
    grads: &mut [SampleGrad],
    need_input: bool,
) -> (FloatPlane, FloatPlane) {
    let (h, w) = (rt.cur.height, rt.cur.width);
    let (k, channels) = (group.k, group.out_channels);
    let nb = views.len();
    let s = (channels as f64).sqrt().round() as usize;
    let learned = group.sampling == Sampling::Learned;
    let mut gx_cur = FloatPlane::zeros(if need_input { h } else { 0 }, if need_input { w } else { 0 });
    let mut gx_prev = gx_cur.clone();
    let mut gv = vec![0.0; channels];
    let mut pc = vec![0.0; k * k];
    let mut pp = vec![0.0; k * k];
    let mut gpc = vec![0.0; k * k];
    let mut gpp = vec![0.0; k * k];
    for row in 0..h {
        for col in 0..w {
            for (c, g) in gv.iter_mut().enumerate() {
                *g = gt.get(row * s + c / s, col * s + c % s) / nb as f64;
            }
            for (bi, v) in views.iter().enumerate() {
                let rec = &rt.records[(row * w + col) * nb + bi];
                let acc = &mut grads[bi];
                for (&vx, &wt) in rec.trace.vertices.iter().zip(&rec.trace.weights) {
                    if wt != 0.0 {
                        for (c, g) in gv.iter().enumerate() {
                            acc.entries.push(((vx * channels + c) as u32, g * wt));
                        }
                    }
                }
                if !learned && !need_input {
                    continue;
                }
                let gc = grad_lookup_coords(&gv, &rec.trace, v.entries);
                extract_patch(&rt.cur, row, col, k, PatchAnchor::TopLeft, &mut pc);
                extract_patch(&rt.prev, row, col, k, PatchAnchor::TopLeft, &mut pp);
                let (ga, gb) = blend_backward(
                    gc,
                    &rec.a,
                    &rec.b,
                    v.residual,
                    &pc,
                    &pp,
                    &mut acc.gw_cur,
                    &mut acc.gw_prev,
                    &mut acc.residual,
                );
                if need_input {
                    for p in 0..k * k {
                        gpc[p] = (0..QUAD).map(|q| ga[q] * v.current.weights()[p * QUAD + q]).sum();
                        gpp[p] = (0..QUAD).map(|q| gb[q] * v.previous.weights()[p * QUAD + q]).sum();
                    }
                    scatter_patch(&mut gx_cur, row, col, k, &gpc);
                    scatter_patch(&mut gx_prev, row, col, k, &gpp);
                }
            }
        }
    }
    (gx_cur, gx_prev)
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: i32) {
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Adam with bias correction and no weight decay. After each step residual
/// weights are clamped to `[0, 1]` and entries to `[0, 255]`.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: i32,
    state: Vec<Vec<[Moments; 4]>>,
}

impl Adam {
    pub fn new(model: &TrainablePipeline, lr: f64) -> Self {
        let state = model
            .groups
            .iter()
            .map(|g| {
                g.branches
                    .iter()
                    .map(|b| {
                        [
                            Moments::new(b.table.entries.len()),
                            Moments::new(b.logits_current.len()),
                            Moments::new(b.logits_previous.len()),
                            Moments::new(QUAD),
                        ]
                    })
                    .collect()
            })
            .collect();
        Self { lr, t: 0, state }
    }

    pub fn step(&mut self, model: &mut TrainablePipeline, grads: &Gradients) {
        self.t += 1;
        for ((g, gg), st) in model.groups.iter_mut().zip(&grads.groups).zip(&mut self.state) {
            let learned = g.sampling == Sampling::Learned;
            for ((b, bg), [me, mc, mp, mr]) in g.branches.iter_mut().zip(gg).zip(st.iter_mut()) {
                me.step(&mut b.table.entries, &bg.entries, self.lr * ENTRY_STEP_SCALE, self.t);
                b.table.entries.iter_mut().for_each(|e| *e = e.clamp(0.0, 255.0));
                if learned {
                    mc.step(&mut b.logits_current, &bg.logits_current, self.lr, self.t);
                    mp.step(&mut b.logits_previous, &bg.logits_previous, self.lr, self.t);
                    mr.step(&mut b.residual, &bg.residual, self.lr, self.t);
                    b.residual.iter_mut().for_each(|r| *r = r.clamp(0.0, 1.0));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub pipeline: PipelineConfig,
    /// Training-batch loss before each step.
    pub losses: Vec<LossPoint>,
    /// Loss on a fixed batch drawn before training, before and after.
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

pub fn finetune(pipeline: &PipelineConfig, data: &Dataset, cfg: &FinetuneConfig, exec: Exec) -> Result<FinetuneReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid_input("empty dataset"));
    }
    if data.scale != pipeline.scale {
        return Err(invalid_input(format!(
            "dataset scale {} does not match pipeline scale {}",
            data.scale, pipeline.scale
        )));
    }
    let mut model = TrainablePipeline::from_pipeline(pipeline)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = data.sample_batch(&mut rng, cfg.batch_size, cfg.patch_size)?;
    let q = cfg.quantize_features;
    exec.install(|| {
        let initial_eval_loss = model.loss(&eval, q, exec)?;
        let mut adam = Adam::new(&model, cfg.learning_rate);
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let batch = data.sample_batch(&mut rng, cfg.batch_size, cfg.patch_size)?;
            let (loss, grads) = model.loss_and_gradients(&batch, q, exec)?;
            losses.push(LossPoint { step, loss });
            adam.step(&mut model, &grads);
        }
        let final_eval_loss = model.loss(&eval, q, exec)?;
        Ok(FinetuneReport {
            pipeline: model.to_pipeline()?,
            losses,
            initial_eval_loss,
            final_eval_loss,
        })
    })?
}
