//! Dual-pathway (slow/fast) 3D convolutional identity classifier.
//!
//! The slow pathway sees every `alpha`-th frame at full channel width; the
//! fast pathway sees every frame at `beta` of that width. After the stem and
//! after every stage but the last, a time-strided convolution maps fast
//! features onto the slow pathway's frame rate and they are concatenated
//! onto the slow channels. Both pathways end in global average pooling,
//! their features are concatenated, and one fully connected layer produces
//! the class logits.

mod checkpoint;
mod config;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{FastInput, InputShape, Layout, ModelConfig, Norm, Pathway};

use crate::data::ClipTensor;
use crate::error::{Error, Result};
use crate::nn::{self, Conv3d, Volume};
use crate::seed;

/// Temporal kernel of the fast stem.
pub const FAST_STEM_FRAMES: usize = 5;

/// A named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvUnit {
    conv: Conv3d,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv_a: ConvUnit,
    conv_b: ConvUnit,
    shortcut: Option<ConvUnit>,
}

#[derive(Clone, Debug, PartialEq)]
struct PathwayNet {
    stem: ConvUnit,
    stages: Vec<Vec<Block>>,
}

#[derive(Clone, Debug, PartialEq)]
struct Architecture {
    slow: PathwayNet,
    fast: Option<PathwayNet>,
    /// `laterals[j]` fuses the fast input of stage `j` into the slow input
    /// of stage `j`.
    laterals: Vec<ConvUnit>,
    head_weight: usize,
    head_bias: usize,
    slow_features: usize,
    fast_features: usize,
}

/// Parameter gradients, aligned with [`Model::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients(model.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|g| g.fill(0.0));
    }
}

/// A trained or freshly initialised network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    fingerprint: String,
    arch: Architecture,
}

/// Normalized output of one convolution, kept for the backward pass.
struct NormCache {
    y: Volume,
    scale: Vec<f64>,
}

/// Norm caches indexed by the unit's weight parameter.
type NormCaches = Vec<Option<NormCache>>;

struct BlockTrace {
    input: Volume,
    hidden: Volume,
    output: Volume,
}

/// Intermediate activations of one forward pass.
pub struct Trace {
    slow_input: Volume,
    fast_input: Option<Volume>,
    slow_stem: Volume,
    fast_stem: Option<Volume>,
    slow_blocks: Vec<Vec<BlockTrace>>,
    fast_blocks: Vec<Vec<BlockTrace>>,
    features: Vec<f64>,
    norms: NormCaches,
    pub logits: Vec<f64>,
}

impl Trace {
    /// Output of the last convolutional block of `pathway`.
    pub fn final_activations(&self, pathway: Pathway) -> Option<&Volume> {
        let blocks = match pathway {
            Pathway::Slow => &self.slow_blocks,
            Pathway::Fast => &self.fast_blocks,
        };
        blocks.last().and_then(|s| s.last()).map(|b| &b.output)
    }
}

/// Splits a clip into the slow (every `alpha`-th frame from frame 0) and
/// fast (every frame) pathway inputs, as `[C][T][H][W]` volumes.
pub fn sample_pathways(clip: &ClipTensor, alpha: usize) -> Result<(Volume, Volume)> {
    if alpha == 0 || clip.frames % alpha != 0 {
        return Err(Error::Config(format!(
            "alpha {alpha} must divide the clip length {}",
            clip.frames
        )));
    }
    let fast = clip_volume(clip, 1);
    let slow = if alpha == 1 { fast.clone() } else { clip_volume(clip, alpha) };
    Ok((slow, fast))
}

/// Channel-major volume of every `stride`-th frame.
fn clip_volume(clip: &ClipTensor, stride: usize) -> Volume {
    let (h, w, c) = (clip.height, clip.width, clip.channels);
    let frames: Vec<usize> = (0..clip.frames).step_by(stride).collect();
    let mut vol = Volume::zeros(c, frames.len(), h, w);
    let plane = h * w;
    for (k, &t) in frames.iter().enumerate() {
        let src = clip.frame(t);
        for ch in 0..c {
            let dst = &mut vol.data[(ch * frames.len() + k) * plane..][..plane];
            for (d, s) in dst.iter_mut().zip(src.iter().skip(ch).step_by(c)) {
                *d = f64::from(*s);
            }
        }
    }
    vol
}

/// Subtracts each pixel's mean (or median) over time.
fn remove_temporal_baseline(v: &mut Volume, median: bool) {
    let plane = v.height * v.width;
    let frames = v.frames;
    let mut series = vec![0.0; frames];
    for ch in v.data.chunks_mut(frames * plane) {
        for p in 0..plane {
            for (t, s) in series.iter_mut().enumerate() {
                *s = ch[t * plane + p];
            }
            let base = if median {
                series.sort_by(f64::total_cmp);
                let mid = frames / 2;
                if frames % 2 == 1 {
                    series[mid]
                } else {
                    0.5 * (series[mid - 1] + series[mid])
                }
            } else {
                series.iter().sum::<f64>() / frames as f64
            };
            for t in 0..frames {
                ch[t * plane + p] -= base;
            }
        }
    }
}

struct Builder<'a> {
    config: &'a ModelConfig,
    params: Vec<Param>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, conv: Conv3d) -> ConvUnit {
        let weight = self.params.len();
        self.params.push(Param {
            name: format!("{name}.weight"),
            shape: conv.weight_shape().to_vec(),
            data: Vec::new(),
        });
        let bias = self.params.len();
        self.params.push(Param {
            name: format!("{name}.bias"),
            shape: vec![conv.out_channels],
            data: Vec::new(),
        });
        ConvUnit { conv, weight, bias }
    }

    fn pathway(
        &mut self,
        name: &str,
        stem_frames: usize,
        widths: &[usize],
        stage_in: impl Fn(usize) -> usize,
        temporal_kernel: impl Fn(usize) -> usize,
    ) -> PathwayNet {
        let s = self.config.stem_stride;
        let (k, pad) = if s == 1 { (3, 1) } else { (s, 0) };
        let stem = self.conv(
            &format!("{name}.stem"),
            Conv3d {
                in_channels: self.config.input_shape.channels,
                out_channels: widths[0],
                kernel: [stem_frames, k, k],
                stride: [1, s, s],
                padding: [stem_frames / 2, pad, pad],
            },
        );
        let mut stages = Vec::new();
        for (i, &depth) in self.config.stage_depths.iter().enumerate() {
            let mut blocks = Vec::new();
            for d in 0..depth {
                let in_ch = if d == 0 { stage_in(i) } else { widths[i] };
                let stride = if d == 0 && i > 0 { 2 } else { 1 };
                let kt = temporal_kernel(i);
                let prefix = format!("{name}.stage{i}.block{d}");
                let conv_a = self.conv(
                    &format!("{prefix}.conv_a"),
                    Conv3d {
                        in_channels: in_ch,
                        out_channels: widths[i],
                        kernel: [kt, 3, 3],
                        stride: [1, stride, stride],
                        padding: [kt / 2, 1, 1],
                    },
                );
                let conv_b = self.conv(
                    &format!("{prefix}.conv_b"),
                    Conv3d {
                        in_channels: widths[i],
                        out_channels: widths[i],
                        kernel: [1, 3, 3],
                        stride: [1, 1, 1],
                        padding: [0, 1, 1],
                    },
                );
                let shortcut = (in_ch != widths[i] || stride != 1).then(|| {
                    self.conv(
                        &format!("{prefix}.shortcut"),
                        Conv3d {
                            in_channels: in_ch,
                            out_channels: widths[i],
                            kernel: [1, 1, 1],
                            stride: [1, stride, stride],
                            padding: [0, 0, 0],
                        },
                    )
                });
                blocks.push(Block {
                    conv_a,
                    conv_b,
                    shortcut,
                });
            }
            stages.push(blocks);
        }
        PathwayNet { stem, stages }
    }
}

/// Builds and deterministically initialises a model.
///
/// Convolution and dense weights are drawn from a zero-mean normal with
/// variance `2 / fan_in` (dense: `1 / fan_in`); biases start at zero.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let stages = config.num_stages();
    let slow_widths: Vec<usize> = (0..stages).map(|i| config.slow_width(i)).collect();
    let fast_widths: Vec<usize> = (0..stages).map(|i| config.fast_width(i)).collect();
    let dual = config.layout == Layout::SlowFast;
    let alpha = config.alpha;

    let mut b = Builder {
        config,
        params: Vec::new(),
    };

    let lateral_out = |j: usize| if dual { 2 * fast_widths[j.saturating_sub(1)] } else { 0 };
    let slow_in = |i: usize| {
        let own = if i == 0 { slow_widths[0] } else { slow_widths[i - 1] };
        own + lateral_out(i)
    };
    // Early slow stages use no temporal kernel, later ones span 3 frames.
    let slow_kt = |i: usize| if i < stages / 2 { 1 } else { 3 };
    let slow = b.pathway("slow", 1, &slow_widths, slow_in, slow_kt);

    let (fast, laterals) = if dual {
        let fast_in = |i: usize| if i == 0 { fast_widths[0] } else { fast_widths[i - 1] };
        let fast = b.pathway("fast", FAST_STEM_FRAMES, &fast_widths, fast_in, |_| 3);
        let (kt, pad) = if alpha == 1 { (1, 0) } else { (alpha + 1, alpha / 2) };
        let laterals = (0..stages)
            .map(|j| {
                let in_ch = fast_widths[j.saturating_sub(1)];
                b.conv(
                    &format!("lateral{j}"),
                    Conv3d {
                        in_channels: in_ch,
                        out_channels: 2 * in_ch,
                        kernel: [kt, 1, 1],
                        stride: [alpha, 1, 1],
                        padding: [pad, 0, 0],
                    },
                )
            })
            .collect();
        (Some(fast), laterals)
    } else {
        (None, Vec::new())
    };

    let slow_features = slow_widths[stages - 1];
    let fast_features = if dual { fast_widths[stages - 1] } else { 0 };
    let features = slow_features + fast_features;
    let head_weight = b.params.len();
    b.params.push(Param {
        name: "head.weight".into(),
        shape: vec![config.num_classes, features],
        data: Vec::new(),
    });
    let head_bias = b.params.len();
    b.params.push(Param {
        name: "head.bias".into(),
        shape: vec![config.num_classes],
        data: Vec::new(),
    });

    let mut params = b.params;
    for (i, p) in params.iter_mut().enumerate() {
        let len: usize = p.shape.iter().product();
        if p.name.ends_with(".bias") {
            p.data = vec![0.0; len];
            continue;
        }
        let fan_in: usize = p.shape[1..].iter().product();
        let gain = if p.name.starts_with("head") { 1.0 } else { 2.0 };
        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = seed::rng(seed::derive(config.seed, &[i as u64]));
        p.data = (0..len).map(|_| normal.sample(&mut rng)).collect();
    }

    let arch = Architecture {
        slow,
        fast,
        laterals,
        head_weight,
        head_bias,
        slow_features,
        fast_features,
    };
    let model = Model {
        fingerprint: fingerprint_of(config, &params),
        config: config.clone(),
        params,
        arch,
    };
    model.check_geometry()?;
    Ok(model)
}

/// Hash of the layer layout; independent of seed and parameter values.
fn fingerprint_of(config: &ModelConfig, params: &[Param]) -> String {
    let mut h = Sha256::new();
    let s = config.input_shape;
    h.update(format!(
        "layout={:?};norm={:?};fast_input={:?};alpha={};input={}x{}x{}x{};stem_stride={}\n",
        config.layout,
        config.norm,
        config.fast_input,
        config.alpha,
        s.frames,
        s.height,
        s.width,
        s.channels,
        config.stem_stride
    ));
    for p in params {
        h.update(format!("{}:{:?}\n", p.name, p.shape));
    }
    h.finalize()
        .iter()
        .take(16)
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Model {
    /// Hash of the architecture; two models with the same layout share it.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    fn unit_forward(&self, u: &ConvUnit, x: &Volume, norms: &mut NormCaches) -> Result<Volume> {
        let mut out = u
            .conv
            .forward(&self.params[u.weight].data, &self.params[u.bias].data, x)?;
        let scale = match self.config.norm {
            Norm::None => None,
            Norm::Instance => Some(nn::instance_norm(&mut out)),
            Norm::Rms => Some(nn::rms_norm(&mut out)),
            Norm::LayerRms => Some(nn::layer_rms_norm(&mut out)),
        };
        if let Some(scale) = scale {
            norms[u.weight] = Some(NormCache { y: out.clone(), scale });
        }
        Ok(out)
    }

    fn unit_backward(
        &self,
        u: &ConvUnit,
        x: &Volume,
        grad_out: &Volume,
        norms: &NormCaches,
        grads: &mut Gradients,
        input_grad: bool,
    ) -> Option<Volume> {
        let normed;
        let grad_out = match &norms[u.weight] {
            Some(cache) => {
                let mut g = grad_out.clone();
                match self.config.norm {
                    Norm::Rms => nn::rms_norm_backward(&mut g, &cache.y, &cache.scale),
                    Norm::LayerRms => nn::layer_rms_norm_backward(&mut g, &cache.y, cache.scale[0]),
                    _ => nn::instance_norm_backward(&mut g, &cache.y, &cache.scale),
                }
                normed = g;
                &normed
            }
            None => grad_out,
        };
        let (gw, gb) = pair_mut(&mut grads.0, u.weight, u.bias);
        u.conv
            .backward(&self.params[u.weight].data, x, grad_out, gw, gb, input_grad)
    }

    fn block_forward(
        &self,
        b: &Block,
        input: Volume,
        norms: &mut NormCaches,
    ) -> Result<BlockTrace> {
        let mut hidden = self.unit_forward(&b.conv_a, &input, norms)?;
        hidden.relu_in_place();
        let mut output = self.unit_forward(&b.conv_b, &hidden, norms)?;
        match &b.shortcut {
            Some(s) => output.add_assign(&self.unit_forward(s, &input, norms)?),
            None => output.add_assign(&input),
        }
        output.relu_in_place();
        Ok(BlockTrace {
            input,
            hidden,
            output,
        })
    }

    fn block_backward(
        &self,
        b: &Block,
        tr: &BlockTrace,
        mut grad: Volume,
        norms: &NormCaches,
        grads: &mut Gradients,
    ) -> Volume {
        grad.mask_by_relu(&tr.output);
        let mut grad_hidden = self
            .unit_backward(&b.conv_b, &tr.hidden, &grad, norms, grads, true)
            .expect("input gradient requested");
        grad_hidden.mask_by_relu(&tr.hidden);
        let mut grad_input = self
            .unit_backward(&b.conv_a, &tr.input, &grad_hidden, norms, grads, true)
            .expect("input gradient requested");
        match &b.shortcut {
            Some(s) => grad_input.add_assign(
                &self
                    .unit_backward(s, &tr.input, &grad, norms, grads, true)
                    .expect("input gradient requested"),
            ),
            None => grad_input.add_assign(&grad),
        }
        grad_input
    }

    fn check_input(&self, clip: &ClipTensor) -> Result<()> {
        let want = self.config.input_shape.as_array();
        if clip.shape() != want {
            return Err(Error::Shape(format!(
                "clip {} has shape {:?}, model expects {want:?}",
                clip.clip_id,
                clip.shape()
            )));
        }
        Ok(())
    }

    /// Runs the network on one clip, keeping every activation.
    pub fn forward_trace(&self, clip: &ClipTensor) -> Result<Trace> {
        self.check_input(clip)?;
        let (slow_input, fast_input) = sample_pathways(clip, self.config.alpha)?;
        let fast_input = self.arch.fast.as_ref().map(|_| {
            let mut v = fast_input;
            match self.config.fast_input {
                FastInput::Raw => {}
                FastInput::MeanRemoved => remove_temporal_baseline(&mut v, false),
                FastInput::MedianRemoved => remove_temporal_baseline(&mut v, true),
            }
            v
        });

        let mut norms: NormCaches = (0..self.params.len()).map(|_| None).collect();
        let mut slow_stem = self.unit_forward(&self.arch.slow.stem, &slow_input, &mut norms)?;
        slow_stem.relu_in_place();
        let fast_stem = match (&self.arch.fast, &fast_input) {
            (Some(f), Some(x)) => {
                let mut v = self.unit_forward(&f.stem, x, &mut norms)?;
                v.relu_in_place();
                Some(v)
            }
            _ => None,
        };

        let mut slow_cur = slow_stem.clone();
        let mut fast_cur = fast_stem.clone();
        let mut slow_blocks = Vec::new();
        let mut fast_blocks = Vec::new();
        for (j, slow_stage) in self.arch.slow.stages.iter().enumerate() {
            if let (Some(lat), Some(f)) = (self.arch.laterals.get(j), &fast_cur) {
                let fused = self.unit_forward(lat, f, &mut norms)?;
                if fused.frames != slow_cur.frames {
                    return Err(Error::Shape(format!(
                        "lateral {j} yields {} frames, slow pathway has {}",
                        fused.frames, slow_cur.frames
                    )));
                }
                slow_cur = Volume::concat_channels(&[&slow_cur, &fused]);
            }
            let mut traces = Vec::new();
            for block in slow_stage {
                let tr = self.block_forward(block, slow_cur, &mut norms)?;
                slow_cur = tr.output.clone();
                traces.push(tr);
            }
            slow_blocks.push(traces);

            if let (Some(fast), Some(f)) = (&self.arch.fast, fast_cur.take()) {
                let mut cur = f;
                let mut traces = Vec::new();
                for block in &fast.stages[j] {
                    let tr = self.block_forward(block, cur, &mut norms)?;
                    cur = tr.output.clone();
                    traces.push(tr);
                }
                fast_blocks.push(traces);
                fast_cur = Some(cur);
            }
        }

        let mut features = slow_cur.global_average();
        if let Some(f) = &fast_cur {
            features.extend(f.global_average());
        }
        let logits = self.head(&features);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "non-finite logits for clip {}",
                clip.clip_id
            )));
        }
        Ok(Trace {
            slow_input,
            fast_input,
            slow_stem,
            fast_stem,
            slow_blocks,
            fast_blocks,
            features,
            norms,
            logits,
        })
    }

    fn head(&self, features: &[f64]) -> Vec<f64> {
        let w = &self.params[self.arch.head_weight].data;
        let b = &self.params[self.arch.head_bias].data;
        let n = features.len();
        (0..self.config.num_classes)
            .map(|k| {
                b[k] + w[k * n..(k + 1) * n]
                    .iter()
                    .zip(features)
                    .map(|(a, x)| a * x)
                    .sum::<f64>()
            })
            .collect()
    }

    /// Logits computed from the final activations of each pathway (the
    /// pooling and dense head only).
    pub fn head_logits(&self, slow_final: &Volume, fast_final: Option<&Volume>) -> Vec<f64> {
        let mut features = slow_final.global_average();
        if let Some(f) = fast_final {
            features.extend(f.global_average());
        }
        self.head(&features)
    }

    /// Class logits for one clip.
    pub fn forward(&self, clip: &ClipTensor) -> Result<Vec<f64>> {
        Ok(self.forward_trace(clip)?.logits)
    }

    /// Logits for each clip of a batch; row `i` is `forward(&clips[i])`.
    pub fn forward_batch(&self, clips: &[ClipTensor]) -> Result<Vec<Vec<f64>>> {
        clips.iter().map(|c| self.forward(c)).collect()
    }

    /// Softmax class probabilities.
    pub fn predict_proba(&self, clip: &ClipTensor) -> Result<Vec<f64>> {
        Ok(nn::softmax(&self.forward(clip)?))
    }

    /// Gradient of the head input with respect to the final activations of
    /// each pathway, for upstream logit gradient `grad_logits`.
    fn head_backward(
        &self,
        trace: &Trace,
        grad_logits: &[f64],
        grads: Option<&mut Gradients>,
    ) -> (Volume, Option<Volume>) {
        let w = &self.params[self.arch.head_weight].data;
        let n = trace.features.len();
        let mut grad_features = vec![0.0; n];
        for (k, g) in grad_logits.iter().enumerate() {
            for (gf, wk) in grad_features.iter_mut().zip(&w[k * n..(k + 1) * n]) {
                *gf += g * wk;
            }
        }
        if let Some(grads) = grads {
            let gw = &mut grads.0[self.arch.head_weight];
            for (k, g) in grad_logits.iter().enumerate() {
                for (gwk, x) in gw[k * n..(k + 1) * n].iter_mut().zip(&trace.features) {
                    *gwk += g * x;
                }
            }
            for (gb, g) in grads.0[self.arch.head_bias].iter_mut().zip(grad_logits) {
                *gb += g;
            }
        }
        let slow_final = trace.final_activations(Pathway::Slow).expect("slow stages");
        let d_slow = Volume::global_average_backward(
            &grad_features[..self.arch.slow_features],
            slow_final.dims(),
        );
        let d_fast = trace.final_activations(Pathway::Fast).map(|f| {
            Volume::global_average_backward(&grad_features[self.arch.slow_features..], f.dims())
        });
        debug_assert_eq!(
            n,
            self.arch.slow_features + self.arch.fast_features
        );
        (d_slow, d_fast)
    }

    /// Gradient of `logits[class]` with respect to the final activations of
    /// each pathway.
    pub fn class_score_gradients(&self, trace: &Trace, class: usize) -> (Volume, Option<Volume>) {
        let mut onehot = vec![0.0; self.config.num_classes];
        onehot[class] = 1.0;
        self.head_backward(trace, &onehot, None)
    }

    /// Backpropagates `grad_logits` through the whole network, accumulating
    /// into `grads`.
    pub fn backward(&self, trace: &Trace, grad_logits: &[f64], grads: &mut Gradients) {
        let (mut d_slow, mut d_fast) = self.head_backward(trace, grad_logits, Some(&mut *grads));
        let stages = self.arch.slow.stages.len();
        for j in (0..stages).rev() {
            if let (Some(fast), Some(mut g)) = (&self.arch.fast, d_fast.take()) {
                for (block, tr) in fast.stages[j].iter().zip(&trace.fast_blocks[j]).rev() {
                    g = self.block_backward(block, tr, g, &trace.norms, grads);
                }
                d_fast = Some(g);
            }
            let mut g = d_slow;
            for (block, tr) in self.arch.slow.stages[j].iter().zip(&trace.slow_blocks[j]).rev() {
                g = self.block_backward(block, tr, g, &trace.norms, grads);
            }
            if let (Some(lat), Some(df)) = (self.arch.laterals.get(j), d_fast.as_mut()) {
                let own = if j == 0 {
                    trace.slow_stem.channels
                } else {
                    trace.slow_blocks[j - 1].last().expect("block").output.channels
                };
                let (g_own, g_lat) = g.split_channels(own);
                let lat_input = match j {
                    0 => trace.fast_stem.as_ref().expect("fast stem"),
                    _ => &trace.fast_blocks[j - 1].last().expect("block").output,
                };
                let back = self
                    .unit_backward(lat, lat_input, &g_lat, &trace.norms, grads, true)
                    .expect("input gradient requested");
                df.add_assign(&back);
                g = g_own;
            }
            d_slow = g;
        }
        d_slow.mask_by_relu(&trace.slow_stem);
        self.unit_backward(
            &self.arch.slow.stem,
            &trace.slow_input,
            &d_slow,
            &trace.norms,
            grads,
            false,
        );
        if let (Some(fast), Some(mut g), Some(stem_out), Some(x)) =
            (&self.arch.fast, d_fast, &trace.fast_stem, &trace.fast_input)
        {
            g.mask_by_relu(stem_out);
            self.unit_backward(&fast.stem, x, &g, &trace.norms, grads, false);
        }
    }

    /// Cross-entropy loss for one labelled clip and its parameter gradients,
    /// accumulated into `grads`. Returns `(loss, logits)`.
    pub fn accumulate_loss_gradients(
        &self,
        clip: &ClipTensor,
        label: usize,
        weight: f64,
        grads: &mut Gradients,
    ) -> Result<(f64, Vec<f64>)> {
        if label >= self.config.num_classes {
            return Err(Error::Invalid(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let trace = self.forward_trace(clip)?;
        let loss = nn::cross_entropy(&trace.logits, label);
        let mut grad_logits = nn::softmax(&trace.logits);
        grad_logits[label] -= 1.0;
        grad_logits.iter_mut().for_each(|g| *g *= weight);
        self.backward(&trace, &grad_logits, grads);
        Ok((loss, trace.logits))
    }

    /// Cross-entropy loss of one clip.
    pub fn loss(&self, clip: &ClipTensor, label: usize) -> Result<f64> {
        Ok(nn::cross_entropy(&self.forward(clip)?, label))
    }

    /// Verifies every layer fits the configured input.
    fn check_geometry(&self) -> Result<()> {
        let s = self.config.input_shape;
        let probe = ClipTensor::new(
            s.as_array(),
            vec![0.0; s.as_array().iter().product()],
            0,
            "geometry-probe",
        )?;
        self.forward_trace(&probe).map(|_| ()).map_err(|e| {
            Error::Config(format!("architecture does not fit input {s:?}: {e}"))
        })
    }

    /// Parameter shapes by layer, in declaration order.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flat_map(|p| &p.data).all(|v| v.is_finite())
    }
}

fn pair_mut<T>(items: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = items.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = items.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
