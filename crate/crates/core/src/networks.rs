//! Separator (multi-decoder convolutional auto-encoder) and per-source critics.
//!
//! Shapes follow the declarative configs exactly: every strided stage maps a
//! length `L` axis to `floor(L / stride)`, and decoder stages target the
//! mirrored encoder sizes so the final stage returns to the input shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvKind, ConvLayer, Geometry, ScalarHead};
use crate::tensor::{norm2, SpecBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvSpec {
    pub const fn k3(filters: usize, stride: usize) -> Self {
        ConvSpec {
            filters,
            kernel: (3, 3),
            stride: (stride, stride),
        }
    }
}

/// Layer plan of the separator.
///
/// `encoder` holds the shared stages; `bottleneck` is the last encoder stage
/// whose filter count is *per source* (the layer emits `filters · n_sources`
/// channels). `decoder` is the per-source stack and must have one stage per
/// encoder stage (shared + bottleneck), ending in a single filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorConfig {
    pub n_sources: usize,
    pub input_shape: (usize, usize),
    pub encoder: Vec<ConvSpec>,
    pub bottleneck: ConvSpec,
    pub decoder: Vec<ConvSpec>,
    /// Standard deviation of the injected bottleneck noise during training.
    pub noise_std: f64,
    pub use_skip_connections: bool,
    /// Number of leading decoder stages that concatenate the mirrored encoder activation.
    pub skip_stages: usize,
    /// Multiplier on the initial weights of each source's output layer.
    #[serde(default = "default_output_init_gain")]
    pub output_init_gain: f64,
}

fn default_output_init_gain() -> f64 {
    DEFAULT_OUTPUT_INIT_GAIN
}

pub const DEFAULT_OUTPUT_INIT_GAIN: f64 = 0.1;

impl SeparatorConfig {
    /// The published layer table: 32×513 input, encoder 16-32-64-128-256·n,
    /// decoder widths 128-64-32-16-1 as given by its output-shape column.
    pub fn standard(n_sources: usize) -> Self {
        SeparatorConfig {
            n_sources,
            input_shape: (32, 513),
            encoder: vec![
                ConvSpec::k3(16, 2),
                ConvSpec::k3(32, 2),
                ConvSpec::k3(64, 2),
                ConvSpec::k3(128, 2),
            ],
            bottleneck: ConvSpec::k3(256, 2),
            decoder: vec![
                ConvSpec::k3(128, 2),
                ConvSpec::k3(64, 2),
                ConvSpec::k3(32, 2),
                ConvSpec::k3(16, 2),
                ConvSpec::k3(1, 2),
            ],
            noise_std: 1.0,
            use_skip_connections: true,
            skip_stages: 3,
            output_init_gain: DEFAULT_OUTPUT_INIT_GAIN,
        }
    }

    /// Same topology with reduced widths and depth, for small inputs. The
    /// first stage keeps full resolution so the last skip reaches it.
    pub fn compact(n_sources: usize, input_shape: (usize, usize)) -> Self {
        SeparatorConfig {
            n_sources,
            input_shape,
            encoder: vec![ConvSpec::k3(8, 1), ConvSpec::k3(16, 2)],
            bottleneck: ConvSpec::k3(16, 2),
            decoder: vec![
                ConvSpec::k3(16, 2),
                ConvSpec::k3(8, 2),
                ConvSpec::k3(1, 1),
            ],
            noise_std: 1.0,
            use_skip_connections: true,
            skip_stages: 2,
            output_init_gain: DEFAULT_OUTPUT_INIT_GAIN,
        }
    }
}

/// Layer plan of one critic: conv stages with LeakyReLU, then a scalar FC head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub input_shape: (usize, usize),
    pub layers: Vec<ConvSpec>,
    pub leaky_slope: f64,
}

impl CriticConfig {
    /// The published critic: filters 64-64-128-128-256-256, strides 2-2-1-2-2-1.
    pub fn standard() -> Self {
        CriticConfig {
            input_shape: (32, 513),
            layers: vec![
                ConvSpec::k3(64, 2),
                ConvSpec::k3(64, 2),
                ConvSpec::k3(128, 1),
                ConvSpec::k3(128, 2),
                ConvSpec::k3(256, 2),
                ConvSpec::k3(256, 1),
            ],
            leaky_slope: 0.2,
        }
    }

    pub fn compact(input_shape: (usize, usize)) -> Self {
        CriticConfig {
            input_shape,
            layers: vec![
                ConvSpec::k3(8, 2),
                ConvSpec::k3(16, 2),
                ConvSpec::k3(16, 1),
            ],
            leaky_slope: 0.2,
        }
    }
}

/// One row of a shape report: `(time, freq, channels)` after the named stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageShape {
    pub stage: String,
    pub shape: (usize, usize, usize),
}

fn strided(len: usize, stride: usize) -> usize {
    len / stride
}

fn init_params(len: usize, layers: &[(&std::ops::Range<usize>, usize)], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; len];
    for (range, fan_in) in layers {
        let bound = (6.0 / (*fan_in).max(1) as f64).sqrt();
        for p in &mut params[(*range).clone()] {
            *p = rng.random_range(-bound..bound);
        }
    }
    params
}

fn check_finite(params: &[f64], what: &str) -> Result<()> {
    if let Some(i) = params.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "{what} parameter {i} is {}",
            params[i]
        )));
    }
    Ok(())
}

/// How bottleneck noise is produced on a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    /// Inference default: no noise.
    Zero,
    /// I.i.d. standard normal (times `noise_std`) drawn from this seed.
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Separator {
    config: SeparatorConfig,
    encoder: Vec<ConvLayer>,
    bottleneck: ConvLayer,
    decoders: Vec<Vec<ConvLayer>>,
    params: Vec<f64>,
}

struct SeparatorCache {
    enc_pre: Vec<Vec<f64>>,
    enc_act: Vec<Vec<f64>>,
    /// bottleneck conv output plus noise, before ReLU
    bott_sum: Vec<f64>,
    bott_act: Vec<f64>,
    /// per source: (stage inputs, stage pre-activations)
    dec: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

/// Forward-pass record needed to backpropagate through a separator call.
pub struct SeparatorTrace {
    caches: Vec<SeparatorCache>,
    inputs: SpecBatch,
}

impl Separator {
    pub fn build(config: SeparatorConfig, init_seed: u64) -> Result<Self> {
        let n = config.n_sources;
        if n < 2 {
            return Err(Error::Config(format!("n_sources must be >= 2, got {n}")));
        }
        let stages = config.encoder.len() + 1;
        if config.decoder.len() != stages {
            return Err(Error::shape(
                "decoder",
                format!(
                    "{} decoder stages cannot mirror {} encoder stages",
                    config.decoder.len(),
                    stages
                ),
            ));
        }
        if !(config.output_init_gain.is_finite() && config.output_init_gain > 0.0) {
            return Err(Error::Config(format!(
                "output_init_gain must be positive, got {}",
                config.output_init_gain
            )));
        }
        if config.decoder.last().map(|s| s.filters) != Some(1) {
            return Err(Error::shape("decoder", "last decoder stage must have 1 filter"));
        }
        // planes[t] = spatial size entering encoder stage t; planes[stages] = bottleneck
        let mut planes = vec![config.input_shape];
        let all_enc: Vec<ConvSpec> = config
            .encoder
            .iter()
            .copied()
            .chain(std::iter::once(config.bottleneck))
            .collect();
        for (t, spec) in all_enc.iter().enumerate() {
            let (h, w) = planes[t];
            let next = (strided(h, spec.stride.0), strided(w, spec.stride.1));
            if next.0 == 0 || next.1 == 0 {
                return Err(Error::shape(
                    format!("encoder{}", t + 1),
                    format!("input {h}x{w} collapses to zero with stride {:?}", spec.stride),
                ));
            }
            planes.push(next);
        }

        let mut offset = 0;
        let mut encoder = Vec::new();
        let mut in_ch = 1;
        for (t, spec) in config.encoder.iter().enumerate() {
            let name = format!("encoder{}", t + 1);
            let geo = Geometry::new(&name, planes[t], planes[t + 1], spec.kernel, spec.stride)?;
            encoder.push(ConvLayer::new(name, ConvKind::Forward, in_ch, spec.filters, geo, &mut offset));
            in_ch = spec.filters;
        }
        let name = format!("encoder{}", stages);
        let geo = Geometry::new(
            &name,
            planes[stages - 1],
            planes[stages],
            config.bottleneck.kernel,
            config.bottleneck.stride,
        )?;
        let bottleneck = ConvLayer::new(
            name,
            ConvKind::Forward,
            in_ch,
            config.bottleneck.filters * n,
            geo,
            &mut offset,
        );

        let mut decoders = Vec::with_capacity(n);
        for i in 0..n {
            let mut stack = Vec::new();
            let mut ch = config.bottleneck.filters;
            for (j0, spec) in config.decoder.iter().enumerate() {
                let j = j0 + 1;
                let name = format!("decoder{}.stage{}", i + 1, j);
                let small = planes[stages - j + 1];
                let big = planes[stages - j];
                let geo = Geometry::new(&name, big, small, spec.kernel, spec.stride)?;
                stack.push(ConvLayer::new(name, ConvKind::Transposed, ch, spec.filters, geo, &mut offset));
                ch = spec.filters;
                if let Some(k) = skip_source(&config, j) {
                    ch += config.encoder[k].filters;
                }
            }
            decoders.push(stack);
        }

        let mut ranges: Vec<(&std::ops::Range<usize>, usize)> = Vec::new();
        for l in encoder.iter().chain(std::iter::once(&bottleneck)).chain(decoders.iter().flatten()) {
            ranges.push((&l.weight, l.fan_in()));
        }
        let mut params = init_params(offset, &ranges, init_seed);
        for stack in &decoders {
            let out = stack.last().expect("decoder has stages");
            params[out.weight.clone()].iter_mut().for_each(|p| *p *= config.output_init_gain);
        }
        Ok(Separator {
            config,
            encoder,
            bottleneck,
            decoders,
            params,
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_sources(&self) -> usize {
        self.config.n_sources
    }

    /// Spatial size of the injected noise (one channel, broadcast over the bottleneck filters).
    pub fn noise_shape(&self) -> (usize, usize) {
        self.bottleneck.geo.small
    }

    /// Output shape of every stage for a single example, in table order.
    pub fn shape_report(&self) -> Vec<StageShape> {
        let mut rows = Vec::new();
        for l in &self.encoder {
            let (h, w) = l.out_plane();
            rows.push(StageShape {
                stage: l.name.clone(),
                shape: (h, w, l.out_ch),
            });
        }
        let (h, w) = self.bottleneck.out_plane();
        let per = self.config.bottleneck.filters;
        rows.push(StageShape {
            stage: self.bottleneck.name.clone(),
            shape: (h, w, per),
        });
        rows.push(StageShape {
            stage: "noise".into(),
            shape: (h, w, per),
        });
        for l in &self.decoders[0] {
            let (h, w) = l.out_plane();
            rows.push(StageShape {
                stage: l.name.trim_start_matches("decoder1.").to_string(),
                shape: (h, w, l.out_ch),
            });
        }
        rows
    }

    /// Encoder activation shape concatenated after decoder stage `j` (1-based), if any.
    pub fn skip_shape(&self, j: usize) -> Option<(usize, usize, usize)> {
        skip_source(&self.config, j).map(|k| {
            let l = &self.encoder[k];
            let (h, w) = l.out_plane();
            (h, w, l.out_ch)
        })
    }

    fn draw_noise(&self, batch: usize, noise: Noise) -> Vec<f64> {
        let (h, w) = self.noise_shape();
        let len = batch * self.config.n_sources * h * w;
        match noise {
            Noise::Zero => vec![0.0; len],
            Noise::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len)
                    .map(|_| self.config.noise_std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        }
    }

    fn forward_example(&self, x: &[f64], noise: &[f64]) -> (Vec<Vec<f64>>, SeparatorCache) {
        let p = &self.params;
        let mut enc_pre = Vec::with_capacity(self.encoder.len());
        let mut enc_act: Vec<Vec<f64>> = Vec::with_capacity(self.encoder.len());
        for l in &self.encoder {
            let input = enc_act.last().map(|v| v.as_slice()).unwrap_or(x);
            let mut pre = vec![0.0; l.out_len()];
            l.forward(p, input, &mut pre, true);
            let act = pre.iter().map(|&v| Activation::Relu.apply(v)).collect();
            enc_pre.push(pre);
            enc_act.push(act);
        }
        let input = enc_act.last().map(|v| v.as_slice()).unwrap_or(x);
        let mut bott_sum = vec![0.0; self.bottleneck.out_len()];
        self.bottleneck.forward(p, input, &mut bott_sum, true);
        let plane = self.noise_shape().0 * self.noise_shape().1;
        // noise[source][plane] is broadcast over that source's channels
        for (c, chunk) in bott_sum.chunks_mut(plane).enumerate() {
            let src = c / self.config.bottleneck.filters;
            for (v, z) in chunk.iter_mut().zip(&noise[src * plane..(src + 1) * plane]) {
                *v += z;
            }
        }
        let bott_act: Vec<f64> = bott_sum.iter().map(|&v| Activation::Relu.apply(v)).collect();
        let per = self.config.bottleneck.filters * plane;

        let mut outputs = Vec::with_capacity(self.config.n_sources);
        let mut dec = Vec::with_capacity(self.config.n_sources);
        for (i, stack) in self.decoders.iter().enumerate() {
            let mut h = bott_act[i * per..(i + 1) * per].to_vec();
            let mut inputs = Vec::with_capacity(stack.len());
            let mut pres = Vec::with_capacity(stack.len());
            for (j0, l) in stack.iter().enumerate() {
                let mut pre = vec![0.0; l.out_len()];
                l.forward(p, &h, &mut pre, true);
                let mut next: Vec<f64> = pre.iter().map(|&v| Activation::Relu.apply(v)).collect();
                if let Some(k) = skip_source(&self.config, j0 + 1) {
                    next.extend_from_slice(&enc_act[k]);
                }
                inputs.push(std::mem::replace(&mut h, next));
                pres.push(pre);
            }
            outputs.push(h);
            dec.push((inputs, pres));
        }
        (
            outputs,
            SeparatorCache {
                enc_pre,
                enc_act,
                bott_sum,
                bott_act,
                dec,
            },
        )
    }

    fn check_input(&self, mixtures: &SpecBatch) -> Result<()> {
        let (c, f) = self.config.input_shape;
        if (mixtures.rows, mixtures.cols) != (c, f) {
            return Err(Error::Structure(format!(
                "separator expects {c}x{f} inputs, got {}x{}",
                mixtures.rows, mixtures.cols
            )));
        }
        Ok(())
    }

    /// Runs the separator; returns one `(m, C, F)` batch per source plus the trace for backprop.
    pub fn forward(&self, mixtures: &SpecBatch, noise: Noise) -> Result<(Vec<SpecBatch>, SeparatorTrace)> {
        self.check_input(mixtures)?;
        check_finite(&self.params, "separator")?;
        let (c, f) = self.config.input_shape;
        let n = self.config.n_sources;
        let noise = self.draw_noise(mixtures.len, noise);
        let per_ex = noise.len() / mixtures.len.max(1);
        let mut outs: Vec<SpecBatch> = (0..n).map(|_| SpecBatch::zeros(mixtures.len, c, f)).collect();
        let mut caches = Vec::with_capacity(mixtures.len);
        for b in 0..mixtures.len {
            let (o, cache) = self.forward_example(mixtures.example(b), &noise[b * per_ex..(b + 1) * per_ex]);
            for (dst, src) in outs.iter_mut().zip(o) {
                dst.example_mut(b).copy_from_slice(&src);
            }
            caches.push(cache);
        }
        Ok((
            outs,
            SeparatorTrace {
                caches,
                inputs: mixtures.clone(),
            },
        ))
    }

    /// Forward pass without keeping the trace.
    pub fn separate(&self, mixtures: &SpecBatch, noise: Noise) -> Result<Vec<SpecBatch>> {
        self.forward(mixtures, noise).map(|(o, _)| o)
    }

    /// Accumulates parameter gradients of `Σ ⟨grad_outputs[i], output_i⟩` into `grads`.
    pub fn backward(&self, trace: &SeparatorTrace, grad_outputs: &[SpecBatch], grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        assert_eq!(grad_outputs.len(), self.config.n_sources);
        let p = &self.params;
        let plane = self.noise_shape().0 * self.noise_shape().1;
        let per = self.config.bottleneck.filters * plane;
        for (b, cache) in trace.caches.iter().enumerate() {
            let mut g_enc: Vec<Vec<f64>> = cache.enc_act.iter().map(|a| vec![0.0; a.len()]).collect();
            let mut g_bott = vec![0.0; cache.bott_act.len()];
            for (i, stack) in self.decoders.iter().enumerate() {
                let (inputs, pres) = &cache.dec[i];
                let mut g = grad_outputs[i].example(b).to_vec();
                for j0 in (0..stack.len()).rev() {
                    let l = &stack[j0];
                    // g is the gradient w.r.t. this stage's (post-concat) output
                    if let Some(k) = skip_source(&self.config, j0 + 1) {
                        let own = l.out_len();
                        for (acc, v) in g_enc[k].iter_mut().zip(&g[own..]) {
                            *acc += v;
                        }
                        g.truncate(own);
                    }
                    for (gv, &pre) in g.iter_mut().zip(&pres[j0]) {
                        *gv *= Activation::Relu.slope(pre);
                    }
                    l.accumulate_grads(&inputs[j0], &g, grads, true);
                    let mut gin = vec![0.0; l.in_len()];
                    l.backward_input(p, &g, &mut gin);
                    g = gin;
                }
                for (acc, v) in g_bott[i * per..(i + 1) * per].iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            for (gv, &s) in g_bott.iter_mut().zip(&cache.bott_sum) {
                *gv *= Activation::Relu.slope(s);
            }
            let x = trace.inputs.example(b);
            let bott_in = cache.enc_act.last().map(|v| v.as_slice()).unwrap_or(x);
            self.bottleneck.accumulate_grads(bott_in, &g_bott, grads, true);
            if let Some(last) = g_enc.last_mut() {
                let mut gin = vec![0.0; self.bottleneck.in_len()];
                self.bottleneck.backward_input(p, &g_bott, &mut gin);
                for (acc, v) in last.iter_mut().zip(&gin) {
                    *acc += v;
                }
            }
            for k in (0..self.encoder.len()).rev() {
                let l = &self.encoder[k];
                let mut g = std::mem::take(&mut g_enc[k]);
                for (gv, &pre) in g.iter_mut().zip(&cache.enc_pre[k]) {
                    *gv *= Activation::Relu.slope(pre);
                }
                let input = if k == 0 { x } else { cache.enc_act[k - 1].as_slice() };
                l.accumulate_grads(input, &g, grads, true);
                if k > 0 {
                    let mut gin = vec![0.0; l.in_len()];
                    l.backward_input(p, &g, &mut gin);
                    for (acc, v) in g_enc[k - 1].iter_mut().zip(&gin) {
                        *acc += v;
                    }
                }
            }
        }
    }
}

/// Encoder stage concatenated after decoder stage `j` (1-based), if any.
fn skip_source(config: &SeparatorConfig, j: usize) -> Option<usize> {
    let shared = config.encoder.len();
    if config.use_skip_connections && j <= config.skip_stages && j <= shared && j < config.decoder.len() {
        Some(shared - j)
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    config: CriticConfig,
    convs: Vec<ConvLayer>,
    head: ScalarHead,
    params: Vec<f64>,
}

struct CriticCache {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    head_pre: f64,
}

/// Forward-pass record needed to backpropagate through a critic call.
pub struct CriticTrace {
    caches: Vec<CriticCache>,
    inputs: SpecBatch,
}

/// Result of a gradient-penalty evaluation on one batch of interpolates.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyEval {
    /// `λ · mean (‖∇ₓ d‖ − 1)²`
    pub value: f64,
    /// Per-example input-gradient norms.
    pub grad_norms: Vec<f64>,
}

impl Critic {
    pub fn build(config: CriticConfig, init_seed: u64) -> Result<Self> {
        if config.layers.is_empty() {
            return Err(Error::shape("critic", "at least one conv stage is required"));
        }
        let mut offset = 0;
        let mut convs = Vec::new();
        let mut plane = config.input_shape;
        let mut ch = 1;
        for (t, spec) in config.layers.iter().enumerate() {
            let name = format!("critic.conv{}", t + 1);
            let next = (strided(plane.0, spec.stride.0), strided(plane.1, spec.stride.1));
            let geo = Geometry::new(&name, plane, next, spec.kernel, spec.stride)?;
            convs.push(ConvLayer::new(name, ConvKind::Forward, ch, spec.filters, geo, &mut offset));
            plane = next;
            ch = spec.filters;
        }
        let head = ScalarHead::new(ch * plane.0 * plane.1, &mut offset);
        let mut ranges: Vec<(&std::ops::Range<usize>, usize)> =
            convs.iter().map(|l| (&l.weight, l.fan_in())).collect();
        ranges.push((&head.weight, head.in_len));
        let params = init_params(offset, &ranges, init_seed);
        Ok(Critic {
            config,
            convs,
            head,
            params,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn shape_report(&self) -> Vec<StageShape> {
        let mut rows: Vec<StageShape> = self
            .convs
            .iter()
            .map(|l| {
                let (h, w) = l.out_plane();
                StageShape {
                    stage: l.name.clone(),
                    shape: (h, w, l.out_ch),
                }
            })
            .collect();
        rows.push(StageShape {
            stage: "critic.head".into(),
            shape: (1, 1, 1),
        });
        rows
    }

    fn act(&self) -> Activation {
        Activation::LeakyRelu(self.config.leaky_slope)
    }

    fn forward_example(&self, x: &[f64]) -> (f64, CriticCache) {
        let p = &self.params;
        let act = self.act();
        let mut pres = Vec::with_capacity(self.convs.len());
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.convs.len());
        for l in &self.convs {
            let input = acts.last().map(|v| v.as_slice()).unwrap_or(x);
            let mut pre = vec![0.0; l.out_len()];
            l.forward(p, input, &mut pre, true);
            acts.push(pre.iter().map(|&v| act.apply(v)).collect());
            pres.push(pre);
        }
        let head_pre = self.head.forward(p, acts.last().unwrap(), true);
        (
            act.apply(head_pre),
            CriticCache {
                pre: pres,
                act: acts,
                head_pre,
            },
        )
    }

    fn check_input(&self, x: &SpecBatch) -> Result<()> {
        let (c, f) = self.config.input_shape;
        if (x.rows, x.cols) != (c, f) {
            return Err(Error::Structure(format!(
                "critic expects {c}x{f} inputs, got {}x{}",
                x.rows, x.cols
            )));
        }
        Ok(())
    }

    /// Scores every example; returns `(m,)` scores and the trace.
    pub fn forward(&self, x: &SpecBatch) -> Result<(Vec<f64>, CriticTrace)> {
        self.check_input(x)?;
        check_finite(&self.params, "critic")?;
        let mut scores = Vec::with_capacity(x.len);
        let mut caches = Vec::with_capacity(x.len);
        for b in 0..x.len {
            let (s, c) = self.forward_example(x.example(b));
            scores.push(s);
            caches.push(c);
        }
        Ok((
            scores,
            CriticTrace {
                caches,
                inputs: x.clone(),
            },
        ))
    }

    pub fn score(&self, x: &SpecBatch) -> Result<Vec<f64>> {
        self.forward(x).map(|(s, _)| s)
    }

    /// Backpropagates per-example score gradients `gscore`.
    ///
    /// Accumulates parameter gradients into `grads` when given, and returns the
    /// input gradient `∂(Σ gscore·d)/∂x` when `want_input` is set.
    pub fn backward(
        &self,
        trace: &CriticTrace,
        gscore: &[f64],
        mut grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<SpecBatch> {
        let mut gin_batch = want_input.then(|| SpecBatch::zeros(trace.inputs.len, trace.inputs.rows, trace.inputs.cols));
        for (b, cache) in trace.caches.iter().enumerate() {
            let (gin, _) = self.backward_example(
                cache,
                trace.inputs.example(b),
                gscore[b],
                grads.as_deref_mut(),
                want_input,
                false,
            );
            if let (Some(batch), Some(g)) = (gin_batch.as_mut(), gin) {
                batch.example_mut(b).copy_from_slice(&g);
            }
        }
        gin_batch
    }

    /// Returns the input gradient (if requested) and, when `keep_deltas`, the
    /// gradient w.r.t. each conv pre-activation plus the head pre-activation.
    fn backward_example(
        &self,
        cache: &CriticCache,
        x: &[f64],
        gscore: f64,
        mut grads: Option<&mut [f64]>,
        want_input: bool,
        keep_deltas: bool,
    ) -> (Option<Vec<f64>>, Option<(Vec<Vec<f64>>, f64)>) {
        let p = &self.params;
        let act = self.act();
        let head_delta = gscore * act.slope(cache.head_pre);
        if let Some(g) = grads.as_deref_mut() {
            self.head.accumulate_grads(cache.act.last().unwrap(), head_delta, g, true);
        }
        let mut g = vec![0.0; self.head.in_len];
        self.head.backward_input(p, head_delta, &mut g);
        let mut deltas = vec![Vec::new(); self.convs.len()];
        let mut input_grad = None;
        for k in (0..self.convs.len()).rev() {
            let l = &self.convs[k];
            for (gv, &pre) in g.iter_mut().zip(&cache.pre[k]) {
                *gv *= act.slope(pre);
            }
            let input = if k == 0 { x } else { cache.act[k - 1].as_slice() };
            if let Some(gr) = grads.as_deref_mut() {
                l.accumulate_grads(input, &g, gr, true);
            }
            if keep_deltas {
                deltas[k] = g.clone();
            }
            if k > 0 || want_input {
                let mut gin = vec![0.0; l.in_len()];
                l.backward_input(p, &g, &mut gin);
                if k == 0 {
                    input_grad = Some(gin);
                } else {
                    g = gin;
                }
            }
        }
        (input_grad, keep_deltas.then_some((deltas, head_delta)))
    }

    /// Gradient penalty `λ · mean_b (‖∇ₓ d(x_b)‖₂ − 1)²` on a batch of interpolates.
    ///
    /// When `grads` is given, adds `weight · ∂penalty/∂params` into it. The
    /// network is piecewise linear, so the mixed second derivative reduces to
    /// a tangent pass along the input gradient with the activation pattern of
    /// the interpolate held fixed; no finite differencing is involved.
    pub fn gradient_penalty(
        &self,
        interpolates: &SpecBatch,
        lambda: f64,
        weight: f64,
        mut grads: Option<&mut [f64]>,
    ) -> Result<PenaltyEval> {
        self.check_input(interpolates)?;
        check_finite(&self.params, "critic")?;
        let m = interpolates.len.max(1) as f64;
        let mut value = 0.0;
        let mut grad_norms = Vec::with_capacity(interpolates.len);
        for b in 0..interpolates.len {
            let x = interpolates.example(b);
            let (_, cache) = self.forward_example(x);
            let need_deltas = grads.is_some();
            let (gin, deltas) = self.backward_example(&cache, x, 1.0, None, true, need_deltas);
            let gin = gin.expect("input gradient requested");
            let norm = norm2(&gin);
            if !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "critic input-gradient norm is {norm} on interpolate {b}"
                )));
            }
            value += lambda * (norm - 1.0).powi(2) / m;
            grad_norms.push(norm);
            if let (Some(g), Some((deltas, head_delta))) = (grads.as_deref_mut(), deltas) {
                if norm == 0.0 {
                    continue;
                }
                let coef = weight * lambda * 2.0 * (norm - 1.0) / norm / m;
                self.accumulate_tangent_grads(&cache, &gin, &deltas, head_delta, coef, g);
            }
        }
        Ok(PenaltyEval { value, grad_norms })
    }

    /// Adds `coef · ∂⟨∇ₓd, v⟩/∂params` for a fixed direction `v`.
    fn accumulate_tangent_grads(
        &self,
        cache: &CriticCache,
        v: &[f64],
        deltas: &[Vec<f64>],
        head_delta: f64,
        coef: f64,
        grads: &mut [f64],
    ) {
        let p = &self.params;
        let act = self.act();
        let mut tangent = v.to_vec();
        for (k, l) in self.convs.iter().enumerate() {
            // bias terms of ⟨∇ₓd, v⟩ vanish: it is linear in v with no offset
            let scaled: Vec<f64> = deltas[k].iter().map(|d| coef * d).collect();
            l.accumulate_grads(&tangent, &scaled, grads, false);
            let mut next = vec![0.0; l.out_len()];
            l.forward(p, &tangent, &mut next, false);
            for (t, &pre) in next.iter_mut().zip(&cache.pre[k]) {
                *t *= act.slope(pre);
            }
            tangent = next;
        }
        self.head.accumulate_grads(&tangent, coef * head_delta, grads, false);
    }
}

/// Separator weights plus one critic per source.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub separator: Separator,
    pub critics: Vec<Critic>,
}

impl Model {
    pub fn build(sep: SeparatorConfig, critic: CriticConfig, init_seed: u64) -> Result<Self> {
        if sep.input_shape != critic.input_shape {
            return Err(Error::Config(format!(
                "separator input {:?} differs from critic input {:?}",
                sep.input_shape, critic.input_shape
            )));
        }
        let n = sep.n_sources;
        let separator = Separator::build(sep, init_seed)?;
        let critics = (0..n)
            .map(|i| Critic::build(critic.clone(), init_seed.wrapping_add(1 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { separator, critics })
    }
}

/// Weighted critic score `Σ αᵢ·dᵢ(sᵢ)` per example.
pub fn combined_critic_score(critics: &[Critic], sources: &[SpecBatch], alpha: &[f64]) -> Result<Vec<f64>> {
    if critics.len() != sources.len() || critics.len() != alpha.len() {
        return Err(Error::Structure(format!(
            "{} critics, {} sources and {} weights",
            critics.len(),
            sources.len(),
            alpha.len()
        )));
    }
    let m = sources.first().map(|s| s.len).unwrap_or(0);
    let mut total = vec![0.0; m];
    for ((c, s), a) in critics.iter().zip(sources).zip(alpha) {
        if s.len != m {
            return Err(Error::Structure("source batches differ in size".into()));
        }
        for (t, v) in total.iter_mut().zip(c.score(s)?) {
            *t += a * v;
        }
    }
    Ok(total)
}
