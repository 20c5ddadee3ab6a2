//! Hierarchical feature transform.
//!
//! The analysis transform maps an image to a latent through `stages`
//! strided stages. Stage `i` (1-based) of a non-final stage produces
//! `N * 2^(i-1)` channels at half the previous resolution, so the
//! channel count doubles exactly when the spatial extent halves:
//!
//! ```text
//! out_{i+1} = (2 * C_i, H_i / 2, W_i / 2)
//! ```
//!
//! The final stage projects `4N -> M` (or whatever the last doubled
//! width is) instead of doubling again. High-resolution feature maps
//! therefore carry few channels and the wide maps live at low
//! resolution, which is where the MAC savings come from.
//!
//! The synthesis transform is the exact shape reversal of the analysis
//! transform. A hyper-encoder/decoder pair with two stride-2 layers each
//! produces the side information the entropy model conditions on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_len, Shape, Tensor};

/// Slope of the leaky rectifier used after every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Kernel of the two convolutions inside a residual block.
pub const RES_KERNEL: usize = 3;

/// Architecture hyper-parameters of a hierarchical transform codec.
///
/// This is also the on-disk JSON schema for architecture config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HftConfig {
    /// Channels of the first (highest resolution) stage, `N`.
    pub base_channels: usize,
    pub stages: usize,
    /// Channels of the latent `y`, `M`.
    pub latent_channels: usize,
    /// Kernel size of the strided stage layers; odd.
    pub kernel: usize,
    pub res_blocks_per_stage: usize,
    /// Channels of the hyper-latent `z`.
    pub hyper_channels: usize,
    /// Sizes of the channel groups used by the context model. Derived from
    /// `latent_channels` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_groups: Option<Vec<usize>>,
}

impl HftConfig {
    /// The reference configuration: N=64, four stages, M=320, 5x5 stage
    /// kernels, two residual blocks per stage and a 192-channel hyper-latent.
    pub fn reference() -> Self {
        Self {
            base_channels: 64,
            stages: 4,
            latent_channels: 320,
            kernel: 5,
            res_blocks_per_stage: 2,
            hyper_channels: 192,
            channel_groups: None,
        }
    }

    /// Desk-scale configuration used for training experiments.
    pub fn toy() -> Self {
        Self {
            base_channels: 8,
            stages: 3,
            latent_channels: 16,
            kernel: 5,
            res_blocks_per_stage: 1,
            hyper_channels: 8,
            channel_groups: None,
        }
    }

    /// Smallest configuration that still exercises every component.
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            stages: 3,
            latent_channels: 8,
            kernel: 5,
            res_blocks_per_stage: 1,
            hyper_channels: 4,
            channel_groups: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("architecture config: {m}")));
        if self.base_channels == 0 || self.latent_channels == 0 || self.hyper_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.stages == 0 || self.stages > 16 {
            return bad("stages must be in 1..=16");
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad("kernel must be odd and positive");
        }
        let groups = self.groups();
        if groups.iter().any(|&g| g == 0) || groups.iter().sum::<usize>() != self.latent_channels {
            return bad("channel groups must be positive and sum to latent_channels");
        }
        Ok(())
    }

    /// Output channels of every analysis stage; the last entry is `M`.
    pub fn stage_channels(&self) -> Vec<usize> {
        (1..=self.stages)
            .map(|i| {
                if i == self.stages {
                    self.latent_channels
                } else {
                    self.base_channels << (i - 1)
                }
            })
            .collect()
    }

    /// Channel-group sizes for the context model.
    ///
    /// The default split is uneven: two small leading groups of `M/20`
    /// channels, one of `M/10`, and the remainder last. For `M = 320` this
    /// gives `16, 16, 32, 256`.
    pub fn groups(&self) -> Vec<usize> {
        if let Some(g) = &self.channel_groups {
            return g.clone();
        }
        let m = self.latent_channels;
        if m < 4 {
            return vec![1; m];
        }
        let small = ((m as f64 / 20.0).round() as usize).max(1);
        let mid = ((m as f64 / 10.0).round() as usize).max(1);
        let rest = m.saturating_sub(2 * small + mid);
        if rest == 0 {
            return vec![1; m];
        }
        vec![small, small, mid, rest]
    }

    /// Spatial multiple that codec inputs are padded to, `2^(stages + 2)`.
    pub fn pad_multiple(&self) -> usize {
        1 << (self.stages + 2)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// 16-bit architecture identifier, a folded FNV-1a hash of the canonical
    /// JSON form. Two checkpoints share an id exactly when their layer
    /// shapes agree.
    pub fn model_id(&self) -> u16 {
        let mut h: u32 = 0x811c_9dc5;
        for b in self.to_json().bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
        ((h >> 16) ^ (h & 0xffff)) as u16
    }
}

/// Shape produced by one strided layer of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Per-layer shape schedule of every sub-network for one input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    /// `(c, h, w)` of the (padded) input image.
    pub input: (usize, usize, usize),
    pub analysis: Vec<LayerShape>,
    pub synthesis: Vec<LayerShape>,
    pub hyper_analysis: Vec<LayerShape>,
    pub hyper_synthesis: Vec<LayerShape>,
}

impl StagePlan {
    pub fn latent(&self) -> (usize, usize, usize) {
        let l = self.analysis.last().expect("plans have at least one stage");
        (l.c_out, l.h_out, l.w_out)
    }

    pub fn hyper_latent(&self) -> (usize, usize, usize) {
        let l = self.hyper_analysis.last().expect("hyper plan has two layers");
        (l.c_out, l.h_out, l.w_out)
    }

    /// Channels of the hyper-synthesis output: `2 * M`.
    pub fn hyper_features(&self) -> usize {
        self.hyper_synthesis.last().expect("hyper plan has two layers").c_out
    }

    /// Output padding that makes a stride-2 transposed layer land on
    /// exactly `target` from `from`.
    fn out_pad(from: usize, target: usize) -> usize {
        debug_assert!(target == 2 * from || target + 1 == 2 * from);
        target + 1 - 2 * from
    }

    pub(crate) fn synthesis_out_pad(&self, layer: usize) -> usize {
        let from = if layer == 0 { self.latent().1 } else { self.synthesis[layer - 1].h_out };
        Self::out_pad(from, self.synthesis[layer].h_out)
    }

    pub(crate) fn synthesis_out_pad_w(&self, layer: usize) -> usize {
        let from = if layer == 0 { self.latent().2 } else { self.synthesis[layer - 1].w_out };
        Self::out_pad(from, self.synthesis[layer].w_out)
    }

    pub(crate) fn hyper_out_pads(&self, layer: usize) -> (usize, usize) {
        let (fh, fw) = if layer == 0 {
            let z = self.hyper_latent();
            (z.1, z.2)
        } else {
            let p = self.hyper_synthesis[layer - 1];
            (p.h_out, p.w_out)
        };
        let t = self.hyper_synthesis[layer];
        (Self::out_pad(fh, t.h_out), Self::out_pad(fw, t.w_out))
    }
}

/// Builds the stage schedule for an input of shape `(c, h, w)`.
///
/// `h` and `w` must be divisible by `2^stages`; callers pad first.
pub fn plan_stages(config: &HftConfig, input: (usize, usize, usize)) -> Result<StagePlan> {
    config.validate()?;
    let (c, h, w) = input;
    let factor = 1usize << config.stages;
    if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::NotDivisible { h, w, factor });
    }
    let widths = config.stage_channels();
    let mut analysis = Vec::with_capacity(config.stages);
    let (mut ch, mut hh, mut ww) = (c, h, w);
    for &co in &widths {
        hh /= 2;
        ww /= 2;
        analysis.push(LayerShape { c_in: ch, c_out: co, h_out: hh, w_out: ww });
        ch = co;
    }
    // exact reversal of the analysis schedule
    let mut synthesis = Vec::with_capacity(config.stages);
    for i in (0..config.stages).rev() {
        let a = analysis[i];
        let (c_out, h_out, w_out) = if i == 0 { (c, h, w) } else {
            let p = analysis[i - 1];
            (p.c_out, p.h_out, p.w_out)
        };
        synthesis.push(LayerShape { c_in: a.c_out, c_out, h_out, w_out });
    }
    let (m, yh, yw) = (ch, hh, ww);
    let k = config.kernel;
    let pad = k / 2;
    let mz = config.hyper_channels;
    let down = |v: usize| conv_out_len(v, k, 2, pad).expect("same-padded conv fits");
    let (h1, w1) = (down(yh), down(yw));
    let (h2, w2) = (down(h1), down(w1));
    let hyper_analysis = vec![
        LayerShape { c_in: m, c_out: mz, h_out: h1, w_out: w1 },
        LayerShape { c_in: mz, c_out: mz, h_out: h2, w_out: w2 },
    ];
    let hyper_synthesis = vec![
        LayerShape { c_in: mz, c_out: mz, h_out: h1, w_out: w1 },
        LayerShape { c_in: mz, c_out: 2 * m, h_out: yh, w_out: yw },
    ];
    Ok(StagePlan { input, analysis, synthesis, hyper_analysis, hyper_synthesis })
}

/// Named parameter tensors of a codec: analysis (`ga.*`), synthesis
/// (`gs.*`), hyper networks (`ha.*`, `hs.*`), context model (`ctx.*`) and
/// factorized prior (`prior.*`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that exactly the entries of `layout` are present with the
    /// listed shapes.
    pub fn validate(&self, layout: &[(String, Shape)]) -> Result<()> {
        for (name, shape) in layout {
            match self.tensors.get(name) {
                None => return Err(Error::MissingParam { layer: name.clone() }),
                Some(t) if t.shape() != *shape => {
                    return Err(Error::ParamShape { layer: name.clone(), expected: *shape, found: t.shape() })
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != layout.len() {
            let known: std::collections::BTreeSet<_> = layout.iter().map(|(n, _)| n.as_str()).collect();
            if let Some(extra) = self.tensors.keys().find(|k| !known.contains(k.as_str())) {
                return Err(Error::ArchMismatch(format!("unexpected parameter `{extra}`")));
            }
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, the precision of checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Parameters registered on a tape, looked up by layer name.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Self { vars }
    }

    /// The variable for `name`, checked against the shape the caller needs.
    pub fn get(&self, tape: &Tape, name: &str, expected: Shape) -> Result<Var> {
        let v = *self.vars.get(name).ok_or_else(|| Error::MissingParam { layer: name.to_string() })?;
        let found = tape.shape(v);
        if found != expected {
            return Err(Error::ParamShape { layer: name.to_string(), expected, found });
        }
        Ok(v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Parameter names and shapes of the analysis, synthesis and hyper
/// networks.
pub fn transform_layout(config: &HftConfig) -> Vec<(String, Shape)> {
    let k = config.kernel;
    let widths = config.stage_channels();
    let mut out = Vec::new();
    let mut conv = |name: String, co: usize, ci: usize, k: usize, out: &mut Vec<(String, Shape)>| {
        out.push((format!("{name}.w"), Shape::new(co, ci, k, k)));
        out.push((format!("{name}.b"), Shape::vector(co)));
    };
    let res = |prefix: &str, c: usize, out: &mut Vec<(String, Shape)>, conv: &mut dyn FnMut(String, usize, usize, usize, &mut Vec<(String, Shape)>)| {
        for r in 0..config.res_blocks_per_stage {
            conv(format!("{prefix}.r{r}.c1"), c, c, RES_KERNEL, out);
            conv(format!("{prefix}.r{r}.c2"), c, c, RES_KERNEL, out);
        }
    };
    let mut c_prev = 3;
    for (i, &c) in widths.iter().enumerate() {
        let s = i + 1;
        conv(format!("ga.s{s}"), c, c_prev, k, &mut out);
        if s < config.stages {
            res(&format!("ga.s{s}"), c, &mut out, &mut conv);
        }
        c_prev = c;
    }
    let mut rev: Vec<usize> = widths.iter().rev().copied().collect();
    rev.push(3);
    for j in 0..config.stages {
        let s = j + 1;
        let (ci, co) = (rev[j], rev[j + 1]);
        // transposed layout: (c_in, c_out, k, k), bias over c_out
        out.push((format!("gs.s{s}.w"), Shape::new(ci, co, k, k)));
        out.push((format!("gs.s{s}.b"), Shape::vector(co)));
        if s < config.stages {
            res(&format!("gs.s{s}"), co, &mut out, &mut conv);
        }
    }
    let (m, mz) = (config.latent_channels, config.hyper_channels);
    conv("ha.c1".into(), mz, m, k, &mut out);
    conv("ha.c2".into(), mz, mz, k, &mut out);
    out.push(("hs.c1.w".into(), Shape::new(mz, mz, k, k)));
    out.push(("hs.c1.b".into(), Shape::vector(mz)));
    out.push(("hs.c2.w".into(), Shape::new(mz, 2 * m, k, k)));
    out.push(("hs.c2.b".into(), Shape::vector(2 * m)));
    out
}

fn check_input(op: &str, tape: &Tape, x: Var, expected: (usize, usize, usize)) -> Result<()> {
    let s = tape.shape(x);
    if (s.c, s.h, s.w) != expected {
        return Err(Error::layer(
            op,
            format!("input {s} does not match planned {}x{}x{}", expected.0, expected.1, expected.2),
        ));
    }
    Ok(())
}

fn conv_layer(tape: &mut Tape, p: &BoundParams, name: &str, x: Var, co: usize, k: usize, stride: usize) -> Result<Var> {
    let ci = tape.shape(x).c;
    let w = p.get(tape, &format!("{name}.w"), Shape::new(co, ci, k, k))?;
    let b = p.get(tape, &format!("{name}.b"), Shape::vector(co))?;
    tape.conv2d(x, w, Some(b), stride, k / 2)
}

fn deconv_layer(
    tape: &mut Tape,
    p: &BoundParams,
    name: &str,
    x: Var,
    co: usize,
    k: usize,
    out_pad: (usize, usize),
) -> Result<Var> {
    let ci = tape.shape(x).c;
    let w = p.get(tape, &format!("{name}.w"), Shape::new(ci, co, k, k))?;
    let b = p.get(tape, &format!("{name}.b"), Shape::vector(co))?;
    tape.conv2d_transpose_padded(x, w, Some(b), 2, k / 2, out_pad)
}

fn residual_blocks(tape: &mut Tape, p: &BoundParams, prefix: &str, mut x: Var, blocks: usize) -> Result<Var> {
    let c = tape.shape(x).c;
    for r in 0..blocks {
        let h = conv_layer(tape, p, &format!("{prefix}.r{r}.c1"), x, c, RES_KERNEL, 1)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = conv_layer(tape, p, &format!("{prefix}.r{r}.c2"), h, c, RES_KERNEL, 1)?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}

/// Analysis transform returning the output of every stage; the last one is
/// the latent `y`.
pub fn analysis_stages(tape: &mut Tape, x: Var, params: &BoundParams, config: &HftConfig, plan: &StagePlan) -> Result<Vec<Var>> {
    check_input("analysis", tape, x, plan.input)?;
    let mut outs = Vec::with_capacity(plan.analysis.len());
    let mut h = x;
    for (i, layer) in plan.analysis.iter().enumerate() {
        let s = i + 1;
        let name = format!("ga.s{s}");
        h = conv_layer(tape, params, &name, h, layer.c_out, config.kernel, 2)?;
        if s < plan.analysis.len() {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = residual_blocks(tape, params, &name, h, config.res_blocks_per_stage)?;
        }
        outs.push(h);
    }
    Ok(outs)
}

/// `y = g_a(x)`.
pub fn analysis(tape: &mut Tape, x: Var, params: &BoundParams, config: &HftConfig, plan: &StagePlan) -> Result<Var> {
    Ok(*analysis_stages(tape, x, params, config, plan)?.last().expect("non-empty plan"))
}

/// `x_hat = g_s(y_hat)`. Values are not clamped here; clamping to `[0, 1]`
/// happens at image export.
pub fn synthesis(tape: &mut Tape, y_hat: Var, params: &BoundParams, config: &HftConfig, plan: &StagePlan) -> Result<Var> {
    check_input("synthesis", tape, y_hat, plan.latent())?;
    let mut h = y_hat;
    for (j, layer) in plan.synthesis.iter().enumerate() {
        let s = j + 1;
        let name = format!("gs.s{s}");
        let pads = (plan.synthesis_out_pad(j), plan.synthesis_out_pad_w(j));
        h = deconv_layer(tape, params, &name, h, layer.c_out, config.kernel, pads)?;
        if s < plan.synthesis.len() {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = residual_blocks(tape, params, &name, h, config.res_blocks_per_stage)?;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperDirection {
    Analysis,
    Synthesis,
}

/// Hyper-encoder (`y -> z`, two stride-2 layers) or hyper-decoder
/// (`z_hat ->` a `2M`-channel feature map at the latent resolution).
pub fn hyper_transform(
    tape: &mut Tape,
    input: Var,
    params: &BoundParams,
    config: &HftConfig,
    plan: &StagePlan,
    direction: HyperDirection,
) -> Result<Var> {
    let k = config.kernel;
    match direction {
        HyperDirection::Analysis => {
            check_input("hyper_analysis", tape, input, plan.latent())?;
            let h = conv_layer(tape, params, "ha.c1", input, plan.hyper_analysis[0].c_out, k, 2)?;
            let h = tape.leaky_relu(h, LEAKY_SLOPE);
            conv_layer(tape, params, "ha.c2", h, plan.hyper_analysis[1].c_out, k, 2)
        }
        HyperDirection::Synthesis => {
            check_input("hyper_synthesis", tape, input, plan.hyper_latent())?;
            let h = deconv_layer(tape, params, "hs.c1", input, plan.hyper_synthesis[0].c_out, k, plan.hyper_out_pads(0))?;
            let h = tape.leaky_relu(h, LEAKY_SLOPE);
            deconv_layer(tape, params, "hs.c2", h, plan.hyper_synthesis[1].c_out, k, plan.hyper_out_pads(1))
        }
    }
}
