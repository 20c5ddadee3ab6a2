//! Static multiply-accumulate accounting.
//!
//! An [`ArchSpec`] lists sections of layers. Each section starts from the
//! image or from the output of an earlier section and walks its layers,
//! tracking the `(c, h, w)` shape. Costs are exact integer MAC counts;
//! activations and additions are free.
//!
//! Per layer kind, with `(c, h, w)` the running input shape:
//!
//! | kind             | output                   | MACs                          |
//! |------------------|--------------------------|-------------------------------|
//! | `conv`           | `(c_out, ⌈h/s⌉, ⌈w/s⌉)`  | `k²·c_in·c_out·h_out·w_out`   |
//! | `conv_transpose` | `(c_out, h·s, w·s)`      | `k²·c_in·c_out·h·w`           |
//! | `subpel_conv`    | `(c_out, h·s, w·s)`      | `k²·c_in·c_out·s²·h·w`        |
//! | `residual_block` | unchanged                | `2·k²·c²·h·w` (`k` = 3)       |
//! | `pointwise`      | `(c_out, h, w)`          | `c_in·c_out·h·w`              |
//! | `elementwise`    | unchanged                | `c·h·w`                       |
//!
//! A transposed convolution is charged like the convolution it is the
//! adjoint of: every input sample meets each kernel tap once.
//!
//! Layers marked `side` read the running spatial size with their own input
//! width and leave the running shape alone; they model branches such as
//! context networks fed by concatenated tensors. Repeats of a side layer
//! are independent applications to that same input.
//!
//! A residual block with `k` left at 1 is charged with 3x3 convolutions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::{ContextSchedule, CONTEXT_KERNEL};
use crate::error::{Error, Result};
use crate::hft::{HftConfig, RES_KERNEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    SubpelConv,
    ResidualBlock,
    Pointwise,
    Elementwise,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    #[serde(default)]
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default)]
    pub side: bool,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self { name: name.into(), kind, c_in, c_out, k, stride, repeat: 1, side: false }
    }

    pub fn repeated(mut self, n: usize) -> Self {
        self.repeat = n;
        self
    }

    pub fn side(mut self) -> Self {
        self.side = true;
        self
    }
}

/// Where a section's walk starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionInput {
    /// `"image"` or the name of an earlier section.
    pub from: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Section {
    pub name: String,
    /// Sub-network the section is totalled under, such as `analysis`.
    pub group: String,
    pub input: SectionInput,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub sections: Vec<Section>,
}

impl ArchSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("architecture spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

/// MACs of one layer (all repeats) and its output shape.
pub fn layer_macs(layer: &Layer, input: (usize, usize, usize)) -> Result<(u128, (usize, usize, usize))> {
    let (c, h, w) = input;
    let name = if layer.name.is_empty() { format!("{:?}", layer.kind) } else { layer.name.clone() };
    let fail = |reason: String| Error::layer(name.clone(), reason);
    if !layer.side && layer.c_in != c {
        return Err(fail(format!("expects {} input channels but receives {c}", layer.c_in)));
    }
    if layer.k == 0 || layer.stride == 0 || layer.repeat == 0 {
        return Err(fail("kernel, stride and repeat must be positive".into()));
    }
    let (k2, ci, co, s) = (layer.k as u128 * layer.k as u128, layer.c_in as u128, layer.c_out as u128, layer.stride);
    let mut shape = (layer.c_in, h, w);
    let mut total = 0u128;
    let mut last_side = shape;
    for _ in 0..layer.repeat {
        if shape.0 != layer.c_in {
            return Err(fail(format!("repeat needs c_in == c_out, got {} -> {}", layer.c_in, layer.c_out)));
        }
        let (_, h, w) = shape;
        let (macs, out) = match layer.kind {
            LayerKind::Conv => {
                let (ho, wo) = (h.div_ceil(s), w.div_ceil(s));
                (k2 * ci * co * (ho * wo) as u128, (layer.c_out, ho, wo))
            }
            LayerKind::ConvTranspose => (k2 * ci * co * (h * w) as u128, (layer.c_out, h * s, w * s)),
            LayerKind::SubpelConv => (k2 * ci * co * (s * s * h * w) as u128, (layer.c_out, h * s, w * s)),
            LayerKind::ResidualBlock => {
                if layer.c_in != layer.c_out {
                    return Err(fail("residual blocks keep their channel count".into()));
                }
                let k2 = if layer.k == 1 { (RES_KERNEL * RES_KERNEL) as u128 } else { k2 };
                (2 * k2 * ci * ci * (h * w) as u128, (layer.c_in, h, w))
            }
            LayerKind::Pointwise => (ci * co * (h * w) as u128, (layer.c_out, h, w)),
            LayerKind::Elementwise => {
                if layer.c_in != layer.c_out {
                    return Err(fail("elementwise layers keep their channel count".into()));
                }
                (ci * (h * w) as u128, (layer.c_in, h, w))
            }
        };
        total += macs;
        if !layer.side {
            shape = out;
        } else {
            last_side = out;
        }
    }
    Ok((total, if layer.side { last_side } else { shape }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub section: String,
    pub group: String,
    pub layer: String,
    pub kind: LayerKind,
    pub macs: u128,
    pub macs_per_pixel: f64,
    pub output: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub name: String,
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerReport>,
    /// Total MACs per group, in first-appearance order.
    pub groups: Vec<(String, u128)>,
    pub total_macs: u128,
}

impl ComplexityReport {
    pub fn pixels(&self) -> u128 {
        (self.input.1 * self.input.2) as u128
    }

    pub fn kmac_per_pixel(&self) -> f64 {
        self.total_macs as f64 / self.pixels() as f64 / 1000.0
    }

    pub fn group_kmac_per_pixel(&self, group: &str) -> f64 {
        let macs = self.groups.iter().find(|(g, _)| g == group).map_or(0, |(_, m)| *m);
        macs as f64 / self.pixels() as f64 / 1000.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,section,group,layer,kind,macs,mac_per_pixel\n");
        for l in &self.layers {
            let kind = serde_json::to_string(&l.kind).expect("kind serializes");
            writeln!(out, "{},{},{},{},{},{},{:.4}", self.name, l.section, l.group, l.layer, kind.trim_matches('"'), l.macs, l.macs_per_pixel)
                .expect("string write");
        }
        out
    }

    /// Aligned per-group breakdown.
    pub fn to_table(&self) -> String {
        let mut out = format!("{} @ {}x{}\n", self.name, self.input.1, self.input.2);
        for (g, macs) in &self.groups {
            writeln!(out, "  {g:<12} {:>12.3} kMAC/px", *macs as f64 / self.pixels() as f64 / 1000.0).expect("string write");
        }
        writeln!(out, "  {:<12} {:>12.3} kMAC/px", "total", self.kmac_per_pixel()).expect("string write");
        out
    }
}

/// Walks every section of `spec` for an input image of shape `input`.
pub fn model_report(spec: &ArchSpec, input: (usize, usize, usize)) -> Result<ComplexityReport> {
    if input.1 == 0 || input.2 == 0 {
        return Err(Error::invalid("input size must be positive"));
    }
    let pixels = (input.1 * input.2) as f64;
    let mut outputs: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    let mut layers = Vec::new();
    let mut groups: Vec<(String, u128)> = Vec::new();
    let mut total = 0u128;
    for section in &spec.sections {
        let mut shape = match section.input.from.as_str() {
            "image" => input,
            other => *outputs.get(other).ok_or_else(|| {
                Error::layer(section.name.clone(), format!("input section `{other}` is not defined before it"))
            })?,
        };
        let mut section_macs = 0u128;
        for (i, layer) in section.layers.iter().enumerate() {
            let label = if layer.name.is_empty() { format!("{}.{i}", section.name) } else { format!("{}.{}", section.name, layer.name) };
            let named = Layer { name: label.clone(), ..layer.clone() };
            let (macs, out) = layer_macs(&named, shape)?;
            if !layer.side {
                shape = out;
            }
            section_macs += macs;
            layers.push(LayerReport {
                section: section.name.clone(),
                group: section.group.clone(),
                layer: label,
                kind: layer.kind,
                macs,
                macs_per_pixel: macs as f64 / pixels,
                output: out,
            });
        }
        if outputs.insert(section.name.as_str(), shape).is_some() {
            return Err(Error::layer(section.name.clone(), "section name is used twice"));
        }
        match groups.iter_mut().find(|(g, _)| *g == section.group) {
            Some((_, m)) => *m += section_macs,
            None => groups.push((section.group.clone(), section_macs)),
        }
        total += section_macs;
    }
    Ok(ComplexityReport { name: spec.name.clone(), input, layers, groups, total_macs: total })
}

/// One line of a comparison: a model's total against the first report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub kmac_per_pixel: f64,
    pub ratio: f64,
}

pub fn compare(reports: &[ComplexityReport]) -> Result<Vec<ComparisonRow>> {
    let first = reports.first().ok_or_else(|| Error::invalid("compare needs at least one report"))?;
    let base = first.kmac_per_pixel();
    Ok(reports
        .iter()
        .map(|r| {
            let k = r.kmac_per_pixel();
            let ratio = if base > 0.0 { k / base } else if k == 0.0 { 1.0 } else { f64::INFINITY };
            ComparisonRow { name: r.name.clone(), kmac_per_pixel: k, ratio }
        })
        .collect())
}

pub const COMPARISON_CSV_HEADER: &str = "model,kmac_per_pixel,ratio";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{COMPARISON_CSV_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{:.4},{:.4}", r.name, r.kmac_per_pixel, r.ratio).expect("string write");
    }
    out
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>12}  {:>8}\n", "model", "kMAC/px", "ratio");
    for r in rows {
        writeln!(out, "{:<width$}  {:>12.3}  {:>8.4}", r.name, r.kmac_per_pixel, r.ratio).expect("string write");
    }
    out
}

/// Result of [`run_analyze`].
#[derive(Debug, Clone)]
pub struct Analysis {
    pub reports: Vec<ComplexityReport>,
    pub rows: Vec<ComparisonRow>,
}

impl Analysis {
    /// Comparison table plus one breakdown per model.
    pub fn to_text(&self) -> String {
        let mut out = comparison_table(&self.rows);
        for r in &self.reports {
            out.push('\n');
            out.push_str(&r.to_table());
        }
        out
    }
}

/// Loads each spec and compares them at a `height x width` RGB input.
pub fn run_analyze(paths: &[impl AsRef<Path>], height: usize, width: usize) -> Result<Analysis> {
    let specs: Vec<ArchSpec> = paths.iter().map(|p| ArchSpec::load(p.as_ref())).collect::<Result<_>>()?;
    let reports: Vec<ComplexityReport> = specs.iter().map(|s| model_report(s, (3, height, width))).collect::<Result<_>>()?;
    let rows = compare(&reports)?;
    Ok(Analysis { reports, rows })
}

/// The spec of a hierarchical-transform codec, context model included.
///
/// Context costs follow the decoder: each channel group runs its fusion
/// network once per checkerboard pass, and its spatial convolution once.
pub fn from_hft(name: &str, config: &HftConfig) -> Result<ArchSpec> {
    config.validate()?;
    let ch = config.stage_channels();
    let k = config.kernel;
    let mut analysis = Vec::new();
    let mut prev = 3;
    for (i, &c) in ch.iter().enumerate() {
        let s = i + 1;
        analysis.push(Layer::new(format!("s{s}.conv"), LayerKind::Conv, prev, c, k, 2));
        if s < config.stages && config.res_blocks_per_stage > 0 {
            analysis.push(Layer::new(format!("s{s}.res"), LayerKind::ResidualBlock, c, c, RES_KERNEL, 1).repeated(config.res_blocks_per_stage));
        }
        prev = c;
    }
    let mut synthesis = Vec::new();
    for j in 1..=config.stages {
        let c_in = ch[config.stages - j];
        let c_out = if j == config.stages { 3 } else { ch[config.stages - j - 1] };
        synthesis.push(Layer::new(format!("s{j}.convT"), LayerKind::ConvTranspose, c_in, c_out, k, 2));
        if j < config.stages && config.res_blocks_per_stage > 0 {
            synthesis.push(Layer::new(format!("s{j}.res"), LayerKind::ResidualBlock, c_out, c_out, RES_KERNEL, 1).repeated(config.res_blocks_per_stage));
        }
    }
    let (m, mz) = (config.latent_channels, config.hyper_channels);
    let hyper_analysis = vec![
        Layer::new("c1", LayerKind::Conv, m, mz, k, 2),
        Layer::new("c2", LayerKind::Conv, mz, mz, k, 2),
    ];
    let hyper_synthesis = vec![
        Layer::new("c1", LayerKind::ConvTranspose, mz, mz, k, 2),
        Layer::new("c2", LayerKind::ConvTranspose, mz, 2 * m, k, 2),
    ];
    let schedule = ContextSchedule::from_config(config)?;
    let mut context = Vec::new();
    for (g, &s) in schedule.groups().iter().enumerate() {
        context.push(Layer::new(format!("g{g}.spatial"), LayerKind::Conv, s, 2 * s, CONTEXT_KERNEL, 1).side());
        context.push(Layer::new(format!("g{g}.fuse1"), LayerKind::Pointwise, schedule.fusion_inputs(g), 2 * s, 1, 1).repeated(2).side());
        context.push(Layer::new(format!("g{g}.fuse2"), LayerKind::Pointwise, 2 * s, 2 * s, 1, 1).repeated(2).side());
    }
    let section = |name: &str, group: &str, from: &str, layers: Vec<Layer>| Section {
        name: name.into(),
        group: group.into(),
        input: SectionInput { from: from.into() },
        layers,
    };
    Ok(ArchSpec {
        name: name.into(),
        description: format!(
            "hierarchical transform N={} stages={} M={} k={} res={} Mz={}",
            config.base_channels, config.stages, m, k, config.res_blocks_per_stage, mz
        ),
        sections: vec![
            section("analysis", "analysis", "image", analysis),
            section("synthesis", "synthesis", "analysis", synthesis),
            section("hyper_analysis", "hyper", "analysis", hyper_analysis),
            section("hyper_synthesis", "hyper", "hyper_analysis", hyper_synthesis),
            section("context", "context", "analysis", context),
        ],
    })
}
