//! Gate-weight statistics, output/input variance ratios, and parameter / MAC accounting.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::network::{resolve, seq_output_shape};
use crate::layers::{Mode, Network, NetworkSpec, Node};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

pub const HIST_LO: f64 = -1.0;
pub const HIST_HI: f64 = 1.0;
pub const HIST_BINS: usize = 40;

/// Fixed-bin histogram of gamma over [-1, 1] in 0.05 steps. Values outside
/// the range land in the first or last bin so counts always sum to C.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GammaHistogram {
    pub fn new(values: &[f64]) -> Self {
        let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
        let edges = (0..=HIST_BINS).map(|i| HIST_LO + i as f64 * width).collect();
        let mut counts = vec![0; HIST_BINS];
        for &v in values {
            let idx = ((v - HIST_LO) / width).floor();
            let idx = if idx.is_nan() { 0.0 } else { idx.clamp(0.0, (HIST_BINS - 1) as f64) };
            counts[idx as usize] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisRecord {
    pub layer_name: String,
    pub layer_index: usize,
    pub gamma_mean: f64,
    pub gamma_std: f64,
    pub gamma_histogram: GammaHistogram,
    /// Var(output) / Var(input) over every element; `None` when the input
    /// variance is zero.
    pub variance_ratio: Option<f64>,
    /// Per-channel ratio averaged over channels with non-zero input variance.
    pub variance_ratio_perchannel_mean: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean, population std and histogram of gamma for every GCT layer.
pub fn gamma_stats<T: Scalar>(net: &Network<T>) -> Result<Vec<AnalysisRecord>> {
    let layers = net.gct_layers();
    if layers.is_empty() {
        return Err(Error::NoGctLayers);
    }
    Ok(layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let gamma: Vec<f64> = l.params.gamma.iter().map(|g| g.to_f64_lossy()).collect();
            let (gamma_mean, gamma_std) = mean_std(&gamma);
            AnalysisRecord {
                layer_name: l.name.clone(),
                layer_index: i,
                gamma_mean,
                gamma_std,
                gamma_histogram: GammaHistogram::new(&gamma),
                variance_ratio: None,
                variance_ratio_perchannel_mean: None,
            }
        })
        .collect())
}

fn ratio(out_var: f64, in_var: f64) -> Option<f64> {
    (in_var > 0.0).then(|| out_var / in_var)
}

fn channel_var<T: Scalar>(t: &Tensor4<T>, c: usize) -> f64 {
    let s = t.shape();
    let vals: Vec<f64> = (0..s.n)
        .flat_map(|n| t.plane(n, c).iter().map(|v| v.to_f64_lossy()))
        .collect();
    mean_std(&vals).1.powi(2)
}

/// Runs `batch` through the network in eval mode and reports, for each GCT
/// layer, the ratio of output to input variance alongside the gamma stats.
pub fn variance_ratio<T: Scalar>(net: &mut Network<T>, batch: &Tensor4<T>) -> Result<Vec<AnalysisRecord>> {
    let mut records = gamma_stats(net)?;
    net.forward(batch, Mode::Eval)?;
    for (rec, layer) in records.iter_mut().zip(net.gct_layers()) {
        let cache = layer
            .last_cache()
            .ok_or_else(|| Error::InvalidParam(format!("{}: no forward cache", layer.name)))?;
        let input = &cache.input;
        let output = input.scale_planes(cache.gate.data())?;
        rec.variance_ratio = ratio(output.mean_var().1, input.mean_var().1);
        let per: Vec<f64> = (0..input.shape().c)
            .filter_map(|c| ratio(channel_var(&output, c), channel_var(input, c)))
            .collect();
        rec.variance_ratio_perchannel_mean = (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64);
    }
    Ok(records)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

/// One row per GCT layer.
pub fn analysis_csv(records: &[AnalysisRecord]) -> String {
    let mut s = String::from(
        "layer_index,layer_name,gamma_mean,gamma_std,variance_ratio_global,variance_ratio_perchannel_mean\n",
    );
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.layer_index,
            r.layer_name,
            r.gamma_mean,
            r.gamma_std,
            fmt_opt(r.variance_ratio),
            fmt_opt(r.variance_ratio_perchannel_mean)
        );
    }
    s
}

/// Companion histogram CSV: one row per (layer, bin).
pub fn histogram_csv(records: &[AnalysisRecord]) -> String {
    let mut s = String::from("layer_index,layer_name,bin_lo,bin_hi,count\n");
    for r in records {
        let h = &r.gamma_histogram;
        for (i, count) in h.counts.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{:.2},{:.2},{}",
                r.layer_index,
                r.layer_name,
                h.edges[i],
                h.edges[i + 1],
                count
            );
        }
    }
    s
}

pub const FLOP_CONVENTION: &str = "one multiply-add counted as one op; per sample";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub network: String,
    pub flop_convention: &'static str,
    pub input_shape: [usize; 4],
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub gct_params: u64,
    pub gct_macs: u64,
    pub se_params: u64,
    pub se_macs: u64,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn node_cost(node: &Node, input: Shape4, out: &mut Vec<LayerCost>) -> Result<Shape4> {
    let output = node.output_shape(input)?;
    let (hw_in, hw_out) = ((input.h * input.w) as u64, (output.h * output.w) as u64);
    let (kind, params, macs) = match node {
        Node::Conv {
            in_channels,
            out_channels,
            geometry,
            ..
        } => {
            let k = (in_channels * out_channels * geometry.kernel_h * geometry.kernel_w) as u64;
            ("conv", k, k * hw_out)
        }
        Node::BatchNorm { channels, .. } => ("batch_norm", 2 * *channels as u64, 0),
        Node::Relu { .. } => ("relu", 0, 0),
        Node::MaxPool { .. } => ("max_pool", 0, 0),
        Node::GlobalAvgPool { .. } => ("global_avg_pool", 0, 0),
        Node::Linear {
            in_features,
            out_features,
            ..
        } => {
            let w = (in_features * out_features) as u64;
            ("linear", w + *out_features as u64, w)
        }
        Node::Gct { channels, .. } => {
            let c = *channels as u64;
            ("gct", 3 * c, 2 * c * hw_in + 4 * c)
        }
        Node::Se {
            channels, reduction, ..
        } => {
            let c = *channels as u64;
            let p = 2 * c * (c / *reduction as u64);
            ("se", p, p + c * hw_in)
        }
        Node::Residual { body, shortcut, .. } => {
            let mut s = input;
            for n in body {
                s = node_cost(n, s, out)?;
            }
            let mut s = input;
            for n in shortcut {
                s = node_cost(n, s, out)?;
            }
            return Ok(output);
        }
    };
    out.push(LayerCost {
        name: node.name().to_string(),
        kind,
        params,
        macs,
    });
    Ok(output)
}

/// Parameter and multiply-add counts of resolved nodes at `input` (batch ignored).
pub fn cost_report(name: &str, nodes: &[Node], input: Shape4) -> Result<CostReport> {
    let input = Shape4::new(1, input.c, input.h, input.w);
    seq_output_shape(nodes, input)?;
    let mut layers = Vec::new();
    let mut s = input;
    for n in nodes {
        s = node_cost(n, s, &mut layers)?;
    }
    let sum = |kind: Option<&str>, f: fn(&LayerCost) -> u64| -> u64 {
        layers
            .iter()
            .filter(|l| kind.is_none_or(|k| l.kind == k))
            .map(f)
            .sum()
    };
    Ok(CostReport {
        network: name.to_string(),
        flop_convention: FLOP_CONVENTION,
        input_shape: input.dims(),
        total_params: sum(None, |l| l.params),
        total_macs: sum(None, |l| l.macs),
        gct_params: sum(Some("gct"), |l| l.params),
        gct_macs: sum(Some("gct"), |l| l.macs),
        se_params: sum(Some("se"), |l| l.params),
        se_macs: sum(Some("se"), |l| l.macs),
        layers,
    })
}

/// Costs at the network's own input size.
pub fn count_params<T: Scalar>(net: &Network<T>) -> Result<CostReport> {
    cost_report(&net.spec.name, net.nodes(), net.input_shape(1))
}

pub fn count_flops<T: Scalar>(net: &Network<T>, input: Shape4) -> Result<CostReport> {
    cost_report(&net.spec.name, net.nodes(), input)
}

/// Costs straight from a spec, without allocating weights.
pub fn count_cost_spec(spec: &NetworkSpec, input: Option<Shape4>) -> Result<CostReport> {
    let nodes = resolve(spec)?;
    let input = input.unwrap_or(Shape4::new(1, spec.input_channels, spec.input_size[0], spec.input_size[1]));
    cost_report(&spec.name, &nodes, input)
}
