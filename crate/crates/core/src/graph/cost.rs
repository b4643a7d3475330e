use serde::Serialize;

use super::{infer_shapes, Feature, Layer, ModelGraph};
use crate::error::Result;
use crate::tensor::Shape4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: &'static str,
    /// Multiply-accumulates per sample.
    pub flops: u64,
    pub params: u64,
}

/// Multiply-accumulate and parameter counts; totals are the sums of the
/// per-layer entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    /// Fractional reduction of (flops, params) relative to `baseline`.
    pub fn reduction_from(&self, baseline: &CostReport) -> (f64, f64) {
        let frac = |now: u64, base: u64| {
            if base == 0 {
                0.0
            } else {
                1.0 - now as f64 / base as f64
            }
        };
        (
            frac(self.flops, baseline.flops),
            frac(self.params, baseline.params),
        )
    }
}

/// Per-sample cost of `graph` on inputs of `input` (batch is ignored).
///
/// Conv: `out * in * kh * kw * out_h * out_w`; linear: `out * in`. Batch norm
/// contributes its affine parameters (gamma, beta); running statistics are
/// buffers, not parameters.
pub fn count_cost(graph: &ModelGraph, input: Shape4) -> Result<CostReport> {
    let shapes = infer_shapes(
        &graph.layers,
        Feature::Map {
            c: input.channels,
            h: input.height,
            w: input.width,
        },
    )?;
    let mut per_layer = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let (flops, params) = match layer {
            Layer::Conv2d(conv) => {
                let (oh, ow) = match shapes[i] {
                    Feature::Map { h, w, .. } => (h, w),
                    Feature::Flat(_) => unreachable!("conv output is spatial"),
                };
                let weights = conv.weight.len() as u64;
                let bias = conv.bias.as_ref().map_or(0, |b| b.len()) as u64;
                (weights * (oh * ow) as u64, weights + bias)
            }
            Layer::Linear(lin) => {
                let weights = lin.weight.len() as u64;
                let bias = lin.bias.as_ref().map_or(0, |b| b.len()) as u64;
                (weights, weights + bias)
            }
            Layer::BatchNorm(bn) => (0, 2 * bn.channels() as u64),
            _ => (0, 0),
        };
        per_layer.push(LayerCost {
            layer: i,
            kind: layer.kind(),
            flops,
            params,
        });
    }
    Ok(CostReport {
        flops: per_layer.iter().map(|l| l.flops).sum(),
        params: per_layer.iter().map(|l| l.params).sum(),
        per_layer,
    })
}
