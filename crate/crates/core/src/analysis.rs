//! Diagnostics of how strongly primary capsules drive the class capsules:
//! connection strength, influence, ordered activation curves, routing
//! coefficient statistics and activation maps, plus their CSV exports.
//!
//! Everything here is a pure function of the weights and the data.

use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::activations::norm;
use crate::capsule::{CapsNet, CapsuleLayerState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CURVE_TOP: usize = 1000;
pub const DEFAULT_COEFF_TOP: usize = 100;
pub const DEFAULT_COEFF_THRESHOLD: f64 = 0.15;

fn check_index(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::IndexOutOfRange { what, index, len });
    }
    Ok(())
}

/// `c[i,j]·‖v[i,j]‖` with the final-iteration coefficients.
pub fn connection_strength(state: &CapsuleLayerState, i: usize, j: usize) -> Result<f64> {
    check_index("input capsule", i, state.num_in())?;
    check_index("output capsule", j, state.num_out())?;
    let d = state.votes.shape()[2];
    let n_out = state.num_out();
    let off = (i * n_out + j) * d;
    Ok(state.coefficients.data()[i * n_out + j] * norm(&state.votes.data()[off..off + d]))
}

/// `Σ_j c[i,j]·‖v[i,j]‖`.
pub fn influence(state: &CapsuleLayerState, i: usize) -> Result<f64> {
    check_index("input capsule", i, state.num_in())?;
    (0..state.num_out()).map(|j| connection_strength(state, i, j)).sum()
}

pub fn influences(state: &CapsuleLayerState) -> Vec<f64> {
    (0..state.num_in())
        .map(|i| influence(state, i).expect("index in range"))
        .collect()
}

/// Largest singular value of every `w[i,j]` block, shaped `N_in × N_out`.
pub fn transform_spectral_norms(w: &Tensor) -> Result<Tensor> {
    if w.rank() != 4 {
        return Err(Error::shape("spectral norms", "rank-4 N_in×N_out×d_out×d_in", format!("{:?}", w.shape())));
    }
    let [n_in, n_out, d_out, d_in] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let block = d_out * d_in;
    let norms = w
        .data()
        .chunks(block)
        .map(|b| {
            DMatrix::from_row_slice(d_out, d_in, b)
                .singular_values()
                .max()
        })
        .collect();
    Tensor::new(vec![n_in, n_out], norms)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceReport {
    /// Mean influence of each primary capsule over the evaluated images.
    pub per_capsule_influence: Vec<f64>,
    /// Mean over `j` of the spectral norm of `w[i,j]`.
    pub w_norm_per_capsule: Vec<f64>,
    /// Standard deviation over mean of those norms across `j`; small values
    /// mean the blocks of capsule `i` have similar norm.
    pub w_norm_spread: Vec<f64>,
    /// Mean activation `‖u_i‖` of each primary capsule.
    pub activation_norms: Vec<f64>,
    /// Pearson correlation of influence and `‖u_i‖` over every
    /// (image, capsule) pair.
    pub correlation: f64,
}

pub fn influence_report(net: &CapsNet, dataset: &Dataset) -> Result<InfluenceReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_in = net.arch.num_primary_caps();
    let norms = transform_spectral_norms(&net.params.routing_w)?;
    let n_out = norms.shape()[1];
    let (w_norm_per_capsule, w_norm_spread) = norms
        .data()
        .chunks(n_out)
        .map(|row| {
            let (m, s) = mean_std(row);
            (m, if m > 0.0 { s / m } else { 0.0 })
        })
        .unzip();

    let mut infl_sum = vec![0.0; n_in];
    let mut act_sum = vec![0.0; n_in];
    let mut all_infl = Vec::with_capacity(n_in * dataset.len());
    let mut all_act = Vec::with_capacity(n_in * dataset.len());
    for k in 0..dataset.len() {
        let out = net.forward(&dataset.image(k))?;
        let infl = influences(&out.routing);
        let acts = out.primary.activations();
        for i in 0..n_in {
            infl_sum[i] += infl[i];
            act_sum[i] += acts[i];
        }
        all_infl.extend(infl);
        all_act.extend(acts);
    }
    let n = dataset.len() as f64;
    Ok(InfluenceReport {
        per_capsule_influence: infl_sum.iter().map(|x| x / n).collect(),
        w_norm_per_capsule,
        w_norm_spread,
        activation_norms: act_sum.iter().map(|x| x / n).collect(),
        correlation: pearson(&all_infl, &all_act),
    })
}

/// Positionwise mean of each image's primary activations sorted in
/// descending order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderedActivationCurve {
    pub sorted_descending_mean_activations: Vec<f64>,
    pub num_images: usize,
}

impl OrderedActivationCurve {
    pub fn values(&self) -> &[f64] {
        &self.sorted_descending_mean_activations
    }

    /// Keeps the first `top` positions.
    pub fn truncated(&self, top: usize) -> Self {
        let v = &self.sorted_descending_mean_activations;
        OrderedActivationCurve {
            sorted_descending_mean_activations: v[..top.min(v.len())].to_vec(),
            num_images: self.num_images,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "mean_activation"]).map_err(csv_err)?;
        for (k, v) in self.values().iter().enumerate() {
            w.write_record([(k + 1).to_string(), v.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn sort_desc(v: &mut [f64]) {
    v.sort_by(|a, b| b.total_cmp(a));
}

/// Curve over every image of `dataset`, computed from primary activations.
pub fn ordered_activation_curve(net: &CapsNet, dataset: &Dataset) -> Result<OrderedActivationCurve> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = vec![0.0; net.arch.num_primary_caps()];
    for k in 0..dataset.len() {
        let mut acts = net.primary_forward(&dataset.image(k))?.activations();
        sort_desc(&mut acts);
        sum.iter_mut().zip(&acts).for_each(|(s, a)| *s += a);
    }
    let n = dataset.len() as f64;
    Ok(OrderedActivationCurve {
        sorted_descending_mean_activations: sum.into_iter().map(|s| s / n).collect(),
        num_images: dataset.len(),
    })
}

/// Routing sparsity: the largest coefficient `max_j c[i,j]` of every input
/// capsule, averaged over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingCoeffStat {
    /// Per image, the max coefficients sorted descending, then averaged
    /// positionwise.
    pub ordered_max_coefficients: Vec<f64>,
    /// Mean max coefficient of each capsule, in capsule order.
    pub per_capsule_max_coefficient: Vec<f64>,
    /// Mean per-image number of capsules whose max coefficient exceeds
    /// `threshold`.
    pub mean_count_above: f64,
    pub threshold: f64,
    pub num_images: usize,
}

impl RoutingCoeffStat {
    /// Entries of the averaged ordered curve strictly above `t`.
    pub fn threshold_count(&self, t: f64) -> usize {
        self.ordered_max_coefficients.iter().filter(|&&c| c > t).count()
    }

    /// Rows `capsule,stat,value`: one `mean_max_coeff` row per capsule (in
    /// capsule order) and one `ordered_max_coeff` row per rank for the
    /// first `top` ranks.
    pub fn write_csv<W: Write>(&self, out: W, top: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["capsule", "stat", "value"]).map_err(csv_err)?;
        for (i, v) in self.per_capsule_max_coefficient.iter().enumerate() {
            w.write_record([i.to_string(), "mean_max_coeff".into(), v.to_string()]).map_err(csv_err)?;
        }
        for (r, v) in self.ordered_max_coefficients.iter().take(top).enumerate() {
            w.write_record([r.to_string(), "ordered_max_coeff".into(), v.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn max_coefficients(state: &CapsuleLayerState) -> Vec<f64> {
    state
        .coefficients
        .data()
        .chunks(state.num_out())
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn routing_coeff_stat(net: &CapsNet, dataset: &Dataset, threshold: f64) -> Result<RoutingCoeffStat> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_in = net.arch.num_primary_caps();
    let mut ordered = vec![0.0; n_in];
    let mut per_capsule = vec![0.0; n_in];
    let mut count = 0usize;
    for k in 0..dataset.len() {
        let out = net.forward(&dataset.image(k))?;
        let mut maxes = max_coefficients(&out.routing);
        per_capsule.iter_mut().zip(&maxes).for_each(|(s, m)| *s += m);
        count += maxes.iter().filter(|&&m| m > threshold).count();
        sort_desc(&mut maxes);
        ordered.iter_mut().zip(&maxes).for_each(|(s, m)| *s += m);
    }
    let n = dataset.len() as f64;
    Ok(RoutingCoeffStat {
        ordered_max_coefficients: ordered.into_iter().map(|s| s / n).collect(),
        per_capsule_max_coefficient: per_capsule.into_iter().map(|s| s / n).collect(),
        mean_count_above: count as f64 / n,
        threshold,
        num_images: dataset.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MapAggregation {
    #[default]
    Max,
    Mean,
}

/// Primary activation norms on the capsule grid (`H × W`), aggregated over
/// capsule channels.
pub fn activation_map(net: &CapsNet, image: &Tensor, agg: MapAggregation) -> Result<Tensor> {
    let acts = net.primary_forward(image)?.activations();
    let layer = net.primary_layer();
    let (h, w) = layer.grid;
    let cells = h * w;
    let mut map = vec![
        match agg {
            MapAggregation::Max => f64::NEG_INFINITY,
            MapAggregation::Mean => 0.0,
        };
        cells
    ];
    for channel in acts.chunks(cells) {
        for (m, &a) in map.iter_mut().zip(channel) {
            match agg {
                MapAggregation::Max => *m = m.max(a),
                MapAggregation::Mean => *m += a / layer.num_capsule_channels as f64,
            }
        }
    }
    Tensor::new(vec![h, w], map)
}

/// One CSV row per grid row, no header.
pub fn write_grid_csv<W: Write>(grid: &Tensor, out: W) -> Result<()> {
    grid.expect_rank(2, "grid csv")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for y in 0..grid.shape()[0] {
        w.write_record(grid.row(y).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

impl InfluenceReport {
    /// Rows `capsule,influence,w_norm,w_norm_spread,activation_norm`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["capsule", "influence", "w_norm", "w_norm_spread", "activation_norm"])
            .map_err(csv_err)?;
        for i in 0..self.per_capsule_influence.len() {
            w.write_record([
                i.to_string(),
                self.per_capsule_influence[i].to_string(),
                self.w_norm_per_capsule[i].to_string(),
                self.w_norm_spread[i].to_string(),
                self.activation_norms[i].to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}
