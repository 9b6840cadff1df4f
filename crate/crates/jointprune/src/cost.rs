//! Resource cost of a pruned architecture: analytic FLOPs, latency lookup
//! tables, and the constraint penalty folded into the error function.
//!
//! FLOPs count multiply-accumulates (not 2x MACs). Latency is the sum of
//! per-layer lookups; queries between measured rows are multilinearly
//! interpolated, queries outside the measured ranges are refused.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{active_layers, ArchitectureConfig, ArchitectureSpace, LayerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    Flops,
    Latency,
}

/// Where the penalty applies the regularization coefficient.
///
/// `RhoOutside` is `rho * ||C - target||^2`; `RhoInside` is
/// `(rho * ||C - target||)^2`. The two agree up to a reparameterization of
/// rho but are both kept because published rho values assume one or the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    #[default]
    RhoOutside,
    RhoInside,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub metric: CostMetric,
    /// Target cost in raw units (FLOPs or microseconds).
    pub target: f64,
    pub rho: f64,
    /// Multiplier applied to the cost difference before squaring, fixing the
    /// units rho is quoted in (1e-9 expresses FLOPs differences in GFLOPs).
    pub cost_scale: f64,
    pub penalty_form: PenaltyForm,
}

impl ConstraintSpec {
    pub fn flops(target: f64, rho: f64, cost_scale: f64) -> Self {
        ConstraintSpec {
            metric: CostMetric::Flops,
            target,
            rho,
            cost_scale,
            penalty_form: PenaltyForm::RhoOutside,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0) {
            return Err(Error::InvalidArgument(format!("target {} must be > 0", self.target)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho {} must be > 0", self.rho)));
        }
        if !(self.cost_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost_scale {} must be > 0",
                self.cost_scale
            )));
        }
        Ok(())
    }

    pub fn penalty(&self, cost: f64) -> f64 {
        let d = (cost - self.target) * self.cost_scale;
        match self.penalty_form {
            PenaltyForm::RhoOutside => self.rho * d * d,
            PenaltyForm::RhoInside => (self.rho * d) * (self.rho * d),
        }
    }
}

/// `E = L + rho * ||C(v) - constraint||^2`.
pub fn penalized_error(loss: f64, cost: f64, constraint: &ConstraintSpec) -> f64 {
    loss + constraint.penalty(cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InChannelsSource {
    Input,
    Layer(usize),
}

/// Per-layer cost decomposition used by both FLOPs counting and latency keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCostSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels_source: InChannelsSource,
    /// Rational factor mapping network input resolution to this layer's input
    /// resolution, as (numerator, denominator).
    pub spatial_in_factor: (u32, u32),
}

#[derive(Debug, Clone)]
pub struct CostModel {
    specs: Vec<LayerCostSpec>,
    input_channels: usize,
}

impl CostModel {
    /// Derive per-layer cost specs from the architecture space, chaining
    /// input channels and composing stride factors in network order.
    pub fn from_space(space: &ArchitectureSpace) -> Result<CostModel> {
        space.validate()?;
        // A dropped strided block would change downstream resolutions, which
        // a static per-layer factor cannot express.
        for (i, l) in space.layers.iter().enumerate() {
            if space.droppable_blocks.contains(&l.block_id) && l.stride > 1 {
                return Err(Error::InvalidSpace(format!(
                    "layer {i}: droppable blocks must have stride 1"
                )));
            }
        }
        let mut specs = Vec::with_capacity(space.layers.len());
        let mut factor: (u32, u32) = (1, 1);
        for (i, l) in space.layers.iter().enumerate() {
            specs.push(LayerCostSpec {
                kind: l.kind,
                kernel: l.kernel,
                stride: l.stride,
                in_channels_source: if i == 0 {
                    InChannelsSource::Input
                } else {
                    InChannelsSource::Layer(i - 1)
                },
                spatial_in_factor: factor,
            });
            if matches!(l.kind, LayerKind::Conv | LayerKind::DepthwiseConv) && l.stride > 1 {
                factor = (factor.0, factor.1 * l.stride as u32);
            }
        }
        Ok(CostModel {
            specs,
            input_channels: space.input_channels,
        })
    }

    pub fn specs(&self) -> &[LayerCostSpec] {
        &self.specs
    }

    fn in_channels(&self, layer: usize, config: &ArchitectureConfig) -> usize {
        match self.specs[layer].in_channels_source {
            InChannelsSource::Input => self.input_channels,
            InChannelsSource::Layer(j) => config.out_channels[j],
        }
    }

    /// Input resolution of a layer for a given network input resolution.
    pub fn spatial_in(&self, layer: usize, spatial: usize) -> usize {
        let (num, den) = self.specs[layer].spatial_in_factor;
        (spatial as u64 * num as u64 / den as u64) as usize
    }

    /// Multiply-accumulate count of the pruned network's forward pass.
    pub fn flops(&self, config: &ArchitectureConfig, space: &ArchitectureSpace) -> Result<f64> {
        space.validate_config(config)?;
        let mut total: u64 = 0;
        for layer in active_layers(config, space) {
            let spec = &self.specs[layer];
            let c_out = config.out_channels[layer];
            let c_in = self.in_channels(layer, config);
            match spec.kind {
                LayerKind::Dense => {
                    total += (c_in * c_out) as u64;
                }
                LayerKind::Conv => {
                    let h_in = self.spatial_in(layer, config.spatial);
                    let h_out = h_in / spec.stride;
                    total +=
                        (spec.kernel * spec.kernel * c_in * c_out) as u64 * (h_out * h_out) as u64;
                }
                LayerKind::DepthwiseConv => {
                    let h_in = self.spatial_in(layer, config.spatial);
                    let h_out = h_in / spec.stride;
                    total += (spec.kernel * spec.kernel * c_out) as u64 * (h_out * h_out) as u64;
                }
            }
        }
        Ok(total as f64)
    }

    /// Sum of looked-up (or interpolated) per-layer latencies, in microseconds.
    pub fn latency(
        &self,
        config: &ArchitectureConfig,
        space: &ArchitectureSpace,
        table: &LatencyTable,
    ) -> Result<f64> {
        space.validate_config(config)?;
        let mut total = 0.0;
        for layer in active_layers(config, space) {
            let c_out = config.out_channels[layer];
            let c_in = self.in_channels(layer, config);
            let s_in = self.spatial_in(layer, config.spatial);
            total += table.query(layer, c_in, c_out, s_in)?;
        }
        Ok(total)
    }

    pub fn cost(
        &self,
        config: &ArchitectureConfig,
        space: &ArchitectureSpace,
        constraint: &ConstraintSpec,
        table: Option<&LatencyTable>,
    ) -> Result<f64> {
        match constraint.metric {
            CostMetric::Flops => self.flops(config, space),
            CostMetric::Latency => {
                let table = table.ok_or_else(|| {
                    Error::LatencyTable("latency constraint requires a lookup table".into())
                })?;
                self.latency(config, space, table)
            }
        }
    }
}

pub type LatencyKey = (usize, usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub layer_id: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial_in: usize,
    pub latency_us: f64,
}

impl LatencyRow {
    pub fn key(&self) -> LatencyKey {
        (self.layer_id, self.in_channels, self.out_channels, self.spatial_in)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub rows: Vec<LatencyRow>,
    pub hardware: String,
    pub batch_size: usize,
}

fn fmt_key(key: &LatencyKey) -> String {
    format!(
        "(layer_id={}, in_channels={}, out_channels={}, spatial_in={})",
        key.0, key.1, key.2, key.3
    )
}

impl LatencyTable {
    pub fn new(rows: Vec<LatencyRow>, hardware: &str, batch_size: usize) -> Result<Self> {
        let table = LatencyTable {
            rows,
            hardware: hardware.to_string(),
            batch_size,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for row in &self.rows {
            if !(row.latency_us > 0.0) {
                return Err(Error::LatencyTable(format!(
                    "non-positive latency {} at {}",
                    row.latency_us,
                    fmt_key(&row.key())
                )));
            }
            if seen.insert(row.key(), row.latency_us).is_some() {
                return Err(Error::DuplicateKey(fmt_key(&row.key())));
            }
        }
        Ok(())
    }

    fn layer_map(&self, layer_id: usize) -> BTreeMap<LatencyKey, f64> {
        self.rows
            .iter()
            .filter(|r| r.layer_id == layer_id)
            .map(|r| (r.key(), r.latency_us))
            .collect()
    }

    fn layer_axes(&self, layer_id: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut ic = Vec::new();
        let mut oc = Vec::new();
        let mut si = Vec::new();
        for r in self.rows.iter().filter(|r| r.layer_id == layer_id) {
            ic.push(r.in_channels);
            oc.push(r.out_channels);
            si.push(r.spatial_in);
        }
        for axis in [&mut ic, &mut oc, &mut si] {
            axis.sort_unstable();
            axis.dedup();
        }
        (ic, oc, si)
    }

    /// Exact lookup or multilinear interpolation within the layer's measured
    /// ranges. A query outside the range of any axis is refused.
    pub fn query(&self, layer_id: usize, ic: usize, oc: usize, si: usize) -> Result<f64> {
        let map = self.layer_map(layer_id);
        if map.is_empty() {
            return Err(Error::LatencyTable(format!("no rows for layer {layer_id}")));
        }
        if let Some(&lat) = map.get(&(layer_id, ic, oc, si)) {
            return Ok(lat);
        }
        let (axis_ic, axis_oc, axis_si) = self.layer_axes(layer_id);
        let b_ic = bracket(&axis_ic, ic, layer_id, "in_channels")?;
        let b_oc = bracket(&axis_oc, oc, layer_id, "out_channels")?;
        let b_si = bracket(&axis_si, si, layer_id, "spatial_in")?;
        let mut value = 0.0;
        for (ic_v, ic_w) in b_ic.corners() {
            for (oc_v, oc_w) in b_oc.corners() {
                for (si_v, si_w) in b_si.corners() {
                    let w = ic_w * oc_w * si_w;
                    if w == 0.0 {
                        continue;
                    }
                    let corner = map.get(&(layer_id, ic_v, oc_v, si_v)).ok_or_else(|| {
                        Error::LatencyTable(format!(
                            "coverage gap at {}",
                            fmt_key(&(layer_id, ic_v, oc_v, si_v))
                        ))
                    })?;
                    value += w * corner;
                }
            }
        }
        Ok(value)
    }

    /// Missing cells of the per-layer dense grids spanned by observed axis values.
    pub fn coverage_gaps(&self) -> Vec<LatencyKey> {
        let mut layer_ids: Vec<usize> = self.rows.iter().map(|r| r.layer_id).collect();
        layer_ids.sort_unstable();
        layer_ids.dedup();
        let mut gaps = Vec::new();
        for layer_id in layer_ids {
            let map = self.layer_map(layer_id);
            let (ic, oc, si) = self.layer_axes(layer_id);
            for &a in &ic {
                for &b in &oc {
                    for &c in &si {
                        if !map.contains_key(&(layer_id, a, b, c)) {
                            gaps.push((layer_id, a, b, c));
                        }
                    }
                }
            }
        }
        gaps
    }

    /// Complete the per-layer dense grid by repeated linear interpolation (or
    /// end-point extrapolation) along grid lines. Existing rows are unchanged.
    pub fn fill_missing(&self) -> Result<LatencyTable> {
        self.validate()?;
        let mut layer_ids: Vec<usize> = self.rows.iter().map(|r| r.layer_id).collect();
        layer_ids.sort_unstable();
        layer_ids.dedup();

        let mut rows = Vec::new();
        for layer_id in layer_ids {
            let mut map = self.layer_map(layer_id);
            let (ic, oc, si) = self.layer_axes(layer_id);
            let mut missing: Vec<LatencyKey> = Vec::new();
            for &a in &ic {
                for &b in &oc {
                    for &c in &si {
                        let key = (layer_id, a, b, c);
                        if !map.contains_key(&key) {
                            missing.push(key);
                        }
                    }
                }
            }
            loop {
                let before = missing.len();
                if before == 0 {
                    break;
                }
                missing.retain(|&key| {
                    for axis_idx in 0..3 {
                        let axis = match axis_idx {
                            0 => &ic,
                            1 => &oc,
                            _ => &si,
                        };
                        let coord = match axis_idx {
                            0 => key.1,
                            1 => key.2,
                            _ => key.3,
                        };
                        let line: Vec<(usize, f64)> = axis
                            .iter()
                            .filter_map(|&x| {
                                let k = match axis_idx {
                                    0 => (key.0, x, key.2, key.3),
                                    1 => (key.0, key.1, x, key.3),
                                    _ => (key.0, key.1, key.2, x),
                                };
                                map.get(&k).map(|&v| (x, v))
                            })
                            .collect();
                        if line.len() >= 2 {
                            map.insert(key, line_value(&line, coord));
                            return false;
                        }
                    }
                    true
                });
                if missing.len() == before {
                    // No grid line with two known points reaches the leftover
                    // cells; fall back to a least-squares affine fit over the
                    // layer's known cells (still exact for affine tables).
                    let known: Vec<(f64, f64, f64, f64)> = map
                        .iter()
                        .map(|(k, &v)| (k.1 as f64, k.2 as f64, k.3 as f64, v))
                        .collect();
                    let fit = affine_fit(&known).ok_or_else(|| {
                        Error::LatencyTable(format!(
                            "layer {layer_id}: {before} cells cannot be filled (not enough data for an affine fit)"
                        ))
                    })?;
                    for &key in &missing {
                        let (a, b, c, d) = fit;
                        let v = a + b * key.1 as f64 + c * key.2 as f64 + d * key.3 as f64;
                        map.insert(key, v);
                    }
                    missing.clear();
                }
            }
            for (key, lat) in map {
                rows.push(LatencyRow {
                    layer_id: key.0,
                    in_channels: key.1,
                    out_channels: key.2,
                    spatial_in: key.3,
                    latency_us: lat,
                });
            }
        }
        rows.sort_by_key(|r| r.key());
        Ok(LatencyTable {
            rows,
            hardware: self.hardware.clone(),
            batch_size: self.batch_size,
        })
    }

    /// Parse the CSV interchange format. Header must be
    /// `layer_id,in_channels,out_channels,spatial_in,latency_us`; optional
    /// leading `# hardware:` / `# batch_size:` comment lines carry metadata.
    pub fn from_csv<R: Read>(reader: R) -> Result<LatencyTable> {
        let reader = BufReader::new(reader);
        let mut rows = Vec::new();
        let mut hardware = String::new();
        let mut batch_size = 1usize;
        let mut header_seen = false;
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("hardware:") {
                    hardware = v.trim().to_string();
                } else if let Some(v) = comment.trim().strip_prefix("batch_size:") {
                    batch_size = v.trim().parse().map_err(|_| Error::Csv {
                        line: line_no,
                        msg: format!("bad batch_size {v:?}"),
                    })?;
                }
                continue;
            }
            if !header_seen {
                if trimmed != "layer_id,in_channels,out_channels,spatial_in,latency_us" {
                    return Err(Error::Csv {
                        line: line_no,
                        msg: format!("unexpected header {trimmed:?}"),
                    });
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Csv {
                    line: line_no,
                    msg: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let parse_usize = |s: &str, name: &str| -> Result<usize> {
                s.trim().parse().map_err(|_| Error::Csv {
                    line: line_no,
                    msg: format!("bad {name} {s:?}"),
                })
            };
            let latency_us: f64 = fields[4].trim().parse().map_err(|_| Error::Csv {
                line: line_no,
                msg: format!("bad latency_us {:?}", fields[4]),
            })?;
            rows.push(LatencyRow {
                layer_id: parse_usize(fields[0], "layer_id")?,
                in_channels: parse_usize(fields[1], "in_channels")?,
                out_channels: parse_usize(fields[2], "out_channels")?,
                spatial_in: parse_usize(fields[3], "spatial_in")?,
                latency_us,
            });
        }
        if !header_seen {
            return Err(Error::Csv {
                line: 1,
                msg: "missing header".into(),
            });
        }
        let table = LatencyTable {
            rows,
            hardware,
            batch_size,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<LatencyTable> {
        LatencyTable::from_csv(std::fs::File::open(path)?)
    }

    pub fn to_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        if !self.hardware.is_empty() {
            writeln!(writer, "# hardware: {}", self.hardware)?;
        }
        writeln!(writer, "# batch_size: {}", self.batch_size)?;
        writeln!(writer, "layer_id,in_channels,out_channels,spatial_in,latency_us")?;
        for r in &self.rows {
            writeln!(
                writer,
                "{},{},{},{},{}",
                r.layer_id, r.in_channels, r.out_channels, r.spatial_in, r.latency_us
            )?;
        }
        Ok(())
    }
}

struct Bracket {
    lo: usize,
    hi: usize,
    t: f64,
}

impl Bracket {
    fn corners(&self) -> Vec<(usize, f64)> {
        if self.lo == self.hi {
            vec![(self.lo, 1.0)]
        } else {
            vec![(self.lo, 1.0 - self.t), (self.hi, self.t)]
        }
    }
}

fn bracket(axis: &[usize], q: usize, layer_id: usize, name: &str) -> Result<Bracket> {
    let (&min, &max) = (axis.first().unwrap(), axis.last().unwrap());
    if q < min || q > max {
        return Err(Error::Extrapolation(format!(
            "layer {layer_id}: {name}={q} outside measured range [{min}, {max}]"
        )));
    }
    match axis.binary_search(&q) {
        Ok(i) => Ok(Bracket {
            lo: axis[i],
            hi: axis[i],
            t: 0.0,
        }),
        Err(i) => {
            let (lo, hi) = (axis[i - 1], axis[i]);
            Ok(Bracket {
                lo,
                hi,
                t: (q - lo) as f64 / (hi - lo) as f64,
            })
        }
    }
}

/// Linear value at `x` from known points on a grid line; interpolates between
/// the bracketing pair, or extrapolates from the nearest two end points.
fn line_value(points: &[(usize, f64)], x: usize) -> f64 {
    debug_assert!(points.len() >= 2);
    let mut pts = points.to_vec();
    pts.sort_by_key(|p| p.0);
    let (p0, p1) = if x < pts[0].0 {
        (pts[0], pts[1])
    } else if x > pts[pts.len() - 1].0 {
        (pts[pts.len() - 2], pts[pts.len() - 1])
    } else {
        let i = pts.partition_point(|p| p.0 < x);
        (pts[i - 1], pts[i])
    };
    let t = (x as f64 - p0.0 as f64) / (p1.0 as f64 - p0.0 as f64);
    p0.1 + t * (p1.1 - p0.1)
}

/// Least-squares fit of `v = a + b ic + c oc + d si` over known cells.
/// Axes without variation are dropped from the model (their coefficient is 0).
/// Returns None when even the reduced normal equations are singular.
fn affine_fit(points: &[(f64, f64, f64, f64)]) -> Option<(f64, f64, f64, f64)> {
    if points.is_empty() {
        return None;
    }
    let varies = |get: fn(&(f64, f64, f64, f64)) -> f64| {
        points.iter().any(|p| get(p) != get(&points[0]))
    };
    let axes: Vec<usize> = [
        varies(|p| p.0) as usize,
        varies(|p| p.1) as usize,
        varies(|p| p.2) as usize,
    ]
    .iter()
    .enumerate()
    .filter_map(|(i, &v)| (v == 1).then_some(i))
    .collect();
    let n = 1 + axes.len();
    // normal equations A w = rhs over [1, selected axes]
    let mut a = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for p in points {
        let coords = [p.0, p.1, p.2];
        let mut row = vec![1.0];
        row.extend(axes.iter().map(|&i| coords[i]));
        for i in 0..n {
            rhs[i] += row[i] * p.3;
            for j in 0..n {
                a[i][j] += row[i] * row[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-9 {
            return None;
        }
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut w = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = rhs[i];
        for j in i + 1..n {
            acc -= a[i][j] * w[j];
        }
        w[i] = acc / a[i][i];
    }
    let mut coeffs = [0.0; 3];
    for (slot, &axis) in axes.iter().enumerate() {
        coeffs[axis] = w[slot + 1];
    }
    Some((w[0], coeffs[0], coeffs[1], coeffs[2]))
}
