//! Pruning vector, architecture space, and the bidirectional mapping between
//! normalized vectors and concrete integer architectures.
//!
//! A pruning vector has `L + 2` entries `(c_1..c_L, s, d)`, each normalized by
//! its maximum so every entry lives in `(0, 1]`. The mapping to a concrete
//! architecture is unique: tie-group entries are averaged, each entry is scaled
//! by its maximum, rounded half-away-from-zero, and clamped to its bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    Dense,
}

/// Static description of one layer of the maximal network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Kernel size per side; must be odd for same-padding convs.
    pub kernel: usize,
    pub stride: usize,
    pub max_in_channels: usize,
    pub max_out_channels: usize,
    pub min_out_channels: usize,
    pub has_relu: bool,
    pub block_id: usize,
}

/// Static description of the maximal network and its pruning bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchitectureSpace {
    pub layers: Vec<LayerSpec>,
    /// Disjoint sets of layer indices whose out-channels must be equal.
    pub tie_groups: Vec<Vec<usize>>,
    /// Block ids that may be dropped, in drop order (the first `depth` are kept).
    pub droppable_blocks: Vec<usize>,
    pub min_depth: usize,
    pub spatial_max: usize,
    pub spatial_min: usize,
    /// Channels of the network input (images); not prunable.
    pub input_channels: usize,
}

/// Concrete integer architecture produced by rounding a pruning vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub out_channels: Vec<usize>,
    pub spatial: usize,
    /// Number of droppable blocks kept.
    pub depth: usize,
}

/// Normalized real vector of length `L + 2`, ordered `(c_1..c_L, s, d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningVector {
    pub entries: Vec<f64>,
}

impl PruningVector {
    pub fn new(entries: Vec<f64>) -> Self {
        PruningVector { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_ones(dim: usize) -> Self {
        PruningVector { entries: vec![1.0; dim] }
    }
}

fn round_half_away(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    (x + 0.5).floor()
}

impl ArchitectureSpace {
    pub fn max_depth(&self) -> usize {
        self.droppable_blocks.len()
    }

    /// Vector dimension: one entry per layer plus spatial and depth.
    pub fn dim(&self) -> usize {
        self.layers.len() + 2
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// True when any layer downsamples; spatial sizes are then kept even.
    pub fn has_strided_layers(&self) -> bool {
        self.layers.iter().any(|l| l.stride > 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpace("no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.min_out_channels < 1 || l.min_out_channels > l.max_out_channels {
                return Err(Error::InvalidSpace(format!(
                    "layer {i}: min_out_channels {} must be in [1, {}]",
                    l.min_out_channels, l.max_out_channels
                )));
            }
            if l.stride < 1 || l.kernel < 1 {
                return Err(Error::InvalidSpace(format!("layer {i}: stride and kernel must be >= 1")));
            }
            if matches!(l.kind, LayerKind::Conv | LayerKind::DepthwiseConv) && l.kernel % 2 == 0 {
                return Err(Error::InvalidSpace(format!("layer {i}: conv kernel must be odd")));
            }
        }
        let mut seen = vec![false; self.layers.len()];
        for group in &self.tie_groups {
            for &idx in group {
                if idx >= self.layers.len() {
                    return Err(Error::InvalidSpace(format!("tie group index {idx} out of range")));
                }
                if seen[idx] {
                    return Err(Error::InvalidSpace(format!("layer {idx} appears in two tie groups")));
                }
                seen[idx] = true;
            }
            // A shared channel count needs shared bounds, otherwise the
            // vector-to-config mapping cannot be inverted.
            if let Some(&first) = group.first() {
                let (mx, mn) = (
                    self.layers[first].max_out_channels,
                    self.layers[first].min_out_channels,
                );
                for &idx in group {
                    if self.layers[idx].max_out_channels != mx || self.layers[idx].min_out_channels != mn {
                        return Err(Error::InvalidSpace(format!(
                            "tie group {group:?}: layers must share channel bounds"
                        )));
                    }
                }
            }
        }
        if self.spatial_min < 1 || self.spatial_min > self.spatial_max {
            return Err(Error::InvalidSpace(format!(
                "spatial bounds [{}, {}] invalid",
                self.spatial_min, self.spatial_max
            )));
        }
        if self.min_depth > self.max_depth() {
            return Err(Error::InvalidSpace(format!(
                "min_depth {} exceeds max_depth {}",
                self.min_depth,
                self.max_depth()
            )));
        }
        let block_ids: Vec<usize> = self.layers.iter().map(|l| l.block_id).collect();
        for &b in &self.droppable_blocks {
            if !block_ids.contains(&b) {
                return Err(Error::InvalidSpace(format!("droppable block {b} has no layers")));
            }
        }
        if self.input_channels < 1 {
            return Err(Error::InvalidSpace("input_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn validate_config(&self, config: &ArchitectureConfig) -> Result<()> {
        if config.out_channels.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: config.out_channels.len(),
            });
        }
        for (i, (&c, l)) in config.out_channels.iter().zip(&self.layers).enumerate() {
            if c < l.min_out_channels || c > l.max_out_channels {
                return Err(Error::InvalidArgument(format!(
                    "layer {i}: {c} channels outside [{}, {}]",
                    l.min_out_channels, l.max_out_channels
                )));
            }
        }
        for group in &self.tie_groups {
            if let Some(&first) = group.first() {
                let c = config.out_channels[first];
                if group.iter().any(|&i| config.out_channels[i] != c) {
                    return Err(Error::InvalidArgument(format!(
                        "tie group {group:?} has unequal channel counts"
                    )));
                }
            }
        }
        if config.spatial < self.spatial_min || config.spatial > self.spatial_max {
            return Err(Error::InvalidArgument(format!(
                "spatial {} outside [{}, {}]",
                config.spatial, self.spatial_min, self.spatial_max
            )));
        }
        if self.has_strided_layers() && config.spatial % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial {} must be even in a strided network",
                config.spatial
            )));
        }
        if config.depth < self.min_depth || config.depth > self.max_depth() {
            return Err(Error::InvalidArgument(format!(
                "depth {} outside [{}, {}]",
                config.depth,
                self.min_depth,
                self.max_depth()
            )));
        }
        Ok(())
    }

    /// Per-entry lower bound of the normalized vector (min divided by max).
    pub fn lower_bounds(&self) -> Vec<f64> {
        let mut lb: Vec<f64> = self
            .layers
            .iter()
            .map(|l| l.min_out_channels as f64 / l.max_out_channels as f64)
            .collect();
        lb.push(self.spatial_min as f64 / self.spatial_max as f64);
        let dmax = self.max_depth().max(1) as f64;
        lb.push(self.min_depth as f64 / dmax);
        lb
    }

    fn check_dim(&self, v: &PruningVector) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }
}

/// Normalize a concrete architecture into a pruning vector.
pub fn normalize(config: &ArchitectureConfig, space: &ArchitectureSpace) -> Result<PruningVector> {
    space.validate_config(config)?;
    let mut entries = Vec::with_capacity(space.dim());
    for (&c, l) in config.out_channels.iter().zip(&space.layers) {
        entries.push(c as f64 / l.max_out_channels as f64);
    }
    entries.push(config.spatial as f64 / space.spatial_max as f64);
    entries.push(config.depth as f64 / space.max_depth().max(1) as f64);
    Ok(PruningVector { entries })
}

/// Clip each entry to `[lower bound, 1]` and equalize tied entries to their mean.
pub fn clamp(v: &PruningVector, space: &ArchitectureSpace) -> PruningVector {
    let lb = space.lower_bounds();
    let mut entries: Vec<f64> = v
        .entries
        .iter()
        .zip(&lb)
        .map(|(&e, &b)| e.clamp(b, 1.0))
        .collect();
    for group in &space.tie_groups {
        if group.len() < 2 {
            continue;
        }
        let mean = group.iter().map(|&i| entries[i]).sum::<f64>() / group.len() as f64;
        for &i in group {
            entries[i] = mean;
        }
    }
    PruningVector { entries }
}

/// Map a pruning vector to its unique concrete architecture.
///
/// Tied entries are averaged before rounding so the mapping stays continuous
/// in each tied entry; out-of-range inputs are absorbed by clamping. In a
/// strided network the spatial size is rounded to the nearest even integer.
pub fn round_to_config(v: &PruningVector, space: &ArchitectureSpace) -> Result<ArchitectureConfig> {
    space.check_dim(v)?;
    let num_layers = space.num_layers();
    let mut channel_entries: Vec<f64> = v.entries[..num_layers].to_vec();
    for group in &space.tie_groups {
        if group.len() < 2 {
            continue;
        }
        let mean = group.iter().map(|&i| channel_entries[i]).sum::<f64>() / group.len() as f64;
        for &i in group {
            channel_entries[i] = mean;
        }
    }
    let out_channels: Vec<usize> = channel_entries
        .iter()
        .zip(&space.layers)
        .map(|(&e, l)| {
            let c = round_half_away(e.max(0.0) * l.max_out_channels as f64) as usize;
            c.clamp(l.min_out_channels, l.max_out_channels)
        })
        .collect();

    let spatial_target = v.entries[num_layers].max(0.0) * space.spatial_max as f64;
    let spatial = if space.has_strided_layers() {
        let mut s = 2 * round_half_away(spatial_target / 2.0) as usize;
        s = s.clamp(space.spatial_min, space.spatial_max);
        // An odd clamp bound would break evenness; step inward.
        if s % 2 != 0 {
            if s == space.spatial_min { s + 1 } else { s - 1 }
        } else {
            s
        }
    } else {
        (round_half_away(spatial_target) as usize).clamp(space.spatial_min, space.spatial_max)
    };

    let dmax = space.max_depth();
    let depth_target = v.entries[num_layers + 1].max(0.0) * dmax.max(1) as f64;
    let depth = (round_half_away(depth_target) as usize).clamp(space.min_depth, dmax);

    Ok(ArchitectureConfig {
        out_channels,
        spatial,
        depth,
    })
}

/// Indices of layers present in the pruned network, in network order:
/// all mandatory layers plus the layers of the first `depth` droppable blocks.
pub fn active_layers(config: &ArchitectureConfig, space: &ArchitectureSpace) -> Vec<usize> {
    let kept: Vec<usize> = space.droppable_blocks[..config.depth.min(space.max_depth())].to_vec();
    space
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| !space.droppable_blocks.contains(&l.block_id) || kept.contains(&l.block_id))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn simple_space() -> ArchitectureSpace {
        // Two conv layers, no ties, no stride, one droppable block.
        ArchitectureSpace {
            layers: vec![
                LayerSpec {
                    kind: LayerKind::Conv,
                    kernel: 3,
                    stride: 1,
                    max_in_channels: 1,
                    max_out_channels: 32,
                    min_out_channels: 4,
                    has_relu: true,
                    block_id: 0,
                },
                LayerSpec {
                    kind: LayerKind::Conv,
                    kernel: 3,
                    stride: 1,
                    max_in_channels: 32,
                    max_out_channels: 64,
                    min_out_channels: 8,
                    has_relu: true,
                    block_id: 1,
                },
            ],
            tie_groups: vec![],
            droppable_blocks: vec![1],
            min_depth: 0,
            spatial_max: 16,
            spatial_min: 4,
            input_channels: 1,
        }
    }

    #[test]
    fn normalize_maximal_is_all_ones() {
        let space = simple_space();
        let config = ArchitectureConfig {
            out_channels: vec![32, 64],
            spatial: 16,
            depth: 1,
        };
        let v = normalize(&config, &space).unwrap();
        assert_eq!(v.entries, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalize_exact_ratios() {
        let space = simple_space();
        let config = ArchitectureConfig {
            out_channels: vec![16, 64],
            spatial: 8,
            depth: 1,
        };
        let v = normalize(&config, &space).unwrap();
        assert_eq!(v.entries, vec![0.5, 1.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_rejects_dim_mismatch() {
        let space = simple_space();
        let config = ArchitectureConfig {
            out_channels: vec![32],
            spatial: 16,
            depth: 1,
        };
        assert!(matches!(
            normalize(&config, &space),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn round_all_ones_is_maximal() {
        let space = simple_space();
        let config = round_to_config(&PruningVector::all_ones(4), &space).unwrap();
        assert_eq!(
            config,
            ArchitectureConfig {
                out_channels: vec![32, 64],
                spatial: 16,
                depth: 1,
            }
        );
    }

    #[test]
    fn rounds_half_away_from_zero() {
        // 0.5 * 33 = 16.5 rounds away from zero to 17.
        let mut space = simple_space();
        space.layers[0].max_out_channels = 33;
        let v = PruningVector::new(vec![0.5, 1.0, 1.0, 1.0]);
        let config = round_to_config(&v, &space).unwrap();
        assert_eq!(config.out_channels[0], 17);
    }

    #[test]
    fn tie_groups_average_before_rounding() {
        let mut space = simple_space();
        space.layers[0].max_out_channels = 20;
        space.layers[0].min_out_channels = 2;
        space.layers[1].max_out_channels = 20;
        space.layers[1].min_out_channels = 2;
        space.tie_groups = vec![vec![0, 1]];
        let v = PruningVector::new(vec![0.4, 0.6, 1.0, 1.0]);
        let config = round_to_config(&v, &space).unwrap();
        // Oracle: among tie-respecting configs, nearest in normalized L2.
        let mut best = (f64::INFINITY, 0);
        for c in 2..=20usize {
            let e = c as f64 / 20.0;
            let d = (e - 0.4).powi(2) + (e - 0.6).powi(2);
            if d < best.0 {
                best = (d, c);
            }
        }
        assert_eq!(best.1, 10);
        assert_eq!(config.out_channels, vec![10, 10]);
    }

    #[test]
    fn clamp_clips_and_is_idempotent() {
        let space = simple_space();
        let v = PruningVector::new(vec![1.3, 0.01, 0.9, 0.5]);
        let c = clamp(&v, &space);
        assert_eq!(c.entries[0], 1.0);
        assert_eq!(c.entries[1], 8.0 / 64.0);
        assert_eq!(c.entries[2], 0.9);
        let again = clamp(&c, &space);
        assert_eq!(c, again);
    }

    #[test]
    fn clamp_leaves_in_range_unchanged() {
        let space = simple_space();
        let v = PruningVector::new(vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(clamp(&v, &space), v);
    }

    #[test]
    fn clamp_equalizes_ties() {
        let mut space = simple_space();
        space.layers[1].max_out_channels = 32;
        space.layers[1].min_out_channels = 4;
        space.tie_groups = vec![vec![0, 1]];
        let v = PruningVector::new(vec![0.4, 0.6, 1.0, 1.0]);
        let c = clamp(&v, &space);
        assert_eq!(c.entries[0], c.entries[1]);
        assert!((c.entries[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn active_layers_depth_extremes() {
        let space = simple_space();
        let full = ArchitectureConfig {
            out_channels: vec![32, 64],
            spatial: 16,
            depth: 1,
        };
        assert_eq!(active_layers(&full, &space), vec![0, 1]);
        let shallow = ArchitectureConfig {
            depth: 0,
            ..full.clone()
        };
        assert_eq!(active_layers(&shallow, &space), vec![0]);
    }

    #[test]
    fn active_layers_keeps_first_droppable_blocks() {
        let space = presets::desk_space();
        let mut config = round_to_config(&PruningVector::all_ones(space.dim()), &space).unwrap();
        config.depth = 1;
        // Mandatory conv (block 0) + first droppable block + classifier.
        let layers = active_layers(&config, &space);
        let expected: Vec<usize> = space
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.block_id == 0 || l.block_id == space.droppable_blocks[0] || matches!(l.kind, LayerKind::Dense))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(layers, expected);
    }

    fn exhaustive_space() -> ArchitectureSpace {
        // Small enough to enumerate every config (< 500).
        let mut s = simple_space();
        s.layers[0].max_out_channels = 6;
        s.layers[0].min_out_channels = 2;
        s.layers[0].max_in_channels = 1;
        s.layers[1].max_out_channels = 5;
        s.layers[1].min_out_channels = 1;
        s.layers[1].max_in_channels = 6;
        s.spatial_max = 8;
        s.spatial_min = 4;
        s
    }

    #[test]
    fn round_trip_exhaustive() {
        let space = exhaustive_space();
        let mut count = 0;
        for c0 in 2..=6usize {
            for c1 in 1..=5usize {
                for s in 4..=8usize {
                    for d in 0..=1usize {
                        let config = ArchitectureConfig {
                            out_channels: vec![c0, c1],
                            spatial: s,
                            depth: d,
                        };
                        let v = normalize(&config, &space).unwrap();
                        let back = round_to_config(&v, &space).unwrap();
                        assert_eq!(back, config);
                        count += 1;
                    }
                }
            }
        }
        assert!(count <= 500);
    }

    #[test]
    fn round_trip_strided_even_spatial() {
        let mut space = exhaustive_space();
        space.layers[0].stride = 2;
        for c0 in 2..=6usize {
            for s in [4usize, 6, 8] {
                let config = ArchitectureConfig {
                    out_channels: vec![c0, 5],
                    spatial: s,
                    depth: 1,
                };
                let v = normalize(&config, &space).unwrap();
                assert_eq!(round_to_config(&v, &space).unwrap(), config);
            }
        }
    }

    #[test]
    fn monotone_in_each_entry() {
        let space = exhaustive_space();
        let base = PruningVector::new(vec![0.55, 0.55, 0.55, 0.55]);
        let base_cfg = round_to_config(&base, &space).unwrap();
        for i in 0..4 {
            let mut v = base.clone();
            for step in 0..40 {
                v.entries[i] = 0.55 + step as f64 * 0.01;
                let cfg = round_to_config(&v, &space).unwrap();
                let (a, b) = match i {
                    0 => (cfg.out_channels[0], base_cfg.out_channels[0]),
                    1 => (cfg.out_channels[1], base_cfg.out_channels[1]),
                    2 => (cfg.spatial, base_cfg.spatial),
                    _ => (cfg.depth, base_cfg.depth),
                };
                assert!(a >= b);
            }
        }
    }
}
