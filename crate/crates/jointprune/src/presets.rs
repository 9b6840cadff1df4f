//! Built-in desk-scale backbones.
//!
//! The default backbone is four 3x3 conv blocks (the first with stride 2, the
//! rest droppable with a tie group forcing equal in/out channels) followed by
//! global average pooling and a dense classifier. Widths are stored at 1.5x a
//! nominal base so the search can also grow layers past the baseline.

use crate::space::{ArchitectureSpace, LayerKind, LayerSpec};

/// Conv backbone with one strided stem, `droppable` droppable conv blocks and
/// a dense classifier. All conv layers share one tie group.
pub fn conv_backbone(
    base_channels: usize,
    droppable: usize,
    num_classes: usize,
    spatial_max: usize,
) -> ArchitectureSpace {
    let width = base_channels + base_channels / 2;
    let min_out = (width as f64 * 0.1).ceil().max(1.0) as usize;
    let mut layers = vec![LayerSpec {
        kind: LayerKind::Conv,
        kernel: 3,
        stride: 2,
        max_in_channels: 1,
        max_out_channels: width,
        min_out_channels: min_out,
        has_relu: true,
        block_id: 0,
    }];
    for b in 0..droppable {
        layers.push(LayerSpec {
            kind: LayerKind::Conv,
            kernel: 3,
            stride: 1,
            max_in_channels: width,
            max_out_channels: width,
            min_out_channels: min_out,
            has_relu: true,
            block_id: b + 1,
        });
    }
    layers.push(LayerSpec {
        kind: LayerKind::Dense,
        kernel: 1,
        stride: 1,
        max_in_channels: width,
        max_out_channels: num_classes,
        min_out_channels: num_classes,
        has_relu: false,
        block_id: droppable + 1,
    });
    let space = ArchitectureSpace {
        tie_groups: vec![(0..=droppable).collect()],
        droppable_blocks: (1..=droppable).collect(),
        min_depth: 1,
        spatial_max,
        spatial_min: ((spatial_max as f64 * 0.25).ceil() as usize).max(2),
        input_channels: 1,
        layers,
    };
    debug_assert!(space.validate().is_ok());
    space
}

/// The default desk-scale space: base 16 (stored width 24), three droppable
/// blocks, four classes, 16x16 input.
pub fn desk_space() -> ArchitectureSpace {
    conv_backbone(16, 3, 4, 16)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_space_is_valid() {
        let s = desk_space();
        s.validate().unwrap();
        assert_eq!(s.layers.len(), 5);
        assert_eq!(s.max_depth(), 3);
        assert_eq!(s.layers[0].max_out_channels, 24);
        assert_eq!(s.dim(), 7);
        assert_eq!(s.spatial_min, 4);
    }
}
