use super::{GraphBuilder, GraphSpec};
use crate::error::{Error, Result};

/// Convolutions per Network 1 block.
pub const NET1_BLOCK_CONVS: usize = 5;
/// Convolutions per Network 2 group between shortcut merges.
pub const NET2_GROUP_CONVS: usize = 4;

/// Per-layer channel widths for a builder.
///
/// Network 1 uses `blocks` only (five increasing widths per block). Network 2 uses
/// `stem` plus `blocks` as its four-conv groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WidthPlan {
    pub blocks: Vec<Vec<usize>>,
    pub stem: Option<usize>,
}

impl WidthPlan {
    /// 17,943,560 parameters at 200 classes; 1008 channels reach the head
    /// (4·96 from the space-to-depth skip plus 624 from block 3).
    pub fn network1() -> Self {
        WidthPlan {
            blocks: vec![
                vec![32, 64, 96, 128, 192],
                vec![64, 72, 80, 88, 96],
                vec![560, 576, 592, 608, 624],
            ],
            stem: None,
        }
    }

    /// ResNet-18 widths with the first 64-wide stage removed: 11,812,680 parameters at
    /// 200 classes.
    pub fn network2() -> Self {
        WidthPlan {
            blocks: vec![vec![128; 4], vec![256; 4], vec![512; 4]],
            stem: Some(32),
        }
    }

    /// Every width divided by `divisor`, rounded up. Strictly increasing runs stay
    /// increasing only if the originals are spaced at least `divisor` apart.
    pub fn scaled_down(&self, divisor: usize) -> Self {
        let d = divisor.max(1);
        let shrink = |w: usize| w.div_ceil(d).max(1);
        WidthPlan {
            blocks: self.blocks.iter().map(|b| b.iter().map(|&w| shrink(w)).collect()).collect(),
            stem: self.stem.map(shrink),
        }
    }

    /// Parses `a,b,c/d,e,f` (blocks separated by `/`).
    pub fn parse_blocks(s: &str) -> Result<Vec<Vec<usize>>> {
        s.split('/')
            .map(|block| {
                block
                    .split(',')
                    .map(|w| {
                        w.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::invalid(format!("width `{w}`: {e}")))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn format_blocks(&self) -> String {
        self.blocks
            .iter()
            .map(|b| b.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("/")
    }
}

fn check_widths(blocks: &[Vec<usize>], per_block: usize, what: &str) -> Result<()> {
    if blocks.is_empty() {
        return Err(Error::invalid(format!("{what}: at least one block required")));
    }
    for (i, b) in blocks.iter().enumerate() {
        if b.len() != per_block {
            return Err(Error::invalid(format!(
                "{what} block {} has {} conv widths, expected {per_block}",
                i + 1,
                b.len()
            )));
        }
        if b.contains(&0) {
            return Err(Error::invalid(format!("{what} block {} has a zero width", i + 1)));
        }
    }
    Ok(())
}

/// Network 1: blocks of five `conv3x3 → bn → relu` layers with strictly increasing
/// widths, each closed by a 2×2 max-pool. From the second block on, the previous
/// block's pooled output is folded by `space_to_depth` and concatenated (skip first)
/// with the current block's pooled output; that concatenation feeds the next block or
/// the head.
pub fn build_network1(widths: &WidthPlan, num_classes: usize) -> Result<GraphSpec> {
    check_widths(&widths.blocks, NET1_BLOCK_CONVS, "network1")?;
    for (i, b) in widths.blocks.iter().enumerate() {
        if b.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::invalid(format!(
                "network1 block {} widths {b:?} must be strictly increasing",
                i + 1
            )));
        }
    }
    let (mut g, mut x) = GraphBuilder::new();
    let mut prev_out = None;
    for block in &widths.blocks {
        for &w in block {
            x = g.conv_bn_relu(x, w);
        }
        let out = g.maxpool(x);
        x = match prev_out {
            Some(p) => {
                let folded = g.space_to_depth(p);
                g.concat(vec![folded, out])
            }
            None => out,
        };
        prev_out = Some(out);
    }
    let spec = g.finish(x, "net1", num_classes)?;
    // 2:1 spatial matching at every skip, at each curriculum resolution.
    for res in [16, 32, 64] {
        spec.propagate(1, res, res)?;
    }
    Ok(spec)
}

/// Network 2: a `conv3x3(stem) → bn → relu` stem, then groups of four
/// `conv3x3 → bn → relu` layers whose output is concatenated after the group's input,
/// followed by `bn → relu → maxpool`.
pub fn build_network2(widths: &WidthPlan, num_classes: usize) -> Result<GraphSpec> {
    check_widths(&widths.blocks, NET2_GROUP_CONVS, "network2")?;
    let stem = widths
        .stem
        .ok_or_else(|| Error::invalid("network2 needs a stem width"))?;
    if stem == 0 {
        return Err(Error::invalid("network2 stem width must be >= 1"));
    }
    let (mut g, input) = GraphBuilder::new();
    let mut x = g.conv_bn_relu(input, stem);
    for group in &widths.blocks {
        let shortcut = x;
        for &w in group {
            x = g.conv_bn_relu(x, w);
        }
        let merged = g.concat(vec![shortcut, x]);
        let b = g.bn(merged);
        let r = g.relu(b);
        x = g.maxpool(r);
    }
    let spec = g.finish(x, "net2", num_classes)?;
    for res in [16, 32, 64] {
        spec.propagate(1, res, res)?;
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{param_count, NodeKind};
    use crate::tensor::Shape;

    #[test]
    fn network1_layer_census() {
        let g = build_network1(&WidthPlan::network1(), 200).unwrap();
        assert_eq!(g.count(NodeKind::Conv3x3), 15);
        assert_eq!(g.count(NodeKind::MaxPool), 3);
        assert_eq!(g.count(NodeKind::Concat), 2);
        assert_eq!(g.count(NodeKind::SpaceToDepth), 2);
        assert_eq!(g.count(NodeKind::Bn), 15);
        assert_eq!(g.head_input_channels(), 1008);
        assert_eq!(param_count(&g), 17_943_560);
    }

    #[test]
    fn network2_layer_census() {
        let g = build_network2(&WidthPlan::network2(), 200).unwrap();
        assert_eq!(g.count(NodeKind::Conv3x3), 13);
        assert_eq!(g.count(NodeKind::Concat), 3);
        assert_eq!(g.count(NodeKind::MaxPool), 3);
        assert_eq!(g.count(NodeKind::SpaceToDepth), 0);
        assert_eq!(g.count(NodeKind::Bn), 16);
        assert_eq!(g.head_input_channels(), 32 + 128 + 256 + 512);
        assert_eq!(param_count(&g), 11_812_680);
    }

    #[test]
    fn both_networks_accept_every_curriculum_resolution() {
        let nets = [
            build_network1(&WidthPlan::network1(), 200).unwrap(),
            build_network2(&WidthPlan::network2(), 200).unwrap(),
        ];
        for g in &nets {
            for res in [16, 32, 64] {
                let shapes = g.propagate(2, res, res).unwrap();
                assert_eq!(*shapes.last().unwrap(), Shape::new(2, 200, 1, 1));
            }
        }
    }

    #[test]
    fn network1_skip_spatial_ratio() {
        let g = build_network1(&WidthPlan::network1(), 10).unwrap();
        let shapes = g.propagate(1, 64, 64).unwrap();
        for id in g.ids_of(NodeKind::Concat) {
            let pos = g.position(id).unwrap();
            let ins: Vec<Shape> = g.input_positions(pos).map(|p| shapes[p]).collect();
            assert_eq!(ins[0].h, ins[1].h);
            let folded_src = g.input_positions(g.position(g.node(id).unwrap().inputs[0]).unwrap()).next().unwrap();
            assert_eq!(shapes[folded_src].h, 2 * ins[1].h);
        }
    }

    #[test]
    fn rejects_bad_width_plans() {
        let mut w = WidthPlan::network1();
        w.blocks[1][3] = w.blocks[1][2];
        assert!(build_network1(&w, 10).is_err());
        let mut w = WidthPlan::network1();
        w.blocks[0].pop();
        assert!(build_network1(&w, 10).is_err());
        let mut w = WidthPlan::network2();
        w.blocks[2].push(512);
        assert!(build_network2(&w, 10).is_err());
        let mut w = WidthPlan::network2();
        w.stem = None;
        assert!(build_network2(&w, 10).is_err());
        // three pools of 20x20 leave an odd map for the second space_to_depth
        let g = build_network1(&WidthPlan::network1().scaled_down(8), 10).unwrap();
        assert!(g.propagate(1, 20, 20).is_err());
    }

    #[test]
    fn width_plan_text() {
        let w = WidthPlan::network1();
        assert_eq!(WidthPlan::parse_blocks(&w.format_blocks()).unwrap(), w.blocks);
        assert!(WidthPlan::parse_blocks("1,x").is_err());
        let small = WidthPlan::network2().scaled_down(8);
        assert_eq!(small.stem, Some(4));
        assert_eq!(small.blocks[2], vec![64; 4]);
    }
}
