//! Receptive-field arithmetic: a coarse per-layer rule, the exact kernel/stride
//! recurrence, and an empirical connectivity probe used as an oracle for the latter.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{forward_connectivity, GraphBuilder, GraphSpec, LayerNode, NodeKind};
use crate::tensor::{Shape, Tensor};

/// Receptive-field geometry of a node's output units along one axis.
///
/// Unit `i` sees input pixels `first + i·jump ..= first + i·jump + rf - 1` before
/// clipping to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfState {
    pub rf: usize,
    pub jump: usize,
    pub first: i64,
}

impl RfState {
    pub const INPUT: RfState = RfState { rf: 1, jump: 1, first: 0 };

    /// Window of output unit `unit`, clipped to `0..size`, as an inclusive range.
    pub fn clipped_window(&self, unit: usize, size: usize) -> (usize, usize) {
        let lo = self.first + (unit * self.jump) as i64;
        let hi = lo + self.rf as i64 - 1;
        (lo.max(0) as usize, hi.min(size as i64 - 1) as usize)
    }

    pub fn clipped_rf(&self, unit: usize, size: usize) -> usize {
        let (lo, hi) = self.clipped_window(unit, size);
        hi + 1 - lo
    }
}

/// Per-node receptive field under the coarse rule: each 3×3 conv adds 2, each max-pool
/// doubles, a concat takes the maximum of its inputs and every other node passes the
/// value through.
pub fn rf_coarse_rule(g: &GraphSpec) -> Vec<usize> {
    let mut rf: Vec<usize> = Vec::with_capacity(g.len());
    for (pos, node) in g.nodes().iter().enumerate() {
        let input = |rf: &Vec<usize>| g.input_positions(pos).map(|p| rf[p]).max().unwrap_or(1);
        let value = match node.kind {
            NodeKind::Input => 1,
            NodeKind::Conv3x3 => input(&rf) + 2,
            NodeKind::MaxPool => input(&rf) * 2,
            _ => input(&rf),
        };
        rf.push(value);
    }
    rf
}

/// Per-node geometry under the exact recurrence `rf' = rf + (k-1)·jump`,
/// `jump' = jump·stride`. Space-to-depth folds 2×2 neighbourhoods exactly like a 2×2
/// stride-2 pool. A concat takes the bounding window of its inputs, which must share
/// one jump.
pub fn rf_exact(g: &GraphSpec) -> Result<Vec<RfState>> {
    let mut out: Vec<RfState> = Vec::with_capacity(g.len());
    for (pos, node) in g.nodes().iter().enumerate() {
        let first_input = || g.input_positions(pos).next().map(|p| out[p]).unwrap_or(RfState::INPUT);
        let s = match node.kind {
            NodeKind::Input => RfState::INPUT,
            NodeKind::Conv3x3 => {
                let i = first_input();
                RfState { rf: i.rf + 2 * i.jump, jump: i.jump, first: i.first - i.jump as i64 }
            }
            NodeKind::MaxPool | NodeKind::SpaceToDepth => {
                let i = first_input();
                RfState { rf: i.rf + i.jump, jump: 2 * i.jump, first: i.first }
            }
            NodeKind::Concat => {
                let ins: Vec<RfState> = g.input_positions(pos).map(|p| out[p]).collect();
                let jump = ins[0].jump;
                if let Some(bad) = ins.iter().find(|s| s.jump != jump) {
                    return Err(Error::graph(format!(
                        "node {}: concat of inputs with jumps {jump} and {}",
                        node.id, bad.jump
                    )));
                }
                let lo = ins.iter().map(|s| s.first).min().unwrap_or(0);
                let hi = ins.iter().map(|s| s.first + s.rf as i64).max().unwrap_or(1);
                RfState { rf: (hi - lo) as usize, jump, first: lo }
            }
            NodeKind::Conv1x1 | NodeKind::Bn | NodeKind::Relu | NodeKind::Gap => first_input(),
        };
        out.push(s);
    }
    Ok(out)
}

/// Measured receptive field of the centre unit of one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Measured {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

/// The same topology with every conv one channel wide and a one-class head.
fn single_channel_clone(g: &GraphSpec) -> Result<GraphSpec> {
    let nodes: Vec<LayerNode> = g
        .nodes()
        .iter()
        .map(|n| LayerNode {
            width: match n.kind {
                NodeKind::Conv3x3 | NodeKind::Conv1x1 => Some(1),
                _ => n.width,
            },
            ..n.clone()
        })
        .collect();
    GraphSpec::new(g.name(), 1, nodes)
}

/// Probes images of `resolution × resolution`, one lit pixel per probe, through the
/// graph in connectivity mode and records which pixels reach the centre unit
/// `(h/2, w/2)` of every node except the global pool. Returns the row and column
/// extent of that set per node, in graph order.
pub fn rf_empirical(g: &GraphSpec, resolution: usize) -> Result<Vec<Measured>> {
    let probe = single_channel_clone(g)?;
    let shapes = probe.propagate(1, resolution, resolution).map_err(|e| {
        Error::invalid(format!("resolution {resolution} too small for this graph: {e}"))
    })?;
    let nodes: Vec<usize> = (0..probe.len()).filter(|&p| probe.nodes()[p].kind != NodeKind::Gap).collect();
    // (min row, max row, min col, max col) per probed node
    let mut extent = vec![(usize::MAX, 0usize, usize::MAX, 0usize); nodes.len()];
    let pixels = resolution * resolution;
    const CHUNK: usize = 256;
    for start in (0..pixels).step_by(CHUNK) {
        let count = CHUNK.min(pixels - start);
        let mut x = Tensor::zeros(Shape::new(count, crate::graph::INPUT_CHANNELS, resolution, resolution))?;
        for k in 0..count {
            let p = start + k;
            x.set(k, 0, p / resolution, p % resolution, 1.0);
        }
        let outs = forward_connectivity(&probe, &x)?;
        for (slot, &pos) in nodes.iter().enumerate() {
            let s = shapes[pos];
            let (cy, cx) = (s.h / 2, s.w / 2);
            let y = &outs[pos];
            for k in 0..count {
                let hit = (0..s.c).any(|c| y.get(k, c, cy, cx) != 0.0);
                if hit {
                    let p = start + k;
                    let (r, c) = (p / resolution, p % resolution);
                    let e = &mut extent[slot];
                    *e = (e.0.min(r), e.1.max(r), e.2.min(c), e.3.max(c));
                }
            }
        }
    }
    Ok(nodes
        .iter()
        .zip(extent)
        .map(|(&pos, (r0, r1, c0, c1))| Measured {
            id: probe.nodes()[pos].id,
            rows: if r0 == usize::MAX { 0 } else { r1 + 1 - r0 },
            cols: if c0 == usize::MAX { 0 } else { c1 + 1 - c0 },
        })
        .collect())
}

/// Exact receptive field of each node's centre unit at `resolution`, clipped to the
/// image, keyed like [`rf_empirical`].
pub fn rf_exact_clipped(g: &GraphSpec, resolution: usize) -> Result<Vec<Measured>> {
    let exact = rf_exact(g)?;
    let shapes = g.propagate(1, resolution, resolution)?;
    Ok((0..g.len())
        .filter(|&p| g.nodes()[p].kind != NodeKind::Gap)
        .map(|p| Measured {
            id: g.nodes()[p].id,
            rows: exact[p].clipped_rf(shapes[p].h / 2, resolution),
            cols: exact[p].clipped_rf(shapes[p].w / 2, resolution),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RfRow {
    pub id: usize,
    pub kind: NodeKind,
    pub coarse_rf: usize,
    pub exact: RfState,
    pub measured: Option<usize>,
    /// `coarse_rf != exact.rf`
    pub mismatch: bool,
    /// `coarse_rf` at least the image side.
    pub covers_image: bool,
    /// `coarse_rf` at least twice the image side.
    pub exceeds_double: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RfReport {
    pub image_size: usize,
    pub rows: Vec<RfRow>,
}

impl RfReport {
    pub fn final_row(&self) -> &RfRow {
        &self.rows[self.rows.len() - 1]
    }

    /// `node_id,kind,paper_rf,exact_rf,jump`, plus a trailing `measured` column when probed.
    pub fn to_csv(&self) -> String {
        let probed = self.rows.iter().any(|r| r.measured.is_some());
        let mut out = String::from("node_id,kind,paper_rf,exact_rf,jump");
        out.push_str(if probed { ",measured\n" } else { "\n" });
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{}", r.id, r.kind, r.coarse_rf, r.exact.rf, r.exact.jump);
            if probed {
                let _ = write!(out, ",{}", r.measured.map_or(String::new(), |m| m.to_string()));
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text table; the measured column appears only when probed.
    pub fn to_table(&self) -> String {
        let probed = self.rows.iter().any(|r| r.measured.is_some());
        let mut out = format!("{:>4}  {:<14} {:>8} {:>8} {:>5}", "id", "kind", "coarse", "exact", "jump");
        if probed {
            let _ = write!(out, " {:>8}", "measured");
        }
        out.push_str("  flags\n");
        for r in &self.rows {
            let _ = write!(out, "{:>4}  {:<14} {:>8} {:>8} {:>5}", r.id, r.kind.name(), r.coarse_rf, r.exact.rf, r.exact.jump);
            if probed {
                let m = r.measured.map_or("-".to_string(), |m| m.to_string());
                let _ = write!(out, " {m:>8}");
            }
            let mut flags = Vec::new();
            if r.mismatch {
                flags.push("mismatch".to_string());
            }
            if r.exceeds_double {
                flags.push(format!(">=2x{}", self.image_size));
            } else if r.covers_image {
                flags.push(format!(">={}", self.image_size));
            }
            let _ = writeln!(out, "  {}", flags.join(" "));
        }
        out
    }
}

/// Tabulates both rules for every node. `image_size` sets the coverage flags.
pub fn rf_report(g: &GraphSpec, image_size: usize) -> Result<RfReport> {
    let coarse = rf_coarse_rule(g);
    let exact = rf_exact(g)?;
    let rows = g
        .nodes()
        .iter()
        .enumerate()
        .map(|(p, n)| RfRow {
            id: n.id,
            kind: n.kind,
            coarse_rf: coarse[p],
            exact: exact[p],
            measured: None,
            mismatch: coarse[p] != exact[p].rf,
            covers_image: coarse[p] >= image_size,
            exceeds_double: coarse[p] >= 2 * image_size,
        })
        .collect();
    Ok(RfReport { image_size, rows })
}

/// [`rf_report`] plus the probe's clipped measurement at `image_size` resolution.
pub fn rf_report_with_probe(g: &GraphSpec, image_size: usize) -> Result<RfReport> {
    let mut report = rf_report(g, image_size)?;
    for m in rf_empirical(g, image_size)? {
        if let Some(row) = report.rows.iter_mut().find(|r| r.id == m.id) {
            row.measured = Some(m.rows.max(m.cols));
        }
    }
    Ok(report)
}

/// Node ids in the conventional layer numbering of the two networks:
/// 3×3 convs, max-pools and concats are numbered in order, except that a concat
/// feeding a max-pool through only BN/ReLU shares the pool's number. Entry `k` is the
/// layer numbered `k` when numbering starts at 0.
pub fn figure_layer_ids(g: &GraphSpec) -> Vec<usize> {
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); g.len()];
    for p in 0..g.len() {
        for i in g.input_positions(p) {
            consumers[i].push(p);
        }
    }
    let feeds_pool = |mut p: usize| loop {
        match consumers[p].as_slice() {
            [c] => match g.nodes()[*c].kind {
                NodeKind::MaxPool => return true,
                NodeKind::Bn | NodeKind::Relu => p = *c,
                _ => return false,
            },
            _ => return false,
        }
    };
    let mut ids = Vec::new();
    for (p, n) in g.nodes().iter().enumerate() {
        let counted = match n.kind {
            NodeKind::Conv3x3 | NodeKind::MaxPool => true,
            NodeKind::Concat => !feeds_pool(p),
            _ => false,
        };
        if counted {
            ids.push(n.id);
        }
    }
    ids
}

/// A random small topology for probing: convs, BN/ReLU, up to `max_pools` pools and
/// concat skips (same-scale, or one scale up through space-to-depth). Valid at any
/// resolution divisible by `2^max_pools` and at least `2^(max_pools + 1)`.
pub fn random_probe_graph(rng: &mut impl Rng, max_pools: usize) -> Result<GraphSpec> {
    let (mut b, input) = GraphBuilder::new();
    // (node id, number of pools above it)
    let mut seen: Vec<(usize, usize)> = vec![(input, 0)];
    let (mut x, mut level) = (input, 0usize);
    let steps = rng.random_range(3..12);
    for _ in 0..steps {
        x = match rng.random_range(0..6) {
            0 | 1 => b.conv3x3(x, rng.random_range(1..4)),
            2 => {
                if rng.random_bool(0.5) {
                    b.bn(x)
                } else {
                    b.relu(x)
                }
            }
            3 if level < max_pools => {
                level += 1;
                b.maxpool(x)
            }
            4 => {
                let same: Vec<usize> = seen.iter().filter(|s| s.1 == level && s.0 != x).map(|s| s.0).collect();
                if same.is_empty() {
                    b.conv3x3(x, 1)
                } else {
                    let other = same[rng.random_range(0..same.len())];
                    b.concat(vec![other, x])
                }
            }
            _ => {
                let above: Vec<usize> = seen.iter().filter(|s| level > 0 && s.1 == level - 1).map(|s| s.0).collect();
                if above.is_empty() {
                    b.conv3x3(x, 2)
                } else {
                    let other = above[rng.random_range(0..above.len())];
                    let folded = b.space_to_depth(other);
                    seen.push((folded, level));
                    b.concat(vec![folded, x])
                }
            }
        };
        seen.push((x, level));
    }
    b.finish(x, "probe", 2)
}
