//! Layer graphs: representation, text format, builders for the two networks,
//! parameter storage and the forward/backward executor.

mod build;
mod exec;
mod params;

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Shape;

pub use build::{build_network1, build_network2, WidthPlan};
pub use exec::{backward, check_graph_gradients, forward, forward_connectivity, Cache, Mode};
pub use params::{init_params, param_count, InitScheme, LayerParams, Params};

/// Input images carry RGB channels.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Input,
    Conv3x3,
    Conv1x1,
    MaxPool,
    Bn,
    Relu,
    /// Block size 2.
    SpaceToDepth,
    Concat,
    Gap,
}

impl NodeKind {
    pub const ALL: [NodeKind; 9] = [
        NodeKind::Input,
        NodeKind::Conv3x3,
        NodeKind::Conv1x1,
        NodeKind::MaxPool,
        NodeKind::Bn,
        NodeKind::Relu,
        NodeKind::SpaceToDepth,
        NodeKind::Concat,
        NodeKind::Gap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv3x3 => "conv3x3",
            NodeKind::Conv1x1 => "conv1x1",
            NodeKind::MaxPool => "maxpool",
            NodeKind::Bn => "bn",
            NodeKind::Relu => "relu",
            NodeKind::SpaceToDepth => "space_to_depth",
            NodeKind::Concat => "concat",
            NodeKind::Gap => "gap",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, NodeKind::Conv3x3 | NodeKind::Conv1x1)
    }

    pub fn kernel(self) -> Option<usize> {
        match self {
            NodeKind::Conv3x3 => Some(3),
            NodeKind::Conv1x1 => Some(1),
            _ => None,
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NodeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        NodeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown node kind `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNode {
    pub id: usize,
    pub kind: NodeKind,
    pub inputs: Vec<usize>,
    /// Output channels; set for conv and input nodes only.
    pub width: Option<usize>,
}

/// An immutable, validated network topology.
///
/// Nodes are stored in a topological order; ids are arbitrary but unique. The graph has
/// one input node and one output node, and always ends `conv1x1(num_classes) → gap`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphSpec {
    name: String,
    num_classes: usize,
    nodes: Vec<LayerNode>,
    position: HashMap<usize, usize>,
    channels: Vec<usize>,
}

impl GraphSpec {
    pub fn new(name: impl Into<String>, num_classes: usize, nodes: Vec<LayerNode>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::graph(format!("graph name `{name}` must be a non-empty word")));
        }
        if num_classes == 0 {
            return Err(Error::graph("num_classes must be >= 1"));
        }
        let mut position = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if position.insert(node.id, i).is_some() {
                return Err(Error::graph(format!("duplicate node id {}", node.id)));
            }
            for src in &node.inputs {
                match position.get(src) {
                    Some(&p) if p < i => {}
                    _ => {
                        return Err(Error::graph(format!(
                            "node {} reads {src}, which is not an earlier node (cycle or bad order)",
                            node.id
                        )))
                    }
                }
            }
            let arity_ok = match node.kind {
                NodeKind::Input => node.inputs.is_empty(),
                NodeKind::Concat => node.inputs.len() >= 2,
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::graph(format!(
                    "node {} ({}) has {} inputs",
                    node.id,
                    node.kind,
                    node.inputs.len()
                )));
            }
            let wants_width = node.kind.is_conv() || node.kind == NodeKind::Input;
            match (wants_width, node.width) {
                (true, Some(w)) if w >= 1 => {}
                (true, _) => return Err(Error::graph(format!("node {} ({}) needs a width >= 1", node.id, node.kind))),
                (false, Some(_)) => {
                    return Err(Error::graph(format!("node {} ({}) cannot carry a width", node.id, node.kind)))
                }
                (false, None) => {}
            }
        }
        let inputs: Vec<_> = nodes.iter().filter(|n| n.kind == NodeKind::Input).collect();
        if inputs.len() != 1 {
            return Err(Error::graph(format!("expected exactly one input node, found {}", inputs.len())));
        }
        if inputs[0].width != Some(INPUT_CHANNELS) {
            return Err(Error::graph(format!("input node must have width {INPUT_CHANNELS}")));
        }
        let consumed: HashSet<usize> = nodes.iter().flat_map(|n| n.inputs.iter().copied()).collect();
        let sinks: Vec<_> = nodes.iter().filter(|n| !consumed.contains(&n.id)).collect();
        if sinks.len() != 1 {
            return Err(Error::graph(format!("expected exactly one output node, found {}", sinks.len())));
        }
        let out = sinks[0];
        let head_ok = out.kind == NodeKind::Gap
            && nodes[position[&out.inputs[0]]].kind == NodeKind::Conv1x1
            && nodes[position[&out.inputs[0]]].width == Some(num_classes);
        if !head_ok || position[&out.id] != nodes.len() - 1 {
            return Err(Error::graph(format!(
                "graph must end with conv1x1({num_classes}) -> gap as its last node"
            )));
        }

        let mut channels = Vec::with_capacity(nodes.len());
        for node in &nodes {
            let c = match node.kind {
                NodeKind::Input | NodeKind::Conv3x3 | NodeKind::Conv1x1 => node.width.unwrap_or(0),
                NodeKind::SpaceToDepth => 4 * channels[position[&node.inputs[0]]],
                NodeKind::Concat => node.inputs.iter().map(|i| channels[position[i]]).sum(),
                _ => channels[position[&node.inputs[0]]],
            };
            channels.push(c);
        }
        Ok(GraphSpec {
            name,
            num_classes,
            nodes,
            position,
            channels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Position of node `id` in [`GraphSpec::nodes`].
    pub fn position(&self, id: usize) -> Option<usize> {
        self.position.get(&id).copied()
    }

    pub fn node(&self, id: usize) -> Option<&LayerNode> {
        self.position(id).map(|p| &self.nodes[p])
    }

    /// Output channels of the node at position `pos`.
    pub fn channels_at(&self, pos: usize) -> usize {
        self.channels[pos]
    }

    pub fn input_positions(&self, pos: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes[pos].inputs.iter().map(|i| self.position[i])
    }

    pub fn output_id(&self) -> usize {
        self.nodes[self.nodes.len() - 1].id
    }

    /// Channels entering the classification head's 1×1 convolution.
    pub fn head_input_channels(&self) -> usize {
        let conv = self.position[&self.nodes[self.nodes.len() - 1].inputs[0]];
        self.channels[self.input_positions(conv).next().unwrap_or(0)]
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    /// Ids of all nodes of `kind`, in graph order.
    pub fn ids_of(&self, kind: NodeKind) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.kind == kind).map(|n| n.id).collect()
    }

    /// Per-node output shapes for a batch of `n` images of `h×w`.
    pub fn propagate(&self, n: usize, h: usize, w: usize) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (pos, node) in self.nodes.iter().enumerate() {
            let c = self.channels[pos];
            let inp = |k: usize| shapes[self.position[&node.inputs[k]]];
            let s = match node.kind {
                NodeKind::Input => Shape::new(n, c, h, w),
                NodeKind::Conv3x3 | NodeKind::Conv1x1 | NodeKind::Bn | NodeKind::Relu => {
                    let i = inp(0);
                    Shape::new(i.n, c, i.h, i.w)
                }
                NodeKind::MaxPool => {
                    let i = inp(0);
                    if i.h < 2 || i.w < 2 {
                        return Err(Error::shape(format!(
                            "node {}: maxpool on {}x{} at input resolution {h}x{w}",
                            node.id, i.h, i.w
                        )));
                    }
                    Shape::new(i.n, c, i.h / 2, i.w / 2)
                }
                NodeKind::SpaceToDepth => {
                    let i = inp(0);
                    if i.h % 2 != 0 || i.w % 2 != 0 {
                        return Err(Error::shape(format!(
                            "node {}: space_to_depth on odd {}x{} at input resolution {h}x{w}",
                            node.id, i.h, i.w
                        )));
                    }
                    Shape::new(i.n, c, i.h / 2, i.w / 2)
                }
                NodeKind::Concat => {
                    let first = inp(0);
                    for k in 1..node.inputs.len() {
                        let o = inp(k);
                        if (o.h, o.w) != (first.h, first.w) {
                            return Err(Error::shape(format!(
                                "node {}: concat of {}x{} with {}x{} at input resolution {h}x{w}",
                                node.id, first.h, first.w, o.h, o.w
                            )));
                        }
                    }
                    Shape::new(first.n, c, first.h, first.w)
                }
                NodeKind::Gap => Shape::new(n, c, 1, 1),
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// One line per node: `id kind width inputs`, with `-` for absent fields.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name = {}", self.name);
        let _ = writeln!(out, "classes = {}", self.num_classes);
        for n in &self.nodes {
            let width = n.width.map_or("-".to_string(), |w| w.to_string());
            let inputs = if n.inputs.is_empty() {
                "-".to_string()
            } else {
                n.inputs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            let _ = writeln!(out, "{} {} {} {}", n.id, n.kind, width, inputs);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut classes = None;
        let mut nodes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::GraphParse { line: i + 1, msg };
            if let Some((key, value)) = line.split_once('=') {
                let value = value.trim();
                match key.trim() {
                    "name" => name = Some(value.to_string()),
                    "classes" => {
                        classes = Some(value.parse::<usize>().map_err(|e| err(format!("classes: {e}")))?)
                    }
                    other => return Err(err(format!("unknown key `{other}`"))),
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(err(format!("expected `id kind width inputs`, got {} fields", fields.len())));
            }
            let id = fields[0].parse().map_err(|e| err(format!("id: {e}")))?;
            let kind = fields[1].parse().map_err(err)?;
            let width = match fields[2] {
                "-" => None,
                w => Some(w.parse().map_err(|e| err(format!("width: {e}")))?),
            };
            let inputs = match fields[3] {
                "-" => Vec::new(),
                list => list
                    .split(',')
                    .map(|s| s.parse().map_err(|e| err(format!("inputs: {e}"))))
                    .collect::<Result<_>>()?,
            };
            nodes.push(LayerNode { id, kind, inputs, width });
        }
        let name = name.ok_or_else(|| Error::GraphParse { line: 0, msg: "missing `name = ...`".into() })?;
        let classes = classes.ok_or_else(|| Error::GraphParse { line: 0, msg: "missing `classes = ...`".into() })?;
        GraphSpec::new(name, classes, nodes)
    }

    /// FNV-1a over the text form; identifies a topology in checkpoints.
    pub fn hash(&self) -> u64 {
        self.to_text()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
    }
}

/// Incremental construction helper used by the builders and tests.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
}

impl GraphBuilder {
    /// Starts a graph with its input node (id 0).
    pub fn new() -> (Self, usize) {
        let mut b = GraphBuilder::default();
        let id = b.push(NodeKind::Input, vec![], Some(INPUT_CHANNELS));
        (b, id)
    }

    pub fn push(&mut self, kind: NodeKind, inputs: Vec<usize>, width: Option<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(LayerNode { id, kind, inputs, width });
        id
    }

    pub fn conv3x3(&mut self, x: usize, width: usize) -> usize {
        self.push(NodeKind::Conv3x3, vec![x], Some(width))
    }

    pub fn conv1x1(&mut self, x: usize, width: usize) -> usize {
        self.push(NodeKind::Conv1x1, vec![x], Some(width))
    }

    pub fn bn(&mut self, x: usize) -> usize {
        self.push(NodeKind::Bn, vec![x], None)
    }

    pub fn relu(&mut self, x: usize) -> usize {
        self.push(NodeKind::Relu, vec![x], None)
    }

    pub fn maxpool(&mut self, x: usize) -> usize {
        self.push(NodeKind::MaxPool, vec![x], None)
    }

    pub fn space_to_depth(&mut self, x: usize) -> usize {
        self.push(NodeKind::SpaceToDepth, vec![x], None)
    }

    pub fn concat(&mut self, xs: Vec<usize>) -> usize {
        self.push(NodeKind::Concat, xs, None)
    }

    /// `conv3x3 → bn → relu`
    pub fn conv_bn_relu(&mut self, x: usize, width: usize) -> usize {
        let c = self.conv3x3(x, width);
        let b = self.bn(c);
        self.relu(b)
    }

    /// Appends `conv1x1(num_classes) → gap` and validates.
    pub fn finish(mut self, x: usize, name: &str, num_classes: usize) -> Result<GraphSpec> {
        let c = self.conv1x1(x, num_classes);
        self.push(NodeKind::Gap, vec![c], None);
        GraphSpec::new(name, num_classes, self.nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GraphSpec {
        let (mut b, x) = GraphBuilder::new();
        let y = b.conv_bn_relu(x, 8);
        let p = b.maxpool(y);
        b.finish(p, "tiny", 4).unwrap()
    }

    #[test]
    fn text_round_trip_and_hash() {
        let g = tiny();
        let text = g.to_text();
        assert!(text.contains("1 conv3x3 8 0"));
        let back = GraphSpec::parse(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.hash(), g.hash());
        let other = GraphSpec::parse(&text.replace("conv3x3 8", "conv3x3 9")).unwrap();
        assert_ne!(other.hash(), g.hash());
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = GraphSpec::parse("name = x\nclasses = 2\n0 input 3 -\n1 frob - 0\n").unwrap_err();
        assert!(matches!(err, Error::GraphParse { line: 4, .. }), "{err}");
    }

    #[test]
    fn rejects_malformed_graphs() {
        let node = |id, kind, inputs: Vec<usize>, width| LayerNode { id, kind, inputs, width };
        // forward reference
        let nodes = vec![
            node(0, NodeKind::Input, vec![], Some(3)),
            node(1, NodeKind::Conv1x1, vec![2], Some(2)),
            node(2, NodeKind::Gap, vec![1], None),
        ];
        assert!(GraphSpec::new("g", 2, nodes).is_err());
        // single-input concat
        let nodes = vec![
            node(0, NodeKind::Input, vec![], Some(3)),
            node(1, NodeKind::Concat, vec![0], None),
            node(2, NodeKind::Conv1x1, vec![1], Some(2)),
            node(3, NodeKind::Gap, vec![2], None),
        ];
        assert!(GraphSpec::new("g", 2, nodes).is_err());
        // two sinks
        let nodes = vec![
            node(0, NodeKind::Input, vec![], Some(3)),
            node(1, NodeKind::Relu, vec![0], None),
            node(2, NodeKind::Conv1x1, vec![0], Some(2)),
            node(3, NodeKind::Gap, vec![2], None),
        ];
        assert!(GraphSpec::new("g", 2, nodes).is_err());
        // head width differs from class count
        let nodes = vec![
            node(0, NodeKind::Input, vec![], Some(3)),
            node(1, NodeKind::Conv1x1, vec![0], Some(3)),
            node(2, NodeKind::Gap, vec![1], None),
        ];
        assert!(GraphSpec::new("g", 2, nodes).is_err());
    }

    #[test]
    fn shape_propagation() {
        let g = tiny();
        let shapes = g.propagate(2, 16, 16).unwrap();
        assert_eq!(shapes[1], Shape::new(2, 8, 16, 16));
        assert_eq!(shapes[4], Shape::new(2, 8, 8, 8));
        assert_eq!(*shapes.last().unwrap(), Shape::new(2, 4, 1, 1));
        assert!(g.propagate(1, 1, 1).is_err());
    }
}
