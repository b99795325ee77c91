use super::{GraphSpec, LayerParams, NodeKind, Params, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::{
    avgpool2x2, batchnorm, batchnorm_backward, concat_channels, conv2d, conv2d_backward, depth_to_space,
    global_avg_pool, global_avg_pool_backward, maxpool2x2, maxpool2x2_backward, relu, relu_backward,
    softmax_cross_entropy, space_to_depth, split_channels, BnCache, BnMode, GradCheck, GradCheckReport, Padding, Shape,
    Tensor,
};
use super::{init_params, InitScheme};
use crate::rng::chacha;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Running averages.
    Infer,
}

#[derive(Debug)]
enum Aux {
    None,
    Pool(Vec<u32>),
    Bn(BnCache),
}

/// Every node's output from one forward pass plus what backward needs.
#[derive(Debug)]
pub struct Cache {
    outputs: Vec<Tensor>,
    aux: Vec<Aux>,
}

impl Cache {
    /// Output of the node at position `pos`.
    pub fn output(&self, pos: usize) -> &Tensor {
        &self.outputs[pos]
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    /// Hash of every ReLU input sign and max-pool winner. Two passes with equal
    /// signatures took the same piecewise-linear branch.
    pub fn kink_signature(&self, g: &GraphSpec) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |v: u64| h = (h ^ v).wrapping_mul(0x100_0000_01b3);
        for (pos, node) in g.nodes().iter().enumerate() {
            match (&self.aux[pos], node.kind) {
                (Aux::Pool(argmax), _) => argmax.iter().for_each(|&i| eat(i as u64)),
                (_, NodeKind::Relu) => {
                    let x = &self.outputs[g.input_positions(pos).next().unwrap_or(0)];
                    x.data().iter().for_each(|&v| eat((v > 0.0) as u64));
                }
                _ => {}
            }
        }
        h
    }
}

fn missing(id: usize, what: &str) -> Error {
    Error::graph(format!("node {id}: missing {what} parameters"))
}

fn check_input(g: &GraphSpec, x: &Tensor) -> Result<()> {
    if x.shape().c != INPUT_CHANNELS {
        return Err(Error::shape(format!(
            "graph `{}` expects {INPUT_CHANNELS}-channel input, got {}",
            g.name(),
            x.shape()
        )));
    }
    Ok(())
}

/// Runs the graph; returns logits shaped `(n, classes, 1, 1)` and the cache.
pub fn forward(g: &GraphSpec, params: &mut Params, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
    check_input(g, x)?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(g.len());
    let mut aux = Vec::with_capacity(g.len());
    for (pos, node) in g.nodes().iter().enumerate() {
        let ins: Vec<usize> = g.input_positions(pos).collect();
        let (y, a) = match node.kind {
            NodeKind::Input => (x.clone(), Aux::None),
            NodeKind::Conv3x3 | NodeKind::Conv1x1 => {
                let Some(LayerParams::Conv { weight, bias }) = params.get(node.id) else {
                    return Err(missing(node.id, "conv"));
                };
                (conv2d(&outputs[ins[0]], &weight.value, &bias.value, Padding::Same)?, Aux::None)
            }
            NodeKind::Bn => {
                let Some(LayerParams::Bn { gamma, beta, state }) = params.get_mut(node.id) else {
                    return Err(missing(node.id, "batch-norm"));
                };
                let bn_mode = match mode {
                    Mode::Train => BnMode::Train,
                    Mode::Infer => BnMode::Infer,
                };
                let (y, cache) = batchnorm(&outputs[ins[0]], &gamma.value, &beta.value, state, bn_mode)?;
                (y, Aux::Bn(cache))
            }
            NodeKind::Relu => (relu(&outputs[ins[0]]), Aux::None),
            NodeKind::MaxPool => {
                let (y, argmax) = maxpool2x2(&outputs[ins[0]])?;
                (y, Aux::Pool(argmax))
            }
            NodeKind::SpaceToDepth => (space_to_depth(&outputs[ins[0]], 2)?, Aux::None),
            NodeKind::Concat => {
                let parts: Vec<&Tensor> = ins.iter().map(|&p| &outputs[p]).collect();
                (concat_channels(&parts)?, Aux::None)
            }
            NodeKind::Gap => (global_avg_pool(&outputs[ins[0]]), Aux::None),
        };
        outputs.push(y);
        aux.push(a);
    }
    let logits = outputs[outputs.len() - 1].clone();
    Ok((logits, Cache { outputs, aux }))
}

/// Back-propagates `dlogits`, adding parameter gradients into `params` and returning
/// the gradient with respect to the input image batch.
///
/// A node read by several consumers receives their contributions summed in ascending
/// consumer id, so results do not depend on how the node list is ordered.
pub fn backward(g: &GraphSpec, params: &mut Params, cache: Cache, dlogits: &Tensor) -> Result<Tensor> {
    let Cache { mut outputs, mut aux } = cache;
    if outputs.len() != g.len() {
        return Err(Error::graph("cache does not belong to this graph"));
    }
    let last = g.len() - 1;
    if dlogits.numel() != outputs[last].numel() {
        return Err(Error::shape(format!(
            "logit gradient {} does not match logits {}",
            dlogits.shape(),
            outputs[last].shape()
        )));
    }
    let mut pending: Vec<Vec<(usize, Tensor)>> = (0..g.len()).map(|_| Vec::new()).collect();
    pending[last].push((usize::MAX, dlogits.clone().reshape(outputs[last].shape())?));
    let mut input_grad = None;
    for pos in (0..g.len()).rev() {
        let node = &g.nodes()[pos];
        let mut parts = std::mem::take(&mut pending[pos]);
        if parts.is_empty() {
            return Err(Error::graph(format!("node {} does not reach the output", node.id)));
        }
        parts.sort_by_key(|(id, _)| *id);
        let mut iter = parts.into_iter().map(|(_, t)| t);
        let mut dy = iter.next().expect("non-empty");
        for t in iter {
            dy.add_assign(&t)?;
        }
        let ins: Vec<usize> = g.input_positions(pos).collect();
        let grads: Vec<Tensor> = match node.kind {
            NodeKind::Input => {
                input_grad = Some(dy);
                Vec::new()
            }
            NodeKind::Conv3x3 | NodeKind::Conv1x1 => {
                let Some(LayerParams::Conv { weight, bias }) = params.get_mut(node.id) else {
                    return Err(missing(node.id, "conv"));
                };
                let gr = conv2d_backward(&outputs[ins[0]], &weight.value, &dy, Padding::Same)?;
                weight.grad.add_assign(&gr.dw)?;
                bias.grad.add_assign(&gr.db)?;
                vec![gr.dx]
            }
            NodeKind::Bn => {
                let Some(LayerParams::Bn { gamma, beta, .. }) = params.get_mut(node.id) else {
                    return Err(missing(node.id, "batch-norm"));
                };
                let Aux::Bn(bc) = std::mem::replace(&mut aux[pos], Aux::None) else {
                    return Err(Error::graph(format!("node {}: missing batch-norm cache", node.id)));
                };
                let (dx, dg, db) = batchnorm_backward(&bc, &gamma.value, &dy)?;
                gamma.grad.add_assign(&dg)?;
                beta.grad.add_assign(&db)?;
                vec![dx]
            }
            NodeKind::Relu => vec![relu_backward(&outputs[ins[0]], &dy)?],
            NodeKind::MaxPool => {
                let Aux::Pool(argmax) = &aux[pos] else {
                    return Err(Error::graph(format!("node {}: missing max-pool cache", node.id)));
                };
                vec![maxpool2x2_backward(outputs[ins[0]].shape(), argmax, &dy)?]
            }
            NodeKind::SpaceToDepth => vec![depth_to_space(&dy, 2)?],
            NodeKind::Concat => {
                let widths: Vec<usize> = ins.iter().map(|&p| outputs[p].shape().c).collect();
                split_channels(&dy, &widths)?
            }
            NodeKind::Gap => vec![global_avg_pool_backward(outputs[ins[0]].shape(), &dy)?],
        };
        for (&src, grad) in ins.iter().zip(grads) {
            pending[src].push((node.id, grad));
        }
        // All consumers of this node sit later in the order and are done.
        outputs[pos] = Tensor::zeros_unchecked(Shape::new(0, 0, 0, 0));
    }
    input_grad.ok_or_else(|| Error::graph("graph has no input node"))
}

/// Forward pass in connectivity mode: every conv weight is +1 with zero bias,
/// batch-norm and ReLU are identities and max-pool becomes 2×2 average pooling.
/// Any nonzero output then depends on the corresponding nonzero inputs. Returns every
/// node's output.
pub fn forward_connectivity(g: &GraphSpec, x: &Tensor) -> Result<Vec<Tensor>> {
    check_input(g, x)?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(g.len());
    for (pos, node) in g.nodes().iter().enumerate() {
        let ins: Vec<usize> = g.input_positions(pos).collect();
        let y = match node.kind {
            NodeKind::Input => x.clone(),
            NodeKind::Conv3x3 | NodeKind::Conv1x1 => {
                let k = node.kind.kernel().unwrap_or(1);
                let c_in = outputs[ins[0]].shape().c;
                let c_out = g.channels_at(pos);
                let w = Tensor::full(Shape::new(c_out, c_in, k, k), 1.0)?;
                let b = Tensor::zeros(Shape::new(1, c_out, 1, 1))?;
                conv2d(&outputs[ins[0]], &w, &b, Padding::Same)?
            }
            NodeKind::Bn | NodeKind::Relu => outputs[ins[0]].clone(),
            NodeKind::MaxPool => avgpool2x2(&outputs[ins[0]])?,
            NodeKind::SpaceToDepth => space_to_depth(&outputs[ins[0]], 2)?,
            NodeKind::Concat => {
                let parts: Vec<&Tensor> = ins.iter().map(|&p| &outputs[p]).collect();
                concat_channels(&parts)?
            }
            NodeKind::Gap => global_avg_pool(&outputs[ins[0]]),
        };
        outputs.push(y);
    }
    Ok(outputs)
}

/// Central-difference check of every trainable tensor and the input of `g` on one
/// seeded `res`×`res` image, through softmax cross-entropy in train mode.
///
/// Probes that change any ReLU sign or pool winner are skipped, so callers should also
/// look at the checked/skipped counts.
pub fn check_graph_gradients(g: &GraphSpec, res: usize, seed: u64) -> Result<GradCheckReport> {
    let x = Tensor::uniform(Shape::new(1, INPUT_CHANNELS, res, res), 0.0, 1.0, &mut chacha(seed))?;
    let labels = [1 % g.num_classes()];
    let mut params = init_params(g, InitScheme::VarianceScaling, seed ^ 0x5eed);
    let (logits, cache) = forward(g, &mut params.clone(), &x, Mode::Train)?;
    let signature = cache.kink_signature(g);
    let (_, dlogits) = softmax_cross_entropy(&logits, &labels)?;
    params.zero_grad();
    let dx = backward(g, &mut params, cache, &dlogits)?;

    let mut inputs: Vec<Tensor> = params.trainable().map(|p| p.value.clone()).collect();
    let mut analytic: Vec<Tensor> = params.trainable().map(|p| p.grad.clone()).collect();
    inputs.push(x);
    analytic.push(dx);
    let loss = |t: &[Tensor]| {
        let mut p = params.clone();
        for (dst, src) in p.trainable_mut().zip(t) {
            dst.value = src.clone();
        }
        let (logits, cache) = forward(g, &mut p, &t[t.len() - 1], Mode::Train).ok()?;
        if cache.kink_signature(g) != signature {
            return None;
        }
        let (l, _) = softmax_cross_entropy(&logits, &labels).ok()?;
        Some(l as f64)
    };
    // The loss is f32, so differences resolve to about ulp(L) / 2e-2 ~ 1e-5.
    GradCheck::new(1e-2).with_abs_floor(5e-3).run_scalar(&inputs, loss, &analytic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_network1, build_network2, init_params, GraphBuilder, InitScheme, LayerNode, WidthPlan};
    use crate::rng::chacha;
    use crate::tensor::softmax_cross_entropy;

    fn batch(n: usize, res: usize, seed: u64) -> Tensor {
        Tensor::uniform(Shape::new(n, 3, res, res), 0.0, 1.0, &mut chacha(seed)).unwrap()
    }

    fn loss_and_grads(g: &GraphSpec, params: &mut Params, x: &Tensor, labels: &[usize]) -> (f32, Tensor) {
        params.zero_grad();
        let (logits, cache) = forward(g, params, x, Mode::Train).unwrap();
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels).unwrap();
        let dx = backward(g, params, cache, &dlogits).unwrap();
        (loss, dx)
    }

    fn branchy() -> GraphSpec {
        let (mut b, x) = GraphBuilder::new();
        let a = b.conv_bn_relu(x, 4);
        let c = b.conv3x3(a, 3);
        let d = b.conv1x1(a, 2);
        let cat = b.concat(vec![c, d, a]);
        let p = b.maxpool(cat);
        b.finish(p, "branchy", 3).unwrap()
    }

    #[test]
    fn node_order_does_not_matter() {
        let g = branchy();
        // Move the 1x1 branch (id 5) ahead of the 3x3 branch (id 4).
        let mut nodes: Vec<LayerNode> = g.nodes().to_vec();
        let p4 = nodes.iter().position(|n| n.id == 4).unwrap();
        let p5 = nodes.iter().position(|n| n.id == 5).unwrap();
        nodes.swap(p4, p5);
        let h = GraphSpec::new("branchy", 3, nodes).unwrap();
        assert_ne!(g.nodes(), h.nodes());

        let x = batch(2, 8, 1);
        let labels = [0, 2];
        let mut pg = init_params(&g, InitScheme::VarianceScaling, 5);
        let mut ph = pg.clone();
        let (lg, dxg) = loss_and_grads(&g, &mut pg, &x, &labels);
        let (lh, dxh) = loss_and_grads(&h, &mut ph, &x, &labels);
        assert_eq!(lg.to_bits(), lh.to_bits());
        assert_eq!(dxg, dxh);
        assert_eq!(pg, ph);
    }

    fn end_to_end_check(g: &GraphSpec, res: usize) {
        let report = check_graph_gradients(g, res, 7).unwrap();
        // Probes that flip a ReLU sign or a pool winner anywhere are discarded.
        assert!(report.checked * 10 >= report.checked + report.skipped, "{report:?}");
        assert!(report.max_rel_error < 1e-2, "{report:?}");
    }

    #[test]
    fn network1_miniature_gradients() {
        let plan = WidthPlan { blocks: vec![vec![4, 5, 6, 7, 8], vec![4, 5, 6, 7, 8]], stem: None };
        end_to_end_check(&build_network1(&plan, 4).unwrap(), 16);
    }

    #[test]
    fn network2_miniature_gradients() {
        let plan = WidthPlan { blocks: vec![vec![3; 4], vec![4; 4]], stem: Some(2) };
        end_to_end_check(&build_network2(&plan, 4).unwrap(), 8);
    }

    #[test]
    fn untrained_loss_near_uniform() {
        let g = build_network1(&WidthPlan::network1().scaled_down(8), 10).unwrap();
        let mut params = init_params(&g, InitScheme::VarianceScaling, 3);
        let x = batch(8, 16, 4);
        let labels: Vec<usize> = (0..8).collect();
        let (logits, _) = forward(&g, &mut params, &x, Mode::Train).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((loss - 10f32.ln()).abs() < 0.5, "loss {loss}");
    }

    #[test]
    fn infer_mode_leaves_running_stats_alone() {
        let g = branchy();
        let mut params = init_params(&g, InitScheme::VarianceScaling, 1);
        let before = params.clone();
        forward(&g, &mut params, &batch(2, 8, 2), Mode::Infer).unwrap();
        assert_eq!(params, before);
        forward(&g, &mut params, &batch(2, 8, 2), Mode::Train).unwrap();
        assert_ne!(params, before);
    }

    #[test]
    fn connectivity_counts_paths() {
        let (mut b, x) = GraphBuilder::new();
        let c = b.conv3x3(x, 1);
        let g = b.finish(c, "c", 1).unwrap();
        let mut input = Tensor::zeros(Shape::new(1, 3, 5, 5)).unwrap();
        input.set(0, 0, 2, 2, 1.0);
        let outs = forward_connectivity(&g, &input).unwrap();
        let conv = &outs[1];
        let nonzero: Vec<(usize, usize)> = (0..5)
            .flat_map(|r| (0..5).map(move |c| (r, c)))
            .filter(|&(r, c)| conv.get(0, 0, r, c) != 0.0)
            .collect();
        assert_eq!(nonzero.len(), 9);
        assert!(nonzero.iter().all(|&(r, c)| (1..=3).contains(&r) && (1..=3).contains(&c)));
    }
}
