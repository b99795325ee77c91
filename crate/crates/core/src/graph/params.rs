use std::collections::BTreeMap;

use rand::Rng;

use super::{GraphSpec, NodeKind};
use crate::rng::{chacha, stream_seed};
use crate::tensor::{BnState, ParamRole, ParamTensor, Shape, Tensor};

/// Trainable (and running) state of one node.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Conv { weight: ParamTensor, bias: ParamTensor },
    Bn { gamma: ParamTensor, beta: ParamTensor, state: BnState },
}

/// Parameters keyed by node id. Iteration is in ascending id order, independent of the
/// order nodes are listed in.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params {
    layers: BTreeMap<usize, LayerParams>,
}

impl Params {
    pub fn get(&self, id: usize) -> Option<&LayerParams> {
        self.layers.get(&id)
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut LayerParams> {
        self.layers.get_mut(&id)
    }

    pub fn insert(&mut self, id: usize, layer: LayerParams) {
        self.layers.insert(id, layer);
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, &LayerParams)> {
        self.layers.iter().map(|(&id, l)| (id, l))
    }

    /// Trainable tensors in a fixed order: by node id, then weight/bias or gamma/beta.
    pub fn trainable(&self) -> impl Iterator<Item = &ParamTensor> {
        self.layers.values().flat_map(|l| match l {
            LayerParams::Conv { weight, bias } => [weight, bias],
            LayerParams::Bn { gamma, beta, .. } => [gamma, beta],
        })
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.layers.values_mut().flat_map(|l| match l {
            LayerParams::Conv { weight, bias } => [weight, bias],
            LayerParams::Bn { gamma, beta, .. } => [gamma, beta],
        })
    }

    pub fn zero_grad(&mut self) {
        self.trainable_mut().for_each(ParamTensor::zero_grad);
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(ParamTensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Normal with variance `2 / fan_in`, `fan_in = c_in·k·k`.
    VarianceScaling,
    /// Glorot uniform, `U(±sqrt(6 / (fan_in + fan_out)))`.
    UniformSmall,
}

impl std::str::FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "variance_scaling" => Ok(InitScheme::VarianceScaling),
            "uniform_small" => Ok(InitScheme::UniformSmall),
            _ => Err(format!("unknown init scheme `{s}`")),
        }
    }
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitScheme::VarianceScaling => "variance_scaling",
            InitScheme::UniformSmall => "uniform_small",
        })
    }
}

/// Conv weights and biases plus batch-norm gammas and betas.
pub fn param_count(g: &GraphSpec) -> usize {
    g.nodes()
        .iter()
        .enumerate()
        .map(|(pos, node)| match node.kind {
            NodeKind::Conv3x3 | NodeKind::Conv1x1 => {
                let k = node.kind.kernel().unwrap_or(1);
                let c_in = g.channels_at(g.input_positions(pos).next().unwrap_or(0));
                let c_out = g.channels_at(pos);
                k * k * c_in * c_out + c_out
            }
            NodeKind::Bn => 2 * g.channels_at(pos),
            _ => 0,
        })
        .sum()
}

/// Fresh parameters. Each node draws from its own stream keyed by `(seed, node id)`.
pub fn init_params(g: &GraphSpec, scheme: InitScheme, seed: u64) -> Params {
    let mut params = Params::default();
    for (pos, node) in g.nodes().iter().enumerate() {
        let c_out = g.channels_at(pos);
        match node.kind {
            NodeKind::Conv3x3 | NodeKind::Conv1x1 => {
                let k = node.kind.kernel().unwrap_or(1);
                let c_in = g.channels_at(g.input_positions(pos).next().unwrap_or(0));
                let shape = Shape::new(c_out, c_in, k, k);
                let fan_in = (c_in * k * k) as f32;
                let fan_out = (c_out * k * k) as f32;
                let mut rng = chacha(stream_seed(seed, "init", node.id as u64));
                let value = match scheme {
                    InitScheme::VarianceScaling => Tensor::randn(shape, (2.0 / fan_in).sqrt(), &mut rng),
                    InitScheme::UniformSmall => {
                        let limit = (6.0 / (fan_in + fan_out)).sqrt();
                        let data = (0..shape.numel()).map(|_| rng.random_range(-limit..limit)).collect();
                        Tensor::from_vec(shape, data)
                    }
                }
                .expect("conv shapes from a validated graph are non-empty");
                params.insert(
                    node.id,
                    LayerParams::Conv {
                        weight: ParamTensor::new(value, ParamRole::ConvWeight),
                        bias: ParamTensor::new(Tensor::zeros_unchecked(Shape::new(1, c_out, 1, 1)), ParamRole::ConvBias),
                    },
                );
            }
            NodeKind::Bn => {
                let shape = Shape::new(1, c_out, 1, 1);
                let mut gamma = Tensor::zeros_unchecked(shape);
                gamma.fill(1.0);
                params.insert(
                    node.id,
                    LayerParams::Bn {
                        gamma: ParamTensor::new(gamma, ParamRole::BnGamma),
                        beta: ParamTensor::new(Tensor::zeros_unchecked(shape), ParamRole::BnBeta),
                        state: BnState::new(c_out),
                    },
                );
            }
            _ => {}
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    #[test]
    fn counts_by_hand() {
        let (mut b, x) = GraphBuilder::new();
        let c = b.conv3x3(x, 8);
        let g = b.finish(c, "one", 2).unwrap();
        // conv 3->8 (224) + head 1x1 8->2 (18)
        assert_eq!(param_count(&g), 224 + 18);

        let (mut b, x) = GraphBuilder::new();
        let c = b.conv3x3(x, 8);
        let n = b.bn(c);
        let g = b.finish(n, "two", 2).unwrap();
        assert_eq!(param_count(&g), 224 + 16 + 18);

        let (mut b, x) = GraphBuilder::new();
        let c1 = b.conv3x3(x, 4);
        let c2 = b.conv3x3(c1, 6);
        let cat = b.concat(vec![c1, c2]);
        let g = b.finish(cat, "cat", 3).unwrap();
        let by_hand = (27 * 4 + 4) + (36 * 6 + 6) + (10 * 3 + 3);
        assert_eq!(param_count(&g), by_hand);
        assert_eq!(init_params(&g, InitScheme::VarianceScaling, 0).num_trainable(), by_hand);
    }

    #[test]
    fn variance_scaling_statistics() {
        let (mut b, x) = GraphBuilder::new();
        let c1 = b.conv1x1(x, 512);
        // fan_in = 512 for the next layer
        let c2 = b.conv1x1(c1, 256);
        let n = b.bn(c2);
        let g = b.finish(n, "fan", 2).unwrap();
        let p = init_params(&g, InitScheme::VarianceScaling, 42);
        let Some(LayerParams::Conv { weight, bias }) = p.get(c2) else { panic!() };
        let w = weight.value.data();
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 512.0;
        assert!((var - target).abs() < 0.2 * target, "{var} vs {target}");
        assert!(bias.value.data().iter().all(|&v| v == 0.0));
        let Some(LayerParams::Bn { gamma, beta, .. }) = p.get(n) else { panic!() };
        assert!(gamma.value.data().iter().all(|&v| v == 1.0));
        assert!(beta.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let (mut b, x) = GraphBuilder::new();
        let c = b.conv3x3(x, 5);
        let g = b.finish(c, "d", 3).unwrap();
        for scheme in [InitScheme::VarianceScaling, InitScheme::UniformSmall] {
            assert_eq!(init_params(&g, scheme, 9), init_params(&g, scheme, 9));
            assert_ne!(init_params(&g, scheme, 9), init_params(&g, scheme, 10));
        }
    }
}
