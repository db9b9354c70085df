use rand::Rng;

use crate::error::Result;
use crate::params::{ParamStore, StagedParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Shape-level description of one layer. Parameterized kinds (conv, linear)
/// fully determine their weight shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Relu,
    MaxPool2d {
        window: (usize, usize),
        stride: (usize, usize),
    },
    AvgPool2d {
        window: (usize, usize),
        stride: (usize, usize),
    },
    Flatten,
}

impl LayerSpec {
    /// Parameter tensors this layer owns, as (suffix, shape) pairs in a
    /// fixed order: weight first, then bias.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
            } => {
                let mut v = vec![(
                    "weight",
                    vec![*out_channels, *in_channels, kernel.0, kernel.1],
                )];
                if *bias {
                    v.push(("bias", vec![*out_channels]));
                }
                v
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![("weight", vec![*in_features, *out_features])];
                if *bias {
                    v.push(("bias", vec![*out_features]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel.0 * kernel.1,
            LayerSpec::Linear { in_features, .. } => *in_features,
            _ => 1,
        }
    }
}

/// Total scalar parameter count of a run of layer specs.
pub fn param_count(specs: &[LayerSpec]) -> usize {
    specs.iter().map(LayerSpec::param_count).sum()
}

/// A named layer inside a model; parameters live in the store under
/// `<name>.weight` / `<name>.bias`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

/// An ordered run of layers applied sequentially.
#[derive(Debug, Clone, Default)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn new(layers: Vec<(&str, LayerSpec)>) -> Self {
        Stack {
            layers: layers
                .into_iter()
                .map(|(name, spec)| Layer {
                    name: name.to_string(),
                    spec,
                })
                .collect(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.layers {
            for (suffix, _) in layer.spec.param_shapes() {
                names.push(format!("{}.{}", layer.name, suffix));
            }
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Register fresh parameters: uniform in ±(fan-in)^(-1/2), drawn in
    /// layer order so initialization is a pure function of the rng state.
    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for layer in &self.layers {
            let bound = 1.0 / (layer.spec.fan_in() as f64).sqrt();
            for (suffix, shape) in layer.spec.param_shapes() {
                let value = Tensor::uniform(&shape, -bound, bound, rng);
                store.insert(&format!("{}.{}", layer.name, suffix), value)?;
            }
        }
        Ok(())
    }

    /// Static forward pass: every layer reads its weights from the staged
    /// store entries.
    pub fn forward(&self, tape: &mut Tape, staged: &StagedParams, input: Var) -> Result<Var> {
        let mut x = input;
        for layer in &self.layers {
            let params: Vec<Var> = layer
                .spec
                .param_shapes()
                .iter()
                .map(|(suffix, _)| staged.var(&format!("{}.{}", layer.name, suffix)))
                .collect::<Result<_>>()?;
            x = layer_forward(tape, &layer.spec, &params, x)?;
        }
        Ok(x)
    }
}

/// Apply one layer. `params` follows the order of
/// [`LayerSpec::param_shapes`].
pub fn layer_forward(
    tape: &mut Tape,
    spec: &LayerSpec,
    params: &[Var],
    input: Var,
) -> Result<Var> {
    match spec {
        LayerSpec::Conv2d { bias, .. } => {
            let out = tape.conv2d(input, params[0])?;
            if *bias {
                tape.bias_add(out, params[1])
            } else {
                Ok(out)
            }
        }
        LayerSpec::Linear { bias, .. } => {
            let out = tape.matmul(input, params[0])?;
            if *bias {
                tape.bias_add(out, params[1])
            } else {
                Ok(out)
            }
        }
        LayerSpec::Relu => tape.relu(input),
        LayerSpec::MaxPool2d { window, stride } => tape.maxpool2d(input, *window, *stride),
        LayerSpec::AvgPool2d { window, stride } => tape.avgpool2d(input, *window, *stride),
        LayerSpec::Flatten => tape.flatten(input),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_once(spec: LayerSpec, weights: Vec<(String, Tensor)>, input: Tensor) -> Tensor {
        let mut store = ParamStore::new();
        for (name, t) in weights {
            store.insert(&name, t).unwrap();
        }
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let x = tape.constant(input);
        let params: Vec<Var> = spec
            .param_shapes()
            .iter()
            .map(|(suffix, _)| staged.var(&format!("l.{suffix}")).unwrap())
            .collect();
        let out = layer_forward(&mut tape, &spec, &params, x).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn relu_layer_matches_definition() {
        let out = forward_once(
            LayerSpec::Relu,
            vec![],
            Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap(),
        );
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn linear_with_identity_padded_weights_projects() {
        // 48 -> 10 weight that is the identity on the first 10 coordinates
        let mut w = vec![0.0; 48 * 10];
        for i in 0..10 {
            w[i * 10 + i] = 1.0;
        }
        let mut input = vec![0.0; 48];
        for (i, v) in input.iter_mut().enumerate() {
            *v = i as f64 + 1.0;
        }
        let out = forward_once(
            LayerSpec::Linear {
                in_features: 48,
                out_features: 10,
                bias: false,
            },
            vec![("l.weight".to_string(), Tensor::new(vec![48, 10], w).unwrap())],
            Tensor::new(vec![1, 48], input).unwrap(),
        );
        let expect: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        assert_eq!(out.data(), &expect[..]);
    }

    #[test]
    fn conv_layer_output_shape() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 3,
            kernel: (5, 5),
            bias: false,
        };
        let w = Tensor::uniform(&[3, 1, 5, 5], -0.1, 0.1, &mut rng);
        let out = forward_once(
            spec,
            vec![("l.weight".to_string(), w)],
            Tensor::zeros(&[1, 1, 28, 28]),
        );
        assert_eq!(out.shape(), &[1, 3, 24, 24]);
    }

    #[test]
    fn spec_param_counts() {
        let conv = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 3,
            kernel: (5, 5),
            bias: false,
        };
        assert_eq!(conv.param_count(), 225);
        let lin = LayerSpec::Linear {
            in_features: 48,
            out_features: 10,
            bias: true,
        };
        assert_eq!(lin.param_count(), 490);
        assert_eq!(param_count(&[conv, LayerSpec::Relu]), 225);
    }

    use rand::SeedableRng;

    #[test]
    fn register_then_stage_round_trips() {
        let stack = Stack::new(vec![(
            "f.fc",
            LayerSpec::Linear {
                in_features: 4,
                out_features: 2,
                bias: false,
            },
        )]);
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        stack.register(&mut store, &mut rng).unwrap();
        assert_eq!(stack.param_names(), vec!["f.fc.weight".to_string()]);
        assert_eq!(store.total_params(), 8);
        let bound = 1.0 / 2.0;
        for v in store.get("f.fc.weight").unwrap().value.data() {
            assert!(v.abs() < bound);
        }
    }
}
