//! Concrete model builders for the three experiment families.
//!
//! The shared trunk maps a 1x28x28 image to 48 features: without pooling the
//! two 5x5 convolutions would leave 3*20*20 = 1200 features, so a 2x2/2 max
//! pool follows each convolution, which lands exactly on 3*4*4 = 48.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{recurrent_forward, AdaptiveRecurrentBlock, BlockTrace};
use crate::error::{Error, Result};
use crate::layers::{LayerSpec, Stack};
use crate::params::{ParamStore, StagedParams};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Baseline,
    BaselineBig,
    Recurrent,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Baseline => "baseline",
            Family::BaselineBig => "baseline-big",
            Family::Recurrent => "recurrent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Family::Baseline),
            "baseline-big" => Ok(Family::BaselineBig),
            "recurrent" => Ok(Family::Recurrent),
            other => Err(Error::Validation(format!(
                "unknown family {other:?} (expected baseline | baseline-big | recurrent)"
            ))),
        }
    }
}

fn conv(cin: usize, cout: usize, k: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: (k, k),
        bias: false,
    }
}

fn linear(inf: usize, outf: usize) -> LayerSpec {
    LayerSpec::Linear {
        in_features: inf,
        out_features: outf,
        bias: false,
    }
}

fn pool2() -> LayerSpec {
    LayerSpec::MaxPool2d {
        window: (2, 2),
        stride: (2, 2),
    }
}

/// Image trunk shared by the baseline and recurrent families:
/// conv(1->3, 5x5), relu, pool, conv(3->3, 5x5), relu, pool, flatten -> 48.
fn trunk_layers() -> Vec<(&'static str, LayerSpec)> {
    vec![
        ("e.conv1", conv(1, 3, 5)),
        ("e.relu1", LayerSpec::Relu),
        ("e.pool1", pool2()),
        ("e.conv2", conv(3, 3, 5)),
        ("e.relu2", LayerSpec::Relu),
        ("e.pool2", pool2()),
        ("e.flatten", LayerSpec::Flatten),
    ]
}

/// The plain feed-forward classifier. The relu between the two fully
/// connected layers sits outside the 48->10 layer, so the recurrent family
/// can treat that layer as its dynamic subblock and keep the relu static.
pub fn build_baseline(seed: u64) -> (Stack, ParamStore) {
    let mut layers = trunk_layers();
    layers.push(("f.fc", linear(48, 10)));
    layers.push(("g.relu", LayerSpec::Relu));
    layers.push(("c.fc", linear(10, 10)));
    let stack = Stack::new(layers);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stack
        .register(&mut store, &mut rng)
        .expect("fresh store; names are unique");
    (stack, store)
}

/// Parameter-matched control: five convolutions and two fully connected
/// layers, widths chosen to land near the recurrent family's total count.
/// 28 -conv5-> 24 -pool-> 12 -conv3-> 10 -conv3-> 8 -pool-> 4 -conv3-> 2
/// -conv2-> 1, then 16 -> 96 -> 10.
pub fn build_baseline_big(seed: u64) -> (Stack, ParamStore) {
    let layers = vec![
        ("e.conv1", conv(1, 6, 5)),
        ("e.relu1", LayerSpec::Relu),
        ("e.pool1", pool2()),
        ("e.conv2", conv(6, 8, 3)),
        ("e.relu2", LayerSpec::Relu),
        ("e.conv3", conv(8, 10, 3)),
        ("e.relu3", LayerSpec::Relu),
        ("e.pool2", pool2()),
        ("e.conv4", conv(10, 12, 3)),
        ("e.relu4", LayerSpec::Relu),
        (
            "e.conv5",
            LayerSpec::Conv2d {
                in_channels: 12,
                out_channels: 16,
                kernel: (2, 2),
                bias: false,
            },
        ),
        ("e.relu5", LayerSpec::Relu),
        ("e.flatten", LayerSpec::Flatten),
        ("f.fc", linear(16, 96)),
        ("g.relu", LayerSpec::Relu),
        ("c.fc", linear(96, 10)),
    ];
    let stack = Stack::new(layers);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stack
        .register(&mut store, &mut rng)
        .expect("fresh store; names are unique");
    (stack, store)
}

/// The recurrent model: the baseline trunk, the 48->10 layer as the dynamic
/// subblock, the relu as the static subblock, a 10->480 adaptation head,
/// and the 10->10 classifier.
#[derive(Debug, Clone)]
pub struct RecurrentModel {
    pub trunk: Stack,
    pub block: AdaptiveRecurrentBlock,
    pub classifier: Stack,
}

impl RecurrentModel {
    pub fn forward_trace(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        images: Var,
    ) -> Result<BlockTrace> {
        let u = self.trunk.forward(tape, staged, images)?;
        recurrent_forward(tape, &self.block, staged, u)
    }

    /// Logits for every iteration, in iteration order.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        staged: &StagedParams,
        images: Var,
    ) -> Result<Vec<Var>> {
        let trace = self.forward_trace(tape, staged, images)?;
        trace
            .outputs
            .iter()
            .map(|&z| self.classifier.forward(tape, staged, z))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.block.f.param_count()
            + self.block.g.param_count()
            + self.block.h.param_count()
            + self.classifier.param_count()
    }

    pub fn all_param_names(&self) -> Vec<String> {
        let mut names = self.trunk.param_names();
        names.extend(self.block.f.param_names());
        names.extend(self.block.g.param_names());
        names.extend(self.classifier.param_names());
        names.extend(self.block.h.param_names());
        names
    }
}

/// Build the recurrent model with a fresh, fully random store (the usual
/// flow instead transfers a trained store; see `train::init_phase_two`).
pub fn build_recurrent(iterations: usize, alpha: f64, seed: u64) -> Result<(RecurrentModel, ParamStore)> {
    let model = recurrent_model(iterations, alpha)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.trunk.register(&mut store, &mut rng)?;
    model.block.f.register(&mut store, &mut rng)?;
    model.block.g.register(&mut store, &mut rng)?;
    model.classifier.register(&mut store, &mut rng)?;
    model.block.h.register(&mut store, &mut rng)?;
    Ok((model, store))
}

/// The recurrent architecture without any parameters.
pub fn recurrent_model(iterations: usize, alpha: f64) -> Result<RecurrentModel> {
    let trunk = Stack::new(trunk_layers());
    let f = Stack::new(vec![("f.fc", linear(48, 10))]);
    let g = Stack::new(vec![("g.relu", LayerSpec::Relu)]);
    let h = Stack::new(vec![("h.fc", linear(10, 480))]);
    let block = AdaptiveRecurrentBlock::new(f, g, h, iterations, alpha)?;
    Ok(RecurrentModel {
        trunk,
        block,
        classifier: Stack::new(vec![("c.fc", linear(10, 10))]),
    })
}
