//! LakshyaNet (images) and NimeshaNet (ECG) in full and reduced variants.
//!
//! Both networks are four conv blocks (conv, batch-norm, ReLU, optional
//! average pooling), a learnable pooling layer and a sigmoid-scaled linear
//! head. The reduced variant pools once more after block 4, shrinking the
//! learnable pooling layer.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encode::{IMAGE_EXTENT, WINDOW_SAMPLES, WINDOW_SECONDS};
use crate::ingest::Task;
use crate::rng::stream;
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::gradcheck::{rel_err, GradCheck};
use crate::tensor::{BatchNormConfig, Graph, LayerKind, LayerParams, Scalar, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Reduced,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Reduced => "reduced",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "reduced" => Ok(Variant::Reduced),
            other => Err(Error::invalid(format!(
                "unknown variant '{other}' (expected full or reduced)"
            ))),
        }
    }
}

/// Conv, batch-norm and ReLU followed by `pools` window-2 average pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub pools: usize,
}

/// Architecture description; everything needed to rebuild a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub task: Task,
    pub variant: Variant,
    /// Input shape without the batch axis.
    pub input_shape: Vec<usize>,
    pub blocks: Vec<ConvBlock>,
    /// Spatial extent covered by the learnable pool (side length for
    /// images, sequence length for ECG).
    pub pool_extent: usize,
    pub outputs: usize,
    /// Sigmoid outputs are multiplied by this.
    pub output_scale: f64,
}

/// One row of the layer table: name, output shape, details.
pub type LayerRow = (&'static str, Vec<usize>, String);

const BLOCK_NAMES: [&str; 4] = ["Conv Block 1", "Conv Block 2", "Conv Block 3", "Conv Block 4"];
const CHANNELS: [usize; 5] = [0, 16, 32, 64, 128];

impl NetworkSpec {
    pub fn lakshyanet(variant: Variant) -> Self {
        Self::build(Task::Image, variant)
    }

    pub fn nimeshanet(variant: Variant) -> Self {
        Self::build(Task::Ecg, variant)
    }

    pub fn for_task(task: Task, variant: Variant) -> Self {
        Self::build(task, variant)
    }

    fn build(task: Task, variant: Variant) -> Self {
        let (input_channels, extent, outputs, scale, last_pools) = match task {
            Task::Image => (5, IMAGE_EXTENT, 2, 255.0, 0),
            Task::Ecg => (3, WINDOW_SAMPLES, 1, WINDOW_SECONDS, 1),
        };
        let extra = usize::from(variant == Variant::Reduced);
        let mut channels = CHANNELS;
        channels[0] = input_channels;
        let blocks: Vec<ConvBlock> = (0..4)
            .map(|i| ConvBlock {
                in_channels: channels[i],
                out_channels: channels[i + 1],
                kernel: 3,
                padding: 1,
                pools: if i < 3 { 1 } else { last_pools + extra },
            })
            .collect();
        let pool_extent = blocks.iter().fold(extent, |n, b| (0..b.pools).fold(n, |n, _| n / 2));
        let input_shape = match task {
            Task::Image => vec![input_channels, extent, extent],
            Task::Ecg => vec![input_channels, extent],
        };
        let spec = NetworkSpec {
            task,
            variant,
            input_shape,
            blocks,
            pool_extent,
            outputs,
            output_scale: scale,
        };
        let got: Vec<Vec<usize>> = spec.shape_chain().into_iter().map(|r| r.1).collect();
        assert_eq!(
            got,
            expected_shapes(task, variant),
            "shape chain of {task:?}/{variant:?}"
        );
        spec
    }

    fn spatial(&self, n: usize) -> Vec<usize> {
        match self.task {
            Task::Image => vec![n, n],
            Task::Ecg => vec![n],
        }
    }

    /// Output shape of every stage (batch axis omitted), in table order.
    pub fn shape_chain(&self) -> Vec<LayerRow> {
        let mut rows = Vec::new();
        let mut n = self.input_shape[1];
        let conv = match self.task {
            Task::Image => "Conv",
            Task::Ecg => "Conv1d",
        };
        let pool = match self.task {
            Task::Image => "AvgPool(2)",
            Task::Ecg => "AvgPool1d(2)",
        };
        for (name, b) in BLOCK_NAMES.iter().zip(&self.blocks) {
            n = (n + 2 * b.padding - b.kernel) + 1;
            for _ in 0..b.pools {
                n /= 2;
            }
            let mut details = match self.task {
                Task::Image => format!(
                    "{conv}({},{},{}x{},pad={}) + BN + ReLU",
                    b.in_channels, b.out_channels, b.kernel, b.kernel, b.padding
                ),
                Task::Ecg => format!(
                    "{conv}({},{},{},pad={}) + BN + ReLU",
                    b.in_channels, b.out_channels, b.kernel, b.padding
                ),
            };
            for _ in 0..b.pools {
                details.push_str(&format!(" + {pool}"));
            }
            let mut shape = vec![b.out_channels];
            shape.extend(self.spatial(n));
            rows.push((*name, shape, details));
        }
        let c = self.blocks[3].out_channels;
        let p = self.pool_extent;
        match self.task {
            Task::Image => rows.push((
                "Learnable Pool",
                vec![c, 1, 1],
                format!("Depthwise Conv({c},{c},k={p},groups={c})"),
            )),
            Task::Ecg => rows.push(("Learnable Pool", vec![c], format!("WeightedAverage1D({c},{p})"))),
        }
        rows.push((
            "Fully Connected",
            vec![self.outputs],
            format!(
                "Linear({c}->{}) + Sigmoid, scaled to [0,{}]",
                self.outputs, self.output_scale
            ),
        ));
        rows
    }

    /// Plain-text layer table.
    pub fn layer_table(&self) -> String {
        let mut rows: Vec<(String, String, String)> = vec![(
            "Input".into(),
            join_shape(&self.input_shape),
            match self.task {
                Task::Image => "RGB + 2 coordinate channels".into(),
                Task::Ecg => "2 ECG leads + 1 coordinate channel".into(),
            },
        )];
        rows.extend(
            self.shape_chain()
                .into_iter()
                .map(|(n, s, d)| (n.to_string(), join_shape(&s), d)),
        );
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let w1 = rows.iter().map(|r| r.1.chars().count()).max().unwrap_or(0);
        let mut out = String::new();
        for (a, b, c) in rows {
            let pad = w1 - b.chars().count();
            out.push_str(&format!("{a:<w0$}  {b}{}  {c}\n", " ".repeat(pad)));
        }
        out
    }

    /// Number of learnable layers; batch-norm counts separately from its conv.
    pub fn layer_count(&self) -> usize {
        self.blocks.len() * 2 + 2
    }

    /// Stable per-layer names used for seeding and reports.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 1..=self.blocks.len() {
            names.push(format!("block{i}.conv"));
            names.push(format!("block{i}.bn"));
        }
        names.push("pool".into());
        names.push("fc".into());
        names
    }

    /// Per-layer `(name, weights, biases)` computed from the architecture
    /// alone.
    pub fn param_counts(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let k_area = |k: usize| match self.task {
            Task::Image => k * k,
            Task::Ecg => k,
        };
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((
                format!("block{}.conv", i + 1),
                b.out_channels * b.in_channels * k_area(b.kernel),
                b.out_channels,
            ));
            out.push((format!("block{}.bn", i + 1), b.out_channels, b.out_channels));
        }
        let c = self.blocks[3].out_channels;
        let p = self.pool_extent;
        match self.task {
            Task::Image => out.push(("pool".into(), c * p * p, c)),
            Task::Ecg => out.push(("pool".into(), c * p, 0)),
        }
        out.push(("fc".into(), self.outputs * c, self.outputs));
        out
    }

    pub fn total_params(&self) -> usize {
        self.param_counts().iter().map(|(_, w, b)| w + b).sum()
    }

    /// Weights in the learnable pooling layer.
    pub fn pool_weights(&self) -> usize {
        self.param_counts()[self.blocks.len() * 2].1
    }
}

fn join_shape(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" × ")
}

/// Output shapes listed in the architecture tables.
pub fn expected_shapes(task: Task, variant: Variant) -> Vec<Vec<usize>> {
    match (task, variant) {
        (Task::Image, Variant::Full) => vec![
            vec![16, 128, 128],
            vec![32, 64, 64],
            vec![64, 32, 32],
            vec![128, 32, 32],
            vec![128, 1, 1],
            vec![2],
        ],
        (Task::Image, Variant::Reduced) => vec![
            vec![16, 128, 128],
            vec![32, 64, 64],
            vec![64, 32, 32],
            vec![128, 16, 16],
            vec![128, 1, 1],
            vec![2],
        ],
        (Task::Ecg, Variant::Full) => {
            vec![
                vec![16, 250],
                vec![32, 125],
                vec![64, 62],
                vec![128, 31],
                vec![128],
                vec![1],
            ]
        }
        (Task::Ecg, Variant::Reduced) => {
            vec![
                vec![16, 250],
                vec![32, 125],
                vec![64, 62],
                vec![128, 15],
                vec![128],
                vec![1],
            ]
        }
    }
}

/// Parameters and batch-norm statistics of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T> {
    pub spec: NetworkSpec,
    /// In [`NetworkSpec::layer_names`] order.
    pub layers: Vec<LayerParams<T>>,
}

/// Parameter handles recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Var,
    /// Layer index and handle, weight before bias.
    pub params: Vec<(usize, Var)>,
}

impl<T: Scalar> NetworkState<T> {
    /// Initialises every layer from its own stream `(seed, "init", task,
    /// layer name)`, so arms whose layers share a shape start identical.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let names = spec.layer_names();
        let rng_for = |i: usize| {
            stream(
                seed,
                &["init".into(), spec.task.as_str().into(), names[i].as_str().into()],
            )
        };
        let mut layers = Vec::with_capacity(spec.layer_count());
        for (i, b) in spec.blocks.iter().enumerate() {
            let mut rng = rng_for(2 * i);
            layers.push(match spec.task {
                Task::Image => LayerParams::conv2d(b.in_channels, b.out_channels, b.kernel, b.padding, &mut rng),
                Task::Ecg => LayerParams::conv1d(b.in_channels, b.out_channels, b.kernel, b.padding, &mut rng),
            });
            layers.push(LayerParams::batchnorm(b.out_channels));
        }
        let c = spec.blocks[3].out_channels;
        layers.push(match spec.task {
            Task::Image => LayerParams::depthwise(c, spec.pool_extent),
            Task::Ecg => LayerParams::weighted_avg1d(c, spec.pool_extent),
        });
        let mut rng = rng_for(layers.len());
        layers.push(LayerParams::linear(c, spec.outputs, &mut rng));
        NetworkState {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (w, b) = l.param_count();
                w + b
            })
            .sum()
    }

    /// Records the forward pass on `g`. `input` must be `[B, ..input_shape]`.
    /// In training mode batch statistics normalise and the running
    /// statistics are updated.
    pub fn forward(&mut self, g: &mut Graph<T>, input: Var, training: bool) -> Result<Forward> {
        self.check_input(g.shape(input))?;
        let bn = BatchNormConfig::default();
        let mut params = Vec::new();
        let mut reg = |g: &mut Graph<T>, idx: usize, layer: &LayerParams<T>| -> (Var, Option<Var>) {
            let w = g.param(layer.weight.value.clone());
            params.push((idx, w));
            let b = layer.bias.as_ref().map(|b| {
                let v = g.param(b.value.clone());
                params.push((idx, v));
                v
            });
            (w, b)
        };
        let mut x = input;
        for (i, block) in self.spec.blocks.iter().enumerate() {
            let (ci, bi) = (2 * i, 2 * i + 1);
            let (w, b) = reg(g, ci, &self.layers[ci]);
            x = match self.spec.task {
                Task::Image => g.conv2d(x, w, b, 1, block.padding)?,
                Task::Ecg => g.conv1d(x, w, b, 1, block.padding)?,
            };
            let (gamma, beta) = reg(g, bi, &self.layers[bi]);
            let running = self.layers[bi]
                .running
                .as_mut()
                .ok_or_else(|| Error::invalid("batch-norm layer without running statistics"))?;
            x = g.batchnorm(x, gamma, beta.expect("batch-norm has beta"), running, training, bn)?;
            x = g.relu(x);
            for _ in 0..block.pools {
                x = g.avgpool2(x)?;
            }
        }
        let pi = self.spec.blocks.len() * 2;
        let (w, b) = reg(g, pi, &self.layers[pi]);
        let batch = g.shape(x)[0];
        let c = self.spec.blocks[3].out_channels;
        x = match self.spec.task {
            Task::Image => {
                let y = g.depthwise_conv2d(x, w, b)?;
                g.reshape(y, vec![batch, c])?
            }
            Task::Ecg => g.weighted_avg1d(x, w)?,
        };
        let (w, b) = reg(g, pi + 1, &self.layers[pi + 1]);
        x = g.linear(x, w, b)?;
        x = g.sigmoid(x);
        let output = g.scale(x, self.spec.output_scale);
        Ok(Forward { output, params })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::shape(format!(
                "network expects [B, {}], got {shape:?}",
                self.spec
                    .input_shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(())
    }

    /// Moves gradients from `g` into the layer parameters.
    pub fn collect_grads(&mut self, g: &mut Graph<T>, fwd: &Forward) -> Result<()> {
        let mut slots: Vec<usize> = vec![0; self.layers.len()];
        for &(idx, v) in &fwd.params {
            let grad = g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            let layer = &mut self.layers[idx];
            let param = if slots[idx] == 0 {
                &mut layer.weight
            } else {
                layer
                    .bias
                    .as_mut()
                    .ok_or_else(|| Error::invalid("unexpected bias gradient"))?
            };
            param.accumulate(&grad);
            slots[idx] += 1;
        }
        Ok(())
    }

    /// All parameters, in a fixed order suitable for the optimiser.
    pub fn params_mut(&mut self) -> Vec<&mut crate::tensor::Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Eval-mode predictions `[B, outputs]` for an input batch. Running
    /// statistics are left untouched.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let fwd = scratch.forward(&mut g, x, false)?;
        Ok(g.value(fwd.output).clone())
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> NetworkState<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerParams {
                kind: l.kind,
                hyper: l.hyper,
                weight: crate::tensor::Param::new(l.weight.value.cast()),
                bias: l.bias.as_ref().map(|b| crate::tensor::Param::new(b.value.cast())),
                running: l.running.as_ref().map(|r| crate::tensor::RunningStats {
                    mean: r.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                }),
            })
            .collect();
        NetworkState {
            spec: self.spec.clone(),
            layers,
        }
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        write_checkpoint(out, &self.layers)
    }

    /// Reads a checkpoint and checks it against `spec`.
    pub fn read_from<R: Read>(spec: &NetworkSpec, input: R) -> Result<Self> {
        let layers = read_checkpoint::<T, R>(input)?;
        let reference = NetworkState::<T>::init(spec, 0);
        if layers.len() != reference.layers.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} layers, {:?}/{:?} needs {}",
                layers.len(),
                spec.task,
                spec.variant,
                reference.layers.len()
            )));
        }
        for (i, (a, b)) in layers.iter().zip(&reference.layers).enumerate() {
            if a.kind != b.kind || a.hyper != b.hyper {
                return Err(Error::Checkpoint(format!("layer {i} does not match the architecture")));
            }
        }
        Ok(NetworkState {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?);
        self.write_to(&mut f)?;
        f.into_inner()
            .map_err(|e| Error::file(&tmp, e.into_error()))?
            .sync_all()?;
        std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
    }

    pub fn load(spec: &NetworkSpec, path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(spec, std::io::BufReader::new(f))
    }
}

impl<T: Scalar> NetworkState<T> {
    pub fn layer_kind(&self, i: usize) -> LayerKind {
        self.layers[i].kind
    }
}

/// Relative finite-difference step for network checks. ReLU kinks make
/// larger steps unreliable.
pub const FD_STEP: f64 = 1e-7;
/// Gradients smaller than this are compared absolutely. Conv biases ahead
/// of batch-norm have an exact zero gradient.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Finite-difference check of a whole network in `f64`.
///
/// `per_tensor` entries of every parameter tensor are sampled; the loss is
/// the training-mode MSE against a fixed random target on a random batch,
/// both divided by the output scale.
pub fn gradcheck_network(
    spec: &NetworkSpec,
    batch: usize,
    per_tensor: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheck> {
    let mut rng = stream(
        seed,
        &[
            "gradcheck".into(),
            spec.task.as_str().into(),
            spec.variant.as_str().into(),
        ],
    );
    let net = NetworkState::<f64>::init(spec, seed);
    let mut shape = vec![batch];
    shape.extend(&spec.input_shape);
    let n: usize = shape.iter().product();
    let input = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let target = Tensor::new(
        vec![batch, spec.outputs],
        (0..batch * spec.outputs).map(|_| rng.random_range(0.2..0.8)).collect(),
    )?;

    let loss_of = |net: &NetworkState<f64>| -> Result<(f64, Graph<f64>, Forward, Var)> {
        let mut scratch = net.clone();
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let fwd = scratch.forward(&mut g, x, true)?;
        let t = g.constant(target.clone());
        let pred = g.scale(fwd.output, 1.0 / spec.output_scale);
        let loss = g.mse_loss(pred, t)?;
        Ok((g.value(loss).data()[0], g, fwd, loss))
    };

    let (_, mut g, fwd, loss) = loss_of(&net)?;
    g.backward(loss)?;
    let mut analytic = net.clone();
    analytic.collect_grads(&mut g, &fwd)?;

    let mut checked = 0;
    let mut max_err = 0.0f64;
    for li in 0..net.layers.len() {
        for pi in 0..net.layers[li].params().count() {
            let grad = analytic.layers[li]
                .params()
                .nth(pi)
                .and_then(|p| p.grad.clone())
                .ok_or(Error::MissingGradient(li))?;
            let len = grad.len();
            for _ in 0..per_tensor.min(len) {
                let e = rng.random_range(0..len);
                let orig = net.layers[li].params().nth(pi).expect("param").value.data()[e];
                let h = FD_STEP * orig.abs().max(1.0);
                let mut perturbed = net.clone();
                let mut eval = |delta: f64| -> Result<f64> {
                    perturbed.layers[li]
                        .params_mut()
                        .nth(pi)
                        .expect("param")
                        .value
                        .data_mut()[e] = orig + delta;
                    Ok(loss_of(&perturbed)?.0)
                };
                let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
                let err = rel_err(grad.data()[e], numeric, GRAD_FLOOR);
                log::debug!(
                    "layer {li} tensor {pi} entry {e}: analytic {} numeric {numeric} err {err:.2e}",
                    grad.data()[e]
                );
                max_err = max_err.max(err);
                checked += 1;
            }
        }
    }
    Ok(GradCheck {
        name: format!(
            "{}/{}",
            if spec.task == Task::Image {
                "LakshyaNet"
            } else {
                "NimeshaNet"
            },
            spec.variant.as_str()
        ),
        checked,
        max_rel_err: max_err,
        tolerance,
    })
}

/// Display name of the network for a task.
pub fn network_name(task: Task) -> &'static str {
    match task {
        Task::Image => "LakshyaNet",
        Task::Ecg => "NimeshaNet",
    }
}
