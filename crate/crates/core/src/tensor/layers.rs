use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

use super::{RunningStats, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Conv1d,
    BatchNorm,
    Linear,
    DepthwiseConv2d,
    WeightedAvg1d,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv2d => 1,
            LayerKind::Conv1d => 2,
            LayerKind::BatchNorm => 3,
            LayerKind::Linear => 4,
            LayerKind::DepthwiseConv2d => 5,
            LayerKind::WeightedAvg1d => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => LayerKind::Conv2d,
            2 => LayerKind::Conv1d,
            3 => LayerKind::BatchNorm,
            4 => LayerKind::Linear,
            5 => LayerKind::DepthwiseConv2d,
            6 => LayerKind::WeightedAvg1d,
            _ => return None,
        })
    }
}

/// Hyper-parameters of a learnable layer.
///
/// `kernel` is the convolution kernel extent, the depthwise spatial extent
/// or the weighted-average length; it is unused by batch-norm and linear
/// layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerHyper {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl LayerHyper {
    fn plain(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { value, grad: None }
    }

    pub fn accumulate(&mut self, g: &Tensor<T>) {
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub kind: LayerKind,
    pub hyper: LayerHyper,
    /// Weights; gamma for batch-norm.
    pub weight: Param<T>,
    /// Bias; beta for batch-norm.
    pub bias: Option<Param<T>>,
    pub running: Option<RunningStats<T>>,
}

fn uniform<T: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl<T: Scalar> LayerParams<T> {
    pub fn weight_shape(kind: LayerKind, h: &LayerHyper) -> Vec<usize> {
        match kind {
            LayerKind::Conv2d => vec![h.out_channels, h.in_channels / h.groups, h.kernel, h.kernel],
            LayerKind::Conv1d => vec![h.out_channels, h.in_channels / h.groups, h.kernel],
            LayerKind::BatchNorm => vec![h.out_channels],
            LayerKind::Linear => vec![h.out_channels, h.in_channels],
            LayerKind::DepthwiseConv2d => vec![h.out_channels, 1, h.kernel, h.kernel],
            LayerKind::WeightedAvg1d => vec![h.out_channels, h.kernel],
        }
    }

    pub fn has_bias(kind: LayerKind) -> bool {
        !matches!(kind, LayerKind::WeightedAvg1d)
    }

    /// Kaiming-uniform (fan-in) convolution, `pad` on every side.
    pub fn conv2d<R: Rng>(cin: usize, cout: usize, k: usize, pad: usize, rng: &mut R) -> Self {
        let hyper = LayerHyper {
            kernel: k,
            padding: pad,
            ..LayerHyper::plain(cin, cout)
        };
        Self::kaiming(LayerKind::Conv2d, hyper, cin * k * k, rng)
    }

    pub fn conv1d<R: Rng>(cin: usize, cout: usize, k: usize, pad: usize, rng: &mut R) -> Self {
        let hyper = LayerHyper {
            kernel: k,
            padding: pad,
            ..LayerHyper::plain(cin, cout)
        };
        Self::kaiming(LayerKind::Conv1d, hyper, cin * k, rng)
    }

    pub fn linear<R: Rng>(fin: usize, fout: usize, rng: &mut R) -> Self {
        Self::kaiming(LayerKind::Linear, LayerHyper::plain(fin, fout), fin, rng)
    }

    fn kaiming<R: Rng>(kind: LayerKind, hyper: LayerHyper, fan_in: usize, rng: &mut R) -> Self {
        let fan = fan_in as f64;
        let weight = uniform(&Self::weight_shape(kind, &hyper), (6.0 / fan).sqrt(), rng);
        let bias = uniform(&[hyper.out_channels], 1.0 / fan.sqrt(), rng);
        Self {
            kind,
            hyper,
            weight: Param::new(weight),
            bias: Some(Param::new(bias)),
            running: None,
        }
    }

    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn batchnorm(channels: usize) -> Self {
        Self {
            kind: LayerKind::BatchNorm,
            hyper: LayerHyper::plain(channels, channels),
            weight: Param::new(Tensor::full(&[channels], T::one())),
            bias: Some(Param::new(Tensor::zeros(&[channels]))),
            running: Some(RunningStats::new(channels)),
        }
    }

    /// Full-extent depthwise convolution with uniform `1/extent^2` weights.
    pub fn depthwise(channels: usize, extent: usize) -> Self {
        let hyper = LayerHyper {
            kernel: extent,
            groups: channels,
            ..LayerHyper::plain(channels, channels)
        };
        let w = T::from_f64_lossy(1.0 / (extent * extent) as f64);
        Self {
            kind: LayerKind::DepthwiseConv2d,
            hyper,
            weight: Param::new(Tensor::full(&[channels, 1, extent, extent], w)),
            bias: Some(Param::new(Tensor::zeros(&[channels]))),
            running: None,
        }
    }

    /// Learnable temporal weights initialised to the mean, `1/len`.
    pub fn weighted_avg1d(channels: usize, len: usize) -> Self {
        let hyper = LayerHyper {
            kernel: len,
            ..LayerHyper::plain(channels, channels)
        };
        let w = T::from_f64_lossy(1.0 / len as f64);
        Self {
            kind: LayerKind::WeightedAvg1d,
            hyper,
            weight: Param::new(Tensor::full(&[channels, len], w)),
            bias: None,
            running: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        if h.groups == 0 || !h.in_channels.is_multiple_of(h.groups) {
            return Err(Error::invalid(format!(
                "bad group count {} for {:?}",
                h.groups, self.kind
            )));
        }
        let expected = Self::weight_shape(self.kind, h);
        if self.weight.value.shape() != expected.as_slice() {
            return Err(Error::shape(format!(
                "{:?} weight shape {:?} inconsistent with hyper-parameters (expected {expected:?})",
                self.kind,
                self.weight.value.shape()
            )));
        }
        match (&self.bias, Self::has_bias(self.kind)) {
            (Some(b), true) if b.value.shape() == [h.out_channels] => {}
            (None, false) => {}
            _ => return Err(Error::shape(format!("{:?} bias inconsistent", self.kind))),
        }
        match (&self.running, self.kind) {
            (Some(r), LayerKind::BatchNorm) => {
                if r.mean.len() != h.out_channels || r.var.len() != h.out_channels {
                    return Err(Error::shape("running statistics length mismatch"));
                }
                if r.var.iter().any(|v| *v < T::zero()) {
                    return Err(Error::invalid("negative running variance"));
                }
            }
            (None, k) if k != LayerKind::BatchNorm => {}
            _ => return Err(Error::invalid("running statistics only belong to batch-norm")),
        }
        Ok(())
    }

    /// (weight count, bias count).
    pub fn param_count(&self) -> (usize, usize) {
        (self.weight.value.len(), self.bias.as_ref().map_or(0, |b| b.value.len()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }
}
