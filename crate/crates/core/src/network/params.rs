use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{cast, Element, Tensor};

use super::{ModelConfig, NormConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// 3x3x3 (or larger) convolution kernel.
    ConvKernel,
    /// 1x1x1 convolution kernel.
    PointwiseKernel,
    ConvBias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn is_kernel(self) -> bool {
        matches!(self, ParamKind::ConvKernel | ParamKind::PointwiseKernel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Learned weights of one model in a fixed build order, plus batch-norm
/// running statistics keyed by layer path.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T: Element> {
    pub config: ModelConfig,
    pub params: Vec<Parameter<T>>,
    pub running: BTreeMap<String, RunningStats>,
}

impl<T: Element> ParameterStore<T> {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Put every parameter on `tape` as a trainable leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Gradients of the bound parameters after `tape.backward`.
    pub fn gradients(&self, tape: &mut Tape<T>, vars: &[Var]) -> Result<Vec<Tensor<T>>> {
        if vars.len() != self.params.len() {
            return Err(Error::Argument(format!("{} vars bound for {} parameters", vars.len(), self.params.len())));
        }
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| tape.take_grad(v).ok_or_else(|| Error::MissingGradient(p.name.clone())))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParameterStore<U> {
        ParameterStore {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), kind: p.kind, value: p.value.cast() })
                .collect(),
            running: self.running.clone(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.running == other.running
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.bitwise_eq(&b.value))
    }
}

pub fn count_parameters<T: Element>(store: &ParameterStore<T>) -> usize {
    store.params.iter().map(|p| p.value.numel()).sum()
}

struct Builder<'a, T: Element, R: ?Sized> {
    params: Vec<Parameter<T>>,
    running: BTreeMap<String, RunningStats>,
    norm: NormConfig,
    /// `None` allocates zero kernels.
    rng: Option<&'a mut R>,
}

impl<T: Element, R: Rng + ?Sized> Builder<'_, T, R> {
    fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) {
        self.params.push(Parameter { name, kind, value });
    }

    /// Kaiming normal with fan-in scaling, std = sqrt(gain / (cin * k^3)):
    /// gain 2 when the input comes out of a ReLU, 1 otherwise.
    fn conv(&mut self, path: &str, cin: usize, cout: usize, k: usize, bias: bool, after_relu: bool) {
        let gain = if after_relu { 2.0 } else { 1.0 };
        let std = (gain / (cin * k * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let shape = vec![cout, cin, k, k, k];
        let kernel = match self.rng.as_deref_mut() {
            Some(rng) => Tensor::from_fn(shape, |_| cast(normal.sample(rng))),
            None => Tensor::zeros(shape),
        };
        let kind = if k == 1 { ParamKind::PointwiseKernel } else { ParamKind::ConvKernel };
        self.push(format!("{path}.kernel"), kind, kernel);
        if bias {
            self.push(format!("{path}.bias"), ParamKind::ConvBias, Tensor::zeros(vec![cout]));
        }
    }

    fn norm(&mut self, path: &str, channels: usize) {
        self.push(format!("{path}.gamma"), ParamKind::NormScale, Tensor::ones(vec![channels]));
        self.push(format!("{path}.beta"), ParamKind::NormShift, Tensor::zeros(vec![channels]));
        if let NormConfig::Batch { momentum } = self.norm {
            self.running.insert(path.to_string(), RunningStats::new(channels, momentum));
        }
    }

    fn block(&mut self, path: &str, channels: usize) {
        self.norm(&format!("{path}.norm1"), channels);
        self.conv(&format!("{path}.conv1"), channels, channels, 3, false, true);
        self.norm(&format!("{path}.norm2"), channels);
        self.conv(&format!("{path}.conv2"), channels, channels, 3, false, true);
    }
}

pub(crate) fn init_conv_path() -> &'static str {
    "encoder.init_conv"
}

pub(crate) fn encoder_down_path(level: usize) -> String {
    format!("encoder.level{level}.down")
}

pub(crate) fn encoder_block_path(level: usize, block: usize) -> String {
    format!("encoder.level{level}.block{block}")
}

pub(crate) fn decoder_up_path(level: usize) -> String {
    format!("decoder.level{level}.up")
}

pub(crate) fn decoder_block_path(level: usize) -> String {
    format!("decoder.level{level}.block0")
}

pub(crate) fn decoder_end_path() -> &'static str {
    "decoder.end"
}

/// Allocate and initialize all parameters. Biases exist only on the initial
/// and the final convolution; every other convolution feeds a normalization.
pub fn build_model<T: Element, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParameterStore<T>> {
    build(config, Some(rng))
}

/// Same layout as [`build_model`] with all kernels zero.
pub(crate) fn zero_model<T: Element>(config: &ModelConfig) -> Result<ParameterStore<T>> {
    build::<T, rand_chacha::ChaCha8Rng>(config, None)
}

fn build<T: Element, R: Rng + ?Sized>(config: &ModelConfig, rng: Option<&mut R>) -> Result<ParameterStore<T>> {
    config.validate()?;
    let mut b = Builder { params: Vec::new(), running: BTreeMap::new(), norm: config.norm, rng };
    b.conv(init_conv_path(), config.in_channels, config.init_filters, 3, true, false);
    for (level, &blocks) in config.blocks_per_level.iter().enumerate() {
        let c = config.channels_at(level);
        if level > 0 {
            b.conv(&encoder_down_path(level), config.channels_at(level - 1), c, 3, false, false);
        }
        for blk in 0..blocks {
            b.block(&encoder_block_path(level, blk), c);
        }
    }
    for level in (0..config.levels() - 1).rev() {
        let c = config.channels_at(level);
        b.conv(&decoder_up_path(level), config.channels_at(level + 1), c, 1, false, false);
        b.block(&decoder_block_path(level), c);
    }
    b.conv(decoder_end_path(), config.init_filters, config.out_channels, 1, true, false);
    Ok(ParameterStore { config: config.clone(), params: b.params, running: b.running })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_count_matches_layer_sum() {
        let block = |c: usize| 2 * 27 * c * c + 4 * c;
        let expected = (4 * 32 * 27 + 32)
            + block(32)
            + 32 * 64 * 27 + 2 * block(64)
            + 64 * 128 * 27 + 2 * block(128)
            + 128 * 256 * 27 + 4 * block(256)
            + 256 * 128 + block(128)
            + 128 * 64 + block(64)
            + 64 * 32 + block(32)
            + 32 * 3 + 3;
        assert_eq!(expected, 18_798_595);
        let store: ParameterStore<f32> = build_model(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(count_parameters(&store), 18_798_595);
    }

    #[test]
    fn equal_seeds_equal_params() {
        let cfg = ModelConfig { init_filters: 8, ..Default::default() };
        let a: ParameterStore<f32> = build_model(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: ParameterStore<f32> = build_model(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c: ParameterStore<f32> = build_model(&cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn biases_only_at_ends_and_kinds() {
        let cfg = ModelConfig { init_filters: 8, ..Default::default() };
        let s: ParameterStore<f32> = build_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let biases: Vec<&str> =
            s.params.iter().filter(|p| p.kind == ParamKind::ConvBias).map(|p| p.name.as_str()).collect();
        assert_eq!(biases, ["encoder.init_conv.bias", "decoder.end.bias"]);
        assert_eq!(s.get("decoder.level2.up.kernel").unwrap().kind, ParamKind::PointwiseKernel);
        assert_eq!(s.get("encoder.level3.block3.conv2.kernel").unwrap().value.shape(), &[64, 64, 3, 3, 3]);
        let gamma = s.get("encoder.level1.block0.norm1.gamma").unwrap();
        assert_eq!((gamma.kind, gamma.value.numel()), (ParamKind::NormScale, 16));
    }

    #[test]
    fn init_gain_follows_input_activation() {
        let s: ParameterStore<f64> = build_model(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let var_times_fan_in = |name: &str| {
            let v = &s.get(name).unwrap().value;
            let fan_in = v.numel() / v.shape()[0];
            v.data().iter().map(|x| x * x).sum::<f64>() / v.numel() as f64 * fan_in as f64
        };
        for (name, gain) in [
            ("encoder.level2.block1.conv1.kernel", 2.0),
            ("decoder.level1.block0.conv2.kernel", 2.0),
            ("encoder.level3.down.kernel", 1.0),
            ("decoder.level2.up.kernel", 1.0),
            ("encoder.init_conv.kernel", 1.0),
        ] {
            let g = var_times_fan_in(name);
            assert!((g - gain).abs() < 0.05 * gain, "{name}: {g}");
        }
    }

    #[test]
    fn batch_norm_has_running_stats() {
        let cfg = ModelConfig { init_filters: 8, norm: NormConfig::Batch { momentum: 0.1 }, ..Default::default() };
        let s: ParameterStore<f32> = build_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.running.len(), 2 * (1 + 2 + 2 + 4 + 3));
        assert!(s.running.contains_key("decoder.level0.block0.norm2"));
    }
}
