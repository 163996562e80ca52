use rand::Rng;

use super::{Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::kernels::{conv_out_len, conv_transpose_out_len};
use crate::tensor::{Graph, Tensor, Var};

pub const PRELU_INIT: f64 = 0.25;
pub const GLN_EPS: f64 = 1e-8;

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

/// `[C_in, T] → [C_out, T_out]` convolution. Parameters: `C_out·C_in·K + C_out`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            uniform(rng, &[out_channels, in_channels, kernel], in_channels * kernel),
        )?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros([out_channels]))?;
        Ok(Conv1d { weight, bias, in_channels, out_channels, kernel, stride, padding })
    }

    pub fn pointwise(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(store, name, in_channels, out_channels, 1, 1, 0, rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d(x, p[self.weight], Some(p[self.bias]), self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel + self.out_channels
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        conv_out_len(t_in, self.kernel, self.stride, self.padding).unwrap_or(0)
    }

    pub fn macs(&self, t_in: usize) -> u64 {
        (self.out_channels * self.in_channels * self.kernel * self.out_len(t_in)) as u64
    }
}

/// `[C_in, T] → [C_out, (T−1)·S − 2P + K]`, weight `[C_in, C_out, K]`.
/// Parameters: `C_in·C_out·K + C_out`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            uniform(rng, &[in_channels, out_channels, kernel], out_channels * kernel),
        )?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros([out_channels]))?;
        Ok(ConvTranspose1d { weight, bias, in_channels, out_channels, kernel, stride, padding })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose1d(x, p[self.weight], Some(p[self.bias]), self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel + self.out_channels
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        conv_transpose_out_len(t_in, self.kernel, self.stride, self.padding).unwrap_or(0)
    }

    pub fn macs(&self, t_in: usize) -> u64 {
        (self.in_channels * self.out_channels * self.kernel * t_in) as u64
    }
}

/// Per-channel strided convolution. Parameters: `C·K + C`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DepthwiseConv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), uniform(rng, &[channels, 1, kernel], kernel))?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros([channels]))?;
        Ok(DepthwiseConv1d { weight, bias, channels, kernel, stride, padding })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.depthwise_conv1d(x, p[self.weight], p[self.bias], self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.channels * self.kernel + self.channels
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        conv_out_len(t_in, self.kernel, self.stride, self.padding).unwrap_or(0)
    }

    pub fn macs(&self, t_in: usize) -> u64 {
        (self.channels * self.kernel * self.out_len(t_in)) as u64
    }
}

/// One learned negative slope per channel. Parameters: `C`.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: ParamId,
    pub channels: usize,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let slope = store.register(format!("{name}.slope"), Tensor::full([channels], PRELU_INIT))?;
        Ok(PRelu { slope, channels })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.prelu(x, p[self.slope])
    }

    pub fn param_count(&self) -> usize {
        self.channels
    }
}

/// Global layer norm with per-channel affine. Parameters: `2C`.
#[derive(Clone, Debug)]
pub struct GlobalLayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl GlobalLayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), Tensor::full([channels], 1.0))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros([channels]))?;
        Ok(GlobalLayerNorm { gamma, beta, channels })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.global_layer_norm(x, p[self.gamma], p[self.beta], GLN_EPS)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}
