//! 3D ConvNeXt block:
//! y = x + γ ⊙ project(GELU(expand(LN(depthwise(x))))).

use crate::error::{NnError, Result};
use crate::layers::{gelu, DepthwiseConv, LayerNorm, LayerNormCache, LayerScale, Linear};
use crate::params::{Grads, ParamStore, Registry};
use crate::real::Real;
use crate::tensor::Tensor4;

pub const EXPANSION: usize = 4;
pub const LAYER_SCALE_INIT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvNextBlock {
    pub depthwise: DepthwiseConv,
    pub norm: LayerNorm,
    pub expand: Linear,
    pub project: Linear,
    pub scale: LayerScale,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    input: Tensor4<T>,
    conv: Tensor4<T>,
    norm: LayerNormCache<T>,
    normed: Vec<T>,
    gelu_grad: Vec<T>,
    activated: Vec<T>,
    projected: Vec<T>,
}

impl ConvNextBlock {
    pub fn new(reg: &mut Registry, name: &str, channels: usize, kernel: usize) -> Self {
        ConvNextBlock {
            depthwise: DepthwiseConv::new(reg, &format!("{name}.dwconv"), channels, kernel),
            norm: LayerNorm::new(reg, &format!("{name}.norm"), channels),
            expand: Linear::new(reg, &format!("{name}.pwconv1"), channels, EXPANSION * channels),
            project: Linear::new(reg, &format!("{name}.pwconv2"), EXPANSION * channels, channels),
            scale: LayerScale::new(reg, &format!("{name}.gamma"), channels, LAYER_SCALE_INIT),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, BlockCache<T>)> {
        if x.channels() != self.channels {
            return Err(NnError::Config(format!(
                "ConvNeXt block expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        let conv = self.depthwise.forward(p, x);
        let (normed, norm) = self.norm.forward(p, conv.data());
        let hidden = self.expand.forward(p, &normed);
        let (activated, gelu_grad) = gelu(&hidden);
        let projected = self.project.forward(p, &activated);
        let branch = self.scale.forward(p, &projected);
        let out: Vec<T> = x.data().iter().zip(&branch).map(|(&a, &b)| a + b).collect();
        let y = x.with_channels(self.channels, out);
        Ok((y, BlockCache { input: x.clone(), conv, norm, normed, gelu_grad, activated, projected }))
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, g: &mut Grads<T>, cache: &BlockCache<T>, dy: &Tensor4<T>) -> Tensor4<T> {
        let d_proj = self.scale.backward(p, g, &cache.projected, dy.data());
        let d_act = self.project.backward(p, g, &cache.activated, &d_proj);
        let d_hidden: Vec<T> = d_act.iter().zip(&cache.gelu_grad).map(|(&a, &b)| a * b).collect();
        let d_normed = self.expand.backward(p, g, &cache.normed, &d_hidden);
        let d_conv = self.norm.backward(p, g, &cache.norm, &d_normed);
        let d_conv = cache.conv.with_channels(self.channels, d_conv);
        let dx = self.depthwise.backward(p, g, &cache.input, &d_conv);
        dy.add(&dx)
    }
}
