//! 3D U-Net of ConvNeXt stages.
//!
//! Encoder stage s runs B_s blocks at C_s channels; stages are joined by
//! LN + 2³ stride-2 convolution. Each decoder level takes the coarser
//! features through a pointwise conv + LN + nearest 2× upsample,
//! concatenates the encoder skip, fuses 2C_s → C_s pointwise and runs B_s
//! blocks. The head is a pointwise conv to one channel clamped at zero.

use serde::{Deserialize, Serialize};

use crate::convnext::{BlockCache, ConvNextBlock};
use crate::error::{NnError, Result};
use crate::layers::{
    clamp_min0, clamp_min0_backward, concat, concat_backward, upsample2, upsample2_backward, DownConv, LayerNorm,
    LayerNormCache, Linear,
};
use crate::params::{Grads, ParamStore, Registry};
use crate::real::Real;
use crate::tensor::Tensor4;

pub const DEFAULT_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub blocks: Vec<usize>,
    pub channels: Vec<usize>,
    pub in_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    DEFAULT_KERNEL
}

impl UNetConfig {
    fn variant(blocks: &[usize], channels: &[usize]) -> Self {
        UNetConfig { blocks: blocks.to_vec(), channels: channels.to_vec(), in_channels: channels[0], kernel: DEFAULT_KERNEL }
    }

    pub fn nano() -> Self {
        Self::variant(&[1, 1, 1], &[8, 16, 32])
    }

    pub fn tiny() -> Self {
        Self::variant(&[1, 2, 3, 4, 5], &[8, 16, 32, 64, 128])
    }

    pub fn base() -> Self {
        Self::variant(&[1, 2, 4, 4, 6], &[16, 32, 64, 128, 256])
    }

    pub fn large() -> Self {
        Self::variant(&[1, 2, 4, 6, 8], &[24, 48, 96, 192, 384])
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "nano" => Ok(Self::nano()),
            "tiny" => Ok(Self::tiny()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            other => Err(NnError::Config(format!("unknown U-Net variant '{other}' (nano, tiny, base, large)"))),
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.len() != self.channels.len() {
            return Err(NnError::Config(format!(
                "U-Net needs equal, non-empty block and channel tuples, got {:?} / {:?}",
                self.blocks, self.channels
            )));
        }
        if self.blocks.iter().chain(&self.channels).any(|&v| v == 0) || self.in_channels == 0 {
            return Err(NnError::Config("U-Net block and channel counts must be at least 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(NnError::Config(format!("depthwise kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn check_resolution(&self, r: usize) -> Result<()> {
        let f = 1usize << (self.stages() - 1);
        if r == 0 || r % f != 0 {
            return Err(NnError::Config(format!("resolution {r} is not divisible by {f} for {} stages", self.stages())));
        }
        Ok(())
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> Result<usize> {
        let mut reg = Registry::new();
        UNet::new(&mut reg, "unet", self)?;
        Ok(reg.count())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub config: UNetConfig,
    stem: Option<Linear>,
    encoder: Vec<Vec<ConvNextBlock>>,
    /// Entry s joins stage s to stage s + 1.
    downs: Vec<(LayerNorm, DownConv)>,
    /// Entry s lifts level s + 1 to level s.
    ups: Vec<(Linear, LayerNorm)>,
    fuses: Vec<Linear>,
    decoder: Vec<Vec<ConvNextBlock>>,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct UNetCache<T> {
    input: Tensor4<T>,
    encoder: Vec<Vec<BlockCache<T>>>,
    skips: Vec<Tensor4<T>>,
    down_norm: Vec<LayerNormCache<T>>,
    down_in: Vec<Tensor4<T>>,
    up_in: Vec<Tensor4<T>>,
    up_norm: Vec<LayerNormCache<T>>,
    fuse_in: Vec<Tensor4<T>>,
    decoder: Vec<Vec<BlockCache<T>>>,
    head_in: Tensor4<T>,
    head_out: Vec<T>,
}

impl UNet {
    pub fn new(reg: &mut Registry, name: &str, config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let c = &config.channels;
        let k = config.kernel;
        let s_count = config.stages();
        let stem = (config.in_channels != c[0]).then(|| Linear::new(reg, &format!("{name}.stem"), config.in_channels, c[0]));
        let mut encoder = Vec::new();
        let mut downs = Vec::new();
        for s in 0..s_count {
            if s > 0 {
                let ln = LayerNorm::new(reg, &format!("{name}.down{s}.norm"), c[s - 1]);
                let conv = DownConv::new(reg, &format!("{name}.down{s}.conv"), c[s - 1], c[s]);
                downs.push((ln, conv));
            }
            encoder.push(
                (0..config.blocks[s]).map(|b| ConvNextBlock::new(reg, &format!("{name}.enc{s}.{b}"), c[s], k)).collect(),
            );
        }
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut decoder = Vec::new();
        for s in 0..s_count - 1 {
            let lin = Linear::new(reg, &format!("{name}.up{s}.conv"), c[s + 1], c[s]);
            let ln = LayerNorm::new(reg, &format!("{name}.up{s}.norm"), c[s]);
            ups.push((lin, ln));
            fuses.push(Linear::new(reg, &format!("{name}.fuse{s}"), 2 * c[s], c[s]));
            decoder.push(
                (0..config.blocks[s]).map(|b| ConvNextBlock::new(reg, &format!("{name}.dec{s}.{b}"), c[s], k)).collect(),
            );
        }
        let head = Linear::new(reg, &format!("{name}.head"), c[0], 1);
        Ok(UNet { config: config.clone(), stem, encoder, downs, ups, fuses, decoder, head })
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, UNetCache<T>)> {
        let [d, h, w, ch] = x.shape();
        if ch != self.config.in_channels {
            return Err(NnError::Config(format!("U-Net expects {} input channels, got {ch}", self.config.in_channels)));
        }
        for dim in [d, h, w] {
            self.config.check_resolution(dim)?;
        }
        let c = &self.config.channels;
        let s_count = self.config.stages();
        let mut cur = match &self.stem {
            Some(stem) => x.with_channels(c[0], stem.forward(p, x.data())),
            None => x.clone(),
        };
        let mut enc_caches = Vec::with_capacity(s_count);
        let mut skips = Vec::with_capacity(s_count);
        let mut down_norm = Vec::new();
        let mut down_in = Vec::new();
        for s in 0..s_count {
            if s > 0 {
                let (ln, conv) = &self.downs[s - 1];
                let (normed, cache) = ln.forward(p, cur.data());
                let normed = cur.with_channels(c[s - 1], normed);
                cur = conv.forward(p, &normed);
                down_norm.push(cache);
                down_in.push(normed);
            }
            let mut caches = Vec::with_capacity(self.encoder[s].len());
            for block in &self.encoder[s] {
                let (y, cache) = block.forward(p, &cur)?;
                caches.push(cache);
                cur = y;
            }
            enc_caches.push(caches);
            skips.push(cur.clone());
        }
        let n = s_count - 1;
        let mut up_in = vec![Tensor4::zeros([0; 4]); n];
        let mut up_norm = Vec::with_capacity(n);
        let mut fuse_in = vec![Tensor4::zeros([0; 4]); n];
        let mut dec_caches: Vec<Vec<BlockCache<T>>> = (0..n).map(|_| Vec::new()).collect();
        let mut norm_slots: Vec<Option<LayerNormCache<T>>> = (0..n).map(|_| None).collect();
        for s in (0..n).rev() {
            let (lin, ln) = &self.ups[s];
            let lifted = lin.forward(p, cur.data());
            let (normed, cache) = ln.forward(p, &lifted);
            let up = upsample2(&cur.with_channels(c[s], normed));
            let joined = concat(&up, &skips[s]);
            let fused = joined.with_channels(c[s], self.fuses[s].forward(p, joined.data()));
            up_in[s] = std::mem::replace(&mut cur, fused);
            norm_slots[s] = Some(cache);
            fuse_in[s] = joined;
            for block in &self.decoder[s] {
                let (y, cache) = block.forward(p, &cur)?;
                dec_caches[s].push(cache);
                cur = y;
            }
        }
        up_norm.extend(norm_slots.into_iter().map(|c| c.expect("decoder level visited")));
        let head_out = self.head.forward(p, cur.data());
        let y = cur.with_channels(1, clamp_min0(&head_out));
        let cache = UNetCache {
            input: x.clone(),
            encoder: enc_caches,
            skips,
            down_norm,
            down_in,
            up_in,
            up_norm,
            fuse_in,
            decoder: dec_caches,
            head_in: cur,
            head_out,
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Real>(&self, p: &ParamStore<T>, g: &mut Grads<T>, cache: &UNetCache<T>, dy: &Tensor4<T>) -> Tensor4<T> {
        let c = &self.config.channels;
        let s_count = self.config.stages();
        let d_head = clamp_min0_backward(&cache.head_out, dy.data());
        let mut d = cache.head_in.with_channels(c[0], self.head.backward(p, g, cache.head_in.data(), &d_head));
        let mut d_skips: Vec<Option<Tensor4<T>>> = (0..s_count).map(|_| None).collect();
        for s in 0..s_count - 1 {
            for (block, bc) in self.decoder[s].iter().zip(&cache.decoder[s]).rev() {
                d = block.backward(p, g, bc, &d);
            }
            let joined = &cache.fuse_in[s];
            let d_joined = joined.with_channels(2 * c[s], self.fuses[s].backward(p, g, joined.data(), d.data()));
            let (d_up, d_skip) = concat_backward(&d_joined, c[s]);
            d_skips[s] = Some(d_skip);
            let d_normed = upsample2_backward(&d_up);
            let (lin, ln) = &self.ups[s];
            let d_lifted = ln.backward(p, g, &cache.up_norm[s], d_normed.data());
            let src = &cache.up_in[s];
            d = src.with_channels(c[s + 1], lin.backward(p, g, src.data(), &d_lifted));
        }
        // d now holds the gradient at the bottom stage output
        for s in (0..s_count).rev() {
            if let Some(extra) = d_skips[s].take() {
                d = d.add(&extra);
            }
            for (block, bc) in self.encoder[s].iter().zip(&cache.encoder[s]).rev() {
                d = block.backward(p, g, bc, &d);
            }
            if s > 0 {
                let (ln, conv) = &self.downs[s - 1];
                let d_normed = conv.backward(p, g, &cache.down_in[s - 1], &d);
                let dx = ln.backward(p, g, &cache.down_norm[s - 1], d_normed.data());
                d = cache.skips[s - 1].with_channels(c[s - 1], dx);
            }
        }
        match &self.stem {
            Some(stem) => {
                let x = &cache.input;
                x.with_channels(x.channels(), stem.backward(p, g, x.data(), d.data()))
            }
            None => d,
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ConvNextBlock> {
        self.encoder.iter().flatten().chain(self.decoder.iter().flatten())
    }
}
