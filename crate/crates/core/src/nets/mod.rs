//! Trainable networks: the disentangling encoder, the shortcut decoder, the
//! LBP and depth estimators, and the two-scale discriminators.
//!
//! All tensors are NCHW. Auxiliary maps and latent codes live at H/8.

mod chanops;
mod checkpoint;
pub mod convert;
mod im2col;
pub mod layers;
mod swap;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use layers::{Mode, ParamKind, Params};
pub use swap::Swap;

use crate::config::{join_list, FlatConfig};
use crate::dataio::MAP_STRIDE;
use crate::error::{Error, Result};
use layers::{resize_bilinear, run_blocks, sigmoid, upsample2, Conv2d, ConvBlock, Init, Linear, Visitor};

/// Architecture hyper-parameters. Defaults follow the published auxiliary
/// net widths; the encoder/decoder widths are our own choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub resolution: usize,
    /// Encoder stem widths at H/2, H/4, H/8.
    pub stem_channels: [usize; 3],
    /// Hidden width of each encoder branch.
    pub branch_channels: usize,
    pub liveness_channels: usize,
    pub content_channels: usize,
    pub lbp_channels: [usize; 3],
    pub depth_stem: usize,
    /// Widths of the three convs inside each depth block.
    pub depth_block: [usize; 3],
    pub depth_head: [usize; 2],
    pub disc_channels: [usize; 3],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            stem_channels: [32, 64, 128],
            branch_channels: 128,
            liveness_channels: 128,
            content_channels: 112,
            lbp_channels: [384, 128, 64],
            depth_stem: 64,
            depth_block: [128, 196, 128],
            depth_head: [128, 64],
            disc_channels: [64, 128, 256],
        }
    }
}

impl NetConfig {
    /// A few channels per layer; for gradient checks and fast tests.
    pub fn tiny(resolution: usize) -> Self {
        Self {
            resolution,
            stem_channels: [4, 6, 8],
            branch_channels: 8,
            liveness_channels: 4,
            content_channels: 4,
            lbp_channels: [8, 6, 4],
            depth_stem: 4,
            depth_block: [4, 6, 4],
            depth_head: [6, 4],
            disc_channels: [4, 6, 8],
        }
    }

    pub fn map_size(&self) -> usize {
        self.resolution / MAP_STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || !self.resolution.is_multiple_of(16) {
            // D2 sees H/2 and pools three times
            return Err(Error::Config(format!(
                "network resolution {} must be a multiple of 16",
                self.resolution
            )));
        }
        let all = self
            .stem_channels
            .iter()
            .chain(&self.lbp_channels)
            .chain(&self.depth_block)
            .chain(&self.depth_head)
            .chain(&self.disc_channels)
            .chain([&self.branch_channels, &self.liveness_channels, &self.content_channels, &self.depth_stem]);
        if all.into_iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn write_into(&self, c: &mut FlatConfig) {
        c.set("resolution", self.resolution);
        c.set("stem_channels", join_list(&self.stem_channels));
        c.set("branch_channels", self.branch_channels);
        c.set("liveness_channels", self.liveness_channels);
        c.set("content_channels", self.content_channels);
        c.set("lbp_channels", join_list(&self.lbp_channels));
        c.set("depth_stem", self.depth_stem);
        c.set("depth_block", join_list(&self.depth_block));
        c.set("depth_head", join_list(&self.depth_head));
        c.set("disc_channels", join_list(&self.disc_channels));
    }

    /// Consumes the architecture keys from `c`, falling back to defaults.
    pub fn take_from(c: &mut FlatConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            resolution: c.take_or("resolution", d.resolution)?,
            stem_channels: c.take_array("stem_channels", d.stem_channels)?,
            branch_channels: c.take_or("branch_channels", d.branch_channels)?,
            liveness_channels: c.take_or("liveness_channels", d.liveness_channels)?,
            content_channels: c.take_or("content_channels", d.content_channels)?,
            lbp_channels: c.take_array("lbp_channels", d.lbp_channels)?,
            depth_stem: c.take_or("depth_stem", d.depth_stem)?,
            depth_block: c.take_array("depth_block", d.depth_block)?,
            depth_head: c.take_array("depth_head", d.depth_head)?,
            disc_channels: c.take_array("disc_channels", d.disc_channels)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut c = FlatConfig::default();
        self.write_into(&mut c);
        c.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = FlatConfig::parse(text)?;
        let cfg = Self::take_from(&mut c)?;
        c.finish()?;
        Ok(cfg)
    }
}

/// Content and liveness features of a batch, plus the encoder stem
/// activations (H/2, H/4) the decoder uses as shortcuts.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub content: Tensor,
    pub liveness: Tensor,
    pub shortcuts: [Tensor; 2],
}

impl LatentCode {
    /// Channel concatenation (C, L): the latent code compared under latent reconstruction.
    pub fn joint(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.content, &self.liveness], 1)?)
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.content.dim(0)?)
    }

    /// Rows `[start, start+len)` of every tensor.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            content: self.content.narrow(0, start, len)?,
            liveness: self.liveness.narrow(0, start, len)?,
            shortcuts: [
                self.shortcuts[0].narrow(0, start, len)?,
                self.shortcuts[1].narrow(0, start, len)?,
            ],
        })
    }
}

/// Estimated LBP and depth maps, each (N, H/8, W/8).
#[derive(Debug, Clone)]
pub struct AuxMaps {
    pub lbp_map: Tensor,
    pub depth_map: Tensor,
}

fn check_image(x: &Tensor, resolution: usize, what: &str) -> Result<()> {
    match x.dims() {
        [_, 3, h, w] if *h == resolution && *w == resolution => Ok(()),
        d => Err(Error::Shape(format!(
            "{what}: expected (N, 3, {resolution}, {resolution}), got {d:?}"
        ))),
    }
}

#[derive(Debug)]
pub struct Encoder {
    resolution: usize,
    stem: Vec<ConvBlock>,
    liveness: (ConvBlock, Conv2d),
    content: (ConvBlock, Conv2d),
}

impl Encoder {
    fn new(cfg: &NetConfig, init: &mut Init) -> Result<Self> {
        let [s1, s2, s3] = cfg.stem_channels;
        let b = cfg.branch_channels;
        Ok(Self {
            resolution: cfg.resolution,
            stem: vec![
                ConvBlock::new(init, 3, s1, 2)?,
                ConvBlock::new(init, s1, s2, 2)?,
                ConvBlock::new(init, s2, s3, 2)?,
            ],
            liveness: (
                ConvBlock::new(init, s3, b, 1)?,
                Conv2d::new(init, b, cfg.liveness_channels, 1, true, false)?,
            ),
            content: (
                ConvBlock::new(init, s3, b, 1)?,
                Conv2d::new(init, b, cfg.content_channels, 1, true, false)?,
            ),
        })
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<LatentCode> {
        check_image(images, self.resolution, "encoder")?;
        let h1 = self.stem[0].forward(images, mode)?;
        let h2 = self.stem[1].forward(&h1, mode)?;
        let z = self.stem[2].forward(&h2, mode)?;
        let liveness = self.liveness.1.forward(&self.liveness.0.forward(&z, mode)?, mode)?;
        let content = self.content.1.forward(&self.content.0.forward(&z, mode)?, mode)?;
        Ok(LatentCode {
            content,
            liveness,
            shortcuts: [h1, h2],
        })
    }
}

impl Params for Encoder {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.stem.visit(&layers::join(prefix, "stem"), f);
        self.liveness.0.visit(&layers::join(prefix, "liveness.0"), f);
        self.liveness.1.visit(&layers::join(prefix, "liveness.1"), f);
        self.content.0.visit(&layers::join(prefix, "content.0"), f);
        self.content.1.visit(&layers::join(prefix, "content.1"), f);
    }
}

/// Mirror of the encoder stem with U-Net shortcuts and a sigmoid output.
#[derive(Debug)]
pub struct Decoder {
    channels: (usize, usize),
    fuse: ConvBlock,
    up: Vec<ConvBlock>,
    out: Conv2d,
}

impl Decoder {
    fn new(cfg: &NetConfig, init: &mut Init) -> Result<Self> {
        let [s1, s2, s3] = cfg.stem_channels;
        Ok(Self {
            channels: (cfg.content_channels, cfg.liveness_channels),
            fuse: ConvBlock::new(init, cfg.content_channels + cfg.liveness_channels, s3, 1)?,
            up: vec![
                ConvBlock::new(init, s3 + s2, s2, 1)?,
                ConvBlock::new(init, s2 + s1, s1, 1)?,
            ],
            out: Conv2d::new(init, s1, 3, 1, true, false)?,
        })
    }

    pub fn forward(&self, content: &Tensor, liveness: &Tensor, shortcuts: &[Tensor; 2], mode: Mode) -> Result<Tensor> {
        let (n, cc, h, w) = content.dims4()?;
        let (nl, cl, hl, wl) = liveness.dims4()?;
        if (nl, hl, wl) != (n, h, w) || (cc, cl) != self.channels {
            return Err(Error::Shape(format!(
                "decoder: content {:?} and liveness {:?} incompatible with channels {:?}",
                content.dims(),
                liveness.dims(),
                self.channels
            )));
        }
        let [s1, s2] = shortcuts;
        if s2.dims4()?.0 != n || s2.dims()[2..] != [2 * h, 2 * w] || s1.dims4()?.0 != n || s1.dims()[2..] != [4 * h, 4 * w] {
            return Err(Error::Shape(format!(
                "decoder: shortcuts {:?}, {:?} do not match latent {}x{}",
                s1.dims(),
                s2.dims(),
                h,
                w
            )));
        }
        let x = self.fuse.forward(&Tensor::cat(&[content, liveness], 1)?, mode)?;
        let x = self.up[0].forward(&Tensor::cat(&[&upsample2(&x)?, s2], 1)?, mode)?;
        let x = self.up[1].forward(&Tensor::cat(&[&upsample2(&x)?, s1], 1)?, mode)?;
        sigmoid(&self.out.forward(&upsample2(&x)?, mode)?)
    }
}

impl Params for Decoder {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.fuse.visit(&layers::join(prefix, "fuse"), f);
        self.up.visit(&layers::join(prefix, "up"), f);
        self.out.visit(&layers::join(prefix, "out"), f);
    }
}

/// Liveness features → single-channel LBP estimate at the same spatial size.
#[derive(Debug)]
pub struct LbpNet {
    in_channels: usize,
    blocks: Vec<ConvBlock>,
    pub out: Conv2d,
}

impl LbpNet {
    fn new(cfg: &NetConfig, init: &mut Init) -> Result<Self> {
        let [a, b, c] = cfg.lbp_channels;
        Ok(Self {
            in_channels: cfg.liveness_channels,
            blocks: vec![
                ConvBlock::new(init, cfg.liveness_channels, a, 1)?,
                ConvBlock::new(init, a, b, 1)?,
                ConvBlock::new(init, b, c, 1)?,
            ],
            out: Conv2d::new(init, c, 1, 1, true, false)?,
        })
    }

    /// Returns (N, h, w).
    pub fn forward(&self, liveness: &Tensor, mode: Mode) -> Result<Tensor> {
        match liveness.dims() {
            [_, c, _, _] if *c == self.in_channels => {}
            d => {
                return Err(Error::Shape(format!(
                    "lbp net: expected (N, {}, h, w), got {d:?}",
                    self.in_channels
                )))
            }
        }
        let x = run_blocks(&self.blocks, liveness, mode)?;
        Ok(self.out.forward(&x, mode)?.squeeze(1)?)
    }
}

impl Params for LbpNet {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.blocks.visit(&layers::join(prefix, "blocks"), f);
        self.out.visit(&layers::join(prefix, "out"), f);
    }
}

/// Image → depth estimate at H/8. Three pooled stages are resized to H/8,
/// concatenated, and reduced to one channel.
#[derive(Debug)]
pub struct DepthNet {
    resolution: usize,
    stem: ConvBlock,
    stages: Vec<Vec<ConvBlock>>,
    head: Vec<ConvBlock>,
    pub out: Conv2d,
}

impl DepthNet {
    fn new(cfg: &NetConfig, init: &mut Init) -> Result<Self> {
        let [a, b, c] = cfg.depth_block;
        let mut stages = Vec::new();
        let mut c_in = cfg.depth_stem;
        for _ in 0..3 {
            stages.push(vec![
                ConvBlock::new(init, c_in, a, 1)?,
                ConvBlock::new(init, a, b, 1)?,
                ConvBlock::new(init, b, c, 1)?,
            ]);
            c_in = c;
        }
        let [h1, h2] = cfg.depth_head;
        Ok(Self {
            resolution: cfg.resolution,
            stem: ConvBlock::new(init, 3, cfg.depth_stem, 1)?,
            stages,
            head: vec![ConvBlock::new(init, 3 * c, h1, 1)?, ConvBlock::new(init, h1, h2, 1)?],
            out: Conv2d::new(init, h2, 1, 1, true, false)?,
        })
    }

    /// Returns (N, H/8, W/8).
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        check_image(images, self.resolution, "depth net")?;
        let target = self.resolution / MAP_STRIDE;
        let mut x = self.stem.forward(images, mode)?;
        let mut pooled = Vec::with_capacity(3);
        for stage in &self.stages {
            x = layers::max_pool2(&run_blocks(stage, &x, mode)?)?;
            pooled.push(resize_bilinear(&x, target, target)?);
        }
        let x = run_blocks(&self.head, &Tensor::cat(&pooled, 1)?, mode)?;
        Ok(self.out.forward(&x, mode)?.squeeze(1)?)
    }
}

impl Params for DepthNet {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.stem.visit(&layers::join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&layers::join(prefix, &format!("stage{i}")), f);
        }
        self.head.visit(&layers::join(prefix, "head"), f);
        self.out.visit(&layers::join(prefix, "out"), f);
    }
}

/// conv/pool ×3 → flatten → fc with two logits (real, generated).
#[derive(Debug)]
pub struct Discriminator {
    input_size: usize,
    blocks: Vec<ConvBlock>,
    pub fc: Linear,
}

impl Discriminator {
    fn new(cfg: &NetConfig, input_size: usize, init: &mut Init) -> Result<Self> {
        let [a, b, c] = cfg.disc_channels;
        let side = input_size / 8;
        Ok(Self {
            input_size,
            blocks: vec![
                ConvBlock::new(init, 3, a, 1)?,
                ConvBlock::new(init, a, b, 1)?,
                ConvBlock::new(init, b, c, 1)?,
            ],
            fc: Linear::new(init, c * side * side, 2)?,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn conv_shapes(&self) -> Vec<Vec<usize>> {
        self.blocks.iter().map(|b| b.conv.weight.dims().to_vec()).collect()
    }

    /// (N, 2) logits for images already at this discriminator's input size.
    pub fn logits(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        check_image(images, self.input_size, "discriminator")?;
        let mut x = images.clone();
        for b in &self.blocks {
            x = layers::max_pool2(&b.forward(&x, mode)?)?;
        }
        self.fc.forward(&x.flatten_from(1)?, mode)
    }
}

impl Params for Discriminator {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.blocks.visit(&layers::join(prefix, "blocks"), f);
        self.fc.visit(&layers::join(prefix, "fc"), f);
    }
}

/// Names of the six parameter groups, in checkpoint order.
pub const NETWORKS: [&str; 6] = ["encoder", "decoder", "lbp_net", "depth_net", "disc1", "disc2"];

#[derive(Debug)]
pub struct ModelBundle {
    pub config: NetConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub lbp_net: LbpNet,
    pub depth_net: DepthNet,
    pub disc1: Discriminator,
    pub disc2: Discriminator,
}

impl ModelBundle {
    /// Fresh parameters; every network draws from its own seeded stream.
    pub fn new(config: &NetConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let dev = Device::Cpu;
        let init = |k: u64| Init::new(seed.wrapping_mul(0x100).wrapping_add(k), dtype, dev.clone());
        let r = config.resolution;
        Ok(Self {
            config: config.clone(),
            encoder: Encoder::new(config, &mut init(1))?,
            decoder: Decoder::new(config, &mut init(2))?,
            lbp_net: LbpNet::new(config, &mut init(3))?,
            depth_net: DepthNet::new(config, &mut init(4))?,
            disc1: Discriminator::new(config, r, &mut init(5))?,
            disc2: Discriminator::new(config, r / 2, &mut init(6))?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.encoder.stem[0].conv.weight.dtype()
    }

    pub fn network(&self, name: &str) -> Option<&dyn Params> {
        Some(match name {
            "encoder" => &self.encoder,
            "decoder" => &self.decoder,
            "lbp_net" => &self.lbp_net,
            "depth_net" => &self.depth_net,
            "disc1" => &self.disc1,
            "disc2" => &self.disc2,
            _ => return None,
        })
    }

    /// Every tensor (parameters and buffers) with `network.path` names.
    pub fn all_tensors(&self) -> Vec<(String, Var, ParamKind)> {
        let mut out = Vec::new();
        for name in NETWORKS {
            self.network(name)
                .expect("known network")
                .visit(name, &mut |n, v, k| out.push((n, v.clone(), k)));
        }
        out
    }

    pub fn trainable_of(&self, networks: &[&str]) -> Vec<(String, Var)> {
        networks
            .iter()
            .flat_map(|n| self.network(n).expect("known network").trainable(n))
            .collect()
    }

    pub fn generator_params(&self) -> Vec<(String, Var)> {
        self.trainable_of(&["encoder", "decoder", "lbp_net"])
    }

    pub fn discriminator_params(&self) -> Vec<(String, Var)> {
        self.trainable_of(&["disc1", "disc2"])
    }

    /// SHA-256 over names and raw bytes of one network's tensors, buffers included.
    pub fn param_hash(&self, network: &str) -> Result<String> {
        let net = self
            .network(network)
            .ok_or_else(|| Error::Config(format!("unknown network `{network}`")))?;
        hash_vars(&net.named(network, None))
    }

    pub fn param_hashes(&self) -> Result<BTreeMap<String, String>> {
        NETWORKS
            .iter()
            .map(|n| Ok((n.to_string(), self.param_hash(n)?)))
            .collect()
    }

    pub fn encode(&self, images: &Tensor, mode: Mode) -> Result<LatentCode> {
        self.encoder.forward(images, mode)
    }

    pub fn decode(&self, content: &Tensor, liveness: &Tensor, shortcuts: &[Tensor; 2], mode: Mode) -> Result<Tensor> {
        self.decoder.forward(content, liveness, shortcuts, mode)
    }

    pub fn lbp_map(&self, liveness: &Tensor, mode: Mode) -> Result<Tensor> {
        self.lbp_net.forward(liveness, mode)
    }

    pub fn depth_map(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.depth_net.forward(images, mode)
    }

    /// LBP map from the image's liveness features and depth map from the image itself.
    pub fn aux_maps(&self, images: &Tensor, mode: Mode) -> Result<AuxMaps> {
        let code = self.encode(images, mode)?;
        Ok(AuxMaps {
            lbp_map: self.lbp_map(&code.liveness, mode)?,
            depth_map: self.depth_map(images, mode)?,
        })
    }

    pub fn disc_logits(&self, images: &Tensor, scale: u8, mode: Mode) -> Result<Tensor> {
        match scale {
            1 => self.disc1.logits(images, mode),
            2 => self.disc2.logits(&images.avg_pool2d(2)?, mode),
            s => Err(Error::Config(format!("discriminator scale must be 1 or 2, got {s}"))),
        }
    }

    /// Probability that each image is real (softmax component 0), shape (N,).
    pub fn discriminate(&self, images: &Tensor, scale: u8, mode: Mode) -> Result<Tensor> {
        layers::real_probability(&self.disc_logits(images, scale, mode)?)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for (_, v, _) in self.all_tensors() {
            let s = v.as_tensor().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
    })
}

pub fn hash_vars(vars: &[(String, Var)]) -> Result<String> {
    let mut h = Sha256::new();
    for (name, v) in vars {
        h.update(name.as_bytes());
        h.update(tensor_bytes(v.as_tensor())?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
