//! Encoder/decoder pair built from adjusted convolution blocks.
//!
//! The encoder emits two tensors from one pass: a sigmoid-bounded latent
//! carrying the restoration information, and a full-resolution skip tensor
//! carrying image semantics straight to the decoder. A bypass switch runs
//! decode(encode(x)) directly, which is the path the first training phase
//! uses while the CA stays out of the loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::layers::{BatchNorm, Conv2dLayer, ConvT2dLayer, Mode, Module, TResult};
use crate::tensor::{Element, PaddingMode, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Spatial halvings between input and latent.
    pub downsample_stages: usize,
    pub base_filters: usize,
    pub latent_channels: usize,
    pub skip_channels: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            height: 32,
            width: 32,
            channels: 3,
            downsample_stages: 2,
            base_filters: 32,
            latent_channels: 16,
            skip_channels: 16,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.downsample_stages;
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^{}",
                self.height, self.width, self.downsample_stages
            )));
        }
        if self.base_filters == 0 || self.latent_channels == 0 || self.skip_channels == 0 || self.channels == 0 {
            return Err(Error::Config("autoencoder channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Latent lattice dims (height, width).
    pub fn latent_dims(&self) -> (usize, usize) {
        let div = 1 << self.downsample_stages;
        (self.height / div, self.width / div)
    }

    fn widest(&self) -> usize {
        self.base_filters << self.downsample_stages
    }
}

/// One encoder pass: latent in [0,1] plus the full-resolution skip tensor.
pub struct EncodeOutput<E: Element> {
    pub latent: Tensor<E>,
    pub skip: Tensor<E>,
}

enum BlockConv<E: Element> {
    Normal(Conv2dLayer<E>),
    Transposed(ConvT2dLayer<E>),
}

enum BlockAct {
    Swish,
    Sigmoid,
}

/// Adjusted convolution block: conv (no activation) -> batch norm -> swish.
/// The output-layer variant drops the batch norm and finishes with a sigmoid.
struct AdjustedConvBlock<E: Element> {
    conv: BlockConv<E>,
    bn: Option<BatchNorm<E>>,
    act: BlockAct,
}

impl<E: Element> AdjustedConvBlock<E> {
    fn conv(name: &str, k: usize, ci: usize, co: usize, stride: usize, rng: &mut ChaCha8Rng) -> TResult<Self> {
        Ok(AdjustedConvBlock {
            conv: BlockConv::Normal(Conv2dLayer::new(
                name,
                k,
                ci,
                co,
                stride,
                PaddingMode::Zero,
                false,
                rng,
            )?),
            bn: Some(BatchNorm::new(&format!("{name}.bn"), co)?),
            act: BlockAct::Swish,
        })
    }

    fn transposed(name: &str, ci: usize, co: usize, stride: usize, rng: &mut ChaCha8Rng) -> TResult<Self> {
        Ok(AdjustedConvBlock {
            conv: BlockConv::Transposed(ConvT2dLayer::new(name, 3, ci, co, stride, false, rng)?),
            bn: Some(BatchNorm::new(&format!("{name}.bn"), co)?),
            act: BlockAct::Swish,
        })
    }

    fn output(name: &str, k: usize, ci: usize, co: usize, rng: &mut ChaCha8Rng) -> TResult<Self> {
        Ok(AdjustedConvBlock {
            conv: BlockConv::Normal(Conv2dLayer::new(
                name,
                k,
                ci,
                co,
                1,
                PaddingMode::Zero,
                true,
                rng,
            )?),
            bn: None,
            act: BlockAct::Sigmoid,
        })
    }

    fn forward(&mut self, tape: &mut Tape<E>, x: &Var<E>, mode: Mode) -> TResult<Var<E>> {
        let mut h = match &self.conv {
            BlockConv::Normal(c) => c.forward(tape, x)?,
            BlockConv::Transposed(c) => c.forward(tape, x)?,
        };
        if let Some(bn) = &mut self.bn {
            h = bn.forward(tape, &h, mode)?;
        }
        match self.act {
            BlockAct::Swish => tape.swish(&h),
            BlockAct::Sigmoid => tape.sigmoid(&h),
        }
    }
}

impl<E: Element> Module<E> for AdjustedConvBlock<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&crate::tensor::Param<E>)) {
        match &self.conv {
            BlockConv::Normal(c) => c.visit_params(f),
            BlockConv::Transposed(c) => c.visit_params(f),
        }
        if let Some(bn) = &self.bn {
            bn.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::tensor::Param<E>)) {
        match &mut self.conv {
            BlockConv::Normal(c) => c.visit_params_mut(f),
            BlockConv::Transposed(c) => c.visit_params_mut(f),
        }
        if let Some(bn) = &mut self.bn {
            bn.visit_params_mut(f);
        }
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(String, Vec<f64>)) {
        if let Some(bn) = &self.bn {
            bn.visit_buffers(f);
        }
    }
    fn load_buffer(&mut self, name: &str, values: &[f64]) -> bool {
        self.bn.as_mut().map(|bn| bn.load_buffer(name, values)).unwrap_or(false)
    }
}

pub struct Autoencoder<E: Element> {
    pub config: AeConfig,
    enc_in: AdjustedConvBlock<E>,
    skip_block: AdjustedConvBlock<E>,
    skip_proj: Conv2dLayer<E>,
    enc_down: Vec<AdjustedConvBlock<E>>,
    enc_bottleneck: AdjustedConvBlock<E>,
    dec_in: AdjustedConvBlock<E>,
    dec_up: Vec<AdjustedConvBlock<E>>,
    dec_skip_proj: AdjustedConvBlock<E>,
    dec_fuse: AdjustedConvBlock<E>,
    dec_fuse2: AdjustedConvBlock<E>,
    dec_out: AdjustedConvBlock<E>,
}

impl<E: Element> Autoencoder<E> {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bf = config.base_filters;
        let enc_in = AdjustedConvBlock::conv("ae.enc.in", 3, config.channels, bf, 1, &mut rng)?;
        // widen the skip path's receptive field before projecting it down
        let skip_block = AdjustedConvBlock::conv("ae.enc.skip_block", 3, bf, bf, 1, &mut rng)?;
        let skip_proj = Conv2dLayer::new(
            "ae.enc.skip",
            1,
            bf,
            config.skip_channels,
            1,
            PaddingMode::Zero,
            true,
            &mut rng,
        )?;
        let mut enc_down = Vec::new();
        let mut width = bf;
        for s in 0..config.downsample_stages {
            enc_down.push(AdjustedConvBlock::conv(
                &format!("ae.enc.down{s}"),
                3,
                width,
                width * 2,
                2,
                &mut rng,
            )?);
            width *= 2;
        }
        let enc_bottleneck =
            AdjustedConvBlock::output("ae.enc.bottleneck", 3, width, config.latent_channels, &mut rng)?;
        let dec_in =
            AdjustedConvBlock::conv("ae.dec.in", 3, config.latent_channels, width, 1, &mut rng)?;
        let mut dec_up = Vec::new();
        for s in 0..config.downsample_stages {
            dec_up.push(AdjustedConvBlock::transposed(
                &format!("ae.dec.up{s}"),
                width,
                width / 2,
                2,
                &mut rng,
            )?);
            width /= 2;
        }
        let dec_skip_proj =
            AdjustedConvBlock::conv("ae.dec.skip", 1, width, config.skip_channels, 1, &mut rng)?;
        // post-merge blocks: give the decoder room to suppress skip noise
        let dec_fuse = AdjustedConvBlock::conv(
            "ae.dec.fuse",
            3,
            config.skip_channels,
            config.skip_channels,
            1,
            &mut rng,
        )?;
        let dec_fuse2 = AdjustedConvBlock::conv(
            "ae.dec.fuse2",
            3,
            config.skip_channels,
            config.skip_channels,
            1,
            &mut rng,
        )?;
        let dec_out = AdjustedConvBlock::output(
            "ae.dec.out",
            3,
            config.skip_channels,
            config.channels,
            &mut rng,
        )?;
        Ok(Autoencoder {
            config,
            enc_in,
            skip_block,
            skip_proj,
            enc_down,
            enc_bottleneck,
            dec_in,
            dec_up,
            dec_skip_proj,
            dec_fuse,
            dec_fuse2,
            dec_out,
        })
    }

    fn check_input(&self, x: &Var<E>) -> TResult<()> {
        let want = [
            x.shape()[0],
            self.config.height,
            self.config.width,
            self.config.channels,
        ];
        if x.shape() != want {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "encode",
                detail: format!("input {:?}, configured {:?}", x.shape(), &want[1..]),
            });
        }
        Ok(())
    }

    /// Traced encoder: (latent, skip).
    pub fn encode_t(&mut self, tape: &mut Tape<E>, x: &Var<E>, mode: Mode) -> TResult<(Var<E>, Var<E>)> {
        self.check_input(x)?;
        let f0 = self.enc_in.forward(tape, x, mode)?;
        let s0 = self.skip_block.forward(tape, &f0, mode)?;
        let skip = self.skip_proj.forward(tape, &s0)?;
        let mut h = f0;
        for block in &mut self.enc_down {
            h = block.forward(tape, &h, mode)?;
        }
        let latent = self.enc_bottleneck.forward(tape, &h, mode)?;
        Ok((latent, skip))
    }

    /// Traced decoder: merges the skip by element-wise addition once the
    /// transposed stages restore full resolution.
    pub fn decode_t(
        &mut self,
        tape: &mut Tape<E>,
        latent: &Var<E>,
        skip: &Var<E>,
        mode: Mode,
    ) -> TResult<Var<E>> {
        let mut h = self.dec_in.forward(tape, latent, mode)?;
        for block in &mut self.dec_up {
            h = block.forward(tape, &h, mode)?;
        }
        let h = self.dec_skip_proj.forward(tape, &h, mode)?;
        let h = tape.add(&h, skip)?;
        let h = self.dec_fuse.forward(tape, &h, mode)?;
        let h = self.dec_fuse2.forward(tape, &h, mode)?;
        self.dec_out.forward(tape, &h, mode)
    }

    /// Traced bypass: decode(encode(x)), the CA switched out.
    pub fn forward_bypass_t(&mut self, tape: &mut Tape<E>, x: &Var<E>, mode: Mode) -> TResult<Var<E>> {
        let (latent, skip) = self.encode_t(tape, x, mode)?;
        self.decode_t(tape, &latent, &skip, mode)
    }

    /// Eval-mode encoder over plain tensors.
    pub fn encode(&mut self, image: &ImageBatch) -> Result<EncodeOutput<E>> {
        let mut tape = Tape::eval();
        let x = tape.constant(&image.to_tensor()?);
        let (latent, skip) = self.encode_t(&mut tape, &x, Mode::Eval)?;
        Ok(EncodeOutput {
            latent: latent.value().clone(),
            skip: skip.value().clone(),
        })
    }

    /// Eval-mode decoder back to image space.
    pub fn decode(&mut self, latent: &Tensor<E>, skip: &Tensor<E>) -> Result<ImageBatch> {
        let mut tape = Tape::eval();
        let l = tape.constant(latent);
        let s = tape.constant(skip);
        let out = self.decode_t(&mut tape, &l, &s, Mode::Eval)?;
        ImageBatch::from_tensor(out.value())
    }

    /// Eval-mode bypass.
    pub fn forward_bypass(&mut self, image: &ImageBatch) -> Result<ImageBatch> {
        let mut tape = Tape::eval();
        let x = tape.constant(&image.to_tensor()?);
        let out = self.forward_bypass_t(&mut tape, &x, Mode::Eval)?;
        ImageBatch::from_tensor(out.value())
    }
}

impl<E: Element> Module<E> for Autoencoder<E> {
    fn visit_params(&self, f: &mut dyn FnMut(&crate::tensor::Param<E>)) {
        self.enc_in.visit_params(f);
        self.skip_block.visit_params(f);
        self.skip_proj.visit_params(f);
        for b in &self.enc_down {
            b.visit_params(f);
        }
        self.enc_bottleneck.visit_params(f);
        self.dec_in.visit_params(f);
        for b in &self.dec_up {
            b.visit_params(f);
        }
        self.dec_skip_proj.visit_params(f);
        self.dec_fuse.visit_params(f);
        self.dec_fuse2.visit_params(f);
        self.dec_out.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::tensor::Param<E>)) {
        self.enc_in.visit_params_mut(f);
        self.skip_block.visit_params_mut(f);
        self.skip_proj.visit_params_mut(f);
        for b in &mut self.enc_down {
            b.visit_params_mut(f);
        }
        self.enc_bottleneck.visit_params_mut(f);
        self.dec_in.visit_params_mut(f);
        for b in &mut self.dec_up {
            b.visit_params_mut(f);
        }
        self.dec_skip_proj.visit_params_mut(f);
        self.dec_fuse.visit_params_mut(f);
        self.dec_fuse2.visit_params_mut(f);
        self.dec_out.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(String, Vec<f64>)) {
        self.enc_in.visit_buffers(f);
        self.skip_block.visit_buffers(f);
        for b in &self.enc_down {
            b.visit_buffers(f);
        }
        self.dec_in.visit_buffers(f);
        for b in &self.dec_up {
            b.visit_buffers(f);
        }
        self.dec_skip_proj.visit_buffers(f);
        self.dec_fuse.visit_buffers(f);
        self.dec_fuse2.visit_buffers(f);
    }
    fn load_buffer(&mut self, name: &str, values: &[f64]) -> bool {
        if self.enc_in.load_buffer(name, values) {
            return true;
        }
        if self.skip_block.load_buffer(name, values) {
            return true;
        }
        for b in &mut self.enc_down {
            if b.load_buffer(name, values) {
                return true;
            }
        }
        if self.dec_in.load_buffer(name, values) {
            return true;
        }
        for b in &mut self.dec_up {
            if b.load_buffer(name, values) {
                return true;
            }
        }
        if self.dec_skip_proj.load_buffer(name, values) {
            return true;
        }
        if self.dec_fuse.load_buffer(name, values) {
            return true;
        }
        self.dec_fuse2.load_buffer(name, values)
    }
}

/// Encoder + decoder parameter count straight from the configuration,
/// without building the model. Golden-value regression target.
pub fn parameter_count(config: &AeConfig) -> usize {
    let bf = config.base_filters;
    let stages = config.downsample_stages;
    let widest = config.widest();
    let conv = |k: usize, ci: usize, co: usize| k * k * ci * co;
    let bn = |c: usize| 2 * c;
    let mut n = 0;
    // encoder
    n += conv(3, config.channels, bf) + bn(bf);
    n += conv(3, bf, bf) + bn(bf); // skip block
    n += conv(1, bf, config.skip_channels) + config.skip_channels; // skip proj + bias
    let mut w = bf;
    for _ in 0..stages {
        n += conv(3, w, w * 2) + bn(w * 2);
        w *= 2;
    }
    n += conv(3, widest, config.latent_channels) + config.latent_channels; // bottleneck + bias
    // decoder
    n += conv(3, config.latent_channels, widest) + bn(widest);
    let mut w = widest;
    for _ in 0..stages {
        n += conv(3, w / 2, w) + bn(w / 2); // transposed kernel [3,3,co,ci]
        w /= 2;
    }
    n += conv(1, bf, config.skip_channels) + bn(config.skip_channels);
    n += 2 * (conv(3, config.skip_channels, config.skip_channels) + bn(config.skip_channels));
    n += conv(3, config.skip_channels, config.channels) + config.channels;
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::toy_images;
    use crate::layers::param_count;

    fn small_config() -> AeConfig {
        AeConfig {
            height: 16,
            width: 16,
            channels: 3,
            downsample_stages: 2,
            base_filters: 8,
            latent_channels: 6,
            skip_channels: 4,
        }
    }

    #[test]
    fn encode_shapes_and_range() {
        let mut ae = Autoencoder::<f32>::new(small_config(), 3).unwrap();
        let imgs = toy_images(2, 16, 16, 7);
        let mut tape = Tape::new();
        let x = tape.constant(&imgs.to_tensor().unwrap());
        let (latent, skip) = ae.encode_t(&mut tape, &x, Mode::Train).unwrap();
        assert_eq!(latent.shape(), &[2, 4, 4, 6]);
        assert_eq!(skip.shape(), &[2, 16, 16, 4]);
        assert!(latent.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn default_config_compresses_16x() {
        let cfg = AeConfig::default();
        let (lh, lw) = cfg.latent_dims();
        assert_eq!((lh, lw), (8, 8));
        assert_eq!((cfg.height * cfg.width) / (lh * lw), 16);
    }

    #[test]
    fn decode_restores_shape_and_range() {
        let mut ae = Autoencoder::<f32>::new(small_config(), 3).unwrap();
        let imgs = toy_images(2, 16, 16, 7);
        let mut tape = Tape::new();
        let x = tape.constant(&imgs.to_tensor().unwrap());
        let out = ae.forward_bypass_t(&mut tape, &x, Mode::Train).unwrap();
        assert_eq!(out.shape(), &[2, 16, 16, 3]);
        assert!(out.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn eval_calls_are_bit_identical_and_match_bypass() {
        let mut ae = Autoencoder::<f32>::new(small_config(), 5).unwrap();
        let imgs = toy_images(1, 16, 16, 9);
        // seed batch-norm statistics with one training pass
        let mut tape = Tape::new();
        let x = tape.constant(&imgs.to_tensor().unwrap());
        ae.forward_bypass_t(&mut tape, &x, Mode::Train).unwrap();

        let e1 = ae.encode(&imgs).unwrap();
        let e2 = ae.encode(&imgs).unwrap();
        assert_eq!(e1.latent.data(), e2.latent.data());
        assert_eq!(e1.skip.data(), e2.skip.data());

        let d = ae.decode(&e1.latent, &e1.skip).unwrap();
        let bypass = ae.forward_bypass(&imgs).unwrap();
        assert_eq!(d, bypass);
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut ae = Autoencoder::<f64>::new(small_config(), 11).unwrap();
        let imgs = toy_images(2, 16, 16, 13);
        let mut tape = Tape::new();
        let x = tape.constant(&imgs.to_tensor().unwrap());
        let out = ae.forward_bypass_t(&mut tape, &x, Mode::Train).unwrap();
        let target = tape.constant(&toy_images(2, 16, 16, 14).to_tensor().unwrap());
        let loss = tape.mse(&out, &target).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut missing = Vec::new();
        ae.visit_params(&mut |p| {
            let ok = grads
                .param(p.id())
                .map(|g| g.data().iter().any(|&v| v != 0.0))
                .unwrap_or(false);
            if !ok {
                missing.push(p.name().to_string());
            }
        });
        assert!(missing.is_empty(), "no gradient reached: {:?}", missing);
    }

    #[test]
    fn parameter_count_matches_construction() {
        for cfg in [small_config(), AeConfig::default()] {
            let ae = Autoencoder::<f32>::new(cfg, 0).unwrap();
            assert_eq!(param_count(&ae), parameter_count(&cfg), "config {:?}", cfg);
        }
        // golden value for the default configuration
        assert_eq!(parameter_count(&AeConfig::default()), 238_419);
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = AeConfig { height: 18, ..small_config() };
        assert!(Autoencoder::<f32>::new(cfg, 0).is_err());
    }
}
