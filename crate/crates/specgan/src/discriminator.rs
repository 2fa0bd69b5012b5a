//! Spectrogram discriminators.
//!
//! Three variants share one U-Net recipe:
//!
//! * `S-T`  - encoder only, 1-D convolutions along time (bins as channels);
//!   produces just the coarse map.
//! * `M-T`  - full 1-D U-Net; coarse map at T/8 plus a fine map at input
//!   resolution.
//! * `M-TF` - full 2-D U-Net over the time-frequency plane; the input
//!   spectrogram is treated as a one-channel image, down-sampled to a
//!   (channels, T/8, N/8) bottleneck and decoded back with skip
//!   concatenations.
//!
//! Inputs are zero-padded at the trailing edge up to a multiple of the
//! encoder's total stride; fine maps are cropped back, so output resolution
//! always matches the input exactly. Hidden features (post-activation outputs
//! of every body layer, heads excluded) are exposed for feature matching.

use crate::error::{Error, Result};
use crate::layers::{Conv1dLayer, Conv2dLayer, ConvBinding, ConvTranspose1dLayer, ConvTranspose2dLayer};
use crate::rng::Rng;
use crate::spectrogram::Spectrogram;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Single-scale time discriminator: 1-D, encoder only.
    ST,
    /// Multi-scale time discriminator: 1-D U-Net.
    MT,
    /// Multi-scale time-frequency discriminator: 2-D U-Net.
    MTF,
}

impl Variant {
    pub fn is_unet(self) -> bool {
        !matches!(self, Variant::ST)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s-t" | "st" => Ok(Variant::ST),
            "m-t" | "mt" => Ok(Variant::MT),
            "m-tf" | "mtf" => Ok(Variant::MTF),
            other => Err(Error::Config(format!(
                "unknown discriminator variant `{other}` (expected s-t, m-t or m-tf)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ST => "s-t",
            Variant::MT => "m-t",
            Variant::MTF => "m-tf",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorConfig {
    pub variant: Variant,
    /// Channel widths: input-layer output plus one entry per encoder stage.
    pub channels: Vec<usize>,
    /// Kernel size of the strided encoder stages (and mirrored decoder).
    pub enc_kernel: usize,
    /// Kernel size of the input layer and both output heads; must be odd.
    pub head_kernel: usize,
    /// Per-stage encoder strides; their product is the reduction factor.
    pub enc_strides: Vec<usize>,
    pub leaky_alpha: f64,
    /// Frequency bins of the input spectrogram (input channels for the 1-D
    /// variants).
    pub mel_bins: usize,
}

/// Total down-sampling factor required along each reduced axis.
pub const REDUCTION: usize = 8;

impl DiscriminatorConfig {
    pub fn new(variant: Variant, mel_bins: usize) -> Self {
        DiscriminatorConfig {
            variant,
            channels: vec![32, 64, 128, 256],
            enc_kernel: 4,
            head_kernel: 3,
            enc_strides: vec![2, 2, 2],
            leaky_alpha: 0.2,
            mel_bins,
        }
    }

    pub fn stages(&self) -> usize {
        self.enc_strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        let reduction: usize = self.enc_strides.iter().product();
        if reduction != REDUCTION {
            return Err(Error::Config(format!(
                "encoder strides {:?} have product {reduction}, expected {REDUCTION}",
                self.enc_strides
            )));
        }
        if self.channels.len() != self.enc_strides.len() + 1 {
            return Err(Error::Config(format!(
                "expected {} channel widths for {} encoder stages, got {}",
                self.enc_strides.len() + 1,
                self.enc_strides.len(),
                self.channels.len()
            )));
        }
        if self.head_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "head kernel {} must be odd",
                self.head_kernel
            )));
        }
        for &s in &self.enc_strides {
            if self.enc_kernel < s || (self.enc_kernel - s) % 2 != 0 {
                return Err(Error::Config(format!(
                    "encoder kernel {} incompatible with stride {s}: needs kernel >= stride with even difference",
                    self.enc_kernel
                )));
            }
        }
        if self.channels.iter().any(|&c| c == 0) || self.mel_bins == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// Discriminator outputs as tape nodes, for training.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub coarse: NodeId,
    pub fine: Option<NodeId>,
    /// Post-activation body-layer outputs, encoder first then decoder.
    pub hidden: Vec<NodeId>,
}

/// Discriminator outputs as plain values, for evaluation and visualization.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub coarse: Tensor,
    pub fine: Option<Tensor>,
    pub hidden: Vec<Tensor>,
}

#[derive(Debug)]
struct Net2d {
    input: Conv2dLayer,
    enc: Vec<Conv2dLayer>,
    coarse: Conv2dLayer,
    dec: Vec<ConvTranspose2dLayer>,
    fine: Conv2dLayer,
}

#[derive(Debug)]
struct Net1d {
    input: Conv1dLayer,
    enc: Vec<Conv1dLayer>,
    coarse: Conv1dLayer,
    /// Decoder and fine head; absent for the encoder-only variant.
    dec: Option<(Vec<ConvTranspose1dLayer>, Conv1dLayer)>,
}

#[derive(Debug)]
enum Net {
    OneD(Net1d),
    TwoD(Net2d),
}

#[derive(Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    net: Net,
}

pub struct DiscBinding {
    input: ConvBinding,
    enc: Vec<ConvBinding>,
    coarse: ConvBinding,
    dec: Vec<ConvBinding>,
    fine: Option<ConvBinding>,
}

impl Discriminator {
    /// Deterministically initializes a discriminator from a seed.
    pub fn build(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::substream(seed, 0x0d15_c000);
        let ch = &config.channels;
        let n = config.stages();
        let head_pad = (config.head_kernel - 1) / 2;
        let hk = config.head_kernel;
        let ek = config.enc_kernel;

        let net = match config.variant {
            Variant::MTF => {
                let input = Conv2dLayer::new(
                    "disc.input",
                    1,
                    ch[0],
                    (hk, hk),
                    (1, 1),
                    (head_pad, head_pad),
                    &mut rng,
                )?;
                let mut enc = Vec::new();
                for i in 0..n {
                    let s = config.enc_strides[i];
                    let pad = (ek - s) / 2;
                    enc.push(Conv2dLayer::new(
                        format!("disc.enc{i}"),
                        ch[i],
                        ch[i + 1],
                        (ek, ek),
                        (s, s),
                        (pad, pad),
                        &mut rng,
                    )?);
                }
                let coarse = Conv2dLayer::new(
                    "disc.coarse",
                    ch[n],
                    1,
                    (hk, hk),
                    (1, 1),
                    (head_pad, head_pad),
                    &mut rng,
                )?;
                let mut dec = Vec::new();
                for j in 0..n {
                    let stage = n - 1 - j;
                    let s = config.enc_strides[stage];
                    let pad = (ek - s) / 2;
                    let in_ch = if j == 0 { ch[n] } else { 2 * ch[n - j] };
                    dec.push(ConvTranspose2dLayer::new(
                        format!("disc.dec{j}"),
                        in_ch,
                        ch[stage],
                        (ek, ek),
                        (s, s),
                        (pad, pad),
                        (0, 0),
                        &mut rng,
                    )?);
                }
                let fine = Conv2dLayer::new(
                    "disc.fine",
                    2 * ch[0],
                    1,
                    (hk, hk),
                    (1, 1),
                    (head_pad, head_pad),
                    &mut rng,
                )?;
                Net::TwoD(Net2d {
                    input,
                    enc,
                    coarse,
                    dec,
                    fine,
                })
            }
            Variant::ST | Variant::MT => {
                let input = Conv1dLayer::new(
                    "disc.input",
                    config.mel_bins,
                    ch[0],
                    hk,
                    1,
                    head_pad,
                    &mut rng,
                )?;
                let mut enc = Vec::new();
                for i in 0..n {
                    let s = config.enc_strides[i];
                    enc.push(Conv1dLayer::new(
                        format!("disc.enc{i}"),
                        ch[i],
                        ch[i + 1],
                        ek,
                        s,
                        (ek - s) / 2,
                        &mut rng,
                    )?);
                }
                let coarse =
                    Conv1dLayer::new("disc.coarse", ch[n], 1, hk, 1, head_pad, &mut rng)?;
                let dec = if config.variant == Variant::MT {
                    let mut dec = Vec::new();
                    for j in 0..n {
                        let stage = n - 1 - j;
                        let s = config.enc_strides[stage];
                        let in_ch = if j == 0 { ch[n] } else { 2 * ch[n - j] };
                        dec.push(ConvTranspose1dLayer::new(
                            format!("disc.dec{j}"),
                            in_ch,
                            ch[stage],
                            ek,
                            s,
                            (ek - s) / 2,
                            0,
                            &mut rng,
                        )?);
                    }
                    let fine =
                        Conv1dLayer::new("disc.fine", 2 * ch[0], 1, hk, 1, head_pad, &mut rng)?;
                    Some((dec, fine))
                } else {
                    None
                };
                Net::OneD(Net1d {
                    input,
                    enc,
                    coarse,
                    dec,
                })
            }
        };
        Ok(Discriminator { config, net })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<DiscBinding> {
        match &self.net {
            Net::TwoD(net) => Ok(DiscBinding {
                input: net.input.bind(tape, trainable)?,
                enc: net
                    .enc
                    .iter()
                    .map(|l| l.bind(tape, trainable))
                    .collect::<Result<_>>()?,
                coarse: net.coarse.bind(tape, trainable)?,
                dec: net
                    .dec
                    .iter()
                    .map(|l| l.bind(tape, trainable))
                    .collect::<Result<_>>()?,
                fine: Some(net.fine.bind(tape, trainable)?),
            }),
            Net::OneD(net) => Ok(DiscBinding {
                input: net.input.bind(tape, trainable)?,
                enc: net
                    .enc
                    .iter()
                    .map(|l| l.bind(tape, trainable))
                    .collect::<Result<_>>()?,
                coarse: net.coarse.bind(tape, trainable)?,
                dec: match &net.dec {
                    Some((dec, _)) => dec
                        .iter()
                        .map(|l| l.bind(tape, trainable))
                        .collect::<Result<_>>()?,
                    None => Vec::new(),
                },
                fine: match &net.dec {
                    Some((_, fine)) => Some(fine.bind(tape, trainable)?),
                    None => None,
                },
            }),
        }
    }

    /// Runs the discriminator on a (1, T, N) spectrogram node already on the
    /// tape. Gradients flow into the input and into any trainable binding.
    pub fn forward(&self, tape: &mut Tape, bind: &DiscBinding, x: NodeId) -> Result<DiscOutput> {
        self.forward_inner(tape, bind, x, None)
    }

    pub(crate) fn forward_inner(
        &self,
        tape: &mut Tape,
        bind: &DiscBinding,
        x: NodeId,
        zero_skip: Option<usize>,
    ) -> Result<DiscOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::InvalidShape {
                shape,
                expected: 1,
                actual: 0,
            });
        }
        let (t, n_bins) = (shape[1], shape[2]);
        let alpha = self.config.leaky_alpha;
        let pad_to = |v: usize| v.div_ceil(REDUCTION) * REDUCTION;

        match &self.net {
            Net::TwoD(net) => {
                let (t8, n8) = (pad_to(t), pad_to(n_bins));
                let padded = tape.pad_tail(x, &[t8, n8])?;
                let mut hidden = Vec::new();
                // input layer carries no activation
                let h_in = net.input.forward(tape, bind.input, padded)?;
                hidden.push(h_in);
                let mut h = h_in;
                for (layer, &b) in net.enc.iter().zip(&bind.enc) {
                    let pre = layer.forward(tape, b, h)?;
                    h = tape.leaky_relu(pre, alpha);
                    hidden.push(h);
                }
                let coarse = net.coarse.forward(tape, bind.coarse, h)?;
                let n_stages = net.enc.len();
                let mut d = h;
                for (j, (layer, &b)) in net.dec.iter().zip(&bind.dec).enumerate() {
                    let input_j = if j == 0 {
                        d
                    } else {
                        let skip = self.skip_node(tape, &hidden, n_stages - j, zero_skip)?;
                        tape.concat0(d, skip)?
                    };
                    let pre = layer.forward(tape, b, input_j)?;
                    d = tape.leaky_relu(pre, alpha);
                    hidden.push(d);
                }
                let skip0 = self.skip_node(tape, &hidden, 0, zero_skip)?;
                let fine_in = tape.concat0(d, skip0)?;
                let fine_padded =
                    net.fine
                        .forward(tape, bind.fine.as_ref().copied().expect("2-D has fine head"), fine_in)?;
                let fine = tape.crop_tail(fine_padded, &[t, n_bins])?;
                Ok(DiscOutput {
                    coarse,
                    fine: Some(fine),
                    hidden,
                })
            }
            Net::OneD(net) => {
                if n_bins != self.config.mel_bins {
                    return Err(Error::ChannelMismatch {
                        layer: "disc.input".to_string(),
                        expected: self.config.mel_bins,
                        actual: n_bins,
                    });
                }
                // view (1, T, N) as (N, T): bins become channels
                let flat = tape.reshape(x, &[t, n_bins])?;
                let bins_major = tape.transpose2(flat)?;
                let t8 = pad_to(t);
                let padded = tape.pad_tail(bins_major, &[t8])?;
                let mut hidden = Vec::new();
                let h_in = net.input.forward(tape, bind.input, padded)?;
                hidden.push(h_in);
                let mut h = h_in;
                for (layer, &b) in net.enc.iter().zip(&bind.enc) {
                    let pre = layer.forward(tape, b, h)?;
                    h = tape.leaky_relu(pre, alpha);
                    hidden.push(h);
                }
                let coarse = net.coarse.forward(tape, bind.coarse, h)?;
                let Some((dec_layers, fine_layer)) = &net.dec else {
                    return Ok(DiscOutput {
                        coarse,
                        fine: None,
                        hidden,
                    });
                };
                let n_stages = net.enc.len();
                let mut d = h;
                for (j, (layer, &b)) in dec_layers.iter().zip(&bind.dec).enumerate() {
                    let input_j = if j == 0 {
                        d
                    } else {
                        let skip = self.skip_node(tape, &hidden, n_stages - j, zero_skip)?;
                        tape.concat0(d, skip)?
                    };
                    let pre = layer.forward(tape, b, input_j)?;
                    d = tape.leaky_relu(pre, alpha);
                    hidden.push(d);
                }
                let skip0 = self.skip_node(tape, &hidden, 0, zero_skip)?;
                let fine_in = tape.concat0(d, skip0)?;
                let fine_padded = fine_layer.forward(
                    tape,
                    bind.fine.as_ref().copied().expect("M-T has fine head"),
                    fine_in,
                )?;
                let fine = tape.crop_tail(fine_padded, &[t])?;
                Ok(DiscOutput {
                    coarse,
                    fine: Some(fine),
                    hidden,
                })
            }
        }
    }

    /// Lateral skip input, optionally replaced by zeros (used to verify the
    /// skip connections are live).
    fn skip_node(
        &self,
        tape: &mut Tape,
        hidden: &[NodeId],
        index: usize,
        zero_skip: Option<usize>,
    ) -> Result<NodeId> {
        if zero_skip == Some(index) {
            let shape = tape.shape(hidden[index]).to_vec();
            Ok(tape.full(&shape, 0.0))
        } else {
            Ok(hidden[index])
        }
    }

    /// Evaluates the discriminator on a spectrogram with frozen weights and
    /// returns plain-value outputs (also the feature-extraction path).
    pub fn discriminate(&self, s: &Spectrogram) -> Result<DiscriminatorOutput> {
        let mut tape = Tape::new();
        let x = tape.constant(s.tensor());
        let bind = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &bind, x)?;
        Ok(DiscriminatorOutput {
            coarse: tape.value(out.coarse),
            fine: out.fine.map(|f| tape.value(f)),
            hidden: out.hidden.iter().map(|&h| tape.value(h)).collect(),
        })
    }

    /// Number of hidden feature maps produced per pass.
    pub fn hidden_len(&self) -> usize {
        let n = self.config.stages();
        match self.config.variant {
            Variant::ST => 1 + n,
            Variant::MT | Variant::MTF => 1 + 2 * n,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.net {
            Net::TwoD(net) => {
                out.extend(net.input.named_params());
                for l in &net.enc {
                    out.extend(l.named_params());
                }
                out.extend(net.coarse.named_params());
                for l in &net.dec {
                    out.extend(l.named_params());
                }
                out.extend(net.fine.named_params());
            }
            Net::OneD(net) => {
                out.extend(net.input.named_params());
                for l in &net.enc {
                    out.extend(l.named_params());
                }
                out.extend(net.coarse.named_params());
                if let Some((dec, fine)) = &net.dec {
                    for l in dec {
                        out.extend(l.named_params());
                    }
                    out.extend(fine.named_params());
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match &mut self.net {
            Net::TwoD(net) => {
                out.extend(net.input.named_params_mut());
                for l in &mut net.enc {
                    out.extend(l.named_params_mut());
                }
                out.extend(net.coarse.named_params_mut());
                for l in &mut net.dec {
                    out.extend(l.named_params_mut());
                }
                out.extend(net.fine.named_params_mut());
            }
            Net::OneD(net) => {
                out.extend(net.input.named_params_mut());
                for l in &mut net.enc {
                    out.extend(l.named_params_mut());
                }
                out.extend(net.coarse.named_params_mut());
                if let Some((dec, fine)) = &mut net.dec {
                    for l in dec {
                        out.extend(l.named_params_mut());
                    }
                    out.extend(fine.named_params_mut());
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Accumulates this model's gradients from a finished backward pass.
    pub fn accumulate_grads_from(&mut self, tape: &Tape) {
        for (name, t) in self.named_params_mut() {
            if let Some(g) = tape.param_grad(&name) {
                t.accumulate_grad(g);
            }
        }
    }

    /// Replaces gradients with the tape's (zero_grad followed by accumulate
    /// in one pass); parameters missing from the tape get zeroed buffers.
    pub fn assign_grads_from(&mut self, tape: &Tape) {
        for (name, t) in self.named_params_mut() {
            match tape.param_grad(&name) {
                Some(g) => t.set_grad(g),
                None => t.zero_grad(),
            }
        }
    }
}
