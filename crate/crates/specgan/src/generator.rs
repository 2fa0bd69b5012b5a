//! Toy non-autoregressive spectrogram generator.
//!
//! Token embeddings pass through two 1-D convolution encoder layers; a linear
//! head predicts one duration per token; token features are up-sampled by
//! repeating each one for its (ground-truth or predicted) number of frames;
//! two decoder convolutions and a linear projection produce log-mel frames.
//! Training always feeds ground-truth durations to the up-sampler, with the
//! predicted durations supervised by an extra loss term.

use crate::error::{Error, Result};
use crate::layers::{Conv1dLayer, ConvBinding, EmbeddingLayer, EmbeddingBinding, LinearBinding, LinearLayer};
use crate::rng::Rng;
use crate::spectrogram::Spectrogram;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Token ids feeding the generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Integer frames-per-token; the sum equals the paired spectrogram's T.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationSequence(pub Vec<usize>);

impl DurationSequence {
    pub fn total_frames(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(idx) = self.0.iter().position(|&d| d == 0) {
            return Err(Error::InvalidDuration {
                index: idx,
                value: 0,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Width of the encoder/decoder convolution stacks.
    pub width: usize,
    pub kernel: usize,
    pub mel_bins: usize,
    pub leaky_alpha: f64,
}

impl GeneratorConfig {
    pub fn new(vocab_size: usize, mel_bins: usize) -> Self {
        GeneratorConfig {
            vocab_size,
            embed_dim: 32,
            width: 64,
            kernel: 3,
            mel_bins,
            leaky_alpha: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.width == 0 || self.mel_bins == 0 {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "generator kernel {} must be odd",
                self.kernel
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    embedding: EmbeddingLayer,
    enc: [Conv1dLayer; 2],
    dur_head: LinearLayer,
    dec: [Conv1dLayer; 2],
    proj: LinearLayer,
}

pub struct GenBinding {
    embedding: EmbeddingBinding,
    enc: [ConvBinding; 2],
    dur_head: LinearBinding,
    dec: [ConvBinding; 2],
    proj: LinearBinding,
}

/// Tape nodes from one generator forward pass.
pub struct GenForward {
    /// Predicted spectrogram, shape (1, T, N).
    pub spec: NodeId,
    /// Predicted per-token durations, shape (L, 1).
    pub dur_pred: NodeId,
}

impl Generator {
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::substream(seed, 0x9e4e_0001);
        let pad = (config.kernel - 1) / 2;
        let embedding = EmbeddingLayer::new("gen.embed", config.vocab_size, config.embed_dim, &mut rng)?;
        let enc = [
            Conv1dLayer::new("gen.enc0", config.embed_dim, config.width, config.kernel, 1, pad, &mut rng)?,
            Conv1dLayer::new("gen.enc1", config.width, config.width, config.kernel, 1, pad, &mut rng)?,
        ];
        let dur_head = LinearLayer::new("gen.dur", config.width, 1, &mut rng)?;
        let dec = [
            Conv1dLayer::new("gen.dec0", config.width, config.width, config.kernel, 1, pad, &mut rng)?,
            Conv1dLayer::new("gen.dec1", config.width, config.width, config.kernel, 1, pad, &mut rng)?,
        ];
        let proj = LinearLayer::new("gen.proj", config.width, config.mel_bins, &mut rng)?;
        Ok(Generator {
            config,
            embedding,
            enc,
            dur_head,
            dec,
            proj,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<GenBinding> {
        Ok(GenBinding {
            embedding: self.embedding.bind(tape, trainable)?,
            enc: [
                self.enc[0].bind(tape, trainable)?,
                self.enc[1].bind(tape, trainable)?,
            ],
            dur_head: self.dur_head.bind(tape, trainable)?,
            dec: [
                self.dec[0].bind(tape, trainable)?,
                self.dec[1].bind(tape, trainable)?,
            ],
            proj: self.proj.bind(tape, trainable)?,
        })
    }

    fn validate_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Config("token sequence is empty".into()));
        }
        if let Some(&bad) = tokens.0.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfVocab {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Forward pass with explicit up-sampling durations (training mode uses
    /// the ground truth here).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &GenBinding,
        tokens: &TokenSequence,
        durations: &DurationSequence,
    ) -> Result<GenForward> {
        self.validate_tokens(tokens)?;
        durations.validate()?;
        if durations.0.len() != tokens.len() {
            return Err(Error::ShapeMismatch {
                op: "generate",
                lhs: vec![tokens.len()],
                rhs: vec![durations.0.len()],
            });
        }
        let alpha = self.config.leaky_alpha;

        // token-level encoding: [L, E] -> [E, L] for the time convolutions
        let embedded = self.embedding.forward(tape, bind.embedding, &tokens.0)?;
        let mut h = tape.transpose2(embedded)?;
        for (layer, &b) in self.enc.iter().zip(&bind.enc) {
            let pre = layer.forward(tape, b, h)?;
            h = tape.leaky_relu(pre, alpha);
        }
        let token_feats = tape.transpose2(h)?; // [L, W]

        let dur_pred = self.dur_head.forward(tape, bind.dur_head, token_feats)?; // [L, 1]

        // frame-level decoding
        let frames = tape.repeat_rows(token_feats, &durations.0)?; // [T, W]
        let mut d = tape.transpose2(frames)?;
        for (layer, &b) in self.dec.iter().zip(&bind.dec) {
            let pre = layer.forward(tape, b, d)?;
            d = tape.leaky_relu(pre, alpha);
        }
        let frame_feats = tape.transpose2(d)?; // [T, W]
        let mel = self.proj.forward(tape, bind.proj, frame_feats)?; // [T, N]
        let t = durations.total_frames();
        let spec = tape.reshape(mel, &[1, t, self.config.mel_bins])?;
        Ok(GenForward { spec, dur_pred })
    }

    /// Value-level generation. With `durations` the up-sampler uses them
    /// directly; without, predicted durations are rounded to the nearest
    /// positive integer and used instead (inference mode). Returns the
    /// spectrogram and the rounded predicted durations.
    pub fn generate(
        &self,
        tokens: &TokenSequence,
        durations: Option<&DurationSequence>,
    ) -> Result<(Spectrogram, DurationSequence)> {
        let rounded = match durations {
            Some(d) => {
                let mut tape = Tape::new();
                let bind = self.bind(&mut tape, false)?;
                let out = self.forward(&mut tape, &bind, tokens, d)?;
                let pred = round_durations(tape.data(out.dur_pred));
                return Ok((Spectrogram::new(tape.value(out.spec))?, pred));
            }
            None => {
                // probe pass with unit durations to obtain the predictions
                let unit = DurationSequence(vec![1; tokens.len()]);
                let mut tape = Tape::new();
                let bind = self.bind(&mut tape, false)?;
                let out = self.forward(&mut tape, &bind, tokens, &unit)?;
                round_durations(tape.data(out.dur_pred))
            }
        };
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &bind, tokens, &rounded)?;
        let pred = round_durations(tape.data(out.dur_pred));
        Ok((Spectrogram::new(tape.value(out.spec))?, pred))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.embedding.named_params();
        for l in &self.enc {
            out.extend(l.named_params());
        }
        out.extend(self.dur_head.named_params());
        for l in &self.dec {
            out.extend(l.named_params());
        }
        out.extend(self.proj.named_params());
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.embedding.named_params_mut();
        for l in &mut self.enc {
            out.extend(l.named_params_mut());
        }
        out.extend(self.dur_head.named_params_mut());
        for l in &mut self.dec {
            out.extend(l.named_params_mut());
        }
        out.extend(self.proj.named_params_mut());
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

/// Nearest positive integer, floor 1.
fn round_durations(pred: &[f64]) -> DurationSequence {
    DurationSequence(
        pred.iter()
            .map(|&d| d.round().max(1.0) as usize)
            .collect(),
    )
}

/// Tape nodes of the supervised loss terms.
pub struct TtsLoss {
    pub l_tts: NodeId,
    pub l_spec: NodeId,
    pub l_dur: NodeId,
}

/// L_spec = MSE(S, S_hat) + MAE(S, S_hat); L_dur likewise on durations in
/// float; L_tts = L_spec + lambda_dur * L_dur.
pub fn tts_loss(
    tape: &mut Tape,
    spec_pred: NodeId,
    spec_target: &Spectrogram,
    dur_pred: NodeId,
    dur_target: &DurationSequence,
    lambda_dur: f64,
) -> Result<TtsLoss> {
    let target = tape.constant(spec_target.tensor());
    let mse_s = tape.mse(spec_pred, target)?;
    let mae_s = tape.mae(spec_pred, target)?;
    let l_spec = tape.add(mse_s, mae_s)?;

    let dur_values: Vec<f64> = dur_target.0.iter().map(|&d| d as f64).collect();
    let dur_const = Tensor::new(vec![dur_values.len(), 1], dur_values)?;
    let dur_node = tape.constant(&dur_const);
    let mse_d = tape.mse(dur_pred, dur_node)?;
    let mae_d = tape.mae(dur_pred, dur_node)?;
    let l_dur = tape.add(mse_d, mae_d)?;

    let weighted = tape.scale(l_dur, lambda_dur);
    let l_tts = tape.add(l_spec, weighted)?;
    Ok(TtsLoss {
        l_tts,
        l_spec,
        l_dur,
    })
}
