//! Layer vocabulary: weight-normalized strided/transposed convolutions in one
//! and two dimensions, embedding lookup and linear projection.
//!
//! Every convolution weight is stored as a direction tensor `v` plus a
//! per-slice gain `g`; the effective kernel `g * v / ||v||` is materialized on
//! the tape each forward pass so gradients reach both parameters. Layers are
//! bound onto a [`Tape`] once per pass ([`bind`](Conv2dLayer::bind)), which
//! keeps a parameter's gradient unique even when the layer runs on several
//! inputs within the same pass.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// One layer's parameters staged on a specific tape. `w` is the effective
/// weight-normalized kernel: for trainable bindings it is a weight-norm node
/// over the v/g parameter leaves, materialized once per tape; for frozen
/// bindings it is a single constant.
#[derive(Debug, Clone, Copy)]
pub struct ConvBinding {
    pub w: NodeId,
    pub b: NodeId,
}

/// Draws a direction tensor v ~ N(0, 2/fan_in) and sets the per-slice gain
/// to ||v_o|| so the effective weight starts equal to v.
fn init_weight_norm(
    name: &str,
    rng: &mut Rng,
    shape: Vec<usize>,
    fan_in: usize,
) -> Result<(Tensor, Tensor)> {
    let numel: usize = shape.iter().product();
    let slices = shape[0];
    let slice_len = numel / slices;
    let std = (2.0 / fan_in as f64).sqrt();
    let v = rng.normal_vec(numel, std);
    let mut g = vec![0.0; slices];
    for (o, go) in g.iter_mut().enumerate() {
        let norm = v[o * slice_len..(o + 1) * slice_len]
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormChannel {
                layer: name.to_string(),
                channel: o,
            });
        }
        *go = norm;
    }
    Ok((Tensor::param(shape, v)?, Tensor::param(vec![slices], g)?))
}

fn rename_conv_error(err: Error, name: &str) -> Error {
    match err {
        Error::ChannelMismatch {
            expected, actual, ..
        } => Error::ChannelMismatch {
            layer: name.to_string(),
            expected,
            actual,
        },
        Error::DegenerateSpatial {
            axis,
            input,
            kernel,
            stride,
            padding,
            ..
        } => Error::DegenerateSpatial {
            layer: name.to_string(),
            axis,
            input,
            kernel,
            stride,
            padding,
        },
        Error::ZeroNormChannel { channel, .. } => Error::ZeroNormChannel {
            layer: name.to_string(),
            channel,
        },
        other => other,
    }
}

macro_rules! conv_common {
    ($ty:ident) => {
        impl $ty {
            pub fn name(&self) -> &str {
                &self.name
            }

            pub fn named_params(&self) -> Vec<(String, &Tensor)> {
                vec![
                    (format!("{}.v", self.name), &self.weight_v),
                    (format!("{}.g", self.name), &self.weight_g),
                    (format!("{}.b", self.name), &self.bias),
                ]
            }

            pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
                vec![
                    (format!("{}.v", self.name), &mut self.weight_v),
                    (format!("{}.g", self.name), &mut self.weight_g),
                    (format!("{}.b", self.name), &mut self.bias),
                ]
            }

            /// Puts the layer's parameters on a tape; `trainable = false`
            /// stages precomputed frozen weights instead.
            pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<ConvBinding> {
                if trainable {
                    let v = tape.param(&format!("{}.v", self.name), &self.weight_v)?;
                    let g = tape.param(&format!("{}.g", self.name), &self.weight_g)?;
                    let w = tape
                        .weight_norm(v, g)
                        .map_err(|e| rename_conv_error(e, &self.name))?;
                    Ok(ConvBinding {
                        w,
                        b: tape.param(&format!("{}.b", self.name), &self.bias)?,
                    })
                } else {
                    let eff = self.weight_norm_effective()?;
                    let shape = eff.shape().to_vec();
                    let (data, _) = eff.into_parts();
                    Ok(ConvBinding {
                        w: tape.constant_owned(shape, data),
                        b: tape.constant(&self.bias),
                    })
                }
            }

            /// Effective weight g * v / ||v|| per axis-0 slice.
            pub fn weight_norm_effective(&self) -> Result<Tensor> {
                let slices = self.weight_v.shape()[0];
                let data = crate::kernels::weight_norm_forward(
                    self.weight_v.data(),
                    self.weight_g.data(),
                    slices,
                )
                .map_err(|channel| Error::ZeroNormChannel {
                    layer: self.name.clone(),
                    channel,
                })?;
                Tensor::new(self.weight_v.shape().to_vec(), data)
            }
        }
    };
}

/// 2-D convolution with weight normalization; weight_v is [out,in,kh,kw].
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub weight_v: Tensor,
    pub weight_g: Tensor,
    pub bias: Tensor,
}

conv_common!(Conv2dLayer);

impl Conv2dLayer {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut Rng,
    ) -> Result<Self> {
        let name = name.into();
        let shape = vec![out_channels, in_channels, kernel.0, kernel.1];
        let fan_in = in_channels * kernel.0 * kernel.1;
        let (weight_v, weight_g) = init_weight_norm(&name, rng, shape, fan_in)?;
        Ok(Conv2dLayer {
            name,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight_v,
            weight_g,
            bias: Tensor::param(vec![out_channels], vec![0.0; out_channels])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: ConvBinding, x: NodeId) -> Result<NodeId> {
        tape.conv2d(x, bind.w, bind.b, self.stride, self.padding)
            .map_err(|e| rename_conv_error(e, &self.name))
    }

    /// Spatial output size for a given input size.
    pub fn out_size(&self, input: (usize, usize)) -> Option<(usize, usize)> {
        let h = crate::kernels::conv_out_len(input.0, self.kernel.0, self.stride.0, self.padding.0)?;
        let w = crate::kernels::conv_out_len(input.1, self.kernel.1, self.stride.1, self.padding.1)?;
        Some((h, w))
    }

    pub fn param_count(&self) -> usize {
        self.weight_v.numel() + self.weight_g.numel() + self.bias.numel()
    }
}

/// 2-D transposed convolution; weight_v is [in,out,kh,kw] with gains per
/// axis-0 (input-channel) slice.
#[derive(Debug, Clone)]
pub struct ConvTranspose2dLayer {
    name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
    pub weight_v: Tensor,
    pub weight_g: Tensor,
    pub bias: Tensor,
}

conv_common!(ConvTranspose2dLayer);

impl ConvTranspose2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        output_padding: (usize, usize),
        rng: &mut Rng,
    ) -> Result<Self> {
        let name = name.into();
        let shape = vec![in_channels, out_channels, kernel.0, kernel.1];
        let fan_in = in_channels * kernel.0 * kernel.1;
        let (weight_v, weight_g) = init_weight_norm(&name, rng, shape, fan_in)?;
        Ok(ConvTranspose2dLayer {
            name,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight_v,
            weight_g,
            bias: Tensor::param(vec![out_channels], vec![0.0; out_channels])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: ConvBinding, x: NodeId) -> Result<NodeId> {
        tape.conv_transpose2d(x, bind.w, bind.b, self.stride, self.padding, self.output_padding)
            .map_err(|e| rename_conv_error(e, &self.name))
    }

    pub fn out_size(&self, input: (usize, usize)) -> Option<(usize, usize)> {
        let h = crate::kernels::convt_out_len(
            input.0,
            self.kernel.0,
            self.stride.0,
            self.padding.0,
            self.output_padding.0,
        )?;
        let w = crate::kernels::convt_out_len(
            input.1,
            self.kernel.1,
            self.stride.1,
            self.padding.1,
            self.output_padding.1,
        )?;
        Some((h, w))
    }

    pub fn param_count(&self) -> usize {
        self.weight_v.numel() + self.weight_g.numel() + self.bias.numel()
    }
}

/// 1-D convolution along time; weight_v is [out,in,k].
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight_v: Tensor,
    pub weight_g: Tensor,
    pub bias: Tensor,
}

conv_common!(Conv1dLayer);

impl Conv1dLayer {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let name = name.into();
        let shape = vec![out_channels, in_channels, kernel];
        let fan_in = in_channels * kernel;
        let (weight_v, weight_g) = init_weight_norm(&name, rng, shape, fan_in)?;
        Ok(Conv1dLayer {
            name,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight_v,
            weight_g,
            bias: Tensor::param(vec![out_channels], vec![0.0; out_channels])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: ConvBinding, x: NodeId) -> Result<NodeId> {
        tape.conv1d(x, bind.w, bind.b, self.stride, self.padding)
            .map_err(|e| rename_conv_error(e, &self.name))
    }

    pub fn out_size(&self, input: usize) -> Option<usize> {
        crate::kernels::conv_out_len(input, self.kernel, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.weight_v.numel() + self.weight_g.numel() + self.bias.numel()
    }
}

/// 1-D transposed convolution; weight_v is [in,out,k].
#[derive(Debug, Clone)]
pub struct ConvTranspose1dLayer {
    name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub weight_v: Tensor,
    pub weight_g: Tensor,
    pub bias: Tensor,
}

conv_common!(ConvTranspose1dLayer);

impl ConvTranspose1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let name = name.into();
        let shape = vec![in_channels, out_channels, kernel];
        let fan_in = in_channels * kernel;
        let (weight_v, weight_g) = init_weight_norm(&name, rng, shape, fan_in)?;
        Ok(ConvTranspose1dLayer {
            name,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight_v,
            weight_g,
            bias: Tensor::param(vec![out_channels], vec![0.0; out_channels])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: ConvBinding, x: NodeId) -> Result<NodeId> {
        tape.conv_transpose1d(
            x,
            bind.w,
            bind.b,
            self.stride,
            self.padding,
            self.output_padding,
        )
        .map_err(|e| rename_conv_error(e, &self.name))
    }

    pub fn out_size(&self, input: usize) -> Option<usize> {
        crate::kernels::convt_out_len(
            input,
            self.kernel,
            self.stride,
            self.padding,
            self.output_padding,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight_v.numel() + self.weight_g.numel() + self.bias.numel()
    }
}

/// Token embedding table.
#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    name: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub table: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingBinding {
    pub table: NodeId,
}

impl EmbeddingLayer {
    pub fn new(name: impl Into<String>, vocab_size: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let std = (1.0 / dim as f64).sqrt();
        let table = Tensor::param(vec![vocab_size, dim], rng.normal_vec(vocab_size * dim, std))?;
        Ok(EmbeddingLayer {
            name: name.into(),
            vocab_size,
            dim,
            table,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<EmbeddingBinding> {
        let table = if trainable {
            tape.param(&format!("{}.table", self.name), &self.table)?
        } else {
            tape.constant(&self.table)
        };
        Ok(EmbeddingBinding { table })
    }

    pub fn forward(&self, tape: &mut Tape, bind: EmbeddingBinding, ids: &[usize]) -> Result<NodeId> {
        tape.embedding(bind.table, ids)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![(format!("{}.table", self.name), &self.table)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![(format!("{}.table", self.name), &mut self.table)]
    }

    pub fn param_count(&self) -> usize {
        self.table.numel()
    }
}

/// Row-wise linear projection.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearBinding {
    pub w: NodeId,
    pub b: NodeId,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        let std = (2.0 / in_dim as f64).sqrt();
        let weight = Tensor::param(vec![in_dim, out_dim], rng.normal_vec(in_dim * out_dim, std))?;
        Ok(LinearLayer {
            name: name.into(),
            in_dim,
            out_dim,
            weight,
            bias: Tensor::param(vec![out_dim], vec![0.0; out_dim])?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<LinearBinding> {
        if trainable {
            Ok(LinearBinding {
                w: tape.param(&format!("{}.w", self.name), &self.weight)?,
                b: tape.param(&format!("{}.b", self.name), &self.bias)?,
            })
        } else {
            Ok(LinearBinding {
                w: tape.constant(&self.weight),
                b: tape.constant(&self.bias),
            })
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: LinearBinding, x: NodeId) -> Result<NodeId> {
        tape.linear(x, bind.w, bind.b)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.w", self.name), &self.weight),
            (format!("{}.b", self.name), &self.bias),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{}.w", self.name), &mut self.weight),
            (format!("{}.b", self.name), &mut self.bias),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = Rng::new(0);
        let mut layer = Conv2dLayer::new("id", 1, 1, (3, 3), (1, 1), (1, 1), &mut rng).unwrap();
        // delta kernel with g = ||v|| so the effective weight equals v
        let mut v = vec![0.0; 9];
        v[4] = 1.0;
        layer.weight_v = Tensor::param(vec![1, 1, 3, 3], v).unwrap();
        layer.weight_g = Tensor::param(vec![1], vec![1.0]).unwrap();

        let mut tape = Tape::new();
        let x = Tensor::from_slice(
            &[1, 4, 4],
            &(0..16).map(|i| i as f64 * 0.5 - 3.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let xid = tape.constant(&x);
        let bind = layer.bind(&mut tape, false).unwrap();
        let y = layer.forward(&mut tape, bind, xid).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4]);
        for (a, b) in tape.data(y).iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_weight_equals_v_at_init_convention() {
        let mut rng = Rng::new(1);
        let layer = Conv2dLayer::new("c", 2, 3, (3, 3), (1, 1), (1, 1), &mut rng).unwrap();
        let eff = layer.weight_norm_effective().unwrap();
        for (a, b) in eff.data().iter().zip(layer.weight_v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_norm_scale_invariance() {
        let mut rng = Rng::new(2);
        let mut layer = Conv1dLayer::new("c", 2, 2, 3, 1, 1, &mut rng).unwrap();
        let before = layer.weight_norm_effective().unwrap();
        for v in layer.weight_v.data_mut() {
            *v *= 7.0;
        }
        let after = layer.weight_norm_effective().unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn per_slice_norm_of_effective_weight_equals_gain() {
        let mut rng = Rng::new(3);
        let mut layer = Conv2dLayer::new("c", 3, 4, (3, 3), (1, 1), (1, 1), &mut rng).unwrap();
        for (i, g) in layer.weight_g.data_mut().iter_mut().enumerate() {
            *g = 0.5 + i as f64;
        }
        let eff = layer.weight_norm_effective().unwrap();
        let slice_len = eff.numel() / 4;
        for o in 0..4 {
            let norm = eff.data()[o * slice_len..(o + 1) * slice_len]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            assert!((norm - layer.weight_g.data()[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_direction_is_rejected() {
        let mut rng = Rng::new(4);
        let mut layer = Conv2dLayer::new("z", 1, 1, (3, 3), (1, 1), (1, 1), &mut rng).unwrap();
        layer.weight_v = Tensor::param(vec![1, 1, 3, 3], vec![0.0; 9]).unwrap();
        assert!(matches!(
            layer.weight_norm_effective(),
            Err(Error::ZeroNormChannel { channel: 0, .. })
        ));
    }

    #[test]
    fn conv_shape_formulas() {
        let mut rng = Rng::new(5);
        let c = Conv2dLayer::new("c", 1, 1, (4, 4), (2, 2), (1, 1), &mut rng).unwrap();
        assert_eq!(c.out_size((8, 16)), Some((4, 8)));
        let t =
            ConvTranspose2dLayer::new("t", 1, 1, (4, 4), (2, 2), (1, 1), (0, 0), &mut rng).unwrap();
        assert_eq!(t.out_size((4, 8)), Some((8, 16)));
        // stride-2 kernel-4 pad-1 transposed conv exactly inverts the
        // matching strided conv's length arithmetic
        let c1 = Conv1dLayer::new("c1", 1, 1, 4, 2, 1, &mut rng).unwrap();
        let t1 = ConvTranspose1dLayer::new("t1", 1, 1, 4, 2, 1, 0, &mut rng).unwrap();
        assert_eq!(c1.out_size(4), Some(2));
        assert_eq!(t1.out_size(2), Some(4));
        assert_eq!(t1.out_size(4), Some(8));
    }

    #[test]
    fn channel_mismatch_names_layer() {
        let mut rng = Rng::new(6);
        let layer = Conv2dLayer::new("enc1", 4, 8, (3, 3), (1, 1), (1, 1), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![3, 5, 5]));
        let bind = layer.bind(&mut tape, false).unwrap();
        match layer.forward(&mut tape, bind, x) {
            Err(Error::ChannelMismatch {
                layer, expected, actual,
            }) => {
                assert_eq!(layer, "enc1");
                assert_eq!((expected, actual), (4, 3));
            }
            other => panic!("expected channel mismatch, got {other:?}"),
        }
    }
}
