//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes and record enough structure to replay the chain rule in
//! reverse. Trainable parameters live outside the tape as [`Tensor`]s; they
//! are bound onto a tape by name with [`Tape::param`], and after
//! [`Tape::backward`] their gradients are read back via [`Tape::param_grad`]
//! and accumulated into the parameter's own buffer. One tape serves one
//! forward/backward phase and is dropped afterwards, so no state leaks
//! between training steps.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    Mae {
        pred: NodeId,
        target: NodeId,
    },
    Sum(NodeId),
    Mean(NodeId),
    LeakyRelu {
        x: NodeId,
        alpha: f64,
    },
    WeightNorm {
        v: NodeId,
        g: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Concat0(NodeId, NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    RepeatRows {
        x: NodeId,
        counts: Vec<usize>,
    },
    Transpose2(NodeId),
    Reshape(NodeId),
    PadTail(NodeId),
    CropTail(NodeId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Recorded forward pass with reverse-replayable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(String, NodeId)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Non-trainable input value.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Non-trainable input, taking ownership of the buffer (no copy).
    pub fn constant_owned(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    pub fn full(&mut self, shape: &[usize], value: f64) -> NodeId {
        let n = shape.iter().product();
        self.push(shape.to_vec(), vec![value; n], false, Op::Leaf)
    }

    /// Binds a trainable parameter under a unique name. Gradients for it are
    /// available from [`Tape::param_grad`] after a backward pass.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<NodeId> {
        if self.bindings.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!(
                "parameter `{name}` bound twice on one tape"
            )));
        }
        let id = self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf);
        self.bindings.push((name.to_string(), id));
        Ok(id)
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    /// Scalar value of a rank-0/size-1 node.
    pub fn item(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor::from_slice(&self.node(id).shape, &self.node(id).data)
            .expect("tape node is well-formed")
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.bindings
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.grad(*id))
    }

    /// Visits every bound parameter that received a gradient, in binding
    /// order. Callers accumulate the slices into their own tensors.
    pub fn for_each_param_grad<F>(&self, mut f: F)
    where
        F: FnMut(&str, &[f64]),
    {
        for (name, id) in &self.bindings {
            if let Some(g) = self.grad(*id) {
                f(name, g);
            }
        }
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn broadcast_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa == sb {
            Ok(sa.clone())
        } else if self.node(a).data.len() == 1 {
            Ok(sb.clone())
        } else if self.node(b).data.len() == 1 {
            Ok(sa.clone())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let shape = self.broadcast_shapes(op_name, a, b)?;
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let data: Vec<f64> = if da.len() == db.len() {
            da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else if da.len() == 1 {
            db.iter().map(|&y| f(da[0], y)).collect()
        } else {
            da.iter().map(|&x| f(x, db[0])).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, needs, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let node = self.node(a);
        let data: Vec<f64> = node.data.iter().map(|&x| x * factor).collect();
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        self.push(shape, data, needs, Op::Scale(a, factor))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::mm_nn_acc(&self.node(a).data, &self.node(b).data, &mut data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, needs, Op::Matmul(a, b)))
    }

    /// Row-wise affine map: x[r,k] * w[k,n] + b[n].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (
            &self.node(x).shape,
            &self.node(w).shape,
            &self.node(b).shape,
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        if sb.len() != 1 || sb[0] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sw.clone(),
                rhs: sb.clone(),
            });
        }
        let (r, k, n) = (sx[0], sx[1], sw[1]);
        let mut data = vec![0.0; r * n];
        for row in data.chunks_exact_mut(n) {
            row.copy_from_slice(&self.node(b).data);
        }
        kernels::mm_nn_acc(&self.node(x).data, &self.node(w).data, &mut data, r, k, n);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![r, n], data, needs, Op::Linear { x, w, b }))
    }

    // ── Losses ──────────────────────────────────────────────────────

    /// Mean squared error. The target is treated as a constant: gradients
    /// flow into `pred` only.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (sp, st) = (&self.node(pred).shape, &self.node(target).shape);
        if sp != st {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: sp.clone(),
                rhs: st.clone(),
            });
        }
        let n = self.node(pred).data.len() as f64;
        let v = self
            .node(pred)
            .data
            .iter()
            .zip(&self.node(target).data)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let needs = self.needs(pred);
        Ok(self.push(vec![1], vec![v], needs, Op::Mse { pred, target }))
    }

    /// Mean absolute error with subgradient 0 at exact ties; target constant.
    pub fn mae(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (sp, st) = (&self.node(pred).shape, &self.node(target).shape);
        if sp != st {
            return Err(Error::ShapeMismatch {
                op: "mae",
                lhs: sp.clone(),
                rhs: st.clone(),
            });
        }
        let n = self.node(pred).data.len() as f64;
        let v = self
            .node(pred)
            .data
            .iter()
            .zip(&self.node(target).data)
            .map(|(&p, &t)| (p - t).abs())
            .sum::<f64>()
            / n;
        let needs = self.needs(pred);
        Ok(self.push(vec![1], vec![v], needs, Op::Mae { pred, target }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.node(a).data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![v], needs, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.node(a).data.len() as f64;
        let v = self.node(a).data.iter().sum::<f64>() / n;
        let needs = self.needs(a);
        self.push(vec![1], vec![v], needs, Op::Mean(a))
    }

    // ── Activations and reparameterizations ─────────────────────────

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let node = self.node(x);
        let data: Vec<f64> = node
            .data
            .iter()
            .map(|&v| if v >= 0.0 { v } else { alpha * v })
            .collect();
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        self.push(shape, data, needs, Op::LeakyRelu { x, alpha })
    }

    /// Weight normalization: slice o of the result equals
    /// g[o] * v[o] / ||v[o]|| where slices run along axis 0.
    pub fn weight_norm(&mut self, v: NodeId, g: NodeId) -> Result<NodeId> {
        let (sv, sg) = (&self.node(v).shape, &self.node(g).shape);
        if sg.len() != 1 || sg[0] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "weight_norm",
                lhs: sv.clone(),
                rhs: sg.clone(),
            });
        }
        let slices = sv[0];
        let data = kernels::weight_norm_forward(&self.node(v).data, &self.node(g).data, slices)
            .map_err(|channel| Error::ZeroNormChannel {
                layer: "weight_norm".to_string(),
                channel,
            })?;
        let needs = self.needs(v) || self.needs(g);
        let shape = sv.clone();
        Ok(self.push(shape, data, needs, Op::WeightNorm { v, g }))
    }

    // ── Convolutions ────────────────────────────────────────────────

    /// x[C,H,W] (*) w[O,C,kh,kw] + b[O], cross-correlation with stride/pad.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        self.conv2d_impl(x, w, b, (sw[2], sw[3]), stride, pad, false)
    }

    /// 1-D convolution along the trailing axis: x[C,T] (*) w[O,C,k] + b[O].
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        if sx.len() != 2 || sw.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        self.conv2d_impl(x, w, b, (sw[2], 1), (stride, 1), (pad, 0), true)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_impl(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        one_d: bool,
    ) -> Result<NodeId> {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        let (c, ih, iw) = if one_d {
            (sx[0], sx[1], 1)
        } else {
            (sx[0], sx[1], sx[2])
        };
        let (out_ch, w_in) = (sw[0], sw[1]);
        if w_in != c {
            return Err(Error::ChannelMismatch {
                layer: if one_d { "conv1d" } else { "conv2d" }.to_string(),
                expected: w_in,
                actual: c,
            });
        }
        let oh = kernels::conv_out_len(ih, kernel.0, stride.0, pad.0).ok_or_else(|| {
            Error::DegenerateSpatial {
                layer: if one_d { "conv1d" } else { "conv2d" }.to_string(),
                axis: 0,
                input: ih,
                kernel: kernel.0,
                stride: stride.0,
                padding: pad.0,
            }
        })?;
        let ow = kernels::conv_out_len(iw, kernel.1, stride.1, pad.1).ok_or_else(|| {
            Error::DegenerateSpatial {
                layer: "conv2d".to_string(),
                axis: 1,
                input: iw,
                kernel: kernel.1,
                stride: stride.1,
                padding: pad.1,
            }
        })?;
        let data = kernels::conv2d_forward(
            &self.node(x).data,
            c,
            ih,
            iw,
            &self.node(w).data,
            out_ch,
            kernel,
            stride,
            pad,
            &self.node(b).data,
            oh,
            ow,
        );
        let shape = if one_d {
            vec![out_ch, oh]
        } else {
            vec![out_ch, oh, ow]
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            shape,
            data,
            needs,
            Op::Conv2d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
            },
        ))
    }

    /// Transposed convolution, weight layout [in,O,kh,kw]:
    /// y[o, ih*sh-ph+i, iw*sw-pw+j] += x[c,ih,iw] * w[c,o,i,j].
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
        out_pad: (usize, usize),
    ) -> Result<NodeId> {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        self.convt2d_impl(x, w, b, (sw[2], sw[3]), stride, pad, out_pad, false)
    }

    /// 1-D transposed convolution: x[C,T], w[C,O,k].
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId> {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        if sx.len() != 2 || sw.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose1d",
                lhs: sx,
                rhs: sw,
            });
        }
        self.convt2d_impl(
            x,
            w,
            b,
            (sw[2], 1),
            (stride, 1),
            (pad, 0),
            (out_pad, 0),
            true,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn convt2d_impl(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        out_pad: (usize, usize),
        one_d: bool,
    ) -> Result<NodeId> {
        let sx = self.node(x).shape.clone();
        let sw = self.node(w).shape.clone();
        let (c, ih, iw) = if one_d {
            (sx[0], sx[1], 1)
        } else {
            (sx[0], sx[1], sx[2])
        };
        let (w_in, out_ch) = (sw[0], sw[1]);
        let name = if one_d {
            "conv_transpose1d"
        } else {
            "conv_transpose2d"
        };
        if w_in != c {
            return Err(Error::ChannelMismatch {
                layer: name.to_string(),
                expected: w_in,
                actual: c,
            });
        }
        let oh = kernels::convt_out_len(ih, kernel.0, stride.0, pad.0, out_pad.0).ok_or_else(
            || Error::DegenerateSpatial {
                layer: name.to_string(),
                axis: 0,
                input: ih,
                kernel: kernel.0,
                stride: stride.0,
                padding: pad.0,
            },
        )?;
        let ow = kernels::convt_out_len(iw, kernel.1, stride.1, pad.1, out_pad.1).ok_or_else(
            || Error::DegenerateSpatial {
                layer: name.to_string(),
                axis: 1,
                input: iw,
                kernel: kernel.1,
                stride: stride.1,
                padding: pad.1,
            },
        )?;
        let data = kernels::conv_transpose2d_forward(
            &self.node(x).data,
            c,
            ih,
            iw,
            &self.node(w).data,
            out_ch,
            kernel,
            stride,
            pad,
            &self.node(b).data,
            oh,
            ow,
        );
        let shape = if one_d {
            vec![out_ch, oh]
        } else {
            vec![out_ch, oh, ow]
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            shape,
            data,
            needs,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
            },
        ))
    }

    // ── Structure ───────────────────────────────────────────────────

    /// Concatenation along axis 0; all trailing axes must match.
    pub fn concat0(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat0",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(self.node(a).data.len() + self.node(b).data.len());
        data.extend_from_slice(&self.node(a).data);
        data.extend_from_slice(&self.node(b).data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, needs, Op::Concat0(a, b)))
    }

    /// Row lookup: out[l] = table[ids[l]].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let st = self.node(table).shape.clone();
        if st.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: st,
                rhs: vec![],
            });
        }
        let (vocab, dim) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfVocab {
                token: bad,
                vocab,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&self.node(table).data[i * dim..(i + 1) * dim]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), dim],
            data,
            needs,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Repeats row i of x[L,D] counts[i] times; the duration up-sampler.
    pub fn repeat_rows(&mut self, x: NodeId, counts: &[usize]) -> Result<NodeId> {
        let sx = self.node(x).shape.clone();
        if sx.len() != 2 || sx[0] != counts.len() {
            return Err(Error::ShapeMismatch {
                op: "repeat_rows",
                lhs: sx,
                rhs: vec![counts.len()],
            });
        }
        if let Some(idx) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidDuration {
                index: idx,
                value: 0,
            });
        }
        let dim = sx[1];
        let total: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(total * dim);
        for (l, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                data.extend_from_slice(&self.node(x).data[l * dim..(l + 1) * dim]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![total, dim],
            data,
            needs,
            Op::RepeatRows {
                x,
                counts: counts.to_vec(),
            },
        ))
    }

    /// 2-D transpose.
    pub fn transpose2(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.node(a).shape.clone();
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2",
                lhs: sa,
                rhs: vec![],
            });
        }
        let data = kernels::transposed(&self.node(a).data, sa[0], sa[1]);
        let needs = self.needs(a);
        Ok(self.push(vec![sa[1], sa[0]], data, needs, Op::Transpose2(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.node(a).data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                expected: n,
                actual: self.node(a).data.len(),
            });
        }
        let data = self.node(a).data.clone();
        let needs = self.needs(a);
        Ok(self.push(shape.to_vec(), data, needs, Op::Reshape(a)))
    }

    /// Zero-pads the spatial axes (all axes after the first) at the trailing
    /// edge up to `target`.
    pub fn pad_tail(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let sa = self.node(a).shape.clone();
        if target.len() != sa.len() - 1 || target.iter().zip(&sa[1..]).any(|(&t, &s)| t < s) {
            return Err(Error::ShapeMismatch {
                op: "pad_tail",
                lhs: sa,
                rhs: target.to_vec(),
            });
        }
        let mut shape = vec![sa[0]];
        shape.extend_from_slice(target);
        let mut data = vec![0.0; shape.iter().product()];
        copy_leading_region(&self.node(a).data, &sa, &mut data, &shape, false);
        let needs = self.needs(a);
        Ok(self.push(shape, data, needs, Op::PadTail(a)))
    }

    /// Crops the spatial axes back to `target`, keeping the leading region.
    pub fn crop_tail(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let sa = self.node(a).shape.clone();
        if target.len() != sa.len() - 1 || target.iter().zip(&sa[1..]).any(|(&t, &s)| t > s) {
            return Err(Error::ShapeMismatch {
                op: "crop_tail",
                lhs: sa,
                rhs: target.to_vec(),
            });
        }
        let mut shape = vec![sa[0]];
        shape.extend_from_slice(target);
        let mut data = vec![0.0; shape.iter().product()];
        copy_leading_region(&self.node(a).data, &sa, &mut data, &shape, true);
        let needs = self.needs(a);
        Ok(self.push(shape, data, needs, Op::CropTail(a)))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Tape gradients are recomputed from
    /// scratch on every call; accumulation across calls happens in the bound
    /// parameter tensors via [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.node(loss).shape.clone(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = self.grads[i].take().expect("checked above");
            self.dispatch_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn dispatch_backward(&mut self, i: usize, g: &[f64]) {
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_reduced(nodes, grads, *a, g, 1.0);
                add_reduced(nodes, grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                add_reduced(nodes, grads, *a, g, 1.0);
                add_reduced(nodes, grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                mul_grad(nodes, grads, *a, *b, g);
                mul_grad(nodes, grads, *b, *a, g);
            }
            Op::Scale(a, factor) => {
                let factor = *factor;
                if let Some(buf) = grad_buf(nodes, grads, *a) {
                    for (bv, &gv) in buf.iter_mut().zip(g) {
                        *bv += factor * gv;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if nodes[a.0].needs_grad {
                    let b_t = kernels::transposed(&nodes[b.0].data, k, n);
                    let buf = grad_buf(nodes, grads, a).expect("needs grad");
                    kernels::mm_nn_acc(g, &b_t, buf, m, n, k);
                }
                if nodes[b.0].needs_grad {
                    let a_t = kernels::transposed(&nodes[a.0].data, m, k);
                    let buf = grad_buf(nodes, grads, b).expect("needs grad");
                    kernels::mm_nn_acc(&a_t, g, buf, k, m, n);
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (r, k) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let n = nodes[w.0].shape[1];
                if nodes[x.0].needs_grad {
                    let w_t = kernels::transposed(&nodes[w.0].data, k, n);
                    let buf = grad_buf(nodes, grads, x).expect("needs grad");
                    kernels::mm_nn_acc(g, &w_t, buf, r, n, k);
                }
                if nodes[w.0].needs_grad {
                    let x_t = kernels::transposed(&nodes[x.0].data, r, k);
                    let buf = grad_buf(nodes, grads, w).expect("needs grad");
                    kernels::mm_nn_acc(&x_t, g, buf, k, r, n);
                }
                if let Some(db) = grad_buf(nodes, grads, b) {
                    for row in g.chunks_exact(n) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let (pred, target) = (*pred, *target);
                let n = nodes[pred.0].data.len() as f64;
                let scale = 2.0 * g[0] / n;
                let (pd, td) = (&nodes[pred.0].data, &nodes[target.0].data);
                if let Some(buf) = grad_buf(nodes, grads, pred) {
                    for ((bv, &p), &t) in buf.iter_mut().zip(pd).zip(td) {
                        *bv += scale * (p - t);
                    }
                }
            }
            Op::Mae { pred, target } => {
                let (pred, target) = (*pred, *target);
                let n = nodes[pred.0].data.len() as f64;
                let scale = g[0] / n;
                let (pd, td) = (&nodes[pred.0].data, &nodes[target.0].data);
                if let Some(buf) = grad_buf(nodes, grads, pred) {
                    for ((bv, &p), &t) in buf.iter_mut().zip(pd).zip(td) {
                        let d = p - t;
                        if d > 0.0 {
                            *bv += scale;
                        } else if d < 0.0 {
                            *bv -= scale;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                if let Some(buf) = grad_buf(nodes, grads, *a) {
                    for bv in buf.iter_mut() {
                        *bv += g0;
                    }
                }
            }
            Op::Mean(a) => {
                let share = g[0] / nodes[a.0].data.len() as f64;
                if let Some(buf) = grad_buf(nodes, grads, *a) {
                    for bv in buf.iter_mut() {
                        *bv += share;
                    }
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let (x, alpha) = (*x, *alpha);
                let xd = &nodes[x.0].data;
                if let Some(buf) = grad_buf(nodes, grads, x) {
                    for ((bv, &xv), &gv) in buf.iter_mut().zip(xd).zip(g) {
                        *bv += if xv >= 0.0 { gv } else { alpha * gv };
                    }
                }
            }
            Op::WeightNorm { v, g: gain } => {
                let (v, gain) = (*v, *gain);
                let slices = nodes[v.0].shape[0];
                let len = nodes[v.0].data.len() / slices;
                let vd = &nodes[v.0].data;
                let gaind = &nodes[gain.0].data;
                // per-slice norm and projection of the output gradient onto
                // the unit direction
                let mut norms = vec![0.0; slices];
                let mut dots = vec![0.0; slices];
                for o in 0..slices {
                    let vs = &vd[o * len..(o + 1) * len];
                    let gs = &g[o * len..(o + 1) * len];
                    let norm = vs.iter().map(|x| x * x).sum::<f64>().sqrt();
                    norms[o] = norm;
                    dots[o] = gs.iter().zip(vs).map(|(&a, &b)| a * b).sum::<f64>() / norm;
                }
                if nodes[v.0].needs_grad {
                    let buf = grad_buf(nodes, grads, v).expect("needs grad");
                    for o in 0..slices {
                        let norm = norms[o];
                        let k = gaind[o] / norm;
                        // dv = (g/n) (dw - v_hat (dw . v_hat))
                        let proj = dots[o] / norm;
                        let vs = &vd[o * len..(o + 1) * len];
                        let gs = &g[o * len..(o + 1) * len];
                        for ((bv, &gv), &vv) in buf[o * len..(o + 1) * len]
                            .iter_mut()
                            .zip(gs)
                            .zip(vs)
                        {
                            *bv += k * (gv - vv * proj);
                        }
                    }
                }
                if let Some(dg) = grad_buf(nodes, grads, gain) {
                    for (d, &dot) in dg.iter_mut().zip(&dots) {
                        *d += dot;
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
            } => {
                let (x, w, b) = (*x, *w, *b);
                let (kernel, stride, pad) = (*kernel, *stride, *pad);
                let sx = &nodes[x.0].shape;
                let (c, ih, iw) = (sx[0], sx[1], *sx.get(2).unwrap_or(&1));
                let so = &nodes[i].shape;
                let (out_ch, oh, ow) = (so[0], so[1], *so.get(2).unwrap_or(&1));
                let (ckk, positions) = (c * kernel.0 * kernel.1, oh * ow);
                if let Some(db) = grad_buf(nodes, grads, b) {
                    for (o, row) in g.chunks_exact(positions).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                }
                if nodes[w.0].needs_grad {
                    let col_t =
                        kernels::im2col_t(&nodes[x.0].data, c, ih, iw, oh, ow, kernel, stride, pad);
                    let dw = grad_buf(nodes, grads, w).expect("needs grad");
                    kernels::mm_nn_acc(g, &col_t, dw, out_ch, positions, ckk);
                }
                if nodes[x.0].needs_grad {
                    // dcol = w^T dy, built position-major to keep the weight
                    // matrix untransposed
                    let dy_t = kernels::transposed(g, out_ch, positions);
                    let mut dcol_t = vec![0.0; positions * ckk];
                    kernels::mm_nn_acc(
                        &dy_t,
                        &nodes[w.0].data,
                        &mut dcol_t,
                        positions,
                        out_ch,
                        ckk,
                    );
                    let dx = grad_buf(nodes, grads, x).expect("needs grad");
                    kernels::col2im_t_acc(&dcol_t, dx, c, ih, iw, oh, ow, kernel, stride, pad);
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
            } => {
                let (x, w, b) = (*x, *w, *b);
                let (kernel, stride, pad) = (*kernel, *stride, *pad);
                let sx = &nodes[x.0].shape;
                let (in_ch, ih, iw) = (sx[0], sx[1], *sx.get(2).unwrap_or(&1));
                let so = &nodes[i].shape;
                let (out_ch, oh, ow) = (so[0], so[1], *so.get(2).unwrap_or(&1));
                let (okk, positions) = (out_ch * kernel.0 * kernel.1, ih * iw);
                if let Some(db) = grad_buf(nodes, grads, b) {
                    for (o, row) in g.chunks_exact(oh * ow).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                }
                let (needs_w, needs_x) = (nodes[w.0].needs_grad, nodes[x.0].needs_grad);
                if needs_w || needs_x {
                    // dz[p, (o,i,j)] = dy at the scattered position
                    let dz_t = kernels::im2col_t(g, out_ch, oh, ow, ih, iw, kernel, stride, pad);
                    if needs_w {
                        let x_data = &nodes[x.0].data;
                        let dw = grad_buf(nodes, grads, w).expect("needs grad");
                        kernels::mm_nn_acc(x_data, &dz_t, dw, in_ch, positions, okk);
                    }
                    if needs_x {
                        let w_data = &nodes[w.0].data;
                        let dx = grad_buf(nodes, grads, x).expect("needs grad");
                        kernels::mm_nt_acc(w_data, &dz_t, dx, in_ch, okk, positions);
                    }
                }
            }
            Op::Concat0(a, b) => {
                let (a, b) = (*a, *b);
                let na = nodes[a.0].data.len();
                if let Some(buf) = grad_buf(nodes, grads, a) {
                    for (bv, &gv) in buf.iter_mut().zip(&g[..na]) {
                        *bv += gv;
                    }
                }
                if let Some(buf) = grad_buf(nodes, grads, b) {
                    for (bv, &gv) in buf.iter_mut().zip(&g[na..]) {
                        *bv += gv;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let dim = nodes[table.0].shape[1];
                let ids = ids.clone();
                if let Some(buf) = grad_buf(nodes, grads, table) {
                    for (l, &id) in ids.iter().enumerate() {
                        for (slot, &gv) in buf[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[l * dim..(l + 1) * dim])
                        {
                            *slot += gv;
                        }
                    }
                }
            }
            Op::RepeatRows { x, counts } => {
                let x = *x;
                let dim = nodes[x.0].shape[1];
                let counts = counts.clone();
                if let Some(buf) = grad_buf(nodes, grads, x) {
                    let mut row = 0;
                    for (l, &count) in counts.iter().enumerate() {
                        for _ in 0..count {
                            for (slot, &gv) in buf[l * dim..(l + 1) * dim]
                                .iter_mut()
                                .zip(&g[row * dim..(row + 1) * dim])
                            {
                                *slot += gv;
                            }
                            row += 1;
                        }
                    }
                }
            }
            Op::Transpose2(a) => {
                let a = *a;
                let so = &nodes[i].shape;
                let (rows, cols) = (so[0], so[1]);
                if let Some(buf) = grad_buf(nodes, grads, a) {
                    // out[j, i] = in[i, j]; route each g entry back
                    for r in 0..rows {
                        for c0 in 0..cols {
                            buf[c0 * rows + r] += g[r * cols + c0];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(buf) = grad_buf(nodes, grads, *a) {
                    for (bv, &gv) in buf.iter_mut().zip(g) {
                        *bv += gv;
                    }
                }
            }
            Op::PadTail(a) => {
                let a = *a;
                let sa = nodes[a.0].shape.clone();
                let so = nodes[i].shape.clone();
                if let Some(buf) = grad_buf(nodes, grads, a) {
                    add_leading_region(g, &so, buf, &sa);
                }
            }
            Op::CropTail(a) => {
                let a = *a;
                let sa = nodes[a.0].shape.clone();
                let so = nodes[i].shape.clone();
                if let Some(buf) = grad_buf(nodes, grads, a) {
                    add_leading_region(g, &so, buf, &sa);
                }
            }
        }
    }
}

/// Lazily allocated gradient buffer of a node, or None when it does not
/// track gradients.
fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: NodeId,
) -> Option<&'a mut [f64]> {
    if !nodes[id.0].needs_grad {
        return None;
    }
    let len = nodes[id.0].data.len();
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

/// buf += sign * g, collapsing to a sum when the target is a broadcast
/// scalar.
fn add_reduced(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: NodeId,
    g: &[f64],
    sign: f64,
) {
    if let Some(buf) = grad_buf(nodes, grads, id) {
        if buf.len() == 1 && g.len() > 1 {
            buf[0] += sign * g.iter().sum::<f64>();
        } else {
            for (bv, &gv) in buf.iter_mut().zip(g) {
                *bv += sign * gv;
            }
        }
    }
}

/// Gradient of a broadcast multiply routed to `target`, scaled by the other
/// operand's values.
fn mul_grad(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    target: NodeId,
    other: NodeId,
    g: &[f64],
) {
    if !nodes[target.0].needs_grad {
        return;
    }
    let other_data = &nodes[other.0].data;
    let target_len = nodes[target.0].data.len();
    let buf = grad_buf(nodes, grads, target).expect("needs grad");
    if target_len == 1 && g.len() > 1 {
        buf[0] += g
            .iter()
            .zip(other_data)
            .map(|(&gv, &ov)| gv * ov)
            .sum::<f64>();
    } else if other_data.len() == 1 {
        let ov = other_data[0];
        for (bv, &gv) in buf.iter_mut().zip(g) {
            *bv += gv * ov;
        }
    } else {
        for ((bv, &gv), &ov) in buf.iter_mut().zip(g).zip(other_data) {
            *bv += gv * ov;
        }
    }
}

/// Accumulating variant of [`copy_leading_region`] for gradient routing.
fn add_leading_region(src: &[f64], src_shape: &[usize], dst: &mut [f64], dst_shape: &[usize]) {
    debug_assert_eq!(src_shape[0], dst_shape[0]);
    let overlap: Vec<usize> = src_shape[1..]
        .iter()
        .zip(&dst_shape[1..])
        .map(|(&a, &b)| a.min(b))
        .collect();
    match overlap.len() {
        1 => {
            let (c, st, dt) = (src_shape[0], src_shape[1], dst_shape[1]);
            for ch in 0..c {
                for (d, &s) in dst[ch * dt..ch * dt + overlap[0]]
                    .iter_mut()
                    .zip(&src[ch * st..ch * st + overlap[0]])
                {
                    *d += s;
                }
            }
        }
        2 => {
            let c = src_shape[0];
            let (sh, sw) = (src_shape[1], src_shape[2]);
            let (dh, dw) = (dst_shape[1], dst_shape[2]);
            for ch in 0..c {
                for h in 0..overlap[0] {
                    let s0 = (ch * sh + h) * sw;
                    let d0 = (ch * dh + h) * dw;
                    for (d, &s) in dst[d0..d0 + overlap[1]]
                        .iter_mut()
                        .zip(&src[s0..s0 + overlap[1]])
                    {
                        *d += s;
                    }
                }
            }
        }
        _ => unreachable!("pad/crop support 1-D and 2-D spatial layouts"),
    }
}

/// Copies the overlapping leading region between two tensors whose shapes
/// agree on axis 0 and differ only in trailing spatial extents. `shrinking`
/// is true when dst spatial extents are <= src extents.
fn copy_leading_region(
    src: &[f64],
    src_shape: &[usize],
    dst: &mut [f64],
    dst_shape: &[usize],
    shrinking: bool,
) {
    debug_assert_eq!(src_shape[0], dst_shape[0]);
    let overlap: Vec<usize> = src_shape[1..]
        .iter()
        .zip(&dst_shape[1..])
        .map(|(&a, &b)| a.min(b))
        .collect();
    let _ = shrinking;
    match overlap.len() {
        1 => {
            let (c, st, dt) = (src_shape[0], src_shape[1], dst_shape[1]);
            for ch in 0..c {
                let s = &src[ch * st..ch * st + overlap[0]];
                dst[ch * dt..ch * dt + overlap[0]].copy_from_slice(s);
            }
        }
        2 => {
            let c = src_shape[0];
            let (sh, sw) = (src_shape[1], src_shape[2]);
            let (dh, dw) = (dst_shape[1], dst_shape[2]);
            for ch in 0..c {
                for h in 0..overlap[0] {
                    let s0 = (ch * sh + h) * sw;
                    let d0 = (ch * dh + h) * dw;
                    dst[d0..d0 + overlap[1]].copy_from_slice(&src[s0..s0 + overlap[1]]);
                }
            }
        }
        _ => unreachable!("pad/crop support 1-D and 2-D spatial layouts"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[3], &[1.0, 2.0, 3.0]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn scale_by_zero_zeroes_value_and_grad() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", &Tensor::param(vec![3], vec![1.0, -2.0, 3.0]).unwrap())
            .unwrap();
        let y = tape.scale(x, 0.0);
        assert_eq!(tape.data(y), &[0.0, 0.0, 0.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad("x").unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(&t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));

        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, i2).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn mse_and_mae_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let same = tape.mse(x, x).unwrap();
        assert_eq!(tape.item(same), 0.0);
        let zero = tape.full(&[2], 0.0);
        let ones = tape.full(&[2], 1.0);
        let m = tape.mse(zero, ones).unwrap();
        assert_eq!(tape.item(m), 1.0);

        let p = tape.constant(&t(&[2], &[1.0, -1.0]));
        let z = tape.full(&[2], 0.0);
        let a = tape.mae(p, z).unwrap();
        assert_eq!(tape.item(a), 1.0);
        let aa = tape.mae(p, p).unwrap();
        assert_eq!(tape.item(aa), 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", &Tensor::param(vec![3], vec![0.3, -0.1, 2.0]).unwrap())
            .unwrap();
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad("x").unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_mse_against_zero() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", &Tensor::param(vec![1], vec![2.0]).unwrap())
            .unwrap();
        let zero = tape.full(&[1], 0.0);
        let loss = tape.mse(x, zero).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad("x").unwrap(), &[4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2], &[1.0, 2.0]));
        match tape.backward(x) {
            Err(Error::NotScalar { shape, .. }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NotScalar, got {other:?}"),
        }
    }

    #[test]
    fn backward_linearity_sum_of_losses() {
        // grad of (l1 + l2) equals grad of l1 plus grad of l2.
        let xt = Tensor::param(vec![3], vec![0.5, -1.5, 2.5]).unwrap();
        let yt = t(&[3], &[1.0, 0.0, -1.0]);

        let run = |combined: bool| -> Vec<f64> {
            let mut param = xt.clone();
            param.zero_grad();
            if combined {
                let mut tape = Tape::new();
                let x = tape.param("x", &param).unwrap();
                let y = tape.constant(&yt);
                let l1 = tape.mse(x, y).unwrap();
                let l2 = tape.mae(x, y).unwrap();
                let l = tape.add(l1, l2).unwrap();
                tape.backward(l).unwrap();
                tape.for_each_param_grad(|_, g| param.accumulate_grad(g));
            } else {
                for pick in 0..2 {
                    let mut tape = Tape::new();
                    let x = tape.param("x", &param).unwrap();
                    let y = tape.constant(&yt);
                    let l = if pick == 0 {
                        tape.mse(x, y).unwrap()
                    } else {
                        tape.mae(x, y).unwrap()
                    };
                    tape.backward(l).unwrap();
                    tape.for_each_param_grad(|_, g| param.accumulate_grad(g));
                }
            }
            param.grad.unwrap()
        };

        let combined = run(true);
        let split = run(false);
        for (a, b) in combined.iter().zip(&split) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn leaky_relu_values_and_alpha() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.data(y), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn concat_then_split_recovers_inputs() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![1, 2, 2]));
        let b = tape.constant(&Tensor::full(vec![1, 2, 2], 1.0));
        let c = tape.concat0(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2, 2]);
        assert_eq!(&tape.data(c)[..4], &[0.0; 4]);
        assert_eq!(&tape.data(c)[4..], &[1.0; 4]);
    }

    #[test]
    fn concat_grad_routes_to_both_inputs() {
        let mut tape = Tape::new();
        let at = Tensor::param(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let bt = Tensor::param(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let a = tape.param("a", &at).unwrap();
        let b = tape.param("b", &bt).unwrap();
        let c = tape.concat0(a, b).unwrap();
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad("a").unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.param_grad("b").unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn repeat_rows_semantics() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.repeat_rows(x, &[3, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2]);
        assert_eq!(
            tape.data(y),
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0]
        );
        assert!(matches!(
            tape.repeat_rows(x, &[1, 0]),
            Err(Error::InvalidDuration { index: 1, value: 0 })
        ));
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let padded = tape.pad_tail(x, &[4, 5]).unwrap();
        assert_eq!(tape.shape(padded), &[1, 4, 5]);
        let back = tape.crop_tail(padded, &[2, 3]).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut tape = Tape::new();
        let table = tape.constant(&t(&[2, 3], &[0.0; 6]));
        assert!(matches!(
            tape.embedding(table, &[0, 2]),
            Err(Error::TokenOutOfVocab { token: 2, vocab: 2 })
        ));
    }

    #[test]
    fn duplicate_param_binding_rejected() {
        let mut tape = Tape::new();
        let p = Tensor::param(vec![1], vec![0.0]).unwrap();
        tape.param("w", &p).unwrap();
        assert!(tape.param("w", &p).is_err());
    }

    #[test]
    fn smooth_op_gradients_match_finite_differences_tightly() {
        // mul, matmul, mse and leaky_relu (away from zero) are smooth at the
        // probe points; central differences agree to better than 1e-6.
        let mut rng = crate::rng::Rng::new(21);
        let eps = 1e-5;
        let a_data = rng.normal_vec(12, 1.0);
        let b_data = rng.normal_vec(12, 1.0);
        let m_data = rng.normal_vec(12, 1.0);
        let n_data = rng.normal_vec(8, 1.0);

        let eval = |a_mod: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let mut a_t = Tensor::from_slice(&[3, 4], a_mod).unwrap();
            a_t.requires_grad = true;
            let a = tape.param("a", &a_t).unwrap();
            let b = tape.constant(&t(&[3, 4], &b_data));
            let m = tape.constant(&t(&[3, 4], &m_data));
            let n = tape.constant(&t(&[4, 2], &n_data));
            let prod = tape.mul(a, b).unwrap();
            let act = tape.leaky_relu(prod, 0.2);
            let mm = tape.matmul(act, n).unwrap();
            let target = tape.full(&[3, 2], 0.25);
            let loss = tape.mse(mm, target).unwrap();
            let a_mse = tape.mse(a, m).unwrap();
            let total = tape.add(loss, a_mse).unwrap();
            let value = tape.item(total);
            tape.backward(total).unwrap();
            (value, tape.param_grad("a").unwrap().to_vec())
        };

        let (_, analytic) = eval(&a_data);
        for i in 0..a_data.len() {
            let mut up = a_data.clone();
            up[i] += eps;
            let mut down = a_data.clone();
            down[i] -= eps;
            let numeric = (eval(&up).0 - eval(&down).0) / (2.0 * eps);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-9);
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-6,
                "element {i}: {} vs {}",
                analytic[i],
                numeric
            );
        }
    }

    #[test]
    fn deterministic_forward_backward() {
        let build = || {
            let mut tape = Tape::new();
            let p = Tensor::param(vec![2, 2], vec![0.3, -0.7, 1.1, 0.9]).unwrap();
            let x = tape.param("p", &p).unwrap();
            let y = tape.leaky_relu(x, 0.2);
            let z = tape.transpose2(y).unwrap();
            let w = tape.matmul(z, x).unwrap();
            let loss = tape.mean(w);
            tape.backward(loss).unwrap();
            (
                tape.data(w).to_vec(),
                tape.param_grad("p").unwrap().to_vec(),
            )
        };
        assert_eq!(build(), build());
    }
}
