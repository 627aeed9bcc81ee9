//! Reverse-mode tape. Operations append nodes; `backward` walks the tape in
//! reverse construction order, which is a reverse topological order because
//! every op only references earlier vars.

use super::conv::{self, Conv2dDims};
use super::kernels;
use super::scan::{self, ScanMode, ScanShapes};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<f64>,
        inv_stds: Vec<f64>,
    },
    MeanMid(Var),
    ScaleChannels {
        x: Var,
        scores: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    DwConv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        pad: usize,
    },
    Reshape(Var),
    Transpose2d(Var),
    TransposeGrid(Var),
    ReverseMid(Var),
    SliceLast {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatLast(Vec<Var>),
    SumAll(Var),
    SelectiveScan {
        x: Var,
        dt: Var,
        bmat: Var,
        cmat: Var,
        a_log: Var,
        mode: ScanMode,
        h_saved: Vec<f64>,
    },
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, if it required gradients and was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn tensor(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(tape.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), self.any_grad(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), self.any_grad(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), self.any_grad(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("scale shape");
        let rg = self.requires_grad(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("unary shape");
        let rg = self.requires_grad(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::silu, Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// x (..., d_in) @ w (d_in, d_out) + bias (d_out).
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(Error::shape("linear", format!("weight must be rank 2, got {:?}", ws)));
        }
        let d_in = *xs.last().ok_or_else(|| Error::shape("linear", "rank-0 input".into()))?;
        if ws[0] != d_in {
            return Err(Error::shape(
                "linear",
                format!("input last axis {} vs weight rows {}", d_in, ws[0]),
            ));
        }
        let d_out = ws[1];
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs d_out {}", self.shape(b), d_out),
                ));
            }
        }
        let rows = self.value(x).numel() / d_in;
        let data = kernels::linear_fwd(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            rows,
            d_in,
            d_out,
        );
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let t = Tensor::new(out_shape, data)?;
        let mut deps = vec![x, w];
        if let Some(b) = bias {
            deps.push(b);
        }
        let rg = self.any_grad(&deps);
        Ok(self.push(t, Op::Linear { x, w, bias }, rg))
    }

    /// LayerNorm over the trailing (channel) axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        let c = *xs.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input".into()))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs channel axis {}",
                    self.shape(gain),
                    self.shape(bias),
                    c
                ),
            ));
        }
        let rows = self.value(x).numel() / c;
        let (data, means, inv_stds) = kernels::layernorm_fwd(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            rows,
            c,
            eps,
        );
        let t = Tensor::new(xs.to_vec(), data)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                inv_stds,
            },
            rg,
        ))
    }

    /// Mean over the middle axis: (b, n, c) -> (b, c).
    pub fn mean_mid(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::shape("mean_mid", format!("expected rank 3, got {:?}", xs)));
        }
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        let data = kernels::mean_mid_fwd(self.value(x).data(), b, n, c);
        let t = Tensor::new(vec![b, c], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::MeanMid(x), rg))
    }

    /// (b, n, c) scaled per-channel by scores (b, c), broadcast over n.
    pub fn scale_channels(&mut self, x: Var, scores: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ss = self.shape(scores);
        if xs.len() != 3 || ss.len() != 2 || xs[0] != ss[0] || xs[2] != ss[1] {
            return Err(Error::shape(
                "scale_channels",
                format!("x {:?} vs scores {:?}", xs, ss),
            ));
        }
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        let data =
            kernels::scale_channels_fwd(self.value(x).data(), self.value(scores).data(), b, n, c);
        let t = Tensor::new(xs.to_vec(), data)?;
        let rg = self.any_grad(&[x, scores]);
        Ok(self.push(t, Op::ScaleChannels { x, scores }, rg))
    }

    // ── convolutions ─────────────────────────────────────────────────

    fn conv2d_dims(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Conv2dDims> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be (b,h,w,c), got {:?}", xs)));
        }
        if ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be (kh,kw,ci,co), got {:?}", ws),
            ));
        }
        if ws[2] != xs[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs weight channels {}", xs[3], ws[2]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1".into()));
        }
        let oh = conv::conv_out_len(xs[1], ws[0], stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {} exceeds padded height", ws[0])))?;
        let ow = conv::conv_out_len(xs[2], ws[1], stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {} exceeds padded width", ws[1])))?;
        Ok(Conv2dDims {
            b: xs[0],
            h: xs[1],
            wd: xs[2],
            ci: xs[3],
            co: ws[3],
            kh: ws[0],
            kw: ws[1],
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Full 2-D convolution: x (b,h,w,ci), w (kh,kw,ci,co), bias (co).
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let dims = self.conv2d_dims(x, w, stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [dims.co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs out channels {}", self.shape(b), dims.co),
                ));
            }
        }
        let data = conv::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            dims,
        );
        let t = Tensor::new(vec![dims.b, dims.oh, dims.ow, dims.co], data)?;
        let mut deps = vec![x, w];
        if let Some(b) = bias {
            deps.push(b);
        }
        let rg = self.any_grad(&deps);
        Ok(self.push(t, Op::Conv2d { x, w, bias, stride, pad }, rg))
    }

    /// Depth-wise 2-D convolution, stride 1: x (b,h,w,c), w (k,k,c), bias (c).
    pub fn dwconv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 {
            return Err(Error::shape("dwconv2d", format!("input must be (b,h,w,c), got {:?}", xs)));
        }
        if ws.len() != 3 || ws[0] != ws[1] {
            return Err(Error::shape(
                "dwconv2d",
                format!("weight must be (k,k,c), got {:?}", ws),
            ));
        }
        if ws[2] != xs[3] {
            return Err(Error::shape(
                "dwconv2d",
                format!("input channels {} vs weight channels {}", xs[3], ws[2]),
            ));
        }
        let k = ws[0];
        if conv::conv_out_len(xs[1], k, 1, pad) != Some(xs[1])
            || conv::conv_out_len(xs[2], k, 1, pad) != Some(xs[2])
        {
            return Err(Error::shape(
                "dwconv2d",
                format!("kernel {} with pad {} is not shape-preserving on {:?}", k, pad, xs),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [xs[3]] {
                return Err(Error::shape(
                    "dwconv2d",
                    format!("bias {:?} vs channels {}", self.shape(b), xs[3]),
                ));
            }
        }
        let data = conv::dwconv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            xs[0],
            xs[1],
            xs[2],
            xs[3],
            k,
            pad,
        );
        let t = Tensor::new(xs.to_vec(), data)?;
        let mut deps = vec![x, w];
        if let Some(b) = bias {
            deps.push(b);
        }
        let rg = self.any_grad(&deps);
        Ok(self.push(t, Op::DwConv2d { x, w, bias, pad }, rg))
    }

    /// 1-D convolution along the trailing axis of (rows, l) with a shared
    /// kernel, zero padding, no bias.
    pub fn conv1d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 {
            return Err(Error::shape("conv1d", format!("input must be rank 2, got {:?}", xs)));
        }
        if ws.len() != 1 {
            return Err(Error::shape("conv1d", format!("weight must be rank 1, got {:?}", ws)));
        }
        if conv::conv_out_len(xs[1], ws[0], 1, pad) != Some(xs[1]) {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {} with pad {} is not length-preserving on {}", ws[0], pad, xs[1]),
            ));
        }
        let data = conv::conv1d_fwd(self.value(x).data(), self.value(w).data(), xs[0], xs[1], pad);
        let t = Tensor::new(xs.to_vec(), data)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(t, Op::Conv1d { x, w, pad }, rg))
    }

    // ── shape manipulation ───────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(x), shape),
            ));
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::shape("transpose2d", format!("expected rank 2, got {:?}", xs)));
        }
        let (m, n) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Transpose2d(x), rg))
    }

    /// (b, h, w, c) -> (b, w, h, c): swaps the two spatial axes.
    pub fn transpose_grid(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape("transpose_grid", format!("expected rank 4, got {:?}", xs)));
        }
        let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let data = transpose_grid_data(self.value(x).data(), b, h, w, c);
        let t = Tensor::new(vec![b, w, h, c], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::TransposeGrid(x), rg))
    }

    /// Reverses (b, n, c) along the sequence axis.
    pub fn reverse_mid(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::shape("reverse_mid", format!("expected rank 3, got {:?}", xs)));
        }
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        let data = reverse_mid_data(self.value(x).data(), b, n, c);
        let t = Tensor::new(xs.to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::ReverseMid(x), rg))
    }

    /// Slice of the trailing axis: channels [start, start+len).
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        let c = *xs.last().ok_or_else(|| Error::shape("slice_last", "rank-0 input".into()))?;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_last",
                format!("range {}..{} out of channel axis {}", start, start + len, c),
            ));
        }
        let rows = self.value(x).numel() / c;
        let xd = self.value(x).data();
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&xd[r * c + start..r * c + start + len]);
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::SliceLast { x, start, len }, rg))
    }

    /// Concatenates along the trailing axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_last", "no inputs".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut c_total = 0;
        for &p in parts {
            let ps = self.shape(p);
            if ps.len() != lead.len() + 1 || ps[..ps.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_last",
                    format!("leading axes differ: {:?} vs {:?}", &ps[..ps.len() - 1], lead),
                ));
            }
            c_total += *ps.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * c_total];
        let mut offset = 0;
        for &p in parts {
            let c = *self.shape(p).last().unwrap();
            let pd = self.value(p).data();
            for r in 0..rows {
                data[r * c_total + offset..r * c_total + offset + c]
                    .copy_from_slice(&pd[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let mut shape = lead;
        shape.push(c_total);
        let t = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatLast(parts.to_vec()), rg))
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Sum of all elements, as a shape-[1] scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    // ── state-space scan ─────────────────────────────────────────────

    /// Selective scan: x/dt (b,l,d), bmat/cmat (b,l,n), a_log (d,n) with
    /// effective state coefficient -exp(a_log). Output is (b,l,d).
    pub fn selective_scan(
        &mut self,
        x: Var,
        dt: Var,
        bmat: Var,
        cmat: Var,
        a_log: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(
                "selective_scan",
                format!("x must be (b,l,d), got {:?}", xs),
            ));
        }
        if self.shape(dt) != xs {
            return Err(Error::shape(
                "selective_scan",
                format!("dt {:?} vs x {:?}", self.shape(dt), xs),
            ));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let bs = self.shape(bmat);
        if bs.len() != 3 || bs[0] != b || bs[1] != l {
            return Err(Error::shape(
                "selective_scan",
                format!("bmat {:?} vs (b,l,·) = ({},{})", bs, b, l),
            ));
        }
        let n_state = bs[2];
        if self.shape(cmat) != [b, l, n_state] {
            return Err(Error::shape(
                "selective_scan",
                format!("cmat {:?} vs {:?}", self.shape(cmat), [b, l, n_state]),
            ));
        }
        if self.shape(a_log) != [d, n_state] {
            return Err(Error::shape(
                "selective_scan",
                format!("a_log {:?} vs {:?}", self.shape(a_log), [d, n_state]),
            ));
        }
        if let Some(pos) = self.value(dt).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::Contract(format!(
                "selective_scan requires dt > 0, found {} at flat index {}",
                self.value(dt).data()[pos],
                pos
            )));
        }
        let rg = self.any_grad(&[x, dt, bmat, cmat, a_log]);
        let sh = ScanShapes {
            batch: b,
            len: l,
            dim: d,
            n_state,
        };
        let (y, h_saved) = scan::scan_fwd(
            self.value(x).data(),
            self.value(dt).data(),
            self.value(bmat).data(),
            self.value(cmat).data(),
            self.value(a_log).data(),
            &sh,
            mode,
            rg,
        )
        .map_err(|t| Error::Numeric(format!("selective_scan produced non-finite state at step {}", t)))?;
        let t = Tensor::new(xs, y)?;
        Ok(self.push(
            t,
            Op::SelectiveScan {
                x,
                dt,
                bmat,
                cmat,
                a_log,
                mode,
                h_saved,
            },
            rg,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every reachable var with
    /// `requires_grad` receives its total derivative; reuse of a var
    /// accumulates additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn apply_backward(&self, node: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                let ga: Vec<f64> = g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect();
                let gb: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                self.accumulate(grads, *a, &ga);
                self.accumulate(grads, *b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(ad)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let yd = self.nodes[node].value.data();
                let ga: Vec<f64> = g.iter().zip(yd).map(|(gv, &t)| gv * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let yd = self.nodes[node].value.data();
                let ga: Vec<f64> = g.iter().zip(yd).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Silu(a) => {
                let ad = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(ad)
                    .map(|(gv, &x)| gv * kernels::silu_deriv(x))
                    .collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Softplus(a) => {
                let ad = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(ad)
                    .map(|(gv, &x)| gv * kernels::sigmoid(x))
                    .collect();
                self.accumulate(grads, *a, &ga);
            }
            Op::Linear { x, w, bias } => {
                let d_in = self.shape(*w)[0];
                let d_out = self.shape(*w)[1];
                let rows = self.value(*x).numel() / d_in;
                if self.requires_grad(*x) {
                    let gx = kernels::linear_bwd_x(g, self.value(*w).data(), rows, d_in, d_out);
                    self.accumulate(grads, *x, &gx);
                }
                if self.requires_grad(*w) {
                    let gw = kernels::linear_bwd_w(self.value(*x).data(), g, rows, d_in, d_out);
                    self.accumulate(grads, *w, &gw);
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let gb = kernels::linear_bwd_bias(g, rows, d_out);
                        self.accumulate(grads, *b, &gb);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                inv_stds,
            } => {
                let c = *self.shape(*x).last().unwrap();
                let rows = self.value(*x).numel() / c;
                let (gx, ggain, gbias) = kernels::layernorm_bwd(
                    self.value(*x).data(),
                    self.value(*gain).data(),
                    means,
                    inv_stds,
                    g,
                    rows,
                    c,
                );
                self.accumulate(grads, *x, &gx);
                self.accumulate(grads, *gain, &ggain);
                self.accumulate(grads, *bias, &gbias);
            }
            Op::MeanMid(x) => {
                let xs = self.shape(*x);
                let gx = kernels::mean_mid_bwd(g, xs[0], xs[1], xs[2]);
                self.accumulate(grads, *x, &gx);
            }
            Op::ScaleChannels { x, scores } => {
                let xs = self.shape(*x);
                let (gx, gs) = kernels::scale_channels_bwd(
                    self.value(*x).data(),
                    self.value(*scores).data(),
                    g,
                    xs[0],
                    xs[1],
                    xs[2],
                );
                self.accumulate(grads, *x, &gx);
                self.accumulate(grads, *scores, &gs);
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let dims = self
                    .conv2d_dims(*x, *w, *stride, *pad)
                    .expect("conv2d dims validated at forward");
                let (gx, gw, gb) = conv::conv2d_bwd(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    dims,
                    bias.is_some(),
                );
                self.accumulate(grads, *x, &gx);
                self.accumulate(grads, *w, &gw);
                if let (Some(b), Some(gb)) = (bias, gb) {
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::DwConv2d { x, w, bias, pad } => {
                let xs = self.shape(*x);
                let k = self.shape(*w)[0];
                let (gx, gw, gb) = conv::dwconv2d_bwd(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    xs[0],
                    xs[1],
                    xs[2],
                    xs[3],
                    k,
                    *pad,
                    bias.is_some(),
                );
                self.accumulate(grads, *x, &gx);
                self.accumulate(grads, *w, &gw);
                if let (Some(b), Some(gb)) = (bias, gb) {
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Conv1d { x, w, pad } => {
                let xs = self.shape(*x);
                let (gx, gw) = conv::conv1d_bwd(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    xs[0],
                    xs[1],
                    *pad,
                );
                self.accumulate(grads, *x, &gx);
                self.accumulate(grads, *w, &gw);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g);
            }
            Op::Transpose2d(x) => {
                let xs = self.shape(*x);
                let (m, n) = (xs[0], xs[1]);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::TransposeGrid(x) => {
                let xs = self.shape(*x);
                // forward mapped (b,h,w,c) -> (b,w,h,c); transpose back
                let gx = transpose_grid_data(g, xs[0], xs[2], xs[1], xs[3]);
                self.accumulate(grads, *x, &gx);
            }
            Op::ReverseMid(x) => {
                let xs = self.shape(*x);
                let gx = reverse_mid_data(g, xs[0], xs[1], xs[2]);
                self.accumulate(grads, *x, &gx);
            }
            Op::SliceLast { x, start, len } => {
                let xs = self.shape(*x);
                let c = *xs.last().unwrap();
                let rows = self.value(*x).numel() / c;
                let mut gx = vec![0.0; self.value(*x).numel()];
                for r in 0..rows {
                    gx[r * c + start..r * c + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::ConcatLast(parts) => {
                let out_shape = self.nodes[node].value.shape();
                let c_total = *out_shape.last().unwrap();
                let rows = self.nodes[node].value.numel() / c_total;
                let mut offset = 0;
                for &p in parts {
                    let c = *self.shape(p).last().unwrap();
                    if self.requires_grad(p) {
                        let mut gp = vec![0.0; rows * c];
                        for r in 0..rows {
                            gp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * c_total + offset..r * c_total + offset + c]);
                        }
                        self.accumulate(grads, p, &gp);
                    }
                    offset += c;
                }
            }
            Op::SumAll(x) => {
                let gx = vec![g[0]; self.value(*x).numel()];
                self.accumulate(grads, *x, &gx);
            }
            Op::SelectiveScan {
                x,
                dt,
                bmat,
                cmat,
                a_log,
                mode,
                h_saved,
            } => {
                let xs = self.shape(*x);
                let sh = ScanShapes {
                    batch: xs[0],
                    len: xs[1],
                    dim: xs[2],
                    n_state: self.shape(*bmat)[2],
                };
                let out = scan::scan_bwd(
                    self.value(*x).data(),
                    self.value(*dt).data(),
                    self.value(*bmat).data(),
                    self.value(*cmat).data(),
                    self.value(*a_log).data(),
                    h_saved,
                    g,
                    &sh,
                    *mode,
                );
                self.accumulate(grads, *x, &out.gx);
                self.accumulate(grads, *dt, &out.gdt);
                self.accumulate(grads, *bmat, &out.gbmat);
                self.accumulate(grads, *cmat, &out.gcmat);
                self.accumulate(grads, *a_log, &out.ga_log);
            }
        }
    }
}

fn transpose_grid_data(x: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let src = ((bi * h + hi) * w + wi) * c;
                let dst = ((bi * w + wi) * h + hi) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

fn reverse_mid_data(x: &[f64], b: usize, n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ni in 0..n {
            let src = (bi * n + ni) * c;
            let dst = (bi * n + (n - 1 - ni)) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

#[allow(unused)]
fn unused_strides_hook() {
    let _ = strides_of(&[1]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = t.tanh(x);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_accumulation_is_exact() {
        // y = x + x: grad must be exactly 2 per element
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), true);
        let y = t.add(x, x).unwrap();
        let loss = t.sum_all(y);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_of_linear_grad_is_input_broadcast() {
        // loss = sum(x @ W), x fixed: dL/dW[i][j] = sum_rows x[r][i]
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = t.leaf(Tensor::zeros(&[3, 2]), true);
        let y = t.linear(x, w, None).unwrap();
        let loss = t.sum_all(y);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn tanh_grad_at_zero_is_one() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::zeros(&[4]), true);
        let y = t.tanh(p);
        let loss = t.sum_all(y);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 2]), false);
        let b = t.leaf(Tensor::zeros(&[2, 3]), false);
        match t.add(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }
}
