//! Eager reverse-mode differentiation.
//!
//! Every primitive evaluates immediately and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse execution order once,
//! accumulating vector-Jacobian products into a [`Gradients`] table.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;
use crate::window::Window;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        mask: Option<Arc<[bool]>>,
    },
    LogSoftmax {
        x: Var,
        mask: Option<Arc<[bool]>>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<Vec<T>>,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Pad {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        before: usize,
        after: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        take: usize,
    },
    Reshape(Var),
    Bilinear {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
        oh: usize,
        ow: usize,
    },
    GradReverse {
        x: Var,
        lambda: T,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    LocalCorr {
        f1: Var,
        f2: Var,
        win: Window,
        scale: T,
    },
    WindowGather {
        weights: Var,
        src: Var,
        win: Window,
    },
    KlRows {
        logp: Var,
        target: Arc<Tensor<T>>,
        row_weight: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed primitives.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `dLoss/dVar` for every node the loss depends on.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn emit(&mut self, name: &'static str, shape: &[usize], data: Vec<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        check_finite(name, &data)?;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(shape, data)?, rg, op))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.emit(name, &shape, data, &[a, b], op)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.emit(name, &shape, data, &[x], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias` (shape `[C]`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_bias", &[c], self.shape(bias)));
        }
        let shape = self.shape(x).to_vec();
        let b = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&b).map(|(v, bb)| *v + *bb).collect::<Vec<_>>())
            .collect();
        self.emit("add_bias", &shape, data, &[x, bias], Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.emit("sum", &[], vec![T::of(s)], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.emit("mean", &[], vec![T::of(s / n as f64)], &[x], Op::Mean(x))
    }

    fn check_mask(&self, op: &'static str, x: Var, mask: &Option<Arc<[bool]>>) -> Result<()> {
        if let Some(m) = mask {
            let n = self.value(x).len();
            if m.len() != n {
                return Err(Error::shape(op, &[n], &[m.len()]));
            }
            let k = self.value(x).last_dim();
            if m.chunks(k).any(|row| !row.iter().any(|&b| b)) {
                return Err(Error::invalid(format!("{op}: a row has no unmasked entry")));
            }
        }
        Ok(())
    }

    /// Softmax over the last axis. Masked-out entries are excluded from the
    /// normalisation and produce exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        self.check_mask("softmax", x, &mask)?;
        let shape = self.shape(x).to_vec();
        let k = self.value(x).last_dim();
        let mut data = vec![T::zero(); self.value(x).len()];
        for (r, (row, out)) in self.value(x).data().chunks(k).zip(data.chunks_mut(k)).enumerate() {
            let m = mask.as_ref().map(|m| &m[r * k..(r + 1) * k]);
            softmax_row(row, m, out);
        }
        self.emit("softmax", &shape, data, &[x], Op::Softmax { x, mask })
    }

    /// Log-softmax over the last axis. Masked-out entries are set to zero and
    /// carry no gradient; consumers must skip them.
    pub fn log_softmax(&mut self, x: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        self.check_mask("log_softmax", x, &mask)?;
        let shape = self.shape(x).to_vec();
        let k = self.value(x).last_dim();
        let mut data = vec![T::zero(); self.value(x).len()];
        for (r, (row, out)) in self.value(x).data().chunks(k).zip(data.chunks_mut(k)).enumerate() {
            let m = mask.as_ref().map(|m| &m[r * k..(r + 1) * k]);
            let lse = logsumexp(row, m);
            for (j, (o, v)) in out.iter_mut().zip(row).enumerate() {
                if m.is_none_or(|m| m[j]) {
                    *o = *v - lse;
                }
            }
        }
        self.emit("log_softmax", &shape, data, &[x], Op::LogSoftmax { x, mask })
    }

    /// 2-D matrix product `op(a) * op(b)`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::invalid("matmul expects rank-2 operands"));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", &[m, ka], &[kb, n]));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(ta, tb, m, n, ka, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        self.emit("matmul", &[m, n], out, &[a, b], Op::MatMul { a, b, ta, tb, m, n, k: ka })
    }

    /// Zero-padded 2-D convolution. `x`: `[N, Cin, H, W]`, `w`: `[Cout, Cin, kh, kw]`,
    /// `b`: `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::invalid("conv2d expects rank-4 input and kernel"));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &[sw[1]], &[sx[1]]));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::shape("conv2d bias", &[sw[0]], self.shape(b)));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::invalid("conv2d: kernel larger than padded input or zero stride"));
        }
        let geom = ConvGeom {
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let batch = sx[0];
        let (out, cols) = kernels::conv2d_forward(
            &geom,
            batch,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let shape = [batch, geom.cout, geom.out_h(), geom.out_w()];
        let cols = if self.rg(&[w]) { cols } else { Vec::new() };
        self.emit(
            "conv2d",
            &shape,
            out,
            &[x, w, b],
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cols,
            },
        )
    }

    fn gather(&mut self, name: &'static str, x: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        self.emit(
            name,
            shape,
            data,
            &[x],
            Op::Gather {
                x,
                index: index.into(),
            },
        )
    }

    /// Reorders axes; `perm[d]` names the input axis that becomes output axis `d`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != shape.len() || seen.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::invalid(format!("permute: {perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (out_shape, idx) = kernels::permute_index(&shape, perm);
        self.gather("permute", x, &out_shape, idx)
    }

    /// `[h, w, u*u*k]` → `[h*u, w*u, k]`.
    pub fn pixel_shuffle(&mut self, x: Var, u: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || u == 0 || !s[2].is_multiple_of(u * u) {
            return Err(Error::invalid(format!("pixel_shuffle: shape {s:?} not divisible by {u}^2")));
        }
        let k = s[2] / (u * u);
        let idx = kernels::pixel_shuffle_index(s[0], s[1], k, u);
        self.gather("pixel_shuffle", x, &[s[0] * u, s[1] * u, k], idx)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, rg, Op::Reshape(x)))
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("pad: axis out of range"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let nl = len + before + after;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * nl * inner];
        for o in 0..outer {
            let s = &src[o * len * inner..(o + 1) * len * inner];
            out[(o * nl + before) * inner..(o * nl + before + len) * inner].copy_from_slice(s);
        }
        let mut os = shape.clone();
        os[axis] = nl;
        self.emit(
            "pad",
            &os,
            out,
            &[x],
            Op::Pad {
                x,
                outer,
                len,
                inner,
                before,
                after,
            },
        )
    }

    /// Contiguous range `[start, start + take)` along one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, take: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + take > shape[axis] {
            return Err(Error::invalid("slice: range out of bounds"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + start + take) * inner]);
        }
        let mut os = shape.clone();
        os[axis] = take;
        self.emit(
            "slice",
            &os,
            out,
            &[x],
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
                take,
            },
        )
    }

    /// Bilinear resize (half-pixel centres) of an `[h, w, c]` map.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || oh == 0 || ow == 0 {
            return Err(Error::invalid("bilinear_resize expects [h, w, c] and non-zero output"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let out = kernels::bilinear_forward(self.value(x).data(), h, w, c, oh, ow);
        self.emit("bilinear_resize", &[oh, ow, c], out, &[x], Op::Bilinear { x, h, w, c, oh, ow })
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda` backward.
    pub fn grad_reverse(&mut self, x: Var, lambda: T) -> Result<Var> {
        let v = self.value(x).clone();
        let rg = self.rg(&[x]);
        Ok(self.push(v, rg, Op::GradReverse { x, lambda }))
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = self.value(x).last_dim();
        let eps = T::of(1e-12);
        let mut norms = Vec::with_capacity(self.value(x).len() / c.max(1));
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(c) {
            let n = (row.iter().map(|v| *v * *v).sum::<T>() + eps).sqrt();
            norms.push(n);
            data.extend(row.iter().map(|v| *v / n));
        }
        self.emit("l2_normalize", &shape, data, &[x], Op::L2Normalize { x, norms })
    }

    /// Local correlation logits between `[h, w, c]` feature maps:
    /// `scale * f1(i) . f2(i + offset_k)`, zero where the key leaves the image.
    pub fn local_corr(&mut self, f1: Var, f2: Var, win: Window, scale: T) -> Result<Var> {
        self.same_shape("local_corr", f1, f2)?;
        let s = self.shape(f1).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("local_corr expects [h, w, c] features"));
        }
        let out = kernels::local_corr_forward(
            self.value(f1).data(),
            self.value(f2).data(),
            s[0],
            s[1],
            s[2],
            win,
            scale,
        );
        self.emit("local_corr", &[s[0], s[1], win.len()], out, &[f1, f2], Op::LocalCorr { f1, f2, win, scale })
    }

    /// `out(i) = sum_k weights(i, k) * src(i + offset_k)` for `weights: [h, w, K]`,
    /// `src: [h, w, c]`.
    pub fn window_gather(&mut self, weights: Var, src: Var, win: Window) -> Result<Var> {
        let (sw, ss) = (self.shape(weights).to_vec(), self.shape(src).to_vec());
        if sw.len() != 3 || ss.len() != 3 || sw[..2] != ss[..2] || sw[2] != win.len() {
            return Err(Error::shape("window_gather", &sw, &ss));
        }
        let out = kernels::window_gather_forward(
            self.value(weights).data(),
            self.value(src).data(),
            ss[0],
            ss[1],
            ss[2],
            win,
        );
        self.emit("window_gather", &ss, out, &[weights, src], Op::WindowGather { weights, src, win })
    }

    /// `sum_r row_weight[r] * sum_k t(r,k) * (log t(r,k) - logp(r,k))` with
    /// `0 log 0 = 0`; entries where the target is zero are never read.
    pub fn kl_rows(&mut self, logp: Var, target: Arc<Tensor<T>>, row_weight: Vec<f64>) -> Result<Var> {
        if self.shape(logp) != target.shape() {
            return Err(Error::shape("kl_rows", target.shape(), self.shape(logp)));
        }
        let k = target.last_dim();
        if row_weight.len() * k != target.len() {
            return Err(Error::shape("kl_rows weights", &[target.len() / k], &[row_weight.len()]));
        }
        let lp = self.value(logp).data();
        let mut total = 0.0f64;
        for ((trow, lrow), &rw) in target.data().chunks(k).zip(lp.chunks(k)).zip(&row_weight) {
            if rw == 0.0 {
                continue;
            }
            let mut s = 0.0f64;
            for (t, l) in trow.iter().zip(lrow) {
                let t = t.as_f64();
                if t > 0.0 {
                    s += t * (t.ln() - l.as_f64());
                }
            }
            total += rw * s;
        }
        self.emit(
            "kl_rows",
            &[],
            vec![T::of(total)],
            &[logp],
            Op::KlRows {
                logp,
                target,
                row_weight,
            },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", &[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let data = f();
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&data) {
                    *a += *b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v), data).expect("gradient shape matches value"));
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || gd.to_vec());
                self.accum(grads, *b, || gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || gd.to_vec());
                self.accum(grads, *b, || gd.iter().map(|v| -*v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, || gd.iter().zip(bv).map(|(g, y)| *g * *y).collect());
                self.accum(grads, *b, || gd.iter().zip(av).map(|(g, x)| *g * *x).collect());
            }
            Op::AddBias(x, b) => {
                self.accum(grads, *x, || gd.to_vec());
                let c = self.value(*b).len();
                self.accum(grads, *b, || {
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    db
                });
            }
            Op::Scale(x, s) => self.accum(grads, *x, || gd.iter().map(|v| *v * *s).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, || {
                    gd.iter()
                        .zip(xv)
                        .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                        .collect()
                })
            }
            Op::Exp(x) => self.accum(grads, *x, || gd.iter().zip(out).map(|(g, y)| *g * *y).collect()),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, || gd.iter().zip(xv).map(|(g, v)| *g / *v).collect())
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, || {
                    gd.iter()
                        .zip(xv)
                        .map(|(g, v)| {
                            if *v > T::zero() {
                                *g
                            } else if *v < T::zero() {
                                -*g
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                })
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, || gd.iter().zip(xv).map(|(g, v)| *g * sigmoid(*v)).collect())
            }
            Op::Sigmoid(x) => self.accum(grads, *x, || {
                gd.iter().zip(out).map(|(g, y)| *g * *y * (T::one() - *y)).collect()
            }),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accum(grads, *x, || vec![gd[0]; n])
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / T::of(n as f64);
                self.accum(grads, *x, || vec![v; n])
            }
            Op::Softmax { x, mask } => {
                let k = node.value.last_dim();
                self.accum(grads, *x, || {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, ((grow, yrow), drow)) in gd.chunks(k).zip(out.chunks(k)).zip(dx.chunks_mut(k)).enumerate() {
                        let m = mask.as_ref().map(|m| &m[r * k..(r + 1) * k]);
                        let dotp: T = grow.iter().zip(yrow).map(|(g, y)| *g * *y).sum();
                        for j in 0..k {
                            if m.is_none_or(|m| m[j]) {
                                drow[j] = yrow[j] * (grow[j] - dotp);
                            }
                        }
                    }
                    dx
                })
            }
            Op::LogSoftmax { x, mask } => {
                let k = node.value.last_dim();
                self.accum(grads, *x, || {
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, ((grow, lrow), drow)) in gd.chunks(k).zip(out.chunks(k)).zip(dx.chunks_mut(k)).enumerate() {
                        let m = mask.as_ref().map(|m| &m[r * k..(r + 1) * k]);
                        let valid = |j: usize| m.is_none_or(|m| m[j]);
                        let gsum: T = (0..k).filter(|&j| valid(j)).map(|j| grow[j]).sum();
                        for j in 0..k {
                            if valid(j) {
                                drow[j] = grow[j] - lrow[j].exp() * gsum;
                            }
                        }
                    }
                    dx
                })
            }
            Op::MatMul { a, b, ta, tb, m, n, k } => {
                let (m, n, k, ta, tb) = (*m, *n, *k, *ta, *tb);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, || {
                    let mut da = vec![T::zero(); m * k];
                    match (ta, tb) {
                        (false, false) => T::gemm(false, true, m, k, n, T::one(), gd, bv, T::zero(), &mut da),
                        (false, true) => T::gemm(false, false, m, k, n, T::one(), gd, bv, T::zero(), &mut da),
                        (true, false) => T::gemm(false, true, k, m, n, T::one(), bv, gd, T::zero(), &mut da),
                        (true, true) => T::gemm(true, true, k, m, n, T::one(), bv, gd, T::zero(), &mut da),
                    }
                    da
                });
                self.accum(grads, *b, || {
                    let mut db = vec![T::zero(); k * n];
                    match (ta, tb) {
                        (false, false) => T::gemm(true, false, k, n, m, T::one(), av, gd, T::zero(), &mut db),
                        (true, false) => T::gemm(false, false, k, n, m, T::one(), av, gd, T::zero(), &mut db),
                        (false, true) => T::gemm(true, false, n, k, m, T::one(), gd, av, T::zero(), &mut db),
                        (true, true) => T::gemm(true, true, n, k, m, T::one(), gd, av, T::zero(), &mut db),
                    }
                    db
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cols,
            } => {
                let wv = self.value(*w).data();
                let want_dx = self.nodes[x.0].requires_grad;
                let mut dw = self.nodes[w.0].requires_grad.then(|| vec![T::zero(); wv.len()]);
                let mut db = self.nodes[b.0].requires_grad.then(|| vec![T::zero(); geom.cout]);
                let dx = kernels::conv2d_backward(
                    geom,
                    *batch,
                    gd,
                    wv,
                    cols,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    want_dx,
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, || dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, || dw);
                }
                if let Some(db) = db {
                    self.accum(grads, *b, || db);
                }
            }
            Op::Gather { x, index } => {
                let n = self.value(*x).len();
                self.accum(grads, *x, || {
                    let mut dx = vec![T::zero(); n];
                    for (gv, &i) in gd.iter().zip(index.iter()) {
                        dx[i] += *gv;
                    }
                    dx
                })
            }
            Op::Pad {
                x,
                outer,
                len,
                inner,
                before,
                after,
            } => {
                let nl = len + before + after;
                self.accum(grads, *x, || {
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        dx.extend_from_slice(&gd[(o * nl + before) * inner..(o * nl + before + len) * inner]);
                    }
                    dx
                })
            }
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
                take,
            } => self.accum(grads, *x, || {
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    dx[(o * len + start) * inner..(o * len + start + take) * inner]
                        .copy_from_slice(&gd[o * take * inner..(o + 1) * take * inner]);
                }
                dx
            }),
            Op::Reshape(x) => self.accum(grads, *x, || gd.to_vec()),
            Op::Bilinear { x, h, w, c, oh, ow } => {
                self.accum(grads, *x, || kernels::bilinear_backward(gd, *h, *w, *c, *oh, *ow))
            }
            Op::GradReverse { x, lambda } => {
                let s = -*lambda;
                self.accum(grads, *x, || gd.iter().map(|v| *v * s).collect())
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.last_dim();
                self.accum(grads, *x, || {
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((grow, yrow), n) in gd.chunks(c).zip(out.chunks(c)).zip(norms) {
                        let yg: T = grow.iter().zip(yrow).map(|(g, y)| *g * *y).sum();
                        dx.extend(grow.iter().zip(yrow).map(|(g, y)| (*g - *y * yg) / *n));
                    }
                    dx
                })
            }
            Op::LocalCorr { f1, f2, win, scale } => {
                let s = self.shape(*f1);
                let (d1, d2) = kernels::local_corr_backward(
                    gd,
                    self.value(*f1).data(),
                    self.value(*f2).data(),
                    s[0],
                    s[1],
                    s[2],
                    *win,
                    *scale,
                );
                self.accum(grads, *f1, || d1);
                self.accum(grads, *f2, || d2);
            }
            Op::WindowGather { weights, src, win } => {
                let s = self.shape(*src);
                let (dw, ds) = kernels::window_gather_backward(
                    gd,
                    self.value(*weights).data(),
                    self.value(*src).data(),
                    s[0],
                    s[1],
                    s[2],
                    *win,
                );
                self.accum(grads, *weights, || dw);
                self.accum(grads, *src, || ds);
            }
            Op::KlRows {
                logp,
                target,
                row_weight,
            } => {
                let k = target.last_dim();
                let g0 = gd[0].as_f64();
                self.accum(grads, *logp, || {
                    let mut d = vec![T::zero(); target.len()];
                    for ((drow, trow), &rw) in d.chunks_mut(k).zip(target.data().chunks(k)).zip(row_weight) {
                        for (dv, t) in drow.iter_mut().zip(trow) {
                            *dv = T::of(-g0 * rw * t.as_f64());
                        }
                    }
                    d
                })
            }
        }
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn logsumexp<T: Scalar>(row: &[T], mask: Option<&[bool]>) -> T {
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let mx = (0..row.len())
        .filter(|&j| valid(j))
        .map(|j| row[j])
        .fold(T::neg_infinity(), T::max);
    let s: T = (0..row.len()).filter(|&j| valid(j)).map(|j| (row[j] - mx).exp()).sum();
    mx + s.ln()
}

/// Masked softmax of one row into `out`; masked entries become zero.
pub(crate) fn softmax_row<T: Scalar>(row: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let mx = (0..row.len())
        .filter(|&j| valid(j))
        .map(|j| row[j])
        .fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for j in 0..row.len() {
        out[j] = if valid(j) { (row[j] - mx).exp() } else { T::zero() };
        s += out[j];
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}
