use super::tape::{Node, Tape, Var};
use super::{split_axis, Element, Result, Tensor, TensorError};

/// Recorded operation plus whatever the backward rule needs.
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddTrailing {
        x: Var,
        y: Var,
    },
    AddChannel {
        x: Var,
        bias: Var,
        channels: usize,
        inner: usize,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
        sizes: Vec<usize>,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Expand0 {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Pick {
        a: Var,
        index: usize,
    },
}

impl<T: Element> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | BatchMatMul { a, b, .. } | Add { a, b } | Mul { a, b } => {
                vec![*a, *b]
            }
            AddTrailing { x, y } => vec![*x, *y],
            AddChannel { x, bias, .. } => vec![*x, *bias],
            Conv2d { x, w, .. } => vec![*x, *w],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { inputs, .. } => inputs.clone(),
            Scale { a, .. }
            | Reshape { a }
            | Permute { a, .. }
            | Narrow { a, .. }
            | Expand0 { a }
            | Relu { a }
            | Gelu { a }
            | Softmax { a, .. }
            | Sum { a }
            | Mean { a }
            | Pick { a, .. } => vec![*a],
            MaxPool2d { x, .. } | AvgPool2d { x, .. } | GlobalAvgPool { x } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Vector-Jacobian products for each input, given the upstream gradient.
    pub(crate) fn backward(
        &self,
        nodes: &[Node<T>],
        out: &Tensor<T>,
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| nodes[v.index()].value.as_ref();
        let wants = |v: Var| nodes[v.index()].requires_grad;
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut grads = Vec::new();
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, n, 1, val(*b).data(), 1, n, &mut da);
                    grads.push((*a, da));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a).data(), 1, k, g, n, 1, &mut db);
                    grads.push((*b, db));
                }
                grads
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a).data(), val(*b).data());
                let mut da = vec![T::zero(); batch * m * k];
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    T::gemm(
                        m,
                        n,
                        k,
                        gi,
                        n,
                        1,
                        bi,
                        1,
                        n,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    T::gemm(
                        k,
                        m,
                        n,
                        ai,
                        1,
                        k,
                        gi,
                        n,
                        1,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddTrailing { x, y } => {
                let len = val(*y).numel();
                let mut dy = vec![0.0f64; len];
                for chunk in g.chunks(len) {
                    dy.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b.f64());
                }
                vec![(*x, g.to_vec()), (*y, to_t(dy))]
            }
            Op::AddChannel {
                x,
                bias,
                channels,
                inner,
            } => {
                let mut db = vec![0.0f64; *channels];
                for (i, chunk) in g.chunks(*inner).enumerate() {
                    db[i % channels] += chunk.iter().map(|&v| v.f64()).sum::<f64>();
                }
                vec![(*x, g.to_vec()), (*bias, to_t(db))]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let da = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
                let db = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { a, factor } => vec![(*a, g.iter().map(|&v| v * *factor).collect())],
            Op::Reshape { a } => vec![(*a, g.to_vec())],
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(*a, permute_data(g, out.shape(), &inverse).0)]
            }
            Op::Concat {
                inputs,
                axis,
                sizes,
            } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for (&input, &size) in inputs.iter().zip(sizes) {
                    let mut gi = Vec::with_capacity(outer * size * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[start..start + size * inner]);
                    }
                    grads.push((input, gi));
                    offset += size;
                }
                grads
            }
            Op::Narrow { a, axis, start } => {
                let input = val(*a);
                let (outer, full, inner) = split_axis(input.shape(), *axis);
                let len = out.shape()[*axis];
                let mut ga = vec![T::zero(); input.numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * full + start) * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*a, ga)]
            }
            Op::Expand0 { a } => {
                let len = val(*a).numel();
                let mut ga = vec![0.0f64; len];
                for chunk in g.chunks(len) {
                    ga.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b.f64());
                }
                vec![(*a, to_t(ga))]
            }
            Op::Relu { a } => {
                let ga = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Gelu { a } => {
                let ga = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| g * gelu_grad(x))
                    .collect();
                vec![(*a, ga)]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                conv2d_backward(xv, wv, *stride, *pad, out.shape(), g)
                    .into_iter()
                    .zip([*x, *w])
                    .map(|(grad, var)| (var, grad))
                    .collect()
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![T::zero(); val(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + gv;
                }
                vec![(*x, gx)]
            }
            Op::AvgPool2d { x, kernel, stride } => {
                let xs = val(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let norm = T::of(1.0 / (kernel * kernel) as f64);
                let mut gx = vec![T::zero(); val(*x).numel()];
                for plane in 0..xs[0] * xs[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[plane * oh * ow + oy * ow + ox] * norm;
                            for ky in 0..*kernel {
                                let row = plane * h * w + (oy * stride + ky) * w + ox * stride;
                                gx[row..row + kernel].iter_mut().for_each(|v| *v = *v + gv);
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::GlobalAvgPool { x } => {
                let xs = val(*x).shape();
                let hw = xs[2] * xs[3];
                let norm = T::of(1.0 / hw as f64);
                let gx = (0..val(*x).numel()).map(|i| g[i / hw] * norm).collect();
                vec![(*x, gx)]
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)].f64() * y[idx(j)].f64()).sum();
                        for j in 0..len {
                            ga[idx(j)] = y[idx(j)] * (g[idx(j)] - T::of(dot));
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let gam = val(*gamma).data();
                let mut gx = vec![T::zero(); xhat.len()];
                let mut dgamma = vec![0.0f64; len];
                let mut dbeta = vec![0.0f64; len];
                for o in 0..outer {
                    for i in 0..inner {
                        let slice = o * inner + i;
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut mean_d = 0.0f64;
                        let mut mean_dx = 0.0f64;
                        for j in 0..len {
                            let d = (g[idx(j)] * gam[j]).f64();
                            mean_d += d;
                            mean_dx += d * xhat[idx(j)].f64();
                            dgamma[j] += (g[idx(j)] * xhat[idx(j)]).f64();
                            dbeta[j] += g[idx(j)].f64();
                        }
                        mean_d /= len as f64;
                        mean_dx /= len as f64;
                        for j in 0..len {
                            let d = (g[idx(j)] * gam[j]).f64();
                            let v = rstd[slice].f64() * (d - mean_d - xhat[idx(j)].f64() * mean_dx);
                            gx[idx(j)] = T::of(v);
                        }
                    }
                }
                vec![(*x, gx), (*gamma, to_t(dgamma)), (*beta, to_t(dbeta))]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = g[0] / T::of(n as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    gl[row * k + t] = gl[row * k + t] - scale;
                }
                vec![(*logits, gl)]
            }
            Op::Sum { a } => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Mean { a } => {
                let n = val(*a).numel();
                vec![(*a, vec![g[0] / T::of(n as f64); n])]
            }
            Op::Pick { a, index } => {
                let mut ga = vec![T::zero(); val(*a).numel()];
                ga[*index] = g[0];
                vec![(*a, ga)]
            }
        }
    }
}

fn to_t<T: Element>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::of).collect()
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            src += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out, out_shape)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Element>(x: T) -> T {
    let x = x.f64();
    T::of(0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
}

fn gelu_grad<T: Element>(x: T) -> T {
    let x = x.f64();
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    T::of(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (OH·OW)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * ow + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                img[(ch * h + iy as usize) * w + ix as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            let dst = &mut img[(ch * h + iy as usize) * w + ix as usize];
                            *dst = *dst + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
    g: &[T],
) -> [Vec<T>; 2] {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let (ckk, p) = (c * kh * kw, oh * ow);
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); wt.numel()];
    let mut cols = vec![T::zero(); ckk * p];
    let mut dcols = vec![T::zero(); ckk * p];
    for i in 0..n {
        let img = &x.data()[i * c * h * w..(i + 1) * c * h * w];
        let gi = &g[i * f * p..(i + 1) * f * p];
        im2col(img, c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
        // dW += dOut · colsᵀ
        T::gemm(f, p, ckk, gi, p, 1, &cols, 1, p, &mut gw);
        // dcols = Wᵀ · dOut
        dcols.iter_mut().for_each(|v| *v = T::zero());
        T::gemm(ckk, f, p, wt.data(), 1, ckk, gi, p, 1, &mut dcols);
        col2im(
            &dcols,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            &mut gx[i * c * h * w..(i + 1) * c * h * w],
        );
    }
    [gx, gw]
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::shape(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::shape(
            op,
            format!("expected rank {rank}, got shape {shape:?}"),
        ));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), k, 1, bv.data(), n, 1, &mut out);
        Ok(self.record(Tensor::new([m, n], out)?, Op::MatMul { a, b, m, k, n }))
    }

    /// Batched `[B×m×k] · [B×k×n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::shape(
                "bmm",
                format!("cannot batch-multiply {sa:?} by {sb:?}"),
            ));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bv.data()[i * k * n..(i + 1) * k * n],
                n,
                1,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.record(
            Tensor::new([batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::shape(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.record(Tensor::new(av.shape(), data)?, Op::Add { a, b }))
    }

    /// Adds `y` to every trailing block of `x`; `y.shape` must be a suffix of
    /// `x.shape`. Covers `[N×D] + [D]` bias adds and positional embeddings.
    pub fn add_trailing(&self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let (sx, sy) = (xv.shape(), yv.shape());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(TensorError::shape(
                "add_trailing",
                format!("{sy:?} is not a suffix of {sx:?}"),
            ));
        }
        let len = yv.numel();
        let data = xv
            .data()
            .chunks(len)
            .flat_map(|chunk| chunk.iter().zip(yv.data()).map(|(&a, &b)| a + b))
            .collect();
        Ok(self.record(Tensor::new(sx, data)?, Op::AddTrailing { x, y }))
    }

    /// `[N×C×…] + [C]`, broadcasting the bias over batch and spatial extents.
    pub fn add_channel_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let sx = xv.shape();
        if sx.len() < 2 || bv.shape() != [sx[1]] {
            return Err(TensorError::shape(
                "add_channel_bias",
                format!("bias {:?} does not match channels of {sx:?}", bv.shape()),
            ));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut data = xv.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let b = bv.data()[i % channels];
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
        Ok(self.record(
            Tensor::new(sx, data)?,
            Op::AddChannel {
                x,
                bias,
                channels,
                inner,
            },
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::shape(
                "mul",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.record(Tensor::new(av.shape(), data)?, Op::Mul { a, b }))
    }

    pub fn scale(&self, a: Var, factor: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&v| v * factor).collect();
        self.record(
            Tensor::new(av.shape(), data).unwrap(),
            Op::Scale { a, factor },
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.record(out, Op::Reshape { a }))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let rank = av.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::shape(
                "permute",
                format!("{perm:?} is not a permutation for shape {:?}", av.shape()),
            ));
        }
        let (data, shape) = permute_data(av.data(), av.shape(), perm);
        Ok(self.record(
            Tensor::new(shape, data)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.value(a).shape().len();
        check_axis("transpose", &self.shape(a), d0.max(d1))?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v))
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        check_axis("concat", &first, axis)?;
        let values: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape(
                    "concat",
                    format!("{s:?} incompatible with {first:?} on axis {axis}"),
                ));
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let mut shape = first.clone();
        shape[axis] = sizes.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (v, &size) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * size * inner..(o + 1) * size * inner]);
            }
        }
        Ok(self.record(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
                sizes,
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("narrow", av.shape(), axis)?;
        if len == 0 || start + len > av.shape()[axis] {
            return Err(TensorError::shape(
                "narrow",
                format!(
                    "range {start}..{} outside axis {axis} of {:?}",
                    start + len,
                    av.shape()
                ),
            ));
        }
        let (outer, full, inner) = split_axis(av.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&av.data()[s..s + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        Ok(self.record(Tensor::new(shape, data)?, Op::Narrow { a, axis, start }))
    }

    /// Repeats a `[1×…]` tensor `n` times along the leading axis.
    pub fn expand0(&self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape()[0] != 1 || n == 0 {
            return Err(TensorError::shape(
                "expand0",
                format!("cannot expand {:?} to {n} rows", av.shape()),
            ));
        }
        let mut shape = av.shape().to_vec();
        shape[0] = n;
        let data = av.data().repeat(n);
        Ok(self.record(Tensor::new(shape, data)?, Op::Expand0 { a }))
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        self.record(Tensor::new(av.shape(), data).unwrap(), Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&v| gelu(v)).collect();
        self.record(Tensor::new(av.shape(), data).unwrap(), Op::Gelu { a })
    }

    /// Cross-correlation of `[N×C×H×W]` with `[F×C×kh×kw]` (no kernel flip).
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        expect_rank("conv2d", sx, 4)?;
        expect_rank("conv2d", sw, 4)?;
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be positive"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kc, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kc != c || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {sw:?} does not fit input {sx:?} with padding {pad}"),
            ));
        }
        let (oh, ow) = (
            out_extent(h, kh, stride, pad),
            out_extent(wd, kw, stride, pad),
        );
        let (ckk, p) = (c * kh * kw, oh * ow);
        let mut out = vec![T::zero(); n * f * p];
        let mut cols = vec![T::zero(); ckk * p];
        for i in 0..n {
            let img = &xv.data()[i * c * h * wd..(i + 1) * c * h * wd];
            im2col(img, c, h, wd, kh, kw, stride, pad, oh, ow, &mut cols);
            T::gemm(
                f,
                ckk,
                p,
                wv.data(),
                ckk,
                1,
                &cols,
                p,
                1,
                &mut out[i * f * p..(i + 1) * f * p],
            );
        }
        Ok(self.record(
            Tensor::new([n, f, oh, ow], out)?,
            Op::Conv2d { x, w, stride, pad },
        ))
    }

    /// Windowed max pool. Ties route the gradient to the first maximum.
    pub fn max_pool2d(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w, oh, ow) = pool_dims("max_pool2d", xv.shape(), kernel, stride)?;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = plane * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if xv.data()[idx] > best {
                                best = xv.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        Ok(self.record(
            Tensor::new([n, c, oh, ow], out)?,
            Op::MaxPool2d { x, argmax },
        ))
    }

    pub fn avg_pool2d(&self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w, oh, ow) = pool_dims("avg_pool2d", xv.shape(), kernel, stride)?;
        let norm = (kernel * kernel) as f64;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ky in 0..kernel {
                        let row = plane * h * w + (oy * stride + ky) * w + ox * stride;
                        acc += xv.data()[row..row + kernel]
                            .iter()
                            .map(|&v| v.f64())
                            .sum::<f64>();
                    }
                    out.push(T::of(acc / norm));
                }
            }
        }
        Ok(self.record(
            Tensor::new([n, c, oh, ow], out)?,
            Op::AvgPool2d { x, kernel, stride },
        ))
    }

    /// Mean over the spatial extent: `[N×C×H×W] → [N×C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("global_avg_pool", xv.shape(), 4)?;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let hw = xv.shape()[2] * xv.shape()[3];
        let out = xv
            .data()
            .chunks(hw)
            .map(|plane| T::of(plane.iter().map(|&v| v.f64()).sum::<f64>() / hw as f64))
            .collect();
        Ok(self.record(Tensor::new([n, c], out)?, Op::GlobalAvgPool { x }))
    }

    /// Max-subtracted softmax along `axis`, normalized in `f64`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("softmax", av.shape(), axis)?;
        let data = softmax_data(av.data(), av.shape(), axis);
        Ok(self.record(Tensor::new(av.shape(), data)?, Op::Softmax { a, axis }))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance,
    /// then applies `gamma`/`beta` (length of `axis`).
    pub fn layer_norm(&self, x: Var, axis: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        check_axis("layer_norm", xv.shape(), axis)?;
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        if gv.shape() != [len] || bv.shape() != [len] {
            return Err(TensorError::shape(
                "layer_norm",
                format!(
                    "gamma {:?}/beta {:?} must have length {len}",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let data = xv.data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| data[idx(j)].f64()).sum::<f64>() / len as f64;
                let var = (0..len)
                    .map(|j| (data[idx(j)].f64() - mean).powi(2))
                    .sum::<f64>()
                    / len as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = T::of(r);
                for j in 0..len {
                    let xh = T::of((data[idx(j)].f64() - mean) * r);
                    xhat[idx(j)] = xh;
                    out[idx(j)] = xh * gv.data()[j] + bv.data()[j];
                }
            }
        }
        Ok(self.record(
            Tensor::new(xv.shape(), out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits {s:?} do not match {} targets", targets.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some((row, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
            return Err(TensorError::Label {
                row,
                target,
                classes: k,
            });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = 0.0f64;
        for (row, &t) in targets.iter().enumerate() {
            let z = &lv.data()[row * k..(row + 1) * k];
            let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
            let denom: f64 = z.iter().map(|&v| (v.f64() - max).exp()).sum();
            for j in 0..k {
                probs[row * k + j] = T::of((z[j].f64() - max).exp() / denom);
            }
            total += denom.ln() - (z[t].f64() - max);
        }
        let loss = T::of(total / n as f64);
        Ok(self.record(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().map(|&v| v.f64()).sum();
        self.record(Tensor::scalar(T::of(total)), Op::Sum { a })
    }

    pub fn mean(&self, a: Var) -> Var {
        let av = self.value(a);
        let total: f64 = av.data().iter().map(|&v| v.f64()).sum();
        self.record(
            Tensor::scalar(T::of(total / av.numel() as f64)),
            Op::Mean { a },
        )
    }

    /// Scalar view of one element (row-major flat index).
    pub fn pick(&self, a: Var, index: usize) -> Result<Var> {
        let av = self.value(a);
        let v = *av.data().get(index).ok_or_else(|| {
            TensorError::shape("pick", format!("index {index} outside {:?}", av.shape()))
        })?;
        Ok(self.record(Tensor::scalar(v), Op::Pick { a, index }))
    }

    /// `x · W + b` over the last axis of `x`, for any leading shape.
    pub fn linear(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x);
        let w_shape = self.shape(weight);
        let in_dim = *shape.last().unwrap();
        if w_shape.len() != 2 || w_shape[0] != in_dim {
            return Err(TensorError::shape(
                "linear",
                format!("input {shape:?} vs weight {w_shape:?}"),
            ));
        }
        let rows = shape.iter().product::<usize>() / in_dim;
        let flat = if shape.len() == 2 {
            x
        } else {
            self.reshape(x, &[rows, in_dim])?
        };
        let y = self.matmul(flat, weight)?;
        let y = self.add_trailing(y, bias)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = w_shape[1];
        self.reshape(y, &out_shape)
    }

    /// `softmax(q·kᵀ/√d)·v` over `[h×L×d]` inputs. Returns the output and the
    /// attention weights `[h×L×L]`.
    pub fn scaled_dot_product_attention(&self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sq != sk || sq != sv {
            return Err(TensorError::shape(
                "scaled_dot_product_attention",
                format!("q {sq:?}, k {sk:?}, v {sv:?} must share shape [h, L, d]"),
            ));
        }
        let kt = self.transpose(k, 1, 2)?;
        let scores = self.bmm(q, kt)?;
        let scores = self.scale(scores, T::of(1.0 / (sq[2] as f64).sqrt()));
        let weights = self.softmax(scores, 2)?;
        let out = self.bmm(weights, v)?;
        Ok((out, weights))
    }
}

fn pool_dims(
    op: &'static str,
    shape: &[usize],
    kernel: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    expect_rank(op, shape, 4)?;
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
        return Err(TensorError::shape(
            op,
            format!("window {kernel}/stride {stride} invalid for {shape:?}"),
        ));
    }
    Ok((
        n,
        c,
        h,
        w,
        out_extent(h, kernel, stride, 0),
        out_extent(w, kernel, stride, 0),
    ))
}

pub(crate) fn softmax_data<T: Element>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| data[idx(j)].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..len).map(|j| (data[idx(j)].f64() - max).exp()).sum();
            for j in 0..len {
                out[idx(j)] = T::of((data[idx(j)].f64() - max).exp() / denom);
            }
        }
    }
    out
}

/// Softmax of a single logit vector, for inference-side consumers.
pub fn softmax_vec<T: Element>(logits: &[T]) -> Vec<T> {
    softmax_data(logits, &[logits.len()], 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let tape: Tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_identity() {
        let tape: Tape = Tape::new();
        let a = t(&[3, 3], &[1., -2., 3., 0.5, 5., -6., 7., 8., 9.]);
        let id = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let av = tape.constant(a.clone());
        let iv = tape.constant(id);
        let c = tape.matmul(av, iv).unwrap();
        assert_eq!(tape.value(c).data(), a.data());
    }

    #[test]
    fn matmul_dimension_mismatch_names_shapes() {
        let tape: Tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv_sum_of_ones() {
        let tape: Tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        let y = tape.value(y);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_zero_kernel_annihilates() {
        let tape: Tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 5, 5], |i| (i as f32).sin()));
        let w = tape.constant(Tensor::zeros([4, 3, 3, 3]));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        let y = tape.value(y);
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_kernel_larger_than_padded_input() {
        let tape: Tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros([1, 1, 5, 5]));
        assert!(matches!(
            tape.conv2d(x, w, 1, 1),
            Err(TensorError::Shape { .. })
        ));
        assert!(tape.conv2d(x, w, 1, 2).is_ok());
    }

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let tape: Tape = Tape::new();
        let a = tape.constant(t(&[2], &[0., 0.]));
        assert_eq!(tape.value(tape.softmax(a, 0).unwrap()).data(), &[0.5, 0.5]);
        for x in [-50.0f32, 0.0, 3.5, 1e4] {
            let b = tape.constant(t(&[3], &[x, x, x]));
            let y = tape.value(tape.softmax(b, 0).unwrap());
            for v in y.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-7);
            }
        }
        assert!(tape.softmax(a, 1).is_err());
    }

    #[test]
    fn layer_norm_constant_and_two_point() {
        let tape: Tape = Tape::new();
        let g = tape.constant(Tensor::full([3], 1.0));
        let b = tape.constant(Tensor::zeros([3]));
        let x = tape.constant(t(&[3], &[5., 5., 5.]));
        let y = tape.value(tape.layer_norm(x, 0, g, b, 1e-5).unwrap());
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));

        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(t(&[2], &[1., 3.]));
        let y = tape.value(tape.layer_norm(x, 0, g, b, 1e-12).unwrap());
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);

        let bad = tape.constant(Tensor::full([4], 1.0));
        assert!(tape.layer_norm(x, 0, bad, b, 1e-5).is_err());
    }

    #[test]
    fn attention_singleton_and_uniform() {
        let tape: Tape = Tape::new();
        let q = tape.constant(Tensor::from_fn([2, 1, 4], |i| i as f32));
        let k = tape.constant(Tensor::from_fn([2, 1, 4], |i| -(i as f32)));
        let v = tape.constant(Tensor::from_fn([2, 1, 4], |i| (i * i) as f32));
        let (out, _) = tape.scaled_dot_product_attention(q, k, v).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(v).data());

        let q = tape.constant(Tensor::zeros([1, 3, 2]));
        let k = tape.constant(Tensor::from_fn([1, 3, 2], |i| (i as f32 * 1.7).cos()));
        let v = tape.constant(t(&[1, 3, 2], &[1., 2., 3., 4., 5., 9.]));
        let (out, w) = tape.scaled_dot_product_attention(q, k, v).unwrap();
        assert!(tape
            .value(w)
            .data()
            .iter()
            .all(|&x| (x - 1.0 / 3.0).abs() < 1e-7));
        let expected = [3.0, 5.0];
        for (i, v) in tape.value(out).data().iter().enumerate() {
            assert!((v - expected[i % 2]).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let tape: Tape = Tape::new();
        let l = tape.constant(Tensor::zeros([3, 8]));
        let loss = tape.cross_entropy(l, &[0, 3, 7]).unwrap();
        assert!((tape.value(loss).data()[0] - 8f32.ln()).abs() < 1e-6);

        let l = tape.constant(t(&[1, 3], &[0., 1e9, 0.]));
        let loss = tape.cross_entropy(l, &[1]).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_bad_target_names_row() {
        let tape: Tape = Tape::new();
        let l = tape.constant(Tensor::zeros([2, 3]));
        assert_eq!(
            tape.cross_entropy(l, &[0, 3]).unwrap_err(),
            TensorError::Label {
                row: 1,
                target: 3,
                classes: 3
            }
        );
    }

    #[test]
    fn backward_square_and_fan_out() {
        let tape: Tape = Tape::new();
        let x = tape.param(t(&[3], &[1., -2., 3.]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2., -4., 6.]);

        let tape: Tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let a = tape.sum(x);
        let b = tape.sum(x);
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2., 2., 2., 2.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape: Tape = Tape::new();
        let x = tape.param(Tensor::zeros([2]));
        let y = tape.relu(x);
        assert_eq!(
            tape.backward(y).unwrap_err(),
            TensorError::NotScalar(vec![2])
        );
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape: Tape = Tape::new();
        let x = tape.param(t(&[3], &[-1., 0., 1.]));
        let y = tape.relu(x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0., 0., 1.]);
    }

    #[test]
    fn permute_round_trip() {
        let tape: Tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f32));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), vec![4, 2, 3]);
        // y[k][i][j] == x[i][j][k]
        assert_eq!(tape.value(y).data()[6 + 3 + 2], (12 + 2 * 4 + 1) as f32);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_narrow_invert() {
        let tape: Tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([2, 1, 3], |i| i as f32));
        let b = tape.constant(Tensor::from_fn([2, 2, 3], |i| 100.0 + i as f32));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), vec![2, 3, 3]);
        let a2 = tape.narrow(c, 1, 0, 1).unwrap();
        let b2 = tape.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(a2).data(), tape.value(a).data());
        assert_eq!(tape.value(b2).data(), tape.value(b).data());
        assert!(tape.narrow(c, 1, 2, 2).is_err());
    }

    #[test]
    fn pooling_values() {
        let tape: Tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 4, 4], |i| i as f32));
        let m = tape.value(tape.max_pool2d(x, 2, 2).unwrap());
        assert_eq!(m.data(), &[5., 7., 13., 15.]);
        let a = tape.value(tape.avg_pool2d(x, 2, 2).unwrap());
        assert_eq!(a.data(), &[2.5, 4.5, 10.5, 12.5]);
        let g = tape.value(tape.global_avg_pool(x).unwrap());
        assert_eq!(g.shape(), &[1, 1]);
        assert_eq!(g.data(), &[7.5]);
    }

    #[test]
    fn broadcast_adds_reject_other_shapes() {
        let tape: Tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 3, 4]));
        let pos = tape.constant(Tensor::full([3, 4], 1.0));
        assert!(tape.add_trailing(x, pos).is_ok());
        let bad = tape.constant(Tensor::zeros([4, 3]));
        assert!(tape.add_trailing(x, bad).is_err());
        assert!(tape.add(x, pos).is_err());
        let bias = tape.constant(Tensor::full([3], 2.0));
        let y = tape.value(tape.add_channel_bias(x, bias).unwrap());
        assert!(y.data().iter().all(|&v| v == 2.0));
    }
}
