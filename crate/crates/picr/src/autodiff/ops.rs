use std::rc::Rc;

use super::conv;
use super::{macs, std_normal_pdf, Node, Op, Tensor};

const LN_2: f64 = std::f64::consts::LN_2;

/// Row-major GEMM: `c[m,n] (+)= a[m,k] * b[k,n]`, with optional logical
/// transposes expressed through strides (buffers are never copied).
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k);
    debug_assert!(b.len() >= k * n);
    debug_assert!(c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape(), "elementwise op shape mismatch");
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    0.5 * (1.0 + (0.5 * x).tanh())
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Tensor {
        same_shape(self, rhs);
        let data = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Tensor::from_op(self.shape().to_vec(), data, Op::Add(self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        same_shape(self, rhs);
        let data = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        Tensor::from_op(self.shape().to_vec(), data, Op::Sub(self.clone(), rhs.clone()))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        same_shape(self, rhs);
        let data = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        Tensor::from_op(self.shape().to_vec(), data, Op::Mul(self.clone(), rhs.clone()))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::MulScalar(self.clone(), c))
    }

    /// `[..., d] + [d]`
    pub fn add_bias_last(&self, bias: &Tensor) -> Tensor {
        let d = *self.shape().last().expect("add_bias_last on 0-d tensor");
        assert_eq!(bias.shape(), [d], "bias shape mismatch");
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for row in data.chunks_mut(d) {
                for (x, bi) in row.iter_mut().zip(b.iter()) {
                    *x += bi;
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::AddBiasLast(self.clone(), bias.clone()),
        )
    }

    /// `[B, d, m] + [B, d]` broadcast over the trailing axis.
    pub fn add_col_bias(&self, bias: &Tensor) -> Tensor {
        let (bsz, d, m) = expect_3d(self);
        assert_eq!(bias.shape(), [bsz, d], "col bias shape mismatch");
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for bi in 0..bsz {
                for di in 0..d {
                    let c = b[bi * d + di];
                    let off = (bi * d + di) * m;
                    for x in &mut data[off..off + m] {
                        *x += c;
                    }
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::AddColBias(self.clone(), bias.clone()),
        )
    }

    /// `[B, d, m] * [B, d]` broadcast over the trailing axis.
    pub fn mul_col_bias(&self, factor: &Tensor) -> Tensor {
        let (bsz, d, m) = expect_3d(self);
        assert_eq!(factor.shape(), [bsz, d], "col factor shape mismatch");
        let mut data = self.to_vec();
        {
            let f = factor.data();
            for bi in 0..bsz {
                for di in 0..d {
                    let c = f[bi * d + di];
                    let off = (bi * d + di) * m;
                    for x in &mut data[off..off + m] {
                        *x *= c;
                    }
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::MulColBias(self.clone(), factor.clone()),
        )
    }

    /// `[B, m, n] + [h, m, n]` where batch `b` adds slice `b % h`.
    pub fn add_batch_bias(&self, bias: &Tensor) -> Tensor {
        let (bsz, m, n) = expect_3d(self);
        let (h, bm, bn) = expect_3d(bias);
        assert_eq!((bm, bn), (m, n), "batch bias shape mismatch");
        assert_eq!(bsz % h, 0, "batch not divisible by bias count");
        let mut data = self.to_vec();
        {
            let b = bias.data();
            let sl = m * n;
            for bi in 0..bsz {
                let src = &b[(bi % h) * sl..(bi % h + 1) * sl];
                for (x, y) in data[bi * sl..(bi + 1) * sl].iter_mut().zip(src) {
                    *x += y;
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::AddBatchBias(self.clone(), bias.clone()),
        )
    }

    /// `[..., k] x [k, n]`, leading dims folded.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let k = *self.shape().last().expect("matmul on 0-d tensor");
        assert_eq!(rhs.shape().len(), 2, "matmul rhs must be 2-d");
        assert_eq!(rhs.shape()[0], k, "matmul inner dim mismatch");
        let n = rhs.shape()[1];
        let m = self.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), false, &rhs.data(), false, 0.0, &mut out);
        macs::add((m * k * n) as u128);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Tensor::from_op(shape, out, Op::Matmul(self.clone(), rhs.clone()))
    }

    /// `[B, m, k] x [B, k, n]`
    pub fn bmm(&self, rhs: &Tensor) -> Tensor {
        let (bsz, m, k) = expect_3d(self);
        let (b2, k2, n) = expect_3d(rhs);
        assert_eq!((bsz, k), (b2, k2), "bmm shape mismatch");
        let mut out = vec![0.0; bsz * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for bi in 0..bsz {
                gemm(
                    m,
                    k,
                    n,
                    &a[bi * m * k..],
                    false,
                    &b[bi * k * n..],
                    false,
                    0.0,
                    &mut out[bi * m * n..],
                );
            }
        }
        macs::add((bsz * m * k * n) as u128);
        Tensor::from_op(vec![bsz, m, n], out, Op::Bmm(self.clone(), rhs.clone()))
    }

    /// `[B, m, k] x [B, n, k]^T -> [B, m, n]`
    pub fn bmm_nt(&self, rhs: &Tensor) -> Tensor {
        let (bsz, m, k) = expect_3d(self);
        let (b2, n, k2) = expect_3d(rhs);
        assert_eq!((bsz, k), (b2, k2), "bmm_nt shape mismatch");
        let mut out = vec![0.0; bsz * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for bi in 0..bsz {
                gemm(
                    m,
                    k,
                    n,
                    &a[bi * m * k..],
                    false,
                    &b[bi * n * k..],
                    true,
                    0.0,
                    &mut out[bi * m * n..],
                );
            }
        }
        macs::add((bsz * m * k * n) as u128);
        Tensor::from_op(vec![bsz, m, n], out, Op::BmmNT(self.clone(), rhs.clone()))
    }

    pub fn softmax_last(&self) -> Tensor {
        let d = *self.shape().last().expect("softmax on 0-d tensor");
        let mut data = self.to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Tensor::from_op(self.shape().to_vec(), data, Op::SoftmaxLast(self.clone()))
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let d = *self.shape().last().expect("layer_norm on 0-d tensor");
        assert_eq!(gamma.shape(), [d]);
        assert_eq!(beta.shape(), [d]);
        let mut data = self.to_vec();
        let rows = data.len() / d;
        let mut stats = Vec::with_capacity(rows);
        {
            let g = gamma.data();
            let b = beta.data();
            for row in data.chunks_mut(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                stats.push((mean, rstd));
                for (j, x) in row.iter_mut().enumerate() {
                    *x = (*x - mean) * rstd * g[j] + b[j];
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                stats,
            },
        )
    }

    /// Exact GELU: `x * Phi(x)`.
    pub fn gelu(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| x * super::std_normal_cdf(x))
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.tanh()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Tanh(self.clone()))
    }

    pub fn softplus(&self) -> Tensor {
        let data = self.data().iter().map(|&x| softplus_scalar(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Softplus(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Sigmoid(self.clone()))
    }

    /// `-log2(max(p, floor))`, elementwise.
    pub fn neg_log2_clamped(&self, floor: f64) -> Tensor {
        let data = self.data().iter().map(|&p| -p.max(floor).log2()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::NegLog2 {
                p: self.clone(),
                floor,
            },
        )
    }

    /// Discretized Gaussian bin probability of an integer-bin residual:
    /// `Phi((r + 0.5) / sigma) - Phi((r - 0.5) / sigma)`, elementwise.
    pub fn gaussian_bin(&self, sigma: &Tensor) -> Tensor {
        same_shape(self, sigma);
        let data = {
            let r = self.data();
            let s = sigma.data();
            r.iter()
                .zip(s.iter())
                .map(|(&ri, &si)| {
                    super::std_normal_cdf((ri + 0.5) / si) - super::std_normal_cdf((ri - 0.5) / si)
                })
                .collect()
        };
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::GaussianBin {
                resid: self.clone(),
                sigma: sigma.clone(),
            },
        )
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let base = parts[0].shape().to_vec();
        assert!(axis < base.len());
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), base.len(), "concat rank mismatch");
            assert_eq!(s[..axis], base[..axis], "concat leading dims mismatch");
            assert_eq!(s[axis + 1..], base[axis + 1..], "concat trailing dims mismatch");
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; outer * total * inner];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let d = p.data();
            for o in 0..outer {
                let src = &d[o * w * inner..(o + 1) * w * inner];
                let dst = &mut out[(o * total + off) * inner..(o * total + off + w) * inner];
                dst.copy_from_slice(src);
            }
            off += w;
        }
        let mut shape = base;
        shape[axis] = total;
        Tensor::from_op(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// `out[i] = self[idx[i]]`; the adjoint scatter-adds, so indices may repeat.
    pub fn gather(&self, idx: Rc<Vec<u32>>, out_shape: &[usize]) -> Tensor {
        let numel: usize = out_shape.iter().product();
        assert_eq!(idx.len(), numel, "gather index length mismatch");
        let data = {
            let src = self.data();
            idx.iter().map(|&i| src[i as usize]).collect()
        };
        Tensor::from_op(
            out_shape.to_vec(),
            data,
            Op::Gather {
                src: self.clone(),
                idx,
            },
        )
    }

    /// 2-d convolution with zero padding: `x [Ci,H,W]`, `w [Co,Ci,kh,kw]`.
    pub fn conv2d(&self, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (out, shape) = conv::conv2d_forward(self, w, b, stride, pad);
        Tensor::from_op(
            shape,
            out,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                b: b.clone(),
                stride,
                pad,
            },
        )
    }

    /// Transposed 2-d convolution: `x [Ci,H,W]`, `w [Ci,Co,k,k]`, output
    /// `(H-1)*stride + k` per side.
    pub fn conv_t2d(&self, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (out, shape) = conv::conv_t2d_forward(self, w, b, stride);
        Tensor::from_op(
            shape,
            out,
            Op::ConvT2d {
                x: self.clone(),
                w: w.clone(),
                b: b.clone(),
                stride,
            },
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel() as f64;
        Tensor::from_op(vec![1], vec![s / n], Op::MeanAll(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape numel mismatch"
        );
        Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone()))
    }
}

fn expect_3d(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected 3-d tensor, got {s:?}");
    (s[0], s[1], s[2])
}

pub(crate) fn backward_step(node: &Node) {
    let grad_ref = node.grad.borrow();
    let gy = grad_ref.as_ref().expect("missing grad in backward");
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if a.n.needs_grad {
                a.add_to_grad(gy);
            }
            if b.n.needs_grad {
                b.add_to_grad(gy);
            }
        }
        Op::Sub(a, b) => {
            if a.n.needs_grad {
                a.add_to_grad(gy);
            }
            if b.n.needs_grad {
                let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                b.add_to_grad(&neg);
            }
        }
        Op::Mul(a, b) => {
            if a.n.needs_grad {
                let da: Vec<f64> = {
                    let bd = b.data();
                    gy.iter().zip(bd.iter()).map(|(g, y)| g * y).collect()
                };
                a.add_to_grad(&da);
            }
            if b.n.needs_grad {
                let db: Vec<f64> = {
                    let ad = a.data();
                    gy.iter().zip(ad.iter()).map(|(g, x)| g * x).collect()
                };
                b.add_to_grad(&db);
            }
        }
        Op::AddScalar(a) => {
            if a.n.needs_grad {
                a.add_to_grad(gy);
            }
        }
        Op::MulScalar(a, c) => {
            if a.n.needs_grad {
                let da: Vec<f64> = gy.iter().map(|g| g * c).collect();
                a.add_to_grad(&da);
            }
        }
        Op::AddBiasLast(a, bias) => {
            if a.n.needs_grad {
                a.add_to_grad(gy);
            }
            if bias.n.needs_grad {
                let d = bias.numel();
                let mut db = vec![0.0; d];
                for row in gy.chunks(d) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                bias.add_to_grad(&db);
            }
        }
        Op::AddColBias(a, bias) => {
            if a.n.needs_grad {
                a.add_to_grad(gy);
            }
            if bias.n.needs_grad {
                let [bsz, d] = [bias.shape()[0], bias.shape()[1]];
                let m = a.shape()[2];
                let mut db = vec![0.0; bsz * d];
                for (i, acc) in db.iter_mut().enumerate() {
                    *acc = gy[i * m..(i + 1) * m].iter().sum();
                }
                bias.add_to_grad(&db);
            }
        }
        Op::MulColBias(a, factor) => {
            let [bsz, d] = [factor.shape()[0], factor.shape()[1]];
            let m = a.shape()[2];
            if a.n.needs_grad {
                let f = factor.data();
                let mut da = vec![0.0; gy.len()];
                for i in 0..bsz * d {
                    let c = f[i];
                    for j in 0..m {
                        da[i * m + j] = gy[i * m + j] * c;
                    }
                }
                drop(f);
                a.add_to_grad(&da);
            }
            if factor.n.needs_grad {
                let ad = a.data();
                let mut df = vec![0.0; bsz * d];
                for (i, acc) in df.iter_mut().enumerate() {
                    *acc = gy[i * m..(i + 1) * m]
                        .iter()
                        .zip(&ad[i * m..(i + 1) * m])
                        .map(|(g, x)| g * x)
                        .sum();
                }
                drop(ad);
                factor.add_to_grad(&df);
            }
        }
        Op::AddBatchBias(a, bias) => {
            if a.n.needs_grad {
                a.add_to_grad(gy);
            }
            if bias.n.needs_grad {
                let h = bias.shape()[0];
                let sl = bias.shape()[1] * bias.shape()[2];
                let bsz = a.shape()[0];
                let mut db = vec![0.0; h * sl];
                for bi in 0..bsz {
                    let dst = &mut db[(bi % h) * sl..(bi % h + 1) * sl];
                    for (acc, g) in dst.iter_mut().zip(&gy[bi * sl..(bi + 1) * sl]) {
                        *acc += g;
                    }
                }
                bias.add_to_grad(&db);
            }
        }
        Op::Matmul(a, b) => {
            let k = *a.shape().last().unwrap();
            let n = b.shape()[1];
            let m = a.numel() / k;
            if a.n.needs_grad {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gy, false, &b.data(), true, 0.0, &mut da);
                a.add_to_grad(&da);
            }
            if b.n.needs_grad {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, &a.data(), true, gy, false, 0.0, &mut db);
                b.add_to_grad(&db);
            }
        }
        Op::Bmm(a, b) => {
            let (bsz, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            if a.n.needs_grad {
                let bd = b.data();
                let mut da = vec![0.0; bsz * m * k];
                for bi in 0..bsz {
                    gemm(
                        m,
                        n,
                        k,
                        &gy[bi * m * n..],
                        false,
                        &bd[bi * k * n..],
                        true,
                        0.0,
                        &mut da[bi * m * k..],
                    );
                }
                drop(bd);
                a.add_to_grad(&da);
            }
            if b.n.needs_grad {
                let ad = a.data();
                let mut db = vec![0.0; bsz * k * n];
                for bi in 0..bsz {
                    gemm(
                        k,
                        m,
                        n,
                        &ad[bi * m * k..],
                        true,
                        &gy[bi * m * n..],
                        false,
                        0.0,
                        &mut db[bi * k * n..],
                    );
                }
                drop(ad);
                b.add_to_grad(&db);
            }
        }
        Op::BmmNT(a, b) => {
            let (bsz, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[1];
            if a.n.needs_grad {
                let bd = b.data();
                let mut da = vec![0.0; bsz * m * k];
                for bi in 0..bsz {
                    gemm(
                        m,
                        n,
                        k,
                        &gy[bi * m * n..],
                        false,
                        &bd[bi * n * k..],
                        false,
                        0.0,
                        &mut da[bi * m * k..],
                    );
                }
                drop(bd);
                a.add_to_grad(&da);
            }
            if b.n.needs_grad {
                let ad = a.data();
                let mut db = vec![0.0; bsz * n * k];
                for bi in 0..bsz {
                    gemm(
                        n,
                        m,
                        k,
                        &gy[bi * m * n..],
                        true,
                        &ad[bi * m * k..],
                        false,
                        0.0,
                        &mut db[bi * n * k..],
                    );
                }
                drop(ad);
                b.add_to_grad(&db);
            }
        }
        Op::SoftmaxLast(a) => {
            if a.n.needs_grad {
                let d = *node.shape.last().unwrap();
                let p = node.data.borrow();
                let mut da = vec![0.0; gy.len()];
                for r in 0..gy.len() / d {
                    let (gr, pr) = (&gy[r * d..(r + 1) * d], &p[r * d..(r + 1) * d]);
                    let dot: f64 = gr.iter().zip(pr).map(|(g, q)| g * q).sum();
                    for j in 0..d {
                        da[r * d + j] = pr[j] * (gr[j] - dot);
                    }
                }
                drop(p);
                a.add_to_grad(&da);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            stats,
            ..
        } => {
            let d = *node.shape.last().unwrap();
            let xd = x.data();
            let g = gamma.data();
            let rows = xd.len() / d;
            let mut dx = vec![0.0; xd.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                let (mean, rstd) = stats[r];
                let xr = &xd[r * d..(r + 1) * d];
                let gr = &gy[r * d..(r + 1) * d];
                let mut sum_dyh = 0.0;
                let mut sum_dyh_xhat = 0.0;
                for j in 0..d {
                    let xhat = (xr[j] - mean) * rstd;
                    let dyh = gr[j] * g[j];
                    sum_dyh += dyh;
                    sum_dyh_xhat += dyh * xhat;
                    dgamma[j] += gr[j] * xhat;
                    dbeta[j] += gr[j];
                }
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    let xhat = (xr[j] - mean) * rstd;
                    let dyh = gr[j] * g[j];
                    dx[r * d + j] = rstd * (dyh - inv_d * sum_dyh - xhat * inv_d * sum_dyh_xhat);
                }
            }
            drop(xd);
            drop(g);
            if x.n.needs_grad {
                x.add_to_grad(&dx);
            }
            if gamma.n.needs_grad {
                gamma.add_to_grad(&dgamma);
            }
            if beta.n.needs_grad {
                beta.add_to_grad(&dbeta);
            }
        }
        Op::Gelu(a) => {
            if a.n.needs_grad {
                let da: Vec<f64> = {
                    let xd = a.data();
                    xd.iter()
                        .zip(gy)
                        .map(|(&x, g)| g * (super::std_normal_cdf(x) + x * std_normal_pdf(x)))
                        .collect()
                };
                a.add_to_grad(&da);
            }
        }
        Op::Tanh(a) => {
            if a.n.needs_grad {
                let yd = node.data.borrow();
                let da: Vec<f64> = yd.iter().zip(gy).map(|(y, g)| g * (1.0 - y * y)).collect();
                drop(yd);
                a.add_to_grad(&da);
            }
        }
        Op::Softplus(a) => {
            if a.n.needs_grad {
                let da: Vec<f64> = {
                    let xd = a.data();
                    xd.iter().zip(gy).map(|(&x, g)| g * sigmoid_scalar(x)).collect()
                };
                a.add_to_grad(&da);
            }
        }
        Op::Sigmoid(a) => {
            if a.n.needs_grad {
                let yd = node.data.borrow();
                let da: Vec<f64> = yd.iter().zip(gy).map(|(y, g)| g * y * (1.0 - y)).collect();
                drop(yd);
                a.add_to_grad(&da);
            }
        }
        Op::NegLog2 { p, floor } => {
            if p.n.needs_grad {
                let da: Vec<f64> = {
                    let pd = p.data();
                    pd.iter()
                        .zip(gy)
                        .map(|(&pi, g)| if pi > *floor { -g / (pi * LN_2) } else { 0.0 })
                        .collect()
                };
                p.add_to_grad(&da);
            }
        }
        Op::GaussianBin { resid, sigma } => {
            let rd = resid.data();
            let sd = sigma.data();
            let mut dr = vec![0.0; rd.len()];
            let mut ds = vec![0.0; rd.len()];
            for i in 0..rd.len() {
                let s = sd[i];
                let a = (rd[i] + 0.5) / s;
                let b = (rd[i] - 0.5) / s;
                let pa = std_normal_pdf(a);
                let pb = std_normal_pdf(b);
                dr[i] = gy[i] * (pa - pb) / s;
                ds[i] = gy[i] * (b * pb - a * pa) / s;
            }
            drop(rd);
            drop(sd);
            if resid.n.needs_grad {
                resid.add_to_grad(&dr);
            }
            if sigma.n.needs_grad {
                sigma.add_to_grad(&ds);
            }
        }
        Op::Concat { parts, axis } => {
            let shape = &node.shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis];
            let mut off = 0;
            for p in parts {
                let w = p.shape()[*axis];
                if p.n.needs_grad {
                    let mut dp = vec![0.0; p.numel()];
                    for o in 0..outer {
                        let src = &gy[(o * total + off) * inner..(o * total + off + w) * inner];
                        dp[o * w * inner..(o + 1) * w * inner].copy_from_slice(src);
                    }
                    p.add_to_grad(&dp);
                }
                off += w;
            }
        }
        Op::Gather { src, idx } => {
            if src.n.needs_grad {
                let mut ds = vec![0.0; src.numel()];
                for (g, &i) in gy.iter().zip(idx.iter()) {
                    ds[i as usize] += g;
                }
                src.add_to_grad(&ds);
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            conv::conv2d_backward(x, w, b, *stride, *pad, gy, &node.shape);
        }
        Op::ConvT2d { x, w, b, stride } => {
            conv::conv_t2d_backward(x, w, b, *stride, gy, &node.shape);
        }
        Op::SumAll(a) => {
            if a.n.needs_grad {
                let da = vec![gy[0]; a.numel()];
                a.add_to_grad(&da);
            }
        }
        Op::MeanAll(a) => {
            if a.n.needs_grad {
                let da = vec![gy[0] / a.numel() as f64; a.numel()];
                a.add_to_grad(&da);
            }
        }
        Op::Reshape(a) => {
            if a.n.needs_grad {
                a.add_to_grad(gy);
            }
        }
    }
}
