//! Tensor operations and their gradient rules.

use super::{Result, Tensor, TensorError};

fn require_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected rank-2 tensor, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn require_same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    }
    out
}

impl Tensor {
    /// Matrix product `[M×K]·[K×N] -> [M×N]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = require_rank2(self, "matmul")?;
        let (k2, n) = require_rank2(rhs, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let data = matmul_raw(&self.data(), &rhs.data(), m, k, n);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |grad, _out, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    // dA = G · Bᵀ
                    let bd = b.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grad[i * n + j] * bd[kk * n + j];
                            }
                            ga[i * k + kk] = acc;
                        }
                    }
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    // dB = Aᵀ · G
                    let ad = a.data();
                    let mut gb = vec![0.0; k * n];
                    for kk in 0..k {
                        for i in 0..m {
                            let a_ik = ad[i * k + kk];
                            let g_row = &grad[i * n..(i + 1) * n];
                            let gb_row = &mut gb[kk * n..(kk + 1) * n];
                            for (o, &g) in gb_row.iter_mut().zip(g_row) {
                                *o += a_ik * g;
                            }
                        }
                    }
                    b.accumulate_grad(&gb);
                }
            }),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = require_rank2(self, "transpose")?;
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        Tensor::from_op(
            "transpose",
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |grad, _out, parents| {
                let mut g = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        g[i * n + j] = grad[j * m + i];
                    }
                }
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        require_same_shape(self, rhs, "add")?;
        let data: Vec<f64> = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a + b).collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|grad, _out, parents| {
                for p in parents {
                    if p.requires_grad() {
                        p.accumulate_grad(grad);
                    }
                }
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        require_same_shape(self, rhs, "sub")?;
        let data: Vec<f64> = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a - b).collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|grad, _out, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(grad);
                }
                if parents[1].requires_grad() {
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    parents[1].accumulate_grad(&neg);
                }
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        require_same_shape(self, rhs, "mul")?;
        let data: Vec<f64> = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a * b).collect();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|grad, _out, parents| {
                if parents[0].requires_grad() {
                    let other = parents[1].data();
                    let g: Vec<f64> = grad.iter().zip(other.iter()).map(|(g, o)| g * o).collect();
                    parents[0].accumulate_grad(&g);
                }
                if parents[1].requires_grad() {
                    let other = parents[0].data();
                    let g: Vec<f64> = grad.iter().zip(other.iter()).map(|(g, o)| g * o).collect();
                    parents[1].accumulate_grad(&g);
                }
            }),
        )
    }

    /// Broadcast-add a length-N bias to every row of an `[M×N]` tensor.
    pub fn add_rowwise(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = require_rank2(self, "add_rowwise")?;
        if bias.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_rowwise",
                detail: format!("bias has {} values, rows have {n}", bias.numel()),
            });
        }
        let src = self.data();
        let bv = bias.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = src[i * n + j] + bv[j];
            }
        }
        drop((src, bv));
        Tensor::from_op(
            "add_rowwise",
            vec![m, n],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |grad, _out, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(grad);
                }
                if parents[1].requires_grad() {
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += grad[i * n + j];
                        }
                    }
                    parents[1].accumulate_grad(&gb);
                }
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |grad, _out, parents| {
                let g: Vec<f64> = grad.iter().map(|g| g * c).collect();
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|grad, _out, parents| parents[0].accumulate_grad(grad)),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// Sum of all entries, as a `[1]` scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |grad, _out, parents| {
                parents[0].accumulate_grad(&vec![grad[0]; n]);
            }),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|grad, _out, parents| {
                let x = parents[0].data();
                let g: Vec<f64> = grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                drop(x);
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    /// Exact-erf GELU: `x/2 · (1 + erf(x/√2))`.
    pub fn gelu(&self) -> Result<Tensor> {
        const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)))
            .collect();
        Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|grad, _out, parents| {
                let x = parents[0].data();
                let g: Vec<f64> = grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &x)| {
                        let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        g * (cdf + x * pdf)
                    })
                    .collect();
                drop(x);
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    /// Elementwise square root. Callers must keep inputs strictly positive
    /// (shift by a tiny epsilon first) or the gradient blows up at 0.
    pub fn sqrt(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v.sqrt()).collect();
        Tensor::from_op(
            "sqrt",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|grad, out, parents| {
                let g: Vec<f64> = grad.iter().zip(out.iter()).map(|(g, y)| g * 0.5 / y).collect();
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    /// Row-wise softmax with per-row max subtraction, so inputs of any finite
    /// magnitude normalize without overflow.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = require_rank2(self, "softmax_rows")?;
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut denom = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                denom += *o;
            }
            for o in out.iter_mut() {
                *o /= denom;
            }
        }
        drop(src);
        Tensor::from_op(
            "softmax_rows",
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(move |grad, out, parents| {
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    let s = &out[i * n..(i + 1) * n];
                    let gr = &grad[i * n..(i + 1) * n];
                    let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for j in 0..n {
                        g[i * n + j] = s[j] * (gr[j] - dot);
                    }
                }
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    /// Row-wise log-softmax (stable log of [`softmax_rows`]); keeps peaked
    /// logits finite where `softmax().log()` would underflow to `-inf`.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = require_rank2(self, "log_softmax_rows")?;
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                data[i * n + j] = row[j] - lse;
            }
        }
        drop(src);
        Tensor::from_op(
            "log_softmax_rows",
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(move |grad, out, parents| {
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    let gr = &grad[i * n..(i + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        g[i * n + j] = gr[j] - out[i * n + j].exp() * total;
                    }
                }
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    /// Per-row normalization `(x-mean)/sqrt(var+eps)`, scaled by `gamma` and
    /// shifted by `beta` (both length-D).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = require_rank2(self, "layer_norm")?;
        if gamma.numel() != n || beta.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gamma/beta have {}/{} values, rows have {n}",
                    gamma.numel(),
                    beta.numel()
                ),
            });
        }
        let src = self.data();
        let gv = gamma.data();
        let bv = beta.data();
        let mut data = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut inv_stds = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            inv_stds[i] = inv;
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        drop((src, gv, bv));
        Tensor::from_op(
            "layer_norm",
            vec![m, n],
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |grad, _out, parents| {
                let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
                let xd = x.data();
                let gv = gamma.data();
                let mut gx = vec![0.0; m * n];
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let gr = &grad[i * n..(i + 1) * n];
                    let (mean, inv) = (means[i], inv_stds[i]);
                    let mut mean_gh = 0.0;
                    let mut mean_gh_xh = 0.0;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let gh = gr[j] * gv[j];
                        mean_gh += gh;
                        mean_gh_xh += gh * xhat;
                        ggamma[j] += gr[j] * xhat;
                        gbeta[j] += gr[j];
                    }
                    mean_gh /= n as f64;
                    mean_gh_xh /= n as f64;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        let gh = gr[j] * gv[j];
                        gx[i * n + j] = inv * (gh - mean_gh - xhat * mean_gh_xh);
                    }
                }
                drop((xd, gv));
                if x.requires_grad() {
                    x.accumulate_grad(&gx);
                }
                if gamma.requires_grad() {
                    gamma.accumulate_grad(&ggamma);
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(&gbeta);
                }
            }),
        )
    }

    /// Gather rows by index (indices may repeat).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = require_rank2(self, "select_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(TensorError::InvalidArgument {
                op: "select_rows",
                detail: format!("row index {bad} out of range for {m} rows"),
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        drop(src);
        let idx: Vec<usize> = indices.to_vec();
        Tensor::from_op(
            "select_rows",
            vec![indices.len(), n],
            data,
            vec![self.clone()],
            Box::new(move |grad, _out, parents| {
                let mut g = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        g[i * n + j] += grad[r * n + j];
                    }
                }
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    /// A contiguous column window `[start, start+len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = require_rank2(self, "slice_cols")?;
        if start + len > n {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                detail: format!("window {start}..{} exceeds {n} columns", start + len),
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        drop(src);
        Tensor::from_op(
            "slice_cols",
            vec![m, len],
            data,
            vec![self.clone()],
            Box::new(move |grad, _out, parents| {
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..len {
                        g[i * n + start + j] = grad[i * len + j];
                    }
                }
                parents[0].accumulate_grad(&g);
            }),
        )
    }

    /// Reinterpret the value buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|grad, _out, parents| parents[0].accumulate_grad(grad)),
        )
    }
}

/// Stack rank-2 tensors vertically; all must share a column count.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "concat_rows",
            detail: "no tensors given".into(),
        });
    }
    let n = require_rank2(&parts[0], "concat_rows")?.1;
    let mut rows = 0;
    for p in parts {
        let (m, nc) = require_rank2(p, "concat_rows")?;
        if nc != n {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                detail: format!("column counts {n} vs {nc}"),
            });
        }
        rows += m;
    }
    let mut data = Vec::with_capacity(rows * n);
    for p in parts {
        data.extend_from_slice(&p.data());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
    Tensor::from_op(
        "concat_rows",
        vec![rows, n],
        data,
        parts.to_vec(),
        Box::new(move |grad, _out, parents| {
            let mut offset = 0;
            for (p, &m) in parents.iter().zip(&sizes) {
                let chunk = &grad[offset * n..(offset + m) * n];
                if p.requires_grad() {
                    p.accumulate_grad(chunk);
                }
                offset += m;
            }
        }),
    )
}

/// Stack rank-2 tensors horizontally; all must share a row count.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "concat_cols",
            detail: "no tensors given".into(),
        });
    }
    let m = require_rank2(&parts[0], "concat_cols")?.0;
    let mut cols = 0;
    for p in parts {
        let (mr, nc) = require_rank2(p, "concat_cols")?;
        if mr != m {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts {m} vs {mr}"),
            });
        }
        cols += nc;
    }
    let mut data = vec![0.0; m * cols];
    let mut offset = 0;
    for p in parts {
        let nc = p.cols();
        let src = p.data();
        for i in 0..m {
            data[i * cols + offset..i * cols + offset + nc]
                .copy_from_slice(&src[i * nc..(i + 1) * nc]);
        }
        offset += nc;
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
    Tensor::from_op(
        "concat_cols",
        vec![m, cols],
        data,
        parts.to_vec(),
        Box::new(move |grad, _out, parents| {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (p, &nc) in parents.iter().zip(&sizes) {
                if p.requires_grad() {
                    let mut g = vec![0.0; m * nc];
                    for i in 0..m {
                        g[i * nc..(i + 1) * nc]
                            .copy_from_slice(&grad[i * total + offset..i * total + offset + nc]);
                    }
                    p.accumulate_grad(&g);
                }
                offset += nc;
            }
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::parameter(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let x = Tensor::from_rows(&[
            vec![0.3, -1.7],
            vec![2.5, 0.01],
            vec![-4.0, 9.9],
        ])
        .unwrap();
        assert_eq!(eye.matmul(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        let eval = |a: &Tensor, b: &Tensor| a.matmul(b)?.sum();
        eval(&a, &b).and_then(|loss| super::super::backward_graph(&loss)).unwrap();
        let (ga, gb) = (a.grad().unwrap(), b.grad().unwrap());
        for i in 0..a.numel() {
            let fd = gradcheck::central_difference(&a, i, 1e-5, &mut || {
                eval(&a, &b)?.item()
            })
            .unwrap();
            assert!(gradcheck::relative_error(ga[i], fd) < 1e-6, "a[{i}]: {} vs {fd}", ga[i]);
        }
        for i in 0..b.numel() {
            let fd = gradcheck::central_difference(&b, i, 1e-5, &mut || {
                eval(&a, &b)?.item()
            })
            .unwrap();
            assert!(gradcheck::relative_error(gb[i], fd) < 1e-6, "b[{i}]: {} vs {fd}", gb[i]);
        }
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(t.softmax_rows().unwrap().to_vec(), vec![0.5, 0.5]);

        let t = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let s = t.softmax_rows().unwrap().to_vec();
        assert!(s[0] > 1.0 - 1e-12 && s[1] < 1e-12);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        // Reference computed with 50-digit arithmetic.
        let expected = [
            0.090030573170380457998,
            0.24472847105479765247,
            0.66524095577482188953,
        ];
        let s = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]])
            .unwrap()
            .softmax_rows()
            .unwrap()
            .to_vec();
        for (got, want) in s.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 5]);
        let w = Tensor::new(&[2, 5], (0..10).map(|i| 0.1 * i as f64).collect()).unwrap();
        let eval = |x: &Tensor| x.softmax_rows()?.mul(&w)?.sum();
        eval(&x).and_then(|loss| super::super::backward_graph(&loss)).unwrap();
        let g = x.grad().unwrap();
        for i in 0..x.numel() {
            let fd =
                gradcheck::central_difference(&x, i, 1e-5, &mut || eval(&x)?.item()).unwrap();
            assert!(gradcheck::relative_error(g[i], fd) < 1e-4);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap();
        let gamma = Tensor::new(&[3], vec![1.0; 3]).unwrap();
        let beta = Tensor::zeros(&[3]);
        let y = x.layer_norm(&gamma, &beta, 1e-6).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_zero_gamma_broadcasts_beta() {
        let x = Tensor::from_rows(&[vec![3.0, -2.0], vec![0.4, 8.0]]).unwrap();
        let gamma = Tensor::zeros(&[2]);
        let beta = Tensor::new(&[2], vec![0.7, -1.3]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-6).unwrap();
        assert_eq!(y.to_vec(), vec![0.7, -1.3, 0.7, -1.3]);
    }

    #[test]
    fn layer_norm_standardizes_two_point_row() {
        // mean 2, population std 1; eps=0 exercises the pure standardization.
        let x = Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let gamma = Tensor::new(&[2], vec![1.0; 2]).unwrap();
        let beta = Tensor::zeros(&[2]);
        let y = x.layer_norm(&gamma, &beta, 0.0).unwrap();
        assert_eq!(y.to_vec(), vec![-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, &[3, 4]);
        let gamma = randn(&mut rng, &[4]);
        let beta = randn(&mut rng, &[4]);
        let probe = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let eval = |x: &Tensor, g: &Tensor, b: &Tensor| {
            x.layer_norm(g, b, 1e-5)?.mul(&probe)?.sum()
        };
        eval(&x, &gamma, &beta)
            .and_then(|loss| super::super::backward_graph(&loss))
            .unwrap();
        for t in [&x, &gamma, &beta] {
            let grad = t.grad().unwrap();
            for i in 0..t.numel() {
                let fd = gradcheck::central_difference(t, i, 1e-5, &mut || {
                    eval(&x, &gamma, &beta)?.item()
                })
                .unwrap();
                assert!(
                    gradcheck::relative_error(grad[i], fd) < 1e-4,
                    "coord {i}: {} vs {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn gelu_fixed_points() {
        let x = Tensor::new(&[3], vec![0.0, 10.0, 1.0]).unwrap();
        let y = x.gelu().unwrap().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-9, "gelu(10) ≈ 10, got {}", y[1]);
        // Reference computed with 50-digit arithmetic.
        assert!((y[2] - 0.84134474606854294859).abs() < 1e-12);
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let x = Tensor::parameter(&[5], vec![-2.0, -0.5, 0.3, 1.0, 2.5]).unwrap();
        let loss = x.gelu().unwrap().sum().unwrap();
        super::super::backward_graph(&loss).unwrap();
        let g = x.grad().unwrap();
        // Reference gelu'(1) computed with 50-digit arithmetic.
        assert!((g[3] - 1.0833154705876862984).abs() < 1e-12);
        for i in 0..x.numel() {
            let fd = gradcheck::central_difference(&x, i, 1e-5, &mut || {
                x.gelu()?.sum()?.item()
            })
            .unwrap();
            assert!(gradcheck::relative_error(g[i], fd) < 1e-4);
        }
    }

    #[test]
    fn compound_graph_gradient_matches_finite_differences() {
        // One graph exercising select_rows, slice_cols, concat, log_softmax,
        // sqrt, mul, add_rowwise together.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, &[4, 6]);
        let bias = randn(&mut rng, &[3]);
        let eval = |x: &Tensor, bias: &Tensor| -> Result<Tensor> {
            let a = x.select_rows(&[2, 0, 3])?.slice_cols(1, 3)?.add_rowwise(bias)?;
            let b = x.slice_cols(0, 3)?.select_rows(&[1, 1, 2])?;
            let c = concat_cols(&[a.clone(), b.clone()])?;
            let d = concat_rows(&[a, b])?.log_softmax_rows()?;
            let e = c.mul(&c)?.sum()?.add_scalar(1e-6)?.sqrt()?;
            d.sum()?.add(&e)
        };
        eval(&x, &bias).and_then(|loss| super::super::backward_graph(&loss)).unwrap();
        for t in [&x, &bias] {
            let g = t.grad().unwrap();
            for i in 0..t.numel() {
                let fd = gradcheck::central_difference(t, i, 1e-5, &mut || {
                    eval(&x, &bias)?.item()
                })
                .unwrap();
                assert!(
                    gradcheck::relative_error(g[i], fd) < 1e-4,
                    "coord {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn non_finite_op_output_is_an_error() {
        let big = Tensor::new(&[1], vec![1e308]).unwrap();
        let r = big.scale(10.0);
        assert!(matches!(r, Err(TensorError::NonFinite { op: "scale" })));
    }

    #[test]
    fn concat_shape_checks() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(concat_rows(&[a.clone(), b.clone()]).is_err());
        assert!(concat_cols(&[a, b]).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
            proptest::collection::vec(-1e3f64..1e3, 4), 1..5)) {
            let t = Tensor::from_rows(&rows).unwrap();
            let s = t.softmax_rows().unwrap();
            let d = s.to_vec();
            for i in 0..s.rows() {
                let sum: f64 = d[i * 4..(i + 1) * 4].iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }
}
