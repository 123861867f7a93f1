//! Differentiable operator set. Each op records a backward closure that
//! maps the upstream gradient to accumulated parent gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::NumError;

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::ShapeMismatch {
            op: op.to_string(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    check_same_shape(a, b, "add").expect("add shape");
    let out: Vec<f64> = a
        .inner
        .borrow()
        .data
        .iter()
        .zip(b.inner.borrow().data.iter())
        .map(|(x, y)| x + y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        &a.shape(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            pa.accum_grad(g);
            pb.accum_grad(g);
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    add(a, &mul_scalar(b, -1.0))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    check_same_shape(a, b, "mul").expect("mul shape");
    let out: Vec<f64> = a
        .inner
        .borrow()
        .data
        .iter()
        .zip(b.inner.borrow().data.iter())
        .map(|(x, y)| x * y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        &a.shape(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let bd = pb.data();
            let ga: Vec<f64> = g.iter().zip(&bd).map(|(gi, y)| gi * y).collect();
            pa.accum_grad(&ga);
            let ad = pa.data();
            let gb: Vec<f64> = g.iter().zip(&ad).map(|(gi, x)| gi * x).collect();
            pb.accum_grad(&gb);
        }),
    )
}

pub fn mul_scalar(a: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = a.inner.borrow().data.iter().map(|x| x * c).collect();
    let pa = a.clone();
    Tensor::from_op(
        &a.shape(),
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let ga: Vec<f64> = g.iter().map(|gi| gi * c).collect();
            pa.accum_grad(&ga);
        }),
    )
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = a.inner.borrow().data.iter().map(|x| x + c).collect();
    let pa = a.clone();
    Tensor::from_op(
        &a.shape(),
        out,
        vec![a.clone()],
        Box::new(move |g| pa.accum_grad(g)),
    )
}

/// Elementwise natural log; caller guarantees positive inputs.
pub fn log(a: &Tensor) -> Tensor {
    let out: Vec<f64> = a.inner.borrow().data.iter().map(|x| x.ln()).collect();
    let pa = a.clone();
    Tensor::from_op(
        &a.shape(),
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let ad = pa.data();
            let ga: Vec<f64> = g.iter().zip(&ad).map(|(gi, x)| gi / x).collect();
            pa.accum_grad(&ga);
        }),
    )
}

pub fn exp(a: &Tensor) -> Tensor {
    let out: Vec<f64> = a.inner.borrow().data.iter().map(|x| x.exp()).collect();
    let pa = a.clone();
    let saved = out.clone();
    Tensor::from_op(
        &a.shape(),
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let ga: Vec<f64> = g.iter().zip(&saved).map(|(gi, y)| gi * y).collect();
            pa.accum_grad(&ga);
        }),
    )
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = a.inner.borrow().data.iter().sum();
    let pa = a.clone();
    let n = a.len();
    Tensor::from_op(
        &[1],
        vec![s],
        vec![a.clone()],
        Box::new(move |g| {
            pa.accum_grad(&vec![g[0]; n]);
        }),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len() as f64;
    mul_scalar(&sum_all(a), 1.0 / n)
}

/// Mean over axis 0 of a `[m, n]` tensor.
pub fn mean_rows(a: &Tensor) -> Tensor {
    let shape = a.shape();
    assert_eq!(shape.len(), 2, "mean_rows expects 2-d");
    let (m, n) = (shape[0], shape[1]);
    let ad = a.inner.borrow();
    let mut out = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += ad.data[i * n + j];
        }
    }
    for v in out.iter_mut() {
        *v /= m as f64;
    }
    drop(ad);
    let pa = a.clone();
    Tensor::from_op(
        &[n],
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; m * n];
            let inv = 1.0 / m as f64;
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = g[j] * inv;
                }
            }
            pa.accum_grad(&ga);
        }),
    )
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Tensor {
    assert_eq!(
        shape.iter().product::<usize>(),
        a.len(),
        "reshape element count mismatch"
    );
    let pa = a.clone();
    Tensor::from_op(
        shape,
        a.data(),
        vec![a.clone()],
        Box::new(move |g| pa.accum_grad(g)),
    )
}

pub fn transpose2(a: &Tensor) -> Tensor {
    let shape = a.shape();
    assert_eq!(shape.len(), 2, "transpose2 expects 2-d");
    let (m, n) = (shape[0], shape[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    let pa = a.clone();
    Tensor::from_op(
        &[n, m],
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            pa.accum_grad(&ga);
        }),
    )
}

/// `a [m, k] @ b [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.len(), 2, "matmul lhs not 2-d");
    assert_eq!(sb.len(), 2, "matmul rhs not 2-d");
    assert_eq!(sa[1], sb[0], "matmul inner dim mismatch");
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aip * bv;
            }
        }
    }
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        &[m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ad = pa.data();
            let bd = pb.data();
            // dA = g @ B^T
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bd[p * n..(p + 1) * n];
                    let mut acc = 0.0;
                    for (gv, bv) in grow.iter().zip(brow) {
                        acc += gv * bv;
                    }
                    ga[i * k + p] = acc;
                }
            }
            pa.accum_grad(&ga);
            // dB = A^T @ g
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &mut gb[p * n..(p + 1) * n];
                    for (bv, gv) in brow.iter_mut().zip(grow) {
                        *bv += aip * gv;
                    }
                }
            }
            pb.accum_grad(&gb);
        }),
    )
}

/// Broadcast-add a `[n]` bias to every row of `[m, n]`.
pub fn add_row_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let sx = x.shape();
    assert_eq!(sx.len(), 2);
    let (m, n) = (sx[0], sx[1]);
    assert_eq!(b.len(), n, "bias length mismatch");
    let xd = x.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = xd[i * n + j] + bd[j];
        }
    }
    let (px, pb) = (x.clone(), b.clone());
    Tensor::from_op(
        &[m, n],
        out,
        vec![x.clone(), b.clone()],
        Box::new(move |g| {
            px.accum_grad(g);
            let mut gb = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    gb[j] += g[i * n + j];
                }
            }
            pb.accum_grad(&gb);
        }),
    )
}

/// `y = x W + b` over the last axis; leading axes are flattened.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    let sx = x.shape();
    let sw = w.shape();
    if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[0] || b.len() != sw[1] {
        return Err(NumError::ShapeMismatch {
            op: "linear".into(),
            detail: format!("x={:?} W={:?} b={:?}", sx, sw, b.shape()),
        });
    }
    let d_in = sw[0];
    let rows = x.len() / d_in;
    let flat = reshape(x, &[rows, d_in]);
    let y = add_row_bias(&matmul(&flat, w), b);
    let mut out_shape = sx[..sx.len() - 1].to_vec();
    out_shape.push(sw[1]);
    Ok(reshape(&y, &out_shape))
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let sx = x.shape();
    assert_eq!(sx.len(), 2);
    let (m, n) = (sx[0], sx[1]);
    assert!(start + len <= n, "slice_cols out of range");
    let xd = x.data();
    let mut out = vec![0.0; m * len];
    for i in 0..m {
        out[i * len..(i + 1) * len].copy_from_slice(&xd[i * n + start..i * n + start + len]);
    }
    let px = x.clone();
    Tensor::from_op(
        &[m, len],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            px.accum_grad(&gx);
        }),
    )
}

pub fn concat_cols(xs: &[Tensor]) -> Tensor {
    assert!(!xs.is_empty());
    let m = xs[0].shape()[0];
    let widths: Vec<usize> = xs
        .iter()
        .map(|t| {
            let s = t.shape();
            assert_eq!(s.len(), 2);
            assert_eq!(s[0], m, "concat_cols row mismatch");
            s[1]
        })
        .collect();
    let n: usize = widths.iter().sum();
    let mut out = vec![0.0; m * n];
    let mut off = 0;
    for (t, &w) in xs.iter().zip(&widths) {
        let td = t.data();
        for i in 0..m {
            out[i * n + off..i * n + off + w].copy_from_slice(&td[i * w..(i + 1) * w]);
        }
        off += w;
    }
    let parents: Vec<Tensor> = xs.to_vec();
    let ps: Vec<Tensor> = xs.to_vec();
    let widths2 = widths.clone();
    Tensor::from_op(
        &[m, n],
        out,
        parents,
        Box::new(move |g| {
            let mut off = 0;
            for (t, &w) in ps.iter().zip(&widths2) {
                let mut gt = vec![0.0; m * w];
                for i in 0..m {
                    gt[i * w..(i + 1) * w].copy_from_slice(&g[i * n + off..i * n + off + w]);
                }
                t.accum_grad(&gt);
                off += w;
            }
        }),
    )
}

/// Stack `k` vectors of length `n` into `[k, n]`.
pub fn stack_rows(xs: &[Tensor]) -> Tensor {
    assert!(!xs.is_empty());
    let n = xs[0].len();
    let k = xs.len();
    let mut out = Vec::with_capacity(k * n);
    for t in xs {
        assert_eq!(t.len(), n, "stack_rows length mismatch");
        out.extend_from_slice(&t.data());
    }
    let ps: Vec<Tensor> = xs.to_vec();
    Tensor::from_op(
        &[k, n],
        out,
        xs.to_vec(),
        Box::new(move |g| {
            for (i, t) in ps.iter().enumerate() {
                t.accum_grad(&g[i * n..(i + 1) * n]);
            }
        }),
    )
}

/// Stack `k` vectors of length `m` as columns of `[m, k]`.
pub fn stack_cols(xs: &[Tensor]) -> Tensor {
    assert!(!xs.is_empty());
    let m = xs[0].len();
    let k = xs.len();
    let mut out = vec![0.0; m * k];
    for (j, t) in xs.iter().enumerate() {
        assert_eq!(t.len(), m, "stack_cols length mismatch");
        let td = t.data();
        for i in 0..m {
            out[i * k + j] = td[i];
        }
    }
    let ps: Vec<Tensor> = xs.to_vec();
    Tensor::from_op(
        &[m, k],
        out,
        xs.to_vec(),
        Box::new(move |g| {
            for (j, t) in ps.iter().enumerate() {
                let gt: Vec<f64> = (0..m).map(|i| g[i * k + j]).collect();
                t.accum_grad(&gt);
            }
        }),
    )
}

/// Select rows of `[n, d]` by index; gradient scatter-adds back.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let sx = x.shape();
    assert_eq!(sx.len(), 2);
    let (n, d) = (sx[0], sx[1]);
    let xd = x.data();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        assert!(i < n, "gather_rows index out of range");
        out.extend_from_slice(&xd[i * d..(i + 1) * d]);
    }
    let px = x.clone();
    let idx2 = idx.to_vec();
    Tensor::from_op(
        &[idx.len(), d],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; n * d];
            for (r, &i) in idx2.iter().enumerate() {
                for j in 0..d {
                    gx[i * d + j] += g[r * d + j];
                }
            }
            px.accum_grad(&gx);
        }),
    )
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu(a: &Tensor) -> Tensor {
    let out: Vec<f64> = a.inner.borrow().data.iter().map(|&x| gelu_tanh(x)).collect();
    let pa = a.clone();
    Tensor::from_op(
        &a.shape(),
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let ad = pa.data();
            let ga: Vec<f64> = g
                .iter()
                .zip(&ad)
                .map(|(gi, &x)| gi * gelu_tanh_deriv(x))
                .collect();
            pa.accum_grad(&ga);
        }),
    )
}

/// Layer normalization over the last axis with biased variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor, NumError> {
    let sx = x.shape();
    let d = *sx.last().ok_or_else(|| NumError::ShapeMismatch {
        op: "layer_norm".into(),
        detail: "scalar input".into(),
    })?;
    if gamma.len() != d || beta.len() != d {
        return Err(NumError::ShapeMismatch {
            op: "layer_norm".into(),
            detail: format!("d={} gamma={} beta={}", d, gamma.len(), beta.len()),
        });
    }
    let rows = x.len() / d;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    let mut xhat = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let h = (row[j] - mean) * istd;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gd[j] + bd[j];
        }
    }
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    Ok(Tensor::from_op(
        &sx,
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let gd = pg.data();
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            let mut gx = vec![0.0; rows * d];
            for r in 0..rows {
                let istd = inv_std[r];
                let xh = &xhat[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut mean_h = 0.0;
                let mut mean_hx = 0.0;
                for j in 0..d {
                    let h = gd[j] * gr[j];
                    mean_h += h;
                    mean_hx += h * xh[j];
                    ggamma[j] += gr[j] * xh[j];
                    gbeta[j] += gr[j];
                }
                mean_h /= d as f64;
                mean_hx /= d as f64;
                for j in 0..d {
                    let h = gd[j] * gr[j];
                    gx[r * d + j] = istd * (h - mean_h - xh[j] * mean_hx);
                }
            }
            px.accum_grad(&gx);
            pg.accum_grad(&ggamma);
            pb.accum_grad(&gbeta);
        }),
    ))
}

/// Numerically stable softmax over the last axis, with an optional
/// non-differentiable additive bias (used for attention padding masks).
pub fn softmax(x: &Tensor, bias: Option<&[f64]>) -> Tensor {
    let sx = x.shape();
    let n = *sx.last().expect("softmax on scalar");
    let rows = x.len() / n;
    if let Some(b) = bias {
        assert_eq!(b.len(), x.len(), "softmax bias length mismatch");
    }
    let xd = x.data();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let base = r * n;
        let mut mx = f64::NEG_INFINITY;
        for j in 0..n {
            let v = xd[base + j] + bias.map_or(0.0, |b| b[base + j]);
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            let v = xd[base + j] + bias.map_or(0.0, |b| b[base + j]);
            let e = (v - mx).exp();
            out[base + j] = e;
            sum += e;
        }
        for j in 0..n {
            out[base + j] /= sum;
        }
    }
    let px = x.clone();
    let saved = out.clone();
    Tensor::from_op(
        &sx,
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; rows * n];
            for r in 0..rows {
                let base = r * n;
                let mut dot = 0.0;
                for j in 0..n {
                    dot += g[base + j] * saved[base + j];
                }
                for j in 0..n {
                    gx[base + j] = saved[base + j] * (g[base + j] - dot);
                }
            }
            px.accum_grad(&gx);
        }),
    )
}

/// Valid (no padding) cross-correlation: `x [cin, t]`, `k [cout, cin, w]`.
/// Strided window gather for `conv1d`: `[cin*w, t_out]` with row
/// `ci*w + wi` holding `x[ci, j*stride + wi]` for each output column j.
fn conv_cols(xd: &[f64], cin: usize, t: usize, w: usize, stride: usize, t_out: usize) -> Vec<f64> {
    let mut cols = vec![0.0; cin * w * t_out];
    for ci in 0..cin {
        for wi in 0..w {
            let dst = &mut cols[(ci * w + wi) * t_out..][..t_out];
            let src = &xd[ci * t + wi..];
            if stride == 1 {
                dst.copy_from_slice(&src[..t_out]);
            } else {
                for (d, &s) in dst.iter_mut().zip(src.iter().step_by(stride)) {
                    *d = s;
                }
            }
        }
    }
    cols
}

pub fn conv1d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor, NumError> {
    let sx = x.shape();
    let sk = kernel.shape();
    if sx.len() != 2 || sk.len() != 3 || sx[0] != sk[1] {
        return Err(NumError::ShapeMismatch {
            op: "conv1d".into(),
            detail: format!("x={:?} k={:?}", sx, sk),
        });
    }
    assert!(stride >= 1, "stride must be >= 1");
    let (cin, t) = (sx[0], sx[1]);
    let (cout, w) = (sk[0], sk[2]);
    if t < w {
        return Err(NumError::InputTooShort {
            needed: w,
            got: t,
        });
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(NumError::ShapeMismatch {
                op: "conv1d".into(),
                detail: format!("bias={} cout={}", b.len(), cout),
            });
        }
    }
    let t_out = (t - w) / stride + 1;
    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.map(|b| b.data());
    // gather the strided input windows into a contiguous [cin*w, t_out]
    // matrix so the convolution becomes a cache-friendly matmul with the
    // kernel viewed as [cout, cin*w]
    let kw = cin * w;
    let cols = conv_cols(&xd, cin, t, w, stride, t_out);
    let mut out = vec![0.0; cout * t_out];
    for co in 0..cout {
        let orow = &mut out[co * t_out..(co + 1) * t_out];
        if let Some(b) = &bd {
            orow.fill(b[co]);
        }
        let krow = &kd[co * kw..(co + 1) * kw];
        for (p, &kv) in krow.iter().enumerate() {
            let crow = &cols[p * t_out..(p + 1) * t_out];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += kv * cv;
            }
        }
    }
    let px = x.clone();
    let pk = kernel.clone();
    let pb = bias.cloned();
    let mut parents = vec![x.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        &[cout, t_out],
        out,
        parents,
        Box::new(move |g| {
            let xd = px.data();
            let kd = pk.data();
            let kw = cin * w;
            let cols = conv_cols(&xd, cin, t, w, stride, t_out);
            // kernel grad: g [cout, t_out] times cols^T, contiguous dots
            let mut gk = vec![0.0; cout * kw];
            for co in 0..cout {
                let grow = &g[co * t_out..(co + 1) * t_out];
                for p in 0..kw {
                    let crow = &cols[p * t_out..(p + 1) * t_out];
                    gk[co * kw + p] = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
                }
            }
            // input grad: kernel^T times g, then scatter-add the window
            // matrix back onto the strided input positions
            let mut gcols = vec![0.0; kw * t_out];
            for co in 0..cout {
                let grow = &g[co * t_out..(co + 1) * t_out];
                let krow = &kd[co * kw..(co + 1) * kw];
                for (p, &kv) in krow.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    let crow = &mut gcols[p * t_out..(p + 1) * t_out];
                    for (c, &gv) in crow.iter_mut().zip(grow) {
                        *c += kv * gv;
                    }
                }
            }
            let mut gx = vec![0.0; cin * t];
            for ci in 0..cin {
                for wi in 0..w {
                    let crow = &gcols[(ci * w + wi) * t_out..][..t_out];
                    let dst = gx[ci * t + wi..].iter_mut().step_by(stride);
                    for (d, &c) in dst.zip(crow) {
                        *d += c;
                    }
                }
            }
            px.accum_grad(&gx);
            pk.accum_grad(&gk);
            if let Some(b) = &pb {
                let mut gb = vec![0.0; cout];
                for co in 0..cout {
                    gb[co] = g[co * t_out..(co + 1) * t_out].iter().sum();
                }
                b.accum_grad(&gb);
            }
        }),
    ))
}

/// Mean over valid frames of `x [t, d]`.
pub fn mean_pool(x: &Tensor, valid: &[bool]) -> Result<Tensor, NumError> {
    let sx = x.shape();
    assert_eq!(sx.len(), 2, "mean_pool expects 2-d");
    let (t, d) = (sx[0], sx[1]);
    assert_eq!(valid.len(), t, "valid mask length mismatch");
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(NumError::AllFramesInvalid);
    }
    let xd = x.data();
    let mut out = vec![0.0; d];
    for (i, &v) in valid.iter().enumerate() {
        if v {
            for j in 0..d {
                out[j] += xd[i * d + j];
            }
        }
    }
    for o in out.iter_mut() {
        *o /= count as f64;
    }
    let px = x.clone();
    let valid2 = valid.to_vec();
    Ok(Tensor::from_op(
        &[d],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let inv = 1.0 / count as f64;
            let mut gx = vec![0.0; t * d];
            for (i, &v) in valid2.iter().enumerate() {
                if v {
                    for j in 0..d {
                        gx[i * d + j] = g[j] * inv;
                    }
                }
            }
            px.accum_grad(&gx);
        }),
    ))
}

/// Row-wise cosine similarity between `a [m, d]` and `b [m, d]`, norms
/// clamped below at `eps`.
pub fn cosine_rows(a: &Tensor, b: &Tensor, eps: f64) -> Tensor {
    check_same_shape(a, b, "cosine_rows").expect("cosine_rows shape");
    let s = a.shape();
    assert_eq!(s.len(), 2);
    let (m, d) = (s[0], s[1]);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m];
    let mut na = vec![0.0; m];
    let mut nb = vec![0.0; m];
    for r in 0..m {
        let ar = &ad[r * d..(r + 1) * d];
        let br = &bd[r * d..(r + 1) * d];
        let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        na[r] = ar.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
        nb[r] = br.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
        out[r] = dot / (na[r] * nb[r]);
    }
    let (pa, pb) = (a.clone(), b.clone());
    let cos = out.clone();
    Tensor::from_op(
        &[m],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ad = pa.data();
            let bd = pb.data();
            let mut ga = vec![0.0; m * d];
            let mut gb = vec![0.0; m * d];
            for r in 0..m {
                let ar = &ad[r * d..(r + 1) * d];
                let br = &bd[r * d..(r + 1) * d];
                let (nra, nrb, c, gr) = (na[r], nb[r], cos[r], g[r]);
                for j in 0..d {
                    ga[r * d + j] = gr * (br[j] / (nra * nrb) - c * ar[j] / (nra * nra));
                    gb[r * d + j] = gr * (ar[j] / (nra * nrb) - c * br[j] / (nrb * nrb));
                }
            }
            pa.accum_grad(&ga);
            pb.accum_grad(&gb);
        }),
    )
}

/// Cosine similarity of two vectors as a differentiable scalar.
pub fn cosine_similarity(a: &Tensor, b: &Tensor, eps: f64) -> Tensor {
    let d = a.len();
    let a2 = reshape(a, &[1, d]);
    let b2 = reshape(b, &[1, d]);
    cosine_rows(&a2, &b2, eps)
}

/// Fused softmax + negative log-likelihood, weighted per row:
/// `(sum_i w_i * nll_i) / (sum_i w_i)`.
pub fn cross_entropy_rows(
    logits: &Tensor,
    targets: &[usize],
    row_weights: &[f64],
) -> Result<Tensor, NumError> {
    let s = logits.shape();
    assert_eq!(s.len(), 2, "cross_entropy_rows expects 2-d logits");
    let (m, c) = (s[0], s[1]);
    assert_eq!(targets.len(), m, "targets length mismatch");
    assert_eq!(row_weights.len(), m, "weights length mismatch");
    for &t in targets {
        if t >= c {
            return Err(NumError::BadTarget { target: t, classes: c });
        }
    }
    for &w in row_weights {
        if w <= 0.0 {
            return Err(NumError::NonPositiveWeight { weight: w });
        }
    }
    let ld = logits.data();
    let wsum: f64 = row_weights.iter().sum();
    let mut probs = vec![0.0; m * c];
    let mut loss = 0.0;
    for r in 0..m {
        let row = &ld[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            probs[r * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            probs[r * c + j] /= sum;
        }
        let lse = mx + sum.ln();
        loss += row_weights[r] * (lse - row[targets[r]]);
    }
    loss /= wsum;
    let pl = logits.clone();
    let targets2 = targets.to_vec();
    let weights2 = row_weights.to_vec();
    Ok(Tensor::from_op(
        &[1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |g| {
            let mut gl = vec![0.0; m * c];
            for r in 0..m {
                let scale = g[0] * weights2[r] / wsum;
                for j in 0..c {
                    let indicator = if j == targets2[r] { 1.0 } else { 0.0 };
                    gl[r * c + j] = scale * (probs[r * c + j] - indicator);
                }
            }
            pl.accum_grad(&gl);
        }),
    ))
}

/// Class-weighted cross entropy: row weight is the weight of the row's
/// target class.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    class_weights: &[f64],
) -> Result<Tensor, NumError> {
    let c = *logits.shape().last().unwrap();
    assert_eq!(class_weights.len(), c, "class_weights length mismatch");
    for &t in targets {
        if t >= c {
            return Err(NumError::BadTarget { target: t, classes: c });
        }
    }
    let row_weights: Vec<f64> = targets.iter().map(|&t| class_weights[t]).collect();
    cross_entropy_rows(logits, targets, &row_weights)
}

/// Sample standard Gumbel noise.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gumbel-softmax over the last axis. With `hard`, the forward value is a
/// one-hot at the noisy argmax while the gradient is that of the soft
/// distribution (straight-through).
pub fn gumbel_softmax(logits: &Tensor, temperature: f64, rng: &mut ChaCha8Rng, hard: bool) -> Tensor {
    assert!(temperature > 0.0, "temperature must be positive");
    let noise = gumbel_noise(rng, logits.len());
    gumbel_softmax_with_noise(logits, temperature, &noise, hard)
}

pub fn gumbel_softmax_with_noise(
    logits: &Tensor,
    temperature: f64,
    noise: &[f64],
    hard: bool,
) -> Tensor {
    assert!(temperature > 0.0, "temperature must be positive");
    assert_eq!(noise.len(), logits.len());
    let shape = logits.shape();
    let n = *shape.last().expect("gumbel_softmax on scalar");
    let noisy = {
        let ld = logits.data();
        let data: Vec<f64> = ld.iter().zip(noise).map(|(l, g)| (l + g) / temperature).collect();
        let px = logits.clone();
        let inv_t = 1.0 / temperature;
        Tensor::from_op(
            &shape,
            data,
            vec![logits.clone()],
            Box::new(move |g| {
                let gl: Vec<f64> = g.iter().map(|v| v * inv_t).collect();
                px.accum_grad(&gl);
            }),
        )
    };
    let soft = softmax(&noisy, None);
    if !hard {
        return soft;
    }
    let sd = soft.data();
    let rows = sd.len() / n;
    let mut delta = vec![0.0; sd.len()];
    for r in 0..rows {
        let row = &sd[r * n..(r + 1) * n];
        let mut best = 0;
        for j in 1..n {
            if row[j] > row[best] {
                best = j;
            }
        }
        for j in 0..n {
            delta[r * n + j] = (if j == best { 1.0 } else { 0.0 }) - row[j];
        }
    }
    add(&soft, &Tensor::from_vec(&shape, delta))
}
