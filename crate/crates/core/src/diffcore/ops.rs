//! Differentiable operations recorded on a [`Graph`].

use super::graph::{Graph, Var};
use super::scalar::{sigmoid, softplus, NORM_GUARD};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Added under the square root of Euclidean distances so the gradient at
/// coincident points stays finite.
pub const EUCLID_EPS: f64 = 1e-12;

/// `c = a * b + beta * c` for strided (possibly transposed) row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every index reachable
    // through the given dimensions and strides.
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
            rsc,
            csc,
        );
    }
}

fn spatial_dims(t: &Tensor, what: &'static str) -> Result<[usize; 4]> {
    let dims = match t.shape() {
        &[n, c, h, w] => [n, c, h, w],
        &[n, c] => [n, c, 1, 1],
        s => {
            return Err(Error::shape(format!(
                "{what}: expected rank 2 or 4, got {s:?}"
            )))
        }
    };
    if dims[2] * dims[3] == 0 {
        return Err(Error::EmptySpatial(what));
    }
    Ok(dims)
}

fn expect_vector(t: &Tensor, len: usize, what: &str) -> Result<()> {
    if t.shape() != [len] {
        return Err(Error::shape(format!(
            "{what}: expected [{len}], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Batch statistics returned by [`Graph::batch_norm`] in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Graph {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(x).map(f);
        let y = out.clone();
        self.push(
            out,
            &[x],
            Box::new(move |g, p, _| {
                let dx =
                    Tensor::from_fn(g.shape(), |i| g.data()[i] * df(p[0].data()[i], y.data()[i]));
                vec![Some(dx)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g, p, need| {
                let ga = need[0].then(|| g.zip_map(p[1], |u, v| u * v).unwrap());
                let gb = need[1].then(|| g.zip_map(p[0], |u, v| u * v).unwrap());
                vec![ga, gb]
            }),
        ))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(
            out,
            &[x],
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * scale))]),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, s| s * (1.0 - s))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |v, _| sigmoid(v))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            out,
            &[x],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Empty("mean of empty tensor"));
        }
        let s = self.sum_all(x);
        Ok(self.affine(s, 1.0 / n as f64, 0.0))
    }

    /// 2-D convolution without bias. `x: [n, ci, h, w]`, `w: [co, ci, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.value(x).dims4()?;
        let [co, wci, kh, kw] = self.value(w).dims4()?;
        if wci != ci {
            return Err(Error::shape(format!(
                "conv2d: input has {ci} channels, kernel expects {wci}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d: kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geo = ConvGeometry {
            ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let kdim = ci * kh * kw;
        let pdim = oh * ow;
        let cols_n = n * pdim;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        // columns of every sample side by side: [kdim, n * pdim]
        let mut cols = vec![0.0; kdim * cols_n];
        for s in 0..n {
            geo.im2col(
                &xv[s * ci * h * wd..(s + 1) * ci * h * wd],
                &mut cols[s * pdim..],
                cols_n,
            );
        }
        let mut wide = vec![0.0; co * cols_n];
        gemm(
            co,
            kdim,
            cols_n,
            wv,
            (kdim as isize, 1),
            &cols,
            (cols_n as isize, 1),
            0.0,
            &mut wide,
            (cols_n as isize, 1),
        );
        let mut out = vec![0.0; n * co * pdim];
        for (o, src) in wide.chunks_exact(pdim).enumerate() {
            let (k, s) = (o / n, o % n);
            out[(s * co + k) * pdim..(s * co + k + 1) * pdim].copy_from_slice(src);
        }
        let out = Tensor::new(&[n, co, oh, ow], out)?;
        Ok(self.push(
            out,
            &[x, w],
            Box::new(move |g, p, need| {
                let gd = g.data();
                let wv = p[1].data();
                let mut gw = vec![0.0; co * cols_n];
                for (o, dst) in gw.chunks_exact_mut(pdim).enumerate() {
                    let (k, s) = (o / n, o % n);
                    dst.copy_from_slice(&gd[(s * co + k) * pdim..(s * co + k + 1) * pdim]);
                }
                let dw = need[1].then(|| {
                    let mut dw = vec![0.0; co * kdim];
                    // dW = g [co x nP] * cols^T [nP x K]
                    gemm(
                        co,
                        cols_n,
                        kdim,
                        &gw,
                        (cols_n as isize, 1),
                        &cols,
                        (1, cols_n as isize),
                        0.0,
                        &mut dw,
                        (kdim as isize, 1),
                    );
                    Tensor::new(&[co, ci, kh, kw], dw).unwrap()
                });
                let dx = need[0].then(|| {
                    // dcols = W^T [K x co] * g [co x nP]
                    let mut dcols = vec![0.0; kdim * cols_n];
                    gemm(
                        kdim,
                        co,
                        cols_n,
                        wv,
                        (1, kdim as isize),
                        &gw,
                        (cols_n as isize, 1),
                        0.0,
                        &mut dcols,
                        (cols_n as isize, 1),
                    );
                    let mut dx = vec![0.0; n * ci * h * wd];
                    for s in 0..n {
                        geo.col2im(
                            &dcols[s * pdim..],
                            cols_n,
                            &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd],
                        );
                    }
                    Tensor::new(&[n, ci, h, wd], dx).unwrap()
                });
                vec![dx, dw]
            }),
        ))
    }

    /// Per-(sample, channel) normalization over the spatial axes followed by a
    /// per-channel affine map: `gamma * (x - mu) / sqrt(var + eps) + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = spatial_dims(self.value(x), "instance_norm")?;
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(
                "instance_norm eps must be positive".into(),
            ));
        }
        expect_vector(self.value(gamma), c, "instance_norm gamma")?;
        expect_vector(self.value(beta), c, "instance_norm beta")?;
        let m = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n * c];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for k in 0..c {
                let base = (s * c + k) * m;
                let chunk = &xv[base..base + m];
                let mean = chunk.iter().sum::<f64>() / m as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[s * c + k] = is;
                for i in 0..m {
                    let xh = (chunk[i] - mean) * is;
                    xhat[base + i] = xh;
                    out[base + i] = gv[k] * xh + bv[k];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, need| {
                let gd = g.data();
                let gv = p[1].data();
                let mut dx = vec![0.0; gd.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for s in 0..n {
                    for k in 0..c {
                        let base = (s * c + k) * m;
                        let gs = &gd[base..base + m];
                        let xh = &xhat[base..base + m];
                        let sum_g: f64 = gs.iter().sum();
                        let sum_gx: f64 = gs.iter().zip(xh).map(|(a, b)| a * b).sum();
                        db[k] += sum_g;
                        dg[k] += sum_gx;
                        if need[0] {
                            let scale = gv[k] * inv_std[s * c + k];
                            let mg = sum_g / m as f64;
                            let mgx = sum_gx / m as f64;
                            for i in 0..m {
                                dx[base + i] = scale * (gs[i] - mg - xh[i] * mgx);
                            }
                        }
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(&shape, dx).unwrap()),
                    Some(Tensor::new(&[c], dg).unwrap()),
                    Some(Tensor::new(&[c], db).unwrap()),
                ]
            }),
        ))
    }

    /// Batch normalization using the statistics of the current batch (per
    /// channel, over batch and spatial axes). Accepts `[n, c, h, w]` or `[n, c]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let [n, c, h, w] = spatial_dims(self.value(x), "batch_norm")?;
        expect_vector(self.value(gamma), c, "batch_norm gamma")?;
        expect_vector(self.value(beta), c, "batch_norm beta")?;
        let m = h * w;
        let count = (n * m) as f64;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for k in 0..c {
                let base = (s * c + k) * m;
                mean[k] += xv[base..base + m].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= count);
        for s in 0..n {
            for k in 0..c {
                let base = (s * c + k) * m;
                var[k] += xv[base..base + m]
                    .iter()
                    .map(|v| (v - mean[k]) * (v - mean[k]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for k in 0..c {
                let base = (s * c + k) * m;
                for i in base..base + m {
                    xhat[i] = (xv[i] - mean[k]) * inv_std[k];
                    out[i] = gv[k] * xhat[i] + bv[k];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let stats = BatchStats { mean, var };
        let out = Tensor::new(&shape, out)?;
        let y = self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, need| {
                let gd = g.data();
                let gv = p[1].data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for s in 0..n {
                    for k in 0..c {
                        let base = (s * c + k) * m;
                        for i in base..base + m {
                            db[k] += gd[i];
                            dg[k] += gd[i] * xhat[i];
                        }
                    }
                }
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for s in 0..n {
                        for k in 0..c {
                            let base = (s * c + k) * m;
                            let scale = gv[k] * inv_std[k];
                            let mg = db[k] / count;
                            let mgx = dg[k] / count;
                            for i in base..base + m {
                                dx[i] = scale * (gd[i] - mg - xhat[i] * mgx);
                            }
                        }
                    }
                    Tensor::new(&shape, dx).unwrap()
                });
                vec![
                    dx,
                    Some(Tensor::new(&[c], dg).unwrap()),
                    Some(Tensor::new(&[c], db).unwrap()),
                ]
            }),
        );
        Ok((y, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let [_, c, h, w] = spatial_dims(self.value(x), "batch_norm")?;
        expect_vector(self.value(gamma), c, "batch_norm gamma")?;
        expect_vector(self.value(beta), c, "batch_norm beta")?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm running statistics"));
        }
        let m = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let xhat: Vec<f64> = (0..xv.len())
            .map(|i| {
                let k = (i / m) % c;
                (xv[i] - mean[k]) * inv_std[k]
            })
            .collect();
        let out: Vec<f64> = (0..xv.len())
            .map(|i| {
                let k = (i / m) % c;
                gv[k] * xhat[i] + bv[k]
            })
            .collect();
        let shape = self.value(x).shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, need| {
                let gd = g.data();
                let gv = p[1].data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dx = vec![0.0; gd.len()];
                for i in 0..gd.len() {
                    let k = (i / m) % c;
                    db[k] += gd[i];
                    dg[k] += gd[i] * xhat[i];
                    dx[i] = gd[i] * gv[k] * inv_std[k];
                }
                vec![
                    need[0].then(|| Tensor::new(&shape, dx).unwrap()),
                    Some(Tensor::new(&[c], dg).unwrap()),
                    Some(Tensor::new(&[c], db).unwrap()),
                ]
            }),
        ))
    }

    /// Spatial mean per (sample, channel): `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let m = h * w;
        if m == 0 {
            return Err(Error::EmptySpatial("global_avg_pool"));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(m)
            .map(|ch| ch.iter().sum::<f64>() / m as f64)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _| {
                let inv = 1.0 / m as f64;
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat(v * inv).take(m))
                    .collect();
                vec![Some(Tensor::new(&[n, c, h, w], dx).unwrap())]
            }),
        ))
    }

    /// Fully-connected map `y = x W^T (+ b)` with `x: [n, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let [n, din] = self.value(x).dims2()?;
        let [dout, win] = self.value(w).dims2()?;
        if win != din {
            return Err(Error::shape(format!(
                "linear: input width {din}, weight expects {win}"
            )));
        }
        if let Some(b) = bias {
            expect_vector(self.value(b), dout, "linear bias")?;
        }
        let mut out = vec![0.0; n * dout];
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            0.0,
            &mut out,
            (dout as isize, 1),
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, b) in row.iter_mut().zip(bv) {
                    *o += b;
                }
            }
        }
        let out = Tensor::new(&[n, dout], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |g, p, need| {
                let gd = g.data();
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        gd,
                        (dout as isize, 1),
                        p[1].data(),
                        (din as isize, 1),
                        0.0,
                        &mut dx,
                        (din as isize, 1),
                    );
                    Tensor::new(&[n, din], dx).unwrap()
                });
                let dw = need[1].then(|| {
                    let mut dw = vec![0.0; dout * din];
                    gemm(
                        dout,
                        n,
                        din,
                        gd,
                        (1, dout as isize),
                        p[0].data(),
                        (din as isize, 1),
                        0.0,
                        &mut dw,
                        (din as isize, 1),
                    );
                    Tensor::new(&[dout, din], dw).unwrap()
                });
                let mut grads = vec![dx, dw];
                if p.len() == 3 {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    grads.push(Some(Tensor::new(&[dout], db).unwrap()));
                }
                grads
            }),
        ))
    }

    /// Multiplies every spatial map `x[s, k]` by `a[s, k]`.
    pub fn scale_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.value(a).shape() != [n, c] {
            return Err(Error::shape(format!(
                "scale_channels: gate {:?} for feature map {:?}",
                self.value(a).shape(),
                self.value(x).shape()
            )));
        }
        let m = h * w;
        let av = self.value(a).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * av[i / m])
            .collect();
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            &[x, a],
            Box::new(move |g, p, need| {
                let gd = g.data();
                let dx = need[0].then(|| {
                    let av = p[1].data();
                    Tensor::from_fn(&[n, c, h, w], |i| gd[i] * av[i / m])
                });
                let da = need[1].then(|| {
                    let xv = p[0].data();
                    Tensor::from_fn(&[n, c], |j| {
                        (j * m..(j + 1) * m).map(|i| gd[i] * xv[i]).sum()
                    })
                });
                vec![dx, da]
            }),
        ))
    }

    /// Selects rows of a `[n, d]` tensor.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let [n, d] = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {n} rows"
            )));
        }
        let xv = self.value(x);
        let data: Vec<f64> = idx.iter().flat_map(|&i| xv.row(i).to_vec()).collect();
        let out = Tensor::new(&[idx.len(), d], data)?;
        let idx = idx.to_vec();
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&[n, d]);
                for (r, &i) in idx.iter().enumerate() {
                    let src = g.row(r);
                    for (o, v) in dx.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Row-wise cosine distance `0.5 - x.y / (2 |x| |y|)` with norm guards,
    /// `[m, d] x [m, d] -> [m]`.
    pub fn row_cosine_distance(&mut self, x: Var, y: Var) -> Result<Var> {
        let [m, d] = self.value(x).dims2()?;
        self.value(x).expect_same_shape(self.value(y))?;
        let mut out = vec![0.0; m];
        let (xv, yv) = (self.value(x), self.value(y));
        for (r, o) in out.iter_mut().enumerate() {
            let (a, b) = (xv.row(r), yv.row(r));
            let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_GUARD;
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_GUARD;
            *o = 0.5 - dot / (2.0 * na * nb);
        }
        let out = Tensor::new(&[m], out)?;
        Ok(self.push(
            out,
            &[x, y],
            Box::new(move |g, p, need| {
                let mut dx = Tensor::zeros(&[m, d]);
                let mut dy = Tensor::zeros(&[m, d]);
                for r in 0..m {
                    let (a, b) = (p[0].row(r), p[1].row(r));
                    let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                    let ra = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let rb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (na, nb) = (ra + NORM_GUARD, rb + NORM_GUARD);
                    // d = 0.5 - cos/2, cos = dot / (na nb)
                    let gr = -0.5 * g.data()[r];
                    for i in 0..d {
                        let dna = if ra > 0.0 { a[i] / ra } else { 0.0 };
                        let dnb = if rb > 0.0 { b[i] / rb } else { 0.0 };
                        dx.data_mut()[r * d + i] =
                            gr * (b[i] / (na * nb) - dot * dna / (na * na * nb));
                        dy.data_mut()[r * d + i] =
                            gr * (a[i] / (na * nb) - dot * dnb / (na * nb * nb));
                    }
                }
                vec![need[0].then_some(dx), need[1].then_some(dy)]
            }),
        ))
    }

    /// Row-wise Euclidean distance `sqrt(|x - y|^2 + EUCLID_EPS)`, `[m, d] -> [m]`.
    pub fn row_euclidean(&mut self, x: Var, y: Var) -> Result<Var> {
        let [m, d] = self.value(x).dims2()?;
        self.value(x).expect_same_shape(self.value(y))?;
        let (xv, yv) = (self.value(x), self.value(y));
        let dist: Vec<f64> = (0..m)
            .map(|r| {
                let sq: f64 = xv
                    .row(r)
                    .iter()
                    .zip(yv.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (sq + EUCLID_EPS).sqrt()
            })
            .collect();
        let out = Tensor::new(&[m], dist.clone())?;
        Ok(self.push(
            out,
            &[x, y],
            Box::new(move |g, p, need| {
                let mut dx = Tensor::zeros(&[m, d]);
                for r in 0..m {
                    let scale = g.data()[r] / dist[r];
                    for i in 0..d {
                        dx.data_mut()[r * d + i] = scale * (p[0].row(r)[i] - p[1].row(r)[i]);
                    }
                }
                let dy = need[1].then(|| dx.map(|v| -v));
                vec![need[0].then_some(dx), dy]
            }),
        ))
    }

    /// Mean cross-entropy of `logits: [n, k]` against label-smoothed targets
    /// (`1 - eps` on the true class, `eps / (k - 1)` elsewhere).
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        eps: f64,
    ) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::shape(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::Empty("cross-entropy batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing {eps} outside [0, 1)"
            )));
        }
        let targets = smoothed_targets(labels, k, eps);
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = lv.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..k {
                let logp = row[j] - lse;
                probs[r * k + j] = logp.exp();
                loss -= targets[r * k + j] * logp;
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            out,
            &[logits],
            Box::new(move |g, _, _| {
                let scale = g.data()[0] / n as f64;
                let d = Tensor::from_fn(&[n, k], |i| scale * (probs[i] - targets[i]));
                vec![Some(d)]
            }),
        ))
    }
}

pub(crate) fn smoothed_targets(labels: &[usize], k: usize, eps: f64) -> Vec<f64> {
    let (on, off) = if k > 1 {
        (1.0 - eps, eps / (k - 1) as f64)
    } else {
        (1.0, 0.0)
    };
    let mut t = vec![off; labels.len() * k];
    for (r, &l) in labels.iter().enumerate() {
        t[r * k + l] = on;
    }
    t
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    /// Output columns `ox` whose input column lies inside the image for tap `kx`.
    fn valid_ox(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = self
            .pad
            .saturating_sub(kx)
            .div_ceil(self.stride)
            .min(self.ow);
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad)
            .filter(|&iy| iy < self.h)
    }

    /// Writes the columns of one sample; row `r` starts at `col[r * ld]`.
    fn im2col(&self, x: &[f64], col: &mut [f64], ld: usize) {
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * ld;
                    let span = self.valid_ox(kx);
                    for oy in 0..self.oh {
                        let dst = &mut col[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let Some(iy) = self.input_row(oy, ky) else {
                            dst.fill(0.0);
                            continue;
                        };
                        let src = &x[(c * self.h + iy) * self.w..];
                        dst[..span.start].fill(0.0);
                        dst[span.end..].fill(0.0);
                        for ox in span.clone() {
                            dst[ox] = src[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], ld: usize, dx: &mut [f64]) {
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * ld;
                    let span = self.valid_ox(kx);
                    for oy in 0..self.oh {
                        let Some(iy) = self.input_row(oy, ky) else {
                            continue;
                        };
                        let src = &col[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let dst = &mut dx[(c * self.h + iy) * self.w..];
                        for ox in span.clone() {
                            dst[ox * self.stride + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}
