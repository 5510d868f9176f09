//! Differentiable operations on [`Var`].

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use crate::error::{contract, shape_err, Result};
use crate::tape::Var;
use crate::tensor::{numel_of, Tensor};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Applies `f(a_fibre, b_fibre, out_fibre)` to matching 1-D fibres along `axis`.
fn zip_fibres(a: &Tensor, b: &Tensor, axis: usize, f: impl Fn(&[f64], &[f64], &mut [f64])) -> Tensor {
    let shape = a.shape();
    let ext = shape[axis];
    let inner = numel_of(&shape[axis + 1..]);
    let outer = numel_of(&shape[..axis]);
    let mut out = vec![0.0; a.numel()];
    let (ad, bd) = (a.data(), b.data());
    let mut ab = vec![0.0; ext];
    let mut bb = vec![0.0; ext];
    let mut ob = vec![0.0; ext];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..ext {
                let idx = (o * ext + k) * inner + i;
                ab[k] = ad[idx];
                bb[k] = bd[idx];
            }
            f(&ab, &bb, &mut ob);
            for k in 0..ext {
                out[(o * ext + k) * inner + i] = ob[k];
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

impl Var {
    fn unary(&self, value: Tensor, grad: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static) -> Var {
        let x = self.value().clone();
        let y = value.clone();
        Var::record(value, &[self], move |g, _| vec![Some(grad(g, &x, &y))])
    }

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(&Tensor, &Tensor, &Tensor, &[bool]) -> (Option<Tensor>, Option<Tensor>) + 'static,
    ) -> Result<Var> {
        let value = self.value().broadcast_with(other.value(), op, f)?;
        let a = self.value().clone();
        let b = other.value().clone();
        Ok(Var::record(value, &[self, other], move |g, needs| {
            let (ga, gb) = grads(g, &a, &b, needs);
            vec![ga.map(|t| t.reduce_to(a.shape())), gb.map(|t| t.reduce_to(b.shape()))]
        }))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, |g, _, _, _| (Some(g.clone()), Some(g.clone())))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _, _| (Some(g.clone()), Some(g.scale(-1.0))))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b, needs| {
            (
                needs[0].then(|| g.mul(b).expect("broadcast")),
                needs[1].then(|| g.mul(a).expect("broadcast")),
            )
        })
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, "div", |a, b| a / b, |g, a, b, needs| {
            let ga = needs[0].then(|| g.broadcast_with(b, "div", |g, b| g / b).expect("broadcast"));
            let gb = needs[1].then(|| {
                let ab = a.broadcast_with(b, "div", |a, b| -a / (b * b)).expect("broadcast");
                g.mul(&ab).expect("broadcast")
            });
            (ga, gb)
        })
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Var) -> Result<Var> {
        self.binary(other, "maximum", f64::max, |g, a, b, _| {
            let ma = a.broadcast_with(b, "maximum", |a, b| if a >= b { 1.0 } else { 0.0 }).expect("broadcast");
            let ga = g.mul(&ma).expect("broadcast");
            let gb = g.sub(&ga).expect("broadcast");
            (Some(ga), Some(gb))
        })
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Var) -> Result<Var> {
        self.binary(other, "minimum", f64::min, |g, a, b, _| {
            let ma = a.broadcast_with(b, "minimum", |a, b| if a <= b { 1.0 } else { 0.0 }).expect("broadcast");
            let ga = g.mul(&ma).expect("broadcast");
            let gb = g.sub(&ga).expect("broadcast");
            (Some(ga), Some(gb))
        })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(self.value().scale(c), move |g, _, _| g.scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(self.value().map(|v| v + c), |g, _, _| g.clone())
    }

    pub fn exp(&self) -> Var {
        self.unary(self.value().map(f64::exp), |g, _, y| g.zip_map(y, |g, y| g * y).expect("shape"))
    }

    pub fn ln(&self) -> Var {
        self.unary(self.value().map(f64::ln), |g, x, _| g.zip_map(x, |g, x| g / x).expect("shape"))
    }

    pub fn sqrt(&self) -> Var {
        self.unary(self.value().map(f64::sqrt), |g, _, y| g.zip_map(y, |g, y| g / (2.0 * y)).expect("shape"))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(self.value().map(sigmoid_scalar), |g, _, y| {
            g.zip_map(y, |g, y| g * y * (1.0 - y)).expect("shape")
        })
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&self) -> Var {
        self.unary(self.value().map(softplus_scalar), |g, x, _| {
            g.zip_map(x, |g, x| g * sigmoid_scalar(x)).expect("shape")
        })
    }

    pub fn relu(&self) -> Var {
        self.unary(self.value().map(|v| v.max(0.0)), |g, x, _| {
            g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }).expect("shape")
        })
    }

    /// Exact GELU, `x·Φ(x)` with the erf-based normal CDF.
    pub fn gelu(&self) -> Var {
        self.unary(self.value().map(gelu_scalar), |g, x, _| {
            g.zip_map(x, |g, x| g * gelu_grad_scalar(x)).expect("shape")
        })
    }

    /// Batched `self · other`; `other` may be 2-D and shared across the batch.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.matmul_impl(other, false)
    }

    /// Batched `self · otherᵀ` (transposing the trailing two axes of `other`).
    pub fn matmul_t(&self, other: &Var) -> Result<Var> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var, tb: bool) -> Result<Var> {
        let value = self.value().matmul_ex(other.value(), false, tb)?;
        let a = self.value().clone();
        let b = other.value().clone();
        Ok(Var::record(value, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| g.matmul_ex(&b, false, !tb).expect("matmul grad"));
            let gb = needs[1].then(|| {
                let shared = b.ndim() == 2 && a.ndim() > 2;
                let (a2, g2) = if shared {
                    let k = a.shape()[a.ndim() - 1];
                    let n = g.shape()[g.ndim() - 1];
                    (
                        a.reshape(vec![a.numel() / k, k]).expect("flatten"),
                        g.reshape(vec![g.numel() / n, n]).expect("flatten"),
                    )
                } else {
                    (a.clone(), g.clone())
                };
                if tb {
                    g2.matmul_ex(&a2, true, false).expect("matmul grad")
                } else {
                    a2.matmul_ex(&g2, true, false).expect("matmul grad")
                }
            });
            vec![ga, gb]
        }))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(Var::record(value, &[self], move |g, _| vec![Some(g.reshape(orig.clone()).expect("reshape"))]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let value = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(Var::record(value, &[self], move |g, _| vec![Some(g.permute(&inverse).expect("permute"))]))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&self) -> Result<Var> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(shape_err("transpose", self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat(&values, axis)?;
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Var::record(value, parts, move |g, needs| {
            let mut start = 0;
            lens.iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let s = start;
                    start += len;
                    need.then(|| g.narrow(axis, s, len).expect("narrow"))
                })
                .collect()
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value().narrow(axis, start, len)?;
        let shape = self.shape().to_vec();
        Ok(Var::record(value, &[self], move |g, _| {
            let outer = numel_of(&shape[..axis]);
            let inner = numel_of(&shape[axis + 1..]);
            let ext = shape[axis];
            let mut out = vec![0.0; numel_of(&shape)];
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), out))]
        }))
    }

    pub fn sum_all(&self) -> Var {
        let value = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        Var::record(value, &[self], move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))])
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let value = self.value().sum_axis(axis)?;
        let ext = self.shape()[axis];
        Ok(Var::record(value, &[self], move |g, _| vec![Some(g.expand_axis(axis, ext).expect("expand"))]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let ext = *self.shape().get(axis).ok_or_else(|| shape_err("mean_axis", self.shape(), &[axis]))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / ext as f64))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let value = self.value().softmax(axis)?;
        let y = value.clone();
        Ok(Var::record(value, &[self], move |g, _| {
            vec![Some(zip_fibres(&y, g, axis, |y, g, out| {
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                for ((o, &y), &g) in out.iter_mut().zip(y).zip(g) {
                    *o = y * (g - dot);
                }
            }))]
        }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var> {
        let value = self.value().log_softmax(axis)?;
        let y = value.clone();
        Ok(Var::record(value, &[self], move |g, _| {
            vec![Some(zip_fibres(&y, g, axis, |y, g, out| {
                let total: f64 = g.iter().sum();
                for ((o, &y), &g) in out.iter_mut().zip(y).zip(g) {
                    *o = g - y.exp() * total;
                }
            }))]
        }))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of the last-axis extent).
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let d = *self.shape().last().ok_or_else(|| shape_err("layer_norm", self.shape(), &[]))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(shape_err("layer_norm", self.shape(), gain.shape()));
        }
        if eps <= 0.0 {
            return Err(contract("layer_norm", "eps must be positive"));
        }
        let rows = self.value().numel() / d.max(1);
        let x = self.value().data();
        let gv = gain.value().data();
        let bv = bias.value().data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::from_parts(self.shape().to_vec(), out);
        let gain_v = gain.value().clone();
        let shape = self.shape().to_vec();
        let xhat = Arc::new(xhat);
        Ok(Var::record(value, &[self, gain, bias], move |g, needs| {
            let gd = g.data();
            let gw = gain_v.data();
            let gx = needs[0].then(|| {
                let mut dx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gd[r * d + j] * gw[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gd[r * d + j] * gw[j];
                        dx[r * d + j] = inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            let ggain = needs[1].then(|| {
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += gd[r * d + j] * xhat[r * d + j];
                    }
                }
                Tensor::from_parts(vec![d], dg)
            });
            let gbias = needs[2].then(|| g.reduce_to(&[d]));
            vec![gx, ggain, gbias]
        }))
    }

    /// Selects rows along axis 0; `None` entries produce zero rows.
    pub fn gather_rows(&self, index: &[Option<usize>]) -> Result<Var> {
        let value = self.value().gather_rows(index)?;
        let rows = self.shape()[0];
        let index: Arc<[Option<usize>]> = index.into();
        Ok(Var::record(value, &[self], move |g, _| vec![Some(g.scatter_add_rows(&index, rows))]))
    }

    /// Selects rows along axis 0 by plain indices.
    pub fn select_rows(&self, index: &[usize]) -> Result<Var> {
        let idx: Vec<Option<usize>> = index.iter().map(|&i| Some(i)).collect();
        self.gather_rows(&idx)
    }
}
