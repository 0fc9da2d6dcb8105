//! Differentiable operations: forward kernels as `Tape` methods, adjoints in
//! [`backward`].

use std::sync::Arc;

use super::tape::{GradBuf, Node, Op};
use super::{MatMut, MatRef, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [m, n] => Ok((m, n)),
        _ => Err(shape_err(op, shape, &[0, 0])),
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `tanh` through a single `exp`, which is markedly cheaper than libm's.
#[inline]
fn fast_tanh<T: Scalar>(u: T) -> T {
    let e = (-T::of(2.0) * u.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Sampling layout for multi-scale deformable attention over frame-stacked
/// token matrices. Each frame contributes `tokens_per_frame` rows: level 0
/// first, each level flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformGeometry {
    pub levels: Vec<(usize, usize)>,
    pub level_start: Vec<usize>,
    pub tokens_per_frame: usize,
    pub frames: usize,
    pub heads: usize,
    pub points: usize,
    /// Normalized (x, y) reference point of every token within a frame.
    pub reference: Vec<(f64, f64)>,
}

impl DeformGeometry {
    pub fn new(levels: &[(usize, usize)], frames: usize, heads: usize, points: usize) -> Self {
        let mut level_start = Vec::with_capacity(levels.len());
        let mut reference = Vec::new();
        let mut acc = 0;
        for &(h, w) in levels {
            level_start.push(acc);
            acc += h * w;
            for i in 0..h {
                for j in 0..w {
                    reference.push(((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64));
                }
            }
        }
        DeformGeometry {
            levels: levels.to_vec(),
            level_start,
            tokens_per_frame: acc,
            frames,
            heads,
            points,
            reference,
        }
    }

    /// Columns of the offset input: heads × levels × points × (dx, dy).
    pub fn offset_cols(&self) -> usize {
        self.heads * self.levels.len() * self.points * 2
    }

    /// Columns of the attention-weight input: heads × levels × points.
    pub fn weight_cols(&self) -> usize {
        self.heads * self.levels.len() * self.points
    }
}

/// Bilinear tap positions and weights for a border-clamped sample.
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
    /// d(sample)/dx = Σ dx_w[i] * v[idx[i]]; zero when clamped.
    dx_w: [f64; 4],
    dy_w: [f64; 4],
}

fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let (xc, x_in) = if x <= 0.0 {
        (0.0, false)
    } else if x >= xmax {
        (xmax, false)
    } else {
        (x, true)
    };
    let (yc, y_in) = if y <= 0.0 {
        (0.0, false)
    } else if y >= ymax {
        (ymax, false)
    } else {
        (y, true)
    };
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
    let wts = [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx];
    let dx_w = if x_in {
        [-(1.0 - fy), 1.0 - fy, -fy, fy]
    } else {
        [0.0; 4]
    };
    let dy_w = if y_in {
        [-(1.0 - fx), -fx, 1.0 - fx, fx]
    } else {
        [0.0; 4]
    };
    Taps {
        idx,
        w: wts,
        dx_w,
        dy_w,
    }
}

impl<T: Scalar> Tape<T> {
    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ra, ca) = dims2("matmul", &sa)?;
        let (rb, cb) = dims2("matmul", &sb)?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let opa = if ta {
                MatRef::dense_t(av, m, k)
            } else {
                MatRef::dense(av, m, k)
            };
            let opb = if tb {
                MatRef::dense_t(bv, k, n)
            } else {
                MatRef::dense(bv, k, n)
            };
            T::gemm(opa, opb, false, MatMut::dense(&mut out, m, n));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias` (length = last axis) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            row.iter_mut().zip(b).for_each(|(r, &bb)| *r += bb);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow { x, bias }, rg))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = dims2("scale_rows", self.shape(x))?;
        if self.value(s).numel() != m {
            return Err(shape_err("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (i, row) in data.chunks_mut(n.max(1)).enumerate().take(m) {
            row.iter_mut().for_each(|r| *r *= sv[i]);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::new([m, n], data)?, Op::ScaleRows { x, s }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().map(|&v| v * c).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (k, c) = (T::of(GELU_K), T::of(GELU_C));
        let half = T::of(0.5);
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + fast_tanh(k * (v + c * v * v * v))))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * n + i) * inner + r;
                let mut max = T::neg_infinity();
                for i in 0..n {
                    max = max.max(src[at(i)]);
                }
                let mut sum = T::zero();
                for i in 0..n {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..n {
                    out[at(i)] = out[at(i)] / sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::of(eps);
        let inv_n = T::of(1.0 / cols as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = self.value(x).data();
        let rows = src.len() / cols.max(1);
        let mut out = vec![T::zero(); src.len()];
        let mut stats = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out[r * cols + j] = (v - mean) * rstd * g[j] + b[j];
            }
            stats.push(mean);
            stats.push(rstd);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention with `heads` heads over already projected
    /// queries, keys and values. Rows are split into `blocks` equal groups and
    /// query group `b` only attends to key group `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: usize,
    ) -> Result<Var> {
        let (nq, c) = dims2("attention", self.shape(q))?;
        let (nk, ck) = dims2("attention", self.shape(k))?;
        if ck != c || self.shape(v) != self.shape(k) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "channels {c} not divisible by {heads} heads"
            )));
        }
        if blocks == 0 || nq % blocks != 0 || nk % blocks != 0 {
            return Err(shape_err("attention blocks", &[nq, nk], &[blocks]));
        }
        let d = c / heads;
        let (bq, bk) = (nq / blocks, nk / blocks);
        let scale = T::of(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); blocks * heads * bq * bk];
        let mut out = vec![T::zero(); nq * c];
        for blk in 0..blocks {
            for h in 0..heads {
                let p = &mut probs[(blk * heads + h) * bq * bk..][..bq * bk];
                T::gemm(
                    MatRef::block(qd, c, blk * bq, bq, h * d, d),
                    MatRef::block(kd, c, blk * bk, bk, h * d, d).t(),
                    false,
                    MatMut::dense(p, bq, bk),
                );
                for row in p.chunks_mut(bk.max(1)) {
                    let mut max = T::neg_infinity();
                    for s in row.iter_mut() {
                        *s *= scale;
                        max = max.max(*s);
                    }
                    let mut sum = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    row.iter_mut().for_each(|s| *s = *s / sum);
                }
                T::gemm(
                    MatRef::dense(p, bq, bk),
                    MatRef::block(vd, c, blk * bk, bk, h * d, d),
                    false,
                    MatMut::block(&mut out, c, blk * bq, bq, h * d, d),
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new([nq, c], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            },
            rg,
        ))
    }

    /// Multi-scale deformable sampling. `value` holds per-frame stacked tokens
    /// (`frames * tokens_per_frame` rows, `C` columns); every query token
    /// gathers `points` bilinear samples per level and head around its
    /// reference point, displaced by `offsets` (in level pixels), and mixes
    /// them with `weights`. Sampling clamps to the map border.
    pub fn deform_sample(
        &mut self,
        value: Var,
        offsets: Var,
        weights: Var,
        geom: Arc<DeformGeometry>,
    ) -> Result<Var> {
        let (rows, c) = dims2("deform_sample", self.shape(value))?;
        let s = geom.tokens_per_frame;
        if rows != geom.frames * s {
            return Err(shape_err("deform_sample", &[rows, c], &[geom.frames, s]));
        }
        if geom.heads == 0 || c % geom.heads != 0 {
            return Err(Error::Config(format!(
                "channels {c} not divisible by {} heads",
                geom.heads
            )));
        }
        if self.shape(offsets) != [rows, geom.offset_cols()] {
            return Err(shape_err(
                "deform_sample offsets",
                self.shape(offsets),
                &[rows, geom.offset_cols()],
            ));
        }
        if self.shape(weights) != [rows, geom.weight_cols()] {
            return Err(shape_err(
                "deform_sample weights",
                self.shape(weights),
                &[rows, geom.weight_cols()],
            ));
        }
        let d = c / geom.heads;
        let nl = geom.levels.len();
        let (vd, od, wd) = (
            self.value(value).data(),
            self.value(offsets).data(),
            self.value(weights).data(),
        );
        let mut out = vec![T::zero(); rows * c];
        for f in 0..geom.frames {
            for tok in 0..s {
                let row = f * s + tok;
                let (rx, ry) = geom.reference[tok];
                let orow = &od[row * geom.offset_cols()..][..geom.offset_cols()];
                let wrow = &wd[row * geom.weight_cols()..][..geom.weight_cols()];
                let dst = &mut out[row * c..(row + 1) * c];
                for h in 0..geom.heads {
                    for (l, &(lh, lw)) in geom.levels.iter().enumerate() {
                        let base = (f * s + geom.level_start[l]) * c + h * d;
                        for p in 0..geom.points {
                            let wi = (h * nl + l) * geom.points + p;
                            let a = wrow[wi];
                            let x = rx * lw as f64 + orow[2 * wi].as_f64() - 0.5;
                            let y = ry * lh as f64 + orow[2 * wi + 1].as_f64() - 0.5;
                            let taps = bilinear_taps(x, y, lh, lw);
                            for t in 0..4 {
                                let coef = a * T::of(taps.w[t]);
                                if coef == T::zero() {
                                    continue;
                                }
                                let src = &vd[base + taps.idx[t] * c..][..d];
                                for (o, &v) in dst[h * d..(h + 1) * d].iter_mut().zip(src) {
                                    *o += coef * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[value, offsets, weights]);
        Ok(self.push(
            Tensor::new([rows, c], out)?,
            Op::DeformSample {
                value,
                offsets,
                weights,
                geom,
            },
            rg,
        ))
    }

    /// Gathers rows of a 2-D tensor; indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2("select_rows", self.shape(x))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err("select_rows", &[m, n], &[bad]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new([idx.len(), n], data)?,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous row range `[start, start + len)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select_rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Validation("concat_rows of nothing".into()));
        };
        let n = dims2("concat_rows", self.shape(first))?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = dims2("concat_rows", self.shape(p))?;
            if pn != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new([m, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Validation("concat_cols of nothing".into()));
        };
        let m = dims2("concat_cols", self.shape(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2("concat_cols", self.shape(p))?;
            if pm != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new([m, n], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mean(x), rg)
    }

    /// Column-wise mean of an `m×n` matrix, producing `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("mean_rows", self.shape(x))?;
        let mut acc = vec![T::zero(); n];
        for row in self.value(x).data().chunks(n.max(1)) {
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        let inv = T::of(1.0 / m.max(1) as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([n], acc)?, Op::MeanRows(x), rg))
    }

    /// Per-row mean binary cross-entropy between `sigmoid(logits)` and
    /// constant `targets`.
    pub fn bce_rows(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let (m, p) = dims2("bce_rows", self.shape(logits))?;
        if targets.shape() != [m, p] {
            return Err(shape_err("bce_rows", &[m, p], targets.shape()));
        }
        let x = self.value(logits).data();
        let t = targets.data();
        let inv = T::of(1.0 / p.max(1) as f64);
        let out: Vec<T> = (0..m)
            .map(|i| {
                (0..p)
                    .map(|j| {
                        let (xv, tv) = (x[i * p + j], t[i * p + j]);
                        xv.max(T::zero()) - xv * tv + (T::one() + (-xv.abs()).exp()).ln()
                    })
                    .sum::<T>()
                    * inv
            })
            .collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new([m], out)?,
            Op::BceRows {
                logits,
                targets: t.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row soft dice loss `1 - (2Σpt + 1) / (Σp + Σt + 1)` with
    /// `p = sigmoid(logits)`.
    pub fn dice_rows(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let (m, p) = dims2("dice_rows", self.shape(logits))?;
        if targets.shape() != [m, p] {
            return Err(shape_err("dice_rows", &[m, p], targets.shape()));
        }
        let x = self.value(logits).data();
        let t = targets.data();
        let out: Vec<T> = (0..m)
            .map(|i| {
                let (num, den) = dice_terms(&x[i * p..(i + 1) * p], &t[i * p..(i + 1) * p]);
                T::one() - num / den
            })
            .collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new([m], out)?,
            Op::DiceRows {
                logits,
                targets: t.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise cosine similarity; rows with zero norm give 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2("cosine_rows", self.shape(a))?;
        if self.shape(b) != [m, n] {
            return Err(shape_err("cosine_rows", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = (0..m)
            .map(|i| cosine_parts(&ad[i * n..(i + 1) * n], &bd[i * n..(i + 1) * n]).0)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m], out)?, Op::CosineRows { a, b }, rg))
    }

    /// Sum of several scalars, each multiplied by a constant weight.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Validation("weighted_sum of nothing".into()))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dice_terms<T: Scalar>(x: &[T], t: &[T]) -> (T, T) {
    let mut pt = T::zero();
    let mut ps = T::zero();
    let mut ts = T::zero();
    for (&xv, &tv) in x.iter().zip(t) {
        let p = sigmoid(xv);
        pt += p * tv;
        ps += p;
        ts += tv;
    }
    (T::of(2.0) * pt + T::one(), ps + ts + T::one())
}

/// (cosine, |a|, |b|)
fn cosine_parts<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        (T::zero(), na, nb)
    } else {
        (dot / (na * nb), na, nb)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Propagates the adjoint `g` of `node` to its inputs.
pub(crate) fn backward<T: Scalar>(tape: &Tape<T>, node: &Node<T>, g: &[T], buf: &mut GradBuf<T>) {
    let val = |v: Var| tape.value(v);
    let numel = |v: Var| tape.value(v).numel();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(a).data(), val(b).data());
            let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
            let k = if ta { val(a).shape()[0] } else { val(a).shape()[1] };
            let opa = if ta {
                MatRef::dense_t(av, m, k)
            } else {
                MatRef::dense(av, m, k)
            };
            let opb = if tb {
                MatRef::dense_t(bv, k, n)
            } else {
                MatRef::dense(bv, k, n)
            };
            let gm = MatRef::dense(g, m, n);
            if let Some(da) = buf.slot(a, m * k) {
                if ta {
                    T::gemm(opb, gm.t(), true, MatMut::dense(da, k, m));
                } else {
                    T::gemm(gm, opb.t(), true, MatMut::dense(da, m, k));
                }
            }
            if let Some(db) = buf.slot(b, k * n) {
                if tb {
                    T::gemm(gm.t(), opa, true, MatMut::dense(db, n, k));
                } else {
                    T::gemm(opa.t(), gm, true, MatMut::dense(db, k, n));
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(da) = buf.slot(a, g.len()) {
                add_into(da, g.iter().copied());
            }
            if let Some(db) = buf.slot(b, g.len()) {
                add_into(db, g.iter().copied());
            }
        }
        &Op::Sub(a, b) => {
            if let Some(da) = buf.slot(a, g.len()) {
                add_into(da, g.iter().copied());
            }
            if let Some(db) = buf.slot(b, g.len()) {
                add_into(db, g.iter().map(|&x| -x));
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            if let Some(da) = buf.slot(a, g.len()) {
                add_into(da, g.iter().zip(bv).map(|(&gg, &y)| gg * y));
            }
            if let Some(db) = buf.slot(b, g.len()) {
                add_into(db, g.iter().zip(av).map(|(&gg, &x)| gg * x));
            }
        }
        &Op::AddRow { x, bias } => {
            let cols = numel(bias);
            if let Some(dx) = buf.slot(x, g.len()) {
                add_into(dx, g.iter().copied());
            }
            if let Some(db) = buf.slot(bias, cols) {
                for row in g.chunks(cols.max(1)) {
                    add_into(db, row.iter().copied());
                }
            }
        }
        &Op::ScaleRows { x, s } => {
            let m = numel(s);
            let n = g.len() / m.max(1);
            let (xv, sv) = (val(x).data(), val(s).data());
            if let Some(dx) = buf.slot(x, g.len()) {
                for i in 0..m {
                    add_into(&mut dx[i * n..(i + 1) * n], g[i * n..(i + 1) * n].iter().map(|&gg| gg * sv[i]));
                }
            }
            if let Some(ds) = buf.slot(s, m) {
                for i in 0..m {
                    ds[i] += g[i * n..(i + 1) * n]
                        .iter()
                        .zip(&xv[i * n..(i + 1) * n])
                        .map(|(&gg, &xx)| gg * xx)
                        .sum::<T>();
                }
            }
        }
        &Op::Scale { x, c } => {
            if let Some(dx) = buf.slot(x, g.len()) {
                add_into(dx, g.iter().map(|&gg| gg * c));
            }
        }
        &Op::Gelu(x) => {
            let (k, c) = (T::of(GELU_K), T::of(GELU_C));
            let half = T::of(0.5);
            let xv = val(x).data();
            if let Some(dx) = buf.slot(x, g.len()) {
                add_into(
                    dx,
                    g.iter().zip(xv).map(|(&gg, &v)| {
                        let th = fast_tanh(k * (v + c * v * v * v));
                        let du = k * (T::one() + T::of(3.0) * c * v * v);
                        gg * (half * (T::one() + th) + half * v * (T::one() - th * th) * du)
                    }),
                );
            }
        }
        &Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(dx) = buf.slot(x, g.len()) {
                add_into(dx, g.iter().zip(y).map(|(&gg, &s)| gg * s * (T::one() - s)));
            }
        }
        &Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis(node.value.shape(), axis);
            if let Some(dx) = buf.slot(x, g.len()) {
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + r;
                        let dot: T = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            dx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let cols = numel(gain);
            let rows = g.len() / cols.max(1);
            let xv = val(x).data();
            let gv = val(gain).data();
            let xhat = |r: usize, j: usize| (xv[r * cols + j] - stats[2 * r]) * stats[2 * r + 1];
            if let Some(dgain) = buf.slot(gain, cols) {
                for r in 0..rows {
                    for j in 0..cols {
                        dgain[j] += g[r * cols + j] * xhat(r, j);
                    }
                }
            }
            if let Some(dbias) = buf.slot(bias, cols) {
                for row in g.chunks(cols.max(1)) {
                    add_into(dbias, row.iter().copied());
                }
            }
            if let Some(dx) = buf.slot(x, g.len()) {
                let inv_n = T::of(1.0 / cols as f64);
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..cols {
                        dxhat[j] = g[r * cols + j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat(r, j);
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    let rstd = stats[2 * r + 1];
                    for j in 0..cols {
                        dx[r * cols + j] += rstd * (dxhat[j] - m1 - xhat(r, j) * m2);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            blocks,
            probs,
        } => {
            attention_backward(tape, (*q, *k, *v), *heads, *blocks, probs, g, buf);
        }
        Op::DeformSample {
            value,
            offsets,
            weights,
            geom,
        } => {
            deform_backward(tape, (*value, *offsets, *weights), geom, g, buf);
        }
        Op::SelectRows { x, idx } => {
            let n = val(*x).cols();
            if let Some(dx) = buf.slot(*x, numel(*x)) {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut dx[i * n..(i + 1) * n], g[r * n..(r + 1) * n].iter().copied());
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut at = 0;
            for &p in parts {
                let len = numel(p);
                if let Some(dp) = buf.slot(p, len) {
                    add_into(dp, g[at..at + len].iter().copied());
                }
                at += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
            let mut col = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                if let Some(dp) = buf.slot(p, m * w) {
                    for i in 0..m {
                        add_into(&mut dp[i * w..(i + 1) * w], g[i * n + col..i * n + col + w].iter().copied());
                    }
                }
                col += w;
            }
        }
        &Op::Reshape(x) => {
            if let Some(dx) = buf.slot(x, g.len()) {
                add_into(dx, g.iter().copied());
            }
        }
        &Op::Sum(x) => {
            let len = numel(x);
            if let Some(dx) = buf.slot(x, len) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(x) => {
            let len = numel(x);
            let gg = g[0] / T::of(len.max(1) as f64);
            if let Some(dx) = buf.slot(x, len) {
                dx.iter_mut().for_each(|d| *d += gg);
            }
        }
        &Op::MeanRows(x) => {
            let len = numel(x);
            let n = g.len();
            let inv = T::of(n as f64 / len.max(1) as f64);
            if let Some(dx) = buf.slot(x, len) {
                for row in dx.chunks_mut(n.max(1)) {
                    add_into(row, g.iter().map(|&gg| gg * inv));
                }
            }
        }
        Op::BceRows { logits, targets } => {
            let len = numel(*logits);
            let m = g.len();
            let p = len / m.max(1);
            let inv = T::of(1.0 / p.max(1) as f64);
            let xv = val(*logits).data();
            if let Some(dx) = buf.slot(*logits, len) {
                for i in 0..m {
                    for j in 0..p {
                        let at = i * p + j;
                        dx[at] += g[i] * (sigmoid(xv[at]) - targets[at]) * inv;
                    }
                }
            }
        }
        Op::DiceRows { logits, targets } => {
            let len = numel(*logits);
            let m = g.len();
            let p = len / m.max(1);
            let xv = val(*logits).data();
            if let Some(dx) = buf.slot(*logits, len) {
                for i in 0..m {
                    let (xs, ts) = (&xv[i * p..(i + 1) * p], &targets[i * p..(i + 1) * p]);
                    let (num, den) = dice_terms(xs, ts);
                    let den2 = den * den;
                    for j in 0..p {
                        let s = sigmoid(xs[j]);
                        let dl_dp = -(T::of(2.0) * ts[j] * den - num) / den2;
                        dx[i * p + j] += g[i] * dl_dp * s * (T::one() - s);
                    }
                }
            }
        }
        &Op::CosineRows { a, b } => {
            let (m, n) = (g.len(), val(a).cols());
            let (av, bv) = (val(a).data(), val(b).data());
            let mut da_rows = vec![T::zero(); m * n];
            let mut db_rows = vec![T::zero(); m * n];
            for i in 0..m {
                let (ar, br) = (&av[i * n..(i + 1) * n], &bv[i * n..(i + 1) * n]);
                let (cos, na, nb) = cosine_parts(ar, br);
                if na == T::zero() || nb == T::zero() {
                    continue;
                }
                for j in 0..n {
                    da_rows[i * n + j] = g[i] * (br[j] / (na * nb) - cos * ar[j] / (na * na));
                    db_rows[i * n + j] = g[i] * (ar[j] / (na * nb) - cos * br[j] / (nb * nb));
                }
            }
            if let Some(da) = buf.slot(a, m * n) {
                add_into(da, da_rows);
            }
            if let Some(db) = buf.slot(b, m * n) {
                add_into(db, db_rows);
            }
        }
    }
}

fn attention_backward<T: Scalar>(
    tape: &Tape<T>,
    (q, k, v): (Var, Var, Var),
    heads: usize,
    blocks: usize,
    probs: &[T],
    g: &[T],
    buf: &mut GradBuf<T>,
) {
    let (nq, c) = (tape.shape(q)[0], tape.shape(q)[1]);
    let nk = tape.shape(k)[0];
    let d = c / heads;
    let (bq, bk) = (nq / blocks, nk / blocks);
    let scale = T::of(1.0 / (d as f64).sqrt());
    let (qd, kd, vd) = (
        tape.value(q).data(),
        tape.value(k).data(),
        tape.value(v).data(),
    );
    let mut dq = vec![T::zero(); nq * c];
    let mut dk = vec![T::zero(); nk * c];
    let mut dv = vec![T::zero(); nk * c];
    let mut ds = vec![T::zero(); bq * bk];
    for blk in 0..blocks {
        for h in 0..heads {
            let p = &probs[(blk * heads + h) * bq * bk..][..bq * bk];
            let gblk = MatRef::block(g, c, blk * bq, bq, h * d, d);
            // dV = Pᵀ dO
            T::gemm(
                MatRef::dense(p, bq, bk).t(),
                gblk,
                true,
                MatMut::block(&mut dv, c, blk * bk, bk, h * d, d),
            );
            // dP = dO Vᵀ
            T::gemm(
                gblk,
                MatRef::block(vd, c, blk * bk, bk, h * d, d).t(),
                false,
                MatMut::dense(&mut ds, bq, bk),
            );
            for (srow, prow) in ds.chunks_mut(bk.max(1)).zip(p.chunks(bk.max(1))) {
                let dot: T = srow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (s, &pp) in srow.iter_mut().zip(prow) {
                    *s = pp * (*s - dot) * scale;
                }
            }
            // dQ = dS K, dK = dSᵀ Q
            T::gemm(
                MatRef::dense(&ds, bq, bk),
                MatRef::block(kd, c, blk * bk, bk, h * d, d),
                true,
                MatMut::block(&mut dq, c, blk * bq, bq, h * d, d),
            );
            T::gemm(
                MatRef::dense(&ds, bq, bk).t(),
                MatRef::block(qd, c, blk * bq, bq, h * d, d),
                true,
                MatMut::block(&mut dk, c, blk * bk, bk, h * d, d),
            );
        }
    }
    if let Some(s) = buf.slot(q, nq * c) {
        add_into(s, dq);
    }
    if let Some(s) = buf.slot(k, nk * c) {
        add_into(s, dk);
    }
    if let Some(s) = buf.slot(v, nk * c) {
        add_into(s, dv);
    }
}

fn deform_backward<T: Scalar>(
    tape: &Tape<T>,
    (value, offsets, weights): (Var, Var, Var),
    geom: &DeformGeometry,
    g: &[T],
    buf: &mut GradBuf<T>,
) {
    let (rows, c) = (tape.shape(value)[0], tape.shape(value)[1]);
    let s = geom.tokens_per_frame;
    let d = c / geom.heads;
    let nl = geom.levels.len();
    let (oc, wc) = (geom.offset_cols(), geom.weight_cols());
    let (vd, od, wd) = (
        tape.value(value).data(),
        tape.value(offsets).data(),
        tape.value(weights).data(),
    );
    let mut dval = vec![T::zero(); rows * c];
    let mut doff = vec![T::zero(); rows * oc];
    let mut dw = vec![T::zero(); rows * wc];
    for f in 0..geom.frames {
        for tok in 0..s {
            let row = f * s + tok;
            let (rx, ry) = geom.reference[tok];
            let grow = &g[row * c..(row + 1) * c];
            for h in 0..geom.heads {
                let gh = &grow[h * d..(h + 1) * d];
                for (l, &(lh, lw)) in geom.levels.iter().enumerate() {
                    let base_row = f * s + geom.level_start[l];
                    for p in 0..geom.points {
                        let wi = (h * nl + l) * geom.points + p;
                        let a = wd[row * wc + wi];
                        let x = rx * lw as f64 + od[row * oc + 2 * wi].as_f64() - 0.5;
                        let y = ry * lh as f64 + od[row * oc + 2 * wi + 1].as_f64() - 0.5;
                        let taps = bilinear_taps(x, y, lh, lw);
                        let mut d_a = T::zero();
                        let mut d_x = T::zero();
                        let mut d_y = T::zero();
                        for t in 0..4 {
                            let src_row = base_row + taps.idx[t];
                            let src = &vd[src_row * c + h * d..][..d];
                            let gv: T = gh.iter().zip(src).map(|(&a, &b)| a * b).sum();
                            d_a += T::of(taps.w[t]) * gv;
                            d_x += T::of(taps.dx_w[t]) * gv;
                            d_y += T::of(taps.dy_w[t]) * gv;
                            let coef = a * T::of(taps.w[t]);
                            if coef != T::zero() {
                                let dst = &mut dval[src_row * c + h * d..][..d];
                                add_into(dst, gh.iter().map(|&gg| gg * coef));
                            }
                        }
                        dw[row * wc + wi] += d_a;
                        doff[row * oc + 2 * wi] += a * d_x;
                        doff[row * oc + 2 * wi + 1] += a * d_y;
                    }
                }
            }
        }
    }
    if let Some(sl) = buf.slot(value, rows * c) {
        add_into(sl, dval);
    }
    if let Some(sl) = buf.slot(offsets, rows * oc) {
        add_into(sl, doff);
    }
    if let Some(sl) = buf.slot(weights, rows * wc) {
        add_into(sl, dw);
    }
}
