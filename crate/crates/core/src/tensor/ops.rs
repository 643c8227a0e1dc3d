//! Forward and backward rules of every recorded op.

use super::tape::{Op, RoiWindow};
use super::{Float, Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Split `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|span| span / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(w, kj, stride, pad, wo);
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if stride == 1 {
                        let start = lo + kj - pad;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, out) in line.iter_mut().enumerate().take(hi).skip(lo) {
                            *out = src[ox * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kj - pad` lies in `[0, w)`.
fn valid_cols(w: usize, kj: usize, stride: usize, pad: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride).min(wo);
    let hi = if w + pad > kj { (w + pad - kj).div_ceil(stride).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    let (lo, hi) = valid_cols(w, kj, stride, pad, wo);
                    for ox in lo..hi {
                        dx[base + ox * stride + kj - pad] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn stable_sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Tape<T> {
    fn either_grad(&self, a: Var, b: Var) -> bool {
        self.requires_grad(a) || self.requires_grad(b)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    /// 2-D convolution over an NCHW batch with an OIkk kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            bail!(Dimension, "conv2d wants NCHW input and OIkk weight, got {xs:?} and {ws:?}");
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if ws[1] != c || ws[3] != k {
            bail!(Dimension, "conv2d weight {ws:?} does not fit {c} input channels");
        }
        if stride == 0 {
            bail!(Dimension, "conv2d stride must be at least 1");
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                bail!(Dimension, "conv2d bias {:?} does not match {o} outputs", self.shape(b));
            }
        }
        let (Some(ho), Some(wo)) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)) else {
            bail!(Dimension, "conv2d kernel {k} exceeds padded input {h}x{w}");
        };
        self.value(input).ensure_finite("conv2d input")?;

        let ckk = c * k * k;
        let plane = ho * wo;
        let mut out = vec![T::zero(); n * o * plane];
        let mut cols = vec![T::zero(); ckk * plane];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = bias.map(|b| self.value(b).data());
            for img in 0..n {
                im2col(&x[img * c * h * w..(img + 1) * c * h * w], c, h, w, k, stride, pad, ho, wo, &mut cols);
                let dst = &mut out[img * o * plane..(img + 1) * o * plane];
                if let Some(b) = b {
                    for (oc, row) in dst.chunks_mut(plane).enumerate() {
                        row.fill(b[oc]);
                    }
                }
                T::gemm(o, ckk, plane, T::one(), wt, ckk as isize, 1, &cols, plane as isize, 1, T::one(), dst, plane as isize, 1);
            }
        }
        let rg = self.either_grad(input, weight) || bias.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(&[n, o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, stride, pad }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Relu(input), rg))
    }

    /// Max pooling with a square window, no padding. Ties go to the lowest flat index.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            bail!(Dimension, "max_pool2d wants NCHW input, got {xs:?}");
        }
        if k == 0 || stride == 0 {
            bail!(Dimension, "max_pool2d window and stride must be at least 1");
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k > h || k > w {
            bail!(Dimension, "max_pool2d window {k} exceeds input {h}x{w}");
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.requires_grad(input);
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// `input · weightᵀ + bias` for an N×D input and K×D weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            bail!(Dimension, "linear: input {xs:?} and weight {ws:?} disagree");
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                bail!(Dimension, "linear bias {:?} does not match {k} outputs", self.shape(b));
            }
        }
        self.value(input).ensure_finite("linear input")?;
        let mut out = vec![T::zero(); n * k];
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(k) {
                row.copy_from_slice(b);
            }
        }
        T::gemm(
            n,
            d,
            k,
            T::one(),
            self.value(input).data(),
            d as isize,
            1,
            self.value(weight).data(),
            1,
            d as isize,
            T::one(),
            &mut out,
            k as isize,
            1,
        );
        let rg = self.either_grad(input, weight) || bias.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(&[n, k], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Max over each bin of each region window. Output is `[R, C, bins_h, bins_w]`.
    pub fn roi_pool(&mut self, input: Var, windows: &[RoiWindow]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            bail!(Dimension, "roi_pool wants NCHW input, got {xs:?}");
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let Some(first) = windows.first() else {
            bail!(Dimension, "roi_pool needs at least one window");
        };
        let (hr, wr) = (first.rows.len(), first.cols.len());
        let x = self.value(input).data();
        let bins = hr * wr;
        let mut out = vec![T::zero(); windows.len() * c * bins];
        let mut argmax = vec![0usize; out.len()];
        // cell offsets of every bin in row-major scan order, shared by all channels
        let mut cells = Vec::new();
        let mut bounds = Vec::with_capacity(bins + 1);
        for (wi, win) in windows.iter().enumerate() {
            if win.batch >= n || win.rows.len() != hr || win.cols.len() != wr {
                bail!(Dimension, "roi window {win:?} inconsistent with input {xs:?}");
            }
            for &(r0, r1) in win.rows.iter().chain(&win.cols) {
                if r0 >= r1 {
                    bail!(Dimension, "roi window has an empty bin {r0}..{r1}");
                }
            }
            if win.rows.iter().any(|&(_, r1)| r1 > h) || win.cols.iter().any(|&(_, c1)| c1 > w) {
                bail!(Dimension, "roi window exceeds feature map {h}x{w}");
            }
            cells.clear();
            bounds.clear();
            bounds.push(0);
            for &(y0, y1) in &win.rows {
                for &(x0, x1) in &win.cols {
                    for y in y0..y1 {
                        cells.extend((x0..x1).map(|xx| y * w + xx));
                    }
                    bounds.push(cells.len());
                }
            }
            for ch in 0..c {
                let base = (win.batch * c + ch) * h * w;
                let plane = &x[base..base + h * w];
                let dst = (wi * c + ch) * bins;
                for b in 0..bins {
                    let cs = &cells[bounds[b]..bounds[b + 1]];
                    let mut best = cs[0];
                    let mut best_v = plane[best];
                    for &cell in &cs[1..] {
                        let v = plane[cell];
                        if v > best_v {
                            best_v = v;
                            best = cell;
                        }
                    }
                    out[dst + b] = best_v;
                    argmax[dst + b] = base + best;
                }
            }
        }
        let rg = self.requires_grad(input);
        let value = Tensor::new(&[windows.len(), c, hr, wr], out)?;
        Ok(self.push(value, Op::RoiPool { input, argmax }, rg))
    }

    /// Multiply slice `r` along the leading axis by the constant `weights[r]`.
    pub fn scale_rows(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.first() != Some(&weights.len()) {
            bail!(Contract, "scale_rows: {} weights for leading axis of {:?}", weights.len(), shape);
        }
        let inner: usize = shape[1..].iter().product();
        let mut value = self.value(input).clone();
        for (row, &s) in value.data_mut().chunks_mut(inner.max(1)).zip(weights) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::ScaleRows { input, weights: weights.to_vec() }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// The temperature scaling node `x / t`, where `t` has one entry per index of `axis`.
    pub fn div_along(&mut self, input: Var, temps: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            bail!(Dimension, "div_along axis {axis} out of range for {shape:?}");
        }
        if self.shape(temps) != [shape[axis]] {
            bail!(
                Dimension,
                "temperatures {:?} do not match axis {axis} of {shape:?}",
                self.shape(temps)
            );
        }
        let t = self.value(temps).data();
        if let Some(bad) = t.iter().find(|&&v| !(v > T::zero())) {
            bail!(Domain, "temperature must be positive, got {bad}");
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for (j, &tj) in t.iter().enumerate().take(len) {
                let base = (o * len + j) * inner;
                for i in base..base + inner {
                    out[i] = x[i] / tj;
                }
            }
        }
        let rg = self.either_grad(input, temps);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::DivAlong { input, temps, axis }, rg))
    }

    /// Softmax along `axis` with per-lane max subtraction.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            bail!(Dimension, "softmax axis {axis} out of range for {shape:?}");
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let rg = self.requires_grad(input);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { input, axis }, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(stable_sigmoid);
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Sigmoid(input), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, name)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.either_grad(a, b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.either_grad(a, b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.either_grad(a, b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Result<Var> {
        let value = self.value(input).map(|x| scale * x + shift);
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Affine { input, scale }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.affine(input, factor, T::zero())
    }

    /// Sum over `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            bail!(Dimension, "sum axis {axis} out of range for {shape:?}");
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.requires_grad(input);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::SumAxis { input, axis }, rg))
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().copied().sum();
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::scalar(total), Op::SumAll(input), rg))
    }

    /// Clamp into `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, input: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(input).map(|x| x.max(lo).min(hi));
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Clamp { input, lo, hi }, rg))
    }

    pub fn ln(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.data().iter().any(|&v| !(v > T::zero())) {
            bail!(Numeric, "ln of a non-positive value");
        }
        let value = x.map(T::ln);
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Ln(input), rg))
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let sq = self.mul(input, input)?;
        self.sum_all(sq)
    }

    /// Softmax of `m / t` along `axis`, `t` indexed by position along that same axis.
    pub fn tempered_softmax(&mut self, logits: Var, temps: Var, axis: usize) -> Result<Var> {
        let scaled = self.div_along(logits, temps, axis)?;
        self.softmax(scaled, axis)
    }

    /// `1 / (1 + exp(-m/t))` elementwise over the last axis.
    pub fn tempered_sigmoid(&mut self, logits: Var, temps: Var) -> Result<Var> {
        let axis = self.shape(logits).len().saturating_sub(1);
        let scaled = self.div_along(logits, temps, axis)?;
        self.sigmoid(scaled)
    }

    pub(super) fn backprop(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, weight, bias, stride, pad } => {
                let xs = self.shape(input);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let ws = self.shape(weight);
                let (o, k) = (ws[0], ws[2]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let (ckk, plane) = (c * k * k, ho * wo);
                let x = self.value(input).data();
                let wt = self.value(weight).data();
                if let Some(b) = bias {
                    self.accumulate(grads, b, |db| {
                        for img in 0..n {
                            for (oc, d) in db.iter_mut().enumerate() {
                                let start = (img * o + oc) * plane;
                                *d += gy[start..start + plane].iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                let mut cols = vec![T::zero(); ckk * plane];
                if self.requires_grad(weight) {
                    self.accumulate(grads, weight, |dw| {
                        for img in 0..n {
                            im2col(&x[img * c * h * w..(img + 1) * c * h * w], c, h, w, k, stride, pad, ho, wo, &mut cols);
                            let g = &gy[img * o * plane..(img + 1) * o * plane];
                            T::gemm(o, plane, ckk, T::one(), g, plane as isize, 1, &cols, 1, plane as isize, T::one(), dw, ckk as isize, 1);
                        }
                    });
                }
                if self.requires_grad(input) {
                    self.accumulate(grads, input, |dx| {
                        for img in 0..n {
                            let g = &gy[img * o * plane..(img + 1) * o * plane];
                            T::gemm(ckk, o, plane, T::one(), wt, 1, ckk as isize, g, plane as isize, 1, T::zero(), &mut cols, plane as isize, 1);
                            col2im(&cols, c, h, w, k, stride, pad, ho, wo, &mut dx[img * c * h * w..(img + 1) * c * h * w]);
                        }
                    });
                }
            }
            &Op::Relu(input) => {
                let x = self.value(input).data();
                self.accumulate(grads, input, |dx| {
                    for ((d, &g), &xv) in dx.iter_mut().zip(gy).zip(x) {
                        if xv > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } | Op::RoiPool { input, argmax } => {
                self.accumulate(grads, *input, |dx| {
                    for (&src, &g) in argmax.iter().zip(gy) {
                        dx[src] += g;
                    }
                });
            }
            &Op::Linear { input, weight, bias } => {
                let (n, d) = (self.shape(input)[0], self.shape(input)[1]);
                let k = self.shape(weight)[0];
                if let Some(b) = bias {
                    self.accumulate(grads, b, |db| {
                        for row in gy.chunks(k) {
                            for (acc, &g) in db.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                    });
                }
                let x = self.value(input).data();
                let wt = self.value(weight).data();
                self.accumulate(grads, weight, |dw| {
                    T::gemm(k, n, d, T::one(), gy, 1, k as isize, x, d as isize, 1, T::one(), dw, d as isize, 1);
                });
                self.accumulate(grads, input, |dx| {
                    T::gemm(n, k, d, T::one(), gy, k as isize, 1, wt, d as isize, 1, T::one(), dx, d as isize, 1);
                });
            }
            Op::ScaleRows { input, weights } => {
                let inner = (gy.len() / weights.len().max(1)).max(1);
                self.accumulate(grads, *input, |dx| {
                    for ((row, grow), &s) in dx.chunks_mut(inner).zip(gy.chunks(inner)).zip(weights) {
                        for (d, &g) in row.iter_mut().zip(grow) {
                            *d += s * g;
                        }
                    }
                });
            }
            &Op::Reshape(input) => {
                self.accumulate(grads, input, |dx| {
                    for (d, &g) in dx.iter_mut().zip(gy) {
                        *d += g;
                    }
                });
            }
            &Op::DivAlong { input, temps, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(input), axis);
                let x = self.value(input).data();
                let t = self.value(temps).data();
                // d/dx = g / t ;  d/dt = g * (-x / t^2), summed over every use of t.
                self.accumulate(grads, input, |dx| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in base..base + inner {
                                dx[i] += gy[i] / t[j];
                            }
                        }
                    }
                });
                self.accumulate(grads, temps, |dt| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in base..base + inner {
                                dt[j] += gy[i] * (-x[i] / (t[j] * t[j]));
                            }
                        }
                    }
                });
            }
            &Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), axis);
                self.accumulate(grads, input, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += y[at(j)] * (gy[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::Sigmoid(input) => {
                self.accumulate(grads, input, |dx| {
                    for ((d, &g), &s) in dx.iter_mut().zip(gy).zip(y) {
                        *d += g * s * (T::one() - s);
                    }
                });
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, v, |d| d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g));
                }
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |d| d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g));
                self.accumulate(grads, b, |d| d.iter_mut().zip(gy).for_each(|(d, &g)| *d -= g));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |d| {
                    for ((d, &g), &o) in d.iter_mut().zip(gy).zip(bv) {
                        *d += g * o;
                    }
                });
                self.accumulate(grads, b, |d| {
                    for ((d, &g), &o) in d.iter_mut().zip(gy).zip(av) {
                        *d += g * o;
                    }
                });
            }
            &Op::Affine { input, scale } => {
                self.accumulate(grads, input, |dx| dx.iter_mut().zip(gy).for_each(|(d, &g)| *d += scale * g));
            }
            &Op::SumAxis { input, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(input), axis);
                self.accumulate(grads, input, |dx| {
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (d, &g) in dst.iter_mut().zip(&gy[o * inner..(o + 1) * inner]) {
                                *d += g;
                            }
                        }
                    }
                });
            }
            &Op::SumAll(input) => {
                let g = gy[0];
                self.accumulate(grads, input, |dx| dx.iter_mut().for_each(|d| *d += g));
            }
            &Op::Clamp { input, lo, hi } => {
                let x = self.value(input).data();
                self.accumulate(grads, input, |dx| {
                    for ((d, &g), &xv) in dx.iter_mut().zip(gy).zip(x) {
                        if xv >= lo && xv <= hi {
                            *d += g;
                        }
                    }
                });
            }
            &Op::Ln(input) => {
                let x = self.value(input).data();
                self.accumulate(grads, input, |dx| {
                    for ((d, &g), &xv) in dx.iter_mut().zip(gy).zip(x) {
                        *d += g / xv;
                    }
                });
            }
        }
    }
}
