//! Convolution kernels (cross-correlation, no kernel flip) over NCHW batches.
//!
//! Examples are processed in fixed-size chunks: each chunk is unfolded with
//! im2col into a `[C_in*K*K, chunk*H_out*W_out]` matrix so a layer becomes one
//! GEMM (dense weights) or a list of row axpys (filter-compacted weights).
//! Chunk results are combined in chunk order, so the parallel and sequential
//! builds agree bit for bit. Every kernel returns the FLOPs it executed under
//! the crate convention: one multiply-accumulate is two FLOPs, padded taps
//! included; a bias add is one FLOP per output element.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Examples per im2col chunk. Fixed so results never depend on thread count.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("conv2d", "channel counts must be positive"));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} and stride {} must be >= 1", self.kernel, self.stride),
            ));
        }
        Ok(())
    }

    /// Output extent for an input extent, or `None` if the window never fits.
    pub fn out_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// Surviving `(out_channel, in_channel)` filter pairs of a compacted layer.
/// Each output channel reads an explicit, sorted list of input channels; the
/// matching `K*K` kernels are stored contiguously in pair order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterLayout {
    out_channels: usize,
    in_channels: usize,
    inputs: Vec<Vec<usize>>,
    offsets: Vec<usize>,
}

impl FilterLayout {
    pub fn new(out_channels: usize, in_channels: usize, inputs: Vec<Vec<usize>>) -> Result<Self> {
        if inputs.len() != out_channels {
            return Err(Error::shape(
                "filter_layout",
                format!("{} input lists for {out_channels} output channels", inputs.len()),
            ));
        }
        let mut offsets = Vec::with_capacity(out_channels + 1);
        let mut total = 0;
        for (o, list) in inputs.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::shape(
                    "filter_layout",
                    format!("output channel {o} keeps no filters"),
                ));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) || *list.last().unwrap() >= in_channels {
                return Err(Error::shape(
                    "filter_layout",
                    format!("output channel {o}: input list {list:?} not sorted/unique/in range"),
                ));
            }
            offsets.push(total);
            total += list.len();
        }
        offsets.push(total);
        Ok(Self {
            out_channels,
            in_channels,
            inputs,
            offsets,
        })
    }

    pub fn dense(out_channels: usize, in_channels: usize) -> Self {
        Self::new(out_channels, in_channels, vec![(0..in_channels).collect(); out_channels])
            .expect("dense layout is valid")
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn pairs(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn inputs(&self, out: usize) -> &[usize] {
        &self.inputs[out]
    }

    /// Index of the first pair belonging to output channel `out`.
    pub fn offset(&self, out: usize) -> usize {
        self.offsets[out]
    }

    pub fn pair_list(&self) -> Vec<(usize, usize)> {
        self.inputs
            .iter()
            .enumerate()
            .flat_map(|(o, ins)| ins.iter().map(move |&i| (o, i)))
            .collect()
    }

    pub fn from_pairs(out_channels: usize, in_channels: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut inputs = vec![Vec::new(); out_channels];
        for &(o, i) in pairs {
            if o >= out_channels {
                return Err(Error::shape("filter_layout", format!("output channel {o} out of range")));
            }
            inputs[o].push(i);
        }
        inputs.iter_mut().for_each(|l| l.sort_unstable());
        Self::new(out_channels, in_channels, inputs)
    }
}

/// A standalone convolution layer: weights `[out, in, K, K]`, optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub geometry: ConvGeometry,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvKernel {
    pub fn new(geometry: ConvGeometry, weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        geometry.validate()?;
        if weights.shape() != geometry.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!("weights {:?} vs geometry {:?}", weights.shape(), geometry.weight_shape()),
            ));
        }
        if let Some(b) = &bias {
            if b.shape() != [geometry.out_channels] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs out_channels {}", b.shape(), geometry.out_channels),
                ));
            }
        }
        Ok(Self {
            geometry,
            weights,
            bias,
        })
    }
}

/// Weight storage as seen by the kernels.
#[derive(Clone, Copy)]
pub enum WeightsRef<'a> {
    Dense(&'a [f64]),
    Filters(&'a FilterLayout, &'a [f64]),
}

/// Owned counterpart of [`WeightsRef`] used by the tape.
#[derive(Debug, Clone)]
pub enum ConvStorage {
    Dense,
    Filters(Arc<FilterLayout>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn new(input_shape: &[usize], geom: &ConvGeometry) -> Result<Self> {
        geom.validate()?;
        let [batch, c_in, h, w] = <[usize; 4]>::try_from(input_shape).map_err(|_| {
            Error::shape("conv2d", format!("expected NCHW input, got shape {input_shape:?}"))
        })?;
        if c_in != geom.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels, kernel expects in_channels={}", geom.in_channels),
            ));
        }
        let (h_out, w_out) = match (geom.out_size(h), geom.out_size(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "input {h}x{w} with padding {} too small for kernel {}",
                        geom.padding, geom.kernel
                    ),
                ))
            }
        };
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out: geom.out_channels,
            k: geom.kernel,
            stride: geom.stride,
            pad: geom.padding,
            h_out,
            w_out,
        })
    }

    pub fn plane_out(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn plane_in(&self) -> usize {
        self.h * self.w
    }

    pub fn taps(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.h_out, self.w_out]
    }

    fn n_chunks(&self) -> usize {
        self.batch.div_ceil(CHUNK)
    }

    fn chunk_len(&self, chunk: usize) -> usize {
        CHUNK.min(self.batch - chunk * CHUNK)
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, a_strides) < a.len());
    assert!(last(k, n, b_strides) < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the routine touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64], ld: usize, col0: usize) {
    let (k, s, pad) = (d.k, d.stride, d.pad as isize);
    let p = d.plane_out();
    for c in 0..d.c_in {
        let plane = &x[c * d.plane_in()..(c + 1) * d.plane_in()];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + p];
                for oh in 0..d.h_out {
                    let out_row = &mut dst[oh * d.w_out..(oh + 1) * d.w_out];
                    let ih = (oh * s + kh) as isize - pad;
                    if ih < 0 || ih >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * s + kw) as isize - pad;
                        *v = if iw >= 0 && iw < d.w as isize { src[iw as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, ld: usize, col0: usize, dx: &mut [f64]) {
    let (k, s, pad) = (d.k, d.stride, d.pad as isize);
    let p = d.plane_out();
    for c in 0..d.c_in {
        let plane = &mut dx[c * d.plane_in()..(c + 1) * d.plane_in()];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src = &cols[row * ld + col0..row * ld + col0 + p];
                for oh in 0..d.h_out {
                    let ih = (oh * s + kh) as isize - pad;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for ow in 0..d.w_out {
                        let iw = (ow * s + kw) as isize - pad;
                        if iw >= 0 && iw < d.w as isize {
                            dst[iw as usize] += src[oh * d.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_weights(w: &WeightsRef<'_>, d: &ConvDims) -> Result<()> {
    let k2 = d.k * d.k;
    match w {
        WeightsRef::Dense(w) => {
            if w.len() != d.c_out * d.taps() {
                return Err(Error::shape(
                    "conv2d",
                    format!("{} weights for [{}, {}, {}, {}]", w.len(), d.c_out, d.c_in, d.k, d.k),
                ));
            }
        }
        WeightsRef::Filters(layout, w) => {
            if layout.out_channels() != d.c_out || layout.in_channels() != d.c_in {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "filter layout {}x{} vs layer {}x{}",
                        layout.out_channels(),
                        layout.in_channels(),
                        d.c_out,
                        d.c_in
                    ),
                ));
            }
            if w.len() != layout.pairs() * k2 {
                return Err(Error::shape(
                    "conv2d",
                    format!("{} weights for {} filters of {}x{}", w.len(), layout.pairs(), d.k, d.k),
                ));
            }
        }
    }
    Ok(())
}

/// Forward convolution. Returns the output tensor data and executed FLOPs.
pub fn conv_forward(
    x: &[f64],
    weights: WeightsRef<'_>,
    bias: Option<&[f64]>,
    d: &ConvDims,
) -> Result<(Vec<f64>, u64)> {
    check_weights(&weights, d)?;
    if x.len() != d.batch * d.c_in * d.plane_in() {
        return Err(Error::shape("conv2d", "input length does not match dims"));
    }
    if let Some(b) = bias {
        if b.len() != d.c_out {
            return Err(Error::shape("conv2d", format!("bias length {} vs {}", b.len(), d.c_out)));
        }
    }
    let p = d.plane_out();
    let k2 = d.k * d.k;
    let taps = d.taps();
    let in_ex = d.c_in * d.plane_in();
    let mut out = vec![0.0; d.batch * d.c_out * p];
    let counts = par::map_chunks_mut(&mut out, CHUNK * d.c_out * p, |ci, out_chunk| {
        let ch = out_chunk.len() / (d.c_out * p);
        let ld = ch * p;
        let mut cols = vec![0.0; taps * ld];
        for e in 0..ch {
            let n = ci * CHUNK + e;
            im2col(&x[n * in_ex..(n + 1) * in_ex], d, &mut cols, ld, e * p);
        }
        let mut tmp = vec![0.0; d.c_out * ld];
        let mut flops = 0u64;
        match weights {
            WeightsRef::Dense(w) => {
                gemm(d.c_out, taps, ld, w, (taps, 1), &cols, (ld, 1), &mut tmp, false);
                flops += 2 * (d.c_out * taps * ld) as u64;
            }
            WeightsRef::Filters(layout, w) => {
                for o in 0..d.c_out {
                    let dst = &mut tmp[o * ld..(o + 1) * ld];
                    for (j, &i) in layout.inputs(o).iter().enumerate() {
                        let base = (layout.offset(o) + j) * k2;
                        for kk in 0..k2 {
                            let row = i * k2 + kk;
                            axpy(w[base + kk], &cols[row * ld..(row + 1) * ld], dst);
                            flops += 2 * ld as u64;
                        }
                    }
                }
            }
        }
        for e in 0..ch {
            for o in 0..d.c_out {
                let dst = &mut out_chunk[(e * d.c_out + o) * p..(e * d.c_out + o + 1) * p];
                dst.copy_from_slice(&tmp[o * ld + e * p..o * ld + (e + 1) * p]);
                if let Some(b) = bias {
                    dst.iter_mut().for_each(|v| *v += b[o]);
                    flops += p as u64;
                }
            }
        }
        flops
    });
    Ok((out, counts.into_iter().sum()))
}

/// Gradients produced by [`conv_backward`]; absent parts were not requested.
#[derive(Debug, Default)]
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
    pub input_flops: u64,
    pub weight_flops: u64,
}

/// Backward convolution. `want_input` / `want_weights` select which halves
/// run; a half that is not requested costs nothing.
pub fn conv_backward(
    x: &[f64],
    weights: WeightsRef<'_>,
    has_bias: bool,
    d: &ConvDims,
    dout: &[f64],
    want_input: bool,
    want_weights: bool,
) -> Result<ConvGrads> {
    check_weights(&weights, d)?;
    let p = d.plane_out();
    if dout.len() != d.batch * d.c_out * p {
        return Err(Error::shape("conv2d backward", "output gradient length mismatch"));
    }
    if !want_input && !want_weights {
        return Ok(ConvGrads::default());
    }
    let k2 = d.k * d.k;
    let taps = d.taps();
    let in_ex = d.c_in * d.plane_in();
    let n_weights = match weights {
        WeightsRef::Dense(w) | WeightsRef::Filters(_, w) => w.len(),
    };

    struct Part {
        dx: Vec<f64>,
        dw: Vec<f64>,
        db: Vec<f64>,
        fi: u64,
        fw: u64,
    }

    let parts = par::map(d.n_chunks(), |ci| {
        let ch = d.chunk_len(ci);
        let ld = ch * p;
        let mut dout_c = vec![0.0; d.c_out * ld];
        for e in 0..ch {
            let n = ci * CHUNK + e;
            for o in 0..d.c_out {
                let src = &dout[(n * d.c_out + o) * p..(n * d.c_out + o + 1) * p];
                dout_c[o * ld + e * p..o * ld + (e + 1) * p].copy_from_slice(src);
            }
        }
        let mut part = Part {
            dx: Vec::new(),
            dw: Vec::new(),
            db: Vec::new(),
            fi: 0,
            fw: 0,
        };
        if want_weights {
            let mut cols = vec![0.0; taps * ld];
            for e in 0..ch {
                let n = ci * CHUNK + e;
                im2col(&x[n * in_ex..(n + 1) * in_ex], d, &mut cols, ld, e * p);
            }
            part.dw = vec![0.0; n_weights];
            match weights {
                WeightsRef::Dense(_) => {
                    gemm(d.c_out, ld, taps, &dout_c, (ld, 1), &cols, (1, ld), &mut part.dw, false);
                    part.fw += 2 * (d.c_out * taps * ld) as u64;
                }
                WeightsRef::Filters(layout, _) => {
                    for o in 0..d.c_out {
                        let g = &dout_c[o * ld..(o + 1) * ld];
                        for (j, &i) in layout.inputs(o).iter().enumerate() {
                            let base = (layout.offset(o) + j) * k2;
                            for kk in 0..k2 {
                                let row = i * k2 + kk;
                                part.dw[base + kk] = dot(g, &cols[row * ld..(row + 1) * ld]);
                                part.fw += 2 * ld as u64;
                            }
                        }
                    }
                }
            }
            if has_bias {
                part.db = (0..d.c_out)
                    .map(|o| dout_c[o * ld..(o + 1) * ld].iter().sum())
                    .collect();
                part.fw += (d.c_out * ld) as u64;
            }
        }
        if want_input {
            let mut dcols = vec![0.0; taps * ld];
            match weights {
                WeightsRef::Dense(w) => {
                    gemm(taps, d.c_out, ld, w, (1, taps), &dout_c, (ld, 1), &mut dcols, false);
                    part.fi += 2 * (d.c_out * taps * ld) as u64;
                }
                WeightsRef::Filters(layout, w) => {
                    for o in 0..d.c_out {
                        let g = &dout_c[o * ld..(o + 1) * ld];
                        for (j, &i) in layout.inputs(o).iter().enumerate() {
                            let base = (layout.offset(o) + j) * k2;
                            for kk in 0..k2 {
                                let row = i * k2 + kk;
                                axpy(w[base + kk], g, &mut dcols[row * ld..(row + 1) * ld]);
                                part.fi += 2 * ld as u64;
                            }
                        }
                    }
                }
            }
            part.dx = vec![0.0; ch * in_ex];
            for e in 0..ch {
                col2im(&dcols, d, ld, e * p, &mut part.dx[e * in_ex..(e + 1) * in_ex]);
            }
        }
        part
    });

    let mut grads = ConvGrads::default();
    if want_input {
        let mut dx = Vec::with_capacity(d.batch * in_ex);
        for part in &parts {
            dx.extend_from_slice(&part.dx);
        }
        grads.input = Some(dx);
    }
    if want_weights {
        let mut dw = vec![0.0; n_weights];
        let mut db = vec![0.0; if has_bias { d.c_out } else { 0 }];
        for part in &parts {
            dw.iter_mut().zip(&part.dw).for_each(|(a, b)| *a += b);
            db.iter_mut().zip(&part.db).for_each(|(a, b)| *a += b);
        }
        grads.weights = Some(dw);
        grads.bias = has_bias.then_some(db);
    }
    grads.input_flops = parts.iter().map(|p| p.fi).sum();
    grads.weight_flops = parts.iter().map(|p| p.fw).sum();
    Ok(grads)
}

/// Cross-correlates an NCHW batch with a standalone kernel.
pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let d = ConvDims::new(input.shape(), &kernel.geometry)?;
    let (out, _) = conv_forward(
        input.data(),
        WeightsRef::Dense(kernel.weights.data()),
        kernel.bias.as_ref().map(|b| b.data()),
        &d,
    )?;
    Tensor::new(d.output_shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor {
        let [n, c, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
        let [o, _, k, _] = <[usize; 4]>::try_from(w.shape()).unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let k = ConvKernel::new(ConvGeometry::new(1, 1, 1, 1, 0), Tensor::scalar(1.0).reshape(vec![1, 1, 1, 1]).unwrap(), Some(Tensor::zeros(&[1]))).unwrap();
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn ones_sum_to_nine() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |_| 1.0);
        let k = ConvKernel::new(ConvGeometry::new(1, 1, 3, 1, 0), Tensor::from_fn(&[1, 1, 3, 3], |_| 1.0), None).unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn matches_naive_loops() {
        for &(n, c, h, o, k, s, p) in &[
            (1, 3, 8, 8, 3, 1, 1),
            (3, 2, 7, 5, 3, 2, 1),
            (11, 4, 6, 3, 1, 2, 0),
            (2, 1, 5, 2, 5, 1, 2),
            (9, 3, 9, 4, 3, 3, 0),
        ] {
            let x = Tensor::from_fn(&[n, c, h, h], lcg(1));
            let w = Tensor::from_fn(&[o, c, k, k], lcg(2));
            let b: Vec<f64> = (0..o).map(lcg(3)).collect();
            let kernel = ConvKernel::new(ConvGeometry::new(c, o, k, s, p), w.clone(), Some(Tensor::new(vec![o], b.clone()).unwrap())).unwrap();
            let got = conv2d(&x, &kernel).unwrap();
            let want = naive(&x, &w, Some(&b), s, p);
            assert!(got.max_abs_diff(&want) <= 1e-12, "{:?}", (n, c, h, o, k, s, p));
        }
    }

    #[test]
    fn dense_layout_filters_match_dense_weights() {
        let d = ConvDims::new(&[10, 3, 6, 6], &ConvGeometry::new(3, 4, 3, 1, 1)).unwrap();
        let x: Vec<f64> = (0..10 * 3 * 36).map(lcg(5)).collect();
        let w: Vec<f64> = (0..4 * 27).map(lcg(6)).collect();
        let layout = FilterLayout::dense(4, 3);
        let (a, fa) = conv_forward(&x, WeightsRef::Dense(&w), None, &d).unwrap();
        let (b, fb) = conv_forward(&x, WeightsRef::Filters(&layout, &w), None, &d).unwrap();
        assert_eq!(fa, fb);
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() <= 1e-12));
        let dout: Vec<f64> = (0..a.len()).map(lcg(7)).collect();
        let ga = conv_backward(&x, WeightsRef::Dense(&w), false, &d, &dout, true, true).unwrap();
        let gb = conv_backward(&x, WeightsRef::Filters(&layout, &w), false, &d, &dout, true, true).unwrap();
        assert_eq!((ga.input_flops, ga.weight_flops), (gb.input_flops, gb.weight_flops));
        for (u, v) in ga.weights.unwrap().iter().zip(gb.weights.unwrap()) {
            assert!((u - v).abs() <= 1e-12);
        }
        for (u, v) in ga.input.unwrap().iter().zip(gb.input.unwrap()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = ConvKernel::new(ConvGeometry::new(3, 1, 3, 1, 1), Tensor::zeros(&[1, 3, 3, 3]), None).unwrap();
        let err = conv2d(&x, &k).unwrap_err().to_string();
        assert!(err.contains("2 channels") && err.contains("in_channels=3"), "{err}");
        let small = Tensor::zeros(&[1, 3, 2, 2]);
        let k5 = ConvKernel::new(ConvGeometry::new(3, 1, 5, 1, 0), Tensor::zeros(&[1, 3, 5, 5]), None).unwrap();
        assert!(conv2d(&small, &k5).is_err());
    }

    #[test]
    fn layout_rejects_empty_channel() {
        assert!(FilterLayout::new(2, 3, vec![vec![0, 2], vec![]]).is_err());
        assert!(FilterLayout::new(1, 3, vec![vec![2, 1]]).is_err());
        let l = FilterLayout::from_pairs(2, 3, &[(1, 2), (0, 1), (1, 0)]).unwrap();
        assert_eq!(l.pair_list(), vec![(0, 1), (1, 0), (1, 2)]);
        assert_eq!(l.pairs(), 3);
    }
}
