use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolDims {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl PoolDims {
    pub fn new(shape: &[usize], window: usize, stride: usize) -> Result<Self> {
        let &[batch, channels, h, w] = shape else {
            return Err(Error::shape("max_pool", format!("expected NCHW, got {shape:?}")));
        };
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::shape(
                "max_pool",
                format!("window {window} stride {stride} on {h}x{w} input"),
            ));
        }
        Ok(Self {
            batch,
            channels,
            h,
            w,
            window,
            stride,
            h_out: (h - window) / stride + 1,
            w_out: (w - window) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.h_out, self.w_out]
    }
}

/// Max pooling without padding. Returns output, flat argmax input indices
/// (first maximum wins ties) and FLOPs (one per output element).
pub fn max_pool_forward(x: &[f64], d: &PoolDims) -> (Vec<f64>, Vec<usize>, u64) {
    let planes = d.batch * d.channels;
    let mut out = Vec::with_capacity(planes * d.h_out * d.w_out);
    let mut arg = Vec::with_capacity(out.capacity());
    for pl in 0..planes {
        let base = pl * d.h * d.w;
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..d.window {
                    for kx in 0..d.window {
                        let i = base + (oy * d.stride + ky) * d.w + ox * d.stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    let n = out.len() as u64;
    (out, arg, n)
}

pub fn max_pool_backward(argmax: &[usize], input_len: usize, dout: &[f64]) -> (Vec<f64>, u64) {
    let mut dx = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(dout) {
        dx[i] += g;
    }
    (dx, dout.len() as u64)
}

pub fn max_pool(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let d = PoolDims::new(x.shape(), window, stride)?;
    let (out, _, _) = max_pool_forward(x.data(), &d);
    Tensor::new(d.output_shape().to_vec(), out)
}

/// Mean over each `H x W` plane: `[N, C, H, W] -> [N, C]`. Charged one FLOP
/// per input element.
pub fn global_avg_pool_forward(x: &[f64], planes: usize, plane: usize) -> (Vec<f64>, u64) {
    let out = (0..planes)
        .map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    (out, (planes * plane) as u64)
}

pub fn global_avg_pool_backward(dout: &[f64], plane: usize) -> (Vec<f64>, u64) {
    let scale = 1.0 / plane as f64;
    let dx: Vec<f64> = dout
        .iter()
        .flat_map(|&g| std::iter::repeat(g * scale).take(plane))
        .collect();
    let n = dx.len() as u64;
    (dx, n)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::shape("global_avg_pool", format!("expected NCHW, got {:?}", x.shape())));
    };
    let (out, _) = global_avg_pool_forward(x.data(), n * c, h * w);
    Tensor::new(vec![n, c], out)
}
