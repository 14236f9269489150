use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returns activations and FLOPs (one per element).
pub fn relu_forward(x: &[f64]) -> (Vec<f64>, u64) {
    (x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(), x.len() as u64)
}

/// The subgradient at exactly zero is zero.
pub fn relu_backward(x: &[f64], dout: &[f64]) -> (Vec<f64>, u64) {
    let dx = x
        .iter()
        .zip(dout)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    (dx, x.len() as u64)
}

pub fn relu(x: &Tensor) -> Tensor {
    let (out, _) = relu_forward(x.data());
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "residual_add",
            format!("{:?} + {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `y = x W^T (+ b)` for `x: [N, in]`, `W: [out, in]`.
pub fn linear_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    n: usize,
    fan_in: usize,
    fan_out: usize,
) -> (Vec<f64>, u64) {
    let mut y = vec![0.0; n * fan_out];
    for r in 0..n {
        let xr = &x[r * fan_in..(r + 1) * fan_in];
        for o in 0..fan_out {
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            if let Some(b) = bias {
                acc += b[o];
            }
            y[r * fan_out + o] = acc;
        }
    }
    let mut flops = 2 * (n * fan_in * fan_out) as u64;
    if bias.is_some() {
        flops += (n * fan_out) as u64;
    }
    (y, flops)
}

pub struct LinearGrads {
    pub input: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
    pub input_flops: u64,
    pub weight_flops: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    has_bias: bool,
    n: usize,
    fan_in: usize,
    fan_out: usize,
    dout: &[f64],
    want_input: bool,
    want_weights: bool,
) -> LinearGrads {
    let mut g = LinearGrads {
        input: None,
        weights: None,
        bias: None,
        input_flops: 0,
        weight_flops: 0,
    };
    if want_input {
        let mut dx = vec![0.0; n * fan_in];
        for r in 0..n {
            let dxr = &mut dx[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let go = dout[r * fan_out + o];
                for (d, wv) in dxr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *d += go * wv;
                }
            }
        }
        g.input = Some(dx);
        g.input_flops = 2 * (n * fan_in * fan_out) as u64;
    }
    if want_weights {
        let mut dw = vec![0.0; fan_out * fan_in];
        for r in 0..n {
            let xr = &x[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let go = dout[r * fan_out + o];
                for (d, xv) in dw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                    *d += go * xv;
                }
            }
        }
        g.weights = Some(dw);
        g.weight_flops = 2 * (n * fan_in * fan_out) as u64;
        if has_bias {
            let mut db = vec![0.0; fan_out];
            for r in 0..n {
                for o in 0..fan_out {
                    db[o] += dout[r * fan_out + o];
                }
            }
            g.bias = Some(db);
            g.weight_flops += (n * fan_out) as u64;
        }
    }
    g
}

pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, fan_in, fan_out) = linear_dims(x.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let (y, _) = linear_forward(x.data(), weight.data(), bias.map(|b| b.data()), n, fan_in, fan_out);
    Tensor::new(vec![n, fan_out], y)
}

pub(crate) fn linear_dims(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    let (&[n, fan_in], &[fan_out, w_in]) = (x, w) else {
        return Err(Error::shape("linear", format!("input {x:?}, weight {w:?}; expected [N, in] and [out, in]")));
    };
    if fan_in != w_in {
        return Err(Error::shape("linear", format!("input width {fan_in} vs weight in_features {w_in}")));
    }
    if let Some(b) = b {
        if b != [fan_out] {
            return Err(Error::shape("linear", format!("bias {b:?} vs out_features {fan_out}")));
        }
    }
    Ok((n, fan_in, fan_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let (dx, _) = relu_backward(x.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(dx, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn add_doubles() {
        let a = Tensor::from_fn(&[2, 2], |i| i as f64 - 1.5);
        let twice = residual_add(&a, &a).unwrap();
        assert!(twice.data().iter().zip(a.data()).all(|(t, v)| *t == 2.0 * v));
        assert!(residual_add(&a, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn linear_with_bias() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 3.0, -1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, 0.0]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[1.5, 1.0]);
        assert!(linear(&x, &Tensor::zeros(&[2, 3]), None).is_err());
    }
}
