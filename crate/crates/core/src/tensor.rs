//! Dense row-major `f64` tensors and the raw kernels the tape records.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional tensor holding `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Logical rows/columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            }),
        }
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2("matmul")?;
    let (k2, m) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2("transpose")?;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data[i * m + j];
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise softmax of a rank-2 tensor, max-subtracted.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (n, c) = x.dims2("softmax")?;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &x.data[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in &mut out[i * c..(i + 1) * c] {
            *o /= total;
        }
    }
    Ok(Tensor {
        shape: vec![n, c],
        data: out,
    })
}

/// Row-wise log-softmax of a rank-2 tensor, max-subtracted.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (n, c) = x.dims2("log_softmax")?;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &x.data[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Ok(Tensor {
        shape: vec![n, c],
        data: out,
    })
}

/// `-log softmax(logits)[label]` for a single row of logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Geometry of a valid (unpadded) 2-D convolution over a single `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernel.to_vec(),
        };
        let (&[c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(mismatch());
        };
        if c != kc || kh != kw || kh > h || kw > w || stride == 0 {
            return Err(mismatch());
        }
        Ok(ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: kh,
            stride,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.in_channels, self.height, self.width]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.out_height(), self.out_width()]
    }

    /// Visits every `(output, kernel, input)` flat index triple of the
    /// convolution sum `y[o,i,j] += k[o,c,p,q] * x[c, s*i+p, s*j+q]`.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo, k, s) = (self.out_height(), self.out_width(), self.kernel, self.stride);
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for p in 0..k {
                    for q in 0..k {
                        let ki = ((o * self.in_channels + c) * k + p) * k + q;
                        for i in 0..ho {
                            let xrow = (c * self.height + s * i + p) * self.width + q;
                            let yrow = (o * ho + i) * wo;
                            for j in 0..wo {
                                f(yrow + j, ki, xrow + s * j);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Forward convolution: output from input and kernel.
    pub fn output(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_channels * self.out_height() * self.out_width()];
        self.for_each(|yi, ki, xi| y[yi] += kernel[ki] * input[xi]);
        y
    }

    /// Input-shaped contraction of the kernel with an output-shaped tensor.
    pub fn input_grad(&self, kernel: &[f64], out: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.in_channels * self.height * self.width];
        self.for_each(|yi, ki, xi| x[xi] += kernel[ki] * out[yi]);
        x
    }

    /// Kernel-shaped contraction of the input with an output-shaped tensor.
    pub fn kernel_grad(&self, input: &[f64], out: &[f64]) -> Vec<f64> {
        let mut k = vec![0.0; self.out_channels * self.in_channels * self.kernel * self.kernel];
        self.for_each(|yi, ki, xi| k[ki] += input[xi] * out[yi]);
        k
    }
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride)?;
    Tensor::new(geo.output_shape(), geo.output(input.data(), kernel.data()))
}
