//! Layer definitions, shape inference and the forward/backward kernels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// `y = W x + b` on a flat vector, `W` stored `[outputs, inputs]`.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Cubic-kernel 3D convolution over `[C, D, H, W]`, zero padding.
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv3d { .. } => "conv3d",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Flatten => "flatten",
            Layer::Reshape { .. } => "reshape",
        }
    }

    /// `(weights, biases)` parameter counts.
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            Layer::Dense { inputs, outputs } => (inputs * outputs, outputs),
            Layer::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel.pow(3), out_channels),
            _ => (0, 0),
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv3d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel.pow(3),
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || {
            Error::Shape(format!(
                "{} layer cannot take input of shape {input:?}",
                self.kind()
            ))
        };
        match self {
            Layer::Dense { inputs, outputs } => {
                if input.len() != 1 || input[0] != *inputs || *outputs == 0 {
                    return Err(mismatch());
                }
                Ok(vec![*outputs])
            }
            Layer::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 4 || input[0] != *in_channels || *kernel == 0 || *stride == 0 {
                    return Err(mismatch());
                }
                let mut out = vec![*out_channels];
                for &n in &input[1..] {
                    let padded = n + 2 * padding;
                    if padded < *kernel {
                        return Err(mismatch());
                    }
                    out.push((padded - kernel) / stride + 1);
                }
                Ok(out)
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(mismatch());
                }
                Ok(shape.clone())
            }
        }
    }
}

/// Geometry of one conv3d application.
pub(crate) struct ConvGeom {
    pub ic: usize,
    pub oc: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Output indices `o` with `o*s + kk - p` inside `[0, n)`.
    #[inline]
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let n = self.input[axis];
        let on = self.output[axis];
        let lo = if kk >= self.p {
            0
        } else {
            (self.p - kk).div_ceil(self.s)
        };
        let hi = if n + self.p <= kk {
            0
        } else {
            ((n - 1 + self.p - kk) / self.s + 1).min(on)
        };
        (lo, hi.max(lo))
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.ic * self.k.pow(3)
    }

    /// Visits every in-bounds (patch row, output position, input index) triple.
    ///
    /// Patch rows are ordered `(ic, kd, kh, kw)`, matching the weight layout.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, wd] = self.input;
        let [_, oh, ow] = self.output;
        let (k, s, p) = (self.k, self.s, self.p);
        for ic in 0..self.ic {
            let base = ic * d * h * wd;
            for kd in 0..k {
                let (d0, d1) = self.valid(0, kd);
                for kh in 0..k {
                    let (h0, h1) = self.valid(1, kh);
                    for kw in 0..k {
                        let (w0, w1) = self.valid(2, kw);
                        let r = ((ic * k + kd) * k + kh) * k + kw;
                        for zo in d0..d1 {
                            let zi = zo * s + kd - p;
                            for yo in h0..h1 {
                                let yi = yo * s + kh - p;
                                let orow = (zo * oh + yo) * ow;
                                let irow = base + (zi * h + yi) * wd + kw;
                                for xo in w0..w1 {
                                    f(r, orow + xo, irow + xo * s - p);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfolded input, `P x R` column-major: column `r` holds patch row `r`
    /// at every output position, zero where the tap falls in the padding.
    fn im2col(&self, x: &[f64]) -> DMatrix<f64> {
        let pl = self.out_len();
        let mut cols = vec![0.0; pl * self.patch_len()];
        self.for_each_tap(|r, o, i| cols[r * pl + o] = x[i]);
        DMatrix::from_vec(pl, self.patch_len(), cols)
    }

    /// Weights viewed as `R x oc` (the stored `[oc, R]` layout, transposed).
    fn weight_matrix(&self, w: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.patch_len(), self.oc, w)
    }

    pub fn forward(&self, x: &[f64], w: &[f64], b: &[f64], y: &mut [f64]) {
        let pl = self.out_len();
        // (P x R)(R x oc) is laid out exactly like `y`
        let out = self.im2col(x) * self.weight_matrix(w);
        for (oc, (yo, col)) in y
            .chunks_exact_mut(pl)
            .zip(out.as_slice().chunks_exact(pl))
            .enumerate()
        {
            for (t, v) in yo.iter_mut().zip(col) {
                *t = v + b[oc];
            }
        }
    }

    /// Accumulates input gradients and (optionally) weight/bias gradients.
    pub fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        gy: &[f64],
        gx: &mut [f64],
        gwb: Option<(&mut [f64], &mut [f64])>,
    ) {
        let pl = self.out_len();
        let g = DMatrix::from_column_slice(pl, self.oc, gy);
        if let Some((gw, gb)) = gwb {
            let cols = self.im2col(x);
            let gwm = cols.tr_mul(&g);
            for (a, v) in gw.iter_mut().zip(gwm.as_slice()) {
                *a += v;
            }
            for (oc, go) in gy.chunks_exact(pl).enumerate() {
                gb[oc] += go.iter().sum::<f64>();
            }
        }
        let gcols = g * self.weight_matrix(w).transpose();
        let gc = gcols.as_slice();
        self.for_each_tap(|r, o, i| gx[i] += gc[r * pl + o]);
    }
}

/// Dot product with four interleaved partial sums (fixed order, so still
/// deterministic) to break the add dependency chain.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn dense_forward(x: &[f64], w: &[f64], b: &[f64], y: &mut [f64]) {
    let n_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
    }
}

pub(crate) fn dense_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    gwb: Option<(&mut [f64], &mut [f64])>,
) {
    let n_in = x.len();
    for (o, &g) in gy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        for (gxi, wi) in gx.iter_mut().zip(row) {
            *gxi += g * wi;
        }
    }
    if let Some((gw, gb)) = gwb {
        for (o, &g) in gy.iter().enumerate() {
            gb[o] += g;
            if g == 0.0 {
                continue;
            }
            for (gwi, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *gwi += g * xi;
            }
        }
    }
}
