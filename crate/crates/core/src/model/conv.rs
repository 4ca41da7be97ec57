//! Direct (loop) 2-D convolution over CHW buffers in double precision.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    /// Output side for an input side, or `None` when the kernel does not fit.
    pub fn out_side(&self, side: usize) -> Option<usize> {
        let padded = side + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// `params` holds the weight tensor (out, in, k, k) followed by the bias.
pub fn conv_forward(
    spec: &ConvSpec,
    params: &[f64],
    input: &[f64],
    in_h: usize,
    in_w: usize,
    out: &mut Vec<f64>,
) -> (usize, usize) {
    let out_h = spec.out_side(in_h).expect("kernel larger than input");
    let out_w = spec.out_side(in_w).expect("kernel larger than input");
    let (weights, bias) = params.split_at(spec.weight_len());
    let k = spec.kernel;
    out.clear();
    out.resize(spec.out_channels * out_h * out_w, 0.0);
    for oc in 0..spec.out_channels {
        let plane = &mut out[oc * out_h * out_w..(oc + 1) * out_h * out_w];
        plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..spec.in_channels {
            let x = &input[ic * in_h * in_w..(ic + 1) * in_h * in_w];
            let w = &weights[(oc * spec.in_channels + ic) * k * k..][..k * k];
            for oy in 0..out_h {
                for ky in 0..k {
                    let Some(iy) = (oy * spec.stride + ky).checked_sub(spec.padding) else {
                        continue;
                    };
                    if iy >= in_h {
                        continue;
                    }
                    let row = &x[iy * in_w..(iy + 1) * in_w];
                    let wrow = &w[ky * k..(ky + 1) * k];
                    let orow = &mut plane[oy * out_w..(oy + 1) * out_w];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        let base = ox * spec.stride;
                        let mut acc = 0.0;
                        for (kx, &wv) in wrow.iter().enumerate() {
                            if let Some(ix) = (base + kx).checked_sub(spec.padding) {
                                if ix < in_w {
                                    acc += wv * row[ix];
                                }
                            }
                        }
                        *o += acc;
                    }
                }
            }
        }
    }
    (out_h, out_w)
}

/// Accumulates parameter gradients into `grad_params`; fills `grad_input` when given.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    spec: &ConvSpec,
    params: &[f64],
    input: &[f64],
    in_h: usize,
    in_w: usize,
    grad_out: &[f64],
    grad_params: &mut [f64],
    grad_input: Option<&mut Vec<f64>>,
) {
    let out_h = spec.out_side(in_h).expect("kernel larger than input");
    let out_w = spec.out_side(in_w).expect("kernel larger than input");
    let k = spec.kernel;
    let wlen = spec.weight_len();
    let (weights, _) = params.split_at(wlen);
    let (gw, gb) = grad_params.split_at_mut(wlen);
    let mut grad_input = grad_input;
    if let Some(gi) = grad_input.as_deref_mut() {
        gi.clear();
        gi.resize(spec.in_channels * in_h * in_w, 0.0);
    }
    for oc in 0..spec.out_channels {
        let g = &grad_out[oc * out_h * out_w..(oc + 1) * out_h * out_w];
        gb[oc] += g.iter().sum::<f64>();
        for ic in 0..spec.in_channels {
            let x = &input[ic * in_h * in_w..(ic + 1) * in_h * in_w];
            let woff = (oc * spec.in_channels + ic) * k * k;
            for oy in 0..out_h {
                for ky in 0..k {
                    let Some(iy) = (oy * spec.stride + ky).checked_sub(spec.padding) else {
                        continue;
                    };
                    if iy >= in_h {
                        continue;
                    }
                    let grow = &g[oy * out_w..(oy + 1) * out_w];
                    for kx in 0..k {
                        let wi = woff + ky * k + kx;
                        let mut acc = 0.0;
                        for (ox, &gv) in grow.iter().enumerate() {
                            if let Some(ix) = (ox * spec.stride + kx).checked_sub(spec.padding) {
                                if ix < in_w {
                                    acc += gv * x[iy * in_w + ix];
                                }
                            }
                        }
                        gw[wi] += acc;
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let wv = weights[wi];
                            let gplane = &mut gi[ic * in_h * in_w..(ic + 1) * in_h * in_w];
                            for (ox, &gv) in grow.iter().enumerate() {
                                if let Some(ix) = (ox * spec.stride + kx).checked_sub(spec.padding)
                                {
                                    if ix < in_w {
                                        gplane[iy * in_w + ix] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
