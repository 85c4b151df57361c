//! Forward and backward passes for single samples.
//!
//! Volumes are laid out `[channel][row][col][depth]`. Weights are stored
//! `[out][in][kh][kw][kd]` for convolutions and `[out][in]` for dense layers.

/// A 3-D convolution with zero padding on the two spatial axes, no padding
/// along depth, unit spatial stride and a configurable depth stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_shape: (usize, usize, usize),
    pub kernel: (usize, usize, usize),
    pub pad: (usize, usize),
    pub depth_stride: usize,
}

impl Conv3d {
    pub fn out_shape(&self) -> (usize, usize, usize) {
        let (h, w, d) = self.in_shape;
        let (kh, kw, kd) = self.kernel;
        (
            h + 2 * self.pad.0 + 1 - kh,
            w + 2 * self.pad.1 + 1 - kw,
            (d - kd) / self.depth_stride + 1,
        )
    }

    pub fn in_len(&self) -> usize {
        let (h, w, d) = self.in_shape;
        self.in_channels * h * w * d
    }

    pub fn out_len(&self) -> usize {
        let (h, w, d) = self.out_shape();
        self.out_channels * h * w * d
    }

    pub fn weight_len(&self) -> usize {
        let (kh, kw, kd) = self.kernel;
        self.out_channels * self.in_channels * kh * kw * kd
    }

    pub fn fan_in(&self) -> usize {
        let (kh, kw, kd) = self.kernel;
        self.in_channels * kh * kw * kd
    }

    /// Visits every (output index, input index, weight index) triple that
    /// contributes to the convolution.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (h, w, d) = self.in_shape;
        let (oh, ow, od) = self.out_shape();
        let (kh, kw, kd) = self.kernel;
        let (ph, pw) = (self.pad.0 as isize, self.pad.1 as isize);
        for oc in 0..self.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let out_base = ((oc * oh + y) * ow + x) * od;
                    for ic in 0..self.in_channels {
                        for i in 0..kh {
                            let r = y as isize + i as isize - ph;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let c = x as isize + j as isize - pw;
                                if c < 0 || c >= w as isize {
                                    continue;
                                }
                                let in_base = ((ic * h + r as usize) * w + c as usize) * d;
                                let w_base = (((oc * self.in_channels + ic) * kh + i) * kw + j) * kd;
                                f(out_base, in_base, w_base, od);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_len());
        let (oh, ow, od) = self.out_shape();
        let kd = self.kernel.2;
        let s = self.depth_stride;
        let mut out = vec![0.0; self.out_len()];
        for (oc, chunk) in out.chunks_exact_mut(oh * ow * od).enumerate() {
            chunk.fill(bias[oc]);
        }
        self.for_each_tap(|out_base, in_base, w_base, od| {
            let wk = &weight[w_base..w_base + kd];
            for z in 0..od {
                let xs = &input[in_base + z * s..in_base + z * s + kd];
                let acc: f64 = wk.iter().zip(xs).map(|(a, b)| a * b).sum();
                out[out_base + z] += acc;
            }
        });
        out
    }

    /// Accumulates weight and bias gradients; returns the input gradient
    /// when `want_input` is set.
    pub fn backward(
        &self,
        input: &[f64],
        weight: &[f64],
        grad_out: &[f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let (oh, ow, od) = self.out_shape();
        let kd = self.kernel.2;
        let s = self.depth_stride;
        for (oc, chunk) in grad_out.chunks_exact(oh * ow * od).enumerate() {
            grad_bias[oc] += chunk.iter().sum::<f64>();
        }
        let mut grad_in = want_input.then(|| vec![0.0; self.in_len()]);
        self.for_each_tap(|out_base, in_base, w_base, od| {
            for z in 0..od {
                let g = grad_out[out_base + z];
                if g == 0.0 {
                    continue;
                }
                let lo = in_base + z * s;
                for k in 0..kd {
                    grad_weight[w_base + k] += g * input[lo + k];
                }
                if let Some(gi) = grad_in.as_mut() {
                    for k in 0..kd {
                        gi[lo + k] += g * weight[w_base + k];
                    }
                }
            }
        });
        grad_in
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn forward(&self, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        weight
            .chunks_exact(self.inputs)
            .zip(bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn backward(
        &self,
        x: &[f64],
        weight: &[f64],
        grad_out: &[f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad_bias[o] += g;
            let row = &weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad_weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Masks `grad` by the derivative of ReLU, read off its output.
pub fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}
