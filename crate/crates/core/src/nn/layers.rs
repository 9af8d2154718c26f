use std::ops::Range;

use crate::tensor::Tensor3;

/// 2-D convolution with square kernel, zero padding and optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Range<usize>,
    pub bias: Option<Range<usize>>,
}

impl Conv2d {
    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Output indices `o` whose input tap `o * stride + k - padding` lies in
    /// `[0, len)`.
    #[inline]
    fn valid_outputs(&self, k: usize, len: usize, out: usize) -> Range<usize> {
        let (s, p) = (self.stride, self.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // largest o with o*s + k - p <= len - 1
        let hi = if len + p > k {
            ((len - 1 + p - k) / s + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    pub fn forward(&self, params: &[f64], x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels, self.in_ch);
        let (oh, ow) = self.out_size(x.height, x.width);
        let mut y = Tensor3::zeros(self.out_ch, oh, ow);
        let w = &params[self.weight.clone()];
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding);
        let (ih, iw) = (x.height, x.width);
        for oc in 0..self.out_ch {
            let out = y.plane_mut(oc);
            if let Some(b) = &self.bias {
                out.fill(params[b.start + oc]);
            }
            for ic in 0..self.in_ch {
                let inp = x.plane(ic);
                for ky in 0..k {
                    let oys = self.valid_outputs(ky, ih, oh);
                    for kx in 0..k {
                        let wv = w[((oc * self.in_ch + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let oxs = self.valid_outputs(kx, iw, ow);
                        for oy in oys.clone() {
                            let iy = oy * s + ky - p;
                            let row = &inp[iy * iw..(iy + 1) * iw];
                            let orow = &mut out[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let off = oxs.start + kx - p;
                                for (o, i) in orow[oxs.clone()]
                                    .iter_mut()
                                    .zip(&row[off..off + oxs.len()])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in oxs.clone() {
                                    orow[ox] += wv * row[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Back-propagates `dy`. Accumulates parameter gradients into `grad`
    /// when given, and returns the input gradient when `need_dx`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor3,
        dy: &Tensor3,
        mut grad: Option<&mut [f64]>,
        need_dx: bool,
    ) -> Option<Tensor3> {
        let w = &params[self.weight.clone()];
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding);
        let (ih, iw) = (x.height, x.width);
        let (oh, ow) = (dy.height, dy.width);
        let mut dx = need_dx.then(|| Tensor3::zeros(self.in_ch, ih, iw));
        for oc in 0..self.out_ch {
            let g = dy.plane(oc);
            if let (Some(grad), Some(b)) = (grad.as_deref_mut(), &self.bias) {
                grad[b.start + oc] += g.iter().sum::<f64>();
            }
            for ic in 0..self.in_ch {
                let inp = x.plane(ic);
                for ky in 0..k {
                    let oys = self.valid_outputs(ky, ih, oh);
                    for kx in 0..k {
                        let widx = ((oc * self.in_ch + ic) * k + ky) * k + kx;
                        let wv = w[widx];
                        let oxs = self.valid_outputs(kx, iw, ow);
                        let mut acc = 0.0;
                        for oy in oys.clone() {
                            let iy = oy * s + ky - p;
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            let row = &inp[iy * iw..(iy + 1) * iw];
                            for ox in oxs.clone() {
                                acc += grow[ox] * row[ox * s + kx - p];
                            }
                            if let Some(dx) = dx.as_mut() {
                                let drow = &mut dx.plane_mut(ic)[iy * iw..(iy + 1) * iw];
                                for ox in oxs.clone() {
                                    drow[ox * s + kx - p] += wv * grow[ox];
                                }
                            }
                        }
                        if let Some(grad) = grad.as_deref_mut() {
                            grad[self.weight.start + widx] += acc;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer, weight stored `out × in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Linear {
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.weight.clone()];
        let b = &params[self.bias.clone()];
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        dy: &[f64],
        grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let w = &params[self.weight.clone()];
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            for (d, wv) in dx.iter_mut().zip(row) {
                *d += g * wv;
            }
        }
        if let Some(grad) = grad {
            for (o, &g) in dy.iter().enumerate() {
                grad[self.bias.start + o] += g;
                let base = self.weight.start + o * self.inputs;
                for (gw, xv) in grad[base..base + self.inputs].iter_mut().zip(x) {
                    *gw += g * xv;
                }
            }
        }
        dx
    }
}

pub fn relu(t: &mut Tensor3) {
    t.map_inplace(|v| v.max(0.0));
}

/// Masks `dy` by the positive entries of the ReLU output `y`.
pub fn relu_backward(y: &Tensor3, dy: &mut Tensor3) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}
