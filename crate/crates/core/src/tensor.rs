//! Dense channel-major image and feature tensors plus the resampling
//! primitives shared by augmentation, cropping and decoding.

use serde::{Deserialize, Serialize};

/// A `C×H×W` tensor stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.map_inplace(|v| v * s);
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Axis-aligned pixel rectangle: `x` is the column, `y` the row of the
/// top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub h: usize,
    pub w: usize,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x: 0,
            y: 0,
            h: height,
            w: width,
        }
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn fits_within(&self, height: usize, width: usize) -> bool {
        self.h > 0 && self.w > 0 && self.y + self.h <= height && self.x + self.w <= width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    /// Grows the box symmetrically to at least `min` pixels per side, then
    /// shifts it back inside a `height × width` image.
    pub fn grown_to(&self, min: usize, height: usize, width: usize) -> Self {
        let (y, h) = grow_axis(self.y, self.h, min.min(height), height);
        let (x, w) = grow_axis(self.x, self.w, min.min(width), width);
        Self { x, y, h, w }
    }
}

fn grow_axis(start: usize, len: usize, min: usize, limit: usize) -> (usize, usize) {
    if len >= min {
        return (start, len);
    }
    let extra = min - len;
    let before = extra / 2;
    let s = start.saturating_sub(before);
    (s.min(limit - min), min)
}

/// Source coordinate for output index `o` under half-pixel-centre
/// resampling of a span `[start, start + len)` onto `out` samples.
#[inline]
fn source_coord(o: usize, start: usize, len: usize, out: usize) -> f64 {
    let s = (o as f64 + 0.5) * (len as f64 / out as f64) - 0.5;
    let s = s.clamp(0.0, (len - 1) as f64);
    start as f64 + s
}

/// Bilinearly resamples `region` of `src` to `out_h × out_w`. Samples are
/// clamped to the region, so no pixel outside it contributes.
pub fn resize_bilinear_region(src: &Tensor3, region: CropBox, out_h: usize, out_w: usize) -> Tensor3 {
    assert!(region.fits_within(src.height, src.width), "region outside tensor");
    let mut out = Tensor3::zeros(src.channels, out_h, out_w);
    let ys: Vec<(usize, usize, f64)> = (0..out_h)
        .map(|o| lerp_taps(source_coord(o, region.y, region.h, out_h), region.y + region.h - 1))
        .collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|o| lerp_taps(source_coord(o, region.x, region.w, out_w), region.x + region.w - 1))
        .collect();
    for c in 0..src.channels {
        let plane = src.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &plane[y0 * src.width..(y0 + 1) * src.width];
            let r1 = &plane[y1 * src.width..(y1 + 1) * src.width];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[inline]
fn lerp_taps(s: f64, max: usize) -> (usize, usize, f64) {
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(max);
    (i0, i1, s - i0 as f64)
}

pub fn resize_bilinear(src: &Tensor3, out_h: usize, out_w: usize) -> Tensor3 {
    resize_bilinear_region(src, CropBox::full(src.height, src.width), out_h, out_w)
}

/// Adjoint of [`resize_bilinear`]: scatters `grad_out` back onto a
/// `src_h × src_w` grid.
pub fn resize_bilinear_backward(grad_out: &Tensor3, src_h: usize, src_w: usize) -> Tensor3 {
    let (out_h, out_w) = (grad_out.height, grad_out.width);
    let mut g = Tensor3::zeros(grad_out.channels, src_h, src_w);
    let ys: Vec<_> = (0..out_h)
        .map(|o| lerp_taps(source_coord(o, 0, src_h, out_h), src_h - 1))
        .collect();
    let xs: Vec<_> = (0..out_w)
        .map(|o| lerp_taps(source_coord(o, 0, src_w, out_w), src_w - 1))
        .collect();
    for c in 0..grad_out.channels {
        let go = grad_out.plane(c);
        let dst = g.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = go[oy * out_w + ox];
                dst[y0 * src_w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * src_w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * src_w + x0] += v * fy * (1.0 - fx);
                dst[y1 * src_w + x1] += v * fy * fx;
            }
        }
    }
    g
}

/// Nearest-neighbour index for output `o` on the same grid convention as
/// the bilinear path.
#[inline]
pub(crate) fn nearest_index(o: usize, start: usize, len: usize, out: usize) -> usize {
    let s = ((o as f64 + 0.5) * (len as f64 / out as f64)).floor() as usize;
    start + s.min(len - 1)
}

/// Nearest-neighbour resampling of `region` of a single-plane label grid.
pub fn resize_nearest_labels(
    labels: &[u8],
    width: usize,
    region: CropBox,
    out_h: usize,
    out_w: usize,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    let xs: Vec<usize> = (0..out_w)
        .map(|o| nearest_index(o, region.x, region.w, out_w))
        .collect();
    for oy in 0..out_h {
        let y = nearest_index(oy, region.y, region.h, out_h);
        let row = &labels[y * width..(y + 1) * width];
        out.extend(xs.iter().map(|&x| row[x]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor3 {
        let data = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        Tensor3::from_vec(c, h, w, data)
    }

    #[test]
    fn identity_resize_is_bit_exact() {
        let t = ramp(3, 9, 7);
        assert_eq!(resize_bilinear(&t, 9, 7), t);
    }

    #[test]
    fn single_pixel_region_is_uniform() {
        let t = ramp(2, 6, 6);
        let out = resize_bilinear_region(&t, CropBox { x: 4, y: 1, h: 1, w: 1 }, 5, 5);
        for c in 0..2 {
            assert!(out.plane(c).iter().all(|&v| v == t.get(c, 1, 4)));
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let x = ramp(2, 4, 5);
        let y_grad = ramp(2, 11, 8);
        let y = resize_bilinear(&x, 11, 8);
        let lhs: f64 = y.data.iter().zip(&y_grad.data).map(|(a, b)| a * b).sum();
        let xg = resize_bilinear_backward(&y_grad, 4, 5);
        let rhs: f64 = x.data.iter().zip(&xg.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn nearest_identity() {
        let labels: Vec<u8> = (0..30).map(|i| (i % 7) as u8).collect();
        let out = resize_nearest_labels(&labels, 6, CropBox::full(5, 6), 5, 6);
        assert_eq!(out, labels);
    }

    #[test]
    fn grow_clamps_inside_image() {
        let b = CropBox { x: 0, y: 62, h: 1, w: 1 }.grown_to(8, 64, 64);
        assert_eq!(b, CropBox { x: 0, y: 56, h: 8, w: 8 });
        let b = CropBox { x: 30, y: 30, h: 2, w: 20 }.grown_to(8, 64, 64);
        assert_eq!(b, CropBox { x: 30, y: 27, h: 8, w: 20 });
        let b = CropBox { x: 1, y: 1, h: 1, w: 1 }.grown_to(8, 4, 4);
        assert_eq!(b, CropBox::full(4, 4));
    }
}
