//! Numeric kernels shared by the `f32` engine and the `f64` shadow evaluator.
//!
//! All activations are row-major with the batch as the leading extent; image
//! tensors are NCHW.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

pub trait Real: Float + AddAssign + Sum + Debug + Send + Sync + 'static {
    fn of(x: f32) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f32) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn of(x: f32) -> Self {
        f64::from(x)
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Tracks the smallest distance of any evaluated point to a kink (ReLU at zero,
/// max-pool ties). Finite-difference checks are only meaningful when that
/// distance exceeds the step.
#[derive(Debug, Clone, Copy)]
pub struct KinkProbe {
    pub margin: f64,
}

impl Default for KinkProbe {
    fn default() -> Self {
        Self {
            margin: f64::INFINITY,
        }
    }
}

impl KinkProbe {
    fn observe(&mut self, d: f64) {
        if d < self.margin {
            self.margin = d;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel || self.stride == 0 {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

pub fn dense<T: Real>(x: &[T], batch: usize, w: &[T], b: &[T], inputs: usize, outputs: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * outputs);
    for n in 0..batch {
        let row = &x[n * inputs..(n + 1) * inputs];
        for o in 0..outputs {
            let wr = &w[o * inputs..(o + 1) * inputs];
            let mut acc = b[o];
            for (a, c) in wr.iter().zip(row) {
                acc += *a * *c;
            }
            y.push(acc);
        }
    }
    y
}

pub struct DenseGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn dense_backward<T: Real>(
    x: &[T],
    dy: &[T],
    batch: usize,
    w: &[T],
    inputs: usize,
    outputs: usize,
    want_dx: bool,
) -> DenseGrads<T> {
    let mut dw = vec![T::zero(); outputs * inputs];
    let mut db = vec![T::zero(); outputs];
    let mut dx = want_dx.then(|| vec![T::zero(); batch * inputs]);
    for n in 0..batch {
        let row = &x[n * inputs..(n + 1) * inputs];
        for o in 0..outputs {
            let g = dy[n * outputs + o];
            db[o] += g;
            let dwr = &mut dw[o * inputs..(o + 1) * inputs];
            for (d, xv) in dwr.iter_mut().zip(row) {
                *d += g * *xv;
            }
            if let Some(dx) = dx.as_mut() {
                let wr = &w[o * inputs..(o + 1) * inputs];
                let dxr = &mut dx[n * inputs..(n + 1) * inputs];
                for (d, wv) in dxr.iter_mut().zip(wr) {
                    *d += g * *wv;
                }
            }
        }
    }
    DenseGrads { dx, dw, db }
}

pub fn conv2d<T: Real>(x: &[T], batch: usize, h: usize, w: usize, wt: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw(h, w).expect("conv geometry validated at construction");
    let (c, o, k) = (g.in_channels, g.out_channels, g.kernel);
    let mut y = vec![T::zero(); batch * o * ho * wo];
    for n in 0..batch {
        let xn = &x[n * c * h * w..(n + 1) * c * h * w];
        for oc in 0..o {
            let yo = &mut y[(n * o + oc) * ho * wo..(n * o + oc + 1) * ho * wo];
            for v in yo.iter_mut() {
                *v = bias[oc];
            }
            for ic in 0..c {
                let xc = &xn[ic * h * w..(ic + 1) * h * w];
                let wk = &wt[(oc * c + ic) * k * k..(oc * c + ic + 1) * k * k];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wk[ky * k + kx] * xc[iy as usize * w + ix as usize];
                            }
                        }
                        yo[oy * wo + ox] += acc;
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    dy: &[T],
    batch: usize,
    h: usize,
    w: usize,
    wt: &[T],
    g: &ConvGeom,
    want_dx: bool,
) -> DenseGrads<T> {
    let (ho, wo) = g.out_hw(h, w).expect("conv geometry validated at construction");
    let (c, o, k) = (g.in_channels, g.out_channels, g.kernel);
    let mut dw = vec![T::zero(); o * c * k * k];
    let mut db = vec![T::zero(); o];
    let mut dx = want_dx.then(|| vec![T::zero(); batch * c * h * w]);
    for n in 0..batch {
        for oc in 0..o {
            let dyo = &dy[(n * o + oc) * ho * wo..(n * o + oc + 1) * ho * wo];
            db[oc] += dyo.iter().copied().sum();
            for ic in 0..c {
                let xbase = (n * c + ic) * h * w;
                let wbase = (oc * c + ic) * k * k;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gy = dyo[oy * wo + ox];
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = xbase + iy as usize * w + ix as usize;
                                dw[wbase + ky * k + kx] += gy * x[xi];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += gy * wt[wbase + ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    DenseGrads { dx, dw, db }
}

pub fn relu<T: Real>(x: &[T], probe: Option<&mut KinkProbe>) -> Vec<T> {
    if let Some(p) = probe {
        for v in x {
            p.observe(v.abs().to_f64());
        }
    }
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub fn relu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// Non-overlapping `size`x`size` max pooling; trailing rows/columns that do not
/// fill a window are dropped.
pub fn maxpool<T: Real>(
    x: &[T],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    size: usize,
    mut probe: Option<&mut KinkProbe>,
) -> Vec<T> {
    let (ho, wo) = (h / size, w / size);
    let mut y = Vec::with_capacity(batch * c * ho * wo);
    for nc in 0..batch * c {
        let plane = &x[nc * h * w..(nc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut second = T::neg_infinity();
                for ky in 0..size {
                    for kx in 0..size {
                        let v = plane[(oy * size + ky) * w + ox * size + kx];
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                if let Some(p) = probe.as_deref_mut() {
                    if size * size > 1 {
                        p.observe((best - second).to_f64());
                    }
                }
                y.push(best);
            }
        }
    }
    y
}

pub fn maxpool_backward<T: Real>(x: &[T], dy: &[T], batch: usize, c: usize, h: usize, w: usize, size: usize) -> Vec<T> {
    let (ho, wo) = (h / size, w / size);
    let mut dx = vec![T::zero(); x.len()];
    for nc in 0..batch * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut arg = base + oy * size * w + ox * size;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = base + (oy * size + ky) * w + ox * size + kx;
                        if x[i] > x[arg] {
                            arg = i;
                        }
                    }
                }
                dx[arg] += dy[(nc * ho + oy) * wo + ox];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_copies_input() {
        let g = ConvGeom {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0;
        let y = conv2d(&x, 1, 4, 4, &k, &[0.0], &g);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride_and_padding_shape() {
        let g = ConvGeom {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!(g.out_hw(8, 8), Some((4, 4)));
        assert_eq!(g.out_hw(1, 1), Some((1, 1)));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = [1.0f32, 5.0, 2.0, 3.0];
        let y = maxpool(&x, 1, 1, 2, 2, 2, None);
        assert_eq!(y, vec![5.0]);
        let dx = maxpool_backward(&x, &[2.0], 1, 1, 2, 2, 2);
        assert_eq!(dx, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn probe_sees_relu_margin() {
        let mut p = KinkProbe::default();
        relu(&[0.5f64, -0.25, 2.0], Some(&mut p));
        assert_eq!(p.margin, 0.25);
    }
}
