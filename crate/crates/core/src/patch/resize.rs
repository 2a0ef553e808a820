//! Bilinear resampling (half-pixel centres, no corner alignment) and its adjoint.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_taps(input: usize, output: usize) -> AxisTaps {
    let scale = input as f64 / output as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = if lo + 1 < input { lo + 1 } else { lo };
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(src - lo as f64);
    }
    taps
}

/// Resizes every channel to `height`×`width`. Equal sizes return an exact copy.
pub fn resize_bilinear(t: &Tensor, height: usize, width: usize) -> Tensor {
    if t.height() == height && t.width() == width {
        return t.clone();
    }
    let ty = axis_taps(t.height(), height);
    let tx = axis_taps(t.width(), width);
    Tensor::from_fn(t.channels(), height, width, |c, y, x| {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
        let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
        let top = (1.0 - fx) * t.get(c, y0, x0) + fx * t.get(c, y0, x1);
        let bottom = (1.0 - fx) * t.get(c, y1, x0) + fx * t.get(c, y1, x1);
        (1.0 - fy) * top + fy * bottom
    })
}

/// Adjoint of [`resize_bilinear`]: maps an output-space gradient back to an
/// input of size `height`×`width`.
pub fn resize_bilinear_backward(grad: &Tensor, height: usize, width: usize) -> Tensor {
    if grad.height() == height && grad.width() == width {
        return grad.clone();
    }
    let ty = axis_taps(height, grad.height());
    let tx = axis_taps(width, grad.width());
    let mut out = Tensor::zeros(grad.channels(), height, width);
    for c in 0..grad.channels() {
        for y in 0..grad.height() {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            for x in 0..grad.width() {
                let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
                let g = grad.get(c, y, x);
                out.add_at(c, y0, x0, g * (1.0 - fy) * (1.0 - fx));
                out.add_at(c, y0, x1, g * (1.0 - fy) * fx);
                out.add_at(c, y1, x0, g * fy * (1.0 - fx));
                out.add_at(c, y1, x1, g * fy * fx);
            }
        }
    }
    out
}
