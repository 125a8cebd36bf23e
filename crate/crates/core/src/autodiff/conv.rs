//! Stride-1, zero-padded "same" convolution kernels.
//!
//! Each batch item is lowered to a column matrix (`im2col`) and multiplied
//! with the flattened weight. Batch items are independent and may run on
//! worker threads; weight gradients are summed over items in index order so
//! the result does not depend on the thread count.

use rayon::prelude::*;

use crate::runtime;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// `c = a · b` (+ `beta · c`), with each operand optionally transposed.
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`, all row-major before transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are exactly the sizes implied by (m, k, n) and the strides
    // above address only elements inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let (h, w, k) = (d.h, d.w, d.k);
    let pad = (k / 2) as isize;
    let hw = d.hw();
    for ci in 0..d.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(0.0);
                    let s0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                    drow[x1..].fill(0.0);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, dx_out: &mut [f64]) {
    let (h, w, k) = (d.h, d.w, d.k);
    let pad = (k / 2) as isize;
    let hw = d.hw();
    for ci in 0..d.cin {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (o, v) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn forward_item(x: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims, out: &mut [f64]) {
    let hw = d.hw();
    for (co, plane) in out.chunks_mut(hw).enumerate() {
        plane.fill(bias[co]);
    }
    if d.k == 1 {
        gemm(d.cout, d.cin, hw, weight, false, x, false, 1.0, out);
    } else {
        let mut cols = vec![0.0; d.ckk() * hw];
        im2col(x, d, &mut cols);
        gemm(d.cout, d.ckk(), hw, weight, false, &cols, false, 1.0, out);
    }
}

pub(crate) fn forward(x: &[f64], weight: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let in_item = d.cin * d.hw();
    let out_item = d.cout * d.hw();
    let mut out = vec![0.0; d.n * out_item];
    if runtime::is_serial() || d.n == 1 {
        for (b, o) in out.chunks_mut(out_item).enumerate() {
            forward_item(&x[b * in_item..(b + 1) * in_item], weight, bias, &d, o);
        }
    } else {
        out.par_chunks_mut(out_item).enumerate().for_each(|(b, o)| {
            forward_item(&x[b * in_item..(b + 1) * in_item], weight, bias, &d, o);
        });
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-item gradient: (d input, d weight).
fn backward_item(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    d: &ConvDims,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let hw = d.hw();
    let ckk = d.ckk();
    let mut dw = vec![0.0; d.cout * ckk];
    let dx = if d.k == 1 {
        gemm(d.cout, hw, ckk, dout, false, x, true, 0.0, &mut dw);
        need_input.then(|| {
            let mut dx = vec![0.0; d.cin * hw];
            gemm(ckk, d.cout, hw, weight, true, dout, false, 0.0, &mut dx);
            dx
        })
    } else {
        let mut cols = vec![0.0; ckk * hw];
        im2col(x, d, &mut cols);
        gemm(d.cout, hw, ckk, dout, false, &cols, true, 0.0, &mut dw);
        need_input.then(|| {
            // reuse the column buffer for d cols
            gemm(ckk, d.cout, hw, weight, true, dout, false, 0.0, &mut cols);
            let mut dx = vec![0.0; d.cin * hw];
            col2im(&cols, d, &mut dx);
            dx
        })
    };
    (dx, dw)
}

pub(crate) fn backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    d: ConvDims,
    need_input: bool,
) -> ConvGrads {
    let in_item = d.cin * d.hw();
    let out_item = d.cout * d.hw();
    let run = |b: usize| {
        backward_item(
            &x[b * in_item..(b + 1) * in_item],
            weight,
            &dout[b * out_item..(b + 1) * out_item],
            &d,
            need_input,
        )
    };
    let parts: Vec<_> = if runtime::is_serial() || d.n == 1 {
        (0..d.n).map(run).collect()
    } else {
        (0..d.n).into_par_iter().map(run).collect()
    };

    let mut dweight = vec![0.0; d.cout * d.ckk()];
    let mut dinput = need_input.then(|| Vec::with_capacity(d.n * in_item));
    for (dx, dw) in parts {
        for (acc, v) in dweight.iter_mut().zip(&dw) {
            *acc += v;
        }
        if let (Some(all), Some(dx)) = (dinput.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    let mut dbias = vec![0.0; d.cout];
    for b in 0..d.n {
        for (co, acc) in dbias.iter_mut().enumerate() {
            let start = b * out_item + co * d.hw();
            *acc += dout[start..start + d.hw()].iter().sum::<f64>();
        }
    }
    ConvGrads { input: dinput, weight: dweight, bias: dbias }
}
