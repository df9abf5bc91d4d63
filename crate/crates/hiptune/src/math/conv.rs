//! Spatial convolution kernels used by the routing gates.
//!
//! Grids are channels-last `[H, W, C]`; kernels are `[C_out, C_in, KH, KW]`.
//! Convolutions use stride 1 and zero padding, so output spatial dims equal
//! input spatial dims. Both kernels lower to im2col + dgemm; the dilated
//! variant gathers its columns at a per-location rate.

use super::{matmul, Tensor};

fn grid_dims(x: &Tensor) -> (usize, usize, usize) {
    assert_eq!(x.shape().len(), 3, "grid must be [H, W, C]");
    (x.shape()[0], x.shape()[1], x.shape()[2])
}

fn kernel_dims(w: &Tensor) -> (usize, usize, usize, usize) {
    assert_eq!(w.shape().len(), 4, "kernel must be [Cout, Cin, KH, KW]");
    (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3])
}

/// Gather `[HW, Cin*KH*KW]` patch rows (zero padding, per-location dilation).
/// Column order is (ic, ky, kx), matching the kernel layout.
fn im2col(x: &Tensor, kh: usize, kw: usize, dilation: &[u8]) -> Tensor {
    let (h, w, cin) = grid_dims(x);
    let (oy, ox) = ((kh / 2) as isize, (kw / 2) as isize);
    let xd = x.data();
    let cols = cin * kh * kw;
    let mut out = vec![0.0; h * w * cols];
    for y0 in 0..h {
        for x0 in 0..w {
            let d = dilation[y0 * w + x0] as isize;
            let row = &mut out[(y0 * w + x0) * cols..(y0 * w + x0 + 1) * cols];
            for ky in 0..kh {
                let yy = y0 as isize + (ky as isize - oy) * d;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let xx = x0 as isize + (kx as isize - ox) * d;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let src = &xd[(yy as usize * w + xx as usize) * cin..][..cin];
                    for (ic, &v) in src.iter().enumerate() {
                        row[(ic * kh + ky) * kw + kx] = v;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[h * w, cols], out)
}

/// Scatter-add the im2col adjoint back onto the grid.
fn col2im_acc(
    grad_cols: &Tensor,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    dilation: &[u8],
    gx: &mut [f64],
) {
    let (oy, ox) = ((kh / 2) as isize, (kw / 2) as isize);
    let cols = cin * kh * kw;
    let gd = grad_cols.data();
    for y0 in 0..h {
        for x0 in 0..w {
            let d = dilation[y0 * w + x0] as isize;
            let row = &gd[(y0 * w + x0) * cols..(y0 * w + x0 + 1) * cols];
            for ky in 0..kh {
                let yy = y0 as isize + (ky as isize - oy) * d;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let xx = x0 as isize + (kx as isize - ox) * d;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let dst = (yy as usize * w + xx as usize) * cin;
                    for ic in 0..cin {
                        gx[dst + ic] += row[(ic * kh + ky) * kw + kx];
                    }
                }
            }
        }
    }
}

/// Per-(cout, cin) kernel tap sums as a (Cin, Cout) matrix for the
/// central-difference term.
fn tap_sum_matrix(w: &Tensor) -> Tensor {
    let (cout, cin, kh, kw) = kernel_dims(w);
    let wd = w.data();
    let mut sums = vec![0.0; cin * cout];
    for oc in 0..cout {
        for ic in 0..cin {
            let base = (oc * cin + ic) * kh * kw;
            sums[ic * cout + oc] = wd[base..base + kh * kw].iter().sum();
        }
    }
    Tensor::from_vec(&[cin, cout], sums)
}

/// Central Difference Convolution:
/// `y(p0) = sum_n w(p_n) x(p0 + p_n) - theta * x(p0) * sum_n w(p_n)`,
/// summed over input channels, zero padding at borders for the sampled taps.
/// `theta = 0` reduces to vanilla convolution.
pub fn cdc_forward(x: &Tensor, w: &Tensor, theta: f64) -> Tensor {
    let (h, wd, cin) = grid_dims(x);
    let (cout, kin, kh, kw) = kernel_dims(w);
    assert_eq!(cin, kin, "kernel input channels mismatch");
    let ones = vec![1u8; h * wd];
    let cols = im2col(x, kh, kw, &ones);
    let wmat = w.reshaped(&[cout, cin * kh * kw]);
    // (HW, Cin*K) x (Cin*K, Cout)
    let mut y = matmul(&cols, &wmat, false, true);
    if theta != 0.0 {
        let centers = x.reshaped(&[h * wd, cin]);
        let mut cd = matmul(&centers, &tap_sum_matrix(w), false, false);
        cd.scale_in_place(theta);
        let yd = y.data_mut();
        for (o, c) in yd.iter_mut().zip(cd.data()) {
            *o -= c;
        }
    }
    y.reshaped(&[h, wd, cout])
}

/// Backward pass of [`cdc_forward`]; returns (grad_x, grad_w).
pub fn cdc_backward(x: &Tensor, w: &Tensor, theta: f64, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (h, wd, cin) = grid_dims(x);
    let (cout, _, kh, kw) = kernel_dims(w);
    let hw = h * wd;
    let ones = vec![1u8; hw];
    let gy = grad_out.reshaped(&[hw, cout]);
    let cols = im2col(x, kh, kw, &ones);
    let wmat = w.reshaped(&[cout, cin * kh * kw]);

    // Tap term.
    let mut gw = matmul(&gy, &cols, true, false); // (Cout, Cin*K)
    let gcols = matmul(&gy, &wmat, false, false); // (HW, Cin*K)
    let mut gx = vec![0.0; x.len()];
    col2im_acc(&gcols, h, wd, cin, kh, kw, &ones, &mut gx);

    if theta != 0.0 {
        // Central term: y -= theta * X S, with S the (Cin, Cout) tap sums.
        let centers = x.reshaped(&[hw, cin]);
        let s = tap_sum_matrix(w);
        // dX -= theta * gY S^T
        let dxc = matmul(&gy, &s, false, true); // (HW, Cin)
        for (g, d) in gx.iter_mut().zip(dxc.data()) {
            *g -= theta * d;
        }
        // dS = -theta * gY^T X -> broadcast onto every tap of (oc, ic).
        let ds = matmul(&gy, &centers, true, false); // (Cout, Cin)
        let gwd = gw.data_mut();
        let taps = kh * kw;
        for oc in 0..cout {
            for ic in 0..cin {
                let v = -theta * ds.data()[oc * cin + ic];
                let base = (oc * cin + ic) * taps;
                for t in 0..taps {
                    gwd[base + t] += v;
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), gx),
        gw.reshaped(w.shape()),
    )
}

/// Dilated convolution with a per-location dilation rate (one rate for all
/// taps of a given output location), zero padding.
pub fn dilated_forward(x: &Tensor, w: &Tensor, dilation: &[u8]) -> Tensor {
    let (h, wd, cin) = grid_dims(x);
    let (cout, kin, kh, kw) = kernel_dims(w);
    assert_eq!(cin, kin, "kernel input channels mismatch");
    assert_eq!(dilation.len(), h * wd, "dilation map size mismatch");
    let cols = im2col(x, kh, kw, dilation);
    let wmat = w.reshaped(&[cout, cin * kh * kw]);
    matmul(&cols, &wmat, false, true).reshaped(&[h, wd, cout])
}

/// Backward pass of [`dilated_forward`]; returns (grad_x, grad_w).
pub fn dilated_backward(
    x: &Tensor,
    w: &Tensor,
    dilation: &[u8],
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let (h, wd, cin) = grid_dims(x);
    let (cout, _, kh, kw) = kernel_dims(w);
    let hw = h * wd;
    let gy = grad_out.reshaped(&[hw, cout]);
    let cols = im2col(x, kh, kw, dilation);
    let wmat = w.reshaped(&[cout, cin * kh * kw]);
    let gw = matmul(&gy, &cols, true, false);
    let gcols = matmul(&gy, &wmat, false, false);
    let mut gx = vec![0.0; x.len()];
    col2im_acc(&gcols, h, wd, cin, kh, kw, dilation, &mut gx);
    (
        Tensor::from_vec(x.shape(), gx),
        gw.reshaped(w.shape()),
    )
}

/// Per-location high-frequency energy: magnitude of the 4-neighbour Laplacian
/// of the channel-mean grid. Edge neighbours are replicated so a constant
/// grid scores exactly zero everywhere.
pub fn laplacian_energy(x: &Tensor) -> Vec<f64> {
    let (h, w, c) = grid_dims(x);
    let xd = x.data();
    let mean_at = |y: usize, xx: usize| -> f64 {
        let base = (y * w + xx) * c;
        xd[base..base + c].iter().sum::<f64>() / c as f64
    };
    let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
    let mut energy = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let m = mean_at(y, xx);
            let lap = mean_at(clamp(y as isize - 1, h), xx)
                + mean_at(clamp(y as isize + 1, h), xx)
                + mean_at(y, clamp(xx as isize - 1, w))
                + mean_at(y, clamp(xx as isize + 1, w))
                - 4.0 * m;
            energy[y * w + xx] = lap.abs();
        }
    }
    energy
}

/// Map Laplacian energies to dilation rates {1, 2, 3} via two thresholds:
/// `e <= low -> 1`, `low < e <= high -> 2`, `e > high -> 3`.
pub fn select_dilations(energy: &[f64], low: f64, high: f64) -> Vec<u8> {
    energy
        .iter()
        .map(|&e| if e <= low { 1 } else if e <= high { 2 } else { 3 })
        .collect()
}
