//! Strided 3D convolution, its exact adjoint, and the kernel-gradient
//! contraction.
//!
//! Tensors follow the channel-major layout `(channels, depth, height, width)`
//! for data and `(out_channels, in_channels, kd, kh, kw)` for kernels. All
//! three routines reduce each output element in a fixed sequential order, so
//! results are bit-identical no matter how the outer loops are parallelized.

use crate::error::{Result, UnmixError};
use ndarray::{Array4, Array5, ArrayView4, ArrayView5};
use rayon::prelude::*;

#[derive(Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    depth: usize,
    height: usize,
    width: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    sd: usize,
    sh: usize,
    sw: usize,
    pd: usize,
    ph: usize,
    pw: usize,
    out_depth: usize,
    out_height: usize,
    out_width: usize,
}

fn out_extent(input: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn geometry(
    input: ArrayView4<f64>,
    kernel: ArrayView5<f64>,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<ConvGeometry> {
    let (c_in, depth, height, width) = input.dim();
    let (c_out, kc_in, kd, kh, kw) = kernel.dim();
    if kc_in != c_in {
        return Err(UnmixError::DimensionMismatch(format!(
            "kernel expects {kc_in} input channels, data has {c_in}"
        )));
    }
    if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
        return Err(UnmixError::InvalidInput("stride components must be >= 1".into()));
    }
    let out_depth = out_extent(depth, padding.0, kd, stride.0);
    let out_height = out_extent(height, padding.1, kh, stride.1);
    let out_width = out_extent(width, padding.2, kw, stride.2);
    let (Some(out_depth), Some(out_height), Some(out_width)) = (out_depth, out_height, out_width)
    else {
        return Err(UnmixError::DimensionMismatch(format!(
            "kernel {kd}x{kh}x{kw} does not fit input {depth}x{height}x{width} with padding {padding:?}"
        )));
    };
    Ok(ConvGeometry {
        c_in,
        c_out,
        depth,
        height,
        width,
        kd,
        kh,
        kw,
        sd: stride.0,
        sh: stride.1,
        sw: stride.2,
        pd: padding.0,
        ph: padding.1,
        pw: padding.2,
        out_depth,
        out_height,
        out_width,
    })
}

/// Cross-correlation with zero padding and no bias:
/// `out[co,q,a,b] = sum_{ci,t,u,v} k[co,ci,t,u,v] * in[ci, q*sd+t-pd, a*sh+u-ph, b*sw+v-pw]`.
pub fn conv3d(
    input: ArrayView4<f64>,
    kernel: ArrayView5<f64>,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Array4<f64>> {
    let g = geometry(input, kernel, stride, padding)?;
    let x = input.as_slice().expect("standard layout");
    let k = kernel.as_slice().expect("standard layout");

    let plane = g.height * g.width;
    let out_plane = g.out_height * g.out_width;
    let out_vol = g.out_depth * out_plane;
    let mut out = vec![0.0f64; g.c_out * out_vol];

    out.par_chunks_mut(out_vol).enumerate().for_each(|(co, out_co)| {
        for q in 0..g.out_depth {
            let out_q = &mut out_co[q * out_plane..(q + 1) * out_plane];
            for ci in 0..g.c_in {
                let x_ci = &x[ci * g.depth * plane..(ci + 1) * g.depth * plane];
                let k_base = (co * g.c_in + ci) * g.kd * g.kh * g.kw;
                for t in 0..g.kd {
                    let id = (q * g.sd + t) as isize - g.pd as isize;
                    if id < 0 || id as usize >= g.depth {
                        continue;
                    }
                    let x_plane = &x_ci[id as usize * plane..(id as usize + 1) * plane];
                    for a in 0..g.out_height {
                        let out_row = &mut out_q[a * g.out_width..(a + 1) * g.out_width];
                        for u in 0..g.kh {
                            let ih = (a * g.sh + u) as isize - g.ph as isize;
                            if ih < 0 || ih as usize >= g.height {
                                continue;
                            }
                            let x_row = &x_plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                            let k_row = &k[k_base + (t * g.kh + u) * g.kw..k_base + (t * g.kh + u) * g.kw + g.kw];
                            for (v, &kv) in k_row.iter().enumerate() {
                                if kv == 0.0 {
                                    continue;
                                }
                                // b*sw + v - pw must land in [0, width)
                                let shift = v as isize - g.pw as isize;
                                if g.sw == 1 {
                                    let b_lo = (-shift).max(0) as usize;
                                    let b_hi = ((g.width as isize - shift).min(g.out_width as isize)).max(0) as usize;
                                    if b_lo >= b_hi {
                                        continue;
                                    }
                                    let src = &x_row[(b_lo as isize + shift) as usize
                                        ..(b_hi as isize - 1 + shift) as usize + 1];
                                    let dst = &mut out_row[b_lo..b_hi];
                                    for (o, s) in dst.iter_mut().zip(src.iter()) {
                                        *o += kv * s;
                                    }
                                } else {
                                    for b in 0..g.out_width {
                                        let iw = (b * g.sw) as isize + shift;
                                        if iw >= 0 && (iw as usize) < g.width {
                                            out_row[b] += kv * x_row[iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    Ok(Array4::from_shape_vec((g.c_out, g.out_depth, g.out_height, g.out_width), out)
        .expect("shape matches"))
}

/// Exact adjoint of [`conv3d`] with the same kernel and geometry, producing a
/// tensor of depth `out_depth`. Spatial stride must be 1 (the spatial extents
/// are then determined by the adjoint relation). The claimed `out_depth` must
/// reproduce the input depth under the forward shape equation; anything else
/// means the adjoint pairing is ill-defined.
pub fn conv3d_transpose(
    input: ArrayView4<f64>,
    kernel: ArrayView5<f64>,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
    out_depth: usize,
) -> Result<Array4<f64>> {
    let (c_out, dq, hq, wq) = input.dim();
    let (kc_out, c_in, kd, kh, kw) = kernel.dim();
    if kc_out != c_out {
        return Err(UnmixError::DimensionMismatch(format!(
            "kernel expects {kc_out} forward output channels, data has {c_out}"
        )));
    }
    if stride.1 != 1 || stride.2 != 1 {
        return Err(UnmixError::InvalidInput(
            "transposed convolution requires unit spatial stride".into(),
        ));
    }
    let (sd, pd, ph, pw) = (stride.0, padding.0, padding.1, padding.2);
    if sd == 0 {
        return Err(UnmixError::InvalidInput("stride components must be >= 1".into()));
    }
    match out_extent(out_depth, pd, kd, sd) {
        Some(d) if d == dq => {}
        _ => {
            return Err(UnmixError::DimensionMismatch(format!(
                "out_depth {out_depth} maps to a different forward depth than the input's {dq}"
            )));
        }
    }
    // spatial extents recovered from the unit-stride shape equation
    let out_height = hq + kh - 1 - 2 * ph;
    let out_width = wq + kw - 1 - 2 * pw;
    if hq + kh < 1 + 2 * ph || wq + kw < 1 + 2 * pw {
        return Err(UnmixError::DimensionMismatch(
            "padding exceeds the transposed spatial support".into(),
        ));
    }

    let y = input.as_slice().expect("standard layout");
    let k = kernel.as_slice().expect("standard layout");
    let in_plane = hq * wq;
    let in_vol = dq * in_plane;
    let out_plane = out_height * out_width;
    let out_vol = out_depth * out_plane;
    let mut out = vec![0.0f64; c_in * out_vol];

    out.par_chunks_mut(out_plane).enumerate().for_each(|(flat, out_slab)| {
        let ci = flat / out_depth;
        let i = flat % out_depth;
        // depth taps feeding output slice i: q*sd + t == i + pd
        let target = i + pd;
        for co in 0..c_out {
            let y_co = &y[co * in_vol..(co + 1) * in_vol];
            let k_base = (co * c_in + ci) * kd * kh * kw;
            for t in 0..kd {
                if target < t || (target - t) % sd != 0 {
                    continue;
                }
                let q = (target - t) / sd;
                if q >= dq {
                    continue;
                }
                let y_plane = &y_co[q * in_plane..(q + 1) * in_plane];
                for yy in 0..out_height {
                    let out_row = &mut out_slab[yy * out_width..(yy + 1) * out_width];
                    for u in 0..kh {
                        let a = (yy + ph) as isize - u as isize;
                        if a < 0 || a as usize >= hq {
                            continue;
                        }
                        let y_row = &y_plane[a as usize * wq..(a as usize + 1) * wq];
                        let k_row = &k[k_base + (t * kh + u) * kw..k_base + (t * kh + u) * kw + kw];
                        for (v, &kv) in k_row.iter().enumerate() {
                            if kv == 0.0 {
                                continue;
                            }
                            // input column b = x + pw - v must land in [0, wq)
                            let shift = pw as isize - v as isize;
                            let x_lo = (-shift).max(0) as usize;
                            let x_hi = ((wq as isize - shift).min(out_width as isize)).max(0) as usize;
                            if x_lo >= x_hi {
                                continue;
                            }
                            let src = &y_row[(x_lo as isize + shift) as usize
                                ..(x_hi as isize - 1 + shift) as usize + 1];
                            let dst = &mut out_row[x_lo..x_hi];
                            for (o, s) in dst.iter_mut().zip(src.iter()) {
                                *o += kv * s;
                            }
                        }
                    }
                }
            }
        }
    });

    Ok(Array4::from_shape_vec((c_in, out_depth, out_height, out_width), out)
        .expect("shape matches"))
}

/// Gradient of [`conv3d`] with respect to its kernel:
/// `dk[co,ci,t,u,v] = sum_{q,a,b} in[ci, q*sd+t-pd, a*sh+u-ph, b*sw+v-pw] * dout[co,q,a,b]`.
pub fn conv3d_kernel_grad(
    input: ArrayView4<f64>,
    out_grad: ArrayView4<f64>,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
    kernel_dims: (usize, usize, usize),
) -> Result<Array5<f64>> {
    let (c_in, depth, height, width) = input.dim();
    let (c_out, dq, hq, wq) = out_grad.dim();
    let (kd, kh, kw) = kernel_dims;
    let (sd, sh, sw) = stride;
    let (pd, ph, pw) = padding;
    match (
        out_extent(depth, pd, kd, sd),
        out_extent(height, ph, kh, sh),
        out_extent(width, pw, kw, sw),
    ) {
        (Some(d), Some(h), Some(w)) if d == dq && h == hq && w == wq => {}
        _ => {
            return Err(UnmixError::DimensionMismatch(format!(
                "gradient shape {dq}x{hq}x{wq} does not match the forward geometry"
            )));
        }
    }

    let x = input.as_slice().expect("standard layout");
    let dy = out_grad.as_slice().expect("standard layout");
    let in_plane = height * width;
    let in_vol = depth * in_plane;
    let dy_plane = hq * wq;
    let dy_vol = dq * dy_plane;
    let kvol = kd * kh * kw;
    let mut dk = vec![0.0f64; c_out * c_in * kvol];

    dk.par_chunks_mut(kvol).enumerate().for_each(|(pair, dk_pair)| {
        let co = pair / c_in;
        let ci = pair % c_in;
        let x_ci = &x[ci * in_vol..(ci + 1) * in_vol];
        let dy_co = &dy[co * dy_vol..(co + 1) * dy_vol];
        for t in 0..kd {
            for u in 0..kh {
                for v in 0..kw {
                    let mut acc = 0.0;
                    for q in 0..dq {
                        let id = (q * sd + t) as isize - pd as isize;
                        if id < 0 || id as usize >= depth {
                            continue;
                        }
                        let x_plane = &x_ci[id as usize * in_plane..(id as usize + 1) * in_plane];
                        let dy_q = &dy_co[q * dy_plane..(q + 1) * dy_plane];
                        for a in 0..hq {
                            let ih = (a * sh + u) as isize - ph as isize;
                            if ih < 0 || ih as usize >= height {
                                continue;
                            }
                            let x_row = &x_plane[ih as usize * width..(ih as usize + 1) * width];
                            let dy_row = &dy_q[a * wq..(a + 1) * wq];
                            let shift = v as isize - pw as isize;
                            if sw == 1 {
                                let b_lo = (-shift).max(0) as usize;
                                let b_hi =
                                    ((width as isize - shift).min(wq as isize)).max(0) as usize;
                                if b_lo >= b_hi {
                                    continue;
                                }
                                let xs = &x_row[(b_lo as isize + shift) as usize
                                    ..(b_hi as isize - 1 + shift) as usize + 1];
                                let dys = &dy_row[b_lo..b_hi];
                                for (xv, dv) in xs.iter().zip(dys.iter()) {
                                    acc += xv * dv;
                                }
                            } else {
                                for b in 0..wq {
                                    let iw = (b * sw) as isize + shift;
                                    if iw >= 0 && (iw as usize) < width {
                                        acc += x_row[iw as usize] * dy_row[b];
                                    }
                                }
                            }
                        }
                    }
                    dk_pair[(t * kh + u) * kw + v] = acc;
                }
            }
        }
    });

    Ok(Array5::from_shape_vec((c_out, c_in, kd, kh, kw), dk).expect("shape matches"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array4, Array5};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    fn random5(dims: (usize, usize, usize, usize, usize), seed: u64) -> Array5<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array5::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    /// Oracle: the definition written as six nested loops, no slicing tricks.
    fn conv3d_naive(
        x: &Array4<f64>,
        k: &Array5<f64>,
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Array4<f64> {
        let (c_in, d, h, w) = x.dim();
        let (c_out, _, kd, kh, kw) = k.dim();
        let od = (d + 2 * padding.0 - kd) / stride.0 + 1;
        let oh = (h + 2 * padding.1 - kh) / stride.1 + 1;
        let ow = (w + 2 * padding.2 - kw) / stride.2 + 1;
        let mut out = Array4::zeros((c_out, od, oh, ow));
        for co in 0..c_out {
            for q in 0..od {
                for a in 0..oh {
                    for b in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for t in 0..kd {
                                for u in 0..kh {
                                    for v in 0..kw {
                                        let id = (q * stride.0 + t) as isize - padding.0 as isize;
                                        let ih = (a * stride.1 + u) as isize - padding.1 as isize;
                                        let iw = (b * stride.2 + v) as isize - padding.2 as isize;
                                        if id >= 0
                                            && (id as usize) < d
                                            && ih >= 0
                                            && (ih as usize) < h
                                            && iw >= 0
                                            && (iw as usize) < w
                                        {
                                            acc += k[[co, ci, t, u, v]]
                                                * x[[ci, id as usize, ih as usize, iw as usize]];
                                        }
                                    }
                                }
                            }
                        }
                        out[[co, q, a, b]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = random4((1, 4, 5, 5), 1);
        let mut k = Array5::zeros((1, 1, 1, 1, 1));
        k[[0, 0, 0, 0, 0]] = 1.0;
        let out = conv3d(x.view(), k.view(), (1, 1, 1), (0, 0, 0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn ones_kernel_counts_neighbors() {
        let x = Array4::from_elem((1, 5, 5, 5), 1.0);
        let k = Array5::from_elem((1, 1, 3, 3, 3), 1.0);
        let out = conv3d(x.view(), k.view(), (1, 1, 1), (1, 1, 1)).unwrap();
        // interior voxels see the full 27-point neighborhood, corners 8
        assert_abs_diff_eq!(out[[0, 2, 2, 2]], 27.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 0, 0, 0]], 8.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let cases = [
            ((2usize, 8, 5, 5), (3usize, 2, 3, 3, 3), (1usize, 1, 1), (0usize, 0, 0)),
            ((2, 8, 5, 5), (3, 2, 3, 3, 3), (2, 1, 1), (1, 1, 1)),
            ((1, 16, 6, 6), (4, 1, 7, 3, 3), (6, 1, 1), (2, 1, 1)),
            ((3, 9, 7, 6), (2, 3, 5, 3, 3), (3, 2, 2), (2, 1, 1)),
        ];
        for (i, (xd, kdm, s, p)) in cases.into_iter().enumerate() {
            let x = random4(xd, 10 + i as u64);
            let k = random5(kdm, 20 + i as u64);
            let fast = conv3d(x.view(), k.view(), s, p).unwrap();
            let slow = conv3d_naive(&x, &k, s, p);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = random4((2, 4, 4, 4), 1);
        let k = random5((1, 3, 1, 1, 1), 2);
        assert!(conv3d(x.view(), k.view(), (1, 1, 1), (0, 0, 0)).is_err());
    }

    fn inner4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn transpose_satisfies_adjoint_identity() {
        // (depth, kd, sd, pd) cases, including the 184-band stride-62 geometry
        let cases = [
            (16usize, 7usize, 6usize, 2usize, 1usize, 4usize),
            (16, 15, 6, 6, 1, 4),
            (184, 7, 62, 0, 1, 3),
            (20, 5, 4, 1, 2, 3),
            (12, 3, 1, 1, 2, 2),
        ];
        for (i, (depth, kd, sd, pd, c_in, c_out)) in cases.into_iter().enumerate() {
            let h = 6;
            let x = random4((c_in, depth, h, h), 40 + i as u64);
            let k = random5((c_out, c_in, kd, 3, 3), 50 + i as u64);
            let y = conv3d(x.view(), k.view(), (sd, 1, 1), (pd, 1, 1)).unwrap();
            let g = random4(y.dim(), 60 + i as u64);
            let back = conv3d_transpose(g.view(), k.view(), (sd, 1, 1), (pd, 1, 1), depth).unwrap();
            assert_eq!(back.dim(), x.dim());
            let lhs = inner4(&y, &g);
            let rhs = inner4(&x, &back);
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!(
                ((lhs - rhs) / scale).abs() < 1e-10,
                "case {i}: <conv(x,k), g> = {lhs} vs <x, convT(g,k)> = {rhs}"
            );
        }
    }

    #[test]
    fn transpose_unit_kernel_is_identity() {
        let y = random4((1, 5, 4, 4), 70);
        let mut k = Array5::zeros((1, 1, 1, 1, 1));
        k[[0, 0, 0, 0, 0]] = 1.0;
        let out = conv3d_transpose(y.view(), k.view(), (1, 1, 1), (0, 0, 0), 5).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn transpose_zero_kernel_gives_zero() {
        let y = random4((2, 3, 4, 4), 71);
        let k = Array5::zeros((2, 1, 7, 3, 3));
        // floor((15 - 7) / 4) + 1 = 3 matches the input depth
        let out = conv3d_transpose(y.view(), k.view(), (4, 1, 1), (0, 1, 1), 15).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn transpose_rejects_inconsistent_depth() {
        let y = random4((2, 3, 4, 4), 72);
        let k = random5((2, 1, 7, 3, 3), 73);
        // forward depth for out_depth=40 with kd=7, sd=4 is floor(33/4)+1 = 9 != 3
        let err = conv3d_transpose(y.view(), k.view(), (4, 1, 1), (0, 1, 1), 40).unwrap_err();
        assert!(matches!(err, UnmixError::DimensionMismatch(_)), "{err}");
    }

    /// Oracle: kernel gradient by finite differences on a tiny problem.
    #[test]
    fn kernel_grad_matches_finite_differences() {
        let x = random4((2, 6, 4, 4), 80);
        let mut k = random5((2, 2, 3, 3, 3), 81);
        let stride = (2, 1, 1);
        let padding = (1, 1, 1);
        let dy = random4(
            conv3d(x.view(), k.view(), stride, padding).unwrap().dim(),
            82,
        );
        let analytic =
            conv3d_kernel_grad(x.view(), dy.view(), stride, padding, (3, 3, 3)).unwrap();
        let h = 1e-6;
        let loss = |k: &Array5<f64>| -> f64 {
            let y = conv3d(x.view(), k.view(), stride, padding).unwrap();
            inner4(&y, &dy)
        };
        for idx in [[0, 0, 0, 0, 0], [1, 1, 2, 1, 0], [0, 1, 1, 2, 2], [1, 0, 2, 2, 1]] {
            let orig = k[idx];
            k[idx] = orig + h;
            let plus = loss(&k);
            k[idx] = orig - h;
            let minus = loss(&k);
            k[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            assert_abs_diff_eq!(analytic[idx], fd, epsilon = 1e-6);
        }
    }
}
