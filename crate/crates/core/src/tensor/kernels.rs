//! Raw f64 kernels behind the differentiable ops. Everything here works on
//! flat row-major slices; shape validation happens one level up.

/// `C[m×n] = A[m×k] · B[k×n] + beta · C`, with arbitrary strides for A and B.
/// C is dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: lhs buffer too small");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: rhs buffer too small");
    }
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold a `[channels, len]` signal into `[channels·k, cols]` patches, where
/// patch `j` starts at `j·stride − pad`. Out-of-range taps read zero.
pub(crate) fn im2col(
    x: &[f64],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; channels * k * cols];
    for c in 0..channels {
        let row = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let dst = &mut out[(c * k + kk) * cols..(c * k + kk + 1) * cols];
            for (j, d) in dst.iter_mut().enumerate() {
                let pos = (j * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    *d = row[pos as usize];
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patches back into a `[channels, len]` signal.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add(
    patches: &[f64],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: usize,
    out: &mut [f64],
) {
    for c in 0..channels {
        let row = &mut out[c * len..(c + 1) * len];
        for kk in 0..k {
            let src = &patches[(c * k + kk) * cols..(c * k + kk + 1) * cols];
            for (j, s) in src.iter().enumerate() {
                let pos = (j * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    row[pos as usize] += s;
                }
            }
        }
    }
}

pub(crate) fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) fn conv_transpose_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (len.checked_sub(1)?) * stride + k;
    full.checked_sub(2 * pad).filter(|&n| n > 0)
}

/// Depthwise strided convolution: channel `c` of the output only sees channel `c`
/// of the input. `w` is `[channels, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; channels * out_len];
    for c in 0..channels {
        let xr = &x[c * len..(c + 1) * len];
        let wr = &w[c * k..(c + 1) * k];
        for (j, o) in out[c * out_len..(c + 1) * out_len].iter_mut().enumerate() {
            let mut acc = b[c];
            for (kk, wv) in wr.iter().enumerate() {
                let pos = (j * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    acc += wv * xr[pos as usize];
                }
            }
            *o = acc;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    for c in 0..channels {
        let gyr = &gy[c * out_len..(c + 1) * out_len];
        if let Some(gb) = gb.as_deref_mut() {
            gb[c] += gyr.iter().sum::<f64>();
        }
        for (j, &g) in gyr.iter().enumerate() {
            for kk in 0..k {
                let pos = (j * stride + kk) as isize - pad as isize;
                if pos < 0 || pos as usize >= len {
                    continue;
                }
                let p = c * len + pos as usize;
                if let Some(gx) = gx.as_deref_mut() {
                    gx[p] += g * w[c * k + kk];
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[c * k + kk] += g * x[p];
                }
            }
        }
    }
}

/// Source position and blend weight for endpoint-aligned linear resampling.
pub(crate) fn interp_coords(src_len: usize, dst_len: usize, j: usize) -> (usize, f64) {
    if dst_len == 1 || src_len == 1 {
        return (0, 0.0);
    }
    let pos = (j * (src_len - 1)) as f64 / (dst_len - 1) as f64;
    let i0 = (pos.floor() as usize).min(src_len - 1);
    if i0 == src_len - 1 {
        (i0, 0.0)
    } else {
        (i0, pos - i0 as f64)
    }
}
