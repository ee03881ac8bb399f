//! Forward and backward kernels for the fused sampling primitives.
//!
//! Frame coordinates are continuous: coordinate `u` reads rows `floor(u)` and
//! `floor(u) + 1` blended by the fractional part. Rows outside `[0, T)` read
//! as zero and receive no gradient.

use crate::tensor::Scalar;

/// `c = alpha * a(m×k) · b(k×n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Scalar],
    a_strides: (isize, isize),
    b: &[Scalar],
    b_strides: (isize, isize),
    beta: Scalar,
    c: &mut [Scalar],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn split_coord(u: Scalar) -> (isize, Scalar) {
    let floor = libm::floor(u);
    (floor as isize, u - floor)
}

#[inline]
fn row_index(i: isize, rows: usize) -> Option<usize> {
    if i >= 0 && (i as usize) < rows {
        Some(i as usize)
    } else {
        None
    }
}

/// Samples `count` coordinates from a `rows×cols` matrix, writing `count×cols`.
pub(crate) fn interp_forward(x: &[Scalar], rows: usize, cols: usize, coords: &[Scalar], out: &mut [Scalar]) {
    for (q, &u) in coords.iter().enumerate() {
        let dst = &mut out[q * cols..(q + 1) * cols];
        lerp_into(x, rows, cols, 0, cols, u, 1.0, dst);
    }
}

pub(crate) fn interp_backward(
    x: &[Scalar],
    rows: usize,
    cols: usize,
    coords: &[Scalar],
    grad_out: &[Scalar],
    grad_x: Option<&mut [Scalar]>,
    grad_coords: Option<&mut [Scalar]>,
) {
    if let Some(gx) = grad_x {
        for (q, &u) in coords.iter().enumerate() {
            let g = &grad_out[q * cols..(q + 1) * cols];
            scatter_lerp(gx, rows, cols, 0, cols, u, 1.0, g);
        }
    }
    if let Some(gu) = grad_coords {
        for (q, &u) in coords.iter().enumerate() {
            let g = &grad_out[q * cols..(q + 1) * cols];
            gu[q] += slope_dot(x, rows, cols, 0, cols, u, g);
        }
    }
}

/// `dst += weight * lerp(x[:, offset..offset+width], u)`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn lerp_into(
    x: &[Scalar],
    rows: usize,
    cols: usize,
    offset: usize,
    width: usize,
    u: Scalar,
    weight: Scalar,
    dst: &mut [Scalar],
) {
    let (i0, f) = split_coord(u);
    if let Some(r) = row_index(i0, rows) {
        let w = weight * (1.0 - f);
        let src = &x[r * cols + offset..r * cols + offset + width];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += w * s;
        }
    }
    if let Some(r) = row_index(i0 + 1, rows) {
        let w = weight * f;
        let src = &x[r * cols + offset..r * cols + offset + width];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += w * s;
        }
    }
}

/// Adjoint of [`lerp_into`] with respect to `x`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn scatter_lerp(
    gx: &mut [Scalar],
    rows: usize,
    cols: usize,
    offset: usize,
    width: usize,
    u: Scalar,
    weight: Scalar,
    g: &[Scalar],
) {
    let (i0, f) = split_coord(u);
    if let Some(r) = row_index(i0, rows) {
        let w = weight * (1.0 - f);
        let dst = &mut gx[r * cols + offset..r * cols + offset + width];
        for (d, s) in dst.iter_mut().zip(g) {
            *d += w * s;
        }
    }
    if let Some(r) = row_index(i0 + 1, rows) {
        let w = weight * f;
        let dst = &mut gx[r * cols + offset..r * cols + offset + width];
        for (d, s) in dst.iter_mut().zip(g) {
            *d += w * s;
        }
    }
}

/// `<g, x[floor(u)+1] - x[floor(u)]>` restricted to a column window.
#[inline]
fn slope_dot(x: &[Scalar], rows: usize, cols: usize, offset: usize, width: usize, u: Scalar, g: &[Scalar]) -> Scalar {
    let (i0, _) = split_coord(u);
    let mut acc = 0.0;
    if let Some(r) = row_index(i0, rows) {
        let src = &x[r * cols + offset..r * cols + offset + width];
        acc -= src.iter().zip(g).map(|(a, b)| a * b).sum::<Scalar>();
    }
    if let Some(r) = row_index(i0 + 1, rows) {
        let src = &x[r * cols + offset..r * cols + offset + width];
        acc += src.iter().zip(g).map(|(a, b)| a * b).sum::<Scalar>();
    }
    acc
}

/// `<g, lerp(x[:, window], u)>`.
#[inline]
fn value_dot(x: &[Scalar], rows: usize, cols: usize, offset: usize, width: usize, u: Scalar, g: &[Scalar]) -> Scalar {
    let (i0, f) = split_coord(u);
    let mut acc = 0.0;
    if let Some(r) = row_index(i0, rows) {
        let src = &x[r * cols + offset..r * cols + offset + width];
        acc += (1.0 - f) * src.iter().zip(g).map(|(a, b)| a * b).sum::<Scalar>();
    }
    if let Some(r) = row_index(i0 + 1, rows) {
        let src = &x[r * cols + offset..r * cols + offset + width];
        acc += f * src.iter().zip(g).map(|(a, b)| a * b).sum::<Scalar>();
    }
    acc
}

/// Geometry of a multi-head deformable gather.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DeformDims {
    pub rows: usize,
    pub cols: usize,
    pub queries: usize,
    pub heads: usize,
    pub points: usize,
}

impl DeformDims {
    fn head_dim(&self) -> usize {
        self.cols / self.heads
    }
}

/// `out[q, head m] = sum_k w[q,m,k] * lerp(value[:, head m], coord[q,m,k])`.
pub(crate) fn deform_forward(
    dims: DeformDims,
    value: &[Scalar],
    coords: &[Scalar],
    weights: &[Scalar],
    out: &mut [Scalar],
) {
    let d = dims.head_dim();
    for q in 0..dims.queries {
        for m in 0..dims.heads {
            let dst = &mut out[q * dims.cols + m * d..q * dims.cols + (m + 1) * d];
            for k in 0..dims.points {
                let idx = (q * dims.heads + m) * dims.points + k;
                lerp_into(value, dims.rows, dims.cols, m * d, d, coords[idx], weights[idx], dst);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_backward(
    dims: DeformDims,
    value: &[Scalar],
    coords: &[Scalar],
    weights: &[Scalar],
    grad_out: &[Scalar],
    mut grad_value: Option<&mut [Scalar]>,
    mut grad_coords: Option<&mut [Scalar]>,
    mut grad_weights: Option<&mut [Scalar]>,
) {
    let d = dims.head_dim();
    for q in 0..dims.queries {
        for m in 0..dims.heads {
            let g = &grad_out[q * dims.cols + m * d..q * dims.cols + (m + 1) * d];
            for k in 0..dims.points {
                let idx = (q * dims.heads + m) * dims.points + k;
                let (u, w) = (coords[idx], weights[idx]);
                if let Some(gv) = grad_value.as_deref_mut() {
                    scatter_lerp(gv, dims.rows, dims.cols, m * d, d, u, w, g);
                }
                if let Some(gc) = grad_coords.as_deref_mut() {
                    gc[idx] += w * slope_dot(value, dims.rows, dims.cols, m * d, d, u, g);
                }
                if let Some(gw) = grad_weights.as_deref_mut() {
                    gw[idx] += value_dot(value, dims.rows, dims.cols, m * d, d, u, g);
                }
            }
        }
    }
}

/// Temporal RoIAlign settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAlignSpec {
    pub bins: usize,
    pub expand: Scalar,
    pub samples_per_bin: usize,
}

impl RoiAlignSpec {
    /// Frame coordinate of sample `s` in bin `b` for a normalized
    /// (center, length) segment, plus its derivatives w.r.t. center and length.
    #[inline]
    pub(crate) fn sample_coord(
        &self,
        rows: usize,
        center: Scalar,
        length: Scalar,
        b: usize,
        s: usize,
    ) -> (Scalar, Scalar, Scalar) {
        let scale = (rows.max(1) - 1) as Scalar;
        let frac = (b as Scalar + (s as Scalar + 0.5) / self.samples_per_bin as Scalar) / self.bins as Scalar;
        let along = self.expand * (frac - 0.5);
        let u = (center + length * along) * scale;
        (u, scale, along * scale)
    }
}

/// Writes `segments×(bins·cols)` aligned features.
pub(crate) fn roi_forward(
    spec: RoiAlignSpec,
    x: &[Scalar],
    rows: usize,
    cols: usize,
    segments: &[Scalar],
    out: &mut [Scalar],
) {
    let inv = 1.0 / spec.samples_per_bin as Scalar;
    let stride = spec.bins * cols;
    for (n, seg) in segments.chunks_exact(2).enumerate() {
        for b in 0..spec.bins {
            let dst = &mut out[n * stride + b * cols..n * stride + (b + 1) * cols];
            for s in 0..spec.samples_per_bin {
                let (u, _, _) = spec.sample_coord(rows, seg[0], seg[1], b, s);
                lerp_into(x, rows, cols, 0, cols, u, inv, dst);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn roi_backward(
    spec: RoiAlignSpec,
    x: &[Scalar],
    rows: usize,
    cols: usize,
    segments: &[Scalar],
    grad_out: &[Scalar],
    mut grad_x: Option<&mut [Scalar]>,
    mut grad_segments: Option<&mut [Scalar]>,
) {
    let inv = 1.0 / spec.samples_per_bin as Scalar;
    let stride = spec.bins * cols;
    for (n, seg) in segments.chunks_exact(2).enumerate() {
        for b in 0..spec.bins {
            let g = &grad_out[n * stride + b * cols..n * stride + (b + 1) * cols];
            for s in 0..spec.samples_per_bin {
                let (u, du_dc, du_dl) = spec.sample_coord(rows, seg[0], seg[1], b, s);
                if let Some(gx) = grad_x.as_deref_mut() {
                    scatter_lerp(gx, rows, cols, 0, cols, u, inv, g);
                }
                if let Some(gs) = grad_segments.as_deref_mut() {
                    let slope = inv * slope_dot(x, rows, cols, 0, cols, u, g);
                    gs[2 * n] += slope * du_dc;
                    gs[2 * n + 1] += slope * du_dl;
                }
            }
        }
    }
}

/// IoU of two (center, length) intervals and its gradient w.r.t. each.
pub(crate) fn segment_iou_with_grad(a: [Scalar; 2], b: [Scalar; 2]) -> (Scalar, [Scalar; 2], [Scalar; 2]) {
    let (sa, ea) = (a[0] - 0.5 * a[1], a[0] + 0.5 * a[1]);
    let (sb, eb) = (b[0] - 0.5 * b[1], b[0] + 0.5 * b[1]);
    let inter_raw = ea.min(eb) - sa.max(sb);
    let inter = inter_raw.max(0.0);
    let union = a[1] + b[1] - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 2], [0.0; 2]);
    }
    let iou = inter / union;

    // d(inter)/d(start, end) per side; zero when the intervals do not overlap.
    let (mut di_sa, mut di_ea, mut di_sb, mut di_eb) = (0.0, 0.0, 0.0, 0.0);
    if inter_raw > 0.0 {
        if ea <= eb {
            di_ea = 1.0;
        } else {
            di_eb = 1.0;
        }
        if sa >= sb {
            di_sa = -1.0;
        } else {
            di_sb = -1.0;
        }
    }
    // iou = I / (la + lb - I); d iou = (dI * (la + lb)) / U^2 - I * (dla + dlb) / U^2
    let u2 = union * union;
    let total = a[1] + b[1];
    let side = |di_s: Scalar, di_e: Scalar| -> [Scalar; 2] {
        let di_dc = di_s + di_e;
        let di_dl = 0.5 * (di_e - di_s);
        [di_dc * total / u2, (di_dl * total - inter) / u2]
    };
    (iou, side(di_sa, di_ea), side(di_sb, di_eb))
}
