//! Raw forward and vector-Jacobian kernels on flat row-major buffers.
//!
//! These are shape-unchecked; the tape validates shapes before calling in.

/// Dimensions of a batched 1-D convolution `x[B, C_in, T] * k[C_out, C_in, K]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dDims {
    /// Output length, or `None` when the window does not fit once.
    pub fn out_len(&self) -> Option<usize> {
        let span = self.len + 2 * self.padding;
        if span < self.k || self.stride == 0 {
            return None;
        }
        Some((span - self.k) / self.stride + 1)
    }
}

pub fn conv1d_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, d: Conv1dDims) -> Vec<f64> {
    let t_out = d.out_len().expect("checked by caller");
    let mut y = vec![0.0; d.batch * d.c_out * t_out];
    let pad = d.padding as isize;
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * d.len..(b + 1) * d.c_in * d.len];
        for o in 0..d.c_out {
            let yrow = &mut y[(b * d.c_out + o) * t_out..(b * d.c_out + o + 1) * t_out];
            if let Some(bias) = bias {
                yrow.iter_mut().for_each(|v| *v = bias[o]);
            }
            for c in 0..d.c_in {
                let xrow = &xb[c * d.len..(c + 1) * d.len];
                let krow = &k[(o * d.c_in + c) * d.k..(o * d.c_in + c + 1) * d.k];
                for (t, yv) in yrow.iter_mut().enumerate() {
                    let base = (t * d.stride) as isize - pad;
                    let mut acc = 0.0;
                    for (j, &kv) in krow.iter().enumerate() {
                        let src = base + j as isize;
                        if src >= 0 && (src as usize) < d.len {
                            acc += kv * xrow[src as usize];
                        }
                    }
                    *yv += acc;
                }
            }
        }
    }
    y
}

/// Accumulates `dx`, `dk`, `db` (each optional) from the output cotangent `dy`.
pub fn conv1d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    d: Conv1dDims,
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let t_out = d.out_len().expect("checked by caller");
    let pad = d.padding as isize;
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let dyrow = &dy[(b * d.c_out + o) * t_out..(b * d.c_out + o + 1) * t_out];
            for c in 0..d.c_in {
                let xoff = (b * d.c_in + c) * d.len;
                let koff = (o * d.c_in + c) * d.k;
                for (t, &g) in dyrow.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let base = (t * d.stride) as isize - pad;
                    for j in 0..d.k {
                        let src = base + j as isize;
                        if src < 0 || src as usize >= d.len {
                            continue;
                        }
                        let src = src as usize;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xoff + src] += k[koff + j] * g;
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            dk[koff + j] += x[xoff + src] * g;
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for b in 0..d.batch {
            for (o, dbv) in db.iter_mut().enumerate() {
                *dbv += dy[(b * d.c_out + o) * t_out..(b * d.c_out + o + 1) * t_out]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
}

/// Dimensions of a batched transposed convolution
/// `x[B, C_in, T]`, `k[C_in, C_out, K]`, output `[B, C_out, T * stride]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvT1dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvT1dDims {
    pub fn out_len(&self) -> usize {
        self.len * self.stride
    }

    /// Frames dropped from the left of the full `(T - 1) * stride + K` output.
    pub fn crop_left(&self) -> usize {
        self.k.saturating_sub(self.stride) / 2
    }
}

pub fn conv_transpose1d_forward(
    x: &[f64],
    k: &[f64],
    bias: Option<&[f64]>,
    d: ConvT1dDims,
) -> Vec<f64> {
    let t_out = d.out_len();
    let crop = d.crop_left() as isize;
    let mut y = vec![0.0; d.batch * d.c_out * t_out];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let yrow = &mut y[(b * d.c_out + o) * t_out..(b * d.c_out + o + 1) * t_out];
            if let Some(bias) = bias {
                yrow.iter_mut().for_each(|v| *v = bias[o]);
            }
            for c in 0..d.c_in {
                let xrow = &x[(b * d.c_in + c) * d.len..(b * d.c_in + c + 1) * d.len];
                let krow = &k[(c * d.c_out + o) * d.k..(c * d.c_out + o + 1) * d.k];
                for (i, &xv) in xrow.iter().enumerate() {
                    let base = (i * d.stride) as isize - crop;
                    for (j, &kv) in krow.iter().enumerate() {
                        let u = base + j as isize;
                        if u >= 0 && (u as usize) < t_out {
                            yrow[u as usize] += xv * kv;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose1d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    d: ConvT1dDims,
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let t_out = d.out_len();
    let crop = d.crop_left() as isize;
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let dyrow = &dy[(b * d.c_out + o) * t_out..(b * d.c_out + o + 1) * t_out];
            for c in 0..d.c_in {
                let xoff = (b * d.c_in + c) * d.len;
                let koff = (c * d.c_out + o) * d.k;
                for i in 0..d.len {
                    let base = (i * d.stride) as isize - crop;
                    for j in 0..d.k {
                        let u = base + j as isize;
                        if u < 0 || u as usize >= t_out {
                            continue;
                        }
                        let g = dyrow[u as usize];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xoff + i] += k[koff + j] * g;
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            dk[koff + j] += x[xoff + i] * g;
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for b in 0..d.batch {
            for (o, dbv) in db.iter_mut().enumerate() {
                *dbv += dy[(b * d.c_out + o) * t_out..(b * d.c_out + o + 1) * t_out]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
}

/// Depthwise 2-D convolution with symmetric zero "same" padding:
/// `x[C, H, W]`, `k[C, KH, KW]` with odd kernel sides.
#[derive(Debug, Clone, Copy)]
pub struct Depthwise2dDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

pub fn depthwise2d_forward(x: &[f64], k: &[f64], d: Depthwise2dDims) -> Vec<f64> {
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let plane = d.h * d.w;
    let mut y = vec![0.0; d.c * plane];
    for c in 0..d.c {
        let xp = &x[c * plane..(c + 1) * plane];
        let kp = &k[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
        let yp = &mut y[c * plane..(c + 1) * plane];
        for a in 0..d.kh {
            let di = a as isize - ph;
            for b in 0..d.kw {
                let kv = kp[a * d.kw + b];
                if kv == 0.0 {
                    continue;
                }
                let dj = b as isize - pw;
                for i in 0..d.h {
                    let si = i as isize + di;
                    if si < 0 || si as usize >= d.h {
                        continue;
                    }
                    let src = &xp[si as usize * d.w..(si as usize + 1) * d.w];
                    let dst = &mut yp[i * d.w..(i + 1) * d.w];
                    let j_lo = (-dj).max(0) as usize;
                    let j_hi = (d.w as isize - dj).min(d.w as isize).max(0) as usize;
                    for j in j_lo..j_hi {
                        dst[j] += kv * src[(j as isize + dj) as usize];
                    }
                }
            }
        }
    }
    y
}

pub fn depthwise2d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    d: Depthwise2dDims,
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let plane = d.h * d.w;
    for c in 0..d.c {
        for a in 0..d.kh {
            let di = a as isize - ph;
            for b in 0..d.kw {
                let kidx = c * d.kh * d.kw + a * d.kw + b;
                let kv = k[kidx];
                let dj = b as isize - pw;
                let mut acc = 0.0;
                for i in 0..d.h {
                    let si = i as isize + di;
                    if si < 0 || si as usize >= d.h {
                        continue;
                    }
                    let j_lo = (-dj).max(0) as usize;
                    let j_hi = (d.w as isize - dj).min(d.w as isize).max(0) as usize;
                    for j in j_lo..j_hi {
                        let g = dy[c * plane + i * d.w + j];
                        let s = c * plane + si as usize * d.w + (j as isize + dj) as usize;
                        acc += x[s] * g;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[s] += kv * g;
                        }
                    }
                }
                if let Some(dk) = dk.as_deref_mut() {
                    dk[kidx] += acc;
                }
            }
        }
    }
}

/// `y[n, m] = sum_k a[n, k] b[k, m]`, accumulated into `out`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n, k] += sum_m a[n, m] b[k, m]` (right operand transposed).
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, m] += sum_n a[n, k] b[n, m]` (left operand transposed).
pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
