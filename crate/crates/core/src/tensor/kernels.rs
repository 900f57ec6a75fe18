//! Flat-slice kernels shared by the forward and backward passes.

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let br = &b[j * n..(j + 1) * n];
            out[i * k + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a temporal convolution over a `[batch × len × channels]` input
/// with a `[width × channels × maps]` filter bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub width: usize,
    pub maps: usize,
    pub stride: usize,
}

impl ConvGeometry {
    /// `⌊(l − k + 1) / d⌋`
    pub fn out_len(&self) -> usize {
        (self.len + 1 - self.width) / self.stride
    }

    /// Input position read by output `y` and kernel tap `x` (both 0-based).
    ///
    /// One-based this is `y·d − x + c` with offset `c = k − d + 1`.
    #[inline]
    pub fn source(&self, y: usize, x: usize) -> usize {
        y * self.stride + self.width - 1 - x
    }
}

pub fn conv1d(input: &[f64], filters: &[f64], geo: ConvGeometry) -> Vec<f64> {
    let ConvGeometry {
        batch,
        len,
        channels,
        width,
        maps,
        ..
    } = geo;
    let out_len = geo.out_len();
    let mut out = vec![0.0; batch * out_len * maps];
    for b in 0..batch {
        for y in 0..out_len {
            let o = &mut out[(b * out_len + y) * maps..(b * out_len + y + 1) * maps];
            for x in 0..width {
                let src = geo.source(y, x);
                let g = &input[(b * len + src) * channels..(b * len + src + 1) * channels];
                for (e, &gv) in g.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let f = &filters[(x * channels + e) * maps..(x * channels + e + 1) * maps];
                    for (ov, &fv) in o.iter_mut().zip(f) {
                        *ov += gv * fv;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and filter gradients for [`conv1d`].
pub fn conv1d_backward(
    input: &[f64],
    filters: &[f64],
    grad_out: &[f64],
    geo: ConvGeometry,
    grad_input: Option<&mut [f64]>,
    grad_filters: Option<&mut [f64]>,
) {
    let ConvGeometry {
        batch,
        len,
        channels,
        width,
        maps,
        ..
    } = geo;
    let out_len = geo.out_len();
    let mut gi = grad_input;
    let mut gf = grad_filters;
    for b in 0..batch {
        for y in 0..out_len {
            let go = &grad_out[(b * out_len + y) * maps..(b * out_len + y + 1) * maps];
            for x in 0..width {
                let src = geo.source(y, x);
                let base = (b * len + src) * channels;
                for e in 0..channels {
                    let fo = (x * channels + e) * maps;
                    if let Some(gi) = gi.as_deref_mut() {
                        gi[base + e] += go
                            .iter()
                            .zip(&filters[fo..fo + maps])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    if let Some(gf) = gf.as_deref_mut() {
                        let gv = input[base + e];
                        for (f, &g) in gf[fo..fo + maps].iter_mut().zip(go) {
                            *f += gv * g;
                        }
                    }
                }
            }
        }
    }
}
