//! Same-padded 2D cross-correlation on channel-major feature maps.
//!
//! Weights are laid out `[out][in][ky][kx]`; feature maps `[channel][row][col]`.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvShape {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Valid output range along one axis for kernel offset `d`.
    fn span(len: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (len as isize - d.max(0)).max(0) as usize;
        (lo, hi.max(lo))
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize, isize, isize)> + '_ {
        let p = (self.kernel / 2) as isize;
        let k = self.kernel;
        (0..k).flat_map(move |ky| (0..k).map(move |kx| (ky, kx, ky as isize - p, kx as isize - p)))
    }
}

/// `out = W ⋆ input (+ bias)`.
pub(crate) fn conv_forward(s: &ConvShape, input: &[f64], weights: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let plane = s.plane();
    let (h, w, k) = (s.height, s.width, s.kernel);
    for o in 0..s.out_ch {
        let b = bias.map_or(0.0, |b| b[o]);
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = b);
    }
    for o in 0..s.out_ch {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        for i in 0..s.in_ch {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for (ky, kx, dy, dx) in s.taps() {
                let wv = weights[((o * s.in_ch + i) * k + ky) * k + kx];
                if wv == 0.0 {
                    continue;
                }
                let (y0, y1) = ConvShape::span(h, dy);
                let (x0, x1) = ConvShape::span(w, dx);
                for y in y0..y1 {
                    let src = ((y as isize + dy) as usize) * w;
                    let dst = y * w;
                    let src_row = &in_plane[(src as isize + x0 as isize + dx) as usize..(src as isize + x1 as isize + dx) as usize];
                    let dst_row = &mut out_plane[dst + x0..dst + x1];
                    for (d, &v) in dst_row.iter_mut().zip(src_row) {
                        *d += wv * v;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv_forward`] with respect to its input: `grad_in = Wᵀ ⋆ grad_out`.
pub(crate) fn conv_transpose(s: &ConvShape, grad_out: &[f64], weights: &[f64], grad_in: &mut [f64]) {
    let plane = s.plane();
    let (h, w, k) = (s.height, s.width, s.kernel);
    grad_in.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..s.in_ch {
        let gin = &mut grad_in[i * plane..(i + 1) * plane];
        for o in 0..s.out_ch {
            let gout = &grad_out[o * plane..(o + 1) * plane];
            for (ky, kx, dy, dx) in s.taps() {
                let wv = weights[((o * s.in_ch + i) * k + ky) * k + kx];
                if wv == 0.0 {
                    continue;
                }
                let (y0, y1) = ConvShape::span(h, dy);
                let (x0, x1) = ConvShape::span(w, dx);
                for y in y0..y1 {
                    let src = y * w;
                    let dst = ((y as isize + dy) as usize) * w;
                    let go = &gout[src + x0..src + x1];
                    let gi = &mut gin[(dst as isize + x0 as isize + dx) as usize..(dst as isize + x1 as isize + dx) as usize];
                    for (d, &v) in gi.iter_mut().zip(go) {
                        *d += wv * v;
                    }
                }
            }
        }
    }
}

/// Accumulates `∂⟨grad_out, W ⋆ input⟩/∂W` into `grad_w` and, when given, the
/// per-channel sums of `grad_out` into `grad_b`.
pub(crate) fn conv_param_grad(
    s: &ConvShape,
    grad_out: &[f64],
    input: &[f64],
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
) {
    let plane = s.plane();
    let (h, w, k) = (s.height, s.width, s.kernel);
    for o in 0..s.out_ch {
        let gout = &grad_out[o * plane..(o + 1) * plane];
        for i in 0..s.in_ch {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for (ky, kx, dy, dx) in s.taps() {
                let (y0, y1) = ConvShape::span(h, dy);
                let (x0, x1) = ConvShape::span(w, dx);
                let mut acc = 0.0;
                for y in y0..y1 {
                    let src = ((y as isize + dy) as usize) * w;
                    let dst = y * w;
                    let a = &in_plane[(src as isize + x0 as isize + dx) as usize..(src as isize + x1 as isize + dx) as usize];
                    let g = &gout[dst + x0..dst + x1];
                    acc += a.iter().zip(g).map(|(p, q)| p * q).sum::<f64>();
                }
                grad_w[((o * s.in_ch + i) * k + ky) * k + kx] += acc;
            }
        }
    }
    if let Some(gb) = grad_b {
        for o in 0..s.out_ch {
            gb[o] += grad_out[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
    }
}
