//! Dense linear algebra kernels shared by the separator and the critics.
//!
//! Every layer here is affine. Parameters live in one flat `Vec<f64>` per
//! network; layers only remember the ranges they own. Activations are kept
//! outside the layers so that the networks can freeze activation masks when
//! they need a tangent (forward-mode) pass.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `c = op(a) · op(b) + beta · c`, where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the debug assertion above documents the extents; all strides
    // describe dense row-major storage of the stated sizes.
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

/// Spatial bookkeeping for a strided 3×3-style convolution.
///
/// `big` is the convolution input (equivalently the transposed-convolution
/// output), `small` the convolution output. Padding is derived from the
/// requested sizes so that arbitrary output-size targets can be met.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub big: (usize, usize),
    pub small: (usize, usize),
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

fn axis_pad(big: usize, small: usize, k: usize, s: usize) -> std::result::Result<usize, String> {
    if big == 0 || small == 0 || k == 0 || s == 0 {
        return Err(format!(
            "degenerate axis (input {big}, output {small}, kernel {k}, stride {s})"
        ));
    }
    let total = ((small - 1) * s + k) as isize - big as isize;
    if total < -(s as isize - 1) || total > k as isize - 1 {
        return Err(format!(
            "cannot map {big} -> {small} with kernel {k} and stride {s} (padding {total})"
        ));
    }
    Ok(total.max(0) as usize / 2)
}

impl Geometry {
    pub fn new(
        layer: &str,
        big: (usize, usize),
        small: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        let ph = axis_pad(big.0, small.0, kernel.0, stride.0)
            .map_err(|r| Error::shape(layer, format!("time axis: {r}")))?;
        let pw = axis_pad(big.1, small.1, kernel.1, stride.1)
            .map_err(|r| Error::shape(layer, format!("frequency axis: {r}")))?;
        Ok(Geometry {
            big,
            small,
            kernel,
            stride,
            pad: (ph, pw),
        })
    }

    pub fn big_len(&self) -> usize {
        self.big.0 * self.big.1
    }

    pub fn small_len(&self) -> usize {
        self.small.0 * self.small.1
    }

    fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Unfold `channels` planes of size `big` into a `(channels·taps, small)` matrix.
    fn im2col(&self, channels: usize, x: &[f64], col: &mut [f64]) {
        let (bh, bw) = self.big;
        let (sh, sw) = self.small;
        let (kh, kw) = self.kernel;
        let (st, sf) = self.stride;
        let (ph, pw) = self.pad;
        let plane = sh * sw;
        for ch in 0..channels {
            let src = &x[ch * bh * bw..(ch + 1) * bh * bw];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ch * kh + ki) * kw + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oi in 0..sh {
                        let ii = (oi * st + ki) as isize - ph as isize;
                        let out_row = &mut dst[oi * sw..(oi + 1) * sw];
                        if ii < 0 || ii >= bh as isize {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src_row = &src[ii as usize * bw..(ii as usize + 1) * bw];
                        for (oj, v) in out_row.iter_mut().enumerate() {
                            let jj = (oj * sf + kj) as isize - pw as isize;
                            *v = if jj < 0 || jj >= bw as isize {
                                0.0
                            } else {
                                src_row[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-add the matrix back onto `big` planes.
    fn col2im(&self, channels: usize, col: &[f64], x: &mut [f64]) {
        let (bh, bw) = self.big;
        let (sh, sw) = self.small;
        let (kh, kw) = self.kernel;
        let (st, sf) = self.stride;
        let (ph, pw) = self.pad;
        let plane = sh * sw;
        for ch in 0..channels {
            let dst = &mut x[ch * bh * bw..(ch + 1) * bh * bw];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ch * kh + ki) * kw + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oi in 0..sh {
                        let ii = (oi * st + ki) as isize - ph as isize;
                        if ii < 0 || ii >= bh as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ii as usize * bw..(ii as usize + 1) * bw];
                        for (oj, &v) in src[oi * sw..(oi + 1) * sw].iter().enumerate() {
                            let jj = (oj * sf + kj) as isize - pw as isize;
                            if jj >= 0 && jj < bw as isize {
                                dst_row[jj as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    /// Strided convolution, `big -> small`.
    Forward,
    /// Fractionally strided (transposed) convolution, `small -> big`.
    Transposed,
}

/// A convolution or transposed convolution whose weights live in a shared buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kind: ConvKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geo: Geometry,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl ConvLayer {
    /// Allocates `in_ch·out_ch·taps + out_ch` parameters starting at `*offset`.
    pub fn new(
        name: impl Into<String>,
        kind: ConvKind,
        in_ch: usize,
        out_ch: usize,
        geo: Geometry,
        offset: &mut usize,
    ) -> Self {
        let w = in_ch * out_ch * geo.taps();
        let weight = *offset..*offset + w;
        let bias = weight.end..weight.end + out_ch;
        *offset = bias.end;
        ConvLayer {
            name: name.into(),
            kind,
            in_ch,
            out_ch,
            geo,
            weight,
            bias,
        }
    }

    pub fn in_plane(&self) -> (usize, usize) {
        match self.kind {
            ConvKind::Forward => self.geo.big,
            ConvKind::Transposed => self.geo.small,
        }
    }

    pub fn out_plane(&self) -> (usize, usize) {
        match self.kind {
            ConvKind::Forward => self.geo.small,
            ConvKind::Transposed => self.geo.big,
        }
    }

    pub fn in_len(&self) -> usize {
        let (h, w) = self.in_plane();
        self.in_ch * h * w
    }

    pub fn out_len(&self) -> usize {
        let (h, w) = self.out_plane();
        self.out_ch * h * w
    }

    /// Fan-in used for weight initialisation.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            ConvKind::Forward => self.in_ch * self.geo.taps(),
            // every output position of a stride-s transposed conv sees about taps/s² inputs
            ConvKind::Transposed => {
                let s = self.geo.stride.0 * self.geo.stride.1;
                (self.in_ch * self.geo.taps()).div_ceil(s.max(1))
            }
        }
    }

    /// `out = W * x (+ b)`.
    pub fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64], with_bias: bool) {
        let w = &params[self.weight.clone()];
        let taps = self.geo.taps();
        let small = self.geo.small_len();
        match self.kind {
            ConvKind::Forward => {
                let mut col = vec![0.0; self.in_ch * taps * small];
                self.geo.im2col(self.in_ch, x, &mut col);
                gemm(
                    self.out_ch,
                    self.in_ch * taps,
                    small,
                    w,
                    false,
                    &col,
                    false,
                    0.0,
                    out,
                );
            }
            ConvKind::Transposed => {
                let mut col = vec![0.0; self.out_ch * taps * small];
                // weight stored as (in_ch, out_ch·taps)
                gemm(
                    self.out_ch * taps,
                    self.in_ch,
                    small,
                    w,
                    true,
                    x,
                    false,
                    0.0,
                    &mut col,
                );
                out[..self.out_len()].iter_mut().for_each(|v| *v = 0.0);
                self.geo.col2im(self.out_ch, &col, out);
            }
        }
        if with_bias {
            let b = &params[self.bias.clone()];
            let plane = self.out_len() / self.out_ch;
            for (o, &bo) in b.iter().enumerate() {
                out[o * plane..(o + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bo);
            }
        }
    }

    /// `gin = Wᵀ * gout`.
    pub fn backward_input(&self, params: &[f64], gout: &[f64], gin: &mut [f64]) {
        let w = &params[self.weight.clone()];
        let taps = self.geo.taps();
        let small = self.geo.small_len();
        match self.kind {
            ConvKind::Forward => {
                let mut col = vec![0.0; self.in_ch * taps * small];
                gemm(
                    self.in_ch * taps,
                    self.out_ch,
                    small,
                    w,
                    true,
                    gout,
                    false,
                    0.0,
                    &mut col,
                );
                gin[..self.in_len()].iter_mut().for_each(|v| *v = 0.0);
                self.geo.col2im(self.in_ch, &col, gin);
            }
            ConvKind::Transposed => {
                let mut col = vec![0.0; self.out_ch * taps * small];
                self.geo.im2col(self.out_ch, gout, &mut col);
                gemm(
                    self.in_ch,
                    self.out_ch * taps,
                    small,
                    w,
                    false,
                    &col,
                    false,
                    0.0,
                    gin,
                );
            }
        }
    }

    /// Adds `∂⟨gout, W*x⟩/∂W` (and the bias term when requested) into `grads`.
    pub fn accumulate_grads(&self, x: &[f64], gout: &[f64], grads: &mut [f64], with_bias: bool) {
        let taps = self.geo.taps();
        let small = self.geo.small_len();
        match self.kind {
            ConvKind::Forward => {
                let mut col = vec![0.0; self.in_ch * taps * small];
                self.geo.im2col(self.in_ch, x, &mut col);
                gemm(
                    self.out_ch,
                    small,
                    self.in_ch * taps,
                    gout,
                    false,
                    &col,
                    true,
                    1.0,
                    &mut grads[self.weight.clone()],
                );
            }
            ConvKind::Transposed => {
                let mut col = vec![0.0; self.out_ch * taps * small];
                self.geo.im2col(self.out_ch, gout, &mut col);
                gemm(
                    self.in_ch,
                    small,
                    self.out_ch * taps,
                    x,
                    false,
                    &col,
                    true,
                    1.0,
                    &mut grads[self.weight.clone()],
                );
            }
        }
        if with_bias {
            let plane = self.out_len() / self.out_ch;
            let gb = &mut grads[self.bias.clone()];
            for (o, b) in gb.iter_mut().enumerate() {
                *b += gout[o * plane..(o + 1) * plane].iter().sum::<f64>();
            }
        }
    }
}

/// Fully connected layer with a single scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarHead {
    pub in_len: usize,
    pub weight: Range<usize>,
    pub bias: usize,
}

impl ScalarHead {
    pub fn new(in_len: usize, offset: &mut usize) -> Self {
        let weight = *offset..*offset + in_len;
        let bias = weight.end;
        *offset = bias + 1;
        ScalarHead {
            in_len,
            weight,
            bias,
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], with_bias: bool) -> f64 {
        let dot: f64 = params[self.weight.clone()]
            .iter()
            .zip(x)
            .map(|(w, v)| w * v)
            .sum();
        if with_bias {
            dot + params[self.bias]
        } else {
            dot
        }
    }

    pub fn backward_input(&self, params: &[f64], gout: f64, gin: &mut [f64]) {
        for (g, w) in gin.iter_mut().zip(&params[self.weight.clone()]) {
            *g = w * gout;
        }
    }

    pub fn accumulate_grads(&self, x: &[f64], gout: f64, grads: &mut [f64], with_bias: bool) {
        for (g, v) in grads[self.weight.clone()].iter_mut().zip(x) {
            *g += gout * v;
        }
        if with_bias {
            grads[self.bias] += gout;
        }
    }
}

/// Pointwise activations used by the two networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative evaluated at the pre-activation `x` (right derivative at 0 for ReLU is 0).
    #[inline]
    pub fn slope(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct nested-loop convolution used as an oracle for im2col + gemm.
    fn naive_conv(layer: &ConvLayer, p: &[f64], x: &[f64]) -> Vec<f64> {
        let g = layer.geo;
        let (kh, kw) = g.kernel;
        let mut out = vec![0.0; layer.out_len()];
        let w = &p[layer.weight.clone()];
        for o in 0..layer.out_ch {
            for i in 0..g.small.0 {
                for j in 0..g.small.1 {
                    let mut acc = p[layer.bias.start + o];
                    for c in 0..layer.in_ch {
                        for a in 0..kh {
                            for b in 0..kw {
                                let ii = (i * g.stride.0 + a) as isize - g.pad.0 as isize;
                                let jj = (j * g.stride.1 + b) as isize - g.pad.1 as isize;
                                if ii < 0 || jj < 0 || ii >= g.big.0 as isize || jj >= g.big.1 as isize
                                {
                                    continue;
                                }
                                let xv = x[(c * g.big.0 + ii as usize) * g.big.1 + jj as usize];
                                acc += w[((o * layer.in_ch + c) * kh + a) * kw + b] * xv;
                            }
                        }
                    }
                    out[(o * g.small.0 + i) * g.small.1 + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn padding_targets_match_table_shapes() {
        // 513 bins reach 256 with no padding, 32 frames reach 16 with one trailing pad row
        let g = Geometry::new("enc1", (32, 513), (16, 256), (3, 3), (2, 2)).unwrap();
        assert_eq!(g.pad, (0, 0));
        let g = Geometry::new("c3", (8, 128), (8, 128), (3, 3), (1, 1)).unwrap();
        assert_eq!(g.pad, (1, 1));
        assert!(Geometry::new("bad", (32, 513), (4, 256), (3, 3), (2, 2)).is_err());
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geo = Geometry::new("t", (7, 9), (4, 4), (3, 3), (2, 2)).unwrap();
        let mut off = 0;
        let layer = ConvLayer::new("t", ConvKind::Forward, 2, 3, geo, &mut off);
        let p = random(off, &mut rng);
        let x = random(layer.in_len(), &mut rng);
        let mut out = vec![0.0; layer.out_len()];
        layer.forward(&p, &x, &mut out, true);
        let expect = naive_conv(&layer, &p, &x);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_is_adjoint_of_forward() {
        // ⟨T x, y⟩ = ⟨x, Tᵀ y⟩ for both kinds
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [ConvKind::Forward, ConvKind::Transposed] {
            let geo = Geometry::new("t", (8, 11), (4, 5), (3, 3), (2, 2)).unwrap();
            let mut off = 0;
            let layer = ConvLayer::new("t", kind, 3, 2, geo, &mut off);
            let p = random(off, &mut rng);
            let x = random(layer.in_len(), &mut rng);
            let y = random(layer.out_len(), &mut rng);
            let mut tx = vec![0.0; layer.out_len()];
            layer.forward(&p, &x, &mut tx, false);
            let mut ty = vec![0.0; layer.in_len()];
            layer.backward_input(&p, &y, &mut ty);
            let lhs: f64 = tx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{kind:?}");
        }
    }

    #[test]
    fn weight_grad_matches_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [ConvKind::Forward, ConvKind::Transposed] {
            let geo = Geometry::new("t", (6, 7), (3, 4), (3, 3), (2, 2)).unwrap();
            let mut off = 0;
            let layer = ConvLayer::new("t", kind, 2, 3, geo, &mut off);
            let p = random(off, &mut rng);
            let dp = random(off, &mut rng);
            let x = random(layer.in_len(), &mut rng);
            let y = random(layer.out_len(), &mut rng);
            let mut g = vec![0.0; off];
            layer.accumulate_grads(&x, &y, &mut g, true);
            // the layer is affine in its parameters, so a unit step is exact
            let f = |q: &[f64]| {
                let mut o = vec![0.0; layer.out_len()];
                layer.forward(q, &x, &mut o, true);
                o.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>()
            };
            let shifted: Vec<f64> = p.iter().zip(&dp).map(|(a, b)| a + b).collect();
            let expect = f(&shifted) - f(&p);
            let got: f64 = g.iter().zip(&dp).map(|(a, b)| a * b).sum();
            assert!((expect - got).abs() < 1e-10 * expect.abs().max(1.0), "{kind:?}");
        }
    }
}
