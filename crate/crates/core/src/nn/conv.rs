//! Grouped 2-D convolution, stride 1, cross-correlation indexing (no kernel
//! flip).
//!
//! Activations are `B × C × H × W`. Kernels are `d_h × d_w × (S/groups) × T`;
//! output channel `t` belongs to group `t / (T/groups)` and reads input
//! channels `g·S/groups .. (g+1)·S/groups`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{for_each_chunk_mut, map_indexed, Exec};
use crate::tensor::{DenseTensor, Element};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    /// Output keeps the input size; for a kernel extent `d` the leading side
    /// gets `⌊(d−1)/2⌋` zeros and the trailing side `⌈(d−1)/2⌉`.
    Same,
}

impl Padding {
    /// `(leading, trailing)` zero padding for a kernel extent.
    pub fn pads(self, extent: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let total = extent - 1;
                (total / 2, total - total / 2)
            }
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            other => Err(Error::invalid(format!("unknown padding `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Element = f64> {
    kernel: DenseTensor<T>,
    bias: Option<Vec<T>>,
    groups: usize,
    padding: Padding,
    /// Excluded from training updates.
    pub frozen: bool,
    /// Produced by a CP rewrite; frozen when training asks for it.
    pub inserted: bool,
}

impl<T: Element> ConvLayer<T> {
    pub fn new(kernel: DenseTensor<T>, bias: Option<Vec<T>>, groups: usize, padding: Padding) -> Result<Self> {
        let &[_, _, _, t] = kernel.shape() else {
            return Err(Error::invalid(format!(
                "conv kernel must be 4-D (d_h × d_w × S/groups × T), got {:?}",
                kernel.shape()
            )));
        };
        if groups == 0 || t % groups != 0 {
            return Err(Error::invalid(format!(
                "{groups} groups do not divide {t} output channels"
            )));
        }
        if let Some(b) = &bias {
            if b.len() != t {
                return Err(Error::invalid(format!(
                    "bias has {} entries for {t} output channels",
                    b.len()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("bias must be finite".into()));
            }
        }
        Ok(Self {
            kernel,
            bias,
            groups,
            padding,
            frozen: false,
            inserted: false,
        })
    }

    pub fn kernel(&self) -> &DenseTensor<T> {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut DenseTensor<T> {
        &mut self.kernel
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<T>> {
        self.bias.as_mut()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kernel.shape()[0], self.kernel.shape()[1])
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    /// Number of weights, excluding bias.
    pub fn weight_count(&self) -> usize {
        self.kernel.len()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (dh, dw) = self.kernel_hw();
        let (pt, pb) = self.padding.pads(dh);
        let (pl, pr) = self.padding.pads(dw);
        if h + pt + pb < dh || w + pl + pr < dw {
            return Err(Error::invalid(format!(
                "{h}×{w} input is smaller than the {dh}×{dw} kernel"
            )));
        }
        Ok((h + pt + pb - dh + 1, w + pl + pr - dw + 1))
    }

    pub fn cast<U: Element>(&self) -> ConvLayer<U> {
        ConvLayer {
            kernel: self.kernel.cast(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|v| U::from_f64(v.as_f64())).collect()),
            groups: self.groups,
            padding: self.padding,
            frozen: self.frozen,
            inserted: self.inserted,
        }
    }

    fn geometry(&self, input: &DenseTensor<T>) -> Result<Geometry> {
        let &[batch, c, h, w] = input.shape() else {
            return Err(Error::invalid(format!(
                "conv input must be B×C×H×W, got {:?}",
                input.shape()
            )));
        };
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, self.in_channels(), h, w],
                actual: input.shape().to_vec(),
            });
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let (dh, dw) = self.kernel_hw();
        Ok(Geometry {
            batch,
            h,
            w,
            ho,
            wo,
            dh,
            dw,
            pad_top: self.padding.pads(dh).0,
            pad_left: self.padding.pads(dw).0,
            s_group: self.kernel.shape()[2],
            t_group: self.out_channels() / self.groups,
            cin: c,
            cout: self.out_channels(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    dh: usize,
    dw: usize,
    pad_top: usize,
    pad_left: usize,
    s_group: usize,
    t_group: usize,
    cin: usize,
    cout: usize,
}

impl Geometry {
    /// Output index range along one axis for kernel offset `k`.
    fn span(out: usize, input: usize, pad: usize, k: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (input + pad).saturating_sub(k).min(out);
        (lo, hi.max(lo))
    }

    fn kernel_index(&self, i: usize, j: usize, s: usize, t: usize) -> usize {
        ((i * self.dw + j) * self.s_group + s) * self.cout + t
    }
}

/// Forward pass using the default execution mode.
pub fn conv_forward<T: Element>(layer: &ConvLayer<T>, input: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    conv_forward_with(layer, input, Exec::default())
}

pub fn conv_forward_with<T: Element>(
    layer: &ConvLayer<T>,
    input: &DenseTensor<T>,
    exec: Exec,
) -> Result<DenseTensor<T>> {
    let g = layer.geometry(input)?;
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * out_len];
    let x = input.data();
    let k = layer.kernel.data();
    let bias = layer.bias.as_deref();
    for_each_chunk_mut(exec, &mut out, out_len, |b, dst| {
        forward_item(&g, k, bias, &x[b * in_len..(b + 1) * in_len], dst);
    });
    Ok(DenseTensor::from_parts(vec![g.batch, g.cout, g.ho, g.wo], out))
}

fn forward_item<T: Element>(g: &Geometry, k: &[T], bias: Option<&[T]>, x: &[T], out: &mut [T]) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    for t in 0..g.cout {
        let group = t / g.t_group;
        let dst = &mut out[t * plane_out..(t + 1) * plane_out];
        let b0 = bias.map_or(T::zero(), |b| b[t]);
        dst.iter_mut().for_each(|v| *v = b0);
        for sl in 0..g.s_group {
            let c = group * g.s_group + sl;
            let src = &x[c * plane_in..(c + 1) * plane_in];
            for i in 0..g.dh {
                let (x_lo, x_hi) = Geometry::span(g.ho, g.h, g.pad_top, i);
                for j in 0..g.dw {
                    let wgt = k[g.kernel_index(i, j, sl, t)];
                    let (y_lo, y_hi) = Geometry::span(g.wo, g.w, g.pad_left, j);
                    let n = y_hi - y_lo;
                    if n == 0 {
                        continue;
                    }
                    for xo in x_lo..x_hi {
                        let xin = xo + i - g.pad_top;
                        let yin = y_lo + j - g.pad_left;
                        let s = &src[xin * g.w + yin..xin * g.w + yin + n];
                        let d = &mut dst[xo * g.wo + y_lo..xo * g.wo + y_lo + n];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv = *dv + wgt * *sv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T: Element = f64> {
    pub input: DenseTensor<T>,
    pub kernel: DenseTensor<T>,
    /// Present when the layer has a bias.
    pub bias: Option<Vec<T>>,
}

pub fn conv_backward<T: Element>(
    layer: &ConvLayer<T>,
    input: &DenseTensor<T>,
    grad_out: &DenseTensor<T>,
) -> Result<ConvGrads<T>> {
    conv_backward_with(layer, input, grad_out, Exec::default())
}

/// Per-item gradients are computed independently and then summed in batch
/// order, so the result does not depend on `exec`.
pub fn conv_backward_with<T: Element>(
    layer: &ConvLayer<T>,
    input: &DenseTensor<T>,
    grad_out: &DenseTensor<T>,
    exec: Exec,
) -> Result<ConvGrads<T>> {
    let g = layer.geometry(input)?;
    let expected = [g.batch, g.cout, g.ho, g.wo];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: grad_out.shape().to_vec(),
        });
    }
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.ho * g.wo;
    let x = input.data();
    let go = grad_out.data();
    let k = layer.kernel.data();
    let items = map_indexed(exec, g.batch, |b| {
        backward_item(
            &g,
            k,
            &x[b * in_len..(b + 1) * in_len],
            &go[b * out_len..(b + 1) * out_len],
        )
    });

    let mut grad_in = Vec::with_capacity(g.batch * in_len);
    let mut grad_k = vec![T::zero(); k.len()];
    let mut grad_b = vec![T::zero(); g.cout];
    for (gi, gk, gb) in items {
        grad_in.extend_from_slice(&gi);
        grad_k.iter_mut().zip(&gk).for_each(|(a, v)| *a = *a + *v);
        grad_b.iter_mut().zip(&gb).for_each(|(a, v)| *a = *a + *v);
    }
    Ok(ConvGrads {
        input: DenseTensor::from_parts(input.shape().to_vec(), grad_in),
        kernel: DenseTensor::from_parts(layer.kernel.shape().to_vec(), grad_k),
        bias: layer.bias.as_ref().map(|_| grad_b),
    })
}

fn backward_item<T: Element>(g: &Geometry, k: &[T], x: &[T], go: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gi = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); g.cout];
    for t in 0..g.cout {
        let group = t / g.t_group;
        let gout = &go[t * plane_out..(t + 1) * plane_out];
        gb[t] = gout.iter().copied().sum();
        for sl in 0..g.s_group {
            let c = group * g.s_group + sl;
            let src = &x[c * plane_in..(c + 1) * plane_in];
            let gsrc = &mut gi[c * plane_in..(c + 1) * plane_in];
            for i in 0..g.dh {
                let (x_lo, x_hi) = Geometry::span(g.ho, g.h, g.pad_top, i);
                for j in 0..g.dw {
                    let idx = g.kernel_index(i, j, sl, t);
                    let wgt = k[idx];
                    let (y_lo, y_hi) = Geometry::span(g.wo, g.w, g.pad_left, j);
                    let n = y_hi - y_lo;
                    if n == 0 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for xo in x_lo..x_hi {
                        let xin = xo + i - g.pad_top;
                        let yin = y_lo + j - g.pad_left;
                        let gos = &gout[xo * g.wo + y_lo..xo * g.wo + y_lo + n];
                        let s = &src[xin * g.w + yin..xin * g.w + yin + n];
                        for (a, b) in gos.iter().zip(s) {
                            acc = acc + *a * *b;
                        }
                        let gd = &mut gsrc[xin * g.w + yin..xin * g.w + yin + n];
                        for (d, a) in gd.iter_mut().zip(gos) {
                            *d = *d + wgt * *a;
                        }
                    }
                    gk[idx] = acc;
                }
            }
        }
    }
    (gi, gk, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{gaussian_vec, seeded};

    fn random_layer(dh: usize, dw: usize, s: usize, t: usize, groups: usize, padding: Padding, seed: u64) -> ConvLayer {
        let mut rng = seeded(seed, 1);
        let shape = [dh, dw, s / groups, t];
        let kernel = DenseTensor::from_vec(&shape, gaussian_vec(&mut rng, shape.iter().product(), 1.0)).unwrap();
        let bias = gaussian_vec(&mut rng, t, 1.0);
        ConvLayer::new(kernel, Some(bias), groups, padding).unwrap()
    }

    fn random_input(shape: &[usize], seed: u64) -> DenseTensor {
        DenseTensor::from_vec(shape, gaussian_vec(&mut seeded(seed, 2), shape.iter().product(), 1.0)).unwrap()
    }

    /// Straight nested loops over output, kernel and channel indices.
    fn naive(layer: &ConvLayer, x: &DenseTensor) -> DenseTensor {
        let [b, _, h, w] = x.shape().try_into().unwrap();
        let (dh, dw) = layer.kernel_hw();
        let (ho, wo) = layer.output_hw(h, w).unwrap();
        let (pt, pl) = (layer.padding().pads(dh).0 as isize, layer.padding().pads(dw).0 as isize);
        let sg = layer.kernel().shape()[2];
        let tg = layer.out_channels() / layer.groups();
        DenseTensor::from_fn(&[b, layer.out_channels(), ho, wo], |idx| {
            let [n, t, xo, yo] = idx.try_into().unwrap();
            let mut acc = layer.bias().map_or(0.0, |bb| bb[t]);
            for i in 0..dh {
                for j in 0..dw {
                    for s in 0..sg {
                        let xi = xo as isize + i as isize - pt;
                        let yi = yo as isize + j as isize - pl;
                        if xi < 0 || yi < 0 || xi >= h as isize || yi >= w as isize {
                            continue;
                        }
                        let c = (t / tg) * sg + s;
                        acc += layer.kernel().get(&[i, j, s, t]) * x.get(&[n, c, xi as usize, yi as usize]);
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    #[test]
    fn identity_and_box_kernels() {
        let id = ConvLayer::new(
            DenseTensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(),
            None,
            1,
            Padding::Valid,
        )
        .unwrap();
        let x = random_input(&[2, 1, 4, 3], 3);
        assert_eq!(conv_forward(&id, &x).unwrap(), x);

        let ones = ConvLayer::new(
            DenseTensor::from_vec(&[3, 3, 1, 1], vec![1.0; 9]).unwrap(),
            None,
            1,
            Padding::Valid,
        )
        .unwrap();
        let x = DenseTensor::from_vec(&[1, 1, 5, 5], vec![1.0; 25]).unwrap();
        let y = conv_forward(&ones, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn matches_naive_loops() {
        let cases = [
            (3, 3, 4, 6, 1, Padding::Valid),
            (5, 2, 4, 6, 2, Padding::Valid),
            (4, 4, 3, 5, 1, Padding::Same),
            (3, 1, 6, 6, 6, Padding::Same),
            (1, 3, 2, 4, 2, Padding::Valid),
        ];
        for (n, &(dh, dw, s, t, g, p)) in cases.iter().enumerate() {
            let layer = random_layer(dh, dw, s, t, g, p, n as u64);
            let x = random_input(&[3, s, 7, 6], 10 + n as u64);
            let fast = conv_forward(&layer, &x).unwrap();
            let slow = naive(&layer, &x);
            assert_eq!(fast.shape(), slow.shape());
            let diff = fast
                .data()
                .iter()
                .zip(slow.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-10, "case {n}: {diff}");
        }
    }

    #[test]
    fn same_padding_even_kernel_keeps_size() {
        let layer = random_layer(4, 4, 2, 3, 1, Padding::Same, 5);
        assert_eq!(Padding::Same.pads(4), (1, 2));
        assert_eq!(layer.output_hw(6, 5).unwrap(), (6, 5));
    }

    #[test]
    fn shape_errors() {
        let layer = random_layer(3, 3, 4, 6, 1, Padding::Valid, 1);
        assert!(conv_forward(&layer, &random_input(&[1, 3, 5, 5], 1)).is_err());
        assert!(conv_forward(&layer, &random_input(&[1, 4, 2, 5], 1)).is_err());
        let go = random_input(&[1, 6, 2, 2], 2);
        assert!(conv_backward(&layer, &random_input(&[1, 4, 5, 5], 1), &go).is_err());
        assert!(ConvLayer::new(
            DenseTensor::<f64>::zeros(&[3, 3, 2, 5]).unwrap(),
            None,
            2,
            Padding::Valid
        )
        .is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let layer = random_layer(3, 3, 4, 6, 2, Padding::Same, 7);
        let x = random_input(&[2, 4, 5, 5], 8);
        let go = DenseTensor::zeros(&[2, 6, 5, 5]).unwrap();
        let g = conv_backward(&layer, &x, &go).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.kernel.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grouped_kernel_gradient_only_sees_its_channel() {
        // depthwise: output r reads only input r, so zeroing input channel 1
        // must zero the kernel gradient of group 1 and leave group 0 intact
        let layer = random_layer(3, 1, 2, 2, 2, Padding::Valid, 9);
        let mut x = random_input(&[2, 2, 5, 4], 3);
        let go = random_input(&[2, 2, 3, 4], 4);
        let full = conv_backward(&layer, &x, &go).unwrap();
        for b in 0..2 {
            for i in 0..5 {
                for j in 0..4 {
                    x.set(&[b, 1, i, j], 0.0);
                }
            }
        }
        let masked = conv_backward(&layer, &x, &go).unwrap();
        for i in 0..3 {
            assert_eq!(masked.kernel.get(&[i, 0, 0, 1]), 0.0);
            assert_eq!(masked.kernel.get(&[i, 0, 0, 0]), full.kernel.get(&[i, 0, 0, 0]));
        }
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let layer = random_layer(3, 3, 4, 4, 1, Padding::Same, 3);
        let x = random_input(&[5, 4, 6, 6], 3);
        let a = conv_forward_with(&layer, &x, Exec::Sequential).unwrap();
        let b = conv_forward_with(&layer, &x, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let go = random_input(&[5, 4, 6, 6], 4);
        let ga = conv_backward_with(&layer, &x, &go, Exec::Sequential).unwrap();
        let gb = conv_backward_with(&layer, &x, &go, Exec::Parallel).unwrap();
        assert_eq!(ga, gb);
    }
}
