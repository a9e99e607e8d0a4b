//! CP rewrite of a convolution layer.
//!
//! A `d × d × S × T` kernel with rank-R factors `Kˣ (d×R)`, `Kʸ (d×R)`,
//! `Kˢ (S×R)`, `Kᵗ (T×R)` is the sum over `r` of
//! `Kˣ(i,r) Kʸ(j,r) Kˢ(s,r) Kᵗ(t,r)`, so the layer equals four smaller
//! convolutions applied in order:
//!
//! 1. `1×1`, `S→R`, weights from `Kˢ`;
//! 2. `d×1`, `R→R` in `R` groups (channel `r` only), weights from `Kˣ`;
//! 3. `1×d`, `R→R` in `R` groups, weights from `Kʸ`;
//! 4. `1×1`, `R→T`, weights from `Kᵗ`, carrying the original bias.

use std::fmt;

use crate::cp::{decompose, reconstruct, CpDecomposition, Method, SolverConfig};
use crate::error::{Error, Result};
use crate::nn::network::{glorot_conv, Layer, LayerKind, Network};
use crate::nn::{conv_forward_with, ConvLayer, Padding};
use crate::parallel::Exec;
use crate::random::seeded;
use crate::tensor::{relative_error, DenseTensor, FactorMatrix};

/// A dense (ungrouped) convolution kernel `d_h × d_w × S × T` and its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub tensor: DenseTensor,
    pub bias: Option<Vec<f64>>,
}

impl ConvKernel {
    pub fn new(tensor: DenseTensor, bias: Option<Vec<f64>>) -> Result<Self> {
        if tensor.ndim() != 4 {
            return Err(Error::invalid(format!("kernel must be 4-D, got {:?}", tensor.shape())));
        }
        if let Some(b) = &bias {
            if b.len() != tensor.shape()[3] {
                return Err(Error::invalid("bias length must equal the output channel count"));
            }
        }
        Ok(Self { tensor, bias })
    }

    /// Kernel of an ungrouped layer.
    pub fn from_layer(layer: &ConvLayer) -> Result<Self> {
        if layer.groups() != 1 {
            return Err(Error::invalid("grouped convolutions cannot be rewritten"));
        }
        Self::new(layer.kernel().clone(), layer.bias().map(<[f64]>::to_vec))
    }

    /// Spatial extent `d`, or an error when the kernel is not square.
    pub fn square_extent(&self) -> Result<usize> {
        let s = self.tensor.shape();
        if s[0] != s[1] {
            return Err(Error::invalid(format!("kernel is {}×{}, not square", s[0], s[1])));
        }
        Ok(s[0])
    }

    pub fn in_channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// The four factor matrices of a rank-R kernel decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCpFactors {
    /// `d × R`, first spatial axis.
    pub kx: FactorMatrix,
    /// `d × R`, second spatial axis.
    pub ky: FactorMatrix,
    /// `S × R`.
    pub ks: FactorMatrix,
    /// `T × R`.
    pub kt: FactorMatrix,
}

impl KernelCpFactors {
    pub fn new(kx: FactorMatrix, ky: FactorMatrix, ks: FactorMatrix, kt: FactorMatrix) -> Result<Self> {
        let r = kx.rank();
        if [&ky, &ks, &kt].iter().any(|f| f.rank() != r) {
            return Err(Error::invalid("kernel factors must share one rank"));
        }
        Ok(Self { kx, ky, ks, kt })
    }

    /// Factors of a four-mode decomposition, scales folded in.
    pub fn from_decomposition(d: &CpDecomposition) -> Result<Self> {
        if d.factors().len() != 4 {
            return Err(Error::invalid(format!(
                "expected 4 factor matrices, got {}",
                d.factors().len()
            )));
        }
        let mut f = d.clone().absorbed().into_factors().into_iter();
        let mut next = || f.next().expect("four factors");
        Self::new(next(), next(), next(), next())
    }

    pub fn to_decomposition(&self) -> CpDecomposition {
        CpDecomposition::new(vec![self.kx.clone(), self.ky.clone(), self.ks.clone(), self.kt.clone()])
            .expect("ranks checked on construction")
    }

    pub fn rank(&self) -> usize {
        self.kx.rank()
    }

    /// `[d_h, d_w, S, T]`.
    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kx.rows(), self.ky.rows(), self.ks.rows(), self.kt.rows()]
    }

    /// The kernel these factors represent.
    pub fn reconstruct(&self) -> DenseTensor {
        reconstruct(&self.to_decomposition())
    }
}

/// Factors together with the relative kernel error they leave.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFit {
    pub factors: KernelCpFactors,
    /// `‖K′ − K‖ / ‖K‖`.
    pub rel_error: f64,
}

/// Rank-`rank` CP factors of a square kernel by the chosen solver.
pub fn decompose_kernel(k: &ConvKernel, rank: usize, method: Method, cfg: &SolverConfig) -> Result<KernelFit> {
    k.square_extent()?;
    let fit = decompose(&k.tensor, rank, method, cfg)?;
    from_fit(k, &fit.decomposition)
}

/// Wraps an existing decomposition of `k`, e.g. one produced by a warm-started
/// solver.
pub fn from_fit(k: &ConvKernel, d: &CpDecomposition) -> Result<KernelFit> {
    let factors = KernelCpFactors::from_decomposition(d)?;
    let rel_error = relative_error(&factors.reconstruct(), &k.tensor)?;
    Ok(KernelFit { factors, rel_error })
}

/// The four-layer replacement of a convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    layers: [ConvLayer; 4],
}

impl ConvStack {
    /// Checks channel chaining `S→R→R→R→T`, grouping and kernel extents.
    pub fn new(layers: [ConvLayer; 4]) -> Result<Self> {
        let [l1, l2, l3, l4] = &layers;
        let r = l1.out_channels();
        let ok = l1.kernel_hw() == (1, 1)
            && l4.kernel_hw() == (1, 1)
            && l2.kernel_hw().1 == 1
            && l3.kernel_hw().0 == 1
            && l1.groups() == 1
            && l4.groups() == 1
            && [l2, l3]
                .iter()
                .all(|l| l.groups() == r && l.in_channels() == r && l.out_channels() == r)
            && l4.in_channels() == r;
        if !ok {
            return Err(Error::invalid("layers do not form a 1×1, d×1, 1×d, 1×1 CP stack"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[ConvLayer; 4] {
        &self.layers
    }

    pub fn into_layers(self) -> [ConvLayer; 4] {
        self.layers
    }

    pub fn rank(&self) -> usize {
        self.layers[0].out_channels()
    }

    /// Weights, excluding bias.
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::weight_count).sum()
    }

    pub fn forward(&self, input: &DenseTensor, exec: Exec) -> Result<DenseTensor> {
        let mut x = conv_forward_with(&self.layers[0], input, exec)?;
        for l in &self.layers[1..] {
            x = conv_forward_with(l, &x, exec)?;
        }
        Ok(x)
    }

    /// Reads the factor matrices back out of the layer weights.
    pub fn factors(&self) -> KernelCpFactors {
        let r = self.rank();
        let [l1, l2, l3, l4] = &self.layers;
        let d_h = l2.kernel_hw().0;
        let d_w = l3.kernel_hw().1;
        let s = l1.in_channels();
        let t = l4.out_channels();
        let kx = FactorMatrix::from_vec(d_h, r, l2.kernel().data().to_vec()).expect("shape");
        let ky = FactorMatrix::from_vec(d_w, r, l3.kernel().data().to_vec()).expect("shape");
        let ks = FactorMatrix::from_vec(s, r, l1.kernel().data().to_vec()).expect("shape");
        let k4 = l4.kernel().data();
        let kt = FactorMatrix::from_vec(t, r, (0..t * r).map(|i| k4[(i % r) * t + i / r]).collect()).expect("shape");
        KernelCpFactors { kx, ky, ks, kt }
    }
}

/// Builds the stack whose composite map is the convolution with
/// `f.reconstruct()` under `padding`, plus `bias`.
///
/// Same padding splits exactly across the two spatial layers, so it is
/// preserved too.
pub fn build_conv_stack(f: &KernelCpFactors, bias: Option<&[f64]>, padding: Padding) -> Result<ConvStack> {
    let r = f.rank();
    let [d_h, d_w, s, t] = f.kernel_shape();
    if let Some(b) = bias {
        if b.len() != t {
            return Err(Error::invalid("bias length must equal the output channel count"));
        }
    }
    let l1 = ConvLayer::new(
        DenseTensor::from_vec(&[1, 1, s, r], f.ks.data().to_vec())?,
        None,
        1,
        padding,
    )?;
    let l2 = ConvLayer::new(
        DenseTensor::from_vec(&[d_h, 1, 1, r], f.kx.data().to_vec())?,
        None,
        r,
        padding,
    )?;
    let l3 = ConvLayer::new(
        DenseTensor::from_vec(&[1, d_w, 1, r], f.ky.data().to_vec())?,
        None,
        r,
        padding,
    )?;
    let k4 = DenseTensor::from_fn(&[1, 1, r, t], |idx| f.kt.get(idx[3], idx[2]))?;
    let l4 = ConvLayer::new(k4, bias.map(<[f64]>::to_vec), 1, padding)?;
    let mut layers = [l1, l2, l3, l4];
    for l in &mut layers {
        l.inserted = true;
    }
    ConvStack::new(layers)
}

/// Stack with zero-mean uniform weights scaled by fan-in and fan-out, zero
/// bias: the untrained baseline.
pub fn random_conv_stack(d: usize, s: usize, t: usize, rank: usize, padding: Padding, seed: u64) -> Result<ConvStack> {
    if [d, s, t, rank].contains(&0) {
        return Err(Error::invalid("stack dimensions must be positive"));
    }
    let mut rng = seeded(seed, 0);
    let mut layers = [
        glorot_conv([1, 1, s, rank], 1, padding, false, &mut rng)?,
        glorot_conv([d, 1, 1, rank], rank, padding, false, &mut rng)?,
        glorot_conv([1, d, 1, rank], rank, padding, false, &mut rng)?,
        glorot_conv([1, 1, rank, t], 1, padding, true, &mut rng)?,
    ];
    for l in &mut layers {
        l.inserted = true;
    }
    ConvStack::new(layers)
}

/// Parameter and per-pixel multiply-add counts of the three layer forms.
/// For stride-1 convolutions both quantities are the same formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub d: usize,
    pub s: usize,
    pub t: usize,
    pub rank: usize,
    /// `S·T·d²`.
    pub original: u64,
    /// Two-component scheme, `R·d·(S + T)`.
    pub jaderberg: u64,
    /// Four-layer CP stack, `R·(S + 2d + T)`.
    pub cp: u64,
    pub ratio_cp: f64,
    pub ratio_jaderberg: f64,
}

pub fn complexity(d: usize, s: usize, t: usize, rank: usize) -> Result<CostReport> {
    if [d, s, t, rank].contains(&0) {
        return Err(Error::invalid("d, S, T and R must all be positive"));
    }
    let (d64, s64, t64, r64) = (d as u64, s as u64, t as u64, rank as u64);
    let original = s64 * t64 * d64 * d64;
    let jaderberg = r64 * d64 * (s64 + t64);
    let cp = r64 * (s64 + 2 * d64 + t64);
    Ok(CostReport {
        d,
        s,
        t,
        rank,
        original,
        jaderberg,
        cp,
        ratio_cp: original as f64 / cp as f64,
        ratio_jaderberg: original as f64 / jaderberg as f64,
    })
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d={} S={} T={} R={}", self.d, self.s, self.t, self.rank)?;
        writeln!(f, "original            {}", self.original)?;
        writeln!(f, "jaderberg           {}", self.jaderberg)?;
        writeln!(f, "cp                  {}", self.cp)?;
        writeln!(f, "original/cp         {:.2}", self.ratio_cp)?;
        write!(f, "original/jaderberg  {:.2}", self.ratio_jaderberg)
    }
}

/// Names given to the four inserted layers.
pub fn stack_names(layer_name: &str) -> [String; 4] {
    [1, 2, 3, 4].map(|i| format!("{layer_name}.cp{i}"))
}

/// Eligible kernel of the named layer: an ungrouped, square convolution
/// larger than 1×1.
pub fn rewritable_kernel(net: &Network, layer_name: &str) -> Result<(ConvKernel, Padding)> {
    let layer = net.layer(layer_name)?;
    let LayerKind::Conv(conv) = &layer.kind else {
        return Err(Error::invalid(format!("layer `{layer_name}` is not a convolution")));
    };
    let kernel = ConvKernel::from_layer(conv)?;
    if kernel.square_extent()? == 1 {
        return Err(Error::invalid(format!(
            "layer `{layer_name}` is 1×1; its CP rewrite would only add work"
        )));
    }
    Ok((kernel, conv.padding()))
}

/// Replaces the named layer by `stack`, leaving every other layer as is.
pub fn splice_stack(net: &Network, layer_name: &str, stack: ConvStack) -> Result<Network> {
    let (kernel, _) = rewritable_kernel(net, layer_name)?;
    let f = stack.factors();
    let [d_h, d_w, s, t] = f.kernel_shape();
    let [kd_h, kd_w, ks, kt] = <[usize; 4]>::try_from(kernel.tensor.shape()).expect("4-D");
    if (d_h, d_w, s, t) != (kd_h, kd_w, ks, kt) {
        return Err(Error::invalid(format!(
            "stack implements a {d_h}×{d_w}×{s}×{t} kernel, layer `{layer_name}` has {kd_h}×{kd_w}×{ks}×{kt}"
        )));
    }
    let idx = net.layer_index(layer_name)?;
    let mut layers = net.layers().to_vec();
    let inserted = stack_names(layer_name)
        .into_iter()
        .zip(stack.into_layers())
        .map(|(name, l)| Layer::conv(name, l));
    layers.splice(idx..=idx, inserted);
    Network::new(net.input_shape(), layers)
}

/// Replaces the named layer by the stack built from `factors`, keeping the
/// layer's bias and padding.
pub fn splice_factors(net: &Network, layer_name: &str, factors: &KernelCpFactors) -> Result<Network> {
    let (kernel, padding) = rewritable_kernel(net, layer_name)?;
    let stack = build_conv_stack(factors, kernel.bias.as_deref(), padding)?;
    splice_stack(net, layer_name, stack)
}

/// Decomposes the named layer's kernel and splices in its four-layer stack.
/// Inserted layers are flagged so training can freeze them.
pub fn rewrite_network(
    net: &Network,
    layer_name: &str,
    rank: usize,
    method: Method,
    cfg: &SolverConfig,
) -> Result<(Network, KernelFit)> {
    let (kernel, _) = rewritable_kernel(net, layer_name)?;
    let fit = decompose_kernel(&kernel, rank, method, cfg)?;
    let rewritten = splice_factors(net, layer_name, &fit.factors)?;
    Ok((rewritten, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::toy_network;
    use crate::nn::{conv_forward, Maxout, SoftmaxClassifier};
    use crate::testutil::{random_factor, random_tensor};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn random_factors(shape: [usize; 4], rank: usize, seed: u64) -> KernelCpFactors {
        let [a, b, c, d] = shape;
        KernelCpFactors::new(
            random_factor(a, rank, seed),
            random_factor(b, rank, seed + 1),
            random_factor(c, rank, seed + 2),
            random_factor(d, rank, seed + 3),
        )
        .unwrap()
    }

    fn max_abs_diff(a: &DenseTensor, b: &DenseTensor) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Direct `Σ_{i,j,s} K(i,j,s,t) U(x+i, y+j, s)` for valid padding.
    fn direct(kernel: &DenseTensor, x: &DenseTensor) -> DenseTensor {
        let [d_h, d_w, s, t] = <[usize; 4]>::try_from(kernel.shape()).unwrap();
        let [b, _, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
        DenseTensor::from_fn(&[b, t, h - d_h + 1, w - d_w + 1], |idx| {
            let mut acc = 0.0;
            for i in 0..d_h {
                for j in 0..d_w {
                    for c in 0..s {
                        acc += kernel.get(&[i, j, c, idx[1]]) * x.get(&[idx[0], c, idx[2] + i, idx[3] + j]);
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    #[test]
    fn single_channel_unit_stack_is_identity() {
        let one = || FactorMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let f = KernelCpFactors::new(one(), one(), one(), one()).unwrap();
        let stack = build_conv_stack(&f, None, Padding::Valid).unwrap();
        let x = random_tensor(&[2, 1, 4, 3], 0);
        assert_eq!(stack.forward(&x, Exec::Sequential).unwrap(), x);
    }

    #[test]
    fn stack_equals_direct_convolution() {
        let f = random_factors([3, 3, 4, 5], 2, 10);
        let x = random_tensor(&[2, 4, 7, 6], 11);
        let stack = build_conv_stack(&f, None, Padding::Valid).unwrap();
        let y = stack.forward(&x, Exec::default()).unwrap();
        assert_eq!(y.shape(), &[2, 5, 5, 4]);
        assert!(max_abs_diff(&y, &direct(&f.reconstruct(), &x)) <= 1e-10);
    }

    #[test]
    fn same_padding_and_bias_carry_over() {
        for d in [3, 4] {
            let f = random_factors([d, d, 3, 2], 3, 20 + d as u64);
            let bias = vec![0.5, -1.0];
            let stack = build_conv_stack(&f, Some(&bias), Padding::Same).unwrap();
            let full = ConvLayer::new(f.reconstruct(), Some(bias.clone()), 1, Padding::Same).unwrap();
            let x = random_tensor(&[1, 3, 6, 5], 21);
            let a = stack.forward(&x, Exec::default()).unwrap();
            let b = conv_forward(&full, &x).unwrap();
            assert_eq!(a.shape(), &[1, 2, 6, 5]);
            assert!(max_abs_diff(&a, &b) <= 1e-10, "d = {d}");
        }
    }

    #[test]
    fn spatial_layers_commute() {
        let f = random_factors([5, 5, 3, 4], 3, 30);
        let [l1, l2, l3, l4] = build_conv_stack(&f, None, Padding::Valid).unwrap().into_layers();
        let x = random_tensor(&[2, 3, 9, 8], 31);
        let a = ConvStack::new([l1.clone(), l2.clone(), l3.clone(), l4.clone()]).unwrap();
        let h = conv_forward(&l1, &x).unwrap();
        let h = conv_forward(&l3, &h).unwrap();
        let h = conv_forward(&l2, &h).unwrap();
        let b = conv_forward(&l4, &h).unwrap();
        assert!(max_abs_diff(&a.forward(&x, Exec::default()).unwrap(), &b) <= 1e-10);
    }

    #[test]
    fn factors_round_trip_through_stack() {
        let f = random_factors([3, 3, 5, 7], 4, 40);
        let stack = build_conv_stack(&f, None, Padding::Valid).unwrap();
        assert_eq!(stack.factors(), f);
    }

    #[test]
    fn charnet_conv2_dimensions() {
        let f = random_factors([9, 9, 48, 128], 64, 50);
        let stack = build_conv_stack(&f, None, Padding::Valid).unwrap();
        let shapes: Vec<_> = stack
            .layers()
            .iter()
            .map(|l| (l.kernel_hw(), l.in_channels(), l.out_channels(), l.groups()))
            .collect();
        assert_eq!(
            shapes,
            vec![
                ((1, 1), 48, 64, 1),
                ((9, 1), 64, 64, 64),
                ((1, 9), 64, 64, 64),
                ((1, 1), 64, 128, 1)
            ]
        );
        assert_eq!(stack.weight_count(), 12_416);
        assert_eq!(stack.weight_count() as u64, complexity(9, 48, 128, 64).unwrap().cp);
    }

    #[test]
    fn complexity_examples() {
        let c = complexity(9, 48, 128, 64).unwrap();
        assert_eq!((c.original, c.cp, c.jaderberg), (497_664, 12_416, 101_376));
        assert!((c.ratio_cp - 40.08).abs() < 0.01);

        // R(S + 2d + T) = 1·(1 + 2 + 1)
        let c = complexity(1, 1, 1, 1).unwrap();
        assert_eq!((c.original, c.cp, c.jaderberg), (1, 4, 2));
        assert!(c.cp > c.original);

        let r = 64 * 64 / 128;
        let c = complexity(9, 64, 64, r).unwrap();
        let expected = 81.0 * 128.0 / (64.0 + 18.0 + 64.0);
        assert!((c.ratio_cp - expected).abs() < 1e-12);
        assert!((c.ratio_cp - 71.0).abs() < 0.05);

        assert!(complexity(0, 1, 1, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn stack_weights_match_cp_cost(d in 1usize..8, s in 1usize..20, t in 1usize..20, r in 1usize..12) {
            let f = random_factors([d, d, s, t], r, 7);
            let stack = build_conv_stack(&f, None, Padding::Valid).unwrap();
            prop_assert_eq!(stack.weight_count() as u64, complexity(d, s, t, r).unwrap().cp);
        }
    }

    #[test]
    fn exact_rank_kernel_recovered() {
        let f = random_factors([5, 5, 8, 12], 5, 60);
        let k = ConvKernel::new(f.reconstruct(), None).unwrap();
        let fit = decompose_kernel(&k, 5, Method::Nls, &SolverConfig::default()).unwrap();
        assert!(fit.rel_error <= 1e-6, "{}", fit.rel_error);

        let f1 = random_factors([3, 3, 2, 4], 1, 61);
        let k1 = ConvKernel::new(f1.reconstruct(), None).unwrap();
        let fit = decompose_kernel(&k1, 1, Method::Nls, &SolverConfig::default()).unwrap();
        assert!(fit.rel_error <= 1e-10, "{}", fit.rel_error);
    }

    /// Best rank-R error of a matrix from its singular values.
    fn svd_tail(m: &DMatrix<f64>, rank: usize) -> f64 {
        let sv = m.singular_values();
        let total: f64 = sv.iter().map(|v| v * v).sum();
        let mut sorted: Vec<f64> = sv.iter().copied().collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        (sorted[rank..].iter().map(|v| v * v).sum::<f64>() / total).sqrt()
    }

    #[test]
    fn pointwise_kernel_matches_svd_truncation() {
        let (s, t) = (6, 5);
        let k = random_tensor(&[1, 1, s, t], 70);
        let m = DMatrix::from_row_slice(s, t, k.data());
        let kernel = ConvKernel::new(k, None).unwrap();
        for rank in [2, s.min(t)] {
            let fit = decompose_kernel(&kernel, rank, Method::Nls, &SolverConfig::default()).unwrap();
            let oracle = svd_tail(&m, rank);
            assert!(
                (fit.rel_error - oracle).abs() <= 1e-6,
                "R={rank}: {} vs {oracle}",
                fit.rel_error
            );
        }
    }

    #[test]
    fn non_square_kernel_rejected() {
        let k = ConvKernel::new(random_tensor(&[3, 2, 2, 2], 80), None).unwrap();
        assert!(decompose_kernel(&k, 2, Method::Nls, &SolverConfig::default()).is_err());
    }

    #[test]
    fn rewrite_matches_reconstructed_kernel() {
        let net = toy_network(4, 90).unwrap();
        let cfg = SolverConfig::default().with_seed(3);
        let (rewritten, fit) = rewrite_network(&net, "conv2", 4, Method::Nls, &cfg).unwrap();
        let names: Vec<_> = rewritten.layers().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv1",
                "maxout1",
                "conv2.cp1",
                "conv2.cp2",
                "conv2.cp3",
                "conv2.cp4",
                "maxout2",
                "classifier"
            ]
        );
        assert_eq!(rewritten.layers()[0], net.layers()[0]);
        assert_eq!(rewritten.layers()[7], net.layers()[4]);
        for l in &rewritten.layers()[2..6] {
            let LayerKind::Conv(c) = &l.kind else { panic!() };
            assert!(c.inserted);
        }

        let mut replaced = net.clone();
        if let LayerKind::Conv(c) = &mut replaced.layers_mut()[2].kind {
            *c.kernel_mut() = fit.factors.reconstruct();
        }
        let x = random_tensor(&[3, 1, 24, 24], 91);
        let a = rewritten.forward(&x, Exec::default()).unwrap();
        let b = replaced.forward(&x, Exec::default()).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-8);
    }

    #[test]
    fn exact_rank_rewrite_preserves_the_network() {
        let f = random_factors([3, 3, 2, 4], 3, 100);
        let conv = ConvLayer::new(f.reconstruct(), Some(vec![0.1, 0.2, 0.3, 0.4]), 1, Padding::Same).unwrap();
        let cls = SoftmaxClassifier::new(random_tensor(&[3, 2 * 6 * 6], 101), vec![0.0; 3]).unwrap();
        let net = Network::new(
            [2, 6, 6],
            vec![
                Layer::conv("conv", conv),
                Layer::maxout("mx", Maxout::new(2).unwrap()),
                Layer::classifier("out", cls),
            ],
        )
        .unwrap();
        let (rewritten, fit) = rewrite_network(&net, "conv", 3, Method::Nls, &SolverConfig::default()).unwrap();
        assert!(fit.rel_error <= 1e-9, "{}", fit.rel_error);
        let x = random_tensor(&[4, 2, 6, 6], 102);
        let a = rewritten.forward(&x, Exec::default()).unwrap();
        let b = net.forward(&x, Exec::default()).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-6);
    }

    #[test]
    fn ineligible_layers_rejected() {
        let net = toy_network(3, 110).unwrap();
        let cfg = SolverConfig::default();
        assert!(matches!(
            rewrite_network(&net, "nope", 2, Method::Nls, &cfg),
            Err(Error::UnknownLayer(_))
        ));
        assert!(rewrite_network(&net, "maxout1", 2, Method::Nls, &cfg).is_err());

        let pointwise = ConvLayer::new(random_tensor(&[1, 1, 1, 2], 111), None, 1, Padding::Valid).unwrap();
        let cls = SoftmaxClassifier::new(random_tensor(&[2, 8], 112), vec![0.0; 2]).unwrap();
        let net = Network::new(
            [1, 2, 2],
            vec![Layer::conv("pw", pointwise), Layer::classifier("out", cls)],
        )
        .unwrap();
        assert!(rewrite_network(&net, "pw", 1, Method::Nls, &cfg).is_err());
    }
}
