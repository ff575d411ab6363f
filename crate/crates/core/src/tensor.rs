//! Dense NCHW tensors and the reference operators every equivalence check
//! is measured against.
//!
//! Storage is generic over [`Element`] (`f32` by default, `f64` for
//! high-precision checks). All reductions accumulate in `f64` and round to
//! the storage type once, with a fixed loop order, so repeated evaluation is
//! bit-identical.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative slope of the leaky ReLU activation.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Scalar storage type of a tensor.
pub trait Element: Copy + Default + PartialEq + PartialOrd + fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array in row-major `(n, c, h, w)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        for (dim, v) in [("n", shape.n), ("c", shape.c), ("h", shape.h), ("w", shape.w)] {
            if v == 0 {
                return Err(Error::shape("tensor", dim, 1, 0));
            }
        }
        if data.len() != shape.numel() {
            return Err(Error::shape("tensor data", "len", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::new(shape, vec![T::default(); shape.numel()])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    /// The `h × w` plane of channel `c` in batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    /// Largest elementwise absolute difference, or an error when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        same_shape("max_abs_diff", self.shape, other.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max)
    }
}

fn same_shape(context: &str, expected: Shape, found: Shape) -> Result<()> {
    for (dim, e, f) in
        [("n", expected.n, found.n), ("c", expected.c, found.c), ("h", expected.h, found.h), ("w", expected.w, found.w)]
    {
        if e != f {
            return Err(Error::shape(context, dim, e, f));
        }
    }
    Ok(())
}

/// Convolution layer parameters. `weight` is laid out as
/// `(out_channels, in_channels / groups, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T: Element = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Element> ConvSpec<T> {
    /// A zero-initialized convolution with the given geometry.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let mut spec = ConvSpec {
            in_channels,
            out_channels,
            groups,
            kernel,
            stride,
            padding,
            weight: Vec::new(),
            bias: vec![T::default(); out_channels],
        };
        spec.check_geometry()?;
        spec.weight = vec![T::default(); spec.weight_len()];
        Ok(spec)
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel.0 * self.kernel.1
    }

    /// Flat index of `W[o, i, u, v]` where `i` is the in-group channel index.
    pub fn weight_index(&self, o: usize, i: usize, u: usize, v: usize) -> usize {
        ((o * self.in_per_group() + i) * self.kernel.0 + u) * self.kernel.1 + v
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh {
            return Err(Error::shape("conv2d input", "h", kh, h + 2 * ph));
        }
        if w + 2 * pw < kw {
            return Err(Error::shape("conv2d input", "w", kw, w + 2 * pw));
        }
        Ok(((h + 2 * ph - kh) / self.stride.0 + 1, (w + 2 * pw - kw) / self.stride.1 + 1))
    }

    fn check_geometry(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidParams("conv groups must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidParams("conv channel counts must be >= 1".into()));
        }
        if self.in_channels % self.groups != 0 {
            return Err(Error::InvalidParams(format!(
                "in_channels {} not divisible by groups {}",
                self.in_channels, self.groups
            )));
        }
        if self.out_channels % self.groups != 0 {
            return Err(Error::InvalidParams(format!(
                "out_channels {} not divisible by groups {}",
                self.out_channels, self.groups
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidParams("kernel and stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_geometry()?;
        if self.weight.len() != self.weight_len() {
            return Err(Error::shape("conv weight", "len", self.weight_len(), self.weight.len()));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::shape("conv bias", "len", self.out_channels, self.bias.len()));
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ConvSpec<U> {
        ConvSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            groups: self.groups,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            weight: self.weight.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Number of learnable scalars: weights plus one bias per output channel.
    pub fn param_count(&self) -> u64 {
        (self.weight_len() + self.out_channels) as u64
    }
}

/// Inference-mode batch normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormSpec<T: Element = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
}

impl<T: Element> BatchNormSpec<T> {
    /// `gamma = 1, beta = 0, mean = 0, var = 1`.
    pub fn identity(channels: usize, eps: f64) -> Self {
        BatchNormSpec {
            gamma: vec![T::from_f64(1.0); channels],
            beta: vec![T::default(); channels],
            running_mean: vec![T::default(); channels],
            running_var: vec![T::from_f64(1.0); channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, len) in [
            ("bn beta", self.beta.len()),
            ("bn running_mean", self.running_mean.len()),
            ("bn running_var", self.running_var.len()),
        ] {
            if len != c {
                return Err(Error::shape(name, "len", c, len));
            }
        }
        if c == 0 {
            return Err(Error::InvalidParams("batch norm needs at least one channel".into()));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidParams(format!("bn eps must be >= 0, got {}", self.eps)));
        }
        for (i, v) in self.running_var.iter().enumerate() {
            let v = v.to_f64();
            if !(v >= 0.0) || !(v + self.eps > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "bn channel {i}: running_var {v} with eps {} gives a non-positive denominator",
                    self.eps
                )));
            }
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale * x + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma[c].to_f64() / (self.running_var[c].to_f64() + self.eps).sqrt();
                let shift = self.beta[c].to_f64() - scale * self.running_mean[c].to_f64();
                (scale, shift)
            })
            .collect()
    }

    pub fn cast<U: Element>(&self) -> BatchNormSpec<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        BatchNormSpec {
            gamma: cv(&self.gamma),
            beta: cv(&self.beta),
            running_mean: cv(&self.running_mean),
            running_var: cv(&self.running_var),
            eps: self.eps,
        }
    }

    pub fn param_count(&self) -> u64 {
        4 * self.channels() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Identity,
    LeakyRelu,
    Silu,
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Identity => x,
            ActivationKind::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            ActivationKind::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationKind::Identity => "identity",
            ActivationKind::LeakyRelu => "leaky-relu",
            ActivationKind::Silu => "silu",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EltwiseOp {
    Add,
    ConcatChannels,
}

/// Grouped 2-D convolution with zero padding.
///
/// Accumulation runs in `f64` over input channels, then kernel rows, then
/// kernel columns; the bias is added last.
pub fn conv2d<T: Element>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    spec.validate()?;
    let s = input.shape();
    if s.c != spec.in_channels {
        return Err(Error::shape("conv2d input", "c", spec.in_channels, s.c));
    }
    let (oh, ow) = spec.output_hw(s.h, s.w)?;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cin_g = spec.in_per_group();
    let cout_g = spec.out_per_group();
    let x = input.data();
    let plane = s.h * s.w;

    let mut out = Vec::with_capacity(s.n * spec.out_channels * oh * ow);
    for n in 0..s.n {
        for o in 0..spec.out_channels {
            let group = o / cout_g;
            let w_o = &spec.weight[o * cin_g * kh * kw..(o + 1) * cin_g * kh * kw];
            let bias = spec.bias[o].to_f64();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..cin_g {
                        let c = group * cin_g + ic;
                        let xp = &x[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
                        let wk = &w_o[ic * kh * kw..(ic + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            let row = &xp[iy as usize * s.w..(iy as usize + 1) * s.w];
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                acc += row[ix as usize].to_f64() * wk[ky * kw + kx].to_f64();
                            }
                        }
                    }
                    out.push(T::from_f64(acc + bias));
                }
            }
        }
    }
    Tensor::new(Shape::new(s.n, spec.out_channels, oh, ow), out)
}

/// Inference-mode batch normalization.
pub fn batch_norm<T: Element>(input: &Tensor<T>, bn: &BatchNormSpec<T>) -> Result<Tensor<T>> {
    bn.validate()?;
    let s = input.shape();
    if s.c != bn.channels() {
        return Err(Error::shape("batch_norm input", "c", bn.channels(), s.c));
    }
    let affine = bn.affine();
    let plane = s.plane();
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (scale, shift) = affine[(i / plane) % s.c];
            T::from_f64(scale * v.to_f64() + shift)
        })
        .collect();
    Tensor::new(s, data)
}

/// Output channel `j * (c / g) + k` takes input channel `k * g + j`.
pub fn channel_shuffle<T: Element>(input: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::InvalidParams(format!(
            "channel_shuffle: {} channels not divisible into {} groups",
            s.c, groups
        )));
    }
    let per = s.c / groups;
    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for j in 0..groups {
            for k in 0..per {
                data.extend_from_slice(input.plane(n, k * groups + j));
            }
        }
    }
    Tensor::new(s, data)
}

/// Splits the channel axis into `ways` equal contiguous chunks.
pub fn split_channels<T: Element>(input: &Tensor<T>, ways: usize) -> Result<Vec<Tensor<T>>> {
    let s = input.shape();
    if ways == 0 || s.c % ways != 0 {
        return Err(Error::InvalidParams(format!("split: {} channels not divisible into {} parts", s.c, ways)));
    }
    let per = s.c / ways;
    (0..ways)
        .map(|part| {
            let mut data = Vec::with_capacity(s.numel() / ways);
            for n in 0..s.n {
                for c in part * per..(part + 1) * per {
                    data.extend_from_slice(input.plane(n, c));
                }
            }
            Tensor::new(Shape::new(s.n, per, s.h, s.w), data)
        })
        .collect()
}

/// Elementwise sum (in listed order) or channel concatenation.
pub fn eltwise<T: Element>(op: EltwiseOp, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| Error::InvalidParams("eltwise needs at least one input".into()))?;
    let s0 = first.shape();
    match op {
        EltwiseOp::Add => {
            for t in &inputs[1..] {
                same_shape("add", s0, t.shape())?;
            }
            let data = (0..s0.numel())
                .map(|i| {
                    let acc = inputs.iter().fold(0.0f64, |acc, t| acc + t.data[i].to_f64());
                    T::from_f64(acc)
                })
                .collect();
            Tensor::new(s0, data)
        }
        EltwiseOp::ConcatChannels => {
            for t in &inputs[1..] {
                let s = t.shape();
                for (dim, e, f) in [("n", s0.n, s.n), ("h", s0.h, s.h), ("w", s0.w, s.w)] {
                    if e != f {
                        return Err(Error::shape("concat", dim, e, f));
                    }
                }
            }
            let c: usize = inputs.iter().map(|t| t.shape().c).sum();
            let mut data = Vec::with_capacity(s0.n * c * s0.h * s0.w);
            for n in 0..s0.n {
                for t in inputs {
                    for ch in 0..t.shape().c {
                        data.extend_from_slice(t.plane(n, ch));
                    }
                }
            }
            Tensor::new(Shape::new(s0.n, c, s0.h, s0.w), data)
        }
    }
}

pub fn activation<T: Element>(input: &Tensor<T>, kind: ActivationKind) -> Tensor<T> {
    input.map(|v| T::from_f64(kind.apply(v.to_f64())))
}

/// 2×2 max pooling with stride 2; on ties the first element in row-major
/// window order wins. Odd trailing rows/columns are dropped.
pub fn max_pool2x2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::shape("max_pool2x2 input", "h", 2, s.h.min(s.w)));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut data = Vec::with_capacity(s.n * s.c * oh * ow);
    for n in 0..s.n {
        for c in 0..s.c {
            let p = input.plane(n, c);
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = p[2 * y * s.w + 2 * x];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let v = p[(2 * y + dy) * s.w + 2 * x + dx];
                        if v > best {
                            best = v;
                        }
                    }
                    data.push(best);
                }
            }
        }
    }
    Tensor::new(Shape::new(s.n, s.c, oh, ow), data)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Element>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidParams("upsample factor must be >= 1".into()));
    }
    let s = input.shape();
    let out = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    Tensor::from_fn(out, |[n, c, y, x]| input.get(n, c, y / factor, x / factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f32>) -> Tensor {
        Tensor::new(Shape::new(shape[0], shape[1], shape[2], shape[3]), data).unwrap()
    }

    fn ramp(shape: Shape) -> Tensor {
        let mut i = 0.0f32;
        Tensor::from_fn(shape, |_| {
            i += 0.37;
            (i * 1.7).sin()
        })
        .unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(Shape::new(1, 0, 2, 2), vec![]).is_err());
        assert!(Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn identity_1x1_conv() {
        let mut spec = ConvSpec::<f32>::zeros(2, 2, (1, 1), (1, 1), (0, 0), 1).unwrap();
        spec.weight = vec![1.0, 0.0, 0.0, 1.0];
        let x = ramp(Shape::new(2, 2, 3, 4));
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
    }

    #[test]
    fn bias_only_conv() {
        let mut spec = ConvSpec::<f32>::zeros(1, 1, (3, 3), (1, 1), (1, 1), 1).unwrap();
        spec.bias = vec![3.5];
        let out = conv2d(&ramp(Shape::new(1, 1, 5, 5)), &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn ones_kernel_spreads_centre_impulse() {
        // Every output position's 3x3 window covers the centre pixel.
        let mut spec = ConvSpec::<f32>::zeros(1, 1, (3, 3), (1, 1), (1, 1), 1).unwrap();
        spec.weight = vec![1.0; 9];
        let mut x = vec![0.0; 9];
        x[4] = 1.0;
        let out = conv2d(&t([1, 1, 3, 3], x), &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(out.data(), &[1.0; 9]);
    }

    #[test]
    fn conv_output_geometry_and_errors() {
        let spec = ConvSpec::<f32>::zeros(3, 4, (3, 3), (2, 2), (1, 1), 1).unwrap();
        let out = conv2d(&ramp(Shape::new(1, 3, 7, 8)), &spec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 4, 4, 4));

        let err = conv2d(&ramp(Shape::new(1, 2, 7, 8)), &spec).unwrap_err();
        assert!(matches!(err, Error::Shape { dim: "c", expected: 3, found: 2, .. }));

        let big = ConvSpec::<f32>::zeros(3, 4, (5, 5), (1, 1), (0, 0), 1).unwrap();
        let err = conv2d(&ramp(Shape::new(1, 3, 4, 8)), &big).unwrap_err();
        assert!(matches!(err, Error::Shape { dim: "h", .. }));

        assert!(ConvSpec::<f32>::zeros(3, 4, (3, 3), (1, 1), (1, 1), 2).is_err());
    }

    #[test]
    fn grouped_conv_matches_independent_convs() {
        let groups = 2;
        let mut spec = ConvSpec::<f32>::zeros(4, 6, (3, 3), (1, 1), (1, 1), groups).unwrap();
        for (i, w) in spec.weight.iter_mut().enumerate() {
            *w = ((i as f32) * 0.731).cos() * 0.3;
        }
        for (i, b) in spec.bias.iter_mut().enumerate() {
            *b = i as f32 * 0.1;
        }
        let x = ramp(Shape::new(1, 4, 5, 5));
        let full = conv2d(&x, &spec).unwrap();

        let parts = split_channels(&x, groups).unwrap();
        let per_w = spec.weight.len() / groups;
        let outs: Vec<Tensor> = (0..groups)
            .map(|g| {
                let mut sub = ConvSpec::<f32>::zeros(2, 3, (3, 3), (1, 1), (1, 1), 1).unwrap();
                sub.weight = spec.weight[g * per_w..(g + 1) * per_w].to_vec();
                sub.bias = spec.bias[g * 3..(g + 1) * 3].to_vec();
                conv2d(&parts[g], &sub).unwrap()
            })
            .collect();
        let joined = eltwise(EltwiseOp::ConcatChannels, &outs.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(full, joined);
    }

    #[test]
    fn shuffle_examples() {
        let x = t([1, 4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
        assert_eq!(channel_shuffle(&x, 2).unwrap().data(), &[0.0, 2.0, 1.0, 3.0]);
        assert!(channel_shuffle(&x, 3).is_err());

        let y = ramp(Shape::new(2, 12, 2, 3));
        let back = channel_shuffle(&channel_shuffle(&y, 3).unwrap(), 4).unwrap();
        assert_eq!(back, y);
    }

    #[test]
    fn eltwise_examples() {
        let a = ramp(Shape::new(1, 2, 2, 2));
        assert_eq!(eltwise(EltwiseOp::Add, &[&a]).unwrap(), a);
        let twice = eltwise(EltwiseOp::Add, &[&a, &a]).unwrap();
        assert_eq!(twice, a.map(|v| v * 2.0));

        let b = ramp(Shape::new(1, 3, 2, 2)).map(|v| v + 10.0);
        let cat = eltwise(EltwiseOp::ConcatChannels, &[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 5, 2, 2));
        assert_eq!(cat.plane(0, 1), a.plane(0, 1));
        assert_eq!(cat.plane(0, 2), b.plane(0, 0));

        assert!(eltwise(EltwiseOp::Add, &[&a, &b]).is_err());
        let c = ramp(Shape::new(1, 1, 3, 2));
        assert!(eltwise(EltwiseOp::ConcatChannels, &[&a, &c]).is_err());
        assert!(eltwise::<f32>(EltwiseOp::Add, &[]).is_err());
    }

    #[test]
    fn activation_examples() {
        let x = t([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(activation(&x, ActivationKind::Identity), x);
        let leaky = activation(&x, ActivationKind::LeakyRelu);
        assert!((leaky.data()[0] + 0.1).abs() < 1e-7);
        assert_eq!(leaky.data()[2], 2.0);
        let silu = activation(&x, ActivationKind::Silu);
        assert_eq!(silu.data()[1], 0.0);
    }

    #[test]
    fn pooling_and_upsampling() {
        let x = t([1, 1, 2, 2], vec![1.0, 3.0, 3.0, 2.0]);
        assert_eq!(max_pool2x2(&x).unwrap().data(), &[3.0]);
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(up.get(0, 0, 3, 1), 3.0);
        assert_eq!(up.get(0, 0, 0, 3), 3.0);
    }

    #[test]
    fn batch_norm_matches_formula() {
        let bn = BatchNormSpec::<f64> {
            gamma: vec![2.0],
            beta: vec![0.5],
            running_mean: vec![1.0],
            running_var: vec![3.0],
            eps: 1.0,
        };
        let x = Tensor::new(Shape::new(1, 1, 1, 1), vec![3.0f64]).unwrap();
        assert_eq!(batch_norm(&x, &bn).unwrap().data(), &[2.5]);
        let bad = BatchNormSpec::<f64> { running_var: vec![-1.0], ..bn };
        assert!(batch_norm(&x, &bad).is_err());
    }
}
