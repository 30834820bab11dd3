//! Minimal channel-first layers with hand-written backward passes.
//!
//! Activations are single-sample `(C, H, W)` arrays. Parameters live in a
//! [`ParamStore`]; layers hold [`ParamId`]s into it, so forward passes only
//! borrow the store and per-sample gradients can be accumulated in separate
//! [`Grads`] buffers and reduced in a fixed order.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Which learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Head,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    /// Buffers such as batch-norm statistics are stored but never updated.
    pub trainable: bool,
    pub value: Vec<f32>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], group: ParamGroup, trainable: bool, value: Vec<f32>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            group,
            trainable,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar entries, buffers included.
    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn numel_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Param::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            values: self.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub values: Vec<Vec<f32>>,
}

impl Grads {
    pub fn slot(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.values[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for v in self.values.iter_mut().flatten() {
            *v *= factor;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.values.iter().flatten().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// He-uniform initialization, suited to ReLU stacks.
pub fn he_uniform(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Array2<f32>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            group,
            true,
            he_uniform(rng, fan_in, out_channels * fan_in),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_channels], group, true, vec![0.0; out_channels]));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_extent(h, self.kernel, self.stride, self.pad),
            out_extent(w, self.kernel, self.stride, self.pad),
        )
    }

    fn weight_matrix<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f32> {
        ArrayView2::from_shape((self.out_channels, self.in_channels * self.kernel * self.kernel), store.value(self.weight))
            .expect("conv weight shape")
    }

    fn im2col(&self, x: &Array3<f32>) -> Array2<f32> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return x.to_shape((c, h * w)).expect("contiguous").into_owned();
        }
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f32>, in_shape: (usize, usize, usize)) -> Array3<f32> {
        let (c, h, w) = in_shape;
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return cols.to_shape((c, h, w)).expect("contiguous").into_owned();
        }
        let mut dx = Array3::zeros((c, h, w));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = cols.row((ci * k + ki) * k + kj);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[[ci, iy as usize, ix as usize]] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> (Array3<f32>, ConvCache) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let cols = self.im2col(x);
        let mut y = self.weight_matrix(store).dot(&cols);
        if let Some(b) = self.bias {
            let b = ArrayView1::from(store.value(b));
            y += &b.insert_axis(Axis(1));
        }
        let y = y.to_shape((self.out_channels, oh, ow)).expect("conv output shape").into_owned();
        (y, ConvCache { cols, in_shape: x.dim() })
    }

    pub fn backward(&self, store: &ParamStore, cache: &ConvCache, dy: &Array3<f32>, grads: &mut Grads) -> Array3<f32> {
        let (o, oh, ow) = dy.dim();
        let dy2 = dy.to_shape((o, oh * ow)).expect("contiguous");
        let dw = dy2.dot(&cache.cols.t());
        for (g, v) in grads.slot(self.weight).iter_mut().zip(dw.iter()) {
            *g += *v;
        }
        if let Some(b) = self.bias {
            let db = dy2.sum_axis(Axis(1));
            for (g, v) in grads.slot(b).iter_mut().zip(db.iter()) {
                *g += *v;
            }
        }
        let dcols = self.weight_matrix(store).t().dot(&dy2);
        self.col2im(&dcols, cache.in_shape)
    }
}

/// Batch normalization with fixed statistics, i.e. a per-channel affine map.
/// All four tensors are stored as non-trainable buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBatchNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
}

impl FrozenBatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize) -> Self {
        let mut buf = |suffix: &str, fill: f32| store.add(format!("{name}.{suffix}"), &[channels], group, false, vec![fill; channels]);
        FrozenBatchNorm {
            weight: buf("weight", 1.0),
            bias: buf("bias", 0.0),
            running_mean: buf("running_mean", 0.0),
            running_var: buf("running_var", 1.0),
            eps: 1e-5,
        }
    }

    fn scale_shift(&self, store: &ParamStore) -> (Array1<f32>, Array1<f32>) {
        let g = store.value(self.weight);
        let b = store.value(self.bias);
        let m = store.value(self.running_mean);
        let v = store.value(self.running_var);
        let scale: Array1<f32> = g.iter().zip(v).map(|(&g, &v)| g / (v + self.eps).sqrt()).collect();
        let shift: Array1<f32> = b.iter().zip(m).zip(scale.iter()).map(|((&b, &m), &s)| b - m * s).collect();
        (scale, shift)
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> Array3<f32> {
        let (scale, shift) = self.scale_shift(store);
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let (s, t) = (scale[c], shift[c]);
            plane.mapv_inplace(|v| v * s + t);
        }
        y
    }

    pub fn backward(&self, store: &ParamStore, dy: &Array3<f32>) -> Array3<f32> {
        let (scale, _) = self.scale_shift(store);
        let mut dx = dy.clone();
        for (c, mut plane) in dx.axis_iter_mut(Axis(0)).enumerate() {
            let s = scale[c];
            plane.mapv_inplace(|v| v * s);
        }
        dx
    }
}

pub fn relu(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Array3<f32>, dy: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &out| {
        if out <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize),
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (out_extent(h, self.kernel, self.stride, self.pad), out_extent(w, self.kernel, self.stride, self.pad))
    }

    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, MaxPoolCache) {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let mut y = Array3::zeros((c, oh, ow));
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[[ci, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                best_idx = (ci * h + iy as usize) * w + ix as usize;
                            }
                        }
                    }
                    y[[ci, oy, ox]] = best;
                    argmax.push(best_idx);
                }
            }
        }
        (y, MaxPoolCache { argmax, in_shape: x.dim() })
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Array3<f32>) -> Array3<f32> {
        let mut dx = Array3::<f32>::zeros(cache.in_shape);
        let flat = dx.as_slice_mut().expect("contiguous");
        for (&idx, &g) in cache.argmax.iter().zip(dy.iter()) {
            flat[idx] += g;
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

/// Source taps `(index, weight)` along one axis for resizing `from → to`.
/// Bilinear uses half-pixel centers without corner alignment.
fn resize_taps(from: usize, to: usize, mode: UpsampleMode) -> Vec<[(usize, f32); 2]> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|o| match mode {
            UpsampleMode::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(from - 1);
                [(i, 1.0), (i, 0.0)]
            }
            UpsampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(from - 1);
                let i1 = (i0 + 1).min(from - 1);
                let t = (src - i0 as f64) as f32;
                [(i0, 1.0 - t), (i1, t)]
            }
        })
        .collect()
}

pub fn upsample(x: &Array3<f32>, out_h: usize, out_w: usize, mode: UpsampleMode) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let ty = resize_taps(h, out_h, mode);
    let tx = resize_taps(w, out_w, mode);
    let mut y = Array3::zeros((c, out_h, out_w));
    for ci in 0..c {
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        acc += wy * wx * x[[ci, iy, ix]];
                    }
                }
                y[[ci, oy, ox]] = acc;
            }
        }
    }
    y
}

pub fn upsample_backward(dy: &Array3<f32>, in_h: usize, in_w: usize, mode: UpsampleMode) -> Array3<f32> {
    let (c, oh, ow) = dy.dim();
    let ty = resize_taps(in_h, oh, mode);
    let tx = resize_taps(in_w, ow, mode);
    let mut dx = Array3::zeros((c, in_h, in_w));
    for ci in 0..c {
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let g = dy[[ci, oy, ox]];
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        dx[[ci, iy, ix]] += wy * wx * g;
                    }
                }
            }
        }
    }
    dx
}

/// Channel concatenation of two maps with equal spatial size.
pub fn concat_channels(a: &Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels(x: &Array3<f32>, first: usize) -> (Array3<f32>, Array3<f32>) {
    (x.slice(s![..first, .., ..]).to_owned(), x.slice(s![first.., .., ..]).to_owned())
}

/// Residual bottleneck block: 1×1 reduce, 3×3 (strided), 1×1 expand, with an
/// optional strided 1×1 projection on the skip path.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub conv1: Conv2d,
    pub bn1: FrozenBatchNorm,
    pub conv2: Conv2d,
    pub bn2: FrozenBatchNorm,
    pub conv3: Conv2d,
    pub bn3: FrozenBatchNorm,
    pub downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

pub struct BottleneckCache {
    c1: ConvCache,
    a1: Array3<f32>,
    c2: ConvCache,
    a2: Array3<f32>,
    c3: ConvCache,
    ds: Option<ConvCache>,
    out: Array3<f32>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, in_c: usize, width: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), group, in_c, width, 1, 1, 0, false, rng);
        let bn1 = FrozenBatchNorm::new(store, &format!("{name}.bn1"), group, width);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), group, width, width, 3, stride, 1, false, rng);
        let bn2 = FrozenBatchNorm::new(store, &format!("{name}.bn2"), group, width);
        let conv3 = Conv2d::new(store, &format!("{name}.conv3"), group, width, out_c, 1, 1, 0, false, rng);
        let bn3 = FrozenBatchNorm::new(store, &format!("{name}.bn3"), group, out_c);
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2d::new(store, &format!("{name}.downsample.0"), group, in_c, out_c, 1, stride, 0, false, rng),
                FrozenBatchNorm::new(store, &format!("{name}.downsample.1"), group, out_c),
            )
        });
        Bottleneck {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            downsample,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> (Array3<f32>, BottleneckCache) {
        let (h, c1) = self.conv1.forward(store, x);
        let mut a1 = self.bn1.forward(store, &h);
        relu(&mut a1);
        let (h, c2) = self.conv2.forward(store, &a1);
        let mut a2 = self.bn2.forward(store, &h);
        relu(&mut a2);
        let (h, c3) = self.conv3.forward(store, &a2);
        let mut out = self.bn3.forward(store, &h);
        let ds = match &self.downsample {
            Some((conv, bn)) => {
                let (skip, cache) = conv.forward(store, x);
                out += &bn.forward(store, &skip);
                Some(cache)
            }
            None => {
                out += x;
                None
            }
        };
        relu(&mut out);
        let cache = BottleneckCache {
            c1,
            a1,
            c2,
            a2,
            c3,
            ds,
            out: out.clone(),
        };
        (out, cache)
    }

    pub fn backward(&self, store: &ParamStore, cache: &BottleneckCache, dy: &Array3<f32>, grads: &mut Grads) -> Array3<f32> {
        let d_out = relu_backward(&cache.out, dy);
        let d = self.bn3.backward(store, &d_out);
        let d = self.conv3.backward(store, &cache.c3, &d, grads);
        let d = relu_backward(&cache.a2, &d);
        let d = self.bn2.backward(store, &d);
        let d = self.conv2.backward(store, &cache.c2, &d, grads);
        let d = relu_backward(&cache.a1, &d);
        let d = self.bn1.backward(store, &d);
        let mut dx = self.conv1.backward(store, &cache.c1, &d, grads);
        match (&self.downsample, &cache.ds) {
            (Some((conv, bn)), Some(ds_cache)) => {
                let d = bn.backward(store, &d_out);
                dx += &conv.backward(store, ds_cache, &d, grads);
            }
            _ => dx += &d_out,
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    // Direct nested-loop convolution used as an oracle for im2col + matmul.
    fn conv_reference(store: &ParamStore, conv: &Conv2d, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let (oh, ow) = conv.output_hw(h, w);
        let wt = store.value(conv.weight);
        let k = conv.kernel;
        Array3::from_shape_fn((conv.out_channels, oh, ow), |(o, oy, ox)| {
            let mut acc = conv.bias.map_or(0.0, |b| store.value(b)[o] as f64);
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * conv.stride + ki) as isize - conv.pad as isize;
                        let ix = (ox * conv.stride + kj) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[((o * c + ci) * k + ki) * k + kj] as f64 * x[[ci, iy as usize, ix as usize]] as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cases = [
            (3, 1, 1, 3, (9, 11)),
            (3, 2, 1, 3, (9, 11)),
            (1, 1, 0, 3, (9, 11)),
            (1, 2, 0, 3, (9, 11)),
            (7, 2, 3, 3, (9, 11)),
            // Degenerate spatial extents and single input channel.
            (1, 1, 0, 1, (1, 1)),
            (1, 1, 0, 4, (1, 3)),
            (1, 1, 0, 4, (3, 1)),
            (3, 2, 1, 2, (1, 1)),
        ];
        for (k, stride, pad, c_in, (h, w)) in cases {
            let mut store = ParamStore::new();
            let conv = Conv2d::new(&mut store, "c", ParamGroup::Head, c_in, 5, k, stride, pad, true, &mut rng);
            for b in store.get_mut(conv.bias.unwrap()).value.iter_mut() {
                *b = rng.random_range(-1.0..1.0);
            }
            let x = random3(&mut rng, (c_in, h, w));
            let (y, _) = conv.forward(&store, &x);
            let r = conv_reference(&store, &conv, &x);
            assert_eq!(y.dim(), r.dim());
            for (a, b) in y.iter().zip(r.iter()) {
                assert!((a - b).abs() < 1e-4, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }

    // Checks d/dx <dy, f(x)> and d/dw against central differences.
    #[test]
    fn bottleneck_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = Bottleneck::new(&mut store, "b", ParamGroup::Backbone, 3, 4, 6, 2, &mut rng);
        // Non-trivial frozen statistics.
        for p in store.iter_mut().filter(|p| !p.trainable) {
            for v in p.value.iter_mut() {
                *v = if p.name.ends_with("running_var") {
                    rng.random_range(0.5..2.0)
                } else {
                    rng.random_range(-0.5..0.5) + if p.name.ends_with(".weight") { 1.0 } else { 0.0 }
                };
            }
        }
        let x = random3(&mut rng, (3, 6, 6));
        let (y, cache) = block.forward(&store, &x);
        let dy = random3(&mut rng, y.dim());
        let mut grads = store.zero_grads();
        let dx = block.backward(&store, &cache, &dy, &mut grads);

        let objective = |store: &ParamStore, x: &Array3<f32>| -> f64 {
            let (y, _) = block.forward(store, x);
            y.iter().zip(dy.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let h = 1e-2f32;
        for idx in [0usize, 17, 50, 107] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (objective(&store, &xp) - objective(&store, &xm)) / (2.0 * h as f64);
            let an = dx.as_slice().unwrap()[idx] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "dx[{idx}]: fd {fd} vs {an}");
        }
        let w = block.conv2.weight;
        for idx in [0usize, 33, 100] {
            let mut sp = store.clone();
            sp.get_mut(w).value[idx] += h;
            let mut sm = store.clone();
            sm.get_mut(w).value[idx] -= h;
            let fd = (objective(&sp, &x) - objective(&sm, &x)) / (2.0 * h as f64);
            let an = grads.values[w.0][idx] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "dw[{idx}]: fd {fd} vs {an}");
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let x = random3(&mut rng, (2, 3, 4));
            let y = upsample(&x, 6, 8, mode);
            let g = random3(&mut rng, y.dim());
            let lhs: f32 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            let dx = upsample_backward(&g, 3, 4, mode);
            let rhs: f32 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-4, "{mode:?}: {lhs} vs {rhs}");
        }
        let x = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i * 2 + j) as f32);
        let y = upsample(&x, 4, 4, UpsampleMode::Nearest);
        assert_eq!(y[[0, 1, 1]], 0.0);
        assert_eq!(y[[0, 3, 2]], 3.0);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f32);
        let pool = MaxPool2d { kernel: 3, stride: 2, pad: 1 };
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.dim(), (1, 2, 2));
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(y[[0, 1, 1]], 15.0);
        let dx = pool.backward(&cache, &Array3::ones((1, 2, 2)));
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 3, 3]], 1.0);
    }
}
