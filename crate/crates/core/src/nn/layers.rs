use rand::Rng;

use super::{Layer, Param, Tensor};
use crate::linalg::Real;

/// 2-D convolution with square kernels, zero padding, stride and dilation.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = Param::kaiming(format!("{name}.weight"), vec![cout, cin, kernel, kernel], fan_in, rng);
        let bias = bias.then(|| Param::filled(format!("{name}.bias"), vec![cout], 0.0, true));
        Self { cin, cout, kernel, stride, pad, dilation, weight, bias, input: None }
    }

    /// Stride-1 convolution whose output keeps the input size.
    pub fn same<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, kernel: usize, dilation: usize, bias: bool, rng: &mut R) -> Self {
        Self::new(name, cin, cout, kernel, 1, dilation * (kernel - 1) / 2, dilation, bias, rng)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        ((h + 2 * self.pad - span) / self.stride + 1, (w + 2 * self.pad - span) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (oh, ow) = self.output_size(h, w);
        Geometry { cin: self.cin, h, w, k: self.kernel, stride: self.stride, pad: self.pad, dil: self.dilation, oh, ow }
    }

    fn run(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.cin, "{}: expected {} input channels", self.weight.name, self.cin);
        let (h, w) = (x.h(), x.w());
        let geo = self.geometry(h, w);
        let p = geo.oh * geo.ow;
        let ckk = self.cin * self.kernel * self.kernel;
        let mut out = Tensor::zeros([x.n(), self.cout, geo.oh, geo.ow]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; ckk * p] };
        for i in 0..x.n() {
            let src: &[f32] = if self.is_pointwise() {
                x.item(i)
            } else {
                im2col(x.item(i), &geo, &mut cols);
                &cols
            };
            f32::gemm(self.cout, ckk, p, 1.0, &self.weight.value, false, src, false, 0.0, out.item_mut(i));
            if let Some(b) = &self.bias {
                for (o, row) in out.item_mut(i).chunks_mut(p).enumerate() {
                    let bv = b.value[o];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    /// Output columns `[lo, hi)` whose input column lies inside the image for
    /// kernel column `kj`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let off = (kj * self.dil) as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_exclusive = (self.w as isize - off + s - 1) / s;
        let lo = lo.clamp(0, self.ow as isize) as usize;
        let hi = hi_exclusive.clamp(0, self.ow as isize) as usize;
        (lo, hi.max(lo))
    }
}

fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let p = g.oh * g.ow;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let (lo, hi) = g.col_range(kj);
                let off = (kj * g.dil) as isize - g.pad as isize;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if g.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[(ox as isize * g.stride as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    let p = g.oh * g.ow;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let (lo, hi) = g.col_range(kj);
                let off = (kj * g.dil) as isize - g.pad as isize;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in lo..hi {
                        dst[(ox as isize * g.stride as isize + off) as usize] += src[ox];
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.run(x);
        self.input = Some(x.clone());
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("Conv2d::backward called without forward");
        let geo = self.geometry(x.h(), x.w());
        let p = geo.oh * geo.ow;
        let ckk = self.cin * self.kernel * self.kernel;
        let pointwise = self.is_pointwise();
        let mut dx = Tensor::zeros(x.shape);
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * p] };
        let mut dcols = if pointwise { Vec::new() } else { vec![0.0; ckk * p] };
        for i in 0..x.n() {
            let g = grad.item(i);
            if let Some(b) = &mut self.bias {
                for (o, row) in g.chunks(p).enumerate() {
                    b.grad[o] += row.iter().sum::<f32>();
                }
            }
            if pointwise {
                f32::gemm(self.cout, p, ckk, 1.0, g, false, x.item(i), true, 1.0, &mut self.weight.grad);
                f32::gemm(ckk, self.cout, p, 1.0, &self.weight.value, true, g, false, 0.0, dx.item_mut(i));
            } else {
                im2col(x.item(i), &geo, &mut cols);
                f32::gemm(self.cout, p, ckk, 1.0, g, false, &cols, true, 1.0, &mut self.weight.grad);
                f32::gemm(ckk, self.cout, p, 1.0, &self.weight.value, true, g, false, 0.0, &mut dcols);
                col2im(&dcols, &geo, dx.item_mut(i));
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// Batch normalisation over `N x H x W` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub momentum: f32,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            momentum: 0.1,
            eps: 1e-5,
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0, true),
            beta: Param::filled(format!("{name}.beta"), vec![channels], 0.0, true),
            running_mean: Param::filled(format!("{name}.running_mean"), vec![channels], 0.0, false),
            running_var: Param::filled(format!("{name}.running_var"), vec![channels], 1.0, false),
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, hw) = (x.n(), x.c(), x.h() * x.w());
        let count = (n * hw) as f64;
        let mut xhat = Tensor::zeros(x.shape);
        let mut out = Tensor::zeros(x.shape);
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for i in 0..n {
                for &v in &x.item(i)[ch * hw..(ch + 1) * hw] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[ch] = istd as f32;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..n {
                let off = i * c * hw + ch * hw;
                for j in off..off + hw {
                    let xh = ((x.data[j] as f64 - mean) * istd) as f32;
                    xhat.data[j] = xh;
                    out.data[j] = g * xh + b;
                }
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean.value[ch] = (1.0 - m) * self.running_mean.value[ch] + m * mean as f32;
            self.running_var.value[ch] = (1.0 - m) * self.running_var.value[ch] + m * unbiased as f32;
        }
        self.cache = Some((xhat, inv_std));
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let (c, hw) = (x.c(), x.h() * x.w());
        let mut out = x.clone();
        for i in 0..x.n() {
            let item = out.item_mut(i);
            for ch in 0..c {
                let scale = self.gamma.value[ch] / (self.running_var.value[ch] + self.eps).sqrt();
                let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                item[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("BatchNorm2d::backward called without forward");
        let (n, c, hw) = (grad.n(), grad.c(), grad.h() * grad.w());
        let count = (n * hw) as f32;
        let mut dx = Tensor::zeros(grad.shape);
        for ch in 0..c {
            let mut dbeta = 0.0f64;
            let mut dgamma = 0.0f64;
            for i in 0..n {
                let off = i * c * hw + ch * hw;
                for j in off..off + hw {
                    dbeta += grad.data[j] as f64;
                    dgamma += (grad.data[j] * xhat.data[j]) as f64;
                }
            }
            self.gamma.grad[ch] += dgamma as f32;
            self.beta.grad[ch] += dbeta as f32;
            let k = self.gamma.value[ch] * inv_std[ch] / count;
            let (db, dg) = (dbeta as f32, dgamma as f32);
            for i in 0..n {
                let off = i * c * hw + ch * hw;
                for j in off..off + hw {
                    dx.data[j] = k * (count * grad.data[j] - db - xhat.data[j] * dg);
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    out: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.infer(x);
        self.out = Some(out.clone());
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let out = self.out.take().expect("Relu::backward called without forward");
        let mut dx = grad.clone();
        for (d, o) in dx.data.iter_mut().zip(&out.data) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn clear_cache(&mut self) {
        self.out = None;
    }
}

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<([usize; 4], Vec<u32>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    fn run(x: &Tensor, keep_idx: bool) -> (Tensor, Vec<u32>) {
        let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut idx = if keep_idx { vec![0u32; out.data.len()] } else { Vec::new() };
        for plane in 0..n * c {
            let src = &x.data[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let j = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[j] > best {
                            best = src[j];
                            arg = j;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out.data[o] = best;
                    if keep_idx {
                        idx[o] = arg as u32;
                    }
                }
            }
        }
        (out, idx)
    }
}

impl Layer for MaxPool2 {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (out, idx) = Self::run(x, true);
        self.cache = Some((x.shape, idx));
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        Self::run(x, false).0
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (shape, idx) = self.cache.take().expect("MaxPool2::backward called without forward");
        let mut dx = Tensor::zeros(shape);
        let hw = shape[2] * shape[3];
        let ohw = grad.h() * grad.w();
        for (o, g) in grad.data.iter().enumerate() {
            let plane = o / ohw;
            dx.data[plane * hw + idx[o] as usize] += g;
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Nearest-neighbour 2x upsampling.
#[derive(Debug, Clone, Default)]
pub struct Upsample2;

impl Layer for Upsample2 {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.infer(x)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for plane in 0..n * c {
            let src = &x.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (n, c, h2, w2) = (grad.n(), grad.c(), grad.h(), grad.w());
        let (h, w) = (h2 / 2, w2 / 2);
        let mut dx = Tensor::zeros([n, c, h, w]);
        for plane in 0..n * c {
            let src = &grad.data[plane * h2 * w2..(plane + 1) * h2 * w2];
            let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
}

#[derive(Default)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, layer: impl Layer + 'static) -> Self {
        self.layers.push(Box::new(layer));
        self
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut it = self.layers.iter_mut();
        let Some(first) = it.next() else { return x.clone() };
        let mut h = first.forward(x);
        for l in it {
            h = l.forward(&h);
        }
        h
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut it = self.layers.iter();
        let Some(first) = it.next() else { return x.clone() };
        let mut h = first.infer(x);
        for l in it {
            h = l.infer(&h);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }
}

/// Pre-activation bottleneck residual block:
/// `BN-ReLU-conv1x1-BN-ReLU-conv3x3-BN-ReLU-conv1x1`, plus a 1x1 projection
/// on the skip path when the channel count changes.
pub struct Residual {
    main: Sequential,
    skip: Option<Conv2d>,
}

impl Residual {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let mid = (cout / 2).max(1);
        let main = Sequential::new()
            .push(BatchNorm2d::new(&format!("{name}.bn1"), cin))
            .push(Relu::new())
            .push(Conv2d::same(&format!("{name}.conv1"), cin, mid, 1, 1, true, rng))
            .push(BatchNorm2d::new(&format!("{name}.bn2"), mid))
            .push(Relu::new())
            .push(Conv2d::same(&format!("{name}.conv2"), mid, mid, 3, 1, true, rng))
            .push(BatchNorm2d::new(&format!("{name}.bn3"), mid))
            .push(Relu::new())
            .push(Conv2d::same(&format!("{name}.conv3"), mid, cout, 1, 1, true, rng));
        let skip = (cin != cout).then(|| Conv2d::same(&format!("{name}.skip"), cin, cout, 1, 1, true, rng));
        Self { main, skip }
    }
}

impl Layer for Residual {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut out = self.main.forward(x);
        match &mut self.skip {
            Some(s) => out.add_assign(&s.forward(x)),
            None => out.add_assign(x),
        }
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = self.main.infer(x);
        match &self.skip {
            Some(s) => out.add_assign(&s.infer(x)),
            None => out.add_assign(x),
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut dx = self.main.backward(grad);
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(grad)),
            None => dx.add_assign(grad),
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.main.params();
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.main.params_mut();
        if let Some(s) = &mut self.skip {
            p.extend(s.params_mut());
        }
        p
    }

    fn clear_cache(&mut self) {
        self.main.clear_cache();
        if let Some(s) = &mut self.skip {
            s.clear_cache();
        }
    }
}

/// One hourglass module of the given depth: an upper residual branch at the
/// input resolution plus a pooled lower branch that recurses and is
/// upsampled back before the two are summed.
pub struct Hourglass {
    upper: Residual,
    pool: MaxPool2,
    low1: Residual,
    low2: Box<dyn Layer>,
    low3: Residual,
    up: Upsample2,
}

impl Hourglass {
    pub fn new<R: Rng + ?Sized>(name: &str, depth: usize, channels: usize, rng: &mut R) -> Self {
        let upper = Residual::new(&format!("{name}.up1"), channels, channels, rng);
        let low1 = Residual::new(&format!("{name}.low1"), channels, channels, rng);
        let low2: Box<dyn Layer> = if depth > 1 {
            Box::new(Hourglass::new(&format!("{name}.low2"), depth - 1, channels, rng))
        } else {
            Box::new(Residual::new(&format!("{name}.low2"), channels, channels, rng))
        };
        let low3 = Residual::new(&format!("{name}.low3"), channels, channels, rng);
        Self { upper, pool: MaxPool2::new(), low1, low2, low3, up: Upsample2 }
    }
}

impl Layer for Hourglass {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut out = self.upper.forward(x);
        let p = self.pool.forward(x);
        let l = self.low1.forward(&p);
        let l = self.low2.forward(&l);
        let l = self.low3.forward(&l);
        out.add_assign(&self.up.forward(&l));
        out
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = self.upper.infer(x);
        let l = self.low3.infer(&self.low2.infer(&self.low1.infer(&self.pool.infer(x))));
        out.add_assign(&self.up.infer(&l));
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut dx = self.upper.backward(grad);
        let g = self.up.backward(grad);
        let g = self.low3.backward(&g);
        let g = self.low2.backward(&g);
        let g = self.low1.backward(&g);
        dx.add_assign(&self.pool.backward(&g));
        dx
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.upper.params();
        p.extend(self.low1.params());
        p.extend(self.low2.params());
        p.extend(self.low3.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.upper.params_mut();
        p.extend(self.low1.params_mut());
        p.extend(self.low2.params_mut());
        p.extend(self.low3.params_mut());
        p
    }

    fn clear_cache(&mut self) {
        self.upper.clear_cache();
        self.pool.clear_cache();
        self.low1.clear_cache();
        self.low2.clear_cache();
        self.low3.clear_cache();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_and_grad(out: &Tensor, probe: &[f32]) -> (f64, Tensor) {
        let loss = out.data.iter().zip(probe).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        (loss, Tensor::from_vec(out.shape, probe.to_vec()))
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Finite-difference check of the input gradient and of every parameter
    /// gradient for a linear probe `sum(probe * layer(x))`.
    fn check_layer(layer: &mut dyn Layer, shape: [usize; 4], tol: f64, max_outliers: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(shape, &mut rng);
        let out = layer.forward(&x);
        let probe: Vec<f32> = (0..out.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = loss_and_grad(&out, &probe);
        for p in layer.params_mut() {
            p.zero_grad();
        }
        let dx = layer.backward(&g);
        let h = 3e-4f32;
        let mut checks = 0usize;
        let mut failures = Vec::new();
        let eval = |layer: &mut dyn Layer, x: &Tensor| {
            let out = layer.forward(x);
            layer.clear_cache();
            loss_and_grad(&out, &probe).0
        };
        for idx in (0..x.data.len()).step_by((x.data.len() / 17).max(1)) {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (eval(layer, &xp) - eval(layer, &xm)) / (2.0 * h as f64);
            let an = dx.data[idx] as f64;
            checks += 1;
            if (fd - an).abs() > tol * (1.0 + fd.abs()) {
                failures.push(format!("input grad {idx}: fd {fd} vs {an}"));
            }
        }
        let n_params = layer.params().len();
        for pi in 0..n_params {
            if !layer.params()[pi].trainable {
                continue;
            }
            let grads = layer.params()[pi].grad.clone();
            let len = grads.len();
            for idx in (0..len).step_by((len / 5).max(1)) {
                layer.params_mut()[pi].value[idx] += h;
                let fp = eval(layer, &x);
                layer.params_mut()[pi].value[idx] -= 2.0 * h;
                let fm = eval(layer, &x);
                layer.params_mut()[pi].value[idx] += h;
                let fd = (fp - fm) / (2.0 * h as f64);
                let an = grads[idx] as f64;
                let name = layer.params()[pi].name.clone();
                checks += 1;
                if (fd - an).abs() > tol * (1.0 + fd.abs()) {
                    failures.push(format!("{name}[{idx}]: fd {fd} vs {an}"));
                }
            }
        }
        assert!(failures.len() as f64 <= max_outliers * checks as f64, "{} of {checks} checks failed: {failures:#?}", failures.len());
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::same("c", 3, 4, 3, 2, true, &mut rng);
        check_layer(&mut conv, [2, 3, 7, 6], 2e-2, 0.0);
        let mut strided = Conv2d::new("s", 2, 3, 3, 2, 1, 1, false, &mut rng);
        check_layer(&mut strided, [1, 2, 8, 7], 2e-2, 0.0);
        let mut pw = Conv2d::same("p", 3, 2, 1, 1, true, &mut rng);
        check_layer(&mut pw, [2, 3, 4, 4], 2e-2, 0.0);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new("c", 2, 3, 3, 2, 2, 2, true, &mut rng);
        let x = random_tensor([1, 2, 9, 8], &mut rng);
        let y = conv.infer(&x);
        let (oh, ow) = conv.output_size(9, 8);
        assert_eq!((y.h(), y.w()), (oh, ow));
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = conv.bias.as_ref().unwrap().value[o] as f64;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki * 2) as isize - 2;
                                let ix = (ox * 2 + kj * 2) as isize - 2;
                                if iy < 0 || ix < 0 || iy >= 9 || ix >= 8 {
                                    continue;
                                }
                                let w = conv.weight.value[((o * 2 + c) * 3 + ki) * 3 + kj] as f64;
                                s += w * x.data[(c * 9 + iy as usize) * 8 + ix as usize] as f64;
                            }
                        }
                    }
                    let got = y.data[(o * oh + oy) * ow + ox] as f64;
                    assert!((got - s).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn batchnorm_gradients() {
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        bn.beta.value = vec![0.1, 0.0, 0.3];
        check_layer(&mut bn, [3, 3, 4, 5], 2e-2, 0.0);
    }

    #[test]
    fn pool_upsample_residual_hourglass_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_layer(&mut MaxPool2::new(), [2, 2, 6, 6], 2e-2, 0.0);
        check_layer(&mut Upsample2, [2, 2, 3, 3], 2e-2, 0.0);
        let mut res = Residual::new("r", 3, 6, &mut rng);
        check_layer(&mut res, [4, 3, 8, 8], 2e-2, 0.1);
        let mut hg = Hourglass::new("hg", 2, 4, &mut rng);
        check_layer(&mut hg, [2, 4, 16, 16], 2e-2, 0.1);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = bn.infer(&x);
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a / (1.0f32 + 1e-5).sqrt() - b).abs() < 1e-6);
        }
        bn.forward(&x);
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-6);
    }
}
