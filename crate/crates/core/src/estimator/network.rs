//! Forward and reverse passes of the estimator network.
//!
//! Depth branch: stride-2 convolutions with rectifiers, global average pool,
//! linear projection. Load branch: two-layer perceptron. Fusion head: linear,
//! rectifier, linear. All parameters live in one flat `f64` vector addressed
//! through a [`Layout`].

use serde::{Deserialize, Serialize};

use super::{EstimatorError, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub feature_width: usize,
    pub load_hidden: usize,
    pub fusion_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_width: 64,
            image_height: 64,
            conv_channels: vec![8, 16, 32],
            kernel: 3,
            feature_width: 64,
            load_hidden: 32,
            fusion_hidden: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |msg: &str| Err(EstimatorError::InvalidConfig(msg.to_string()));
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive");
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be non-empty and positive");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        if self.feature_width == 0 || self.load_hidden == 0 || self.fusion_hidden == 0 {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    /// Spatial size after each convolution block, starting with the input.
    pub(crate) fn spatial(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.image_height, self.image_width)];
        for _ in &self.conv_channels {
            let (h, w) = *dims.last().unwrap();
            dims.push((conv_out(h, self.kernel), conv_out(w, self.kernel)));
        }
        dims
    }
}

fn conv_out(n: usize, k: usize) -> usize {
    (n + 2 * (k / 2) - k) / 2 + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named shape table over the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let e = LayoutEntry { name, shape, offset };
            offset += e.len();
            entries.push(e);
        };
        let k = cfg.kernel;
        let mut cin = 1;
        for (l, &cout) in cfg.conv_channels.iter().enumerate() {
            push(format!("conv{l}.weight"), vec![cout, cin, k, k]);
            push(format!("conv{l}.bias"), vec![cout]);
            cin = cout;
        }
        let f = cfg.feature_width;
        push("depth_fc.weight".into(), vec![f, cin]);
        push("depth_fc.bias".into(), vec![f]);
        push("load1.weight".into(), vec![cfg.load_hidden, 4]);
        push("load1.bias".into(), vec![cfg.load_hidden]);
        push("load2.weight".into(), vec![f, cfg.load_hidden]);
        push("load2.bias".into(), vec![f]);
        push("fusion1.weight".into(), vec![cfg.fusion_hidden, 2 * f]);
        push("fusion1.bias".into(), vec![cfg.fusion_hidden]);
        push("fusion2.weight".into(), vec![3, cfg.fusion_hidden]);
        push("fusion2.bias".into(), vec![3]);
        Self { entries }
    }

    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Slices of the parameter vector, in layout order.
struct Views<'a> {
    conv: Vec<(&'a [f64], &'a [f64])>,
    depth_fc: (&'a [f64], &'a [f64]),
    load1: (&'a [f64], &'a [f64]),
    load2: (&'a [f64], &'a [f64]),
    fusion1: (&'a [f64], &'a [f64]),
    fusion2: (&'a [f64], &'a [f64]),
}

struct ViewsMut<'a> {
    conv: Vec<(&'a mut [f64], &'a mut [f64])>,
    depth_fc: (&'a mut [f64], &'a mut [f64]),
    load1: (&'a mut [f64], &'a mut [f64]),
    load2: (&'a mut [f64], &'a mut [f64]),
    fusion1: (&'a mut [f64], &'a mut [f64]),
    fusion2: (&'a mut [f64], &'a mut [f64]),
}

fn views<'a>(layout: &Layout, n_conv: usize, p: &'a [f64]) -> Views<'a> {
    let mut it = layout.entries.iter().map(|e| &p[e.range()]);
    let mut pair = || (it.next().unwrap(), it.next().unwrap());
    let conv = (0..n_conv).map(|_| pair()).collect();
    Views { conv, depth_fc: pair(), load1: pair(), load2: pair(), fusion1: pair(), fusion2: pair() }
}

fn views_mut<'a>(layout: &Layout, n_conv: usize, mut p: &'a mut [f64]) -> ViewsMut<'a> {
    let mut slices = Vec::with_capacity(layout.entries.len());
    for e in &layout.entries {
        let (head, tail) = std::mem::take(&mut p).split_at_mut(e.len());
        slices.push(head);
        p = tail;
    }
    let mut it = slices.into_iter();
    let mut pair = || (it.next().unwrap(), it.next().unwrap());
    let conv = (0..n_conv).map(|_| pair()).collect();
    ViewsMut { conv, depth_fc: pair(), load1: pair(), load2: pair(), fusion1: pair(), fusion2: pair() }
}

/// A normalized network input. The depth image is held sparsely because
/// masked frames are mostly background.
#[derive(Clone, Debug, PartialEq)]
pub struct Input {
    pub depth: Vec<(u32, f64)>,
    pub q: [f64; 4],
}

impl Input {
    pub fn from_dense(depth: &[f64], q: [f64; 4]) -> Self {
        let depth = depth.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i as u32, *v)).collect();
        Self { depth, q }
    }
}

/// Activations kept for the reverse pass.
pub(crate) struct Cache {
    conv: Vec<Vec<f64>>,
    depth_feat: Vec<f64>,
    load_hidden: Vec<f64>,
    load_feat: Vec<f64>,
    fusion_hidden: Vec<f64>,
    pub(crate) output: [f64; 3],
}

pub(crate) struct Network {
    pub(crate) cfg: EncoderConfig,
    pub(crate) layout: Layout,
    dims: Vec<(usize, usize)>,
}

fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        *y = b[o] + w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulate weight/bias gradients of `y = W x + b` and optionally `dx`.
fn dense_back(w: &[f64], x: &[f64], gy: &[f64], gw: &mut [f64], gb: &mut [f64], gx: Option<&mut [f64]>) {
    let n = x.len();
    for (o, &g) in gy.iter().enumerate() {
        gb[o] += g;
        if g == 0.0 {
            continue;
        }
        for (a, &xi) in gw[o * n..(o + 1) * n].iter_mut().zip(x) {
            *a += g * xi;
        }
    }
    if let Some(gx) = gx {
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (a, &wi) in gx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                *a += g * wi;
            }
        }
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Range of output columns `x` with `0 <= 2x + kx - pad < w`.
fn valid_range(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if kx < pad { (pad - kx).div_ceil(2) } else { 0 };
    let hi = if w + pad > kx { ((w + pad - kx - 1) / 2 + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }

    /// Output positions `(y, x, ky, kx)` receiving input pixel `(iy, ix)`.
    fn scatter(&self, iy: usize, ix: usize, mut f: impl FnMut(usize, usize)) {
        let (k, pad) = (self.k, self.pad());
        for ky in 0..k {
            let t = iy + pad;
            if t < ky || !(t - ky).is_multiple_of(2) || (t - ky) / 2 >= self.ho {
                continue;
            }
            let y = (t - ky) / 2;
            for kx in 0..k {
                let s = ix + pad;
                if s < kx || !(s - kx).is_multiple_of(2) || (s - kx) / 2 >= self.wo {
                    continue;
                }
                f(y * self.wo + (s - kx) / 2, ky * k + kx);
            }
        }
    }

    fn forward_sparse(&self, x: &[(u32, f64)], wt: &[f64], b: &[f64], out: &mut [f64]) {
        let (plane, kk) = (self.ho * self.wo, self.k * self.k);
        for o in 0..self.cout {
            out[o * plane..(o + 1) * plane].fill(b[o]);
        }
        for &(idx, v) in x {
            let (iy, ix) = (idx as usize / self.w, idx as usize % self.w);
            self.scatter(iy, ix, |p, kidx| {
                for o in 0..self.cout {
                    out[o * plane + p] += wt[o * kk + kidx] * v;
                }
            });
        }
    }

    fn backward_sparse(&self, x: &[(u32, f64)], gy: &[f64], gw: &mut [f64], gb: &mut [f64]) {
        let (plane, kk) = (self.ho * self.wo, self.k * self.k);
        for o in 0..self.cout {
            gb[o] += gy[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        for &(idx, v) in x {
            let (iy, ix) = (idx as usize / self.w, idx as usize % self.w);
            self.scatter(iy, ix, |p, kidx| {
                for o in 0..self.cout {
                    gw[o * kk + kidx] += gy[o * plane + p] * v;
                }
            });
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Patch matrix `[cin·k·k, ho·wo]`, zero outside the image.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, pad) = (self.k, self.pad());
        let (plane_in, plane) = (self.h * self.w, self.ho * self.wo);
        cols.fill(0.0);
        for i in 0..self.cin {
            let x_i = &x[i * plane_in..(i + 1) * plane_in];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((i * k + ky) * k + kx) * plane..][..plane];
                    let (x0, x1) = valid_range(kx, pad, self.w, self.wo);
                    for y in 0..self.ho {
                        let iy = 2 * y + ky;
                        if iy < pad || iy - pad >= self.h {
                            continue;
                        }
                        let src = &x_i[(iy - pad) * self.w..][..self.w];
                        let dst = &mut row[y * self.wo..][..self.wo];
                        for xo in x0..x1 {
                            dst[xo] = src[2 * xo + kx - pad];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a patch-matrix gradient back onto the image.
    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let (k, pad) = (self.k, self.pad());
        let (plane_in, plane) = (self.h * self.w, self.ho * self.wo);
        for i in 0..self.cin {
            let gx_i = &mut gx[i * plane_in..(i + 1) * plane_in];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((i * k + ky) * k + kx) * plane..][..plane];
                    let (x0, x1) = valid_range(kx, pad, self.w, self.wo);
                    for y in 0..self.ho {
                        let iy = 2 * y + ky;
                        if iy < pad || iy - pad >= self.h {
                            continue;
                        }
                        let dst = &mut gx_i[(iy - pad) * self.w..][..self.w];
                        let src = &row[y * self.wo..][..self.wo];
                        for xo in x0..x1 {
                            dst[2 * xo + kx - pad] += src[xo];
                        }
                    }
                }
            }
        }
    }

    fn forward_dense(&self, x: &[f64], wt: &[f64], b: &[f64], out: &mut [f64]) {
        let (kl, plane) = (self.patch_len(), self.ho * self.wo);
        let mut cols = vec![0.0; kl * plane];
        self.im2col(x, &mut cols);
        for o in 0..self.cout {
            out[o * plane..(o + 1) * plane].fill(b[o]);
        }
        // out[cout, P] += W[cout, K] · cols[K, P]
        gemm(self.cout, kl, plane, wt, false, &cols, false, out);
    }

    fn backward_dense(&self, x: &[f64], wt: &[f64], gy: &[f64], gw: &mut [f64], gb: &mut [f64], gx: &mut [f64]) {
        let (kl, plane) = (self.patch_len(), self.ho * self.wo);
        for o in 0..self.cout {
            gb[o] += gy[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        let mut cols = vec![0.0; kl * plane];
        self.im2col(x, &mut cols);
        // gW[cout, K] += G[cout, P] · colsᵀ
        gemm(self.cout, plane, kl, gy, false, &cols, true, gw);
        // gcols[K, P] = Wᵀ · G
        let mut gcols = vec![0.0; kl * plane];
        gemm(kl, self.cout, plane, wt, true, gy, false, &mut gcols);
        self.col2im(&gcols, gx);
    }
}

/// `c[m, n] += op(a)[m, k] · op(b)[k, n]`, all row-major and dense; a
/// transposed operand is stored as its untransposed shape.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the strides can reach.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Network {
    pub(crate) fn new(cfg: EncoderConfig) -> Result<Self, EstimatorError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let dims = cfg.spatial();
        Ok(Self { cfg, layout, dims })
    }

    fn geom(&self, l: usize) -> ConvGeom {
        let cin = if l == 0 { 1 } else { self.cfg.conv_channels[l - 1] };
        ConvGeom {
            cin,
            cout: self.cfg.conv_channels[l],
            h: self.dims[l].0,
            w: self.dims[l].1,
            ho: self.dims[l + 1].0,
            wo: self.dims[l + 1].1,
            k: self.cfg.kernel,
        }
    }

    pub(crate) fn forward(&self, p: &[f64], variant: Variant, input: &Input) -> Cache {
        let n_conv = self.cfg.conv_channels.len();
        let v = views(&self.layout, n_conv, p);
        let f = self.cfg.feature_width;

        let mut conv: Vec<Vec<f64>> = Vec::with_capacity(n_conv);
        let mut depth_feat = vec![0.0; f];
        if variant.uses_depth() {
            for l in 0..n_conv {
                let g = self.geom(l);
                let mut out = vec![0.0; g.cout * g.ho * g.wo];
                if l == 0 {
                    g.forward_sparse(&input.depth, v.conv[l].0, v.conv[l].1, &mut out);
                } else {
                    g.forward_dense(&conv[l - 1], v.conv[l].0, v.conv[l].1, &mut out);
                }
                relu(&mut out);
                conv.push(out);
            }
            let last = conv.last().unwrap();
            let c = *self.cfg.conv_channels.last().unwrap();
            let plane = last.len() / c;
            let pooled: Vec<f64> =
                (0..c).map(|ch| last[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
            dense(v.depth_fc.0, v.depth_fc.1, &pooled, &mut depth_feat);
        }

        let mut load_hidden = vec![0.0; self.cfg.load_hidden];
        let mut load_feat = vec![0.0; f];
        if variant.uses_load() {
            dense(v.load1.0, v.load1.1, &input.q, &mut load_hidden);
            relu(&mut load_hidden);
            dense(v.load2.0, v.load2.1, &load_hidden, &mut load_feat);
        }

        let joint: Vec<f64> = depth_feat.iter().chain(&load_feat).copied().collect();
        let mut fusion_hidden = vec![0.0; self.cfg.fusion_hidden];
        dense(v.fusion1.0, v.fusion1.1, &joint, &mut fusion_hidden);
        relu(&mut fusion_hidden);
        let mut output = [0.0; 3];
        dense(v.fusion2.0, v.fusion2.1, &fusion_hidden, &mut output);

        Cache { conv, depth_feat, load_hidden, load_feat, fusion_hidden, output }
    }

    /// Accumulate `∂L/∂p` into `grad` given `∂L/∂output`.
    pub(crate) fn backward(
        &self,
        p: &[f64],
        variant: Variant,
        input: &Input,
        cache: &Cache,
        g_out: &[f64; 3],
        grad: &mut [f64],
    ) {
        let n_conv = self.cfg.conv_channels.len();
        let v = views(&self.layout, n_conv, p);
        let mut gv = views_mut(&self.layout, n_conv, grad);
        let f = self.cfg.feature_width;

        let mut g_hidden = vec![0.0; self.cfg.fusion_hidden];
        dense_back(v.fusion2.0, &cache.fusion_hidden, g_out, gv.fusion2.0, gv.fusion2.1, Some(&mut g_hidden));
        for (g, h) in g_hidden.iter_mut().zip(&cache.fusion_hidden) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let joint: Vec<f64> = cache.depth_feat.iter().chain(&cache.load_feat).copied().collect();
        let mut g_joint = vec![0.0; 2 * f];
        dense_back(v.fusion1.0, &joint, &g_hidden, gv.fusion1.0, gv.fusion1.1, Some(&mut g_joint));
        let (g_depth, g_load) = g_joint.split_at(f);

        if variant.uses_load() {
            let mut g_lh = vec![0.0; self.cfg.load_hidden];
            dense_back(v.load2.0, &cache.load_hidden, g_load, gv.load2.0, gv.load2.1, Some(&mut g_lh));
            for (g, h) in g_lh.iter_mut().zip(&cache.load_hidden) {
                if *h <= 0.0 {
                    *g = 0.0;
                }
            }
            dense_back(v.load1.0, &input.q, &g_lh, gv.load1.0, gv.load1.1, None);
        }

        if variant.uses_depth() {
            let last = cache.conv.last().unwrap();
            let c = *self.cfg.conv_channels.last().unwrap();
            let plane = last.len() / c;
            let pooled: Vec<f64> =
                (0..c).map(|ch| last[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
            let mut g_pool = vec![0.0; c];
            dense_back(v.depth_fc.0, &pooled, g_depth, gv.depth_fc.0, gv.depth_fc.1, Some(&mut g_pool));
            let mut g_act: Vec<f64> = (0..c * plane).map(|i| g_pool[i / plane] / plane as f64).collect();
            for l in (0..n_conv).rev() {
                for (g, a) in g_act.iter_mut().zip(&cache.conv[l]) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
                let geom = self.geom(l);
                let (gw, gb) = &mut gv.conv[l];
                if l == 0 {
                    geom.backward_sparse(&input.depth, &g_act, gw, gb);
                } else {
                    let mut g_in = vec![0.0; cache.conv[l - 1].len()];
                    geom.backward_dense(&cache.conv[l - 1], v.conv[l].0, &g_act, gw, gb, &mut g_in);
                    g_act = g_in;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.spatial(), vec![(64, 64), (32, 32), (16, 16), (8, 8)]);
        let layout = Layout::new(&cfg);
        assert_eq!(layout.get("conv1.weight").unwrap().shape, vec![16, 8, 3, 3]);
        assert_eq!(layout.get("fusion1.weight").unwrap().shape, vec![64, 128]);
        assert_eq!(layout.get("fusion2.bias").unwrap().shape, vec![3]);
        let expected = (8 * 9 + 8)
            + (16 * 72 + 16)
            + (32 * 144 + 32)
            + (64 * 32 + 64)
            + (32 * 4 + 32)
            + (64 * 32 + 64)
            + (64 * 128 + 64)
            + (3 * 64 + 3);
        assert_eq!(layout.total(), expected);
    }

    #[test]
    fn odd_sizes() {
        assert_eq!(conv_out(5, 3), 3);
        assert_eq!(conv_out(8, 3), 4);
        assert_eq!(conv_out(1, 3), 1);
    }

    #[test]
    fn sparse_matches_dense() {
        let g = ConvGeom { cin: 1, cout: 2, h: 7, w: 6, ho: 4, wo: 3, k: 3 };
        let x: Vec<f64> = (0..42).map(|i| if i % 3 == 0 { 0.0 } else { (i as f64 * 0.37).sin() }).collect();
        let wt: Vec<f64> = (0..18).map(|i| (i as f64 * 0.71).cos()).collect();
        let b = [0.1, -0.2];
        let mut a = vec![0.0; 24];
        let mut d = vec![0.0; 24];
        g.forward_dense(&x, &wt, &b, &mut d);
        g.forward_sparse(&Input::from_dense(&x, [0.0; 4]).depth, &wt, &b, &mut a);
        for (p, q) in a.iter().zip(&d) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
