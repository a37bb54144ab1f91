//! 2-D cross-correlation with grouped channels.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::linalg::{gemm, MatRef};
use crate::{Float, Tensor};

/// Border handling of [`Graph::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// `p` pixels of zeros on every side.
    Zero(usize),
    /// `p` pixels wrapped around from the opposite side.
    Circular(usize),
}

impl Padding {
    fn amount(self) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Zero(p) | Padding::Circular(p) => p,
        }
    }

    /// Source coordinate of padded coordinate `i` on an axis of size `n`.
    #[inline]
    fn source(self, i: isize, n: usize) -> Option<usize> {
        match self {
            Padding::Circular(_) => Some(i.rem_euclid(n as isize) as usize),
            _ if i >= 0 && (i as usize) < n => Some(i as usize),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: Padding, groups: usize) -> Self {
        Self { stride, padding, groups }
    }
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cg: usize,
    kg: usize,
    stride: usize,
    pad: usize,
    padding: Padding,
    groups: usize,
}

impl Geometry {
    fn new(xs: &[usize], ws: &[usize], spec: &ConvSpec) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::shape("conv2d", format!("input {xs:?}, weight {ws:?}: both must be rank 4")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, cw, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let groups = spec.groups;
        if groups == 0 || c % groups != 0 || k % groups != 0 {
            return Err(TensorError::config(
                "conv2d",
                format!("groups {groups} must divide input channels {c} and output channels {k}"),
            ));
        }
        if spec.stride == 0 {
            return Err(TensorError::config("conv2d", "stride must be positive"));
        }
        if cw != c / groups {
            return Err(TensorError::shape(
                "conv2d",
                format!("axis 1: weight has {cw} channels per group, input gives {} ({c} / {groups})", c / groups),
            ));
        }
        let pad = spec.padding.amount();
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::shape(
                "conv2d",
                format!("axes 2,3: kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / spec.stride + 1;
        let wo = (w + 2 * pad - kw) / spec.stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            ho,
            wo,
            cg: c / groups,
            kg: k / groups,
            stride: spec.stride,
            pad,
            padding: spec.padding,
            groups,
        })
    }

    fn patch_len(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn depthwise(&self) -> bool {
        self.cg == 1 && self.kg == 1
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source row/col index for output position `o` and kernel tap `t`.
    #[inline]
    fn src_row(&self, o: usize, t: usize) -> Option<usize> {
        self.padding.source((o * self.stride + t) as isize - self.pad as isize, self.h)
    }

    #[inline]
    fn src_col(&self, o: usize, t: usize) -> Option<usize> {
        self.padding.source((o * self.stride + t) as isize - self.pad as isize, self.w)
    }

    /// Gathers the receptive fields of sample `ni`, group `gi` into a
    /// `[cg*kh*kw, ho*wo]` matrix.
    fn im2col<T: Float>(&self, x: &[T], ni: usize, gi: usize, cols: &mut [T]) {
        let ohw = self.out_hw();
        for cl in 0..self.cg {
            let plane = &x[((ni * self.c) + gi * self.cg + cl) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (cl * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.ho {
                        let sy = self.src_row(oy, ki);
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match (sy, self.src_col(ox, kj)) {
                                (Some(y), Some(xx)) => plane[y * self.w + xx],
                                _ => T::ZERO,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a `[cg*kh*kw, ho*wo]` matrix back onto the input gradient.
    fn col2im<T: Float>(&self, cols: &[T], ni: usize, gi: usize, gx: &mut [T]) {
        let ohw = self.out_hw();
        for cl in 0..self.cg {
            let base = ((ni * self.c) + gi * self.cg + cl) * self.h * self.w;
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (cl * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.ho {
                        let Some(y) = self.src_row(oy, ki) else { continue };
                        for ox in 0..self.wo {
                            if let Some(xx) = self.src_col(ox, kj) {
                                gx[base + y * self.w + xx] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    /// Cross-correlation of `x: [N, C, H, W]` with `w: [K, C/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geo = Geometry::new(self.shape(x), self.shape(w), &spec)?;
        if let Some(b) = b {
            if self.shape(b) != [geo.k] {
                return Err(TensorError::shape("conv2d", format!("bias {:?}, want [{}]", self.shape(b), geo.k)));
            }
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let ohw = geo.out_hw();
        let mut out = vec![T::ZERO; geo.n * geo.k * ohw];
        if geo.depthwise() {
            depthwise_forward(&geo, xd, wd, &mut out);
        } else {
            let pl = geo.patch_len();
            let mut cols = if geo.pointwise() { Vec::new() } else { vec![T::ZERO; pl * ohw] };
            for ni in 0..geo.n {
                for gi in 0..geo.groups {
                    let out_off = (ni * geo.k + gi * geo.kg) * ohw;
                    let w_mat = MatRef::row_major(geo.kg, pl).at(gi * geo.kg * pl);
                    if geo.pointwise() {
                        let in_off = (ni * geo.c + gi * geo.cg) * ohw;
                        gemm(T::ONE, wd, w_mat, xd, MatRef::row_major(pl, ohw).at(in_off), T::ZERO, &mut out, MatRef::row_major(geo.kg, ohw).at(out_off));
                    } else {
                        geo.im2col(xd, ni, gi, &mut cols);
                        gemm(T::ONE, wd, w_mat, &cols, MatRef::row_major(pl, ohw), T::ZERO, &mut out, MatRef::row_major(geo.kg, ohw).at(out_off));
                    }
                }
            }
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for (i, plane) in out.chunks_mut(ohw).enumerate() {
                let bv = bd[i % geo.k];
                for v in plane {
                    *v += bv;
                }
            }
        }
        let v = Tensor::new(&[geo.n, geo.k, geo.ho, geo.wo], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, spec }))
    }
}

impl Geometry {
    fn padded_dims(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }

    /// Copies one input plane into `buf` with its border materialized.
    fn pad_plane<T: Float>(&self, plane: &[T], buf: &mut [T]) {
        let (ph, pw) = self.padded_dims();
        let p = self.pad;
        for y in 0..ph {
            let row = &mut buf[y * pw..(y + 1) * pw];
            match self.padding.source(y as isize - p as isize, self.h) {
                None => row.fill(T::ZERO),
                Some(sy) => {
                    let src = &plane[sy * self.w..(sy + 1) * self.w];
                    row[p..p + self.w].copy_from_slice(src);
                    for x in (0..p).chain(p + self.w..pw) {
                        row[x] = match self.padding.source(x as isize - p as isize, self.w) {
                            Some(sx) => src[sx],
                            None => T::ZERO,
                        };
                    }
                }
            }
        }
    }

    /// Adds a padded-plane gradient back onto the unpadded plane.
    fn unpad_add<T: Float>(&self, buf: &[T], plane: &mut [T]) {
        let (ph, pw) = self.padded_dims();
        let p = self.pad;
        for y in 0..ph {
            let Some(sy) = self.padding.source(y as isize - p as isize, self.h) else { continue };
            let row = &buf[y * pw..(y + 1) * pw];
            let dst = &mut plane[sy * self.w..(sy + 1) * self.w];
            for (d, &v) in dst.iter_mut().zip(&row[p..p + self.w]) {
                *d += v;
            }
            for x in (0..p).chain(p + self.w..pw) {
                if let Some(sx) = self.padding.source(x as isize - p as isize, self.w) {
                    dst[sx] += row[x];
                }
            }
        }
    }
}

fn depthwise_forward<T: Float>(geo: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let (hw, ohw, kk) = (geo.h * geo.w, geo.out_hw(), geo.kh * geo.kw);
    let (ph, pw) = geo.padded_dims();
    let s = geo.stride;
    let mut buf = vec![T::ZERO; ph * pw];
    for ni in 0..geo.n {
        for ch in 0..geo.c {
            geo.pad_plane(&x[(ni * geo.c + ch) * hw..][..hw], &mut buf);
            let kern = &w[ch * kk..(ch + 1) * kk];
            let dst = &mut out[(ni * geo.c + ch) * ohw..][..ohw];
            dst.fill(T::ZERO);
            for ki in 0..geo.kh {
                for kj in 0..geo.kw {
                    let kv = kern[ki * geo.kw + kj];
                    for oy in 0..geo.ho {
                        let src = &buf[(oy * s + ki) * pw + kj..];
                        let d = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                        if s == 1 {
                            for (o, &v) in d.iter_mut().zip(&src[..geo.wo]) {
                                *o += kv * v;
                            }
                        } else {
                            for (ox, o) in d.iter_mut().enumerate() {
                                *o += kv * src[ox * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Float>(geo: &Geometry, x: &[T], w: &[T], g: &[T], mut gx: Option<&mut [T]>, mut gw: Option<&mut [T]>) {
    let (hw, ohw, kk) = (geo.h * geo.w, geo.out_hw(), geo.kh * geo.kw);
    let (ph, pw) = geo.padded_dims();
    let s = geo.stride;
    let mut buf = vec![T::ZERO; ph * pw];
    let mut gbuf = vec![T::ZERO; ph * pw];
    for ni in 0..geo.n {
        for ch in 0..geo.c {
            let off = (ni * geo.c + ch) * hw;
            let kern = &w[ch * kk..(ch + 1) * kk];
            let gout = &g[(ni * geo.c + ch) * ohw..][..ohw];
            if let Some(gw) = gw.as_deref_mut() {
                geo.pad_plane(&x[off..off + hw], &mut buf);
                for ki in 0..geo.kh {
                    for kj in 0..geo.kw {
                        let mut acc = T::ZERO;
                        for oy in 0..geo.ho {
                            let src = &buf[(oy * s + ki) * pw + kj..];
                            let go = &gout[oy * geo.wo..(oy + 1) * geo.wo];
                            if s == 1 {
                                for (&a, &b) in go.iter().zip(&src[..geo.wo]) {
                                    acc += a * b;
                                }
                            } else {
                                for (ox, &a) in go.iter().enumerate() {
                                    acc += a * src[ox * s];
                                }
                            }
                        }
                        gw[ch * kk + ki * geo.kw + kj] += acc;
                    }
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                gbuf.fill(T::ZERO);
                for ki in 0..geo.kh {
                    for kj in 0..geo.kw {
                        let kv = kern[ki * geo.kw + kj];
                        for oy in 0..geo.ho {
                            let dst = &mut gbuf[(oy * s + ki) * pw + kj..];
                            let go = &gout[oy * geo.wo..(oy + 1) * geo.wo];
                            if s == 1 {
                                for (d, &a) in dst[..geo.wo].iter_mut().zip(go) {
                                    *d += kv * a;
                                }
                            } else {
                                for (ox, &a) in go.iter().enumerate() {
                                    dst[ox * s] += kv * a;
                                }
                            }
                        }
                    }
                }
                geo.unpad_add(&gbuf, &mut gx[off..off + hw]);
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Float>(
    graph: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    spec: &ConvSpec,
    g: &[T],
    need: &dyn Fn(Var) -> bool,
) -> Vec<(Var, Vec<T>)> {
    let geo = Geometry::new(graph.shape(x), graph.shape(w), spec).expect("validated in forward");
    let (xd, wd) = (graph.data(x), graph.data(w));
    let ohw = geo.out_hw();
    let pl = geo.patch_len();
    let mut gx = need(x).then(|| vec![T::ZERO; xd.len()]);
    let mut gw = need(w).then(|| vec![T::ZERO; wd.len()]);

    if geo.depthwise() {
        depthwise_backward(&geo, xd, wd, g, gx.as_deref_mut(), gw.as_deref_mut());
    } else {
        let mut cols = vec![T::ZERO; pl * ohw];
        for ni in 0..geo.n {
            for gi in 0..geo.groups {
                let g_off = (ni * geo.k + gi * geo.kg) * ohw;
                let g_mat = MatRef::row_major(geo.kg, ohw).at(g_off);
                let w_mat = MatRef::row_major(geo.kg, pl).at(gi * geo.kg * pl);
                if let Some(gw) = gw.as_deref_mut() {
                    // dW_g += dY_g * cols^T
                    let (src, src_mat): (&[T], MatRef) = if geo.pointwise() {
                        (xd, MatRef::row_major(pl, ohw).at((ni * geo.c + gi * geo.cg) * ohw))
                    } else {
                        geo.im2col(xd, ni, gi, &mut cols);
                        (&cols, MatRef::row_major(pl, ohw))
                    };
                    gemm(T::ONE, g, g_mat, src, src_mat.t(), T::ONE, gw, w_mat);
                }
                if let Some(gx) = gx.as_deref_mut() {
                    // dcols = W_g^T * dY_g
                    if geo.pointwise() {
                        let in_off = (ni * geo.c + gi * geo.cg) * ohw;
                        gemm(T::ONE, wd, w_mat.t(), g, g_mat, T::ONE, gx, MatRef::row_major(pl, ohw).at(in_off));
                    } else {
                        gemm(T::ONE, wd, w_mat.t(), g, g_mat, T::ZERO, &mut cols, MatRef::row_major(pl, ohw));
                        geo.col2im(&cols, ni, gi, gx);
                    }
                }
            }
        }
    }

    let mut out = Vec::new();
    if let Some(gx) = gx {
        out.push((x, gx));
    }
    if let Some(gw) = gw {
        out.push((w, gw));
    }
    if let Some(b) = b.filter(|&b| need(b)) {
        let mut gb = vec![T::ZERO; geo.k];
        for (i, plane) in g.chunks(ohw).enumerate() {
            gb[i % geo.k] += plane.iter().copied().sum::<T>();
        }
        out.push((b, gb));
    }
    out
}
