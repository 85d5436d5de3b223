//! Forward kernels and their backward rules.

use super::array::DenseArray;
use super::gemm::gemm;
use super::tape::{Kernel, Op, Tape, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[LOG_EPS, 1 - LOG_EPS]` inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Wavelength base of the sinusoidal embedding.
pub const EMBED_BASE: f64 = 1000.0;

fn shape_err<T>(kernel: Kernel, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Config(format!("{kernel}: {msg}")))
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Leading-dimension repeat count when `small` broadcasts over `big`.
fn suffix_repeats(big: &[usize], small: &[usize]) -> Option<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    Some(numel(&big[..big.len() - small.len()]))
}

/// Bilinear weights along one axis of extent `n`, clamping to the border.
/// Returns `(i0, i1, frac, inside)` where `inside` is false when the
/// coordinate was clamped (zero derivative).
fn axis_tap(c: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&c);
    let cc = c.clamp(0.0, hi);
    let i0 = (cc.floor() as usize).min(n - 2);
    (i0, i0 + 1, cc - i0 as f64, inside)
}

/// Sinusoidal embedding of one offset (already in map units) into `out`,
/// which must have length `dim` (a multiple of 4). The first half encodes
/// `dx`, the second `dy`; each half alternates sin/cos per frequency.
pub fn sinusoid_into(dx: f64, dy: f64, out: &mut [f64]) {
    let dim = out.len();
    let quarter = dim / 4;
    for (half, coord) in [dx, dy].into_iter().enumerate() {
        for i in 0..quarter {
            let denom = EMBED_BASE.powf(4.0 * i as f64 / dim as f64);
            let angle = coord / denom;
            out[half * dim / 2 + 2 * i] = angle.sin();
            out[half * dim / 2 + 2 * i + 1] = angle.cos();
        }
    }
}

impl Tape {
    /// `a·b` for rank-2 operands; with `trans_b`, `b` is stored `n×k`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let k = Kernel::MatMul;
        self.check_finite_inputs(k, &[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(k, format!("rank-2 operands required, got {sa:?} and {sb:?}"));
        }
        let (m, kk) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if kk != kb {
            return shape_err(k, format!("inner dims differ: {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, kk, n, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut c);
        let out = DenseArray::from_parts(vec![m, n], c);
        self.push(Op::MatMul { a, b, trans_b }, out, (m * n * kk) as u64, (m * n) as u64)
    }

    /// Batched `a·b` over a shared leading dimension of rank-3 operands.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let k = Kernel::BatchMatMul;
        self.check_finite_inputs(k, &[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(k, format!("rank-3 operands with equal batch required, got {sa:?} and {sb:?}"));
        }
        let (bs, m, kk) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kk != kb {
            return shape_err(k, format!("inner dims differ: {sa:?} x {sb:?}"));
        }
        let mut c = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                kk,
                n,
                &da[i * m * kk..(i + 1) * m * kk],
                false,
                &db[i * kk * n..(i + 1) * kk * n],
                trans_b,
                0.0,
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
        let out = DenseArray::from_parts(vec![bs, m, n], c);
        self.push(
            Op::BatchMatMul { a, b, trans_b },
            out,
            (bs * m * n * kk) as u64,
            (bs * m * n) as u64,
        )
    }

    /// `x·w + b`, optionally followed by ReLU. `x: P×in`, `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Result<Var> {
        let k = Kernel::Linear;
        self.check_finite_inputs(k, &[x, w, b])?;
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return shape_err(k, format!("x {sx:?}, w {sw:?}, b {sb:?} do not conform"));
        }
        let (p, i, o) = (sx[0], sx[1], sw[1]);
        let mut c = vec![0.0; p * o];
        let bias = self.value(b).data();
        for row in c.chunks_exact_mut(o) {
            row.copy_from_slice(bias);
        }
        gemm(p, i, o, self.value(x).data(), false, self.value(w).data(), false, 1.0, &mut c);
        if relu {
            c.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let out = DenseArray::from_parts(vec![p, o], c);
        self.push(Op::Linear { x, w, b, relu }, out, (p * i * o) as u64, (p * o) as u64)
    }

    /// Elementwise `a + b`; `b` may broadcast over leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = Kernel::Add;
        self.check_finite_inputs(k, &[a, b])?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if suffix_repeats(&sa, sb).is_none() {
            return shape_err(k, format!("{sb:?} does not broadcast onto {sa:?}"));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bd.len()) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        let n = out.len() as u64;
        self.push(Op::Add { a, b }, DenseArray::from_parts(sa, out), 0, n)
    }

    /// Elementwise `a ⊙ b`; `b` may broadcast over leading dims of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = Kernel::Mul;
        self.check_finite_inputs(k, &[a, b])?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if suffix_repeats(&sa, sb).is_none() {
            return shape_err(k, format!("{sb:?} does not broadcast onto {sa:?}"));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bd.len()) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o *= v;
            }
        }
        let n = out.len() as u64;
        self.push(Op::Mul { a, b }, DenseArray::from_parts(sa, out), n, n)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check_finite_inputs(Kernel::Scale, &[x])?;
        let mut out = self.value(x).clone();
        out.scale_in_place(factor);
        let n = out.len() as u64;
        self.push(Op::Scale { x, factor }, out, n, n)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_finite_inputs(Kernel::Relu, &[x])?;
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let n = out.len() as u64;
        self.push(Op::Relu { x }, out, 0, n)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check_finite_inputs(Kernel::Sigmoid, &[x])?;
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let n = out.len() as u64;
        self.push(Op::Sigmoid { x }, out, 0, n)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let k = Kernel::Softmax;
        self.check_finite_inputs(k, &[x])?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(k, format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let len = out.len() as u64;
        self.push(Op::Softmax { x, axis }, DenseArray::from_parts(shape, out), 0, len)
    }

    /// 3×3 convolution, stride 1, zero padding 1, on a channels-last map.
    /// `x: H×W×Cin`, `w: 3×3×Cin×Cout`, `b: Cout`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let k = Kernel::Conv3x3;
        self.check_finite_inputs(k, &[x, w, b])?;
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[2] || sb != [sw[3]] {
            return shape_err(k, format!("x {sx:?}, w {sw:?}, b {sb:?} do not conform"));
        }
        let (h, wd, cin, cout) = (sx[0], sx[1], sx[2], sw[3]);
        let cols = im2col(self.value(x).data(), h, wd, cin);
        let mut c = vec![0.0; h * wd * cout];
        let bias = self.value(b).data();
        for row in c.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm(h * wd, 9 * cin, cout, &cols, false, self.value(w).data(), false, 1.0, &mut c);
        let out = DenseArray::from_parts(vec![h, wd, cout], c);
        self.push(
            Op::Conv3x3 { x, w, b, cols },
            out,
            (9 * cin * cout * h * wd) as u64,
            (h * wd * cout) as u64,
        )
    }

    /// 3×3 max pool, stride 1, padding 1 filled with −∞. `x: H×W×C`.
    pub fn maxpool3x3(&mut self, x: Var) -> Result<Var> {
        let k = Kernel::MaxPool3x3;
        self.check_finite_inputs(k, &[x])?;
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return shape_err(k, format!("expected H×W×C, got {shape:?}"));
        }
        let (out, argmax) = maxpool3x3_values(self.value(x).data(), shape[0], shape[1], shape[2]);
        let n = out.len() as u64;
        self.push(Op::MaxPool3x3 { x, argmax }, DenseArray::from_parts(shape, out), 0, n)
    }

    /// 2×2 average pool with stride 2. `x: H×W×C` with even H, W.
    pub fn avgpool2x2(&mut self, x: Var) -> Result<Var> {
        let k = Kernel::AvgPool2x2;
        self.check_finite_inputs(k, &[x])?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[0].is_multiple_of(2) || !s[1].is_multiple_of(2) {
            return shape_err(k, format!("expected H×W×C with even H, W, got {s:?}"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..ho {
            for xx in 0..wo {
                let o = (y * wo + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[o + ch] += src[i + ch];
                    }
                }
                for ch in 0..c {
                    out[o + ch] *= 0.25;
                }
            }
        }
        let n = out.len() as u64;
        self.push(Op::AvgPool2x2 { x }, DenseArray::from_parts(vec![ho, wo, c], out), n, n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let k = Kernel::Concat;
        if parts.is_empty() {
            return shape_err(k, "no inputs");
        }
        self.check_finite_inputs(k, parts)?;
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return shape_err(k, format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same_rest {
                return shape_err(k, format!("{s:?} incompatible with {first:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let e = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let n = out.len() as u64;
        self.push(Op::Concat { parts: parts.to_vec(), axis }, DenseArray::from_parts(shape, out), 0, n)
    }

    /// Rows of `x` (along axis 0) at `indices`, in order.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let k = Kernel::Gather;
        self.check_finite_inputs(k, &[x])?;
        let s = self.shape(x).to_vec();
        if indices.is_empty() {
            return shape_err(k, "empty index list");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return shape_err(k, format!("index {bad} out of range for {s:?}"));
        }
        let row = numel(&s[1..]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let n = out.len() as u64;
        self.push(Op::Gather { x, indices: indices.to_vec() }, DenseArray::from_parts(shape, out), 0, n)
    }

    /// `x[..., start..start+len]` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let k = Kernel::SliceLast;
        self.check_finite_inputs(k, &[x])?;
        let s = self.shape(x).to_vec();
        let last = *s.last().unwrap();
        if len == 0 || start + len > last {
            return shape_err(k, format!("slice {start}..{} out of range for {s:?}", start + len));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(d.len() / last * len);
        for chunk in d.chunks_exact(last) {
            out.extend_from_slice(&chunk[start..start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let n = out.len() as u64;
        self.push(Op::SliceLast { x, start }, DenseArray::from_parts(shape, out), 0, n)
    }

    /// Samples `grid: H×W×C` at `coords: P×2` given as (column, row) pairs,
    /// clamping to the border. Output `P×C`.
    pub fn bilinear(&mut self, grid: Var, coords: Var) -> Result<Var> {
        let k = Kernel::Bilinear;
        self.check_finite_inputs(k, &[grid, coords])?;
        let (sg, sc) = (self.shape(grid).to_vec(), self.shape(coords).to_vec());
        if sg.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return shape_err(k, format!("grid {sg:?} / coords {sc:?} do not conform"));
        }
        let (h, w, c) = (sg[0], sg[1], sg[2]);
        let p = sc[0];
        let g = self.value(grid).data();
        let cd = self.value(coords).data();
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            sample_into(g, h, w, c, cd[2 * i], cd[2 * i + 1], &mut out[i * c..(i + 1) * c]);
        }
        self.push(
            Op::Bilinear { grid, coords },
            DenseArray::from_parts(vec![p, c], out),
            (4 * p * c) as u64,
            (p * c) as u64,
        )
    }

    /// Reinterprets the shape; a view, so it allocates nothing in the count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let k = Kernel::Reshape;
        self.check_finite_inputs(k, &[x])?;
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return shape_err(k, format!("cannot view {:?} as {shape:?}", self.shape(x)));
        }
        let out = DenseArray::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        self.push(Op::Reshape { x }, out, 0, 0)
    }

    /// Axis permutation of a rank-3 array: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let k = Kernel::Permute;
        self.check_finite_inputs(k, &[x])?;
        let s = self.shape(x).to_vec();
        let mut sorted = perm;
        sorted.sort_unstable();
        if s.len() != 3 || sorted != [0, 1, 2] {
            return shape_err(k, format!("bad permutation {perm:?} for {s:?}"));
        }
        let out = permute3(self.value(x).data(), [s[0], s[1], s[2]], perm);
        let shape = vec![s[perm[0]], s[perm[1]], s[perm[2]]];
        let n = out.len() as u64;
        self.push(Op::Permute { x, perm }, DenseArray::from_parts(shape, out), 0, n)
    }

    /// All key-minus-query offsets: `q: N×2`, `k: K×2` → `(N·K)×2`, row `i·K + j`.
    pub fn pairwise_offsets(&mut self, q: Var, k: Var) -> Result<Var> {
        let kern = Kernel::PairwiseOffsets;
        self.check_finite_inputs(kern, &[q, k])?;
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != 2 || sk[1] != 2 {
            return shape_err(kern, format!("points must be N×2, got {sq:?} and {sk:?}"));
        }
        let (n, m) = (sq[0], sk[0]);
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = Vec::with_capacity(n * m * 2);
        for i in 0..n {
            for j in 0..m {
                out.push(kd[2 * j] - qd[2 * i]);
                out.push(kd[2 * j + 1] - qd[2 * i + 1]);
            }
        }
        let len = out.len() as u64;
        self.push(Op::PairwiseOffsets { q, k }, DenseArray::from_parts(vec![n * m, 2], out), 0, len)
    }

    /// Sinusoidal embedding of `offsets: P×2` after multiplying by `scale`.
    pub fn sinusoidal_embed(&mut self, offsets: Var, dim: usize, scale: f64) -> Result<Var> {
        let k = Kernel::SinusoidalEmbed;
        self.check_finite_inputs(k, &[offsets])?;
        let s = self.shape(offsets).to_vec();
        if s.len() != 2 || s[1] != 2 {
            return shape_err(k, format!("offsets must be P×2, got {s:?}"));
        }
        if dim == 0 || !dim.is_multiple_of(4) {
            return shape_err(k, format!("embedding dim {dim} must be a positive multiple of 4"));
        }
        let p = s[0];
        let d = self.value(offsets).data();
        let mut out = vec![0.0; p * dim];
        for i in 0..p {
            sinusoid_into(d[2 * i] * scale, d[2 * i + 1] * scale, &mut out[i * dim..(i + 1) * dim]);
        }
        let n = out.len() as u64;
        self.push(
            Op::SinusoidalEmbed { offsets, dim, scale },
            DenseArray::from_parts(vec![p, dim], out),
            n,
            n,
        )
    }

    /// Samples `map: M×M×G` for every (query, key) pair at map coordinate
    /// `(key − query)·inv_unit + center`, clamped to the border.
    /// Output `N×K×G`.
    pub fn map_sample(&mut self, map: Var, q: Var, k: Var, inv_unit: f64, center: f64) -> Result<Var> {
        let kern = Kernel::MapSample;
        self.check_finite_inputs(kern, &[map, q, k])?;
        let (sm, sq, sk) = (self.shape(map).to_vec(), self.shape(q).to_vec(), self.shape(k).to_vec());
        if sm.len() != 3 || sq.len() != 2 || sk.len() != 2 || sq[1] != 2 || sk[1] != 2 {
            return shape_err(kern, format!("map {sm:?}, queries {sq:?}, keys {sk:?} do not conform"));
        }
        let (mh, mw, g) = (sm[0], sm[1], sm[2]);
        let (n, m) = (sq[0], sk[0]);
        let md = self.value(map).data();
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; n * m * g];
        for i in 0..n {
            for j in 0..m {
                let cx = (kd[2 * j] - qd[2 * i]) * inv_unit + center;
                let cy = (kd[2 * j + 1] - qd[2 * i + 1]) * inv_unit + center;
                let o = (i * m + j) * g;
                sample_into(md, mh, mw, g, cx, cy, &mut out[o..o + g]);
            }
        }
        self.push(
            Op::MapSample { map, q, k, inv_unit, center },
            DenseArray::from_parts(vec![n, m, g], out),
            (4 * n * m * g) as u64,
            (n * m * g) as u64,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_finite_inputs(Kernel::Sum, &[x])?;
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, DenseArray::scalar(total), 0, 1)
    }

    /// `Σ w·FL(p, t)` with binary targets, where
    /// `FL = −α(1−p)^γ ln p` for `t = 1` and `−(1−α)p^γ ln(1−p)` for `t = 0`.
    pub fn focal_loss(
        &mut self,
        p: Var,
        targets: &[f64],
        weights: &[f64],
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let k = Kernel::FocalLoss;
        self.check_finite_inputs(k, &[p])?;
        let pd = self.value(p).data();
        if targets.len() != pd.len() || weights.len() != pd.len() {
            return shape_err(k, format!("{} predictions vs {} targets / {} weights", pd.len(), targets.len(), weights.len()));
        }
        let mut total = 0.0;
        for ((&pv, &t), &w) in pd.iter().zip(targets).zip(weights) {
            if w != 0.0 {
                total += w * focal_value(pv, t, alpha, gamma);
            }
        }
        self.push(
            Op::FocalLoss { p, targets: targets.to_vec(), weights: weights.to_vec(), alpha, gamma },
            DenseArray::scalar(total),
            0,
            1,
        )
    }

    /// `Σ w·smoothL1(x − t)`, quadratic below `|x − t| = beta`.
    pub fn smooth_l1(&mut self, x: Var, targets: &[f64], weights: &[f64], beta: f64) -> Result<Var> {
        let k = Kernel::SmoothL1;
        self.check_finite_inputs(k, &[x])?;
        let xd = self.value(x).data();
        if targets.len() != xd.len() || weights.len() != xd.len() {
            return shape_err(k, format!("{} predictions vs {} targets / {} weights", xd.len(), targets.len(), weights.len()));
        }
        if beta <= 0.0 {
            return shape_err(k, "beta must be positive");
        }
        let total = xd
            .iter()
            .zip(targets)
            .zip(weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&x, &t), &w)| w * smooth_l1_value(x - t, beta))
            .sum();
        self.push(
            Op::SmoothL1 { x, targets: targets.to_vec(), weights: weights.to_vec(), beta },
            DenseArray::scalar(total),
            0,
            1,
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1_value(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn focal_value(p: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let pc = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
    if t >= 0.5 {
        -alpha * (1.0 - p).powf(gamma) * pc.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - pc).ln()
    }
}

fn focal_grad(p: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let pc = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
    if t >= 0.5 {
        let q = 1.0 - p;
        let dpow = if q > 0.0 { gamma * q.powf(gamma - 1.0) } else { 0.0 };
        let dlog = if p == pc { 1.0 / pc } else { 0.0 };
        alpha * (dpow * pc.ln() - q.powf(gamma) * dlog)
    } else {
        let dpow = if p > 0.0 { gamma * p.powf(gamma - 1.0) } else { 0.0 };
        let dlog = if p == pc { 1.0 / (1.0 - pc) } else { 0.0 };
        -(1.0 - alpha) * (dpow * (1.0 - pc).ln() - p.powf(gamma) * dlog)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn im2col(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let row = 9 * c;
    let mut cols = vec![0.0; h * w * row];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * row;
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = xx as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = base + (ky * 3 + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let row = 9 * c;
    let mut x = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * row;
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = xx as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = base + (ky * 3 + kx) * c;
                    for ch in 0..c {
                        x[dst + ch] += cols[src + ch];
                    }
                }
            }
        }
    }
    x
}

/// Max over each 3×3 window (−∞ padding) plus the flat index of the winner.
/// Ties keep the first winner in row-major window order.
pub(crate) fn maxpool3x3_values(x: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![f64::NEG_INFINITY; h * w * c];
    let mut arg = vec![0usize; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let o = (y * w + xx) * c + ch;
                for iy in y.saturating_sub(1)..(y + 2).min(h) {
                    for ix in xx.saturating_sub(1)..(xx + 2).min(w) {
                        let i = (iy * w + ix) * c + ch;
                        if x[i] > out[o] {
                            out[o] = x[i];
                            arg[o] = i;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

fn sample_into(g: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64, out: &mut [f64]) {
    let (x0, x1, fx, _) = axis_tap(x, w);
    let (y0, y1, fy, _) = axis_tap(y, h);
    let (w00, w01, w10, w11) = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx);
    let (i00, i01, i10, i11) = ((y0 * w + x0) * c, (y0 * w + x1) * c, (y1 * w + x0) * c, (y1 * w + x1) * c);
    for ch in 0..c {
        out[ch] = w00 * g[i00 + ch] + w01 * g[i01 + ch] + w10 * g[i10 + ch] + w11 * g[i11 + ch];
    }
}

/// Backward of one bilinear sample: scatters into `dgrid` and returns the
/// derivative with respect to the (x, y) coordinate.
#[allow(clippy::too_many_arguments)]
fn sample_backward(
    g: &[f64],
    h: usize,
    w: usize,
    c: usize,
    x: f64,
    y: f64,
    upstream: &[f64],
    dgrid: &mut [f64],
) -> (f64, f64) {
    let (x0, x1, fx, xin) = axis_tap(x, w);
    let (y0, y1, fy, yin) = axis_tap(y, h);
    let (w00, w01, w10, w11) = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx);
    let (i00, i01, i10, i11) = ((y0 * w + x0) * c, (y0 * w + x1) * c, (y1 * w + x0) * c, (y1 * w + x1) * c);
    let (mut gx, mut gy) = (0.0, 0.0);
    for ch in 0..c {
        let u = upstream[ch];
        dgrid[i00 + ch] += w00 * u;
        dgrid[i01 + ch] += w01 * u;
        dgrid[i10 + ch] += w10 * u;
        dgrid[i11 + ch] += w11 * u;
        let (v00, v01, v10, v11) = (g[i00 + ch], g[i01 + ch], g[i10 + ch], g[i11 + ch]);
        gx += u * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
        gy += u * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
    }
    (if xin { gx } else { 0.0 }, if yin { gy } else { 0.0 })
}

fn permute3(d: &[f64], s: [usize; 3], perm: [usize; 3]) -> Vec<f64> {
    let os = [s[perm[0]], s[perm[1]], s[perm[2]]];
    let strides = [s[1] * s[2], s[2], 1];
    let (st0, st1, st2) = (strides[perm[0]], strides[perm[1]], strides[perm[2]]);
    let mut out = Vec::with_capacity(d.len());
    for a in 0..os[0] {
        for b in 0..os[1] {
            for c in 0..os[2] {
                out.push(d[a * st0 + b * st1 + c * st2]);
            }
        }
    }
    out
}

fn sum_leading(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for chunk in g.chunks_exact(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// Input cotangents of one node given its output cotangent `g`.
pub(crate) fn backprop(tape: &Tape, op: &Op, idx: usize, g: &DenseArray) -> Vec<(Var, DenseArray)> {
    let val = |v: Var| tape.value(v);
    let like = |v: Var, data: Vec<f64>| DenseArray::from_parts(tape.shape(v).to_vec(), data);
    let gd = g.data();
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul { a, b, trans_b } => {
            let (sa, sb) = (tape.shape(*a), tape.shape(*b));
            let (m, k) = (sa[0], sa[1]);
            let n = if *trans_b { sb[0] } else { sb[1] };
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            if *trans_b {
                gemm(m, n, k, gd, false, val(*b).data(), false, 0.0, &mut da);
                gemm(n, m, k, gd, true, val(*a).data(), false, 0.0, &mut db);
            } else {
                gemm(m, n, k, gd, false, val(*b).data(), true, 0.0, &mut da);
                gemm(k, m, n, val(*a).data(), true, gd, false, 0.0, &mut db);
            }
            vec![(*a, like(*a, da)), (*b, like(*b, db))]
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (sa, sb) = (tape.shape(*a), tape.shape(*b));
            let (bs, m, k) = (sa[0], sa[1], sa[2]);
            let n = if *trans_b { sb[1] } else { sb[2] };
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let mut da = vec![0.0; bs * m * k];
            let mut db = vec![0.0; bs * k * n];
            for i in 0..bs {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                let dai = &mut da[i * m * k..(i + 1) * m * k];
                let dbi = &mut db[i * k * n..(i + 1) * k * n];
                if *trans_b {
                    gemm(m, n, k, gi, false, bi, false, 0.0, dai);
                    gemm(n, m, k, gi, true, ai, false, 0.0, dbi);
                } else {
                    gemm(m, n, k, gi, false, bi, true, 0.0, dai);
                    gemm(k, m, n, ai, true, gi, false, 0.0, dbi);
                }
            }
            vec![(*a, like(*a, da)), (*b, like(*b, db))]
        }
        Op::Linear { x, w, b, relu } => {
            let (sx, sw) = (tape.shape(*x), tape.shape(*w));
            let (p, i, o) = (sx[0], sx[1], sw[1]);
            let masked: Vec<f64>;
            let gm: &[f64] = if *relu {
                let out = tape.values[idx].data();
                masked = gd.iter().zip(out).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                &masked
            } else {
                gd
            };
            let mut dx = vec![0.0; p * i];
            let mut dw = vec![0.0; i * o];
            gemm(p, o, i, gm, false, val(*w).data(), true, 0.0, &mut dx);
            gemm(i, p, o, val(*x).data(), true, gm, false, 0.0, &mut dw);
            let db = sum_leading(gm, o);
            vec![(*x, like(*x, dx)), (*w, like(*w, dw)), (*b, like(*b, db))]
        }
        Op::Add { a, b } => {
            let inner = val(*b).len();
            vec![(*a, like(*a, gd.to_vec())), (*b, like(*b, sum_leading(gd, inner)))]
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let inner = bd.len();
            let mut da = gd.to_vec();
            let mut db = vec![0.0; inner];
            for (r, chunk) in da.chunks_exact_mut(inner).enumerate() {
                for j in 0..inner {
                    db[j] += chunk[j] * ad[r * inner + j];
                    chunk[j] *= bd[j];
                }
            }
            vec![(*a, like(*a, da)), (*b, like(*b, db))]
        }
        Op::Scale { x, factor } => vec![(*x, like(*x, gd.iter().map(|v| v * factor).collect()))],
        Op::Relu { x } => {
            let xd = val(*x).data();
            vec![(*x, like(*x, gd.iter().zip(xd).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect()))]
        }
        Op::Sigmoid { x } => {
            let y = tape.values[idx].data();
            vec![(*x, like(*x, gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()))]
        }
        Op::Softmax { x, axis } => {
            let shape = tape.shape(*x);
            let (outer, n, inner) = split_axis(shape, *axis);
            let y = tape.values[idx].data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                    for j in 0..n {
                        dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            vec![(*x, like(*x, dx))]
        }
        Op::Conv3x3 { x, w, b, cols } => {
            let sx = tape.shape(*x);
            let (h, wd, cin) = (sx[0], sx[1], sx[2]);
            let cout = tape.shape(*w)[3];
            let mut dw = vec![0.0; 9 * cin * cout];
            gemm(9 * cin, h * wd, cout, cols, true, gd, false, 0.0, &mut dw);
            let db = sum_leading(gd, cout);
            let mut dcols = vec![0.0; h * wd * 9 * cin];
            gemm(h * wd, cout, 9 * cin, gd, false, val(*w).data(), true, 0.0, &mut dcols);
            let dx = col2im(&dcols, h, wd, cin);
            vec![(*x, like(*x, dx)), (*w, like(*w, dw)), (*b, like(*b, db))]
        }
        Op::MaxPool3x3 { x, argmax } => {
            let mut dx = vec![0.0; val(*x).len()];
            for (g, &i) in gd.iter().zip(argmax) {
                dx[i] += g;
            }
            vec![(*x, like(*x, dx))]
        }
        Op::AvgPool2x2 { x } => {
            let s = tape.shape(*x);
            let (w, c) = (s[1], s[2]);
            let wo = w / 2;
            let mut dx = vec![0.0; val(*x).len()];
            for (o, gv) in gd.iter().enumerate() {
                let ch = o % c;
                let pix = o / c;
                let (y, xx) = (pix / wo, pix % wo);
                for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx[((2 * y + dy) * w + 2 * xx + dxo) * c + ch] += 0.25 * gv;
                }
            }
            vec![(*x, like(*x, dx))]
        }
        Op::Concat { parts, axis } => {
            let shape = tape.values[idx].shape();
            let (outer, _, inner) = split_axis(shape, *axis);
            let mut outs: Vec<Vec<f64>> = parts.iter().map(|p| Vec::with_capacity(val(*p).len())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (pi, p) in parts.iter().enumerate() {
                    let len = tape.shape(*p)[*axis] * inner;
                    outs[pi].extend_from_slice(&gd[pos..pos + len]);
                    pos += len;
                }
            }
            parts.iter().zip(outs).map(|(p, d)| (*p, like(*p, d))).collect()
        }
        Op::Gather { x, indices } => {
            let row = numel(&tape.shape(*x)[1..]);
            let mut dx = vec![0.0; val(*x).len()];
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..row {
                    dx[i * row + j] += gd[r * row + j];
                }
            }
            vec![(*x, like(*x, dx))]
        }
        Op::SliceLast { x, start } => {
            let last = *tape.shape(*x).last().unwrap();
            let len = *g.shape().last().unwrap();
            let mut dx = vec![0.0; val(*x).len()];
            for (r, chunk) in gd.chunks_exact(len).enumerate() {
                dx[r * last + start..r * last + start + len].copy_from_slice(chunk);
            }
            vec![(*x, like(*x, dx))]
        }
        Op::Bilinear { grid, coords } => {
            let s = tape.shape(*grid);
            let (h, w, c) = (s[0], s[1], s[2]);
            let gv = val(*grid).data();
            let cd = val(*coords).data();
            let mut dgrid = vec![0.0; gv.len()];
            let mut dc = vec![0.0; cd.len()];
            for i in 0..cd.len() / 2 {
                let (gx, gy) = sample_backward(gv, h, w, c, cd[2 * i], cd[2 * i + 1], &gd[i * c..(i + 1) * c], &mut dgrid);
                dc[2 * i] = gx;
                dc[2 * i + 1] = gy;
            }
            vec![(*grid, like(*grid, dgrid)), (*coords, like(*coords, dc))]
        }
        Op::Reshape { x } => vec![(*x, like(*x, gd.to_vec()))],
        Op::Permute { x, perm } => {
            let s = g.shape();
            let mut inv = [0usize; 3];
            for (d, &p) in perm.iter().enumerate() {
                inv[p] = d;
            }
            vec![(*x, like(*x, permute3(gd, [s[0], s[1], s[2]], inv)))]
        }
        Op::PairwiseOffsets { q, k } => {
            let (n, m) = (tape.shape(*q)[0], tape.shape(*k)[0]);
            let mut dq = vec![0.0; n * 2];
            let mut dk = vec![0.0; m * 2];
            for i in 0..n {
                for j in 0..m {
                    let r = (i * m + j) * 2;
                    for a in 0..2 {
                        dk[2 * j + a] += gd[r + a];
                        dq[2 * i + a] -= gd[r + a];
                    }
                }
            }
            vec![(*q, like(*q, dq)), (*k, like(*k, dk))]
        }
        Op::SinusoidalEmbed { offsets, dim, scale } => {
            let d = val(*offsets).data();
            let y = tape.values[idx].data();
            let quarter = dim / 4;
            let mut dd = vec![0.0; d.len()];
            for i in 0..d.len() / 2 {
                for half in 0..2 {
                    let mut acc = 0.0;
                    for f in 0..quarter {
                        let denom = EMBED_BASE.powf(4.0 * f as f64 / *dim as f64);
                        let base = i * dim + half * dim / 2 + 2 * f;
                        let (s, c) = (y[base], y[base + 1]);
                        acc += (gd[base] * c - gd[base + 1] * s) / denom;
                    }
                    dd[2 * i + half] = acc * scale;
                }
            }
            vec![(*offsets, like(*offsets, dd))]
        }
        Op::MapSample { map, q, k, inv_unit, center } => {
            let s = tape.shape(*map);
            let (mh, mw, gch) = (s[0], s[1], s[2]);
            let md = val(*map).data();
            let (qd, kd) = (val(*q).data(), val(*k).data());
            let (n, m) = (qd.len() / 2, kd.len() / 2);
            let mut dmap = vec![0.0; md.len()];
            let mut dq = vec![0.0; qd.len()];
            let mut dk = vec![0.0; kd.len()];
            for i in 0..n {
                for j in 0..m {
                    let cx = (kd[2 * j] - qd[2 * i]) * inv_unit + center;
                    let cy = (kd[2 * j + 1] - qd[2 * i + 1]) * inv_unit + center;
                    let o = (i * m + j) * gch;
                    let (gx, gy) = sample_backward(md, mh, mw, gch, cx, cy, &gd[o..o + gch], &mut dmap);
                    dk[2 * j] += gx * inv_unit;
                    dk[2 * j + 1] += gy * inv_unit;
                    dq[2 * i] -= gx * inv_unit;
                    dq[2 * i + 1] -= gy * inv_unit;
                }
            }
            vec![(*map, like(*map, dmap)), (*q, like(*q, dq)), (*k, like(*k, dk))]
        }
        Op::Sum { x } => vec![(*x, DenseArray::filled(tape.shape(*x), gd[0]))],
        Op::FocalLoss { p, targets, weights, alpha, gamma } => {
            let pd = val(*p).data();
            let dp = pd
                .iter()
                .zip(targets)
                .zip(weights)
                .map(|((&pv, &t), &w)| if w == 0.0 { 0.0 } else { gd[0] * w * focal_grad(pv, t, *alpha, *gamma) })
                .collect();
            vec![(*p, like(*p, dp))]
        }
        Op::SmoothL1 { x, targets, weights, beta } => {
            let xd = val(*x).data();
            let dx = xd
                .iter()
                .zip(targets)
                .zip(weights)
                .map(|((&xv, &t), &w)| {
                    let d = xv - t;
                    let s = if d.abs() < *beta { d / beta } else { d.signum() };
                    gd[0] * w * s
                })
                .collect();
            vec![(*x, like(*x, dx))]
        }
    }
}
