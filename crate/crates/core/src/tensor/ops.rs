//! Differentiable dense operations recorded on a [`Tape`].

use super::kernels::{self, ConvGeom};
use super::{Backward, GradSink, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stride and zero padding of a cubic-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dSpec {
    /// Stride 1 with "same" padding for an odd kernel of width `k`.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
        }
    }
}

/// Shape summary of a multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub tokens: usize,
    pub embed: usize,
    pub heads: usize,
}

impl AttentionShape {
    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::dim(op, "rank", rank, format!("{} (shape {shape:?})", shape.len())));
    }
    Ok(())
}

const AXES5: [&str; 5] = ["N", "C", "D", "H", "W"];

struct Conv3dOp {
    geom: ConvGeom,
    x: Var,
    w: Var,
    b: Option<Var>,
}

impl<T: Scalar> Backward<T> for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }
    fn backward(&self, tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let x = tape.value(self.x).data();
        let w = tape.value(self.w).data();
        let mut dx = sink.wants(self.x).then(|| vec![T::ZERO; x.len()]);
        let mut dw = sink.wants(self.w).then(|| vec![T::ZERO; w.len()]);
        let mut db = self
            .b
            .filter(|&b| sink.wants(b))
            .map(|_| vec![T::ZERO; self.geom.cout]);
        kernels::conv3d_backward(
            &self.geom,
            x,
            w,
            dy,
            dx.as_deref_mut(),
            dw.as_deref_mut(),
            db.as_deref_mut(),
        );
        if let Some(dx) = dx {
            sink.add(self.x, &dx);
        }
        if let Some(dw) = dw {
            sink.add(self.w, &dw);
        }
        if let (Some(b), Some(db)) = (self.b, db) {
            sink.add(b, &db);
        }
    }
}

struct MaxPoolOp {
    x: Var,
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool3d"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        if let Some(dx) = sink.slot(self.x) {
            for (&src, &g) in self.argmax.iter().zip(dy) {
                dx[src] += g;
            }
        }
    }
}

struct LinearOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    fin: usize,
    fout: usize,
}

impl<T: Scalar> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let x = tape.value(self.x).data();
        let w = tape.value(self.w).data();
        let mut dx = sink.wants(self.x).then(|| vec![T::ZERO; x.len()]);
        let mut dw = sink.wants(self.w).then(|| vec![T::ZERO; w.len()]);
        let mut db = self
            .b
            .filter(|&b| sink.wants(b))
            .map(|_| vec![T::ZERO; self.fout]);
        kernels::linear_backward(
            x,
            w,
            dy,
            self.fin,
            self.fout,
            dx.as_deref_mut(),
            dw.as_deref_mut(),
            db.as_deref_mut(),
        );
        if let Some(dx) = dx {
            sink.add(self.x, &dx);
        }
        if let Some(dw) = dw {
            sink.add(self.w, &dw);
        }
        if let (Some(b), Some(db)) = (self.b, db) {
            sink.add(b, &db);
        }
    }
}

/// Shared backward for normalizations: groups of element indices, the saved
/// normalized values, per-group rstd, and a per-element affine channel index.
struct NormOp<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    /// (rstd, element indices) per group
    groups: Vec<(T, Vec<usize>)>,
    channel_of: Vec<usize>,
    channels: usize,
}

impl<T: Scalar> Backward<T> for NormOp<T> {
    fn name(&self) -> &'static str {
        "norm"
    }
    fn backward(&self, tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let gamma = tape.value(self.gamma).data();
        if sink.wants(self.gamma) || sink.wants(self.beta) {
            let mut dg = vec![T::ZERO; self.channels];
            let mut dbeta = vec![T::ZERO; self.channels];
            for (i, &d) in dy.iter().enumerate() {
                let c = self.channel_of[i];
                dg[c] += d * self.xhat[i];
                dbeta[c] += d;
            }
            sink.add(self.gamma, &dg);
            sink.add(self.beta, &dbeta);
        }
        if let Some(dx) = sink.slot(self.x) {
            for (rstd, idx) in &self.groups {
                let (m1, m2) = kernels::norm_backward_terms(
                    idx.iter()
                        .map(|&i| (dy[i] * gamma[self.channel_of[i]], self.xhat[i])),
                    idx.len(),
                );
                for &i in idx {
                    let dxh = dy[i] * gamma[self.channel_of[i]];
                    dx[i] += *rstd * (dxh - m1 - self.xhat[i] * m2);
                }
            }
        }
    }
}

/// Normalizes each index group of `x` and applies a per-channel affine map.
/// Used by the dense and sparse normalization layers alike.
pub(crate) fn normalize_groups<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    groups: Vec<Vec<usize>>,
    channel_of: Vec<usize>,
    eps: T,
) -> Var {
    let xs = tape.value(x).data();
    let g = tape.value(gamma).data();
    let b = tape.value(beta).data();
    let channels = g.len();
    let mut xhat = vec![T::ZERO; xs.len()];
    let mut out = vec![T::ZERO; xs.len()];
    let mut saved = Vec::with_capacity(groups.len());
    for idx in groups {
        let stats = kernels::group_stats(idx.iter().map(|&i| xs[i]), idx.len(), eps);
        for &i in &idx {
            let xh = (xs[i] - stats.mean) * stats.rstd;
            xhat[i] = xh;
            let c = channel_of[i];
            out[i] = xh * g[c] + b[c];
        }
        saved.push((stats.rstd, idx));
    }
    let shape = tape.shape(x).to_vec();
    let value = Tensor::new(shape, out).expect("norm output shape");
    tape.push(
        value,
        &[x, gamma, beta],
        NormOp {
            x,
            gamma,
            beta,
            xhat,
            groups: saved,
            channel_of,
            channels,
        },
    )
}

struct UnaryOp<T> {
    x: Var,
    /// d(out)/d(in) per element
    local: Vec<T>,
    name: &'static str,
}

impl<T: Scalar> Backward<T> for UnaryOp<T> {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        if let Some(dx) = sink.slot(self.x) {
            for ((g, &d), &l) in dx.iter_mut().zip(dy).zip(&self.local) {
                *g += d * l;
            }
        }
    }
}

struct SoftmaxOp {
    x: Var,
    width: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        // Probabilities are recomputed from the input row.
        let x = tape.value(self.x).data();
        if let Some(dx) = sink.slot(self.x) {
            for ((xr, dyr), dxr) in x
                .chunks_exact(self.width)
                .zip(dy.chunks_exact(self.width))
                .zip(dx.chunks_exact_mut(self.width))
            {
                let mut y = xr.to_vec();
                kernels::softmax_row(&mut y);
                let s: T = y.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                for ((g, &yi), &d) in dxr.iter_mut().zip(&y).zip(dyr) {
                    *g += yi * (d - s);
                }
            }
        }
    }
}

struct AttentionOp<T> {
    q: Var,
    k: Var,
    v: Var,
    shape: AttentionShape,
    /// softmax probabilities, [heads, T, T]
    probs: Vec<T>,
    scale: T,
}

impl<T: Scalar> Backward<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "multi_head_attention"
    }
    fn backward(&self, tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let AttentionShape { tokens: n, embed: e, heads } = self.shape;
        let dh = self.shape.head_dim();
        let q = tape.value(self.q).data();
        let k = tape.value(self.k).data();
        let v = tape.value(self.v).data();
        let mut dq = vec![T::ZERO; q.len()];
        let mut dk = vec![T::ZERO; k.len()];
        let mut dv = vec![T::ZERO; v.len()];
        let mut dp = vec![T::ZERO; n];
        for h in 0..heads {
            let p = &self.probs[h * n * n..][..n * n];
            let col = h * dh;
            for i in 0..n {
                let dyi = &dy[i * e + col..][..dh];
                let pi = &p[i * n..][..n];
                // dV_j += P_ij dY_i ; dP_ij = dY_i · V_j
                for j in 0..n {
                    kernels::axpy(pi[j], dyi, &mut dv[j * e + col..][..dh]);
                    dp[j] = kernels::dot(dyi, &v[j * e + col..][..dh]);
                }
                let s: T = pi.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    let ds = pi[j] * (dp[j] - s) * self.scale;
                    kernels::axpy(ds, &k[j * e + col..][..dh], &mut dq[i * e + col..][..dh]);
                    kernels::axpy(ds, &q[i * e + col..][..dh], &mut dk[j * e + col..][..dh]);
                }
            }
        }
        sink.add(self.q, &dq);
        sink.add(self.k, &dk);
        sink.add(self.v, &dv);
    }
}

struct AddOp {
    a: Var,
    b: Var,
}

impl<T: Scalar> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        sink.add(self.a, dy);
        sink.add(self.b, dy);
    }
}

struct MulOp {
    a: Var,
    b: Var,
}

impl<T: Scalar> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let a = tape.value(self.a).data();
        let b = tape.value(self.b).data();
        if let Some(da) = sink.slot(self.a) {
            for ((g, &d), &bv) in da.iter_mut().zip(dy).zip(b) {
                *g += d * bv;
            }
        }
        if let Some(db) = sink.slot(self.b) {
            for ((g, &d), &av) in db.iter_mut().zip(dy).zip(a) {
                *g += d * av;
            }
        }
    }
}

struct ScaleOp<T> {
    x: Var,
    c: T,
}

impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        if let Some(dx) = sink.slot(self.x) {
            for (g, &d) in dx.iter_mut().zip(dy) {
                *g += d * self.c;
            }
        }
    }
}

struct SumOp<T> {
    x: Var,
    scale: T,
}

impl<T: Scalar> Backward<T> for SumOp<T> {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let d = dy[0] * self.scale;
        if let Some(dx) = sink.slot(self.x) {
            for g in dx.iter_mut() {
                *g += d;
            }
        }
    }
}

struct PassThroughOp {
    x: Var,
}

impl<T: Scalar> Backward<T> for PassThroughOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        sink.add(self.x, dy);
    }
}

struct ConcatOp {
    a: Var,
    b: Var,
    /// contiguous run length of a / b within each outer slice
    run_a: usize,
    run_b: usize,
}

impl<T: Scalar> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let stride = self.run_a + self.run_b;
        if let Some(da) = sink.slot(self.a) {
            for (chunk, dst) in dy.chunks_exact(stride).zip(da.chunks_exact_mut(self.run_a)) {
                for (g, &d) in dst.iter_mut().zip(&chunk[..self.run_a]) {
                    *g += d;
                }
            }
        }
        if let Some(db) = sink.slot(self.b) {
            for (chunk, dst) in dy.chunks_exact(stride).zip(db.chunks_exact_mut(self.run_b)) {
                for (g, &d) in dst.iter_mut().zip(&chunk[self.run_a..]) {
                    *g += d;
                }
            }
        }
    }
}

struct UpsampleOp {
    x: Var,
    in_dims: [usize; 3],
    factor: usize,
    planes: usize,
}

impl<T: Scalar> Backward<T> for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let [d, h, w] = self.in_dims;
        let f = self.factor;
        let (oh, ow) = (h * f, w * f);
        let op = d * f * oh * ow;
        let ip = d * h * w;
        if let Some(dx) = sink.slot(self.x) {
            for p in 0..self.planes {
                let src = &dy[p * op..][..op];
                let dst = &mut dx[p * ip..][..ip];
                for z in 0..d * f {
                    for y in 0..oh {
                        let row = &src[(z * oh + y) * ow..][..ow];
                        let drow = &mut dst[((z / f) * h + y / f) * w..][..w];
                        for (x, &g) in row.iter().enumerate() {
                            drow[x / f] += g;
                        }
                    }
                }
            }
        }
    }
}

struct GatherRowsOp {
    table: Var,
    index: Vec<usize>,
    width: usize,
}

impl<T: Scalar> Backward<T> for GatherRowsOp {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let w = self.width;
        if let Some(dt) = sink.slot(self.table) {
            for (r, &src) in self.index.iter().enumerate() {
                for (g, &d) in dt[src * w..][..w].iter_mut().zip(&dy[r * w..][..w]) {
                    *g += d;
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x: [N, Cin, D, H, W]` with `w: [Cout, Cin, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        expect_rank("conv3d", &xs, 5)?;
        expect_rank("conv3d weight", &ws, 5)?;
        let k = ws[2];
        if ws[3] != k || ws[4] != k {
            return Err(Error::dim("conv3d", "kernel", format!("cubic {k}"), format!("{:?}", &ws[2..])));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv3d kernel must be odd, got {k}")));
        }
        if spec.stride == 0 {
            return Err(Error::Config("conv3d stride must be >= 1".into()));
        }
        if ws[1] != xs[1] {
            return Err(Error::dim("conv3d", "C (input channels)", ws[1], xs[1]));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [ws[0]] {
                return Err(Error::dim("conv3d bias", "Cout", ws[0], format!("{bs:?}")));
            }
        }
        let mut output = [0usize; 3];
        for a in 0..3 {
            let span = xs[2 + a] + 2 * spec.padding;
            if span < k || (span - k) % spec.stride != 0 {
                return Err(Error::dim(
                    "conv3d",
                    AXES5[2 + a],
                    format!("(extent + 2*padding - {k}) divisible by stride {}", spec.stride),
                    xs[2 + a],
                ));
            }
            output[a] = (span - k) / spec.stride + 1;
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            cout: ws[0],
            k,
            stride: spec.stride,
            pad: spec.padding,
            input: [xs[2], xs[3], xs[4]],
            output,
        };
        let mut out = vec![T::ZERO; geom.n * geom.cout * output.iter().product::<usize>()];
        kernels::conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::new([geom.n, geom.cout, output[0], output[1], output[2]], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, &inputs, Conv3dOp { geom, x, w, b }))
    }

    /// Non-overlapping max pooling over `[N, C, D, H, W]`; ties go to the first
    /// element in scan order.
    pub fn max_pool3d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        expect_rank("max_pool3d", &xs, 5)?;
        if window != stride || window == 0 {
            return Err(Error::Config(format!(
                "max_pool3d needs window == stride >= 1, got {window}/{stride}"
            )));
        }
        for a in 2..5 {
            if xs[a] % window != 0 {
                return Err(Error::dim(
                    "max_pool3d",
                    AXES5[a],
                    format!("multiple of {window}"),
                    xs[a],
                ));
            }
        }
        let f = window;
        let [d, h, w] = [xs[2], xs[3], xs[4]];
        let [od, oh, ow] = [d / f, h / f, w / f];
        let planes = xs[0] * xs[1];
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(planes * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for p in 0..planes {
            let base = p * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = base + ((z * f) * h + y * f) * w + xo * f;
                        for kz in 0..f {
                            for ky in 0..f {
                                for kx in 0..f {
                                    let i = base + ((z * f + kz) * h + y * f + ky) * w + xo * f + kx;
                                    if data[i] > data[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        out.push(data[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new([xs[0], xs[1], od, oh, ow], out)?;
        Ok(self.push(value, &[x], MaxPoolOp { x, argmax }))
    }

    /// Affine map over the last axis: `x[.., Fin] · wᵀ + b`, `w: [Fout, Fin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        expect_rank("linear weight", &ws, 2)?;
        let fin = *xs.last().ok_or_else(|| Error::dim("linear", "rank", ">= 1", 0))?;
        if fin != ws[1] {
            return Err(Error::dim("linear", "last axis (Fin)", ws[1], fin));
        }
        let fout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::dim("linear bias", "Fout", fout, format!("{:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / fin.max(1);
        let mut out = vec![T::ZERO; rows * fout];
        kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            fin,
            fout,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, &inputs, LinearOp { x, w, b, fin, fout }))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let f = *xs.last().ok_or_else(|| Error::dim("layer_norm", "rank", ">= 1", 0))?;
        if f == 0 {
            return Err(Error::dim("layer_norm", "last axis", ">= 1", 0));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [f] {
                return Err(Error::dim("layer_norm", name, f, format!("{:?}", self.shape(p))));
            }
        }
        let rows = self.value(x).numel() / f;
        let groups = (0..rows).map(|r| (r * f..(r + 1) * f).collect()).collect();
        let channel_of = (0..rows * f).map(|i| i % f).collect();
        Ok(normalize_groups(self, x, gamma, beta, groups, channel_of, eps))
    }

    /// Group normalization of `[N, C, spatial..]` with statistics per
    /// (sample, channel group).
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("group_norm", "rank", ">= 2", xs.len()));
        }
        let (n, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("group_norm: {groups} groups do not divide {c} channels")));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [c] {
                return Err(Error::dim("group_norm", name, c, format!("{:?}", self.shape(p))));
            }
        }
        let plane: usize = xs[2..].iter().product();
        let cpg = c / groups;
        let mut idx = Vec::with_capacity(n * groups);
        for s in 0..n {
            for g in 0..groups {
                let start = (s * c + g * cpg) * plane;
                idx.push((start..start + cpg * plane).collect());
            }
        }
        let channel_of = (0..n * c * plane).map(|i| (i / plane) % c).collect();
        Ok(normalize_groups(self, x, gamma, beta, idx, channel_of, eps))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.map(kernels::gelu);
        let local = v.data().iter().map(|&e| kernels::gelu_grad(e)).collect();
        self.push(out, &[x], UnaryOp { x, local, name: "gelu" })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::dim("softmax", "rank", ">= 1", 0))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(width) {
            kernels::softmax_row(row);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[x], SoftmaxOp { x, width }))
    }

    /// Scaled dot-product attention per head over `[tokens, embed]` inputs;
    /// heads are concatenated along the embedding axis (no output projection).
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        expect_rank("multi_head_attention", &qs, 2)?;
        for (name, other) in [("k", k), ("v", v)] {
            if self.shape(other) != qs.as_slice() {
                return Err(Error::dim("multi_head_attention", name, format!("{qs:?}"), format!("{:?}", self.shape(other))));
            }
        }
        let (n, e) = (qs[0], qs[1]);
        if heads == 0 || e % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide embed dim {e}")));
        }
        let shape = AttentionShape { tokens: n, embed: e, heads };
        let dh = shape.head_dim();
        let scale = T::ONE / T::from_f64(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::ZERO; heads * n * n];
        let mut out = vec![T::ZERO; n * e];
        for h in 0..heads {
            let col = h * dh;
            for i in 0..n {
                let row = &mut probs[(h * n + i) * n..][..n];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = kernels::dot(&qd[i * e + col..][..dh], &kd[j * e + col..][..dh]) * scale;
                }
                kernels::softmax_row(row);
                for (j, &p) in row.iter().enumerate() {
                    kernels::axpy(p, &vd[j * e + col..][..dh], &mut out[i * e + col..][..dh]);
                }
            }
        }
        let value = Tensor::new(qs, out)?;
        Ok(self.push(value, &[q, k, v], AttentionOp { q, k, v, shape, probs, scale }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", "shape", format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], AddOp { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", "shape", format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], MulOp { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, &[x], ScaleOp { x, c })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[x], SumOp { x, scale: T::ONE })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let scale = T::ONE / T::from_f64(v.numel() as f64);
        let s = v.data().iter().copied().sum::<T>() * scale;
        self.push(Tensor::scalar(s), &[x], SumOp { x, scale })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], PassThroughOp { x }))
    }

    /// Concatenates `[N, Ca, ..]` and `[N, Cb, ..]` along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::dim("concat_channels", "non-channel axes", format!("{sa:?}"), format!("{sb:?}")));
        }
        let plane: usize = sa[2..].iter().product();
        let (run_a, run_b) = (sa[1] * plane, sb[1] * plane);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for n in 0..sa[0] {
            out.extend_from_slice(&da[n * run_a..][..run_a]);
            out.extend_from_slice(&db[n * run_b..][..run_b]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[a, b], ConcatOp { a, b, run_a, run_b }))
    }

    /// Nearest-neighbour upsampling of `[N, C, D, H, W]` by `factor` per axis.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        expect_rank("upsample_nearest", &xs, 5)?;
        if factor == 0 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(x);
        }
        let [d, h, w] = [xs[2], xs[3], xs[4]];
        let f = factor;
        let planes = xs[0] * xs[1];
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(data.len() * f * f * f);
        for p in 0..planes {
            let src = &data[p * d * h * w..][..d * h * w];
            for z in 0..d * f {
                for y in 0..h * f {
                    let row = &src[((z / f) * h + y / f) * w..][..w];
                    for x in 0..w * f {
                        out.push(row[x / f]);
                    }
                }
            }
        }
        let value = Tensor::new([xs[0], xs[1], d * f, h * f, w * f], out)?;
        Ok(self.push(value, &[x], UpsampleOp { x, in_dims: [d, h, w], factor, planes }))
    }

    /// Selects rows of a `[R, F]` table.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        expect_rank("gather_rows", &ts, 2)?;
        let width = ts[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::dim("gather_rows", "row index", format!("< {}", ts[0]), bad));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&t[i * width..][..width]);
        }
        let value = Tensor::new([index.len(), width], out)?;
        Ok(self.push(value, &[table], GatherRowsOp { table, index: index.to_vec(), width }))
    }
}
