//! Mask-preserving sparse feature maps.
//!
//! Features exist only on the active coordinates of one scale's mask and are
//! stored as a `[rows, C]` matrix, one row per active coordinate in scan
//! order. Every operation here keeps the active set fixed (submanifold
//! semantics) or maps it onto the next pyramid scale, so masked regions are
//! never eroded and never leak into statistics.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::mask::MaskGrid;
use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::{Backward, GradSink, Tape, Tensor, Var};

const INACTIVE: u32 = u32::MAX;

/// Per-kernel-tap list of `(input_row, output_row)` pairs.
#[derive(Debug)]
pub(crate) struct Rulebook {
    k: usize,
    taps: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    #[cfg(test)]
    pub(crate) fn pairs(&self) -> usize {
        self.taps.iter().map(Vec::len).sum()
    }
}

/// Ordered set of active coordinates at one scale, plus a dense lookup from
/// linear grid index to row.
#[derive(Debug)]
pub struct ActiveSet {
    shape: [usize; 3],
    index: Vec<usize>,
    lookup: Vec<u32>,
    rulebooks: Mutex<HashMap<usize, Arc<Rulebook>>>,
}

impl ActiveSet {
    pub fn from_mask(mask: &MaskGrid) -> Arc<Self> {
        let index = mask.active_indices();
        let mut lookup = vec![INACTIVE; mask.cells()];
        for (row, &i) in index.iter().enumerate() {
            lookup[i] = row as u32;
        }
        Arc::new(Self {
            shape: mask.shape(),
            index,
            lookup,
            rulebooks: Mutex::new(HashMap::new()),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Linear grid indices of the active coordinates, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.index
    }

    pub fn coord(&self, row: usize) -> [usize; 3] {
        let [_, h, w] = self.shape;
        let i = self.index[row];
        [i / (h * w), (i / w) % h, i % w]
    }

    pub fn row_of(&self, linear: usize) -> Option<usize> {
        match self.lookup[linear] {
            INACTIVE => None,
            r => Some(r as usize),
        }
    }

    /// True when the active coordinates are exactly the mask's active bits.
    pub fn matches(&self, mask: &MaskGrid) -> bool {
        mask.shape() == self.shape
            && mask
                .bits()
                .iter()
                .zip(&self.lookup)
                .all(|(&b, &r)| b == (r != INACTIVE))
    }

    /// Neighbour pairs for a same-padded `k³` kernel restricted to this set.
    pub(crate) fn rulebook(&self, k: usize) -> Arc<Rulebook> {
        let mut cache = self.rulebooks.lock().expect("rulebook cache poisoned");
        cache
            .entry(k)
            .or_insert_with(|| Arc::new(self.build_rulebook(k)))
            .clone()
    }

    fn build_rulebook(&self, k: usize) -> Rulebook {
        let [d, h, w] = self.shape.map(|e| e as isize);
        let r = (k / 2) as isize;
        let mut taps = vec![Vec::new(); k * k * k];
        for (out_row, &lin) in self.index.iter().enumerate() {
            let lin = lin as isize;
            let (z, y, x) = (lin / (h * w), (lin / w) % h, lin % w);
            let mut tap = 0;
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (zz, yy, xx) = (z + dz, y + dy, x + dx);
                        if (0..d).contains(&zz) && (0..h).contains(&yy) && (0..w).contains(&xx) {
                            let src = self.lookup[((zz * h + yy) * w + xx) as usize];
                            if src != INACTIVE {
                                taps[tap].push((src, out_row as u32));
                            }
                        }
                        tap += 1;
                    }
                }
            }
        }
        Rulebook { k, taps }
    }
}

/// Channels defined on the active coordinates of one scale.
#[derive(Clone, Debug)]
pub struct SparseFeatureMap {
    active: Arc<ActiveSet>,
    channels: usize,
    features: Var,
    scale_id: usize,
}

impl SparseFeatureMap {
    /// Wraps a `[rows, C]` feature variable; `rows` must equal the active count.
    pub fn new<T: Scalar>(tape: &Tape<T>, active: Arc<ActiveSet>, features: Var, scale_id: usize) -> Result<Self> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[0] != active.len() {
            return Err(Error::consistency(
                "SparseFeatureMap::new",
                format!("feature shape {shape:?} does not have {} rows", active.len()),
            ));
        }
        Ok(Self {
            channels: shape[1],
            active,
            features,
            scale_id,
        })
    }

    pub fn active(&self) -> &Arc<ActiveSet> {
        &self.active
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn features(&self) -> Var {
        self.features
    }

    pub fn scale_id(&self) -> usize {
        self.scale_id
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.active.shape
    }

    /// Same active set, new features (e.g. after a pointwise op).
    pub fn with_features<T: Scalar>(&self, tape: &Tape<T>, features: Var) -> Result<Self> {
        Self::new(tape, self.active.clone(), features, self.scale_id)
    }

    fn check_mask(&self, op: &'static str, mask: &MaskGrid) -> Result<()> {
        if !self.active.matches(mask) {
            return Err(Error::consistency(
                op,
                format!(
                    "active set ({} sites on {:?}) differs from mask bits ({} active on {:?})",
                    self.active.len(),
                    self.active.shape,
                    mask.active_count(),
                    mask.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Zero-filled dense copy `[C, D, H, W]` of the current feature values.
    pub fn to_dense<T: Scalar>(&self, tape: &Tape<T>) -> Tensor<T> {
        let [d, h, w] = self.active.shape;
        let plane = d * h * w;
        let c = self.channels;
        let rows = tape.value(self.features).data();
        let mut out = vec![T::ZERO; c * plane];
        for (r, &lin) in self.active.index.iter().enumerate() {
            for ch in 0..c {
                out[ch * plane + lin] = rows[r * c + ch];
            }
        }
        Tensor::new([c, d, h, w], out).expect("dense shape")
    }
}

struct GatherSitesOp {
    dense: Var,
    index: Vec<usize>,
    plane: usize,
    channels: usize,
}

impl<T: Scalar> Backward<T> for GatherSitesOp {
    fn name(&self) -> &'static str {
        "sparsify"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        if let Some(dx) = sink.slot(self.dense) {
            for (r, &lin) in self.index.iter().enumerate() {
                for c in 0..self.channels {
                    dx[c * self.plane + lin] += dy[r * self.channels + c];
                }
            }
        }
    }
}

/// Keeps the rows of a dense `[1, C, D, H, W]` (or `[C, D, H, W]`) tensor at
/// the mask's active coordinates.
pub fn sparsify<T: Scalar>(tape: &mut Tape<T>, dense: Var, mask: &MaskGrid) -> Result<SparseFeatureMap> {
    let shape = tape.shape(dense).to_vec();
    let (c, spatial) = match shape.as_slice() {
        [1, c, d, h, w] | [c, d, h, w] => (*c, [*d, *h, *w]),
        _ => return Err(Error::dim("sparsify", "rank", "[1, C, D, H, W] or [C, D, H, W]", format!("{shape:?}"))),
    };
    if spatial != mask.shape() {
        let a = (0..3).find(|&a| spatial[a] != mask.shape()[a]).unwrap();
        return Err(Error::dim("sparsify", ["D", "H", "W"][a], mask.shape()[a], spatial[a]));
    }
    let active = ActiveSet::from_mask(mask);
    let plane: usize = spatial.iter().product();
    let x = tape.value(dense).data();
    let mut rows = Vec::with_capacity(active.len() * c);
    for &lin in &active.index {
        rows.extend((0..c).map(|ch| x[ch * plane + lin]));
    }
    let value = Tensor::new([active.len(), c], rows)?;
    let index = active.index.clone();
    let features = tape.push(value, &[dense], GatherSitesOp { dense, index, plane, channels: c });
    SparseFeatureMap::new(tape, active, features, mask.scale_id())
}

struct SparseConvOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    rules: Arc<Rulebook>,
    groups: usize,
    cin: usize,
    cout: usize,
}

impl SparseConvOp {
    /// Weight layout is `[Cout, Cin/groups, k, k, k]`.
    #[inline]
    fn widx(&self, co: usize, ci_local: usize, tap: usize) -> usize {
        let k3 = self.rules.k.pow(3);
        (co * (self.cin / self.groups) + ci_local) * k3 + tap
    }
}

fn sparse_conv_forward<T: Scalar>(op: &SparseConvOp, x: &[T], w: &[T], b: Option<&[T]>, rows: usize) -> Vec<T> {
    let (cin, cout, g) = (op.cin, op.cout, op.groups);
    let (cig, cog) = (cin / g, cout / g);
    let mut out = vec![T::ZERO; rows * cout];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
    }
    // Per tap, transpose the weights to [Cin_g, Cout] per group so the inner
    // loop is an axpy over output channels.
    let mut wt = vec![T::ZERO; cig * cout];
    for (tap, pairs) in op.rules.taps.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        for co in 0..cout {
            for cl in 0..cig {
                wt[cl * cout + co] = w[op.widx(co, cl, tap)];
            }
        }
        for &(src, dst) in pairs {
            let xin = &x[src as usize * cin..][..cin];
            let o = &mut out[dst as usize * cout..][..cout];
            if g == 1 {
                for (cl, &a) in xin.iter().enumerate() {
                    kernels::axpy(a, &wt[cl * cout..][..cout], o);
                }
            } else {
                for grp in 0..g {
                    let og = &mut o[grp * cog..][..cog];
                    for cl in 0..cig {
                        let a = xin[grp * cig + cl];
                        kernels::axpy(a, &wt[cl * cout + grp * cog..][..cog], og);
                    }
                }
            }
        }
    }
    out
}

impl<T: Scalar> Backward<T> for SparseConvOp {
    fn name(&self) -> &'static str {
        "sparse_conv3d"
    }
    fn backward(&self, tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let x = tape.value(self.x).data();
        let w = tape.value(self.w).data();
        let (cin, cout, g) = (self.cin, self.cout, self.groups);
        let (cig, cog) = (cin / g, cout / g);
        if let Some(b) = self.b {
            if let Some(db) = sink.slot(b) {
                for row in dy.chunks_exact(cout) {
                    for (acc, &d) in db.iter_mut().zip(row) {
                        *acc += d;
                    }
                }
            }
        }
        let mut dx = sink.wants(self.x).then(|| vec![T::ZERO; x.len()]);
        let mut dw = sink.wants(self.w).then(|| vec![T::ZERO; w.len()]);
        for (tap, pairs) in self.rules.taps.iter().enumerate() {
            for &(src, dst) in pairs {
                let (src, dst) = (src as usize, dst as usize);
                let d = &dy[dst * cout..][..cout];
                for grp in 0..g {
                    let dg = &d[grp * cog..][..cog];
                    for cl in 0..cig {
                        let ci = grp * cig + cl;
                        if let Some(dx) = dx.as_deref_mut() {
                            let mut acc = T::ZERO;
                            for (j, &dv) in dg.iter().enumerate() {
                                acc += w[self.widx(grp * cog + j, cl, tap)] * dv;
                            }
                            dx[src * cin + ci] += acc;
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let a = x[src * cin + ci];
                            for (j, &dv) in dg.iter().enumerate() {
                                dw[self.widx(grp * cog + j, cl, tap)] += a * dv;
                            }
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx {
            sink.add(self.x, &dx);
        }
        if let Some(dw) = dw {
            sink.add(self.w, &dw);
        }
    }
}

/// Submanifold convolution: stride 1, same padding, and the output active set
/// equals the input active set. At each active site the value equals a dense
/// convolution of the zero-filled input.
///
/// `weight` is `[Cout, Cin/groups, k, k, k]`.
pub fn sparse_conv3d<T: Scalar>(
    tape: &mut Tape<T>,
    input: &SparseFeatureMap,
    mask: &MaskGrid,
    weight: Var,
    bias: Option<Var>,
    padding: usize,
    groups: usize,
) -> Result<SparseFeatureMap> {
    input.check_mask("sparse_conv3d", mask)?;
    let ws = tape.shape(weight).to_vec();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::dim("sparse_conv3d", "weight", "[Cout, Cin/groups, k, k, k]", format!("{ws:?}")));
    }
    let k = ws[2];
    if k % 2 == 0 {
        return Err(Error::Config(format!("sparse_conv3d kernel must be odd, got {k}")));
    }
    if padding != k / 2 {
        return Err(Error::Config(format!(
            "submanifold convolution needs same padding {} for k={k}, got {padding}",
            k / 2
        )));
    }
    let cin = input.channels;
    let cout = ws[0];
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::Config(format!("{groups} groups do not divide {cin} -> {cout} channels")));
    }
    if ws[1] != cin / groups {
        return Err(Error::dim("sparse_conv3d", "Cin/groups", cin / groups, ws[1]));
    }
    if let Some(b) = bias {
        if tape.shape(b) != [cout] {
            return Err(Error::dim("sparse_conv3d bias", "Cout", cout, format!("{:?}", tape.shape(b))));
        }
    }
    let op = SparseConvOp {
        x: input.features,
        w: weight,
        b: bias,
        rules: input.active.rulebook(k),
        groups,
        cin,
        cout,
    };
    let out = sparse_conv_forward(
        &op,
        tape.value(input.features).data(),
        tape.value(weight).data(),
        bias.map(|b| tape.value(b).data()),
        input.active.len(),
    );
    let value = Tensor::new([input.active.len(), cout], out)?;
    let mut inputs = vec![input.features, weight];
    inputs.extend(bias);
    let features = tape.push(value, &inputs, op);
    input.with_features(tape, features)
}

struct SparsePoolOp {
    x: Var,
    /// input row feeding each (output row, channel), or None for empty windows
    argmax: Vec<Option<u32>>,
    channels: usize,
}

impl<T: Scalar> Backward<T> for SparsePoolOp {
    fn name(&self) -> &'static str {
        "sparse_max_pool"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let c = self.channels;
        if let Some(dx) = sink.slot(self.x) {
            for (i, (&src, &g)) in self.argmax.iter().zip(dy).enumerate() {
                if let Some(src) = src {
                    dx[src as usize * c + i % c] += g;
                }
            }
        }
    }
}

/// Whether a pool must see windows that are entirely active or entirely masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolCheck {
    /// Reject any mixed window (bottom-up pyramids).
    Strict,
    /// Pool whatever active inputs exist; empty windows produce zeros.
    Lenient,
}

/// Max pooling with `window == stride` from `in_mask` onto `out_mask`.
/// Ties resolve to the first active input in window scan order.
pub fn sparse_max_pool<T: Scalar>(
    tape: &mut Tape<T>,
    input: &SparseFeatureMap,
    in_mask: &MaskGrid,
    out_mask: &MaskGrid,
    window: usize,
    check: PoolCheck,
) -> Result<SparseFeatureMap> {
    input.check_mask("sparse_max_pool", in_mask)?;
    let f = window;
    if f == 0 || in_mask.shape() != out_mask.shape().map(|e| e * f) {
        return Err(Error::consistency(
            "sparse_max_pool",
            format!("input grid {:?} is not output grid {:?} times {f}", in_mask.shape(), out_mask.shape()),
        ));
    }
    let out_active = ActiveSet::from_mask(out_mask);
    let [_, ih, iw] = in_mask.shape();
    let [od, oh, ow] = out_mask.shape();
    let c = input.channels;
    let x = tape.value(input.features).data();
    // Strict mode: every active window is full and every masked window empty.
    if check == PoolCheck::Strict {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let want = out_mask.is_active([z, y, xo]);
                    for kz in 0..f {
                        for ky in 0..f {
                            for kx in 0..f {
                                if in_mask.is_active([z * f + kz, y * f + ky, xo * f + kx]) != want {
                                    return Err(Error::consistency(
                                        "sparse_max_pool",
                                        format!(
                                            "window at output cell {:?} (scale {}) mixes active and masked inputs",
                                            [z, y, xo],
                                            out_mask.scale_id()
                                        ),
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![T::ZERO; out_active.len() * c];
    let mut argmax = vec![None; out_active.len() * c];
    let mut window_rows = Vec::with_capacity(f * f * f);
    for (orow, &lin) in out_active.index.iter().enumerate() {
        let (z, y, xo) = (lin / (oh * ow), (lin / ow) % oh, lin % ow);
        window_rows.clear();
        for kz in 0..f {
            for ky in 0..f {
                for kx in 0..f {
                    let il = ((z * f + kz) * ih + y * f + ky) * iw + xo * f + kx;
                    if let Some(r) = input.active.row_of(il) {
                        window_rows.push(r);
                    }
                }
            }
        }
        for ch in 0..c {
            let mut best: Option<usize> = None;
            for &r in &window_rows {
                if best.is_none_or(|b| x[r * c + ch] > x[b * c + ch]) {
                    best = Some(r);
                }
            }
            if let Some(b) = best {
                out[orow * c + ch] = x[b * c + ch];
                argmax[orow * c + ch] = Some(b as u32);
            }
        }
    }
    let value = Tensor::new([out_active.len(), c], out)?;
    let features = tape.push(value, &[input.features], SparsePoolOp { x: input.features, argmax, channels: c });
    SparseFeatureMap::new(tape, out_active, features, out_mask.scale_id())
}

/// Group normalization with statistics over active sites only; `groups`
/// must divide the channel count.
pub fn sparse_norm<T: Scalar>(
    tape: &mut Tape<T>,
    input: &SparseFeatureMap,
    gamma: Var,
    beta: Var,
    groups: usize,
    eps: T,
) -> Result<SparseFeatureMap> {
    let c = input.channels;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("sparse_norm: {groups} groups do not divide {c} channels")));
    }
    let rows = input.active.len();
    if rows == 0 {
        return Err(Error::consistency("sparse_norm", "no active coordinates to take statistics over"));
    }
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if tape.shape(p) != [c] {
            return Err(Error::dim("sparse_norm", name, c, format!("{:?}", tape.shape(p))));
        }
    }
    let cpg = c / groups;
    let idx = (0..groups)
        .map(|g| {
            (0..rows)
                .flat_map(|r| (0..cpg).map(move |j| r * c + g * cpg + j))
                .collect()
        })
        .collect();
    let channel_of = (0..rows * c).map(|i| i % c).collect();
    let features = crate::tensor::ops_normalize_groups(tape, input.features, gamma, beta, idx, channel_of, eps);
    input.with_features(tape, features)
}

/// Elementwise sum of two maps over the same active set.
pub fn sparse_add<T: Scalar>(tape: &mut Tape<T>, a: &SparseFeatureMap, b: &SparseFeatureMap) -> Result<SparseFeatureMap> {
    if !Arc::ptr_eq(&a.active, &b.active) && a.active.index != b.active.index {
        return Err(Error::consistency("sparse_add", "operands have different active sets"));
    }
    let features = tape.add(a.features, b.features)?;
    a.with_features(tape, features)
}

struct DensifyOp {
    rows: Var,
    embed: Option<Var>,
    index: Vec<usize>,
    plane: usize,
    channels: usize,
}

impl<T: Scalar> Backward<T> for DensifyOp {
    fn name(&self) -> &'static str {
        "densify"
    }
    fn backward(&self, _tape: &Tape<T>, dy: &[T], sink: &mut GradSink<T>) {
        let (c, plane) = (self.channels, self.plane);
        if let Some(dr) = sink.slot(self.rows) {
            for (r, &lin) in self.index.iter().enumerate() {
                for ch in 0..c {
                    dr[r * c + ch] += dy[ch * plane + lin];
                }
            }
        }
        if let Some(e) = self.embed {
            if let Some(de) = sink.slot(e) {
                let mut active = vec![false; plane];
                for &lin in &self.index {
                    active[lin] = true;
                }
                for ch in 0..c {
                    let mut acc = T::ZERO;
                    for (p, &on) in active.iter().enumerate() {
                        if !on {
                            acc += dy[ch * plane + p];
                        }
                    }
                    de[ch] += acc;
                }
            }
        }
    }
}

/// Dense `[1, C, D, H, W]` map: active sites carry their rows, every inactive
/// site carries `mask_embed` (or zero when `None`).
pub fn densify_with_mask_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    input: &SparseFeatureMap,
    mask_embed: Option<Var>,
) -> Result<Var> {
    let c = input.channels;
    if let Some(e) = mask_embed {
        if tape.shape(e) != [c] {
            return Err(Error::dim("densify_with_mask_embedding", "mask_embed", c, format!("{:?}", tape.shape(e))));
        }
    }
    let [d, h, w] = input.active.shape;
    let plane = d * h * w;
    let rows = tape.value(input.features).data();
    let mut out = vec![T::ZERO; c * plane];
    if let Some(e) = mask_embed {
        let ev = tape.value(e).data();
        for ch in 0..c {
            out[ch * plane..][..plane].fill(ev[ch]);
        }
    }
    for (r, &lin) in input.active.index.iter().enumerate() {
        for ch in 0..c {
            out[ch * plane + lin] = rows[r * c + ch];
        }
    }
    let value = Tensor::new([1, c, d, h, w], out)?;
    let mut inputs = vec![input.features];
    inputs.extend(mask_embed);
    Ok(tape.push(
        value,
        &inputs,
        DensifyOp {
            rows: input.features,
            embed: mask_embed,
            index: input.active.index.clone(),
            plane,
            channels: c,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{init_junction_mask, upsample_mask};

    #[test]
    fn rulebook_pairs_on_full_grid() {
        let set = ActiveSet::from_mask(&MaskGrid::full([3, 3, 3], true, 0));
        // 2 + 3 + 2 in-bounds neighbours per axis.
        assert_eq!(set.rulebook(3).pairs(), 7 * 7 * 7);
        assert!(Arc::ptr_eq(&set.rulebook(3), &set.rulebook(3)));
    }

    fn rows_leaf(tape: &mut Tape<f64>, n: usize, c: usize, seed: u64) -> Var {
        let mut s = seed;
        let t = Tensor::from_fn([n, c], |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        });
        tape.leaf(t, true)
    }

    #[test]
    fn conv_rejects_mismatched_mask() {
        let m = init_junction_mask([4, 4, 4], 0.5, 1).unwrap();
        let other = init_junction_mask([4, 4, 4], 0.5, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let active = ActiveSet::from_mask(&m);
        let x = rows_leaf(&mut tape, active.len(), 1, 0);
        let s = SparseFeatureMap::new(&tape, active, x, 1).unwrap();
        let w = tape.leaf(Tensor::full([1, 1, 3, 3, 3], 1.0), true);
        let err = sparse_conv3d(&mut tape, &s, &other, w, None, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Consistency { .. }));
    }

    #[test]
    fn pool_of_constant_full_map() {
        let m = MaskGrid::full([4, 4, 4], true, 1);
        let out_m = MaskGrid::full([2, 2, 2], true, 2);
        let mut tape = Tape::<f64>::new();
        let active = ActiveSet::from_mask(&m);
        let x = tape.leaf(Tensor::full([64, 2], 3.5), false);
        let s = SparseFeatureMap::new(&tape, active, x, 1).unwrap();
        let p = sparse_max_pool(&mut tape, &s, &m, &out_m, 2, PoolCheck::Strict).unwrap();
        assert_eq!(p.active().len(), 8);
        assert!(tape.value(p.features()).data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn pool_skips_masked_output_cells() {
        let j = init_junction_mask([2, 2, 2], 0.5, 4).unwrap();
        let fine = upsample_mask(&j, 2);
        let mut tape = Tape::<f64>::new();
        let active = ActiveSet::from_mask(&fine);
        let x = rows_leaf(&mut tape, active.len(), 3, 9);
        let s = SparseFeatureMap::new(&tape, active, x, 1).unwrap();
        let p = sparse_max_pool(&mut tape, &s, &fine, &j, 2, PoolCheck::Strict).unwrap();
        assert_eq!(p.active().len(), j.active_count());
        assert!(p.active().matches(&j));
    }

    #[test]
    fn strict_pool_rejects_mixed_windows() {
        let fine = init_junction_mask([4, 4, 4], 0.5, 4).unwrap();
        let coarse = downsample_any(&fine);
        let mut tape = Tape::<f64>::new();
        let active = ActiveSet::from_mask(&fine);
        let x = rows_leaf(&mut tape, active.len(), 1, 9);
        let s = SparseFeatureMap::new(&tape, active, x, 1).unwrap();
        let err = sparse_max_pool(&mut tape, &s, &fine, &coarse, 2, PoolCheck::Strict).unwrap_err();
        assert!(matches!(err, Error::Consistency { .. }));
        assert!(sparse_max_pool(&mut tape, &s, &fine, &coarse, 2, PoolCheck::Lenient).is_ok());
    }

    fn downsample_any(m: &MaskGrid) -> MaskGrid {
        crate::mask::downsample_mask(m, 2).unwrap()
    }

    #[test]
    fn norm_needs_active_sites() {
        let m = MaskGrid::full([2, 2, 2], false, 1);
        let mut tape = Tape::<f64>::new();
        let active = ActiveSet::from_mask(&m);
        let x = tape.leaf(Tensor::zeros([0, 2]), true);
        let s = SparseFeatureMap::new(&tape, active, x, 1).unwrap();
        let g = tape.leaf(Tensor::full([2], 1.0), true);
        let b = tape.leaf(Tensor::zeros([2]), true);
        let err = sparse_norm(&mut tape, &s, g, b, 2, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Consistency { .. }));
    }

    #[test]
    fn densify_zero_embedding_equals_zero_fill() {
        let m = init_junction_mask([3, 4, 2], 0.5, 5).unwrap();
        let mut tape = Tape::<f64>::new();
        let active = ActiveSet::from_mask(&m);
        let x = rows_leaf(&mut tape, active.len(), 2, 1);
        let s = SparseFeatureMap::new(&tape, active, x, 1).unwrap();
        let zero = tape.leaf(Tensor::zeros([2]), true);
        let a = densify_with_mask_embedding(&mut tape, &s, Some(zero)).unwrap();
        let b = densify_with_mask_embedding(&mut tape, &s, None).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert_eq!(tape.value(b).data(), s.to_dense(&tape).data());
    }
}
