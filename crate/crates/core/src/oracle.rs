//! Slow reference implementations used to check the fast paths.
//!
//! Everything here is written directly from the definitions in 64-bit
//! arithmetic and shares no code with the tape kernels or sparse ops.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::{MaskGrid, MaskPyramid};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Six nested loops over output and kernel positions; no reordering.
pub fn brute_force_conv3d(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<f64>> {
    brute_force_conv3d_grouped(input, weight, bias, stride, padding, 1)
}

/// Grouped variant; `groups == Cin` is a depthwise convolution.
pub fn brute_force_conv3d_grouped(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<f64>> {
    let &[n, cin, d, h, w] = input.shape() else {
        return Err(Error::dim("brute_force_conv3d", "input rank", 5, input.rank()));
    };
    let &[cout, cpg, k, k1, k2] = weight.shape() else {
        return Err(Error::dim("brute_force_conv3d", "weight rank", 5, weight.rank()));
    };
    if k != k1 || k != k2 {
        return Err(Error::dim("brute_force_conv3d", "kernel", "cubic", format!("{:?}", weight.shape())));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cpg != cin / groups {
        return Err(Error::dim("brute_force_conv3d", "Cin", cin / groups.max(1), cpg));
    }
    if stride == 0 {
        return Err(Error::dim("brute_force_conv3d", "stride", ">= 1", 0));
    }
    let out_len = |e: usize| -> Result<usize> {
        (e + 2 * padding)
            .checked_sub(k)
            .map(|v| v / stride + 1)
            .ok_or_else(|| Error::dim("brute_force_conv3d", "spatial", format!(">= {k}"), e + 2 * padding))
    };
    let (od, oh, ow) = (out_len(d)?, out_len(h)?, out_len(w)?);
    let opg = cout / groups;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; n * cout * od * oh * ow];
    let mut o = 0;
    for b in 0..n {
        for co in 0..cout {
            let g = co / opg;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                        for j in 0..cpg {
                            let ci = g * cpg + j;
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * stride + kz) as isize - padding as isize;
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (((b * cin + ci) * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                        let wi = (((co * cpg + j) * k + kz) * k + ky) * k + kx;
                                        acc += x[xi] * wt[wi];
                                    }
                                }
                            }
                        }
                        out[o] = acc;
                        o += 1;
                    }
                }
            }
        }
    }
    Tensor::new([n, cout, od, oh, ow], out)
}

/// How the dense reference treats masked positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Remask {
    /// Zero inactive sites after every layer, take statistics and pooling
    /// maxima over active sites only.
    Masked,
    /// A plain dense network on the zero-filled input.
    Naive,
}

/// Intermediate results of the dense reference.
#[derive(Clone, Debug)]
pub struct OracleTrace {
    /// After the stem convolution, before pooling: `[C, D, H, W]`.
    pub stem: Tensor<f64>,
    /// Stage outputs `S_1..S_N`, each `[C, D, H, W]`.
    pub stages: Vec<Tensor<f64>>,
}

struct Field {
    c: usize,
    s: [usize; 3],
    v: Vec<f64>,
}

impl Field {
    fn plane(&self) -> usize {
        self.s.iter().product()
    }

    fn tensor5(&self) -> Tensor<f64> {
        Tensor::new([1, self.c, self.s[0], self.s[1], self.s[2]], self.v.clone()).expect("field shape")
    }

    fn from5(t: Tensor<f64>) -> Self {
        let s = t.shape();
        Field { c: s[1], s: [s[2], s[3], s[4]], v: t.into_data() }
    }

    fn remask(&mut self, mask: &MaskGrid, mode: Remask) {
        if mode == Remask::Naive {
            return;
        }
        let p = self.plane();
        for ch in 0..self.c {
            for (i, &on) in mask.bits().iter().enumerate() {
                if !on {
                    self.v[ch * p + i] = 0.0;
                }
            }
        }
    }
}

fn param<'a>(p: &'a ModelParams<f64>, name: &str) -> Result<&'a Tensor<f64>> {
    p.get(name).ok_or_else(|| Error::Oracle(format!("missing parameter {name}")))
}

fn conv_same(x: &Field, w: &Tensor<f64>, b: &Tensor<f64>, groups: usize) -> Result<Field> {
    let k = w.shape()[2];
    Ok(Field::from5(brute_force_conv3d_grouped(&x.tensor5(), w, Some(b), 1, k / 2, groups)?))
}

fn max_pool(x: &Field, f: usize, in_mask: &MaskGrid, mode: Remask) -> Field {
    let s = x.s.map(|e| e / f);
    let mut v = vec![0.0; x.c * s.iter().product::<usize>()];
    let [_, ih, iw] = x.s;
    let mut o = 0;
    for ch in 0..x.c {
        for z in 0..s[0] {
            for y in 0..s[1] {
                for xx in 0..s[2] {
                    let mut best: Option<f64> = None;
                    for dz in 0..f {
                        for dy in 0..f {
                            for dx in 0..f {
                                let (iz, iy, ix) = (z * f + dz, y * f + dy, xx * f + dx);
                                if mode == Remask::Masked && !in_mask.is_active([iz, iy, ix]) {
                                    continue;
                                }
                                let val = x.v[((ch * x.s[0] + iz) * ih + iy) * iw + ix];
                                best = Some(best.map_or(val, |b: f64| b.max(val)));
                            }
                        }
                    }
                    v[o] = best.unwrap_or(0.0);
                    o += 1;
                }
            }
        }
    }
    Field { c: x.c, s, v }
}

fn norm(x: &Field, gamma: &Tensor<f64>, beta: &Tensor<f64>, groups: usize, eps: f64, mask: &MaskGrid, mode: Remask) -> Field {
    let p = x.plane();
    let cpg = x.c / groups;
    let sites: Vec<usize> = (0..p).filter(|&i| mode == Remask::Naive || mask.bits()[i]).collect();
    let mut v = x.v.clone();
    for g in 0..groups {
        let chans = g * cpg..(g + 1) * cpg;
        let count = (sites.len() * cpg) as f64;
        let mut mean = 0.0;
        for ch in chans.clone() {
            for &i in &sites {
                mean += x.v[ch * p + i];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for ch in chans.clone() {
            for &i in &sites {
                var += (x.v[ch * p + i] - mean).powi(2);
            }
        }
        var /= count;
        for ch in chans {
            for i in 0..p {
                v[ch * p + i] = (x.v[ch * p + i] - mean) / (var + eps).sqrt() * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    Field { c: x.c, s: x.s, v }
}

fn pointwise(x: &Field, w: &Tensor<f64>, b: &Tensor<f64>) -> Field {
    let (fout, fin) = (w.shape()[0], w.shape()[1]);
    let p = x.plane();
    let mut v = vec![0.0; fout * p];
    for o in 0..fout {
        for i in 0..p {
            let mut acc = b.data()[o];
            for j in 0..fin {
                acc += w.data()[o * fin + j] * x.v[j * p + i];
            }
            v[o * p + i] = acc;
        }
    }
    Field { c: fout, s: x.s, v }
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// The CNN encoder as a dense network on the zero-filled masked input.
pub fn dense_masked_forward(
    cfg: &ModelConfig,
    params: &ModelParams<f64>,
    volume: &Tensor<f64>,
    pyramid: &MaskPyramid,
    mode: Remask,
) -> Result<OracleTrace> {
    let cnn = &cfg.cnn;
    let voxel = pyramid.voxel();
    if volume.numel() != voxel.cells() {
        return Err(Error::dim("dense_masked_forward", "volume", voxel.cells(), volume.numel()));
    }
    let mut x = Field { c: 1, s: voxel.shape(), v: volume.data().to_vec() };
    x.remask(voxel, Remask::Masked);
    let mut x = conv_same(&x, param(params, "cnn.stem.weight")?, param(params, "cnn.stem.bias")?, 1)?;
    x.remask(voxel, mode);
    let stem = Tensor::new([x.c, x.s[0], x.s[1], x.s[2]], x.v.clone())?;
    if cnn.stem_stride > 1 {
        x = max_pool(&x, cnn.stem_stride, voxel, mode);
        x.remask(pyramid.stage(1), mode);
    }
    let mut stages = Vec::new();
    for stage in 1..=cnn.num_stages {
        let mask = pyramid.stage(stage);
        for b in 0..cnn.blocks_per_stage {
            let p = |part: &str| param(params, &format!("cnn.stage{stage}.block{b}.{part}"));
            let mut h = conv_same(&x, p("dw.weight")?, p("dw.bias")?, x.c)?;
            h.remask(mask, mode);
            let groups = cnn.norm_groups.unwrap_or(x.c);
            let mut h = norm(&h, p("norm.gamma")?, p("norm.beta")?, groups, cfg.norm_eps, mask, mode);
            h.remask(mask, mode);
            let mut f = pointwise(&h, p("pw1.weight")?, p("pw1.bias")?);
            f.remask(mask, mode);
            for v in &mut f.v {
                *v = gelu_ref(*v);
            }
            let mut f = pointwise(&f, p("pw2.weight")?, p("pw2.bias")?);
            f.remask(mask, mode);
            for (a, b) in x.v.iter_mut().zip(&f.v) {
                *a += b;
            }
        }
        stages.push(Tensor::new([x.c, x.s[0], x.s[1], x.s[2]], x.v.clone())?);
        if stage < cnn.num_stages {
            let next = pyramid.stage(stage + 1);
            let mut pooled = max_pool(&x, 2, mask, mode);
            pooled.remask(next, mode);
            x = pointwise(
                &pooled,
                param(params, &format!("cnn.stage{stage}.down.weight"))?,
                param(params, &format!("cnn.stage{stage}.down.bias"))?,
            );
            x.remask(next, mode);
        }
    }
    Ok(OracleTrace { stem, stages })
}

/// Number of spatial sites of a `[C, D, H, W]` tensor with any nonzero channel.
pub fn nonzero_sites(t: &Tensor<f64>) -> usize {
    let c = t.shape()[0];
    let p = t.numel() / c.max(1);
    (0..p).filter(|&i| (0..c).any(|ch| t.data()[ch * p + i] != 0.0)).count()
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` at the listed coordinates.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe)?;
            probe[i] = orig - h;
            let down = f(&probe)?;
            probe[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Oracle(format!("non-finite function value at coordinate {i}")));
            }
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Finite differences over named parameter coordinates `(name, flat index)`.
pub fn finite_diff_params(
    mut f: impl FnMut(&ModelParams<f64>) -> Result<f64>,
    params: &ModelParams<f64>,
    coords: &[(String, usize)],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    coords
        .iter()
        .map(|(name, i)| {
            let mut eval = |delta: f64| -> Result<f64> {
                let t = probe.get_mut(name).ok_or_else(|| Error::Oracle(format!("missing parameter {name}")))?;
                let orig = t.data()[*i];
                t.data_mut()[*i] = orig + delta;
                let v = f(&probe);
                probe.get_mut(name).expect("checked above").data_mut()[*i] = orig;
                v
            };
            let up = eval(h)?;
            let down = eval(-h)?;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Oracle(format!("non-finite function value at {name}[{i}]")));
            }
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff_grad(|x| Ok(3.0 * x[0] * x[0] + x[1]), &[2.0, 5.0], &[0, 1], 1e-4).unwrap();
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_is_oracle_error() {
        let r = finite_diff_grad(|x| Ok(x[0].ln()), &[0.0], &[0], 1e-3);
        assert!(matches!(r, Err(Error::Oracle(_))));
    }

    #[test]
    fn ones_center_is_27() {
        let x = Tensor::full([1, 1, 3, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 3, 3, 3], 1.0);
        let y = brute_force_conv3d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.get(&[0, 0, 1, 1, 1]), 27.0);
        assert_eq!(y.get(&[0, 0, 0, 0, 0]), 8.0);
    }

    #[test]
    fn stride_two_shape() {
        let x = Tensor::zeros(vec![1, 2, 9, 8, 7]);
        let w = Tensor::zeros(vec![3, 2, 3, 3, 3]);
        let y = brute_force_conv3d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 5, 4, 4]);
    }
}
