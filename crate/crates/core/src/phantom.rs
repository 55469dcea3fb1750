//! Procedural CT-like phantoms standing in for real scans.
//!
//! A phantom is a body ellipsoid with a smooth soft-tissue background, 2–5
//! brighter ellipsoidal "organs", 1–3 thin bright tubes ("vessels"), and low
//! amplitude noise. Values are in HU-like units within [-200, 300]; the label
//! marks organ occupancy only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// HU value outside the body.
pub const AIR_HU: f32 = -200.0;
/// Peak amplitude of the additive noise, in HU.
pub const NOISE_HU: f32 = 4.0;
pub const SPACING_MM: f64 = 1.5;

#[derive(Clone, Debug)]
pub(crate) struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

struct Tube {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
    hu: f32,
}

impl Tube {
    fn distance(&self, p: [f64; 3]) -> f64 {
        let ab: Vec<f64> = (0..3).map(|i| self.b[i] - self.a[i]).collect();
        let ap: Vec<f64> = (0..3).map(|i| p[i] - self.a[i]).collect();
        let len2: f64 = ab.iter().map(|v| v * v).sum();
        let t = (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0);
        (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Smooth soft-tissue intensity inside the body, roughly [-135, -65] HU.
fn tissue_hu(p: [f64; 3], shape: [usize; 3], phase: f64) -> f64 {
    let z = p[0] / shape[0] as f64;
    let y = p[1] / shape[1] as f64;
    let x = p[2] / shape[2] as f64;
    -100.0 + 20.0 * (z - 0.5) + 15.0 * (std::f64::consts::PI * (y + phase)).cos() * (1.0 - 0.5 * x)
}

/// Organ, body and tissue layout of one phantom, shared by the generator and
/// its tests.
pub(crate) struct Layout {
    body: Ellipsoid,
    phase: f64,
    organs: Vec<(Ellipsoid, f32)>,
    tubes: Vec<Tube>,
}

fn layout(seed: u64, shape: [usize; 3]) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = shape.map(|e| e as f64);
    let body = Ellipsoid {
        center: [0, 1, 2].map(|a| ext[a] * (0.5 + rng.random_range(-0.03..0.03))),
        radii: [0, 1, 2].map(|a| ext[a] * rng.random_range(0.42..0.5)),
    };
    let phase = rng.random_range(0.0..1.0);
    let n_organs = rng.random_range(2..=5);
    let organs = (0..n_organs)
        .map(|_| {
            let e = Ellipsoid {
                center: [0, 1, 2].map(|a| ext[a] * rng.random_range(0.28..0.72)),
                radii: [0, 1, 2].map(|a| ext[a] * rng.random_range(0.09..0.2)),
            };
            (e, rng.random_range(40.0..160.0) as f32)
        })
        .collect();
    let n_tubes = rng.random_range(1..=3);
    let tubes = (0..n_tubes)
        .map(|_| Tube {
            a: [0, 1, 2].map(|a| ext[a] * rng.random_range(0.15..0.85)),
            b: [0, 1, 2].map(|a| ext[a] * rng.random_range(0.15..0.85)),
            radius: rng.random_range(0.8..1.6),
            hu: rng.random_range(170.0..260.0) as f32,
        })
        .collect();
    Layout { body, phase, organs, tubes }
}

impl Layout {
    /// Noise-free background at voxel centre `p`: tissue inside the body, air outside.
    pub(crate) fn background(&self, p: [f64; 3], shape: [usize; 3]) -> f32 {
        if self.body.contains(p) {
            tissue_hu(p, shape, self.phase) as f32
        } else {
            AIR_HU
        }
    }

    #[cfg(test)]
    pub(crate) fn in_organ(&self, p: [f64; 3]) -> bool {
        self.organs.iter().any(|(e, _)| e.contains(p))
    }
}

#[cfg(test)]
pub(crate) fn phantom_layout(seed: u64, shape: [usize; 3]) -> Layout {
    layout(seed, shape)
}

fn centre(i: usize) -> f64 {
    i as f64 + 0.5
}

/// Deterministic phantom and its organ label, both of `shape`.
pub fn generate_phantom(seed: u64, shape: [usize; 3]) -> Result<(Volume3D, Volume3D)> {
    if shape.iter().any(|&e| e < 16) {
        return Err(Error::Config(format!("phantom shape {shape:?} must be at least 16 per axis")));
    }
    let lay = layout(seed, shape);
    // Noise uses its own stream so the layout does not depend on volume size.
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_401_5e);
    let n: usize = shape.iter().product();
    let mut values = Vec::with_capacity(n);
    let mut label = Vec::with_capacity(n);
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let p = [centre(z), centre(y), centre(x)];
                let mut v = lay.background(p, shape);
                for t in &lay.tubes {
                    if t.distance(p) <= t.radius {
                        v = t.hu;
                    }
                }
                let mut organ = false;
                for (e, hu) in &lay.organs {
                    if e.contains(p) {
                        v = *hu;
                        organ = true;
                    }
                }
                v += rng_noise(&mut noise);
                values.push(v.clamp(-200.0, 300.0));
                label.push(if organ { 1.0 } else { 0.0 });
            }
        }
    }
    let tag = format!("phantom:{seed}");
    Ok((
        Volume3D::new(shape, [SPACING_MM; 3], values, tag.clone())?,
        Volume3D::new(shape, [SPACING_MM; 3], label, format!("{tag}:label"))?,
    ))
}

fn rng_noise(rng: &mut ChaCha8Rng) -> f32 {
    rng.random_range(-NOISE_HU..NOISE_HU)
}
