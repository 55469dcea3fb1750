//! Scalar volumes, the raw + JSON sidecar file format, and preprocessing.
//!
//! A volume file is raw little-endian `f32`, row-major over `[D, H, W]` (W
//! fastest), next to a sidecar with the same stem and a `.json` extension:
//! `{"shape":[D,H,W],"spacing_mm":[a,b,c],"dtype":"f32le"}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower edge of the intensity window, in HU.
pub const HU_MIN: f64 = -175.0;
/// Upper edge of the intensity window, in HU.
pub const HU_MAX: f64 = 250.0;

/// Dense 3D scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    values: Vec<f32>,
    provenance: String,
}

impl Volume3D {
    pub fn new(shape: [usize; 3], spacing_mm: [f64; 3], values: Vec<f32>, provenance: impl Into<String>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::dim("Volume3D::new", "values", n, values.len()));
        }
        Ok(Self { shape, spacing_mm, values, provenance: provenance.into() })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, [z, y, x]: [usize; 3]) -> f32 {
        self.values[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    /// `[1, 1, D, H, W]` tensor of the values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [d, h, w] = self.shape;
        Tensor::new([1, 1, d, h, w], self.values.iter().map(|&v| T::from_f64(v as f64)).collect())
            .expect("volume tensor shape")
    }

    /// Copies values of a `[.., D, H, W]` tensor with this volume's metadata.
    pub fn with_values_from<T: Scalar>(&self, t: &Tensor<T>, provenance: impl Into<String>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 3 || s[s.len() - 3..] != self.shape || t.numel() != self.len() {
            return Err(Error::dim("Volume3D::with_values_from", "shape", format!("{:?}", self.shape), format!("{s:?}")));
        }
        Self::new(
            self.shape,
            self.spacing_mm,
            t.data().iter().map(|v| v.to_f64() as f32).collect(),
            provenance,
        )
    }

    /// Sub-volume of `size` starting at `offset`.
    pub fn crop(&self, offset: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if offset[a] + size[a] > self.shape[a] {
                return Err(Error::Data(format!(
                    "crop {size:?} at {offset:?} exceeds volume {:?} ({})",
                    self.shape, self.provenance
                )));
            }
        }
        let mut values = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = ((offset[0] + z) * self.shape[1] + offset[1] + y) * self.shape[2] + offset[2];
                values.extend_from_slice(&self.values[start..start + size[2]]);
            }
        }
        Self::new(size, self.spacing_mm, values, self.provenance.clone())
    }
}

/// The sidecar's field order is part of the format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn save_volume(volume: &Volume3D, raw: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(volume.len() * 4);
    for v in &volume.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(raw, &bytes).map_err(|e| Error::io(raw, e))?;
    let sidecar = Sidecar {
        shape: volume.shape,
        spacing_mm: volume.spacing_mm,
        dtype: "f32le".into(),
    };
    let side = sidecar_path(raw);
    std::fs::write(&side, serde_json::to_string(&sidecar).expect("sidecar serializes")).map_err(|e| Error::io(&side, e))
}

pub fn load_volume(raw: &Path) -> Result<Volume3D> {
    let side = sidecar_path(raw);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::format(side.display().to_string(), e.to_string()))?;
    if sidecar.dtype != "f32le" {
        return Err(Error::format(side.display().to_string(), format!("unsupported dtype {:?}", sidecar.dtype)));
    }
    let bytes = std::fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let expected = sidecar.shape.iter().try_fold(4usize, |n, &d| n.checked_mul(d));
    if expected != Some(bytes.len()) {
        return Err(Error::format(
            raw.display().to_string(),
            format!("shape {:?} does not describe {} bytes of f32le", sidecar.shape, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(sidecar.shape, sidecar.spacing_mm, values, raw.display().to_string())
}

/// Clips to the HU window and maps it affinely onto `[0, 1]`.
pub fn hu_to_unit(hu: f64) -> f64 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

/// Where a training/eval crop is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Center,
    /// Explicit corner offset (drawn by the caller's seeded generator).
    At([usize; 3]),
}

/// Windowed, normalized, cropped copy of a raw HU volume.
pub fn preprocess(raw: &Volume3D, crop: [usize; 3], mode: CropMode) -> Result<Volume3D> {
    if let Some(bad) = raw.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value {bad} in {}", raw.provenance)));
    }
    for a in 0..3 {
        if crop[a] > raw.shape[a] {
            return Err(Error::Data(format!(
                "crop {crop:?} is larger than volume {:?} ({})",
                raw.shape, raw.provenance
            )));
        }
    }
    let offset = match mode {
        CropMode::Center => [0, 1, 2].map(|a| (raw.shape[a] - crop[a]) / 2),
        CropMode::At(o) => o,
    };
    let mut out = raw.crop(offset, crop)?;
    for v in &mut out.values {
        *v = hu_to_unit(*v as f64) as f32;
    }
    Ok(out)
}

/// Largest valid crop corner along each axis (inclusive).
pub fn max_crop_offset(shape: [usize; 3], crop: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = shape[a]
            .checked_sub(crop[a])
            .ok_or_else(|| Error::Data(format!("crop {crop:?} is larger than volume {shape:?}")))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_values() {
        assert_eq!(hu_to_unit(300.0), 1.0);
        assert_eq!(hu_to_unit(250.0), 1.0);
        assert_eq!(hu_to_unit(-175.0), 0.0);
        assert_eq!(hu_to_unit(-1000.0), 0.0);
        assert_eq!(hu_to_unit(37.5), 0.5);
    }

    #[test]
    fn center_crop_and_errors() {
        let v = Volume3D::new([4, 4, 4], [1.0; 3], (0..64).map(|i| i as f32).collect(), "t").unwrap();
        let c = preprocess(&v, [2, 2, 2], CropMode::Center).unwrap();
        assert_eq!(c.shape(), [2, 2, 2]);
        assert_eq!(c.values()[0], hu_to_unit(21.0) as f32);
        assert!(matches!(preprocess(&v, [5, 4, 4], CropMode::Center), Err(Error::Data(_))));
        let mut bad = v.clone();
        bad.values_mut()[3] = f32::NAN;
        assert!(matches!(preprocess(&bad, [2, 2, 2], CropMode::Center), Err(Error::Data(_))));
    }

    #[test]
    fn sidecar_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3D::new([2, 3, 4], [1.5, 1.5, 2.0], (0..24).map(|i| i as f32 * 0.25).collect(), "t").unwrap();
        let raw = dir.path().join("v.raw");
        save_volume(&v, &raw).unwrap();
        let side = std::fs::read_to_string(sidecar_path(&raw)).unwrap();
        assert_eq!(side, r#"{"shape":[2,3,4],"spacing_mm":[1.5,1.5,2.0],"dtype":"f32le"}"#);
        let bytes = std::fs::read(&raw).unwrap();
        assert_eq!(&bytes[4..8], &0.25f32.to_le_bytes());
    }
}
