use super::{isotropic, voxel_point, PhantomSpec, Shape, Tensor};
use crate::error::{Error, Result};
use crate::kv::{join, KvFile, KvReader};
use crate::volume::{Dims, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LesionEffect {
    /// Overwrites a six-channel tensor field inside the lesion.
    ReplaceTensor(Tensor),
    /// Multiplies every channel inside the lesion.
    ScaleSignal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionSpec {
    pub shape: Shape,
    pub effect: LesionEffect,
}

impl LesionSpec {
    /// Isotropic 2.0e-3 mm²/s sphere of radius 4 at the centre of the
    /// spec's `white_a` region (or its last region).
    pub fn toy(spec: &PhantomSpec) -> Self {
        let target = spec
            .region_index("white_a")
            .unwrap_or(spec.regions.len() - 1);
        let center = spec.regions[target]
            .shape
            .map(|s| s.center())
            .unwrap_or_else(|| {
                let d = spec.dims;
                [
                    (d.nx as f64 - 1.0) / 2.0,
                    (d.ny as f64 - 1.0) / 2.0,
                    (d.nz as f64 - 1.0) / 2.0,
                ]
            });
        LesionSpec {
            shape: Shape::sphere(center, 4.0),
            effect: LesionEffect::ReplaceTensor(isotropic(2.0e-3)),
        }
    }

    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new();
        f.set("shape", self.shape.to_kv());
        match self.effect {
            LesionEffect::ReplaceTensor(t) => f.set("tensor", join(&t)),
            LesionEffect::ScaleSignal(s) => f.set("scale", s),
        }
        f
    }

    /// Exactly one of `tensor` and `scale` must be given.
    pub fn from_kv(r: &KvReader<'_>) -> Result<Self> {
        let shape = Shape::parse(&r.require::<String>("shape")?)?;
        let effect = match (r.array::<f64, 6>("tensor")?, r.get::<f64>("scale")?) {
            (Some(t), None) => LesionEffect::ReplaceTensor(t),
            (None, Some(s)) => LesionEffect::ScaleSignal(s),
            _ => {
                return Err(Error::config(
                    "lesion needs exactly one of `tensor` or `scale`",
                ))
            }
        };
        Ok(LesionSpec { shape, effect })
    }
}

/// Voxels inside `shape`; fails if the shape's extent leaves the volume.
pub fn lesion_mask(dims: Dims, shape: &Shape) -> Result<Mask> {
    dims.validate()?;
    let (lo, hi) = shape.bounds();
    let n = [dims.nx, dims.ny, dims.nz];
    if (0..3).any(|i| lo[i] < 0.0 || hi[i] > (n[i] - 1) as f64) {
        return Err(Error::OutOfBounds(format!(
            "lesion extent {lo:?}..{hi:?} leaves volume {dims}"
        )));
    }
    Mask::new(
        dims,
        (0..dims.voxels())
            .map(|m| shape.contains(voxel_point(dims, m)))
            .collect(),
    )
}

/// Applies the lesion inside its mask; voxels outside are copied untouched.
pub fn inject_lesion(volume: &Volume<f64>, lesion: &LesionSpec) -> Result<(Volume<f64>, Mask)> {
    let dims = volume.dims();
    let mask = lesion_mask(dims, &lesion.shape)?;
    let n = dims.voxels();
    let mut data = volume.data().to_vec();
    match lesion.effect {
        LesionEffect::ReplaceTensor(t) => {
            if volume.channels() != 6 {
                return Err(Error::shape(format!(
                    "tensor replacement needs a 6-channel field, got {} channels",
                    volume.channels()
                )));
            }
            for m in (0..n).filter(|&m| mask.contains(m)) {
                for (c, &v) in t.iter().enumerate() {
                    data[c * n + m] = v;
                }
            }
        }
        LesionEffect::ScaleSignal(s) => {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Domain(format!(
                    "signal scale must be finite and >= 0, got {s}"
                )));
            }
            for c in 0..volume.channels() {
                for m in (0..n).filter(|&m| mask.contains(m)) {
                    data[c * n + m] *= s;
                }
            }
        }
    }
    Ok((
        Volume::new(dims, volume.channels(), volume.voxel_size(), data)?,
        mask,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{derive_params, generate_phantom};
    use crate::volume::DEFAULT_VOXEL_SIZE;

    #[test]
    fn sphere_count_matches_volume() {
        let dims = Dims::new(20, 20, 20);
        for r in [3.0, 4.0, 6.0] {
            let m = lesion_mask(dims, &Shape::sphere([9.0, 9.5, 10.0], r)).unwrap();
            let count = m.count() as f64;
            let vol = |r: f64| 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
            assert!(
                count >= vol(r - 0.5) && count <= vol(r + 0.5),
                "r={r}: {count}"
            );
        }
    }

    #[test]
    fn empty_mask_leaves_volume_unchanged() {
        let dims = Dims::new(4, 4, 4);
        let v = Volume::from_fn(dims, 2, DEFAULT_VOXEL_SIZE, |c, m| (c * 100 + m) as f64).unwrap();
        let lesion = LesionSpec {
            shape: Shape::sphere([1.5, 1.5, 1.5], 0.3),
            effect: LesionEffect::ScaleSignal(3.0),
        };
        let (out, mask) = inject_lesion(&v, &lesion).unwrap();
        assert_eq!(mask.count(), 0);
        assert_eq!(out, v);
    }

    #[test]
    fn outside_mask_is_bit_identical() {
        let dims = Dims::new(8, 8, 8);
        let v = Volume::from_fn(dims, 3, DEFAULT_VOXEL_SIZE, |c, m| {
            (c as f64 + 1.0) / (m as f64 + 0.3)
        })
        .unwrap();
        let lesion = LesionSpec {
            shape: Shape::Box {
                min: [2.0, 2.0, 2.0],
                max: [4.0, 5.0, 3.0],
            },
            effect: LesionEffect::ScaleSignal(0.5),
        };
        let (out, mask) = inject_lesion(&v, &lesion).unwrap();
        assert_eq!(mask.count(), 3 * 4 * 2);
        let n = dims.voxels();
        for c in 0..3 {
            for m in 0..n {
                let (a, b) = (v.data()[c * n + m], out.data()[c * n + m]);
                if mask.contains(m) {
                    assert_eq!(b, a * 0.5);
                } else {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_rejected() {
        let dims = Dims::new(8, 8, 8);
        let v = Volume::from_fn(dims, 6, DEFAULT_VOXEL_SIZE, |_, _| 1e-3).unwrap();
        for shape in [
            Shape::sphere([1.0, 4.0, 4.0], 2.0),
            Shape::Box {
                min: [0.0; 3],
                max: [8.0, 1.0, 1.0],
            },
        ] {
            let lesion = LesionSpec {
                shape,
                effect: LesionEffect::ScaleSignal(2.0),
            };
            assert!(matches!(
                inject_lesion(&v, &lesion),
                Err(Error::OutOfBounds(_))
            ));
        }
        let bad = LesionSpec {
            shape: Shape::sphere([4.0; 3], 2.0),
            effect: LesionEffect::ReplaceTensor(isotropic(1e-3)),
        };
        let three = Volume::from_fn(dims, 3, DEFAULT_VOXEL_SIZE, |_, _| 1.0).unwrap();
        assert!(inject_lesion(&three, &bad).is_err());
    }

    #[test]
    fn isotropic_lesion_lowers_white_matter_fa() {
        let spec = PhantomSpec::toy_brain(0);
        let p = generate_phantom(&spec).unwrap();
        let lesion = LesionSpec::toy(&spec);
        let (tensors, mask) = inject_lesion(&p.tensors, &lesion).unwrap();
        let before = derive_params(&p.tensors).unwrap();
        let after = derive_params(&tensors).unwrap();
        let white = spec.region_index("white_a").unwrap() as u16;
        let wm_fa: Vec<f64> = (0..mask.dims().voxels())
            .filter(|&m| !mask.contains(m) && p.labels.labels()[m] == white)
            .map(|m| before.channel(0)[m])
            .collect();
        assert!(!wm_fa.is_empty() && mask.count() > 100);
        let min_wm = wm_fa.iter().cloned().fold(f64::INFINITY, f64::min);
        for m in (0..mask.dims().voxels()).filter(|&m| mask.contains(m)) {
            assert!(after.channel(0)[m] < min_wm);
        }
    }

    #[test]
    fn kv_round_trip() {
        let spec = PhantomSpec::toy_brain(0);
        for l in [
            LesionSpec::toy(&spec),
            LesionSpec {
                shape: Shape::sphere([5.0; 3], 2.0),
                effect: LesionEffect::ScaleSignal(1.5),
            },
        ] {
            let f = KvFile::parse(&l.to_kv().to_text()).unwrap();
            let r = f.reader();
            assert_eq!(LesionSpec::from_kv(&r).unwrap(), l);
            r.finish().unwrap();
        }
    }
}
