//! Synthetic diffusion phantoms.
//!
//! A phantom is a stack of geometric regions, each carrying one diffusion
//! tensor and a baseline signal. From it we simulate diffusion-weighted
//! images, fit tensors back, and derive the five scalar maps the
//! subnetworks consume.

mod dataset;
mod dti;
mod lesion;
mod protocol;

pub use dataset::{
    jitter_spec, make_dataset, simulate_case, Case, Dataset, JitterConfig, SplitFractions,
};
pub use dti::{derive_params, eigenvalues, fit_dti, simulate_dwi, tensor_params};
pub use lesion::{inject_lesion, lesion_mask, LesionEffect, LesionSpec};
pub use protocol::{fibonacci_hemisphere, DWIProtocol};

use crate::error::{Error, Result};
use crate::kv::{join, KvFile, KvReader};
use crate::volume::{Dims, LabelMap, Volume, DEFAULT_VOXEL_SIZE};

/// Symmetric tensor as `(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)` in mm²/s.
pub type Tensor = [f64; 6];

pub fn diagonal(l1: f64, l2: f64, l3: f64) -> Tensor {
    [l1, l2, l3, 0.0, 0.0, 0.0]
}

pub fn isotropic(d: f64) -> Tensor {
    diagonal(d, d, d)
}

/// Region geometry in voxel-index coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Points inside `outer` but not strictly inside `inner`.
    Shell {
        center: [f64; 3],
        outer: [f64; 3],
        inner: [f64; 3],
    },
}

fn ellipsoid_level(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum()
}

impl Shape {
    pub fn sphere(center: [f64; 3], radius: f64) -> Self {
        Shape::Ellipsoid {
            center,
            radii: [radius; 3],
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Ellipsoid { center, radii } => ellipsoid_level(p, center, radii) <= 1.0,
            Shape::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
            Shape::Shell {
                center,
                outer,
                inner,
            } => {
                ellipsoid_level(p, center, outer) <= 1.0 && ellipsoid_level(p, center, inner) >= 1.0
            }
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Shape::Ellipsoid { center, radii }
            | Shape::Shell {
                center,
                outer: radii,
                ..
            } => (
                std::array::from_fn(|i| center[i] - radii[i]),
                std::array::from_fn(|i| center[i] + radii[i]),
            ),
            Shape::Box { min, max } => (min, max),
        }
    }

    pub fn center(&self) -> [f64; 3] {
        match *self {
            Shape::Ellipsoid { center, .. } | Shape::Shell { center, .. } => center,
            Shape::Box { min, max } => std::array::from_fn(|i| 0.5 * (min[i] + max[i])),
        }
    }

    /// Scales about `origin` per axis, then translates.
    pub fn transformed(&self, origin: [f64; 3], scale: [f64; 3], shift: [f64; 3]) -> Shape {
        let point = |p: [f64; 3]| -> [f64; 3] {
            std::array::from_fn(|i| origin[i] + (p[i] - origin[i]) * scale[i] + shift[i])
        };
        let size = |r: [f64; 3]| -> [f64; 3] { std::array::from_fn(|i| r[i] * scale[i]) };
        match *self {
            Shape::Ellipsoid { center, radii } => Shape::Ellipsoid {
                center: point(center),
                radii: size(radii),
            },
            Shape::Box { min, max } => Shape::Box {
                min: point(min),
                max: point(max),
            },
            Shape::Shell {
                center,
                outer,
                inner,
            } => Shape::Shell {
                center: point(center),
                outer: size(outer),
                inner: size(inner),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |r: &[f64; 3]| r.iter().all(|&v| v > 0.0 && v.is_finite());
        let ok = match self {
            Shape::Ellipsoid { center, radii } => {
                positive(radii) && center.iter().all(|v| v.is_finite())
            }
            Shape::Box { min, max } => {
                (0..3).all(|i| min[i].is_finite() && max[i].is_finite() && min[i] <= max[i])
            }
            Shape::Shell {
                center,
                outer,
                inner,
            } => positive(outer) && positive(inner) && center.iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid shape {self:?}")))
        }
    }

    /// `kind v1 v2 ...` as used in spec files.
    pub fn to_kv(&self) -> String {
        match self {
            Shape::Ellipsoid { center, radii } => {
                format!("ellipsoid {} {}", join(center), join(radii))
            }
            Shape::Box { min, max } => format!("box {} {}", join(min), join(max)),
            Shape::Shell {
                center,
                outer,
                inner,
            } => {
                format!("shell {} {} {}", join(center), join(outer), join(inner))
            }
        }
    }

    pub fn parse(s: &str) -> Result<Shape> {
        let mut it = s.split_whitespace();
        let kind = it.next().unwrap_or("");
        let vals = it
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::config(format!("shape value {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let v3 = |i: usize| -> [f64; 3] { [vals[i], vals[i + 1], vals[i + 2]] };
        let need = |n: usize| -> Result<()> {
            if vals.len() == n {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "shape {kind:?} takes {n} numbers, got {}",
                    vals.len()
                )))
            }
        };
        let shape = match kind {
            "ellipsoid" => {
                need(6)?;
                Shape::Ellipsoid {
                    center: v3(0),
                    radii: v3(3),
                }
            }
            "sphere" => {
                need(4)?;
                Shape::sphere(v3(0), vals[3])
            }
            "box" => {
                need(6)?;
                Shape::Box {
                    min: v3(0),
                    max: v3(3),
                }
            }
            "shell" => {
                need(9)?;
                Shape::Shell {
                    center: v3(0),
                    outer: v3(3),
                    inner: v3(6),
                }
            }
            _ => return Err(Error::config(format!("unknown shape kind {kind:?}"))),
        };
        shape.validate()?;
        Ok(shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    /// `None` only for the background region, which fills the volume.
    pub shape: Option<Shape>,
    pub tensor: Tensor,
    pub s0: f64,
}

/// Regions in precedence order: later regions overwrite earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub voxel_size: [f32; 3],
    pub regions: Vec<Region>,
    /// Noise seed for signal simulation.
    pub seed: u64,
}

impl PhantomSpec {
    /// 48x48x32 toy brain: background, a CSF rim, two gray shells and two
    /// white-matter cores side by side.
    pub fn toy_brain(seed: u64) -> Self {
        let c = [23.5, 23.5, 15.5];
        let ell = |center: [f64; 3], radii: [f64; 3]| Some(Shape::Ellipsoid { center, radii });
        let region = |name: &str, shape, tensor| Region {
            name: name.to_string(),
            shape,
            tensor,
            s0: 1.0,
        };
        PhantomSpec {
            dims: Dims::new(48, 48, 32),
            voxel_size: DEFAULT_VOXEL_SIZE,
            regions: vec![
                region("background", None, isotropic(0.1e-3)),
                region("csf", ell(c, [21.5, 21.5, 14.5]), isotropic(3.0e-3)),
                region(
                    "gray_a",
                    ell(c, [18.5, 18.5, 12.0]),
                    diagonal(0.8e-3, 0.7e-3, 0.6e-3),
                ),
                region(
                    "gray_b",
                    ell(c, [15.5, 15.5, 10.0]),
                    diagonal(1.6e-3, 1.4e-3, 1.3e-3),
                ),
                region(
                    "white_a",
                    ell([c[0] - 7.5, c[1], c[2]], [7.0, 10.0, 7.5]),
                    diagonal(1.9e-3, 0.35e-3, 0.35e-3),
                ),
                region(
                    "white_b",
                    ell([c[0] + 7.5, c[1], c[2]], [7.0, 10.0, 7.5]),
                    diagonal(2.0e-3, 1.0e-3, 0.8e-3),
                ),
            ],
            seed,
        }
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn region_names(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.name.clone()).collect()
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.regions.is_empty() {
            return Err(Error::config("phantom needs at least one region"));
        }
        if self.regions.len() > u16::MAX as usize {
            return Err(Error::config("too many regions"));
        }
        for (i, r) in self.regions.iter().enumerate() {
            match (&r.shape, i) {
                (None, 0) => {}
                (Some(_), 0) => {
                    return Err(Error::config(
                        "region 0 is the background and takes no shape",
                    ))
                }
                (None, _) => {
                    return Err(Error::config(format!(
                        "region {i} ({}) has no shape",
                        r.name
                    )))
                }
                (Some(s), _) => s.validate()?,
            }
            if !(r.s0 > 0.0 && r.s0.is_finite()) {
                return Err(Error::config(format!(
                    "region {} has non-positive S0",
                    r.name
                )));
            }
            let ev = eigenvalues(&r.tensor);
            if !(ev[2] > 0.0) || r.tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!(
                    "region {} tensor is not positive definite (eigenvalues {ev:?})",
                    r.name
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new();
        f.set(
            "dims",
            format!("{} {} {}", self.dims.nx, self.dims.ny, self.dims.nz),
        );
        f.set("voxel_size", join(&self.voxel_size));
        f.set("seed", self.seed);
        f.set("regions", self.regions.len());
        for (i, r) in self.regions.iter().enumerate() {
            f.set(format!("region.{i}.name"), &r.name);
            if let Some(s) = &r.shape {
                f.set(format!("region.{i}.shape"), s.to_kv());
            }
            f.set(format!("region.{i}.tensor"), join(&r.tensor));
            f.set(format!("region.{i}.s0"), r.s0);
        }
        f
    }

    /// Reads a spec, starting from the toy brain for absent keys. Giving
    /// `regions` replaces the whole region list.
    pub fn from_kv(r: &KvReader<'_>) -> Result<Self> {
        let mut spec = PhantomSpec::toy_brain(0);
        if let Some([nx, ny, nz]) = r.array::<usize, 3>("dims")? {
            spec.dims = Dims::new(nx, ny, nz);
        }
        if let Some(vs) = r.array::<f32, 3>("voxel_size")? {
            spec.voxel_size = vs;
        }
        spec.seed = r.get_or("seed", spec.seed)?;
        if let Some(n) = r.get::<usize>("regions")? {
            spec.regions = (0..n)
                .map(|i| {
                    let shape = match r.get::<String>(&format!("region.{i}.shape"))? {
                        Some(s) => Some(Shape::parse(&s)?),
                        None => None,
                    };
                    Ok(Region {
                        name: r.require(&format!("region.{i}.name"))?,
                        shape,
                        tensor: r
                            .array::<f64, 6>(&format!("region.{i}.tensor"))?
                            .ok_or_else(|| {
                                Error::config(format!("missing key \"region.{i}.tensor\""))
                            })?,
                        s0: r.get_or(&format!("region.{i}.s0"), 1.0)?,
                    })
                })
                .collect::<Result<_>>()?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Ground-truth labels with the tensor and baseline-signal fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub labels: LabelMap,
    /// Six tensor components per voxel.
    pub tensors: Volume<f64>,
    pub s0: Volume<f64>,
}

#[inline]
pub(crate) fn voxel_point(dims: Dims, m: usize) -> [f64; 3] {
    let (x, y, z) = dims.coords(m);
    [x as f64, y as f64, z as f64]
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let n = dims.voxels();
    let labels: Vec<u16> = (0..n)
        .map(|m| {
            let p = voxel_point(dims, m);
            spec.regions
                .iter()
                .rposition(|r| r.shape.is_none_or(|s| s.contains(p)))
                .unwrap_or(0) as u16
        })
        .collect();
    let mut tensors = vec![0.0; 6 * n];
    let mut s0 = vec![0.0; n];
    for (m, &l) in labels.iter().enumerate() {
        let r = &spec.regions[l as usize];
        for c in 0..6 {
            tensors[c * n + m] = r.tensor[c];
        }
        s0[m] = r.s0;
    }
    Ok(Phantom {
        labels: LabelMap::with_voxel_size(dims, spec.voxel_size, labels, spec.region_names())?,
        tensors: Volume::new(dims, 6, spec.voxel_size, tensors)?,
        s0: Volume::new(dims, 1, spec.voxel_size, s0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_region_is_constant() {
        let spec = PhantomSpec {
            dims: Dims::new(5, 4, 3),
            voxel_size: DEFAULT_VOXEL_SIZE,
            regions: vec![Region {
                name: "only".into(),
                shape: None,
                tensor: diagonal(1e-3, 2e-3, 3e-3),
                s0: 2.0,
            }],
            seed: 1,
        };
        let p = generate_phantom(&spec).unwrap();
        assert!(p.labels.labels().iter().all(|&l| l == 0));
        for c in 0..6 {
            assert!(p
                .tensors
                .channel(c)
                .iter()
                .all(|&v| v == spec.regions[0].tensor[c]));
        }
        assert!(p.s0.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn nested_spheres_enclose_along_rays() {
        let c = [10.0, 10.0, 10.0];
        let spec = PhantomSpec {
            dims: Dims::new(21, 21, 21),
            voxel_size: DEFAULT_VOXEL_SIZE,
            regions: vec![
                Region {
                    name: "bg".into(),
                    shape: None,
                    tensor: isotropic(1e-3),
                    s0: 1.0,
                },
                Region {
                    name: "outer".into(),
                    shape: Some(Shape::sphere(c, 8.0)),
                    tensor: isotropic(2e-3),
                    s0: 1.0,
                },
                Region {
                    name: "inner".into(),
                    shape: Some(Shape::sphere(c, 4.0)),
                    tensor: isotropic(3e-3),
                    s0: 1.0,
                },
            ],
            seed: 0,
        };
        let p = generate_phantom(&spec).unwrap();
        let dirs: [[i64; 3]; 6] = [
            [1, 0, 0],
            [-1, 0, 0],
            [0, 1, 0],
            [0, -1, 0],
            [1, 1, 1],
            [-1, 1, 0],
        ];
        for d in dirs {
            // Labels along a ray from the centre never increase.
            let mut prev = 2u16;
            let mut k = 0i64;
            while p
                .labels
                .dims()
                .contains(10 + d[0] * k, 10 + d[1] * k, 10 + d[2] * k)
            {
                let l = p.labels.get(
                    (10 + d[0] * k) as usize,
                    (10 + d[1] * k) as usize,
                    (10 + d[2] * k) as usize,
                );
                assert!(l <= prev, "ray {d:?} step {k}");
                prev = l;
                k += 1;
            }
            assert_eq!(prev, 0);
        }
        assert_eq!(p.labels.get(10, 10, 10), 2);
    }

    #[test]
    fn deterministic_and_toy_brain_has_all_regions() {
        let spec = PhantomSpec::toy_brain(3);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let counts = a.labels.counts();
        assert_eq!(counts.len(), 6);
        assert!(counts.iter().all(|&c| c > 100), "{counts:?}");
    }

    #[test]
    fn shapes_parse_and_print() {
        for s in [
            Shape::Ellipsoid {
                center: [1.0, 2.0, 3.0],
                radii: [4.0, 5.0, 6.5],
            },
            Shape::Box {
                min: [0.0, 0.0, 0.0],
                max: [2.0, 3.0, 4.0],
            },
            Shape::Shell {
                center: [5.0; 3],
                outer: [4.0; 3],
                inner: [2.0; 3],
            },
        ] {
            assert_eq!(Shape::parse(&s.to_kv()).unwrap(), s);
        }
        assert_eq!(
            Shape::parse("sphere 1 2 3 4").unwrap(),
            Shape::sphere([1.0, 2.0, 3.0], 4.0)
        );
        assert!(Shape::parse("cone 1 2 3").is_err());
        assert!(Shape::parse("ellipsoid 1 2 3 4 5").is_err());
        assert!(Shape::parse("ellipsoid 1 2 3 4 5 -6").is_err());
        let shell = Shape::Shell {
            center: [0.0; 3],
            outer: [4.0; 3],
            inner: [2.0; 3],
        };
        assert!(shell.contains([3.0, 0.0, 0.0]));
        assert!(!shell.contains([1.0, 0.0, 0.0]));
        assert!(!shell.contains([5.0, 0.0, 0.0]));
    }

    #[test]
    fn spec_kv_round_trip() {
        let spec = PhantomSpec::toy_brain(42);
        let f = spec.to_kv();
        let back = KvFile::parse(&f.to_text()).unwrap();
        let r = back.reader();
        assert_eq!(PhantomSpec::from_kv(&r).unwrap(), spec);
        r.finish().unwrap();
    }

    #[test]
    fn invalid_specs() {
        let mut s = PhantomSpec::toy_brain(0);
        s.regions[2].tensor = diagonal(1e-3, -1e-4, 1e-3);
        assert!(s.validate().is_err());
        let mut s = PhantomSpec::toy_brain(0);
        s.regions[0].shape = Some(Shape::sphere([0.0; 3], 1.0));
        assert!(s.validate().is_err());
        let mut s = PhantomSpec::toy_brain(0);
        s.regions[3].shape = None;
        assert!(s.validate().is_err());
    }
}
