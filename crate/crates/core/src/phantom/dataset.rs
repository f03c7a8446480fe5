use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    derive_params, fit_dti, generate_phantom, inject_lesion, simulate_dwi, DWIProtocol, LesionSpec,
    Phantom, PhantomSpec,
};
use crate::error::{Error, Result};
use crate::kv::{KvFile, KvReader};
use crate::volume::{Mask, Volume};

/// Per-volume perturbation ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterConfig {
    /// Shift of all shapes, in voxels, drawn per axis from `±center`.
    pub center: f64,
    /// Relative per-axis scaling of all shapes about the volume centre.
    pub scale: f64,
    /// Relative per-axis scaling of each region's tensor.
    pub tensor: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            center: 2.0,
            scale: 0.1,
            tensor: 0.05,
        }
    }
}

impl JitterConfig {
    pub fn none() -> Self {
        JitterConfig {
            center: 0.0,
            scale: 0.0,
            tensor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.center >= 0.0
            && self.center.is_finite()
            && (0.0..1.0).contains(&self.scale)
            && (0.0..1.0).contains(&self.tensor);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid jitter ranges {self:?}")))
        }
    }

    pub fn from_kv(r: &KvReader<'_>) -> Result<Self> {
        let d = Self::default();
        let j = JitterConfig {
            center: r.get_or("center", d.center)?,
            scale: r.get_or("scale", d.scale)?,
            tensor: r.get_or("tensor", d.tensor)?,
        };
        j.validate()?;
        Ok(j)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new();
        f.set("center", self.center);
        f.set("scale", self.scale);
        f.set("tensor", self.tensor);
        f
    }
}

fn symmetric(rng: &mut impl Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.random_range(-range..=range)
    }
}

/// Shifts and scales every shape together, so nesting is preserved, and
/// scales each tensor by `S D S` with a random positive diagonal `S`.
pub fn jitter_spec(spec: &PhantomSpec, jitter: &JitterConfig, rng: &mut impl Rng) -> PhantomSpec {
    let d = spec.dims;
    let origin = [
        (d.nx as f64 - 1.0) / 2.0,
        (d.ny as f64 - 1.0) / 2.0,
        (d.nz as f64 - 1.0) / 2.0,
    ];
    let shift: [f64; 3] = std::array::from_fn(|_| symmetric(rng, jitter.center));
    let scale: [f64; 3] = std::array::from_fn(|_| 1.0 + symmetric(rng, jitter.scale));
    let mut out = spec.clone();
    for r in &mut out.regions {
        r.shape = r.shape.map(|s| s.transformed(origin, scale, shift));
        let s: [f64; 3] = std::array::from_fn(|_| (1.0 + symmetric(rng, jitter.tensor)).sqrt());
        let t = r.tensor;
        r.tensor = [
            t[0] * s[0] * s[0],
            t[1] * s[1] * s[1],
            t[2] * s[2] * s[2],
            t[3] * s[0] * s[1],
            t[4] * s[0] * s[2],
            t[5] * s[1] * s[2],
        ];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    /// Rounded train and validation counts; test takes the rest.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions must be >= 0 and sum to 1, got {f:?}"
            )));
        }
        let train = (self.train * n as f64).round() as usize;
        let validation = (self.validation * n as f64).round() as usize;
        if train == 0 || train + validation > n {
            return Err(Error::config(format!(
                "split {f:?} of {n} leaves no valid partition"
            )));
        }
        Ok([train, validation, n - train - validation])
    }
}

/// One simulated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub name: String,
    /// The jittered spec this case was generated from.
    pub spec: PhantomSpec,
    pub phantom: Phantom,
    /// Fitted `(FA, MD, E1, E2, E3)` maps.
    pub params: Volume<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<Case>,
    pub validation: Vec<Case>,
    pub test: Vec<Case>,
}

/// Generates, simulates with noise seeded by `spec.seed`, fits and derives
/// parameter maps. A lesion alters the tensor field before simulation; the
/// labels keep the unlesioned anatomy.
pub fn simulate_case(
    name: &str,
    spec: &PhantomSpec,
    protocol: &DWIProtocol,
    lesion: Option<&LesionSpec>,
) -> Result<(Case, Option<Mask>)> {
    let mut phantom = generate_phantom(spec)?;
    let mask = match lesion {
        Some(l) => {
            let (tensors, mask) = inject_lesion(&phantom.tensors, l)?;
            phantom.tensors = tensors;
            Some(mask)
        }
        None => None,
    };
    let dwi = simulate_dwi(&phantom.tensors, &phantom.s0, protocol, spec.seed)?;
    let params = derive_params(&fit_dti(&dwi, protocol)?)?.cast::<f32>()?;
    Ok((
        Case {
            name: name.to_string(),
            spec: spec.clone(),
            phantom,
            params,
        },
        mask,
    ))
}

/// Jitters each spec, simulates it and splits the cases by seed.
pub fn make_dataset(
    specs: &[PhantomSpec],
    protocol: &DWIProtocol,
    split: &SplitFractions,
    jitter: &JitterConfig,
    seed: u64,
) -> Result<Dataset> {
    if specs.len() < 3 {
        return Err(Error::EmptyDataset(format!(
            "need at least 3 phantom specs, got {}",
            specs.len()
        )));
    }
    jitter.validate()?;
    protocol.validate()?;
    let [n_train, n_val, _] = split.counts(specs.len())?;

    let mut order: Vec<usize> = (0..specs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut cases = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut jittered = jitter_spec(spec, jitter, &mut rng);
        jittered.seed = rng.random();
        let (case, _) = simulate_case(&format!("case{i:03}"), &jittered, protocol, None)?;
        cases.push(Some(case));
    }
    let mut take = |idx: &[usize]| -> Vec<Case> {
        idx.iter()
            .map(|&i| cases[i].take().expect("each case used once"))
            .collect()
    };
    Ok(Dataset {
        train: take(&order[..n_train]),
        validation: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}
