//! Evidence, Dirichlet parameters, beliefs and per-voxel uncertainty.
//!
//! For evidence `e >= 0` over `N` classes the Dirichlet parameters are
//! `alpha = e + 1` with strength `S = sum(alpha) = sum(e) + N`. Beliefs are
//! `p = e / S` and the unassigned mass `u = N / S`, so `sum(p) + u = 1`.

use crate::error::{Error, Result};
use crate::volume::{argmax, Dims, Element, LabelMap, Volume};

/// Identifies which subnetwork produced a field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubnetId(pub String);

impl SubnetId {
    pub fn new(id: impl Into<String>) -> Self {
        SubnetId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for SubnetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Non-negative per-class evidence over a grid (a `C = N` volume).
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceField {
    evidence: Volume<f32>,
    subnet_id: SubnetId,
}

impl EvidenceField {
    pub fn new(evidence: Volume<f32>, subnet_id: SubnetId) -> Result<Self> {
        if let Some(i) = evidence.data().iter().position(|&e| e < 0.0) {
            return Err(Error::Domain(format!(
                "evidence must be non-negative, element {i} is {}",
                evidence.data()[i]
            )));
        }
        Ok(EvidenceField {
            evidence,
            subnet_id,
        })
    }

    pub fn dims(&self) -> Dims {
        self.evidence.dims()
    }

    pub fn num_classes(&self) -> usize {
        self.evidence.channels()
    }

    pub fn subnet_id(&self) -> &SubnetId {
        &self.subnet_id
    }

    pub fn volume(&self) -> &Volume<f32> {
        &self.evidence
    }

    pub fn into_volume(self) -> Volume<f32> {
        self.evidence
    }

    /// Evidence vector at voxel `m`, widened to f64.
    #[inline]
    pub fn evidence_at(&self, m: usize, out: &mut [f64]) {
        let n = self.dims().voxels();
        let data = self.evidence.data();
        for (c, o) in out.iter_mut().enumerate() {
            *o = data[c * n + m] as f64;
        }
    }
}

/// Beliefs (class-major) and uncertainty for every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefField {
    dims: Dims,
    classes: usize,
    beliefs: Vec<f64>,
    uncertainty: Vec<f64>,
}

impl BeliefField {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    /// Belief of class `c` at voxel `m`.
    #[inline]
    pub fn belief(&self, c: usize, m: usize) -> f64 {
        self.beliefs[c * self.dims.voxels() + m]
    }

    pub fn beliefs(&self) -> &[f64] {
        &self.beliefs
    }

    pub fn uncertainty(&self) -> &[f64] {
        &self.uncertainty
    }

    /// Per-voxel most-believed class, lowest index on ties.
    pub fn argmax_at(&self, m: usize) -> usize {
        argmax((0..self.classes).map(|c| self.belief(c, m)))
    }

    pub fn labelmap(&self, names: Vec<String>) -> Result<LabelMap> {
        if names.len() != self.classes {
            return Err(Error::shape(format!(
                "{} class names for {} classes",
                names.len(),
                self.classes
            )));
        }
        let labels = (0..self.dims.voxels())
            .map(|m| self.argmax_at(m) as u16)
            .collect();
        LabelMap::new(self.dims, labels, names)
    }

    pub fn belief_volume(&self) -> Result<Volume<f64>> {
        Volume::new(
            self.dims,
            self.classes,
            crate::volume::DEFAULT_VOXEL_SIZE,
            self.beliefs.clone(),
        )
    }

    pub fn uncertainty_volume(&self) -> Result<Volume<f64>> {
        Volume::new(
            self.dims,
            1,
            crate::volume::DEFAULT_VOXEL_SIZE,
            self.uncertainty.clone(),
        )
    }
}

/// Beliefs and uncertainty of a single evidence vector, written into `p`.
#[inline]
pub fn voxel_beliefs(e: &[f64], p: &mut [f64]) -> f64 {
    let n = e.len() as f64;
    let s: f64 = e.iter().sum::<f64>() + n;
    for (pi, ei) in p.iter_mut().zip(e) {
        *pi = ei / s;
    }
    n / s
}

/// `alpha = e + 1`, elementwise.
pub fn evidence_to_alpha(e: &EvidenceField) -> Volume<f64> {
    let v = e.volume();
    Volume::new(
        v.dims(),
        v.channels(),
        v.voxel_size(),
        v.data().iter().map(|&x| x as f64 + 1.0).collect(),
    )
    .expect("shifted evidence stays finite")
}

pub fn beliefs(e: &EvidenceField) -> Result<BeliefField> {
    let classes = e.num_classes();
    if classes < 2 {
        return Err(Error::shape(format!(
            "beliefs need at least two classes, got {classes}"
        )));
    }
    let dims = e.dims();
    let n = dims.voxels();
    let mut beliefs = vec![0.0; n * classes];
    let mut uncertainty = vec![0.0; n];
    let mut ev = vec![0.0; classes];
    let mut p = vec![0.0; classes];
    for m in 0..n {
        e.evidence_at(m, &mut ev);
        uncertainty[m] = voxel_beliefs(&ev, &mut p);
        for c in 0..classes {
            beliefs[c * n + m] = p[c];
        }
    }
    Ok(BeliefField {
        dims,
        classes,
        beliefs,
        uncertainty,
    })
}

/// Dirichlet mean `alpha / sum(alpha)` at every voxel.
pub fn expected_probabilities<T: Element>(alpha: &Volume<T>) -> Result<Volume<T>> {
    if let Some(i) = alpha.data().iter().position(|a| a.to_f64() < 1.0) {
        return Err(Error::Domain(format!(
            "Dirichlet parameters must be >= 1, element {i} is {:?}",
            alpha.data()[i]
        )));
    }
    let n = alpha.dims().voxels();
    let classes = alpha.channels();
    let data = alpha.data();
    let mut out = vec![T::default(); data.len()];
    for m in 0..n {
        let s: f64 = (0..classes).map(|c| data[c * n + m].to_f64()).sum();
        for c in 0..classes {
            out[c * n + m] = T::from_f64(data[c * n + m].to_f64() / s);
        }
    }
    Volume::new(alpha.dims(), classes, alpha.voxel_size(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DEFAULT_VOXEL_SIZE;
    use proptest::prelude::*;

    fn field(classes: usize, voxels: Vec<Vec<f32>>) -> EvidenceField {
        let n = voxels.len();
        let v = Volume::from_fn(Dims::new(n, 1, 1), classes, DEFAULT_VOXEL_SIZE, |c, m| {
            voxels[m][c]
        })
        .unwrap();
        EvidenceField::new(v, SubnetId::new("t")).unwrap()
    }

    #[test]
    fn alpha_is_shifted_evidence() {
        let f = field(3, vec![vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]]);
        let a = evidence_to_alpha(&f);
        assert_eq!(a.voxel(0), vec![1.0, 1.0, 1.0]);
        assert_eq!(a.voxel(1), vec![2.0, 3.0, 4.0]);
        let min_a = a.data().iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min_a, 1.0);
    }

    #[test]
    fn zero_evidence_is_maximally_uncertain() {
        let b = beliefs(&field(3, vec![vec![0.0; 3]])).unwrap();
        assert_eq!(b.uncertainty()[0], 1.0);
        assert_eq!(b.beliefs(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn worked_example() {
        let b = beliefs(&field(3, vec![vec![1.0, 2.0, 3.0]])).unwrap();
        for (c, want) in [1.0 / 9.0, 2.0 / 9.0, 3.0 / 9.0].iter().enumerate() {
            assert!((b.belief(c, 0) - want).abs() < 1e-15);
        }
        assert!((b.uncertainty()[0] - 3.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn large_evidence_low_uncertainty() {
        let b = beliefs(&field(3, vec![vec![1e6, 0.0, 0.0]])).unwrap();
        assert!(b.uncertainty()[0] < 1e-5);
        assert!(b.belief(0, 0) > 1.0 - 1e-5);
    }

    #[test]
    fn negative_evidence_rejected() {
        let v = Volume::new(
            Dims::new(1, 1, 1),
            2,
            DEFAULT_VOXEL_SIZE,
            vec![1.0f32, -0.5],
        )
        .unwrap();
        assert!(EvidenceField::new(v, SubnetId::new("x")).is_err());
    }

    #[test]
    fn single_class_rejected() {
        assert!(beliefs(&field(1, vec![vec![1.0]])).is_err());
    }

    #[test]
    fn expected_probability_examples() {
        let a = Volume::new(Dims::new(1, 1, 1), 4, DEFAULT_VOXEL_SIZE, vec![1.0f64; 4]).unwrap();
        assert_eq!(expected_probabilities(&a).unwrap().data(), &[0.25; 4]);
        let a = Volume::new(
            Dims::new(1, 1, 1),
            3,
            DEFAULT_VOXEL_SIZE,
            vec![2.0f64, 3.0, 4.0],
        )
        .unwrap();
        let p = expected_probabilities(&a).unwrap();
        for (got, want) in p.data().iter().zip([2.0 / 9.0, 3.0 / 9.0, 4.0 / 9.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let bad =
            Volume::new(Dims::new(1, 1, 1), 2, DEFAULT_VOXEL_SIZE, vec![0.5f64, 1.0]).unwrap();
        assert!(expected_probabilities(&bad).is_err());
    }

    fn evidence_strategy() -> impl Strategy<Value = Vec<f32>> {
        (2usize..8).prop_flat_map(|n| proptest::collection::vec(0f32..1e4, n))
    }

    proptest! {
        #[test]
        fn partition_of_unity(e in evidence_strategy()) {
            let n = e.len();
            let b = beliefs(&field(n, vec![e.clone()])).unwrap();
            let sum: f64 = (0..n).map(|c| b.belief(c, 0)).sum();
            prop_assert!((sum + b.uncertainty()[0] - 1.0).abs() <= 1e-6);
            let s: f64 = e.iter().map(|&x| x as f64).sum::<f64>() + n as f64;
            prop_assert!((b.uncertainty()[0] - n as f64 / s).abs() <= 1e-6);
        }

        #[test]
        fn scaling_evidence_reduces_uncertainty(e in evidence_strategy(), c in 1.01f32..10.0) {
            prop_assume!(e.iter().any(|&x| x > 1e-3));
            let n = e.len();
            let scaled: Vec<f32> = e.iter().map(|x| x * c).collect();
            let b = beliefs(&field(n, vec![e, scaled])).unwrap();
            prop_assert!(b.uncertainty()[1] < b.uncertainty()[0]);
        }

        #[test]
        fn argmax_agrees(e in evidence_strategy()) {
            let n = e.len();
            let mut sorted = e.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] > sorted[1]);
            let f = field(n, vec![e.clone()]);
            let b = beliefs(&f).unwrap();
            let alpha = evidence_to_alpha(&f);
            let probs = expected_probabilities(&alpha).unwrap();
            let k = argmax(e.iter().copied());
            prop_assert_eq!(b.argmax_at(0), k);
            prop_assert_eq!(argmax(alpha.data().iter().copied()), k);
            prop_assert_eq!(argmax(probs.data().iter().copied()), k);
            let total: f64 = probs.data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }
}
