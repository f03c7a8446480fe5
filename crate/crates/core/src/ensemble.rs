//! Voxel-wise fusion of several subnetworks.
//!
//! The evidence-based rule adopts, at each voxel, the class of the member
//! with the lowest Dirichlet uncertainty `u = N / S`, and reports the
//! entropy of the members' averaged beliefs as the fused uncertainty. Two
//! probability-level baselines are provided for comparison: averaging the
//! members' class probabilities, and picking the member whose probability
//! vector has the least entropy.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evidential::{beliefs, BeliefField, EvidenceField, SubnetId};
use crate::volume::{argmax, Dims, LabelMap, Volume};

/// Largest tolerated deviation of a probability vector's sum from one.
pub const PROBABILITY_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Evidence,
    Probability,
    Entropy,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [
        Criterion::Evidence,
        Criterion::Probability,
        Criterion::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Evidence => "evidence",
            Criterion::Probability => "probability",
            Criterion::Entropy => "entropy",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown criterion {s:?}, expected evidence, probability or entropy"
                ))
            })
    }
}

fn check_ids<'a>(ids: impl Iterator<Item = &'a SubnetId>) -> Result<()> {
    let mut seen: Vec<&SubnetId> = Vec::new();
    for id in ids {
        if seen.contains(&id) {
            return Err(Error::config(format!("duplicate subnet id {id}")));
        }
        seen.push(id);
    }
    Ok(())
}

fn check_names(names: &[String], classes: usize) -> Result<()> {
    if names.len() != classes {
        return Err(Error::shape(format!(
            "{} class names for {classes} classes",
            names.len()
        )));
    }
    Ok(())
}

/// Evidence fields of `M >= 1` subnetworks over a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetOutputs {
    members: Vec<EvidenceField>,
    class_names: Vec<String>,
}

impl SubnetOutputs {
    pub fn new(members: Vec<EvidenceField>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::EmptyDataset("fusion needs at least one subnet".into()))?;
        let (dims, classes) = (first.dims(), first.num_classes());
        if classes < 2 {
            return Err(Error::shape(format!(
                "fusion needs at least 2 classes, got {classes}"
            )));
        }
        for m in &members {
            if m.dims() != dims || m.num_classes() != classes {
                return Err(Error::shape(format!(
                    "subnet {} is {}x{}, expected {}x{}",
                    m.subnet_id(),
                    m.dims(),
                    m.num_classes(),
                    dims,
                    classes
                )));
            }
        }
        check_ids(members.iter().map(|m| m.subnet_id()))?;
        Ok(SubnetOutputs {
            members,
            class_names: LabelMap::default_names(classes),
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        check_names(&names, self.num_classes())?;
        self.class_names = names;
        Ok(self)
    }

    pub fn members(&self) -> &[EvidenceField] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dims(&self) -> Dims {
        self.members[0].dims()
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn voxel_size(&self) -> [f32; 3] {
        self.members[0].volume().voxel_size()
    }

    fn beliefs(&self) -> Result<Vec<BeliefField>> {
        self.members.iter().map(beliefs).collect()
    }
}

/// Per-voxel class probability vectors of `M >= 1` members.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityOutputs {
    members: Vec<(SubnetId, Volume<f64>)>,
    class_names: Vec<String>,
}

impl ProbabilityOutputs {
    pub fn new(members: Vec<(SubnetId, Volume<f64>)>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::EmptyDataset("fusion needs at least one subnet".into()))?;
        let (dims, classes) = (first.1.dims(), first.1.channels());
        if classes < 2 {
            return Err(Error::shape(format!(
                "fusion needs at least 2 classes, got {classes}"
            )));
        }
        let n = dims.voxels();
        for (id, v) in &members {
            if v.dims() != dims || v.channels() != classes {
                return Err(Error::shape(format!(
                    "member {id} is {}x{}, expected {dims}x{classes}",
                    v.dims(),
                    v.channels()
                )));
            }
            let data = v.data();
            for m in 0..n {
                let mut sum = 0.0;
                for c in 0..classes {
                    let p = data[c * n + m];
                    if p < 0.0 {
                        return Err(Error::Domain(format!(
                            "member {id} has negative probability at voxel {m}"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(Error::Domain(format!(
                        "member {id} probabilities sum to {sum} at voxel {m}"
                    )));
                }
            }
        }
        check_ids(members.iter().map(|m| &m.0))?;
        Ok(ProbabilityOutputs {
            members,
            class_names: LabelMap::default_names(classes),
        })
    }

    /// Dirichlet means `alpha / S` of every evidence member.
    pub fn from_evidence(outs: &SubnetOutputs) -> Result<Self> {
        let n = outs.dims().voxels();
        let classes = outs.num_classes();
        let members = outs
            .members
            .iter()
            .map(|f| {
                let e = f.volume().data();
                let mut probs = vec![0.0; e.len()];
                for m in 0..n {
                    let s: f64 = (0..classes).map(|c| e[c * n + m] as f64 + 1.0).sum();
                    for c in 0..classes {
                        probs[c * n + m] = (e[c * n + m] as f64 + 1.0) / s;
                    }
                }
                Ok((
                    f.subnet_id().clone(),
                    Volume::new(outs.dims(), classes, f.volume().voxel_size(), probs)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        ProbabilityOutputs::new(members)?.with_class_names(outs.class_names.clone())
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        check_names(&names, self.num_classes())?;
        self.class_names = names;
        Ok(self)
    }

    pub fn members(&self) -> &[(SubnetId, Volume<f64>)] {
        &self.members
    }

    pub fn dims(&self) -> Dims {
        self.members[0].1.dims()
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].1.channels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedResult {
    pub labelmap: LabelMap,
    /// Entropy of the averaged member vectors, natural log.
    pub uncertainty: Volume<f64>,
    /// Selected member per voxel (label = member index, names = subnet
    /// ids); absent for the averaging rule.
    pub chosen_subnet: Option<LabelMap>,
    pub criterion: Criterion,
}

/// Entropy `-sum p ln p` with `0 ln 0 = 0`.
#[inline]
pub fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    let mut h = 0.0;
    for v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

fn mean_of(fields: &[&[f64]], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for f in fields {
        for (o, v) in out.iter_mut().zip(f.iter()) {
            *o += v;
        }
    }
    let m = fields.len() as f64;
    out.iter_mut().for_each(|v| *v /= m);
    out
}

fn channel_entropy(values: &[f64], classes: usize, voxels: usize) -> Vec<f64> {
    (0..voxels)
        .map(|m| entropy((0..classes).map(|c| values[c * voxels + m])))
        .collect()
}

/// Mean over members of the per-member beliefs `e / S`.
pub fn average_beliefs(outs: &SubnetOutputs) -> Result<Volume<f64>> {
    let fields = outs.beliefs()?;
    let slices: Vec<&[f64]> = fields.iter().map(|b| b.beliefs()).collect();
    let mean = mean_of(&slices, outs.dims().voxels() * outs.num_classes());
    Volume::new(outs.dims(), outs.num_classes(), outs.voxel_size(), mean)
}

/// Per-voxel entropy of a non-negative `N`-channel field.
pub fn fused_uncertainty(p_prime: &Volume<f64>) -> Result<Volume<f64>> {
    if let Some(i) = p_prime.data().iter().position(|&v| v < 0.0) {
        return Err(Error::Domain(format!("negative belief at element {i}")));
    }
    let dims = p_prime.dims();
    let h = channel_entropy(p_prime.data(), p_prime.channels(), dims.voxels());
    Volume::new(dims, 1, p_prime.voxel_size(), h)
}

fn subnet_map(
    dims: Dims,
    voxel_size: [f32; 3],
    chosen: Vec<u16>,
    ids: Vec<String>,
) -> Result<LabelMap> {
    LabelMap::with_voxel_size(dims, voxel_size, chosen, ids)
}

/// Minimum-uncertainty member selection.
pub fn fuse_evidence_based(outs: &SubnetOutputs) -> Result<FusedResult> {
    let dims = outs.dims();
    let n = dims.voxels();
    let classes = outs.num_classes();
    let fields = outs.beliefs()?;
    let slices: Vec<&[f64]> = fields.iter().map(|b| b.beliefs()).collect();
    let mean = mean_of(&slices, n * classes);
    let uncertainty = channel_entropy(&mean, classes, n);

    let mut labels = Vec::with_capacity(n);
    let mut chosen = Vec::with_capacity(n);
    for m in 0..n {
        let mut best = 0;
        for (q, f) in fields.iter().enumerate().skip(1) {
            if f.uncertainty()[m] < fields[best].uncertainty()[m] {
                best = q;
            }
        }
        chosen.push(best as u16);
        labels.push(fields[best].argmax_at(m) as u16);
    }
    let vs = outs.voxel_size();
    Ok(FusedResult {
        labelmap: LabelMap::with_voxel_size(dims, vs, labels, outs.class_names.clone())?,
        uncertainty: Volume::new(dims, 1, vs, uncertainty)?,
        chosen_subnet: Some(subnet_map(
            dims,
            vs,
            chosen,
            outs.members
                .iter()
                .map(|f| f.subnet_id().to_string())
                .collect(),
        )?),
        criterion: Criterion::Evidence,
    })
}

/// Argmax of the member-averaged probabilities.
pub fn fuse_probability_based(outs: &ProbabilityOutputs) -> Result<FusedResult> {
    let dims = outs.dims();
    let n = dims.voxels();
    let classes = outs.num_classes();
    let slices: Vec<&[f64]> = outs.members.iter().map(|(_, v)| v.data()).collect();
    let mean = mean_of(&slices, n * classes);
    let labels = (0..n)
        .map(|m| argmax((0..classes).map(|c| mean[c * n + m])) as u16)
        .collect();
    let uncertainty = channel_entropy(&mean, classes, n);
    let vs = outs.members[0].1.voxel_size();
    Ok(FusedResult {
        labelmap: LabelMap::with_voxel_size(dims, vs, labels, outs.class_names.clone())?,
        uncertainty: Volume::new(dims, 1, vs, uncertainty)?,
        chosen_subnet: None,
        criterion: Criterion::Probability,
    })
}

/// Per voxel, the argmax of the member with the least probability entropy.
pub fn fuse_entropy_based(outs: &ProbabilityOutputs) -> Result<FusedResult> {
    let dims = outs.dims();
    let n = dims.voxels();
    let classes = outs.num_classes();
    let slices: Vec<&[f64]> = outs.members.iter().map(|(_, v)| v.data()).collect();
    let entropies: Vec<Vec<f64>> = slices
        .iter()
        .map(|d| channel_entropy(d, classes, n))
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut chosen = Vec::with_capacity(n);
    for m in 0..n {
        let mut best = 0;
        for q in 1..slices.len() {
            if entropies[q][m] < entropies[best][m] {
                best = q;
            }
        }
        chosen.push(best as u16);
        labels.push(argmax((0..classes).map(|c| slices[best][c * n + m])) as u16);
    }
    let mean = mean_of(&slices, n * classes);
    let uncertainty = channel_entropy(&mean, classes, n);
    let vs = outs.members[0].1.voxel_size();
    Ok(FusedResult {
        labelmap: LabelMap::with_voxel_size(dims, vs, labels, outs.class_names.clone())?,
        uncertainty: Volume::new(dims, 1, vs, uncertainty)?,
        chosen_subnet: Some(subnet_map(
            dims,
            vs,
            chosen,
            outs.members.iter().map(|(id, _)| id.to_string()).collect(),
        )?),
        criterion: Criterion::Entropy,
    })
}

/// Applies `criterion` to evidential outputs; the probability-level rules
/// read each member's Dirichlet mean as its class probabilities.
pub fn fuse(outs: &SubnetOutputs, criterion: Criterion) -> Result<FusedResult> {
    match criterion {
        Criterion::Evidence => fuse_evidence_based(outs),
        Criterion::Probability => fuse_probability_based(&ProbabilityOutputs::from_evidence(outs)?),
        Criterion::Entropy => fuse_entropy_based(&ProbabilityOutputs::from_evidence(outs)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DEFAULT_VOXEL_SIZE;

    fn field(id: &str, classes: usize, voxels: &[&[f32]]) -> EvidenceField {
        let n = voxels.len();
        let mut data = vec![0f32; classes * n];
        for (m, e) in voxels.iter().enumerate() {
            for c in 0..classes {
                data[c * n + m] = e[c];
            }
        }
        let v = Volume::new(Dims::new(n, 1, 1), classes, DEFAULT_VOXEL_SIZE, data).unwrap();
        EvidenceField::new(v, SubnetId::new(id)).unwrap()
    }

    fn probs(id: &str, voxels: &[&[f64]]) -> (SubnetId, Volume<f64>) {
        let n = voxels.len();
        let classes = voxels[0].len();
        let mut data = vec![0.0; classes * n];
        for (m, p) in voxels.iter().enumerate() {
            for c in 0..classes {
                data[c * n + m] = p[c];
            }
        }
        (
            SubnetId::new(id),
            Volume::new(Dims::new(n, 1, 1), classes, DEFAULT_VOXEL_SIZE, data).unwrap(),
        )
    }

    #[test]
    fn averaged_beliefs_of_opposing_members() {
        let outs = SubnetOutputs::new(vec![
            field("a", 2, &[&[3.0, 0.0]]),
            field("b", 2, &[&[0.0, 3.0]]),
        ])
        .unwrap();
        let p = average_beliefs(&outs).unwrap();
        assert!((p.data()[0] - 0.3).abs() < 1e-15);
        assert!((p.data()[1] - 0.3).abs() < 1e-15);
        let u = fused_uncertainty(&p).unwrap();
        let want = -2.0 * 0.3 * 0.3f64.ln();
        assert!((u.data()[0] - want).abs() < 1e-12);
        assert!((u.data()[0] - 0.7224).abs() < 1e-4);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy([1.0, 0.0, 0.0]), 0.0);
        assert!((entropy([1.0 / 3.0; 3]) - 3f64.ln()).abs() < 1e-15);
        assert!((entropy([0.9, 0.1]) - 0.325083).abs() < 1e-6);
        assert_eq!(entropy([0.0, 0.0]), 0.0);
    }

    #[test]
    fn min_uncertainty_member_wins() {
        let outs = SubnetOutputs::new(vec![
            field("a", 2, &[&[10.0, 0.0]]),
            field("b", 2, &[&[0.0, 1.0]]),
        ])
        .unwrap();
        let r = fuse_evidence_based(&outs).unwrap();
        assert_eq!(r.labelmap.labels(), &[0]);
        assert_eq!(r.chosen_subnet.unwrap().labels(), &[0]);
        // Reversed order: B first, A still chosen.
        let outs = SubnetOutputs::new(vec![
            field("b", 2, &[&[0.0, 1.0]]),
            field("a", 2, &[&[10.0, 0.0]]),
        ])
        .unwrap();
        let r = fuse_evidence_based(&outs).unwrap();
        assert_eq!(r.labelmap.labels(), &[0]);
        assert_eq!(r.chosen_subnet.unwrap().labels(), &[1]);
    }

    #[test]
    fn uncertainty_ties_go_to_first_member() {
        let outs = SubnetOutputs::new(vec![
            field("a", 2, &[&[1.0, 2.0]]),
            field("b", 2, &[&[2.0, 1.0]]),
        ])
        .unwrap();
        let r = fuse_evidence_based(&outs).unwrap();
        assert_eq!(r.chosen_subnet.unwrap().labels(), &[0]);
        assert_eq!(r.labelmap.labels(), &[1]);
    }

    #[test]
    fn probability_mean() {
        let outs =
            ProbabilityOutputs::new(vec![probs("a", &[&[0.6, 0.4]]), probs("b", &[&[0.3, 0.7]])])
                .unwrap();
        let r = fuse_probability_based(&outs).unwrap();
        assert_eq!(r.labelmap.labels(), &[1]);
        assert!(r.chosen_subnet.is_none());
        let h = entropy([0.45, 0.55]);
        assert!((r.uncertainty.data()[0] - h).abs() < 1e-15);
    }

    #[test]
    fn entropy_selection() {
        let outs =
            ProbabilityOutputs::new(vec![probs("a", &[&[0.9, 0.1]]), probs("b", &[&[0.2, 0.8]])])
                .unwrap();
        let r = fuse_entropy_based(&outs).unwrap();
        assert_eq!(r.labelmap.labels(), &[0]);
        let outs =
            ProbabilityOutputs::new(vec![probs("a", &[&[0.5, 0.5]]), probs("b", &[&[0.9, 0.1]])])
                .unwrap();
        assert_eq!(fuse_entropy_based(&outs).unwrap().labelmap.labels(), &[0]);
        assert_eq!(
            fuse_entropy_based(&outs)
                .unwrap()
                .chosen_subnet
                .unwrap()
                .labels(),
            &[1]
        );
        // Equal entropies: the first member decides.
        let outs =
            ProbabilityOutputs::new(vec![probs("a", &[&[0.3, 0.7]]), probs("b", &[&[0.7, 0.3]])])
                .unwrap();
        assert_eq!(fuse_entropy_based(&outs).unwrap().labelmap.labels(), &[1]);
    }

    #[test]
    fn unnormalized_probabilities_rejected() {
        assert!(ProbabilityOutputs::new(vec![probs("a", &[&[0.6, 0.6]])]).is_err());
        assert!(ProbabilityOutputs::new(vec![probs("a", &[&[0.50005, 0.5]])]).is_ok());
    }

    #[test]
    fn invalid_member_sets() {
        assert!(SubnetOutputs::new(vec![]).is_err());
        let a = field("a", 2, &[&[1.0, 0.0]]);
        assert!(SubnetOutputs::new(vec![a.clone(), a.clone()]).is_err());
        assert!(SubnetOutputs::new(vec![a, field("b", 3, &[&[1.0, 0.0, 0.0]])]).is_err());
    }

    #[test]
    fn single_member_paths_agree() {
        let f = field(
            "fa",
            3,
            &[
                &[1.0, 5.0, 0.0],
                &[0.2, 0.1, 0.3],
                &[0.0, 0.0, 0.0],
                &[9.0, 9.5, 9.0],
            ],
        );
        let outs = SubnetOutputs::new(vec![f.clone()]).unwrap();
        let own = beliefs(&f)
            .unwrap()
            .labelmap(LabelMap::default_names(3))
            .unwrap();
        for c in Criterion::ALL {
            assert_eq!(
                fuse(&outs, c).unwrap().labelmap.labels(),
                own.labels(),
                "{c}"
            );
        }
        let p = average_beliefs(&outs).unwrap();
        assert_eq!(p.data(), beliefs(&f).unwrap().beliefs());
    }

    #[test]
    fn criterion_names() {
        for c in Criterion::ALL {
            assert_eq!(c.name().parse::<Criterion>().unwrap(), c);
        }
        assert!("softmax".parse::<Criterion>().is_err());
    }
}
