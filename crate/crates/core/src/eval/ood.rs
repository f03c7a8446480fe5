use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::volume::{Element, LabelMap, Mask, Volume};

/// Width in voxels of the band removed along every region boundary.
pub const REFERENCE_MARGIN: usize = 2;

/// Lesion-versus-normal-tissue statistics of an uncertainty map.
#[derive(Debug, Clone, PartialEq)]
pub struct OodReport {
    pub lesion_mean: f64,
    pub lesion_median: f64,
    pub reference_mean: f64,
    pub reference_median: f64,
    /// `lesion_mean / reference_mean`.
    pub contrast_ratio: f64,
    /// Lesion voxels as positives, reference voxels as negatives.
    pub auroc: f64,
    pub lesion_voxels: usize,
    pub reference_voxels: usize,
}

impl OodReport {
    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new();
        f.set("lesion_mean", self.lesion_mean);
        f.set("lesion_median", self.lesion_median);
        f.set("reference_mean", self.reference_mean);
        f.set("reference_median", self.reference_median);
        f.set("contrast_ratio", self.contrast_ratio);
        f.set("auroc", self.auroc);
        f.set("lesion_voxels", self.lesion_voxels);
        f.set("reference_voxels", self.reference_voxels);
        f
    }
}

/// Voxels of non-background regions whose whole `(2r+1)³` neighbourhood
/// lies inside the volume and carries the same label, i.e. `r` rounds of
/// 26-neighbour erosion per region. Lesion voxels are removed.
pub fn reference_mask(gt: &LabelMap, lesion: &Mask, margin: usize) -> Result<Mask> {
    let d = gt.dims();
    if lesion.dims() != d {
        return Err(Error::shape(format!(
            "lesion mask {} vs labels {}",
            lesion.dims(),
            d
        )));
    }
    let labels = gt.labels();
    let r = margin;
    let values = (0..d.voxels())
        .map(|m| {
            let l = labels[m];
            if l == 0 || lesion.contains(m) {
                return false;
            }
            let (x, y, z) = d.coords(m);
            if x < r || y < r || z < r || x + r >= d.nx || y + r >= d.ny || z + r >= d.nz {
                return false;
            }
            (z - r..=z + r).all(|zz| {
                (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| labels[d.index(xx, yy, zz)] == l))
            })
        })
        .collect();
    Mask::new(d, values)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Area under the ROC curve by the rank-sum statistic, ties at midranks.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Domain("AUROC needs positives and negatives".into()));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    if all.iter().any(|(v, _)| !v.is_finite()) {
        return Err(Error::NonFinite { index: 0 });
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = 0.5 * ((i + 1) + (j + 1)) as f64;
        rank_sum += mid * all[i..=j].iter().filter(|(_, p)| *p).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn ood_report<T: Element>(
    uncertainty: &Volume<T>,
    lesion: &Mask,
    gt: &LabelMap,
) -> Result<OodReport> {
    if uncertainty.channels() != 1 {
        return Err(Error::shape(format!(
            "uncertainty must have 1 channel, got {}",
            uncertainty.channels()
        )));
    }
    if uncertainty.dims() != gt.dims() || lesion.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "uncertainty {}, lesion {} and labels {} must match",
            uncertainty.dims(),
            lesion.dims(),
            gt.dims()
        )));
    }
    if lesion.count() == 0 {
        return Err(Error::Domain("lesion mask is empty".into()));
    }
    let reference = reference_mask(gt, lesion, REFERENCE_MARGIN)?;
    if reference.count() == 0 {
        return Err(Error::Domain("reference mask is empty".into()));
    }
    let u = uncertainty.data();
    if let Some(index) = u.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let pick = |m: &Mask| -> Vec<f64> {
        let mut v: Vec<f64> = (0..u.len())
            .filter(|&i| m.contains(i))
            .map(|i| u[i].to_f64())
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (les, refv) = (pick(lesion), pick(&reference));
    // Offset by the minimum so a constant sample averages to itself exactly.
    let mean = |v: &[f64]| v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / v.len() as f64;
    let (lm, rm) = (mean(&les), mean(&refv));
    let contrast_ratio = if lm == rm { 1.0 } else { lm / rm };
    Ok(OodReport {
        lesion_mean: lm,
        lesion_median: median(&les),
        reference_mean: rm,
        reference_median: median(&refv),
        contrast_ratio,
        auroc: auroc(&les, &refv)?,
        lesion_voxels: les.len(),
        reference_voxels: refv.len(),
    })
}
