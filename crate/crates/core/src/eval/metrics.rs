use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::volume::{LabelMap, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetricsOptions {
    /// Count region 0 in the means.
    pub include_background: bool,
    /// Weight region means by ground-truth voxel count.
    pub voxel_weighted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMetrics {
    pub label: u16,
    pub name: String,
    pub dice: f64,
    pub recall: f64,
    pub iou: f64,
    pub gt_voxels: usize,
    pub pred_voxels: usize,
    pub intersection: usize,
}

impl RegionMetrics {
    fn from_counts(label: u16, name: &str, gt: usize, pred: usize, inter: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        RegionMetrics {
            label,
            name: name.to_string(),
            dice: ratio(2 * inter, gt + pred),
            recall: ratio(inter, gt),
            iou: ratio(inter, gt + pred - inter),
            gt_voxels: gt,
            pred_voxels: pred,
            intersection: inter,
        }
    }
}

/// Per-region overlap scores and their means. Regions absent from both
/// maps are omitted; regions absent from the ground truth are listed but
/// not averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub regions: Vec<RegionMetrics>,
    pub mean_dice: f64,
    pub mean_recall: f64,
    pub mean_iou: f64,
    pub options: MetricsOptions,
    /// Voxels that took part in the evaluation.
    pub voxels: usize,
}

impl MetricsReport {
    pub fn region(&self, label: u16) -> Option<&RegionMetrics> {
        self.regions.iter().find(|r| r.label == label)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new();
        f.set("mean_dice", self.mean_dice);
        f.set("mean_recall", self.mean_recall);
        f.set("mean_iou", self.mean_iou);
        f.set("include_background", self.options.include_background);
        f.set("voxel_weighted", self.options.voxel_weighted);
        f.set("voxels", self.voxels);
        for r in &self.regions {
            let p = format!("region.{}", r.name);
            f.set(format!("{p}.label"), r.label);
            f.set(format!("{p}.dice"), r.dice);
            f.set(format!("{p}.recall"), r.recall);
            f.set(format!("{p}.iou"), r.iou);
            f.set(format!("{p}.gt_voxels"), r.gt_voxels);
            f.set(format!("{p}.pred_voxels"), r.pred_voxels);
        }
        f
    }
}

pub fn region_metrics(
    pred: &LabelMap,
    gt: &LabelMap,
    options: MetricsOptions,
) -> Result<MetricsReport> {
    region_metrics_within(pred, gt, None, options)
}

/// As [`region_metrics`], restricted to voxels inside `within`.
pub fn region_metrics_within(
    pred: &LabelMap,
    gt: &LabelMap,
    within: Option<&Mask>,
    options: MetricsOptions,
) -> Result<MetricsReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction {} vs ground truth {}",
            pred.dims(),
            gt.dims()
        )));
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::shape(format!(
            "prediction has {} classes, ground truth {}",
            pred.num_classes(),
            gt.num_classes()
        )));
    }
    if let Some(m) = within {
        if m.dims() != gt.dims() {
            return Err(Error::shape(format!(
                "evaluation mask {} vs labels {}",
                m.dims(),
                gt.dims()
            )));
        }
    }
    let n = gt.num_classes();
    let (mut g, mut p, mut i) = (vec![0usize; n], vec![0usize; n], vec![0usize; n]);
    let mut voxels = 0;
    for (m, (&a, &b)) in pred.labels().iter().zip(gt.labels()).enumerate() {
        if within.is_some_and(|mask| !mask.contains(m)) {
            continue;
        }
        voxels += 1;
        p[a as usize] += 1;
        g[b as usize] += 1;
        if a == b {
            i[a as usize] += 1;
        }
    }
    let regions: Vec<RegionMetrics> = (0..n)
        .filter(|&c| g[c] + p[c] > 0)
        .map(|c| RegionMetrics::from_counts(c as u16, &gt.names()[c], g[c], p[c], i[c]))
        .collect();
    let averaged: Vec<&RegionMetrics> = regions
        .iter()
        .filter(|r| r.gt_voxels > 0 && (options.include_background || r.label != 0))
        .collect();
    let mean = |f: fn(&RegionMetrics) -> f64| -> f64 {
        if averaged.is_empty() {
            return 0.0;
        }
        if options.voxel_weighted {
            let total: usize = averaged.iter().map(|r| r.gt_voxels).sum();
            averaged
                .iter()
                .map(|r| f(r) * r.gt_voxels as f64)
                .sum::<f64>()
                / total as f64
        } else {
            averaged.iter().map(|r| f(r)).sum::<f64>() / averaged.len() as f64
        }
    };
    Ok(MetricsReport {
        mean_dice: mean(|r| r.dice),
        mean_recall: mean(|r| r.recall),
        mean_iou: mean(|r| r.iou),
        regions,
        options,
        voxels,
    })
}
