//! End-to-end orchestration: phantom dataset, one subnetwork per input
//! channel, prediction, fusion, evaluation and the lesion experiment.
//!
//! Every artifact written under the output directory is hashed into a
//! [`RunManifest`]; the manifest also carries the full configuration, so a
//! run can be repeated from its manifest alone.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::ensemble::{fuse, Criterion, FusedResult, SubnetOutputs};
use crate::error::{Error, Result};
use crate::eval::{
    heatmap_pgm, labels_ppm, ood_report, region_metrics, region_metrics_within, Axis,
    MetricsOptions, MetricsReport, OodReport,
};
use crate::format::{encode_labelmap, encode_volume, load_labelmap, load_volume, write_file};
use crate::kv::{join, KvFile, KvReader};
use crate::phantom::{
    make_dataset, simulate_case, Case, DWIProtocol, Dataset, JitterConfig, LesionSpec, PhantomSpec,
    SplitFractions,
};
use crate::subnet::{
    encode_checkpoint, predict_subnet, train, InputChannel, SubnetConfig, SubnetParams,
    SubnetPrediction, TrainConfig, TrainingRecord,
};
use crate::volume::{LabelMap, Mask, Volume};

const SECTIONS: [&str; 8] = [
    "phantom", "protocol", "jitter", "split", "subnet", "train", "lesion", "metrics",
];

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Phantoms generated by jittering `phantom`.
    pub num_phantoms: usize,
    pub channels: Vec<InputChannel>,
    pub criterion: Criterion,
    pub phantom: PhantomSpec,
    pub protocol: DWIProtocol,
    pub jitter: JitterConfig,
    pub split: SplitFractions,
    pub hidden: Vec<usize>,
    pub kernel: usize,
    pub train: TrainConfig,
    /// `None` places the default lesion in the first test case.
    pub lesion: Option<LesionSpec>,
    pub metrics: MetricsOptions,
}

/// Initial learning rate of the end-to-end pipeline.
pub const PIPELINE_LR: f64 = 0.003;

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            num_phantoms: 10,
            channels: InputChannel::ALL.to_vec(),
            criterion: Criterion::Evidence,
            phantom: PhantomSpec::toy_brain(0),
            protocol: DWIProtocol::toy(),
            jitter: JitterConfig::default(),
            split: SplitFractions::default(),
            hidden: vec![16, 16],
            kernel: 3,
            train: TrainConfig {
                initial_lr: PIPELINE_LR,
                ..TrainConfig::default()
            },
            lesion: None,
            metrics: MetricsOptions::default(),
        }
    }
}

fn finish(r: KvReader<'_>, section: &str) -> Result<()> {
    r.finish()
        .map_err(|e| Error::config(format!("{section}: {e}")))
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("at least one input channel is required"));
        }
        let mut seen: Vec<usize> = self.channels.iter().map(|c| c.index()).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.channels.len() {
            return Err(Error::config("input channels must be distinct"));
        }
        self.phantom.validate()?;
        self.protocol.validate()?;
        self.jitter.validate()?;
        self.split.counts(self.num_phantoms)?;
        if self.num_phantoms < 3 {
            return Err(Error::config("num_phantoms must be at least 3"));
        }
        self.train.validate()?;
        self.subnet_config(self.channels[0]).validate()
    }

    /// Network layout and initialization seed for one channel.
    pub fn subnet_config(&self, channel: InputChannel) -> SubnetConfig {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(channel.index() as u64 + 1);
        let mut c = SubnetConfig::with_hidden(self.phantom.num_regions(), &self.hidden, seed);
        for l in &mut c.layers {
            l.kernel = self.kernel;
        }
        c
    }

    /// Training settings for one channel; each channel shuffles its own stream.
    pub fn train_config(&self, channel: InputChannel) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed.wrapping_add(channel.index() as u64),
            ..self.train
        }
    }

    /// Reads a config or a run manifest (whose `config.` section is used).
    /// Absent keys keep their defaults; unknown keys are errors.
    pub fn from_kv(file: &KvFile) -> Result<Self> {
        if file.keys().any(|k| k.starts_with("config.")) {
            return Self::from_kv(&file.section("config"));
        }
        let d = PipelineConfig::default();
        let top = file.top_level(&SECTIONS);
        let r = top.reader();
        let seed = r.get_or("seed", d.seed)?;
        let num_phantoms = r.get_or("num_phantoms", d.num_phantoms)?;
        let channels = r.list::<InputChannel>("channels")?.unwrap_or(d.channels);
        let criterion = r.get_or("criterion", d.criterion)?;
        finish(r, "top level")?;

        let s = file.section("phantom");
        let r = s.reader();
        let phantom = PhantomSpec::from_kv(&r)?;
        finish(r, "phantom")?;

        let s = file.section("protocol");
        let r = s.reader();
        let protocol = DWIProtocol::from_kv(&r)?;
        finish(r, "protocol")?;

        let s = file.section("jitter");
        let r = s.reader();
        let jitter = JitterConfig::from_kv(&r)?;
        finish(r, "jitter")?;

        let s = file.section("split");
        let r = s.reader();
        let split = SplitFractions {
            train: r.get_or("train", d.split.train)?,
            validation: r.get_or("validation", d.split.validation)?,
            test: r.get_or("test", d.split.test)?,
        };
        finish(r, "split")?;

        let s = file.section("subnet");
        let r = s.reader();
        let hidden = r.list::<usize>("hidden")?.unwrap_or(d.hidden);
        let kernel = r.get_or("kernel", d.kernel)?;
        finish(r, "subnet")?;

        let s = file.section("train");
        let r = s.reader();
        let train = TrainConfig::from_kv_over(&r, PipelineConfig::default().train)?;
        finish(r, "train")?;

        let s = file.section("lesion");
        let lesion = if s.is_empty() {
            None
        } else {
            let r = s.reader();
            let l = LesionSpec::from_kv(&r)?;
            finish(r, "lesion")?;
            Some(l)
        };

        let s = file.section("metrics");
        let r = s.reader();
        let metrics = MetricsOptions {
            include_background: r.get_or("include_background", false)?,
            voxel_weighted: r.get_or("voxel_weighted", false)?,
        };
        finish(r, "metrics")?;

        let cfg = PipelineConfig {
            seed,
            num_phantoms,
            channels,
            criterion,
            phantom,
            protocol,
            jitter,
            split,
            hidden,
            kernel,
            train,
            lesion,
            metrics,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_kv(&KvFile::load(path)?).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new();
        f.set("seed", self.seed);
        f.set("num_phantoms", self.num_phantoms);
        f.set("channels", join(&self.channels));
        f.set("criterion", self.criterion);
        f.extend_prefixed("phantom", &self.phantom.to_kv());
        f.extend_prefixed("protocol", &self.protocol.to_kv());
        f.extend_prefixed("jitter", &self.jitter.to_kv());
        f.set("split.train", self.split.train);
        f.set("split.validation", self.split.validation);
        f.set("split.test", self.split.test);
        f.set("subnet.hidden", join(&self.hidden));
        f.set("subnet.kernel", self.kernel);
        f.extend_prefixed("train", &self.train.to_kv());
        if let Some(l) = &self.lesion {
            f.extend_prefixed("lesion", &l.to_kv());
        }
        f.set(
            "metrics.include_background",
            self.metrics.include_background,
        );
        f.set("metrics.voxel_weighted", self.metrics.voxel_weighted);
        f
    }
}

/// Jittered copies of the configured phantom, simulated and split.
pub fn build_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let specs = vec![cfg.phantom.clone(); cfg.num_phantoms];
    make_dataset(&specs, &cfg.protocol, &cfg.split, &cfg.jitter, cfg.seed)
}

fn pairs(cases: &[Case]) -> Vec<(Volume<f32>, LabelMap)> {
    cases
        .iter()
        .map(|c| (c.params.clone(), c.phantom.labels.clone()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedSubnet {
    pub channel: InputChannel,
    pub net: SubnetParams,
    pub record: TrainingRecord,
}

/// Trains one subnetwork per configured channel, in parallel when the
/// thread pool allows. Each trainer is deterministic on its own.
pub fn train_subnets(cfg: &PipelineConfig, dataset: &Dataset) -> Result<Vec<TrainedSubnet>> {
    let (tr, va) = (pairs(&dataset.train), pairs(&dataset.validation));
    cfg.channels
        .par_iter()
        .map(|&channel| {
            let (net, record) = train(
                &tr,
                &va,
                channel,
                &cfg.subnet_config(channel),
                &cfg.train_config(channel),
            )?;
            Ok(TrainedSubnet {
                channel,
                net,
                record,
            })
        })
        .collect()
}

pub fn predict_all(
    subnets: &[TrainedSubnet],
    params: &Volume<f32>,
) -> Result<Vec<SubnetPrediction>> {
    subnets
        .iter()
        .map(|s| predict_subnet(&s.net, params, s.channel))
        .collect()
}

pub fn fuse_predictions(preds: &[SubnetPrediction], criterion: Criterion) -> Result<FusedResult> {
    let names = preds
        .first()
        .ok_or_else(|| Error::EmptyDataset("no subnet predictions to fuse".into()))?
        .labels
        .names()
        .to_vec();
    let outs = SubnetOutputs::new(preds.iter().map(|p| p.evidence.clone()).collect())?
        .with_class_names(names)?;
    fuse(&outs, criterion)
}

/// Fusion of one case under every criterion.
#[derive(Debug, Clone)]
pub struct CaseEvaluation {
    pub name: String,
    pub fused: Vec<(Criterion, FusedResult, MetricsReport)>,
}

impl CaseEvaluation {
    pub fn report(&self, criterion: Criterion) -> Option<&MetricsReport> {
        self.fused
            .iter()
            .find(|(c, _, _)| *c == criterion)
            .map(|(_, _, r)| r)
    }

    pub fn result(&self, criterion: Criterion) -> Option<&FusedResult> {
        self.fused
            .iter()
            .find(|(c, _, _)| *c == criterion)
            .map(|(_, f, _)| f)
    }
}

pub fn evaluate_case(
    subnets: &[TrainedSubnet],
    case: &Case,
    options: MetricsOptions,
) -> Result<CaseEvaluation> {
    let preds = predict_all(subnets, &case.params)?;
    let fused = Criterion::ALL
        .iter()
        .map(|&c| {
            let f = fuse_predictions(&preds, c)?;
            let r = region_metrics(&f.labelmap, &case.phantom.labels, options)?;
            Ok((c, f, r))
        })
        .collect::<Result<_>>()?;
    Ok(CaseEvaluation {
        name: case.name.clone(),
        fused,
    })
}

/// The lesion experiment on one held-out case.
#[derive(Debug, Clone)]
pub struct OodEvaluation {
    pub case: String,
    pub lesion: LesionSpec,
    pub mask: Mask,
    pub fused: FusedResult,
    pub lesioned: Case,
    pub report: OodReport,
    /// Mean Dice over voxels outside the lesion, without and with it.
    pub dice_outside_clean: f64,
    pub dice_outside_lesioned: f64,
}

pub fn evaluate_lesion(
    subnets: &[TrainedSubnet],
    case: &Case,
    clean: &FusedResult,
    lesion: &LesionSpec,
    protocol: &DWIProtocol,
    criterion: Criterion,
    options: MetricsOptions,
) -> Result<OodEvaluation> {
    let (lesioned, mask) = simulate_case(
        &format!("{}_lesion", case.name),
        &case.spec,
        protocol,
        Some(lesion),
    )?;
    let mask = mask.expect("lesion mask");
    let preds = predict_all(subnets, &lesioned.params)?;
    let fused = fuse_predictions(&preds, criterion)?;
    let report = ood_report(&fused.uncertainty, &mask, &case.phantom.labels)?;
    let outside = mask.invert();
    let gt = &case.phantom.labels;
    let clean_dice = region_metrics_within(&clean.labelmap, gt, Some(&outside), options)?.mean_dice;
    let lesioned_dice =
        region_metrics_within(&fused.labelmap, gt, Some(&outside), options)?.mean_dice;
    Ok(OodEvaluation {
        case: case.name.clone(),
        lesion: *lesion,
        mask,
        fused,
        lesioned,
        report,
        dice_outside_clean: clean_dice,
        dice_outside_lesioned: lesioned_dice,
    })
}

/// A written file and its SHA-256, path relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Writes files under a root directory and records their hashes.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl ArtifactWriter {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(ArtifactWriter {
            root,
            artifacts: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_file(&path, bytes)?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(path)
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    pub fn into_artifacts(self) -> Vec<Artifact> {
        self.artifacts
    }
}

/// Configuration, provenance and output hashes of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub tool_version: String,
    pub threads: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: PipelineConfig,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new();
        f.set("tool_version", &self.tool_version);
        f.set("threads", self.threads);
        f.set("started_unix", self.started_unix);
        f.set("finished_unix", self.finished_unix);
        f.extend_prefixed("config", &self.config.to_kv());
        for a in &self.artifacts {
            f.set(format!("output.{}", a.path), &a.sha256);
        }
        f
    }

    /// `output.*` entries as artifacts.
    pub fn artifacts_from_kv(file: &KvFile) -> Vec<Artifact> {
        file.section("output")
            .entries()
            .iter()
            .map(|(k, v)| Artifact {
                path: k.clone(),
                sha256: v.clone(),
            })
            .collect()
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Headline numbers of an end-to-end run.
#[derive(Debug, Clone)]
pub struct E2eSummary {
    pub cases: Vec<CaseEvaluation>,
    pub ood: Option<OodEvaluation>,
    pub subnets: Vec<TrainedSubnet>,
    pub manifest: RunManifest,
}

impl E2eSummary {
    /// Mean over held-out cases of each case's mean Dice.
    pub fn mean_dice(&self, criterion: Criterion) -> f64 {
        let v: Vec<f64> = self
            .cases
            .iter()
            .filter_map(|c| c.report(criterion).map(|r| r.mean_dice))
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new();
        for c in Criterion::ALL {
            f.set(format!("mean_dice.{c}"), self.mean_dice(c));
        }
        for case in &self.cases {
            for (c, _, r) in &case.fused {
                f.set(format!("case.{}.{c}.mean_dice", case.name), r.mean_dice);
            }
        }
        for s in &self.subnets {
            if let Some(last) = s.record.epochs.last() {
                f.set(
                    format!("subnet.{}.final_train_total", s.channel),
                    last.train.total,
                );
            }
            if let Some(first) = s.record.epochs.first() {
                f.set(
                    format!("subnet.{}.initial_train_total", s.channel),
                    first.train.total,
                );
            }
        }
        if let Some(o) = &self.ood {
            f.set("ood.case", &o.case);
            f.extend_prefixed("ood", &o.report.to_kv());
            f.set("ood.dice_outside_clean", o.dice_outside_clean);
            f.set("ood.dice_outside_lesioned", o.dice_outside_lesioned);
        }
        f
    }
}

fn write_volume<T: crate::volume::Element>(
    w: &mut ArtifactWriter,
    rel: &str,
    v: &Volume<T>,
) -> Result<()> {
    w.write(rel, &encode_volume(&v.cast::<f32>()?))?;
    Ok(())
}

fn write_fused(w: &mut ArtifactWriter, dir: &str, f: &FusedResult) -> Result<()> {
    w.write(&format!("{dir}/labels.elbl"), &encode_labelmap(&f.labelmap))?;
    write_volume(w, &format!("{dir}/uncertainty.evol"), &f.uncertainty)?;
    if let Some(chosen) = &f.chosen_subnet {
        w.write(
            &format!("{dir}/chosen_subnet.elbl"),
            &encode_labelmap(chosen),
        )?;
    }
    Ok(())
}

/// Runs the whole pipeline, writing artifacts under `out` and a
/// `manifest.kv` that lists them. Parallelism follows the ambient rayon
/// pool; results do not depend on it.
pub fn run_e2e(cfg: &PipelineConfig, out: &Path) -> Result<E2eSummary> {
    cfg.validate()?;
    let started = unix_now();
    let mut w = ArtifactWriter::new(out)?;
    w.write("config.kv", cfg.to_kv().to_text().as_bytes())?;

    let dataset = build_dataset(cfg)?;
    if dataset.test.is_empty() {
        return Err(Error::EmptyDataset("split leaves no test phantoms".into()));
    }
    for (split, cases) in [
        ("train", &dataset.train),
        ("validation", &dataset.validation),
        ("test", &dataset.test),
    ] {
        for c in cases.iter() {
            w.write(
                &format!("data/{split}/{}/spec.kv", c.name),
                c.spec.to_kv().to_text().as_bytes(),
            )?;
        }
    }

    let subnets = train_subnets(cfg, &dataset)?;
    for s in &subnets {
        w.write(
            &format!("subnets/{}.eprm", s.channel),
            &encode_checkpoint(&s.net),
        )?;
        w.write(
            &format!("subnets/{}.training.kv", s.channel),
            s.record.to_kv(false).as_bytes(),
        )?;
    }

    let mut cases = Vec::new();
    for case in &dataset.test {
        let ev = evaluate_case(&subnets, case, cfg.metrics)?;
        w.write(
            &format!("test/{}/labels_gt.elbl", case.name),
            &encode_labelmap(&case.phantom.labels),
        )?;
        write_volume(
            &mut w,
            &format!("test/{}/params.evol", case.name),
            &case.params,
        )?;
        for (c, f, r) in &ev.fused {
            let dir = format!("test/{}/{c}", case.name);
            write_fused(&mut w, &dir, f)?;
            w.write(&format!("{dir}/metrics.kv"), r.to_kv().to_text().as_bytes())?;
        }
        cases.push(ev);
    }

    let case = &dataset.test[0];
    let lesion = cfg.lesion.unwrap_or_else(|| LesionSpec::toy(&case.spec));
    let clean = cases[0]
        .result(cfg.criterion)
        .expect("every criterion evaluated");
    let ood = evaluate_lesion(
        &subnets,
        case,
        clean,
        &lesion,
        &cfg.protocol,
        cfg.criterion,
        cfg.metrics,
    )?;
    let dir = format!("ood/{}", case.name);
    w.write(
        &format!("{dir}/lesion.kv"),
        lesion.to_kv().to_text().as_bytes(),
    )?;
    w.write(
        &format!("{dir}/lesion_mask.elbl"),
        &encode_labelmap(&ood.mask.to_labelmap()),
    )?;
    write_volume(&mut w, &format!("{dir}/params.evol"), &ood.lesioned.params)?;
    write_fused(&mut w, &dir, &ood.fused)?;
    w.write(
        &format!("{dir}/ood.kv"),
        ood.report.to_kv().to_text().as_bytes(),
    )?;
    let z = lesion.shape.center()[2]
        .round()
        .clamp(0.0, (case.spec.dims.nz - 1) as f64) as usize;
    w.write(
        &format!("{dir}/uncertainty_z{z}.pgm"),
        &heatmap_pgm(&ood.fused.uncertainty, 0, Axis::Z, z)?,
    )?;
    w.write(
        &format!("{dir}/labels_z{z}.ppm"),
        &labels_ppm(&ood.fused.labelmap, Axis::Z, z)?,
    )?;

    let mut summary = E2eSummary {
        cases,
        ood: Some(ood),
        subnets,
        manifest: RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            started_unix: started,
            finished_unix: 0,
            config: cfg.clone(),
            artifacts: Vec::new(),
        },
    };
    w.write("summary.kv", summary.to_kv().to_text().as_bytes())?;
    summary.manifest.finished_unix = unix_now();
    summary.manifest.artifacts = w.into_artifacts();
    let path = out.join("manifest.kv");
    write_file(&path, summary.manifest.to_kv().to_text().as_bytes())?;
    Ok(summary)
}

/// Saves a dataset as `<split>/<case>/{params.evol, labels.elbl, spec.kv}`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<Artifact>> {
    let mut w = ArtifactWriter::new(dir)?;
    for (split, cases) in [
        ("train", &dataset.train),
        ("validation", &dataset.validation),
        ("test", &dataset.test),
    ] {
        for c in cases.iter() {
            w.write(
                &format!("{split}/{}/params.evol", c.name),
                &encode_volume(&c.params),
            )?;
            w.write(
                &format!("{split}/{}/labels.elbl", c.name),
                &encode_labelmap(&c.phantom.labels),
            )?;
            w.write(
                &format!("{split}/{}/spec.kv", c.name),
                c.spec.to_kv().to_text().as_bytes(),
            )?;
        }
    }
    Ok(w.into_artifacts())
}

/// Loads every `<case>/{params.evol, labels.elbl}` pair of one split, in
/// name order. A missing split directory yields an empty list.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<(String, Volume<f32>, LabelMap)>> {
    let root = dir.join(split);
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut names: Vec<String> = std::fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let params = load_volume(root.join(&n).join("params.evol"))?;
            let labels = load_labelmap(root.join(&n).join("labels.elbl"))?;
            Ok((n, params, labels))
        })
        .collect()
}
