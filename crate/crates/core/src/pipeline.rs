//! Manifest-driven batch runs: seed → fuse → CRF → write → score.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densecrf::{crf_seed, CrfParams, DEFAULT_SEED_CONFIDENCE};
use crate::error::{Error, Result};
use crate::guides::{
    foreground_components, guide_g0, guide_g1, guide_g2, read_g1_scores, CrfRegionLabeler,
    G1ScoresFile, G2Options, GuideResult, GuideStats, DEFAULT_AREA_FRACTION,
};
use crate::maskcore::{
    ensure_same_dims, normalize_scores, read_label_mask, read_rgb_image, read_saliency,
    read_score_map, write_label_mask, ImageLabels, LabelMask, RgbImage,
};
use crate::metrics::{
    confusion_with_ignore, miou, quality_from_confusion, ConfusionMatrix, GuideQuality, IouReport,
};
use crate::regions::Connectivity;
use crate::seeder::{extract_seeds, SeederConfig, DEFAULT_TAU};

/// Caps the worker pool when set.
pub const THREADS_ENV: &str = "GUIDESEG_THREADS";

/// One line of a JSON Lines manifest. Relative paths are resolved against
/// the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image: PathBuf,
    pub heatmap: PathBuf,
    pub saliency: PathBuf,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
}

impl ManifestRecord {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.image, &mut self.heatmap, &mut self.saliency] {
            *p = base.join(&*p);
        }
        if let Some(gt) = &mut self.gt {
            *gt = base.join(&*gt);
        }
    }
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(start, format!("bad manifest record: {e}")))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::format(start, format!("duplicate record id {:?}", rec.id)));
        }
        rec.resolve(base);
        records.push(rec);
    }
    Ok(records)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io(e).in_file(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base).map_err(|e| e.in_file(path))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    SeedsOnly,
    G0,
    G1,
    #[default]
    G2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrfStage {
    /// Smooth the seeds before fusion.
    Seed,
    /// Smooth the fused guide.
    Postproc,
}

fn default_tau() -> f32 {
    DEFAULT_TAU
}

fn default_area_fraction() -> f64 {
    DEFAULT_AREA_FRACTION
}

fn default_confidence() -> f64 {
    DEFAULT_SEED_CONFIDENCE
}

/// Run settings; the TOML config file deserializes straight into this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_tau")]
    pub tau: f32,
    /// `v1` or `v2`; ignored when `crf` is given.
    #[serde(default)]
    pub crf_preset: Option<String>,
    #[serde(default)]
    pub crf: Option<CrfParams>,
    #[serde(default)]
    pub crf_stages: Vec<CrfStage>,
    #[serde(default = "default_confidence")]
    pub seed_confidence: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub connectivity: Connectivity,
    #[serde(default = "default_area_fraction")]
    pub area_fraction: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub g1_scores: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::default(),
            tau: DEFAULT_TAU,
            crf_preset: None,
            crf: None,
            crf_stages: Vec::new(),
            seed_confidence: DEFAULT_SEED_CONFIDENCE,
            rng_seed: 0,
            connectivity: Connectivity::default(),
            area_fraction: DEFAULT_AREA_FRACTION,
            output_dir: None,
            g1_scores: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start as u64);
            Error::format(offset, format!("bad config: {}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Io(e).in_file(path))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| e.in_file(path))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.output_dir, &mut cfg.g1_scores].into_iter().flatten() {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    pub fn crf_params(&self) -> Result<CrfParams> {
        match (&self.crf, &self.crf_preset) {
            (Some(p), _) => Ok(*p),
            (None, Some(name)) => CrfParams::preset(name),
            (None, None) => Ok(CrfParams::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        SeederConfig {
            tau: self.tau,
            restrict_to_image_labels: true,
        }
        .validate()?;
        self.crf_params()?.validate()?;
        if !(0.0..=1.0).contains(&self.area_fraction) {
            return Err(Error::Usage(format!(
                "area_fraction {} outside [0, 1]",
                self.area_fraction
            )));
        }
        if !(self.seed_confidence > 0.5 && self.seed_confidence < 1.0) {
            return Err(Error::Usage(format!(
                "seed_confidence {} outside (0.5, 1)",
                self.seed_confidence
            )));
        }
        if self.strategy == Strategy::G1 && self.g1_scores.is_none() {
            return Err(Error::Usage("strategy g1 requires g1_scores".into()));
        }
        Ok(())
    }

    fn uses(&self, stage: CrfStage) -> bool {
        self.crf_stages.contains(&stage)
    }
}

/// Everything `run_image` needs beyond the record itself, loaded once.
#[derive(Clone, Debug)]
pub struct Runner {
    cfg: RunConfig,
    crf: CrfParams,
    g1: Option<G1ScoresFile>,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let g1 = match (&cfg.strategy, &cfg.g1_scores) {
            (Strategy::G1, Some(path)) => Some(read_g1_scores(path)?),
            _ => None,
        };
        Ok(Self {
            crf: cfg.crf_params()?,
            cfg,
            g1,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Guide for one record. `index` is the record's manifest position and
    /// keys the G0 random stream. Writes `<output_dir>/<id>.png` when an
    /// output directory is configured.
    pub fn run_image(&self, record: &ManifestRecord, index: usize) -> Result<GuideResult> {
        self.run_image_inner(record, index)
            .map(|(guide, _)| guide)
            .map_err(|e| e.in_record(record.id.clone()))
    }

    /// Also returns the class count taken from the heatmap.
    fn run_image_inner(&self, record: &ManifestRecord, index: usize) -> Result<(GuideResult, usize)> {
        let cfg = &self.cfg;
        let scores = read_score_map(&record.heatmap)?;
        let scores = normalize_scores(&scores).map_err(|e| e.in_file(&record.heatmap))?;
        let labels = ImageLabels::new(record.labels.iter().copied());
        labels.validate(scores.channels())?;

        let mut image: Option<RgbImage> = None;
        let load_image = |image: &mut Option<RgbImage>| -> Result<RgbImage> {
            if image.is_none() {
                let img = read_rgb_image(&record.image)?;
                ensure_same_dims(&scores, &img)?;
                *image = Some(img);
            }
            Ok(image.clone().unwrap())
        };

        let seeder = SeederConfig {
            tau: cfg.tau,
            restrict_to_image_labels: true,
        };
        let mut seeds = extract_seeds(&scores, &labels, &seeder)?;
        if cfg.uses(CrfStage::Seed) {
            let img = load_image(&mut image)?;
            seeds = crf_seed(&seeds, &img, &self.crf, cfg.seed_confidence)?;
        }

        let saliency = || -> Result<_> {
            let s = read_saliency(&record.saliency)?;
            ensure_same_dims(&scores, &s)?;
            Ok(s)
        };
        let mut guide = match cfg.strategy {
            Strategy::SeedsOnly => GuideResult::new(seeds),
            Strategy::G0 => guide_g0(&saliency()?, &labels, cfg.rng_seed, index as u64)?,
            Strategy::G1 => {
                let fg = foreground_components(&saliency()?, cfg.connectivity, cfg.area_fraction)?;
                let table = self.g1.as_ref().expect("loaded in Runner::new");
                let scores = table.get(&record.id).ok_or_else(|| {
                    Error::Data(format!("no G1 scores for image {:?}", record.id))
                })?;
                guide_g1(&fg, &labels, scores)?
            }
            Strategy::G2 => {
                let img = load_image(&mut image)?;
                let opts = G2Options {
                    connectivity: cfg.connectivity,
                    area_fraction: cfg.area_fraction,
                };
                let labeler = CrfRegionLabeler {
                    params: self.crf,
                    confidence: cfg.seed_confidence,
                };
                guide_g2(&seeds, &saliency()?, &img, &labeler, &opts)?
            }
        };
        if cfg.uses(CrfStage::Postproc) {
            let img = load_image(&mut image)?;
            guide = GuideResult::new(crf_seed(&guide.mask, &img, &self.crf, cfg.seed_confidence)?);
        }

        if let Some(dir) = &cfg.output_dir {
            fs::create_dir_all(dir).map_err(|e| Error::Io(e).in_file(dir))?;
            write_label_mask(&guide.mask, dir.join(format!("{}.png", record.id)))?;
        }
        Ok((guide, scores.channels()))
    }

    fn score(&self, record: &ManifestRecord, guide: &LabelMask, num_classes: usize) -> Result<Option<ConfusionMatrix>> {
        let Some(path) = &record.gt else {
            return Ok(None);
        };
        let gt = read_label_mask(path, num_classes)?;
        confusion_with_ignore(&gt, guide, num_classes)
            .map(Some)
            .map_err(|e| e.in_file(path))
    }

    fn process(&self, record: &ManifestRecord, index: usize) -> Result<RecordOutcome> {
        let (guide, num_classes) = self
            .run_image_inner(record, index)
            .map_err(|e| e.in_record(record.id.clone()))?;
        let confusion = self
            .score(record, &guide.mask, num_classes)
            .map_err(|e| e.in_record(record.id.clone()))?;
        Ok(RecordOutcome {
            stats: guide.stats,
            quality: confusion.as_ref().map(quality_from_confusion),
            confusion,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordOutcome {
    pub stats: GuideStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quality: Option<GuideQuality>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RecordReport {
    Ok {
        id: String,
        #[serde(flatten)]
        outcome: RecordOutcome,
    },
    Error {
        id: String,
        error: String,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Totals {
    pub confusion: Option<ConfusionMatrix>,
    pub guide_quality: Option<GuideQuality>,
    pub iou: Option<IouReport>,
}

/// Batch summary; records appear in manifest order.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub processed: usize,
    pub failed: usize,
    pub records: Vec<RecordReport>,
    pub totals: Totals,
    /// Pixel totals of every successful guide.
    pub stats: BTreeMap<String, usize>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker count; `None` reads `GUIDESEG_THREADS`, falling back to the
    /// number of available cores.
    pub threads: Option<usize>,
    /// Fail on the first (in manifest order) failing record instead of
    /// recording it and moving on.
    pub strict: bool,
}

pub fn worker_count(explicit: Option<usize>) -> Result<usize> {
    if let Some(n) = explicit {
        return if n == 0 {
            Err(Error::Usage("worker count must be at least 1".into()))
        } else {
            Ok(n)
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn run_manifest(records: &[ManifestRecord], cfg: &RunConfig, opts: &RunOptions) -> Result<RunReport> {
    let runner = Runner::new(cfg.clone())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(opts.threads)?)
        .build()
        .map_err(|e| Error::Resource(format!("cannot start worker pool: {e}")))?;

    // under --strict, records after the earliest known failure are skipped;
    // earlier ones still run so the reported failure is the first in order
    let first_failure = AtomicUsize::new(usize::MAX);
    let outcomes: Vec<Option<Result<RecordOutcome>>> = pool.install(|| {
        records
            .par_iter()
            .enumerate()
            .map(|(i, rec)| {
                if opts.strict && i > first_failure.load(Ordering::Acquire) {
                    return None;
                }
                let out = runner.process(rec, i);
                if out.is_err() {
                    first_failure.fetch_min(i, Ordering::AcqRel);
                }
                Some(out)
            })
            .collect()
    });

    let mut report = RunReport::default();
    let mut total: Option<ConfusionMatrix> = None;
    for (rec, outcome) in records.iter().zip(outcomes) {
        let Some(outcome) = outcome else { continue };
        match outcome {
            Ok(outcome) => {
                report.processed += 1;
                *report.stats.entry("background".into()).or_default() += outcome.stats.background;
                *report.stats.entry("ignore".into()).or_default() += outcome.stats.ignore;
                for (c, n) in &outcome.stats.classes {
                    *report.stats.entry(c.to_string()).or_default() += n;
                }
                if let Some(cm) = &outcome.confusion {
                    match &mut total {
                        Some(t) => t.merge(cm).map_err(|e| e.in_record(rec.id.clone()))?,
                        None => total = Some(cm.clone()),
                    }
                }
                report.records.push(RecordReport::Ok {
                    id: rec.id.clone(),
                    outcome,
                });
            }
            Err(e) if opts.strict => return Err(e),
            Err(e) => {
                report.failed += 1;
                report.records.push(RecordReport::Error {
                    id: rec.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    if let Some(cm) = total {
        report.totals.guide_quality = Some(quality_from_confusion(&cm));
        report.totals.iou = miou(&cm).ok();
        report.totals.confusion = Some(cm);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let text = "{\"id\":\"a\",\"image\":\"a.png\",\"heatmap\":\"a.sgsm\",\"saliency\":\"a.sal\",\"labels\":[1]}\n\n";
        let recs = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].image, PathBuf::from("/data/a.png"));
        assert_eq!(recs[0].gt, None);
    }

    #[test]
    fn manifest_errors_carry_offsets() {
        let line = "{\"id\":\"a\",\"image\":\"a\",\"heatmap\":\"a\",\"saliency\":\"a\",\"labels\":[]}\n";
        let dup = format!("{line}{line}");
        match parse_manifest(&dup, Path::new("")).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, line.len() as u64),
            e => panic!("{e:?}"),
        }
        assert!(matches!(
            parse_manifest("{nope\n", Path::new("")),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.crf_params().unwrap(), CrfParams::v2());
        let cfg = RunConfig::from_toml("strategy = \"seeds-only\"\ncrf_preset = \"v1\"\ncrf_stages = [\"seed\"]").unwrap();
        assert_eq!(cfg.strategy, Strategy::SeedsOnly);
        assert_eq!(cfg.crf_params().unwrap(), CrfParams::v1());
        assert!(RunConfig::from_toml("strategy = \"g1\"").is_err());
        assert!(RunConfig::from_toml("tau = 1.5").is_err());
        assert!(RunConfig::from_toml("crf_preset = \"v9\"").is_err());
        assert!(matches!(
            RunConfig::from_toml("bogus = 1"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn explicit_worker_count_wins() {
        assert_eq!(worker_count(Some(3)).unwrap(), 3);
        assert!(worker_count(Some(0)).is_err());
    }

    #[test]
    fn empty_manifest_gives_empty_report() {
        let report = run_manifest(&[], &RunConfig::default(), &RunOptions::default()).unwrap();
        assert_eq!(report.processed, 0);
        assert_eq!(report.failed, 0);
        assert!(report.records.is_empty());
    }
}
