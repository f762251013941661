//! `guideseg` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use guideseg::densecrf::{crf_postproc, crf_seed, CrfParams, DEFAULT_SEED_CONFIDENCE};
use guideseg::fixtures::{write_fixture_set, FixtureSetSpec, SceneSpec};
use guideseg::guides::{
    foreground_components, guide_g0, guide_g1, guide_g2, read_g1_scores, CrfRegionLabeler,
    G2Options, DEFAULT_AREA_FRACTION,
};
use guideseg::maskcore::{
    normalize_scores, read_label_mask, read_rgb_image, read_saliency, read_score_map,
    write_binary_mask, write_label_mask, write_rgb_image, ImageLabels, MAX_CLASSES,
};
use guideseg::metrics::{
    confusion_with_ignore, default_taus, miou, precision_at_recall, quality_from_confusion,
    ConfusionMatrix, PrAccumulator, PrSweep, BG_TARGET_RECALL, FG_TARGET_RECALL,
};
use guideseg::pipeline::{read_manifest, run_manifest, RecordReport, RunConfig, RunOptions};
use guideseg::regions::Connectivity;
use guideseg::seeder::{extract_seeds, SeederConfig, DEFAULT_TAU};
use guideseg::{Error, Result};

#[derive(Parser)]
#[command(name = "guideseg", version, about = "Guide labels for weakly supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Threshold a class heatmap into a seed mask.
    Seed(SeedArgs),
    /// Combine seeds and saliency into a guide mask.
    Fuse(FuseArgs),
    /// Dense-CRF refinement.
    Crf {
        #[command(subcommand)]
        stage: CrfCommand,
    },
    /// Write each foreground component as a mask and a masked image.
    ExportComponents(ExportArgs),
    /// Score guide masks against ground truth.
    Eval(EvalArgs),
    /// Precision/recall of seeds over a threshold sweep.
    Prcurve(SweepArgs),
    /// Mean precision of seeds at the fixed recall targets.
    Mp(SweepArgs),
    /// Process a manifest end to end.
    Run(RunArgs),
    /// Synthetic datasets.
    Fixtures {
        #[command(subcommand)]
        action: FixturesCommand,
    },
}

fn parse_connectivity(s: &str) -> std::result::Result<Connectivity, String> {
    let v: u8 = s.parse().map_err(|_| format!("{s:?} is not 4 or 8"))?;
    Connectivity::try_from(v)
}

#[derive(Args)]
struct RegionArgs {
    /// Pixel connectivity of components (4 or 8).
    #[arg(long, default_value = "8", value_parser = parse_connectivity)]
    connectivity: Connectivity,
    /// Components smaller than this fraction of the image are dropped.
    #[arg(long, default_value_t = DEFAULT_AREA_FRACTION)]
    area_fraction: f64,
}

#[derive(Args)]
struct SeedArgs {
    /// Class heatmap (SGSM).
    #[arg(long)]
    heatmap: PathBuf,
    /// Classes present in the image, e.g. `3,15`.
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<u8>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f32,
    /// Let every channel compete, not just the image's labels.
    #[arg(long)]
    all_channels: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FuseStrategy {
    G0,
    G1,
    G2,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long, value_enum)]
    strategy: FuseStrategy,
    /// Seed mask (label PNG); G2 only.
    #[arg(long, required_if_eq("strategy", "g2"))]
    seeds: Option<PathBuf>,
    /// Saliency map: SGSM probabilities or a binary PNG.
    #[arg(long)]
    saliency: PathBuf,
    /// RGB image; G2 only.
    #[arg(long, required_if_eq("strategy", "g2"))]
    image: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<u8>,
    /// Classifier scores per component (JSON keyed by image id); G1 only.
    #[arg(long, required_if_eq("strategy", "g1"))]
    g1_scores: Option<PathBuf>,
    /// Image id to look up in the G1 scores.
    #[arg(long, required_if_eq("strategy", "g1"))]
    id: Option<String>,
    /// G0 random seed and stream.
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    #[arg(long, default_value_t = 0)]
    stream: u64,
    /// CRF for regions with several seed classes.
    #[command(flatten)]
    crf: CrfArgs,
    #[command(flatten)]
    region: RegionArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrfArgs {
    /// Kernel parameters: v1 or v2.
    #[arg(long, default_value = "v2")]
    preset: String,
    /// Truncated kernels; needed above 128×128 pixels.
    #[arg(long)]
    approx: bool,
}

impl CrfArgs {
    fn params(&self) -> Result<CrfParams> {
        Ok(CrfParams {
            approximate: self.approx,
            ..CrfParams::preset(&self.preset)?
        })
    }
}

#[derive(Subcommand)]
enum CrfCommand {
    /// Smooth a seed mask; ignore pixels stay ignore.
    Seed {
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        crf: CrfArgs,
        #[arg(long, default_value_t = DEFAULT_SEED_CONFIDENCE)]
        confidence: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a probability map (SGSM, channel = label) into a label mask.
    Postproc {
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        crf: CrfArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    saliency: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output file prefix.
    #[arg(long)]
    id: String,
    #[command(flatten)]
    region: RegionArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest whose records carry ground truth.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<id>.png` guide masks.
    #[arg(long)]
    guides: PathBuf,
    /// Foreground classes, not counting background.
    #[arg(long)]
    num_classes: usize,
    /// Per-record CSV instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Number of threshold intervals between 1 and 0.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// TOML run configuration; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop at the first failing record.
    #[arg(long)]
    strict: bool,
    /// Worker count (default: GUIDESEG_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum FixturesCommand {
    /// Write a synthetic dataset with a manifest and G1 scores.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        blobs: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f32,
        /// Let blobs overlap.
        #[arg(long)]
        overlap: bool,
    },
}

enum Outcome {
    Done,
    /// Some records failed; the rest completed.
    Partial,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("guideseg: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            // an over-limit exact CRF is fixed by a flag, so it counts as usage
            let usage = e.is_usage_or_format() || matches!(e.root(), Error::Resource(_));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Seed(a) => seed(a),
        Command::Fuse(a) => fuse(a),
        Command::Crf { stage } => crf(stage),
        Command::ExportComponents(a) => export_components(a),
        Command::Eval(a) => eval(a),
        Command::Prcurve(a) => prcurve(a),
        Command::Mp(a) => mean_precision(a),
        Command::Run(a) => return run(a),
        Command::Fixtures { action } => fixtures(action),
    }?;
    Ok(Outcome::Done)
}

fn seed(a: SeedArgs) -> Result<()> {
    let scores = normalize_scores(&read_score_map(&a.heatmap)?)?;
    let labels = ImageLabels::new(a.labels);
    labels.validate(scores.channels())?;
    let cfg = SeederConfig {
        tau: a.tau,
        restrict_to_image_labels: !a.all_channels,
    };
    write_label_mask(&extract_seeds(&scores, &labels, &cfg)?, &a.out)
}

fn fuse(a: FuseArgs) -> Result<()> {
    let labels = ImageLabels::new(a.labels);
    labels.validate(MAX_CLASSES)?;
    let saliency = read_saliency(&a.saliency)?;
    let guide = match a.strategy {
        FuseStrategy::G0 => guide_g0(&saliency, &labels, a.rng_seed, a.stream)?,
        FuseStrategy::G1 => {
            let (path, id) = (a.g1_scores.expect("required by clap"), a.id.expect("required by clap"));
            let table = read_g1_scores(&path)?;
            let scores = table
                .get(&id)
                .ok_or_else(|| Error::Usage(format!("no G1 scores for image {id:?} in {}", path.display())))?;
            let fg = foreground_components(&saliency, a.region.connectivity, a.region.area_fraction)?;
            guide_g1(&fg, &labels, scores)?
        }
        FuseStrategy::G2 => {
            let seeds = read_label_mask(a.seeds.expect("required by clap"), MAX_CLASSES)?;
            let image = read_rgb_image(a.image.expect("required by clap"))?;
            let labeler = CrfRegionLabeler::new(a.crf.params()?);
            let opts = G2Options {
                connectivity: a.region.connectivity,
                area_fraction: a.region.area_fraction,
            };
            guide_g2(&seeds, &saliency, &image, &labeler, &opts)?
        }
    };
    write_label_mask(&guide.mask, &a.out)
}

fn crf(stage: CrfCommand) -> Result<()> {
    match stage {
        CrfCommand::Seed { seeds, image, crf, confidence, out } => {
            let seeds = read_label_mask(&seeds, MAX_CLASSES)?;
            let image = read_rgb_image(&image)?;
            write_label_mask(&crf_seed(&seeds, &image, &crf.params()?, confidence)?, &out)
        }
        CrfCommand::Postproc { probs, image, crf, out } => {
            let probs = read_score_map(&probs)?;
            let image = read_rgb_image(&image)?;
            write_label_mask(&crf_postproc(&probs, &image, &crf.params()?)?, &out)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn export_components(a: ExportArgs) -> Result<()> {
    let saliency = read_saliency(&a.saliency)?;
    let image = read_rgb_image(&a.image)?;
    let fg = foreground_components(&saliency, a.region.connectivity, a.region.area_fraction)?;
    create_dir(&a.out)?;
    for rec in fg.records() {
        let mask = fg.component_mask(rec.id);
        write_rgb_image(&image.masked(&mask)?, a.out.join(format!("{}.c{}.png", a.id, rec.id)))?;
        write_binary_mask(&mask, a.out.join(format!("{}.c{}.mask.png", a.id, rec.id)))?;
    }
    println!("{}", json!({ "components": fg.len() }));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn eval(a: EvalArgs) -> Result<()> {
    let records = read_manifest(&a.manifest)?;
    let classes = a.num_classes;
    let mut total = ConfusionMatrix::new(classes);
    let mut rows = Vec::new();
    for rec in &records {
        let Some(gt_path) = &rec.gt else { continue };
        let gt = read_label_mask(gt_path, classes)?;
        let guide = read_label_mask(a.guides.join(format!("{}.png", rec.id)), classes)?;
        let cm = confusion_with_ignore(&gt, &guide, classes)?;
        total.merge(&cm)?;
        rows.push((rec.id.clone(), quality_from_confusion(&cm)));
    }
    let quality = quality_from_confusion(&total);
    if a.csv {
        let mut out = String::from("id,fg_precision,fg_recall,bg_precision,bg_recall\n");
        for (id, q) in rows.iter().map(|(id, q)| (id.as_str(), q)).chain([("total", &quality)]) {
            out.push_str(&format!(
                "{id},{},{},{},{}\n",
                fmt_opt(q.fg_precision),
                fmt_opt(q.fg_recall),
                fmt_opt(q.bg_precision),
                fmt_opt(q.bg_recall)
            ));
        }
        print!("{out}");
    } else {
        let per_record: Vec<_> = rows.iter().map(|(id, q)| json!({ "id": id, "quality": q })).collect();
        let iou = if total.total() > 0 { Some(miou(&total)?) } else { None };
        let report = json!({
            "evaluated": rows.len(),
            "records": per_record,
            "totals": { "confusion": total, "guide_quality": quality, "iou": iou },
        });
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    }
    Ok(())
}

fn sweep(manifest: &Path, steps: usize) -> Result<PrSweep> {
    let records = read_manifest(manifest)?;
    let taus = default_taus(steps);
    let mut acc: Option<PrAccumulator> = None;
    for rec in &records {
        let Some(gt_path) = &rec.gt else { continue };
        let scores = normalize_scores(&read_score_map(&rec.heatmap)?)?;
        let acc = match &mut acc {
            Some(acc) => acc,
            None => acc.insert(PrAccumulator::new(scores.channels(), &taus)?),
        };
        let gt = read_label_mask(gt_path, scores.channels())?;
        let labels = ImageLabels::new(rec.labels.iter().copied());
        acc.add(&scores, &labels, &gt)?;
    }
    let acc = acc.ok_or_else(|| Error::Usage("manifest has no records with ground truth".into()))?;
    acc.finish()
}

fn prcurve(a: SweepArgs) -> Result<()> {
    let sweep = sweep(&a.manifest, a.steps)?;
    if a.csv {
        print!("{}", sweep.to_csv());
    } else {
        println!("{}", serde_json::to_string_pretty(&sweep).expect("sweep serializes"));
    }
    Ok(())
}

fn mean_precision(a: SweepArgs) -> Result<()> {
    let sweep = sweep(&a.manifest, a.steps)?;
    let fg = precision_at_recall(&sweep.foreground, FG_TARGET_RECALL)?;
    let bg = precision_at_recall(&sweep.background, BG_TARGET_RECALL)?;
    let mp = sweep.mp()?;
    if a.csv {
        println!("fg_precision,bg_precision,mp\n{fg:.6},{bg:.6},{mp:.6}");
    } else {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "fg_precision": fg,
                "fg_recall_target": FG_TARGET_RECALL,
                "bg_precision": bg,
                "bg_recall_target": BG_TARGET_RECALL,
                "mp": mp,
            }))
            .expect("summary serializes")
        );
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<Outcome> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if a.out.is_some() {
        cfg.output_dir = a.out;
    }
    let records = read_manifest(&a.manifest)?;
    let report = match run_manifest(&records, &cfg, &RunOptions { threads: a.threads, strict: a.strict }) {
        Ok(report) => report,
        // --strict stops at the first failing record; that is still a
        // record failure whatever its cause
        Err(e @ Error::Record { .. }) => {
            eprintln!("guideseg: {e}");
            return Ok(Outcome::Partial);
        }
        Err(e) => return Err(e),
    };
    let text = report.to_json();
    match &a.report {
        Some(path) => fs::write(path, text + "\n")
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?,
        None => println!("{text}"),
    }
    for r in &report.records {
        if let RecordReport::Error { id, error } = r {
            eprintln!("guideseg: {id}: {error}");
        }
    }
    Ok(if report.failed > 0 { Outcome::Partial } else { Outcome::Done })
}

fn fixtures(action: FixturesCommand) -> Result<()> {
    match action {
        FixturesCommand::Generate { out, count, seed, height, width, classes, blobs, noise, overlap } => {
            let spec = FixtureSetSpec {
                count,
                seed,
                scene: SceneSpec {
                    height,
                    width,
                    num_classes: classes,
                    blob_count: blobs,
                    noise_amplitude: noise,
                    overlap,
                    ..SceneSpec::default()
                },
            };
            let manifest = write_fixture_set(&out, &spec)?;
            println!("{}", manifest.display());
            Ok(())
        }
    }
}
