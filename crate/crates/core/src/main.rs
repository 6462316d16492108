use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fogsight::dehaze::{
    dehaze_aod, forward_aodx, load_params, rasterize_rois, save_params, train_dehazer,
};
use fogsight::detect::{load_detections, save_detections, Detection, Detector, FileDetector, Strength, ToyDetector};
use fogsight::harness::config::{load_config, RunConfig};
use fogsight::harness::import::{default_cityscapes_classes, import_cityscapes, import_voc, CityscapesImport, VocImport};
use fogsight::harness::{
    emit_report, load_manifest, materialize_dataset, read_report, run_dehaze_eval, run_detect_eval,
    standard_variants, training_samples, write_report, EvalContext, MetricReport, ReportFormat, Split,
};
use fogsight::imaging::{load_image, save_image};
use fogsight::pipeline::{run_pipeline, PipelineMode};

#[derive(Parser)]
#[command(name = "fogsight", version, about = "Detection-guided dehazing toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = load_config(self.config.as_deref())?.with_seed(self.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrengthArg {
    Weak,
    Strong,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Aod,
    Aodx,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Global,
    Gaze,
}

impl From<ModeArg> for PipelineMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => PipelineMode::BaselineDetectOnly,
            ModeArg::Global => PipelineMode::GlobalDehaze,
            ModeArg::Gaze => PipelineMode::GazeDehaze,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic train/val/test set (and the OOD test set).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dehazer on a manifest's train split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the per-epoch loss history (JSON).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Dehaze one PNG.
    Dehaze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "aodx")]
        variant: VariantArg,
        /// ROI source for aodx; defaults to the weak toy detector.
        #[arg(long)]
        rois: Option<PathBuf>,
    },
    /// Run a toy detector on one PNG and write a detection file.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "strong")]
        strength: StrengthArg,
        #[arg(long)]
        image_id: Option<String>,
    },
    /// Run the full pipeline on one PNG and store the trace.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        image_id: Option<String>,
        #[command(flatten)]
        detectors: DetectorArgs,
    },
    /// Evaluate dehazing and detection over a manifest's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Out-of-distribution manifest evaluated under the foggy condition.
        #[arg(long)]
        ood: Option<PathBuf>,
        /// Defaults to `runs/seed-<seed>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        detectors: DetectorArgs,
    },
    /// Re-emit a structured report as text or JSON.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Convert an external dataset layout into a manifest.
    Import {
        #[command(flatten)]
        common: Common,
        #[command(subcommand)]
        source: ImportSource,
    },
}

#[derive(Args, Clone)]
struct DetectorArgs {
    /// Directory of `<image_id>.jsonl` files used as the preliminary detector.
    #[arg(long)]
    pre_detections: Option<PathBuf>,
    /// Directory of `<image_id>.jsonl` files used as the final detector.
    #[arg(long)]
    final_detections: Option<PathBuf>,
}

impl DetectorArgs {
    fn build(&self, cfg: &RunConfig) -> (Box<dyn Detector>, Box<dyn Detector>) {
        let pick = |dir: &Option<PathBuf>, strength| -> Box<dyn Detector> {
            match dir {
                Some(d) => Box::new(FileDetector { dir: d.clone() }),
                None => Box::new(ToyDetector {
                    cfg: cfg.detector.clone(),
                    strength,
                }),
            }
        };
        (
            pick(&self.pre_detections, Strength::Weak),
            pick(&self.final_detections, Strength::Strong),
        )
    }
}

#[derive(Subcommand)]
enum ImportSource {
    /// Pascal-VOC XML annotations (e.g. RTTS).
    Voc {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        clear_images: Option<PathBuf>,
        #[arg(long, default_value = "png")]
        extension: String,
        #[command(flatten)]
        splits: SplitLists,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cityscapes polygons with foggy renderings.
    Cityscapes {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "0.02")]
        beta: String,
        #[command(flatten)]
        splits: SplitLists,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct SplitLists {
    #[arg(long)]
    train_list: Option<PathBuf>,
    #[arg(long)]
    val_list: Option<PathBuf>,
    #[arg(long)]
    test_list: Option<PathBuf>,
}

impl SplitLists {
    fn pairs(&self) -> Result<Vec<(Split, PathBuf)>> {
        let v: Vec<(Split, PathBuf)> = [
            (Split::Train, &self.train_list),
            (Split::Val, &self.val_list),
            (Split::Test, &self.test_list),
        ]
        .into_iter()
        .filter_map(|(s, p)| p.clone().map(|p| (s, p)))
        .collect();
        if v.is_empty() {
            bail!("at least one of --train-list, --val-list, --test-list is required");
        }
        Ok(v)
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn stem_id(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

#[derive(Serialize)]
struct Timing {
    stage: &'static str,
    seconds: f64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Synth { common, out } => {
            let cfg = common.load()?;
            let d = &cfg.dataset;
            let m = materialize_dataset(
                &cfg.scene,
                [(Split::Train, d.train), (Split::Val, d.val), (Split::Test, d.test)],
                cfg.seed,
                &out,
            )?;
            println!("wrote {} records to {}", m.records.len(), out.join("manifest.jsonl").display());
            if d.ood_test > 0 {
                let ood_dir = out.join("ood");
                let m = materialize_dataset(
                    &cfg.ood_scene,
                    [(Split::Train, 0), (Split::Val, 0), (Split::Test, d.ood_test)],
                    cfg.seed ^ 0x00d0_00d0,
                    &ood_dir,
                )?;
                println!("wrote {} records to {}", m.records.len(), ood_dir.join("manifest.jsonl").display());
            }
        }
        Cmd::Train { common, manifest, out, history } => {
            let cfg = common.load()?.effective();
            let m = load_manifest(&manifest)?;
            let (margin, feather) = (cfg.pipeline.roi_margin, cfg.pipeline.roi_feather);
            let train = training_samples(&m, Split::Train, margin, feather)?;
            let val = training_samples(&m, Split::Val, margin, feather)?;
            let start = Instant::now();
            let (params, hist) = train_dehazer(&train, &val, &cfg.train)?;
            save_params(&params, &out)?;
            if let Some(h) = history {
                write_json(&hist, &h)?;
            }
            let init = hist.initial_val_loss();
            let last = hist.final_val_loss();
            println!(
                "trained on {} images in {:.1}s; val loss {:?} -> {:?}",
                train.len(),
                start.elapsed().as_secs_f64(),
                init,
                last
            );
        }
        Cmd::Dehaze { common, params, input, output, variant, rois } => {
            let cfg = common.load()?;
            let p = load_params(&params)?;
            let img = load_image(&input)?;
            let out = match variant {
                VariantArg::Aod => dehaze_aod(&p, &img)?,
                VariantArg::Aodx => {
                    let dets = match rois {
                        Some(f) => load_detections(f)?,
                        None => ToyDetector {
                            cfg: cfg.detector.clone(),
                            strength: Strength::Weak,
                        }
                        .detect(&img, &stem_id(&input))?,
                    };
                    let kept: Vec<Detection> = dets
                        .into_iter()
                        .filter(|d| d.confidence >= cfg.pipeline.pre_conf_threshold)
                        .collect();
                    let pc = &cfg.pipeline;
                    let roi = rasterize_rois(&kept, img.height(), img.width(), pc.roi_margin, pc.roi_feather)?;
                    forward_aodx(&p, &img, &roi, pc.lambda_min)?
                }
            };
            save_image(&out, &output)?;
        }
        Cmd::Detect { common, input, output, strength, image_id } => {
            let cfg = common.load()?;
            let img = load_image(&input)?;
            let strength = match strength {
                StrengthArg::Weak => Strength::Weak,
                StrengthArg::Strong => Strength::Strong,
            };
            let id = image_id.unwrap_or_else(|| stem_id(&input));
            let dets = ToyDetector {
                cfg: cfg.detector.clone(),
                strength,
            }
            .detect(&img, &id)?;
            save_detections(&id, &dets, &output)?;
            println!("{} detection(s)", dets.len());
        }
        Cmd::Run { common, params, input, out_dir, mode, image_id, detectors } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.pipeline.mode = m.into();
            }
            let p = load_params(&params)?;
            let img = load_image(&input)?;
            let id = image_id.unwrap_or_else(|| stem_id(&input));
            let (pre, fin) = detectors.build(&cfg);
            let trace = run_pipeline(&img, &id, &p, pre.as_ref(), fin.as_ref(), &cfg.pipeline)?;
            create_dir(&out_dir)?;
            let mut line = serde_json::to_string(&trace.record())?;
            line.push('\n');
            let trace_path = out_dir.join("trace.jsonl");
            std::fs::write(&trace_path, line).with_context(|| format!("writing {}", trace_path.display()))?;
            if let Some(roi) = &trace.roi {
                save_image(&roi.to_image(), out_dir.join(format!("{id}_roi.png")))?;
            }
            if let Some(d) = &trace.dehazed {
                save_image(d, out_dir.join(format!("{id}_dehazed.png")))?;
            }
            save_detections(&id, &trace.final_detections, out_dir.join(format!("{id}.jsonl")))?;
            write_json(&trace.timings, &out_dir.join("timings.json"))?;
            println!("{} final detection(s)", trace.final_detections.len());
        }
        Cmd::Eval { common, manifest, params, ood, out_dir, detectors } => {
            let cfg = common.load()?;
            let out_dir = out_dir.unwrap_or_else(|| PathBuf::from(format!("runs/seed-{}", cfg.seed)));
            create_dir(&out_dir)?;
            let m = load_manifest(&manifest)?;
            let ood = ood.map(load_manifest).transpose()?;
            let p = load_params(&params)?;
            let (pre, fin) = detectors.build(&cfg);
            let ctx = EvalContext {
                preliminary: pre.as_ref(),
                final_detector: fin.as_ref(),
                pipeline: &cfg.pipeline,
                matching: &cfg.matching,
                ssim: &cfg.ssim,
                eval: &cfg.eval,
            };
            let mut report = MetricReport::new(cfg.seed, cfg.hash());
            let t0 = Instant::now();
            report.rows.extend(run_dehaze_eval(&m, &standard_variants(&p), &ctx)?);
            let t1 = Instant::now();
            report.rows.extend(run_detect_eval(&m, ood.as_ref(), &p, &ctx)?);
            let t2 = Instant::now();
            write_report(&report, ReportFormat::Structured, out_dir.join("report.json"))?;
            write_report(&report, ReportFormat::Text, out_dir.join("report.txt"))?;
            let timings = [
                Timing {
                    stage: "dehaze_eval",
                    seconds: (t1 - t0).as_secs_f64(),
                },
                Timing {
                    stage: "detect_eval",
                    seconds: (t2 - t1).as_secs_f64(),
                },
            ];
            write_json(&timings, &out_dir.join("timings.json"))?;
            print!("{}", emit_report(&report, ReportFormat::Text));
        }
        Cmd::Report { common: _, input, format, output } => {
            let r = read_report(&input)?;
            let text = emit_report(
                &r,
                match format {
                    FormatArg::Text => ReportFormat::Text,
                    FormatArg::Json => ReportFormat::Structured,
                },
            );
            match output {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Cmd::Import { common: _, source } => {
            let (m, out) = match source {
                ImportSource::Voc { annotations, images, clear_images, extension, splits, out } => {
                    let cfg = VocImport {
                        annotations,
                        images,
                        clear_images,
                        extension,
                        splits: splits.pairs()?,
                    };
                    (import_voc(&cfg, out.parent().unwrap_or(Path::new(".")))?, out)
                }
                ImportSource::Cityscapes { root, beta, splits, out } => {
                    let cfg = CityscapesImport {
                        root,
                        beta,
                        classes: default_cityscapes_classes(),
                        splits: splits.pairs()?,
                    };
                    (import_cityscapes(&cfg, out.parent().unwrap_or(Path::new(".")))?, out)
                }
            };
            m.save(&out)?;
            println!("wrote {} records to {}", m.records.len(), out.display());
        }
    }
    Ok(())
}
