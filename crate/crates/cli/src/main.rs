use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use splatsem::eval::{evaluate_object_selection, evaluate_semantic_3d, MetricReport, QueryGroundTruth, Timing};
use splatsem::injection::{Thresholds, SENTINEL};
use splatsem::pipeline::{
    distill_with, load_artifacts, persist, run_query, sha256_hex, Ablation, Artifacts, PipelineConfig,
    QueryOutput,
};
use splatsem::query::{edit_enlarge, edit_recolor, select_objects, SelectionMode};
use splatsem::rasterizer::render_alpha_mask;
use splatsem::scene_io::{
    encode_contributions, load_cameras, load_mask_png, load_queries, load_scene, load_views, parse_contributions,
    parse_u16_field, save_gray8_png, save_scene, QueryTask, SPCL_MAGIC, SPCW_MAGIC, SPIX_MAGIC,
};
use splatsem::synth::{build_scene, SceneSpec, SynthManifest};
use splatsem::{Error, Result};

#[derive(Parser)]
#[command(name = "splatsem", version, about = "Lift 2D mask semantics into Gaussian-splat scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Rasterize, inject, filter and cluster; persist the index and cluster fields.
    Distill(DistillArgs),
    /// Run a query file against distilled artifacts.
    Query(QueryArgs),
    /// Recolor or enlarge the Gaussians selected by one query.
    Edit(EditArgs),
    /// Score queries against ground truth.
    Eval(EvalArgs),
    /// Summarize a binary field or contribution dump.
    Dump(DumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Lerf,
    Scannet,
    Dl3dv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Argmax,
    Relative,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; the flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    thresholds: Option<Preset>,
    #[arg(long)]
    contrib: Option<f64>,
    #[arg(long)]
    noise: Option<u32>,
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    feat: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Relative selection ratio.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    binarize_alpha: Option<f64>,
    #[arg(long, env = "SPLATSEM_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    disable_filtering: bool,
    #[arg(long)]
    disable_semantic_gate: bool,
    #[arg(long)]
    disable_geometric_gate: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(p) = self.thresholds {
            c.thresholds = match p {
                Preset::Lerf => Thresholds::LERF,
                Preset::Scannet => Thresholds::SCANNET,
                Preset::Dl3dv => Thresholds::DL3DV,
            };
        }
        let t = &mut c.thresholds;
        t.contrib = self.contrib.unwrap_or(t.contrib);
        t.noise = self.noise.unwrap_or(t.noise);
        t.iou = self.iou.unwrap_or(t.iou);
        t.feat = self.feat.unwrap_or(t.feat);
        let rho = match (self.rho, c.selection_mode) {
            (Some(r), _) => r,
            (None, SelectionMode::Relative { rho }) => rho,
            (None, SelectionMode::Argmax) => 0.9,
        };
        c.selection_mode = match self.mode {
            Some(Mode::Argmax) => SelectionMode::Argmax,
            Some(Mode::Relative) => SelectionMode::Relative { rho },
            None => match c.selection_mode {
                SelectionMode::Relative { .. } => SelectionMode::Relative { rho },
                m => m,
            },
        };
        c.binarize_alpha = self.binarize_alpha.unwrap_or(c.binarize_alpha);
        if self.threads.is_some() {
            c.thread_count = self.threads;
        }
        c.ablation = Ablation {
            disable_filtering: c.ablation.disable_filtering || self.disable_filtering,
            disable_semantic_gate: c.ablation.disable_semantic_gate || self.disable_semantic_gate,
            disable_geometric_gate: c.ablation.disable_geometric_gate || self.disable_geometric_gate,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthPreset {
    /// 4 objects x 2,000 Gaussians, 8 views.
    Benchmark,
    /// Twin discs, a translucent cover and anchored spurious masks.
    Ablation,
    /// 100 objects x 1,000 Gaussians, 50 views at 960 x 540.
    Throughput,
    /// A grid built from --objects, --gaussians, --views and --noise.
    Grid,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "benchmark")]
    preset: SynthPreset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    objects: usize,
    #[arg(long, default_value_t = 2000)]
    gaussians: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

/// Input locations; each defaults to the synthetic layout under `--data`.
#[derive(Args, Clone)]
struct InputArgs {
    #[arg(long, default_value = ".")]
    data: PathBuf,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
}

impl InputArgs {
    fn scene(&self) -> PathBuf {
        self.scene.clone().unwrap_or_else(|| self.data.join("scene.ply"))
    }
    fn cameras(&self) -> PathBuf {
        self.cameras.clone().unwrap_or_else(|| self.data.join("cameras.json"))
    }
    fn masks(&self) -> PathBuf {
        self.masks.clone().unwrap_or_else(|| self.data.join("masks"))
    }
    fn features(&self) -> PathBuf {
        self.features.clone().unwrap_or_else(|| self.data.join("features.splf"))
    }
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Artifact directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write each view's contribution records as `contributions/<view_id>.spcw`.
    #[arg(long)]
    dump_contributions: bool,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    artifacts: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Write binarized selection masks as `<query>_<view_id>.png`; needs --data.
    #[arg(long)]
    render_dir: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    artifacts: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Name of the query entry that selects the Gaussians.
    #[arg(long)]
    query: String,
    #[command(flatten)]
    config: ConfigArgs,
    /// Target color as r,g,b in [0, 1].
    #[arg(long, value_delimiter = ',', conflicts_with = "enlarge")]
    recolor: Option<Vec<f64>>,
    #[arg(long)]
    enlarge: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = ".")]
    data: PathBuf,
    #[arg(long)]
    artifacts: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Per-view ground-truth label images `<view_id>.png`; label `i + 1`
    /// marks the object of query entry `i`. Defaults to `<data>/gt`.
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    /// Manifest giving per-Gaussian labels for segmentation queries.
    /// Defaults to `<data>/manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    /// An `SPIX`, `SPCL` or `SPCW` file.
    file: PathBuf,
    /// Include every value or record.
    #[arg(long)]
    values: bool,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            // A closed pipe (e.g. `| head`) is not an error for a report.
            let _ = writeln!(std::io::stdout(), "{text}");
            Ok(())
        }
    }
}

fn to_value(v: &impl serde::Serialize) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = match args.preset {
        SynthPreset::Benchmark => SceneSpec::benchmark(args.seed),
        SynthPreset::Ablation => SceneSpec::ablation(args.seed),
        SynthPreset::Throughput => SceneSpec::throughput(args.seed),
        SynthPreset::Grid => SceneSpec::grid(args.seed, args.objects, args.gaussians, args.views, args.noise),
    };
    let scene = build_scene(&spec)?;
    scene.write(&args.out)?;
    emit(
        &json!({
            "out": args.out,
            "seed": args.seed,
            "gaussians": scene.scene.len(),
            "views": scene.views.len(),
            "masks": scene.views.total_masks(),
            "objects": scene.manifest.objects.len(),
            "spurious_masks": scene.manifest.spurious_masks,
        }),
        None,
    )
}

fn distill(args: &DistillArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let input = &args.input;
    let scene = load_scene(input.scene())?;
    let views = load_views(input.cameras(), input.masks())?;
    let features = splatsem::scene_io::load_features(input.features())?;
    let mut hashes = vec![
        ("scene.ply".to_string(), hash_file(&input.scene())?),
        ("cameras.json".to_string(), hash_file(&input.cameras())?),
        ("features.splf".to_string(), hash_file(&input.features())?),
    ];
    for cam in &views.cameras {
        let name = format!("{}.png", cam.view_id);
        hashes.push((format!("masks/{name}"), hash_file(&input.masks().join(&name))?));
    }
    let dump_dir = args.out.join("contributions");
    if args.dump_contributions {
        fs::create_dir_all(&dump_dir).map_err(|e| Error::Io {
            path: dump_dir.clone(),
            source: e,
        })?;
    }
    let thresholds = config.effective_thresholds();
    let distillation = config.install(|| {
        distill_with(&scene, &views, &features, &thresholds, |v, stream| {
            if !args.dump_contributions {
                return Ok(());
            }
            let p = dump_dir.join(format!("{}.spcw", views.cameras[v].view_id));
            fs::write(&p, encode_contributions(&stream.to_dump())).map_err(|e| Error::Io { path: p, source: e })
        })
    })??;
    let report = persist(&args.out, &distillation, &config, views.len(), hashes)?;
    emit(&to_value(&report), None)
}

fn artifact_hashes(artifacts: &Artifacts) -> Value {
    to_value(&artifacts.report.hashes)
}

fn query(args: &QueryArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let artifacts = load_artifacts(&args.artifacts)?;
    let queries = load_queries(&args.queries, artifacts.table.dim())?;
    let output = config.install(|| run_query(&artifacts.table, &queries, &config))??;
    let mut report = json!({
        "config": to_value(&config),
        "hashes": {
            "artifacts": artifact_hashes(&artifacts),
            "queries": hash_file(&args.queries)?,
        },
        "cluster_count": artifacts.table.cluster_count(),
    });
    match output {
        QueryOutput::Selections(results) => {
            for r in results.iter().filter(|r| r.result.low_confidence) {
                eprintln!(
                    "warning: query '{}' is low-confidence (best similarity below 0.5)",
                    r.result.query_name
                );
            }
            if let Some(dir) = &args.render_dir {
                let data = args
                    .data
                    .as_ref()
                    .ok_or_else(|| Error::Validation("--render-dir needs --data".into()))?;
                let scene = load_scene(data.join("scene.ply"))?;
                let cameras = load_cameras(data.join("cameras.json"))?;
                fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                for r in &results {
                    for cam in &cameras {
                        let alpha = render_alpha_mask(&scene, cam, r.result.selected_gaussians.iter().copied());
                        let px: Vec<u8> = alpha
                            .iter()
                            .map(|&a| if a as f64 >= config.binarize_alpha { 255 } else { 0 })
                            .collect();
                        let p = dir.join(format!("{}_{}.png", r.result.query_name, cam.view_id));
                        save_gray8_png(cam.width, cam.height, &px, p)?;
                    }
                }
            }
            report["task"] = json!("object_selection");
            report["results"] = to_value(&results);
        }
        QueryOutput::Labels { field, wall_time_us } => {
            let mut counts = vec![0usize; queries.entries.len()];
            let mut unlabeled = 0usize;
            for &l in &field.labels {
                match counts.get_mut(l as usize) {
                    Some(c) if l != SENTINEL => *c += 1,
                    _ => unlabeled += 1,
                }
            }
            report["task"] = json!("semantic_segmentation");
            report["cluster_labels"] = to_value(&field.cluster_labels);
            report["label_names"] = to_value(&queries.entries.iter().map(|e| &e.name).collect::<Vec<_>>());
            report["gaussians_per_label"] = to_value(&counts);
            report["unlabeled_gaussians"] = json!(unlabeled);
            report["wall_time_us"] = json!(wall_time_us);
        }
    }
    emit(&report, args.out.as_deref())
}

fn edit(args: &EditArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let artifacts = load_artifacts(&args.artifacts)?;
    let queries = load_queries(&args.queries, artifacts.table.dim())?.normalized(artifacts.table.dim())?;
    let entry = queries
        .entries
        .iter()
        .find(|e| e.name == args.query)
        .ok_or_else(|| Error::Validation(format!("no query named '{}'", args.query)))?;
    let selection = select_objects(&artifacts.table, &entry.name, &entry.embedding, config.selection_mode)?;
    let scene = load_scene(&args.scene)?;
    let edited = match (&args.recolor, args.enlarge) {
        (Some(rgb), None) if rgb.len() == 3 => edit_recolor(&scene, &selection.selected_gaussians, [rgb[0], rgb[1], rgb[2]])?,
        (None, Some(f)) => edit_enlarge(&scene, &selection.selected_gaussians, f)?,
        (Some(_), None) => return Err(Error::Validation("--recolor takes r,g,b".into())),
        _ => return Err(Error::Validation("give exactly one of --recolor or --enlarge".into())),
    };
    save_scene(&edited, &args.out)?;
    emit(
        &json!({
            "config": to_value(&config),
            "query": entry.name,
            "selected_clusters": selection.selected_clusters,
            "edited_gaussians": selection.selected_gaussians.len(),
            "out": args.out,
            "hash": hash_file(&args.out)?,
        }),
        None,
    )
}

fn eval(args: &EvalArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let artifacts = load_artifacts(&args.artifacts)?;
    let queries = load_queries(&args.queries, artifacts.table.dim())?;
    let output = config.install(|| run_query(&artifacts.table, &queries, &config))??;
    let distill_seconds = artifacts.report.timing.total;
    let report = match output {
        QueryOutput::Selections(results) => {
            let cameras = load_cameras(args.data.join("cameras.json"))?;
            let scene = load_scene(args.data.join("scene.ply"))?;
            let gt_dir = args.gt_dir.clone().unwrap_or_else(|| args.data.join("gt"));
            let labels = cameras
                .iter()
                .map(|c| load_mask_png(gt_dir.join(format!("{}.png", c.view_id)), c.view_id))
                .collect::<Result<Vec<_>>>()?;
            let gt: Vec<QueryGroundTruth> = queries
                .entries
                .iter()
                .enumerate()
                .map(|(i, q)| QueryGroundTruth {
                    name: q.name.clone(),
                    views: labels
                        .iter()
                        .map(|m| (m.view_id, m.pixels.iter().map(|&v| v as usize == i + 1).collect()))
                        .collect(),
                })
                .collect();
            let selections: Vec<_> = results.iter().map(|r| r.result.clone()).collect();
            let per_query = config.install(|| {
                evaluate_object_selection(&scene, &cameras, &selections, &gt, config.binarize_alpha)
            })??;
            let mut report = MetricReport::from_queries(per_query);
            report.timing = Timing {
                distill_seconds,
                per_query_us: results.iter().map(|r| r.wall_time_us).collect(),
            };
            report
        }
        QueryOutput::Labels { field, wall_time_us } => {
            let path = args.manifest.clone().unwrap_or_else(|| args.data.join("manifest.json"));
            let manifest: SynthManifest = serde_json::from_slice(&read(&path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let gt = manifest.label_of_gaussian(field.labels.len());
            let classes = evaluate_semantic_3d(&field.labels, &gt, queries.entries.len())?;
            let mut report = MetricReport::from_queries(Vec::new()).with_classes(classes);
            report.timing = Timing {
                distill_seconds,
                per_query_us: vec![wall_time_us],
            };
            report
        }
    };
    emit(
        &json!({
            "config": to_value(&config),
            "task": match queries.task {
                QueryTask::ObjectSelection => "object_selection",
                QueryTask::SemanticSegmentation => "semantic_segmentation",
            },
            "hashes": {
                "artifacts": artifact_hashes(&artifacts),
                "queries": hash_file(&args.queries)?,
            },
            "metrics": to_value(&report),
        }),
        args.out.as_deref(),
    )
}

fn dump(args: &DumpArgs) -> Result<()> {
    let bytes = read(&args.file)?;
    let magic: &[u8] = bytes.get(..4).unwrap_or(&[]);
    let value = if magic == SPCW_MAGIC {
        let records = parse_contributions(&bytes)?;
        let mut pixels: Vec<u32> = records.iter().map(|r| r.pixel).collect();
        pixels.dedup();
        let mut v = json!({
            "magic": "SPCW",
            "bytes": bytes.len(),
            "records": records.len(),
            "pixels_with_records": pixels.len(),
        });
        if args.values {
            v["values"] = records
                .iter()
                .map(|r| json!([r.pixel, r.gaussian, r.weight]))
                .collect();
        }
        v
    } else {
        let (name, m) = if magic == SPIX_MAGIC {
            ("SPIX", SPIX_MAGIC)
        } else if magic == SPCL_MAGIC {
            ("SPCL", SPCL_MAGIC)
        } else {
            return Err(Error::Format(format!("{}: unknown magic", args.file.display())));
        };
        let values = parse_u16_field(m, &bytes)?;
        let assigned = values.iter().filter(|&&v| v != SENTINEL).count();
        let mut distinct: Vec<u16> = values.iter().copied().filter(|&v| v != SENTINEL).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let mut v = json!({
            "magic": name,
            "bytes": bytes.len(),
            "entries": values.len(),
            "bytes_per_entry": (bytes.len() - 8) as f64 / values.len().max(1) as f64,
            "assigned": assigned,
            "distinct_values": distinct.len(),
        });
        if args.values {
            v["values"] = to_value(&values);
        }
        v
    };
    emit(&value, None)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Distill(a) => distill(a),
        Command::Query(a) => query(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::Dump(a) => dump(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
