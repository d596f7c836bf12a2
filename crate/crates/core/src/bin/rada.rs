use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rada::checkpoint::Checkpoint;
use rada::data::{read_manifest_entry, synth_corpus, SynthConfig, WarpKind};
use rada::eval::{mma_curve, mutual_nn, visualize, MatchFilter};
use rada::geometry::{WarpModel, WarpSpec};
use rada::io::{load_image, read_features, read_homography, save_image, write_features, write_homography, write_pfm};
use rada::keypoint::DetectorConfig;
use rada::model::Rada;
use rada::train::{TrainConfig, Trainer};
use rada::{Error, Result};

/// Cross-domain keypoint extraction, matching, evaluation, and training.
#[derive(Parser)]
#[command(name = "rada", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect keypoints and write boosted descriptors to a feature file.
    Extract(ExtractArgs),
    /// Mutual nearest-neighbour matching between two feature files.
    Match(MatchArgs),
    /// Mean matching accuracy against a ground-truth warp.
    Mma(MmaArgs),
    /// Draw matches side by side, colored by reprojection error.
    Visualize(VisualizeArgs),
    /// Train from a TOML config, optionally resuming a checkpoint.
    Train(TrainArgs),
    /// Write a synthetic cross-domain pair corpus to disk.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = DetectorConfig::EVAL_TOP_K)]
    top_k: usize,
    #[arg(long)]
    score_threshold: Option<f64>,
    /// Write the raw sampled descriptors instead of boosted ones.
    #[arg(long)]
    no_booster: bool,
}

#[derive(Args)]
struct FilterArgs {
    /// Ratio test on descriptor distances (0.9 when given without a value).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.9", conflicts_with = "distance")]
    ratio: Option<f64>,
    /// Distance test on unit descriptors (0.7 when given without a value).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.7")]
    distance: Option<f64>,
}

impl FilterArgs {
    fn filter(&self) -> MatchFilter {
        match (self.ratio, self.distance) {
            (Some(r), _) => MatchFilter::Ratio(r),
            (_, Some(d)) => MatchFilter::Distance(d),
            _ => MatchFilter::None,
        }
    }
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    #[command(flatten)]
    filter: FilterArgs,
    /// Write `index_a index_b similarity` lines here.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TruthArgs {
    /// 3×3 homography from A to B, nine numbers row-major.
    #[arg(long, conflicts_with = "manifest")]
    homography: Option<PathBuf>,
    /// Pose+depth manifest supplying the ground truth.
    #[arg(long, requires = "entry")]
    manifest: Option<PathBuf>,
    /// Entry of `--manifest`, counting non-comment lines from 0.
    #[arg(long)]
    entry: Option<usize>,
}

impl TruthArgs {
    fn spec(&self, a_size: (usize, usize), b_size: (usize, usize)) -> Result<Option<WarpSpec>> {
        if let Some(h) = &self.homography {
            return WarpSpec::homography(read_homography(h)?, a_size, b_size).map(Some);
        }
        match (&self.manifest, self.entry) {
            (Some(m), Some(i)) => Ok(Some(read_manifest_entry(m, i)?.spec)),
            _ => Ok(None),
        }
    }
}

#[derive(Args)]
struct MmaArgs {
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    #[command(flatten)]
    truth: TruthArgs,
    /// `height,width` of image A; needed for homography bounds.
    #[arg(long, value_parser = parse_size)]
    size_a: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_size)]
    size_b: Option<(usize, usize)>,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    image_a: PathBuf,
    #[arg(long)]
    image_b: PathBuf,
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    #[command(flatten)]
    truth: TruthArgs,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with TrainConfig keys; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the reduced-resolution smoke configuration.
    #[arg(long, conflicts_with = "config")]
    smoke: bool,
    /// Directory for `metrics.txt`, checkpoints, and the resolved config.
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Resume even if the checkpoint was written under another config.
    #[arg(long, requires = "resume")]
    override_fingerprint: bool,
    #[arg(long)]
    learning_rate_peak: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    accumulation_batches: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_des: Option<f64>,
    #[arg(long)]
    lambda_mmd: Option<f64>,
    #[arg(long)]
    keypoint_radius: Option<usize>,
    #[arg(long)]
    th_gt: Option<f64>,
    #[arg(long)]
    train_score_threshold: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    no_booster: bool,
    #[arg(long)]
    no_domain_adaptation: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 480)]
    size: usize,
    #[arg(long, value_enum, default_value = "mixed")]
    warp: WarpArg,
    #[arg(long)]
    no_domain_shift: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum WarpArg {
    Homography,
    PoseDepth,
    Mixed,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(',').ok_or("expected HEIGHT,WIDTH")?;
    Ok((h.trim().parse().map_err(|_| "bad height")?, w.trim().parse().map_err(|_| "bad width")?))
}

fn load_model(path: &Path) -> Result<(TrainConfig, Rada, rada::ParamStore)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg: TrainConfig = serde_json::from_value(ckpt.config).map_err(|e| Error::Checkpoint(format!("bad stored config: {e}")))?;
    let model = Rada::new(cfg.model);
    let mut params = model.init(0);
    params.load_from(&ckpt.params)?;
    Ok((cfg, model, params))
}

fn extract(a: ExtractArgs) -> Result<()> {
    let (cfg, mut model, params) = load_model(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let mut det = cfg.detector();
    det.top_k = a.top_k;
    if let Some(t) = a.score_threshold {
        det.score_threshold = t;
    }
    if a.no_booster {
        model.config.use_booster = false;
    }
    let fs = model.extract(&params, &image, &det)?;
    write_features(&a.output, &fs)?;
    println!("keypoints={} dim={} size={}x{}", fs.len(), fs.dim(), image.height(), image.width());
    Ok(())
}

fn run_match(a: MatchArgs) -> Result<()> {
    let fa = read_features(&a.features_a)?;
    let fb = read_features(&a.features_b)?;
    let m = mutual_nn(&fa.descriptors, &fb.descriptors, a.filter.filter())?;
    if let Some(out) = &a.output {
        let mut s = String::new();
        for x in &m.matches {
            writeln!(s, "{} {} {}", x.a, x.b, x.similarity).unwrap();
        }
        fs::write(out, s).map_err(|e| Error::io(out, e))?;
    }
    println!("features {} / {}, matches {}", fa.len(), fb.len(), m.len());
    println!("num_features_a={}\nnum_features_b={}\nnum_matches={}", fa.len(), fb.len(), m.len());
    Ok(())
}

fn bounding_size(fs: &rada::keypoint::FeatureSet) -> (usize, usize) {
    let h = fs.keypoints.iter().map(|k| k.v).fold(0.0, f64::max);
    let w = fs.keypoints.iter().map(|k| k.u).fold(0.0, f64::max);
    (h.ceil() as usize + 1, w.ceil() as usize + 1)
}

fn mma(a: MmaArgs) -> Result<()> {
    let fa = read_features(&a.features_a)?;
    let fb = read_features(&a.features_b)?;
    let size_a = a.size_a.unwrap_or_else(|| bounding_size(&fa));
    let size_b = a.size_b.unwrap_or_else(|| bounding_size(&fb));
    let spec = a
        .truth
        .spec(size_a, size_b)?
        .ok_or_else(|| Error::InvalidArgument("mma needs --homography or --manifest with --entry".into()))?;
    let m = mutual_nn(&fa.descriptors, &fb.descriptors, a.filter.filter())?;
    let curve = mma_curve(&fa, &fb, &m, &spec);
    print!("{}", curve.table());
    for l in curve.machine_lines() {
        println!("{l}");
    }
    Ok(())
}

fn run_visualize(a: VisualizeArgs) -> Result<()> {
    let ia = load_image(&a.image_a)?;
    let ib = load_image(&a.image_b)?;
    let fa = read_features(&a.features_a)?;
    let fb = read_features(&a.features_b)?;
    let spec = a.truth.spec((ia.height(), ia.width()), (ib.height(), ib.width()))?;
    let m = mutual_nn(&fa.descriptors, &fb.descriptors, a.filter.filter())?;
    let (canvas, counts) = visualize(&ia, &ib, &fa, &fb, &m, spec.as_ref());
    canvas.save(&a.output)?;
    println!("matches {}: {} correct, {} wrong, {} without ground truth", m.len(), counts.green, counts.red, counts.blue);
    println!("green={}\nred={}\nblue={}", counts.green, counts.red, counts.blue);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match (&a.config, a.smoke) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, true) => TrainConfig::smoke(),
        (None, false) => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident).+ = $value:expr) => {
            if let Some(v) = $value {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(learning_rate_peak = a.learning_rate_peak);
    set!(warmup_steps = a.warmup_steps);
    set!(batch_size = a.batch_size);
    set!(accumulation_batches = a.accumulation_batches);
    set!(max_steps = a.max_steps);
    set!(seed = a.seed);
    set!(t_des = a.t_des);
    set!(lambda_mmd = a.lambda_mmd);
    set!(keypoint_radius = a.keypoint_radius);
    set!(th_gt = a.th_gt);
    set!(train_score_threshold = a.train_score_threshold);
    set!(checkpoint_every = a.checkpoint_every);
    set!(data.pairs = a.pairs);
    set!(data.synth.size = a.size);
    set!(model.dim = a.dim);
    if a.manifest.is_some() {
        cfg.data.manifest = a.manifest.clone();
    }
    cfg.model.use_booster &= !a.no_booster;
    cfg.model.use_domain_adaptation &= !a.no_domain_adaptation;
    cfg.validate()?;

    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let cfg_path = a.out_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let corpus = cfg.data.load()?;
    println!("training on {} pairs, fingerprint {}", corpus.len(), &cfg.fingerprint()[..16]);
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(cfg, corpus, Checkpoint::load(p)?, a.override_fingerprint)?,
        None => Trainer::new(cfg, corpus)?,
    };
    let metrics_path = a.out_dir.join("metrics.txt");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let summaries = trainer.run(&mut metrics, Some(&a.out_dir))?;
    let final_path = a.out_dir.join("final.ckpt");
    trainer.checkpoint().save(&final_path)?;
    println!("step {}  checkpoint {}", trainer.step, final_path.display());
    if let Some(last) = summaries.last() {
        for (name, v) in &last.losses {
            println!("  {name:<6} {v:>12.6}");
        }
        for l in last.metric_lines() {
            println!("{l}");
        }
    }
    println!("starved_pairs={}", trainer.starved_pairs);
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        size: a.size,
        warp: match a.warp {
            WarpArg::Homography => WarpKind::Homography,
            WarpArg::PoseDepth => WarpKind::PoseDepth,
            WarpArg::Mixed => WarpKind::Mixed,
        },
        domain_shift: !a.no_domain_shift,
        ..SynthConfig::default()
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut manifest = String::from("# source view then target view: image K(9) R(9) t(3) depth\n");
    let corpus = synth_corpus(a.seed, a.pairs, &cfg);
    let (mut homographies, mut poses) = (0, 0);
    for (i, s) in corpus.iter().enumerate() {
        let stem = format!("pair_{i:04}");
        save_image(&a.out_dir.join(format!("{stem}_a.png")), &s.image_a)?;
        save_image(&a.out_dir.join(format!("{stem}_b.png")), &s.image_b)?;
        match &s.spec.model {
            WarpModel::Homography(h) => {
                write_homography(&a.out_dir.join(format!("{stem}_H.txt")), h)?;
                homographies += 1;
            }
            WarpModel::PoseDepth { camera_a, camera_b, pose } => {
                let mut line = String::new();
                let views = [
                    ("a", camera_a, nalgebra::Matrix3::identity(), nalgebra::Vector3::zeros()),
                    ("b", camera_b, pose.rotation, pose.translation),
                ];
                for (tag, cam, r, t) in views {
                    let depth = cam.depth.as_ref().expect("pose pairs carry depth");
                    write_pfm(&a.out_dir.join(format!("{stem}_{tag}.pfm")), depth)?;
                    write!(line, "{stem}_{tag}.png").unwrap();
                    for v in cam.intrinsics.transpose().iter().chain(r.transpose().iter()).chain(t.iter()) {
                        write!(line, " {v}").unwrap();
                    }
                    write!(line, " {stem}_{tag}.pfm ").unwrap();
                }
                manifest.push_str(line.trim_end());
                manifest.push('\n');
                poses += 1;
            }
        }
    }
    let mpath = a.out_dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    println!("wrote {} pairs ({homographies} homography, {poses} pose+depth) to {}", corpus.len(), a.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(a) => extract(a),
        Command::Match(a) => run_match(a),
        Command::Mma(a) => mma(a),
        Command::Visualize(a) => run_visualize(a),
        Command::Train(a) => train(a),
        Command::SynthData(a) => synth_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
