use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use viplo::bench::{bench_moa, BenchConfig};
use viplo::evaluation::{evaluate_map, DEFAULT_IOU_THRESHOLD};
use viplo::formats::{read_detections, read_json, read_poses, read_ppm, to_canonical_json, write_json, TripletFile};
use viplo::hoi_head::VerbMask;
use viplo::model::{Model, ModelConfig};
use viplo::pipeline::{infer, InferOptions};
use viplo::selftest::{run_selftest, SelftestOptions};
use viplo::weights::{load_weights, save_weights};
use viplo::{demo, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

#[derive(Parser)]
#[command(name = "viplo", version, about = "Pose-conditioned HOI detection with overlap-area ViT masks")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect HOI triplets in one image.
    Infer(InferArgs),
    /// Score predictions against ground truth (mAP).
    Eval(EvalArgs),
    /// Time the region-masked final layer against per-region recomputation.
    BenchMoa(BenchArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
    /// Write a seeded weight file.
    InitWeights(InitArgs),
    /// Write the bundled demo fixture (image, detections, poses, weights).
    Demo(DemoArgs),
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    /// Binary PPM (P6) image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 2.8)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    #[arg(long, default_value_t = 0.05)]
    score_thresh: f64,
    /// Drop triplets whose final score is below this.
    #[arg(long, default_value_t = 0.0)]
    output_thresh: f64,
    /// JSON file `{"allowed": [[object_class, verb], ...]}`.
    #[arg(long)]
    verb_mask: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Patch counts L (perfect squares).
    #[arg(long, value_delimiter = ',', default_values_t = [441, 1764])]
    patches: Vec<usize>,
    /// Region counts M.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 8, 16])]
    regions: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Swap in a deliberately wrong overlap-area routine.
    #[arg(long)]
    inject_fault: bool,
    /// Also check that this weight file loads.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Base,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "tiny")]
    preset: Preset,
    /// JSON model configuration; overrides `--preset`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

fn emit(text: &str, out: Option<&Path>) -> viplo::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run_infer(a: &InferArgs) -> viplo::Result<()> {
    let model: Model<f32> = load_weights(&a.weights)?;
    let detections = read_detections(&a.detections)?;
    let poses = read_poses(&a.poses)?;
    let image = read_ppm(&a.image)?;
    let verb_mask = a.verb_mask.as_deref().map(read_json::<VerbMask>).transpose()?;
    let opts = InferOptions {
        lambda: a.lambda,
        nms_iou: a.nms_iou,
        score_thresh: a.score_thresh,
        output_thresh: a.output_thresh,
        verb_mask,
    };
    if !(opts.lambda > 0.0) {
        return Err(Error::Config(format!("--lambda must be positive, got {}", opts.lambda)));
    }
    let preds = infer(&model, &image, &detections, &poses, &opts)?;
    emit(&to_canonical_json(&preds)?, a.out.as_deref())
}

fn run_eval(a: &EvalArgs) -> viplo::Result<()> {
    let preds: TripletFile = read_json(&a.predictions)?;
    preds.validate(true)?;
    let gt: TripletFile = read_json(&a.ground_truth)?;
    gt.validate(false)?;
    let report = evaluate_map(&preds, &gt, a.iou)?;
    let mut text = String::new();
    for c in &report.categories {
        text.push_str(&format!(
            "object {:>4} verb {:>4}  AP {:.6}  (gt {}, predictions {})\n",
            c.object_class, c.verb, c.ap, c.num_gt, c.num_predictions
        ));
    }
    text.push_str(&format!("mAP {:.6} over {} categories\n", report.map, report.categories.len()));
    print!("{text}");
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn run_bench(a: &BenchArgs) -> viplo::Result<()> {
    let cfg = BenchConfig {
        patch_counts: a.patches.clone(),
        region_counts: a.regions.clone(),
        repetitions: a.reps,
        dim: a.dim,
        heads: a.heads,
        seed: a.seed,
    };
    let report = bench_moa(&cfg)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn run_init(a: &InitArgs) -> viplo::Result<()> {
    let config = match &a.config {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => match a.preset {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Base => ModelConfig::base(),
        },
    };
    save_weights(&Model::<f32>::random(config, a.seed)?, &a.out)
}

fn run_demo(a: &DemoArgs) -> viplo::Result<()> {
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("image.ppm"), demo::image_ppm())?;
    write_json(&a.out.join("detections.json"), &demo::detections())?;
    write_json(&a.out.join("poses.json"), &demo::poses())?;
    save_weights(&demo::model::<f32>()?, &a.out.join("weights.bin"))
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_INPUT)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    }
    let result = match &cli.command {
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::BenchMoa(a) => run_bench(a),
        Command::InitWeights(a) => run_init(a),
        Command::Demo(a) => run_demo(a),
        Command::Selftest(a) => {
            if let Some(w) = &a.weights {
                if let Err(e) = load_weights::<f32>(w) {
                    return fail(&e);
                }
            }
            match run_selftest(SelftestOptions { seed: a.seed, inject_fault: a.inject_fault }) {
                Ok(checks) => {
                    for c in &checks {
                        println!("{}", c.line());
                    }
                    let failed = checks.iter().filter(|c| !c.passed).count();
                    println!("{} of {} checks passed", checks.len() - failed, checks.len());
                    if failed > 0 {
                        return ExitCode::from(EXIT_SELFTEST);
                    }
                    Ok(())
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_SELFTEST);
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
