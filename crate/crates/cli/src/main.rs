use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vpc_core::config::PipelineConfig;
use vpc_core::eval::read_labels;
use vpc_core::partition::PatchKind;
use vpc_core::pipeline::{
    collect_train_patches, evaluate, format_report, load_banks, memorize_patches, ratio_dir, read_feature_file,
    save_banks, score_clips, scores_csv, write_file, write_synth,
};
use vpc_core::scoring::{read_scores_csv, FusionParams};
use vpc_core::synthetic::{generate, SynthSpec};
use vpc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vpc", version, about = "Memory-bank video anomaly detection over precomputed features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build spatial, temporal and high-level banks from training clips.
    Memorize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Build one bank set per ratio under `<out>/ratio-<r>/` instead of
        /// using the config's ratio.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Score test clips against banks and write per-frame scores as CSV.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        banks: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score against `<banks>/ratio-<r>/` for each ratio, writing
        /// `<out stem>.ratio-<r>.csv`.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Frame-level AUROC of the fused score and each single-signal ablation.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Supplies local weights and smoothing for the ablation rows.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic dataset: train.vpcf, test.vpcf and labels.json.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|()| run(cli.command)) {
        eprintln!("vpc: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("VPC_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Validation(format!("VPC_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Validation(format!("cannot size the worker pool: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Memorize { config, train, out, ratios } => cmd_memorize(&config, &train, &out, ratios),
        Command::Score { config, banks, test, out, ratios } => cmd_score(&config, &banks, &test, &out, ratios),
        Command::Eval { scores, labels, config, json } => cmd_eval(&scores, &labels, config.as_deref(), json),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
    }
}

fn cmd_memorize(config: &Path, train: &Path, out: &Path, ratios: Option<Vec<f64>>) -> Result<()> {
    let cfg = PipelineConfig::load(config)?;
    let clips = read_feature_file(train)?;
    let patches = collect_train_patches::<f32>(&clips, &cfg)?;
    let sweep = ratios.is_some();
    for ratio in ratios.unwrap_or_else(|| vec![cfg.ratio]) {
        let cfg = PipelineConfig { ratio, ..cfg.clone() };
        cfg.validate()?;
        let dir = if sweep { ratio_dir(out, ratio) } else { out.to_path_buf() };
        let (banks, manifest) = memorize_patches(&patches, &cfg, ratio)?;
        save_banks(&banks, &manifest, &dir)?;
        println!("{} (ratio {ratio}, {:.3} s)", dir.display(), manifest.wall_seconds);
        for e in &manifest.banks {
            println!("  {:<9} {:>8} patches -> {:>8} items (dim {})", e.kind.name(), e.source_patches, e.items, e.dim);
        }
    }
    Ok(())
}

fn ratio_csv(out: &Path, ratio: f64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scores".into());
    out.with_file_name(format!("{stem}.ratio-{ratio}.csv"))
}

fn cmd_score(config: &Path, banks_dir: &Path, test: &Path, out: &Path, ratios: Option<Vec<f64>>) -> Result<()> {
    let cfg = PipelineConfig::load(config)?;
    let clips = read_feature_file(test)?;
    let jobs: Vec<(PathBuf, PathBuf)> = match ratios {
        Some(rs) => rs.into_iter().map(|r| (ratio_dir(banks_dir, r), ratio_csv(out, r))).collect(),
        None => vec![(banks_dir.to_path_buf(), out.to_path_buf())],
    };
    if jobs.len() > 1 {
        println!("banks\tspatial\ttemporal\thighlevel\twindows\tseconds\twindows_per_s");
    }
    for (dir, csv) in jobs {
        let banks = load_banks::<f32>(&dir, &cfg)?;
        let run = score_clips(&clips, &banks, &cfg)?;
        write_file(&csv, &scores_csv(&run.series)?)?;
        let sizes: Vec<String> = PatchKind::ALL.iter().map(|&k| banks.get(k).len().to_string()).collect();
        println!(
            "{}\t{}\t{}\t{:.3}\t{:.1}",
            dir.display(),
            sizes.join("\t"),
            run.raw.len(),
            run.seconds,
            run.windows_per_second()
        );
    }
    Ok(())
}

fn cmd_eval(scores: &Path, labels: &Path, config: Option<&Path>, json: bool) -> Result<()> {
    let cfg = match config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let rows = read_scores_csv(BufReader::new(File::open(scores)?))?;
    let truth = read_labels(BufReader::new(File::open(labels)?))?;
    let report = evaluate(&rows, &truth, &FusionParams::from(&cfg))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", format_report(&report));
    }
    Ok(())
}

fn cmd_synth(spec: &Path, out: &Path) -> Result<()> {
    let spec = SynthSpec::from_json(&std::fs::read_to_string(spec)?)?;
    let ds = generate(&spec)?;
    write_synth(&ds, out)?;
    println!(
        "{}: {} train clips, {} test clips, {} labelled videos",
        out.display(),
        ds.train.len(),
        ds.test.len(),
        ds.labels.len()
    );
    Ok(())
}
