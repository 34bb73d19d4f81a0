//! Command-line entry point: feature extraction, accuracy benchmarks,
//! pipeline timing, and the client/server verification commands.
//!
//! Exit codes: 0 = success (for `verify`/`register`: positive outcome),
//! 1 = negative verification/registration outcome, 2 = any error,
//! including usage errors.

use std::error::Error;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::descriptor::{write_feature_cache, DescriptorConfig};
use crate::imageio;
use crate::matcher::{run_experiment, SplitSpec};
use crate::netproto::{self, DEFAULT_PORT};
use crate::pipeline::{time_pipeline, PipelineReport};

type CmdResult = Result<i32, Box<dyn Error>>;

#[derive(Parser, Debug)]
#[command(
    name = "elghp",
    version,
    about = "Gradient hexa pattern face descriptors: extraction, matching \
             benchmarks, pipeline timing, and a features-only verification service"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct DescriptorArgs {
    /// Angular multiplier: 1 = base angles (0°,45°,90°,135°), 2 = extended
    /// angles (0°,90°,180°,270°).
    #[arg(long, default_value_t = 2)]
    delta: u8,
    /// Square-ring radii, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    radii: Vec<usize>,
}

impl DescriptorArgs {
    fn build(&self) -> Result<DescriptorConfig, Box<dyn Error>> {
        Ok(DescriptorConfig::new(self.delta, self.radii.clone())?)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract features for every PGM in a directory into a cache file.
    Extract {
        /// Directory of .pgm images.
        images_dir: PathBuf,
        /// Feature cache output path.
        #[arg(long, default_value = "features.bin")]
        out: PathBuf,
        #[command(flatten)]
        descriptor: DescriptorArgs,
    },
    /// Run seeded random-split recognition-accuracy experiments.
    Bench {
        /// Directory of convention-named .pgm images (identity_index.pgm).
        images_dir: PathBuf,
        /// Test-set percentages, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "20,30,40,50,60")]
        splits: Vec<u32>,
        /// Repetitions per split percentage.
        #[arg(long, default_value_t = 10)]
        reps: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample test images within each identity instead of globally.
        #[arg(long)]
        stratified: bool,
        /// Write the accuracy CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        descriptor: DescriptorArgs,
    },
    /// Time the extraction/classification pipeline at several thread counts.
    Time {
        /// Directory of probe .pgm images.
        images_dir: PathBuf,
        /// Directory of gallery .pgm images.
        gallery_dir: PathBuf,
        /// Thread counts to benchmark, comma separated (1 or even numbers).
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        threads: Vec<usize>,
        /// Optional per-queue capacity bound.
        #[arg(long)]
        queue_capacity: Option<usize>,
        /// Write the timing CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        descriptor: DescriptorArgs,
    },
    /// Serve verification and registration over TCP.
    Serve {
        /// Directory of enrolled .pgm images; registrations are persisted
        /// here.
        gallery_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        addr: String,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[command(flatten)]
        descriptor: DescriptorArgs,
    },
    /// Verify a claimed identity against a running server (features-only).
    Verify {
        /// Claimed user id.
        id: String,
        /// Probe image files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        addr: String,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[command(flatten)]
        descriptor: DescriptorArgs,
    },
    /// Enroll a new identity on a running server (sends raw images).
    Register {
        /// New user id.
        id: String,
        /// Enrollment image files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        addr: String,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
    },
}

/// Parse arguments and execute; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return err.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            2
        }
    }
}

fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Extract { images_dir, out, descriptor } => {
            cmd_extract(&images_dir, &out, &descriptor.build()?)
        }
        Command::Bench { images_dir, splits, reps, seed, stratified, out, descriptor } => {
            cmd_bench(&images_dir, &splits, reps, seed, stratified, out.as_deref(), &descriptor.build()?)
        }
        Command::Time { images_dir, gallery_dir, threads, queue_capacity, out, descriptor } => {
            cmd_time(
                &images_dir,
                &gallery_dir,
                &threads,
                queue_capacity,
                out.as_deref(),
                &descriptor.build()?,
            )
        }
        Command::Serve { gallery_dir, addr, port, descriptor } => {
            cmd_serve(&gallery_dir, &addr, port, descriptor.build()?)
        }
        Command::Verify { id, files, addr, port, descriptor } => {
            cmd_verify(&endpoint(&addr, port), &id, &files, &descriptor.build()?)
        }
        Command::Register { id, files, addr, port } => {
            cmd_register(&endpoint(&addr, port), &id, &files)
        }
    }
}

fn endpoint(addr: &str, port: u16) -> String {
    format!("{addr}:{port}")
}

/// Paths of all `.pgm` files directly inside `dir`, sorted by name.
fn list_pgms(dir: &Path) -> Result<Vec<PathBuf>, Box<dyn Error>> {
    let entries =
        fs::read_dir(dir).map_err(|err| format!("cannot read {}: {err}", dir.display()))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("pgm")) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn file_name_string(path: &Path) -> Result<String, Box<dyn Error>> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| format!("non-UTF-8 file name: {}", path.display()).into())
}

/// Load every listed image in canonical form, keyed by file name.
fn load_images(paths: &[PathBuf]) -> Result<Vec<(String, imageio::GrayImage)>, Box<dyn Error>> {
    let mut images = Vec::with_capacity(paths.len());
    for path in paths {
        let name = file_name_string(path)?;
        let img = imageio::load_canonical(path)
            .map_err(|err| format!("{}: {err}", path.display()))?;
        images.push((name, img));
    }
    Ok(images)
}

fn emit(out: Option<&Path>, content: &str) -> Result<(), Box<dyn Error>> {
    match out {
        Some(path) => fs::write(path, content)
            .map_err(|err| format!("cannot write {}: {err}", path.display()).into()),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn cmd_extract(images_dir: &Path, out: &Path, cfg: &DescriptorConfig) -> CmdResult {
    let paths = list_pgms(images_dir)?;
    if paths.is_empty() {
        return Err(format!("no images in {}", images_dir.display()).into());
    }
    let mut records = Vec::with_capacity(paths.len());
    let mut failures = 0usize;
    for path in &paths {
        let name = file_name_string(path)?;
        match imageio::load_canonical(path) {
            Ok(img) => {
                let features = crate::descriptor::extract_features(&img, cfg)?;
                println!("{name}: {} counts", features.len());
                records.push((name, features));
            }
            Err(err) => {
                eprintln!("{name}: {err}");
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(format!("{failures} image(s) failed to load; cache not written").into());
    }
    let mut writer = BufWriter::new(File::create(out)?);
    write_feature_cache(&mut writer, &records)?;
    writer.flush()?;
    eprintln!("wrote {} records to {}", records.len(), out.display());
    Ok(0)
}

fn cmd_bench(
    images_dir: &Path,
    splits: &[u32],
    reps: u32,
    seed: u64,
    stratified: bool,
    out: Option<&Path>,
    cfg: &DescriptorConfig,
) -> CmdResult {
    if splits.is_empty() {
        return Err("at least one split percentage is required".into());
    }
    let paths = list_pgms(images_dir)?;
    if paths.is_empty() {
        return Err(format!("no images in {}", images_dir.display()).into());
    }
    let images = load_images(&paths)?;
    let mut csv = String::from("split,repetition,test_size,gallery_size,accuracy_percent\n");
    for &percent in splits {
        let spec = SplitSpec::new(percent, reps, seed)?.with_stratified(stratified);
        let report = run_experiment(&images, cfg, &spec)?;
        for (i, accuracy) in report.accuracies.iter().enumerate() {
            csv.push_str(&format!(
                "{percent},{},{},{},{accuracy}\n",
                i + 1,
                report.test_size,
                report.gallery_size
            ));
        }
        csv.push_str(&format!(
            "{percent},mean,{},{},{}\n",
            report.test_size, report.gallery_size, report.mean
        ));
        eprintln!("split {percent}: mean accuracy {}", report.mean);
    }
    emit(out, &csv)?;
    Ok(0)
}

fn cmd_time(
    images_dir: &Path,
    gallery_dir: &Path,
    threads: &[usize],
    queue_capacity: Option<usize>,
    out: Option<&Path>,
    cfg: &DescriptorConfig,
) -> CmdResult {
    if threads.is_empty() {
        return Err("at least one thread count is required".into());
    }
    let paths = list_pgms(images_dir)?;
    if paths.is_empty() {
        return Err(format!("no images in {}", images_dir.display()).into());
    }
    let images = load_images(&paths)?;
    let gallery = netproto::load_gallery(gallery_dir, cfg)?;
    if gallery.is_empty() {
        return Err(format!("no gallery images in {}", gallery_dir.display()).into());
    }
    let reports = time_pipeline(&images, &gallery, cfg, threads, queue_capacity)?;

    // The pipeline contract says results are thread-count independent;
    // refuse to emit timings that would hide a correctness bug.
    let key = |report: &PipelineReport| -> Vec<(String, String, u64)> {
        report
            .results
            .iter()
            .map(|r| (r.query.clone(), r.identity.clone(), r.distance))
            .collect()
    };
    let baseline = key(&reports[0]);
    for report in &reports[1..] {
        if key(report) != baseline {
            return Err(format!(
                "internal error: results at {} threads differ from {} threads",
                report.threads, reports[0].threads
            )
            .into());
        }
    }

    let mut csv =
        String::from("threads,wall_seconds,extract_seconds,classify_seconds,images,gallery_size\n");
    for report in &reports {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{}\n",
            report.threads,
            report.wall_seconds,
            report.extract_seconds,
            report.classify_seconds,
            images.len(),
            gallery.len()
        ));
        eprintln!(
            "threads {}: wall {:.3}s (extract {:.3}s, classify {:.3}s)",
            report.threads, report.wall_seconds, report.extract_seconds, report.classify_seconds
        );
    }
    emit(out, &csv)?;
    Ok(0)
}

fn cmd_serve(gallery_dir: &Path, addr: &str, port: u16, cfg: DescriptorConfig) -> CmdResult {
    let err = match netproto::serve(gallery_dir, cfg, &endpoint(addr, port)) {
        Ok(never) => match never {},
        Err(err) => err,
    };
    Err(err.into())
}

fn cmd_verify(addr: &str, id: &str, files: &[PathBuf], cfg: &DescriptorConfig) -> CmdResult {
    if netproto::client_verify(addr, id, files, cfg)? {
        println!("verified: {id}");
        Ok(0)
    } else {
        println!("not verified");
        Ok(1)
    }
}

fn cmd_register(addr: &str, id: &str, files: &[PathBuf]) -> CmdResult {
    if netproto::client_register(addr, id, files)? {
        println!("registered: {id}");
        Ok(0)
    } else {
        println!("registration rejected");
        Ok(1)
    }
}
