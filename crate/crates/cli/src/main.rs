use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use sp3_core::calibration::{collect, spectrum_report};
use sp3_core::checkpoint::Checkpoint;
use sp3_core::fusing::{size_report, FusedModel};
use sp3_core::model::Arch;
use sp3_core::pipeline::{self, RunConfig};
use sp3_core::projection::{group_pca, inject};
use sp3_core::report::{cross_check, dims_csv, layer_rows, sparsity_histogram, spectrum_csv};
use sp3_core::Error;

#[derive(Parser)]
#[command(
    name = "sp3",
    version,
    about = "PCA-projected structured pruning of toy transformers"
)]
struct Cli {
    /// key=value run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Target sparsity.
    #[arg(long, global = true)]
    t: Option<f64>,
    #[arg(long, global = true)]
    group_size: Option<usize>,
    #[arg(long, global = true)]
    arch: Option<Arch>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialized toy model.
    GenToy,
    /// Train a model checkpoint on the majority task.
    Train { input: PathBuf },
    /// Attach calibration features.
    Calibrate { input: PathBuf },
    /// Compute projections from the calibration features.
    Project { input: PathBuf },
    /// Train masks, binarize and finetune.
    Prune { input: PathBuf },
    /// Fold masks and projections into a compressed model.
    Fuse { input: PathBuf },
    /// Check projected and fused logits against their references.
    Verify {
        input: PathBuf,
        #[arg(long)]
        fused: Option<PathBuf>,
    },
    /// Per-layer dimension tables, sparsity bars and spectra.
    Report {
        input: PathBuf,
        #[arg(long)]
        fused: Option<PathBuf>,
    },
    /// Calibration cost and fused-model size and speed.
    Bench {
        input: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        #[arg(long, default_value_t = 20)]
        reps: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Contract(_) => 2,
        Error::Format { .. } | Error::Io(_) => 3,
        Error::Verification(_) => 5,
        Error::Numeric(_) | Error::Training(_) | Error::Sampling(_) | Error::Dimension { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} code={code} msg={msg}", e.kind());
            ExitCode::from(code)
        }
    }
}

fn threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("SP3_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("SP3_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("SP3_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

/// Run configuration from the file and flags, with the model shape and
/// seed taken from `ck` when a checkpoint is given.
fn run_config(cli: &Cli, ck: Option<&Checkpoint>) -> Result<RunConfig, Error> {
    let mut rc = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(ck) = ck {
        let c = &ck.model.config;
        rc.arch = c.arch;
        rc.n_layers = c.n_layers;
        rc.d_model = c.d_model;
        rc.n_heads = c.n_heads;
        rc.d_ff = c.d_ff;
        rc.vocab_size = c.vocab_size;
        rc.seq_len = c.max_seq_len;
        rc.seed = c.seed;
    }
    if let Some(a) = cli.arch {
        if ck.is_some_and(|ck| ck.model.config.arch != a) {
            return Err(Error::Config(format!("--arch {a} disagrees with the checkpoint")));
        }
        rc.arch = a;
    }
    if let Some(s) = cli.seed {
        rc.seed = s;
    }
    if let Some(t) = cli.t {
        rc.prune.target_sparsity = t;
    }
    if let Some(g) = cli.group_size {
        rc.group_size = g;
    }
    rc.validate()?;
    Ok(rc)
}

fn out_path(cli: &Cli) -> Result<&Path, Error> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out PATH".into()))
}

fn run(cli: &Cli) -> Result<(), Error> {
    threads()?;
    match &cli.command {
        Command::GenToy => {
            let rc = run_config(cli, None)?;
            let ck = pipeline::gen_toy(&rc)?;
            ck.write(out_path(cli)?)?;
            println!("params={}", ck.model.n_params());
        }
        Command::Train { input } => {
            let mut ck = Checkpoint::read(input)?;
            let rc = run_config(cli, Some(&ck))?;
            let out = out_path(cli)?;
            let r = pipeline::train(&rc, &mut ck)?;
            let (_, held) = rc.datasets()?;
            let acc = sp3_core::model::accuracy(&ck.model, sp3_core::model::EvalPlan::Plain, &held)?;
            ck.write(out)?;
            println!(
                "steps={} final_loss={:.6} held_out_accuracy={acc:.4}",
                r.losses.len(),
                r.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Calibrate { input } => {
            let mut ck = Checkpoint::read(input)?;
            let rc = run_config(cli, Some(&ck))?;
            let out = out_path(cli)?;
            pipeline::calibrate(&rc, &mut ck)?;
            ck.write(out)?;
            println!("tokens={}", rc.calib_tokens);
        }
        Command::Project { input } => {
            let mut ck = Checkpoint::read(input)?;
            let rc = run_config(cli, Some(&ck))?;
            let out = out_path(cli)?;
            pipeline::project(&rc, &mut ck)?;
            ck.write(out)?;
            let groups = ck.proj.as_ref().map_or(0, |p| p.n_groups());
            println!("groups={groups}");
        }
        Command::Prune { input } => {
            let mut ck = Checkpoint::read(input)?;
            let rc = run_config(cli, Some(&ck))?;
            let out = out_path(cli)?;
            let s = pipeline::prune(&rc, &mut ck)?;
            ck.write(out)?;
            println!(
                "target={} s_hat_trained={:.4} s_hat={:.4} dense_accuracy={:.4} pruned_accuracy={:.4} random_baseline_accuracy={:.4}",
                s.target, s.s_hat_trained, s.s_hat, s.dense_accuracy, s.pruned_accuracy, s.baseline_accuracy
            );
        }
        Command::Fuse { input } => {
            let ck = Checkpoint::read(input)?;
            let out = out_path(cli)?;
            let fused = pipeline::fuse_checkpoint(&ck)?;
            fused.write(out)?;
            println!(
                "prunable_params={} residual_matrices={}",
                fused.prunable_params(),
                fused.n_residual_matrices()
            );
        }
        Command::Verify { input, fused } => {
            let ck = Checkpoint::read(input)?;
            let rc = run_config(cli, Some(&ck))?;
            let fused = fused.as_deref().map(FusedModel::read).transpose()?;
            let v = pipeline::verify(&rc, &ck, fused.as_ref())?;
            let show = |d: Option<f64>| d.map_or("n/a".to_string(), |d| format!("{d:.3e}"));
            println!(
                "max_rel_dev_projection={} max_rel_dev_fused={} tolerance={:e}",
                show(v.projection),
                show(v.fused),
                pipeline::VERIFY_TOLERANCE
            );
        }
        Command::Report { input, fused } => report(cli, input, fused.as_deref())?,
        Command::Bench { input, fused, reps } => bench(cli, input, fused, *reps)?,
    }
    Ok(())
}

fn report(cli: &Cli, input: &Path, fused: Option<&Path>) -> Result<(), Error> {
    let ck = Checkpoint::read(input)?;
    let mut sections: Vec<(&str, String)> = Vec::new();
    if let Some(masks) = &ck.masks {
        let rows = layer_rows(masks)?;
        if let Some(f) = fused {
            cross_check(&rows, &FusedModel::read(f)?)?;
        }
        let groups = ck
            .proj
            .as_ref()
            .map_or_else(|| (0..ck.model.config.n_layers).collect(), |p| p.groups.clone());
        sections.push(("dims.csv", dims_csv(&rows)));
        sections.push(("sparsity.txt", sparsity_histogram(masks, &ck.model.config, &groups)));
    }
    if let Some(features) = &ck.features {
        sections.push(("spectrum.csv", spectrum_csv(&spectrum_report(features)?)));
    }
    if sections.is_empty() {
        return Err(Error::Input(
            "checkpoint has neither masks nor calibration features to report".into(),
        ));
    }
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            for (name, text) in &sections {
                std::fs::write(dir.join(name), text)?;
                println!("wrote {}", dir.join(name).display());
            }
        }
        None => {
            for (name, text) in &sections {
                println!("# {name}\n{text}");
            }
        }
    }
    Ok(())
}

fn bench(cli: &Cli, input: &Path, fused: &Path, reps: usize) -> Result<(), Error> {
    let ck = Checkpoint::read(input)?;
    let rc = run_config(cli, Some(&ck))?;
    let fm = FusedModel::read(fused)?;
    let (train, held) = rc.datasets()?;
    let c = &ck.model.config;

    let start = Instant::now();
    let features = collect(&ck.model, &train[..rc.calib_examples], rc.calib_tokens, 0)?;
    match rc.group_size {
        0 => drop(inject(&ck.model, &features)?),
        g => drop(group_pca(&ck.model, &features, g)?),
    }
    let calib_secs = start.elapsed().as_secs_f64();
    let cost = (c.n_layers * c.d_model * c.d_model * rc.calib_tokens) as f64;
    println!(
        "calibration_secs={calib_secs:.6} n_d2_t={cost:.0} ns_per_unit={:.3}",
        1e9 * calib_secs / cost
    );

    let groups = ck
        .proj
        .as_ref()
        .map_or_else(|| (0..c.n_layers).collect(), |p| p.groups.clone());
    let seqs: Vec<Vec<usize>> = held.iter().map(|e| e.tokens.clone()).collect();
    let r = size_report(&ck.model, &fm, &groups, &seqs, reps)?;
    println!(
        "prunable_before={} prunable_after={} sparsity={:.4} total_before={} total_after={} residual_matrices={}",
        r.prunable_before,
        r.prunable_after,
        r.sparsity(),
        r.total_before,
        r.total_after,
        r.residual_matrices
    );
    let w_r: usize = fm
        .layers
        .iter()
        .flat_map(|l| [&l.into_m, &l.into_f])
        .chain(fm.final_in.iter().map(|(_, l)| l))
        .map(|l| l.n_params())
        .sum();
    println!(
        "residual_share={:.4} secs_before={:.6} secs_after={:.6} speedup={:.3}",
        w_r as f64 / r.prunable_after.max(1) as f64,
        r.secs_before,
        r.secs_after,
        r.speedup()
    );
    Ok(())
}
