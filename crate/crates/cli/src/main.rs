//! Command-line harness: toy pre-training, evaluation, the IPOT solver,
//! gradient checks, φ export, dataset generation and loss plots.

mod plot;

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use mlip::numerics::Matrix;
use mlip::ot_align::{ipot, CostMatrix, IpotConfig};
use mlip::patching::{integrity_weights, sample_mask};
use mlip::trainer::{
    check_gradients, eval_alignment, eval_retrieval, load_checkpoint, make_synthetic, mask_seed, save_checkpoint,
    train, Checkpoint, MetricRecord, SyntheticPairSet, TrainConfig,
};

#[derive(Parser)]
#[command(name = "mlip", version, about = "Masked language-image pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic pairs; writes metrics.jsonl, model.ckpt and config.json.
    Pretrain {
        /// JSON file with TrainConfig fields; unknown keys are rejected.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Train on a dataset directory from `make-data` instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Held-out retrieval and ground-truth alignment mass of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory, or `SEED[:PAIRS]` to generate pairs in the
        /// checkpoint's concept world.
        #[arg(long)]
        data: String,
    },
    /// Solve one transport problem from a cost-matrix CSV.
    IpotSolve {
        #[arg(long)]
        cost: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        inner: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Plan CSV destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group.
    CheckGradients {
        #[arg(long, value_enum, default_value_t = Scale::Micro)]
        scale: Scale,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export φ (and optionally sampled masks with their weights) as CSV.
    DumpPhi {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of masks to sample and weight as one batch.
        #[arg(long, default_value_t = 0)]
        masks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset directory.
    MakeData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Config whose data section is used; the desk preset if absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of pairs; the config's train_pairs if absent.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Render the step losses of a metrics log as SVG.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Micro,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: TrainConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    config.validate()?;
    Ok(config)
}

fn pretrain(config: &Path, out: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = read_config(config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let train_set = match data {
        Some(dir) => SyntheticPairSet::load(dir).with_context(|| format!("loading {}", dir.display()))?,
        None => make_synthetic(&cfg.train_spec())?,
    };
    let held = make_synthetic(&cfg.eval_spec())?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut log = BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    let mut write_err = None;
    let result = train(&cfg, &train_set, Some(&held), &mut |r| {
        let line = serde_json::to_string(r).map_err(io::Error::from);
        if let Err(e) = line.and_then(|l| writeln!(log, "{l}")) {
            write_err.get_or_insert(e);
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics.jsonl");
    }
    let trained = result?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &trained.model, Some(&cfg))?;
    let r = eval_retrieval(&trained.model, &held)?;
    let align = eval_alignment(&trained.model, &held, &cfg.ipot())?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": ckpt,
            "top1_v2t": r.top1_v2t,
            "top1_t2v": r.top1_t2v,
            "alignment": align,
        })
    );
    Ok(())
}

fn parse_seed_spec(spec: &str) -> Result<(u64, Option<usize>)> {
    let (seed, pairs) = match spec.split_once(':') {
        Some((s, p)) => (
            s,
            Some(p.parse().with_context(|| format!("bad pair count in {spec:?}"))?),
        ),
        None => (spec, None),
    };
    Ok((
        seed.parse()
            .with_context(|| format!("{spec:?} is neither a directory nor SEED[:PAIRS]"))?,
        pairs,
    ))
}

fn eval(checkpoint: &Path, data: &str) -> Result<()> {
    let Checkpoint { model, train } = load_checkpoint(checkpoint)?;
    let dir = Path::new(data);
    let set = if dir.is_dir() {
        SyntheticPairSet::load(dir)?
    } else {
        let (seed, pairs) = parse_seed_spec(data)?;
        let Some(cfg) = train.as_ref() else {
            bail!("checkpoint has no training config; pass a dataset directory");
        };
        make_synthetic(&cfg.data_spec(seed, pairs.unwrap_or(cfg.data.eval_pairs)))?
    };
    let ipot_cfg = train.as_ref().map(TrainConfig::ipot).unwrap_or_default();
    let r = eval_retrieval(&model, &set)?;
    let align = eval_alignment(&model, &set, &ipot_cfg)?;
    println!(
        "{}",
        serde_json::json!({
            "pairs": set.len(),
            "top1_v2t": r.top1_v2t,
            "top1_t2v": r.top1_t2v,
            "alignment": align,
        })
    );
    Ok(())
}

fn read_cost(path: &Path) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .with_context(|| format!("row {i}: {f:?} is not a number"))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} holds no cost rows", path.display());
    }
    Ok(Matrix::from_rows(&rows)?)
}

fn ipot_solve(cost: &Path, cfg: IpotConfig, out: Option<&Path>) -> Result<()> {
    let c = CostMatrix(read_cost(cost)?);
    let plan = ipot(&c, &cfg)?;
    let mut w = csv::Writer::from_writer(output(out)?);
    for row in plan.gamma.iter_rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    eprintln!(
        "objective={:?} marginal_error={:?} iterations_used={}",
        plan.objective(&c)?,
        plan.marginal_error,
        plan.iterations_used
    );
    Ok(())
}

fn gradients(eps: f64, tol: f64) -> Result<bool> {
    let report = check_gradients(&TrainConfig::micro(), eps)?;
    println!(
        "{:<40} {:>12} {:>14} {:>14}",
        "parameter", "rel_error", "analytic", "numeric"
    );
    for p in &report.params {
        println!(
            "{:<40} {:>12.3e} {:>14.6e} {:>14.6e}",
            p.name, p.max_rel_error, p.analytic, p.numeric
        );
    }
    let ok = report.passes(tol);
    println!(
        "max relative error {:.3e} over {} tensors: {}",
        report.max_rel_error(),
        report.params.len(),
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

fn dump_phi(checkpoint: &Path, masks: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let est = ck.model.integrity();
    let p = est.num_patches();
    let ratio = ck.train.as_ref().map_or(0.5, |c| c.mask_ratio);
    let sampled = (0..masks)
        .map(|i| sample_mask(p, ratio, mask_seed(seed, 0, 0, i)))
        .collect::<mlip::Result<Vec<_>>>()?;
    let weights = if sampled.is_empty() {
        Vec::new()
    } else {
        integrity_weights(&est, &sampled)?
    };
    let mut w = csv::Writer::from_writer(output(out)?);
    let mut header = vec!["vector".to_string()];
    header.extend((0..p).map(|i| format!("p{i}")));
    header.push("weight".into());
    w.write_record(&header)?;
    let mut phi_row = vec!["phi".to_string()];
    phi_row.extend(est.phi.data().iter().map(|v| format!("{v:?}")));
    phi_row.push(String::new());
    w.write_record(&phi_row)?;
    for (k, (m, wt)) in sampled.iter().zip(&weights).enumerate() {
        let mut row = vec![format!("mask{k}")];
        row.extend(m.entries.iter().map(|&b| u8::from(b).to_string()));
        row.push(format!("{wt:?}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn make_data(seed: u64, out: &Path, config: Option<&Path>, pairs: Option<usize>) -> Result<()> {
    let cfg = match config {
        Some(p) => read_config(p)?,
        None => TrainConfig::desk(),
    };
    let set = make_synthetic(&cfg.data_spec(seed, pairs.unwrap_or(cfg.data.train_pairs)))?;
    set.save(out)?;
    info!("wrote {} pairs to {}", set.len(), out.display());
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?);
    }
    Ok(records)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain { config, out, data } => pretrain(&config, &out, data.as_deref())?,
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data)?,
        Command::IpotSolve {
            cost,
            beta,
            iters,
            inner,
            tol,
            out,
        } => {
            let cfg = IpotConfig {
                beta,
                outer_iters: iters,
                inner_iters: inner,
                tol,
            };
            ipot_solve(&cost, cfg, out.as_deref())?
        }
        Command::CheckGradients {
            scale: Scale::Micro,
            eps,
            tol,
        } => return gradients(eps, tol),
        Command::DumpPhi {
            checkpoint,
            masks,
            seed,
            out,
        } => dump_phi(&checkpoint, masks, seed, out.as_deref())?,
        Command::MakeData {
            seed,
            out,
            config,
            pairs,
        } => make_data(seed, &out, config.as_deref(), pairs)?,
        Command::Plot { log, out } => {
            let svg = plot::render(&read_log(&log)?)?;
            let mut w = output(out.as_deref())?;
            w.write_all(svg.as_bytes())?;
            w.flush()?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
