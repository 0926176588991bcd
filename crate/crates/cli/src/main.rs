mod config;
mod manifest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use log::info;

use procter::datasynth::{dir_hash, gen_corpus, Corpus, EntityKind, Split};
use procter::evalkit::{
    compare, dump_attention, evaluate, render_rates, render_table, EvalOptions, EvalReport,
};
use procter::pipeline::{
    build_catalog, count_params, pretrain_base, train_adapter, Stage, TrainOutcome,
};
use procter::procter::{AdapterConfig, Variant};
use procter::rnnt::{Checkpoint, JointConfig};

use config::RunConfig;
use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "procter",
    version,
    about = "Synthesize data, train and evaluate contextual biasing adapters"
)]
struct Cli {
    /// TOML configuration file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set synth.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for synthesis and both training stages.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run manifest updated by every command.
    #[arg(long, global = true, default_value = "manifest.json")]
    manifest: PathBuf,
    /// Print the effective configuration and exit.
    #[arg(long)]
    show_config: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base transducer or an adapter on top of it.
    Train {
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base checkpoint (adapter stage).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Adapter variant; defaults to `adapter.variant` of the config.
        #[arg(long)]
        variant: Option<Variant>,
        /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode test sets and write reports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Test splits, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [Split::TestGeneral, Split::TestEntity, Split::TestDevice])]
        splits: Vec<Split>,
        /// Only the device-name set with its unseen catalogs.
        #[arg(long)]
        zero_shot: bool,
        /// Decode with {no_bias}-only catalogs.
        #[arg(long)]
        vanilla: bool,
        #[arg(long)]
        beam: Option<usize>,
        /// Also dump attention weights for these utterance ids.
        #[arg(long = "dump-attn", value_name = "UTT_ID")]
        dump_attn: Vec<String>,
    },
    /// Write per-frame gate and attention weights of one utterance.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        utt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter counts of a checkpoint, or the full-scale formula.
    Params {
        #[arg(long, required_unless_present = "full_scale")]
        ckpt: Option<PathBuf>,
        /// Counts for the full-scale model dimensions instead.
        #[arg(long)]
        full_scale: bool,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn config(err: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 2,
            err: err.into(),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let err = e.into();
        Failure {
            code: exit_code(&err),
            err,
        }
    }
}

/// 2 configuration, 3 data, 4 divergence, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use procter::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => 2,
                E::Divergence { .. } => 4,
                E::Parse { .. }
                | E::Input(_)
                | E::Generation(_)
                | E::Io { .. }
                | E::Json(_)
                | E::Checkpoint(_)
                | E::VocabMismatch { .. }
                | E::EmptyCatalog => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        for key in ["synth.seed", "train_base.seed", "train_adapter.seed"] {
            overrides.push(format!("{key}={s}"));
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides).map_err(Failure::config)?;
    if cli.show_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(cmd) = cli.cmd else {
        return Err(Failure::config(anyhow!("no command given; see --help")));
    };
    let mut manifest = RunManifest::open(&cli.manifest)?;
    manifest.record_config(&cfg, cli.config.as_deref());
    match cmd {
        Cmd::Synth { out } => cmd_synth(&cfg, &out, &mut manifest)?,
        Cmd::Train {
            stage,
            data,
            out,
            base,
            variant,
            log,
        } => {
            let log = log.unwrap_or_else(|| with_suffix(&out, ".log.jsonl"));
            match stage {
                Stage::Base => cmd_train_base(&cfg, &data, &out, &log, &mut manifest)?,
                Stage::Adapter => {
                    let base = base.ok_or_else(|| {
                        Failure::config(anyhow!("--stage adapter needs --base <checkpoint>"))
                    })?;
                    let variant = match variant {
                        Some(v) => v,
                        None => cfg.variant().map_err(Failure::config)?,
                    };
                    cmd_train_adapter(&cfg, &data, &base, variant, &out, &log, &mut manifest)?
                }
            }
        }
        Cmd::Eval {
            ckpt,
            data,
            out,
            splits,
            zero_shot,
            vanilla,
            beam,
            dump_attn,
        } => {
            let splits = if zero_shot {
                vec![Split::TestDevice]
            } else {
                splits
            };
            if let Some(s) = splits.iter().find(|s| !s.is_test()) {
                return Err(Failure::config(anyhow!("{s} is not a test split")));
            }
            let opts = EvalOptions {
                beam: beam.unwrap_or(cfg.eval.beam),
                vanilla: vanilla || cfg.eval.vanilla,
                ..cfg.eval.clone()
            };
            if opts.beam == 0 {
                return Err(Failure::config(anyhow!("--beam must be at least 1")));
            }
            cmd_eval(
                &ckpt,
                &data,
                &out,
                &splits,
                &opts,
                &dump_attn,
                &mut manifest,
            )?
        }
        Cmd::DumpAttn {
            ckpt,
            data,
            utt,
            out,
        } => {
            let ckpt_v = Checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&data)?;
            write_attention(&ckpt_v, &corpus, &utt, &out)?;
            manifest.stage("dump-attn", vec![out]);
        }
        Cmd::Params { ckpt, full_scale } => {
            if full_scale {
                let core = JointConfig::full_scale().param_count();
                let adapter = AdapterConfig::full_scale().param_count();
                println!("core      {core}");
                println!("adapter   {adapter}");
                println!("ratio     {:.4}", adapter as f64 / (core + adapter) as f64);
            } else {
                let path = ckpt.expect("clap enforces --ckpt");
                let c = count_params(&Checkpoint::load(&path)?);
                println!("core      {}", c.core);
                println!("adapter   {}", c.adapter);
                println!("ratio     {:.4}", c.adapter_ratio());
            }
            return Ok(());
        }
    }
    manifest.save(&cli.manifest)?;
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_synth(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let corpus = gen_corpus(&cfg.synth)?;
    corpus.save(out)?;
    let hash = dir_hash(out)?;
    let people: Vec<_> = corpus.entities_of(EntityKind::Person).collect();
    let irregular = people.iter().filter(|e| e.irregular).count();
    let second = corpus.entities.iter().filter(|e| e.prons.len() > 1).count();
    println!("corpus        {}", out.display());
    println!("hash          {hash}");
    println!("vocab         {}", corpus.vocab.len());
    println!(
        "entities      {} ({} irregular, {:.1}%)",
        people.len(),
        irregular,
        100.0 * irregular as f64 / people.len().max(1) as f64
    );
    println!("second prons  {second}");
    println!(
        "devices       {}",
        corpus.entities_of(EntityKind::Device).count()
    );
    println!("rare          {}", corpus.rare.len());
    for s in Split::ALL {
        println!("{:<13} {}", s.name(), corpus.split(s).len());
    }
    manifest.seed = Some(cfg.synth.seed);
    manifest.corpus_hash = Some(hash);
    manifest.stage("synth", vec![out.to_path_buf()]);
    Ok(())
}

fn finish_training(outcome: &TrainOutcome, out: &Path, log: &Path) -> anyhow::Result<()> {
    // `save_to` already holds the best checkpoint; rewrite it so the file
    // exists even when no epoch improved on the initial parameters
    outcome.checkpoint.save(out)?;
    let mut w = create(log)?;
    outcome.write_log(&mut w)?;
    w.flush()?;
    let c = count_params(&outcome.checkpoint);
    println!("checkpoint    {}", out.display());
    println!(
        "best epoch    {} of {}",
        outcome.best_epoch, outcome.epochs_run
    );
    println!(
        "params        core {} adapter {} (ratio {:.4})",
        c.core,
        c.adapter,
        c.adapter_ratio()
    );
    Ok(())
}

fn cmd_train_base(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    log: &Path,
    manifest: &mut RunManifest,
) -> anyhow::Result<()> {
    let corpus = load_corpus(data)?;
    let joint = cfg.model.joint(corpus.cfg.feat_dim, corpus.vocab.len());
    info!("training base model {joint:?}");
    let outcome = pretrain_base(&corpus, &joint, &cfg.train_base, Some(out))?;
    finish_training(&outcome, out, log)?;
    manifest.stage("train-base", vec![out.to_path_buf(), log.to_path_buf()]);
    Ok(())
}

fn cmd_train_adapter(
    cfg: &RunConfig,
    data: &Path,
    base: &Path,
    variant: Variant,
    out: &Path,
    log: &Path,
    manifest: &mut RunManifest,
) -> anyhow::Result<()> {
    let corpus = load_corpus(data)?;
    let base_ckpt = Checkpoint::load_for_vocab(base, &corpus.vocab.hash())
        .with_context(|| format!("loading base checkpoint {}", base.display()))?;
    if base_ckpt.adapter.is_some() {
        return Err(procter::Error::Input(format!(
            "{} already carries an adapter",
            base.display()
        ))
        .into());
    }
    let acfg = cfg.adapter.build(
        variant,
        corpus.vocab.len(),
        corpus.inventory.len(),
        base_ckpt.joint.enc_units,
    );
    info!("training {variant} adapter");
    let outcome = train_adapter(
        &base_ckpt,
        &corpus,
        &acfg,
        &cfg.train_adapter,
        &cfg.sampling,
        Some(out),
    )?;
    finish_training(&outcome, out, log)?;
    manifest.stage(
        &format!("train-adapter-{variant}"),
        vec![out.to_path_buf(), log.to_path_buf()],
    );
    Ok(())
}

fn write_report(report: &EvalReport, path: &Path) -> anyhow::Result<()> {
    let mut w = create(path)?;
    report.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_eval(
    ckpt_path: &Path,
    data: &Path,
    out: &Path,
    splits: &[Split],
    opts: &EvalOptions,
    dumps: &[String],
    manifest: &mut RunManifest,
) -> anyhow::Result<()> {
    let corpus = load_corpus(data)?;
    let ckpt = Checkpoint::load_for_vocab(ckpt_path, &corpus.vocab.hash())?;
    let name = ckpt
        .adapter
        .as_ref()
        .and_then(|a| a.variant())
        .map(|v| v.name().to_string())
        .unwrap_or_else(|| "vanilla".into());
    let report = evaluate(&name, &ckpt, &corpus, splits, opts)?;
    let mut outputs = vec![out.join("report.jsonl"), out.join("table.txt")];
    write_report(&report, &outputs[0])?;
    let mut table = render_rates(&report);
    if ckpt.adapter.is_some() && !opts.vanilla {
        // the vanilla transducer is the same checkpoint decoded without biasing
        let vanilla_opts = EvalOptions {
            vanilla: true,
            ..opts.clone()
        };
        let baseline = evaluate("vanilla", &ckpt, &corpus, splits, &vanilla_opts)?;
        let path = out.join("baseline.jsonl");
        write_report(&baseline, &path)?;
        outputs.push(path);
        table = format!(
            "{}{}\n{}",
            render_rates(&baseline),
            table,
            render_table(&[compare(&baseline, &report)])
        );
    }
    let mut w = create(&outputs[1])?;
    w.write_all(table.as_bytes())?;
    w.flush()?;
    print!("{table}");
    for utt in dumps {
        let path = out.join(format!("attn-{utt}.jsonl"));
        write_attention(&ckpt, &corpus, utt, &path)?;
        outputs.push(path);
    }
    manifest.stage(&format!("eval-{name}"), outputs);
    Ok(())
}

fn write_attention(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    utt: &str,
    out: &Path,
) -> anyhow::Result<()> {
    let u = Split::ALL
        .iter()
        .flat_map(|&s| corpus.split(s))
        .find(|u| u.id == utt)
        .ok_or_else(|| procter::Error::Input(format!("no utterance with id {utt:?}")))?;
    let id = u
        .catalog
        .as_deref()
        .ok_or_else(|| procter::Error::Input(format!("utterance {utt} has no catalog")))?;
    let catalog = build_catalog(corpus.catalog(id)?, corpus)?;
    let dump = dump_attention(ckpt, u, &catalog)?;
    let mut w = create(out)?;
    dump.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}
