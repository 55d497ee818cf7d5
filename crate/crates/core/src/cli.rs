//! `rwkv-persp` command line.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::eval::ablation::PreparedCorpus;
use crate::eval::counting::{count_parameters, count_parameters_against, PUBLISHED_ROWS};
use crate::eval::{
    cloze_accuracy, perplexity_contexts, render_trace_svg, run_ablations, trace_decode,
    trace_to_csv, AblationAxis, AblationSettings,
};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LineageEntry};
use crate::io::corpus::{chunks, read_corpus};
use crate::io::tokenizer::{detokenize, tokenize};
use crate::model::{
    gradcheck_context, gradcheck_store, init_model, Aggregation, ModelConfig, PerspectiveModel,
};
use crate::train::{finetune_mask, finetune_perspectives, pretrain_base, NoiseTarget};

#[derive(Parser, Debug)]
#[command(
    name = "rwkv-persp",
    version,
    about = "RWKV-v4 with temporal perspectives"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a single-perspective base model from scratch.
    Pretrain(RunArgs),
    /// Add perspectives to a base checkpoint and train them with the base frozen.
    Finetune(RunArgs),
    /// Validation perplexity (and cloze accuracy on the synthetic corpus) of a checkpoint.
    Eval(RunArgs),
    /// Seeded sweep over one or all ablation axes; writes one CSV per axis.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// n_perspectives, aggregation, noise_placement or all.
        #[arg(long, default_value = "all")]
        axis: String,
    },
    /// Per-token perspective weights of a greedy decode, as CSV and SVG.
    Trace {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 64)]
        new_tokens: usize,
    },
    /// Analytic parameter counts.
    CountParams {
        #[command(flatten)]
        run: RunArgs,
        /// Also print the three published model shapes.
        #[arg(long)]
        published: bool,
    },
    /// Finite-difference check of every gradient of the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// TOML run config; see configs/desk.toml.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    #[arg(long)]
    pub n_perspectives: Option<usize>,
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
    #[arg(long)]
    pub noise_target: Option<NoiseTarget>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Plain-text corpus; 90% trains, the last 10% validates. Without it the
    /// synthetic copy corpus from the config is used.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
}

/// Loads the config file and applies command-line overrides.
pub fn effective_settings(args: &RunArgs) -> anyhow::Result<AblationSettings> {
    let mut s = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_settings(&text).with_context(|| format!("config {}", path.display()))?
        }
        None => AblationSettings::default(),
    };
    if let Some(seed) = args.seed {
        s.pretrain.seed = seed;
        s.finetune.seed = seed;
        s.seeds = (seed..seed + s.seeds.len() as u64).collect();
    }
    if let Some(n) = args.n_perspectives {
        s.model.perspectives = n;
    }
    if let Some(a) = args.aggregation {
        s.model.aggregation = a;
    }
    if let Some(t) = args.noise_target {
        s.finetune.noise_target = t;
    }
    if let Some(std) = args.noise_std {
        s.finetune.noise_std = std;
    }
    s.model.validate()?;
    s.pretrain.validate()?;
    s.finetune.validate()?;
    Ok(s)
}

pub fn parse_settings(text: &str) -> crate::Result<AblationSettings> {
    toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

fn prepare_out(out: &Path, settings: &AblationSettings) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("effective_config.toml");
    let text = toml::to_string(settings)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn data(
    args: &RunArgs,
    s: &AblationSettings,
    validation_contexts: usize,
) -> anyhow::Result<PreparedCorpus> {
    let ctx = s.model.context_length;
    match &args.corpus {
        None => Ok(PreparedCorpus::new(&s.corpus, ctx, validation_contexts)?),
        Some(path) => {
            let tokens = read_corpus(path)?;
            let split = tokens.len() * 9 / 10;
            let mut validation = chunks(&tokens[split..], ctx);
            validation.truncate(validation_contexts);
            if validation.is_empty() {
                anyhow::bail!(Error::EmptyInput(
                    "validation tail shorter than one context"
                ));
            }
            Ok(PreparedCorpus {
                train: tokens[..split].to_vec(),
                validation,
            })
        }
    }
}

fn require_checkpoint(args: &RunArgs) -> anyhow::Result<Checkpoint> {
    let path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("checkpoint", "this command needs --checkpoint"))?;
    Ok(load_checkpoint(path)?)
}

fn cmd_pretrain(args: &RunArgs) -> anyhow::Result<()> {
    let s = effective_settings(args)?;
    prepare_out(&args.out, &s)?;
    let data = data(args, &s, s.pretrain.validation_contexts)?;
    let config = s.model.base();
    let (params, log) = pretrain_base(&config, &data.train, &data.validation, &s.pretrain)?;
    write(args.out.join("train_log.txt"), log.to_text())?;
    let mut ckpt = Checkpoint::new(config, params);
    ckpt.lineage.push(LineageEntry {
        stage: "pretrain".into(),
        seed: s.pretrain.seed,
    });
    save_checkpoint(args.out.join("base.ckpt"), &ckpt)?;
    println!(
        "validation_ppl {:.6}",
        log.final_validation_ppl().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_finetune(args: &RunArgs) -> anyhow::Result<()> {
    let s = effective_settings(args)?;
    let base = require_checkpoint(args)?;
    if base.config.perspectives != 1 {
        anyhow::bail!(Error::config(
            "checkpoint",
            "fine-tuning starts from a single-perspective base"
        ));
    }
    let s = AblationSettings {
        model: ModelConfig {
            perspectives: s.model.perspectives,
            aggregation: s.model.aggregation,
            context_length: s.model.context_length,
            ..base.config.clone()
        },
        ..s
    };
    prepare_out(&args.out, &s)?;
    let data = data(args, &s, s.finetune.validation_contexts)?;
    let base_ppl = perplexity_contexts(
        &PerspectiveModel::from_store(&base.config, &base.params)?,
        &data.validation,
    )?;
    let (params, log) = finetune_perspectives(
        &base.params,
        &s.model,
        &data.train,
        &data.validation,
        &s.finetune,
    )?;
    write(args.out.join("train_log.txt"), log.to_text())?;
    let mut ckpt = Checkpoint::new(s.model.clone(), params);
    ckpt.mask = Some(finetune_mask(&ckpt.params));
    ckpt.lineage = base.lineage.clone();
    ckpt.lineage.push(LineageEntry {
        stage: "finetune".into(),
        seed: s.finetune.seed,
    });
    save_checkpoint(args.out.join("model.ckpt"), &ckpt)?;
    println!("base_validation_ppl {base_ppl:.6}");
    println!(
        "validation_ppl {:.6}",
        log.final_validation_ppl().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_eval(args: &RunArgs) -> anyhow::Result<()> {
    let s = effective_settings(args)?;
    let ckpt = require_checkpoint(args)?;
    let s = AblationSettings {
        model: ckpt.config.clone(),
        ..s
    };
    let data = data(args, &s, s.finetune.validation_contexts)?;
    let model = PerspectiveModel::from_store(&ckpt.config, &ckpt.params)?;
    println!(
        "validation_ppl {:.6}",
        perplexity_contexts(&model, &data.validation)?
    );
    if args.corpus.is_none() {
        let cloze = s.corpus.generate()?.cloze;
        println!("cloze_accuracy {:.6}", cloze_accuracy(&model, &cloze)?);
    }
    Ok(())
}

fn cmd_ablate(args: &RunArgs, axis: &str) -> anyhow::Result<()> {
    let s = effective_settings(args)?;
    let axes = if axis == "all" {
        AblationAxis::ALL.to_vec()
    } else {
        vec![axis.parse::<AblationAxis>()?]
    };
    prepare_out(&args.out, &s)?;
    for report in run_ablations(&axes, &s)? {
        write(
            args.out.join(format!("ablation_{}.csv", report.axis)),
            report.to_csv(),
        )?;
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_trace(args: &RunArgs, new_tokens: usize) -> anyhow::Result<()> {
    let s = effective_settings(args)?;
    let (config, params) = match &args.checkpoint {
        Some(_) => {
            let c = require_checkpoint(args)?;
            (c.config, c.params)
        }
        None => (s.model.clone(), init_model(&s.model, s.finetune.seed)?),
    };
    prepare_out(
        &args.out,
        &AblationSettings {
            model: config.clone(),
            ..s
        },
    )?;
    let prompt = tokenize(args.prompt.as_deref().unwrap_or("abcde:121212=").as_bytes());
    let model = PerspectiveModel::from_store(&config, &params)?;
    let (records, generated) = trace_decode(&model, &prompt, new_tokens)?;
    write(args.out.join("trace.csv"), trace_to_csv(&records))?;
    write(args.out.join("trace.svg"), render_trace_svg(&records))?;
    println!(
        "generated {:?}",
        String::from_utf8_lossy(&detokenize(&generated))
    );
    println!("positions {}", records.len());
    Ok(())
}

fn cmd_count_params(args: &RunArgs, published: bool) -> anyhow::Result<()> {
    let s = effective_settings(args)?;
    let r = count_parameters(&s.model)?;
    println!(
        "config base={} extended={} increase={:.4}%",
        r.base_count, r.extended_count, r.increase_percent
    );
    if published {
        for row in PUBLISHED_ROWS {
            let config = ModelConfig {
                perspectives: s.model.perspectives,
                aggregation: s.model.aggregation,
                ..row.config()
            };
            let r = count_parameters_against(&config, row.base_total)?;
            println!(
                "L={} d={} base={} extended={} increase={:.4}% published={:.2}%",
                row.layers,
                row.d_model,
                r.base_count,
                r.extended_count,
                r.increase_percent,
                row.printed_increase_percent
            );
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> anyhow::Result<()> {
    let mut worst = 0.0f64;
    for aggregation in Aggregation::ALL {
        let config = ModelConfig::tiny().with_aggregation(aggregation);
        let store = gradcheck_store(&config, seed)?;
        let context = gradcheck_context(&config, seed);
        let r = crate::model::graph_finite_diff(&config, &store, &context)?;
        println!(
            "{aggregation} checked={} max_rel_error={:.3e} max_rel_error_resolvable={:.3e} max_abs_error_unresolvable={:.3e}",
            r.checked, r.max_rel_error, r.max_rel_error_resolvable, r.max_abs_error_unresolvable
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max_rel_error {worst:.3e}");
    if !(worst < 1e-4) {
        anyhow::bail!(Error::Inconsistent(format!(
            "gradient check failed: max relative error {worst:.3e}"
        )));
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate { run, axis } => cmd_ablate(&run, &axis),
        Command::Trace { run, new_tokens } => cmd_trace(&run, new_tokens),
        Command::CountParams { run, published } => cmd_count_params(&run, published),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

/// One line: `error kind=<kind> message=<json string>`.
pub fn format_error(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or("other", Error::kind);
    let message = format!("{err:#}");
    format!(
        "error kind={kind} message={}",
        serde_json::Value::String(message)
    )
}
