use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use peswap::adapters::{inject, AdaptedModel, LoraConfig, Strategy};
use peswap::checkpoint;
use peswap::corpus::{
    build_flores_docs, merge_conversations, read_pairs_tsv, select_top_k, write_docs_tsv, write_pairs_tsv,
    ParallelPair, ToyKind, ToyTask, Vocab, DEFAULT_TOP_K, FLORES_GROUP_KEYS, FLORES_WINDOW,
};
use peswap::experiment::{run_experiment, ExperimentConfig};
use peswap::metrics::{bleu, chrfpp, format_score, ChrFConfig};
use peswap::model::{DecodeConfig, ModelConfig, TransformerModel};
use peswap::numerics::RngStream;
use peswap::positional::PEKind;
use peswap::train::{gradcheck_model, train_loop, DevOptions, Example, Preset, TrainConfig};
use peswap::{Error, Result};

#[derive(Parser)]
#[command(name = "peswap", version, about = "Swap positional embeddings of trained encoder-decoder models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Swap a checkpoint's positional scheme if needed, then fine-tune it.
    Finetune(FinetuneArgs),
    /// Rewrite a checkpoint with another positional scheme.
    Swap {
        #[arg(long)]
        pe: PEKind,
        input: PathBuf,
        output: PathBuf,
    },
    /// Compare two checkpoints.
    Diff { a: PathBuf, b: PathBuf },
    /// Decode whitespace-tokenized lines from a file or stdin.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to vocab.json next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 5, conflicts_with = "greedy")]
        beam: usize,
        #[arg(long)]
        greedy: bool,
        input: Option<PathBuf>,
    },
    /// Corpus score of a hypothesis file against a reference file.
    Score {
        #[arg(long, default_value = "chrfpp")]
        metric: Metric,
        hyp: PathBuf,
        reference: PathBuf,
    },
    /// Group sentence pairs into document units.
    BuildDocs {
        #[arg(long, default_value = "flores")]
        mode: DocMode,
        #[arg(long, default_value_t = FLORES_WINDOW)]
        window: usize,
        input: PathBuf,
        output: PathBuf,
    },
    /// Keep the top-k scored pairs, filling up with a seeded sample of unscored ones.
    Select {
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        input: PathBuf,
        output: PathBuf,
    },
    /// Write a synthetic toy task as TSV.
    Toy {
        #[arg(long, default_value = "mapped-translate")]
        task: ToyKind,
        #[arg(long, default_value_t = 40)]
        vocab: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        output: PathBuf,
    },
    /// Finite-difference check of model gradients in double precision.
    Gradcheck {
        #[arg(long, default_value = "sine")]
        pe: PEKind,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the whole swap matrix on a toy task and report the orderings.
    Experiment {
        #[arg(long, default_value = "mapped-translate")]
        task: ToyKind,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Cap every arm at this many steps instead of the calibrated budgets.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Use the nominal scale (vocabulary 200, lengths 5-20) instead of the calibrated one.
        #[arg(long)]
        nominal: bool,
        #[arg(long, default_value = "report.tsv")]
        report: PathBuf,
        /// Directory for per-arm checkpoints and train logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Metric {
    Chrfpp,
    Bleu,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DocMode {
    Flores,
    Conversations,
}

#[derive(Args)]
struct DataArgs {
    /// Training pairs TSV; a toy task is generated when absent.
    #[arg(long, requires = "dev")]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long, default_value = "mapped-translate")]
    task: ToyKind,
    #[arg(long, default_value_t = 40)]
    vocab: usize,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
}

#[derive(Args)]
struct RecipeArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Override the preset's peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the preset's warmup steps.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Output directory for checkpoints, vocab.json and train_log.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "sine")]
    pe: PEKind,
    #[arg(long, default_value = "scratch")]
    preset: Preset,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    recipe: RecipeArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    base: PathBuf,
    /// Scheme to swap to before tuning; keeps the base scheme when absent.
    #[arg(long)]
    pe: Option<PEKind>,
    #[arg(long, default_value = "fft")]
    strategy: Strategy,
    #[arg(long, default_value = "finetune")]
    preset: Preset,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    recipe: RecipeArgs,
}

impl RecipeArgs {
    fn config(&self, preset: Preset, strategy: Strategy) -> TrainConfig {
        let mut cfg = TrainConfig::preset(preset, strategy);
        cfg.max_steps = self.max_steps;
        cfg.base_lr = self.lr.unwrap_or(cfg.base_lr);
        cfg.warmup_steps = self.warmup.unwrap_or(cfg.warmup_steps);
        cfg.eval_beam = self.beam.unwrap_or(cfg.eval_beam);
        cfg.checkpoint_every = self.checkpoint_every.unwrap_or(cfg.checkpoint_every);
        cfg
    }
}

struct Data {
    vocab: Vocab,
    train: Vec<Example>,
    dev: Vec<Example>,
}

fn load_data(args: &DataArgs, seed: u64, vocab: Option<Vocab>) -> Result<Data> {
    let (train, dev, default_vocab) = match (&args.train, &args.dev) {
        (Some(t), Some(d)) => {
            let (train, dev) = (read_pairs_tsv(t)?, read_pairs_tsv(d)?);
            let texts = train.iter().flat_map(|p| [p.src.as_str(), p.tgt.as_str()]);
            let vocab = Vocab::from_texts(&[], texts);
            (train, dev, vocab)
        }
        _ => {
            let task = ToyTask::new(args.task, args.vocab)?;
            let train = task.sample((4, 12), args.n_train, &mut RngStream::named(seed, "data/train"))?;
            let dev = task.sample((4, 12), 200, &mut RngStream::named(seed, "data/dev"))?;
            (train, dev, Vocab::toy(args.vocab))
        }
    };
    let vocab = vocab.unwrap_or(default_vocab);
    let encode = |pairs: &[ParallelPair]| -> Result<Vec<Example>> {
        pairs.iter().map(|p| Example::from_pair(p, &vocab, &vocab, &[])).collect()
    };
    Ok(Data {
        train: encode(&train)?,
        dev: encode(&dev)?,
        vocab,
    })
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let mut v: Vocab = serde_json::from_str(&text)?;
    v.reindex();
    Ok(v)
}

fn write_vocab(dir: &Path, vocab: &Vocab) -> Result<()> {
    let path = dir.join("vocab.json");
    std::fs::write(&path, serde_json::to_string(vocab)?).map_err(|e| Error::Io { path, source: e })
}

fn fit(model: TransformerModel<f32>, data: &Data, cfg: &TrainConfig, recipe: &RecipeArgs) -> Result<TransformerModel<f32>> {
    std::fs::create_dir_all(&recipe.out).map_err(|e| Error::Io {
        path: recipe.out.clone(),
        source: e,
    })?;
    write_vocab(&recipe.out, &data.vocab)?;
    let opts = DevOptions {
        vocab: Some(&data.vocab),
        out_dir: Some(recipe.out.clone()),
    };
    let mut rng = RngStream::named(recipe.seed, "train");
    let outcome = train_loop(model, &data.train, &data.dev, cfg, &mut rng, &opts)?;
    println!(
        "steps={} best_step={} best_bleu={:.4} stopped_early={}",
        outcome.steps, outcome.best_step, outcome.best_bleu, outcome.stopped_early
    );
    Ok(outcome.model)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = load_data(&a.data, a.recipe.seed, None)?;
    let cfg = a.recipe.config(a.preset, Strategy::Fft);
    let mc = ModelConfig::toy(data.vocab.len(), data.vocab.len(), a.pe);
    let model = TransformerModel::new(mc, &mut RngStream::named(a.recipe.seed, "init"))?;
    fit(model, &data, &cfg, &a.recipe)?;
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let mut model: TransformerModel<f32> = checkpoint::load(&a.base)?;
    let vocab_path = a.base.with_file_name("vocab.json");
    let vocab = vocab_path.exists().then(|| read_vocab(&vocab_path)).transpose()?;
    let data = load_data(&a.data, a.recipe.seed, vocab)?;
    if let Some(pe) = a.pe {
        model.swap_pe(pe)?;
    }
    let mut rng = RngStream::named(a.recipe.seed, "lora");
    let adapted = inject(model, a.strategy, &LoraConfig::default(), &mut rng)?;
    let r = adapted.trainable_report();
    println!("trainable={} total={} fraction={:.6}", r.trainable, r.total, r.fraction);
    let cfg = a.recipe.config(a.preset, a.strategy);
    let tuned = fit(adapted.into_model(), &data, &cfg, &a.recipe)?;
    if a.strategy != Strategy::Fft {
        let merged = AdaptedModel::from_model(tuned)?.merge()?;
        checkpoint::save(&merged, &a.recipe.out.join("merged.ckpt"))?;
    }
    Ok(())
}

fn cmd_translate(ckpt: &Path, vocab: Option<PathBuf>, beam: usize, greedy: bool, input: Option<PathBuf>) -> Result<()> {
    let model: TransformerModel<f32> = checkpoint::load(ckpt)?;
    let vocab = read_vocab(&vocab.unwrap_or_else(|| ckpt.with_file_name("vocab.json")))?;
    let dcfg = DecodeConfig::with_beam(if greedy { 1 } else { beam });
    let reader: Box<dyn BufRead> = match &input {
        Some(p) => Box::new(io::BufReader::new(
            std::fs::File::open(p).map_err(|e| Error::Io { path: p.clone(), source: e })?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let mut out = io::stdout().lock();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::Io {
            path: input.clone().unwrap_or_else(|| "<stdin>".into()),
            source: e,
        })?;
        let src = vocab.encode_source(&line, &[])?;
        let ids = if dcfg.beam == 1 {
            model.greedy_decode(&src, &dcfg)?
        } else {
            model.beam_search(&src, &dcfg)?
        };
        writeln!(out, "{}", vocab.decode(&ids)).map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        })?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn cmd_gradcheck(pe: PEKind, samples: usize, seed: u64) -> Result<()> {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 4,
        ffn_dim: 32,
        ..ModelConfig::toy(12, 12, pe)
    };
    let mut model = TransformerModel::<f64>::new(cfg, &mut RngStream::named(seed, "init"))?;
    let vocab = Vocab::toy(12);
    let pairs = ToyTask::new(ToyKind::MappedTranslate, 12)?.sample((3, 6), 3, &mut RngStream::named(seed, "data"))?;
    let batch: Vec<Example> = pairs
        .iter()
        .map(|p| Example::from_pair(p, &vocab, &vocab, &[]))
        .collect::<Result<_>>()?;
    let err = gradcheck_model(&mut model, &batch, 0.1, samples, &mut RngStream::named(seed, "gradcheck"))?;
    println!("pe={pe} samples={samples} max_rel_err={err:.3e}");
    if err >= 1e-3 {
        return Err(Error::Integrity(format!("relative gradient error {err:.3e} exceeds 1e-3")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Swap { pe, input, output } => {
            let r = checkpoint::swap_pe(&input, pe, &output)?;
            println!("old_pe={} new_pe={} tensors_changed={}", r.old_pe, r.new_pe, r.tensors_changed);
            Ok(())
        }
        Cmd::Diff { a, b } => {
            let d = checkpoint::diff(&a, &b)?;
            for (field, x, y) in &d.fields {
                println!("field\t{field}\t{x}\t{y}");
            }
            for (name, kind) in &d.tensors {
                println!("tensor\t{name}\t{kind:?}");
            }
            Ok(())
        }
        Cmd::Translate {
            ckpt,
            vocab,
            beam,
            greedy,
            input,
        } => cmd_translate(&ckpt, vocab, beam, greedy, input),
        Cmd::Score { metric, hyp, reference } => {
            let (h, r) = (read_lines(&hyp)?, read_lines(&reference)?);
            let line = match metric {
                Metric::Chrfpp => format_score("chrfpp", chrfpp(&h, &r, &ChrFConfig::default())?),
                Metric::Bleu => format_score("bleu", bleu(&h, &r)?),
            };
            println!("{line}");
            Ok(())
        }
        Cmd::BuildDocs {
            mode,
            window,
            input,
            output,
        } => {
            let pairs = read_pairs_tsv(&input)?;
            let docs = match mode {
                DocMode::Flores => {
                    let (docs, rejected) = build_flores_docs(&pairs, &FLORES_GROUP_KEYS, window)?;
                    for r in &rejected {
                        eprintln!("rejected\t{}\tmissing {}", r.id, r.missing_key);
                    }
                    docs
                }
                DocMode::Conversations => merge_conversations(&pairs)?,
            };
            write_docs_tsv(&output, &docs)?;
            println!("docs={}", docs.len());
            Ok(())
        }
        Cmd::Select { k, seed, input, output } => {
            let pairs = read_pairs_tsv(&input)?;
            let kept = select_top_k(&pairs, k, &mut RngStream::named(seed, "select"));
            write_pairs_tsv(&output, &kept)?;
            println!("kept={}", kept.len());
            Ok(())
        }
        Cmd::Toy {
            task,
            vocab,
            n,
            min_len,
            max_len,
            seed,
            output,
        } => {
            let pairs = ToyTask::new(task, vocab)?.sample((min_len, max_len), n, &mut RngStream::named(seed, "toy"))?;
            write_pairs_tsv(&output, &pairs)
        }
        Cmd::Gradcheck { pe, samples, seed } => cmd_gradcheck(pe, samples, seed),
        Cmd::Experiment {
            task,
            seeds,
            seed,
            max_steps,
            nominal,
            report,
            out,
        } => {
            let mut cfg = if nominal {
                ExperimentConfig::nominal(task, seed, seeds)
            } else {
                ExperimentConfig { task, ..ExperimentConfig::calibrated(seed, seeds) }
            };
            if let Some(steps) = max_steps {
                cfg = cfg.with_budget(steps);
            }
            let r = run_experiment(&cfg, out.as_deref())?;
            r.write(&report)?;
            print!("{}", r.to_table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(if matches!(e, Error::Usage(_) | Error::Config(_)) { 2 } else { 1 })
        }
    }
}
