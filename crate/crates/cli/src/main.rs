use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bicap_core::attention::{extract_attention, write_overlays};
use bicap_core::checkpoint::Checkpoint;
use bicap_core::config::{RunConfig, FIELD_DOCS};
use bicap_core::data::{eval_view, load_image, load_labeled_manifest, load_manifest, synth};
use bicap_core::decode::{beam_search, greedy, ModelScorer};
use bicap_core::model::{Model, ModelConfig};
use bicap_core::probe::{probe_backbone, ProbeProtocol};
use bicap_core::tasks::TaskKind;
use bicap_core::tokenizer::{train_bpe, Vocabulary, EOS, RESERVED, SOS};
use bicap_core::train::{train, Outputs};
use bicap_core::Error;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bicap", version, about = "Caption-supervised visual pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a BPE vocabulary from captions.
    TokenizerTrain(TokenizerArgs),
    /// Pretrain a backbone with a captioning (or ablation) objective.
    Train(TrainArgs),
    /// Caption one image with the forward decoder.
    Caption(CaptionArgs),
    /// Linear probe on frozen backbone features.
    Probe(ProbeArgs),
    /// Write a synthetic dataset of rendered shapes.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration (TOML sections of key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set optim.lr_head=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            cfg.set(s)?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TokenizerArgs {
    /// Plain-text corpus, one caption per line.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    corpus: Option<PathBuf>,
    /// Caption manifest (JSONL); every caption of every record is used.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    vocab_size: usize,
    #[arg(long, default_value = "vocab.txt")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum TaskArg {
    Bicap,
    Forward,
    Tokclf,
    Mlm,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Bicap => TaskKind::Bicap,
            TaskArg::Forward => TaskKind::Forward,
            TaskArg::Tokclf => TaskKind::Tokclf,
            TaskArg::Mlm => TaskKind::Mlm,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ProtocolArg {
    Svm,
    Softmax,
}

impl From<ProtocolArg> for ProbeProtocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Svm => ProbeProtocol::Svm,
            ProtocolArg::Softmax => ProbeProtocol::Softmax,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Caption manifest (overrides data.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Labeled manifest for the early-stopping probe (overrides data.probe_manifest).
    #[arg(long)]
    probe_manifest: Option<PathBuf>,
    /// Vocabulary file (overrides tokenizer.path); trained from the manifest when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Iterations to run in this invocation; the schedule length is optim.total_iters.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides train.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 5)]
    beams: usize,
    /// Generated-token limit; defaults to the model's position count minus one.
    #[arg(long)]
    max_len: Option<usize>,
    /// Decode greedily instead of by beam search.
    #[arg(long)]
    greedy: bool,
    /// Print every returned hypothesis with its log-probability.
    #[arg(long)]
    all: bool,
    /// Write one attention overlay per emitted token into this directory.
    #[arg(long)]
    attend: Option<PathBuf>,
    /// Decoder layer whose cross-attention is exported (default: last).
    #[arg(long)]
    attention_layer: Option<usize>,
    /// Image id used in overlay names (default: the file stem).
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Trained checkpoint; omit with --random-init for a baseline.
    #[arg(long, required_unless_present = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Labeled manifest (JSONL of {id, image, label}).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Probe a randomly initialized backbone built from the configuration.
    #[arg(long)]
    random_init: bool,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "probe_report.json")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SynthKind {
    /// The 32 canonical scenes with terse captions.
    Overfit,
    /// Random scenes with five captions each.
    Scenes,
    /// Random scenes labeled by shape.
    Shapes,
    /// Canonical scenes with placement jitter, labeled by shape.
    Canonical,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Overfit)]
    kind: SynthKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter { .. } | Error::Schedule { .. } | Error::Tokenizer(_) => 2,
        Error::Ingest { .. } | Error::Schema(_) | Error::Io { .. } | Error::Checkpoint(_) => 3,
        Error::Numeric(_) | Error::Tensor(_) | Error::Optimizer(_) => 4,
        Error::Mismatch(_) => 5,
        Error::Protocol(_) => 6,
    }
}

fn config_help() -> String {
    let defaults = RunConfig::default().entries();
    let mut s = String::from("Configuration fields (set in --config or with --set key=value):\n");
    for (key, doc) in FIELD_DOCS {
        let value = defaults.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()).unwrap_or("");
        s.push_str(&format!("  {key} = {value}\n      {doc}\n"));
    }
    s
}

fn tokenizer_train(a: &TokenizerArgs) -> Result<(), Error> {
    let corpus: Vec<String> = match (&a.corpus, &a.manifest) {
        (Some(p), _) => std::fs::read_to_string(p)
            .map_err(|source| Error::Io { path: p.clone(), source })?
            .lines()
            .map(str::to_string)
            .collect(),
        (None, Some(m)) => load_manifest(m)?.into_iter().flat_map(|r| r.captions).collect(),
        (None, None) => return Err(Error::Config("--corpus or --manifest is required".into())),
    };
    if corpus.iter().all(|l| l.trim().is_empty()) {
        return Err(Error::Ingest { id: "corpus".into(), detail: "no captions".into() });
    }
    let vocab = train_bpe(&corpus, a.vocab_size)?;
    std::fs::write(&a.out, vocab.to_file_string()).map_err(|source| Error::Io { path: a.out.clone(), source })?;
    println!("vocab size {} merges {}", vocab.len(), vocab.merges().len());
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocabulary, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Vocabulary::from_file_str(&text)
}

fn cmd_train(a: &TrainArgs) -> Result<(), Error> {
    let mut run: Checkpoint<f32> = match &a.resume {
        Some(p) => {
            if a.config.config.is_some() || !a.config.sets.is_empty() || a.task.is_some() || a.seed.is_some() {
                log::warn!("resuming: configuration flags are ignored in favor of the checkpoint's");
            }
            Checkpoint::load(p)?
        }
        None => {
            let mut cfg = a.config.load()?;
            if let Some(m) = &a.manifest {
                cfg.data.manifest = m.display().to_string();
            }
            if let Some(m) = &a.probe_manifest {
                cfg.data.probe_manifest = m.display().to_string();
            }
            if let Some(v) = &a.vocab {
                cfg.tokenizer.path = v.display().to_string();
            }
            if let Some(t) = a.task {
                cfg.train.task = t.into();
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(o) = &a.out {
                cfg.train.out_dir = o.display().to_string();
            }
            cfg.validate()?;
            let vocab = if cfg.tokenizer.path.is_empty() {
                let records = load_manifest(Path::new(&cfg.data.manifest))?;
                let captions: Vec<&String> = records.iter().flat_map(|r| &r.captions).collect();
                train_bpe(&captions, cfg.tokenizer.vocab_size)?
            } else {
                load_vocab(Path::new(&cfg.tokenizer.path))?
            };
            Checkpoint::fresh(cfg, vocab)?
        }
    };
    if let Some(o) = &a.out {
        run.config.train.out_dir = o.display().to_string();
    }
    let cfg = run.config.clone();
    if cfg.data.manifest.is_empty() {
        return Err(Error::Config("no caption manifest (data.manifest or --manifest)".into()));
    }
    let records = load_manifest(Path::new(&cfg.data.manifest))?;
    let probe = if cfg.data.probe_manifest.is_empty() {
        None
    } else {
        Some(load_labeled_manifest(Path::new(&cfg.data.probe_manifest))?)
    };
    let out_dir = PathBuf::from(&cfg.train.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|source| Error::Io { path: out_dir.clone(), source })?;
    let vocab_path = out_dir.join("vocab.txt");
    std::fs::write(&vocab_path, run.vocab.to_file_string()).map_err(|source| Error::Io { path: vocab_path, source })?;
    let total = cfg.optim.total_iters;
    let until = a.iters.map_or(total, |n| (run.state.iteration + n).min(total));
    let start = run.state.iteration;
    let report = train(&mut run, &records, probe.as_deref(), until, &Outputs::to(&out_dir))?;
    let last = report.rows.last();
    println!(
        "trained iterations {start}..{until} of {total}; final loss {}; best probe metric {}",
        last.map_or("n/a".into(), |r| format!("{:.6}", r.loss)),
        run.state.best_metric.map_or("n/a".into(), |m| format!("{m:.6} at iteration {}", run.state.best_iter.unwrap_or(0))),
    );
    Ok(())
}

fn cmd_caption(a: &CaptionArgs) -> Result<(), Error> {
    let mut ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let raw = load_image(&a.image).map_err(|detail| Error::Ingest { id: a.image.display().to_string(), detail })?;
    let side = ck.config.data.image_side;
    if raw.shape()[1] != side || raw.shape()[2] != side {
        return Err(Error::Mismatch(format!(
            "image is {}×{} but the checkpoint was trained on {side}×{side}",
            raw.shape()[2],
            raw.shape()[1]
        )));
    }
    if ck.model.net.head.is_none() {
        return Err(Error::Mismatch(format!("a {:?} checkpoint has no caption decoder", ck.config.train.task)));
    }
    let image = eval_view(&raw, &ck.config.data)?;
    let max_len = a.max_len.unwrap_or(ck.config.data.max_len - 1);
    let hyps = {
        let mut scorer = ModelScorer::new(&mut ck.model, &image)?;
        if a.greedy {
            vec![greedy(&mut scorer, SOS, EOS, max_len)?]
        } else {
            beam_search(&mut scorer, SOS, EOS, a.beams, max_len)?
        }
    };
    let best = hyps.first().ok_or_else(|| Error::Numeric("decoding produced no hypothesis".into()))?;
    if a.all {
        for h in &hyps {
            println!("{:.6}\t{}", h.score, ck.vocab.decode(&h.tokens)?);
        }
    } else {
        println!("{}", ck.vocab.decode(&best.tokens)?);
    }
    if let Some(dir) = &a.attend {
        let maps = extract_attention(&mut ck.model, &image, &best.tokens, a.attention_layer)?;
        let id = a.id.clone().unwrap_or_else(|| {
            a.image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned())
        });
        let written = write_overlays(dir, &id, &raw, &maps, &ck.vocab)?;
        eprintln!("wrote {} overlays to {}", written.len(), dir.display());
    }
    Ok(())
}

fn cmd_probe(a: &ProbeArgs) -> Result<(), Error> {
    let (mut model, mut cfg) = match &a.checkpoint {
        Some(p) if !a.random_init => {
            let ck = Checkpoint::<f32>::load(p)?;
            (ck.model, ck.config)
        }
        _ => {
            let cfg = a.config.load()?;
            cfg.validate()?;
            let seed = a.seed.unwrap_or(cfg.train.seed);
            (Model::<f32>::new(&ModelConfig::from_run(&cfg, RESERVED.len() + 1), seed)?, cfg)
        }
    };
    if let Some(p) = a.protocol {
        cfg.probe.protocol = p.into();
    }
    if let Some(s) = a.seed {
        cfg.probe.seed = s;
    }
    let records = load_labeled_manifest(&a.manifest)?;
    let report = probe_backbone(&mut model, &records, &cfg.data, &cfg.probe)?;
    let name = match report.protocol {
        ProbeProtocol::Svm => "mAP",
        ProbeProtocol::Softmax => "top-1 accuracy",
    };
    println!("{name} {:.6}", report.metric);
    if let Some(c) = report.chosen_cost {
        println!("chosen cost {c}");
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Numeric(e.to_string()))?;
    std::fs::write(&a.out, json + "\n").map_err(|source| Error::Io { path: a.out.clone(), source })?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Error> {
    let path = match a.kind {
        SynthKind::Overfit => synth::write_caption_manifest(&a.out, &synth::overfit_corpus(a.side))?,
        SynthKind::Scenes => synth::write_caption_manifest(&a.out, &synth::scene_corpus(a.count, a.side, a.seed))?,
        SynthKind::Shapes => synth::write_labeled_manifest(&a.out, &synth::shape_labeled(a.count, a.side, a.seed))?,
        SynthKind::Canonical => {
            synth::write_labeled_manifest(&a.out, &synth::canonical_labeled(a.count, a.side, a.seed))?
        }
    };
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = config_help();
    let mut command = Cli::command();
    for name in ["tokenizer-train", "train", "caption", "probe", "synth"] {
        command = command.mut_subcommand(name, |c| c.after_long_help(help.clone()));
    }
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::TokenizerTrain(a) => tokenizer_train(a),
        Command::Train(a) => cmd_train(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
