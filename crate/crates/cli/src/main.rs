use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cmg::captioner::MetaFeatures;
use cmg::config::Config;
use cmg::corpus::tokenize;
use cmg::datagen::{generate_corpus, Corpus};
use cmg::metrics::score_corpus;
use cmg::trainer::{LossKind, Pipeline};
use cmg::{Error, Result};

/// Video captioning with cross-modal meta-concept and scene graphs.
#[derive(Parser, Debug)]
#[command(name = "cmg", version)]
struct Cli {
    /// TOML file overriding the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data generation and every training stage.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Run directory; every artifact is written below it.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/default")]
    out: PathBuf,
    /// Corpus directory [default: <out>/data].
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    #[command(flatten)]
    ablation: AblationFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct AblationFlags {
    /// Drop the meta-concept graph.
    #[arg(long, global = true)]
    no_meta: bool,
    /// Drop the frame-level scene graph.
    #[arg(long, global = true)]
    no_fg: bool,
    /// Drop the video-level scene graph.
    #[arg(long, global = true)]
    no_vg: bool,
    /// Build the video-level graph without predicate nodes.
    #[arg(long, global = true)]
    vg_no_pred: bool,
    /// Meta-concept node features.
    #[arg(long, global = true, value_enum, value_name = "KIND")]
    meta_features: Option<FeatureArg>,
    /// Neighbours per node in the meta-concept graph.
    #[arg(long, global = true, value_name = "J")]
    knn_j: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureArg {
    Visual,
    Semantic,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Xe,
    Scst,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Xe => LossKind::Xe,
            LossArg::Scst => LossKind::Scst,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Build the vocabulary and concept classes.
    BuildVocab,
    /// Train the attention meta-learner.
    TrainMeta,
    /// Export pseudo masks from the trained meta-learner.
    ExportMasks,
    /// Train the weakly supervised concept localizer.
    TrainLocalizer,
    /// Train the caption decoder.
    TrainCaptioner {
        #[arg(long, value_enum, default_value = "xe")]
        loss: LossArg,
    },
    /// Caption every video with the trained decoder.
    Generate {
        /// Beam width [default: from config].
        #[arg(long, value_name = "N")]
        beam: Option<usize>,
    },
    /// Score generated captions against the corpus references.
    Score {
        /// Captions JSON [default: <out>/captions.json].
        #[arg(long, value_name = "PATH")]
        captions: Option<PathBuf>,
    },
    /// Train the module-ablation grid and write ablation.json.
    Ablate,
    /// Run every stage not yet marked done.
    Recipe {
        #[arg(long, value_enum, default_value = "xe")]
        loss: LossArg,
    },
}

fn effective_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.generator.seed = seed;
    }
    let a = &cli.ablation;
    cfg.ablation.no_meta |= a.no_meta;
    cfg.ablation.no_fg |= a.no_fg;
    cfg.ablation.no_vg |= a.no_vg;
    cfg.ablation.vg_no_pred |= a.vg_no_pred;
    if let Some(f) = a.meta_features {
        cfg.ablation.meta_features = match f {
            FeatureArg::Visual => MetaFeatures::Visual,
            FeatureArg::Semantic => MetaFeatures::Semantic,
            FeatureArg::Both => MetaFeatures::Both,
        };
    }
    if let Some(j) = a.knn_j {
        cfg.graph.knn_j = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(x: &T) -> String {
    serde_json::to_string_pretty(x).expect("report serialises")
}

fn score(corpus: &Corpus, path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let captions: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    if captions.is_empty() {
        return Err(Error::validation("no captions to score"));
    }
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for (id, caption) in &captions {
        let video = corpus
            .video(id)
            .ok_or_else(|| Error::validation(format!("video `{id}` is not in the corpus")))?;
        cands.push(tokenize(caption));
        refs.push(video.captions.iter().map(|c| tokenize(c)).collect());
    }
    Ok(to_json(&score_corpus(&cands, &refs)?))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let out = &cli.out;
    cfg.save(&out.join("config.toml"))?;
    let data = cli.data.clone().unwrap_or_else(|| out.join("data"));
    if let Command::GenData = cli.command {
        let corpus = generate_corpus(&cfg.generator, &data)?;
        println!("wrote {} videos to {}", corpus.videos.len(), data.display());
        return Ok(());
    }
    let corpus = Corpus::load(&data)?;
    let p = Pipeline::new(cfg, corpus, out);
    match cli.command {
        Command::GenData => unreachable!("handled above"),
        Command::BuildVocab => {
            let text = p.build_vocab()?;
            println!("vocabulary {} tokens, {} concept classes", text.vocab.len(), text.classes.len());
        }
        Command::TrainMeta => {
            p.train_meta()?;
            println!("meta-learner saved under {}", p.stage_dir(cmg::trainer::STAGE_META).display());
        }
        Command::ExportMasks => {
            let model = p.load_meta()?;
            let masks = p.export_masks(&model)?;
            println!("{} masks, {} lexicon tokens without a class", masks.masks.len(), masks.skipped);
        }
        Command::TrainLocalizer => println!("{}", to_json(&p.train_localizer()?.1)),
        Command::TrainCaptioner { loss } => println!("{}", to_json(&p.train_captioner(loss.into())?)),
        Command::Generate { beam } => {
            let captions = p.generate(beam.unwrap_or(p.config.decoder.beam))?;
            write(&out.join("captions.json"), &captions)?;
            println!("{captions}");
        }
        Command::Score { captions } => {
            let path = captions.unwrap_or_else(|| out.join("captions.json"));
            let report = score(&p.corpus, &path)?;
            write(&out.join("scores.json"), &report)?;
            println!("{report}");
        }
        Command::Ablate => {
            if !p.stage_done(cmg::trainer::STAGE_META) {
                p.stage_meta()?;
            }
            if !p.stage_done(cmg::trainer::STAGE_LOCALIZER) {
                p.train_localizer()?;
            }
            println!("{}", to_json(&p.ablate()?));
        }
        Command::Recipe { loss } => println!("{}", to_json(&p.run_recipe(loss.into())?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
