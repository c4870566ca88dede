use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ini::Ini;

use rsknet::accounting::{count_params, reference_table, table_gaps, Convention};
use rsknet::backbone::{ModelConfig, Network};
use rsknet::checkpoint::{network_from_container, Container};
use rsknet::corpus::{gen_toy_corpus, write_corpus, ToyConfig};
use rsknet::frontend::{FeatureConfig, Frontend};
use rsknet::gradsuite::{run_suite, GRAD_TOL};
use rsknet::pipeline::{
    centering_mean, embed_all, extract_features, read_manifest, score_trials, speaker_labels, training_examples,
};
use rsknet::scoring::{
    det_points, det_csv, embeddings_from_container, embeddings_to_container, evaluate, format_scores, label_scores,
    parse_scores, parse_trials, read_mean, DcfParams,
};
use rsknet::train::{TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "rsknet", version, about = "Speaker embedding training, extraction and scoring")]
struct Cli {
    /// INI file with [model], [features], [train] and [paths] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one setting, `section.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print parameter totals of a model configuration.
    ParamReport(ParamReportArgs),
    /// Run the layer gradient suite against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic speaker corpus with manifests and trials.
    GenToy(GenToyArgs),
    /// Train on a manifest, writing checkpoints and the loss history.
    Train(TrainArgs),
    /// Extract utterance embeddings with a trained checkpoint.
    Extract(ExtractArgs),
    /// Score a trial list against an embedding archive.
    Score(ScoreArgs),
    /// Print EER and MinDCF of a score file.
    Eval(EvalArgs),
    /// Write the DET curve of a score file as CSV.
    Det(DetArgs),
}

#[derive(Args)]
struct ParamReportArgs {
    /// Named preset; defaults to the [model] section or rsknet_mtsp.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    per_layer: bool,
    #[arg(long)]
    csv: bool,
    /// Count every reference configuration against its reported size.
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 50)]
    utts: usize,
    /// Extra utterances per speaker reserved for trials.
    #[arg(long, default_value_t = 6)]
    heldout: usize,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for checkpoints, the loss history and the centering mean.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip embedding the training set for the centering mean.
    #[arg(long)]
    no_mean: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Centering mean: a text vector, or an embedding archive to average.
    #[arg(long)]
    mean: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Labels for an unlabeled score file.
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    p_target: f64,
    #[arg(long, default_value_t = 1.0)]
    c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    c_fa: f64,
}

#[derive(Args)]
struct DetArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad invocation or configuration.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A check that ran but did not meet its tolerance.
#[derive(Debug)]
struct NumericFailure(String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    if e.downcast_ref::<NumericFailure>().is_some() {
        return 3;
    }
    match e.downcast_ref::<rsknet::Error>() {
        Some(rsknet::Error::Config(_)) => 1,
        Some(rsknet::Error::Numerical(_) | rsknet::Error::Degenerate(_)) => 3,
        _ => 2,
    }
}

const SECTIONS: [&str; 4] = ["model", "features", "train", "paths"];
const PATH_KEYS: [&str; 8] = ["manifest", "trials", "checkpoint", "embeddings", "scores", "mean", "out", "det"];

/// Settings merged from the config file and `--set` overrides.
#[derive(Default)]
struct Settings {
    sections: BTreeMap<String, Vec<(String, String)>>,
}

impl Settings {
    fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = file {
            let ini = Ini::load_from_file(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            for (section, props) in ini.iter() {
                let Some(section) = section else {
                    if props.iter().next().is_some() {
                        return Err(usage(format!("{}: settings must sit inside a section", path.display())));
                    }
                    continue;
                };
                for (k, v) in props.iter() {
                    s.push(section, k, v)?;
                }
            }
        }
        for o in overrides {
            let (lhs, v) = o.split_once('=').ok_or_else(|| usage(format!("--set '{o}' is not SECTION.KEY=VALUE")))?;
            let (section, k) =
                lhs.split_once('.').ok_or_else(|| usage(format!("--set '{o}' is not SECTION.KEY=VALUE")))?;
            s.push(section.trim(), k.trim(), v.trim())?;
        }
        s.model(None)?;
        s.features()?;
        s.train()?;
        Ok(s)
    }

    fn push(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        if !SECTIONS.contains(&section) {
            return Err(usage(format!("unknown config section [{section}]")));
        }
        if section == "paths" && !PATH_KEYS.contains(&key) {
            return Err(usage(format!("unknown paths key '{key}'")));
        }
        self.sections.entry(section.to_string()).or_default().push((key.to_string(), value.to_string()));
        Ok(())
    }

    fn entries(&self, section: &str) -> &[(String, String)] {
        self.sections.get(section).map_or(&[], Vec::as_slice)
    }

    fn model(&self, preset: Option<&str>) -> Result<ModelConfig> {
        let entries = self.entries("model");
        let file_preset = entries.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
        let mut cfg = ModelConfig::preset(preset.or(file_preset).unwrap_or("rsknet_mtsp"))?;
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn features(&self) -> Result<FeatureConfig> {
        let mut cfg = FeatureConfig::default();
        for (k, v) in self.entries("features") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn train(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in self.entries("train") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// A path from its flag, falling back to the [paths] section.
    fn path(&self, flag: Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.or_else(|| self.entries("paths").iter().rev().find(|(k, _)| k == key).map(|(_, v)| PathBuf::from(v)))
    }

    fn require(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.path(flag, key).ok_or_else(|| usage(format!("missing --{key} (or paths.{key} in the config)")))
    }
}

fn param_report(s: &Settings, a: ParamReportArgs) -> Result<()> {
    if a.table {
        let rows: Vec<_> = reference_table()
            .into_iter()
            .map(|r| Ok((count_params(&r.config)?.totals, r)))
            .collect::<rsknet::Result<Vec<_>>>()?
            .into_iter()
            .map(|(t, r)| (r, t))
            .collect();
        if a.csv {
            println!("config,reported_m,core,core_bn,core_bn_classifier");
            for (r, t) in &rows {
                println!("{},{},{},{},{}", r.name, r.millions, t.core, t.core_bn, t.core_bn_classifier);
            }
            return Ok(());
        }
        println!("{:<18} {:>9} {:>12} {:>12} {:>20}", "config", "reported", "core", "core+bn", "core+bn+classifier");
        for (r, t) in &rows {
            println!(
                "{:<18} {:>8.1}M {:>12} {:>12} {:>20}",
                r.name, r.millions, t.core, t.core_bn, t.core_bn_classifier
            );
        }
        println!();
        for c in Convention::ALL {
            let gaps = table_gaps(&rows, c);
            let worst = gaps.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            let within = gaps.iter().filter(|g| g.abs() <= 0.05).count();
            println!("{:<20} {within}/{} rows within 5%, worst gap {:.1}%", c.label(), gaps.len(), 100.0 * worst);
        }
        return Ok(());
    }
    let cfg = s.model(a.model.as_deref())?;
    let report = count_params(&cfg)?;
    if a.csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_text(a.per_layer));
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = run_suite(a.seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<16} {:>5} params  max rel error {:.3e}  {status}", r.name, r.report.checked, r.report.max_rel_error);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(NumericFailure(format!("gradient error above {GRAD_TOL:e} in: {}", failed.join(", "))).into())
    }
}

fn gen_toy(a: GenToyArgs) -> Result<()> {
    let cfg = ToyConfig {
        n_speakers: a.speakers,
        utts_per_speaker: a.utts,
        heldout_per_speaker: a.heldout,
        n_trials: a.trials,
        seed: a.seed,
        ..ToyConfig::default()
    };
    let corpus = gen_toy_corpus(&cfg)?;
    let paths = write_corpus(&corpus, &a.out)?;
    println!("train manifest   {}", paths.train_manifest.display());
    println!("heldout manifest {}", paths.heldout_manifest.display());
    println!("trials           {}", paths.trials.display());
    Ok(())
}

fn write_mean(path: &Path, mean: &[f64]) -> Result<()> {
    let text: Vec<String> = mean.iter().map(|v| format!("{v:?}")).collect();
    fs::write(path, text.join("\n") + "\n").with_context(|| path.display().to_string())
}

fn train(s: &Settings, a: TrainArgs) -> Result<()> {
    let manifest = s.require(a.manifest, "manifest")?;
    let out = s.require(a.out, "out")?;
    let entries = read_manifest(&manifest)?;
    let frontend = Frontend::new(&s.features()?)?;
    let features = extract_features(&frontend, &entries, a.workers)?;
    let (_, speakers) = speaker_labels(&entries);
    let examples = training_examples(&entries, features);

    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::from_container(&Container::load(p)?)?;
            if let Some(e) = a.epochs {
                t.cfg.max_epochs = e;
            }
            t
        }
        None => {
            let mut cfg = s.train()?;
            if let Some(e) = a.epochs {
                cfg.max_epochs = e;
            }
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let mut model = s.model(None)?;
            model.num_classes = speakers.len();
            Trainer::new(Network::new(model, cfg.seed)?, cfg)?
        }
    };
    if trainer.net.classifier.classes() != speakers.len() {
        return Err(usage(format!(
            "checkpoint has {} classes but the manifest names {} speakers",
            trainer.net.classifier.classes(),
            speakers.len()
        )));
    }
    let ckpt_dir = out.join("checkpoints");
    let written = trainer.run(&examples, Some(&ckpt_dir), |e| {
        println!(
            "epoch {:>3}  lr {:<8} train {:.5}  val {:.5}",
            e.epoch, e.lr, e.train_loss, e.val_loss
        )
    })?;

    let st = &trainer.state;
    let mut csv = String::from("epoch,lr,train_loss,val_loss\n");
    for i in 0..st.loss_history.len() {
        csv.push_str(&format!("{},{},{},{}\n", i + 1, st.lr_history[i], st.loss_history[i], st.val_history[i]));
    }
    fs::write(out.join("loss_history.csv"), csv)?;
    let final_path = out.join("final.ckpt");
    trainer.to_container().save(&final_path)?;
    println!("checkpoints {} written, final model {}", written.len(), final_path.display());

    if !a.no_mean {
        let embs = embed_all(&trainer.net, &examples.iter().map(|e| e.features.clone()).collect::<Vec<_>>(), a.workers)?;
        let mean_path = out.join("mean.txt");
        write_mean(&mean_path, &centering_mean(&embs)?)?;
        println!("centering mean {}", mean_path.display());
    }
    Ok(())
}

fn extract(s: &Settings, a: ExtractArgs) -> Result<()> {
    let manifest = s.require(a.manifest, "manifest")?;
    let ckpt = s.require(a.checkpoint, "checkpoint")?;
    let out = s.require(a.out, "embeddings")?;
    let net: Network<f32> = network_from_container(&Container::load(&ckpt)?)?;
    let entries = read_manifest(&manifest)?;
    let frontend = Frontend::new(&s.features()?)?;
    let features = extract_features(&frontend, &entries, a.workers)?;
    let embs = embed_all(&net, &features, a.workers)?;
    embeddings_to_container(entries.iter().map(|e| e.id.as_str()).zip(embs.iter().map(Vec::as_slice))).save(&out)?;
    println!("{} embeddings of dimension {} written to {}", embs.len(), net.head.out_dim(), out.display());
    Ok(())
}

fn load_mean(path: &Path) -> Result<Vec<f64>> {
    if let Ok(c) = Container::load(path) {
        if c.kind() == Some("embeddings") {
            let all: Vec<Vec<f64>> = embeddings_from_container(&c)?.into_values().collect();
            return Ok(centering_mean(&all)?);
        }
    }
    Ok(read_mean(path)?)
}

fn score(s: &Settings, a: ScoreArgs) -> Result<()> {
    let trials_path = s.require(a.trials, "trials")?;
    let emb_path = s.require(a.embeddings, "embeddings")?;
    let out = s.require(a.out, "scores")?;
    let trials = parse_trials(&fs::read_to_string(&trials_path).with_context(|| trials_path.display().to_string())?)?;
    let embs = embeddings_from_container(&Container::load(&emb_path)?)?;
    let mean = s.path(a.mean, "mean").map(|p| load_mean(&p)).transpose()?;
    let scores = score_trials(&embs, &trials, mean.as_deref(), a.workers)?;
    fs::write(&out, format_scores(&scores)).with_context(|| out.display().to_string())?;
    println!("{} scores written to {}", scores.len(), out.display());
    Ok(())
}

fn labeled_scores(s: &Settings, scores: Option<PathBuf>, trials: Option<PathBuf>) -> Result<(Vec<f64>, Vec<bool>)> {
    let path = s.require(scores, "scores")?;
    let parsed = parse_scores(&fs::read_to_string(&path).with_context(|| path.display().to_string())?)?;
    let trials = match s.path(trials, "trials") {
        Some(p) => Some(parse_trials(&fs::read_to_string(&p).with_context(|| p.display().to_string())?)?),
        None => None,
    };
    Ok(label_scores(&parsed, trials.as_deref())?)
}

fn eval(s: &Settings, a: EvalArgs) -> Result<()> {
    let (scores, labels) = labeled_scores(s, a.scores, a.trials)?;
    let params = DcfParams { c_fr: a.c_miss, c_fa: a.c_fa, p_target: a.p_target };
    if !(0.0 < params.p_target && params.p_target < 1.0) || params.c_fr <= 0.0 || params.c_fa <= 0.0 {
        return Err(usage("need 0 < p_target < 1 and positive costs"));
    }
    let r = evaluate(&scores, &labels, &params)?;
    let nt = labels.iter().filter(|&&l| l).count();
    println!("trials   {} ({} target, {} nontarget)", labels.len(), nt, labels.len() - nt);
    println!("EER      {:.4}%", r.eer);
    println!("MinDCF   {:.4}  (p_target {}, c_miss {}, c_fa {})", r.min_dcf, params.p_target, params.c_fr, params.c_fa);
    Ok(())
}

fn det(s: &Settings, a: DetArgs) -> Result<()> {
    let (scores, labels) = labeled_scores(s, a.scores, a.trials)?;
    let csv = det_csv(&det_points(&scores, &labels)?);
    match s.path(a.out, "det") {
        Some(p) => fs::write(&p, csv).with_context(|| p.display().to_string())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let s = Settings::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::ParamReport(a) => param_report(&s, a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenToy(a) => gen_toy(a),
        Command::Train(a) => train(&s, a),
        Command::Extract(a) => extract(&s, a),
        Command::Score(a) => score(&s, a),
        Command::Eval(a) => eval(&s, a),
        Command::Det(a) => det(&s, a),
    }
}

fn main() -> ExitCode {
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
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
