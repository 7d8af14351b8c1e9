use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use spanclean::config::{Format, Preset, RunConfig};
use spanclean::corpus::{dataset_stats, enumerate_samples, parse_bio, parse_spans, write_spans, LabelSet, SpanDataset};
use spanclean::distant::{annotate, generate_synthetic, inject_noise, Gazetteer, SynthConfig};
use spanclean::dynamics::{read_dynamics, write_dynamics};
use spanclean::evaluation::{audit_noise, export_datamap, format_audit, score_spans, ScoreReport};
use spanclean::model::{load_checkpoint, save_checkpoint, Checkpoint};
use spanclean::pipeline::{run_dynclean, train_final, CleaningReport, FinalModel};
use spanclean::{Error, Result};

/// Span-level cleaning of distantly supervised NER corpora.
#[derive(Debug, Parser)]
#[command(name = "spanclean", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset: conll-preset or small-corpus-preset.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate thresholds, track training dynamics and filter the corpus.
    Clean {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        clean: CleanArgs,
    },
    /// Train a span classifier on a (cleaned) corpus.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        clean: CleanArgs,
    },
    /// Score predictions, apply a checkpoint, or audit annotation noise.
    Eval {
        /// Predicted spans (span format).
        #[arg(long, requires = "gold")]
        pred: Option<PathBuf>,
        /// Reference spans (span format, `spans` layer).
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Compare the distant layer of a corpus with its gold layer.
        #[arg(long, conflicts_with_all = ["pred", "model"])]
        audit: Option<PathBuf>,
        /// Checkpoint to apply to --gold.
        #[arg(long, requires = "gold", conflicts_with = "pred")]
        model: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with gold annotation.
    Synth {
        #[arg(long)]
        sentences: Option<usize>,
        #[arg(long)]
        test_sentences: Option<usize>,
    },
    /// Corrupt the distant layer of a gold-annotated corpus.
    Inject {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        fn_rate: Option<f64>,
        #[arg(long)]
        fp_type_rate: Option<f64>,
        #[arg(long)]
        fp_spurious_rate: Option<f64>,
    },
    /// Annotate a corpus by gazetteer matching; existing spans become gold.
    Annotate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Export the data map of a dynamics dump.
    Datamap {
        #[arg(long)]
        dynamics: PathBuf,
    },
    /// Print corpus statistics.
    Stats {
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    /// Gold annotation for --train, in the same format.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    #[arg(long, value_parser = ["bio", "spans"])]
    format: Option<String>,
}

#[derive(Debug, Args)]
struct CleanArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    final_epochs: Option<usize>,
    #[arg(long)]
    k_pos: Option<f64>,
    #[arg(long)]
    k_neg: Option<f64>,
    /// Enable or disable negative selection (true/false).
    #[arg(long)]
    topneg: Option<bool>,
    #[arg(long)]
    topneg_ratio: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.data;
        for (slot, flag) in [
            (&mut d.train, &self.train),
            (&mut d.gold, &self.gold),
            (&mut d.test, &self.test),
            (&mut d.gazetteer, &self.gazetteer),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        match self.format.as_deref() {
            Some("bio") => d.format = Format::Bio,
            Some("spans") => d.format = Format::Spans,
            _ => {}
        }
    }
}

impl CleanArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let c = &mut cfg.clean;
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if self.final_epochs.is_some() {
            c.final_epochs = self.final_epochs;
        }
        if let Some(v) = self.k_pos {
            c.k_pos = v;
        }
        if let Some(v) = self.k_neg {
            c.k_neg = v;
        }
        if let Some(v) = self.topneg {
            c.topneg = v;
        }
        if let Some(v) = self.topneg_ratio {
            c.topneg_ratio = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let preset = cli.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut cfg = RunConfig::load(cli.config.as_deref(), preset)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out.clone_from(out);
    }
    match &cli.command {
        Command::Clean { data, clean } | Command::Train { data, clean } => {
            data.apply(&mut cfg);
            clean.apply(&mut cfg);
        }
        Command::Inject {
            data,
            fn_rate,
            fp_type_rate,
            fp_spurious_rate,
        } => {
            data.apply(&mut cfg);
            if let Some(v) = fn_rate {
                cfg.noise.fn_rate = *v;
            }
            if let Some(v) = fp_type_rate {
                cfg.noise.fp_type_rate = *v;
            }
            if let Some(v) = fp_spurious_rate {
                cfg.noise.fp_spurious_rate = *v;
            }
        }
        Command::Annotate { data } | Command::Stats { data } => data.apply(&mut cfg),
        Command::Synth {
            sentences,
            test_sentences,
        } => {
            if let Some(n) = sentences {
                cfg.synth.num_sentences = *n;
            }
            if let Some(n) = test_sentences {
                cfg.synth_splits.test_sentences = *n;
            }
        }
        Command::Eval { .. } | Command::Datamap { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Clean { .. } => cmd_clean(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Eval {
            pred,
            gold,
            audit,
            model,
        } => cmd_eval(&cfg, pred, gold, audit, model),
        Command::Synth { .. } => cmd_synth(&cfg),
        Command::Inject { .. } => cmd_inject(&cfg),
        Command::Annotate { .. } => cmd_annotate(&cfg),
        Command::Datamap { dynamics } => cmd_datamap(&cfg, &dynamics),
        Command::Stats { .. } => cmd_stats(&cfg),
    }
}

// ---------------------------------------------------------------------------
// I/O helpers
// ---------------------------------------------------------------------------

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn parse(text: &str, format: Format, labels: Option<&LabelSet>) -> Result<SpanDataset> {
    match format {
        Format::Bio => parse_bio(text, labels),
        Format::Spans => parse_spans(text, labels),
    }
}

fn union_labels<'a>(sets: impl IntoIterator<Item = &'a LabelSet>) -> Result<LabelSet> {
    let names: BTreeSet<&str> = sets
        .into_iter()
        .flat_map(|l| l.types().iter().map(String::as_str))
        .collect();
    LabelSet::from_names(names)
}

/// Loads `data.train` (plus `data.gold` when configured). The label set is
/// the union of both files' types.
fn load_train(cfg: &RunConfig) -> Result<SpanDataset> {
    let train_text = read(cfg.require_path("data.train", &cfg.data.train)?)?;
    let fmt = cfg.data.format;
    let Some(gold_path) = &cfg.data.gold else {
        return parse(&train_text, fmt, None);
    };
    let gold_text = read(cfg.require_path("data.gold", &Some(gold_path.clone()))?)?;
    let labels = union_labels([
        &parse(&train_text, fmt, None)?.label_set,
        &parse(&gold_text, fmt, None)?.label_set,
    ])?;
    let mut ds = parse(&train_text, fmt, Some(&labels))?;
    ds.attach_gold(&parse(&gold_text, fmt, Some(&labels))?)?;
    Ok(ds)
}

fn load_test(cfg: &RunConfig, labels: &LabelSet) -> Result<Option<SpanDataset>> {
    match &cfg.data.test {
        None => Ok(None),
        Some(p) => {
            let text = read(cfg.require_path("data.test", &Some(p.clone()))?)?;
            parse(&text, cfg.data.format, Some(labels)).map(Some)
        }
    }
}

fn print_score(report: &ScoreReport) {
    for (name, s) in &report.per_class {
        println!("{name:<12} P {:.3} R {:.3} F1 {:.3}", s.precision, s.recall, s.f1);
    }
    let m = &report.micro;
    println!("{:<12} P {:.3} R {:.3} F1 {:.3}", "micro", m.precision, m.recall, m.f1);
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CleanReportFile<'a> {
    run_config: &'a RunConfig,
    report: &'a CleaningReport,
}

fn cmd_clean(cfg: &RunConfig) -> Result<()> {
    let ds = load_train(cfg)?;
    let output = run_dynclean(&ds, &cfg.clean, cfg.seed)?;
    let out = &cfg.out;
    write(out, "cleaned.jsonl", write_spans(&output.cleaned))?;
    write(
        out,
        "report.json",
        to_json(&CleanReportFile {
            run_config: cfg,
            report: &output.report,
        })?,
    )?;
    write(out, "thresholds.json", to_json(&output.report.thresholds)?)?;
    write(
        out,
        "dynamics_threshold.jsonl",
        write_dynamics(&output.threshold_dynamics),
    )?;
    write(out, "dynamics_main.jsonl", write_dynamics(&output.main_dynamics))?;
    println!("{}", output.report.summary());
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    run_config: &'a RunConfig,
    epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<ScoreReport>,
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = load_train(cfg)?;
    let test = load_test(cfg, &ds.label_set)?;
    let (model, score) = train_final(&ds, test.as_ref(), &cfg.clean, cfg.seed)?;
    let ckpt = Checkpoint::new(
        model.config,
        cfg.seed,
        model.epochs,
        model.vocab.clone(),
        ds.label_set.clone(),
        model.params.clone(),
    );
    fs::create_dir_all(&cfg.out)?;
    save_checkpoint(&cfg.out.join("model.ckpt"), &ckpt)?;
    if let Some(s) = &score {
        print_score(s);
    }
    write(
        &cfg.out,
        "metrics.json",
        to_json(&TrainMetrics {
            run_config: cfg,
            epochs: model.epochs,
            test: score,
        })?,
    )?;
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    pred: Option<PathBuf>,
    gold: Option<PathBuf>,
    audit: Option<PathBuf>,
    model: Option<PathBuf>,
) -> Result<()> {
    if let Some(path) = audit {
        let ds = parse(&read(&path)?, cfg.data.format, None)?;
        let rows = audit_noise(&ds)?;
        print!("{}", format_audit(&rows));
        write(&cfg.out, "audit.json", to_json(&rows)?)?;
        return Ok(());
    }
    let gold_path = gold.ok_or_else(|| Error::config("eval needs --gold (with --pred or --model) or --audit"))?;
    let report = if let Some(ckpt_path) = model {
        let ckpt = load_checkpoint(&ckpt_path)?;
        let gold = parse(&read(&gold_path)?, cfg.data.format, Some(&ckpt.header.labels))?;
        let fm = FinalModel {
            params: ckpt.params,
            vocab: ckpt.header.vocab,
            config: ckpt.header.config,
            epochs: ckpt.header.epoch,
        };
        fm.evaluate(&gold)?
    } else {
        let pred_path = pred.ok_or_else(|| Error::config("eval needs --pred or --model alongside --gold"))?;
        let pred_text = read(&pred_path)?;
        let gold_text = read(&gold_path)?;
        let fmt = cfg.data.format;
        let labels = union_labels([
            &parse(&pred_text, fmt, None)?.label_set,
            &parse(&gold_text, fmt, None)?.label_set,
        ])?;
        let p = parse(&pred_text, fmt, Some(&labels))?;
        let g = parse(&gold_text, fmt, Some(&labels))?;
        for (i, (a, b)) in p.sentences.iter().zip(&g.sentences).enumerate() {
            if a.tokens != b.tokens {
                return Err(Error::Data(format!("sentence {i}: predicted and gold tokens differ")));
            }
        }
        let spans = |d: &SpanDataset| d.sentences.iter().map(|s| s.distant_spans.clone()).collect::<Vec<_>>();
        score_spans(&spans(&p), &spans(&g), &labels).map_err(|e| match e {
            Error::Contract(m) => Error::Data(m),
            e => e,
        })?
    };
    print_score(&report);
    write(&cfg.out, "eval.json", to_json(&report)?)?;
    Ok(())
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let (train, book) = generate_synthetic(&cfg.synth_config())?;
    let test_cfg = SynthConfig {
        num_sentences: cfg.synth_splits.test_sentences,
        seed: cfg.seed.wrapping_add(1000),
        ..cfg.synth
    };
    let (test, _) = generate_synthetic(&test_cfg)?;
    write(&cfg.out, "train.jsonl", write_spans(&train))?;
    write(&cfg.out, "test.jsonl", write_spans(&test))?;
    println!("{} sentences, {} entities", book.sentences, book.total_entities());
    Ok(())
}

fn cmd_inject(cfg: &RunConfig) -> Result<()> {
    let ds = load_train(cfg)?;
    let (noisy, ledger) = inject_noise(&ds, &cfg.noise_spec())?;
    write(&cfg.out, "noisy.jsonl", write_spans(&noisy))?;
    write(&cfg.out, "ledger.jsonl", ledger.to_jsonl(&noisy.label_set))?;
    print!("{}", format_audit(&audit_noise(&noisy)?));
    Ok(())
}

fn cmd_annotate(cfg: &RunConfig) -> Result<()> {
    let input_text = read(cfg.require_path("data.train", &cfg.data.train)?)?;
    let gaz_text = read(cfg.require_path("data.gazetteer", &cfg.data.gazetteer)?)?;
    let input = parse(&input_text, cfg.data.format, None)?;
    let gaz_types: BTreeSet<String> = gaz_text
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(_, ty)| ty.trim().to_string())
        .collect();
    let gaz_labels = LabelSet::new(gaz_types)?;
    let labels = union_labels([&input.label_set, &gaz_labels])?;
    let mut input = parse(&input_text, cfg.data.format, Some(&labels))?;
    for s in &mut input.sentences {
        if s.gold_spans.is_none() {
            s.gold_spans = Some(std::mem::take(&mut s.distant_spans));
        }
    }
    let gazetteer = Gazetteer::parse(&gaz_text, &labels)?;
    let annotated = annotate(&input, &gazetteer);
    write(&cfg.out, "annotated.jsonl", write_spans(&annotated))?;
    let spans: usize = annotated.sentences.iter().map(|s| s.distant_spans.len()).sum();
    println!(
        "{} sentences, {spans} spans from {} gazetteer entries",
        annotated.sentences.len(),
        gazetteer.len()
    );
    Ok(())
}

fn cmd_datamap(cfg: &RunConfig, dynamics: &Path) -> Result<()> {
    let records = read_dynamics(&read(dynamics)?)?;
    fs::create_dir_all(&cfg.out)?;
    export_datamap(&records, &cfg.out.join("datamap.csv"), &cfg.out.join("datamap.svg"))?;
    println!("{} samples", records.len());
    Ok(())
}

fn cmd_stats(cfg: &RunConfig) -> Result<()> {
    let ds = enumerate_samples(&load_train(cfg)?, cfg.clean.model.max_width);
    print!("{}", to_json(&dataset_stats(&ds))?);
    Ok(())
}
