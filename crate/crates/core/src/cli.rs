//! Command-line front end: synthetic data, training, translation, evaluation
//! and gradient checking.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::corpus::{self, make_synthetic, Batch, ParallelCorpus, SyntheticTask};
use crate::error::{Error, Result};
use crate::evaluate::{self, BleuReport, DEFAULT_BOUNDARIES};
use crate::gradcheck::{finite_difference_check, GradCheckReport};
use crate::model::{max_output_len, Mode, Model, ModelDims};
use crate::params::NoiseSource;
use crate::tensor::Precision;
use crate::training::{self, format_epoch_log, format_step_log, LossOptions, TrainConfig, Trainer};

pub const VERSION: &str = concat!("vnmt-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "vnmt", version, about = "Variational neural machine translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy parallel corpus.
    MakeSynthetic(MakeSyntheticArgs),
    /// Train a model and write checkpoints and logs.
    Train(TrainArgs),
    /// Translate a file line by line with beam search.
    Translate(TranslateArgs),
    /// Score and analyse translations.
    Evaluate {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    #[arg(long, default_value = "copy")]
    pub task: SyntheticTask,
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    /// Number of distinct content tokens.
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_src: PathBuf,
    #[arg(long)]
    pub out_tgt: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, requires = "dev_tgt")]
    pub dev_src: Option<PathBuf>,
    #[arg(long, requires = "dev_src")]
    pub dev_tgt: Option<PathBuf>,
    /// Directory for checkpoints, logs and the run manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with any subset of the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in defaults: `desk` or `paper`.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Sets every layer width at once.
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub kl_warmup_steps: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Copy every matching parameter (and the vocabularies) from a checkpoint.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub beam: usize,
    #[arg(long, default_value_t = 2)]
    pub max_len_factor: usize,
    /// Defaults to the mode the checkpoint was trained in.
    #[arg(long)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Corpus BLEU-4.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        /// One file per reference set.
        #[arg(long = "ref", required = true, num_args = 1..)]
        refs: Vec<PathBuf>,
        #[arg(long)]
        smooth: bool,
        /// Also write a tab-separated report here.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Paired bootstrap significance test of two systems.
    Bootstrap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long = "ref", required = true, num_args = 1..)]
        refs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        smooth: bool,
    },
    /// BLEU per source-length bucket.
    Buckets {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref", required = true, num_args = 1..)]
        refs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BOUNDARIES)]
        boundaries: Vec<usize>,
        #[arg(long)]
        smooth: bool,
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Join neighbouring sentences into a long-input test set.
    Concat {
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long)]
        out_src: PathBuf,
        #[arg(long)]
        out_ref: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "vnmt")]
    pub mode: Mode,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Layer width, at most 8.
    #[arg(long, default_value_t = 4)]
    pub dims: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// What was run, on what, with which settings, and when.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub settings: BTreeMap<String, String>,
    pub config: Option<TrainConfig>,
}

impl RunManifest {
    fn start(command: &str, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
            started_unix: unix_now(),
            finished_unix: 0,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            settings: BTreeMap::new(),
            config: None,
        }
    }

    fn input(&mut self, key: &str, path: &Path) -> &mut Self {
        self.inputs.insert(key.to_string(), path.display().to_string());
        self
    }

    fn output(&mut self, key: &str, path: &Path) -> &mut Self {
        self.outputs.insert(key.to_string(), path.display().to_string());
        self
    }

    fn setting(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.settings.insert(key.to_string(), value.to_string());
        self
    }

    fn finish(&mut self, path: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        let text = toml::to_string(self).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// `<file>.manifest.toml` beside an output file.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    output.with_file_name(name)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn aligned(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Ingestion(format!("{what}: {a} vs {b} lines")));
    }
    Ok(())
}

fn read_refs(paths: &[PathBuf], n: usize) -> Result<Vec<Vec<String>>> {
    let files = paths.iter().map(|p| read_lines(p)).collect::<Result<Vec<_>>>()?;
    for f in &files {
        aligned("hypotheses and references differ in length", n, f.len())?;
    }
    evaluate::reference_sets(&files)
}

/// Runs one command, printing reports to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic(a) => cmd_make_synthetic(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Translate(a) => cmd_translate(&a),
        Command::Evaluate { command } => cmd_evaluate(&command),
        Command::Gradcheck(a) => {
            let report = run_gradcheck(a.mode, a.dims, a.step, a.tolerance, a.seed)?;
            print!("{}", format_gradcheck(&report));
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Numerical {
                    batch: 0,
                    detail: format!(
                        "gradient check failed: max relative error {:e} > {:e}",
                        report.max_rel_error(),
                        report.tolerance
                    ),
                })
            }
        }
    }
}

pub fn cmd_make_synthetic(a: &MakeSyntheticArgs) -> Result<()> {
    let mut manifest = RunManifest::start("make-synthetic", Some(a.seed));
    let corpus = make_synthetic(a.task, a.pairs, a.vocab, a.min_len, a.max_len, a.seed)?;
    corpus.write(&a.out_src, &a.out_tgt)?;
    manifest
        .output("src", &a.out_src)
        .output("tgt", &a.out_tgt)
        .setting("task", format!("{:?}", a.task).to_lowercase())
        .setting("pairs", a.pairs)
        .setting("vocab", a.vocab)
        .setting("min_len", a.min_len)
        .setting("max_len", a.max_len);
    manifest.finish(&manifest_path(&a.out_src))
}

/// Defaults of the named profile, overlaid by the config file, overlaid by
/// flags.
pub fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let base = match a.profile.as_str() {
        "desk" => TrainConfig::default(),
        "paper" => TrainConfig::paper_scale(),
        other => return Err(Error::contract(format!("unknown profile `{other}` (expected desk or paper)"))),
    };
    let mut c = match &a.config {
        None => base,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
            let file: toml::Table = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Format(e.to_string()))?;
            overlay(&mut merged, file);
            merged
                .try_into()
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        }
    };
    if let Some(d) = a.dims {
        c.dims = ModelDims {
            share_encoder: c.dims.share_encoder,
            ..ModelDims::uniform(d)
        };
    }
    if let Some(d) = a.latent_dim {
        c.dims.latent_dim = d;
        c.dims.latent_proj_dim = d;
    }
    if let Some(v) = a.vocab {
        c.src_vocab_cap = v;
        c.tgt_vocab_cap = v;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { c.$field = v; })*
        };
    }
    set!(mode => mode, batch => batch_size, epochs => epochs, max_len => max_len, seed => seed,
         samples => samples, kl_weight => kl_weight, kl_warmup_steps => kl_warmup_steps,
         clip => clip, precision => precision);
    c.validate()?;
    Ok(c)
}

fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<training::TrainOutcome> {
    let config = resolve_config(a)?;
    let mut manifest = RunManifest::start("train", Some(config.seed));
    let corpus = ParallelCorpus::read(&a.src, &a.tgt)?;
    manifest.input("src", &a.src).input("tgt", &a.tgt);
    let dev = match (&a.dev_src, &a.dev_tgt) {
        (Some(s), Some(t)) => {
            manifest.input("dev_src", s).input("dev_tgt", t);
            Some(ParallelCorpus::read(s, t)?)
        }
        _ => None,
    };
    let trainer = match &a.init_from {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            manifest.input("init_from", path);
            let mut t = Trainer::with_vocabularies(config.clone(), ck.src_vocab, ck.tgt_vocab)?;
            let n = t.warm_start(&ck.model)?;
            manifest.setting("warm_started_tensors", n);
            t
        }
        None => Trainer::new(config.clone(), &corpus)?,
    };
    fs::create_dir_all(&a.out_dir)?;
    let quiet = a.quiet;
    let outcome = training::train_with_progress(trainer, &corpus, dev.as_ref(), |r| {
        if !quiet {
            eprintln!(
                "epoch {} train_loss {:.4} valid_loss {:.4} valid_kl {:.4} valid_nll {:.4}",
                r.epoch, r.train_loss, r.valid_loss, r.valid_kl, r.valid_nll
            );
        }
    })?;

    let best = a.out_dir.join("model.ckpt");
    let last = a.out_dir.join("last.ckpt");
    let steps = a.out_dir.join("steps.tsv");
    let epochs = a.out_dir.join("epochs.tsv");
    outcome.best.save(&best)?;
    outcome.last.save(&last)?;
    fs::write(&steps, format_step_log(&outcome.steps))?;
    fs::write(&epochs, format_epoch_log(&outcome.epochs))?;
    manifest
        .output("best_checkpoint", &best)
        .output("last_checkpoint", &last)
        .output("step_log", &steps)
        .output("epoch_log", &epochs)
        .setting("profile", &a.profile);
    manifest.config = Some(config);
    manifest.finish(&a.out_dir.join("manifest.toml"))?;
    Ok(outcome)
}

/// Translates each line; empty lines stay empty.
pub fn translate_lines(ck: &Checkpoint, lines: &[String], mode: Mode, beam: usize, factor: usize) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        let tokens = corpus::tokenize(line);
        if tokens.is_empty() {
            out.push(String::new());
            continue;
        }
        let ids = ck.src_vocab.encode(&tokens);
        let h = ck.model.translate(&ids, mode, beam, max_output_len(ids.len(), factor))?;
        out.push(ck.tgt_vocab.decode(h.output()).join(" "));
    }
    Ok(out)
}

pub fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let mut manifest = RunManifest::start("translate", None);
    let ck = Checkpoint::load(&a.model)?;
    let mode = a.mode.unwrap_or(ck.config.mode);
    let lines = read_lines(&a.input)?;
    let out = translate_lines(&ck, &lines, mode, a.beam, a.max_len_factor)?;
    write_lines(&a.output, &out)?;
    manifest
        .input("model", &a.model)
        .input("input", &a.input)
        .output("output", &a.output)
        .setting("mode", mode.name())
        .setting("beam", a.beam)
        .setting("max_len_factor", a.max_len_factor);
    manifest.finish(&manifest_path(&a.output))
}

fn write_tsv(path: &Path, text: String) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub fn cmd_evaluate(c: &EvalCommand) -> Result<()> {
    match c {
        EvalCommand::Bleu { hyp, refs, smooth, tsv } => {
            let hyps = read_lines(hyp)?;
            let sets = read_refs(refs, hyps.len())?;
            let r = evaluate::bleu4(&hyps, &sets, *smooth)?;
            print!("{}", r.to_text());
            if let Some(p) = tsv {
                write_tsv(p, format!("{}\n{}\n", BleuReport::TSV_HEADER, r.tsv_row()))?;
            }
        }
        EvalCommand::Bootstrap {
            a,
            b,
            refs,
            resamples,
            seed,
            smooth,
        } => {
            let ha = read_lines(a)?;
            let hb = read_lines(b)?;
            aligned("system outputs differ in length", ha.len(), hb.len())?;
            let sets = read_refs(refs, ha.len())?;
            let r = evaluate::paired_bootstrap(&ha, &hb, &sets, *resamples, *seed, *smooth)?;
            print!("{}", r.to_text());
        }
        EvalCommand::Buckets {
            src,
            hyp,
            refs,
            boundaries,
            smooth,
            tsv,
        } => {
            let srcs = read_lines(src)?;
            let hyps = read_lines(hyp)?;
            aligned("sources and hypotheses differ in length", srcs.len(), hyps.len())?;
            let sets = read_refs(refs, hyps.len())?;
            let r = evaluate::length_bucket_report(&srcs, &hyps, &sets, boundaries, *smooth)?;
            println!("sentences: {}", r.total());
            for b in &r.buckets {
                let score = b.bleu.as_ref().map_or("nan".to_string(), |x| format!("{:.4}", x.score));
                println!("bucket {}: count {} bleu {}", b.label(), b.count, score);
            }
            if let Some(p) = tsv {
                write_tsv(p, r.to_tsv())?;
            }
        }
        EvalCommand::Concat {
            src,
            reference,
            k,
            out_src,
            out_ref,
        } => {
            let mut manifest = RunManifest::start("evaluate concat", None);
            let srcs = read_lines(src)?;
            let refs = read_lines(reference)?;
            aligned("sources and references differ in length", srcs.len(), refs.len())?;
            let (ns, nr) = evaluate::make_concat_testset(&srcs, &refs, *k)?;
            write_lines(out_src, &ns)?;
            write_lines(out_ref, &nr)?;
            let (before, after) = (evaluate::mean_length(&srcs), evaluate::mean_length(&ns));
            println!("sentences_in: {}", srcs.len());
            println!("sentences_out: {}", ns.len());
            println!("mean_src_len_in: {before:.4}");
            println!("mean_src_len_out: {after:.4}");
            println!("length_ratio: {:.4}", if before > 0.0 { after / before } else { 0.0 });
            manifest
                .input("src", src)
                .input("ref", reference)
                .output("src", out_src)
                .output("ref", out_ref)
                .setting("k", k);
            manifest.finish(&manifest_path(out_src))?;
        }
    }
    Ok(())
}

pub const GRADCHECK_VOCAB: usize = 20;
pub const GRADCHECK_MAX_DIMS: usize = 8;

/// Finite-difference check of the whole training loss of a tiny 64-bit model
/// on two random sentence pairs of a 20-word vocabulary.
pub fn run_gradcheck(mode: Mode, dims: usize, step: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    if dims == 0 || dims > GRADCHECK_MAX_DIMS {
        return Err(Error::contract(format!("gradcheck dims must be in 1..={GRADCHECK_MAX_DIMS}, got {dims}")));
    }
    if !(step > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentence = |len: usize| -> Vec<usize> { (0..len).map(|_| rng.gen_range(4..GRADCHECK_VOCAB)).collect() };
    let pairs = vec![(sentence(4), sentence(3)), (sentence(2), sentence(5))];
    let batch = Batch::from_ids(&pairs)?;
    let model = Model::new(ModelDims::uniform(dims), GRADCHECK_VOCAB, GRADCHECK_VOCAB, Precision::F64, seed)?;
    let mut store = model.store.clone();
    let opts = LossOptions::new(mode);
    finite_difference_check(
        |g, s| {
            let m = Model {
                store: s.clone(),
                ..model.clone()
            };
            let mut noise = NoiseSource::new(seed ^ 0xA5A5);
            Ok(training::elbo_loss(g, &m, &batch, &mut noise, opts)?.loss)
        },
        &mut store,
        step,
        tolerance,
    )
}

pub fn format_gradcheck(r: &GradCheckReport) -> String {
    let mut s = String::from("param\tmax_rel_error\tanalytic\tnumeric\tstatus\n");
    for e in &r.entries {
        let ok = e.max_rel_error <= r.tolerance;
        s.push_str(&format!(
            "{}\t{:e}\t{:e}\t{:e}\t{}\n",
            e.name,
            e.max_rel_error,
            e.analytic,
            e.numeric,
            if ok { "ok" } else { "FAIL" }
        ));
    }
    s.push_str(&format!("max_rel_error: {:e}\n", r.max_rel_error()));
    s.push_str(&format!("tolerance: {:e}\n", r.tolerance));
    s.push_str(&format!("result: {}\n", if r.passed() { "pass" } else { "fail" }));
    s
}
