//! Command-line front end. Every subcommand resolves its configuration
//! (preset, then `--config` JSON, then flags, then `BSPELL_SEED`), echoes it
//! to stderr, and writes outputs through temp-file-then-rename.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{best_purity, kmeans, pca_2d};
use crate::config::{BSpellConfig, ClipMode, OptimConfig, Preset};
use crate::errgen::{corrupt_corpus, ConfusionSet, ErrorConfig};
use crate::error::{Error, Result};
use crate::evalkit::score;
use crate::masking::{apply_plan, plan, render_masked, MaskConfig, MaskScheme};
use crate::model::{load_checkpoint, save_checkpoint, BSpell, Checkpoint, FullModelCheck, RngState};
use crate::numcore::{grad_check, Sampling};
use crate::textpipe::{build_vocab, coverage_of, encode_sentence, tokenize, CharInventory, Vocab};
use crate::trainkit::{correct_tokens, encode_pairs, finetune, parse_pairs, pretrain, train_val_split, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Writes through `f` into a temporary sibling file and renames it over `path`
/// only on success, so failures never leave partial output behind.
pub fn write_atomic_with<F, R>(path: &Path, f: F) -> Result<R>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<R>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let r = f(&mut w)?;
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(r)
    })();
    match result {
        Ok(r) => {
            std::fs::rename(&tmp, path)?;
            Ok(r)
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    write_atomic_with(path, |w| Ok(w.write_all(text.as_bytes())?))
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "bspell", version, about = "Word-level neural spelling correction")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Architecture preset.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// JSON file with overrides; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (the BSPELL_SEED environment variable overrides it).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker cap. Computation is single-threaded, so only 1 changes nothing.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the top-word vocabulary and character inventory from a corpus.
    BuildVocab {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        coverage: f64,
        #[arg(long)]
        out: PathBuf,
        /// Character inventory path (default: `<out>.chars`).
        #[arg(long)]
        chars_out: Option<PathBuf>,
    },
    /// Corrupt a clean corpus into `noisy<TAB>correct` pairs.
    SynthErrors {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long)]
        p_word_err: Option<f64>,
    },
    /// Write masked pretraining inputs as `masked<TAB>original` lines.
    EmitMasks {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        scheme: Option<MaskScheme>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked pretraining on a clean corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        scheme: Option<MaskScheme>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Supervised training on `noisy<TAB>correct` pairs.
    Finetune {
        #[arg(long)]
        pairs: PathBuf,
        /// Start from this checkpoint (otherwise a fresh model from --vocab/--chars).
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        vocab: VocabArgs,
        /// Held-out share of the pairs, excluded from training.
        #[arg(long, default_value_t = 0.2)]
        val_frac: f64,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a model on `noisy<TAB>correct` pairs.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Correct a text file line by line, word for word.
    Correct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export word vectors as TSV.
    Embed {
        #[arg(long)]
        model: PathBuf,
        /// One word per line.
        #[arg(long)]
        words: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA + k-means over word vectors; writes `word x y cluster label` rows.
    Cluster {
        #[arg(long)]
        model: PathBuf,
        /// `word<TAB>label` per line (label defaults to the word).
        #[arg(long)]
        words: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Seeds tried; the purest clustering is kept.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck {
        /// Checkpoint to check (default: a fresh model over a small alphabet).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 16)]
        per_tensor: usize,
    },
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub chars: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub clip_mode: Option<ClipMode>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// λ, auxiliary loss weight (0 disables it).
    #[arg(long)]
    pub aux_weight: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch JSONL report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Overrides accepted from a `--config` file; every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub coverage: Option<f64>,
    pub model: ModelOverrides,
    pub optim: OptimOverrides,
    pub mask: MaskOverrides,
    pub errors: ErrorOverrides,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub char_embed_dim: Option<usize>,
    pub max_word_len: Option<usize>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub max_sent_len: Option<usize>,
    pub aux_weight: Option<f64>,
    pub aux_in_pretraining: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimOverrides {
    pub lr: Option<f64>,
    pub clip: Option<f64>,
    pub clip_mode: Option<ClipMode>,
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskOverrides {
    pub scheme: Option<MaskScheme>,
    pub p_word: Option<f64>,
    pub p_cword: Option<f64>,
    pub p_char: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorOverrides {
    pub p_word_err: Option<f64>,
    pub mixture: Option<[f64; 4]>,
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    pub preset: Preset,
    pub seed: u64,
    pub epochs: usize,
    pub coverage: f64,
    pub model_overrides: ModelOverrides,
    pub optim: OptimConfig,
    pub mask: MaskConfig,
    pub errors: ErrorConfig,
    pub threads: usize,
}

impl RunConfig {
    fn apply_model(&self, mut m: BSpellConfig) -> Result<BSpellConfig> {
        let o = &self.model_overrides;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(m.semanticnet.char_embed_dim, o.char_embed_dim);
        set!(m.semanticnet.max_word_len, o.max_word_len);
        set!(m.d_model, o.d_model);
        set!(m.n_layers, o.n_layers);
        set!(m.n_heads, o.n_heads);
        set!(m.ffn_dim, o.ffn_dim);
        set!(m.dropout, o.dropout);
        set!(m.max_sent_len, o.max_sent_len);
        set!(m.aux_weight, o.aux_weight);
        set!(m.aux_in_pretraining, o.aux_in_pretraining);
        m.validate()?;
        Ok(m)
    }

    fn model_config(&self, num_chars: usize, num_classes: usize) -> Result<BSpellConfig> {
        self.apply_model(self.preset.model(num_chars, num_classes))
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::BuildVocab { .. } => "build-vocab",
        Command::SynthErrors { .. } => "synth-errors",
        Command::EmitMasks { .. } => "emit-masks",
        Command::Pretrain { .. } => "pretrain",
        Command::Finetune { .. } => "finetune",
        Command::Evaluate { .. } => "evaluate",
        Command::Correct { .. } => "correct",
        Command::Embed { .. } => "embed",
        Command::Cluster { .. } => "cluster",
        Command::Gradcheck { .. } => "gradcheck",
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let g = &cli.global;
    let preset: Preset = g.preset.parse()?;
    if g.threads == 0 {
        return Err(Error::invalid("--threads must be at least 1"));
    }
    let file: ConfigFile = match &g.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::invalid(format!("config {}: {e}", p.display())))?,
        None => ConfigFile::default(),
    };
    let env_seed = match std::env::var("BSPELL_SEED") {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::invalid(format!("BSPELL_SEED={v:?} is not an integer")))?,
        ),
        Err(_) => None,
    };
    let seed = env_seed.or(g.seed).or(file.seed).unwrap_or(0);

    let mut model_overrides = file.model.clone();
    let mut optim = preset.optim();
    let o = &file.optim;
    optim.lr = o.lr.unwrap_or(optim.lr);
    optim.clip = o.clip.unwrap_or(optim.clip);
    optim.clip_mode = o.clip_mode.unwrap_or(optim.clip_mode);
    optim.batch_size = o.batch_size.unwrap_or(optim.batch_size);
    let mut epochs = file.epochs.unwrap_or(10);

    let mut scheme = file.mask.scheme.unwrap_or(MaskScheme::Hybrid);
    let mut errors = ErrorConfig {
        seed,
        ..ErrorConfig::default()
    };
    errors.p_word_err = file.errors.p_word_err.unwrap_or(errors.p_word_err);
    errors.mixture = file.errors.mixture.unwrap_or(errors.mixture);
    let mut coverage = file.coverage.unwrap_or(0.95);

    let train_flags = |t: &TrainArgs, optim: &mut OptimConfig, epochs: &mut usize, mo: &mut ModelOverrides| {
        optim.lr = t.lr.unwrap_or(optim.lr);
        optim.clip = t.clip.unwrap_or(optim.clip);
        optim.clip_mode = t.clip_mode.unwrap_or(optim.clip_mode);
        optim.batch_size = t.batch_size.unwrap_or(optim.batch_size);
        *epochs = t.epochs.unwrap_or(*epochs);
        if t.aux_weight.is_some() {
            mo.aux_weight = t.aux_weight;
        }
    };
    match &cli.command {
        Command::BuildVocab { coverage: c, .. } => coverage = *c,
        Command::SynthErrors { p_word_err, .. } => errors.p_word_err = p_word_err.unwrap_or(errors.p_word_err),
        Command::EmitMasks { scheme: s, .. } => scheme = s.unwrap_or(scheme),
        Command::Pretrain { scheme: s, train, .. } => {
            scheme = s.unwrap_or(scheme);
            train_flags(train, &mut optim, &mut epochs, &mut model_overrides);
        }
        Command::Finetune { train, .. } => train_flags(train, &mut optim, &mut epochs, &mut model_overrides),
        _ => {}
    }
    let mut mask = MaskConfig::preset(scheme);
    mask.p_word = file.mask.p_word.unwrap_or(mask.p_word);
    mask.p_cword = file.mask.p_cword.unwrap_or(mask.p_cword);
    mask.p_char = file.mask.p_char.unwrap_or(mask.p_char);
    mask.validate()?;
    errors.validate()?;
    optim.validate()?;
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::invalid(format!("coverage {coverage} outside (0,1]")));
    }
    Ok(RunConfig {
        command: command_name(&cli.command),
        preset,
        seed,
        epochs,
        coverage,
        model_overrides,
        optim,
        mask,
        errors,
        threads: g.threads,
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn load_vocab(args: &VocabArgs) -> Result<(Vocab, CharInventory)> {
    let v = args
        .vocab
        .as_ref()
        .ok_or_else(|| Error::invalid("--vocab is required"))?;
    let c = args
        .chars
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.chars", v.display())));
    Ok((Vocab::load(v)?, CharInventory::load(&c)?))
}

fn out_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn save_report(path: &Option<PathBuf>, jsonl: &str) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, jsonl),
        None => Ok(()),
    }
}

fn finish_training(
    run: &RunConfig,
    model: BSpell<f32>,
    vocab: Vocab,
    inventory: CharInventory,
    rng: RngState,
    steps: u64,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint {
        model,
        vocab,
        inventory,
        rng,
        step: steps,
    };
    save_checkpoint(&ck, out)?;
    eprintln!("{}: wrote {} after {steps} steps", run.command, out.display());
    Ok(())
}

fn execute(cli: &Cli, run: &RunConfig) -> Result<()> {
    let json = cli.global.json;
    let mut log = |r: &crate::trainkit::EpochRecord| {
        eprintln!(
            "epoch {:>3}  L_total {:.5}  L_final {:.5}  L_aux {:.5}  acc {:.4}  {:.1}s",
            r.epoch, r.l_total, r.l_final, r.l_aux, r.accuracy, r.wall_secs
        )
    };
    match &cli.command {
        Command::BuildVocab {
            input, out, chars_out, ..
        } => {
            let lines = read_lines(input)?;
            let toks: Vec<String> = lines.iter().flat_map(|l| tokenize(l)).collect();
            let vocab = build_vocab(&toks, run.coverage)?;
            let inv = CharInventory::from_corpus(&lines);
            let cov = coverage_of(&vocab, &toks)?;
            let chars = chars_out
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("{}.chars", out.display())));
            write_atomic(out, &vocab.to_tsv())?;
            write_atomic(&chars, &inv.to_file_string())?;
            let summary = serde_json::json!({
                "top_words": vocab.len(), "classes": vocab.num_classes(), "coverage": cov, "chars": inv.len()
            });
            if json {
                out_json(&summary)?;
            } else {
                println!(
                    "top words {}  classes {}  coverage {:.4}  chars {}",
                    vocab.len(),
                    vocab.num_classes(),
                    cov,
                    inv.len()
                );
            }
        }
        Command::SynthErrors { input, out, confusion, .. } => {
            let conf = match confusion {
                Some(p) => ConfusionSet::load(p)?,
                None => crate::toy::ToyLanguage::confusion(),
            };
            let stats = corrupt_corpus(input, out, &run.errors, &conf)?;
            if json {
                out_json(&stats)?;
            } else {
                println!(
                    "lines {}  skipped {}  words {}  corrupted {} ({:.4})",
                    stats.lines,
                    stats.skipped_lines,
                    stats.words_seen,
                    stats.words_corrupted,
                    stats.corrupted_fraction()
                );
            }
        }
        Command::EmitMasks { input, vocab, out, .. } => {
            let (v, inv) = load_vocab(vocab)?;
            let limits = run.model_config(inv.len(), v.num_classes())?;
            let limits = crate::textpipe::Limits {
                max_word_len: limits.semanticnet.max_word_len,
                max_sent_len: limits.max_sent_len,
            };
            let lines = read_lines(input)?;
            let mut n = 0usize;
            write_atomic_with(out, |w| {
                for (i, line) in lines.iter().enumerate() {
                    if tokenize(line).is_empty() {
                        continue;
                    }
                    for s in encode_sentence(line, &v, &inv, limits)? {
                        let mut rng = crate::errgen::line_rng(run.seed, i as u64);
                        let lengths: Vec<usize> = s.words.iter().map(|w| w.len()).collect();
                        let masked = apply_plan(&s, &plan(&lengths, &run.mask, &mut rng)?)?;
                        writeln!(w, "{}\t{}", render_masked(&masked, &inv), s.surfaces.join(" "))?;
                        n += 1;
                    }
                }
                Ok(())
            })?;
            println!("{n} masked sentences");
        }
        Command::Pretrain {
            corpus, vocab, train, ..
        } => {
            let (v, inv) = load_vocab(vocab)?;
            let cfg = run.model_config(inv.len(), v.num_classes())?;
            let mut model = BSpell::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
            let limits = model.limits();
            let mut data = Vec::new();
            for line in read_lines(corpus)? {
                if !tokenize(&line).is_empty() {
                    data.extend(encode_sentence(&line, &v, &inv, limits)?);
                }
            }
            let mut opts = TrainOptions::new(run.epochs, run.seed, run.optim);
            opts.on_epoch = Some(&mut log);
            let outcome = pretrain(&mut model, &data, &run.mask, &mut opts)?;
            save_report(&train.report, &outcome.report.to_jsonl())?;
            finish_training(run, model, v, inv, outcome.rng, outcome.steps, &train.out)?;
        }
        Command::Finetune {
            pairs,
            init,
            vocab,
            val_frac,
            train,
        } => {
            let (mut model, v, inv, base_step) = match init {
                Some(p) => {
                    let ck = load_checkpoint(p)?;
                    let mut m = ck.model;
                    m.config = run.apply_model(m.config)?;
                    (m, ck.vocab, ck.inventory, ck.step)
                }
                None => {
                    let (v, inv) = load_vocab(vocab)?;
                    let cfg = run.model_config(inv.len(), v.num_classes())?;
                    (BSpell::new(cfg, &mut ChaCha8Rng::seed_from_u64(run.seed))?, v, inv, 0)
                }
            };
            let corpus = parse_pairs(&std::fs::read_to_string(pairs)?);
            if corpus.rejected > 0 {
                eprintln!("finetune: rejected {} misaligned lines", corpus.rejected);
            }
            let (tr, _) = train_val_split(corpus.pairs.len(), *val_frac, run.seed)?;
            let chosen: Vec<_> = tr.iter().map(|&i| corpus.pairs[i].clone()).collect();
            let data = encode_pairs(&chosen, &v, &inv, model.limits())?;
            let mut opts = TrainOptions::new(run.epochs, run.seed, run.optim);
            opts.on_epoch = Some(&mut log);
            let outcome = finetune(&mut model, &data, &mut opts)?;
            save_report(&train.report, &outcome.report.to_jsonl())?;
            finish_training(run, model, v, inv, outcome.rng, base_step + outcome.steps, &train.out)?;
        }
        Command::Evaluate { model, pairs } => {
            let mut ck = load_checkpoint(model)?;
            let corpus = parse_pairs(&std::fs::read_to_string(pairs)?);
            let inputs: Vec<Vec<String>> = corpus.pairs.iter().map(|p| p.0.clone()).collect();
            let refs: Vec<Vec<String>> = corpus.pairs.iter().map(|p| p.1.clone()).collect();
            let preds = correct_tokens(&mut ck.model, &inputs, &ck.vocab, &ck.inventory, 64)?;
            let r = score(&inputs, &preds, &refs, &ck.vocab)?;
            if json {
                out_json(&r)?;
            } else {
                print!("{}", r.table());
                println!("rejected_lines        {}", corpus.rejected);
            }
        }
        Command::Correct { model, input, out } => {
            let mut ck = load_checkpoint(model)?;
            let lines = read_lines(input)?;
            let toks: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l)).collect();
            let nonempty: Vec<Vec<String>> = toks.iter().filter(|t| !t.is_empty()).cloned().collect();
            let fixed = if nonempty.is_empty() {
                Vec::new()
            } else {
                correct_tokens(&mut ck.model, &nonempty, &ck.vocab, &ck.inventory, 64)?
            };
            let mut fixed = fixed.into_iter();
            let mut changed = 0usize;
            write_atomic_with(out, |w| {
                for t in &toks {
                    if t.is_empty() {
                        writeln!(w)?;
                        continue;
                    }
                    let f = fixed.next().expect("one correction per non-empty line");
                    changed += t.iter().zip(&f).filter(|(a, b)| a != b).count();
                    writeln!(w, "{}", f.join(" "))?;
                }
                Ok(())
            })?;
            println!("{} lines, {changed} words changed", lines.len());
        }
        Command::Embed { model, words, out } => {
            let mut ck = load_checkpoint(model)?;
            let list: Vec<String> = read_lines(words)?.into_iter().filter(|w| !w.trim().is_empty()).collect();
            if list.is_empty() {
                return Err(Error::Empty("no words to embed".into()));
            }
            let vecs = ck.model.word_vectors(&list, &ck.inventory)?;
            write_atomic_with(out, |w| {
                for (i, word) in list.iter().enumerate() {
                    let row: Vec<String> = vecs.row(i).iter().map(|v| v.to_string()).collect();
                    writeln!(w, "{}\t{}", word.trim(), row.join(","))?;
                }
                Ok(())
            })?;
            println!("{} vectors of width {}", list.len(), vecs.cols());
        }
        Command::Cluster {
            model,
            words,
            k,
            seeds,
            out,
        } => {
            let mut ck = load_checkpoint(model)?;
            let mut names = Vec::new();
            let mut labels = Vec::new();
            for line in read_lines(words)? {
                if line.trim().is_empty() {
                    continue;
                }
                let (w, l) = line.split_once('\t').unwrap_or((line.as_str(), line.as_str()));
                names.push(w.trim().to_string());
                labels.push(l.trim().to_string());
            }
            let vecs = ck.model.word_vectors(&names, &ck.inventory)?;
            let pts: Vec<Vec<f64>> = (0..vecs.rows()).map(|r| vecs.row(r).iter().map(|&x| x as f64).collect()).collect();
            let proj = pca_2d(&pts)?;
            let coords: Vec<Vec<f64>> = proj.coords.iter().map(|c| c.to_vec()).collect();
            let (purity, clustering) = if *seeds > 1 {
                best_purity(&coords, &labels, *k, *seeds)?
            } else {
                let c = kmeans(&coords, *k, run.seed)?;
                (crate::analysis::cluster_purity(&c.assignment, &labels)?, c)
            };
            write_atomic_with(out, |w| {
                for i in 0..names.len() {
                    writeln!(
                        w,
                        "{}\t{}\t{}\t{}\t{}",
                        names[i], coords[i][0], coords[i][1], clustering.assignment[i], labels[i]
                    )?;
                }
                Ok(())
            })?;
            let summary = serde_json::json!({
                "points": names.len(), "k": k, "purity": purity, "inertia": clustering.inertia,
                "explained_variance": proj.explained,
            });
            if json {
                out_json(&summary)?;
            } else {
                println!(
                    "points {}  k {}  purity {:.4}  inertia {:.4}  explained {:.3}/{:.3}",
                    names.len(),
                    k,
                    purity,
                    clustering.inertia,
                    proj.explained[0],
                    proj.explained[1]
                );
            }
        }
        Command::Gradcheck {
            model,
            eps,
            tol,
            per_tensor,
        } => {
            let (m, vocab, inv) = match model {
                Some(p) => {
                    let ck = load_checkpoint(p)?;
                    (ck.model, ck.vocab, ck.inventory)
                }
                None => {
                    let inv = CharInventory::from_chars("abcdefgh".chars());
                    let vocab = Vocab::from_ranked(
                        vec![("abc".into(), 4), ("bad".into(), 3), ("cafe".into(), 2), ("hg".into(), 1)],
                        0.95,
                    )?;
                    let cfg = run.model_config(inv.len(), vocab.num_classes())?;
                    (BSpell::new(cfg, &mut ChaCha8Rng::seed_from_u64(run.seed))?, vocab, inv)
                }
            };
            let words: Vec<&str> = vocab.entries().iter().map(|(w, _)| w.as_str()).take(4).collect();
            let line = words.join(" ");
            let batch = encode_sentence(&line, &vocab, &inv, m.limits())?;
            let mut probe = FullModelCheck::new(&m, batch);
            let r = grad_check(
                &mut probe,
                *eps,
                Sampling {
                    max_per_tensor: *per_tensor,
                    seed: run.seed,
                },
            )?;
            let ok = r.max_rel_err < *tol;
            if json {
                out_json(&serde_json::json!({
                    "max_rel_err": r.max_rel_err, "checked": r.checked, "worst": r.worst, "pass": ok
                }))?;
            } else {
                println!(
                    "checked {} coordinates  max rel err {:.3e}  worst {:?}  {}",
                    r.checked,
                    r.max_rel_err,
                    r.worst,
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            if !ok {
                return Err(Error::NonFinite(format!(
                    "gradient mismatch {:.3e} above tolerance {tol:.1e}",
                    r.max_rel_err
                )));
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the subcommand, returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let run = match resolve(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match serde_json::to_string_pretty(&run) {
        Ok(s) => eprintln!("resolved config:\n{s}"),
        Err(e) => eprintln!("warning: cannot render config: {e}"),
    }
    match execute(&cli, &run) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
