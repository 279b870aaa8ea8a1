use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmt::augment::{augment, SynonymDictionary};
use cmt::config::KeyValues;
use cmt::corpus::{generate_synthetic_languages, SynthConfig};
use cmt::eval::{export_representations, Projection};
use cmt::experiment::{
    comparison_table, create_output_dir, evaluate, load_checkpoint, run_ablation, train_run, write_eval, RunConfig,
    Suite,
};
use cmt::train::Mode;
use cmt::Error;

#[derive(Parser)]
#[command(name = "cmt", version, about = "Multilingual translation with contrastive alignment on cipher languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cipher-language corpora.
    GenCorpus {
        #[arg(long, default_value_t = 4)]
        langs: usize,
        /// Sentences per parallel and monolingual corpus.
        #[arg(long, default_value_t = 2000)]
        sentences: usize,
        /// Concepts per language.
        #[arg(long, default_value_t = 40)]
        vocab: usize,
        #[arg(long, default_value_t = 200)]
        heldout: usize,
        /// Trailing languages that get monolingual data only.
        #[arg(long, default_value_t = 1)]
        mono_only: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
        /// Override a config entry, `key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the held-out multi-way set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Corpus directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Vocabulary file; defaults to vocab.txt beside the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Export pooled sentence representations of the multi-way set.
    ExportEmb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "none")]
        proj: Projection,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Show code-switched versions of input sentences as TSV.
    AugmentPreview {
        #[arg(long)]
        dict: PathBuf,
        /// One sentence per line.
        #[arg(long)]
        input: PathBuf,
        /// Language of the input sentences.
        #[arg(long, default_value = "l1")]
        lang: String,
        #[arg(long, default_value_t = 0.9)]
        p: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train and evaluate several modes and compare them.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "baseline,ctl,aa,aa-ctl,full")]
        modes: Vec<Mode>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        force: bool,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> cmt::Result<RunConfig> {
    let mut kv = KeyValues::load(path)?;
    for o in overrides {
        kv.apply_override(o)?;
    }
    RunConfig::from_key_values(&kv, path.parent().unwrap_or(Path::new(".")))
}

fn run(command: Command) -> cmt::Result<()> {
    match command {
        Command::GenCorpus {
            langs,
            sentences,
            vocab,
            heldout,
            mono_only,
            seed,
            out,
            force,
        } => {
            let cfg = SynthConfig {
                n_languages: langs,
                n_sentences: sentences,
                vocab_size: vocab,
                n_heldout: heldout,
                mono_only,
                seed,
                ..SynthConfig::default()
            };
            let synth = generate_synthetic_languages(&cfg)?;
            let mut manifest = synth.corpora.manifest();
            let gen = cfg.to_key_values();
            for k in gen.keys() {
                manifest.set(k, gen.get(k).unwrap_or_default());
            }
            create_output_dir(&out, force, &manifest)?;
            synth.write(&out)?;
            eprintln!("wrote {} languages to {}", langs, out.display());
        }
        Command::Train {
            config,
            mode,
            out,
            overrides,
            force,
        } => {
            let mut cfg = load_config(&config, &overrides)?;
            if let Some(m) = mode {
                cfg.train.set_mode(m);
            }
            let name = cfg.train.mode().map_or("custom", Mode::name).to_string();
            let outcome = train_run(&cfg, &name, &out, force)?;
            if let Some(r) = outcome.last {
                eprintln!(
                    "step {}: mt {:.4}/token, ctl {:.4}, combined {:.4}",
                    r.step,
                    r.loss.mt_per_token(),
                    r.loss.ctl,
                    r.loss.combined
                );
            }
        }
        Command::Eval {
            ckpt,
            suite,
            out,
            beam,
            corpus,
            vocab,
            force,
        } => {
            let (model, vocab, corpora) = load_checkpoint(&ckpt, vocab.as_deref(), corpus.as_deref())?;
            let outcome = evaluate(&model, &vocab, &corpora, suite, beam)?;
            write_eval(&outcome, &ckpt, &out, force)?;
            print!("{}", outcome.summary_text());
        }
        Command::ExportEmb {
            ckpt,
            proj,
            out,
            corpus,
            vocab,
        } => {
            let (model, vocab, corpora) = load_checkpoint(&ckpt, vocab.as_deref(), corpus.as_deref())?;
            let multiway = corpora
                .multiway
                .as_ref()
                .ok_or_else(|| Error::Data("corpus has no multi-way set".into()))?;
            let tsv = export_representations(&model, &vocab, multiway, proj)?;
            fs::write(&out, tsv).map_err(|source| Error::Io { path: out.clone(), source })?;
        }
        Command::AugmentPreview {
            dict,
            input,
            lang,
            p,
            seed,
        } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("p must lie in [0, 1], got {p}")));
            }
            let dict = SynonymDictionary::load(&dict)?;
            let text = fs::read_to_string(&input).map_err(|source| Error::Io { path: input.clone(), source })?;
            let mut stdout = io::stdout().lock();
            let _ = writeln!(stdout, "original\taugmented");
            for (i, line) in text.lines().enumerate() {
                let tokens: Vec<&str> = line.split_whitespace().collect();
                let out = augment(&tokens, &lang, &dict, p, cmt::rng::derive_seed(seed, &[i as u64]));
                let _ = writeln!(stdout, "{}\t{}", tokens.join(" "), out.join(" "));
            }
        }
        Command::Ablation {
            config,
            modes,
            out,
            overrides,
            force,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let rows = run_ablation(&cfg, &modes, &out, force)?;
            print!("{}", comparison_table(&rows));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
