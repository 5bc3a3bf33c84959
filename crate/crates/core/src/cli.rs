//! The `factored-nmt` command line.
//!
//! Every subcommand reads a flat configuration: built-in defaults, then an
//! optional `--config FILE` of `key = value` lines (`#` starts a comment
//! line), then `--key value` or `--key=value` overrides. Keys are namespaced
//! (`data.*`, `model.*`, `train.*`, `decode.*`, `bpe.*`, `eval.*`); a few
//! short aliases such as `--input` exist per subcommand. Dashes and
//! underscores are interchangeable in key names. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::bpe::{learn_bpe, word_frequencies, MergeTable, Segmenter};
use crate::decoding::{join_subwords, nbest_line, translate_corpus, BeamOptions};
use crate::error::{Error, Result};
use crate::featalign::annotate_corpus;
use crate::metrics::{bleu, bootstrap_significance, chrf3, perplexity};
use crate::model::{load_checkpoint, Model, ModelConfig, Vocabularies};
use crate::textio::{
    build_vocab, build_vocabs, build_word_vocab, denumberize_words, factor_count, numberize, numberize_words,
    parse_factored_line, parse_tokens, FactoredToken, FeatureScheme, IdMatrix, Vocabulary,
};
use crate::training::{check_compatible, train, Pair, TrainConfig, TrainOutput};

struct Key {
    name: &'static str,
    default: &'static str,
    required: bool,
    help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        required: false,
        help,
    }
}

const fn req(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: "",
        required: true,
        help,
    }
}

const GLOBAL_KEYS: &[Key] = &[
    key("threads", "1", "worker threads"),
    key("seed", "1234", "random seed"),
];

struct Command {
    name: &'static str,
    about: &'static str,
    keys: &'static [Key],
    aliases: &'static [(&'static str, &'static str)],
    run: fn(&Settings, &mut dyn Write, &mut dyn Write) -> Result<()>,
}

const IO_ALIASES: [(&str, &str); 2] = [("input", "data.input"), ("output", "data.output")];

const COMMANDS: &[Command] = &[
    Command {
        name: "learn-bpe",
        about: "learn a joint BPE merge table from plain-text corpora",
        keys: &[
            req("data.input", "comma-separated plain-text files (- for stdin)"),
            key("data.output", "-", "merge table file"),
            key("bpe.merges", "89500", "number of merge operations"),
        ],
        aliases: &[IO_ALIASES[0], IO_ALIASES[1], ("merges", "bpe.merges")],
        run: learn_bpe_cmd,
    },
    Command {
        name: "apply-bpe",
        about: "segment plain text with a merge table",
        keys: &[
            key("data.input", "-", "plain-text file"),
            key("data.output", "-", "segmented file"),
            req("bpe.table", "merge table file"),
        ],
        aliases: &[
            IO_ALIASES[0],
            IO_ALIASES[1],
            ("bpe", "bpe.table"),
            ("table", "bpe.table"),
        ],
        run: apply_bpe_cmd,
    },
    Command {
        name: "annotate",
        about: "segment a word-level factored corpus and add the subword tag factor",
        keys: &[
            key("data.input", "-", "word-level factored file"),
            key("data.output", "-", "subword-level factored file"),
            req("bpe.table", "merge table file"),
            key(
                "bpe.tag_position",
                "0",
                "factor index of the inserted tag; 0 means min(2, factors)",
            ),
        ],
        aliases: &[
            IO_ALIASES[0],
            IO_ALIASES[1],
            ("bpe", "bpe.table"),
            ("tag_position", "bpe.tag_position"),
        ],
        run: annotate_cmd,
    },
    Command {
        name: "build-vocab",
        about: "build the vocabulary of one factor of a corpus",
        keys: &[
            key("data.input", "-", "factored or plain-text file"),
            key("data.output", "-", "vocabulary file"),
            key("data.factor", "0", "factor index"),
            key("model.vocab_size", "90000", "capacity including the 3 reserved symbols"),
        ],
        aliases: &[
            IO_ALIASES[0],
            IO_ALIASES[1],
            ("factor", "data.factor"),
            ("vocab_size", "model.vocab_size"),
        ],
        run: build_vocab_cmd,
    },
    Command {
        name: "train",
        about: "train a model; writes checkpoints and train.log to data.output_dir",
        keys: &[
            req("data.train_src", "factored training source"),
            req("data.train_tgt", "training target"),
            req("data.dev_src", "factored dev source"),
            req("data.dev_tgt", "dev target"),
            key(
                "data.src_vocabs",
                "",
                "comma-separated vocabulary files, one per feature (built from the training data when empty)",
            ),
            key("data.tgt_vocab", "", "target vocabulary file (built when empty)"),
            req("data.output_dir", "output directory"),
            key("model.embed", "500", "total embedding size m"),
            key("model.hidden", "1024", "hidden size n"),
            key(
                "model.features",
                "",
                "non-word features as name:size[:capacity],...; a lemma without size takes a third of the leftover",
            ),
            key(
                "model.scheme",
                "",
                "scheme file (name<TAB>size<TAB>capacity per line); overrides model.embed and model.features",
            ),
            key("model.vocab_size", "90000", "word vocabulary capacity"),
            key("model.target_vocab_size", "90000", "target vocabulary capacity"),
            key("train.batch_size", "80", "sentences per minibatch"),
            key("train.max_len", "50", "skip pairs longer than this"),
            key("train.clip_norm", "1.0", "global gradient norm limit"),
            key("train.rho", "0.95", "Adadelta decay"),
            key("train.eps", "1e-6", "Adadelta epsilon"),
            key("train.valid_interval", "10000", "minibatches between validations"),
            key("train.checkpoint_interval", "10000", "minibatches between checkpoints"),
            key("train.word_dropout", "0", "word dropout probability"),
            key(
                "train.layer_dropout",
                "0",
                "dropout on embeddings, annotations and decoder state",
            ),
            key("train.epochs", "10", "epoch limit"),
            key("train.max_updates", "0", "update limit (0: none)"),
        ],
        aliases: &[("output", "data.output_dir")],
        run: train_cmd,
    },
    Command {
        name: "translate",
        about: "beam-search translation with one model or an ensemble",
        keys: &[
            key("data.input", "-", "factored source file"),
            key("data.output", "-", "translations"),
            req("decode.models", "comma-separated checkpoints"),
            key("decode.beam", "12", "beam size"),
            key("decode.max_len", "100", "maximum output length"),
            key("decode.normalize", "true", "rank by log-probability per token"),
            key("decode.nbest", "", "n-best output file"),
        ],
        aliases: &[
            IO_ALIASES[0],
            IO_ALIASES[1],
            ("model", "decode.models"),
            ("models", "decode.models"),
            ("beam", "decode.beam"),
            ("nbest", "decode.nbest"),
        ],
        run: translate_cmd,
    },
    Command {
        name: "score",
        about: "perplexity of a reference corpus under one model or an ensemble",
        keys: &[
            req("data.src", "factored source file"),
            req("data.tgt", "reference target file"),
            req("decode.models", "comma-separated checkpoints"),
        ],
        aliases: &[
            ("src", "data.src"),
            ("tgt", "data.tgt"),
            ("model", "decode.models"),
            ("models", "decode.models"),
        ],
        run: score_cmd,
    },
    Command {
        name: "evaluate",
        about: "BLEU, chrF3 or paired bootstrap significance (scores are comparable only within this tool)",
        keys: &[
            key("eval.metric", "bleu", "bleu, chrf3 or significance"),
            req("eval.hyp", "system output"),
            req("eval.ref", "reference"),
            key("eval.baseline", "", "baseline output (significance only)"),
            key("eval.resamples", "1000", "bootstrap resamples"),
        ],
        aliases: &[
            ("metric", "eval.metric"),
            ("hyp", "eval.hyp"),
            ("ref", "eval.ref"),
            ("baseline", "eval.baseline"),
            ("resamples", "eval.resamples"),
        ],
        run: evaluate_cmd,
    },
];

/// Resolved configuration of one subcommand run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn required(&self, key: &str) -> Result<&str> {
        match self.get(key) {
            "" => Err(Error::Config(format!("missing required key {key}"))),
            v => Ok(v),
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(Error::Config(format!("{key}: expected true or false, found {v:?}"))),
        }
    }

    fn list(&self, key: &str) -> Vec<&str> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect()
    }
}

fn canonical(name: &str) -> String {
    name.replace('-', "_")
}

fn resolve<'c>(cmd: &'c Command, name: &str) -> Option<&'c str> {
    let name = canonical(name);
    cmd.keys
        .iter()
        .chain(GLOBAL_KEYS)
        .map(|k| k.name)
        .find(|k| *k == name)
        .or_else(|| cmd.aliases.iter().find(|(a, _)| *a == name).map(|(_, k)| *k))
}

fn parse_config_file(cmd: &Command, text: &str, values: &mut BTreeMap<String, String>) -> Result<()> {
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
        let name = resolve(cmd, k.trim())
            .ok_or_else(|| Error::Config(format!("config line {}: unknown key {:?}", i + 1, k.trim())))?;
        values.insert(name.to_string(), v.trim().to_string());
    }
    Ok(())
}

/// `None` when help was requested.
fn parse_settings(cmd: &Command, args: &[String]) -> Result<Option<Settings>> {
    let mut overrides = Vec::new();
    let mut config = None;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        if arg == "--help" || arg == "-h" {
            return Ok(None);
        }
        let Some(body) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument {arg:?}")));
        };
        let (name, value) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        if name == "config" {
            config = Some(value);
            continue;
        }
        let key = resolve(cmd, &name).ok_or_else(|| Error::Config(format!("unknown key --{name}")))?;
        overrides.push((key.to_string(), value));
    }
    let mut values: BTreeMap<String, String> = cmd
        .keys
        .iter()
        .chain(GLOBAL_KEYS)
        .map(|k| (k.name.to_string(), k.default.to_string()))
        .collect();
    if let Some(path) = config {
        parse_config_file(cmd, &fs::read_to_string(path)?, &mut values)?;
    }
    values.extend(overrides);
    Ok(Some(Settings { values }))
}

fn help_text(cmd: &Command) -> String {
    let mut s = format!(
        "usage: factored-nmt {} [--config FILE] [--key value ...]\n\n{}\n\nkeys:\n",
        cmd.name, cmd.about
    );
    let width = cmd
        .keys
        .iter()
        .chain(GLOBAL_KEYS)
        .map(|k| k.name.len())
        .max()
        .unwrap_or(0);
    for k in cmd.keys.iter().chain(GLOBAL_KEYS) {
        let default = if k.required {
            "(required)".to_string()
        } else if k.default.is_empty() {
            "(default empty)".to_string()
        } else {
            format!("(default {})", k.default)
        };
        s.push_str(&format!("  --{:width$}  {}  {}\n", k.name, default, k.help));
    }
    if !cmd.aliases.is_empty() {
        let aliases: Vec<String> = cmd.aliases.iter().map(|(a, k)| format!("--{a} = --{k}")).collect();
        s.push_str(&format!("\naliases: {}\n", aliases.join(", ")));
    }
    s
}

fn usage() -> String {
    let mut s = String::from("usage: factored-nmt <subcommand> [--help] [--key value ...]\n\nsubcommands:\n");
    for c in COMMANDS {
        s.push_str(&format!("  {:12} {}\n", c.name, c.about));
    }
    s
}

/// Runs one subcommand with the process's standard streams.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs one subcommand; returns 0 on success, 1 on contract or validation
/// errors and 2 on I/O errors.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let Some(name) = args.first() else {
        let _ = write!(err, "{}", usage());
        return 1;
    };
    if name == "--help" || name == "-h" || name == "help" {
        let _ = write!(out, "{}", usage());
        return 0;
    }
    let Some(cmd) = COMMANDS.iter().find(|c| c.name == name) else {
        let _ = writeln!(err, "unknown subcommand {name:?}\n");
        let _ = write!(err, "{}", usage());
        return 1;
    };
    let result = parse_settings(cmd, &args[1..]).and_then(|settings| match settings {
        None => {
            write!(out, "{}", help_text(cmd))?;
            Ok(())
        }
        Some(settings) => (cmd.run)(&settings, out, err),
    });
    let result = result.and_then(|()| out.flush().map_err(Error::from));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "factored-nmt {name}: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn read_text(path: &str) -> Result<String> {
    if path == "-" {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        Ok(fs::read_to_string(path)?)
    }
}

fn write_text(path: &str, text: &str, out: &mut dyn Write) -> Result<()> {
    if path == "-" {
        out.write_all(text.as_bytes())?;
    } else {
        fs::write(path, text)?;
    }
    Ok(())
}

fn joined_lines<I: IntoIterator<Item = String>>(lines: I) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&l);
        s.push('\n');
    }
    s
}

fn learn_bpe_cmd(s: &Settings, out: &mut dyn Write, _: &mut dyn Write) -> Result<()> {
    s.required("data.input")?;
    let merges: usize = s.parse("bpe.merges")?;
    let mut texts = Vec::new();
    for path in s.list("data.input") {
        texts.push(read_text(path)?);
    }
    let freqs = word_frequencies(texts.iter().flat_map(|t| t.lines()));
    let table = learn_bpe(&freqs, merges)?;
    write_text(s.get("data.output"), &table.to_text(), out)
}

fn apply_bpe_cmd(s: &Settings, out: &mut dyn Write, _: &mut dyn Write) -> Result<()> {
    let table = MergeTable::read(Path::new(s.required("bpe.table")?))?;
    let text = read_text(s.get("data.input"))?;
    let mut seg = Segmenter::new(&table);
    let lines = text.lines().map(|l| seg.line(l).0);
    write_text(s.get("data.output"), &joined_lines(lines), out)
}

fn annotate_cmd(s: &Settings, out: &mut dyn Write, _: &mut dyn Write) -> Result<()> {
    let table = MergeTable::read(Path::new(s.required("bpe.table")?))?;
    let position: usize = s.parse("bpe.tag_position")?;
    let text = read_text(s.get("data.input"))?;
    let lines = annotate_corpus(&text, &table, position)?;
    write_text(s.get("data.output"), &joined_lines(lines), out)
}

fn build_vocab_cmd(s: &Settings, out: &mut dyn Write, _: &mut dyn Write) -> Result<()> {
    let factor: usize = s.parse("data.factor")?;
    let capacity: usize = s.parse("model.vocab_size")?;
    let text = read_text(s.get("data.input"))?;
    let factors = text.lines().find_map(factor_count).unwrap_or(1);
    let corpus = text
        .lines()
        .map(|l| parse_tokens(l, factors))
        .collect::<Result<Vec<_>>>()?;
    let vocab = build_vocab(corpus.iter().map(Vec::as_slice), factor, capacity)?;
    write_text(s.get("data.output"), &vocab.to_text(), out)
}

/// Parses `model.features`: `name:size[:capacity]` entries. Non-word
/// features default to capacity 1000; lemma defaults to the word capacity.
fn parse_features(spec: &str) -> Result<Vec<(String, Option<usize>, usize)>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("model.features: bad number {p:?} in {item:?}")))
        };
        let name = parts[0].to_string();
        let size = match parts.get(1) {
            Some(p) if !p.is_empty() => Some(num(p)?),
            _ => None,
        };
        let default_cap = if name == "lemma" { 0 } else { 1000 };
        let capacity = match parts.get(2) {
            Some(p) => num(p)?,
            None => default_cap,
        };
        if parts.len() > 3 {
            return Err(Error::Config(format!("model.features: malformed entry {item:?}")));
        }
        out.push((name, size, capacity));
    }
    Ok(out)
}

fn scheme_from(s: &Settings) -> Result<FeatureScheme> {
    let path = s.get("model.scheme");
    if !path.is_empty() {
        return FeatureScheme::read(Path::new(path));
    }
    let embed: usize = s.parse("model.embed")?;
    let word_capacity: usize = s.parse("model.vocab_size")?;
    let features = parse_features(s.get("model.features"))?;
    let extra: Vec<(&str, Option<usize>, usize)> = features.iter().map(|(n, sz, c)| (n.as_str(), *sz, *c)).collect();
    FeatureScheme::with_budget(embed, word_capacity, &extra)
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        batch_size: s.parse("train.batch_size")?,
        max_len: s.parse("train.max_len")?,
        clip_norm: s.parse("train.clip_norm")?,
        rho: s.parse("train.rho")?,
        eps: s.parse("train.eps")?,
        valid_interval: s.parse("train.valid_interval")?,
        checkpoint_interval: s.parse("train.checkpoint_interval")?,
        word_dropout: s.parse("train.word_dropout")?,
        layer_dropout: s.parse("train.layer_dropout")?,
        epochs: s.parse("train.epochs")?,
        max_updates: s.parse("train.max_updates")?,
        seed: s.parse("seed")?,
        threads: s.parse("threads")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_source(path: &str, scheme: &FeatureScheme) -> Result<Vec<Vec<FactoredToken>>> {
    read_text(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| {
            parse_factored_line(l, scheme).map_err(|e| match e {
                Error::Io(e) => Error::Io(e),
                e => Error::Config(format!("{path} line {}: {e}", i + 1)),
            })
        })
        .collect()
}

fn read_lines(path: &str) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

fn make_pairs(src: &[Vec<FactoredToken>], tgt: &[String], vocabs: &Vocabularies, what: &str) -> Result<Vec<Pair>> {
    if src.len() != tgt.len() {
        return Err(Error::Config(format!(
            "{what}: {} source lines but {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    src.iter()
        .zip(tgt)
        .map(|(s, t)| {
            Ok(Pair {
                source: numberize(s, &vocabs.source)?,
                target: numberize_words(t, &vocabs.target),
            })
        })
        .collect()
}

fn train_cmd(s: &Settings, _: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let scheme = scheme_from(s)?;
    let cfg = train_config(s)?;
    let hidden: usize = s.parse("model.hidden")?;
    let target_capacity: usize = s.parse("model.target_vocab_size")?;
    let dir = s.required("data.output_dir")?.to_string();
    let train_src = read_source(s.required("data.train_src")?, &scheme)?;
    let train_tgt = read_lines(s.required("data.train_tgt")?)?;
    let dev_src = read_source(s.required("data.dev_src")?, &scheme)?;
    let dev_tgt = read_lines(s.required("data.dev_tgt")?)?;

    let source = match s.list("data.src_vocabs").as_slice() {
        [] => build_vocabs(&train_src, &scheme)?,
        paths if paths.len() == scheme.len() => scheme
            .names()
            .zip(paths)
            .map(|(name, p)| Vocabulary::read(name, Path::new(p)))
            .collect::<Result<_>>()?,
        paths => {
            return Err(Error::Config(format!(
                "data.src_vocabs lists {} files for {} features",
                paths.len(),
                scheme.len()
            )))
        }
    };
    let target = match s.get("data.tgt_vocab") {
        "" => build_word_vocab(train_tgt.iter().map(String::as_str), target_capacity)?,
        p => Vocabulary::read("word", Path::new(p))?,
    };
    let vocabs = Vocabularies { source, target };
    let train_pairs = make_pairs(&train_src, &train_tgt, &vocabs, "training data")?;
    let dev_pairs = make_pairs(&dev_src, &dev_tgt, &vocabs, "dev data")?;

    let config = ModelConfig {
        scheme,
        hidden,
        src_vocab_sizes: vocabs.source.iter().map(Vocabulary::len).collect(),
        tgt_vocab_size: vocabs.target.len(),
        seed: cfg.seed,
    };
    let model = Model::new(config)?;
    fs::create_dir_all(&dir)?;
    let output = TrainOutput {
        dir: Path::new(&dir),
        vocabs: Some(&vocabs),
    };
    let report = train(model, &train_pairs, &dev_pairs, &cfg, Some(output))?;
    writeln!(
        err,
        "trained {} updates on {} pairs; best dev perplexity {:.6}",
        report.updates, report.kept, report.best_perplexity
    )?;
    Ok(())
}

fn load_models(s: &Settings) -> Result<(Vec<Model>, Vocabularies)> {
    s.required("decode.models")?;
    let mut models = Vec::new();
    let mut vocabs: Option<Vocabularies> = None;
    for path in s.list("decode.models") {
        let (model, v) = load_checkpoint(Path::new(path))?;
        let v = v.ok_or_else(|| Error::Config(format!("checkpoint {path} carries no vocabularies")))?;
        match &vocabs {
            None => vocabs = Some(v),
            Some(first) if *first != v => {
                return Err(Error::Config(format!("checkpoint {path} has different vocabularies")))
            }
            Some(_) => {}
        }
        models.push(model);
    }
    let refs: Vec<&Model> = models.iter().collect();
    check_compatible(&refs)?;
    Ok((models, vocabs.expect("at least one model")))
}

fn translate_cmd(s: &Settings, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let opts = BeamOptions {
        beam: s.parse("decode.beam")?,
        max_len: s.parse("decode.max_len")?,
        normalize: s.flag("decode.normalize")?,
    };
    if opts.beam == 0 || opts.max_len == 0 {
        return Err(Error::Config(
            "decode.beam and decode.max_len must be at least 1".into(),
        ));
    }
    let threads: usize = s.parse("threads")?;
    let _seed: u64 = s.parse("seed")?;
    let (models, vocabs) = load_models(s)?;
    let refs: Vec<&Model> = models.iter().collect();
    let sentences = read_source(s.get("data.input"), &models[0].config().scheme)?;
    let sources: Vec<IdMatrix> = sentences
        .iter()
        .map(|t| numberize(t, &vocabs.source))
        .collect::<Result<_>>()?;
    let results = translate_corpus(&refs, &sources, opts, threads)?;
    let render = |ids: &[u32]| {
        let words = denumberize_words(ids, &vocabs.target);
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        join_subwords(&refs)
    };
    let mut lines = Vec::with_capacity(results.len());
    let mut nbest = Vec::new();
    for (i, r) in results.iter().enumerate() {
        if r.unfinished {
            writeln!(
                err,
                "warning: line {}: no hypothesis finished within {} tokens",
                i + 1,
                opts.max_len
            )?;
        }
        lines.push(render(r.best.words()));
        let list = if r.finished.is_empty() {
            std::slice::from_ref(&r.best)
        } else {
            r.finished.as_slice()
        };
        for h in list {
            nbest.push(nbest_line(i, &render(h.words()), h.score(opts.normalize)));
        }
    }
    let nbest_path = s.get("decode.nbest");
    if !nbest_path.is_empty() {
        fs::write(nbest_path, joined_lines(nbest))?;
    }
    write_text(s.get("data.output"), &joined_lines(lines), out)
}

fn score_cmd(s: &Settings, out: &mut dyn Write, _: &mut dyn Write) -> Result<()> {
    let (models, vocabs) = load_models(s)?;
    let refs: Vec<&Model> = models.iter().collect();
    let src = read_source(s.required("data.src")?, &models[0].config().scheme)?;
    let tgt = read_lines(s.required("data.tgt")?)?;
    let pairs = make_pairs(&src, &tgt, &vocabs, "scored data")?;
    writeln!(out, "perplexity\t{:.6}", perplexity(&refs, &pairs)?)?;
    Ok(())
}

fn evaluate_cmd(s: &Settings, out: &mut dyn Write, _: &mut dyn Write) -> Result<()> {
    let metric = s.get("eval.metric").to_string();
    let resamples: usize = s.parse("eval.resamples")?;
    let seed: u64 = s.parse("seed")?;
    if !["bleu", "chrf3", "significance"].contains(&metric.as_str()) {
        return Err(Error::Config(format!("eval.metric: unknown metric {metric:?}")));
    }
    if metric == "significance" {
        s.required("eval.baseline")?;
    }
    let hyp = read_lines(s.required("eval.hyp")?)?;
    let reference = read_lines(s.required("eval.ref")?)?;
    match metric.as_str() {
        "bleu" => writeln!(out, "BLEU\t{:.2}", bleu(&hyp, &reference)?)?,
        "chrf3" => writeln!(out, "chrF3\t{:.2}", chrf3(&hyp, &reference)?)?,
        _ => {
            let baseline = read_lines(s.get("eval.baseline"))?;
            let sig = bootstrap_significance(&baseline, &hyp, &reference, resamples, seed)?;
            writeln!(
                out,
                "significance\tBLEU\t{:.2}\t{:.2}\t{:.4}\t{}",
                sig.score_a,
                sig.score_b,
                sig.p_value,
                if sig.p_value < 0.05 { "*" } else { "" }
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_prints_usage() {
        let (code, out, err) = run_capture(&["frobnicate"]);
        assert_eq!(code, 1);
        assert!(out.is_empty());
        assert!(err.contains("usage:") && err.contains("learn-bpe"));
        assert_eq!(run_capture(&[]).0, 1);
        assert_eq!(run_capture(&["--help"]).0, 0);
    }

    #[test]
    fn help_lists_every_key_with_its_default() {
        for cmd in COMMANDS {
            let (code, out, _) = run_capture(&[cmd.name, "--help"]);
            assert_eq!(code, 0, "{}", cmd.name);
            for k in cmd.keys.iter().chain(GLOBAL_KEYS) {
                let line = out
                    .lines()
                    .find(|l| l.trim_start().starts_with(&format!("--{} ", k.name)));
                let line = line.unwrap_or_else(|| panic!("{} lacks {}", cmd.name, k.name));
                if k.required {
                    assert!(line.contains("(required)"), "{line}");
                } else if !k.default.is_empty() {
                    assert!(line.contains(&format!("(default {})", k.default)), "{line}");
                }
            }
        }
    }

    #[test]
    fn config_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let conf = dir.path().join("run.conf");
        fs::write(&conf, "# comment\ntrain.batch_size = 7\n\nbeam = 3\n").unwrap();
        let cmd = COMMANDS.iter().find(|c| c.name == "train").unwrap();
        let args: Vec<String> = [
            "--config",
            conf.to_str().unwrap(),
            "--train.batch-size",
            "9",
            "--seed=5",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        // "beam" is not a train key
        assert!(matches!(parse_settings(cmd, &args), Err(Error::Config(_))));
        fs::write(&conf, "# comment\ntrain.batch_size = 7\ntrain.rho=0.9\n").unwrap();
        let s = parse_settings(cmd, &args).unwrap().unwrap();
        assert_eq!(s.get("train.batch_size"), "9");
        assert_eq!(s.get("train.rho"), "0.9");
        assert_eq!(s.get("seed"), "5");
        assert_eq!(s.get("train.max_len"), "50");
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        let (code, _, err) = run_capture(&["evaluate", "--colour", "red"]);
        assert_eq!(code, 1);
        assert!(err.contains("unknown key"));
        let (code, _, _) = run_capture(&["evaluate", "--hyp"]);
        assert_eq!(code, 1);
        let (code, _, err) = run_capture(&["evaluate", "--metric", "meteor", "--hyp", "a", "--ref", "b"]);
        assert_eq!(code, 1);
        assert!(err.contains("unknown metric"));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let (code, _, err) = run_capture(&["evaluate", "--hyp", "/nonexistent/h", "--ref", "/nonexistent/r"]);
        assert_eq!(code, 2, "{err}");
    }

    #[test]
    fn evaluate_self_identity() {
        let dir = tempfile::tempdir().unwrap();
        let h = dir.path().join("h.txt");
        fs::write(&h, "the cat sat on the mat\na b c d e\n").unwrap();
        let h = h.to_str().unwrap();
        let (code, out, _) = run_capture(&["evaluate", "--metric", "bleu", "--hyp", h, "--ref", h]);
        assert_eq!((code, out.as_str()), (0, "BLEU\t100.00\n"));
        let (_, out, _) = run_capture(&["evaluate", "--metric", "chrf3", "--hyp", h, "--ref", h]);
        assert_eq!(out, "chrF3\t100.00\n");
        let (_, out, _) = run_capture(&[
            "evaluate",
            "--metric",
            "significance",
            "--hyp",
            h,
            "--ref",
            h,
            "--baseline",
            h,
        ]);
        assert_eq!(out, "significance\tBLEU\t100.00\t100.00\t1.0000\t\n");
    }

    #[test]
    fn feature_spec_parsing() {
        let f = parse_features("lemma, tag:5, pos:10:60").unwrap();
        assert_eq!(
            f,
            vec![
                ("lemma".to_string(), None, 0),
                ("tag".to_string(), Some(5), 1000),
                ("pos".to_string(), Some(10), 60)
            ]
        );
        assert!(parse_features("pos:x").is_err());
        assert!(parse_features("pos:1:2:3").is_err());
    }

    #[test]
    fn annotate_default_tag_position() {
        let dir = tempfile::tempdir().unwrap();
        let table = dir.path().join("m.bpe");
        fs::write(
            &table,
            MergeTable::from_pairs(&[("i", "n"), ("in", "</w>")]).unwrap().to_text(),
        )
        .unwrap();
        let input = dir.path().join("w.txt");
        fs::write(&input, "in|IN ab|NN\n\n").unwrap();
        let (code, out, err) = run_capture(&[
            "annotate",
            "--bpe",
            table.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        assert_eq!(out, "in|IN|O a@@|NN|B b|NN|E\n\n");
    }
}
