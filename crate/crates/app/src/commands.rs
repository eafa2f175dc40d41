use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use diffcore::{grad_check, GradCheckOptions};
use log::info;
use lstn::baseline::{train_split_model, SplitModel};
use lstn::corpus::{
    anonymize, build_vocab, convert, encode_dialogs, load_corpus, load_lexicon, parse_corpus, write_corpus, CorpusFormat,
    CorpusSplit, Dialog, EncodedDialog, SplitName, Vocabulary,
};
use lstn::em::{e_step, m_step_objective, train_model, LogRecord, TrainFailure};
use lstn::evaluation::{evaluate, k_sweep, sweep_plot_data};
use lstn::inference::build_response_cache;
use lstn::interpret::{detect_duplicates, export_flow_graph, mine_intents, posterior_states};
use lstn::synth::{generate_corpus, state_recovery, OracleMachine, SynthCorpus};
use lstn::{Lstn, LstnError};

use crate::config::RunConfig;
use crate::run_dir::{self, RunDir};
use crate::{Command, Common, GradcheckArgs, PreprocessArgs, ServeArgs, SweepArgs};

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Preprocess(a) => preprocess(&a),
        Command::Train(c) => train(&resolve(&c)?),
        Command::TrainBaseline(c) => train_baseline(&resolve(&c)?),
        Command::Eval(c) => eval(&resolve(&c)?),
        Command::SweepK(a) => sweep(&a),
        Command::ExportTree(c) => export_tree(&resolve(&c)?),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Synth(c) => synth(&resolve(&c)?),
        Command::Serve(a) => serve(&a),
    }
}

/// Loads the config file (or defaults) and applies flag overrides.
pub fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let p = &mut cfg.paths;
    if let Some(v) = &c.run_dir {
        p.run_dir = v.clone();
    }
    if let Some(v) = &c.corpus {
        p.corpus = Some(v.clone());
    }
    if let Some(v) = &c.format {
        p.format = CorpusFormat::from_str(v)?;
    }
    if let Some(v) = &c.lexicon {
        p.lexicon = Some(v.clone());
    }
    if let Some(v) = &c.gold {
        p.gold = Some(v.clone());
    }
    let t = &mut cfg.train;
    macro_rules! set {
        ($($flag:ident => $field:expr),*) => {$(if let Some(v) = c.$flag { $field = v; })*};
    }
    set!(
        num_states => t.num_states,
        epochs => t.epochs,
        seed => t.seed,
        learning_rate => t.learning_rate,
        embed_dim => t.embed_dim,
        hidden_dim => t.hidden_dim,
        batch_size => t.batch_size,
        m_steps => t.m_steps_per_e_step,
        min_count => cfg.min_count,
        beam_size => cfg.eval.beam.beam_size
    );
    if c.allow_off_grid {
        cfg.train.allow_off_grid = true;
    }
    cfg.train.validate()?;
    if cfg.eval.beam.beam_size == 0 || cfg.eval.beam.max_len == 0 {
        bail!("beam_size and max_len must be positive");
    }
    Ok(cfg)
}

fn corpus_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.paths
        .corpus
        .as_deref()
        .ok_or_else(|| anyhow!("no corpus configured (set paths.corpus or pass --corpus)"))
}

/// Loads the configured corpus, anonymized when a lexicon is set.
pub fn load_configured_corpus(cfg: &RunConfig) -> Result<CorpusSplit> {
    let corpus = load_corpus(corpus_path(cfg)?, cfg.paths.format)?;
    Ok(match &cfg.paths.lexicon {
        Some(p) => {
            let lex = load_lexicon(p)?;
            corpus.map_dialogs(|d| anonymize(d, &lex))
        }
        None => corpus,
    })
}

fn run_dir(cfg: &RunConfig) -> Result<RunDir> {
    let dir = RunDir::new(&cfg.paths.run_dir);
    dir.create()?;
    dir.write(run_dir::CONFIG, cfg.to_toml())?;
    Ok(dir)
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let source = a.input.display().to_string();
    let split = SplitName::from_str(&a.split)?;
    let converted = |dialogs: Vec<Dialog>| {
        let mut c = CorpusSplit::default();
        *c.split_mut(split) = dialogs;
        c
    };
    let mut corpus = match a.input_format.as_str() {
        "smd" => converted(convert::convert_smd(&text, "smd-").with_context(|| source.clone())?),
        "camrest" => converted(convert::convert_camrest(&text, "camrest-").with_context(|| source.clone())?),
        other => parse_corpus(&text, CorpusFormat::from_str(other)?, &source)?,
    };
    if let Some(p) = &cfg.paths.lexicon {
        let lex = load_lexicon(p)?;
        corpus = corpus.map_dialogs(|d| anonymize(d, &lex));
    }
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_corpus(&corpus, &a.output)?;
    println!(
        "wrote {} dialogs (train {}, dev {}, test {}) to {}",
        corpus.len(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        a.output.display()
    );
    Ok(())
}

/// Training log lines without wall-clock times, so reruns produce identical files.
fn reproducible_log(log: &[LogRecord]) -> String {
    let stripped: Vec<LogRecord> = log.iter().map(|r| LogRecord { wall_ms: 0, ..r.clone() }).collect();
    lstn::em::log_to_jsonl(&stripped)
}

fn log_progress(r: &LogRecord) {
    info!(
        "{}epoch {} elbo {:.4} dev ppl {:.4} ({} ms)",
        r.phase.as_deref().map(|p| format!("{p} ")).unwrap_or_default(),
        r.epoch,
        r.elbo,
        r.dev_ppl,
        r.wall_ms
    );
}

struct Prepared {
    corpus: CorpusSplit,
    vocab: Vocabulary,
    train: Vec<EncodedDialog>,
    dev: Vec<EncodedDialog>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let corpus = load_configured_corpus(cfg)?;
    let vocab = build_vocab(&corpus.train, cfg.min_count)?;
    let train = encode_dialogs(&corpus.train, &vocab);
    let dev = encode_dialogs(&corpus.dev, &vocab);
    Ok(Prepared {
        corpus,
        vocab,
        train,
        dev,
    })
}

/// Writes a trained model with its vocabulary, cache and log.
fn save_trained(dir: &RunDir, model: &Lstn, vocab: &Vocabulary, log: &[LogRecord], cfg: &RunConfig, tag: &str) -> Result<()> {
    model.save(&dir.path(run_dir::MODEL), Some(tag))?;
    dir.write(run_dir::VOCAB, serde_json::to_string(vocab)?)?;
    dir.write(run_dir::TRAIN_LOG, reproducible_log(log))?;
    let cache = build_response_cache(model, &cfg.eval.beam)?;
    cache.save(&dir.path(run_dir::CACHE))?;
    dir.write_manifest()
}

fn failed(dir: &RunDir, f: TrainFailure) -> anyhow::Error {
    let _ = dir.write(run_dir::TRAIN_LOG, reproducible_log(&f.log));
    if let Some(m) = &f.last_good {
        let p = dir.path("model.last_good.json");
        if m.save(&p, Some("last_good")).is_ok() {
            eprintln!("saved last good model to {}", p.display());
        }
    }
    let _ = dir.write_manifest();
    anyhow!("training failed: {}", f.error)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let p = prepare(cfg)?;
    let dir = run_dir(cfg)?;
    let model = Lstn::new(cfg.train.model_config(&p.vocab), cfg.train.seed)?;
    let out = train_model(model, &p.train, &p.dev, &cfg.train, &mut log_progress).map_err(|f| failed(&dir, f))?;
    save_trained(&dir, &out.model, &p.vocab, &out.log, cfg, "lstn")?;
    println!(
        "trained K={} on {} dialogs; best epoch {} dev perplexity {:.4}; wrote {}",
        out.model.num_states(),
        p.corpus.train.len(),
        out.best_epoch,
        out.best_dev_ppl,
        dir.root().display()
    );
    Ok(())
}

fn train_baseline(cfg: &RunConfig) -> Result<()> {
    let p = prepare(cfg)?;
    let dir = run_dir(cfg)?;
    let model = SplitModel::new(
        cfg.train.model_config(&p.vocab),
        cfg.train.seed,
        cfg.baseline.include_agent_context,
    )?;
    let out = train_split_model(model, &p.train, &p.dev, &cfg.train, &cfg.baseline, &mut log_progress)
        .map_err(|f| failed(&dir, f))?;
    save_trained(&dir, &out.model, &p.vocab, &out.log, cfg, "split")?;
    println!(
        "trained split baseline K={} on {} dialogs; wrote {}",
        out.model.num_states(),
        p.corpus.train.len(),
        dir.root().display()
    );
    Ok(())
}

fn load_gold(path: &Path) -> Result<HashMap<String, Vec<usize>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SynthCorpus::parse_gold_jsonl(&text)
        .with_context(|| format!("parsing {}", path.display()))?
        .into_iter()
        .collect())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let corpus = load_configured_corpus(cfg)?;
    let dir = RunDir::new(&cfg.paths.run_dir);
    let model = dir.load_model()?;
    let vocab = dir.load_vocab()?;
    let cache = if dir.exists(run_dir::CACHE) {
        dir.load_cache()?
    } else {
        build_response_cache(&model, &cfg.eval.beam)?
    };
    let split = SplitName::from_str(&cfg.eval.split)?;
    let dialogs = corpus.split(split);
    if dialogs.is_empty() {
        bail!("{}: the {} split is empty", corpus_path(cfg)?.display(), cfg.eval.split);
    }
    let name = format!("{}:{}", corpus_path(cfg)?.display(), cfg.eval.split);
    let mut report = evaluate(&name, dialogs, &model, &cache, &vocab)?;
    print!("{}", report.table());
    if !cfg.eval.per_dialog {
        report.per_dialog.clear();
    }
    dir.write(run_dir::CONFIG, cfg.to_toml())?;
    dir.write(run_dir::EVAL_REPORT, report.to_json_line())?;
    if let (true, Some(gold_path)) = (cfg.eval.purity, &cfg.paths.gold) {
        let gold = load_gold(gold_path)?;
        let learned = posterior_states(&model, dialogs, &vocab)?;
        let mut l = Vec::new();
        let mut g = Vec::new();
        for (d, states) in dialogs.iter().zip(learned) {
            let gs = gold
                .get(&d.id)
                .ok_or_else(|| anyhow!("{}: no gold states for dialog {}", gold_path.display(), d.id))?;
            if gs.len() != states.len() {
                bail!("{}: dialog {} has {} gold states for {} turns", gold_path.display(), d.id, gs.len(), states.len());
            }
            l.extend(states);
            g.extend(gs);
        }
        let purity = state_recovery(&l, &g)?;
        println!("purity: {purity:.4}");
        dir.write(
            run_dir::PURITY,
            serde_json::to_string(&serde_json::json!({"split": cfg.eval.split, "purity": purity, "turns": l.len()}))? + "\n",
        )?;
    }
    dir.write_manifest()?;
    println!("wrote {}", dir.path(run_dir::EVAL_REPORT).display());
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if !a.k.is_empty() {
        cfg.sweep.k_values = a.k.clone();
    }
    let corpus = load_configured_corpus(&cfg)?;
    let vocab = build_vocab(&corpus.train, cfg.min_count)?;
    let dir = run_dir(&cfg)?;
    let rows = k_sweep(&corpus, &vocab, &cfg.train, &cfg.eval.beam, &cfg.sweep.k_values)?;
    let jsonl: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()?;
    dir.write(run_dir::SWEEP_JSONL, jsonl)?;
    let tsv = sweep_plot_data(&rows);
    dir.write(run_dir::SWEEP_TSV, &tsv)?;
    dir.write_manifest()?;
    print!("{tsv}");
    Ok(())
}

fn export_tree(cfg: &RunConfig) -> Result<()> {
    let corpus = load_configured_corpus(cfg)?;
    let dir = RunDir::new(&cfg.paths.run_dir);
    let model = dir.load_model()?;
    let vocab = dir.load_vocab()?;
    let cache = dir.load_cache()?;
    let intents = mine_intents(&model, &corpus.train, &vocab)?;
    let graph = export_flow_graph(&intents, &cache, &vocab, cfg.graph.min_edge_count, cfg.graph.top_r)?;
    let dups = detect_duplicates(&cache, cfg.graph.duplicate_threshold)?;
    let intents_jsonl: String = intents
        .iter()
        .map(|c| serde_json::to_string(c).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()?;
    dir.write(run_dir::CONFIG, cfg.to_toml())?;
    dir.write(run_dir::INTENTS, intents_jsonl)?;
    dir.write(run_dir::GRAPH_JSONL, graph.to_jsonl())?;
    dir.write(run_dir::GRAPH_DOT, graph.to_dot())?;
    dir.write(
        run_dir::DUPLICATES,
        serde_json::to_string(&serde_json::json!({"threshold": cfg.graph.duplicate_threshold, "groups": dups}))? + "\n",
    )?;
    dir.write_manifest()?;
    println!(
        "{} intent classes, {} edges at min count {}, {} duplicate groups; wrote {}",
        intents.len(),
        graph.edges.len(),
        cfg.graph.min_edge_count,
        dups.len(),
        dir.path(run_dir::GRAPH_DOT).display()
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    if a.dialogs == 0 || a.turns == 0 {
        bail!("--dialogs and --turns must be positive");
    }
    let corpus = load_configured_corpus(&cfg)?;
    let vocab = build_vocab(&corpus.train, cfg.min_count)?;
    let dialogs: Vec<Dialog> = corpus
        .train
        .iter()
        .take(a.dialogs)
        .map(|d| Dialog {
            id: d.id.clone(),
            turns: d.turns.iter().take(a.turns).cloned().collect(),
        })
        .collect();
    let mut model = Lstn::new(cfg.train.model_config(&vocab), cfg.train.seed)?;
    let layout = model.layout.clone();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for d in encode_dialogs(&dialogs, &vocab) {
        let q = e_step(&model, &d)?;
        let report = grad_check::<_, LstnError>(&mut model.store, GradCheckOptions::default(), |g| {
            m_step_objective(g, &layout, &d, &q)
        })?;
        coords += report.coords_checked;
        if report.max_rel_error >= worst {
            worst = report.max_rel_error;
            if let Some((name, i)) = &report.worst {
                info!("{}: worst coordinate {name}[{i}]", d.id);
            }
        }
    }
    println!(
        "max relative error {worst:.3e} over {coords} coordinates in {} dialogs (tolerance {:.0e})",
        dialogs.len(),
        a.tolerance
    );
    if worst.is_nan() || worst >= a.tolerance {
        bail!("gradient check failed: {worst:.3e} >= {:.0e}", a.tolerance);
    }
    Ok(())
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let machine = match &cfg.synth.machine {
        Some(p) => OracleMachine::load(p)?,
        None => OracleMachine::weather(),
    };
    let out = generate_corpus(&machine, cfg.synth.dialogs, cfg.synth.max_turns, cfg.synth.seed)?;
    let corpus = corpus_path(cfg)?;
    if cfg.paths.format != CorpusFormat::Jsonl {
        bail!("synth writes JSONL corpora; set paths.format = \"jsonl\"");
    }
    if let Some(parent) = corpus.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_corpus(&out.corpus, corpus)?;
    let gold = cfg.paths.gold.clone().unwrap_or_else(|| corpus.with_file_name("gold.jsonl"));
    std::fs::write(&gold, out.gold_jsonl()).with_context(|| format!("writing {}", gold.display()))?;
    let machine_path = gold.with_file_name("machine.toml");
    std::fs::write(&machine_path, machine.to_toml()).with_context(|| format!("writing {}", machine_path.display()))?;
    println!(
        "generated {} dialogs over {} states; wrote {} and {}",
        out.corpus.len(),
        machine.num_states(),
        corpus.display(),
        gold.display()
    );
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    let s = &mut cfg.serve;
    if let Some(v) = &a.host {
        s.host = v.clone();
    }
    if let Some(v) = a.port {
        s.port = v;
    }
    if let Some(v) = a.idle_timeout_secs {
        s.idle_timeout_secs = v;
    }
    if let Some(v) = &a.static_dir {
        s.static_dir = Some(v.clone());
    }
    let state = crate::server::AppState::from_config(&cfg)?;
    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    rt.block_on(crate::server::serve(state, &cfg.serve))
}
