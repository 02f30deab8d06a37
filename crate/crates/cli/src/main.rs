//! `statetrack`: data generation, training, analysis, sweeps and ideal
//! signatures from the command line.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand, ValueEnum};
use statetrack::analysis::Mechanism;
use statetrack::datasets::{
    gen_language_corpus, gen_topic_corpus, gen_uniform_corpus, gen_word_corpus, parity_targets, serialize_corpus,
    write_corpus, Corpus, PhraseMap, TopicModelParams,
};
use statetrack::experiment::{
    read_report, run_analyze, run_train, summarize_sweep, verify_manifest, ExperimentConfig, TrainOptions, REPORT,
};
use statetrack::reference::{Algorithm, IdealSignature, ParityRelation, SignatureParams};
use statetrack::transformer::PositionalScheme;
use statetrack::{Error, Result};

#[derive(Parser)]
#[command(name = "statetrack", version, about = "Permutation state tracking in tiny transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a corpus file.
    GenData(GenData),
    /// Train a model through the configured curriculum.
    Train(Train),
    /// Run the measurement battery on a trained model.
    Analyze(Analyze),
    /// Train and analyze several seeds (and positional schemes).
    Sweep(Sweep),
    /// Write ideal patching and probing signatures.
    Ideal(Ideal),
    /// Summarize a finished run and check its artifact hashes.
    Report(Report),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataMode {
    Word,
    Parity,
    Uniform,
    Topic,
    Language,
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 3)]
    group: usize,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "word")]
    mode: DataMode,
    /// Topic-model preset (`appG1` or `appG2`); implies `--mode topic`.
    #[arg(long)]
    preset: Option<String>,
    /// Output file; the corpus goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    outdir: PathBuf,
    /// Override a config field, e.g. `--set optim.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue an interrupted run from its resume checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop after this many optimizer steps, leaving a resume checkpoint.
    #[arg(long)]
    stop_after_steps: Option<u64>,
    /// Suppress per-evaluation progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct Analyze {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint to analyze instead of the run's final one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Positional schemes to sweep; defaults to the config's own.
    #[arg(long, value_delimiter = ',')]
    schemes: Vec<String>,
    /// Runs in flight at once, each in its own process.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct Ideal {
    /// sequential, parallel, associative, parity-associative or all.
    #[arg(long)]
    alg: String,
    #[arg(long)]
    positions: usize,
    #[arg(long)]
    layers: usize,
    #[arg(long, default_value = "averaged")]
    relation: String,
    #[arg(long, default_value_t = 2)]
    parallel_depth: usize,
    #[arg(long, default_value_t = 2)]
    parity_depth: usize,
    #[arg(long)]
    include_first: bool,
    /// Chance level of the state probe curve.
    #[arg(long, default_value_t = 1.0 / 6.0)]
    chance: f64,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    outdir: PathBuf,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::InvalidArgument(format!("bad key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            toml::Value::Array(a) => match a.first_mut() {
                // `stages.epochs=3` applies to every stage
                Some(toml::Value::Table(_)) => {
                    let rest = key.split_once(p).map(|(_, r)| r.trim_start_matches('.')).unwrap_or_default();
                    for item in a.iter_mut() {
                        if let toml::Value::Table(t) = item {
                            set_path(t, rest, value.clone())?;
                        }
                    }
                    return Ok(());
                }
                _ => return Err(Error::InvalidArgument(format!("{p} is not a table"))),
            },
            _ => return Err(Error::InvalidArgument(format!("{p} is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut table: toml::Table = toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("override {o:?} is not KEY=VALUE")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    ExperimentConfig::from_toml(&text)
}

fn gen_data(a: &GenData) -> Result<()> {
    let mode = if a.preset.is_some() { DataMode::Topic } else { a.mode };
    let corpus: Corpus = match mode {
        DataMode::Word => gen_word_corpus(a.group, a.count, a.length, a.seed)?,
        DataMode::Parity => parity_targets(&gen_word_corpus(a.group, a.count, a.length, a.seed)?)?,
        DataMode::Uniform => gen_uniform_corpus(a.group, a.count, a.length, a.seed)?,
        DataMode::Topic => {
            let preset = a.preset.as_deref().unwrap_or("appG1");
            gen_topic_corpus(&TopicModelParams::preset(preset)?, a.group, a.count, a.length, a.seed)?
        }
        DataMode::Language => {
            if a.group != 3 {
                return Err(Error::InvalidArgument("natural-language rendering is defined for S3".into()));
            }
            gen_language_corpus(a.count, a.length, a.seed, &PhraseMap::s3_default())?
        }
    };
    match &a.out {
        Some(path) => {
            write_corpus(&corpus, path)?;
            eprintln!(
                "wrote {} documents ({:?}, length {}, vocab {}) to {}",
                corpus.len(),
                corpus.mode,
                corpus.meta.length,
                corpus.vocab.len(),
                path.display()
            );
        }
        None => print!("{}", serialize_corpus(&corpus)),
    }
    Ok(())
}

fn train(a: &Train) -> Result<()> {
    let cfg = load_config(&a.cfg.config, &a.cfg.overrides)?;
    let summary = run_train(&cfg, &a.cfg.outdir, TrainOptions { stop_after_steps: a.stop_after_steps, resume: a.resume, progress: !a.quiet })?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn print_report(outdir: &Path) -> Result<Vec<String>> {
    let r = read_report(&outdir.join(REPORT))?;
    let s = r.generalization.state_cutoff(0.98)?;
    let p = r.generalization.parity_cutoff(0.98)?;
    println!("run        {}", r.name);
    println!("params     {}", r.params_hash);
    println!("verdict    {}", r.verdict.label);
    println!("cutoffs    state {} ({:?}), parity {} ({:?}), train length {}", s.length, s.flag, p.length, p.flag, r.train_len);
    if let Some(phase) = r.phase {
        println!("phase      {phase:?}");
    }
    if let Some(m) = &r.verdict.evidence.signature {
        let scores: Vec<String> = m.scores.iter().map(|c| format!("{} {:.3}", c.algorithm, c.score)).collect();
        println!("signature  best {} [{}]", m.best, scores.join(", "));
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    println!("probe      state  {}", fmt(&r.probes.state));
    println!("probe      parity {}", fmt(&r.probes.parity));
    if let Some(h) = r.heads.top(1).first() {
        println!("top head   layer {} head {} score {:.3}", h.layer, h.head, h.mean);
    }
    for n in &r.notes {
        println!("note       {n}");
    }
    verify_manifest(outdir, &r)
}

fn analyze(a: &Analyze) -> Result<()> {
    let cfg = load_config(&a.cfg.config, &a.cfg.overrides)?;
    run_analyze(&cfg, &a.cfg.outdir, a.checkpoint.as_deref())?;
    print_report(&a.cfg.outdir)?;
    Ok(())
}

fn report(a: &Report) -> Result<()> {
    let bad = print_report(&a.outdir)?;
    if !bad.is_empty() {
        return Err(Error::Data(format!("artifacts changed since the report was written: {}", bad.join(", "))));
    }
    println!("manifest   ok");
    Ok(())
}

/// One sweep member: train then analyze in a child process.
fn sweep_child(a: &Sweep, dir: &Path, extra: &[String]) -> std::io::Result<std::process::Child> {
    let exe = std::env::current_exe()?;
    let mut args: Vec<String> = Vec::new();
    for o in a.cfg.overrides.iter().chain(extra) {
        args.push("--set".into());
        args.push(o.clone());
    }
    let script = |cmd: &str| -> Vec<String> {
        let mut v = vec![cmd.to_string(), "--config".into(), a.cfg.config.display().to_string(), "--outdir".into(), dir.display().to_string()];
        v.extend(args.iter().cloned());
        v
    };
    // train and analyze run back to back; a shell keeps them in one child
    let line = |v: Vec<String>| std::iter::once(exe.display().to_string()).chain(v).map(|s| shell_quote(&s)).collect::<Vec<_>>().join(" ");
    let log = std::fs::File::create(dir.join("sweep.log"))?;
    Command::new("sh")
        .arg("-c")
        .arg(format!("{} && {}", line(script("train")), line(script("analyze"))))
        .stdout(log.try_clone()?)
        .stderr(log)
        .spawn()
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn sweep(a: &Sweep) -> Result<()> {
    let base = load_config(&a.cfg.config, &a.cfg.overrides)?;
    if a.seeds == 0 || a.jobs == 0 {
        return Err(Error::InvalidArgument("--seeds and --jobs must be positive".into()));
    }
    let schemes: Vec<PositionalScheme> = if a.schemes.is_empty() {
        vec![base.model.positional_scheme]
    } else {
        a.schemes
            .iter()
            .map(|s| serde_json::from_value(serde_json::Value::String(s.clone())).map_err(|_| Error::InvalidArgument(format!("unknown scheme {s:?}"))))
            .collect::<Result<_>>()?
    };
    let mut plan = Vec::new();
    for scheme in &schemes {
        let tag = serde_json::to_value(scheme)?.as_str().unwrap_or("scheme").to_string();
        for i in 0..a.seeds {
            let name = format!("{tag}-seed{i}");
            let extra = vec![
                format!("model.positional_scheme=\"{tag}\""),
                format!("seeds.init={}", base.seeds.init + i),
                format!("seeds.data={}", base.seeds.data + i),
                format!("name=\"{}-{name}\"", base.name),
            ];
            plan.push((name, extra));
        }
    }
    std::fs::create_dir_all(&a.cfg.outdir)?;
    let mut pending = plan.iter();
    let mut running: Vec<(String, std::process::Child)> = Vec::new();
    let mut failed = Vec::new();
    loop {
        while running.len() < a.jobs {
            let Some((name, extra)) = pending.next() else { break };
            let dir = a.cfg.outdir.join(name);
            std::fs::create_dir_all(&dir)?;
            eprintln!("starting {name}");
            running.push((name.clone(), sweep_child(a, &dir, extra)?));
        }
        if running.is_empty() {
            break;
        }
        let (name, mut child) = running.remove(0);
        if !child.wait()?.success() {
            eprintln!("{name} failed; see {}", a.cfg.outdir.join(&name).join("sweep.log").display());
            failed.push(name);
        }
    }
    let mut runs = Vec::new();
    for (name, _) in &plan {
        if failed.contains(name) {
            continue;
        }
        let r = read_report(&a.cfg.outdir.join(name).join(REPORT))?;
        println!("{name:<24} {}", r.verdict.label);
        runs.push((name.clone(), r.label()));
    }
    if runs.is_empty() {
        return Err(Error::Data("every sweep run failed".into()));
    }
    let summary = summarize_sweep(runs)?;
    println!(
        "ratios: {} {:.3}, {} {:.3}, {} {:.3}",
        Mechanism::Aa,
        summary.ratios[0],
        Mechanism::Paa,
        summary.ratios[1],
        Mechanism::Neither,
        summary.ratios[2]
    );
    std::fs::write(a.cfg.outdir.join("sweep.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if !failed.is_empty() {
        return Err(Error::Data(format!("{} sweep run(s) failed: {}", failed.len(), failed.join(", "))));
    }
    Ok(())
}

fn ideal(a: &Ideal) -> Result<()> {
    let algs: Vec<Algorithm> = if a.alg == "all" { Algorithm::ALL.to_vec() } else { vec![a.alg.parse()?] };
    let relation: ParityRelation = a.relation.parse()?;
    let params = SignatureParams { parallel_depth: a.parallel_depth, parity_depth: a.parity_depth, include_first: a.include_first };
    std::fs::create_dir_all(&a.outdir)?;
    for alg in algs {
        let sig = IdealSignature::new(alg, a.positions, a.layers, relation, a.chance, &params)?;
        std::fs::write(a.outdir.join(format!("{}.csv", alg.name())), sig.grid_csv())?;
        std::fs::write(a.outdir.join(format!("{}.json", alg.name())), serde_json::to_string_pretty(&sig)? + "\n")?;
        println!("{}: {} positions x {} layers", alg.name(), sig.positions, sig.depth + 1);
    }
    Ok(())
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
    let res = match &cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Ideal(a) => ideal(a),
        Cmd::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
