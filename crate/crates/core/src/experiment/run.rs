//! Training and analysis runs laid out on disk as
//! `<outdir>/{config.resolved, checkpoints/, logs/, analysis/, report.json}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{write_report, RunReport};
use crate::analysis::{
    candidate_signatures, classify_curve, generalization_curve, phase_detect, signature_match, GeneralizationCurve,
    MechanismLabel, Phase, TrainingLog,
};
use crate::datasets::{gen_eval_sequences, training_data};
use crate::error::{Error, Result};
use crate::interp::{
    attention_graph, make_patch_pairs, parity_head_scores, pca_decomposition, prefix_patch_variants, probe_by_length,
    probe_curves_for, Decomposition, Edge, GraphOptions, HeadScoreTable, LengthProbe, ParityFilter, PrefixGrids,
    ProbeCurves,
};
use crate::reference::matrix_csv;
use crate::rng::mix;
use crate::transformer::{
    forward, load_checkpoint_for, params_hash, read_log, save_checkpoint, train, Capture, Hooks, Model, TrainOutcome,
    TrainState,
};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";
pub const RESUME_CHECKPOINT: &str = "checkpoints/resume.ckpt";
pub const TRAIN_LOG: &str = "logs/train.jsonl";
pub const REPORT: &str = "report.json";

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Stop (resumably) after this many optimizer steps in total.
    pub stop_after_steps: Option<u64>,
    /// Continue from `checkpoints/resume.ckpt` when present.
    pub resume: bool,
    /// Print each held-out evaluation to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub steps: u64,
    pub stages_completed: usize,
    pub params_hash: String,
}

fn ensure_dirs(outdir: &Path) -> Result<()> {
    for d in ["checkpoints", "logs", "analysis"] {
        std::fs::create_dir_all(outdir.join(d))?;
    }
    Ok(())
}

/// Writes `config.resolved`, refusing to mix runs of different configs in
/// one directory.
fn pin_config(cfg: &ExperimentConfig, outdir: &Path) -> Result<()> {
    let text = cfg.to_toml()?;
    let path = outdir.join(RESOLVED_CONFIG);
    if path.exists() {
        let old = std::fs::read_to_string(&path)?;
        if old != text {
            let prev = ExperimentConfig::from_toml(&old)?;
            if prev.resolved() != cfg.resolved() {
                return Err(Error::Config(format!("{} holds a different config", outdir.display())));
            }
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Held-out words for training-time evaluation, disjoint in seed stream
/// from every corpus.
fn eval_hook(
    cfg: &ExperimentConfig,
    stage: usize,
    progress: bool,
) -> impl FnMut(&Model) -> Result<crate::transformer::EvalMetrics> + '_ {
    let seed = mix(cfg.seeds.analysis, 0xE7A1);
    let len = cfg.stage_len(stage);
    let mut k = 0;
    move |m: &Model| {
        let curve = generalization_curve(m, cfg.group, len, cfg.optim.eval_count, seed)?;
        k += 1;
        if progress {
            let pct: Vec<String> = curve.state.iter().map(|a| format!("{:.0}", 100.0 * a)).collect();
            eprintln!("stage {stage} eval {k}: state accuracy by length {}", pct.join(" "));
        }
        Ok(curve.to_metrics())
    }
}

/// Runs (or resumes) the whole curriculum and writes the final checkpoint
/// and training log.
pub fn run_train(cfg: &ExperimentConfig, outdir: &Path, opts: TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    ensure_dirs(outdir)?;
    pin_config(cfg, outdir)?;
    let model_cfg = cfg.model_config();
    let resume_path = outdir.join(RESUME_CHECKPOINT);
    let mut state = if opts.resume && resume_path.exists() {
        load_checkpoint_for(&resume_path, &model_cfg)?
    } else {
        TrainState::new(Model::init(&model_cfg)?)
    };
    let mut outcome = TrainOutcome::Completed;
    loop {
        let stage = state.position.stage;
        if stage >= cfg.stages.len() {
            return Err(Error::Data(format!("checkpoint is at stage {stage} of {}", cfg.stages.len())));
        }
        if !state.position.finished {
            let corpus = cfg.stage_corpus(stage)?;
            let data = training_data(&corpus, cfg.stages[stage].aux_parity.map(|a| a.target))?;
            let tcfg = cfg.stage_train_config(stage)?;
            let mut hook = eval_hook(cfg, stage, opts.progress);
            let mut hooks = Hooks { eval: Some(&mut hook), stop_after_steps: opts.stop_after_steps };
            outcome = train(&mut state, &data, &tcfg, &mut hooks)?;
            if outcome == TrainOutcome::Interrupted {
                save_checkpoint(&resume_path, &state, true)?;
                state.write_log(&outdir.join(TRAIN_LOG))?;
                return Ok(TrainSummary {
                    outcome,
                    steps: state.position.global_step,
                    stages_completed: stage,
                    params_hash: params_hash(&state.model),
                });
            }
        }
        if stage + 1 == cfg.stages.len() {
            break;
        }
        state.next_stage();
    }
    save_checkpoint(&outdir.join(FINAL_CHECKPOINT), &state, false)?;
    state.write_log(&outdir.join(TRAIN_LOG))?;
    if resume_path.exists() {
        std::fs::remove_file(&resume_path)?;
    }
    Ok(TrainSummary {
        outcome,
        steps: state.position.global_step,
        stages_completed: cfg.stages.len(),
        params_hash: params_hash(&state.model),
    })
}

/// Everything measured on one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub curve: GeneralizationCurve,
    pub verdict: MechanismLabel,
    pub phase: Option<Phase>,
    /// Empty when no patch pair was usable; see `notes`.
    pub prefix: Vec<(ParityFilter, PrefixGrids)>,
    pub probes: ProbeCurves,
    pub probe_by_length: Option<LengthProbe>,
    pub heads: HeadScoreTable,
    pub pca: Decomposition,
    pub graph: Vec<Edge>,
    /// Measurements that could not be made on this model, and why.
    pub notes: Vec<String>,
}

/// The measurement battery; every random draw derives from
/// `seeds.analysis`.
pub fn run_battery(cfg: &ExperimentConfig, model: &Model, log: Option<&[crate::transformer::TrainRecord]>) -> Result<Battery> {
    let a = &cfg.analysis;
    let seed = cfg.seeds.analysis;
    let (n, t, layers) = (cfg.group, cfg.train_len(), model.cfg.n_layers);

    let curve = generalization_curve(model, n, cfg.eval_len(), a.n_eval, mix(seed, 1))?;
    let mut verdict = classify_curve(&curve, t, a.threshold, &a.classify)?;

    let pairs = make_patch_pairs(n, t, a.n_pairs, mix(seed, 2))?;
    let filters = [ParityFilter::All, ParityFilter::Same, ParityFilter::Opposite];
    let mut notes = Vec::new();
    let prefix: Vec<(ParityFilter, PrefixGrids)> = match prefix_patch_variants(model, &pairs, a.signature.include_first, &filters) {
        Ok(grids) => filters.into_iter().zip(grids).collect(),
        // a model that answers every pair alike leaves nothing to restore
        Err(Error::Data(msg)) => {
            notes.push(format!("prefix patching skipped: {msg}"));
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    if let Some((_, all)) = prefix.first() {
        let ideals = candidate_signatures(t, layers, &a.signature)?;
        match signature_match(&all.nld.values, &ideals) {
            Ok(m) => verdict.evidence.signature = Some(m),
            Err(e) => notes.push(format!("signature match skipped: {e}")),
        }
    }

    let probe_seqs = gen_eval_sequences(n, a.probe_seqs, t, mix(seed, 3));
    let probes = probe_curves_for(model, &probe_seqs, mix(seed, 4), a.probe_l2)?;
    let probe_by_length = if a.probe_by_length {
        let lengths: Vec<usize> = (1..=t).collect();
        Some(probe_by_length(model, n, &lengths, a.probe_seqs, mix(seed, 5), a.probe_l2)?)
    } else {
        None
    };

    let heads = parity_head_scores(model, n, cfg.head_len(), a.head_examples, mix(seed, 6))?;
    let pca_seqs = gen_eval_sequences(n, a.pca_seqs, t, mix(seed, 7));
    let pca = pca_decomposition(model, &pca_seqs, layers)?;

    let tokens: Vec<u32> = pca_seqs[0].iter().map(|p| p.rank() as u32).collect();
    let out = forward(model, &[&tokens], Capture::ResidAttn)?;
    let graph = attention_graph(out.trace.as_ref().expect("captured"), 0, &GraphOptions::default())?;

    let phase = match log {
        Some(records) => {
            let tl = TrainingLog::from_records(records, t, a.threshold)?;
            Some(phase_detect(&tl, &a.phase)?)
        }
        None => None,
    };
    Ok(Battery { curve, verdict, phase, prefix, probes, probe_by_length, heads, pca, graph, notes })
}

fn write(path: PathBuf, text: String) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Writes the battery's files under `analysis/` and returns their
/// run-relative paths.
pub fn write_battery(outdir: &Path, b: &Battery) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let rel = format!("analysis/{name}");
        write(outdir.join(&rel), text)?;
        files.push(rel);
        Ok(())
    };
    put("generalization.csv", b.curve.to_csv())?;
    put("verdict.json", json(&b.verdict)?)?;
    for (f, g) in &b.prefix {
        let tag = match f {
            ParityFilter::All => "all",
            ParityFilter::Same => "same",
            ParityFilter::Opposite => "opposite",
        };
        put(&format!("prefix_nld_{tag}.csv"), matrix_csv(&g.nld.values))?;
        put(&format!("prefix_prob_{tag}.csv"), matrix_csv(&g.prob.values))?;
    }
    let mut probe_csv = String::from("layer,state_accuracy,parity_accuracy\n");
    for l in 0..b.probes.state.len() {
        probe_csv += &format!("{l},{},{}\n", b.probes.state[l], b.probes.parity[l]);
    }
    put("probes.csv", probe_csv)?;
    if let Some(pl) = &b.probe_by_length {
        put("probe_by_length.csv", matrix_csv(&pl.mean_correct_prob))?;
    }
    let mut heads = String::from("layer,head,score,std,examples\n");
    for h in &b.heads.scores {
        heads += &format!("{},{},{},{},{}\n", h.layer, h.head, h.mean, h.std, h.examples);
    }
    put("heads.csv", heads)?;
    put("pca.json", json(&b.pca)?)?;
    put("attention_graph.json", json(&b.graph)?)?;
    Ok(files)
}

/// Loads the final checkpoint, runs the battery and writes the report.
pub fn run_analyze(cfg: &ExperimentConfig, outdir: &Path, checkpoint: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    ensure_dirs(outdir)?;
    pin_config(cfg, outdir)?;
    let ckpt = checkpoint.map_or_else(|| outdir.join(FINAL_CHECKPOINT), Path::to_path_buf);
    let state = load_checkpoint_for(&ckpt, &cfg.model_config())?;
    let log_path = outdir.join(TRAIN_LOG);
    let log = if log_path.exists() { Some(read_log(&log_path)?) } else { None };
    let battery = run_battery(cfg, &state.model, log.as_deref())?;
    let mut files = vec![RESOLVED_CONFIG.to_string()];
    files.extend(write_battery(outdir, &battery)?);
    let report = RunReport::new(cfg, &state.model, battery, outdir, &files)?;
    write_report(&outdir.join(REPORT), &report)?;
    Ok(report)
}
