//! Run configuration: one TOML file describing data, model, curriculum,
//! analysis and seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{ClassifyParams, PhaseParams, DEFAULT_THRESHOLD};
use crate::datasets::{
    aux_classes, gen_topic_corpus, gen_uniform_corpus, gen_word_corpus, parity_targets, Corpus, TopicModelParams, Vocab,
};
use crate::error::{Error, Result};
use crate::interp::{default_head_len, DEFAULT_L2};
use crate::perm::factorial;
use crate::reference::SignatureParams;
use crate::rng::mix;
use crate::transformer::{AuxParityConfig, LossMode, LossNormalization, LrSchedule, ModelConfig, PositionalScheme, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Parameter initialization.
    pub init: u64,
    /// Corpus generation and per-epoch shuffling.
    pub data: u64,
    /// Every randomized measurement.
    pub analysis: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub positional_scheme: PositionalScheme,
    #[serde(default)]
    pub tied_embeddings: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let s = ModelConfig::small(8, 1, 0);
        Self {
            n_layers: s.n_layers,
            d_model: s.d_model,
            n_heads: s.n_heads,
            d_mlp: s.d_mlp,
            positional_scheme: PositionalScheme::Learned,
            tied_embeddings: false,
        }
    }
}

/// Optimizer settings shared by all stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub schedule: LrSchedule,
    pub normalization: LossNormalization,
    pub shard_size: usize,
    pub log_every: u64,
    /// Generalization evaluations between epoch ends; 0 for epoch ends only.
    pub eval_every: u64,
    /// Held-out words per training-time evaluation.
    pub eval_count: usize,
}

impl Default for OptimSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: 3e-3,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            schedule: t.schedule,
            normalization: t.normalization,
            shard_size: t.shard_size,
            log_every: t.log_every,
            eval_every: 0,
            eval_count: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StageCorpus {
    /// Running-state targets on distinct random words.
    Word,
    /// Parity of the running state on the same kind of words.
    Parity,
    /// Next-token prediction on uniform group elements.
    Uniform,
    /// Next-token prediction on a topic-model corpus.
    Topic { preset: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub corpus: StageCorpus,
    pub epochs: usize,
    /// Document length; defaults to `data.length`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    /// Document count; defaults to `data.count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_parity: Option<AuxParityConfig>,
    /// Stop the stage once every length up to the stage length reaches
    /// this state accuracy on held-out words.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub count: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSpec {
    /// Longest length of the generalization curve; 0 means twice the
    /// training length.
    pub eval_len: usize,
    pub n_eval: usize,
    pub threshold: f64,
    pub classify: ClassifyParams,
    pub phase: PhaseParams,
    pub n_pairs: usize,
    pub probe_seqs: usize,
    pub probe_l2: f64,
    /// Also fit one probe per (layer, length).
    pub probe_by_length: bool,
    pub head_examples: usize,
    /// Longest prefix scored for parity heads; 0 picks the group default
    /// (capped by the context length).
    pub head_max_len: usize,
    pub signature: SignatureParams,
    pub pca_seqs: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            eval_len: 0,
            n_eval: 1000,
            threshold: DEFAULT_THRESHOLD,
            classify: ClassifyParams::default(),
            phase: PhaseParams::default(),
            n_pairs: 100,
            probe_seqs: 1000,
            probe_l2: DEFAULT_L2,
            probe_by_length: false,
            head_examples: 50,
            head_max_len: 0,
            signature: SignatureParams::default(),
            pca_seqs: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Symmetric-group degree.
    pub group: usize,
    pub seeds: Seeds,
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub optim: OptimSpec,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Config with every default filled in, as written next to the run.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.resolved()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=5).contains(&self.group) {
            return fail(format!("group degree {} unsupported (2..=5)", self.group));
        }
        if self.stages.is_empty() {
            return fail("at least one curriculum stage is required".into());
        }
        if !matches!(self.stages.last().map(|s| &s.corpus), Some(StageCorpus::Word)) {
            return fail("the last stage must be a word stage".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.epochs == 0 || self.stage_len(i) == 0 || self.stage_count(i) == 0 {
                return fail(format!("stage {i}: epochs, length and count must be positive"));
            }
            if let StageCorpus::Topic { preset } = &s.corpus {
                TopicModelParams::preset(preset)?;
                if self.group != 3 {
                    return fail("topic presets are defined over S3".into());
                }
            }
            if s.aux_parity.is_some() && !matches!(s.corpus, StageCorpus::Word | StageCorpus::Parity) {
                return fail(format!("stage {i}: aux parity needs a word-problem corpus"));
            }
        }
        let a = &self.analysis;
        if a.n_eval == 0 || a.n_pairs == 0 || a.probe_seqs < 10 || a.head_examples == 0 || a.pca_seqs == 0 {
            return fail("analysis sample counts must be positive (probe_seqs at least 10)".into());
        }
        if !(0.0..=1.0).contains(&a.threshold) {
            return fail("analysis.threshold must lie in [0, 1]".into());
        }
        if self.train_len() < 2 {
            return fail("the final stage needs documents of length at least 2".into());
        }
        self.model_config().validate()?;
        self.stage_train_config(0)?.validate()
    }

    pub fn stage_len(&self, i: usize) -> usize {
        self.stages[i].length.unwrap_or(self.data.length)
    }

    pub fn stage_count(&self, i: usize) -> usize {
        self.stages[i].count.unwrap_or(self.data.count)
    }

    /// Document length of the final stage.
    pub fn train_len(&self) -> usize {
        self.stage_len(self.stages.len() - 1)
    }

    pub fn eval_len(&self) -> usize {
        if self.analysis.eval_len == 0 {
            2 * self.train_len()
        } else {
            self.analysis.eval_len
        }
    }

    pub fn head_len(&self) -> usize {
        if self.analysis.head_max_len == 0 {
            default_head_len(self.group).min(self.context())
        } else {
            self.analysis.head_max_len
        }
    }

    fn context(&self) -> usize {
        let stages = (0..self.stages.len()).map(|i| self.stage_len(i)).max().unwrap_or(0);
        stages.max(self.eval_len()).max(self.analysis.head_max_len)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_mlp: m.d_mlp,
            vocab_size: factorial(self.group) + 2,
            max_positions: self.context(),
            positional_scheme: m.positional_scheme,
            tied_embeddings: m.tied_embeddings,
            seed: self.seeds.init,
        }
    }

    pub fn stage_train_config(&self, i: usize) -> Result<TrainConfig> {
        let o = &self.optim;
        let s = &self.stages[i];
        let loss_mode = match s.corpus {
            StageCorpus::Word => LossMode::State,
            StageCorpus::Parity => LossMode::Parity,
            StageCorpus::Uniform | StageCorpus::Topic { .. } => LossMode::NextToken,
        };
        Ok(TrainConfig {
            epochs: s.epochs,
            batch_size: o.batch_size,
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            grad_clip: o.grad_clip,
            eval_every: o.eval_every,
            log_every: o.log_every,
            loss_mode,
            normalization: o.normalization,
            aux_parity: s.aux_parity,
            schedule: o.schedule,
            data_seed: self.seeds.data,
            target_accuracy: s.target_accuracy,
            shard_size: o.shard_size,
        })
    }

    /// Word documents shared by all word and parity stages: drawn at
    /// `max(len, data.length)` and cut to `len`, so a length curriculum
    /// revisits prefixes of the same documents.
    fn word_corpus(&self, count: usize, len: usize) -> Result<Corpus> {
        let full = len.max(self.data.length);
        let mut c = gen_word_corpus(self.group, count, full, mix(self.seeds.data, 0xC0))?;
        if len < full {
            for d in &mut c.docs {
                d.input_ids.truncate(len);
                d.target_ids.truncate(len);
            }
            c.meta.length = len;
        }
        Ok(c)
    }

    /// Corpus of stage `i`. Next-token stages draw from their own seed
    /// streams.
    pub fn stage_corpus(&self, i: usize) -> Result<Corpus> {
        let (len, count) = (self.stage_len(i), self.stage_count(i));
        let seed = mix(self.seeds.data, 0xC0 + i as u64 + 1);
        match &self.stages[i].corpus {
            StageCorpus::Word => self.word_corpus(count, len),
            StageCorpus::Parity => parity_targets(&self.word_corpus(count, len)?),
            StageCorpus::Uniform => gen_uniform_corpus(self.group, count, len, seed),
            StageCorpus::Topic { preset } => gen_topic_corpus(&TopicModelParams::preset(preset)?, self.group, count, len, seed),
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::group(self.group)
    }

    pub fn aux_class_count(&self, i: usize) -> Option<usize> {
        self.stages[i].aux_parity.map(|a| aux_classes(a.target, self.group))
    }

    /// Fills the data-dependent defaults (`eval_len`, `head_max_len`).
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.analysis.eval_len = self.eval_len();
        c.analysis.head_max_len = self.head_len();
        c
    }

    /// The scaled S3 recipe: 4 layers of width 64, length-24 words.
    pub fn smoke(name: &str) -> Self {
        Self {
            name: name.into(),
            group: 3,
            seeds: Seeds { init: 0, data: 0, analysis: 0 },
            data: DataSpec { count: 50_000, length: 24 },
            model: ModelSpec::default(),
            optim: OptimSpec::default(),
            stages: vec![Stage {
                corpus: StageCorpus::Word,
                epochs: 20,
                length: None,
                count: None,
                aux_parity: None,
                target_accuracy: Some(0.99),
            }],
            analysis: AnalysisSpec::default(),
        }
    }
}
