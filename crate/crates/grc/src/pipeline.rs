//! Experiment pipeline: configuration, stage execution, artifacts and
//! reproducibility manifests.
//!
//! Every stage reads its prerequisite artifacts from the run directory,
//! writes its own artifact plus a manifest (config hash, input hashes, seed,
//! wall time), and is deterministic for a fixed config and seed. The run
//! directory is named by a hash of the full config, so two configs never
//! collide and reruns of the same config land in the same place.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic, ingest_csv, leave_one_out, Dataset, SplitDataset, SyntheticConfig,
};
use crate::decode::{decode_user, BeamStatus, DecodeConfig, DecodeResult};
use crate::error::GrcError;
use crate::metrics::{evaluate, DraftReflection, EvalReport, UserEval};
use crate::model::{
    build_history, pretrain, HistoryItem, Model, ModelConfig, PretrainConfig,
};
use crate::optim::{load_checkpoint, save_checkpoint};
use crate::rl::{train_rl, RewardCurveRow, RlConfig};
use crate::rng::derive_seed;
use crate::sft::{
    annotate_loc, annotate_sem, load_corpus, make_sft_corpus, save_corpus, train_sft, SftConfig,
    SftCorpusConfig,
};
use crate::tokenizer::{SemanticTokenizer, TokenizerConfig};
use crate::Result;

// ── configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// "synthetic" or "csv".
    pub source: String,
    /// History truncation for the leave-one-out split.
    pub max_history: usize,
    pub synthetic: SyntheticConfig,
    pub csv: CsvPaths,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "synthetic".into(),
            max_history: 20,
            synthetic: SyntheticConfig::default(),
            csv: CsvPaths::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvPaths {
    pub interactions: String,
    pub items: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { embed_dim: 32, model_dim: 64, encoder_layers: 1, decoder_layers: 2, heads: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSection {
    pub beam_size: usize,
    pub alpha_entropy: f64,
    pub skip_rule: bool,
    pub correction_width: usize,
    /// Which checkpoint to decode with: "pretrain", "sft" or "rl".
    pub checkpoint: String,
    /// "grc" (reflect and correct) or "one_pass" (plain beam search).
    pub mode: String,
    /// Cap on evaluated users; 0 evaluates everyone.
    pub eval_users: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            beam_size: 20,
            alpha_entropy: 0.2,
            skip_rule: true,
            correction_width: 1,
            checkpoint: "rl".into(),
            mode: "grc".into(),
            eval_users: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub k: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: vec![5, 10, 100, 200] }
    }
}

/// Full experiment configuration; a TOML file with these sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub sft_corpus: SftCorpusConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub decode: DecodeSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetSection::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            sft_corpus: SftCorpusConfig::default(),
            sft: SftConfig::default(),
            rl: RlConfig::default(),
            decode: DecodeSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| GrcError::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = toml::from_str(&raw)
            .map_err(|e| GrcError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.source.as_str() {
            "synthetic" => {}
            "csv" => {
                if self.dataset.csv.interactions.is_empty() || self.dataset.csv.items.is_empty() {
                    return Err(GrcError::Config(
                        "dataset.source = \"csv\" requires dataset.csv.interactions and dataset.csv.items".into(),
                    ));
                }
            }
            other => {
                return Err(GrcError::Config(format!(
                    "dataset.source must be \"synthetic\" or \"csv\", got {other:?}"
                )))
            }
        }
        if !matches!(self.decode.checkpoint.as_str(), "pretrain" | "sft" | "rl") {
            return Err(GrcError::Config(format!(
                "decode.checkpoint must be pretrain, sft or rl, got {:?}",
                self.decode.checkpoint
            )));
        }
        if !matches!(self.decode.mode.as_str(), "grc" | "one_pass") {
            return Err(GrcError::Config(format!(
                "decode.mode must be grc or one_pass, got {:?}",
                self.decode.mode
            )));
        }
        if self.eval.k.is_empty() {
            return Err(GrcError::Config("eval.k must not be empty".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; names the run directory.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| GrcError::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

// ── stages ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Tokenize,
    Pretrain,
    BuildSftCorpus,
    Sft,
    Rl,
    Decode,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::Tokenize,
        Stage::Pretrain,
        Stage::BuildSftCorpus,
        Stage::Sft,
        Stage::Rl,
        Stage::Decode,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Tokenize => "tokenize",
            Stage::Pretrain => "pretrain",
            Stage::BuildSftCorpus => "build-sft-corpus",
            Stage::Sft => "sft",
            Stage::Rl => "rl",
            Stage::Decode => "decode",
            Stage::Eval => "eval",
        }
    }

    fn artifact(self) -> &'static str {
        match self {
            Stage::GenData => "dataset.json",
            Stage::Tokenize => "codebooks.json",
            Stage::Pretrain => "pretrain.json",
            Stage::BuildSftCorpus => "sft_corpus.jsonl",
            Stage::Sft => "sft.json",
            Stage::Rl => "rl.json",
            Stage::Decode => "decode.jsonl",
            Stage::Eval => "metrics.json",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub input_hashes: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
}

/// A run directory bound to one config.
pub struct RunContext {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub config_hash: String,
    pub force: bool,
}

/// Record written per user by the decode stage (one JSON line each).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub user_id: usize,
    pub target: usize,
    pub result: DecodeResult,
}

impl RunContext {
    /// Creates (or reuses) the run directory `out_dir/<config-hash-prefix>`.
    pub fn new(config: ExperimentConfig, out_dir: &Path, force: bool) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash();
        let dir = out_dir.join(&config_hash[..12]);
        std::fs::create_dir_all(&dir).map_err(|e| GrcError::io(dir.display().to_string(), e))?;
        Ok(RunContext { config, dir, config_hash, force })
    }

    pub fn artifact_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.artifact())
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{}.manifest.json", stage.name()))
    }

    fn require(&self, stage: Stage) -> Result<PathBuf> {
        let path = self.artifact_path(stage);
        if !path.exists() {
            return Err(GrcError::MissingArtifact {
                path: path.display().to_string(),
                needed: stage.name().to_string(),
            });
        }
        Ok(path)
    }

    fn guard_stale(&self, stage: Stage, input_hashes: &BTreeMap<String, String>) -> Result<()> {
        let manifest_path = self.manifest_path(stage);
        if !manifest_path.exists() || self.force {
            return Ok(());
        }
        let raw = std::fs::read_to_string(&manifest_path)
            .map_err(|e| GrcError::io(manifest_path.display().to_string(), e))?;
        let old: StageManifest = serde_json::from_str(&raw)?;
        if old.config_hash != self.config_hash {
            return Err(GrcError::StaleArtifact {
                path: self.artifact_path(stage).display().to_string(),
                detail: "existing artifact was produced by a different config".into(),
            });
        }
        if old.input_hashes != *input_hashes {
            return Err(GrcError::StaleArtifact {
                path: self.artifact_path(stage).display().to_string(),
                detail: "input artifacts changed since this stage last ran".into(),
            });
        }
        Ok(())
    }

    fn write_manifest(
        &self,
        stage: Stage,
        input_hashes: BTreeMap<String, String>,
        started: Instant,
    ) -> Result<()> {
        let manifest = StageManifest {
            stage: stage.name().to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            input_hashes,
            wall_time_s: started.elapsed().as_secs_f64(),
            config: self.config.clone(),
        };
        let path = self.manifest_path(stage);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| GrcError::io(path.display().to_string(), e))
    }

    fn input_hashes(&self, stages: &[Stage]) -> Result<BTreeMap<String, String>> {
        let mut hashes = BTreeMap::new();
        for &s in stages {
            let path = self.require(s)?;
            hashes.insert(s.artifact().to_string(), file_hash(&path)?);
        }
        Ok(hashes)
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::Tokenize => self.tokenize(),
            Stage::Pretrain => self.pretrain_stage(),
            Stage::BuildSftCorpus => self.build_sft_corpus(),
            Stage::Sft => self.sft_stage(),
            Stage::Rl => self.rl_stage(),
            Stage::Decode => self.decode_stage(),
            Stage::Eval => self.eval_stage(),
        }
    }

    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::ALL {
            self.run(stage)?;
        }
        Ok(())
    }

    // ── individual stages ───────────────────────────────────────────

    fn gen_data(&self) -> Result<()> {
        let started = Instant::now();
        let inputs = BTreeMap::new();
        self.guard_stale(Stage::GenData, &inputs)?;
        let ds = &self.config.dataset;
        let dataset = match ds.source.as_str() {
            "synthetic" => generate_synthetic(&ds.synthetic, derive_seed(self.config.seed, &[1]))?,
            "csv" => {
                let (dataset, report) = ingest_csv(
                    Path::new(&ds.csv.interactions),
                    Path::new(&ds.csv.items),
                    ds.synthetic.embed_dim,
                    derive_seed(self.config.seed, &[1]),
                )?;
                println!(
                    "ingested {} interactions, kept {} users, dropped {} short users",
                    report.interactions, report.users_kept, report.users_dropped
                );
                dataset
            }
            _ => unreachable!("validated"),
        };
        dataset.save(&self.artifact_path(Stage::GenData))?;
        // dataset manifest doubles as the count/config echo record
        self.write_manifest(Stage::GenData, inputs, started)
    }

    fn load_dataset(&self) -> Result<Dataset> {
        Dataset::load(&self.require(Stage::GenData)?)
    }

    fn load_tokenizer(&self) -> Result<SemanticTokenizer> {
        SemanticTokenizer::load(&self.require(Stage::Tokenize)?)
    }

    fn tokenize(&self) -> Result<()> {
        let started = Instant::now();
        let inputs = self.input_hashes(&[Stage::GenData])?;
        self.guard_stale(Stage::Tokenize, &inputs)?;
        let dataset = self.load_dataset()?;
        let mut tok_config = self.config.tokenizer.clone();
        tok_config.seed = derive_seed(self.config.seed, &[2]);
        let tokenizer = SemanticTokenizer::fit(&dataset.catalog.embeddings(), tok_config)?;
        tokenizer.save(&self.artifact_path(Stage::Tokenize))?;
        self.write_manifest(Stage::Tokenize, inputs, started)
    }

    fn model_config(&self, tokenizer: &SemanticTokenizer, dataset: &Dataset) -> ModelConfig {
        let m = &self.config.model;
        ModelConfig::for_tokenizer(
            tokenizer,
            &dataset.catalog,
            m.embed_dim,
            m.model_dim,
            m.encoder_layers,
            m.decoder_layers,
            m.heads,
            self.config.dataset.max_history,
        )
    }

    fn split(&self, dataset: &Dataset) -> SplitDataset {
        leave_one_out(&dataset.sequences, self.config.dataset.max_history)
    }

    fn training_pairs(
        &self,
        split: &SplitDataset,
        tokenizer: &SemanticTokenizer,
        dataset: &Dataset,
    ) -> Vec<(Vec<HistoryItem>, Vec<usize>)> {
        split
            .train_pairs()
            .into_iter()
            .map(|(history, target)| {
                (
                    build_history(history, tokenizer, &dataset.catalog),
                    tokenizer.code_of(target).tokens.clone(),
                )
            })
            .collect()
    }

    fn save_model(&self, stage: Stage, model: &Model, extra: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "model_config": model.config,
            "stage": stage.name(),
            "config_hash": self.config_hash,
            "extra": extra,
        });
        save_checkpoint(&self.artifact_path(stage), header, &model.params)
    }

    fn load_model(&self, stage: Stage) -> Result<Model> {
        let (header, params) = load_checkpoint(&self.require(stage)?)?;
        let config: ModelConfig = serde_json::from_value(header["model_config"].clone())?;
        Ok(Model::from_params(config, params))
    }

    fn write_curve_csv(&self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        let path = self.dir.join(name);
        let mut out = String::from(header);
        out.push('\n');
        for row in rows {
            out.push_str(row);
            out.push('\n');
        }
        std::fs::write(&path, out).map_err(|e| GrcError::io(path.display().to_string(), e))
    }

    fn pretrain_stage(&self) -> Result<()> {
        let started = Instant::now();
        let inputs = self.input_hashes(&[Stage::GenData, Stage::Tokenize])?;
        self.guard_stale(Stage::Pretrain, &inputs)?;
        let dataset = self.load_dataset()?;
        let tokenizer = self.load_tokenizer()?;
        let split = self.split(&dataset);
        let pairs = self.training_pairs(&split, &tokenizer, &dataset);
        let mut model =
            Model::new(self.model_config(&tokenizer, &dataset), derive_seed(self.config.seed, &[3]));
        let curve = pretrain(
            &mut model,
            &pairs,
            &self.config.pretrain,
            derive_seed(self.config.seed, &[4]),
        )?;
        self.save_model(
            Stage::Pretrain,
            &model,
            serde_json::json!({"final_loss": curve.last().copied().unwrap_or(f64::NAN)}),
        )?;
        let rows: Vec<String> =
            curve.iter().enumerate().map(|(i, l)| format!("{i},{l}")).collect();
        self.write_curve_csv("pretrain_curve.csv", "step,loss", &rows)?;
        self.write_manifest(Stage::Pretrain, inputs, started)
    }

    fn build_sft_corpus(&self) -> Result<()> {
        let started = Instant::now();
        let inputs = self.input_hashes(&[Stage::GenData, Stage::Tokenize, Stage::Pretrain])?;
        self.guard_stale(Stage::BuildSftCorpus, &inputs)?;
        let dataset = self.load_dataset()?;
        let tokenizer = self.load_tokenizer()?;
        let model = self.load_model(Stage::Pretrain)?;
        let split = self.split(&dataset);
        let (templates, report) =
            make_sft_corpus(&model, &tokenizer, &dataset.catalog, &split, &self.config.sft_corpus);
        if report.skipped_pairs > 0 {
            println!("sft corpus: skipped {} pairs with no drafts", report.skipped_pairs);
        }
        save_corpus(&self.artifact_path(Stage::BuildSftCorpus), &templates)?;
        self.write_manifest(Stage::BuildSftCorpus, inputs, started)
    }

    fn sft_stage(&self) -> Result<()> {
        let started = Instant::now();
        let inputs = self.input_hashes(&[
            Stage::GenData,
            Stage::Tokenize,
            Stage::Pretrain,
            Stage::BuildSftCorpus,
        ])?;
        self.guard_stale(Stage::Sft, &inputs)?;
        let dataset = self.load_dataset()?;
        let tokenizer = self.load_tokenizer()?;
        let mut model = self.load_model(Stage::Pretrain)?;
        let templates = load_corpus(&self.require(Stage::BuildSftCorpus)?)?;
        if templates.is_empty() {
            return Err(GrcError::Data("sft corpus is empty".into()));
        }
        let curve = train_sft(
            &mut model,
            &templates,
            &tokenizer,
            &dataset.catalog,
            &self.config.sft,
            derive_seed(self.config.seed, &[5]),
        )?;
        self.save_model(
            Stage::Sft,
            &model,
            serde_json::json!({"final_loss": curve.last().copied().unwrap_or(f64::NAN)}),
        )?;
        let rows: Vec<String> =
            curve.iter().enumerate().map(|(i, l)| format!("{i},{l}")).collect();
        self.write_curve_csv("sft_curve.csv", "step,loss", &rows)?;
        self.write_manifest(Stage::Sft, inputs, started)
    }

    fn rl_stage(&self) -> Result<()> {
        let started = Instant::now();
        let inputs = self.input_hashes(&[Stage::GenData, Stage::Tokenize, Stage::Sft])?;
        self.guard_stale(Stage::Rl, &inputs)?;
        let dataset = self.load_dataset()?;
        let tokenizer = self.load_tokenizer()?;
        let mut model = self.load_model(Stage::Sft)?;
        let split = self.split(&dataset);
        let rl_pairs: Vec<(usize, Vec<usize>, usize)> = split
            .users
            .iter()
            .filter(|u| u.train.len() >= 2)
            .map(|u| {
                let n = u.train.len();
                (u.user_id, u.train[..n - 1].to_vec(), u.train[n - 1])
            })
            .collect();
        let curve = train_rl(
            &mut model,
            &tokenizer,
            &dataset.catalog,
            &rl_pairs,
            &self.config.rl,
            derive_seed(self.config.seed, &[6]),
        )?;
        self.save_model(Stage::Rl, &model, serde_json::json!({"iterations": curve.len()}))?;
        let rows: Vec<String> = curve.iter().map(reward_curve_row).collect();
        self.write_curve_csv(
            "reward_curves.csv",
            "iteration,r_total_mean,r_total_std,r_task_mean,r_task_std,r_cor_mean,r_cor_std,\
             r_loc_mean,r_loc_std,r_sem_mean,r_sem_std,r_delta_mean,r_delta_std,kl_mean,\
             dropped_episodes,learning_rate",
            &rows,
        )?;
        self.write_manifest(Stage::Rl, inputs, started)
    }

    fn decode_checkpoint_stage(&self) -> Stage {
        match self.config.decode.checkpoint.as_str() {
            "pretrain" => Stage::Pretrain,
            "sft" => Stage::Sft,
            _ => Stage::Rl,
        }
    }

    fn decode_stage(&self) -> Result<()> {
        let started = Instant::now();
        let ckpt_stage = self.decode_checkpoint_stage();
        let inputs = self.input_hashes(&[Stage::GenData, Stage::Tokenize, ckpt_stage])?;
        self.guard_stale(Stage::Decode, &inputs)?;
        let dataset = self.load_dataset()?;
        let tokenizer = self.load_tokenizer()?;
        let model = self.load_model(ckpt_stage)?;
        let split = self.split(&dataset);

        let d = &self.config.decode;
        let decode_config = DecodeConfig {
            beam_size: d.beam_size,
            alpha_entropy: d.alpha_entropy,
            skip_rule: d.skip_rule,
            correction_width: d.correction_width,
            one_pass: d.mode == "one_pass",
            force_skip: false,
        };
        let users: Vec<_> = if d.eval_users > 0 {
            split.users.iter().take(d.eval_users).collect()
        } else {
            split.users.iter().collect()
        };

        let records: Vec<DecodeRecord> = users
            .par_iter()
            .map(|user| {
                let history_items = split.test_history(user);
                let history = build_history(&history_items, &tokenizer, &dataset.catalog);
                let enc = model.encode(&history);
                let result = decode_user(&model, &tokenizer, &enc, &decode_config);
                DecodeRecord { user_id: user.user_id, target: user.test, result }
            })
            .collect();

        let mut out = String::new();
        for record in &records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        let path = self.artifact_path(Stage::Decode);
        std::fs::write(&path, out).map_err(|e| GrcError::io(path.display().to_string(), e))?;
        self.write_manifest(Stage::Decode, inputs, started)
    }

    fn eval_stage(&self) -> Result<()> {
        let started = Instant::now();
        let inputs = self.input_hashes(&[Stage::Decode, Stage::GenData, Stage::Tokenize])?;
        self.guard_stale(Stage::Eval, &inputs)?;
        let dataset = self.load_dataset()?;
        let tokenizer = self.load_tokenizer()?;
        let raw = std::fs::read_to_string(self.require(Stage::Decode)?)
            .map_err(|e| GrcError::io("decode.jsonl", e))?;
        let records: Vec<DecodeRecord> = raw
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(GrcError::from))
            .collect::<Result<_>>()?;

        let users: Vec<UserEval> = records
            .iter()
            .map(|record| user_eval(record, &tokenizer, &dataset))
            .collect();
        let report = evaluate(&users, &self.config.eval.k);

        let json_path = self.artifact_path(Stage::Eval);
        let payload = serde_json::json!({
            "config_hash": self.config_hash,
            "checkpoint": self.config.decode.checkpoint,
            "mode": self.config.decode.mode,
            "report": report,
        });
        std::fs::write(&json_path, serde_json::to_string_pretty(&payload)?)
            .map_err(|e| GrcError::io(json_path.display().to_string(), e))?;
        let csv_path = self.dir.join("metrics.csv");
        std::fs::write(&csv_path, report.to_csv())
            .map_err(|e| GrcError::io(csv_path.display().to_string(), e))?;
        self.write_manifest(Stage::Eval, inputs, started)
    }

    pub fn read_eval_report(&self) -> Result<EvalReport> {
        let raw = std::fs::read_to_string(self.require(Stage::Eval)?)
            .map_err(|e| GrcError::io("metrics.json", e))?;
        let payload: serde_json::Value = serde_json::from_str(&raw)?;
        Ok(serde_json::from_value(payload["report"].clone())?)
    }

    pub fn read_reward_curve(&self) -> Result<Vec<RewardCurveRow>> {
        let path = self.dir.join("reward_curves.csv");
        let raw = std::fs::read_to_string(&path)
            .map_err(|e| GrcError::io(path.display().to_string(), e))?;
        let mut rows = Vec::new();
        for line in raw.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 16 {
                return Err(GrcError::Data(format!("malformed reward curve row: {line}")));
            }
            let f = |i: usize| -> f64 { fields[i].parse().unwrap_or(f64::NAN) };
            rows.push(RewardCurveRow {
                iteration: fields[0].parse().unwrap_or(0),
                r_total_mean: f(1),
                r_total_std: f(2),
                r_task_mean: f(3),
                r_task_std: f(4),
                r_cor_mean: f(5),
                r_cor_std: f(6),
                r_loc_mean: f(7),
                r_loc_std: f(8),
                r_sem_mean: f(9),
                r_sem_std: f(10),
                r_delta_mean: f(11),
                r_delta_std: f(12),
                kl_mean: f(13),
                dropped_episodes: fields[14].parse().unwrap_or(0),
                learning_rate: f(15),
            });
        }
        Ok(rows)
    }

    pub fn read_pretrain_curve(&self) -> Result<Vec<f64>> {
        let path = self.dir.join("pretrain_curve.csv");
        let raw = std::fs::read_to_string(&path)
            .map_err(|e| GrcError::io(path.display().to_string(), e))?;
        Ok(raw
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(1))
            .filter_map(|v| v.parse().ok())
            .collect())
    }
}

/// Builds the evaluation view of one decode record: the ranked items plus
/// per-draft reflection annotations (in base-score order) against the truth.
fn user_eval(record: &DecodeRecord, tokenizer: &SemanticTokenizer, dataset: &Dataset) -> UserEval {
    let gt_tokens = &tokenizer.code_of(record.target).tokens;
    let mut beams: Vec<_> = record.result.beams.iter().collect();
    beams.sort_by(|a, b| {
        b.base_score.total_cmp(&a.base_score).then_with(|| a.draft.cmp(&b.draft))
    });
    let drafts: Vec<DraftReflection> = beams
        .iter()
        .filter_map(|beam| {
            let reflection = beam.reflection.as_ref()?;
            let true_loc = annotate_loc(&beam.draft, gt_tokens);
            let draft_item = tokenizer.item_for(&beam.draft);
            let true_cat = annotate_sem(draft_item, record.target, &dataset.catalog)
                [crate::data::ATTR_CATEGORY];
            Some(DraftReflection {
                predicted_loc: reflection.loc,
                true_loc,
                predicted_cat: *reflection.sem.first().unwrap_or(&0),
                true_cat,
            })
        })
        .collect();
    UserEval {
        user_id: record.user_id,
        ranked: record.result.items.iter().map(|(item, _)| *item).collect(),
        target: record.target,
        drafts,
    }
}

fn reward_curve_row(row: &RewardCurveRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.iteration,
        row.r_total_mean,
        row.r_total_std,
        row.r_task_mean,
        row.r_task_std,
        row.r_cor_mean,
        row.r_cor_std,
        row.r_loc_mean,
        row.r_loc_std,
        row.r_sem_mean,
        row.r_sem_std,
        row.r_delta_mean,
        row.r_delta_std,
        row.kl_mean,
        row.dropped_episodes,
        row.learning_rate,
    )
}

/// Counts decode outcomes for reporting.
pub fn summarize_decode(records: &[DecodeRecord]) -> (usize, usize, usize) {
    let mut skipped = 0;
    let mut corrected = 0;
    let mut invalid = 0;
    for r in records {
        skipped += r.result.stats.skipped;
        corrected += r.result.stats.corrected;
        invalid += r.result.stats.invalid_dropped;
        debug_assert!(r
            .result
            .beams
            .iter()
            .all(|b| b.status != BeamStatus::Pending));
    }
    (skipped, corrected, invalid)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_experiment(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.dataset.max_history = 8;
        cfg.dataset.synthetic = SyntheticConfig {
            n_items: 80,
            n_users: 40,
            n_categories: 4,
            n_brands: 3,
            embed_dim: 8,
            seq_len_min: 5,
            seq_len_max: 10,
            ..Default::default()
        };
        cfg.tokenizer =
            TokenizerConfig { levels: 3, codebook_size: 8, kmeans_iters: 10, use_suffix: true, seed: 0 };
        cfg.model = ModelSection {
            embed_dim: 8,
            model_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
        };
        cfg.pretrain = PretrainConfig { steps: 30, batch_size: 4, learning_rate: 3e-3 };
        cfg.sft_corpus = SftCorpusConfig { drafts_per_pair: 2, max_correct_per_pair: 1 };
        cfg.sft = SftConfig { steps: 20, batch_size: 2, ..Default::default() };
        cfg.rl = RlConfig {
            iterations: 2,
            users_per_iter: 2,
            group_size: 2,
            updates_per_iter: 1,
            ..Default::default()
        };
        cfg.decode = DecodeSection { beam_size: 5, eval_users: 6, ..Default::default() };
        cfg.eval = EvalSection { k: vec![1, 5] };
        cfg
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = tiny_experiment(7);
        let toml_str = toml::to_string(&cfg).unwrap();
        let parsed: ExperimentConfig = toml::from_str(&toml_str).unwrap();
        assert_eq!(cfg.hash(), parsed.hash());
    }

    #[test]
    fn config_hash_changes_with_seed() {
        assert_ne!(tiny_experiment(1).hash(), tiny_experiment(2).hash());
    }

    #[test]
    fn missing_artifact_names_prerequisite_stage() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(tiny_experiment(3), dir.path(), false).unwrap();
        let err = ctx.run(Stage::Eval).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("decode"), "{msg}");
        let err = ctx.run(Stage::Tokenize).unwrap_err();
        assert!(err.to_string().contains("gen-data"));
    }

    #[test]
    fn bad_config_values_are_rejected() {
        let mut cfg = tiny_experiment(1);
        cfg.decode.checkpoint = "bogus".into();
        assert!(matches!(cfg.validate(), Err(GrcError::Config(_))));
        let mut cfg = tiny_experiment(1);
        cfg.dataset.source = "oracle".into();
        assert!(matches!(cfg.validate(), Err(GrcError::Config(_))));
    }

    #[test]
    fn full_pipeline_smoke_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment(11);

        let ctx_a = RunContext::new(cfg.clone(), &dir.path().join("a"), false).unwrap();
        ctx_a.run_all().unwrap();
        let report = ctx_a.read_eval_report().unwrap();
        assert_eq!(report.users, 6);
        assert!(report.recall.contains_key(&5));

        let ctx_b = RunContext::new(cfg, &dir.path().join("b"), false).unwrap();
        ctx_b.run_all().unwrap();
        let csv_a = std::fs::read(ctx_a.dir.join("metrics.csv")).unwrap();
        let csv_b = std::fs::read(ctx_b.dir.join("metrics.csv")).unwrap();
        assert_eq!(csv_a, csv_b, "metric CSVs must be byte-identical across reruns");

        // manifests agree except for wall time
        for stage in Stage::ALL {
            let read = |ctx: &RunContext| -> StageManifest {
                let raw = std::fs::read_to_string(ctx.manifest_path(stage)).unwrap();
                serde_json::from_str(&raw).unwrap()
            };
            let mut ma = read(&ctx_a);
            let mut mb = read(&ctx_b);
            ma.wall_time_s = 0.0;
            mb.wall_time_s = 0.0;
            assert_eq!(
                serde_json::to_string(&ma).unwrap(),
                serde_json::to_string(&mb).unwrap()
            );
        }
    }

    #[test]
    fn stale_artifacts_refuse_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_experiment(13);
        let ctx = RunContext::new(cfg.clone(), dir.path(), false).unwrap();
        ctx.run(Stage::GenData).unwrap();
        ctx.run(Stage::Tokenize).unwrap();

        // tamper with the upstream artifact: tokenize's recorded input hash
        // no longer matches
        let dataset_path = ctx.artifact_path(Stage::GenData);
        let mut raw = std::fs::read_to_string(&dataset_path).unwrap();
        raw.push(' ');
        std::fs::write(&dataset_path, raw).unwrap();
        let err = ctx.run(Stage::Tokenize).unwrap_err();
        assert!(matches!(err, GrcError::StaleArtifact { .. }));

        let forced = RunContext::new(cfg, dir.path(), true).unwrap();
        forced.run(Stage::Tokenize).unwrap();
    }
}
