//! Protocol orchestration: configured, resumable runs that persist every
//! stage artifact under a run directory.
//!
//! Stages run in order: split, baseline search, automatic prompt engineering
//! (seeded by both extremes), shot selection, decorator selection, the dev
//! grid, then a single designated test evaluation. Each stage artifact embeds
//! a digest of its inputs, so reruns skip everything that is already current
//! and editing an input only invalidates the stages downstream of it.

mod config;

pub use config::{
    BaselineChoice, Budgets, EvaluationConfig, ExperimentConfig, GridCell, GridConfig, Roles,
    SearchConfig, ShotMode, SplitConfig, Technique,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::{Client, CompletionCache};
use crate::corpus::{self, Corpus, Dataset, Label, SplitAssignment};
use crate::error::{Error, Result};
use crate::metrics::{
    bootstrap_with, confusion, metric_set, paired_test, BootstrapSummary, EvalResult, MetricKind,
};
use crate::promptkit::{self, Codebook, ParseOutcome, PromptSpec, RawPrompt, Shot};
use crate::search::{
    ape_search, sample_shot_combinations, search_baselines, select_shots, select_shot_texts,
    ApeOptions, BaselineSearch, Candidate, Scorer, SearchTrace, ShotSelection, ShotTextKind,
    ShotTextSelection,
};
use crate::util;

const SPLIT_PATH: &str = "stages/split.json";
const BASELINES_PATH: &str = "stages/baselines.json";
const SHOTS_PATH: &str = "stages/shots.json";
const DECORATORS_PATH: &str = "stages/decorators.json";
const DESIGNATION_PATH: &str = "final/designation.json";
const TEST_EVAL_PATH: &str = "final/test_eval.json";
const MANIFEST_PATH: &str = "manifest.json";
const LOCK_PATH: &str = "run.lock";
const CACHE_PATH: &str = "cache/completions.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct Artifact<T> {
    input_digest: String,
    payload: T,
}

/// Filesystem layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> RunDir {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn read<T: DeserializeOwned>(&self, rel: &str) -> Result<Artifact<T>> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::Ordering(format!(
                "artifact {rel} is missing; run the stage that produces it first"
            )));
        }
        let content = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&content)?)
    }

    /// Load an artifact, requiring it to be current for `input_digest`.
    pub fn load_current<T: DeserializeOwned>(&self, rel: &str, input_digest: &str) -> Result<T> {
        let artifact = self.read::<T>(rel)?;
        if artifact.input_digest != input_digest {
            return Err(Error::Ordering(format!(
                "artifact {rel} is stale (inputs changed); rerun the stage that produces it"
            )));
        }
        Ok(artifact.payload)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    fn store<T: Serialize>(&self, rel: &str, input_digest: &str, payload: &T) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let artifact = Artifact {
            input_digest: input_digest.to_string(),
            payload,
        };
        let mut json = serde_json::to_string_pretty(&artifact)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Load the artifact when its digest is current, otherwise compute and
    /// persist it.
    fn load_or_compute<T, F>(&self, rel: &str, input_digest: &str, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        if self.exists(rel) {
            if let Ok(artifact) = self.read::<T>(rel) {
                if artifact.input_digest == input_digest {
                    return Ok(artifact.payload);
                }
            }
        }
        let payload = compute()?;
        self.store(rel, input_digest, &payload)?;
        Ok(payload)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitArtifact {
    pub assignment: SplitAssignment,
    pub participant_counts: [usize; 3],
    pub text_counts: [usize; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselinesArtifact {
    pub search: BaselineSearch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApeArtifact {
    pub baseline: BaselineChoice,
    pub trace: SearchTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotsArtifact {
    pub pool_ids: Vec<String>,
    pub combos: Vec<crate::search::ShotCombination>,
    pub bottom: ShotSelection,
    pub top: ShotSelection,
}

impl ShotsArtifact {
    pub fn selection(&self, baseline: BaselineChoice) -> &ShotSelection {
        match baseline {
            BaselineChoice::Bottom => &self.bottom,
            BaselineChoice::Top => &self.top,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonaScore {
    pub persona: String,
    pub bottom_f1: f64,
    pub top_f1: f64,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonaSelection {
    pub selected_index: usize,
    pub persona: String,
    pub scores: Vec<PersonaScore>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DecoratorsArtifact {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<PersonaSelection>,
    /// Few-shot chain-of-thought specs with per-shot selected reasonings,
    /// keyed by baseline.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reasonings: BTreeMap<String, ShotTextSelection>,
    /// Explanation specs with per-shot selected explanations, keyed by
    /// baseline.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub explanations: BTreeMap<String, ShotTextSelection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub outcome: ParseOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_span: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellArtifact {
    pub cell: GridCell,
    pub prompt: Candidate,
    pub predictions: Vec<PredictionRecord>,
    pub eval: EvalResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignationArtifact {
    pub cell: GridCell,
    pub test_consumed: bool,
    /// Audit counter value when the designation was recorded; must be zero.
    pub test_gold_reads_at_designation: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestEvalArtifact {
    pub cell: GridCell,
    pub n: usize,
    pub predictions: Vec<PredictionRecord>,
    pub eval: EvalResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub code_version: String,
    pub construct: String,
    pub classify_model: String,
    pub seeds: BTreeMap<String, u64>,
}

struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(path: PathBuf) -> Result<LockGuard> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                use std::io::Write;
                let _ = writeln!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Configuration(format!(
                    "run directory is locked by another writer ({}); remove the file if stale",
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// A writable run: configuration, loaded inputs, backend clients, and the
/// test-split audit counter.
pub struct Runner {
    pub config: ExperimentConfig,
    run_dir: RunDir,
    corpus: Corpus,
    codebook: Codebook,
    corpus_digest: String,
    codebook_digest: String,
    classify: Client,
    generate: Client,
    test_gold_reads: AtomicU64,
    _lock: LockGuard,
}

impl Runner {
    /// Validate the config, take the run-directory writer lock, open the
    /// completion cache, and build the backend clients.
    pub fn open(config: ExperimentConfig) -> Result<Runner> {
        config.validate()?;
        let run_dir = RunDir::new(&config.out_dir);
        std::fs::create_dir_all(run_dir.root())?;
        let lock = LockGuard::acquire(run_dir.path(LOCK_PATH))?;

        let corpus_bytes = std::fs::read(&config.corpus)?;
        let codebook_bytes = std::fs::read(&config.codebook)?;
        let corpus = corpus::load_corpus(&config.corpus, config.corpus_format())?;
        let codebook = promptkit::load_codebook(&config.codebook)?;

        let cache = Arc::new(CompletionCache::open(&run_dir.path(CACHE_PATH))?);
        let classify = Client::new(config.classify_backend()?.clone(), Some(cache.clone()))?;
        let generate = Client::new(config.generate_backend()?.clone(), Some(cache))?;

        let runner = Runner {
            corpus_digest: util::sha256_hex(&corpus_bytes),
            codebook_digest: util::sha256_hex(&codebook_bytes),
            config,
            run_dir,
            corpus,
            codebook,
            classify,
            generate,
            test_gold_reads: AtomicU64::new(0),
            _lock: lock,
        };
        runner.write_manifest()?;
        Ok(runner)
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.run_dir
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn classify_client(&self) -> &Client {
        &self.classify
    }

    /// Reads of test-split gold labels since this process opened the run.
    pub fn test_gold_reads(&self) -> u64 {
        self.test_gold_reads.load(AtomicOrdering::Relaxed)
    }

    fn write_manifest(&self) -> Result<()> {
        let mut seeds = BTreeMap::new();
        seeds.insert("split".to_string(), self.config.split.seed);
        seeds.insert("search".to_string(), self.config.search.seed);
        seeds.insert(
            "bootstrap".to_string(),
            self.config.evaluation.bootstrap_seed,
        );
        let manifest = Manifest {
            config_digest: self.config.digest(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            construct: self.corpus.construct.clone(),
            classify_model: self.classify.config().model_name.clone(),
            seeds,
        };
        self.run_dir
            .store(MANIFEST_PATH, &self.config.digest(), &manifest)
    }

    fn scorer(&self) -> Scorer<'_> {
        Scorer::new(
            &self.classify,
            &self.codebook,
            self.config.evaluation.failure_policy,
            self.config.placement,
            self.config.parallelism,
        )
    }

    fn eval_json(&self) -> String {
        serde_json::to_string(&self.config.evaluation).expect("serializes")
    }

    // --- stage input digests ---

    fn split_input(&self) -> String {
        util::sha256_parts(&[
            b"split/v1",
            self.corpus_digest.as_bytes(),
            format!("{:?}", self.config.split.ratios).as_bytes(),
            &self.config.split.seed.to_le_bytes(),
        ])
    }

    fn baselines_input(&self) -> String {
        util::sha256_parts(&[
            b"baselines/v1",
            self.split_input().as_bytes(),
            self.codebook_digest.as_bytes(),
            self.classify.config().digest().as_bytes(),
            &(self.config.budgets.baseline_count as u64).to_le_bytes(),
            &self.config.search.seed.to_le_bytes(),
            self.eval_json().as_bytes(),
            format!("{:?}", self.config.placement).as_bytes(),
        ])
    }

    fn ape_input(&self, baseline: BaselineChoice) -> String {
        util::sha256_parts(&[
            b"ape/v1",
            self.baselines_input().as_bytes(),
            self.generate.config().digest().as_bytes(),
            &(self.config.budgets.ape_generations as u64).to_le_bytes(),
            &(self.config.budgets.ape_width as u64).to_le_bytes(),
            &[self.config.search.seed_competes as u8],
            self.config.meta_prompt().as_bytes(),
            baseline.as_str().as_bytes(),
        ])
    }

    fn shots_input(&self) -> String {
        util::sha256_parts(&[
            b"shots/v1",
            self.baselines_input().as_bytes(),
            &(self.config.budgets.shot_pool as u64).to_le_bytes(),
            &(self.config.budgets.shot_combos as u64).to_le_bytes(),
        ])
    }

    fn decorators_input(&self) -> Result<String> {
        let cells = self.config.grid_cells()?;
        let needs: Vec<String> = cells
            .iter()
            .filter(|c| {
                matches!(
                    c.technique,
                    Technique::Persona | Technique::Cot | Technique::Explanations
                )
            })
            .map(|c| c.key())
            .collect();
        Ok(util::sha256_parts(&[
            b"decorators/v1",
            self.shots_input().as_bytes(),
            self.codebook_digest.as_bytes(),
            needs.join(",").as_bytes(),
        ]))
    }

    fn grid_input(&self) -> Result<String> {
        Ok(util::sha256_parts(&[
            b"grid/v1",
            self.baselines_input().as_bytes(),
            self.ape_input(BaselineChoice::Bottom).as_bytes(),
            self.ape_input(BaselineChoice::Top).as_bytes(),
            self.shots_input().as_bytes(),
            self.decorators_input()?.as_bytes(),
            self.eval_json().as_bytes(),
        ]))
    }

    fn cell_input(&self, cell: GridCell) -> Result<String> {
        Ok(util::sha256_parts(&[
            b"cell/v1",
            self.grid_input()?.as_bytes(),
            cell.key().as_bytes(),
        ]))
    }

    fn cell_path(cell: GridCell) -> String {
        format!("grid/{}.json", cell.key())
    }

    // --- partitions ---

    fn partitions(&self, split: &SplitArtifact) -> Result<(Dataset, Dataset, Dataset)> {
        split.assignment.partition(&self.corpus)
    }

    /// Gold labels for the test partition. Every call trips the audit
    /// counter; nothing before [`Runner::eval_test`] may use this.
    fn test_golds(&self, test: &Dataset) -> Vec<Label> {
        self.test_gold_reads.fetch_add(1, AtomicOrdering::Relaxed);
        test.golds()
    }

    // --- stages ---

    pub fn stage_split(&self) -> Result<SplitArtifact> {
        self.run_dir
            .load_or_compute(SPLIT_PATH, &self.split_input(), || {
                let assignment = corpus::split_participants(
                    &self.corpus,
                    self.config.split.ratios,
                    self.config.split.seed,
                )?;
                let (train, dev, test) = assignment.partition(&self.corpus)?;
                if !train.has_both_classes() {
                    return Err(Error::ScoringDegenerate(
                        "training split has a single class; change the split seed or corpus"
                            .into(),
                    ));
                }
                Ok(SplitArtifact {
                    participant_counts: assignment.participant_counts(),
                    text_counts: [train.len(), dev.len(), test.len()],
                    assignment,
                })
            })
    }

    pub fn require_split(&self) -> Result<SplitArtifact> {
        self.run_dir.load_current(SPLIT_PATH, &self.split_input())
    }

    pub fn stage_baselines(&self, split: &SplitArtifact) -> Result<BaselinesArtifact> {
        self.run_dir
            .load_or_compute(BASELINES_PATH, &self.baselines_input(), || {
                let (train, _, _) = self.partitions(split)?;
                let scorer = self.scorer();
                let search = search_baselines(
                    &scorer,
                    &train,
                    self.config.budgets.baseline_count,
                    util::derive_seed(self.config.search.seed, "baselines"),
                )?;
                Ok(BaselinesArtifact { search })
            })
    }

    pub fn require_baselines(&self) -> Result<BaselinesArtifact> {
        self.run_dir
            .load_current(BASELINES_PATH, &self.baselines_input())
    }

    fn baseline_spec(baselines: &BaselinesArtifact, choice: BaselineChoice) -> Result<PromptSpec> {
        let scored = match choice {
            BaselineChoice::Bottom => baselines.search.bottom(),
            BaselineChoice::Top => baselines.search.top(),
        };
        match &scored.candidate {
            Candidate::Spec { spec } => Ok(spec.clone()),
            Candidate::Raw { .. } => Err(Error::Integrity(
                "baseline candidate is not a codebook spec".into(),
            )),
        }
    }

    fn ape_path(baseline: BaselineChoice) -> String {
        format!("stages/ape_{}.json", baseline.as_str())
    }

    fn ape_records_path(baseline: BaselineChoice) -> String {
        format!("stages/ape_{}.records.jsonl", baseline.as_str())
    }

    pub fn stage_ape(
        &self,
        split: &SplitArtifact,
        baselines: &BaselinesArtifact,
        baseline: BaselineChoice,
    ) -> Result<ApeArtifact> {
        let artifact: ApeArtifact = self.run_dir.load_or_compute(
            &Self::ape_path(baseline),
            &self.ape_input(baseline),
            || {
                let (train, _, _) = self.partitions(split)?;
                let spec = Self::baseline_spec(baselines, baseline)?;
                let seed_body = promptkit::body_text(&spec, &self.codebook)?;
                let scorer = self.scorer();
                let trace = ape_search(
                    &scorer,
                    &self.generate,
                    &seed_body,
                    promptkit::AnswerFormat::PlainYesNo,
                    &train,
                    self.config.meta_prompt(),
                    ApeOptions {
                        generations: self.config.budgets.ape_generations,
                        width: self.config.budgets.ape_width,
                        seed: util::derive_seed(
                            self.config.search.seed,
                            &format!("ape/{}", baseline.as_str()),
                        ),
                        seed_competes: self.config.search.seed_competes,
                    },
                )?;
                Ok(ApeArtifact { baseline, trace })
            },
        )?;

        // flat per-candidate record log alongside the trace
        let records_path = self.run_dir.path(&Self::ape_records_path(baseline));
        if !records_path.exists() {
            let mut lines = String::new();
            for record in artifact.trace.flat_records(&self.codebook) {
                lines.push_str(&serde_json::to_string(&record)?);
                lines.push('\n');
            }
            std::fs::write(records_path, lines)?;
        }
        Ok(artifact)
    }

    pub fn require_ape(&self, baseline: BaselineChoice) -> Result<ApeArtifact> {
        self.run_dir
            .load_current(&Self::ape_path(baseline), &self.ape_input(baseline))
    }

    pub fn stage_shots(
        &self,
        split: &SplitArtifact,
        baselines: &BaselinesArtifact,
    ) -> Result<ShotsArtifact> {
        self.run_dir
            .load_or_compute(SHOTS_PATH, &self.shots_input(), || {
                let (train, _, _) = self.partitions(split)?;
                let pool_size = self.config.budgets.shot_pool.min(train.len());
                if pool_size >= train.len() {
                    return Err(Error::Configuration(format!(
                        "shot pool ({pool_size}) would cover the whole training set ({}); \
                         lower budgets.shot_pool",
                        train.len()
                    )));
                }
                let mut ids: Vec<String> = train.items.iter().map(|i| i.id.clone()).collect();
                let mut rng = util::rng(util::derive_seed(self.config.search.seed, "shot-pool"));
                ids.shuffle(&mut rng);
                let pool_ids: Vec<String> = ids.into_iter().take(pool_size).collect();

                let combos = sample_shot_combinations(
                    &pool_ids,
                    self.config.budgets.shot_combos,
                    util::derive_seed(self.config.search.seed, "shot-combos"),
                )?;

                let scorer = self.scorer();
                // the same combinations are reused for both baselines so the
                // two selections stay comparable
                let bottom_spec = Self::baseline_spec(baselines, BaselineChoice::Bottom)?;
                let top_spec = Self::baseline_spec(baselines, BaselineChoice::Top)?;
                let bottom = select_shots(&scorer, &bottom_spec, &combos, &train, &pool_ids)?;
                let top = select_shots(&scorer, &top_spec, &combos, &train, &pool_ids)?;
                Ok(ShotsArtifact {
                    pool_ids,
                    combos,
                    bottom,
                    top,
                })
            })
    }

    pub fn require_shots(&self) -> Result<ShotsArtifact> {
        self.run_dir.load_current(SHOTS_PATH, &self.shots_input())
    }

    fn winner_shots(shots: &ShotsArtifact, baseline: BaselineChoice) -> Result<Vec<Shot>> {
        match &shots.selection(baseline).winner.candidate {
            Candidate::Spec { spec } => Ok(spec.shots.clone()),
            Candidate::Raw { .. } => Err(Error::Integrity(
                "shot selection winner is not a spec candidate".into(),
            )),
        }
    }

    pub fn stage_decorators(
        &self,
        split: &SplitArtifact,
        baselines: &BaselinesArtifact,
        shots: &ShotsArtifact,
    ) -> Result<DecoratorsArtifact> {
        let input = self.decorators_input()?;
        let cells = self.config.grid_cells()?;
        self.run_dir.load_or_compute(DECORATORS_PATH, &input, || {
            let (train, _, _) = self.partitions(split)?;
            let scorer = self.scorer();
            let mut artifact = DecoratorsArtifact::default();

            let needs_persona = cells.iter().any(|c| c.technique == Technique::Persona);
            if needs_persona {
                artifact.persona = Some(self.select_persona(&scorer, baselines, &train)?);
            }

            for baseline in BaselineChoice::ALL {
                let needs_reasonings = cells.iter().any(|c| {
                    c.baseline == baseline
                        && c.shots == ShotMode::Few
                        && c.technique == Technique::Cot
                });
                let needs_explanations = cells.iter().any(|c| {
                    c.baseline == baseline
                        && c.shots == ShotMode::Few
                        && c.technique == Technique::Explanations
                });
                if !needs_reasonings && !needs_explanations {
                    continue;
                }
                let base = Self::baseline_spec(baselines, baseline)?
                    .with_shots(Self::winner_shots(shots, baseline)?);
                // score on the training texts outside the in-prompt examples
                let shot_ids = base.shots.iter().map(|s| s.source_id.as_str()).collect();
                let scoring = train.without(&shot_ids);
                if scoring.is_empty() {
                    return Err(Error::Configuration(
                        "no training texts remain outside the selected shots".into(),
                    ));
                }
                if needs_reasonings {
                    let selection = select_shot_texts(
                        &scorer,
                        &base,
                        &self.codebook.annotations,
                        ShotTextKind::Reasoning,
                        &scoring,
                    )?;
                    artifact
                        .reasonings
                        .insert(baseline.as_str().to_string(), selection);
                }
                if needs_explanations {
                    let selection = select_shot_texts(
                        &scorer,
                        &base,
                        &self.codebook.annotations,
                        ShotTextKind::Explanation,
                        &scoring,
                    )?;
                    artifact
                        .explanations
                        .insert(baseline.as_str().to_string(), selection);
                }
            }
            Ok(artifact)
        })
    }

    /// One persona per construct: the highest mean F1 over the top and
    /// bottom baselines on train, reused for both.
    fn select_persona(
        &self,
        scorer: &Scorer,
        baselines: &BaselinesArtifact,
        train: &Dataset,
    ) -> Result<PersonaSelection> {
        let bottom = Self::baseline_spec(baselines, BaselineChoice::Bottom)?;
        let top = Self::baseline_spec(baselines, BaselineChoice::Top)?;
        let mut scores = Vec::with_capacity(self.codebook.personas.len());
        for persona in &self.codebook.personas {
            let bottom_eval =
                scorer.score(&Candidate::spec(bottom.apply_persona(persona)?), train)?;
            let top_eval = scorer.score(&Candidate::spec(top.apply_persona(persona)?), train)?;
            let bottom_f1 = bottom_eval.metrics.f1_or_zero();
            let top_f1 = top_eval.metrics.f1_or_zero();
            scores.push(PersonaScore {
                persona: persona.clone(),
                bottom_f1,
                top_f1,
                mean_f1: (bottom_f1 + top_f1) / 2.0,
            });
        }
        let mut selected_index = 0;
        for (index, score) in scores.iter().enumerate() {
            if score.mean_f1 > scores[selected_index].mean_f1 {
                selected_index = index;
            }
        }
        Ok(PersonaSelection {
            selected_index,
            persona: scores[selected_index].persona.clone(),
            scores,
        })
    }

    pub fn require_decorators(&self) -> Result<DecoratorsArtifact> {
        self.run_dir
            .load_current(DECORATORS_PATH, &self.decorators_input()?)
    }

    /// Build the prompt candidate for one grid cell from stage artifacts.
    pub fn cell_candidate(
        &self,
        cell: GridCell,
        baselines: &BaselinesArtifact,
        ape: &BTreeMap<BaselineChoice, ApeArtifact>,
        shots: &ShotsArtifact,
        decorators: &DecoratorsArtifact,
    ) -> Result<Candidate> {
        let base = Self::baseline_spec(baselines, cell.baseline)?;
        let shot_list = if cell.shots == ShotMode::Few {
            Self::winner_shots(shots, cell.baseline)?
        } else {
            Vec::new()
        };
        match cell.technique {
            Technique::None => {
                let spec = if cell.shots == ShotMode::Few {
                    base.with_shots(shot_list)
                } else {
                    base
                };
                Ok(Candidate::spec(spec))
            }
            Technique::Ape => {
                let artifact = ape.get(&cell.baseline).ok_or_else(|| {
                    Error::Ordering(format!(
                        "ape trace for {} baseline is missing",
                        cell.baseline.as_str()
                    ))
                })?;
                let body = match &artifact.trace.global_best.candidate {
                    Candidate::Raw { raw } => raw.body.clone(),
                    Candidate::Spec { .. } => {
                        return Err(Error::Integrity("ape global best is not raw text".into()))
                    }
                };
                Ok(Candidate::raw(RawPrompt {
                    body,
                    shots: shot_list,
                    answer_format: promptkit::AnswerFormat::PlainYesNo,
                }))
            }
            Technique::Persona => {
                let persona = decorators.persona.as_ref().ok_or_else(|| {
                    Error::Ordering("persona selection is missing from decorators".into())
                })?;
                let spec = if cell.shots == ShotMode::Few {
                    base.with_shots(shot_list)
                } else {
                    base
                };
                Ok(Candidate::spec(spec.apply_persona(&persona.persona)?))
            }
            Technique::Cot => match cell.shots {
                ShotMode::Zero => Ok(Candidate::spec(
                    base.apply_cot(promptkit::CotMode::ZeroShot)?,
                )),
                ShotMode::Few => {
                    let selection = decorators
                        .reasonings
                        .get(cell.baseline.as_str())
                        .ok_or_else(|| {
                            Error::Ordering(format!(
                                "reasoning selection for {} baseline is missing",
                                cell.baseline.as_str()
                            ))
                        })?;
                    Ok(Candidate::spec(selection.spec.clone()))
                }
            },
            Technique::Explanations => {
                if cell.shots == ShotMode::Zero {
                    return Err(Error::Configuration(format!(
                        "cell {cell} is invalid: explanations require few-shot mode"
                    )));
                }
                let selection = decorators
                    .explanations
                    .get(cell.baseline.as_str())
                    .ok_or_else(|| {
                        Error::Ordering(format!(
                            "explanation selection for {} baseline is missing",
                            cell.baseline.as_str()
                        ))
                    })?;
                Ok(Candidate::spec(selection.spec.clone()))
            }
        }
    }

    /// Evaluate every requested grid cell on the development set: metrics,
    /// an F1 bootstrap, and a paired test against the cell's baseline
    /// anchor.
    pub fn stage_grid(
        &self,
        split: &SplitArtifact,
        baselines: &BaselinesArtifact,
        ape: &BTreeMap<BaselineChoice, ApeArtifact>,
        shots: &ShotsArtifact,
        decorators: &DecoratorsArtifact,
    ) -> Result<Vec<CellArtifact>> {
        let (_, dev, _) = self.partitions(split)?;
        let scorer = self.scorer();
        let cells = self.config.grid_cells()?;
        let eval_config = &self.config.evaluation;

        let mut by_cell: BTreeMap<GridCell, CellArtifact> = BTreeMap::new();
        let mut out = Vec::with_capacity(cells.len());
        for cell in cells {
            let input = self.cell_input(cell)?;
            let anchor = if cell.is_anchor() {
                None
            } else {
                Some(by_cell.get(&cell.anchor()).cloned().ok_or_else(|| {
                    Error::Ordering(format!("anchor for cell {cell} was not evaluated first"))
                })?)
            };
            let artifact = self
                .run_dir
                .load_or_compute(&Self::cell_path(cell), &input, || {
                    let candidate = self.cell_candidate(cell, baselines, ape, shots, decorators)?;
                    let (mut eval, parsed) = scorer.score_detailed(&candidate, &dev)?;
                    let outcomes: Vec<ParseOutcome> = parsed.iter().map(|p| p.outcome).collect();
                    let golds = dev.golds();

                    let summary = bootstrap_with(
                        &outcomes,
                        &golds,
                        eval_config.failure_policy,
                        MetricKind::F1,
                        eval_config.bootstrap_resamples,
                        util::derive_seed(
                            eval_config.bootstrap_seed,
                            &format!("dev/{}", cell.key()),
                        ),
                        eval_config.ci_method,
                    )?;
                    eval.bootstraps.insert("f1".to_string(), summary);

                    if let Some(anchor_artifact) = &anchor {
                        let anchor_outcomes: Vec<ParseOutcome> = anchor_artifact
                            .predictions
                            .iter()
                            .map(|p| p.outcome)
                            .collect();
                        eval.paired_vs_anchor = Some(paired_test(
                            &outcomes,
                            &anchor_outcomes,
                            &golds,
                            eval_config.failure_policy,
                            MetricKind::F1,
                            eval_config.bootstrap_resamples,
                            util::derive_seed(
                                eval_config.bootstrap_seed,
                                &format!("paired/{}", cell.key()),
                            ),
                        )?);
                    }

                    let predictions = dev
                        .items
                        .iter()
                        .zip(&parsed)
                        .map(|(item, p)| PredictionRecord {
                            id: item.id.clone(),
                            outcome: p.outcome,
                            matched_span: p.matched_span.clone(),
                        })
                        .collect();
                    Ok(CellArtifact {
                        cell,
                        prompt: candidate,
                        predictions,
                        eval,
                    })
                })?;
            by_cell.insert(cell, artifact.clone());
            out.push(artifact);
        }
        Ok(out)
    }

    pub fn require_cell(&self, cell: GridCell) -> Result<CellArtifact> {
        self.run_dir
            .load_current(&Self::cell_path(cell), &self.cell_input(cell)?)
    }

    pub fn load_designation(&self) -> Result<Option<DesignationArtifact>> {
        if !self.run_dir.exists(DESIGNATION_PATH) {
            return Ok(None);
        }
        let artifact: Artifact<DesignationArtifact> = self.run_dir.read(DESIGNATION_PATH)?;
        Ok(Some(artifact.payload))
    }

    /// Record the cell that will receive the single test evaluation. The
    /// cell must already be evaluated on dev; re-designation is allowed
    /// until the test set is consumed.
    pub fn designate_final(&self, cell: GridCell) -> Result<DesignationArtifact> {
        if !cell.is_valid() {
            return Err(Error::Configuration(format!("cell {cell} is invalid")));
        }
        self.require_cell(cell).map_err(|_| {
            Error::Ordering(format!(
                "cell {cell} has not been evaluated on dev; run the grid first"
            ))
        })?;
        if let Some(existing) = self.load_designation()? {
            if existing.test_consumed {
                if existing.cell == cell {
                    return Ok(existing);
                }
                return Err(Error::HoldOut(format!(
                    "cannot re-designate {cell}: the test set was already consumed by {}",
                    existing.cell
                )));
            }
            if existing.cell != cell {
                log::info!(
                    "designation changed from {} to {cell} before test consumption",
                    existing.cell
                );
            }
        }
        let artifact = DesignationArtifact {
            cell,
            test_consumed: false,
            test_gold_reads_at_designation: self.test_gold_reads(),
        };
        self.run_dir
            .store(DESIGNATION_PATH, "designation", &artifact)?;
        Ok(artifact)
    }

    /// The single test evaluation of the designated cell. Refuses to run
    /// without a designation and refuses to run twice.
    pub fn eval_test(&self) -> Result<TestEvalArtifact> {
        let designation = self.load_designation()?.ok_or_else(|| {
            Error::HoldOut("no final cell designated; run designate-final first".into())
        })?;
        if designation.test_consumed {
            return Err(Error::HoldOut(format!(
                "test set already consumed for cell {}",
                designation.cell
            )));
        }
        let cell = designation.cell;

        let split = self.require_split()?;
        let baselines = self.require_baselines()?;
        let mut ape = BTreeMap::new();
        for baseline in BaselineChoice::ALL {
            if self.run_dir.exists(&Self::ape_path(baseline)) {
                ape.insert(baseline, self.require_ape(baseline)?);
            }
        }
        let shots = self.require_shots()?;
        let decorators = if self.run_dir.exists(DECORATORS_PATH) {
            self.require_decorators()?
        } else {
            DecoratorsArtifact::default()
        };

        let (_, _, test) = self.partitions(&split)?;
        if test.len() < 2 {
            return Err(Error::InsufficientData(
                "test split has fewer than 2 texts".into(),
            ));
        }
        let candidate = self.cell_candidate(cell, &baselines, &ape, &shots, &decorators)?;

        let scorer = self.scorer();
        let parsed = scorer.classify(&candidate, &test)?;
        let outcomes: Vec<ParseOutcome> = parsed.iter().map(|p| p.outcome).collect();
        let golds = self.test_golds(&test);

        let eval_config = &self.config.evaluation;
        let cm = confusion(&outcomes, &golds, eval_config.failure_policy)?;
        let mut eval = EvalResult {
            metrics: metric_set(&cm)?,
            confusion: cm,
            bootstraps: BTreeMap::new(),
            paired_vs_anchor: None,
        };
        for metric in MetricKind::ALL {
            let summary: BootstrapSummary = bootstrap_with(
                &outcomes,
                &golds,
                eval_config.failure_policy,
                metric,
                eval_config.bootstrap_resamples,
                util::derive_seed(
                    eval_config.bootstrap_seed,
                    &format!("test/{}", metric.name()),
                ),
                eval_config.ci_method,
            )?;
            eval.bootstraps.insert(metric.name().to_string(), summary);
        }

        let predictions = test
            .items
            .iter()
            .zip(&parsed)
            .map(|(item, p)| PredictionRecord {
                id: item.id.clone(),
                outcome: p.outcome,
                matched_span: p.matched_span.clone(),
            })
            .collect();
        let artifact = TestEvalArtifact {
            cell,
            n: test.len(),
            predictions,
            eval,
        };
        self.run_dir
            .store(TEST_EVAL_PATH, &self.cell_input(cell)?, &artifact)?;
        self.run_dir.store(
            DESIGNATION_PATH,
            "designation",
            &DesignationArtifact {
                cell,
                test_consumed: true,
                test_gold_reads_at_designation: designation.test_gold_reads_at_designation,
            },
        )?;
        Ok(artifact)
    }

    pub fn load_test_eval(&self) -> Result<Option<TestEvalArtifact>> {
        if !self.run_dir.exists(TEST_EVAL_PATH) {
            return Ok(None);
        }
        let artifact: Artifact<TestEvalArtifact> = self.run_dir.read(TEST_EVAL_PATH)?;
        Ok(Some(artifact.payload))
    }

    /// The full protocol: split, baseline search, automatic prompt
    /// engineering on both extremes, shot selection, decorator selection,
    /// the dev grid, designation, and the single test evaluation.
    pub fn run_all(&self) -> Result<RunSummary> {
        let split = self.stage_split()?;
        let baselines = self.stage_baselines(&split)?;
        let mut ape = BTreeMap::new();
        for baseline in BaselineChoice::ALL {
            ape.insert(baseline, self.stage_ape(&split, &baselines, baseline)?);
        }
        let shots = self.stage_shots(&split, &baselines)?;
        let decorators = self.stage_decorators(&split, &baselines, &shots)?;
        let cells = self.stage_grid(&split, &baselines, &ape, &shots, &decorators)?;

        let final_cell = match self.config.grid.final_cell {
            Some(cell) => cell,
            None => {
                // dev argmax by F1 point, ties to canonical order
                let mut best = cells[0].cell;
                let mut best_score = cells[0].eval.metrics.f1_or_zero();
                for artifact in &cells[1..] {
                    let score = artifact.eval.metrics.f1_or_zero();
                    if score > best_score {
                        best = artifact.cell;
                        best_score = score;
                    }
                }
                best
            }
        };

        let existing = self.load_designation()?;
        let test = match existing {
            Some(d) if d.test_consumed => {
                if d.cell != final_cell {
                    return Err(Error::HoldOut(format!(
                        "configured final cell {final_cell} differs from the consumed designation {}",
                        d.cell
                    )));
                }
                self.load_test_eval()?.ok_or_else(|| {
                    Error::Integrity(
                        "designation is consumed but test_eval.json is missing".into(),
                    )
                })?
            }
            _ => {
                self.designate_final(final_cell)?;
                self.eval_test()?
            }
        };

        Ok(RunSummary {
            construct: self.corpus.construct.clone(),
            cells: cells
                .iter()
                .map(|c| CellSummary {
                    cell: c.cell.to_string(),
                    f1: c.eval.metrics.f1_or_zero(),
                    f1_se: c.eval.bootstraps.get("f1").map(|b| b.se),
                    stars: c
                        .eval
                        .paired_vs_anchor
                        .as_ref()
                        .map(|p| p.stars.as_str().to_string()),
                })
                .collect(),
            final_cell: final_cell.to_string(),
            test_metrics: test
                .eval
                .bootstraps
                .iter()
                .map(|(name, b)| {
                    (
                        name.clone(),
                        TestMetricSummary {
                            point: b.point,
                            se: b.se,
                            ci_low: b.ci_low,
                            ci_high: b.ci_high,
                        },
                    )
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub f1: f64,
    pub f1_se: Option<f64>,
    pub stars: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestMetricSummary {
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub construct: String,
    pub cells: Vec<CellSummary>,
    pub final_cell: String,
    pub test_metrics: BTreeMap<String, TestMetricSummary>,
}

/// Read-only artifact loaders for reports (no lock, no clients).
pub struct RunView {
    pub dir: RunDir,
}

impl RunView {
    pub fn open(root: impl Into<PathBuf>) -> RunView {
        RunView {
            dir: RunDir::new(root),
        }
    }

    fn read_payload<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        Ok(self.dir.read::<T>(rel)?.payload)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        self.read_payload(MANIFEST_PATH)
    }

    pub fn split(&self) -> Result<SplitArtifact> {
        self.read_payload(SPLIT_PATH)
    }

    pub fn baselines(&self) -> Result<BaselinesArtifact> {
        self.read_payload(BASELINES_PATH)
    }

    pub fn ape(&self, baseline: BaselineChoice) -> Result<ApeArtifact> {
        self.read_payload(&Runner::ape_path(baseline))
    }

    pub fn has_ape(&self, baseline: BaselineChoice) -> bool {
        self.dir.exists(&Runner::ape_path(baseline))
    }

    pub fn shots(&self) -> Result<ShotsArtifact> {
        self.read_payload(SHOTS_PATH)
    }

    pub fn decorators(&self) -> Result<DecoratorsArtifact> {
        self.read_payload(DECORATORS_PATH)
    }

    pub fn cell(&self, cell: GridCell) -> Result<CellArtifact> {
        self.read_payload(&Runner::cell_path(cell))
    }

    pub fn has_cell(&self, cell: GridCell) -> bool {
        self.dir.exists(&Runner::cell_path(cell))
    }

    pub fn designation(&self) -> Result<Option<DesignationArtifact>> {
        if !self.dir.exists(DESIGNATION_PATH) {
            return Ok(None);
        }
        Ok(Some(self.read_payload(DESIGNATION_PATH)?))
    }

    pub fn test_eval(&self) -> Result<Option<TestEvalArtifact>> {
        if !self.dir.exists(TEST_EVAL_PATH) {
            return Ok(None);
        }
        Ok(Some(self.read_payload(TEST_EVAL_PATH)?))
    }
}
