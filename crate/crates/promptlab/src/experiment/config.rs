//! Experiment configuration: one TOML file describing the corpus, codebook,
//! backends, budgets, and grid for a run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::corpus::{self, CorpusFormat};
use crate::error::{Error, Result};
use crate::metrics::{CiMethod, FailurePolicy};
use crate::promptkit::{self, Placement};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineChoice {
    Bottom,
    Top,
}

impl BaselineChoice {
    pub const ALL: [BaselineChoice; 2] = [BaselineChoice::Bottom, BaselineChoice::Top];

    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineChoice::Bottom => "bottom",
            BaselineChoice::Top => "top",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotMode {
    Zero,
    Few,
}

impl ShotMode {
    pub const ALL: [ShotMode; 2] = [ShotMode::Zero, ShotMode::Few];

    pub fn as_str(&self) -> &'static str {
        match self {
            ShotMode::Zero => "zero",
            ShotMode::Few => "few",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    None,
    Ape,
    Persona,
    Cot,
    Explanations,
}

impl Technique {
    pub const ALL: [Technique; 5] = [
        Technique::None,
        Technique::Ape,
        Technique::Persona,
        Technique::Cot,
        Technique::Explanations,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Technique::None => "none",
            Technique::Ape => "ape",
            Technique::Persona => "persona",
            Technique::Cot => "cot",
            Technique::Explanations => "explanations",
        }
    }

    /// Row label used in the development tables.
    pub fn row_label(&self) -> &'static str {
        match self {
            Technique::None => "Baseline",
            Technique::Ape => "Automatic Prompt Engineering",
            Technique::Persona => "Persona",
            Technique::Cot => "Chain-of-Thought",
            Technique::Explanations => "Explanations",
        }
    }
}

/// One (baseline, shot mode, technique) configuration evaluated on dev.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub baseline: BaselineChoice,
    pub shots: ShotMode,
    pub technique: Technique,
}

impl GridCell {
    pub fn new(baseline: BaselineChoice, shots: ShotMode, technique: Technique) -> GridCell {
        GridCell { baseline, shots, technique }
    }

    /// Zero-shot explanations cannot exist: explanations decorate shots.
    pub fn is_valid(&self) -> bool {
        !(self.technique == Technique::Explanations && self.shots == ShotMode::Zero)
    }

    /// The grey-shaded cell this cell's stars compare against.
    pub fn is_anchor(&self) -> bool {
        self.shots == ShotMode::Zero && self.technique == Technique::None
    }

    pub fn anchor(&self) -> GridCell {
        GridCell::new(self.baseline, ShotMode::Zero, Technique::None)
    }

    pub fn key(&self) -> String {
        format!(
            "{}_{}_{}",
            self.baseline.as_str(),
            self.shots.as_str(),
            self.technique.as_str()
        )
    }

    pub fn parse(s: &str) -> Result<GridCell> {
        let parts: Vec<&str> = s.split(['/', ',', '_', ':']).collect();
        if parts.len() != 3 {
            return Err(Error::Configuration(format!(
                "cell {s:?} must have the form baseline/shots/technique, e.g. top/few/ape"
            )));
        }
        let baseline = match parts[0] {
            "bottom" => BaselineChoice::Bottom,
            "top" => BaselineChoice::Top,
            other => {
                return Err(Error::Configuration(format!(
                    "unknown baseline {other:?} (expected bottom or top)"
                )))
            }
        };
        let shots = match parts[1] {
            "zero" => ShotMode::Zero,
            "few" => ShotMode::Few,
            other => {
                return Err(Error::Configuration(format!(
                    "unknown shot mode {other:?} (expected zero or few)"
                )))
            }
        };
        let technique = match parts[2] {
            "none" => Technique::None,
            "ape" => Technique::Ape,
            "persona" => Technique::Persona,
            "cot" => Technique::Cot,
            "explanations" => Technique::Explanations,
            other => {
                return Err(Error::Configuration(format!(
                    "unknown technique {other:?} (expected none, ape, persona, cot or explanations)"
                )))
            }
        };
        let cell = GridCell::new(baseline, shots, technique);
        if !cell.is_valid() {
            return Err(Error::Configuration(format!(
                "cell {s:?} is invalid: explanations require few-shot mode"
            )));
        }
        Ok(cell)
    }

    /// Every valid cell in canonical order: baseline, then shot mode, then
    /// technique.
    pub fn all_valid() -> Vec<GridCell> {
        let mut cells = Vec::new();
        for baseline in BaselineChoice::ALL {
            for shots in ShotMode::ALL {
                for technique in Technique::ALL {
                    let cell = GridCell::new(baseline, shots, technique);
                    if cell.is_valid() {
                        cells.push(cell);
                    }
                }
            }
        }
        cells
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.baseline.as_str(),
            self.shots.as_str(),
            self.technique.as_str()
        )
    }
}

fn default_ratios() -> [f64; 3] {
    [0.25, 0.50, 0.25]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    pub seed: u64,
}

fn default_baseline_count() -> usize {
    50
}
fn default_ape_generations() -> usize {
    5
}
fn default_ape_width() -> usize {
    5
}
fn default_shot_pool() -> usize {
    50
}
fn default_shot_combos() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Budgets {
    #[serde(default = "default_baseline_count")]
    pub baseline_count: usize,
    #[serde(default = "default_ape_generations")]
    pub ape_generations: usize,
    #[serde(default = "default_ape_width")]
    pub ape_width: usize,
    #[serde(default = "default_shot_pool")]
    pub shot_pool: usize,
    #[serde(default = "default_shot_combos")]
    pub shot_combos: usize,
}

impl Default for Budgets {
    fn default() -> Budgets {
        Budgets {
            baseline_count: default_baseline_count(),
            ape_generations: default_ape_generations(),
            ape_width: default_ape_width(),
            shot_pool: default_shot_pool(),
            shot_combos: default_shot_combos(),
        }
    }
}

fn default_resamples() -> u64 {
    1000
}
fn default_policy() -> FailurePolicy {
    FailurePolicy::CountAsNegative
}
fn default_ci() -> CiMethod {
    CiMethod::Percentile
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationConfig {
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: u64,
    pub bootstrap_seed: u64,
    #[serde(default = "default_policy")]
    pub failure_policy: FailurePolicy,
    #[serde(default = "default_ci")]
    pub ci_method: CiMethod,
}

fn default_seed_competes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub seed: u64,
    /// Whether the current seed competes in each generation's argmax
    /// (default true; turning this off lets a below-seed candidate dethrone
    /// it).
    #[serde(default = "default_seed_competes")]
    pub seed_competes: bool,
    /// Override for the prompt-variation meta-prompt; must keep the
    /// `{prompt}` placeholder.
    #[serde(default)]
    pub meta_prompt: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Roles {
    pub classify: String,
    pub generate: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridConfig {
    /// Cells to evaluate on dev; absent means every valid cell.
    #[serde(default)]
    pub cells: Option<Vec<GridCell>>,
    /// Cell designated for the single test evaluation; absent means run-all
    /// designates the dev argmax by F1.
    #[serde(default)]
    pub final_cell: Option<GridCell>,
}

fn default_parallelism() -> usize {
    4
}
fn default_placement() -> Placement {
    Placement::SingleUser
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub construct: Option<String>,
    pub corpus: PathBuf,
    #[serde(default)]
    pub corpus_format: Option<String>,
    pub codebook: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_placement")]
    pub placement: Placement,
    /// Optional two-rater file reported by `validate`.
    #[serde(default)]
    pub rater_file: Option<PathBuf>,
    pub split: SplitConfig,
    #[serde(default)]
    pub budgets: Budgets,
    pub evaluation: EvaluationConfig,
    pub search: SearchConfig,
    pub backends: BTreeMap<String, BackendConfig>,
    pub roles: Roles,
    #[serde(default)]
    pub grid: GridConfig,
}

impl ExperimentConfig {
    /// Load a config file, resolving relative data paths against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let content = std::fs::read_to_string(path)?;
        let mut config: ExperimentConfig = toml::from_str(&content)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.corpus = resolve(base, &config.corpus);
        config.codebook = resolve(base, &config.codebook);
        config.rater_file = config.rater_file.as_ref().map(|p| resolve(base, p));
        config.out_dir = resolve(base, &config.out_dir);
        Ok(config)
    }

    pub fn corpus_format(&self) -> CorpusFormat {
        match self.corpus_format.as_deref() {
            Some("csv") => CorpusFormat::Csv,
            Some("jsonl") => CorpusFormat::Jsonl,
            _ => CorpusFormat::from_path(&self.corpus),
        }
    }

    pub fn classify_backend(&self) -> Result<&BackendConfig> {
        self.backends.get(&self.roles.classify).ok_or_else(|| {
            Error::Configuration(format!(
                "roles.classify names unknown backend {:?}",
                self.roles.classify
            ))
        })
    }

    pub fn generate_backend(&self) -> Result<&BackendConfig> {
        self.backends.get(&self.roles.generate).ok_or_else(|| {
            Error::Configuration(format!(
                "roles.generate names unknown backend {:?}",
                self.roles.generate
            ))
        })
    }

    pub fn meta_prompt(&self) -> &str {
        self.search
            .meta_prompt
            .as_deref()
            .unwrap_or(crate::search::META_PROMPT_TEMPLATE)
    }

    /// The requested grid cells, validated, in canonical order.
    pub fn grid_cells(&self) -> Result<Vec<GridCell>> {
        match &self.grid.cells {
            None => Ok(GridCell::all_valid()),
            Some(cells) => {
                let mut out = Vec::new();
                for cell in cells {
                    if !cell.is_valid() {
                        return Err(Error::Configuration(format!(
                            "grid cell {cell} is invalid: explanations require few-shot mode"
                        )));
                    }
                    if !out.contains(cell) {
                        out.push(*cell);
                    }
                }
                if out.is_empty() {
                    return Err(Error::Configuration("grid.cells is empty".into()));
                }
                out.sort();
                // anchors are required for the paired tests of their group
                for cell in out.clone() {
                    let anchor = cell.anchor();
                    if !out.contains(&anchor) {
                        out.push(anchor);
                    }
                }
                out.sort();
                Ok(out)
            }
        }
    }

    /// Structural validation plus data loading checks. Returns a short
    /// human-readable summary of what was validated.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut notes = Vec::new();

        if self.parallelism == 0 {
            return Err(Error::Configuration("parallelism must be >= 1".into()));
        }
        for (label, value) in [
            ("budgets.baseline_count", self.budgets.baseline_count),
            ("budgets.ape_generations", self.budgets.ape_generations),
            ("budgets.ape_width", self.budgets.ape_width),
            ("budgets.shot_pool", self.budgets.shot_pool),
            ("budgets.shot_combos", self.budgets.shot_combos),
        ] {
            if value == 0 {
                return Err(Error::Configuration(format!("{label} must be >= 1")));
            }
        }
        if self.evaluation.bootstrap_resamples == 0 {
            return Err(Error::Configuration(
                "evaluation.bootstrap_resamples must be >= 1".into(),
            ));
        }
        if let Some(template) = &self.search.meta_prompt {
            if !template.contains("{prompt}") {
                return Err(Error::Configuration(
                    "search.meta_prompt must contain the {prompt} placeholder".into(),
                ));
            }
        }

        let sum: f64 = self.split.ratios.iter().sum();
        if self.split.ratios.iter().any(|r| *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Configuration(format!(
                "split.ratios must be positive and sum to 1 (got {:?})",
                self.split.ratios
            )));
        }

        let classify = self.classify_backend()?;
        classify.validate()?;
        if classify.temperature != 0.0 {
            return Err(Error::Configuration(format!(
                "classification backend must run at temperature 0 (got {})",
                classify.temperature
            )));
        }
        let generate = self.generate_backend()?;
        generate.validate()?;
        if generate.temperature != 1.0 {
            return Err(Error::Configuration(format!(
                "prompt-generation backend must run at temperature 1 (got {})",
                generate.temperature
            )));
        }
        notes.push(format!(
            "backends: classify={} ({}), generate={} ({})",
            self.roles.classify,
            classify.kind.as_str(),
            self.roles.generate,
            generate.kind.as_str()
        ));

        let corpus = corpus::load_corpus(&self.corpus, self.corpus_format())?;
        notes.push(format!(
            "corpus: {} texts, {} participants, construct {:?}, {:.2} positive",
            corpus.len(),
            corpus.participants().len(),
            corpus.construct,
            corpus.positive_fraction()
        ));
        if let Some(expected) = &self.construct {
            if *expected != corpus.construct {
                return Err(Error::Configuration(format!(
                    "config construct {expected:?} does not match corpus construct {:?}",
                    corpus.construct
                )));
            }
        }

        let codebook = promptkit::load_codebook(&self.codebook)?;
        notes.push(format!(
            "codebook: {} definitions, {} instructions, {} criteria, {} personas, {} annotations",
            codebook.definitions.len(),
            codebook.instructions.len(),
            codebook.criteria.len(),
            codebook.personas.len(),
            codebook.annotations.len()
        ));
        if codebook.construct != corpus.construct {
            notes.push(format!(
                "warning: codebook construct {:?} differs from corpus construct {:?}",
                codebook.construct, corpus.construct
            ));
        }

        let cells = self.grid_cells()?;
        if cells
            .iter()
            .any(|c| c.technique == Technique::Persona)
            && codebook.personas.is_empty()
        {
            return Err(Error::Configuration(
                "grid includes persona cells but the codebook lists no personas".into(),
            ));
        }
        notes.push(format!("grid: {} cells", cells.len()));

        if let Some(cell) = &self.grid.final_cell {
            if !cell.is_valid() {
                return Err(Error::Configuration(format!(
                    "grid.final_cell {cell} is invalid"
                )));
            }
            if !cells.contains(cell) {
                return Err(Error::Configuration(format!(
                    "grid.final_cell {cell} is not among the cells to run"
                )));
            }
        }

        if let Some(rater_file) = &self.rater_file {
            let (a, b) = corpus::load_rater_file(rater_file)?;
            let kappa = corpus::cohens_kappa(&a, &b)?;
            notes.push(format!(
                "inter-rater reliability: kappa {:.2} over {} items (p_o {:.2}, p_e {:.2})",
                kappa.kappa, kappa.n_items, kappa.observed_agreement, kappa.expected_agreement
            ));
        }

        Ok(notes)
    }

    /// Digest over the fields that determine run artifacts.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(&(
            &self.split.ratios,
            self.split.seed,
            &self.budgets,
            &self.evaluation,
            &self.search,
            &self.roles,
            &self.grid,
            &self.placement,
        ))
        .expect("config serializes");
        util::sha256_hex(json.as_bytes())
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
