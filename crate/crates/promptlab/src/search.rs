//! Selection procedures: baseline prompt search, few-shot combination
//! sampling, automatic prompt engineering, and decorator-variant selection.
//!
//! Everything here selects by F1 on a scoring dataset, breaking ties by the
//! lowest index in presentation order, and never scores a prompt on texts
//! that appear inside it.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Client, CompletionKey};
use crate::corpus::{Dataset, LabeledText};
use crate::error::{Error, Result};
use crate::metrics::{confusion, EvalResult, FailurePolicy};
use crate::promptkit::{
    self, parse_label, AnswerFormat, Codebook, ParsedLabel, Placement, PromptSpec, RawPrompt,
    RenderedPrompt, Shot,
};
use crate::util;

/// Meta-prompt used to ask a model for a prompt variation. `{prompt}` is
/// replaced with the current seed.
pub const META_PROMPT_TEMPLATE: &str = "Generate a variation of the following prompt while keeping the output format. You may add important information or remove unnecessary information.\n\nInstruction: {prompt}\n\nOutput only the new instruction.";

/// A scorable prompt: either a structured spec or raw text (automatic prompt
/// engineering candidates), optionally with shots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Candidate {
    Spec { spec: PromptSpec },
    Raw { raw: RawPrompt },
}

impl Candidate {
    pub fn spec(spec: PromptSpec) -> Candidate {
        Candidate::Spec { spec }
    }

    pub fn raw(raw: RawPrompt) -> Candidate {
        Candidate::Raw { raw }
    }

    pub fn answer_format(&self) -> AnswerFormat {
        match self {
            Candidate::Spec { spec } => spec.answer_format,
            Candidate::Raw { raw } => raw.answer_format,
        }
    }

    pub fn shot_ids(&self) -> Vec<&str> {
        let shots = match self {
            Candidate::Spec { spec } => &spec.shots,
            Candidate::Raw { raw } => &raw.shots,
        };
        shots.iter().map(|s| s.source_id.as_str()).collect()
    }

    pub fn render(
        &self,
        codebook: &Codebook,
        target: &str,
        placement: Placement,
    ) -> Result<RenderedPrompt> {
        match self {
            Candidate::Spec { spec } => promptkit::render(spec, codebook, target, placement),
            Candidate::Raw { raw } => Ok(promptkit::render_raw(raw, target, placement)),
        }
    }

    /// Display text for trace records: the prompt body without shots/target.
    pub fn display_text(&self, codebook: &Codebook) -> String {
        match self {
            Candidate::Spec { spec } => {
                promptkit::body_text(spec, codebook).unwrap_or_else(|_| "<invalid spec>".into())
            }
            Candidate::Raw { raw } => raw.body.clone(),
        }
    }

    fn identity_digest(&self) -> String {
        let json = serde_json::to_string(self).expect("candidate serializes");
        util::sha256_hex(json.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Codebook { index: usize },
    ApeSeed,
    ApeGeneration { generation: usize, slot: usize },
    FewshotCombo { index: usize },
    DecoratorVariant { index: usize },
}

impl Origin {
    pub fn label(&self) -> String {
        match self {
            Origin::Codebook { index } => format!("codebook/{index}"),
            Origin::ApeSeed => "ape/seed".into(),
            Origin::ApeGeneration { generation, slot } => format!("ape/gen{generation}/slot{slot}"),
            Origin::FewshotCombo { index } => format!("fewshot/{index}"),
            Origin::DecoratorVariant { index } => format!("variant/{index}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    /// F1 on the scoring set (0 when undefined).
    pub score: f64,
    pub eval: EvalResult,
    pub origin: Origin,
}

/// Scores candidates on datasets through one classify client, memoizing
/// whole-dataset evaluations so repeated candidates cost nothing.
pub struct Scorer<'a> {
    client: &'a Client,
    codebook: &'a Codebook,
    policy: FailurePolicy,
    placement: Placement,
    parallelism: usize,
    memo: Mutex<HashMap<(String, String), EvalResult>>,
}

impl<'a> Scorer<'a> {
    pub fn new(
        client: &'a Client,
        codebook: &'a Codebook,
        policy: FailurePolicy,
        placement: Placement,
        parallelism: usize,
    ) -> Scorer<'a> {
        Scorer {
            client,
            codebook,
            policy,
            placement,
            parallelism: parallelism.max(1),
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn client(&self) -> &Client {
        self.client
    }

    pub fn codebook(&self) -> &Codebook {
        self.codebook
    }

    pub fn policy(&self) -> FailurePolicy {
        self.policy
    }

    fn check_leakage(&self, candidate: &Candidate, dataset: &Dataset) -> Result<()> {
        let ids = dataset.id_set();
        let leaked: Vec<&str> = candidate
            .shot_ids()
            .into_iter()
            .filter(|id| ids.contains(id))
            .collect();
        if leaked.is_empty() {
            Ok(())
        } else {
            Err(Error::Leakage(format!(
                "in-prompt example ids {leaked:?} intersect scoring set {:?}",
                dataset.name
            )))
        }
    }

    /// Classify every item of `dataset` under `candidate` and parse labels.
    pub fn classify(&self, candidate: &Candidate, dataset: &Dataset) -> Result<Vec<ParsedLabel>> {
        self.check_leakage(candidate, dataset)?;
        let mut jobs = Vec::with_capacity(dataset.len());
        for item in &dataset.items {
            let prompt = candidate.render(self.codebook, &item.text, self.placement)?;
            jobs.push((prompt, CompletionKey::Target(item.id.clone())));
        }
        let raws = self.client.batch_classify(&jobs, self.parallelism)?;
        Ok(raws
            .iter()
            .map(|raw| parse_label(raw, candidate.answer_format()))
            .collect())
    }

    /// Evaluate a candidate on a dataset, memoized per (candidate, dataset).
    pub fn score(&self, candidate: &Candidate, dataset: &Dataset) -> Result<EvalResult> {
        let key = (candidate.identity_digest(), dataset_digest(dataset));
        if let Some(hit) = self.memo.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let (eval, _) = self.score_detailed(candidate, dataset)?;
        self.memo.lock().unwrap().insert(key, eval.clone());
        Ok(eval)
    }

    /// As [`Scorer::score`] but also returns per-item parsed predictions.
    pub fn score_detailed(
        &self,
        candidate: &Candidate,
        dataset: &Dataset,
    ) -> Result<(EvalResult, Vec<ParsedLabel>)> {
        let predictions = self.classify(candidate, dataset)?;
        let outcomes: Vec<_> = predictions.iter().map(|p| p.outcome).collect();
        let cm = confusion(&outcomes, &dataset.golds(), self.policy)?;
        Ok((EvalResult::from_counts(cm)?, predictions))
    }

    pub fn scored(
        &self,
        candidate: Candidate,
        dataset: &Dataset,
        origin: Origin,
    ) -> Result<ScoredCandidate> {
        let eval = self.score(&candidate, dataset)?;
        Ok(ScoredCandidate {
            score: eval.metrics.f1_or_zero(),
            candidate,
            eval,
            origin,
        })
    }
}

fn dataset_digest(dataset: &Dataset) -> String {
    let mut parts: Vec<&[u8]> = vec![dataset.name.as_bytes()];
    for item in &dataset.items {
        parts.push(item.id.as_bytes());
    }
    util::sha256_parts(&parts)
}

fn argmax(scores: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (index, score) in scores.enumerate() {
        let better = match best {
            None => true,
            Some((_, top)) => score > top,
        };
        if better {
            best = Some((index, score));
        }
    }
    best.map(|(i, _)| i)
}

fn argmin(scores: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (index, score) in scores.enumerate() {
        let better = match best {
            None => true,
            Some((_, low)) => score < low,
        };
        if better {
            best = Some((index, score));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSearch {
    pub leaderboard: Vec<ScoredCandidate>,
    pub top_index: usize,
    pub bottom_index: usize,
}

impl BaselineSearch {
    pub fn top(&self) -> &ScoredCandidate {
        &self.leaderboard[self.top_index]
    }

    pub fn bottom(&self) -> &ScoredCandidate {
        &self.leaderboard[self.bottom_index]
    }
}

/// Assemble `count` baseline specs, score each on the training set, and
/// return the extremes with the full leaderboard.
pub fn search_baselines(
    scorer: &Scorer,
    train: &Dataset,
    count: usize,
    seed: u64,
) -> Result<BaselineSearch> {
    if train.is_empty() || !train.has_both_classes() {
        return Err(Error::ScoringDegenerate(
            "training set must contain both classes".into(),
        ));
    }
    let specs = promptkit::assemble_baselines(scorer.codebook, count, seed)?;
    let mut leaderboard = Vec::with_capacity(specs.len());
    for (index, spec) in specs.into_iter().enumerate() {
        leaderboard.push(scorer.scored(
            Candidate::spec(spec),
            train,
            Origin::Codebook { index },
        )?);
    }
    let top_index = argmax(leaderboard.iter().map(|c| c.score)).expect("count >= 1");
    let bottom_index = argmin(leaderboard.iter().map(|c| c.score)).expect("count >= 1");
    Ok(BaselineSearch {
        leaderboard,
        top_index,
        bottom_index,
    })
}

/// One sampled few-shot example combination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotCombination {
    pub n: usize,
    pub example_ids: Vec<String>,
    /// Set when the drawn n exceeded the pool size and was capped.
    #[serde(default)]
    pub capped: bool,
}

/// Draw `count` combinations: n uniform in 1..=10 (capped at the pool size),
/// then n ids without replacement, one at a time.
pub fn sample_shot_combinations(
    pool_ids: &[String],
    count: usize,
    seed: u64,
) -> Result<Vec<ShotCombination>> {
    if pool_ids.is_empty() {
        return Err(Error::Configuration("example pool is empty".into()));
    }
    if count == 0 {
        return Err(Error::Configuration("combination count must be >= 1".into()));
    }
    let mut rng = util::rng(seed);
    let mut combos = Vec::with_capacity(count);
    for _ in 0..count {
        let drawn = rng.gen_range(1..=10usize);
        let capped = drawn > pool_ids.len();
        let n = drawn.min(pool_ids.len());
        let mut pool: Vec<usize> = (0..pool_ids.len()).collect();
        let mut example_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let j = rng.gen_range(0..pool.len());
            example_ids.push(pool_ids[pool.remove(j)].clone());
        }
        combos.push(ShotCombination { n, example_ids, capped });
    }
    Ok(combos)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotSelection {
    pub winner_index: usize,
    pub winner: ScoredCandidate,
    /// Score of every combination, for the selection histograms.
    pub leaderboard: Vec<ScoredCandidate>,
    pub pool_ids: Vec<String>,
}

fn shots_for_combo(
    combo: &ShotCombination,
    by_id: &BTreeMap<&str, &LabeledText>,
) -> Result<Vec<Shot>> {
    combo
        .example_ids
        .iter()
        .map(|id| {
            let item = by_id.get(id.as_str()).ok_or_else(|| {
                Error::Configuration(format!("example id {id:?} is not in the training set"))
            })?;
            Ok(Shot::plain(item.text.clone(), item.gold, item.id.clone()))
        })
        .collect()
}

/// Score every shot combination attached to `base` on the training texts
/// outside the example pool, returning the argmax (ties to the lowest
/// combination index).
pub fn select_shots(
    scorer: &Scorer,
    base: &PromptSpec,
    combos: &[ShotCombination],
    train: &Dataset,
    pool_ids: &[String],
) -> Result<ShotSelection> {
    let pool_set = pool_ids.iter().map(|s| s.as_str()).collect();
    let scoring = train.without(&pool_set);
    if scoring.is_empty() {
        return Err(Error::Configuration(
            "scoring remainder is empty: the example pool covers the whole training set".into(),
        ));
    }
    let by_id: BTreeMap<&str, &LabeledText> =
        train.items.iter().map(|i| (i.id.as_str(), i)).collect();

    let mut leaderboard = Vec::with_capacity(combos.len());
    for (index, combo) in combos.iter().enumerate() {
        let shots = shots_for_combo(combo, &by_id)?;
        leaderboard.push(scorer.scored(
            Candidate::spec(base.with_shots(shots)),
            &scoring,
            Origin::FewshotCombo { index },
        )?);
    }
    let winner_index = argmax(leaderboard.iter().map(|c| c.score)).expect("count >= 1");
    Ok(ShotSelection {
        winner_index,
        winner: leaderboard[winner_index].clone(),
        leaderboard,
        pool_ids: pool_ids.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ApeOptions {
    pub generations: usize,
    pub width: usize,
    pub seed: u64,
    /// When true (default) the current seed competes in each generation's
    /// argmax, so the running seed can never regress.
    pub seed_competes: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    Seed,
    Candidate { index: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub generation: usize,
    pub seed_text: String,
    pub seed_score: f64,
    pub candidates: Vec<ScoredCandidate>,
    pub selected: Selection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BudgetReport {
    /// Classification completions requested (before cache hits are removed).
    pub classify_requests: u64,
    pub cache_hits: u64,
    /// Actual provider invocations: requests minus cache hits.
    pub backend_calls: u64,
    pub generation_calls: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchTrace {
    pub seed: ScoredCandidate,
    pub generations: Vec<GenerationTrace>,
    pub global_best: ScoredCandidate,
    pub budget: BudgetReport,
}

/// Flat per-candidate record for trace serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub origin: String,
    pub prompt: String,
    pub score: f64,
    pub confusion: crate::metrics::ConfusionMatrix,
}

impl SearchTrace {
    pub fn flat_records(&self, codebook: &Codebook) -> Vec<TraceRecord> {
        let mut records = vec![TraceRecord {
            origin: self.seed.origin.label(),
            prompt: self.seed.candidate.display_text(codebook),
            score: self.seed.score,
            confusion: self.seed.eval.confusion,
        }];
        for generation in &self.generations {
            for candidate in &generation.candidates {
                records.push(TraceRecord {
                    origin: candidate.origin.label(),
                    prompt: candidate.candidate.display_text(codebook),
                    score: candidate.score,
                    confusion: candidate.eval.confusion,
                });
            }
        }
        records
    }

    /// Running maximum of scores in scoring order (seed first).
    pub fn running_best(&self) -> Vec<f64> {
        let mut best = self.seed.score;
        let mut series = vec![best];
        for generation in &self.generations {
            for candidate in &generation.candidates {
                if candidate.score > best {
                    best = candidate.score;
                }
                series.push(best);
            }
        }
        series
    }
}

fn meta_prompt(template: &str, seed_text: &str) -> RenderedPrompt {
    let content = template.replace("{prompt}", seed_text);
    RenderedPrompt::from_single_user(content, AnswerFormat::PlainYesNo)
}

/// Iterative automatic prompt engineering: per generation, ask the generate
/// client for `width` variations of the current seed, score each on the
/// training set, and keep the argmax as the next seed. The returned trace
/// carries every scored candidate and the best prompt across all
/// generations.
pub fn ape_search(
    scorer: &Scorer,
    generate_client: &Client,
    seed_body: &str,
    answer_format: AnswerFormat,
    train: &Dataset,
    meta_template: &str,
    options: ApeOptions,
) -> Result<SearchTrace> {
    if options.generations == 0 || options.width == 0 {
        return Err(Error::Configuration(
            "ape search needs generations >= 1 and width >= 1".into(),
        ));
    }
    let stats = scorer.client().stats();
    let requests_before = stats.requests();
    let hits_before = stats.cache_hits();
    let calls_before = stats.backend_calls();

    let make_raw = |body: &str| {
        Candidate::raw(RawPrompt {
            body: body.to_string(),
            shots: Vec::new(),
            answer_format,
        })
    };

    let seed_scored = scorer.scored(make_raw(seed_body), train, Origin::ApeSeed)?;
    let mut current_text = seed_body.to_string();
    let mut current_score = seed_scored.score;
    let mut global_best = seed_scored.clone();
    let mut generations: Vec<GenerationTrace> = Vec::with_capacity(options.generations);
    let mut generation_calls = 0u64;

    for generation in 1..=options.generations {
        let seed_text_here = current_text.clone();
        let seed_score_here = current_score;
        let prompt = meta_prompt(meta_template, &current_text);
        let mut candidates = Vec::with_capacity(options.width);
        for slot in 0..options.width {
            let nonce =
                util::derive_seed(options.seed, &format!("ape/gen{generation}/slot{slot}"));
            let text = generate_client.complete(&prompt, &CompletionKey::Nonce(nonce))?;
            generation_calls += 1;
            let text = text.trim();
            if text.is_empty() {
                log::warn!(
                    "ape generation {generation} slot {slot} returned empty text; discarded"
                );
                continue;
            }
            candidates.push(scorer.scored(
                make_raw(text),
                train,
                Origin::ApeGeneration { generation, slot },
            )?);
        }
        if candidates.is_empty() {
            return Err(Error::Generation(format!(
                "all {} candidates in generation {generation} were empty",
                options.width
            )));
        }

        for candidate in &candidates {
            if candidate.score > global_best.score {
                global_best = candidate.clone();
            }
        }

        let best_candidate = argmax(candidates.iter().map(|c| c.score)).expect("non-empty");
        let selected =
            if options.seed_competes && candidates[best_candidate].score <= current_score {
                Selection::Seed
            } else {
                Selection::Candidate { index: best_candidate }
            };
        if let Selection::Candidate { index } = selected {
            current_text = match &candidates[index].candidate {
                Candidate::Raw { raw } => raw.body.clone(),
                Candidate::Spec { .. } => unreachable!("ape candidates are raw"),
            };
            current_score = candidates[index].score;
        }
        generations.push(GenerationTrace {
            generation,
            seed_text: seed_text_here,
            seed_score: seed_score_here,
            candidates,
            selected,
        });
    }

    let budget = BudgetReport {
        classify_requests: stats.requests() - requests_before,
        cache_hits: stats.cache_hits() - hits_before,
        backend_calls: stats.backend_calls() - calls_before,
        generation_calls,
    };

    Ok(SearchTrace {
        seed: seed_scored,
        generations,
        global_best,
        budget,
    })
}

/// Score decorated variants and return the argmax (ties to the lowest
/// index).
pub fn select_variant(
    scorer: &Scorer,
    variants: &[Candidate],
    scoring: &Dataset,
) -> Result<(usize, Vec<ScoredCandidate>)> {
    if variants.is_empty() {
        return Err(Error::Configuration("no variants to select from".into()));
    }
    let mut scored = Vec::with_capacity(variants.len());
    for (index, variant) in variants.iter().enumerate() {
        scored.push(scorer.scored(
            variant.clone(),
            scoring,
            Origin::DecoratorVariant { index },
        )?);
    }
    let winner = argmax(scored.iter().map(|c| c.score)).expect("non-empty");
    Ok((winner, scored))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotTextKind {
    Reasoning,
    Explanation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotTextChoice {
    pub source_id: String,
    pub selected_variant: usize,
    pub variant_scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotTextSelection {
    pub kind: ShotTextKind,
    pub choices: Vec<ShotTextChoice>,
    pub spec: PromptSpec,
}

/// Per-shot variant selection for reasonings or explanations: every shot
/// starts at variant 0, then for each shot in turn the listed variants are
/// compared on the scoring set and the argmax is retained.
pub fn select_shot_texts(
    scorer: &Scorer,
    base_with_shots: &PromptSpec,
    annotations: &BTreeMap<String, promptkit::ShotAnnotation>,
    kind: ShotTextKind,
    scoring: &Dataset,
) -> Result<ShotTextSelection> {
    if base_with_shots.shots.is_empty() {
        return Err(Error::Configuration(
            "shot text selection requires a few-shot spec".into(),
        ));
    }
    if scoring.is_empty() {
        return Err(Error::Configuration(
            "shot text selection scoring set is empty".into(),
        ));
    }

    let variants_for = |source_id: &str| -> Result<Vec<String>> {
        let annotation = annotations.get(source_id).ok_or_else(|| {
            Error::Decoration(format!(
                "shot {source_id:?} has no codebook annotation for {kind:?}"
            ))
        })?;
        let list = match kind {
            ShotTextKind::Reasoning => &annotation.reasonings,
            ShotTextKind::Explanation => &annotation.explanations,
        };
        if list.is_empty() {
            return Err(Error::Decoration(format!(
                "shot {source_id:?} has no {kind:?} variants in the codebook"
            )));
        }
        Ok(list.clone())
    };

    let set_text = |spec: &mut PromptSpec, shot: usize, text: &str| match kind {
        ShotTextKind::Reasoning => spec.shots[shot].reasoning = Some(text.to_string()),
        ShotTextKind::Explanation => spec.shots[shot].explanation = Some(text.to_string()),
    };

    let decorate = |spec: &PromptSpec| -> Result<PromptSpec> {
        match kind {
            ShotTextKind::Reasoning => spec.apply_cot(promptkit::CotMode::FewShot),
            ShotTextKind::Explanation => spec.apply_explanations(),
        }
    };

    // start every shot at variant 0
    let mut working = base_with_shots.clone();
    for shot in 0..working.shots.len() {
        let source_id = working.shots[shot].source_id.clone();
        let variants = variants_for(&source_id)?;
        set_text(&mut working, shot, &variants[0]);
    }

    let mut choices = Vec::with_capacity(working.shots.len());
    for shot in 0..working.shots.len() {
        let source_id = working.shots[shot].source_id.clone();
        let variants = variants_for(&source_id)?;
        if variants.len() == 1 {
            choices.push(ShotTextChoice {
                source_id,
                selected_variant: 0,
                variant_scores: Vec::new(),
            });
            continue;
        }
        let mut candidates = Vec::with_capacity(variants.len());
        for text in &variants {
            let mut spec = working.clone();
            set_text(&mut spec, shot, text);
            candidates.push(Candidate::spec(decorate(&spec)?));
        }
        let (winner, scored) = select_variant(scorer, &candidates, scoring)?;
        set_text(&mut working, shot, &variants[winner]);
        choices.push(ShotTextChoice {
            source_id,
            selected_variant: winner,
            variant_scores: scored.iter().map(|c| c.score).collect(),
        });
    }

    Ok(ShotTextSelection {
        kind,
        choices,
        spec: decorate(&working)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendConfig, MockFormat, MockOracle};
    use crate::corpus::Label;
    use crate::promptkit::ShotAnnotation;

    fn train_set(n: usize) -> Dataset {
        let items = (0..n)
            .map(|i| LabeledText {
                id: format!("t{i}"),
                participant_id: format!("p{i}"),
                text: if i % 2 == 0 {
                    format!("thank you for item {i}")
                } else {
                    format!("ordinary sentence number {i}")
                },
                gold: if i % 2 == 0 { Label::Positive } else { Label::Negative },
                construct: "gratitude".into(),
            })
            .collect();
        Dataset { name: "train".into(), items }
    }

    fn perfect_client() -> Client {
        Client::new(
            BackendConfig::mock_backend(MockOracle::new(&["thank"]), 0.0),
            None,
        )
        .unwrap()
    }

    fn flipped_client() -> Client {
        let config = BackendConfig::mock_backend(MockOracle::new(&["thank"]), 0.0);
        Client::from_fn(
            config,
            |prompt, _| {
                let content = &prompt.messages.last().unwrap().content;
                let target = &content[content.rfind("Text: ").unwrap() + 6..];
                Ok(if target.contains("thank") { "No".into() } else { "Yes".into() })
            },
            None,
        )
    }

    fn codebook() -> Codebook {
        crate::promptkit::test_codebook()
    }

    #[test]
    fn baseline_search_saturating_mock_ties_to_lowest_index() {
        let client = perfect_client();
        let codebook = codebook();
        let scorer = Scorer::new(
            &client,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            2,
        );
        let train = train_set(10);
        let result = search_baselines(&scorer, &train, 50, 7).unwrap();
        assert_eq!(result.leaderboard.len(), 50);
        for c in &result.leaderboard {
            assert_eq!(c.score, 1.0);
        }
        assert_eq!(result.top_index, 0);
        assert_eq!(result.bottom_index, 0);
    }

    #[test]
    fn baseline_search_flipped_mock_scores_zero() {
        let client = flipped_client();
        let codebook = codebook();
        let scorer = Scorer::new(
            &client,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            2,
        );
        let train = train_set(10);
        let result = search_baselines(&scorer, &train, 20, 7).unwrap();
        // flipped predictor: tp = 0 so F1 = 0 for every candidate
        assert_eq!(result.top().score, 0.0);
        assert_eq!(result.top_index, result.bottom_index);
    }

    #[test]
    fn baseline_search_single_class_train_is_degenerate() {
        let client = perfect_client();
        let codebook = codebook();
        let scorer = Scorer::new(
            &client,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            1,
        );
        let mut train = train_set(10);
        for item in &mut train.items {
            item.gold = Label::Positive;
        }
        assert!(matches!(
            search_baselines(&scorer, &train, 5, 7),
            Err(Error::ScoringDegenerate(_))
        ));
    }

    #[test]
    fn combos_respect_parameters() {
        let pool: Vec<String> = (0..50).map(|i| format!("t{i}")).collect();
        let combos = sample_shot_combinations(&pool, 50, 13).unwrap();
        assert_eq!(combos.len(), 50);
        for combo in &combos {
            assert!((1..=10).contains(&combo.n));
            assert_eq!(combo.example_ids.len(), combo.n);
            let mut unique = combo.example_ids.clone();
            unique.sort();
            unique.dedup();
            assert_eq!(unique.len(), combo.n);
            assert!(!combo.capped);
        }
    }

    #[test]
    fn combos_pool_of_one_forces_single_id() {
        let pool = vec!["only".to_string()];
        let combos = sample_shot_combinations(&pool, 10, 3).unwrap();
        for combo in combos {
            assert_eq!(combo.n, 1);
            assert_eq!(combo.example_ids, vec!["only".to_string()]);
        }
    }

    #[test]
    fn combos_cap_flag_set_when_pool_small() {
        let pool = vec!["a".to_string(), "b".to_string()];
        let combos = sample_shot_combinations(&pool, 50, 3).unwrap();
        assert!(combos.iter().any(|c| c.capped));
    }

    #[test]
    fn combos_deterministic_under_seed() {
        let pool: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        let a = sample_shot_combinations(&pool, 30, 99).unwrap();
        let b = sample_shot_combinations(&pool, 30, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn select_shots_winner_is_leaderboard_max() {
        let client = Client::new(
            BackendConfig::mock_backend(
                MockOracle {
                    positive_markers: vec!["thank".into()],
                    noise_rate: 0.3,
                    seed: 11,
                    format_style: MockFormat::Plain,
                },
                0.0,
            ),
            None,
        )
        .unwrap();
        let codebook = codebook();
        let scorer = Scorer::new(
            &client,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            2,
        );
        let train = train_set(20);
        let pool: Vec<String> = (0..8).map(|i| format!("t{i}")).collect();
        let combos = sample_shot_combinations(&pool, 12, 5).unwrap();
        let base = PromptSpec::baseline(0, vec![], 0);
        let selection = select_shots(&scorer, &base, &combos, &train, &pool).unwrap();
        let max = selection
            .leaderboard
            .iter()
            .map(|c| c.score)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(selection.winner.score, max);
        // winner index is the first leaderboard entry achieving the max
        let first_max = selection
            .leaderboard
            .iter()
            .position(|c| c.score == max)
            .unwrap();
        assert_eq!(selection.winner_index, first_max);
        // score reproduces from stored confusion counts
        let cm = &selection.winner.eval.confusion;
        let f1 = 2.0 * cm.true_positives as f64
            / (2.0 * cm.true_positives as f64
                + cm.false_positives as f64
                + cm.false_negatives as f64);
        assert!((f1 - selection.winner.score).abs() < 1e-12);
    }

    #[test]
    fn select_shots_identical_combos_tie_to_zero() {
        let client = perfect_client();
        let codebook = codebook();
        let scorer = Scorer::new(
            &client,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            1,
        );
        let train = train_set(12);
        let pool = vec!["t0".to_string()];
        let combos: Vec<ShotCombination> = (0..5)
            .map(|_| ShotCombination {
                n: 1,
                example_ids: vec!["t0".into()],
                capped: false,
            })
            .collect();
        let base = PromptSpec::baseline(0, vec![], 0);
        let selection = select_shots(&scorer, &base, &combos, &train, &pool).unwrap();
        assert_eq!(selection.winner_index, 0);
    }

    #[test]
    fn select_shots_empty_remainder_is_configuration_error() {
        let client = perfect_client();
        let codebook = codebook();
        let scorer = Scorer::new(
            &client,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            1,
        );
        let train = train_set(4);
        let pool: Vec<String> = train.items.iter().map(|i| i.id.clone()).collect();
        let combos = sample_shot_combinations(&pool, 3, 1).unwrap();
        let base = PromptSpec::baseline(0, vec![], 0);
        assert!(matches!(
            select_shots(&scorer, &base, &combos, &train, &pool),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn scoring_never_leaks_shots_into_scoring_set() {
        let client = perfect_client();
        let codebook = codebook();
        let scorer = Scorer::new(
            &client,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            1,
        );
        let train = train_set(6);
        let spec = PromptSpec::baseline(0, vec![], 0).with_shots(vec![Shot::plain(
            "thank you for item 0",
            Label::Positive,
            "t0",
        )]);
        let err = scorer.score(&Candidate::spec(spec), &train).unwrap_err();
        assert!(matches!(err, Error::Leakage(_)), "{err}");
    }

    #[test]
    fn ape_trace_contract() {
        let oracle = MockOracle {
            positive_markers: vec!["thank".into()],
            noise_rate: 0.25,
            seed: 21,
            format_style: MockFormat::Plain,
        };
        let classify =
            Client::new(BackendConfig::mock_backend(oracle.clone(), 0.0), None).unwrap();
        let generate = Client::new(BackendConfig::mock_backend(oracle, 1.0), None).unwrap();
        let codebook = codebook();
        let scorer = Scorer::new(
            &classify,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            2,
        );
        let train = train_set(16);
        let trace = ape_search(
            &scorer,
            &generate,
            "Classify the text for thankfulness. Respond Yes or No.",
            AnswerFormat::PlainYesNo,
            &train,
            META_PROMPT_TEMPLATE,
            ApeOptions {
                generations: 5,
                width: 5,
                seed: 3,
                seed_competes: true,
            },
        )
        .unwrap();

        let total: usize = trace.generations.iter().map(|g| g.candidates.len()).sum();
        assert_eq!(total, 25);
        assert_eq!(trace.generations.len(), 5);

        // budget: one pass over train per distinct scored prompt (the
        // dataset-level memo absorbs repeated candidates)
        let mut unique: std::collections::BTreeSet<String> = trace
            .flat_records(&codebook)
            .iter()
            .map(|r| r.prompt.clone())
            .collect();
        unique.insert(trace.seed.candidate.display_text(&codebook));
        assert_eq!(trace.budget.classify_requests, unique.len() as u64 * 16);
        assert!(trace.budget.classify_requests <= 26 * 16);
        assert_eq!(
            trace.budget.backend_calls,
            trace.budget.classify_requests - trace.budget.cache_hits
        );
        assert_eq!(trace.budget.generation_calls, 25);

        // running best is non-decreasing and ends at the global best
        let series = trace.running_best();
        for pair in series.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
        let max = trace
            .flat_records(&codebook)
            .iter()
            .map(|r| r.score)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(trace.global_best.score, max);
        assert_eq!(*series.last().unwrap(), max);
    }

    #[test]
    fn ape_echo_generator_is_fixed_point() {
        let classify = perfect_client();
        let config = BackendConfig::mock_backend(MockOracle::new(&["thank"]), 1.0);
        let generate = Client::from_fn(
            config,
            |prompt, _| {
                let content = &prompt.messages[0].content;
                let after = &content[content.find("Instruction: ").unwrap() + 13..];
                let end = after.find("\n\nOutput only").unwrap_or(after.len());
                Ok(after[..end].to_string())
            },
            None,
        );
        let codebook = codebook();
        let scorer = Scorer::new(
            &classify,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            1,
        );
        let train = train_set(8);
        let seed_text = "Does the text thank anyone? Respond Yes or No.";
        let trace = ape_search(
            &scorer,
            &generate,
            seed_text,
            AnswerFormat::PlainYesNo,
            &train,
            META_PROMPT_TEMPLATE,
            ApeOptions {
                generations: 4,
                width: 1,
                seed: 5,
                seed_competes: true,
            },
        )
        .unwrap();
        for generation in &trace.generations {
            assert_eq!(generation.selected, Selection::Seed);
            assert_eq!(generation.seed_score, trace.seed.score);
        }
        match &trace.global_best.candidate {
            Candidate::Raw { raw } => assert_eq!(raw.body, seed_text),
            other => panic!("unexpected candidate {other:?}"),
        }
    }

    #[test]
    fn ape_all_empty_generation_errors() {
        let classify = perfect_client();
        let config = BackendConfig::mock_backend(MockOracle::new(&["thank"]), 1.0);
        let generate = Client::from_fn(config, |_, _| Ok("   ".into()), None);
        let codebook = codebook();
        let scorer = Scorer::new(
            &classify,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            1,
        );
        let train = train_set(6);
        let err = ape_search(
            &scorer,
            &generate,
            "Seed. Respond Yes or No.",
            AnswerFormat::PlainYesNo,
            &train,
            META_PROMPT_TEMPLATE,
            ApeOptions {
                generations: 2,
                width: 3,
                seed: 1,
                seed_competes: true,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Generation(_)), "{err}");
    }

    #[test]
    fn select_variant_ties_to_index_zero() {
        let client = perfect_client();
        let codebook = codebook();
        let scorer = Scorer::new(
            &client,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            1,
        );
        let train = train_set(8);
        let variants: Vec<Candidate> = codebook
            .personas
            .iter()
            .map(|p| {
                Candidate::spec(
                    PromptSpec::baseline(0, vec![], 0).apply_persona(p).unwrap(),
                )
            })
            .collect();
        let (winner, scored) = select_variant(&scorer, &variants, &train).unwrap();
        assert_eq!(winner, 0);
        assert_eq!(scored.len(), 2);
    }

    #[test]
    fn select_shot_texts_retains_per_shot_winner() {
        // noise keyed by prompt content makes the two explanation variants
        // genuinely differ in score
        let oracle = MockOracle {
            positive_markers: vec!["thank".into()],
            noise_rate: 0.4,
            seed: 2,
            format_style: MockFormat::Plain,
        };
        let client = Client::new(BackendConfig::mock_backend(oracle, 0.0), None).unwrap();
        let codebook = codebook();
        let scorer = Scorer::new(
            &client,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            1,
        );
        let train = train_set(14);

        let shots = vec![
            Shot::plain("thank you for item 0", Label::Positive, "t0"),
            Shot::plain("ordinary sentence number 1", Label::Negative, "t1"),
        ];
        let base = PromptSpec::baseline(0, vec![], 0).with_shots(shots);
        let mut annotations = BTreeMap::new();
        for id in ["t0", "t1"] {
            annotations.insert(
                id.to_string(),
                ShotAnnotation {
                    reasonings: vec![],
                    explanations: vec![
                        format!("variant zero for {id}"),
                        format!("variant one for {id}"),
                    ],
                },
            );
        }
        let scoring = train.without(&["t0", "t1"].into_iter().collect());
        let selection = select_shot_texts(
            &scorer,
            &base,
            &annotations,
            ShotTextKind::Explanation,
            &scoring,
        )
        .unwrap();
        assert_eq!(selection.choices.len(), 2);
        for choice in &selection.choices {
            assert_eq!(choice.variant_scores.len(), 2);
            let best = choice
                .variant_scores
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(choice.variant_scores[choice.selected_variant], best);
        }
        assert!(selection.spec.explanations);
        for shot in &selection.spec.shots {
            assert!(shot.explanation.is_some());
        }
    }

    #[test]
    fn select_shot_texts_missing_annotation_is_decoration_error() {
        let client = perfect_client();
        let codebook = codebook();
        let scorer = Scorer::new(
            &client,
            &codebook,
            FailurePolicy::CountAsNegative,
            Placement::SingleUser,
            1,
        );
        let train = train_set(6);
        let base = PromptSpec::baseline(0, vec![], 0)
            .with_shots(vec![Shot::plain("x", Label::Positive, "t0")]);
        let scoring = train.without(&["t0"].into_iter().collect());
        let err = select_shot_texts(
            &scorer,
            &base,
            &BTreeMap::new(),
            ShotTextKind::Reasoning,
            &scoring,
        )
        .unwrap_err();
        match err {
            Error::Decoration(msg) => assert!(msg.contains("t0"), "{msg}"),
            other => panic!("expected decoration error, got {other}"),
        }
    }
}
