//! Codebooks, prompt specs, decorators, rendering, and completion parsing.
//!
//! A [`PromptSpec`] is a fully reproducible description of one prompt:
//! indices into a [`Codebook`], optional decorators, and a shot list. It
//! renders to backend messages via [`render`], and completions come back
//! through [`parse_label`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::util;

/// Instruction appended by zero-shot chain-of-thought decoration.
pub const COT_INSTRUCTION: &str = "First, explain your reasoning step by step. Then, state your final answer — either Yes or No — using the format: Final Answer: [Yes or No].";

const FINAL_ANSWER_MARKER: &str = "final answer:";

/// Component pools a construct's prompts are assembled from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    pub construct: String,
    pub definitions: Vec<String>,
    pub instructions: Vec<String>,
    #[serde(default)]
    pub criteria: Vec<String>,
    #[serde(default)]
    pub personas: Vec<String>,
    /// Reasoning/explanation variants for annotated examples, keyed by
    /// corpus text id.
    #[serde(default)]
    pub annotations: BTreeMap<String, ShotAnnotation>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ShotAnnotation {
    #[serde(default)]
    pub reasonings: Vec<String>,
    #[serde(default)]
    pub explanations: Vec<String>,
}

impl Codebook {
    pub fn validate(&self) -> Result<()> {
        if self.definitions.is_empty() {
            return Err(Error::Codebook("definitions list is empty".into()));
        }
        if self.instructions.is_empty() {
            return Err(Error::Codebook("instructions list is empty".into()));
        }
        Ok(())
    }
}

/// Load a codebook from its TOML file.
pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let content = std::fs::read_to_string(path)?;
    let codebook: Codebook = toml::from_str(&content)?;
    codebook.validate()?;
    Ok(codebook)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotMode {
    Off,
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    PlainYesNo,
    FinalAnswer,
}

/// One in-prompt labeled example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub text: String,
    pub answer: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub source_id: String,
}

impl Shot {
    pub fn plain(text: impl Into<String>, answer: Label, source_id: impl Into<String>) -> Shot {
        Shot {
            text: text.into(),
            answer,
            reasoning: None,
            explanation: None,
            source_id: source_id.into(),
        }
    }
}

/// A fully reproducible prompt description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub definition_index: usize,
    pub criteria_indices: Vec<usize>,
    pub instruction_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<String>,
    pub cot: CotMode,
    pub explanations: bool,
    #[serde(default)]
    pub shots: Vec<Shot>,
    pub answer_format: AnswerFormat,
}

impl PromptSpec {
    /// Undecorated zero-shot baseline.
    pub fn baseline(
        definition_index: usize,
        criteria_indices: Vec<usize>,
        instruction_index: usize,
    ) -> PromptSpec {
        PromptSpec {
            definition_index,
            criteria_indices,
            instruction_index,
            persona: None,
            cot: CotMode::Off,
            explanations: false,
            shots: Vec::new(),
            answer_format: AnswerFormat::PlainYesNo,
        }
    }

    pub fn with_shots(&self, shots: Vec<Shot>) -> PromptSpec {
        let mut spec = self.clone();
        spec.shots = shots;
        spec
    }

    /// Check the structural invariants that decorators must preserve.
    pub fn validate(&self) -> Result<()> {
        if self.explanations && self.shots.is_empty() {
            return Err(Error::Decoration(
                "explanations require at least one shot".into(),
            ));
        }
        if self.explanations && self.cot == CotMode::FewShot {
            return Err(Error::Decoration(
                "explanations and few-shot chain-of-thought are mutually exclusive".into(),
            ));
        }
        if self.cot == CotMode::FewShot {
            for shot in &self.shots {
                if shot.reasoning.is_none() {
                    return Err(Error::Decoration(format!(
                        "shot {:?} has no reasoning for few-shot chain-of-thought",
                        shot.source_id
                    )));
                }
            }
        }
        let expect_final = self.cot != CotMode::Off;
        let is_final = self.answer_format == AnswerFormat::FinalAnswer;
        if expect_final != is_final {
            return Err(Error::Decoration(
                "answer format must be final_answer exactly when chain-of-thought is on".into(),
            ));
        }
        Ok(())
    }

    /// Set the persona. Rendering prepends it ahead of the definition.
    pub fn apply_persona(&self, persona: &str) -> Result<PromptSpec> {
        if persona.trim().is_empty() {
            return Err(Error::Decoration("persona must be non-empty".into()));
        }
        let mut spec = self.clone();
        spec.persona = Some(persona.to_string());
        Ok(spec)
    }

    /// Turn on chain-of-thought. Zero-shot appends the reasoning instruction;
    /// few-shot additionally renders each shot with its reasoning and a
    /// `Final Answer:` line.
    pub fn apply_cot(&self, mode: CotMode) -> Result<PromptSpec> {
        if mode == CotMode::Off {
            return Err(Error::Decoration(
                "apply_cot expects zero_shot or few_shot".into(),
            ));
        }
        if self.explanations {
            return Err(Error::Decoration(
                "explanations and chain-of-thought are mutually exclusive".into(),
            ));
        }
        if mode == CotMode::FewShot {
            if let Some(shot) = self.shots.iter().find(|s| s.reasoning.is_none()) {
                return Err(Error::Decoration(format!(
                    "shot {:?} has no reasoning for few-shot chain-of-thought",
                    shot.source_id
                )));
            }
        }
        let mut spec = self.clone();
        spec.cot = mode;
        spec.answer_format = AnswerFormat::FinalAnswer;
        Ok(spec)
    }

    /// Turn on post-answer explanations for every shot.
    pub fn apply_explanations(&self) -> Result<PromptSpec> {
        if self.shots.is_empty() {
            return Err(Error::Decoration(
                "explanations require at least one shot".into(),
            ));
        }
        if self.cot == CotMode::FewShot {
            return Err(Error::Decoration(
                "explanations and few-shot chain-of-thought are mutually exclusive".into(),
            ));
        }
        if let Some(shot) = self.shots.iter().find(|s| s.explanation.is_none()) {
            return Err(Error::Decoration(format!(
                "shot {:?} has no explanation",
                shot.source_id
            )));
        }
        let mut spec = self.clone();
        spec.explanations = true;
        Ok(spec)
    }
}

/// Assemble `count` baseline specs from the codebook: uniform definition,
/// uniform criteria count k in 0..=n with k distinct criteria in drawn
/// order, uniform instruction. Duplicates across the count are allowed.
pub fn assemble_baselines(codebook: &Codebook, count: usize, seed: u64) -> Result<Vec<PromptSpec>> {
    codebook.validate()?;
    if count == 0 {
        return Err(Error::Configuration("assembly count must be >= 1".into()));
    }
    let mut rng = util::rng(seed);
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let definition_index = rng.gen_range(0..codebook.definitions.len());
        let k = if codebook.criteria.is_empty() {
            0
        } else {
            rng.gen_range(0..=codebook.criteria.len())
        };
        let mut pool: Vec<usize> = (0..codebook.criteria.len()).collect();
        let mut criteria_indices = Vec::with_capacity(k);
        for _ in 0..k {
            let j = rng.gen_range(0..pool.len());
            criteria_indices.push(pool.remove(j));
        }
        let instruction_index = rng.gen_range(0..codebook.instructions.len());
        specs.push(PromptSpec::baseline(
            definition_index,
            criteria_indices,
            instruction_index,
        ));
    }
    Ok(specs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    SingleUser,
    SystemPlusUser,
}

/// A prompt rendered to backend messages, with a content digest that is
/// stable across processes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub messages: Vec<Message>,
    pub answer_format: AnswerFormat,
    pub canonical_hash: String,
}

impl RenderedPrompt {
    /// Wrap pre-built content as a single user message with a stable hash.
    pub fn from_single_user(content: String, format: AnswerFormat) -> RenderedPrompt {
        let messages = vec![Message {
            role: Role::User,
            content,
        }];
        let canonical_hash = canonical_hash(&messages, format);
        RenderedPrompt {
            messages,
            answer_format: format,
            canonical_hash,
        }
    }
}

fn canonical_hash(messages: &[Message], format: AnswerFormat) -> String {
    let mut parts: Vec<&[u8]> = Vec::with_capacity(messages.len() * 2 + 1);
    let format_tag: &[u8] = match format {
        AnswerFormat::PlainYesNo => b"plain_yes_no",
        AnswerFormat::FinalAnswer => b"final_answer",
    };
    parts.push(format_tag);
    for message in messages {
        parts.push(message.role.as_str().as_bytes());
        parts.push(message.content.as_bytes());
    }
    util::sha256_parts(&parts)
}

struct Parts {
    persona: Option<String>,
    body: Vec<String>,
    shots: Vec<String>,
    tail: Option<String>,
    answer_format: AnswerFormat,
}

fn render_shot(shot: &Shot, cot: CotMode, explanations: bool) -> String {
    if cot == CotMode::FewShot {
        // reasoning presence was validated upstream
        let reasoning = shot.reasoning.as_deref().unwrap_or_default();
        format!(
            "Text: {}\n{}\nFinal Answer: {}",
            shot.text,
            reasoning,
            shot.answer.as_yes_no()
        )
    } else if explanations {
        let explanation = shot.explanation.as_deref().unwrap_or_default();
        format!(
            "Text: {}\nAnswer: {}\nExplanation: {}",
            shot.text,
            shot.answer.as_yes_no(),
            explanation
        )
    } else {
        format!("Text: {}\nAnswer: {}", shot.text, shot.answer.as_yes_no())
    }
}

fn spec_parts(spec: &PromptSpec, codebook: &Codebook) -> Result<Parts> {
    spec.validate()?;
    let definition = codebook
        .definitions
        .get(spec.definition_index)
        .ok_or_else(|| {
            Error::Codebook(format!(
                "definition index {} out of range ({} definitions)",
                spec.definition_index,
                codebook.definitions.len()
            ))
        })?;
    let instruction = codebook
        .instructions
        .get(spec.instruction_index)
        .ok_or_else(|| {
            Error::Codebook(format!(
                "instruction index {} out of range ({} instructions)",
                spec.instruction_index,
                codebook.instructions.len()
            ))
        })?;

    let mut body = vec![definition.clone()];
    if !spec.criteria_indices.is_empty() {
        let mut bullets = Vec::with_capacity(spec.criteria_indices.len());
        for &idx in &spec.criteria_indices {
            let criterion = codebook.criteria.get(idx).ok_or_else(|| {
                Error::Codebook(format!(
                    "criterion index {idx} out of range ({} criteria)",
                    codebook.criteria.len()
                ))
            })?;
            bullets.push(format!("- {criterion}"));
        }
        body.push(bullets.join("\n"));
    }
    body.push(instruction.clone());

    let shots = spec
        .shots
        .iter()
        .map(|shot| render_shot(shot, spec.cot, spec.explanations))
        .collect();

    let tail = if spec.cot != CotMode::Off {
        Some(COT_INSTRUCTION.to_string())
    } else {
        None
    };

    Ok(Parts {
        persona: spec.persona.clone(),
        body,
        shots,
        tail,
        answer_format: spec.answer_format,
    })
}

fn render_parts(parts: Parts, target_text: &str, placement: Placement) -> RenderedPrompt {
    let mut blocks: Vec<String> = Vec::new();
    let mut messages = Vec::new();
    match (&parts.persona, placement) {
        (Some(persona), Placement::SystemPlusUser) => {
            messages.push(Message {
                role: Role::System,
                content: persona.clone(),
            });
        }
        (Some(persona), Placement::SingleUser) => blocks.push(persona.clone()),
        (None, _) => {}
    }
    blocks.extend(parts.body);
    blocks.extend(parts.shots);
    if let Some(tail) = parts.tail {
        blocks.push(tail);
    }
    blocks.push(format!("Text: {target_text}"));
    messages.push(Message {
        role: Role::User,
        content: blocks.join("\n\n"),
    });
    let canonical_hash = canonical_hash(&messages, parts.answer_format);
    RenderedPrompt {
        messages,
        answer_format: parts.answer_format,
        canonical_hash,
    }
}

/// Render a spec against a codebook for one target text.
///
/// Content order: persona, definition, criteria bullets, instruction, shot
/// blocks, chain-of-thought instruction, then `Text:` plus the target.
pub fn render(
    spec: &PromptSpec,
    codebook: &Codebook,
    target_text: &str,
    placement: Placement,
) -> Result<RenderedPrompt> {
    Ok(render_parts(
        spec_parts(spec, codebook)?,
        target_text,
        placement,
    ))
}

/// The prompt body (everything ahead of the shots and target) as plain text.
/// This is what automatic prompt engineering mutates.
pub fn body_text(spec: &PromptSpec, codebook: &Codebook) -> Result<String> {
    let parts = spec_parts(spec, codebook)?;
    let mut blocks = Vec::new();
    if let Some(persona) = parts.persona {
        blocks.push(persona);
    }
    blocks.extend(parts.body);
    Ok(blocks.join("\n\n"))
}

/// A prompt carried as raw text (an automatic-prompt-engineering candidate)
/// plus optional plain shots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPrompt {
    pub body: String,
    #[serde(default)]
    pub shots: Vec<Shot>,
    pub answer_format: AnswerFormat,
}

impl RawPrompt {
    pub fn new(body: impl Into<String>) -> RawPrompt {
        RawPrompt {
            body: body.into(),
            shots: Vec::new(),
            answer_format: AnswerFormat::PlainYesNo,
        }
    }

    pub fn with_shots(&self, shots: Vec<Shot>) -> RawPrompt {
        let mut raw = self.clone();
        raw.shots = shots;
        raw
    }
}

/// Render a raw-text prompt for one target.
pub fn render_raw(raw: &RawPrompt, target_text: &str, placement: Placement) -> RenderedPrompt {
    let parts = Parts {
        persona: None,
        body: vec![raw.body.clone()],
        shots: raw
            .shots
            .iter()
            .map(|s| render_shot(s, CotMode::Off, false))
            .collect(),
        tail: None,
        answer_format: raw.answer_format,
    };
    render_parts(parts, target_text, placement)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseOutcome {
    Positive,
    Negative,
    ParseFailure,
}

impl ParseOutcome {
    pub fn label(&self) -> Option<Label> {
        match self {
            ParseOutcome::Positive => Some(Label::Positive),
            ParseOutcome::Negative => Some(Label::Negative),
            ParseOutcome::ParseFailure => None,
        }
    }
}

/// A completion parsed into the binary label domain. Failures keep the raw
/// completion for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLabel {
    pub outcome: ParseOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_span: Option<String>,
    pub raw: String,
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
}

fn token_label(token: &str) -> Option<ParseOutcome> {
    match token.to_ascii_lowercase().as_str() {
        "yes" => Some(ParseOutcome::Positive),
        "no" => Some(ParseOutcome::Negative),
        _ => None,
    }
}

/// Extract a binary label from a completion.
///
/// `PlainYesNo` scans for the first standalone yes/no token
/// (case-insensitive, punctuation-tolerant). `FinalAnswer` locates the last
/// `Final Answer:` marker and parses the token that follows it. Anything
/// else is a parse failure carrying the raw completion.
pub fn parse_label(raw: &str, format: AnswerFormat) -> ParsedLabel {
    let parsed = match format {
        AnswerFormat::PlainYesNo => tokens(raw)
            .find_map(|token| token_label(token).map(|outcome| (outcome, token.to_string()))),
        AnswerFormat::FinalAnswer => {
            let lower = raw.to_ascii_lowercase();
            lower.rfind(FINAL_ANSWER_MARKER).and_then(|pos| {
                let after = &raw[pos + FINAL_ANSWER_MARKER.len()..];
                tokens(after)
                    .next()
                    .and_then(|token| token_label(token).map(|outcome| (outcome, token.to_string())))
            })
        }
    };
    match parsed {
        Some((outcome, span)) => ParsedLabel {
            outcome,
            matched_span: Some(span),
            raw: raw.to_string(),
        },
        None => ParsedLabel {
            outcome: ParseOutcome::ParseFailure,
            matched_span: None,
            raw: raw.to_string(),
        },
    }
}

#[cfg(test)]
pub(crate) fn test_codebook() -> Codebook {
    Codebook {
        construct: "negative core beliefs".into(),
        definitions: vec![
            "Negative core beliefs are generalized or exaggerated judgments people have about themselves, others, or the world.".into(),
            "A negative core belief is a broad negative judgment about oneself, other people, or the world at large.".into(),
        ],
        instructions: vec![
            "Does the following text contain an example of the psychological concept of a negative core belief? Respond Yes or No.".into(),
            "Classify the following text: does it express a negative core belief? Respond Yes or No.".into(),
        ],
        criteria: vec![
            "Include statements that generalize from one event to a global judgment.".into(),
            "Exclude passing negative feelings that are not judgments.".into(),
        ],
        personas: vec![
            "You are a caring and brilliant therapist.".into(),
            "You are a psychology professor.".into(),
        ],
        annotations: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shot_with_reasoning() -> Shot {
        Shot {
            text: "After my mother died I eventually grew stronger because of it.".into(),
            answer: Label::Positive,
            reasoning: Some("First, I see that the excerpt is indeed about a negative event (here, a mother's death). Second, I see that the writer identifies a positive outcome (they've become stronger). Third, I see that the writer attributes the positive outcome to the negative event. Because of these three points, my final answer is yes.".into()),
            explanation: None,
            source_id: "t1".into(),
        }
    }

    #[test]
    fn assemble_count_and_determinism() {
        let codebook = test_codebook();
        let a = assemble_baselines(&codebook, 50, 3).unwrap();
        let b = assemble_baselines(&codebook, 50, 3).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        assert!(a.iter().any(|s| s != &a[0]), "variants should differ");
    }

    #[test]
    fn assemble_degenerate_codebook_yields_identical_specs() {
        let codebook = Codebook {
            construct: "x".into(),
            definitions: vec!["def".into()],
            instructions: vec!["instr".into()],
            criteria: vec![],
            personas: vec![],
            annotations: BTreeMap::new(),
        };
        let specs = assemble_baselines(&codebook, 10, 5).unwrap();
        for spec in &specs {
            assert_eq!(spec, &specs[0]);
            assert!(spec.criteria_indices.is_empty());
        }
    }

    #[test]
    fn assemble_empty_pools_is_codebook_error() {
        let mut codebook = test_codebook();
        codebook.definitions.clear();
        assert!(matches!(
            assemble_baselines(&codebook, 5, 0),
            Err(Error::Codebook(_))
        ));
    }

    #[test]
    fn assembly_definition_distribution() {
        // Over 10,000 assemblies with 5 definitions, each frequency is
        // 0.2 within 0.02.
        let mut codebook = test_codebook();
        codebook.definitions = (0..5).map(|i| format!("definition {i}")).collect();
        let specs = assemble_baselines(&codebook, 10_000, 77).unwrap();
        let mut counts = [0usize; 5];
        for spec in &specs {
            counts[spec.definition_index] += 1;
        }
        for count in counts {
            let freq = count as f64 / 10_000.0;
            assert!((freq - 0.2).abs() <= 0.02, "freq {freq}");
        }
    }

    #[test]
    fn criteria_draws_are_distinct_and_ordered_as_drawn() {
        let mut codebook = test_codebook();
        codebook.criteria = (0..6).map(|i| format!("criterion {i}")).collect();
        let specs = assemble_baselines(&codebook, 200, 9).unwrap();
        for spec in specs {
            let mut sorted = spec.criteria_indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), spec.criteria_indices.len(), "duplicate criterion");
        }
    }

    #[test]
    fn persona_prepends_and_is_idempotent() {
        let codebook = test_codebook();
        let spec = PromptSpec::baseline(0, vec![], 0)
            .apply_persona("You are an expert labeler.")
            .unwrap();
        let rendered = render(&spec, &codebook, "some text", Placement::SingleUser).unwrap();
        assert!(rendered.messages[0]
            .content
            .starts_with("You are an expert labeler."));

        let again = spec.apply_persona("You are an expert labeler.").unwrap();
        let rendered_again = render(&again, &codebook, "some text", Placement::SingleUser).unwrap();
        assert_eq!(rendered, rendered_again);
    }

    #[test]
    fn empty_persona_is_error() {
        let spec = PromptSpec::baseline(0, vec![], 0);
        assert!(matches!(spec.apply_persona("  "), Err(Error::Decoration(_))));
    }

    #[test]
    fn zero_shot_cot_appends_verbatim_instruction() {
        let codebook = test_codebook();
        let spec = PromptSpec::baseline(0, vec![], 0)
            .apply_cot(CotMode::ZeroShot)
            .unwrap();
        assert_eq!(spec.answer_format, AnswerFormat::FinalAnswer);
        let rendered = render(&spec, &codebook, "target text", Placement::SingleUser).unwrap();
        let content = &rendered.messages[0].content;
        assert!(content.contains(COT_INSTRUCTION));
        assert!(COT_INSTRUCTION.ends_with("using the format: Final Answer: [Yes or No]."));
        // the instruction sits between the prompt body and the target block
        let instruction_pos = content.find(COT_INSTRUCTION).unwrap();
        let target_pos = content.rfind("Text: target text").unwrap();
        assert!(instruction_pos < target_pos);
    }

    #[test]
    fn few_shot_cot_renders_reasoning_block() {
        let codebook = test_codebook();
        let spec = PromptSpec::baseline(0, vec![], 0)
            .with_shots(vec![shot_with_reasoning()])
            .apply_cot(CotMode::FewShot)
            .unwrap();
        let rendered = render(&spec, &codebook, "target text", Placement::SingleUser).unwrap();
        let content = &rendered.messages[0].content;
        assert!(content.contains("Because of these three points, my final answer is yes."));
        assert!(content.contains("Final Answer: Yes"));
    }

    #[test]
    fn cot_on_explanations_spec_is_error() {
        let mut shot = shot_with_reasoning();
        shot.explanation = Some("explained".into());
        let spec = PromptSpec::baseline(0, vec![], 0)
            .with_shots(vec![shot])
            .apply_explanations()
            .unwrap();
        assert!(matches!(
            spec.apply_cot(CotMode::FewShot),
            Err(Error::Decoration(_))
        ));
    }

    #[test]
    fn few_shot_cot_without_reasoning_names_shot() {
        let spec = PromptSpec::baseline(0, vec![], 0)
            .with_shots(vec![Shot::plain("a text", Label::Negative, "t9")]);
        match spec.apply_cot(CotMode::FewShot) {
            Err(Error::Decoration(msg)) => assert!(msg.contains("t9"), "{msg}"),
            other => panic!("expected decoration error, got {other:?}"),
        }
    }

    #[test]
    fn explanations_render_triples_in_order() {
        let codebook = test_codebook();
        let mut s1 = Shot::plain("first example", Label::Positive, "t1");
        s1.explanation = Some("it thanks someone".into());
        let mut s2 = Shot::plain("second example", Label::Negative, "t2");
        s2.explanation = Some("no thanks given".into());
        let spec = PromptSpec::baseline(0, vec![], 0)
            .with_shots(vec![s1, s2])
            .apply_explanations()
            .unwrap();
        let rendered = render(&spec, &codebook, "the target", Placement::SingleUser).unwrap();
        let content = &rendered.messages[0].content;
        assert_eq!(content.matches("Explanation:").count(), 2);
        assert_eq!(content.matches("Answer:").count(), 2);
        // Answer precedes Explanation within each shot block
        for block in content.split("\n\n").filter(|b| b.contains("Explanation:")) {
            let answer = block.find("Answer:").unwrap();
            let explanation = block.find("Explanation:").unwrap();
            assert!(answer < explanation);
        }
    }

    #[test]
    fn explanations_without_shots_is_error() {
        let spec = PromptSpec::baseline(0, vec![], 0);
        assert!(matches!(
            spec.apply_explanations(),
            Err(Error::Decoration(_))
        ));
    }

    #[test]
    fn render_prompt_a_shape() {
        let codebook = test_codebook();
        let spec = PromptSpec::baseline(0, vec![], 0);
        let rendered = render(&spec, &codebook, "I always ruin everything.", Placement::SingleUser).unwrap();
        assert_eq!(rendered.messages.len(), 1);
        assert_eq!(rendered.messages[0].role, Role::User);
        let content = &rendered.messages[0].content;
        let definition_pos = content.find("Negative core beliefs are generalized").unwrap();
        let instruction_pos = content.find("Does the following text contain").unwrap();
        assert!(definition_pos < instruction_pos);
        assert!(content.contains("Respond Yes or No."));
    }

    #[test]
    fn render_hash_is_deterministic() {
        let codebook = test_codebook();
        let spec = PromptSpec::baseline(1, vec![0], 1);
        let a = render(&spec, &codebook, "some target", Placement::SingleUser).unwrap();
        let b = render(&spec, &codebook, "some target", Placement::SingleUser).unwrap();
        assert_eq!(a.canonical_hash, b.canonical_hash);
        let c = render(&spec, &codebook, "other target", Placement::SingleUser).unwrap();
        assert_ne!(a.canonical_hash, c.canonical_hash);
    }

    #[test]
    fn placement_changes_hash() {
        let codebook = test_codebook();
        let spec = PromptSpec::baseline(0, vec![], 0)
            .apply_persona("You are a labeler.")
            .unwrap();
        let single = render(&spec, &codebook, "t", Placement::SingleUser).unwrap();
        let split = render(&spec, &codebook, "t", Placement::SystemPlusUser).unwrap();
        assert_eq!(split.messages.len(), 2);
        assert_eq!(split.messages[0].role, Role::System);
        assert_ne!(single.canonical_hash, split.canonical_hash);
    }

    #[test]
    fn three_shot_explanations_block_counts() {
        let codebook = test_codebook();
        let shots: Vec<Shot> = (0..3)
            .map(|i| {
                let mut s = Shot::plain(format!("example {i}"), Label::Positive, format!("t{i}"));
                s.explanation = Some(format!("explanation {i}"));
                s
            })
            .collect();
        let spec = PromptSpec::baseline(0, vec![], 0)
            .with_shots(shots)
            .apply_explanations()
            .unwrap();
        let rendered = render(&spec, &codebook, "UNIQUE-TARGET", Placement::SingleUser).unwrap();
        let content = &rendered.messages[0].content;
        assert_eq!(content.matches("Explanation:").count(), 3);
        assert_eq!(content.matches("UNIQUE-TARGET").count(), 1);
        assert!(content.trim_end().ends_with("Text: UNIQUE-TARGET"));
    }

    #[test]
    fn decorators_commute_in_rendering() {
        let codebook = test_codebook();
        let base = PromptSpec::baseline(0, vec![0], 0);
        let a = base
            .apply_persona("You are a helper.")
            .unwrap()
            .apply_cot(CotMode::ZeroShot)
            .unwrap();
        let b = base
            .apply_cot(CotMode::ZeroShot)
            .unwrap()
            .apply_persona("You are a helper.")
            .unwrap();
        let ra = render(&a, &codebook, "t", Placement::SingleUser).unwrap();
        let rb = render(&b, &codebook, "t", Placement::SingleUser).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn index_out_of_range_is_codebook_error() {
        let codebook = test_codebook();
        let spec = PromptSpec::baseline(99, vec![], 0);
        assert!(matches!(
            render(&spec, &codebook, "t", Placement::SingleUser),
            Err(Error::Codebook(_))
        ));
    }

    #[test]
    fn parse_plain_cases() {
        let p = parse_label("Yes.", AnswerFormat::PlainYesNo);
        assert_eq!(p.outcome, ParseOutcome::Positive);
        assert_eq!(p.matched_span.as_deref(), Some("Yes"));

        let p = parse_label("no", AnswerFormat::PlainYesNo);
        assert_eq!(p.outcome, ParseOutcome::Negative);

        // first standalone token wins
        let p = parse_label("yes it is sad, so no", AnswerFormat::PlainYesNo);
        assert_eq!(p.outcome, ParseOutcome::Positive);

        // "no" inside words does not count
        let p = parse_label("Nothing notable here", AnswerFormat::PlainYesNo);
        assert_eq!(p.outcome, ParseOutcome::ParseFailure);

        let p = parse_label("The text is ambiguous.", AnswerFormat::PlainYesNo);
        assert_eq!(p.outcome, ParseOutcome::ParseFailure);
        assert_eq!(p.raw, "The text is ambiguous.");
    }

    #[test]
    fn parse_final_answer_cases() {
        let p = parse_label(
            "step 3 shows growth. Final Answer: Yes",
            AnswerFormat::FinalAnswer,
        );
        assert_eq!(p.outcome, ParseOutcome::Positive);

        // last marker wins
        let p = parse_label(
            "Final Answer: Yes... wait. Final Answer: No",
            AnswerFormat::FinalAnswer,
        );
        assert_eq!(p.outcome, ParseOutcome::Negative);

        // bracketed token
        let p = parse_label("Final Answer: [No]", AnswerFormat::FinalAnswer);
        assert_eq!(p.outcome, ParseOutcome::Negative);

        // no marker at all
        let p = parse_label("Yes", AnswerFormat::FinalAnswer);
        assert_eq!(p.outcome, ParseOutcome::ParseFailure);
    }

    #[test]
    fn body_text_excludes_shots_and_target() {
        let codebook = test_codebook();
        let spec = PromptSpec::baseline(0, vec![1, 0], 1)
            .with_shots(vec![Shot::plain("shot text", Label::Positive, "t1")]);
        let body = body_text(&spec, &codebook).unwrap();
        assert!(!body.contains("shot text"));
        assert!(!body.contains("Text:"));
        assert!(body.contains("- Exclude passing negative feelings"));
    }

    #[test]
    fn raw_prompt_renders_with_shots() {
        let raw = RawPrompt::new("Decide whether the text is grateful. Respond Yes or No.")
            .with_shots(vec![Shot::plain("thanks a lot", Label::Positive, "t1")]);
        let rendered = render_raw(&raw, "whatever", Placement::SingleUser);
        let content = &rendered.messages[0].content;
        assert!(content.starts_with("Decide whether"));
        assert!(content.contains("Text: thanks a lot\nAnswer: Yes"));
        assert!(content.trim_end().ends_with("Text: whatever"));
    }
}

#[cfg(test)]
mod parse_properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // Round trip: a completion equal to a valid answer string in the
        // spec's format parses back to that label.
        #[test]
        fn parse_round_trip(positive in prop::bool::ANY, fa in prop::bool::ANY) {
            let token = if positive { "Yes" } else { "No" };
            let (raw, format) = if fa {
                (format!("Final Answer: {token}"), AnswerFormat::FinalAnswer)
            } else {
                (token.to_string(), AnswerFormat::PlainYesNo)
            };
            let parsed = parse_label(&raw, format);
            let expected = if positive { ParseOutcome::Positive } else { ParseOutcome::Negative };
            prop_assert_eq!(parsed.outcome, expected);
        }

        #[test]
        fn parse_never_panics(raw in ".*", fa in prop::bool::ANY) {
            let format = if fa { AnswerFormat::FinalAnswer } else { AnswerFormat::PlainYesNo };
            let parsed = parse_label(&raw, format);
            if parsed.outcome == ParseOutcome::ParseFailure {
                prop_assert_eq!(parsed.raw, raw);
            }
        }
    }
}
