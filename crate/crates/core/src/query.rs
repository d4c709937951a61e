//! Question routing, token-budgeted retrieval over both stores, and
//! multiple-choice answering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{count_tokens, TokenBudget};
use crate::gateway::schema::{parse_checked, McqAnswer, RouteDecision};
use crate::gateway::{EmbedKind, Embedder, Gateway, GatewayError, GenerationRequest, Message, Part, SchemaId};
use crate::pipeline::{Engine, PipelineConfig};
use crate::text_memory::TextMemory;
use crate::visual_store::{StoreError, StoreItem, VisualStore};

pub const VISUAL_K: usize = 20;
pub const TEXT_K: usize = 20;

const ANSWER_INSTRUCTIONS: &str = "Answer the user's multiple-choice question about their own life using the \
memory items provided. Pick exactly one choice letter and give a one-sentence rationale.";

const ROUTE_INSTRUCTIONS: &str = "Decide which memory should answer the question: visual_only for questions about \
people, pets or objects seen in the user's photos, text_only for questions about what was said, both when each \
could contribute.";

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    VisualOnly,
    TextOnly,
    Both,
}

impl Route {
    pub fn uses_visual(self) -> bool {
        self != Route::TextOnly
    }

    pub fn uses_text(self) -> bool {
        self != Route::VisualOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChoiceKey {
    A,
    B,
    C,
    D,
}

impl ChoiceKey {
    pub const ALL: [ChoiceKey; 4] = [ChoiceKey::A, ChoiceKey::B, ChoiceKey::C, ChoiceKey::D];
}

impl fmt::Display for ChoiceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for ChoiceKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(ChoiceKey::A),
            "B" => Ok(ChoiceKey::B),
            "C" => Ok(ChoiceKey::C),
            "D" => Ok(ChoiceKey::D),
            other => Err(format!("not a choice key: {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceKind {
    Text,
    ImagePath,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub kind: ChoiceKind,
    pub value: String,
    /// Visual prompt standing in for an image file when the file is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

impl Choice {
    pub fn text(value: impl Into<String>) -> Self {
        Self { kind: ChoiceKind::Text, value: value.into(), prompt: None }
    }

    pub fn image(path: impl Into<String>, prompt: Option<String>) -> Self {
        Self { kind: ChoiceKind::ImagePath, value: path.into(), prompt }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub question: String,
    pub choices: BTreeMap<ChoiceKey, Choice>,
    #[serde(default = "text_question")]
    pub question_type: QuestionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached_prompt: Option<String>,
}

fn text_question() -> QuestionType {
    QuestionType::Text
}

impl Query {
    pub fn validate(&self) -> Result<(), QueryError> {
        if self.question.trim().is_empty() {
            return Err(QueryError::InvalidQuery("empty question".into()));
        }
        if self.choices.len() != 4 {
            return Err(QueryError::InvalidQuery(format!("expected 4 choices, got {}", self.choices.len())));
        }
        if let Some((k, _)) = self.choices.iter().find(|(_, c)| c.value.trim().is_empty()) {
            return Err(QueryError::InvalidQuery(format!("choice {k} is empty")));
        }
        if self.question_type == QuestionType::Image
            && self.attached_image.is_none()
            && !self.choices.values().any(|c| c.kind == ChoiceKind::ImagePath)
        {
            return Err(QueryError::InvalidQuery("image question without image choices or an attached image".into()));
        }
        Ok(())
    }

    fn has_images(&self) -> bool {
        self.attached_image.is_some() || self.choices.values().any(|c| c.kind == ChoiceKind::ImagePath)
    }

    /// Question plus text choices, the string used for retrieval.
    pub fn search_text(&self) -> String {
        let mut s = self.question.clone();
        for c in self.choices.values().filter(|c| c.kind == ChoiceKind::Text) {
            s.push(' ');
            s.push_str(&c.value);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    VisualStore,
    TextStore,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::VisualStore => "visual memory",
            Origin::TextStore => "text memory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleItem {
    pub text: String,
    pub origin: Origin,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBundle {
    pub items: Vec<BundleItem>,
    pub total_tokens: u64,
    pub budget: TokenBudget,
}

impl RetrievalBundle {
    pub fn empty(budget: TokenBudget) -> Self {
        Self { items: Vec::new(), total_tokens: 0, budget }
    }

    /// Items taken as-is with no packing; used by the reference settings,
    /// which report their size instead of enforcing a budget.
    pub fn unbounded(items: Vec<BundleItem>) -> Self {
        let total_tokens = items.iter().map(|i| count_tokens(&i.text)).sum();
        Self { items, total_tokens, budget: TokenBudget::unlimited() }
    }

    pub fn within_budget(&self) -> bool {
        self.total_tokens <= self.budget.limit
            && self.total_tokens == self.items.iter().map(|i| count_tokens(&i.text)).sum::<u64>()
    }
}

static VISUAL_CUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?ix)\b(
            photos?|pictures?|pics?|images?|snapshots?|selfies?|shown|showed|
            looks?\ like|looked\ like|wearing|recogni[sz]e|point\ out|which\ of\ these|
            who\ (is|was|were)|whose|mine|belongs?|owns?|owned|appearance
        )\b",
    )
    .expect("visual cue pattern")
});

static DIALOGUE_CUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(said|say|says|told|tell|mention(ed)?|talk(ed)?|discuss(ed)?|chat(ted)?|asked)\b")
        .expect("dialogue cue pattern")
});

/// Rule routing. Visual, identity or possession cues (or any image in the
/// query) select the visual store, joined by text memory when the question
/// also asks about what was said; everything else goes to text memory.
pub fn classify_by_rules(query: &Query) -> Route {
    let visual = query.has_images() || VISUAL_CUE.is_match(&query.question);
    let dialogue = DIALOGUE_CUE.is_match(&query.question);
    match (visual, dialogue) {
        (true, true) => Route::Both,
        (true, false) => Route::VisualOnly,
        _ => Route::TextOnly,
    }
}

/// Routes with rules, or with a RouteDecision call when the backend is a live model.
pub fn classify_query(gateway: &dyn Gateway, query: &Query) -> Result<Route, QueryError> {
    query.validate()?;
    if !gateway.routes_with_model() {
        return Ok(classify_by_rules(query));
    }
    let request = GenerationRequest::new(
        SchemaId::RouteDecision,
        vec![
            Message::system(ROUTE_INSTRUCTIONS),
            Message::user(vec![Part::text(format!("Question: {}", query.question)), Part::text(render_choices(query))]),
        ],
    );
    let doc = gateway.generate_structured(&request)?;
    let decision: RouteDecision = parse_checked(&doc)
        .map_err(|detail| GatewayError::NonConformingOutput { schema: SchemaId::RouteDecision, detail })?;
    Ok(decision.route)
}

/// Narrows a route to the stores a configuration actually builds, falling
/// back to the other store when the routed one is disabled.
pub fn effective_route(route: Route, config: &PipelineConfig) -> Route {
    match (config.enable_text, config.enable_visual) {
        (true, true) => route,
        (true, false) => Route::TextOnly,
        _ => Route::VisualOnly,
    }
}

/// Greedy skip-and-continue packing: items in order, each taken only if it
/// still fits.
pub fn pack(candidates: Vec<BundleItem>, budget: TokenBudget) -> RetrievalBundle {
    let mut bundle = RetrievalBundle::empty(budget);
    for item in candidates {
        let cost = count_tokens(&item.text);
        if bundle.total_tokens + cost <= budget.limit {
            bundle.total_tokens += cost;
            bundle.items.push(item);
        }
    }
    bundle
}

fn terms(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'' && c != '-')
        .map(|t| t.trim_matches(|c: char| c == '\'' || c == '-'))
        .map(|t| t.strip_suffix("'s").unwrap_or(t))
        .filter(|t| t.chars().count() > 1)
        .map(str::to_string)
        .collect()
}

/// Gathers candidates from the routed stores and packs them into the budget.
pub fn retrieve(
    text: &TextMemory,
    visual: &VisualStore,
    embedder: &dyn Embedder,
    query: &Query,
    route: Route,
    budget: TokenBudget,
) -> Result<RetrievalBundle, QueryError> {
    query.validate()?;
    if budget.limit == 0 {
        return Ok(RetrievalBundle::empty(budget));
    }
    let search = query.search_text();
    let mut candidates: Vec<BundleItem> = Vec::new();

    if route.uses_visual() && !visual.is_empty() {
        let q = embedder.embed(EmbedKind::Text, &search)?;
        let mut best: BTreeMap<StoreItem, (f64, String)> = BTreeMap::new();
        let mut offer = |item: StoreItem, score: f64, text: String| {
            let slot = best.entry(item).or_insert((f64::NEG_INFINITY, String::new()));
            if score > slot.0 {
                *slot = (score, text);
            }
        };
        for hit in visual.rank_free_text(&q)?.into_iter().take(VISUAL_K) {
            offer(hit.item, hit.score, hit.text);
        }
        let mut names = terms(&search);
        names.extend(query.choices.values().filter(|c| c.kind == ChoiceKind::Text).map(|c| c.value.trim().to_string()));
        for name in names {
            for hit in visual.exact_entity_hits(&name) {
                offer(hit.item, hit.score, hit.text);
            }
        }
        candidates.extend(best.into_values().map(|(score, text)| BundleItem { text, origin: Origin::VisualStore, score }));

        let attached = query.attached_image.as_ref().map(|path| ("Attached".to_string(), path, query.attached_prompt.as_ref()));
        let options = query
            .choices
            .iter()
            .filter(|(_, c)| c.kind == ChoiceKind::ImagePath)
            .map(|(k, c)| (format!("Option {k}"), &c.value, c.prompt.as_ref()));
        for (label, path, prompt) in attached.into_iter().chain(options) {
            let Some(prompt) = prompt.filter(|p| !p.trim().is_empty()) else {
                tracing::debug!(%path, "image choice has no visual description; skipped for matching");
                continue;
            };
            let e = embedder.embed(EmbedKind::ImagePrompt, prompt)?;
            if let Some((id, sim)) = visual.match_any_kind(&e)? {
                let card = visual.verbalize_entity(&id).unwrap_or_default();
                candidates.push(BundleItem { text: format!("{label} image matches: {card}"), origin: Origin::VisualStore, score: sim });
            }
        }
    }

    if route.uses_text() && !text.is_empty() {
        let q = embedder.embed(EmbedKind::Text, &search)?;
        let hits = text.search_by_embedding(&q, TEXT_K).map_err(|e| QueryError::InvalidQuery(e.to_string()))?;
        candidates.extend(hits.into_iter().map(|h| BundleItem {
            text: format!("[{}] {}", h.item.created_at, h.item.text),
            origin: Origin::TextStore,
            score: h.score,
        }));
    }

    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.origin.cmp(&b.origin))
            .then_with(|| a.text.cmp(&b.text))
    });
    candidates.dedup_by(|a, b| a.text == b.text);
    Ok(pack(candidates, budget))
}

fn render_choices(query: &Query) -> String {
    let mut s = String::from("Choices:");
    for (k, c) in &query.choices {
        match c.kind {
            ChoiceKind::Text => s.push_str(&format!("\n{k}. {}", c.value)),
            ChoiceKind::ImagePath => s.push_str(&format!("\n{k}. [image: {}]", c.value)),
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqOutcome {
    pub choice: Option<ChoiceKey>,
    pub rationale: String,
    /// The answering call failed; the question counts as incorrect.
    pub error_flag: bool,
}

/// The McqAnswer request for a query and bundle.
pub fn answer_request(query: &Query, bundle: &RetrievalBundle) -> GenerationRequest {
    let mut parts = vec![Part::text(format!("Question: {}", query.question)), Part::text(render_choices(query))];
    // Image options travel as the image itself when we have it, else its surrogate.
    for (k, c) in &query.choices {
        if c.kind != ChoiceKind::ImagePath {
            continue;
        }
        let part = if Path::new(&c.value).is_file() {
            Part::image_path(c.value.clone())
        } else if let Some(prompt) = &c.prompt {
            Part::image_prompt(prompt.clone())
        } else {
            continue;
        };
        parts.push(Part::text(format!("Image for option {k}:")));
        parts.push(part);
    }
    if bundle.items.is_empty() {
        parts.push(Part::text("Memory: (none)"));
    }
    for (i, item) in bundle.items.iter().enumerate() {
        parts.push(Part::text(format!("Memory item {} ({}): {}", i + 1, item.origin, item.text)));
    }
    if let Some(path) = &query.attached_image {
        parts.push(match &query.attached_prompt {
            _ if Path::new(path).is_file() => Part::image_path(path.clone()),
            Some(prompt) => Part::image_prompt(prompt.clone()),
            None => Part::text(format!("Attached image: {path}")),
        });
    }
    GenerationRequest::new(SchemaId::McqAnswer, vec![Message::system(ANSWER_INSTRUCTIONS), Message::user(parts)])
}

/// Never fails: any gateway error is folded into an incorrect, flagged answer.
pub fn answer_mcq(gateway: &dyn Gateway, query: &Query, bundle: &RetrievalBundle) -> McqOutcome {
    let flagged = |rationale: String| McqOutcome { choice: None, rationale, error_flag: true };
    let doc = match gateway.generate_structured(&answer_request(query, bundle)) {
        Ok(doc) => doc,
        Err(e) => return flagged(e.to_string()),
    };
    match parse_checked::<McqAnswer>(&doc) {
        Ok(a) => McqOutcome { choice: Some(a.choice), rationale: a.rationale, error_flag: false },
        Err(detail) => flagged(detail),
    }
}

/// Answer record for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub route: Route,
    pub bundle: RetrievalBundle,
    pub outcome: McqOutcome,
}

impl Engine {
    /// Route, retrieve and answer against this engine's current memory.
    pub fn answer(&self, query: &Query, budget: TokenBudget) -> Result<Answer, QueryError> {
        let gw = self.gateway().as_ref();
        let route = effective_route(classify_query(gw, query)?, self.config());
        let bundle = retrieve(self.text_memory(), self.visual_store(), gw, query, route, budget)?;
        let outcome = answer_mcq(gw, query, &bundle);
        Ok(Answer { route, bundle, outcome })
    }

    /// Retrieval only, for previews.
    pub fn preview(&self, query: &Query, budget: TokenBudget) -> Result<(Route, RetrievalBundle), QueryError> {
        let gw = self.gateway().as_ref();
        let route = effective_route(classify_query(gw, query)?, self.config());
        Ok((route, retrieve(self.text_memory(), self.visual_store(), gw, query, route, budget)?))
    }
}
