//! Extraction methods: zero-shot prompting, single-stage RAG over abstracts
//! or full-text chunks, and two-stage retrieval (publication selection by
//! abstract, then per-publication chunk retrieval and one responder call per
//! selected publication).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GroundTruthDataset;
use crate::embedding::{EmbedRole, Embedder, EmbedderConfig};
use crate::http::{JsonClient, RetryPolicy, TransportError};
use crate::mutation::{parse_mutation, Mutation};
use crate::parallel::bounded_map;
use crate::vectorstore::{Query, ScoredEntry, VectorStore};
use crate::{Error, Result};

/// Separator placed between retrieved pieces in a rendered context.
pub const CONTEXT_SEPARATOR: &str = "\n\n---\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template `{id}`: unresolved placeholder `{{{name}}}`")]
    UnknownPlaceholder { id: String, name: String },
    #[error("template `{id}`: unbalanced brace at byte {at}")]
    UnbalancedBrace { id: String, at: usize },
    #[error("template `{id}`: {message}")]
    Invalid { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    Rag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Virus,
    Protein,
    Context,
}

/// Prompt with `{virus}`, `{protein}` and (RAG only) `{context}`
/// placeholders. Literal braces are written `{{` and `}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TemplateSource", into = "TemplateSource")]
pub struct PromptTemplate {
    template_id: String,
    mode: PromptMode,
    body: String,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TemplateSource {
    template_id: String,
    mode: PromptMode,
    body: String,
}

impl TryFrom<TemplateSource> for PromptTemplate {
    type Error = TemplateError;

    fn try_from(s: TemplateSource) -> Result<Self, TemplateError> {
        PromptTemplate::new(&s.template_id, s.mode, &s.body)
    }
}

impl From<PromptTemplate> for TemplateSource {
    fn from(t: PromptTemplate) -> Self {
        TemplateSource {
            template_id: t.template_id,
            mode: t.mode,
            body: t.body,
        }
    }
}

const DEFAULT_ZERO_SHOT: &str = "\
You are an expert virologist. Identify mutations in the {protein} protein of {virus} \
that have been reported to affect virus-host interaction (for example host adaptation, \
virulence, replication or transmission).

Write every mutation as <original amino acid><position><changed amino acid> using \
one-letter amino-acid codes, for example A123C. Report amino-acid substitutions only.

Respond with a JSON object with exactly two fields:
{{\"mutations\": [\"A123C\", ...], \"reasoning\": \"how each mutation affects virus-host interaction\"}}
";

const DEFAULT_RAG: &str = "\
You are an expert virologist. Identify mutations in the {protein} protein of {virus} \
that have been reported to affect virus-host interaction (for example host adaptation, \
virulence, replication or transmission).

Use only the information in the context below. Retrieve the correct mutations from \
within the context and do not add mutations that the context does not mention. If the \
context reports no such mutations, return an empty list.

Write every mutation as <original amino acid><position><changed amino acid> using \
one-letter amino-acid codes, for example A123C. Report amino-acid substitutions only.

Respond with a JSON object with exactly two fields:
{{\"mutations\": [\"A123C\", ...], \"reasoning\": \"how each mutation affects virus-host interaction, citing the publication tags\"}}

Context:
{context}
";

impl PromptTemplate {
    pub fn new(template_id: &str, mode: PromptMode, body: &str) -> Result<Self, TemplateError> {
        let segments = parse_template(template_id, body)?;
        let contexts = segments.iter().filter(|s| **s == Segment::Context).count();
        let invalid = |message: &str| TemplateError::Invalid {
            id: template_id.to_string(),
            message: message.to_string(),
        };
        match mode {
            PromptMode::ZeroShot if contexts > 0 => return Err(invalid("zero-shot templates must not use {context}")),
            PromptMode::Rag if contexts != 1 => return Err(invalid("rag templates must use {context} exactly once")),
            _ => {}
        }
        Ok(Self {
            template_id: template_id.to_string(),
            mode,
            body: body.to_string(),
            segments,
        })
    }

    pub fn default_zero_shot() -> Self {
        Self::new("default-zero-shot", PromptMode::ZeroShot, DEFAULT_ZERO_SHOT).expect("built-in template is valid")
    }

    pub fn default_rag() -> Self {
        Self::new("default-rag", PromptMode::Rag, DEFAULT_RAG).expect("built-in template is valid")
    }

    pub fn template_id(&self) -> &str {
        &self.template_id
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Substitute placeholders. A context is required exactly when the
    /// template is in RAG mode; an empty context renders an empty block.
    pub fn render(&self, virus: &str, protein: &str, context: Option<&Context>) -> Result<String, TemplateError> {
        match (self.mode, context) {
            (PromptMode::ZeroShot, Some(_)) => {
                return Err(TemplateError::Invalid {
                    id: self.template_id.clone(),
                    message: "zero-shot template rendered with a context".into(),
                })
            }
            (PromptMode::Rag, None) => {
                return Err(TemplateError::Invalid {
                    id: self.template_id.clone(),
                    message: "rag template rendered without a context".into(),
                })
            }
            _ => {}
        }
        Ok(self.fill(virus, protein, context.map_or("", |c| c.rendered())))
    }

    fn fill(&self, virus: &str, protein: &str, context: &str) -> String {
        let mut out = String::with_capacity(self.body.len() + context.len());
        for s in &self.segments {
            match s {
                Segment::Text(t) => out.push_str(t),
                Segment::Virus => out.push_str(virus),
                Segment::Protein => out.push_str(protein),
                Segment::Context => out.push_str(context),
            }
        }
        out
    }
}

fn parse_template(id: &str, body: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < body.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                text.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                text.push('}');
                i += 2;
            }
            b'{' => {
                let end = body[i..].find('}').map(|e| i + e).ok_or(TemplateError::UnbalancedBrace {
                    id: id.to_string(),
                    at: i,
                })?;
                let seg = match &body[i + 1..end] {
                    "virus" => Segment::Virus,
                    "protein" => Segment::Protein,
                    "context" => Segment::Context,
                    other => {
                        return Err(TemplateError::UnknownPlaceholder {
                            id: id.to_string(),
                            name: other.to_string(),
                        })
                    }
                };
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(seg);
                i = end + 1;
            }
            b'}' => {
                return Err(TemplateError::UnbalancedBrace {
                    id: id.to_string(),
                    at: i,
                })
            }
            _ => {
                let ch = body[i..].chars().next().unwrap();
                text.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    Ok(segments)
}

/// One retrieved piece of text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPiece {
    pub pub_id: String,
    pub entry_id: String,
    pub chunk_index: u32,
    pub distance: f64,
    #[serde(skip)]
    pub text: String,
}

/// Retrieved pieces in ascending distance, and their concatenation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Context {
    pieces: Vec<ContextPiece>,
    rendered: String,
}

impl Context {
    pub fn from_scored(mut hits: Vec<ScoredEntry>) -> Self {
        hits.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| a.entry.entry_id.cmp(&b.entry.entry_id))
        });
        let pieces: Vec<ContextPiece> = hits
            .into_iter()
            .map(|h| ContextPiece {
                pub_id: h.entry.pub_id,
                entry_id: h.entry.entry_id,
                chunk_index: h.entry.chunk_index,
                distance: h.distance,
                text: h.entry.text,
            })
            .collect();
        let rendered = pieces
            .iter()
            .map(|p| format!("[{}]\n{}", p.pub_id, p.text))
            .collect::<Vec<_>>()
            .join(CONTEXT_SEPARATOR);
        Self { pieces, rendered }
    }

    pub fn pieces(&self) -> &[ContextPiece] {
        &self.pieces
    }

    pub fn rendered(&self) -> &str {
        &self.rendered
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pub_ids(&self) -> BTreeSet<String> {
        self.pieces.iter().map(|p| p.pub_id.clone()).collect()
    }
}

/// What text is embedded to query the datastores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// The rendered prompt (with an empty context block).
    #[default]
    Prompt,
    /// `mutations in {protein} of {virus}`.
    Short,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Top-k for the single-stage baselines.
    pub k: usize,
    /// Publications selected by abstract.
    pub k_a: usize,
    /// Chunks retrieved per selected publication.
    pub k_c: usize,
    /// Distance threshold over abstracts.
    pub t_abstracts: f64,
    /// Distance threshold over full-text chunks.
    pub t_chunks: f64,
    pub query_mode: QueryMode,
    /// Concurrent responder calls in the two-stage method.
    pub jobs: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 150,
            k_a: 160,
            k_c: 160,
            t_abstracts: 0.5,
            t_chunks: 0.5,
            query_mode: QueryMode::Prompt,
            jobs: 1,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("k", self.k), ("k_a", self.k_a), ("k_c", self.k_c), ("jobs", self.jobs)] {
            if v == 0 {
                return Err(Error::InvalidParameters(format!("{name} must be at least 1")));
            }
        }
        for (name, t) in [("t_abstracts", self.t_abstracts), ("t_chunks", self.t_chunks)] {
            if !(0.0..=2.0).contains(&t) {
                return Err(Error::InvalidParameters(format!("{name} = {t} is outside [0, 2]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "zero-shot")]
    ZeroShot,
    #[serde(rename = "rag-abstracts")]
    RagAbstracts,
    #[serde(rename = "rag-fulltext")]
    RagFulltext,
    #[serde(rename = "villa")]
    Villa,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ZeroShot, Method::RagAbstracts, Method::RagFulltext, Method::Villa];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero-shot",
            Method::RagAbstracts => "rag-abstracts",
            Method::RagFulltext => "rag-fulltext",
            Method::Villa => "villa",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected zero-shot, rag-abstracts, rag-fulltext or villa)"))
    }
}

/// Reference to a context piece as recorded in results (text omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceRef {
    pub pub_id: String,
    pub entry_id: String,
    pub distance: f64,
}

impl From<&ContextPiece> for PieceRef {
    fn from(p: &ContextPiece) -> Self {
        Self {
            pub_id: p.pub_id.clone(),
            entry_id: p.entry_id.clone(),
            distance: p.distance,
        }
    }
}

/// Outcome for one publication selected by the two-stage method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicationResult {
    pub pub_id: String,
    /// Distance of the publication's abstract to the query.
    pub abstract_distance: f64,
    pub mutations: BTreeSet<Mutation>,
    pub reasoning: String,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub context: Vec<PieceRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub protein: String,
    pub method: Method,
    pub mutations: BTreeSet<Mutation>,
    pub reasoning: String,
    pub raw_response: String,
    /// Items of the `mutations` array that did not parse.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejects: Vec<String>,
    /// Malformed-response or per-call failure description.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_publication: Option<Vec<PublicationResult>>,
    pub context_pub_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<PieceRef>,
}

#[derive(Debug, Error)]
pub enum ResponderError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("chat response has no message content")]
    EmptyChoice,
    #[error("responder `{name}` failed: {message}")]
    Backend { name: String, message: String },
}

/// What a responder receives. Remote backends only look at `prompt`; test
/// doubles may use the structured fields.
#[derive(Debug, Clone, Copy)]
pub struct ResponderRequest<'a> {
    pub prompt: &'a str,
    pub virus: &'a str,
    pub protein: &'a str,
    pub context: Option<&'a Context>,
}

pub trait Responder: Send + Sync {
    fn descriptor(&self) -> ResponderDescriptor;

    fn respond(&self, request: &ResponderRequest<'_>) -> Result<String, ResponderError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponderDescriptor {
    pub name: String,
    pub backend: String,
}

/// Chat endpoint: `POST {model, messages: [{role, content}]}` answered by
/// `{choices: [{message: {content}}]}`.
#[derive(Debug, Clone)]
pub struct RemoteResponder {
    url: String,
    model: String,
    pub temperature: Option<f64>,
    client: JsonClient,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

impl RemoteResponder {
    pub fn new(url: &str, model: &str, api_key: Option<String>) -> Self {
        Self::with_retry(url, model, api_key, RetryPolicy::default())
    }

    pub fn with_retry(url: &str, model: &str, api_key: Option<String>, retry: RetryPolicy) -> Self {
        Self {
            url: url.to_string(),
            model: model.to_string(),
            temperature: Some(0.0),
            client: JsonClient::new(api_key, retry, Duration::from_secs(600)),
        }
    }
}

impl Responder for RemoteResponder {
    fn descriptor(&self) -> ResponderDescriptor {
        ResponderDescriptor {
            name: self.model.clone(),
            backend: format!("remote:{}", self.url),
        }
    }

    fn respond(&self, request: &ResponderRequest<'_>) -> Result<String, ResponderError> {
        let resp: ChatResponse = self.client.post(
            &self.url,
            &ChatRequest {
                model: &self.model,
                messages: [ChatMessage {
                    role: "user",
                    content: request.prompt,
                }],
                temperature: self.temperature,
            },
        )?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or(ResponderError::EmptyChoice)
    }
}

type ScriptFn = dyn Fn(&ResponderRequest<'_>) -> Result<String, ResponderError> + Send + Sync;

/// Test double driven by a closure.
pub struct ScriptedResponder {
    name: String,
    script: Box<ScriptFn>,
}

impl ScriptedResponder {
    pub fn new(
        name: &str,
        script: impl Fn(&ResponderRequest<'_>) -> Result<String, ResponderError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            script: Box::new(script),
        }
    }

    /// Always answers with `response`.
    pub fn fixed(name: &str, response: &str) -> Self {
        let response = response.to_string();
        Self::new(name, move |_| Ok(response.clone()))
    }
}

impl Responder for ScriptedResponder {
    fn descriptor(&self) -> ResponderDescriptor {
        ResponderDescriptor {
            name: self.name.clone(),
            backend: "mock:scripted".into(),
        }
    }

    fn respond(&self, request: &ResponderRequest<'_>) -> Result<String, ResponderError> {
        (self.script)(request)
    }
}

/// Emits exactly the ground-truth mutations of the requested protein that
/// occur verbatim (as whole tokens) in its context. Without a context it
/// emits nothing.
#[derive(Debug, Clone)]
pub struct OracleResponder {
    truth: BTreeMap<String, BTreeSet<Mutation>>,
}

impl OracleResponder {
    pub fn new(gt: &GroundTruthDataset) -> Self {
        let truth = gt
            .proteins()
            .map(|p| (p.to_string(), gt.protein(p).unwrap().mutations.clone()))
            .collect();
        Self { truth }
    }

    /// Mutations the oracle would emit for `protein` given `text`.
    pub fn find(&self, protein: &str, text: &str) -> BTreeSet<Mutation> {
        let Some(truth) = self.truth.get(protein) else {
            return BTreeSet::new();
        };
        let wanted: BTreeMap<String, Mutation> = truth.iter().map(|m| (m.to_string(), *m)).collect();
        text.split(|c: char| !c.is_alphanumeric())
            .filter_map(|tok| wanted.get(tok).copied())
            .collect()
    }
}

impl Responder for OracleResponder {
    fn descriptor(&self) -> ResponderDescriptor {
        ResponderDescriptor {
            name: "oracle".into(),
            backend: "mock:oracle".into(),
        }
    }

    fn respond(&self, request: &ResponderRequest<'_>) -> Result<String, ResponderError> {
        let found = request
            .context
            .map(|c| self.find(request.protein, c.rendered()))
            .unwrap_or_default();
        let mutations: Vec<String> = found.iter().map(Mutation::to_string).collect();
        let reasoning = if mutations.is_empty() {
            "no mutations for this protein appear in the context".to_string()
        } else {
            format!("mutations found verbatim in the context: {}", mutations.join(", "))
        };
        Ok(serde_json::json!({ "mutations": mutations, "reasoning": reasoning }).to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed response: no JSON object with a `mutations` array and a `reasoning` string")]
pub struct MalformedResponse;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedResponse {
    pub mutations: BTreeSet<Mutation>,
    pub reasoning: String,
    pub rejects: Vec<String>,
}

/// Find the first JSON object that has a `mutations` array and a `reasoning`
/// string, anywhere in `raw` (bare, fenced, or embedded in prose). Items
/// that are not valid substitutions are returned as rejects.
pub fn parse_response(raw: &str) -> Result<ParsedResponse, MalformedResponse> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<serde_json::Value>();
        let Some(Ok(serde_json::Value::Object(obj))) = stream.next() else {
            continue;
        };
        let (Some(serde_json::Value::Array(items)), Some(serde_json::Value::String(reasoning))) =
            (obj.get("mutations"), obj.get("reasoning"))
        else {
            continue;
        };
        let mut parsed = ParsedResponse {
            reasoning: reasoning.clone(),
            ..ParsedResponse::default()
        };
        for item in items {
            match item {
                serde_json::Value::String(s) => match parse_mutation(s) {
                    Ok(m) => {
                        parsed.mutations.insert(m);
                    }
                    Err(_) => parsed.rejects.push(s.clone()),
                },
                other => parsed.rejects.push(other.to_string()),
            }
        }
        return Ok(parsed);
    }
    Err(MalformedResponse)
}

/// Prompt templates used by the methods.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub zero_shot: PromptTemplate,
    pub rag: PromptTemplate,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            zero_shot: PromptTemplate::default_zero_shot(),
            rag: PromptTemplate::default_rag(),
        }
    }
}

/// Everything a method needs for one run.
pub struct Pipeline<'a> {
    pub embedder: &'a dyn Embedder,
    pub responder: &'a dyn Responder,
    pub abstracts: Option<&'a VectorStore>,
    pub fulltext: Option<&'a VectorStore>,
    pub config: RetrievalConfig,
    pub templates: Templates,
}

struct Outcome {
    parsed: ParsedResponse,
    raw: String,
    error: Option<String>,
}

impl<'a> Pipeline<'a> {
    pub fn run(&self, method: Method, virus: &str, protein: &str) -> Result<ExtractionResult> {
        match method {
            Method::ZeroShot => self.zero_shot(virus, protein),
            Method::RagAbstracts => self.rag_abstracts(virus, protein),
            Method::RagFulltext => self.rag_fulltext(virus, protein),
            Method::Villa => self.villa(virus, protein),
        }
    }

    /// Text embedded to query the datastores.
    pub fn query_text(&self, virus: &str, protein: &str) -> String {
        match self.config.query_mode {
            QueryMode::Prompt => self.templates.rag.fill(virus, protein, ""),
            QueryMode::Short => format!("mutations in {protein} of {virus}"),
        }
    }

    fn store(&self, which: &'static str) -> Result<&'a VectorStore> {
        let store = match which {
            "abstracts" => self.abstracts,
            _ => self.fulltext,
        }
        .ok_or_else(|| Error::InvalidParameters(format!("the {which} datastore is required")))?;
        if store.dim() != self.embedder.dim() {
            return Err(Error::InvalidParameters(format!(
                "{which} datastore has dimension {}, embedder has {}",
                store.dim(),
                self.embedder.dim()
            )));
        }
        Ok(store)
    }

    fn ask(&self, virus: &str, protein: &str, context: Option<&Context>) -> Result<Outcome, ResponderError> {
        let tpl = if context.is_some() {
            &self.templates.rag
        } else {
            &self.templates.zero_shot
        };
        let prompt = tpl
            .render(virus, protein, context)
            .expect("template mode checked at construction");
        let raw = self.responder.respond(&ResponderRequest {
            prompt: &prompt,
            virus,
            protein,
            context,
        })?;
        Ok(match parse_response(&raw) {
            Ok(parsed) => Outcome {
                parsed,
                raw,
                error: None,
            },
            Err(e) => Outcome {
                parsed: ParsedResponse::default(),
                raw,
                error: Some(e.to_string()),
            },
        })
    }

    fn result(&self, method: Method, protein: &str, outcome: Outcome, context: Option<&Context>) -> ExtractionResult {
        ExtractionResult {
            protein: protein.to_string(),
            method,
            mutations: outcome.parsed.mutations,
            reasoning: outcome.parsed.reasoning,
            raw_response: outcome.raw,
            rejects: outcome.parsed.rejects,
            error: outcome.error,
            per_publication: None,
            context_pub_ids: context.map(Context::pub_ids).unwrap_or_default(),
            context: context
                .map(|c| c.pieces().iter().map(PieceRef::from).collect())
                .unwrap_or_default(),
        }
    }

    pub fn zero_shot(&self, virus: &str, protein: &str) -> Result<ExtractionResult> {
        let outcome = self.ask(virus, protein, None)?;
        Ok(self.result(Method::ZeroShot, protein, outcome, None))
    }

    fn single_stage(&self, method: Method, which: &'static str, virus: &str, protein: &str) -> Result<ExtractionResult> {
        self.config.validate()?;
        let store = self.store(which)?;
        let query = self.embedder.embed_as(&self.query_text(virus, protein), EmbedRole::Query)?;
        let threshold = match method {
            Method::RagAbstracts => self.config.t_abstracts,
            _ => self.config.t_chunks,
        };
        let hits = store.top_k(Query {
            vector: &query,
            k: self.config.k,
            threshold,
            pub_id: None,
        })?;
        let context = Context::from_scored(hits);
        let outcome = self.ask(virus, protein, Some(&context))?;
        Ok(self.result(method, protein, outcome, Some(&context)))
    }

    pub fn rag_abstracts(&self, virus: &str, protein: &str) -> Result<ExtractionResult> {
        self.single_stage(Method::RagAbstracts, "abstracts", virus, protein)
    }

    pub fn rag_fulltext(&self, virus: &str, protein: &str) -> Result<ExtractionResult> {
        self.single_stage(Method::RagFulltext, "fulltext", virus, protein)
    }

    /// Two-stage retrieval: select `k_a` publications by abstract, then for
    /// each one retrieve its `k_c` nearest chunks and query the responder
    /// with that publication's context alone. Per-publication failures are
    /// recorded in the publication's slot.
    pub fn villa(&self, virus: &str, protein: &str) -> Result<ExtractionResult> {
        self.config.validate()?;
        let abstracts = self.store("abstracts")?;
        let fulltext = self.store("fulltext")?;
        let query = self.embedder.embed_as(&self.query_text(virus, protein), EmbedRole::Query)?;

        let selected = abstracts.top_k(Query {
            vector: &query,
            k: self.config.k_a,
            threshold: self.config.t_abstracts,
            pub_id: None,
        })?;

        let per_pub: Vec<PublicationResult> = bounded_map(&selected, self.config.jobs, |hit| {
            let pub_id = hit.entry.pub_id.as_str();
            let chunks = fulltext.top_k(Query {
                vector: &query,
                k: self.config.k_c,
                threshold: self.config.t_chunks,
                pub_id: Some(pub_id),
            });
            let context = match chunks {
                Ok(c) => Context::from_scored(c),
                Err(e) => return failed(hit, Vec::new(), e.to_string()),
            };
            let refs = context.pieces().iter().map(PieceRef::from).collect();
            match self.ask(virus, protein, Some(&context)) {
                Ok(o) => PublicationResult {
                    pub_id: pub_id.to_string(),
                    abstract_distance: hit.distance,
                    mutations: o.parsed.mutations,
                    reasoning: o.parsed.reasoning,
                    raw_response: o.raw,
                    rejects: o.parsed.rejects,
                    error: o.error,
                    context: refs,
                },
                Err(e) => failed(hit, refs, e.to_string()),
            }
        });

        let mutations = per_pub.iter().flat_map(|p| p.mutations.iter().copied()).collect();
        let tagged = |f: fn(&PublicationResult) -> &str| {
            per_pub
                .iter()
                .map(|p| format!("[{}] {}", p.pub_id, f(p)))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let errors: Vec<String> = per_pub
            .iter()
            .filter_map(|p| p.error.as_ref().map(|e| format!("{}: {e}", p.pub_id)))
            .collect();
        Ok(ExtractionResult {
            protein: protein.to_string(),
            method: Method::Villa,
            mutations,
            reasoning: tagged(|p| &p.reasoning),
            raw_response: tagged(|p| &p.raw_response),
            rejects: per_pub.iter().flat_map(|p| p.rejects.iter().cloned()).collect(),
            error: (!errors.is_empty()).then(|| errors.join("; ")),
            context_pub_ids: per_pub.iter().map(|p| p.pub_id.clone()).collect(),
            context: per_pub.iter().flat_map(|p| p.context.iter().cloned()).collect(),
            per_publication: Some(per_pub),
        })
    }
}

fn failed(hit: &ScoredEntry, context: Vec<PieceRef>, error: String) -> PublicationResult {
    PublicationResult {
        pub_id: hit.entry.pub_id.clone(),
        abstract_distance: hit.distance,
        mutations: BTreeSet::new(),
        reasoning: String::new(),
        raw_response: String::new(),
        rejects: Vec::new(),
        error: Some(error),
        context,
    }
}

/// One (protein, iteration) cell of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub protein: String,
    pub iteration: u32,
    pub result: ExtractionResult,
}

/// Everything needed to score or review a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub virus: String,
    pub config: RetrievalConfig,
    pub template_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<EmbedderConfig>,
    pub responder: ResponderDescriptor,
    pub iterations: u32,
    pub started_at: String,
    pub finished_at: String,
    pub records: Vec<RunRecord>,
}

/// Run `method` for every protein, `iterations` times. `clock` supplies
/// timestamps so tests can pin them.
pub fn run_experiment(
    pipeline: &Pipeline<'_>,
    method: Method,
    virus: &str,
    proteins: &[String],
    iterations: u32,
    clock: &dyn Fn() -> String,
) -> Result<RunManifest> {
    let started_at = clock();
    let mut records = Vec::with_capacity(proteins.len() * iterations as usize);
    for iteration in 0..iterations {
        for protein in proteins {
            let result = pipeline.run(method, virus, protein)?;
            records.push(RunRecord {
                protein: protein.clone(),
                iteration,
                result,
            });
        }
    }
    let template_id = match method {
        Method::ZeroShot => pipeline.templates.zero_shot.template_id(),
        _ => pipeline.templates.rag.template_id(),
    };
    Ok(RunManifest {
        method,
        virus: virus.to_string(),
        config: pipeline.config,
        template_id: template_id.to_string(),
        embedder: (method != Method::ZeroShot).then(|| pipeline.embedder.config()),
        responder: pipeline.responder.descriptor(),
        iterations,
        started_at,
        finished_at: clock(),
        records,
    })
}
