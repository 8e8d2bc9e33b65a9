//! Metric definitions and prompt rendering.
//!
//! A metric is a prompt template over input-node variables plus a class
//! specification. Templates use `{name}` placeholders; substitution is a
//! single position-based pass, so placeholder-looking text inside variable
//! values is never re-expanded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classmap::{
    self, class_set_with_mapping, ClassKind, ClassMapError, ClassMapping, ClassSet, Preflight,
};
use crate::tokenizer::Vocabulary;

/// Which slice of an application trace the metric consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    TraceIo,
    LlmSpan,
    LlmSpanTools,
    /// Reserved; no variable contract defined yet.
    RetrieverSpan,
    /// Reserved; no variable contract defined yet.
    FullTrace,
}

impl NodeType {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::TraceIo => "trace_io",
            NodeType::LlmSpan => "llm_span",
            NodeType::LlmSpanTools => "llm_span_tools",
            NodeType::RetrieverSpan => "retriever_span",
            NodeType::FullTrace => "full_trace",
        }
    }

    /// Variables a template of this node type may reference.
    pub fn allowed_variables(self) -> &'static [&'static str] {
        match self {
            NodeType::TraceIo => &["input", "output"],
            NodeType::LlmSpan => &["input", "output", "question", "answer", "documents"],
            NodeType::LlmSpanTools => {
                &["input", "output", "tools", "question", "answer", "documents"]
            }
            NodeType::RetrieverSpan | NodeType::FullTrace => &[],
        }
    }

    pub fn is_reserved(self) -> bool {
        matches!(self, NodeType::RetrieverSpan | NodeType::FullTrace)
    }
}

impl std::str::FromStr for NodeType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trace_io" => Ok(NodeType::TraceIo),
            "llm_span" => Ok(NodeType::LlmSpan),
            "llm_span_tools" => Ok(NodeType::LlmSpanTools),
            "retriever_span" => Ok(NodeType::RetrieverSpan),
            "full_trace" => Ok(NodeType::FullTrace),
            other => Err(format!("unknown node type {other:?}")),
        }
    }
}

/// Values for the variables a template may reference.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeVariables {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tools: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub documents: Option<String>,
}

impl NodeVariables {
    pub fn get(&self, name: &str) -> Option<&str> {
        match name {
            "input" => self.input.as_deref(),
            "output" => self.output.as_deref(),
            "tools" => self.tools.as_deref(),
            "question" => self.question.as_deref(),
            "answer" => self.answer.as_deref(),
            "documents" => self.documents.as_deref(),
            _ => None,
        }
    }

    /// Names of all fields that are present.
    pub fn present(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (name, value) in [
            ("input", &self.input),
            ("output", &self.output),
            ("tools", &self.tools),
            ("question", &self.question),
            ("answer", &self.answer),
            ("documents", &self.documents),
        ] {
            if value.is_some() {
                out.push(name);
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("unknown placeholder {{{name}}} in template")]
    UnknownPlaceholder { name: String },
    #[error("placeholder {{{name}}} is not legal for node type {node_type}")]
    IllegalPlaceholder { name: String, node_type: &'static str },
    #[error("node type {node_type} is reserved and not implemented")]
    ReservedNodeType { node_type: &'static str },
    #[error("{kind} metric requires {expected} class words, got {got}")]
    ClassCount {
        kind: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("class words fail single-token preflight and no mapping is present: {details}")]
    PreflightFailed { details: String },
    #[error("class mapping error: {0}")]
    ClassMap(#[from] ClassMapError),
    #[error("multilabel metric requires a label_template containing {{label}}")]
    MissingLabelTemplate,
    #[error("missing variable {{{name}}} for render")]
    MissingVariable { name: String },
    #[error("variable {name:?} provided but not used by the template")]
    UnusedVariable { name: String },
    #[error("variable {name:?} is empty")]
    EmptyVariable { name: String },
    #[error("spec file parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("template contains the block terminator line `>>>` and cannot be serialized")]
    TemplateTerminator,
    #[error("threshold {got} outside (0, 1)")]
    BadThreshold { got: f64 },
}

/// A metric definition as authored: template text, classes, adapter binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub node_type: NodeType,
    pub class_kind: ClassKind,
    pub class_words: Vec<String>,
    pub template: String,
    /// Class label -> single-token surface mapping (fallback symbols).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mapping: Option<ClassMapping>,
    /// Adapter this metric evaluates with; defaults to the metric name.
    pub adapter_ref: String,
    /// Decision threshold for binary and multilabel metrics.
    pub threshold: f64,
    /// Multilabel only: suffix template containing `{label}`, rendered once
    /// per label and appended to the base prompt.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_template: Option<String>,
}

impl MetricSpec {
    pub fn new(
        name: &str,
        node_type: NodeType,
        class_kind: ClassKind,
        class_words: &[&str],
        template: &str,
    ) -> Self {
        MetricSpec {
            name: name.to_string(),
            node_type,
            class_kind,
            class_words: class_words.iter().map(|s| s.to_string()).collect(),
            template: template.to_string(),
            mapping: None,
            adapter_ref: name.to_string(),
            threshold: 0.5,
            label_template: None,
        }
    }
}

/// One piece of a parsed template.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Literal(String),
    Placeholder(String),
}

/// Split a template into literal and placeholder segments. `{word}` where
/// `word` is lowercase ascii is treated as a placeholder; anything else is
/// literal text.
pub fn parse_template(template: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(close) = template[i + 1..].find('}') {
                let name = &template[i + 1..i + 1 + close];
                if !name.is_empty()
                    && name
                        .bytes()
                        .all(|b| b.is_ascii_lowercase() || b == b'_')
                {
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Placeholder(name.to_string()));
                    i += close + 2;
                    continue;
                }
            }
        }
        let ch_len = template[i..].chars().next().map(char::len_utf8).unwrap_or(1);
        literal.push_str(&template[i..i + ch_len]);
        i += ch_len;
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

/// A validated metric: parsed template plus resolved class tokens.
#[derive(Debug, Clone)]
pub struct CompiledMetric {
    pub spec: MetricSpec,
    pub segments: Vec<Segment>,
    pub class_set: ClassSet,
    /// Multilabel only: parsed label template.
    pub label_segments: Option<Vec<Segment>>,
    /// Multilabel only: the true/false token pair each label is scored with.
    pub pair_set: Option<ClassSet>,
}

/// Class pair used for each label of a multilabel metric.
pub const MULTILABEL_PAIR: [&str; 2] = ["true", "false"];

/// Validate a spec against a vocabulary: template placeholders legal for the
/// node type, class words single-token (or mapped), counts consistent with
/// the class kind.
pub fn validate_spec(spec: &MetricSpec, vocab: &Vocabulary) -> Result<CompiledMetric, SpecError> {
    if spec.node_type.is_reserved() {
        return Err(SpecError::ReservedNodeType {
            node_type: spec.node_type.as_str(),
        });
    }
    if !(spec.threshold > 0.0 && spec.threshold < 1.0) {
        return Err(SpecError::BadThreshold {
            got: spec.threshold,
        });
    }
    let segments = parse_template(&spec.template);
    check_placeholders(&segments, spec.node_type)?;

    match spec.class_kind {
        ClassKind::Binary => {
            if spec.class_words.len() != 2 {
                return Err(SpecError::ClassCount {
                    kind: "binary",
                    expected: "exactly 2",
                    got: spec.class_words.len(),
                });
            }
        }
        ClassKind::Multiclass => {
            if spec.class_words.len() < 2 {
                return Err(SpecError::ClassCount {
                    kind: "multiclass",
                    expected: "at least 2",
                    got: spec.class_words.len(),
                });
            }
        }
        ClassKind::Multilabel => {
            if spec.class_words.is_empty() {
                return Err(SpecError::ClassCount {
                    kind: "multilabel",
                    expected: "at least 1",
                    got: 0,
                });
            }
        }
    }

    let (class_set, label_segments, pair_set) = match spec.class_kind {
        ClassKind::Multilabel => {
            let label_template = spec
                .label_template
                .as_deref()
                .ok_or(SpecError::MissingLabelTemplate)?;
            let label_segments = parse_template(label_template);
            if !label_segments
                .iter()
                .any(|s| matches!(s, Segment::Placeholder(p) if p == "label"))
            {
                return Err(SpecError::MissingLabelTemplate);
            }
            for seg in &label_segments {
                if let Segment::Placeholder(name) = seg {
                    if name != "label" {
                        return Err(SpecError::IllegalPlaceholder {
                            name: name.clone(),
                            node_type: "label_template",
                        });
                    }
                }
            }
            // every label gets scored against the same single-token pair
            let pair: Vec<String> = MULTILABEL_PAIR.iter().map(|s| s.to_string()).collect();
            let pair_set = resolve_classes(vocab, &pair, ClassKind::Binary, spec.mapping.as_ref())?;
            // the class set carries the scoring pair; labels themselves only
            // appear as prompt text in the per-label suffix
            let class_set = pair_set.with_kind(ClassKind::Multilabel);
            (class_set, Some(label_segments), Some(pair_set))
        }
        _ => {
            let set = resolve_classes(vocab, &spec.class_words, spec.class_kind, spec.mapping.as_ref())?;
            (set, None, None)
        }
    };

    Ok(CompiledMetric {
        spec: spec.clone(),
        segments,
        class_set,
        label_segments,
        pair_set,
    })
}

fn resolve_classes(
    vocab: &Vocabulary,
    class_words: &[String],
    kind: ClassKind,
    mapping: Option<&ClassMapping>,
) -> Result<ClassSet, SpecError> {
    match mapping {
        Some(m) => Ok(class_set_with_mapping(vocab, class_words, kind, m)?),
        None => match classmap::preflight_classes(vocab, class_words, kind)? {
            Preflight::Ready(set) => Ok(set),
            Preflight::FallbackNeeded(offenders) => {
                let details = offenders
                    .iter()
                    .map(|(w, n)| format!("{w:?} -> {n} tokens"))
                    .collect::<Vec<_>>()
                    .join(", ");
                Err(SpecError::PreflightFailed { details })
            }
        },
    }
}

fn check_placeholders(segments: &[Segment], node_type: NodeType) -> Result<(), SpecError> {
    let allowed = node_type.allowed_variables();
    const ALL_VARIABLES: [&str; 6] = ["input", "output", "tools", "question", "answer", "documents"];
    for seg in segments {
        if let Segment::Placeholder(name) = seg {
            if !ALL_VARIABLES.contains(&name.as_str()) {
                return Err(SpecError::UnknownPlaceholder { name: name.clone() });
            }
            if !allowed.contains(&name.as_str()) {
                return Err(SpecError::IllegalPlaceholder {
                    name: name.clone(),
                    node_type: node_type.as_str(),
                });
            }
        }
    }
    Ok(())
}

/// Placeholders used by a compiled template, in first-appearance order.
pub fn placeholders(segments: &[Segment]) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for seg in segments {
        if let Segment::Placeholder(name) = seg {
            if !out.contains(&name.as_str()) {
                out.push(name);
            }
        }
    }
    out
}

/// Render the template with the given variables: literal single-pass
/// substitution, no escaping, no truncation.
///
/// The variables must carry exactly the placeholders the template uses, each
/// non-empty; missing or extra variables are errors.
pub fn render(metric: &CompiledMetric, vars: &NodeVariables) -> Result<String, SpecError> {
    let used = placeholders(&metric.segments);
    for name in vars.present() {
        if !used.contains(&name) {
            return Err(SpecError::UnusedVariable { name: name.into() });
        }
    }
    let mut out = String::new();
    for seg in &metric.segments {
        match seg {
            Segment::Literal(text) => out.push_str(text),
            Segment::Placeholder(name) => {
                let value = vars.get(name).ok_or_else(|| SpecError::MissingVariable {
                    name: name.clone(),
                })?;
                if value.is_empty() {
                    return Err(SpecError::EmptyVariable { name: name.clone() });
                }
                out.push_str(value);
            }
        }
    }
    Ok(out)
}

/// Render the per-label suffix of a multilabel metric.
pub fn render_label_suffix(metric: &CompiledMetric, label: &str) -> Result<String, SpecError> {
    let segments = metric
        .label_segments
        .as_ref()
        .ok_or(SpecError::MissingLabelTemplate)?;
    let mut out = String::new();
    for seg in segments {
        match seg {
            Segment::Literal(text) => out.push_str(text),
            Segment::Placeholder(_) => out.push_str(label),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// spec file format
// ---------------------------------------------------------------------------

/// Serialize a spec to the metric-spec file format:
///
/// ```text
/// metric v1
/// name: context_adherence
/// node: llm_span
/// kind: binary
/// classes: true, false
/// adapter: context_adherence
/// threshold: 0.5
/// map: true -> 1, false -> 0          (only when a mapping exists)
/// label_template: <<<                  (multilabel only)
/// ...lines...
/// >>>
/// template: <<<
/// ...lines...
/// >>>
/// ```
pub fn serialize_spec(spec: &MetricSpec) -> Result<String, SpecError> {
    for block in [Some(&spec.template), spec.label_template.as_ref()]
        .into_iter()
        .flatten()
    {
        if block.lines().any(|l| l == ">>>") {
            return Err(SpecError::TemplateTerminator);
        }
    }
    let mut out = String::new();
    out.push_str("metric v1\n");
    out.push_str(&format!("name: {}\n", spec.name));
    out.push_str(&format!("node: {}\n", spec.node_type.as_str()));
    out.push_str(&format!("kind: {}\n", spec.class_kind.as_str()));
    out.push_str(&format!("classes: {}\n", spec.class_words.join(", ")));
    out.push_str(&format!("adapter: {}\n", spec.adapter_ref));
    out.push_str(&format!("threshold: {}\n", spec.threshold));
    if let Some(mapping) = &spec.mapping {
        let parts: Vec<String> = mapping
            .entries
            .iter()
            .map(|(l, s)| format!("{l} -> {s}"))
            .collect();
        out.push_str(&format!("map: {}\n", parts.join(", ")));
    }
    if let Some(label_template) = &spec.label_template {
        out.push_str("label_template: <<<\n");
        out.push_str(label_template);
        out.push_str("\n>>>\n");
    }
    out.push_str("template: <<<\n");
    out.push_str(&spec.template);
    out.push_str("\n>>>\n");
    Ok(out)
}

/// Parse the metric-spec file format. `parse(serialize(spec)) == spec`.
pub fn parse_spec(text: &str) -> Result<MetricSpec, SpecError> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.first().copied() != Some("metric v1") {
        return Err(SpecError::Parse {
            line: 1,
            message: format!("expected `metric v1` header, got {:?}", lines.first().unwrap_or(&"")),
        });
    }
    let mut name = None;
    let mut node_type = None;
    let mut class_kind = None;
    let mut class_words: Option<Vec<String>> = None;
    let mut adapter_ref = None;
    let mut threshold = 0.5f64;
    let mut mapping = None;
    let mut template = None;
    let mut label_template = None;

    let mut i = 1;
    while i < lines.len() {
        let line = lines[i];
        let lineno = i + 1;
        i += 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once(':').ok_or(SpecError::Parse {
            line: lineno,
            message: format!("expected `key: value`, got {line:?}"),
        })?;
        let value = value.trim_start_matches(' ');
        match key {
            "name" => name = Some(value.to_string()),
            "node" => {
                node_type = Some(value.parse::<NodeType>().map_err(|e| SpecError::Parse {
                    line: lineno,
                    message: e,
                })?)
            }
            "kind" => {
                class_kind = Some(value.parse::<ClassKind>().map_err(|e| SpecError::Parse {
                    line: lineno,
                    message: e,
                })?)
            }
            "classes" => {
                class_words = Some(
                    value
                        .split(',')
                        .map(|w| w.trim().to_string())
                        .filter(|w| !w.is_empty())
                        .collect(),
                )
            }
            "adapter" => adapter_ref = Some(value.to_string()),
            "threshold" => {
                threshold = value.parse().map_err(|_| SpecError::Parse {
                    line: lineno,
                    message: format!("bad threshold {value:?}"),
                })?
            }
            "map" => {
                let mut entries = Vec::new();
                for part in value.split(',') {
                    let (l, s) = part.split_once("->").ok_or(SpecError::Parse {
                        line: lineno,
                        message: format!("map entry needs `label -> surface`, got {part:?}"),
                    })?;
                    entries.push((l.trim().to_string(), s.trim().to_string()));
                }
                mapping = Some(ClassMapping { entries });
            }
            "template" | "label_template" => {
                if value != "<<<" {
                    return Err(SpecError::Parse {
                        line: lineno,
                        message: format!("{key} must open a `<<<` block"),
                    });
                }
                let start = i;
                let end = loop {
                    match lines.get(i) {
                        Some(&">>>") => break i,
                        Some(_) => i += 1,
                        None => {
                            return Err(SpecError::Parse {
                                line: lineno,
                                message: format!("{key} block never closed with `>>>`"),
                            })
                        }
                    }
                };
                let block = lines[start..end].join("\n");
                i = end + 1;
                if key == "template" {
                    template = Some(block);
                } else {
                    label_template = Some(block);
                }
            }
            other => {
                return Err(SpecError::Parse {
                    line: lineno,
                    message: format!("unknown key {other:?}"),
                })
            }
        }
    }

    fn require<T>(field: Option<T>, what: &str, line: usize) -> Result<T, SpecError> {
        field.ok_or_else(|| SpecError::Parse {
            line,
            message: format!("missing required key {what:?}"),
        })
    }
    let last = lines.len();
    let name: String = require(name, "name", last)?;
    let adapter_ref = adapter_ref.unwrap_or_else(|| name.clone());
    Ok(MetricSpec {
        name,
        node_type: require(node_type, "node", last)?,
        class_kind: require(class_kind, "kind", last)?,
        class_words: require(class_words, "classes", last)?,
        template: require(template, "template", last)?,
        mapping,
        adapter_ref,
        threshold,
        label_template,
    })
}

/// Bundled example metric specs (illustrative toys, not calibrated prompts).
pub mod examples {
    pub const CONTEXT_ADHERENCE: &str = include_str!("../assets/metrics/context_adherence.spec");
    pub const PROMPT_INJECTION: &str = include_str!("../assets/metrics/prompt_injection.spec");
    pub const TOOL_SELECTION: &str = include_str!("../assets/metrics/tool_selection.spec");
    pub const TONE: &str = include_str!("../assets/metrics/tone.spec");
    pub const PII: &str = include_str!("../assets/metrics/pii.spec");
    pub const MARKER: &str = include_str!("../assets/metrics/marker.spec");

    pub fn all() -> [(&'static str, &'static str); 6] {
        [
            ("context_adherence", CONTEXT_ADHERENCE),
            ("prompt_injection", PROMPT_INJECTION),
            ("tool_selection", TOOL_SELECTION),
            ("tone", TONE),
            ("pii", PII),
            ("marker", MARKER),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Vocabulary;

    fn vars_qad() -> NodeVariables {
        NodeVariables {
            question: Some("where was alice born".into()),
            answer: Some("alice was born in paris".into()),
            documents: Some("alice was born in paris. alice works as a baker.".into()),
            ..Default::default()
        }
    }

    #[test]
    fn bundled_specs_validate() {
        let v = Vocabulary::toy();
        for (name, text) in examples::all() {
            let spec = parse_spec(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            validate_spec(&spec, v).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn tools_placeholder_illegal_for_llm_span() {
        let spec = MetricSpec::new(
            "bad",
            NodeType::LlmSpan,
            ClassKind::Binary,
            &["true", "false"],
            "check {tools} now. respond with true or false.",
        );
        match validate_spec(&spec, Vocabulary::toy()) {
            Err(SpecError::IllegalPlaceholder { name, .. }) => assert_eq!(name, "tools"),
            other => panic!("expected IllegalPlaceholder, got {other:?}"),
        }
    }

    #[test]
    fn context_adherence_style_spec_is_ok() {
        let spec = MetricSpec::new(
            "ca",
            NodeType::LlmSpan,
            ClassKind::Binary,
            &["true", "false"],
            "Question:\n{question}\n\nAnswer:\n{answer}\n\nDocuments:\n{documents}\n\nRespond with true or false.",
        );
        validate_spec(&spec, Vocabulary::toy()).unwrap();
    }

    #[test]
    fn binary_with_three_classes_is_error() {
        let spec = MetricSpec::new(
            "bad",
            NodeType::TraceIo,
            ClassKind::Binary,
            &["a", "b", "c"],
            "{input}",
        );
        assert!(matches!(
            validate_spec(&spec, Vocabulary::toy()),
            Err(SpecError::ClassCount { .. })
        ));
    }

    #[test]
    fn unknown_placeholder_is_spec_error() {
        let spec = MetricSpec::new(
            "bad",
            NodeType::TraceIo,
            ClassKind::Binary,
            &["true", "false"],
            "look at {widget}",
        );
        assert!(matches!(
            validate_spec(&spec, Vocabulary::toy()),
            Err(SpecError::UnknownPlaceholder { .. })
        ));
    }

    #[test]
    fn render_places_blocks_in_template_order() {
        let spec = MetricSpec::new(
            "ca",
            NodeType::LlmSpan,
            ClassKind::Binary,
            &["true", "false"],
            "Question:\n{question}\n\nAnswer:\n{answer}\n\nDocuments:\n{documents}\n\nRespond with true or false.",
        );
        let compiled = validate_spec(&spec, Vocabulary::toy()).unwrap();
        let text = render(&compiled, &vars_qad()).unwrap();
        let qi = text.find("where was alice born").unwrap();
        let ai = text.find("alice was born in paris").unwrap();
        let di = text.find("alice works as a baker").unwrap();
        assert!(qi < ai && ai < di);
        assert!(text.ends_with("Respond with true or false."));
    }

    #[test]
    fn zero_placeholder_template_returned_verbatim() {
        let spec = MetricSpec::new(
            "fixed",
            NodeType::TraceIo,
            ClassKind::Binary,
            &["true", "false"],
            "no variables here.",
        );
        let compiled = validate_spec(&spec, Vocabulary::toy()).unwrap();
        let rendered = render(&compiled, &NodeVariables::default()).unwrap();
        assert_eq!(rendered, "no variables here.");
    }

    #[test]
    fn substitution_is_single_pass() {
        // a variable containing "{answer}" must not be re-expanded
        let spec = MetricSpec::new(
            "ca",
            NodeType::LlmSpan,
            ClassKind::Binary,
            &["true", "false"],
            "D: {documents} A: {answer}",
        );
        let compiled = validate_spec(&spec, Vocabulary::toy()).unwrap();
        let vars = NodeVariables {
            documents: Some("literal {answer} stays".into()),
            answer: Some("森".into()),
            ..Default::default()
        };
        let text = render(&compiled, &vars).unwrap();
        assert_eq!(text, "D: literal {answer} stays A: 森");
    }

    #[test]
    fn missing_variable_names_placeholder() {
        let spec = MetricSpec::new(
            "m",
            NodeType::TraceIo,
            ClassKind::Binary,
            &["true", "false"],
            "text: {input}",
        );
        let compiled = validate_spec(&spec, Vocabulary::toy()).unwrap();
        match render(&compiled, &NodeVariables::default()) {
            Err(SpecError::MissingVariable { name }) => assert_eq!(name, "input"),
            other => panic!("expected MissingVariable, got {other:?}"),
        }
    }

    #[test]
    fn extra_variable_is_rejected() {
        let spec = MetricSpec::new(
            "m",
            NodeType::TraceIo,
            ClassKind::Binary,
            &["true", "false"],
            "text: {input}",
        );
        let compiled = validate_spec(&spec, Vocabulary::toy()).unwrap();
        let vars = NodeVariables {
            input: Some("x".into()),
            output: Some("y".into()),
            ..Default::default()
        };
        assert!(matches!(
            render(&compiled, &vars),
            Err(SpecError::UnusedVariable { .. })
        ));
    }

    #[test]
    fn changing_any_variable_changes_output() {
        let spec = MetricSpec::new(
            "m",
            NodeType::LlmSpan,
            ClassKind::Binary,
            &["true", "false"],
            "q {question} a {answer}",
        );
        let compiled = validate_spec(&spec, Vocabulary::toy()).unwrap();
        let base = NodeVariables {
            question: Some("one".into()),
            answer: Some("two".into()),
            ..Default::default()
        };
        let changed = NodeVariables {
            question: Some("one!".into()),
            ..base.clone()
        };
        assert_ne!(render(&compiled, &base).unwrap(), render(&compiled, &changed).unwrap());
    }

    #[test]
    fn tokenization_is_additive_for_whitespace_delimited_templates() {
        // whitespace-delimited placeholders: token count of the rendered
        // prompt equals literal tokens plus variable tokens (no truncation)
        let v = Vocabulary::toy();
        let spec = MetricSpec::new(
            "m",
            NodeType::LlmSpan,
            ClassKind::Binary,
            &["true", "false"],
            "Question:\n{question}\nAnswer:\n{answer}\nRespond with true or false.",
        );
        let compiled = validate_spec(&spec, v).unwrap();
        let vars = NodeVariables {
            question: Some("where was alice born".into()),
            answer: Some("alice was born in paris".into()),
            ..Default::default()
        };
        let rendered = render(&compiled, &vars).unwrap();
        let mut expected = 0usize;
        for seg in &compiled.segments {
            expected += match seg {
                Segment::Literal(text) => v.encode(text).len(),
                Segment::Placeholder(name) => v.encode(vars.get(name).unwrap()).len(),
            };
        }
        assert_eq!(v.encode(&rendered).len(), expected);
    }

    #[test]
    fn spec_file_round_trip_is_fixed_point() {
        for (_, text) in examples::all() {
            let spec = parse_spec(text).unwrap();
            let serialized = serialize_spec(&spec).unwrap();
            let reparsed = parse_spec(&serialized).unwrap();
            assert_eq!(spec, reparsed);
            assert_eq!(serialized, serialize_spec(&reparsed).unwrap());
        }
    }

    #[test]
    fn reserved_node_types_are_rejected() {
        let spec = MetricSpec::new(
            "r",
            NodeType::RetrieverSpan,
            ClassKind::Binary,
            &["true", "false"],
            "x",
        );
        assert!(matches!(
            validate_spec(&spec, Vocabulary::toy()),
            Err(SpecError::ReservedNodeType { .. })
        ));
    }

    #[test]
    fn preflight_failure_without_mapping_is_spec_error() {
        let corpus = "true true true true false false false false";
        let crafted = Vocabulary::train(corpus, crate::tokenizer::BYTE_TOKENS + 20);
        let spec = MetricSpec::new(
            "h",
            NodeType::TraceIo,
            ClassKind::Binary,
            &["true", "hallucinated"],
            "t: {input}",
        );
        match validate_spec(&spec, &crafted) {
            Err(SpecError::PreflightFailed { details }) => {
                assert!(details.contains("hallucinated"), "{details}");
            }
            other => panic!("expected PreflightFailed, got {other:?}"),
        }
    }
}
