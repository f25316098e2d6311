//! The dialogue graph: scripted prompts, node kinds and transitions.
//!
//! A scenario is loaded once from its JSON document and is immutable
//! afterwards, so it can be shared across any number of sessions.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Identifier of a node within one scenario.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Open-ended prompt, answered in free text and checked by the relevance gate.
    Reflection,
    /// Prompt answered by picking one of a fixed list of options.
    Decision,
    /// System-only line; advances without learner input.
    Statement,
    /// Closing line; the session completes here.
    Terminal,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Reflection => "reflection",
            NodeKind::Decision => "decision",
            NodeKind::Statement => "statement",
            NodeKind::Terminal => "terminal",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionOption {
    pub option_id: String,
    pub label: String,
    pub target: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExemplarVerdict {
    #[serde(rename = "YES")]
    Yes,
    #[serde(rename = "NO")]
    No,
}

impl ExemplarVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            ExemplarVerdict::Yes => "YES",
            ExemplarVerdict::No => "NO",
        }
    }
}

/// One few-shot example for the relevance gate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateExemplar {
    pub sample_response: String,
    pub verdict: ExemplarVerdict,
    pub reasoning: String,
}

/// One few-shot example for follow-up generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenExemplar {
    pub situation: String,
    pub followup: String,
}

/// Per-node gate metadata: what to look for and how to judge it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub field_desc: String,
    pub exemplars: Vec<GateExemplar>,
    #[serde(default)]
    pub gen_exemplars: Vec<GenExemplar>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub prompt_text: String,
    pub tts_enabled: bool,
    pub options: Vec<DecisionOption>,
    pub next: Option<NodeId>,
    pub gate: Option<GateSpec>,
}

impl ScenarioNode {
    pub fn option(&self, option_id: &str) -> Option<&DecisionOption> {
        self.options.iter().find(|o| o.option_id == option_id)
    }

    /// Every transition target named by this node, in declaration order.
    pub fn targets(&self) -> impl Iterator<Item = &NodeId> {
        self.options.iter().map(|o| &o.target).chain(self.next.iter())
    }

    /// Kind-dependent field presence. Content checks (empty lists, reachability)
    /// belong to [`validate`].
    fn shape_problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let has_options = !self.options.is_empty();
        match self.kind {
            NodeKind::Decision => {
                if self.next.is_some() {
                    problems.push("decision node must not declare `next`".to_owned());
                }
                if self.gate.is_some() {
                    problems.push("decision node must not declare `gate`".to_owned());
                }
            }
            NodeKind::Reflection => {
                if self.next.is_none() {
                    problems.push("reflection node requires `next`".to_owned());
                }
                if self.gate.is_none() {
                    problems.push("reflection node requires `gate`".to_owned());
                }
                if has_options {
                    problems.push("reflection node must not declare `options`".to_owned());
                }
            }
            NodeKind::Statement => {
                if self.next.is_none() {
                    problems.push("statement node requires `next`".to_owned());
                }
                if has_options {
                    problems.push("statement node must not declare `options`".to_owned());
                }
                if self.gate.is_some() {
                    problems.push("statement node must not declare `gate`".to_owned());
                }
            }
            NodeKind::Terminal => {
                if self.next.is_some() || has_options {
                    problems.push("terminal node must not declare `next` or `options`".to_owned());
                }
                if self.gate.is_some() {
                    problems.push("terminal node must not declare `gate`".to_owned());
                }
            }
        }
        problems
    }
}

/// Node body as it appears in the document; the id is the map key.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    kind: NodeKind,
    prompt_text: String,
    tts_enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    options: Option<Vec<DecisionOption>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    next: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gate: Option<GateSpec>,
}

/// `nodes` keyed by id. Kept as an ordered list so that duplicate keys in
/// the document survive loading and can be reported by the validator.
struct NodeList(Vec<(NodeId, NodeDoc)>);

impl<'de> Deserialize<'de> for NodeList {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct NodeListVisitor;

        impl<'de> Visitor<'de> for NodeListVisitor {
            type Value = NodeList;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object mapping node ids to nodes")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<NodeList, A::Error> {
                let mut nodes = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some((id, node)) = map.next_entry::<NodeId, NodeDoc>()? {
                    nodes.push((id, node));
                }
                Ok(NodeList(nodes))
            }
        }

        deserializer.deserialize_map(NodeListVisitor)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    id: String,
    version: String,
    start_node: NodeId,
    nodes: NodeList,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("schema error{}: {reason}", node.as_ref().map(|n| format!(" in node `{n}`")).unwrap_or_default())]
    Schema { node: Option<NodeId>, reason: String },
}

/// Errors from [`Scenario::next_node`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("node `{node}` has no option `{option_id}`")]
    UnknownOption { node: NodeId, option_id: String },
    #[error("outcome does not fit {kind} node `{node}`")]
    KindMismatch { node: NodeId, kind: NodeKind },
    #[error("node `{0}` declares no transition")]
    NoTransition(NodeId),
}

/// What happened at a node, as far as the graph is concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome<'a> {
    Advance,
    OptionChoice(&'a str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub id: String,
    pub version: String,
    pub start_node: NodeId,
    nodes: Vec<ScenarioNode>,
    index: HashMap<NodeId, usize>,
}

impl Scenario {
    /// Builds a scenario from nodes in document order. When ids repeat, lookups
    /// resolve to the first occurrence; [`validate`] reports the repeat.
    pub fn new(
        id: impl Into<String>,
        version: impl Into<String>,
        start_node: NodeId,
        nodes: Vec<ScenarioNode>,
    ) -> Self {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            index.entry(node.id.clone()).or_insert(i);
        }
        Self {
            id: id.into(),
            version: version.into(),
            start_node,
            nodes,
            index,
        }
    }

    pub fn node(&self, id: &str) -> Option<&ScenarioNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Nodes in document order (including duplicates, if any).
    pub fn nodes(&self) -> &[ScenarioNode] {
        &self.nodes
    }

    /// Consumes the scenario, returning its nodes for editing.
    pub fn into_nodes(self) -> Vec<ScenarioNode> {
        self.nodes
    }

    /// Pure transition function of the scripted graph.
    pub fn next_node(&self, current: &str, outcome: Outcome<'_>) -> Result<&NodeId, TransitionError> {
        let node = self
            .node(current)
            .ok_or_else(|| TransitionError::UnknownNode(NodeId::from(current)))?;
        match (node.kind, outcome) {
            (NodeKind::Decision, Outcome::OptionChoice(option_id)) => node
                .option(option_id)
                .map(|o| &o.target)
                .ok_or_else(|| TransitionError::UnknownOption {
                    node: node.id.clone(),
                    option_id: option_id.to_owned(),
                }),
            (NodeKind::Reflection | NodeKind::Statement, Outcome::Advance) => node
                .next
                .as_ref()
                .ok_or_else(|| TransitionError::NoTransition(node.id.clone())),
            (kind, _) => Err(TransitionError::KindMismatch {
                node: node.id.clone(),
                kind,
            }),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization is infallible")
    }
}

impl Serialize for Scenario {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        struct Nodes<'a>(&'a [ScenarioNode]);

        impl Serialize for Nodes<'_> {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                let mut map = serializer.serialize_map(Some(self.0.len()))?;
                for node in self.0 {
                    let doc = NodeDoc {
                        kind: node.kind,
                        prompt_text: node.prompt_text.clone(),
                        tts_enabled: node.tts_enabled,
                        options: (!node.options.is_empty()).then(|| node.options.clone()),
                        next: node.next.clone(),
                        gate: node.gate.clone(),
                    };
                    map.serialize_entry(&node.id, &doc)?;
                }
                map.end()
            }
        }

        let mut map = serializer.serialize_map(Some(4))?;
        map.serialize_entry("id", &self.id)?;
        map.serialize_entry("version", &self.version)?;
        map.serialize_entry("start_node", &self.start_node)?;
        map.serialize_entry("nodes", &Nodes(&self.nodes))?;
        map.end()
    }
}

/// Parses a scenario document and checks kind-dependent field presence.
pub fn load_scenario(document: &str) -> Result<Scenario, LoadError> {
    let doc: ScenarioDoc = serde_json::from_str(document).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => LoadError::Schema {
            node: None,
            reason: e.to_string(),
        },
        _ => LoadError::Parse {
            line: e.line(),
            reason: e.to_string(),
        },
    })?;

    let mut nodes = Vec::with_capacity(doc.nodes.0.len());
    for (id, body) in doc.nodes.0 {
        if body.kind == NodeKind::Decision && body.options.is_none() {
            return Err(LoadError::Schema {
                node: Some(id),
                reason: "decision node requires `options`".to_owned(),
            });
        }
        let node = ScenarioNode {
            id,
            kind: body.kind,
            prompt_text: body.prompt_text,
            tts_enabled: body.tts_enabled,
            options: body.options.unwrap_or_default(),
            next: body.next,
            gate: body.gate,
        };
        if let Some(reason) = node.shape_problems().into_iter().next() {
            return Err(LoadError::Schema {
                node: Some(node.id),
                reason,
            });
        }
        nodes.push(node);
    }
    Ok(Scenario::new(doc.id, doc.version, doc.start_node, nodes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<NodeId>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub errors: Vec<Finding>,
    pub warnings: Vec<Finding>,
}

impl ValidationReport {
    pub fn has_error(&self, code: &str) -> bool {
        self.errors.iter().any(|f| f.code == code)
    }

    pub fn error_codes(&self) -> Vec<&str> {
        self.errors.iter().map(|f| f.code.as_str()).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} error(s), {} warning(s)",
            if self.ok { "ok" } else { "invalid" },
            self.errors.len(),
            self.warnings.len()
        )?;
        for (level, list) in [("error", &self.errors), ("warning", &self.warnings)] {
            for finding in list {
                match &finding.node_id {
                    Some(node) => writeln!(f, "  {level} [{}] {node}: {}", finding.code, finding.message)?,
                    None => writeln!(f, "  {level} [{}] {}", finding.code, finding.message)?,
                }
            }
        }
        Ok(())
    }
}

pub mod codes {
    pub const START_MISSING: &str = "START_MISSING";
    pub const DUPLICATE_ID: &str = "DUPLICATE_ID";
    pub const KIND_SHAPE: &str = "KIND_SHAPE";
    pub const DANGLING_TRANSITION: &str = "DANGLING_TRANSITION";
    pub const EMPTY_OPTIONS: &str = "EMPTY_OPTIONS";
    pub const DUPLICATE_OPTION: &str = "DUPLICATE_OPTION";
    pub const EMPTY_GATE: &str = "EMPTY_GATE";
    pub const EMPTY_REASONING: &str = "EMPTY_REASONING";
    pub const NO_TERMINAL: &str = "NO_TERMINAL";
    pub const UNREACHABLE_NODE: &str = "UNREACHABLE_NODE";
    pub const NO_TERMINAL_PATH: &str = "NO_TERMINAL_PATH";
    // warnings
    pub const EMPTY_PROMPT: &str = "EMPTY_PROMPT";
    pub const FEW_EXEMPLARS: &str = "FEW_EXEMPLARS";
    pub const MANY_EXEMPLARS: &str = "MANY_EXEMPLARS";
    pub const ONE_SIDED_EXEMPLARS: &str = "ONE_SIDED_EXEMPLARS";
}

/// Recommended exemplar range per reflection gate.
pub const RECOMMENDED_EXEMPLARS: std::ops::RangeInclusive<usize> = 5..=10;

/// Reports every structural defect of the graph. Never fails.
pub fn validate(s: &Scenario) -> ValidationReport {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let push = |list: &mut Vec<Finding>, code: &str, node: Option<&NodeId>, message: String| {
        list.push(Finding {
            code: code.to_owned(),
            node_id: node.cloned(),
            message,
        })
    };

    if !s.contains(s.start_node.as_str()) {
        push(
            &mut errors,
            codes::START_MISSING,
            Some(&s.start_node),
            "start_node is not defined".to_owned(),
        );
    }

    let mut seen = HashSet::new();
    for node in &s.nodes {
        if !seen.insert(&node.id) {
            push(&mut errors, codes::DUPLICATE_ID, Some(&node.id), "node id defined more than once".to_owned());
        }
    }

    for node in &s.nodes {
        for problem in node.shape_problems() {
            push(&mut errors, codes::KIND_SHAPE, Some(&node.id), problem);
        }
        for target in node.targets() {
            if !s.contains(target.as_str()) {
                push(
                    &mut errors,
                    codes::DANGLING_TRANSITION,
                    Some(&node.id),
                    format!("transition targets undefined node `{target}`"),
                );
            }
        }
        if node.prompt_text.trim().is_empty() {
            push(&mut warnings, codes::EMPTY_PROMPT, Some(&node.id), "prompt_text is blank".to_owned());
        }
        if node.kind == NodeKind::Decision {
            if node.options.is_empty() {
                push(&mut errors, codes::EMPTY_OPTIONS, Some(&node.id), "decision node has no options".to_owned());
            }
            let mut ids = HashSet::new();
            for opt in &node.options {
                if !ids.insert(opt.option_id.as_str()) {
                    push(
                        &mut errors,
                        codes::DUPLICATE_OPTION,
                        Some(&node.id),
                        format!("option id `{}` repeated", opt.option_id),
                    );
                }
            }
        }
        if node.kind == NodeKind::Reflection {
            if let Some(gate) = &node.gate {
                if gate.field_desc.trim().is_empty() || gate.exemplars.is_empty() {
                    push(
                        &mut errors,
                        codes::EMPTY_GATE,
                        Some(&node.id),
                        "gate needs a field description and at least one exemplar".to_owned(),
                    );
                } else if !RECOMMENDED_EXEMPLARS.contains(&gate.exemplars.len()) {
                    let code = if gate.exemplars.len() < *RECOMMENDED_EXEMPLARS.start() {
                        codes::FEW_EXEMPLARS
                    } else {
                        codes::MANY_EXEMPLARS
                    };
                    push(
                        &mut warnings,
                        code,
                        Some(&node.id),
                        format!("{} exemplars; 5-10 recommended", gate.exemplars.len()),
                    );
                }
                if gate.exemplars.iter().any(|e| e.reasoning.trim().is_empty()) {
                    push(
                        &mut errors,
                        codes::EMPTY_REASONING,
                        Some(&node.id),
                        "every exemplar needs a reasoning string".to_owned(),
                    );
                }
                let yes = gate.exemplars.iter().filter(|e| e.verdict == ExemplarVerdict::Yes).count();
                if !gate.exemplars.is_empty() && (yes == 0 || yes == gate.exemplars.len()) {
                    push(
                        &mut warnings,
                        codes::ONE_SIDED_EXEMPLARS,
                        Some(&node.id),
                        "exemplars show only one verdict".to_owned(),
                    );
                }
            }
        }
    }

    let terminals: Vec<&NodeId> = s
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Terminal)
        .map(|n| &n.id)
        .collect();
    if terminals.is_empty() {
        push(&mut errors, codes::NO_TERMINAL, None, "scenario has no terminal node".to_owned());
    }

    // Forward reachability from the start.
    let reachable = reachable_from(s, &s.start_node);
    if s.contains(s.start_node.as_str()) {
        for node in &s.nodes {
            if !reachable.contains(node.id.as_str()) {
                push(
                    &mut errors,
                    codes::UNREACHABLE_NODE,
                    Some(&node.id),
                    "node cannot be reached from start_node".to_owned(),
                );
            }
        }
    }

    // Backward reachability from every terminal: nodes outside this set are
    // stuck (dead ends or cycles without a terminal exit).
    if !terminals.is_empty() {
        let mut reverse: HashMap<&str, Vec<&str>> = HashMap::new();
        for node in &s.nodes {
            for target in node.targets() {
                reverse.entry(target.as_str()).or_default().push(node.id.as_str());
            }
        }
        let mut can_finish: HashSet<&str> = terminals.iter().map(|t| t.as_str()).collect();
        let mut queue: VecDeque<&str> = can_finish.iter().copied().collect();
        while let Some(id) = queue.pop_front() {
            for &pred in reverse.get(id).map(Vec::as_slice).unwrap_or_default() {
                if can_finish.insert(pred) {
                    queue.push_back(pred);
                }
            }
        }
        let mut reported = HashSet::new();
        for node in &s.nodes {
            if !can_finish.contains(node.id.as_str()) && reported.insert(node.id.as_str()) {
                push(
                    &mut errors,
                    codes::NO_TERMINAL_PATH,
                    Some(&node.id),
                    "no terminal node is reachable from here".to_owned(),
                );
            }
        }
    }

    ValidationReport {
        ok: errors.is_empty(),
        errors,
        warnings,
    }
}

/// Node ids reachable from `start` by following transitions (including `start`).
pub fn reachable_from<'a>(s: &'a Scenario, start: &NodeId) -> HashSet<&'a str> {
    let mut seen = HashSet::new();
    let Some(first) = s.node(start.as_str()) else {
        return seen;
    };
    let mut queue = VecDeque::from([first]);
    seen.insert(first.id.as_str());
    while let Some(node) = queue.pop_front() {
        for target in node.targets() {
            if let Some(next) = s.node(target.as_str()) {
                if seen.insert(next.id.as_str()) {
                    queue.push_back(next);
                }
            }
        }
    }
    seen
}

/// Node ids grouped by the prefix before the first underscore
/// (`goals_what` belongs to `goals`).
pub fn node_groups(s: &Scenario) -> BTreeMap<&str, Vec<&NodeId>> {
    let mut groups: BTreeMap<&str, Vec<&NodeId>> = BTreeMap::new();
    for node in &s.nodes {
        let prefix = node.id.as_str().split('_').next().unwrap_or_default();
        groups.entry(prefix).or_default().push(&node.id);
    }
    groups
}
