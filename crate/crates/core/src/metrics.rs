//! Descriptive statistics over stored transcripts and agreement of the
//! relevance gate with human labels.
//!
//! Words are whitespace-delimited tokens. Standard deviations are sample
//! (n - 1) deviations and are absent below two observations.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SessionStatus;
use crate::relevance::Relevance;
use crate::store::TranscriptRecord;
use crate::transcript::{word_count, Origin, Speaker};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { n, mean: None, sd: None };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (n >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Self {
            n,
            mean: Some(mean),
            sd,
        }
    }

    fn of_counts(values: &[usize]) -> Self {
        Self::of(&values.iter().map(|&v| v as f64).collect::<Vec<_>>())
    }
}

/// Learner answers before and after one generated follow-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    pub session_id: String,
    pub generated_turn_index: usize,
    pub pre_len: usize,
    pub post_len: usize,
    /// `post_len / pre_len`; absent when the earlier answer was blank.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session_id: String,
    pub scenario_id: String,
    pub status: SessionStatus,
    pub total_turns: usize,
    pub system_turns: usize,
    pub learner_turns: usize,
    pub open_turns: usize,
    pub option_turns: usize,
    pub learner_words_per_open_turn: Stat,
    pub system_words_per_turn: Stat,
    pub llm_triggers: usize,
    pub followup_triggers: usize,
    pub duration_minutes: Option<f64>,
    pub expansion_events: Vec<ExpansionEvent>,
}

/// A per-session count: corpus total plus its distribution across sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub total: usize,
    pub per_session: Stat,
}

impl CountSummary {
    fn of(values: &[usize]) -> Self {
        Self {
            total: values.iter().sum(),
            per_session: Stat::of_counts(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledMetrics {
    pub sessions: usize,
    pub total_turns: CountSummary,
    pub system_turns: CountSummary,
    pub learner_turns: CountSummary,
    pub open_turns: CountSummary,
    pub option_turns: CountSummary,
    pub llm_triggers: CountSummary,
    pub followup_triggers: CountSummary,
    pub duration_minutes: Stat,
    /// Over every open learner turn in the corpus.
    pub learner_words_per_open_turn: Stat,
    /// Over every system turn in the corpus.
    pub system_words_per_turn: Stat,
    pub expansion_events: usize,
    /// Events left out of `expansion_factor` because the earlier answer was blank.
    pub zero_pre_events: usize,
    pub expansion_factor: Stat,
    pub pre_words: Stat,
    pub post_words: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sessions: Vec<SessionMetrics>,
    pub pooled: PooledMetrics,
}

fn session_metrics(record: &TranscriptRecord) -> SessionMetrics {
    let turns = &record.turns;
    let count = |pred: &dyn Fn(&crate::transcript::Turn) -> bool| turns.iter().filter(|t| pred(t)).count();

    let open_words: Vec<f64> = turns
        .iter()
        .filter(|t| t.origin == Origin::LearnerOpen)
        .map(|t| t.word_count() as f64)
        .collect();
    let system_words: Vec<f64> = turns
        .iter()
        .filter(|t| t.speaker == Speaker::System)
        .map(|t| t.word_count() as f64)
        .collect();

    // A follow-up trigger is a generated turn repeating an earlier generated
    // turn for the same scripted prompt.
    let mut followup_triggers = 0;
    let mut run = 0;
    for t in turns {
        match t.origin {
            Origin::Scripted => run = 0,
            Origin::Generated => {
                if run > 0 {
                    followup_triggers += 1;
                }
                run += 1;
            }
            _ => {}
        }
    }

    let mut expansion_events = Vec::new();
    for (i, t) in turns.iter().enumerate() {
        if t.origin != Origin::Generated || i == 0 {
            continue;
        }
        let pre = &turns[i - 1];
        if pre.origin != Origin::LearnerOpen {
            continue;
        }
        let Some(post) = turns[i + 1..].iter().find(|t| t.origin == Origin::LearnerOpen) else {
            continue;
        };
        let pre_len = word_count(&pre.text);
        let post_len = word_count(&post.text);
        expansion_events.push(ExpansionEvent {
            session_id: record.session_id.clone(),
            generated_turn_index: t.index,
            pre_len,
            post_len,
            ratio: (pre_len > 0).then(|| post_len as f64 / pre_len as f64),
        });
    }

    let duration_minutes = match (turns.first(), turns.last()) {
        (Some(first), Some(last)) => {
            Some((last.timestamp - first.timestamp).num_milliseconds() as f64 / 60_000.0)
        }
        _ => None,
    };

    let system_turns = count(&|t| t.speaker == Speaker::System);
    let learner_turns = count(&|t| t.speaker == Speaker::Learner);
    SessionMetrics {
        session_id: record.session_id.clone(),
        scenario_id: record.scenario_id.clone(),
        status: record.status,
        total_turns: system_turns + learner_turns,
        system_turns,
        learner_turns,
        open_turns: count(&|t| t.origin == Origin::LearnerOpen),
        option_turns: count(&|t| t.origin == Origin::LearnerOption),
        learner_words_per_open_turn: Stat::of(&open_words),
        system_words_per_turn: Stat::of(&system_words),
        llm_triggers: count(&|t| t.origin == Origin::Generated),
        followup_triggers,
        duration_minutes,
        expansion_events,
    }
}

/// Per-session and pooled statistics. Independent of input order: sessions
/// are processed sorted by id.
pub fn compute_metrics(records: &[TranscriptRecord]) -> MetricsReport {
    let mut sorted: Vec<&TranscriptRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    let sessions: Vec<SessionMetrics> = sorted.iter().map(|r| session_metrics(r)).collect();

    let per = |f: fn(&SessionMetrics) -> usize| CountSummary::of(&sessions.iter().map(f).collect::<Vec<_>>());

    let open_words: Vec<f64> = sorted
        .iter()
        .flat_map(|r| r.turns.iter())
        .filter(|t| t.origin == Origin::LearnerOpen)
        .map(|t| t.word_count() as f64)
        .collect();
    let system_words: Vec<f64> = sorted
        .iter()
        .flat_map(|r| r.turns.iter())
        .filter(|t| t.speaker == Speaker::System)
        .map(|t| t.word_count() as f64)
        .collect();
    let events: Vec<&ExpansionEvent> = sessions.iter().flat_map(|s| s.expansion_events.iter()).collect();
    let ratios: Vec<f64> = events.iter().filter_map(|e| e.ratio).collect();
    let durations: Vec<f64> = sessions.iter().filter_map(|s| s.duration_minutes).collect();

    let pooled = PooledMetrics {
        sessions: sessions.len(),
        total_turns: per(|s| s.total_turns),
        system_turns: per(|s| s.system_turns),
        learner_turns: per(|s| s.learner_turns),
        open_turns: per(|s| s.open_turns),
        option_turns: per(|s| s.option_turns),
        llm_triggers: per(|s| s.llm_triggers),
        followup_triggers: per(|s| s.followup_triggers),
        duration_minutes: Stat::of(&durations),
        learner_words_per_open_turn: Stat::of(&open_words),
        system_words_per_turn: Stat::of(&system_words),
        expansion_events: events.len(),
        zero_pre_events: events.iter().filter(|e| e.ratio.is_none()).count(),
        expansion_factor: Stat::of(&ratios),
        pre_words: Stat::of(&events.iter().map(|e| e.pre_len as f64).collect::<Vec<_>>()),
        post_words: Stat::of(&events.iter().map(|e| e.post_len as f64).collect::<Vec<_>>()),
    };
    MetricsReport { sessions, pooled }
}

/// Human judgment of one open learner turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub session_id: String,
    pub turn_index: usize,
    /// True when the human judged the response sufficient.
    pub human_relevant: bool,
}

/// Gate agreement with human labels. "Positive" means the gate triggered a
/// follow-up (judged the response not relevant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("gold label for session `{session_id}` turn {turn_index}: {reason}")]
pub struct DanglingLabel {
    pub session_id: String,
    pub turn_index: usize,
    pub reason: String,
}

pub fn confusion_matrix(records: &[TranscriptRecord], gold: &[GoldLabel]) -> Result<ConfusionMatrix, DanglingLabel> {
    let by_id: HashMap<&str, &TranscriptRecord> = records.iter().map(|r| (r.session_id.as_str(), r)).collect();
    let mut m = ConfusionMatrix::default();
    for label in gold {
        let dangling = |reason: &str| DanglingLabel {
            session_id: label.session_id.clone(),
            turn_index: label.turn_index,
            reason: reason.to_owned(),
        };
        let record = by_id
            .get(label.session_id.as_str())
            .ok_or_else(|| dangling("unknown session"))?;
        let turn = record
            .turns
            .get(label.turn_index)
            .ok_or_else(|| dangling("no such turn"))?;
        if turn.origin != Origin::LearnerOpen {
            return Err(dangling("not an open learner turn"));
        }
        let event = record
            .gate_event_for(label.turn_index)
            .ok_or_else(|| dangling("turn has no gate event"))?;
        match (event.final_verdict, label.human_relevant) {
            (Relevance::NotRelevant, false) => m.tp += 1,
            (Relevance::NotRelevant, true) => m.fp += 1,
            (Relevance::Relevant, true) => m.tn += 1,
            (Relevance::Relevant, false) => m.fn_ += 1,
        }
    }
    Ok(m)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.2}"))
}

fn fmt_stat(s: &Stat) -> String {
    match (s.mean, s.sd) {
        (Some(m), Some(sd)) => format!("{m:.2} ({sd:.2})"),
        (Some(m), None) => format!("{m:.2}"),
        _ => "-".to_owned(),
    }
}

/// Aligned plain-text rendering of a report.
pub fn render_table(report: &MetricsReport, confusion: Option<&ConfusionMatrix>) -> String {
    let p = &report.pooled;
    let mut rows: Vec<(String, String, String)> = vec![("Metric".into(), "Total".into(), "Mean (SD)".into())];
    let mut count_row = |name: &str, c: &CountSummary| {
        rows.push((name.to_owned(), c.total.to_string(), fmt_stat(&c.per_session)));
    };
    count_row("Dialogue turns", &p.total_turns);
    count_row("System turns", &p.system_turns);
    count_row("Learner turns", &p.learner_turns);
    count_row("  open-ended", &p.open_turns);
    count_row("  option-based", &p.option_turns);
    count_row("LLM triggers", &p.llm_triggers);
    count_row("Follow-up triggers", &p.followup_triggers);
    let mut stat_row = |name: &str, s: &Stat| rows.push((name.to_owned(), "-".into(), fmt_stat(s)));
    stat_row("Session duration (min)", &p.duration_minutes);
    stat_row("System words per turn", &p.system_words_per_turn);
    stat_row("Learner words per open turn", &p.learner_words_per_open_turn);
    stat_row("Words before follow-up", &p.pre_words);
    stat_row("Words after follow-up", &p.post_words);
    rows.push((
        "Expansion factor".into(),
        p.expansion_events.to_string(),
        fmt_stat(&p.expansion_factor),
    ));
    if let Some(m) = confusion {
        for (name, v) in [
            ("Gate triggered correctly (TP)", m.tp),
            ("Gate triggered erroneously (FP)", m.fp),
            ("Gate silent correctly (TN)", m.tn),
            ("Gate missed insufficient (FN)", m.fn_),
        ] {
            rows.push((name.into(), v.to_string(), "-".into()));
        }
    }

    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let mut out = format!("Sessions: {}\n", p.sessions);
    for (a, b, c) in &rows {
        let _ = writeln!(out, "{a:<w0$}  {b:>w1$}  {c}");
    }
    for s in &report.sessions {
        let _ = writeln!(
            out,
            "session {} [{}]: {} turns, {} triggers, {} min",
            s.session_id,
            s.status,
            s.total_turns,
            s.llm_triggers,
            fmt_opt(s.duration_minutes)
        );
    }
    out
}
