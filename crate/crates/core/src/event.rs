//! The session event vocabulary. One record per line on disk; field names
//! (`seq`, `at`, `kind`, `payload`) are part of the wire contract.

use serde::{Deserialize, Serialize};

use crate::domain::{
    Action, ActionModule, Feedback, FeedbackId, Finding, GoalId, ModuleId, ModuleResult,
    Presentation, Subgoal, SubgoalId, Suggestion,
};

/// Milliseconds since the Unix epoch, as reported by the session clock.
pub type Timestamp = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub at: Timestamp,
    #[serde(flatten)]
    pub body: EventBody,
}

impl SessionEvent {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("session events always serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    GoalSet,
    SubgoalsDecomposed,
    SubgoalStarted,
    QuestionsPosed,
    FeedbackReceived,
    ModuleGenerated,
    ModuleDispatched,
    ModuleCompleted,
    ResultsPresented,
    SuggestionsOffered,
    SubgoalTerminated,
    GoalCompleted,
    ErrorNoted,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::GoalSet => "GoalSet",
            EventKind::SubgoalsDecomposed => "SubgoalsDecomposed",
            EventKind::SubgoalStarted => "SubgoalStarted",
            EventKind::QuestionsPosed => "QuestionsPosed",
            EventKind::FeedbackReceived => "FeedbackReceived",
            EventKind::ModuleGenerated => "ModuleGenerated",
            EventKind::ModuleDispatched => "ModuleDispatched",
            EventKind::ModuleCompleted => "ModuleCompleted",
            EventKind::ResultsPresented => "ResultsPresented",
            EventKind::SuggestionsOffered => "SuggestionsOffered",
            EventKind::SubgoalTerminated => "SubgoalTerminated",
            EventKind::GoalCompleted => "GoalCompleted",
            EventKind::ErrorNoted => "ErrorNoted",
        }
    }
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    PlannerRefusal,
    BackendFailure,
    AgentFailure,
    MalformedResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    GoalSet {
        goal_id: GoalId,
        text: String,
    },
    SubgoalsDecomposed {
        subgoals: Vec<Subgoal>,
    },
    SubgoalStarted {
        subgoal_id: SubgoalId,
        ordinal: u32,
    },
    QuestionsPosed {
        subgoal_id: SubgoalId,
        questions: Vec<Suggestion>,
    },
    FeedbackReceived {
        feedback: Feedback,
    },
    ModuleGenerated {
        module: ActionModule,
    },
    ModuleDispatched {
        module_id: ModuleId,
    },
    ModuleCompleted {
        result: ModuleResult,
        actions: Vec<Action>,
        findings: Vec<Finding>,
    },
    ResultsPresented {
        module_id: ModuleId,
        presentation: Presentation,
    },
    SuggestionsOffered {
        subgoal_id: SubgoalId,
        loop_index: u32,
        suggestions: Vec<Suggestion>,
    },
    SubgoalTerminated {
        subgoal_id: SubgoalId,
        feedback_id: FeedbackId,
    },
    GoalCompleted {
        goal_id: GoalId,
    },
    ErrorNoted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subgoal_id: Option<SubgoalId>,
        code: ErrorCode,
        message: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::GoalSet { .. } => EventKind::GoalSet,
            EventBody::SubgoalsDecomposed { .. } => EventKind::SubgoalsDecomposed,
            EventBody::SubgoalStarted { .. } => EventKind::SubgoalStarted,
            EventBody::QuestionsPosed { .. } => EventKind::QuestionsPosed,
            EventBody::FeedbackReceived { .. } => EventKind::FeedbackReceived,
            EventBody::ModuleGenerated { .. } => EventKind::ModuleGenerated,
            EventBody::ModuleDispatched { .. } => EventKind::ModuleDispatched,
            EventBody::ModuleCompleted { .. } => EventKind::ModuleCompleted,
            EventBody::ResultsPresented { .. } => EventKind::ResultsPresented,
            EventBody::SuggestionsOffered { .. } => EventKind::SuggestionsOffered,
            EventBody::SubgoalTerminated { .. } => EventKind::SubgoalTerminated,
            EventBody::GoalCompleted { .. } => EventKind::GoalCompleted,
            EventBody::ErrorNoted { .. } => EventKind::ErrorNoted,
        }
    }
}
