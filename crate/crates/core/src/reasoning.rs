//! Scene description, few-shot prompt assembly, decision decoding and action
//! decoding into lane and speed targets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formation::{ControlWeights, Slot};
use crate::memory::Experience;
use crate::scalar::Scalar;
use crate::world::{HighwayConfig, Perception, Task, VehicleState};

/// Length of the numeric scene embedding used for experience retrieval.
pub const FEATURE_DIM: usize = 14;

/// Appended to the prompt when the first answer could not be decoded.
pub const RETRY_REMINDER: &str =
    "Your previous answer could not be parsed. Respond with valid JSON only, for example {\"reasoning\": \"...\", \"decision\": \"IDLE\"}.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DecisionAction {
    #[serde(rename = "IDLE")]
    Idle,
    #[serde(rename = "LANE_LEFT")]
    LaneLeft,
    #[serde(rename = "LANE_RIGHT")]
    LaneRight,
    #[serde(rename = "FASTER")]
    Faster,
    #[serde(rename = "SLOWER")]
    Slower,
}

impl DecisionAction {
    pub const ALL: [DecisionAction; 5] = [
        DecisionAction::Idle,
        DecisionAction::LaneLeft,
        DecisionAction::LaneRight,
        DecisionAction::Faster,
        DecisionAction::Slower,
    ];

    pub fn token(self) -> &'static str {
        match self {
            DecisionAction::Idle => "IDLE",
            DecisionAction::LaneLeft => "LANE_LEFT",
            DecisionAction::LaneRight => "LANE_RIGHT",
            DecisionAction::Faster => "FASTER",
            DecisionAction::Slower => "SLOWER",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.token() == token)
    }

    fn meaning(self) -> &'static str {
        match self {
            DecisionAction::Idle => "keep the current lane and follow the convoy",
            DecisionAction::LaneLeft => "change to the adjacent lane on the left",
            DecisionAction::LaneRight => "change to the adjacent lane on the right",
            DecisionAction::Faster => "raise the target speed by one step",
            DecisionAction::Slower => "lower the target speed by one step",
        }
    }

    /// Well-formed answer text for this action, as an LLM is asked to produce it.
    pub fn to_answer(self, reasoning: &str) -> String {
        serde_json::json!({ "reasoning": reasoning, "decision": self.token() }).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionTargets<T> {
    pub target_lane: usize,
    pub target_speed: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasoningConfig {
    /// Target speed change of one FASTER/SLOWER decision, m/s.
    pub speed_step: f64,
    pub few_shot_k: usize,
    /// Upper bound on prompt length in characters.
    pub max_prompt_chars: usize,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            speed_step: 2.5,
            few_shot_k: 3,
            max_prompt_chars: 32_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bearing {
    Ahead,
    Behind,
    AheadLeft,
    AheadRight,
    BehindLeft,
    BehindRight,
}

impl Bearing {
    pub const ALL: [Bearing; 6] = [
        Bearing::Ahead,
        Bearing::Behind,
        Bearing::AheadLeft,
        Bearing::AheadRight,
        Bearing::BehindLeft,
        Bearing::BehindRight,
    ];

    pub fn classify<T: Scalar>(ego_lane: usize, other_lane: usize, dx: T) -> Bearing {
        let ahead = dx >= T::zero();
        match (other_lane.cmp(&ego_lane), ahead) {
            (std::cmp::Ordering::Equal, true) => Bearing::Ahead,
            (std::cmp::Ordering::Equal, false) => Bearing::Behind,
            (std::cmp::Ordering::Greater, true) => Bearing::AheadLeft,
            (std::cmp::Ordering::Greater, false) => Bearing::BehindLeft,
            (std::cmp::Ordering::Less, true) => Bearing::AheadRight,
            (std::cmp::Ordering::Less, false) => Bearing::BehindRight,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bearing::Ahead => "ahead",
            Bearing::Behind => "behind",
            Bearing::AheadLeft => "ahead-left",
            Bearing::AheadRight => "ahead-right",
            Bearing::BehindLeft => "behind-left",
            Bearing::BehindRight => "behind-right",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDescription {
    pub text: String,
    pub features: Vec<f64>,
    pub task: Task,
}

fn slot_role(slot: Slot) -> &'static str {
    match slot {
        Slot::Front => "front, same lane",
        Slot::Back => "back, same lane",
        Slot::FrontLeft => "front, left lane",
        Slot::BackLeft => "back, left lane",
        Slot::FrontRight => "front, right lane",
        Slot::BackRight => "back, right lane",
    }
}

pub fn task_objective(task: Task) -> &'static str {
    match task {
        Task::None => "Drive normally and keep the convoy formation.",
        Task::AvoidObstacles => {
            "Keep the convoy formation and get past slower traffic without any collision."
        }
        Task::JoinConvoy => {
            "Join the convoy: reach the open formation slot and match the convoy speed."
        }
        Task::LeaveConvoy => {
            "Leave the convoy: move to the leftmost lane and get out of communication range of every convoy vehicle."
        }
        Task::EscortSwitch => {
            "Switch to escort formation: reach your assigned slot around the protected vehicle."
        }
        Task::Protected => "You are the protected vehicle: hold your lane at the desired speed.",
    }
}

/// Fixed-length scene embedding: ego lane and speed, then the normalized gap
/// and relative speed of the nearest environment vehicle in each bearing.
pub fn scene_features<T: Scalar>(p: &Perception<T>, ego: &VehicleState<T>, comm_range: T) -> Vec<f64> {
    let max_speed = p.max_speed.as_f64();
    let range = comm_range.as_f64();
    let mut features = Vec::with_capacity(FEATURE_DIM);
    features.push(ego.lane as f64 / p.lane_count.max(1) as f64);
    features.push(ego.v.as_f64() / max_speed);
    for bearing in Bearing::ALL {
        // env_vehicles is sorted nearest first, so the first match is the nearest.
        let nearest = p
            .env_vehicles
            .iter()
            .find(|o| Bearing::classify(ego.lane, o.lane, o.x - ego.x) == bearing);
        match nearest {
            Some(o) => {
                features.push((o.x - ego.x).as_f64() / range);
                features.push((o.v - ego.v).as_f64() / max_speed);
            }
            None => features.extend([0.0, 0.0]),
        }
    }
    features
}

/// Renders the structured scene text fed to the language model.
pub fn build_scene_description<T: Scalar>(
    p: &Perception<T>,
    ego: &VehicleState<T>,
    task: Task,
    comm_range: T,
) -> SceneDescription {
    let mut text = String::new();
    let _ = writeln!(text, "## Road");
    let _ = writeln!(
        text,
        "Lanes: {} (lane 0 is the rightmost). Maximum speed: {:.1} m/s.",
        p.lane_count,
        p.max_speed.as_f64()
    );
    let _ = writeln!(text, "## Ego vehicle");
    let _ = writeln!(
        text,
        "Vehicle {}: lane {}, x = {:.1} m, speed {:.1} m/s.",
        ego.id,
        ego.lane,
        ego.x.as_f64(),
        ego.v.as_f64()
    );
    let _ = writeln!(text, "## Environment vehicles");
    if p.env_vehicles.is_empty() {
        let _ = writeln!(text, "(none)");
    }
    for o in &p.env_vehicles {
        let dx = o.x - ego.x;
        let _ = writeln!(
            text,
            "- vehicle {}: lane {}, {}, dx = {:+.1} m, speed {:.1} m/s",
            o.id,
            o.lane,
            Bearing::classify(ego.lane, o.lane, dx).as_str(),
            dx.as_f64(),
            o.v.as_f64()
        );
    }
    let _ = writeln!(text, "## Convoy neighbors");
    if p.convoy_neighbors.is_empty() {
        let _ = writeln!(text, "(none)");
    }
    for (slot, n) in p.convoy_neighbors.occupied() {
        let _ = writeln!(
            text,
            "- {} ({}): vehicle {}, lane {}, dx = {:+.1} m, speed {:.1} m/s",
            slot.label(),
            slot_role(slot),
            n.id,
            n.lane,
            (n.x - ego.x).as_f64(),
            n.v.as_f64()
        );
    }
    let _ = writeln!(text, "## Task");
    let _ = writeln!(text, "{}: {}", task.as_str(), task_objective(task));
    if let Some(slot) = &p.task_slot {
        let _ = writeln!(
            text,
            "Target slot: lane {}, dx = {:+.1} m.",
            slot.lane,
            (slot.x - ego.x).as_f64()
        );
    }
    SceneDescription {
        text,
        features: scene_features(p, ego, comm_range),
        task,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.system.len() + self.user.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of this prompt with the decode-failure reminder appended.
    pub fn with_reminder(&self) -> Prompt {
        Prompt {
            system: self.system.clone(),
            user: format!("{}\n{}", self.user, RETRY_REMINDER),
        }
    }
}

impl std::fmt::Display for Prompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}\n{}", self.system, self.user)
    }
}

pub const EXAMPLE_HEADER: &str = "### Example";

fn system_preamble() -> String {
    let mut s = String::from(
        "You are the decision module of one connected autonomous vehicle driving in a multi-lane highway convoy. \
         Each turn you read a scene description and choose one high-level action.\n\
         Available actions:\n",
    );
    for a in DecisionAction::ALL {
        let _ = writeln!(s, "- {}: {}", a.token(), a.meaning());
    }
    s.push_str(
        "Answer with a single JSON object of the form {\"reasoning\": string, \"decision\": action}.",
    );
    s
}

/// Assembles the few-shot prompt: preamble, up to `k` retrieved examples in
/// retrieval order, the current scene, and the output instruction.
pub fn generate_prompt(scene: &SceneDescription, examples: &[&Experience], k: usize) -> Prompt {
    let mut user = String::new();
    let shots = &examples[..examples.len().min(k)];
    if shots.is_empty() {
        user.push_str("No prior experiences are available for this task.\n\n");
    } else {
        user.push_str("Decisions made in similar past situations:\n\n");
    }
    for (i, e) in shots.iter().enumerate() {
        let _ = writeln!(user, "{EXAMPLE_HEADER} {}", i + 1);
        user.push_str(&e.scene_text);
        let _ = writeln!(user, "Decision: {}\n", e.decision.token());
    }
    user.push_str("### Current scene\n");
    user.push_str(&scene.text);
    let tokens: Vec<_> = DecisionAction::ALL.iter().map(|a| a.token()).collect();
    let _ = write!(
        user,
        "\nRespond with a JSON object {{\"reasoning\": \"<short explanation>\", \"decision\": \"<one of {}>\"}}.",
        tokens.join(", ")
    );
    Prompt {
        system: system_preamble(),
        user,
    }
}

/// Like [`generate_prompt`], but keeps the prompt within `max_chars`.
/// Examples are dropped from the least similar end first. After that, the
/// farthest environment vehicles are left out of the current scene.
pub fn generate_bounded_prompt(
    scene: &SceneDescription,
    examples: &[&Experience],
    k: usize,
    max_chars: usize,
) -> Prompt {
    let mut shots = &examples[..examples.len().min(k)];
    let mut prompt = generate_prompt(scene, shots, k);
    while prompt.len() > max_chars && !shots.is_empty() {
        shots = &shots[..shots.len() - 1];
        prompt = generate_prompt(scene, shots, k);
    }
    let (head, env, tail) = split_env_section(&scene.text);
    let mut keep = env.len();
    while prompt.len() > max_chars && keep > 0 {
        keep -= 1;
        let mut text = String::from(head);
        env[..keep].iter().for_each(|l| text.push_str(l));
        let _ = writeln!(text, "({} farther vehicles omitted)", env.len() - keep);
        text.push_str(tail);
        let trimmed = SceneDescription {
            text,
            features: scene.features.clone(),
            task: scene.task,
        };
        prompt = generate_prompt(&trimmed, shots, k);
    }
    prompt
}

/// Splits scene text into the part up to the environment list, the list
/// lines (nearest first) and the rest.
fn split_env_section(text: &str) -> (&str, Vec<&str>, &str) {
    const ENV: &str = "## Environment vehicles\n";
    let Some(start) = text.find(ENV).map(|i| i + ENV.len()) else {
        return (text, Vec::new(), "");
    };
    let mut end = start;
    let mut lines = Vec::new();
    for line in text[start..].split_inclusive('\n') {
        if !line.starts_with("- vehicle ") {
            break;
        }
        lines.push(line);
        end += line.len();
    }
    (&text[..start], lines, &text[end..])
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no decision found in model output")]
pub struct DecodeError;

fn is_token_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Reads the `decision` field of a JSON answer, falling back to the last
/// standalone action token in the text.
pub fn decode_decision(raw: &str) -> Result<DecisionAction, DecodeError> {
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(raw.trim()) {
        let parsed = value
            .get("decision")
            .and_then(|d| d.as_str())
            .and_then(|d| DecisionAction::from_token(&d.trim().to_ascii_uppercase()));
        if let Some(action) = parsed {
            return Ok(action);
        }
    }
    let mut best: Option<(usize, DecisionAction)> = None;
    for action in DecisionAction::ALL {
        let token = action.token();
        for (pos, _) in raw.match_indices(token) {
            let before = raw[..pos].chars().next_back();
            let after = raw[pos + token.len()..].chars().next();
            let standalone = !before.is_some_and(is_token_char) && !after.is_some_and(is_token_char);
            if standalone && best.is_none_or(|(p, _)| pos > p) {
                best = Some((pos, action));
            }
        }
    }
    best.map(|(_, a)| a).ok_or(DecodeError)
}

/// Turns a decision into lane and speed targets. Speed actions keep the lane
/// target (so an ongoing lane change is not aborted); lane changes are taken
/// relative to the lane the vehicle occupies and degrade to IDLE at the road
/// edge.
pub fn decode_action<T: Scalar>(
    action: DecisionAction,
    ego: &VehicleState<T>,
    current: &ActionTargets<T>,
    highway: &HighwayConfig<T>,
    w: &ControlWeights<T>,
    speed_step: T,
) -> ActionTargets<T> {
    let lane_count = highway.lane_count;
    let keep_lane = current.target_lane.min(lane_count - 1);
    let current_speed = current.target_speed.clamp_to(T::zero(), highway.max_speed);
    let idle = ActionTargets {
        target_lane: keep_lane,
        target_speed: current_speed.min(w.desired_speed).min(highway.max_speed),
    };
    match action {
        DecisionAction::Idle => idle,
        DecisionAction::LaneLeft if ego.lane + 1 < lane_count => ActionTargets {
            target_lane: ego.lane + 1,
            target_speed: current_speed,
        },
        DecisionAction::LaneRight if ego.lane > 0 => ActionTargets {
            target_lane: ego.lane - 1,
            target_speed: current_speed,
        },
        DecisionAction::LaneLeft | DecisionAction::LaneRight => idle,
        DecisionAction::Faster => ActionTargets {
            target_lane: keep_lane,
            target_speed: (current_speed + speed_step).min(highway.max_speed),
        },
        DecisionAction::Slower => ActionTargets {
            target_lane: keep_lane,
            target_speed: (current_speed - speed_step).max(T::zero()),
        },
    }
}
