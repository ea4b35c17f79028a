//! Decision providers: an OpenAI-compatible chat-completions client and a
//! deterministic rule oracle.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formation::{desired_offset, ControlWeights, Slot};
use crate::reasoning::{ActionTargets, DecisionAction, Prompt};
use crate::scalar::Scalar;
use crate::world::{Perception, SensedVehicle, Task, VehicleState};

pub const ENV_ENDPOINT: &str = "CONVOY_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "CONVOY_LLM_MODEL";
pub const ENV_API_KEY: &str = "CONVOY_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    LlmHttp,
    Oracle,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::LlmHttp => "llm_http",
            BackendKind::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm_http" => Ok(BackendKind::LlmHttp),
            "oracle" => Ok(BackendKind::Oracle),
            other => Err(format!("unknown backend '{other}' (expected llm_http or oracle)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    /// Delay before the first retry; doubled for each further retry.
    pub backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Oracle,
            endpoint: None,
            model: "llama-3.3".to_string(),
            api_key_env: ENV_API_KEY.to_string(),
            timeout_secs: 30.0,
            max_retries: 2,
            temperature: 0.0,
            backoff_ms: 250,
        }
    }
}

impl BackendConfig {
    /// Fills endpoint and model from the environment where they are unset.
    pub fn with_env_overrides(mut self) -> Self {
        if self.endpoint.is_none() {
            self.endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty());
        }
        if let Ok(model) = std::env::var(ENV_MODEL) {
            if !model.is_empty() {
                self.model = model;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.kind == BackendKind::Oracle {
            return Ok(());
        }
        if self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(BackendError::Config(format!(
                "llm_http backend needs an endpoint (set {ENV_ENDPOINT} or pass --endpoint)"
            )));
        }
        if self.model.is_empty() {
            return Err(BackendError::Config(format!(
                "llm_http backend needs a model name (set {ENV_MODEL} or pass --model)"
            )));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(BackendError::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("LLM endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("LLM request timed out after {attempts} attempt(s)")]
    TimeoutExhausted { attempts: u32 },
    #[error("LLM endpoint returned HTTP {status}")]
    Http { status: u16 },
    #[error("malformed LLM response: {0}")]
    MalformedResponse(String),
}

/// Thresholds of the rule oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    pub speed_step: f64,
    pub decision_period: f64,
    /// Deceleration assumed when planning approach speeds, m/s^2.
    pub comfort_decel: f64,
    /// Distance kept to a convoy slot's neighbor while approaching it, m.
    pub approach_margin: f64,
    /// A column head does not slow below this speed just to wait for a
    /// slower neighboring column, m/s.
    pub pace_floor: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            speed_step: 2.5,
            decision_period: 1.0,
            comfort_decel: 0.5,
            approach_margin: 0.0,
            pace_floor: 15.0,
        }
    }
}

/// Structured view of one vehicle's situation, which is all the oracle reads.
#[derive(Debug, Clone, Copy)]
pub struct OracleScene<'a, T> {
    pub perception: &'a Perception<T>,
    pub ego: &'a VehicleState<T>,
    pub task: Task,
    pub targets: ActionTargets<T>,
    pub weights: &'a ControlWeights<T>,
    pub params: OracleParams,
}

/// One decision query: the prompt for a language model and the structured
/// scene for the oracle.
#[derive(Debug, Clone, Copy)]
pub struct DecisionRequest<'a> {
    pub prompt: &'a Prompt,
    pub scene: OracleScene<'a, f64>,
}

pub trait DecisionBackend: Send + Sync {
    /// Returns the raw answer text for one request.
    fn decide(&self, request: &DecisionRequest<'_>) -> Result<String, BackendError>;

    /// Answers several independent requests; results are in request order.
    fn decide_batch(&self, requests: &[DecisionRequest<'_>]) -> Vec<Result<String, BackendError>> {
        requests.iter().map(|r| self.decide(r)).collect()
    }

    fn kind(&self) -> BackendKind;
}

pub fn build_backend(cfg: &BackendConfig) -> Result<Box<dyn DecisionBackend>, BackendError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackendKind::Oracle => Box::new(OracleBackend),
        BackendKind::LlmHttp => Box::new(LlmHttpBackend::new(cfg.clone())?),
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleBackend;

impl DecisionBackend for OracleBackend {
    fn decide(&self, request: &DecisionRequest<'_>) -> Result<String, BackendError> {
        let action = decide_oracle(&request.scene);
        Ok(action.to_answer("rule oracle"))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Debug, Deserialize)]
struct ChatReply {
    content: Option<String>,
}

pub struct LlmHttpBackend {
    cfg: BackendConfig,
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for LlmHttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmHttpBackend")
            .field("url", &self.url)
            .field("model", &self.cfg.model)
            .finish_non_exhaustive()
    }
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

impl LlmHttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let base = cfg.endpoint.clone().unwrap_or_default();
        let base = base.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            cfg,
            url,
            api_key,
            client,
        })
    }

    fn attempt(&self, prompt: &Prompt, timeout: Duration) -> Result<String, Attempt> {
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &prompt.system,
                },
                ChatMessage {
                    role: "user",
                    content: &prompt.user,
                },
            ],
            temperature: self.cfg.temperature,
        };
        let mut req = self.client.post(&self.url).timeout(timeout).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| classify_transport(&e))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(BackendError::Http {
                status: status.as_u16(),
            }));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Http {
                status: status.as_u16(),
            }));
        }
        let text = resp.text().map_err(|e| classify_transport(&e))?;
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::MalformedResponse(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| {
                Attempt::Fatal(BackendError::MalformedResponse(
                    "response has no choices[0].message.content".into(),
                ))
            })
    }

    /// Sends `prompt`, retrying transient failures with exponential backoff.
    /// The whole call never takes longer than `timeout * (max_retries + 1)`.
    pub fn complete(&self, prompt: &Prompt) -> Result<String, BackendError> {
        let per_attempt = Duration::from_secs_f64(self.cfg.timeout_secs);
        let deadline = Instant::now() + per_attempt * (self.cfg.max_retries + 1);
        let mut backoff = Duration::from_millis(self.cfg.backoff_ms);
        let mut attempts = 0;
        let mut timed_out = false;
        let mut last_err = None;
        while attempts <= self.cfg.max_retries {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                break;
            }
            attempts += 1;
            match self.attempt(prompt, per_attempt.min(remaining)) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    log::debug!("LLM attempt {attempts} failed: {e}");
                    timed_out = matches!(e, BackendError::TimeoutExhausted { .. });
                    last_err = Some(e);
                }
            }
            if attempts <= self.cfg.max_retries {
                let remaining = deadline.saturating_duration_since(Instant::now());
                std::thread::sleep(backoff.min(remaining));
                backoff *= 2;
            }
        }
        match last_err {
            Some(_) if timed_out => Err(BackendError::TimeoutExhausted { attempts }),
            Some(e) => Err(e),
            None => Err(BackendError::TimeoutExhausted { attempts }),
        }
    }
}

fn classify_transport(e: &reqwest::Error) -> Attempt {
    if e.is_timeout() {
        Attempt::Retry(BackendError::TimeoutExhausted { attempts: 1 })
    } else if e.is_connect() || e.is_request() || e.is_body() {
        Attempt::Retry(BackendError::Unreachable(e.to_string()))
    } else if e.is_decode() {
        Attempt::Fatal(BackendError::MalformedResponse(e.to_string()))
    } else {
        Attempt::Retry(BackendError::Unreachable(e.to_string()))
    }
}

impl DecisionBackend for LlmHttpBackend {
    fn decide(&self, request: &DecisionRequest<'_>) -> Result<String, BackendError> {
        self.complete(request.prompt)
    }

    /// Issues the requests concurrently, one thread per request.
    fn decide_batch(&self, requests: &[DecisionRequest<'_>]) -> Vec<Result<String, BackendError>> {
        std::thread::scope(|s| {
            let handles: Vec<_> = requests
                .iter()
                .map(|r| s.spawn(move || self.complete(r.prompt)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(BackendError::Unreachable("request thread panicked".into()))
                    })
                })
                .collect()
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::LlmHttp
    }
}

fn others<T: Scalar>(p: &Perception<T>) -> impl Iterator<Item = &SensedVehicle<T>> {
    p.env_vehicles.iter().chain(p.convoy_vehicles.iter())
}

/// Whether `lane` has room for the ego: every sensed vehicle there is at
/// least `front` ahead or `rear` behind, widened by one decision period of
/// closing speed.
fn lane_has_room<T: Scalar>(scene: &OracleScene<'_, T>, lane: usize, front: T, rear: T) -> bool {
    let ego = scene.ego;
    let period = T::lit(scene.params.decision_period);
    others(scene.perception)
        .filter(|o| o.lane == lane)
        .all(|o| {
            let dx = o.x - ego.x;
            if dx >= T::zero() {
                dx >= front + (ego.v - o.v).max(T::zero()) * period
            } else {
                -dx >= rear + (o.v - ego.v).max(T::zero()) * period
            }
        })
}

/// Nearest sensed vehicle ahead in `lane`.
fn leader_in_lane<'a, T: Scalar>(scene: &OracleScene<'a, T>, lane: usize) -> Option<&'a SensedVehicle<T>> {
    others(scene.perception)
        .filter(|o| o.lane == lane && o.x >= scene.ego.x)
        .min_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.id.cmp(&b.id)))
}

/// Distance needed to slow from the ego speed down to `lead_v` without
/// closing inside `D_safe`, plus one decision period of reaction.
fn look_ahead<T: Scalar>(scene: &OracleScene<'_, T>, lead_v: T) -> T {
    let closing = (scene.ego.v - lead_v).max(T::zero());
    let p = &scene.params;
    scene.weights.safe_distance * T::lit(2.0)
        + closing * closing / T::lit(2.0 * p.comfort_decel)
        + closing * T::lit(p.decision_period)
}

/// Highest speed from which the ego can still settle at `anchor_v` when it
/// reaches a point `distance` ahead.
fn approach_speed<T: Scalar>(anchor_v: T, distance: T, decel: f64) -> T {
    if distance >= T::zero() {
        anchor_v + (T::lit(2.0 * decel) * distance).sqrt()
    } else {
        anchor_v - (T::lit(2.0 * decel) * -distance).sqrt()
    }
}

/// Picks the speed action that moves the current target toward `plan`.
fn track_speed<T: Scalar>(scene: &OracleScene<'_, T>, plan: T) -> DecisionAction {
    let half_step = T::lit(scene.params.speed_step * 0.5);
    let target = scene.targets.target_speed;
    if plan > target + half_step && target < scene.perception.max_speed {
        DecisionAction::Faster
    } else if plan < target - half_step && target > T::zero() {
        DecisionAction::Slower
    } else if target > scene.weights.desired_speed + half_step {
        // IDLE would drop the target to the desired speed; hold it instead.
        DecisionAction::Faster
    } else {
        DecisionAction::Idle
    }
}

/// Speed plan toward a slot `distance` ahead moving at `anchor_v`, capped so
/// the ego never closes inside `D_safe` of the vehicle ahead in its lane.
fn slot_speed_plan<T: Scalar>(scene: &OracleScene<'_, T>, anchor_v: T, distance: T) -> T {
    let decel = scene.params.comfort_decel;
    let period = T::lit(scene.params.decision_period);
    // Distance covered at the current closing speed before the next decision.
    let reaction = |v: T| (scene.ego.v - v).max(T::zero()) * period;
    let ahead = distance - T::lit(scene.params.approach_margin);
    let mut plan = if ahead > T::zero() {
        approach_speed(anchor_v, (ahead - reaction(anchor_v)).max(T::zero()), decel)
    } else {
        approach_speed(anchor_v, ahead, decel)
    };
    if let Some(lead) = leader_in_lane(scene, scene.ego.lane) {
        let gap = lead.x - scene.ego.x - scene.weights.safe_distance - reaction(lead.v);
        plan = plan.min(approach_speed(lead.v, gap, decel));
    }
    plan.clamp_to(T::zero(), scene.perception.max_speed)
}

fn lane_step(from: usize, to: usize) -> DecisionAction {
    if to > from {
        DecisionAction::LaneLeft
    } else {
        DecisionAction::LaneRight
    }
}

/// Moves toward a slot in another lane: change lanes when the adjacent lane
/// has room, otherwise adjust speed to open a gap.
fn seek_slot<T: Scalar>(scene: &OracleScene<'_, T>, front_gap: T, rear_gap: T) -> DecisionAction {
    let ego = scene.ego;
    let slot = scene.perception.task_slot.expect("seek_slot needs a slot");
    if ego.lane == slot.lane {
        return track_speed(scene, slot_speed_plan(scene, slot.anchor_speed, slot.x - ego.x));
    }
    let next = if slot.lane > ego.lane { ego.lane + 1 } else { ego.lane - 1 };
    if scene.targets.target_lane == next {
        // Already changing lanes; keep pace with the slot meanwhile.
        return track_speed(scene, slot_speed_plan(scene, slot.anchor_speed, slot.x - ego.x));
    }
    if lane_has_room(scene, next, front_gap, rear_gap) {
        return lane_step(ego.lane, next);
    }
    // Blocked: drop behind (or pull ahead of) whatever occupies the next lane.
    let blocker = others(scene.perception)
        .filter(|o| o.lane == next)
        .min_by(|a, b| {
            let da = (a.x - ego.x).abs();
            let db = (b.x - ego.x).abs();
            da.partial_cmp(&db).unwrap().then(a.id.cmp(&b.id))
        });
    match blocker {
        Some(b) if b.x < ego.x && slot.x > b.x => {
            track_speed(scene, slot_speed_plan(scene, b.v, b.x + rear_gap * T::lit(1.5) - ego.x))
        }
        Some(b) => track_speed(scene, slot_speed_plan(scene, b.v, b.x - front_gap * T::lit(1.5) - ego.x)),
        None => DecisionAction::Idle,
    }
}

/// Deterministic rule policy over the structured scene.
pub fn decide_oracle<T: Scalar>(scene: &OracleScene<'_, T>) -> DecisionAction {
    let ego = scene.ego;
    let p = scene.perception;
    let d_safe = scene.weights.safe_distance;
    let leftmost = p.lane_count.saturating_sub(1);

    match scene.task {
        Task::JoinConvoy if p.task_slot.is_some() => return seek_slot(scene, d_safe, d_safe),
        Task::EscortSwitch if p.task_slot.is_some() => {
            return seek_slot(scene, d_safe * T::lit(2.0), d_safe)
        }
        Task::LeaveConvoy => {
            if ego.lane >= leftmost || scene.targets.target_lane > ego.lane {
                return DecisionAction::Faster;
            }
            if lane_has_room(scene, ego.lane + 1, d_safe * T::lit(2.0), d_safe) {
                return DecisionAction::LaneLeft;
            }
            return DecisionAction::Faster;
        }
        _ => {}
    }

    // Obstacle handling applies when the nearest vehicle ahead is traffic
    // rather than a convoy front neighbor.
    let front = p.convoy_neighbors.get(Slot::Front);
    let obstacle = p
        .env_vehicles
        .iter()
        .filter(|o| o.lane == ego.lane && o.x >= ego.x)
        .min_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.id.cmp(&b.id)))
        .filter(|o| front.is_none_or(|f| o.x < f.x));
    let target = scene.targets.target_speed;
    let half_step = T::lit(scene.params.speed_step * 0.5);
    let speed = predicted_speed(scene).max(ego.v);

    if let Some(o) = obstacle {
        let gap = o.x - ego.x;
        if o.v < speed && gap <= look_ahead(scene, o.v) {
            let reaction = (speed - o.v) * T::lit(scene.params.decision_period);
            let safe = approach_speed(o.v, gap - d_safe - reaction, scene.params.comfort_decel).min(o.v.max(speed));
            let too_fast = speed > safe + half_step && target > T::zero();
            if scene.targets.target_lane != ego.lane {
                // Mid lane change: the old lane is still occupied until the
                // move completes, so only the speed may be adjusted.
                return if too_fast { DecisionAction::Slower } else { DecisionAction::Idle };
            }
            let mut best: Option<(T, usize)> = None;
            for lane in [ego.lane + 1, ego.lane.wrapping_sub(1)] {
                if lane >= p.lane_count || !lane_has_room(scene, lane, d_safe * T::lit(2.0), d_safe) {
                    continue;
                }
                let room = leader_in_lane(scene, lane)
                    .map(|l| l.x - ego.x)
                    .unwrap_or(T::infinity());
                if best.is_none_or(|(r, _)| room > r) {
                    best = Some((room, lane));
                }
            }
            if let Some((_, lane)) = best {
                return lane_step(ego.lane, lane);
            }
            return if too_fast { DecisionAction::Slower } else { DecisionAction::Idle };
        }
    }

    if let Some(f) = front.filter(|f| f.lane == ego.lane) {
        let gap = f.x - ego.x;
        let reaction = (speed - f.v).max(T::zero()) * T::lit(scene.params.decision_period);
        let safe = approach_speed(f.v, gap - d_safe - reaction, scene.params.comfort_decel);
        if speed > safe + half_step && target > T::zero() {
            return DecisionAction::Slower;
        }
    }

    if front.is_none() && ego.in_formation {
        // A column head keeps pace with the slowest neighboring column.
        let slowest = p
            .convoy_neighbors
            .occupied()
            .map(|(_, n)| n.v)
            .fold(T::infinity(), |a, b| a.min(b));
        let step = T::lit(scene.params.speed_step);
        let floor = T::lit(scene.params.pace_floor);
        if slowest.is_finite() && slowest < target - step && target - step >= floor {
            return DecisionAction::Slower;
        }
        if slowest.is_finite() && slowest < target - half_step {
            return DecisionAction::Idle;
        }
    }

    if front.is_none() && target < scene.weights.desired_speed {
        let clear = obstacle.is_none_or(|o| {
            o.v >= target + T::lit(scene.params.speed_step)
                || o.x - ego.x > look_ahead(scene, o.v) * T::lit(2.0)
        });
        if clear {
            return DecisionAction::Faster;
        }
    }
    DecisionAction::Idle
}

/// Longitudinal speed the formation law would command right now.
fn predicted_speed<T: Scalar>(scene: &OracleScene<'_, T>) -> T {
    let ego = scene.ego;
    let w = scene.weights;
    let mut vx = scene.targets.target_speed;
    if ego.in_formation {
        for (slot, n) in scene.perception.convoy_neighbors.occupied() {
            vx = vx + w.slot_weight(slot) * ((n.x - ego.x) - desired_offset(slot, w.safe_distance));
        }
    }
    vx.clamp_to(T::zero(), scene.perception.max_speed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::NeighborSet;
    use crate::world::{HighwayConfig, SlotTarget};

    fn perception() -> Perception<f64> {
        Perception {
            lane_count: 3,
            max_speed: 30.0,
            env_vehicles: vec![],
            convoy_neighbors: NeighborSet::default(),
            convoy_vehicles: vec![],
            task_slot: None,
        }
    }

    fn ego(lane: usize) -> VehicleState<f64> {
        VehicleState::convoy(1, &HighwayConfig::default(), lane, 100.0, 25.0)
    }

    fn decide(p: &Perception<f64>, ego: &VehicleState<f64>, task: Task, target_speed: f64) -> DecisionAction {
        let w = ControlWeights::default();
        decide_oracle(&OracleScene {
            perception: p,
            ego,
            task,
            targets: ActionTargets {
                target_lane: ego.lane,
                target_speed,
            },
            weights: &w,
            params: OracleParams::default(),
        })
    }

    fn env(id: u32, lane: usize, x: f64, v: f64) -> SensedVehicle<f64> {
        SensedVehicle { id, lane, x, v }
    }

    #[test]
    fn clear_road_is_idle() {
        assert_eq!(decide(&perception(), &ego(1), Task::None, 25.0), DecisionAction::Idle);
    }

    #[test]
    fn slow_vehicle_ahead_with_left_lane_clear() {
        let mut p = perception();
        p.env_vehicles.push(env(101, 1, 115.0, 15.0));
        p.env_vehicles.push(env(102, 0, 108.0, 15.0));
        assert_eq!(decide(&p, &ego(1), Task::AvoidObstacles, 25.0), DecisionAction::LaneLeft);
    }

    #[test]
    fn slow_vehicle_ahead_with_right_lane_clear() {
        let mut p = perception();
        p.env_vehicles.push(env(101, 1, 115.0, 15.0));
        p.env_vehicles.push(env(102, 2, 108.0, 15.0));
        assert_eq!(decide(&p, &ego(1), Task::AvoidObstacles, 25.0), DecisionAction::LaneRight);
    }

    #[test]
    fn fully_blocked_slows_down() {
        let mut p = perception();
        for (id, lane) in [(101, 0), (102, 1), (103, 2)] {
            p.env_vehicles.push(env(id, lane, 115.0, 15.0));
        }
        assert_eq!(decide(&p, &ego(1), Task::AvoidObstacles, 25.0), DecisionAction::Slower);
    }

    #[test]
    fn equal_room_prefers_left() {
        let mut p = perception();
        p.env_vehicles.push(env(101, 1, 115.0, 15.0));
        assert_eq!(decide(&p, &ego(1), Task::AvoidObstacles, 25.0), DecisionAction::LaneLeft);
    }

    #[test]
    fn leave_task_rules() {
        let p = perception();
        assert_eq!(decide(&p, &ego(2), Task::LeaveConvoy, 25.0), DecisionAction::Faster);
        assert_eq!(decide(&p, &ego(0), Task::LeaveConvoy, 25.0), DecisionAction::LaneLeft);
        let mut blocked = perception();
        blocked.convoy_vehicles.push(env(3, 1, 95.0, 25.0));
        assert_eq!(decide(&blocked, &ego(0), Task::LeaveConvoy, 25.0), DecisionAction::Faster);
    }

    #[test]
    fn join_from_far_behind_speeds_up() {
        let mut p = perception();
        p.task_slot = Some(SlotTarget { lane: 1, x: 150.0, anchor_speed: 25.0 });
        assert_eq!(decide(&p, &ego(1), Task::JoinConvoy, 25.0), DecisionAction::Faster);
        assert_eq!(decide(&p, &ego(0), Task::JoinConvoy, 25.0), DecisionAction::LaneLeft);
    }

    #[test]
    fn join_close_to_slot_settles() {
        let mut p = perception();
        p.task_slot = Some(SlotTarget { lane: 1, x: 100.5, anchor_speed: 25.0 });
        assert_eq!(decide(&p, &ego(1), Task::JoinConvoy, 25.0), DecisionAction::Idle);
        assert_eq!(decide(&p, &ego(1), Task::JoinConvoy, 30.0), DecisionAction::Slower);
    }

    #[test]
    fn oracle_is_deterministic_and_total() {
        let mut p = perception();
        p.env_vehicles.push(env(101, 1, 130.0, 18.0));
        let a = decide(&p, &ego(1), Task::AvoidObstacles, 25.0);
        let b = decide(&p, &ego(1), Task::AvoidObstacles, 25.0);
        assert_eq!(a, b);
        assert!(DecisionAction::ALL.contains(&a));
    }

    #[test]
    fn llm_config_requires_endpoint() {
        let cfg = BackendConfig {
            kind: BackendKind::LlmHttp,
            ..BackendConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains(ENV_ENDPOINT));
        assert!(BackendConfig::default().validate().is_ok());
    }

    #[test]
    fn backend_kind_parses() {
        assert_eq!("oracle".parse::<BackendKind>(), Ok(BackendKind::Oracle));
        assert_eq!("llm_http".parse::<BackendKind>(), Ok(BackendKind::LlmHttp));
        assert!("gpt".parse::<BackendKind>().is_err());
    }
}
