//! Scenario setup, the closed-loop run, success evaluation and batch runs.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    build_backend, BackendConfig, BackendError, DecisionBackend, DecisionRequest, OracleParams,
    OracleScene,
};
use crate::formation::{
    formation_velocity_command, interlaced_layout, position_error, saturate_command,
    speed_coordination_accel, ControlWeights, LayoutOrientation, NeighborSet, Slot,
    VelocityCommand,
};
use crate::memory::{Experience, Outcome, SharedExperiencePool, TaskKind};
use crate::reasoning::{
    build_scene_description, decode_action, decode_decision, generate_bounded_prompt, ActionTargets,
    DecisionAction, Prompt, ReasoningConfig,
};
use crate::trace::TraceRow;
use crate::world::{
    spawn_environment_vehicles, Collision, HighwayConfig, IdmParams, Perception, SlotTarget, Task,
    VehicleState, WorldError, WorldState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "avoid", alias = "avoid_obstacles")]
    AvoidObstacles,
    #[serde(rename = "join", alias = "join_convoy")]
    JoinConvoy,
    #[serde(rename = "leave", alias = "leave_convoy")]
    LeaveConvoy,
    #[serde(rename = "escort", alias = "escort_switch")]
    EscortSwitch,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::AvoidObstacles,
        ScenarioKind::JoinConvoy,
        ScenarioKind::LeaveConvoy,
        ScenarioKind::EscortSwitch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::AvoidObstacles => "avoid",
            ScenarioKind::JoinConvoy => "join",
            ScenarioKind::LeaveConvoy => "leave",
            ScenarioKind::EscortSwitch => "escort",
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            ScenarioKind::AvoidObstacles => TaskKind::AvoidObstacles,
            ScenarioKind::JoinConvoy => TaskKind::JoinConvoy,
            ScenarioKind::LeaveConvoy => TaskKind::LeaveConvoy,
            ScenarioKind::EscortSwitch => TaskKind::EscortSwitch,
        }
    }

    fn default_env_count(self) -> usize {
        match self {
            ScenarioKind::AvoidObstacles => 20,
            _ => 0,
        }
    }

    fn default_head_x(self) -> f64 {
        match self {
            ScenarioKind::AvoidObstacles => -100.0,
            _ => 100.0,
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avoid" | "avoid_obstacles" => Ok(ScenarioKind::AvoidObstacles),
            "join" | "join_convoy" => Ok(ScenarioKind::JoinConvoy),
            "leave" | "leave_convoy" => Ok(ScenarioKind::LeaveConvoy),
            "escort" | "escort_switch" => Ok(ScenarioKind::EscortSwitch),
            other => Err(format!(
                "unknown scenario '{other}' (expected avoid, join, leave or escort)"
            )),
        }
    }
}

/// Thresholds of the success checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuccessCriteria {
    pub join_pe: f64,
    pub leave_pe: f64,
    pub slot_tolerance: f64,
    pub speed_tolerance: f64,
    pub dwell_secs: f64,
    /// A detached vehicle rejoins the neighbor graph once it is this close to its slot.
    pub engage_distance: f64,
    pub engage_speed: f64,
}

impl Default for SuccessCriteria {
    fn default() -> Self {
        Self {
            join_pe: 1.0,
            leave_pe: 0.5,
            slot_tolerance: 0.5,
            speed_tolerance: 0.5,
            dwell_secs: 3.0,
            engage_distance: 2.0,
            engage_speed: 2.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub env_vehicle_count: usize,
    pub seed: u64,
    pub convoy_size: usize,
    pub dt: f64,
    pub decision_period: f64,
    pub max_sim_time: f64,
    pub backend: BackendConfig,
    pub highway: HighwayConfig<f64>,
    pub weights: ControlWeights<f64>,
    pub idm: IdmParams<f64>,
    pub reasoning: ReasoningConfig,
    pub oracle: OracleParams,
    pub criteria: SuccessCriteria,
    /// Longitudinal position of the convoy's front-most slot at t = 0.
    pub convoy_head_x: f64,
    /// Half-width of the uniform seed-dependent jitter on convoy positions, m.
    pub position_jitter: f64,
    /// Keep every n-th step in the trace; 0 disables the trace.
    pub trace_stride: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::new(ScenarioKind::AvoidObstacles, 0)
    }
}

impl ScenarioConfig {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        Self {
            kind,
            env_vehicle_count: kind.default_env_count(),
            seed,
            convoy_size: 8,
            dt: 0.1,
            decision_period: 1.0,
            max_sim_time: 120.0,
            backend: BackendConfig::default(),
            highway: HighwayConfig::default(),
            weights: ControlWeights::default(),
            idm: IdmParams::default(),
            reasoning: ReasoningConfig::default(),
            oracle: OracleParams::default(),
            criteria: SuccessCriteria::default(),
            convoy_head_x: kind.default_head_x(),
            position_jitter: 1.0,
            trace_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        if self.convoy_size < 2 {
            return bad(format!("convoy size must be at least 2, got {}", self.convoy_size));
        }
        if self.kind == ScenarioKind::EscortSwitch && self.convoy_size != 8 {
            return bad("the escort formation needs exactly 8 convoy vehicles".into());
        }
        if !(self.dt > 0.0) || !(self.decision_period >= self.dt) {
            return bad("need dt > 0 and decision period >= dt".into());
        }
        if !(self.max_sim_time > 0.0) {
            return bad("max simulation time must be positive".into());
        }
        self.highway
            .validate()
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
        self.weights.validate().map_err(ScenarioError::Config)?;
        self.backend.validate().map_err(ScenarioError::Backend)?;
        Ok(())
    }

    fn decision_every(&self) -> u64 {
        ((self.decision_period / self.dt).round() as u64).max(1)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario configuration: {0}")]
    Config(String),
    #[error("cannot seat the convoy: {0}")]
    Placement(String),
    #[error("world: {0}")]
    World(#[from] WorldError),
    #[error("decision backend: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Collision,
    Timeout,
}

impl FailureReason {
    pub fn outcome(self) -> Outcome {
        match self {
            FailureReason::Collision => Outcome::Collision,
            FailureReason::Timeout => Outcome::Timeout,
        }
    }
}

/// Escort slot: lane and longitudinal offset from the protected vehicle.
pub type EscortSlot = (usize, f64);

/// Which side of the protected vehicle gets the extra rear escort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscortSide {
    Left,
    Right,
}

/// The seven escort slots around a protected vehicle in lane `center`.
pub fn escort_slot_offsets(center: usize, d_safe: f64, wide_side: EscortSide) -> Vec<EscortSlot> {
    let half = d_safe * 0.5;
    let (wide, narrow) = match wide_side {
        EscortSide::Left => (center + 1, center - 1),
        EscortSide::Right => (center - 1, center + 1),
    };
    vec![
        (center, d_safe),
        (center, -d_safe),
        (wide, half),
        (wide, -half),
        (wide, -3.0 * half),
        (narrow, half),
        (narrow, -half),
    ]
}

fn slot_displacement(v: &VehicleState<f64>, protected: &VehicleState<f64>, slot: EscortSlot, lane_width: f64) -> f64 {
    lane_width * v.lane.abs_diff(slot.0) as f64 + (v.x - (protected.x + slot.1)).abs()
}

/// Minimum-displacement assignment of the other members to the escort slots
/// around `protected_id`; the protected vehicle maps to its own position.
/// Seven members and seven slots make exhaustive search cheap. Among equal
/// costs the assignment that is lexicographically first (members by id,
/// slots in `escort_slot_offsets` order) wins.
pub fn assign_escort_slots(
    protected_id: u32,
    members: &[VehicleState<f64>],
    highway: &HighwayConfig<f64>,
    d_safe: f64,
    wide_side: EscortSide,
) -> Result<BTreeMap<u32, EscortSlot>, ScenarioError> {
    if members.len() != 8 {
        return Err(ScenarioError::Config(format!(
            "escort assignment needs 8 members, got {}",
            members.len()
        )));
    }
    if highway.lane_count < 3 {
        return Err(ScenarioError::Config("escort formation needs at least 3 lanes".into()));
    }
    let protected = members
        .iter()
        .find(|m| m.id == protected_id)
        .ok_or_else(|| ScenarioError::Config(format!("protected vehicle {protected_id} is not a member")))?;
    let center = protected.lane.clamp(1, highway.lane_count - 2);
    let slots = escort_slot_offsets(center, d_safe, wide_side);

    let mut others: Vec<&VehicleState<f64>> = members.iter().filter(|m| m.id != protected_id).collect();
    others.sort_by_key(|m| m.id);
    let cost: Vec<Vec<f64>> = others
        .iter()
        .map(|m| slots.iter().map(|&s| slot_displacement(m, protected, s, highway.lane_width)).collect())
        .collect();

    let mut search = SlotSearch {
        cost: &cost,
        current: Vec::with_capacity(slots.len()),
        taken: vec![false; slots.len()],
        best: Vec::new(),
        best_cost: f64::INFINITY,
    };
    search.run(0.0);

    let mut assignment = BTreeMap::new();
    assignment.insert(protected_id, (center, 0.0));
    for (m, &k) in others.iter().zip(&search.best) {
        assignment.insert(m.id, slots[k]);
    }
    Ok(assignment)
}

struct SlotSearch<'a> {
    cost: &'a [Vec<f64>],
    current: Vec<usize>,
    taken: Vec<bool>,
    best: Vec<usize>,
    best_cost: f64,
}

impl SlotSearch<'_> {
    fn run(&mut self, so_far: f64) {
        let row = self.current.len();
        if row == self.cost.len() {
            if so_far < self.best_cost {
                self.best_cost = so_far;
                self.best = self.current.clone();
            }
            return;
        }
        for k in 0..self.taken.len() {
            let next = so_far + self.cost[row][k];
            if self.taken[k] || next >= self.best_cost {
                continue;
            }
            self.taken[k] = true;
            self.current.push(k);
            self.run(next);
            self.current.pop();
            self.taken[k] = false;
        }
    }
}

/// Total displacement of an escort assignment.
pub fn assignment_cost(
    assignment: &BTreeMap<u32, EscortSlot>,
    protected_id: u32,
    members: &[VehicleState<f64>],
    lane_width: f64,
) -> f64 {
    let Some(protected) = members.iter().find(|m| m.id == protected_id) else {
        return f64::INFINITY;
    };
    members
        .iter()
        .filter(|m| m.id != protected_id)
        .map(|m| slot_displacement(m, protected, assignment[&m.id], lane_width))
        .sum()
}

/// Initial world plus the scenario's designated vehicles.
#[derive(Debug, Clone)]
pub struct ScenarioSetup {
    pub world: WorldState<f64>,
    /// The joining, leaving or protected vehicle.
    pub subject: Option<u32>,
    /// Join: the member the joiner settles behind.
    pub join_reference: Option<u32>,
    pub escort_slots: BTreeMap<u32, EscortSlot>,
}

const MAX_JITTER_DRAWS: usize = 64;

pub fn init_scenario(cfg: &ScenarioConfig) -> Result<ScenarioSetup, ScenarioError> {
    cfg.validate()?;
    let hw = &cfg.highway;
    let d_safe = cfg.weights.safe_distance;
    let v0 = cfg.weights.desired_speed;
    let orientation = match cfg.kind {
        ScenarioKind::EscortSwitch => LayoutOrientation::MiddleFront,
        _ => LayoutOrientation::MiddleRear,
    };
    let seats = interlaced_layout(cfg.convoy_size, hw.lane_count, d_safe, orientation);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de_0000_0001);
    let jitter = cfg.position_jitter.abs();
    // Large jitter can push two same-lane members into each other; such draws
    // are discarded and redrawn from the same stream.
    let mut convoy: Vec<VehicleState<f64>> = Vec::new();
    for _ in 0..MAX_JITTER_DRAWS {
        convoy = seats
            .iter()
            .enumerate()
            .map(|(i, &(lane, offset))| {
                let dx = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
                let mut v = VehicleState::convoy(i as u32 + 1, hw, lane, cfg.convoy_head_x + offset + dx, v0);
                v.task = Task::AvoidObstacles;
                v
            })
            .collect();
        let overlapping = convoy
            .iter()
            .enumerate()
            .any(|(i, a)| convoy[i + 1..].iter().any(|b| a.overlaps(b)));
        if !overlapping {
            break;
        }
    }

    let mut subject = None;
    let mut join_reference = None;
    let mut escort_slots = BTreeMap::new();
    match cfg.kind {
        ScenarioKind::AvoidObstacles => {}
        ScenarioKind::JoinConvoy => {
            // The rearmost seat is vacated; its occupant starts 50 m behind
            // the rest of the convoy in an outer lane.
            let joiner_idx = 0;
            let (slot_lane, slot_x) = (convoy[joiner_idx].lane, convoy[joiner_idx].x);
            join_reference = convoy
                .iter()
                .filter(|m| m.lane == slot_lane && m.x > slot_x)
                .min_by(|a, b| a.x.total_cmp(&b.x))
                .map(|m| m.id);
            if join_reference.is_none() {
                return Err(ScenarioError::Placement("vacated seat has no member ahead in its lane".into()));
            }
            let rearmost = convoy
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != joiner_idx)
                .map(|(_, m)| m.x)
                .fold(f64::INFINITY, f64::min);
            let lane = if slot_lane > 0 { slot_lane - 1 } else { (slot_lane + 1).min(hw.lane_count - 1) };
            let joiner = &mut convoy[joiner_idx];
            *joiner = VehicleState::convoy(joiner.id, hw, lane, rearmost - 50.0, v0);
            joiner.task = Task::JoinConvoy;
            joiner.in_formation = false;
            subject = Some(joiner.id);
        }
        ScenarioKind::LeaveConvoy => {
            let leaver = convoy
                .iter_mut()
                .max_by(|a, b| a.x.total_cmp(&b.x).then(b.lane.cmp(&a.lane)))
                .expect("convoy is not empty");
            leaver.task = Task::LeaveConvoy;
            leaver.in_formation = false;
            subject = Some(leaver.id);
        }
        ScenarioKind::EscortSwitch => {
            let center = hw.lane_count / 2;
            let mean_x = convoy.iter().map(|m| m.x).sum::<f64>() / convoy.len() as f64;
            let protected_id = convoy
                .iter()
                .filter(|m| m.lane == center)
                .min_by(|a, b| (a.x - mean_x).abs().total_cmp(&(b.x - mean_x).abs()).then(a.id.cmp(&b.id)))
                .map(|m| m.id)
                .ok_or_else(|| ScenarioError::Placement("no member in the center lane".into()))?;
            escort_slots = assign_escort_slots(protected_id, &convoy, hw, d_safe, EscortSide::Left)?;
            let px = convoy.iter().find(|m| m.id == protected_id).unwrap().x;
            for m in &mut convoy {
                if m.id == protected_id {
                    m.task = Task::Protected;
                    continue;
                }
                m.task = Task::EscortSwitch;
                let (lane, off) = escort_slots[&m.id];
                // Members already seated within jitter keep formation; the rest detach.
                if lane != m.lane || (m.x - (px + off)).abs() > jitter + 1.0 {
                    m.in_formation = false;
                }
            }
            subject = Some(protected_id);
        }
    }

    let env = spawn_environment_vehicles(hw, cfg.env_vehicle_count, cfg.seed)?;
    let mut vehicles = convoy;
    vehicles.extend(env);
    let mut world = WorldState::new(*hw, vehicles, cfg.seed)?;
    world.idm = cfg.idm;
    if !world.collisions.is_empty() {
        return Err(ScenarioError::Placement("initial layout has overlapping vehicles".into()));
    }
    Ok(ScenarioSetup {
        world,
        subject,
        join_reference,
        escort_slots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: u64,
    pub id: u32,
    pub action: DecisionAction,
    /// Wall-clock time of the decision tick's backend call, ms.
    pub latency_ms: f64,
    /// Whether the backend failed or its answer could not be decoded.
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: Option<ScenarioKind>,
    pub seed: u64,
    pub success: bool,
    pub failure_reason: Option<FailureReason>,
    pub avg_convoy_speed: f64,
    /// Largest position error among engaged convoy vehicles at the end.
    pub final_pe: f64,
    pub steps: u64,
    pub sim_time: f64,
    /// Step at which the success criterion was first met in full.
    pub completion_step: Option<u64>,
    /// Per convoy vehicle, position error at every step (absent while detached).
    pub pe_series: BTreeMap<u32, Vec<Option<f64>>>,
    pub speed_series: BTreeMap<u32, Vec<f64>>,
    pub decisions: Vec<DecisionRecord>,
    pub backend_failures: u64,
    pub collisions: Vec<Collision<f64>>,
    pub experiences: Vec<Experience>,
    pub trace: Vec<TraceRow>,
}

impl RunSummary {
    pub fn outcome(&self) -> Outcome {
        self.failure_reason.map_or(Outcome::Success, FailureReason::outcome)
    }

    /// Drops the bulky per-step data, keeping the headline numbers.
    pub fn without_series(mut self) -> Self {
        self.pe_series.clear();
        self.speed_series.clear();
        self.decisions.clear();
        self.experiences.clear();
        self.trace.clear();
        self
    }
}

/// Per-vehicle controller memory between ticks.
#[derive(Debug, Clone, Copy)]
struct Controller {
    targets: ActionTargets<f64>,
    last_action: DecisionAction,
}

struct Runner<'a> {
    cfg: &'a ScenarioConfig,
    setup: ScenarioSetup,
    backend: &'a dyn DecisionBackend,
    pool: Option<&'a SharedExperiencePool>,
    controllers: BTreeMap<u32, Controller>,
    dwell: u64,
    summary: RunSummary,
    speed_sum: f64,
    speed_samples: u64,
}

/// Highest speed that still lets the ego avoid the nearest vehicle ahead that
/// overlaps it laterally, braking at `decel`. A convoy vehicle whose command
/// for this step is known in `planned` and brakes at most half as hard only
/// requires the closing speed to be shed; any other vehicle may keep braking,
/// so the ego must be able to stop behind it.
fn headway_speed_cap(
    world: &WorldState<f64>,
    ego: &VehicleState<f64>,
    decel: f64,
    dt: f64,
    planned: &BTreeMap<u32, VelocityCommand<f64>>,
) -> f64 {
    let min_gap = ego.length + 2.0;
    world
        .vehicles
        .iter()
        .filter(|o| o.id != ego.id && o.x > ego.x)
        .filter(|o| (o.y - ego.y).abs() < (o.width + ego.width) * 0.5 + 0.2)
        .map(|o| {
            let room = 2.0 * decel * (o.x - ego.x - min_gap);
            match planned.get(&o.id) {
                Some(cmd) if cmd.vx >= o.v - 0.5 * decel * dt => o.v + room.max(0.0).sqrt(),
                Some(cmd) => (cmd.vx * cmd.vx + room).max(0.0).sqrt(),
                None => (o.v * o.v + room).max(0.0).sqrt(),
            }
        })
        .fold(f64::INFINITY, f64::min)
}

fn empty_neighbors() -> NeighborSet<f64> {
    NeighborSet::default()
}

impl<'a> Runner<'a> {
    fn world(&self) -> &WorldState<f64> {
        &self.setup.world
    }

    /// Slot a detached vehicle is heading for, in world coordinates.
    fn task_slot(&self, v: &VehicleState<f64>) -> Option<SlotTarget<f64>> {
        if v.in_formation {
            return None;
        }
        let world = self.world();
        match v.task {
            Task::JoinConvoy => {
                let r = world.vehicle(self.setup.join_reference?)?;
                Some(SlotTarget {
                    lane: r.lane,
                    x: r.x - self.cfg.weights.safe_distance,
                    anchor_speed: r.v,
                })
            }
            Task::EscortSwitch => {
                let p = world.vehicle(self.setup.subject?)?;
                let (lane, off) = *self.setup.escort_slots.get(&v.id)?;
                Some(SlotTarget {
                    lane,
                    x: p.x + off,
                    anchor_speed: p.v,
                })
            }
            _ => None,
        }
    }

    fn perceive(&self, id: u32) -> Result<Perception<f64>, ScenarioError> {
        let mut p = self.world().sense(id)?;
        p.task_slot = self.task_slot(self.world().vehicle(id).expect("sensed vehicle exists"));
        Ok(p)
    }

    fn decision_tick(&mut self) -> Result<(), ScenarioError> {
        let cfg = self.cfg;
        let step = self.world().step_index;
        let ids: Vec<u32> = self.world().convoy().map(|v| v.id).collect();
        let mut perceptions = Vec::with_capacity(ids.len());
        let mut scenes = Vec::with_capacity(ids.len());
        let mut prompts: Vec<Prompt> = Vec::with_capacity(ids.len());
        for &id in &ids {
            let p = self.perceive(id)?;
            let ego = self.world().vehicle(id).unwrap();
            let scene = build_scene_description(&p, ego, ego.task, cfg.highway.comm_range);
            let examples = match self.pool {
                Some(pool) => pool.retrieve_similar(ego.task.into(), &scene.features, cfg.reasoning.few_shot_k),
                None => Vec::new(),
            };
            let refs: Vec<&Experience> = examples.iter().collect();
            prompts.push(generate_bounded_prompt(
                &scene,
                &refs,
                cfg.reasoning.few_shot_k,
                cfg.reasoning.max_prompt_chars,
            ));
            perceptions.push(p);
            scenes.push(scene);
        }

        let world = &self.setup.world;
        let requests: Vec<DecisionRequest<'_>> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let ego = world.vehicle(*id).unwrap();
                DecisionRequest {
                    prompt: &prompts[i],
                    scene: OracleScene {
                        perception: &perceptions[i],
                        ego,
                        task: ego.task,
                        targets: self.controllers[id].targets,
                        weights: &cfg.weights,
                        params: cfg.oracle,
                    },
                }
            })
            .collect();
        let started = Instant::now();
        let answers = self.backend.decide_batch(&requests);
        let mut actions = Vec::with_capacity(ids.len());
        for (request, answer) in requests.iter().zip(answers) {
            let decoded = match answer {
                Ok(raw) => match decode_decision(&raw) {
                    Ok(a) => Some(a),
                    Err(_) => {
                        let retry = request.prompt.with_reminder();
                        let again = DecisionRequest { prompt: &retry, scene: request.scene };
                        self.backend.decide(&again).ok().and_then(|raw| decode_decision(&raw).ok())
                    }
                },
                Err(e) => {
                    log::warn!("decision backend failed for vehicle {}: {e}", request.scene.ego.id);
                    None
                }
            };
            actions.push(decoded);
        }
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;
        drop(requests);

        // Apply in ascending id order (ids come from the id-sorted world).
        for ((&id, action), scene) in ids.iter().zip(actions).zip(scenes) {
            let fallback = action.is_none();
            if fallback {
                self.summary.backend_failures += 1;
            }
            let action = action.unwrap_or(DecisionAction::Idle);
            let ego = self.setup.world.vehicle(id).unwrap();
            let ctl = self.controllers.get_mut(&id).unwrap();
            ctl.targets = decode_action(
                action,
                ego,
                &ctl.targets,
                &cfg.highway,
                &cfg.weights,
                cfg.reasoning.speed_step,
            );
            ctl.last_action = action;
            self.summary.decisions.push(DecisionRecord { step, id, action, latency_ms, fallback });
            self.summary.experiences.push(Experience {
                task: scene.task.into(),
                features: scene.features,
                scene_text: scene.text,
                decision: action,
                outcome: Outcome::Success,
                run_seed: cfg.seed,
                step,
            });
        }
        Ok(())
    }

    fn control_tick(&mut self) -> Result<BTreeMap<u32, VelocityCommand<f64>>, ScenarioError> {
        let cfg = self.cfg;
        let w = &cfg.weights;
        let mut commands = BTreeMap::new();
        // Front to back, so each follower sees its leader's command.
        let mut order: Vec<(f64, u32)> = self.world().convoy().map(|v| (v.x, v.id)).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let ids: Vec<u32> = order.into_iter().map(|(_, id)| id).collect();
        for id in ids {
            let nbrs = self.world().sense(id)?.convoy_neighbors;
            let ego = self.world().vehicle(id).unwrap().clone();
            let ctl = self.controllers.get_mut(&id).unwrap();
            let engaged = ego.in_formation;
            let mut accel = 0.0;
            if engaged && ctl.last_action == DecisionAction::Idle {
                if let Some(front) = nbrs.get(Slot::Front) {
                    accel = speed_coordination_accel(ctl.targets.target_speed, front, w.speed_coordination)
                        .clamp(-w.decel, w.accel);
                    ctl.targets.target_speed =
                        (ctl.targets.target_speed + accel * cfg.dt).clamp(0.0, cfg.highway.max_speed);
                }
            }
            let used = if engaged { nbrs } else { empty_neighbors() };
            let mut raw = formation_velocity_command(&ego, &used, w, &ctl.targets, &cfg.highway);
            raw.accel = accel;
            raw.vx = raw.vx.min(headway_speed_cap(self.world(), &ego, w.decel, cfg.dt, &commands));
            commands.insert(id, saturate_command(raw, ego.v, w, cfg.highway.max_speed, cfg.dt));
        }
        Ok(commands)
    }

    /// Re-attaches detached joiners and escort movers that reached their slot.
    fn update_engagement(&mut self) {
        let crit = self.cfg.criteria;
        let lane_tol = self.cfg.highway.lane_width * 0.15;
        let candidates: Vec<(u32, SlotTarget<f64>)> = self
            .world()
            .convoy()
            .filter(|v| !v.in_formation)
            .filter_map(|v| self.task_slot(v).map(|s| (v.id, s)))
            .collect();
        for (id, slot) in candidates {
            let hw = self.cfg.highway;
            let v = self.setup.world.vehicle_mut(id).unwrap();
            let centered = (v.y - hw.lane_center(slot.lane)).abs() < lane_tol;
            if v.lane == slot.lane
                && centered
                && (v.x - slot.x).abs() < crit.engage_distance
                && (v.v - slot.anchor_speed).abs() < crit.engage_speed
            {
                v.in_formation = true;
            }
        }
    }

    fn pe_of(&self, id: u32) -> Result<Option<f64>, ScenarioError> {
        let v = self.world().vehicle(id).unwrap();
        if !v.in_formation {
            return Ok(None);
        }
        let nbrs = self.world().sense(id)?.convoy_neighbors;
        Ok(Some(position_error(v, &nbrs, self.cfg.weights.safe_distance)))
    }

    fn criterion_met(&self, pes: &BTreeMap<u32, Option<f64>>) -> bool {
        let cfg = self.cfg;
        let crit = cfg.criteria;
        let world = self.world();
        let speed_ok = |v: &VehicleState<f64>| (v.v - cfg.weights.desired_speed).abs() < crit.speed_tolerance;
        match cfg.kind {
            ScenarioKind::AvoidObstacles => world.convoy().all(|v| v.x >= cfg.highway.length),
            ScenarioKind::JoinConvoy => {
                let Some(j) = self.setup.subject.and_then(|id| world.vehicle(id)) else {
                    return false;
                };
                let Some(r) = self.setup.join_reference.and_then(|id| world.vehicle(id)) else {
                    return false;
                };
                j.in_formation
                    && j.lane == r.lane
                    && pes[&j.id].is_some_and(|pe| pe < crit.join_pe)
                    && speed_ok(j)
            }
            ScenarioKind::LeaveConvoy => {
                let Some(l) = self.setup.subject.and_then(|id| world.vehicle(id)) else {
                    return false;
                };
                let gone = world
                    .convoy()
                    .filter(|m| m.id != l.id)
                    .all(|m| (m.x - l.x).abs() > cfg.highway.comm_range);
                gone && pes
                    .iter()
                    .filter(|(id, _)| **id != l.id)
                    .all(|(_, pe)| pe.is_some_and(|pe| pe < crit.leave_pe))
            }
            ScenarioKind::EscortSwitch => {
                let Some(p) = self.setup.subject.and_then(|id| world.vehicle(id)) else {
                    return false;
                };
                world.convoy().all(|m| {
                    let Some(&(lane, off)) = self.setup.escort_slots.get(&m.id) else {
                        return false;
                    };
                    m.in_formation
                        && m.lane == lane
                        && (m.x - (p.x + off)).abs() < crit.slot_tolerance
                        && speed_ok(m)
                })
            }
        }
    }

    fn needs_dwell(&self) -> bool {
        matches!(self.cfg.kind, ScenarioKind::JoinConvoy | ScenarioKind::EscortSwitch)
    }

    fn record(&mut self, pes: &BTreeMap<u32, Option<f64>>) {
        let step = self.setup.world.step_index;
        let world = &self.setup.world;
        for v in world.convoy() {
            self.summary.speed_series.entry(v.id).or_default().push(v.v);
            self.summary.pe_series.entry(v.id).or_default().push(pes[&v.id]);
            self.speed_sum += v.v;
            self.speed_samples += 1;
        }
        let stride = self.cfg.trace_stride;
        if stride > 0 && step.is_multiple_of(stride) {
            for v in &world.vehicles {
                let (decision, pe) = if v.is_convoy() {
                    (Some(self.controllers[&v.id].last_action), pes[&v.id])
                } else {
                    (None, None)
                };
                self.summary.trace.push(TraceRow {
                    step,
                    time: world.time,
                    id: v.id,
                    role: v.role,
                    task: v.task,
                    lane: v.lane,
                    x: v.x,
                    y: v.y,
                    v: v.v,
                    vy: v.vy,
                    decision,
                    position_error: pe,
                });
            }
        }
    }

    fn all_pe(&self) -> Result<BTreeMap<u32, Option<f64>>, ScenarioError> {
        let ids: Vec<u32> = self.world().convoy().map(|v| v.id).collect();
        ids.into_iter().map(|id| Ok((id, self.pe_of(id)?))).collect()
    }

    fn run(mut self) -> Result<RunSummary, ScenarioError> {
        let cfg = self.cfg;
        let every = cfg.decision_every();
        let dwell_steps = (cfg.criteria.dwell_secs / cfg.dt).round() as u64;
        let max_steps = (cfg.max_sim_time / cfg.dt).round() as u64;
        let pes = self.all_pe()?;
        self.record(&pes);
        let mut failure = None;
        loop {
            if self.world().step_index.is_multiple_of(every) {
                self.decision_tick()?;
            }
            let commands = self.control_tick()?;
            self.setup.world.step(&commands, cfg.dt)?;
            self.update_engagement();
            let pes = self.all_pe()?;
            self.record(&pes);

            let convoy_hit = self.world().collisions.iter().any(|c| {
                [c.a, c.b]
                    .iter()
                    .any(|id| self.world().vehicle(*id).is_some_and(VehicleState::is_convoy))
            });
            if convoy_hit {
                failure = Some(FailureReason::Collision);
                break;
            }
            if self.criterion_met(&pes) {
                self.dwell += 1;
                let done = !self.needs_dwell() || self.dwell >= dwell_steps;
                if done {
                    self.summary.completion_step = Some(self.world().step_index);
                    break;
                }
            } else {
                self.dwell = 0;
            }
            if self.world().step_index >= max_steps {
                failure = Some(FailureReason::Timeout);
                break;
            }
        }

        let pes = self.all_pe()?;
        let world = &self.setup.world;
        let summary = &mut self.summary;
        summary.scenario = Some(cfg.kind);
        summary.seed = cfg.seed;
        summary.success = failure.is_none();
        summary.failure_reason = failure;
        summary.steps = world.step_index;
        summary.sim_time = world.time;
        summary.collisions = world.collisions.clone();
        summary.avg_convoy_speed = if self.speed_samples > 0 {
            self.speed_sum / self.speed_samples as f64
        } else {
            0.0
        };
        summary.final_pe = pes.values().flatten().fold(0.0, |a: f64, &b| a.max(b));
        let outcome = summary.outcome();
        for e in &mut summary.experiences {
            e.outcome = outcome;
        }
        Ok(self.summary)
    }
}

/// Runs one scenario with the backend described in the config.
pub fn run_scenario(cfg: &ScenarioConfig, pool: Option<&SharedExperiencePool>) -> Result<RunSummary, ScenarioError> {
    cfg.validate()?;
    let backend = build_backend(&cfg.backend)?;
    run_scenario_with(cfg, backend.as_ref(), pool)
}

/// Runs one scenario against an explicit backend instance.
pub fn run_scenario_with(
    cfg: &ScenarioConfig,
    backend: &dyn DecisionBackend,
    pool: Option<&SharedExperiencePool>,
) -> Result<RunSummary, ScenarioError> {
    let setup = init_scenario(cfg)?;
    let controllers = setup
        .world
        .convoy()
        .map(|v| {
            (
                v.id,
                Controller {
                    targets: ActionTargets {
                        target_lane: v.lane,
                        target_speed: v.v,
                    },
                    last_action: DecisionAction::Idle,
                },
            )
        })
        .collect();
    let runner = Runner {
        cfg,
        setup,
        backend,
        pool,
        controllers,
        dwell: 0,
        summary: RunSummary::default(),
        speed_sum: 0.0,
        speed_samples: 0,
    };
    runner.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub seed: u64,
    pub success: bool,
    pub failure_reason: Option<FailureReason>,
    pub avg_speed: f64,
    #[serde(rename = "final_PE")]
    pub final_pe: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchAggregate {
    pub scenario: ScenarioKind,
    pub density: usize,
    pub runs: usize,
    pub successes: usize,
    pub errors: usize,
    pub success_rate: f64,
    pub mean_avg_speed: f64,
    /// Average-speed histogram in 1 m/s bins from 0 to the speed limit.
    pub avg_speed_histogram: Vec<HistogramBin>,
    pub entries: Vec<BatchEntry>,
}

impl BatchAggregate {
    pub fn from_entries(template: &ScenarioConfig, entries: Vec<BatchEntry>) -> Self {
        let runs = entries.len();
        let errors = entries.iter().filter(|e| e.error.is_some()).count();
        let successes = entries.iter().filter(|e| e.success).count();
        let speeds: Vec<f64> = entries
            .iter()
            .filter(|e| e.error.is_none())
            .map(|e| e.avg_speed)
            .collect();
        let bins = template.highway.max_speed.ceil().max(1.0) as usize;
        let mut histogram: Vec<HistogramBin> = (0..bins)
            .map(|i| HistogramBin {
                lo: i as f64,
                hi: i as f64 + 1.0,
                count: 0,
            })
            .collect();
        for &s in &speeds {
            let idx = (s.floor().max(0.0) as usize).min(bins - 1);
            histogram[idx].count += 1;
        }
        BatchAggregate {
            scenario: template.kind,
            density: template.env_vehicle_count,
            runs,
            successes,
            errors,
            success_rate: if runs > 0 { successes as f64 / runs as f64 } else { 0.0 },
            mean_avg_speed: if speeds.is_empty() {
                0.0
            } else {
                speeds.iter().sum::<f64>() / speeds.len() as f64
            },
            avg_speed_histogram: histogram,
            entries,
        }
    }
}

/// Runs every seed of `template` on up to `workers` threads. `on_run` sees
/// each finished run (in completion order) before its bulky data is dropped;
/// the aggregate lists runs in seed order.
pub fn run_batch<F>(
    template: &ScenarioConfig,
    seeds: &[u64],
    workers: usize,
    pool: Option<&SharedExperiencePool>,
    on_run: F,
) -> Result<BatchAggregate, ScenarioError>
where
    F: Fn(&ScenarioConfig, &Result<RunSummary, ScenarioError>) + Sync,
{
    if seeds.is_empty() {
        return Err(ScenarioError::Config("batch needs at least one seed".into()));
    }
    template.validate()?;
    let backend = build_backend(&template.backend)?;
    let backend = backend.as_ref();
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ScenarioError::Config(format!("cannot start worker pool: {e}")))?;
    let entries: Vec<BatchEntry> = threads.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let cfg = ScenarioConfig { seed, ..template.clone() };
                let result = run_scenario_with(&cfg, backend, pool);
                on_run(&cfg, &result);
                match result {
                    Ok(s) => BatchEntry {
                        seed,
                        success: s.success,
                        failure_reason: s.failure_reason,
                        avg_speed: s.avg_convoy_speed,
                        final_pe: s.final_pe,
                        error: None,
                    },
                    Err(e) => BatchEntry {
                        seed,
                        success: false,
                        failure_reason: None,
                        avg_speed: 0.0,
                        final_pe: 0.0,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    Ok(BatchAggregate::from_entries(template, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn members_at(positions: &[(u32, usize, f64)]) -> Vec<VehicleState<f64>> {
        let hw = HighwayConfig::default();
        positions
            .iter()
            .map(|&(id, lane, x)| VehicleState::convoy(id, &hw, lane, x, 25.0))
            .collect()
    }

    #[test]
    fn scenario_kind_names() {
        for k in ScenarioKind::ALL {
            assert_eq!(k.as_str().parse::<ScenarioKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert_eq!("join_convoy".parse::<ScenarioKind>().unwrap(), ScenarioKind::JoinConvoy);
        assert!("merge".parse::<ScenarioKind>().is_err());
    }

    #[test]
    fn seated_escort_is_identity() {
        let slots = escort_slot_offsets(1, 10.0, EscortSide::Left);
        let mut pos = vec![(1, 1, 100.0)];
        for (i, &(lane, off)) in slots.iter().enumerate() {
            pos.push((i as u32 + 2, lane, 100.0 + off));
        }
        let members = members_at(&pos);
        let hw = HighwayConfig::default();
        let a = assign_escort_slots(1, &members, &hw, 10.0, EscortSide::Left).unwrap();
        for m in &members[1..] {
            let (lane, off) = a[&m.id];
            assert_eq!(lane, m.lane);
            assert!((100.0 + off - m.x).abs() < 1e-12);
        }
        assert_eq!(assignment_cost(&a, 1, &members, hw.lane_width), 0.0);
    }

    #[test]
    fn mirrored_layout_gives_mirrored_assignment() {
        let pos = [
            (1, 1, 0.0),
            (2, 0, -5.0),
            (3, 2, -5.0),
            (4, 1, -10.0),
            (5, 0, -15.0),
            (6, 2, -15.0),
            (7, 1, -20.0),
            (8, 0, -25.0),
        ];
        let mirrored: Vec<_> = pos.iter().map(|&(id, lane, x)| (id, 2 - lane, x)).collect();
        let hw = HighwayConfig::default();
        let a = assign_escort_slots(4, &members_at(&pos), &hw, 10.0, EscortSide::Left).unwrap();
        let b = assign_escort_slots(4, &members_at(&mirrored), &hw, 10.0, EscortSide::Right).unwrap();
        for (id, (lane, off)) in &a {
            assert_eq!(b[id], (2 - lane, *off));
        }
        assert_eq!(a[&8], (2, -15.0));
    }

    #[test]
    fn assignment_is_a_bijection() {
        let pos: Vec<_> = (1..=8).map(|i| (i, (i % 3) as usize, -(i as f64) * 4.0)).collect();
        let members = members_at(&pos);
        let a = assign_escort_slots(4, &members, &HighwayConfig::default(), 10.0, EscortSide::Left).unwrap();
        assert_eq!(a.len(), 8);
        let mut seen: Vec<_> = a.values().map(|&(l, o)| (l, (o * 10.0) as i64)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn wrong_member_count_is_rejected() {
        let members = members_at(&[(1, 1, 0.0), (2, 0, -5.0)]);
        assert!(assign_escort_slots(1, &members, &HighwayConfig::default(), 10.0, EscortSide::Left).is_err());
    }

    #[test]
    fn avoid_setup_counts_and_determinism() {
        let cfg = ScenarioConfig::new(ScenarioKind::AvoidObstacles, 7);
        let a = init_scenario(&cfg).unwrap();
        let b = init_scenario(&cfg).unwrap();
        assert_eq!(a.world.convoy().count(), 8);
        assert_eq!(a.world.vehicles.len(), 28);
        assert_eq!(a.world.vehicles, b.world.vehicles);
        let spawn_start = 0.0;
        assert!(a.world.convoy().all(|v| v.x < spawn_start));
    }

    #[test]
    fn join_setup_places_joiner_behind() {
        for seed in 0..5 {
            let setup = init_scenario(&ScenarioConfig::new(ScenarioKind::JoinConvoy, seed)).unwrap();
            let joiners: Vec<_> = setup.world.convoy().filter(|v| v.task == Task::JoinConvoy).collect();
            assert_eq!(joiners.len(), 1);
            let rearmost = setup
                .world
                .convoy()
                .filter(|v| v.task != Task::JoinConvoy)
                .map(|v| v.x)
                .fold(f64::INFINITY, f64::min);
            assert!((rearmost - joiners[0].x - 50.0).abs() < 0.1);
        }
    }

    #[test]
    fn escort_setup_marks_roles() {
        let setup = init_scenario(&ScenarioConfig::new(ScenarioKind::EscortSwitch, 1)).unwrap();
        let protected: Vec<_> = setup.world.convoy().filter(|v| v.task == Task::Protected).collect();
        assert_eq!(protected.len(), 1);
        assert_eq!(protected[0].lane, 1);
        assert_eq!(setup.world.convoy().filter(|v| v.task == Task::EscortSwitch).count(), 7);
        assert_eq!(setup.escort_slots.len(), 8);
    }

    #[test]
    fn empty_road_cruises_at_desired_speed() {
        let mut cfg = ScenarioConfig::new(ScenarioKind::AvoidObstacles, 3);
        cfg.env_vehicle_count = 0;
        let s = run_scenario(&cfg, None).unwrap();
        assert!(s.success, "{:?}", s.failure_reason);
        assert!((s.avg_convoy_speed - 25.0).abs() < 0.2, "{}", s.avg_convoy_speed);
        assert!(s.experiences.iter().all(|e| e.outcome == Outcome::Success));
    }

    #[test]
    fn batch_aggregate_arithmetic() {
        let cfg = ScenarioConfig::new(ScenarioKind::AvoidObstacles, 0);
        let entries = vec![
            BatchEntry { seed: 0, success: true, failure_reason: None, avg_speed: 24.5, final_pe: 0.0, error: None },
            BatchEntry { seed: 1, success: false, failure_reason: Some(FailureReason::Collision), avg_speed: 20.2, final_pe: 0.0, error: None },
        ];
        let agg = BatchAggregate::from_entries(&cfg, entries);
        assert_eq!(agg.runs, 2);
        assert_eq!(agg.success_rate, 0.5);
        assert_eq!(agg.avg_speed_histogram[24].count, 1);
        assert_eq!(agg.avg_speed_histogram[20].count, 1);
        assert_eq!(agg.avg_speed_histogram.iter().map(|b| b.count).sum::<usize>(), 2);
    }
}
