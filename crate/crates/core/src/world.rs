//! Highway geometry, vehicle states, environment traffic and collision detection.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formation::{compute_neighbors, NeighborSet, VelocityCommand};
use crate::scalar::Scalar;

/// Vehicle ids at or above this value belong to environment traffic.
pub const ENV_ID_OFFSET: u32 = 100;

/// Re-draw budget per vehicle when spawning environment traffic.
const SPAWN_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("unknown vehicle id {0}")]
    UnknownVehicle(u32),
    #[error("convoy vehicle {0} has no velocity command")]
    MissingCommand(u32),
    #[error("vehicle {0} is not a convoy vehicle and cannot be commanded")]
    NotCommandable(u32),
    #[error("duplicate vehicle id {0}")]
    DuplicateId(u32),
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("could only place {placed} of {requested} environment vehicles without overlap")]
    SpawnCapacity { placed: usize, requested: usize },
    #[error("invalid highway configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Convoy,
    Environment,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Convoy => "convoy",
            Role::Environment => "environment",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    None,
    AvoidObstacles,
    JoinConvoy,
    LeaveConvoy,
    EscortSwitch,
    Protected,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::None => "none",
            Task::AvoidObstacles => "avoid_obstacles",
            Task::JoinConvoy => "join_convoy",
            Task::LeaveConvoy => "leave_convoy",
            Task::EscortSwitch => "escort_switch",
            Task::Protected => "protected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighwayConfig<T> {
    pub length: T,
    pub lane_count: usize,
    pub lane_width: T,
    pub max_speed: T,
    pub comm_range: T,
    pub spawn_region_end: T,
}

impl<T: Scalar> Default for HighwayConfig<T> {
    fn default() -> Self {
        Self {
            length: T::lit(1000.0),
            lane_count: 3,
            lane_width: T::lit(3.2),
            max_speed: T::lit(30.0),
            comm_range: T::lit(100.0),
            spawn_region_end: T::lit(700.0),
        }
    }
}

impl<T: Scalar> HighwayConfig<T> {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |msg: &str| Err(WorldError::InvalidConfig(msg.to_string()));
        if self.lane_count == 0 {
            return bad("lane_count must be at least 1");
        }
        if !(self.length > T::zero()) {
            return bad("length must be positive");
        }
        if !(self.spawn_region_end > T::zero() && self.spawn_region_end <= self.length) {
            return bad("spawn_region_end must lie in (0, length]");
        }
        if !(self.max_speed > T::zero()) {
            return bad("max_speed must be positive");
        }
        if !(self.lane_width > T::zero()) {
            return bad("lane_width must be positive");
        }
        if !(self.comm_range > T::zero()) {
            return bad("comm_range must be positive");
        }
        Ok(())
    }

    /// Lateral coordinate of a lane centerline; lane 0 is the rightmost lane.
    pub fn lane_center(&self, lane: usize) -> T {
        (T::from_usize(lane).unwrap() + T::lit(0.5)) * self.lane_width
    }

    pub fn road_width(&self) -> T {
        T::from_usize(self.lane_count).unwrap() * self.lane_width
    }

    pub fn lane_of(&self, y: T) -> usize {
        let raw = (y / self.lane_width).floor();
        if raw <= T::zero() {
            0
        } else {
            raw.to_usize().unwrap_or(usize::MAX).min(self.lane_count - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState<T> {
    pub id: u32,
    pub role: Role,
    pub task: Task,
    pub lane: usize,
    pub x: T,
    pub y: T,
    pub v: T,
    pub vy: T,
    pub length: T,
    pub width: T,
    /// Free-road cruise speed; environment vehicles keep their initial speed as this.
    pub desired_speed: T,
    /// Whether the vehicle currently participates in the convoy's neighbor graph.
    pub in_formation: bool,
}

impl<T: Scalar> VehicleState<T> {
    pub fn convoy(id: u32, highway: &HighwayConfig<T>, lane: usize, x: T, v: T) -> Self {
        Self {
            id,
            role: Role::Convoy,
            task: Task::None,
            lane,
            x,
            y: highway.lane_center(lane),
            v,
            vy: T::zero(),
            length: T::lit(5.0),
            width: T::lit(1.8),
            desired_speed: v,
            in_formation: true,
        }
    }

    pub fn environment(id: u32, highway: &HighwayConfig<T>, lane: usize, x: T, v: T) -> Self {
        Self {
            role: Role::Environment,
            in_formation: false,
            ..Self::convoy(id, highway, lane, x, v)
        }
    }

    pub fn is_convoy(&self) -> bool {
        self.role == Role::Convoy
    }

    /// Axis-aligned footprint overlap test.
    pub fn overlaps(&self, other: &Self) -> bool {
        let half = T::lit(0.5);
        (self.x - other.x).abs() < (self.length + other.length) * half
            && (self.y - other.y).abs() < (self.width + other.width) * half
    }
}

/// Intelligent Driver Model parameters for environment traffic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams<T> {
    pub time_headway: T,
    pub min_gap: T,
    pub max_accel: T,
    pub comfort_decel: T,
    /// Hard bound on braking; the raw model is unbounded near zero gap.
    pub max_decel: T,
    pub exponent: T,
}

impl<T: Scalar> Default for IdmParams<T> {
    fn default() -> Self {
        Self {
            time_headway: T::lit(1.5),
            min_gap: T::lit(2.0),
            max_accel: T::lit(1.0),
            comfort_decel: T::lit(2.0),
            max_decel: T::lit(9.0),
            exponent: T::lit(4.0),
        }
    }
}

/// IDM acceleration of `ego` behind an optional `leader`, clamped to
/// `[-max_decel, max_accel]`.
pub fn env_vehicle_accel<T: Scalar>(
    ego: &VehicleState<T>,
    leader: Option<&VehicleState<T>>,
    p: &IdmParams<T>,
) -> T {
    let v0 = ego.desired_speed.max(T::lit(1e-3));
    let free = T::one() - (ego.v / v0).powf(p.exponent);
    let interaction = match leader {
        Some(lead) => {
            let gap = (lead.x - ego.x - (lead.length + ego.length) * T::lit(0.5)).max(T::lit(1e-3));
            let dv = ego.v - lead.v;
            let s_star = p.min_gap
                + (ego.v * p.time_headway
                    + ego.v * dv / (T::lit(2.0) * (p.max_accel * p.comfort_decel).sqrt()))
                .max(T::zero());
            (s_star / gap).powi(2)
        }
        None => T::zero(),
    };
    (p.max_accel * (free - interaction)).clamp_to(-p.max_decel, p.max_accel)
}

/// Randomly places `count` environment vehicles inside the spawn region.
///
/// Positions, lanes and speeds are uniform; a draw that lands within two
/// vehicle lengths of an already placed vehicle in the same lane is redrawn.
pub fn spawn_environment_vehicles<T: Scalar>(
    cfg: &HighwayConfig<T>,
    count: usize,
    seed: u64,
) -> Result<Vec<VehicleState<T>>, WorldError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spawn_end = cfg.spawn_region_end.as_f64();
    let mut placed: Vec<VehicleState<T>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut accepted = None;
        for _ in 0..SPAWN_ATTEMPTS {
            let x = T::lit(rng.random_range(0.0..=spawn_end));
            let lane = rng.random_range(0..cfg.lane_count);
            let v = T::lit(rng.random_range(15.0..=30.0)).min(cfg.max_speed);
            let candidate = VehicleState::environment(ENV_ID_OFFSET + i as u32, cfg, lane, x, v);
            let min_gap = candidate.length * T::lit(2.0);
            let clear = placed
                .iter()
                .all(|other| other.lane != lane || (other.x - x).abs() >= min_gap);
            if clear {
                accepted = Some(candidate);
                break;
            }
        }
        match accepted {
            Some(vehicle) => placed.push(vehicle),
            None => {
                return Err(WorldError::SpawnCapacity {
                    placed: placed.len(),
                    requested: count,
                })
            }
        }
    }
    Ok(placed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Collision<T> {
    pub a: u32,
    pub b: u32,
    pub time: T,
}

/// One vehicle as seen by another over the communication link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensedVehicle<T> {
    pub id: u32,
    pub lane: usize,
    pub x: T,
    pub v: T,
}

/// Longitudinal and lateral target a vehicle is steering toward for its task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotTarget<T> {
    pub lane: usize,
    pub x: T,
    /// Speed of the vehicle the slot is anchored to.
    pub anchor_speed: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perception<T> {
    pub lane_count: usize,
    pub max_speed: T,
    /// Environment vehicles within communication range, nearest first.
    pub env_vehicles: Vec<SensedVehicle<T>>,
    pub convoy_neighbors: NeighborSet<T>,
    /// Every other convoy vehicle within range, formation members or not.
    pub convoy_vehicles: Vec<SensedVehicle<T>>,
    pub task_slot: Option<SlotTarget<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState<T> {
    pub time: T,
    pub step_index: u64,
    pub highway: HighwayConfig<T>,
    /// Sorted by id.
    pub vehicles: Vec<VehicleState<T>>,
    pub rng_seed: u64,
    pub collisions: Vec<Collision<T>>,
    pub idm: IdmParams<T>,
}

impl<T: Scalar> WorldState<T> {
    pub fn new(
        highway: HighwayConfig<T>,
        mut vehicles: Vec<VehicleState<T>>,
        rng_seed: u64,
    ) -> Result<Self, WorldError> {
        highway.validate()?;
        vehicles.sort_by_key(|v| v.id);
        if let Some(dup) = vehicles.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(WorldError::DuplicateId(dup[0].id));
        }
        for v in &mut vehicles {
            v.lane = highway.lane_of(v.y);
        }
        let mut world = Self {
            time: T::zero(),
            step_index: 0,
            highway,
            vehicles,
            rng_seed,
            collisions: Vec::new(),
            idm: IdmParams::default(),
        };
        world.record_collisions();
        Ok(world)
    }

    pub fn vehicle(&self, id: u32) -> Option<&VehicleState<T>> {
        self.vehicles
            .binary_search_by_key(&id, |v| v.id)
            .ok()
            .map(|i| &self.vehicles[i])
    }

    pub fn vehicle_mut(&mut self, id: u32) -> Option<&mut VehicleState<T>> {
        self.vehicles
            .binary_search_by_key(&id, |v| v.id)
            .ok()
            .map(move |i| &mut self.vehicles[i])
    }

    pub fn convoy(&self) -> impl Iterator<Item = &VehicleState<T>> {
        self.vehicles.iter().filter(|v| v.is_convoy())
    }

    /// Nearest vehicle ahead of `ego` whose footprint shares its lateral band
    /// (same lane index, or laterally overlapping during a lane change).
    pub fn leader_of(&self, ego: &VehicleState<T>) -> Option<&VehicleState<T>> {
        self.vehicles
            .iter()
            .filter(|o| o.id != ego.id && o.x > ego.x)
            .filter(|o| o.lane == ego.lane || (o.y - ego.y).abs() < (o.width + ego.width) * T::lit(0.5))
            .min_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.id.cmp(&b.id)))
    }

    /// Advances the world by one tick. Convoy vehicles take their speeds from
    /// `commands`; environment vehicles follow the car-following model.
    pub fn step(
        &mut self,
        commands: &BTreeMap<u32, VelocityCommand<T>>,
        dt: T,
    ) -> Result<(), WorldError> {
        if !(dt > T::zero()) {
            return Err(WorldError::InvalidTimeStep(dt.as_f64()));
        }
        for id in commands.keys() {
            match self.vehicle(*id) {
                None => return Err(WorldError::UnknownVehicle(*id)),
                Some(v) if !v.is_convoy() => return Err(WorldError::NotCommandable(*id)),
                Some(_) => {}
            }
        }
        if let Some(missing) = self.convoy().find(|v| !commands.contains_key(&v.id)) {
            return Err(WorldError::MissingCommand(missing.id));
        }

        let env_accel: Vec<Option<T>> = self
            .vehicles
            .iter()
            .map(|v| match v.role {
                Role::Environment => Some(env_vehicle_accel(v, self.leader_of(v), &self.idm)),
                Role::Convoy => None,
            })
            .collect();

        let max_speed = self.highway.max_speed;
        let half_width_limit = |w: T| (w * T::lit(0.5), self.highway.road_width() - w * T::lit(0.5));
        for (vehicle, accel) in self.vehicles.iter_mut().zip(env_accel) {
            match accel {
                Some(a) => {
                    vehicle.v = (vehicle.v + a * dt).clamp_to(T::zero(), max_speed);
                    vehicle.vy = T::zero();
                }
                None => {
                    let cmd = &commands[&vehicle.id];
                    vehicle.v = cmd.vx.clamp_to(T::zero(), max_speed);
                    vehicle.vy = cmd.vy;
                }
            }
            vehicle.x = vehicle.x + vehicle.v * dt;
            let (lo, hi) = half_width_limit(vehicle.width);
            let y = vehicle.y + vehicle.vy * dt;
            if y < lo || y > hi {
                vehicle.vy = T::zero();
            }
            vehicle.y = y.clamp_to(lo, hi);
            vehicle.lane = self.highway.lane_of(vehicle.y);
        }

        self.step_index += 1;
        self.time = T::from_u64(self.step_index).unwrap() * dt;
        self.record_collisions();
        Ok(())
    }

    fn record_collisions(&mut self) {
        let seen: BTreeSet<(u32, u32)> = self.collisions.iter().map(|c| (c.a, c.b)).collect();
        for (a, b) in detect_collisions(self) {
            if !seen.contains(&(a, b)) {
                self.collisions.push(Collision { a, b, time: self.time });
            }
        }
    }

    /// Builds what `ego_id` perceives: road facts, nearby traffic and its
    /// convoy neighbor slots.
    pub fn sense(&self, ego_id: u32) -> Result<Perception<T>, WorldError> {
        let ego = self.vehicle(ego_id).ok_or(WorldError::UnknownVehicle(ego_id))?;
        let range = self.highway.comm_range;
        let in_range = |o: &&VehicleState<T>| o.id != ego_id && (o.x - ego.x).abs() <= range;
        let sensed = |o: &VehicleState<T>| SensedVehicle {
            id: o.id,
            lane: o.lane,
            x: o.x,
            v: o.v,
        };
        let by_distance = |a: &SensedVehicle<T>, b: &SensedVehicle<T>| {
            let da = (a.x - ego.x).abs();
            let db = (b.x - ego.x).abs();
            da.partial_cmp(&db).unwrap().then(a.id.cmp(&b.id))
        };

        let mut env_vehicles: Vec<_> = self
            .vehicles
            .iter()
            .filter(in_range)
            .filter(|o| !o.is_convoy())
            .map(sensed)
            .collect();
        env_vehicles.sort_by(by_distance);
        let mut convoy_vehicles: Vec<_> = self
            .vehicles
            .iter()
            .filter(in_range)
            .filter(|o| o.is_convoy())
            .map(sensed)
            .collect();
        convoy_vehicles.sort_by(by_distance);

        let members: Vec<VehicleState<T>> = self
            .vehicles
            .iter()
            .filter(|o| o.is_convoy() && o.in_formation && o.id != ego_id)
            .cloned()
            .collect();
        let convoy_neighbors = if ego.is_convoy() {
            compute_neighbors(ego, &members, range)
        } else {
            NeighborSet::default()
        };

        Ok(Perception {
            lane_count: self.highway.lane_count,
            max_speed: self.highway.max_speed,
            env_vehicles,
            convoy_neighbors,
            convoy_vehicles,
            task_slot: None,
        })
    }
}

/// Every unordered pair of vehicles whose footprints overlap, as `(lower id, higher id)`.
pub fn detect_collisions<T: Scalar>(world: &WorldState<T>) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    for (i, a) in world.vehicles.iter().enumerate() {
        for b in &world.vehicles[i + 1..] {
            if a.overlaps(b) {
                pairs.push((a.id.min(b.id), a.id.max(b.id)));
            }
        }
    }
    pairs
}
