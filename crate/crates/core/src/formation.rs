//! Interlaced formation control over the six-slot local neighbor graph.
//!
//! Every convoy vehicle tracks at most six neighbors: the nearest convoy
//! vehicle ahead and behind in its own lane and in each adjacent lane. The
//! longitudinal command is the reasoning layer's target speed plus a weighted
//! sum of gap errors to those neighbors; the lateral command steers toward the
//! target lane centerline. Desired gaps are signed: forward neighbors sit at
//! `+d`, backward neighbors at `-d`, with `d = D_safe` in the same lane and
//! `D_safe / 2` in adjacent lanes.

use serde::{Deserialize, Serialize};

use crate::reasoning::ActionTargets;
use crate::scalar::Scalar;
use crate::world::{HighwayConfig, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    #[serde(rename = "N_f")]
    Front,
    #[serde(rename = "N_b")]
    Back,
    #[serde(rename = "N_fl")]
    FrontLeft,
    #[serde(rename = "N_bl")]
    BackLeft,
    #[serde(rename = "N_fr")]
    FrontRight,
    #[serde(rename = "N_br")]
    BackRight,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::Front,
        Slot::Back,
        Slot::FrontLeft,
        Slot::BackLeft,
        Slot::FrontRight,
        Slot::BackRight,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Slot::Front => "N_f",
            Slot::Back => "N_b",
            Slot::FrontLeft => "N_fl",
            Slot::BackLeft => "N_bl",
            Slot::FrontRight => "N_fr",
            Slot::BackRight => "N_br",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn is_forward(self) -> bool {
        matches!(self, Slot::Front | Slot::FrontLeft | Slot::FrontRight)
    }

    pub fn is_same_lane(self) -> bool {
        matches!(self, Slot::Front | Slot::Back)
    }

    /// Sector of a vehicle `lane_delta` lanes to the left (negative: right) of
    /// the ego; `None` when more than one lane away.
    pub fn classify(lane_delta: i64, forward: bool) -> Option<Slot> {
        let slot = match (lane_delta, forward) {
            (0, true) => Slot::Front,
            (0, false) => Slot::Back,
            (1, true) => Slot::FrontLeft,
            (1, false) => Slot::BackLeft,
            (-1, true) => Slot::FrontRight,
            (-1, false) => Slot::BackRight,
            _ => return None,
        };
        Some(slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor<T> {
    pub id: u32,
    pub x: T,
    pub v: T,
    pub lane: usize,
}

/// The dynamic local graph around one ego vehicle. Absent slots contribute
/// nothing to the control sum or the position error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborSet<T> {
    slots: [Option<Neighbor<T>>; 6],
}

impl<T> Default for NeighborSet<T> {
    fn default() -> Self {
        Self { slots: std::array::from_fn(|_| None) }
    }
}

impl<T: Copy> NeighborSet<T> {
    pub fn get(&self, slot: Slot) -> Option<&Neighbor<T>> {
        self.slots[slot.index()].as_ref()
    }

    pub fn set(&mut self, slot: Slot, neighbor: Option<Neighbor<T>>) {
        self.slots[slot.index()] = neighbor;
    }

    pub fn occupied(&self) -> impl Iterator<Item = (Slot, &Neighbor<T>)> {
        Slot::ALL
            .iter()
            .filter_map(move |&s| self.slots[s.index()].as_ref().map(|n| (s, n)))
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Formation weights and motion limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlWeights<T> {
    #[serde(rename = "w_f")]
    pub front: T,
    #[serde(rename = "w_b")]
    pub back: T,
    #[serde(rename = "w_fl")]
    pub front_left: T,
    #[serde(rename = "w_bl")]
    pub back_left: T,
    #[serde(rename = "w_fr")]
    pub front_right: T,
    #[serde(rename = "w_br")]
    pub back_right: T,
    #[serde(rename = "w_y")]
    pub lateral: T,
    #[serde(rename = "w_v")]
    pub speed_coordination: T,
    #[serde(rename = "d_safe")]
    pub safe_distance: T,
    #[serde(rename = "acc")]
    pub accel: T,
    #[serde(rename = "dec")]
    pub decel: T,
    #[serde(rename = "v_desired")]
    pub desired_speed: T,
    #[serde(rename = "vy_max")]
    pub lateral_speed_limit: T,
}

impl<T: Scalar> Default for ControlWeights<T> {
    fn default() -> Self {
        Self {
            front: T::lit(2.0),
            back: T::lit(1.0),
            front_left: T::lit(1.0),
            back_left: T::lit(0.1),
            front_right: T::lit(1.0),
            back_right: T::lit(0.1),
            lateral: T::lit(1.8),
            speed_coordination: T::lit(0.5),
            safe_distance: T::lit(10.0),
            accel: T::lit(1.0),
            decel: T::lit(2.0),
            desired_speed: T::lit(25.0),
            lateral_speed_limit: T::lit(0.7),
        }
    }
}

impl<T: Scalar> ControlWeights<T> {
    pub fn slot_weight(&self, slot: Slot) -> T {
        match slot {
            Slot::Front => self.front,
            Slot::Back => self.back,
            Slot::FrontLeft => self.front_left,
            Slot::BackLeft => self.back_left,
            Slot::FrontRight => self.front_right,
            Slot::BackRight => self.back_right,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let weights = [
            self.front,
            self.back,
            self.front_left,
            self.back_left,
            self.front_right,
            self.back_right,
            self.lateral,
            self.speed_coordination,
        ];
        if weights.iter().any(|w| !(*w >= T::zero())) {
            return Err("formation weights must be non-negative".into());
        }
        if !(self.safe_distance > T::zero()) {
            return Err("d_safe must be positive".into());
        }
        if !(self.accel > T::zero() && self.decel > T::zero()) {
            return Err("acc and dec must be positive".into());
        }
        if !(self.lateral_speed_limit > T::zero()) {
            return Err("vy_max must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityCommand<T> {
    pub vx: T,
    pub vy: T,
    pub accel: T,
}

/// Fills the six neighbor slots of `ego` from `convoy` (which must not contain
/// the ego). Each slot holds the nearest qualifying vehicle within
/// `comm_range`; equal distances go to the lower id.
pub fn compute_neighbors<T: Scalar>(
    ego: &VehicleState<T>,
    convoy: &[VehicleState<T>],
    comm_range: T,
) -> NeighborSet<T> {
    let mut best: [Option<(T, u32, Neighbor<T>)>; 6] = [None; 6];
    for other in convoy {
        if other.id == ego.id {
            continue;
        }
        let dx = other.x - ego.x;
        if dx.abs() > comm_range {
            continue;
        }
        let lane_delta = other.lane as i64 - ego.lane as i64;
        let Some(slot) = Slot::classify(lane_delta, dx >= T::zero()) else {
            continue;
        };
        let candidate = (
            dx.abs(),
            other.id,
            Neighbor {
                id: other.id,
                x: other.x,
                v: other.v,
                lane: other.lane,
            },
        );
        let entry = &mut best[slot.index()];
        let better = match entry {
            None => true,
            Some((d, id, _)) => candidate.0 < *d || (candidate.0 == *d && candidate.1 < *id),
        };
        if better {
            *entry = Some(candidate);
        }
    }
    NeighborSet {
        slots: best.map(|b| b.map(|(_, _, n)| n)),
    }
}

/// Signed desired longitudinal offset `x_n - x_ego` for a neighbor slot.
pub fn desired_offset<T: Scalar>(slot: Slot, safe_distance: T) -> T {
    let magnitude = if slot.is_same_lane() {
        safe_distance
    } else {
        safe_distance * T::lit(0.5)
    };
    if slot.is_forward() {
        magnitude
    } else {
        -magnitude
    }
}

/// Unsaturated formation command for one vehicle.
pub fn formation_velocity_command<T: Scalar>(
    ego: &VehicleState<T>,
    nbrs: &NeighborSet<T>,
    w: &ControlWeights<T>,
    targets: &ActionTargets<T>,
    highway: &HighwayConfig<T>,
) -> VelocityCommand<T> {
    let correction = nbrs.occupied().fold(T::zero(), |acc, (slot, n)| {
        acc + w.slot_weight(slot) * ((n.x - ego.x) - desired_offset(slot, w.safe_distance))
    });
    VelocityCommand {
        vx: targets.target_speed + correction,
        vy: w.lateral * (highway.lane_center(targets.target_lane) - ego.y),
        accel: T::zero(),
    }
}

/// Same-lane speed coordination toward the forward neighbor's speed.
pub fn speed_coordination_accel<T: Scalar>(follower_speed: T, front: &Neighbor<T>, w_v: T) -> T {
    w_v * (front.v - follower_speed)
}

/// Clamps a command to the road speed limit, the speed change reachable in
/// one tick, the lateral speed limit and the acceleration bounds.
pub fn saturate_command<T: Scalar>(
    raw: VelocityCommand<T>,
    prev_v: T,
    w: &ControlWeights<T>,
    max_speed: T,
    dt: T,
) -> VelocityCommand<T> {
    let lo = (prev_v - w.decel * dt).max(T::zero());
    let hi = (prev_v + w.accel * dt).min(max_speed);
    let vx = raw.vx.clamp_to(T::zero(), max_speed).clamp_to(lo, hi.max(lo));
    VelocityCommand {
        vx,
        vy: raw.vy.clamp_to(-w.lateral_speed_limit, w.lateral_speed_limit),
        accel: raw.accel.clamp_to(-w.decel, w.accel),
    }
}

/// Sum of absolute gap errors over the occupied neighbor slots.
pub fn position_error<T: Scalar>(ego: &VehicleState<T>, nbrs: &NeighborSet<T>, safe_distance: T) -> T {
    nbrs.occupied().fold(T::zero(), |acc, (slot, n)| {
        acc + ((n.x - ego.x) - desired_offset(slot, safe_distance)).abs()
    })
}

/// Which end of the convoy the middle column occupies in an interlaced layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutOrientation {
    /// The middle-lane column is the rearmost; outer columns extend further forward.
    MiddleRear,
    /// The middle-lane column leads; outer columns extend further back.
    MiddleFront,
}

/// Interlaced slot positions `(lane, x offset)` for `n` vehicles, ordered the
/// way vehicles are seated. Same-lane gaps are `D_safe`, adjacent columns are
/// staggered by `D_safe / 2`, and the front-most slot sits at offset 0.
pub fn interlaced_layout<T: Scalar>(
    n: usize,
    lane_count: usize,
    safe_distance: T,
    orientation: LayoutOrientation,
) -> Vec<(usize, T)> {
    if n == 0 || lane_count == 0 {
        return Vec::new();
    }
    if lane_count == 1 {
        return (0..n)
            .map(|k| (0, -T::from_usize(k).unwrap() * safe_distance))
            .collect();
    }
    let middle = lane_count / 2;
    let half = safe_distance * T::lit(0.5);
    let mut seats = Vec::with_capacity(n);
    let mut rank = 0usize;
    while seats.len() < n {
        for lane in 0..lane_count {
            if lane.abs_diff(middle) % 2 == rank % 2 && seats.len() < n {
                seats.push((lane, T::from_usize(rank).unwrap() * half));
            }
        }
        rank += 1;
    }
    match orientation {
        // Ranks grow backward from the head.
        LayoutOrientation::MiddleFront => seats.into_iter().map(|(l, d)| (l, -d)).collect(),
        // Ranks grow forward from the tail; shift so the head is at 0.
        LayoutOrientation::MiddleRear => {
            let head = seats
                .iter()
                .map(|s| s.1)
                .fold(T::neg_infinity(), |a, b| a.max(b));
            seats.into_iter().map(|(l, d)| (l, d - head)).collect()
        }
    }
}
