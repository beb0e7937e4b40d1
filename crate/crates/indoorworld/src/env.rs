//! Poses, actions, the transition/reward function and episodes.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, WorldError};
use crate::house::{Domain, HousePlan, RoomType, CELL_SIZE};
use crate::path::shortest_path_length;
use crate::render::{render_styled, Image};

pub const TURN_DEG: f64 = 30.0;
pub const STRIDE: f64 = 0.25;
/// Half-width of the square body used for collision.
pub const BODY_RADIUS: f64 = 0.1;
pub const STEP_PENALTY: f64 = 0.01;
pub const GOAL_BONUS: f64 = 1.0;
pub const DEFAULT_MAX_STEPS: usize = 500;
const COLLISION_SUBSTEPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    TurnLeft,
    TurnRight,
    Forward,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::TurnLeft, Action::TurnRight, Action::Forward];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::TurnLeft => "left",
            Action::TurnRight => "right",
            Action::Forward => "forward",
        })
    }
}

/// Position in meters and heading in degrees, 0 = +x, increasing towards +y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl AgentPose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: heading.rem_euclid(360.0),
        }
    }

    pub fn cell(&self) -> (i64, i64) {
        ((self.x / CELL_SIZE).floor() as i64, (self.y / CELL_SIZE).floor() as i64)
    }
}

pub fn is_valid_pose(house: &HousePlan, pose: &AgentPose) -> bool {
    if !(pose.x.is_finite() && pose.y.is_finite() && pose.heading.is_finite()) {
        return false;
    }
    let (cx, cy) = pose.cell();
    house.is_floor(cx, cy)
}

fn body_clear(house: &HousePlan, x: f64, y: f64) -> bool {
    [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)].iter().all(|(sx, sy)| {
        let px = x + sx * BODY_RADIUS;
        let py = y + sy * BODY_RADIUS;
        house.is_floor((px / CELL_SIZE).floor() as i64, (py / CELL_SIZE).floor() as i64)
    })
}

/// Deterministic pose transition. A blocked Forward leaves the pose as is.
pub fn transition(house: &HousePlan, pose: &AgentPose, action: Action) -> AgentPose {
    match action {
        Action::TurnLeft => AgentPose::new(pose.x, pose.y, pose.heading - TURN_DEG),
        Action::TurnRight => AgentPose::new(pose.x, pose.y, pose.heading + TURN_DEG),
        Action::Forward => {
            let (dx, dy) = (pose.heading.to_radians().cos() * STRIDE, pose.heading.to_radians().sin() * STRIDE);
            let clear = (1..=COLLISION_SUBSTEPS).all(|k| {
                let t = k as f64 / COLLISION_SUBSTEPS as f64;
                body_clear(house, pose.x + t * dx, pose.y + t * dy)
            });
            if clear {
                AgentPose::new(pose.x + dx, pose.y + dy, pose.heading)
            } else {
                *pose
            }
        }
    }
}

/// Euclidean distance to the nearest centroid among `centroids`.
pub fn goal_distance(centroids: &[(f64, f64)], x: f64, y: f64) -> f64 {
    centroids
        .iter()
        .map(|&(cx, cy)| ((cx - x).powi(2) + (cy - y).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

pub fn goal_centroids(house: &HousePlan, goal: RoomType) -> Vec<(f64, f64)> {
    house
        .rooms
        .iter()
        .filter(|r| r.room_type == goal)
        .map(|r| r.rect.centroid())
        .collect()
}

pub fn in_goal_room(house: &HousePlan, pose: &AgentPose, goal: RoomType) -> bool {
    house
        .room_at(pose.x, pose.y)
        .is_some_and(|r| house.rooms[r].room_type == goal)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub pose: AgentPose,
    pub reward: f64,
    pub reached: bool,
    /// Distance actually travelled, 0 for turns and blocked moves.
    pub displacement: f64,
}

/// One transition with shaped reward: progress towards the nearest goal
/// centroid, a per-step time penalty and a bonus on entering the goal room.
pub fn step(house: &HousePlan, pose: &AgentPose, action: Action, goal: RoomType) -> StepOutcome {
    let centroids = goal_centroids(house, goal);
    step_with(house, &centroids, pose, action, goal)
}

fn step_with(
    house: &HousePlan,
    centroids: &[(f64, f64)],
    pose: &AgentPose,
    action: Action,
    goal: RoomType,
) -> StepOutcome {
    let next = transition(house, pose, action);
    let d_prev = goal_distance(centroids, pose.x, pose.y);
    let d_new = goal_distance(centroids, next.x, next.y);
    let reached = in_goal_room(house, &next, goal);
    let reward = (d_prev - d_new) - STEP_PENALTY + if reached { GOAL_BONUS } else { 0.0 };
    StepOutcome {
        pose: next,
        reward,
        reached,
        displacement: ((next.x - pose.x).powi(2) + (next.y - pose.y).powi(2)).sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: Image,
    pub domain: Domain,
    pub goal: RoomType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub domain: Domain,
    pub house_seed: u64,
    pub start: AgentPose,
    pub goal: RoomType,
    pub max_steps: usize,
}

impl FromStr for Action {
    type Err = WorldError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| WorldError::Parse {
                kind: "action",
                value: s.into(),
            })
    }
}

/// Goal types an episode may ask for: every non-corridor type in the house.
pub fn goal_candidates(house: &HousePlan) -> Vec<RoomType> {
    house.room_types().into_iter().filter(|&t| t != RoomType::Corridor).collect()
}

/// Pose at a uniformly random floor cell, jittered so that the body fits
/// inside the cell, with a heading on the 30 degree lattice.
pub fn random_pose<R: Rng>(house: &HousePlan, cells: &[(usize, usize)], rng: &mut R) -> AgentPose {
    let &(cx, cy) = cells.choose(rng).expect("house has floor");
    let slack = CELL_SIZE / 2.0 - BODY_RADIUS;
    let x = (cx as f64 + 0.5) * CELL_SIZE + rng.gen_range(-slack..slack);
    let y = (cy as f64 + 0.5) * CELL_SIZE + rng.gen_range(-slack..slack);
    let pose = AgentPose::new(x, y, rng.gen_range(0..12) as f64 * TURN_DEG);
    debug_assert!(is_valid_pose(house, &pose));
    pose
}

/// Random goal type present in the house and a start outside every room of
/// that type.
pub fn sample_episode<R: Rng>(house: &HousePlan, max_steps: usize, rng: &mut R) -> Result<EpisodeSpec> {
    let goals = goal_candidates(house);
    let goal = *goals
        .choose(rng)
        .ok_or_else(|| WorldError::InvalidHouse("no goal room type".into()))?;
    let cells: Vec<(usize, usize)> = house
        .floor_cells()
        .filter(|&(x, y)| house.room_at_cell(x, y).is_some_and(|r| house.rooms[r].room_type != goal))
        .collect();
    if cells.is_empty() {
        return Err(WorldError::InvalidHouse("every floor cell lies in the goal room".into()));
    }
    let start = random_pose(house, &cells, rng);
    shortest_path_length(house, &start, goal)?;
    Ok(EpisodeSpec {
        domain: house.domain,
        house_seed: house.seed,
        start,
        goal,
        max_steps,
    })
}

/// Running episode over a shared house.
#[derive(Clone, Debug)]
pub struct Episode {
    house: Arc<HousePlan>,
    style: Domain,
    centroids: Vec<(f64, f64)>,
    pub pose: AgentPose,
    pub goal: RoomType,
    pub steps: usize,
    pub max_steps: usize,
    pub path_len: f64,
    pub reached: bool,
}

impl Episode {
    pub fn new(house: Arc<HousePlan>, spec: &EpisodeSpec) -> Result<Self> {
        if !is_valid_pose(&house, &spec.start) {
            return Err(WorldError::InvalidPose {
                x: spec.start.x,
                y: spec.start.y,
            });
        }
        let centroids = goal_centroids(&house, spec.goal);
        if centroids.is_empty() {
            return Err(WorldError::Unreachable(spec.goal.to_string()));
        }
        Ok(Self {
            style: house.domain,
            house,
            centroids,
            pose: spec.start,
            goal: spec.goal,
            steps: 0,
            max_steps: spec.max_steps,
            path_len: 0.0,
            reached: false,
        })
    }

    /// Renders in another domain's style while keeping this house's layout.
    pub fn with_style(mut self, style: Domain) -> Self {
        self.style = style;
        self
    }

    pub fn house(&self) -> &HousePlan {
        &self.house
    }

    pub fn is_done(&self) -> bool {
        self.reached || self.steps >= self.max_steps
    }

    pub fn observe(&self) -> Observation {
        Observation {
            image: render_styled(&self.house, &self.pose, self.style).expect("episode pose stays valid"),
            domain: self.style,
            goal: self.goal,
        }
    }

    /// Applies `action`; returns reward and whether the episode ended.
    pub fn step(&mut self, action: Action) -> (f64, bool) {
        assert!(!self.is_done(), "step on a finished episode");
        let out = step_with(&self.house, &self.centroids, &self.pose, action, self.goal);
        self.pose = out.pose;
        self.path_len += out.displacement;
        self.steps += 1;
        self.reached = out.reached;
        (out.reward, self.is_done())
    }
}
