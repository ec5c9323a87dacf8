//! Simulated pick-and-place office world.
//!
//! One mobile manipulator, a set of tables, a single cube. Actions
//! execute atomically, advance the simulated clock, and can fail
//! stochastically per a [`FailureProfile`]. The simulator implements
//! [`WorldPort`], so a behavior tree drives it directly through ticks.
//!
//! Precondition/effect table (the registry names the skills, the
//! simulator gives them causal roles):
//!
//! | skill      | precondition                                  | effect on success                       |
//! |------------|-----------------------------------------------|-----------------------------------------|
//! | localise   | head up                                       | localized = true                        |
//! | head_up    | --                                            | head = up                               |
//! | head_down  | --                                            | head = down                             |
//! | tuck       | --                                            | tucked = true                           |
//! | pick       | localized, head down, at cube's table, empty  | cube in gripper, tucked = false         |
//! | place      | holding, at some table                        | cube on that table, tucked = false      |
//! | move_to X  | localized, tucked                             | robot at X's point (snaps)              |
//!
//! Every action advances the clock by its duration even when the
//! precondition fails. `move_to` additionally samples the two hazards of
//! the failure profile: losing localization stops the robot at the
//! segment midpoint, and losing the cube (while holding) drops it onto
//! the table nearest the midpoint while the move itself continues.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bt::{ParamDomain, SkillRegistry, Status, TickError, WorldPort};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Point {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new((self.x + other.x) / 2.0, (self.y + other.y) / 2.0)
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPose {
    Up,
    Down,
}

/// Where the cube is: on a table or in the gripper. The cube is always
/// in exactly one place.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CubeLocation {
    Gripper,
    Table(String),
}

impl fmt::Display for CubeLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CubeLocation::Gripper => write!(f, "gripper"),
            CubeLocation::Table(t) => write!(f, "{t}"),
        }
    }
}

/// Snapshot of the simulated world, mutated by action execution.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub robot_pos: Point,
    pub localized: bool,
    pub head: HeadPose,
    pub tucked: bool,
    pub cube_at: CubeLocation,
    /// Simulated seconds, nondecreasing across action executions.
    pub clock: f64,
    /// Monotone within an episode: set on the first successful pick.
    pub picked_ever: bool,
    /// Monotone within an episode: set on a successful place onto the goal table.
    pub placed_ever: bool,
}

impl WorldState {
    pub fn holding(&self) -> bool {
        self.cube_at == CubeLocation::Gripper
    }
}

/// Where the cube starts: one fixed table, or uniformly one of several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CubeSource {
    Fixed(String),
    Uniform(Vec<String>),
}

impl CubeSource {
    pub fn support(&self) -> Vec<&str> {
        match self {
            CubeSource::Fixed(t) => vec![t.as_str()],
            CubeSource::Uniform(ts) => ts.iter().map(String::as_str).collect(),
        }
    }
}

/// Task setup: table geometry, where the cube may start, and which table
/// is the goal. The goal table is never in the cube source's support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub cube_source: CubeSource,
    pub goal_table: String,
    pub geometry: BTreeMap<String, Point>,
    pub robot_start: Point,
}

fn default_geometry() -> BTreeMap<String, Point> {
    let mut geometry = BTreeMap::new();
    geometry.insert("table1".to_string(), Point::new(-2.0, 2.0));
    geometry.insert("table2".to_string(), Point::new(0.0, 3.0));
    geometry.insert("table3".to_string(), Point::new(2.0, 2.0));
    geometry.insert("goal".to_string(), Point::new(0.0, -2.0));
    geometry
}

impl Scenario {
    /// Cube on table1, goal on the goal table.
    pub fn scenario1() -> Scenario {
        Scenario {
            name: "scenario1".to_string(),
            cube_source: CubeSource::Fixed("table1".to_string()),
            goal_table: "goal".to_string(),
            geometry: default_geometry(),
            robot_start: Point::new(0.0, 0.0),
        }
    }

    /// Cube uniformly on one of the three tables, goal on the goal table.
    pub fn scenario2() -> Scenario {
        Scenario {
            name: "scenario2".to_string(),
            cube_source: CubeSource::Uniform(vec![
                "table1".to_string(),
                "table2".to_string(),
                "table3".to_string(),
            ]),
            goal_table: "goal".to_string(),
            geometry: default_geometry(),
            robot_start: Point::new(0.0, 0.0),
        }
    }

    pub fn by_name(name: &str) -> Option<Scenario> {
        match name {
            "scenario1" => Some(Scenario::scenario1()),
            "scenario2" => Some(Scenario::scenario2()),
            _ => None,
        }
    }

    /// The paper's skill set over this scenario's tables.
    pub fn registry(&self) -> SkillRegistry {
        SkillRegistry::standard(self.geometry.keys().cloned())
    }

    pub fn table_point(&self, table: &str) -> Option<Point> {
        self.geometry.get(table).copied()
    }

    pub fn goal_point(&self) -> Point {
        self.geometry[&self.goal_table]
    }
}

/// Per-action failure probabilities; the presets mirror the four
/// experiment regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureProfile {
    pub p_loc_fail: f64,
    pub p_pick_fail: f64,
    pub p_place_fail: f64,
    pub p_lose_cube: f64,
    pub p_lose_loc: f64,
}

impl FailureProfile {
    pub fn det() -> FailureProfile {
        FailureProfile { p_loc_fail: 0.0, p_pick_fail: 0.0, p_place_fail: 0.0, p_lose_cube: 0.0, p_lose_loc: 0.0 }
    }

    pub fn stoch1() -> FailureProfile {
        FailureProfile { p_loc_fail: 0.0, p_pick_fail: 0.0, p_place_fail: 0.0, p_lose_cube: 0.05, p_lose_loc: 0.1 }
    }

    pub fn stoch2() -> FailureProfile {
        FailureProfile { p_loc_fail: 0.2, p_pick_fail: 0.2, p_place_fail: 0.1, p_lose_cube: 0.05, p_lose_loc: 0.1 }
    }

    pub fn stoch3() -> FailureProfile {
        FailureProfile { p_loc_fail: 0.3, p_pick_fail: 0.4, p_place_fail: 0.2, p_lose_cube: 0.1, p_lose_loc: 0.2 }
    }

    pub fn by_name(name: &str) -> Option<FailureProfile> {
        match name {
            "det" => Some(FailureProfile::det()),
            "stoch1" => Some(FailureProfile::stoch1()),
            "stoch2" => Some(FailureProfile::stoch2()),
            "stoch3" => Some(FailureProfile::stoch3()),
            _ => None,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.p_loc_fail == 0.0
            && self.p_pick_fail == 0.0
            && self.p_place_fail == 0.0
            && self.p_lose_cube == 0.0
            && self.p_lose_loc == 0.0
    }
}

/// Action durations in simulated seconds and the drive speed in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionTiming {
    pub localise: f64,
    pub head_up: f64,
    pub head_down: f64,
    pub tuck: f64,
    pub pick: f64,
    pub place: f64,
    pub move_speed: f64,
}

impl Default for ActionTiming {
    fn default() -> ActionTiming {
        ActionTiming {
            localise: 5.0,
            head_up: 2.0,
            head_down: 2.0,
            tuck: 3.0,
            pick: 4.0,
            place: 4.0,
            move_speed: 0.5,
        }
    }
}

/// Distance measurements feeding the fitness function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub d_cube_goal: f64,
    pub d_robot_cube: f64,
    pub loc_err: f64,
}

/// Fresh world per the scenario: robot at start, not localized, head up,
/// arm tucked, gripper empty, cube sampled from the cube source.
pub fn init_world<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> WorldState {
    let cube_table = match &scenario.cube_source {
        CubeSource::Fixed(t) => t.clone(),
        CubeSource::Uniform(ts) => ts[rng.random_range(0..ts.len())].clone(),
    };
    WorldState {
        robot_pos: scenario.robot_start,
        localized: false,
        head: HeadPose::Up,
        tucked: true,
        cube_at: CubeLocation::Table(cube_table),
        clock: 0.0,
        picked_ever: false,
        placed_ever: false,
    }
}

/// Cube/goal distances of a state: the cube sits at its table's point or
/// at the robot when held; `loc_err` is 1 unless localized.
pub fn metrics(state: &WorldState, scenario: &Scenario) -> Metrics {
    let cube_pos = match &state.cube_at {
        CubeLocation::Gripper => state.robot_pos,
        CubeLocation::Table(t) => scenario.geometry[t],
    };
    Metrics {
        d_cube_goal: cube_pos.dist(scenario.goal_point()),
        d_robot_cube: state.robot_pos.dist(cube_pos),
        loc_err: if state.localized { 0.0 } else { 1.0 },
    }
}

/// A live simulation bound to a scenario, failure profile, timing table,
/// registry, and random stream. Distinct worlds may run concurrently; a
/// single world is mutated by one logical thread at a time.
pub struct World<'a> {
    pub state: WorldState,
    scenario: &'a Scenario,
    profile: &'a FailureProfile,
    timing: &'a ActionTiming,
    registry: &'a SkillRegistry,
    rng: ChaCha8Rng,
    /// Actions that would run past this clock value are cut off: the
    /// clock stops at the cap and the action fails without effect.
    time_cap: f64,
}

impl<'a> World<'a> {
    pub fn new(
        scenario: &'a Scenario,
        profile: &'a FailureProfile,
        timing: &'a ActionTiming,
        registry: &'a SkillRegistry,
        mut rng: ChaCha8Rng,
    ) -> World<'a> {
        let state = init_world(scenario, &mut rng);
        World { state, scenario, profile, timing, registry, rng, time_cap: f64::INFINITY }
    }

    pub fn set_time_cap(&mut self, cap: f64) {
        self.time_cap = cap;
    }

    pub fn scenario(&self) -> &Scenario {
        self.scenario
    }

    pub fn clock(&self) -> f64 {
        self.state.clock
    }

    pub fn task_done(&self) -> bool {
        self.state.cube_at == CubeLocation::Table(self.scenario.goal_table.clone())
    }

    pub fn metrics(&self) -> Metrics {
        metrics(&self.state, self.scenario)
    }

    /// Table id whose point the robot currently stands on, if any.
    fn table_under_robot(&self) -> Option<&'a str> {
        self.scenario
            .geometry
            .iter()
            .find(|(_, p)| **p == self.state.robot_pos)
            .map(|(t, _)| t.as_str())
    }

    fn at_cube_table(&self) -> bool {
        match &self.state.cube_at {
            CubeLocation::Table(t) => self.scenario.geometry[t] == self.state.robot_pos,
            CubeLocation::Gripper => false,
        }
    }

    fn nearest_table(&self, point: Point) -> String {
        self.scenario
            .geometry
            .iter()
            .min_by(|(_, a), (_, b)| point.dist(**a).total_cmp(&point.dist(**b)))
            .map(|(t, _)| t.clone())
            .expect("scenario has at least one table")
    }

    fn fires(&mut self, probability: f64) -> bool {
        self.rng.random::<f64>() < probability
    }

    /// Advances the clock by `duration`, honoring the time cap. Returns
    /// false when the action was cut off by the cap.
    fn advance(&mut self, duration: f64) -> bool {
        if self.state.clock + duration > self.time_cap {
            self.state.clock = self.time_cap;
            return false;
        }
        self.state.clock += duration;
        true
    }

    fn check_arity(&self, name: &str, param: Option<&str>, domain: &ParamDomain) -> Result<Option<Point>, TickError> {
        match (domain, param) {
            (ParamDomain::None, None) => Ok(None),
            (ParamDomain::None, Some(_)) => Err(TickError::UnexpectedParam(name.to_string())),
            (ParamDomain::Tables(_), None) => Err(TickError::MissingParam(name.to_string())),
            (ParamDomain::Tables(_), Some(table)) => match self.scenario.table_point(table) {
                Some(p) => Ok(Some(p)),
                None => Err(TickError::UnknownTable { leaf: name.to_string(), table: table.to_string() }),
            },
        }
    }
}

impl WorldPort for World<'_> {
    fn exec_action(&mut self, skill: &str, param: Option<&str>) -> Result<Status, TickError> {
        let domain = self
            .registry
            .action_domain(skill)
            .ok_or_else(|| TickError::UnknownSkill(skill.to_string()))?
            .clone();
        let dest = self.check_arity(skill, param, &domain)?;
        let ok = match skill {
            "localise" => {
                if !self.advance(self.timing.localise) {
                    false
                } else if self.state.head != HeadPose::Up {
                    false
                } else if self.fires(self.profile.p_loc_fail) {
                    false
                } else {
                    self.state.localized = true;
                    true
                }
            }
            "head_up" => {
                if self.advance(self.timing.head_up) {
                    self.state.head = HeadPose::Up;
                    true
                } else {
                    false
                }
            }
            "head_down" => {
                if self.advance(self.timing.head_down) {
                    self.state.head = HeadPose::Down;
                    true
                } else {
                    false
                }
            }
            "tuck" => {
                if self.advance(self.timing.tuck) {
                    self.state.tucked = true;
                    true
                } else {
                    false
                }
            }
            "pick" => {
                if !self.advance(self.timing.pick) {
                    false
                } else if !(self.state.localized
                    && self.state.head == HeadPose::Down
                    && !self.state.holding()
                    && self.at_cube_table())
                {
                    false
                } else if self.fires(self.profile.p_pick_fail) {
                    false
                } else {
                    self.state.cube_at = CubeLocation::Gripper;
                    self.state.tucked = false;
                    self.state.picked_ever = true;
                    true
                }
            }
            "place" => {
                if !self.advance(self.timing.place) {
                    false
                } else if !self.state.holding() {
                    false
                } else {
                    match self.table_under_robot() {
                        None => false,
                        Some(table) => {
                            if self.fires(self.profile.p_place_fail) {
                                // cube stays in the gripper, retryable
                                false
                            } else {
                                let table = table.to_string();
                                self.state.cube_at = CubeLocation::Table(table.clone());
                                self.state.tucked = false;
                                if table == self.scenario.goal_table {
                                    self.state.placed_ever = true;
                                }
                                true
                            }
                        }
                    }
                }
            }
            "move_to" => {
                let dest = dest.expect("move_to arity checked above");
                let duration = self.state.robot_pos.dist(dest) / self.timing.move_speed;
                if !self.advance(duration) {
                    false
                } else if !(self.state.localized && self.state.tucked) {
                    false
                } else {
                    let midpoint = self.state.robot_pos.midpoint(dest);
                    let lost_loc = self.fires(self.profile.p_lose_loc);
                    let lost_cube = self.state.holding() && self.fires(self.profile.p_lose_cube);
                    if lost_cube {
                        // drop mid-move; the move itself continues
                        let table = self.nearest_table(midpoint);
                        self.state.cube_at = CubeLocation::Table(table);
                    }
                    if lost_loc {
                        self.state.robot_pos = midpoint;
                        self.state.localized = false;
                        false
                    } else {
                        self.state.robot_pos = dest;
                        true
                    }
                }
            }
            other => return Err(TickError::UnknownSkill(other.to_string())),
        };
        Ok(Status::from_bool(ok))
    }

    fn eval_condition(&mut self, check: &str, param: Option<&str>) -> Result<Status, TickError> {
        let domain = self
            .registry
            .condition_domain(check)
            .ok_or_else(|| TickError::UnknownCondition(check.to_string()))?
            .clone();
        self.check_arity(check, param, &domain)?;
        let ok = match check {
            "have_cube" => self.state.holding(),
            "cube_placed" => {
                let table = param.expect("cube_placed arity checked above");
                self.state.cube_at == CubeLocation::Table(table.to_string())
            }
            "task_done" => self.task_done(),
            other => return Err(TickError::UnknownCondition(other.to_string())),
        };
        Ok(Status::from_bool(ok))
    }
}
