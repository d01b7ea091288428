//! GridHouse: a deterministic household text world.
//!
//! Action grammar (case-insensitive, whitespace-normalized):
//!
//! ```text
//! look around | inventory | task
//! go to <room or receptacle>
//! open door to <room>
//! take <object> from <receptacle or room>
//! move <object> to <receptacle or room>
//! ```
//!
//! Unparseable text or unknown names yield [`INVALID_ACTION`]. Known names
//! whose preconditions fail yield "Nothing happens." (or "The door is not
//! open." for a closed door). The empty action is a no-op that reports the
//! current reward.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{EnvError, EnvStepResult, ResetRequest, INVALID_ACTION};

const NOTHING_HAPPENS: &str = "Nothing happens.";
const DOOR_CLOSED: &str = "The door is not open.";
const ALREADY_DONE: &str = "The task is already complete.";
const BUILTIN_FIXTURES: &str = include_str!("../../fixtures/gridhouse.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoorSpec {
    pub between: [String; 2],
    #[serde(default)]
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptacleSpec {
    pub name: String,
    pub room: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    /// A receptacle name or a room name (the room's floor).
    pub at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub id: String,
    pub rooms: Vec<String>,
    #[serde(default)]
    pub doors: Vec<DoorSpec>,
    #[serde(default)]
    pub receptacles: Vec<ReceptacleSpec>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Subgoal {
    ObjectAt { object: String, location: String },
    Holding { object: String },
    AgentIn { room: String },
    DoorOpen { between: [String; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub world: String,
    pub start_room: String,
    pub description: String,
    pub subgoals: Vec<Subgoal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHouseFixtures {
    #[serde(default)]
    pub worlds: Vec<WorldSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

fn fixture_err(msg: impl Into<String>) -> EnvError {
    EnvError::Fixture(msg.into())
}

impl GridHouseFixtures {
    /// The fixtures bundled with the crate.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_FIXTURES).expect("bundled fixtures are valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, EnvError> {
        let fx: GridHouseFixtures = toml::from_str(text).map_err(|e| fixture_err(e.to_string()))?;
        fx.validate()?;
        Ok(fx)
    }

    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.id.as_str()).collect()
    }

    fn world(&self, id: &str) -> Option<&WorldSpec> {
        self.worlds.iter().find(|w| w.id == id)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut world_ids = BTreeSet::new();
        for w in &self.worlds {
            if !world_ids.insert(w.id.as_str()) {
                return Err(fixture_err(format!("duplicate world {:?}", w.id)));
            }
            let mut names = BTreeSet::new();
            let all_names = w
                .rooms
                .iter()
                .chain(w.receptacles.iter().map(|r| &r.name))
                .chain(w.objects.iter().map(|o| &o.name));
            for n in all_names {
                if n.is_empty() || *n != normalize(n) {
                    return Err(fixture_err(format!(
                        "world {:?}: name {n:?} must be lowercase and whitespace-normalized",
                        w.id
                    )));
                }
                if !names.insert(n.as_str()) {
                    return Err(fixture_err(format!("world {:?}: duplicate name {n:?}", w.id)));
                }
            }
            let rooms: BTreeSet<&str> = w.rooms.iter().map(String::as_str).collect();
            let recs: BTreeSet<&str> = w.receptacles.iter().map(|r| r.name.as_str()).collect();
            for d in &w.doors {
                let [a, b] = &d.between;
                if a == b || !rooms.contains(a.as_str()) || !rooms.contains(b.as_str()) {
                    return Err(fixture_err(format!("world {:?}: bad door {a:?}-{b:?}", w.id)));
                }
            }
            for r in &w.receptacles {
                if !rooms.contains(r.room.as_str()) {
                    return Err(fixture_err(format!(
                        "world {:?}: receptacle {:?} in unknown room {:?}",
                        w.id, r.name, r.room
                    )));
                }
            }
            for o in &w.objects {
                if !rooms.contains(o.at.as_str()) && !recs.contains(o.at.as_str()) {
                    return Err(fixture_err(format!(
                        "world {:?}: object {:?} at unknown location {:?}",
                        w.id, o.name, o.at
                    )));
                }
            }
        }
        let mut task_ids = BTreeSet::new();
        for t in &self.tasks {
            if !task_ids.insert(t.id.as_str()) {
                return Err(fixture_err(format!("duplicate task {:?}", t.id)));
            }
            let w = self
                .world(&t.world)
                .ok_or_else(|| fixture_err(format!("task {:?}: unknown world {:?}", t.id, t.world)))?;
            let has_room = |r: &str| w.rooms.iter().any(|x| x == r);
            let has_obj = |o: &str| w.objects.iter().any(|x| x.name == o);
            let has_loc = |l: &str| has_room(l) || w.receptacles.iter().any(|x| x.name == l);
            if !has_room(&t.start_room) {
                return Err(fixture_err(format!("task {:?}: unknown start room", t.id)));
            }
            if t.subgoals.is_empty() || t.subgoals.len() > 64 {
                return Err(fixture_err(format!("task {:?}: needs 1 to 64 sub-goals", t.id)));
            }
            for g in &t.subgoals {
                let ok = match g {
                    Subgoal::ObjectAt { object, location } => has_obj(object) && has_loc(location),
                    Subgoal::Holding { object } => has_obj(object),
                    Subgoal::AgentIn { room } => has_room(room),
                    Subgoal::DoorOpen { between: [a, b] } => {
                        w.doors.iter().any(|d| same_pair(&d.between, a, b))
                    }
                };
                if !ok {
                    return Err(fixture_err(format!(
                        "task {:?}: sub-goal {g:?} references unknown names",
                        t.id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn same_pair(pair: &[String; 2], a: &str, b: &str) -> bool {
    (pair[0] == a && pair[1] == b) || (pair[0] == b && pair[1] == a)
}

fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// "a x", "a x and a y", "a x, a y, and a z".
fn list_items<S: AsRef<str>>(items: &[S]) -> String {
    let items: Vec<String> = items.iter().map(|s| format!("a {}", s.as_ref())).collect();
    match items.len() {
        0 => "nothing".to_string(),
        1 => items[0].clone(),
        2 => format!("{} and {}", items[0], items[1]),
        n => format!("{}, and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum Location {
    Receptacle(String),
    Floor(String),
    Inventory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Door {
    pub rooms: [String; 2],
    pub open: bool,
}

/// Complete episode state. Two states compare equal iff every observable
/// detail of the episode is identical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridHouseState {
    pub task_id: String,
    pub description: String,
    pub rooms: Vec<String>,
    pub doors: Vec<Door>,
    /// Receptacle name to the room containing it.
    pub receptacles: BTreeMap<String, String>,
    /// Objects in fixture order with their current location.
    pub objects: Vec<(String, Location)>,
    pub subgoals: Vec<Subgoal>,
    pub agent_room: String,
    pub agent_at: Option<String>,
    pub subgoals_met: u64,
    pub steps_taken: u32,
}

impl GridHouseState {
    fn all_met(&self) -> u64 {
        if self.subgoals.len() == 64 {
            u64::MAX
        } else {
            (1u64 << self.subgoals.len()) - 1
        }
    }

    pub fn done(&self) -> bool {
        self.subgoals_met == self.all_met()
    }

    pub fn reward(&self) -> f64 {
        self.subgoals_met.count_ones() as f64 / self.subgoals.len() as f64
    }

    fn is_room(&self, name: &str) -> bool {
        self.rooms.iter().any(|r| r == name)
    }

    fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|(n, _)| n == name)
    }

    fn location_of(&self, name: &str) -> Option<Location> {
        if self.is_room(name) {
            Some(Location::Floor(name.to_string()))
        } else if self.receptacles.contains_key(name) {
            Some(Location::Receptacle(name.to_string()))
        } else {
            None
        }
    }

    fn door(&self, a: &str, b: &str) -> Option<usize> {
        self.doors.iter().position(|d| same_pair(&d.rooms, a, b))
    }

    /// Rooms adjacent to the agent's room with their door state, sorted.
    fn neighbours(&self) -> Vec<(&str, bool)> {
        let mut out: Vec<(&str, bool)> = self
            .doors
            .iter()
            .filter_map(|d| {
                if d.rooms[0] == self.agent_room {
                    Some((d.rooms[1].as_str(), d.open))
                } else if d.rooms[1] == self.agent_room {
                    Some((d.rooms[0].as_str(), d.open))
                } else {
                    None
                }
            })
            .collect();
        out.sort();
        out
    }

    fn objects_at(&self, loc: &Location) -> Vec<&str> {
        self.objects
            .iter()
            .filter(|(_, l)| l == loc)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    fn held(&self) -> Option<&str> {
        self.objects
            .iter()
            .find(|(_, l)| *l == Location::Inventory)
            .map(|(n, _)| n.as_str())
    }

    fn receptacles_here(&self) -> Vec<&str> {
        self.receptacles
            .iter()
            .filter(|(_, room)| **room == self.agent_room)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    fn holds(&self, goal: &Subgoal) -> bool {
        match goal {
            Subgoal::ObjectAt { object, location } => {
                let want = self.location_of(location);
                self.object_index(object)
                    .map(|i| Some(&self.objects[i].1) == want.as_ref())
                    .unwrap_or(false)
            }
            Subgoal::Holding { object } => self.held() == Some(object.as_str()),
            Subgoal::AgentIn { room } => self.agent_room == *room,
            Subgoal::DoorOpen { between: [a, b] } => {
                self.door(a, b).map(|i| self.doors[i].open).unwrap_or(false)
            }
        }
    }

    /// Latches sub-goals in order: goal `i` counts once it holds and every
    /// earlier goal has been reached. Latched goals stay reached.
    fn update_subgoals(&mut self) {
        for i in 0..self.subgoals.len() {
            let bit = 1u64 << i;
            if self.subgoals_met & bit != 0 {
                continue;
            }
            if self.holds(&self.subgoals[i]) {
                self.subgoals_met |= bit;
            } else {
                break;
            }
        }
    }

    fn look(&self) -> String {
        let mut out = format!("You are in the {}.", self.agent_room);
        if let Some(at) = &self.agent_at {
            out.push_str(&format!(" You are at {at}."));
        }
        let recs = self.receptacles_here();
        if !recs.is_empty() {
            out.push_str(&format!(" Looking around, you see {}.", list_items(&recs)));
        }
        let floor = self.objects_at(&Location::Floor(self.agent_room.clone()));
        if !floor.is_empty() {
            out.push_str(&format!(" On the floor, you see {}.", list_items(&floor)));
        }
        for (room, open) in self.neighbours() {
            let state = if open { "open" } else { "closed" };
            out.push_str(&format!(" The door to the {room} is {state}."));
        }
        out
    }

    fn arrive(&mut self, receptacle: &str) -> String {
        self.agent_at = Some(receptacle.to_string());
        let items = self.objects_at(&Location::Receptacle(receptacle.to_string()));
        format!(
            "You arrive at {receptacle}. On the {receptacle}, you see {}.",
            list_items(&items)
        )
    }

    fn go(&mut self, target: &str) -> String {
        if target == self.agent_room {
            return NOTHING_HAPPENS.into();
        }
        if let Some(room) = self.receptacles.get(target) {
            if *room == self.agent_room {
                return self.arrive(target);
            }
            return NOTHING_HAPPENS.into();
        }
        if self.is_room(target) {
            return match self.door(&self.agent_room, target) {
                Some(i) if self.doors[i].open => {
                    self.agent_room = target.to_string();
                    self.agent_at = None;
                    format!("You move to the {target}.")
                }
                Some(_) => DOOR_CLOSED.into(),
                None => NOTHING_HAPPENS.into(),
            };
        }
        if self.object_index(target).is_some() {
            return NOTHING_HAPPENS.into();
        }
        INVALID_ACTION.into()
    }

    fn open_door(&mut self, target: &str) -> String {
        if !self.is_room(target) {
            return INVALID_ACTION.into();
        }
        match self.door(&self.agent_room, target) {
            Some(i) if self.doors[i].open => "The door is already open.".into(),
            Some(i) => {
                self.doors[i].open = true;
                "The door is now open.".into()
            }
            None => NOTHING_HAPPENS.into(),
        }
    }

    /// Whether the agent can reach objects at `loc` right now.
    fn within_reach(&self, loc: &Location) -> bool {
        match loc {
            Location::Receptacle(r) => self.agent_at.as_deref() == Some(r.as_str()),
            Location::Floor(room) => *room == self.agent_room,
            Location::Inventory => false,
        }
    }

    fn take(&mut self, object: &str, from: &str) -> String {
        let (Some(idx), Some(loc)) = (self.object_index(object), self.location_of(from)) else {
            return INVALID_ACTION.into();
        };
        if self.held().is_some() || self.objects[idx].1 != loc || !self.within_reach(&loc) {
            return NOTHING_HAPPENS.into();
        }
        self.objects[idx].1 = Location::Inventory;
        format!("You pick up the {object} from the {from}.")
    }

    fn put(&mut self, object: &str, to: &str) -> String {
        let (Some(idx), Some(loc)) = (self.object_index(object), self.location_of(to)) else {
            return INVALID_ACTION.into();
        };
        if self.objects[idx].1 != Location::Inventory || !self.within_reach(&loc) {
            return NOTHING_HAPPENS.into();
        }
        self.objects[idx].1 = loc;
        format!("You move the {object} to the {to}.")
    }

    fn objective(&self) -> String {
        format!("Task: {}", self.description)
    }

    fn inventory(&self) -> String {
        match self.held() {
            Some(o) => format!("You are carrying: a {o}."),
            None => "You are carrying: nothing.".into(),
        }
    }

    fn apply(&mut self, action: &str) -> String {
        match action {
            "look around" | "look" => return self.look(),
            "inventory" => return self.inventory(),
            "task" => return self.objective(),
            _ => {}
        }
        if let Some(target) = action.strip_prefix("open door to ") {
            return self.open_door(target);
        }
        if let Some(target) = action.strip_prefix("go to ") {
            return self.go(target);
        }
        if let Some((object, from)) = action
            .strip_prefix("take ")
            .and_then(|rest| rest.rsplit_once(" from "))
        {
            return self.take(object, from);
        }
        if let Some((object, to)) = action
            .strip_prefix("move ")
            .and_then(|rest| rest.rsplit_once(" to "))
        {
            return self.put(object, to);
        }
        INVALID_ACTION.into()
    }

    fn admissible(&self) -> Vec<String> {
        let mut out = vec![
            "look around".to_string(),
            "inventory".to_string(),
            "task".to_string(),
        ];
        for r in self.receptacles_here() {
            out.push(format!("go to {r}"));
        }
        for (room, open) in self.neighbours() {
            if open {
                out.push(format!("go to {room}"));
            } else {
                out.push(format!("open door to {room}"));
            }
        }
        match self.held() {
            None => {
                if let Some(at) = &self.agent_at {
                    for o in self.objects_at(&Location::Receptacle(at.clone())) {
                        out.push(format!("take {o} from {at}"));
                    }
                }
                for o in self.objects_at(&Location::Floor(self.agent_room.clone())) {
                    out.push(format!("take {o} from {}", self.agent_room));
                }
            }
            Some(o) => {
                if let Some(at) = &self.agent_at {
                    out.push(format!("move {o} to {at}"));
                }
                out.push(format!("move {o} to {}", self.agent_room));
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

/// One GridHouse instance. Fixtures are shared; the episode state is owned.
#[derive(Debug, Clone)]
pub struct GridHouse {
    fixtures: Arc<GridHouseFixtures>,
    state: Option<GridHouseState>,
}

impl Default for GridHouse {
    fn default() -> Self {
        Self::new(Arc::new(GridHouseFixtures::builtin()))
    }
}

impl GridHouse {
    pub fn new(fixtures: Arc<GridHouseFixtures>) -> Self {
        Self {
            fixtures,
            state: None,
        }
    }

    pub fn fixtures(&self) -> &GridHouseFixtures {
        &self.fixtures
    }

    pub fn state(&self) -> Option<&GridHouseState> {
        self.state.as_ref()
    }

    fn state_ref(&self) -> Result<&GridHouseState, EnvError> {
        self.state.as_ref().ok_or(EnvError::NotReset)
    }

    /// Starts the episode named by `task_id`, or the task at
    /// `seed % task_count`, or the first task.
    pub fn reset(&mut self, request: &ResetRequest) -> Result<String, EnvError> {
        let task = match (&request.task_id, request.seed) {
            (Some(id), _) => self
                .fixtures
                .task(id)
                .ok_or_else(|| EnvError::UnknownTask(id.clone()))?,
            (None, seed) => {
                if self.fixtures.tasks.is_empty() {
                    return Err(EnvError::UnknownTask("<none>".into()));
                }
                let idx = seed.unwrap_or(0) as usize % self.fixtures.tasks.len();
                &self.fixtures.tasks[idx]
            }
        };
        let world = self
            .fixtures
            .world(&task.world)
            .ok_or_else(|| EnvError::UnknownTask(task.id.clone()))?;
        let receptacles: BTreeMap<String, String> = world
            .receptacles
            .iter()
            .map(|r| (r.name.clone(), r.room.clone()))
            .collect();
        let objects = world
            .objects
            .iter()
            .map(|o| {
                let loc = if receptacles.contains_key(&o.at) {
                    Location::Receptacle(o.at.clone())
                } else {
                    Location::Floor(o.at.clone())
                };
                (o.name.clone(), loc)
            })
            .collect();
        let mut state = GridHouseState {
            task_id: task.id.clone(),
            description: task.description.clone(),
            rooms: world.rooms.clone(),
            doors: world
                .doors
                .iter()
                .map(|d| Door {
                    rooms: d.between.clone(),
                    open: d.open,
                })
                .collect(),
            receptacles,
            objects,
            subgoals: task.subgoals.clone(),
            agent_room: task.start_room.clone(),
            agent_at: None,
            subgoals_met: 0,
            steps_taken: 0,
        };
        state.update_subgoals();
        let obs = format!("{}\n\nYour task is to: {}.", state.look(), state.description);
        self.state = Some(state);
        Ok(obs)
    }

    pub fn step(&mut self, action: &str) -> Result<EnvStepResult, EnvError> {
        let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
        let action = normalize(action);
        if action.is_empty() {
            return Ok(EnvStepResult::new("", state.reward(), state.done()));
        }
        if state.done() {
            return Ok(EnvStepResult::new(ALREADY_DONE, state.reward(), true));
        }
        state.steps_taken += 1;
        let obs = state.apply(&action);
        state.update_subgoals();
        let mut result = EnvStepResult::new(obs, state.reward(), state.done());
        result
            .info
            .insert("steps".into(), serde_json::Value::from(state.steps_taken));
        Ok(result)
    }

    pub fn admissible_commands(&self) -> Result<Vec<String>, EnvError> {
        Ok(self.state_ref()?.admissible())
    }

    pub fn task_objective(&self) -> Result<String, EnvError> {
        Ok(self.state_ref()?.objective())
    }
}
