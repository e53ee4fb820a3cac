//! Egocentric grid-world scenarios.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layout::{Layout, SpawnKind};
use super::palette::{Palette, Surface, DEFAULT_PALETTE};
use super::{EnvSpec, Environment, Observation, Transition};
use crate::error::{Error, Result};

/// Structural sensory channels, in order; appearance channels follow.
pub const STRUCTURAL_CHANNELS: [&str; 6] = ["wall", "kit", "poison", "monster", "projectile", "ammo"];
const CH_WALL: usize = 0;
const CH_KIT: usize = 1;
const CH_POISON: usize = 2;
const CH_MONSTER: usize = 3;
const CH_PROJECTILE: usize = 4;
const CH_AMMO: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// Health gathering in an open room.
    G1,
    /// Health gathering with poison in a maze.
    G2,
    /// Battle in a maze.
    G3,
    /// Battle in a larger, more intricate maze.
    G4,
}

impl Scenario {
    pub fn is_battle(self) -> bool {
        matches!(self, Scenario::G3 | Scenario::G4)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::G1 => "G1",
            Scenario::G2 => "G2",
            Scenario::G3 => "G3",
            Scenario::G4 => "G4",
        };
        f.write_str(s)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "G1" => Ok(Scenario::G1),
            "G2" => Ok(Scenario::G2),
            "G3" => Ok(Scenario::G3),
            "G4" => Ok(Scenario::G4),
            other => Err(Error::Config(format!("unknown scenario {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubAction {
    Forward,
    Backward,
    TurnLeft,
    TurnRight,
    StrafeLeft,
    StrafeRight,
    Shoot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeasurementKind {
    Ammo,
    Health,
    Frags,
}

impl MeasurementKind {
    pub fn name(self) -> &'static str {
        match self {
            MeasurementKind::Ammo => "ammo",
            MeasurementKind::Health => "health",
            MeasurementKind::Frags => "frags",
        }
    }
}

/// Numeric dynamics constants. These are grid-world inventions; only their
/// orderings matter.
#[derive(Clone, Debug, PartialEq)]
pub struct Dynamics {
    pub max_health: i32,
    pub start_ammo: i32,
    pub max_ammo: i32,
    /// Health lost every step regardless of events.
    pub health_decay: i32,
    pub kit_health: i32,
    pub poison_damage: i32,
    pub ammo_pack: i32,
    pub monster_damage: i32,
    pub shoot_range: i32,
    /// Monsters act once every this many steps.
    pub monster_period: u32,
    /// Path distance within which monsters chase and shoot.
    pub monster_sight: i32,
    pub fire_range: i32,
    pub fire_probability: f64,
    /// Minimum Manhattan distance from the agent for monster (re)spawns.
    pub monster_spawn_distance: i32,
}

impl Dynamics {
    pub fn gathering() -> Self {
        Dynamics {
            max_health: 100,
            start_ammo: 0,
            max_ammo: 0,
            health_decay: 1,
            kit_health: 25,
            poison_damage: 30,
            ammo_pack: 0,
            monster_damage: 8,
            shoot_range: 6,
            monster_period: 2,
            monster_sight: 16,
            fire_range: 6,
            fire_probability: 0.2,
            monster_spawn_distance: 6,
        }
    }

    pub fn battle() -> Self {
        Dynamics {
            start_ammo: 15,
            max_ammo: 50,
            health_decay: 0,
            ammo_pack: 10,
            ..Dynamics::gathering()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridWorldConfig {
    pub scenario: Scenario,
    pub layout: Layout,
    pub episode_cap: u32,
    /// Underlying frames per agent step; the action is repeated.
    pub frame_skip: u32,
    pub view_radius: usize,
    pub kits: usize,
    pub poison: usize,
    pub monsters: usize,
    pub ammo_packs: usize,
    pub dynamics: Dynamics,
    /// Palettes sampled uniformly at every reset.
    pub palettes: Vec<u32>,
    pub appearance_channels: usize,
    /// Action index bit `i` enables `sub_actions[i]`.
    pub sub_actions: Vec<SubAction>,
    pub measurements: Vec<MeasurementKind>,
}

impl GridWorldConfig {
    pub fn new(scenario: Scenario) -> Self {
        use SubAction::*;
        let gathering = vec![Forward, TurnLeft, TurnRight];
        let battle = vec![Forward, Backward, TurnLeft, TurnRight, Shoot];
        let base = |layout, kits, poison, monsters, ammo_packs, dynamics, sub_actions, measurements| GridWorldConfig {
            scenario,
            layout,
            episode_cap: 256,
            frame_skip: 1,
            view_radius: 7,
            kits,
            poison,
            monsters,
            ammo_packs,
            dynamics,
            palettes: vec![DEFAULT_PALETTE],
            appearance_channels: 6,
            sub_actions,
            measurements,
        };
        match scenario {
            Scenario::G1 => base(
                Layout::room(32, 32),
                60,
                0,
                0,
                0,
                Dynamics::gathering(),
                gathering,
                vec![MeasurementKind::Health],
            ),
            Scenario::G2 => base(
                Layout::maze(48, 48, 4, 2, 0.3, 0x62),
                110,
                70,
                0,
                0,
                Dynamics::gathering(),
                gathering,
                vec![MeasurementKind::Health],
            ),
            Scenario::G3 => base(
                Layout::maze(32, 32, 3, 3, 0.5, 0x63),
                5,
                0,
                12,
                6,
                Dynamics::battle(),
                battle,
                vec![MeasurementKind::Ammo, MeasurementKind::Health, MeasurementKind::Frags],
            ),
            Scenario::G4 => base(
                Layout::maze(48, 48, 5, 2, 0.2, 0x64),
                9,
                0,
                24,
                10,
                Dynamics::battle(),
                battle,
                vec![MeasurementKind::Ammo, MeasurementKind::Health, MeasurementKind::Frags],
            ),
        }
    }

    pub fn with_palettes(mut self, palettes: Vec<u32>) -> Self {
        self.palettes = palettes;
        self
    }

    pub fn view_size(&self) -> usize {
        2 * self.view_radius + 1
    }

    pub fn channels(&self) -> usize {
        STRUCTURAL_CHANNELS.len() + self.appearance_channels
    }

    pub fn action_count(&self) -> usize {
        1 << self.sub_actions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.episode_cap == 0 {
            return Err(Error::invalid_argument("episode cap must be at least 1"));
        }
        if self.frame_skip == 0 {
            return Err(Error::invalid_argument("frame skip must be at least 1"));
        }
        if self.palettes.is_empty() {
            return Err(Error::invalid_argument("at least one palette is required"));
        }
        if self.sub_actions.is_empty() || self.sub_actions.len() > 10 {
            return Err(Error::invalid_argument("between 1 and 10 sub-actions are supported"));
        }
        if self.measurements.is_empty() {
            return Err(Error::invalid_argument("at least one measurement is required"));
        }
        let entities = self.kits + self.poison + self.monsters + self.ammo_packs + 1;
        if entities > self.layout.floor_count() {
            return Err(Error::invalid_argument("more entities than floor cells"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Facing {
    North,
    East,
    South,
    West,
}

impl Facing {
    /// `(dy, dx)` of one step forward.
    pub fn forward(self) -> (i32, i32) {
        match self {
            Facing::North => (-1, 0),
            Facing::East => (0, 1),
            Facing::South => (1, 0),
            Facing::West => (0, -1),
        }
    }

    /// `(dy, dx)` of one step to the agent's right.
    pub fn right(self) -> (i32, i32) {
        self.turn_right().forward()
    }

    pub fn turn_right(self) -> Self {
        match self {
            Facing::North => Facing::East,
            Facing::East => Facing::South,
            Facing::South => Facing::West,
            Facing::West => Facing::North,
        }
    }

    pub fn turn_left(self) -> Self {
        match self {
            Facing::North => Facing::West,
            Facing::West => Facing::South,
            Facing::South => Facing::East,
            Facing::East => Facing::North,
        }
    }

    const ALL: [Facing; 4] = [Facing::North, Facing::East, Facing::South, Facing::West];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pos {
    pub y: i32,
    pub x: i32,
}

impl Pos {
    pub fn offset(self, dy: i32, dx: i32) -> Pos {
        Pos {
            y: self.y + dy,
            x: self.x + dx,
        }
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.y - other.y).abs() + (self.x - other.x).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Monster {
    pub pos: Pos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projectile {
    pub pos: Pos,
    pub dir: (i32, i32),
}

/// What happened during one agent step (summed over skipped frames).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepEvents {
    pub health_from_kits: i32,
    pub poison_damage: i32,
    pub monster_damage: i32,
    pub decay: i32,
    pub ammo_collected: i32,
    pub shots: i32,
    pub kills: i32,
}

/// Complete simulator state. Together with an action it determines the
/// next state exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub agent: Pos,
    pub facing: Facing,
    pub health: i32,
    pub ammo: i32,
    pub frags: i32,
    pub kits: Vec<Pos>,
    pub poison: Vec<Pos>,
    pub ammo_packs: Vec<Pos>,
    pub monsters: Vec<Monster>,
    pub projectiles: Vec<Projectile>,
    pub step: u32,
    pub palette: u32,
    pub terminal: bool,
    rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Occupant {
    Empty,
    Kit,
    Poison,
    Ammo,
    Monster,
}

pub struct GridWorld {
    config: Arc<GridWorldConfig>,
    palettes: Vec<Palette>,
    state: Option<EnvState>,
    occupancy: Vec<Occupant>,
    last_events: StepEvents,
    distance: Vec<u32>,
    queue: VecDeque<usize>,
}

impl GridWorld {
    pub fn new(config: GridWorldConfig) -> Result<Self> {
        Self::shared(Arc::new(config))
    }

    pub fn shared(config: Arc<GridWorldConfig>) -> Result<Self> {
        config.validate()?;
        let palettes = config
            .palettes
            .iter()
            .map(|&id| Palette::new(id, config.appearance_channels))
            .collect();
        let cells = config.layout.width() * config.layout.height();
        Ok(GridWorld {
            config,
            palettes,
            state: None,
            occupancy: vec![Occupant::Empty; cells],
            last_events: StepEvents::default(),
            distance: vec![u32::MAX; cells],
            queue: VecDeque::with_capacity(cells),
        })
    }

    pub fn config(&self) -> &GridWorldConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    /// Events of the most recent step.
    pub fn last_events(&self) -> StepEvents {
        self.last_events
    }

    /// Resumes from a previously captured state.
    pub fn restore(&mut self, state: EnvState) -> Result<Observation> {
        if !self.config.palettes.contains(&state.palette) {
            return Err(Error::invalid_argument("state palette is not configured"));
        }
        self.state = Some(state);
        self.rebuild_occupancy();
        Ok(self.observe())
    }

    fn index(&self, p: Pos) -> usize {
        p.y as usize * self.config.layout.width() + p.x as usize
    }

    fn pos_of(&self, idx: usize) -> Pos {
        let w = self.config.layout.width();
        Pos {
            y: (idx / w) as i32,
            x: (idx % w) as i32,
        }
    }

    fn rebuild_occupancy(&mut self) {
        self.occupancy.fill(Occupant::Empty);
        let Some(s) = self.state.take() else { return };
        for &p in &s.kits {
            let i = self.index(p);
            self.occupancy[i] = Occupant::Kit;
        }
        for &p in &s.poison {
            let i = self.index(p);
            self.occupancy[i] = Occupant::Poison;
        }
        for &p in &s.ammo_packs {
            let i = self.index(p);
            self.occupancy[i] = Occupant::Ammo;
        }
        for m in &s.monsters {
            let i = self.index(m.pos);
            self.occupancy[i] = Occupant::Monster;
        }
        self.state = Some(s);
    }

    fn occupant(&self, p: Pos) -> Occupant {
        if self.config.layout.is_wall(p.y, p.x) {
            return Occupant::Empty;
        }
        self.occupancy[self.index(p)]
    }

    /// A uniformly random free cell among the spawn cells of `kind`, or
    /// `None` if every candidate is taken.
    fn free_cell(&self, state: &mut EnvState, kind: SpawnKind, min_distance: i32) -> Option<Pos> {
        let candidates = self.config.layout.spawn_cells(kind);
        let free = |p: Pos, occupancy: &[Occupant], idx: usize| {
            occupancy[idx] == Occupant::Empty && p != state.agent && p.manhattan(state.agent) >= min_distance
        };
        for _ in 0..64 {
            let idx = candidates[state.rng.random_range(0..candidates.len())];
            let p = self.pos_of(idx);
            if free(p, &self.occupancy, idx) {
                return Some(p);
            }
        }
        let open: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&idx| free(self.pos_of(idx), &self.occupancy, idx))
            .collect();
        if open.is_empty() {
            return None;
        }
        Some(self.pos_of(open[state.rng.random_range(0..open.len())]))
    }

    fn spawn(&mut self, state: &mut EnvState, what: Occupant) {
        let (kind, min_distance) = match what {
            Occupant::Kit => (SpawnKind::Kit, 1),
            Occupant::Poison => (SpawnKind::Poison, 1),
            Occupant::Ammo => (SpawnKind::Ammo, 1),
            Occupant::Monster => (SpawnKind::Monster, self.config.dynamics.monster_spawn_distance),
            Occupant::Empty => return,
        };
        let cell = self
            .free_cell(state, kind, min_distance)
            .or_else(|| self.free_cell(state, kind, 1));
        let Some(p) = cell else { return };
        let idx = self.index(p);
        self.occupancy[idx] = what;
        match what {
            Occupant::Kit => state.kits.push(p),
            Occupant::Poison => state.poison.push(p),
            Occupant::Ammo => state.ammo_packs.push(p),
            Occupant::Monster => state.monsters.push(Monster { pos: p }),
            Occupant::Empty => {}
        }
    }

    fn remove_item(&mut self, state: &mut EnvState, p: Pos) -> Occupant {
        let idx = self.index(p);
        let what = self.occupancy[idx];
        match what {
            Occupant::Kit => state.kits.retain(|&q| q != p),
            Occupant::Poison => state.poison.retain(|&q| q != p),
            Occupant::Ammo => state.ammo_packs.retain(|&q| q != p),
            Occupant::Monster => state.monsters.retain(|m| m.pos != p),
            Occupant::Empty => {}
        }
        self.occupancy[idx] = Occupant::Empty;
        what
    }

    fn frame(&mut self, state: &mut EnvState, action: usize, events: &mut StepEvents) {
        let cfg = Arc::clone(&self.config);
        let d = &cfg.dynamics;
        let mut on = [false; 7];
        for (bit, sub) in cfg.sub_actions.iter().enumerate() {
            if action & (1 << bit) != 0 {
                on[*sub as usize] = true;
            }
        }
        let pressed = |s: SubAction| on[s as usize];

        // Opposing sub-actions cancel.
        match (pressed(SubAction::TurnLeft), pressed(SubAction::TurnRight)) {
            (true, false) => state.facing = state.facing.turn_left(),
            (false, true) => state.facing = state.facing.turn_right(),
            _ => {}
        }
        let advance = i32::from(pressed(SubAction::Forward)) - i32::from(pressed(SubAction::Backward));
        let strafe = i32::from(pressed(SubAction::StrafeRight)) - i32::from(pressed(SubAction::StrafeLeft));
        if advance != 0 || strafe != 0 {
            let (fy, fx) = state.facing.forward();
            let (ry, rx) = state.facing.right();
            let target = state.agent.offset(advance * fy + strafe * ry, advance * fx + strafe * rx);
            if !cfg.layout.is_wall(target.y, target.x) && self.occupant(target) != Occupant::Monster {
                state.agent = target;
            }
        }

        match self.occupant(state.agent) {
            Occupant::Kit => {
                self.remove_item(state, state.agent);
                let gained = (state.health + d.kit_health).min(d.max_health) - state.health;
                let gained = gained.max(0);
                state.health += gained;
                events.health_from_kits += gained;
                self.spawn(state, Occupant::Kit);
            }
            Occupant::Poison => {
                self.remove_item(state, state.agent);
                state.health -= d.poison_damage;
                events.poison_damage += d.poison_damage;
                self.spawn(state, Occupant::Poison);
            }
            Occupant::Ammo => {
                self.remove_item(state, state.agent);
                let gained = ((state.ammo + d.ammo_pack).min(d.max_ammo) - state.ammo).max(0);
                state.ammo += gained;
                events.ammo_collected += gained;
                self.spawn(state, Occupant::Ammo);
            }
            Occupant::Monster | Occupant::Empty => {}
        }

        if pressed(SubAction::Shoot) && state.ammo > 0 {
            state.ammo -= 1;
            events.shots += 1;
            let (fy, fx) = state.facing.forward();
            let mut p = state.agent;
            for _ in 0..d.shoot_range {
                p = p.offset(fy, fx);
                if cfg.layout.is_wall(p.y, p.x) {
                    break;
                }
                if self.occupant(p) == Occupant::Monster {
                    self.remove_item(state, p);
                    state.frags += 1;
                    events.kills += 1;
                    self.spawn(state, Occupant::Monster);
                    break;
                }
            }
        }

        // Projectiles fly one cell per frame.
        let mut flying = Vec::with_capacity(state.projectiles.len());
        for mut proj in std::mem::take(&mut state.projectiles) {
            if proj.pos == state.agent {
                state.health -= d.monster_damage;
                events.monster_damage += d.monster_damage;
                continue;
            }
            proj.pos = proj.pos.offset(proj.dir.0, proj.dir.1);
            if cfg.layout.is_wall(proj.pos.y, proj.pos.x) {
                continue;
            }
            if proj.pos == state.agent {
                state.health -= d.monster_damage;
                events.monster_damage += d.monster_damage;
                continue;
            }
            flying.push(proj);
        }
        state.projectiles = flying;

        if d.monster_period > 0 && state.step % d.monster_period == d.monster_period - 1 && !state.monsters.is_empty() {
            self.compute_distances(state.agent);
            for i in 0..state.monsters.len() {
                self.monster_act(state, i, events);
            }
        }

        if d.health_decay != 0 {
            state.health -= d.health_decay;
            events.decay += d.health_decay;
        }
    }

    fn clear_line(&self, from: Pos, to: Pos) -> bool {
        let dy = (to.y - from.y).signum();
        let dx = (to.x - from.x).signum();
        let mut p = from.offset(dy, dx);
        while p != to {
            if self.config.layout.is_wall(p.y, p.x) {
                return false;
            }
            p = p.offset(dy, dx);
        }
        true
    }

    fn monster_act(&mut self, state: &mut EnvState, i: usize, events: &mut StepEvents) {
        let d = &self.config.dynamics;
        let m = state.monsters[i].pos;
        let dist = m.manhattan(state.agent);
        if dist == 1 {
            state.health -= d.monster_damage;
            events.monster_damage += d.monster_damage;
            return;
        }
        let (dy, dx) = (state.agent.y - m.y, state.agent.x - m.x);
        let path = self.distance[self.index(m)];
        if path <= d.monster_sight as u32 {
            let aligned = dy == 0 || dx == 0;
            if aligned && dist <= d.fire_range && self.clear_line(m, state.agent) && state.rng.random_bool(d.fire_probability) {
                let dir = (dy.signum(), dx.signum());
                state.projectiles.push(Projectile {
                    pos: m.offset(dir.0, dir.1),
                    dir,
                });
                return;
            }
            // Step along a shortest path, choosing randomly among equally
            // good moves.
            let mut closer = [(0, 0); 4];
            let mut n = 0;
            for f in Facing::ALL {
                let (sy, sx) = f.forward();
                let p = m.offset(sy, sx);
                if !self.config.layout.is_wall(p.y, p.x) && self.distance[self.index(p)] < path {
                    closer[n] = (sy, sx);
                    n += 1;
                }
            }
            if n > 0 {
                let (sy, sx) = closer[state.rng.random_range(0..n)];
                self.try_move_monster(state, i, m.offset(sy, sx));
            }
        } else if state.rng.random_bool(0.5) {
            let (sy, sx) = Facing::ALL[state.rng.random_range(0..4)].forward();
            self.try_move_monster(state, i, m.offset(sy, sx));
        }
    }

    /// Path distances from the agent through floor cells, up to the monster
    /// sight range; farther cells get `u32::MAX`.
    fn compute_distances(&mut self, agent: Pos) {
        let limit = self.config.dynamics.monster_sight.max(0) as u32;
        self.distance.fill(u32::MAX);
        self.queue.clear();
        let start = self.index(agent);
        self.distance[start] = 0;
        self.queue.push_back(start);
        while let Some(c) = self.queue.pop_front() {
            let dc = self.distance[c];
            if dc >= limit {
                continue;
            }
            let p = self.pos_of(c);
            for f in Facing::ALL {
                let (sy, sx) = f.forward();
                let q = p.offset(sy, sx);
                if self.config.layout.is_wall(q.y, q.x) {
                    continue;
                }
                let qi = self.index(q);
                if self.distance[qi] == u32::MAX {
                    self.distance[qi] = dc + 1;
                    self.queue.push_back(qi);
                }
            }
        }
    }

    fn try_move_monster(&mut self, state: &mut EnvState, i: usize, to: Pos) -> bool {
        if self.config.layout.is_wall(to.y, to.x) || to == state.agent || self.occupant(to) != Occupant::Empty {
            return false;
        }
        let from = state.monsters[i].pos;
        let (fi, ti) = (self.index(from), self.index(to));
        self.occupancy[fi] = Occupant::Empty;
        self.occupancy[ti] = Occupant::Monster;
        state.monsters[i].pos = to;
        true
    }

    /// Renders the egocentric observation of the current state.
    pub fn observe(&self) -> Observation {
        let state = self.state.as_ref().expect("observe requires a reset environment");
        let cfg = &self.config;
        let size = cfg.view_size();
        let r = cfg.view_radius as i32;
        let channels = cfg.channels();
        let a_ch = cfg.appearance_channels;
        let palette = self
            .palettes
            .iter()
            .find(|p| p.id() == state.palette)
            .expect("state palette is configured");
        let mut sensory = vec![0.0f32; size * size * channels];
        let (fy, fx) = state.facing.forward();
        let (ry, rx) = state.facing.right();
        for vy in 0..size {
            for vx in 0..size {
                let ahead = r - vy as i32;
                let right = vx as i32 - r;
                let p = state.agent.offset(ahead * fy + right * ry, ahead * fx + right * rx);
                let cell = &mut sensory[(vy * size + vx) * channels..(vy * size + vx + 1) * channels];
                let surface = if cfg.layout.is_wall(p.y, p.x) {
                    cell[CH_WALL] = 1.0;
                    Surface::Wall
                } else {
                    match self.occupancy[self.index(p)] {
                        Occupant::Empty => Surface::Floor,
                        Occupant::Kit => {
                            cell[CH_KIT] = 1.0;
                            Surface::Kit
                        }
                        Occupant::Poison => {
                            cell[CH_POISON] = 1.0;
                            Surface::Poison
                        }
                        Occupant::Ammo => {
                            cell[CH_AMMO] = 1.0;
                            Surface::Ammo
                        }
                        Occupant::Monster => {
                            cell[CH_MONSTER] = 1.0;
                            Surface::Monster
                        }
                    }
                };
                if a_ch > 0 {
                    cell[STRUCTURAL_CHANNELS.len()..].copy_from_slice(palette.code(surface));
                }
            }
        }
        for proj in &state.projectiles {
            let (dy, dx) = (proj.pos.y - state.agent.y, proj.pos.x - state.agent.x);
            // Invert the egocentric transform: ahead = d·forward, right = d·right.
            let ahead = dy * fy + dx * fx;
            let right = dy * ry + dx * rx;
            if ahead.abs() <= r && right.abs() <= r {
                let vy = (r - ahead) as usize;
                let vx = (r + right) as usize;
                sensory[(vy * size + vx) * channels + CH_PROJECTILE] = 1.0;
            }
        }
        Observation {
            sensory,
            measurements: self.measurements(state),
        }
    }

    fn measurements(&self, state: &EnvState) -> Vec<f32> {
        self.config
            .measurements
            .iter()
            .map(|m| match m {
                MeasurementKind::Ammo => state.ammo as f32,
                MeasurementKind::Health => state.health as f32,
                MeasurementKind::Frags => state.frags as f32,
            })
            .collect()
    }
}

impl Environment for GridWorld {
    fn spec(&self) -> EnvSpec {
        let size = self.config.view_size();
        EnvSpec {
            observation_shape: (size, size, self.config.channels()),
            actions: self.config.action_count(),
            measurements: self.config.measurements.iter().map(|m| m.name()).collect(),
        }
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let cfg = Arc::clone(&self.config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let palette = cfg.palettes[rng.random_range(0..cfg.palettes.len())];
        let facing = Facing::ALL[rng.random_range(0..4)];
        let agent_cells = cfg.layout.spawn_cells(SpawnKind::Agent);
        let agent = self.pos_of(agent_cells[rng.random_range(0..agent_cells.len())]);
        let mut state = EnvState {
            agent,
            facing,
            health: cfg.dynamics.max_health,
            ammo: cfg.dynamics.start_ammo,
            frags: 0,
            kits: Vec::new(),
            poison: Vec::new(),
            ammo_packs: Vec::new(),
            monsters: Vec::new(),
            projectiles: Vec::new(),
            step: 0,
            palette,
            terminal: false,
            rng,
        };
        self.occupancy.fill(Occupant::Empty);
        for _ in 0..cfg.kits {
            self.spawn(&mut state, Occupant::Kit);
        }
        for _ in 0..cfg.poison {
            self.spawn(&mut state, Occupant::Poison);
        }
        for _ in 0..cfg.ammo_packs {
            self.spawn(&mut state, Occupant::Ammo);
        }
        for _ in 0..cfg.monsters {
            self.spawn(&mut state, Occupant::Monster);
        }
        self.state = Some(state);
        self.last_events = StepEvents::default();
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        let actions = self.config.action_count();
        if action >= actions {
            return Err(Error::invalid_argument(format!(
                "action {action} out of range (0..{actions})"
            )));
        }
        let mut state = self
            .state
            .take()
            .ok_or_else(|| Error::invalid_state("step before reset"))?;
        if state.terminal {
            self.state = Some(state);
            return Err(Error::invalid_state("episode already terminated"));
        }
        let mut events = StepEvents::default();
        for _ in 0..self.config.frame_skip {
            self.frame(&mut state, action, &mut events);
            if state.health <= 0 {
                break;
            }
        }
        state.step += 1;
        state.terminal = state.health <= 0 || state.step >= self.config.episode_cap;
        let terminal = state.terminal;
        self.state = Some(state);
        self.last_events = events;
        Ok(Transition {
            observation: self.observe(),
            terminal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_room() -> GridWorldConfig {
        let mut cfg = GridWorldConfig::new(Scenario::G1);
        cfg.kits = 0;
        cfg
    }

    #[test]
    fn action_counts() {
        assert_eq!(GridWorldConfig::new(Scenario::G1).action_count(), 8);
        assert_eq!(GridWorldConfig::new(Scenario::G2).action_count(), 8);
        assert_eq!(GridWorldConfig::new(Scenario::G3).action_count(), 32);
        assert_eq!(GridWorldConfig::new(Scenario::G4).action_count(), 32);
    }

    #[test]
    fn noop_in_empty_room_only_decays_health() {
        let mut env = GridWorld::new(empty_room()).unwrap();
        env.reset(4);
        let before = env.state().unwrap().clone();
        let t = env.step(0).unwrap();
        let after = env.state().unwrap();
        assert_eq!(t.observation.measurements, vec![99.0]);
        assert_eq!(after.agent, before.agent);
        assert_eq!(after.facing, before.facing);
        assert!(!t.terminal);
    }

    #[test]
    fn turning_conflicts_cancel() {
        let mut env = GridWorld::new(empty_room()).unwrap();
        env.reset(8);
        let facing = env.state().unwrap().facing;
        // bits: forward=1, left=2, right=4
        env.step(2 | 4).unwrap();
        assert_eq!(env.state().unwrap().facing, facing);
        env.step(2).unwrap();
        assert_eq!(env.state().unwrap().facing, facing.turn_left());
    }

    #[test]
    fn kit_pickup_caps_health() {
        let mut env = GridWorld::new(empty_room()).unwrap();
        env.reset(1);
        let mut state = env.state().unwrap().clone();
        state.agent = Pos { y: 10, x: 10 };
        state.facing = Facing::North;
        state.health = 90;
        state.kits = vec![Pos { y: 9, x: 10 }];
        env.restore(state).unwrap();
        let mut cfg_env = env;
        let t = cfg_env.step(1).unwrap();
        // Health capped at 100 on pickup, then one point of decay.
        assert_eq!(cfg_env.last_events().health_from_kits, 10);
        assert_eq!(t.observation.measurements, vec![99.0]);
        // The consumed kit respawned elsewhere.
        assert_eq!(cfg_env.state().unwrap().kits.len(), 1);
        assert_ne!(cfg_env.state().unwrap().kits[0], Pos { y: 9, x: 10 });
    }

    #[test]
    fn shooting_without_ammo_does_nothing() {
        let mut cfg = GridWorldConfig::new(Scenario::G3);
        cfg.dynamics.start_ammo = 0;
        let mut env = GridWorld::new(cfg).unwrap();
        env.reset(3);
        // shoot is bit 4
        env.step(1 << 4).unwrap();
        let s = env.state().unwrap();
        assert_eq!((s.ammo, s.frags), (0, 0));
        assert_eq!(env.last_events().shots, 0);
    }

    #[test]
    fn shooting_kills_monster_in_ray() {
        let mut cfg = GridWorldConfig::new(Scenario::G3);
        cfg.layout = Layout::room(20, 20);
        cfg.monsters = 1;
        let mut env = GridWorld::new(cfg).unwrap();
        env.reset(3);
        let mut state = env.state().unwrap().clone();
        state.agent = Pos { y: 10, x: 10 };
        state.facing = Facing::East;
        state.monsters = vec![Monster { pos: Pos { y: 10, x: 14 } }];
        state.kits.clear();
        state.ammo_packs.clear();
        env.restore(state).unwrap();
        env.step(1 << 4).unwrap();
        let s = env.state().unwrap();
        assert_eq!((s.ammo, s.frags), (14, 1));
        assert_eq!(s.monsters.len(), 1);
        assert!(s.monsters[0].pos.manhattan(s.agent) >= 6);
    }

    #[test]
    fn initial_battle_measurements() {
        let mut env = GridWorld::new(GridWorldConfig::new(Scenario::G3)).unwrap();
        let obs = env.reset(0);
        assert_eq!(obs.measurements, vec![15.0, 100.0, 0.0]);
    }

    #[test]
    fn stepping_terminal_state_fails() {
        let mut cfg = empty_room();
        cfg.episode_cap = 1;
        let mut env = GridWorld::new(cfg).unwrap();
        env.reset(0);
        assert!(env.step(0).unwrap().terminal);
        assert!(matches!(env.step(0), Err(Error::InvalidState(_))));
    }

    #[test]
    fn egocentric_view_rotates_with_facing() {
        let mut cfg = empty_room();
        cfg.appearance_channels = 0;
        let mut env = GridWorld::new(cfg).unwrap();
        env.reset(0);
        let mut state = env.state().unwrap().clone();
        state.agent = Pos { y: 10, x: 10 };
        state.kits = vec![Pos { y: 10, x: 12 }];
        let channels = STRUCTURAL_CHANNELS.len();
        let kit_at = |obs: &Observation| {
            (0..15 * 15)
                .filter(|i| obs.sensory[i * channels + CH_KIT] == 1.0)
                .map(|i| (i / 15, i % 15))
                .collect::<Vec<_>>()
        };
        state.facing = Facing::East;
        let obs = env.restore(state.clone()).unwrap();
        // Two cells straight ahead.
        assert_eq!(kit_at(&obs), vec![(5, 7)]);
        state.facing = Facing::North;
        let obs = env.restore(state.clone()).unwrap();
        // Two cells to the right.
        assert_eq!(kit_at(&obs), vec![(7, 9)]);
        state.facing = Facing::South;
        let obs = env.restore(state).unwrap();
        assert_eq!(kit_at(&obs), vec![(7, 5)]);
    }
}
