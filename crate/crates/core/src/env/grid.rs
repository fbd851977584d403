use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, Environment, Observation, Step};
use crate::error::{Error, Result};

pub const VIEW: usize = 7;
pub const ACTIONS: usize = 7;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const FORWARD: usize = 2;
pub const PICKUP: usize = 3;
pub const TOGGLE: usize = 4;
pub const DROP: usize = 5;
/// No-op, kept to mirror the MiniGrid action set.
pub const DONE: usize = 6;

// object ids
const EMPTY: u8 = 1;
const WALL: u8 = 2;
const DOOR: u8 = 4;
const KEY: u8 = 5;
const GOAL: u8 = 8;
const AGENT: u8 = 10;
// colour ids
const GREEN: u8 = 1;
const YELLOW: u8 = 4;
const GREY: u8 = 5;
// door states
const OPEN: u8 = 0;
const CLOSED: u8 = 1;
const LOCKED: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Empty,
    DoorKey,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Empty,
    Wall,
    Goal,
    Key,
    Door { locked: bool, open: bool },
}

impl Cell {
    fn encode(self) -> [u8; 3] {
        match self {
            Cell::Empty => [EMPTY, 0, 0],
            Cell::Wall => [WALL, GREY, 0],
            Cell::Goal => [GOAL, GREEN, 0],
            Cell::Key => [KEY, YELLOW, 0],
            Cell::Door { locked, open } => {
                let state = if open {
                    OPEN
                } else if locked {
                    LOCKED
                } else {
                    CLOSED
                };
                [DOOR, YELLOW, state]
            }
        }
    }

    fn passable(self) -> bool {
        matches!(self, Cell::Empty | Cell::Goal | Cell::Door { open: true, .. })
    }
}

/// Headings clockwise from east; `y` grows downward.
const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// Square navigation task with an egocentric 7×7×3 view and a sparse goal
/// reward `1 − 0.9·steps/max_steps`.
#[derive(Clone, Debug)]
pub struct GridWorld {
    kind: GridKind,
    size: usize,
    cells: Vec<Cell>,
    pos: (usize, usize),
    dir: usize,
    carrying: bool,
    steps: usize,
    rng: ChaCha8Rng,
}

impl GridWorld {
    pub fn new(kind: GridKind, size: usize) -> Result<Self> {
        let min = if kind == GridKind::DoorKey { 5 } else { 4 };
        if size < min {
            return Err(Error::Config(format!("grid size {size} below minimum {min}")));
        }
        let mut g = Self {
            kind,
            size,
            cells: vec![Cell::Empty; size * size],
            pos: (1, 1),
            dir: 0,
            carrying: false,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        g.generate();
        Ok(g)
    }

    pub fn max_steps(&self) -> usize {
        4 * self.size * self.size
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    pub fn direction(&self) -> usize {
        self.dir
    }

    pub fn carrying(&self) -> bool {
        self.carrying
    }

    pub fn cell(&self, x: usize, y: usize) -> Cell {
        self.cells[y * self.size + x]
    }

    fn set(&mut self, x: usize, y: usize, c: Cell) {
        self.cells[y * self.size + x] = c;
    }

    fn cell_at(&self, x: i64, y: i64) -> Cell {
        if x < 0 || y < 0 || x >= self.size as i64 || y >= self.size as i64 {
            Cell::Wall
        } else {
            self.cell(x as usize, y as usize)
        }
    }

    fn generate(&mut self) {
        let n = self.size;
        self.cells = vec![Cell::Empty; n * n];
        for i in 0..n {
            self.set(i, 0, Cell::Wall);
            self.set(i, n - 1, Cell::Wall);
            self.set(0, i, Cell::Wall);
            self.set(n - 1, i, Cell::Wall);
        }
        self.set(n - 2, n - 2, Cell::Goal);
        self.carrying = false;
        self.steps = 0;
        match self.kind {
            GridKind::Empty => {
                self.pos = (1, 1);
                self.dir = 0;
            }
            GridKind::DoorKey => {
                let split = self.rng.random_range(2..n - 2);
                for y in 0..n {
                    self.set(split, y, Cell::Wall);
                }
                let door_y = self.rng.random_range(1..n - 2);
                self.set(
                    split,
                    door_y,
                    Cell::Door {
                        locked: true,
                        open: false,
                    },
                );
                let key = self.random_left_cell(split, None);
                self.set(key.0, key.1, Cell::Key);
                self.pos = self.random_left_cell(split, Some(key));
                self.dir = self.rng.random_range(0..4);
            }
        }
    }

    fn random_left_cell(&mut self, split: usize, avoid: Option<(usize, usize)>) -> (usize, usize) {
        loop {
            let x = self.rng.random_range(1..split);
            let y = self.rng.random_range(1..self.size - 1);
            if self.cell(x, y) == Cell::Empty && Some((x, y)) != avoid {
                return (x, y);
            }
        }
    }

    fn front(&self) -> (i64, i64) {
        let (dx, dy) = DIRS[self.dir];
        (self.pos.0 as i64 + dx, self.pos.1 as i64 + dy)
    }

    /// Egocentric view: the agent sits at the bottom centre facing up.
    pub fn observation(&self) -> Observation {
        let (fx, fy) = DIRS[self.dir];
        let (rx, ry) = DIRS[(self.dir + 1) % 4];
        let mut data = Vec::with_capacity(VIEW * VIEW * 3);
        for vr in 0..VIEW {
            for vc in 0..VIEW {
                let fwd = (VIEW - 1 - vr) as i64;
                let lat = vc as i64 - (VIEW / 2) as i64;
                let x = self.pos.0 as i64 + fwd * fx + lat * rx;
                let y = self.pos.1 as i64 + fwd * fy + lat * ry;
                let enc = if fwd == 0 && lat == 0 {
                    if self.carrying {
                        Cell::Key.encode()
                    } else {
                        [AGENT, 0, self.dir as u8]
                    }
                } else {
                    self.cell_at(x, y).encode()
                };
                data.extend_from_slice(&enc);
            }
        }
        Observation::new(VIEW, VIEW, 3, data).expect("view size")
    }
}

impl Environment for GridWorld {
    fn observation_shape(&self) -> [usize; 3] {
        [VIEW, VIEW, 3]
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { n: ACTIONS }
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.generate();
        self.observation()
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        let a = match *action {
            Action::Discrete(a) if a < ACTIONS => a,
            ref other => return Err(Error::invalid(format!("grid action out of range: {other:?}"))),
        };
        self.steps += 1;
        let mut reward = 0.0;
        let mut terminated = false;
        let (fx, fy) = self.front();
        let front = self.cell_at(fx, fy);
        match a {
            LEFT => self.dir = (self.dir + 3) % 4,
            RIGHT => self.dir = (self.dir + 1) % 4,
            FORWARD => {
                if front.passable() {
                    self.pos = (fx as usize, fy as usize);
                    if front == Cell::Goal {
                        terminated = true;
                        reward = 1.0 - 0.9 * self.steps as f64 / self.max_steps() as f64;
                    }
                }
            }
            PICKUP => {
                if front == Cell::Key && !self.carrying {
                    self.carrying = true;
                    self.set(fx as usize, fy as usize, Cell::Empty);
                }
            }
            TOGGLE => {
                if let Cell::Door { locked, open } = front {
                    let next = if locked {
                        if self.carrying {
                            Cell::Door {
                                locked: false,
                                open: true,
                            }
                        } else {
                            front
                        }
                    } else {
                        Cell::Door {
                            locked: false,
                            open: !open,
                        }
                    };
                    self.set(fx as usize, fy as usize, next);
                }
            }
            DROP => {
                if self.carrying && front == Cell::Empty {
                    self.carrying = false;
                    self.set(fx as usize, fy as usize, Cell::Key);
                }
            }
            DONE => {}
            _ => unreachable!("checked above"),
        }
        let truncated = !terminated && self.steps >= self.max_steps();
        Ok(Step {
            observation: self.observation(),
            reward,
            terminated,
            truncated,
            clamped: false,
        })
    }

    fn render(&self) -> (usize, usize, Vec<u8>) {
        const PX: usize = 8;
        let w = self.size * PX;
        let mut img = vec![0u8; w * w];
        for y in 0..self.size {
            for x in 0..self.size {
                let shade = match self.cell(x, y) {
                    Cell::Empty => 0,
                    Cell::Wall => 110,
                    Cell::Goal => 200,
                    Cell::Key => 160,
                    Cell::Door { open: true, .. } => 60,
                    Cell::Door { .. } => 140,
                };
                let shade = if (x, y) == self.pos { 255 } else { shade };
                for r in 0..PX {
                    for c in 0..PX {
                        img[(y * PX + r) * w + x * PX + c] = shade;
                    }
                }
            }
        }
        (w, w, img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(g: &mut GridWorld, a: usize) -> Step {
        g.step(&Action::Discrete(a)).unwrap()
    }

    #[test]
    fn empty6_shortest_path() {
        let mut g = GridWorld::new(GridKind::Empty, 6).unwrap();
        g.reset(0);
        let path = [FORWARD, FORWARD, FORWARD, RIGHT, FORWARD, FORWARD];
        for a in path {
            let s = act(&mut g, a);
            assert!(!s.done());
            assert_eq!(s.reward, 0.0);
        }
        let s = act(&mut g, FORWARD);
        assert!(s.terminated);
        // 7 actions out of 4·36 = 144
        assert!((s.reward - (1.0 - 0.9 * 7.0 / 144.0)).abs() < 1e-12);
        assert!((s.reward - 0.95625).abs() < 1e-12);
    }

    #[test]
    fn view_encoding() {
        let mut g = GridWorld::new(GridKind::Empty, 6).unwrap();
        let o = g.reset(0);
        assert_eq!(o.shape(), [7, 7, 3]);
        // agent at the bottom centre
        assert_eq!(o.get(6, 3, 0), AGENT);
        // facing east from (1,1): the wall row y=0 is on the left, the
        // goal at (4,4) is 3 ahead and 3 to the right
        assert_eq!(o.get(6, 2, 0), WALL);
        assert_eq!(o.get(3, 6, 0), GOAL);
        assert!(o.data.iter().all(|&v| v <= 10));
    }

    #[test]
    fn timeout_truncates() {
        let mut g = GridWorld::new(GridKind::Empty, 6).unwrap();
        g.reset(0);
        for k in 1..=144 {
            let s = act(&mut g, LEFT);
            assert_eq!(s.done(), k == 144);
            assert_eq!(s.reward, 0.0);
        }
    }

    #[test]
    fn doorkey_layout_is_seeded() {
        let mut a = GridWorld::new(GridKind::DoorKey, 8).unwrap();
        let mut b = GridWorld::new(GridKind::DoorKey, 8).unwrap();
        assert_eq!(a.reset(5), b.reset(5));
        assert_eq!(a.cells, b.cells);
        let keys = a.cells.iter().filter(|&&c| c == Cell::Key).count();
        let doors = a
            .cells
            .iter()
            .filter(|c| matches!(c, Cell::Door { locked: true, .. }))
            .count();
        assert_eq!((keys, doors), (1, 1));
    }

    #[test]
    fn door_needs_key() {
        let mut g = GridWorld::new(GridKind::DoorKey, 6).unwrap();
        g.reset(1);
        // hand-place the agent facing the door without a key
        let door = (0..36)
            .map(|i| (i % 6, i / 6))
            .find(|&(x, y)| matches!(g.cell(x, y), Cell::Door { .. }))
            .unwrap();
        g.pos = (door.0 - 1, door.1);
        g.dir = 0;
        act(&mut g, TOGGLE);
        assert!(matches!(g.cell(door.0, door.1), Cell::Door { locked: true, .. }));
        act(&mut g, FORWARD);
        assert_eq!(g.pos, (door.0 - 1, door.1));
        g.carrying = true;
        act(&mut g, TOGGLE);
        assert_eq!(
            g.cell(door.0, door.1),
            Cell::Door {
                locked: false,
                open: true
            }
        );
        act(&mut g, FORWARD);
        assert_eq!(g.pos, door);
    }

    #[test]
    fn pickup_and_drop() {
        let mut g = GridWorld::new(GridKind::Empty, 6).unwrap();
        g.reset(0);
        g.set(2, 1, Cell::Key);
        act(&mut g, PICKUP);
        assert!(g.carrying());
        assert_eq!(g.cell(2, 1), Cell::Empty);
        act(&mut g, DROP);
        assert!(!g.carrying());
        assert_eq!(g.cell(2, 1), Cell::Key);
    }
}
