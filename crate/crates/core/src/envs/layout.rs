//! Scenario maps.
//!
//! Text format, one character per cell, one line per row:
//!
//! | char | meaning                     |
//! |------|-----------------------------|
//! | `#`  | wall                        |
//! | `.`  | floor                       |
//! | `K`  | floor, health kit spawn     |
//! | `P`  | floor, poison spawn         |
//! | `M`  | floor, monster spawn        |
//! | `A`  | floor, ammunition spawn     |
//! | `S`  | floor, agent spawn region   |
//!
//! All rows must have the same length. Cells outside the map behave as
//! walls. An entity kind without any spawn markers spawns on any floor cell.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpawnKind {
    Kit,
    Poison,
    Monster,
    Ammo,
    Agent,
}

impl SpawnKind {
    fn from_char(c: char) -> Option<Self> {
        match c {
            'K' => Some(SpawnKind::Kit),
            'P' => Some(SpawnKind::Poison),
            'M' => Some(SpawnKind::Monster),
            'A' => Some(SpawnKind::Ammo),
            'S' => Some(SpawnKind::Agent),
            _ => None,
        }
    }

    fn to_char(self) -> char {
        match self {
            SpawnKind::Kit => 'K',
            SpawnKind::Poison => 'P',
            SpawnKind::Monster => 'M',
            SpawnKind::Ammo => 'A',
            SpawnKind::Agent => 'S',
        }
    }

    const ALL: [SpawnKind; 5] = [
        SpawnKind::Kit,
        SpawnKind::Poison,
        SpawnKind::Monster,
        SpawnKind::Ammo,
        SpawnKind::Agent,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    tags: Vec<Option<SpawnKind>>,
    /// Candidate cells per spawn kind, in row-major order.
    spawn_cells: [Vec<usize>; 5],
}

impl Layout {
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let Some(first) = rows.first() else {
            return Err(Error::MapParse {
                line: 1,
                reason: "empty map".into(),
            });
        };
        let width = first.chars().count();
        let mut walls = Vec::with_capacity(width * rows.len());
        let mut tags = Vec::with_capacity(width * rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::MapParse {
                    line: i + 1,
                    reason: format!("row has {} cells, expected {width}", row.chars().count()),
                });
            }
            for c in row.chars() {
                match c {
                    '#' => {
                        walls.push(true);
                        tags.push(None);
                    }
                    '.' => {
                        walls.push(false);
                        tags.push(None);
                    }
                    other => {
                        let kind = SpawnKind::from_char(other).ok_or_else(|| Error::MapParse {
                            line: i + 1,
                            reason: format!("unknown cell character {other:?}"),
                        })?;
                        walls.push(false);
                        tags.push(Some(kind));
                    }
                }
            }
        }
        Self::from_cells(width, rows.len(), walls, tags)
    }

    fn from_cells(width: usize, height: usize, walls: Vec<bool>, tags: Vec<Option<SpawnKind>>) -> Result<Self> {
        let floor: Vec<usize> = (0..walls.len()).filter(|&i| !walls[i]).collect();
        if floor.is_empty() {
            return Err(Error::MapParse {
                line: 1,
                reason: "map has no floor cells".into(),
            });
        }
        let spawn_cells = SpawnKind::ALL.map(|kind| {
            let tagged: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == Some(kind)).collect();
            if tagged.is_empty() {
                floor.clone()
            } else {
                tagged
            }
        });
        Ok(Layout {
            width,
            height,
            walls,
            tags,
            spawn_cells,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                out.push(match (self.walls[i], self.tags[i]) {
                    (true, _) => '#',
                    (false, Some(k)) => k.to_char(),
                    (false, None) => '.',
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Whether `(y, x)` is a wall; out-of-bounds cells count as walls.
    pub fn is_wall(&self, y: i32, x: i32) -> bool {
        if y < 0 || x < 0 || y >= self.height as i32 || x >= self.width as i32 {
            return true;
        }
        self.walls[y as usize * self.width + x as usize]
    }

    pub fn floor_count(&self) -> usize {
        self.walls.iter().filter(|&&w| !w).count()
    }

    pub(crate) fn spawn_cells(&self, kind: SpawnKind) -> &[usize] {
        let idx = SpawnKind::ALL.iter().position(|&k| k == kind).expect("known kind");
        &self.spawn_cells[idx]
    }

    /// An open room: walls on the border only.
    pub fn room(width: usize, height: usize) -> Self {
        let mut walls = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                if y == 0 || x == 0 || y + 1 == height || x + 1 == width {
                    walls[y * width + x] = true;
                }
            }
        }
        Self::from_cells(width, height, walls, vec![None; width * height]).expect("room has floor")
    }

    /// A grid of `rooms × rooms` chambers joined by doors along a random
    /// spanning tree, plus extra doors with probability `extra_doors` to
    /// create loops. Deterministic in `seed`.
    pub fn maze(width: usize, height: usize, rooms: usize, door: usize, extra_doors: f64, seed: u64) -> Self {
        assert!(rooms >= 1 && width > 3 * rooms && height > 3 * rooms);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<usize> = (0..=rooms).map(|i| i * (width - 1) / rooms).collect();
        let ys: Vec<usize> = (0..=rooms).map(|i| i * (height - 1) / rooms).collect();
        let mut walls = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                if ys.contains(&y) || xs.contains(&x) {
                    walls[y * width + x] = true;
                }
            }
        }

        // Randomized DFS over the room grid.
        let mut visited = vec![false; rooms * rooms];
        let mut doors: Vec<(usize, usize)> = Vec::new();
        let mut stack = vec![0usize];
        visited[0] = true;
        while let Some(&cur) = stack.last() {
            let (r, c) = (cur / rooms, cur % rooms);
            let mut next: Vec<usize> = Vec::new();
            if r > 0 {
                next.push(cur - rooms);
            }
            if r + 1 < rooms {
                next.push(cur + rooms);
            }
            if c > 0 {
                next.push(cur - 1);
            }
            if c + 1 < rooms {
                next.push(cur + 1);
            }
            next.retain(|&n| !visited[n]);
            if next.is_empty() {
                stack.pop();
                continue;
            }
            let n = next[rng.random_range(0..next.len())];
            visited[n] = true;
            doors.push((cur.min(n), cur.max(n)));
            stack.push(n);
        }
        let mut all_pairs = Vec::new();
        for r in 0..rooms {
            for c in 0..rooms {
                let id = r * rooms + c;
                if c + 1 < rooms {
                    all_pairs.push((id, id + 1));
                }
                if r + 1 < rooms {
                    all_pairs.push((id, id + rooms));
                }
            }
        }
        all_pairs.shuffle(&mut rng);
        for pair in all_pairs {
            if !doors.contains(&pair) && rng.random_bool(extra_doors) {
                doors.push(pair);
            }
        }

        for (a, b) in doors {
            let (ra, ca) = (a / rooms, a % rooms);
            if b == a + 1 {
                // Vertical wall between horizontally adjacent rooms.
                let x = xs[ca + 1];
                let (y0, y1) = (ys[ra] + 1, ys[ra + 1]);
                let span = y1 - y0;
                let d = door.min(span);
                let start = y0 + rng.random_range(0..=span - d);
                for y in start..start + d {
                    walls[y * width + x] = false;
                }
            } else {
                let y = ys[ra + 1];
                let (x0, x1) = (xs[ca] + 1, xs[ca + 1]);
                let span = x1 - x0;
                let d = door.min(span);
                let start = x0 + rng.random_range(0..=span - d);
                for x in start..start + d {
                    walls[y * width + x] = false;
                }
            }
        }
        Self::from_cells(width, height, walls, vec![None; width * height]).expect("maze has floor")
    }

    /// Number of floor cells reachable from the first floor cell.
    pub fn reachable_floor(&self) -> usize {
        let Some(start) = self.walls.iter().position(|&w| !w) else {
            return 0;
        };
        let mut seen = vec![false; self.walls.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0;
        while let Some(i) = stack.pop() {
            count += 1;
            let (y, x) = ((i / self.width) as i32, (i % self.width) as i32);
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y + dy, x + dx);
                if !self.is_wall(ny, nx) {
                    let j = ny as usize * self.width + nx as usize;
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }
}
