//! Text-map gridworlds.
//!
//! Map files are UTF-8: a header line `icvf-map v1 slip=<float>` followed by
//! one line per grid row, `#` for walls and `.` for free cells. `D` marks a
//! free cell that is also a door (used only to pick door-adjacent goals).

use std::fmt::Write as _;
use std::path::Path;

use super::{StateId, TabularMdp};
use crate::error::{Error, Result};

const MAP_MAGIC: &str = "icvf-map v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

pub const ACTIONS: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];

impl Action {
    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }

    /// The two moves perpendicular to this one; empty for `Stay`.
    fn orthogonal(self) -> &'static [Action] {
        match self {
            Action::Up | Action::Down => &[Action::Left, Action::Right],
            Action::Left | Action::Right => &[Action::Up, Action::Down],
            Action::Stay => &[],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Free,
    Door,
}

impl Cell {
    pub fn is_free(self) -> bool {
        !matches!(self, Cell::Wall)
    }

    fn symbol(self) -> char {
        match self {
            Cell::Wall => '#',
            Cell::Free => '.',
            Cell::Door => 'D',
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    cells: Vec<Vec<Cell>>,
    slip: f64,
}

impl GridSpec {
    pub fn new(cells: Vec<Vec<Cell>>, slip: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&slip) {
            return Err(Error::config(format!("slip probability {slip} outside [0, 1)")));
        }
        let width = cells.first().map_or(0, Vec::len);
        if width == 0 {
            return Err(Error::config("map has no cells"));
        }
        if let Some((row, line)) = cells.iter().enumerate().find(|(_, line)| line.len() != width) {
            return Err(Error::config(format!(
                "map is not rectangular: row {row} has {} cells, expected {width}",
                line.len()
            )));
        }
        if !cells.iter().flatten().any(|c| c.is_free()) {
            return Err(Error::config("map has no free cells"));
        }
        Ok(Self { cells, slip })
    }

    /// Builds a spec from rows of map characters.
    pub fn from_rows<S: AsRef<str>>(rows: &[S], slip: f64) -> Result<Self> {
        let cells = rows
            .iter()
            .enumerate()
            .map(|(row, line)| parse_row(line.as_ref(), row + 1))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cells, slip)
    }

    /// Parses a full map file (header plus rows).
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(1, "empty map file"))?;
        let rest = header
            .strip_prefix(MAP_MAGIC)
            .ok_or_else(|| Error::format(1, format!("expected header `{MAP_MAGIC} slip=<float>`")))?;
        let slip_text = rest
            .trim()
            .strip_prefix("slip=")
            .ok_or_else(|| Error::format(1, "header is missing `slip=<float>`"))?;
        let slip: f64 = slip_text
            .parse()
            .map_err(|_| Error::format(1, format!("invalid slip value `{slip_text}`")))?;
        let cells = lines
            .enumerate()
            .filter(|(_, line)| !line.is_empty())
            .map(|(i, line)| parse_row(line, i + 2))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cells, slip)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_map_string(&self) -> String {
        let mut out = format!("{MAP_MAGIC} slip={}\n", self.slip);
        for row in &self.cells {
            let line: String = row.iter().map(|c| c.symbol()).collect();
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn height(&self) -> usize {
        self.cells.len()
    }

    pub fn width(&self) -> usize {
        self.cells[0].len()
    }

    pub fn slip(&self) -> f64 {
        self.slip
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row][col]
    }
}

fn parse_row(line: &str, line_no: usize) -> Result<Vec<Cell>> {
    line.trim_end_matches('\r')
        .chars()
        .map(|ch| match ch {
            '#' => Ok(Cell::Wall),
            '.' => Ok(Cell::Free),
            'D' => Ok(Cell::Door),
            other => Err(Error::format(line_no, format!("unexpected map character `{other}`"))),
        })
        .collect()
}

/// A gridworld: the spec, its MDP, and the state-id ↔ cell mapping.
///
/// State ids enumerate free cells in row-major order.
#[derive(Clone, Debug)]
pub struct Gridworld {
    spec: GridSpec,
    mdp: TabularMdp,
    coords: Vec<(usize, usize)>,
    index: Vec<Option<StateId>>,
}

impl Gridworld {
    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn n_states(&self) -> usize {
        self.coords.len()
    }

    /// `(row, col)` of a state.
    pub fn coords(&self, s: StateId) -> (usize, usize) {
        self.coords[s]
    }

    pub fn state_at(&self, row: usize, col: usize) -> Option<StateId> {
        if row >= self.spec.height() || col >= self.spec.width() {
            return None;
        }
        self.index[row * self.spec.width() + col]
    }

    pub fn doors(&self) -> Vec<StateId> {
        (0..self.n_states())
            .filter(|&s| {
                let (r, c) = self.coords[s];
                self.spec.cell(r, c) == Cell::Door
            })
            .collect()
    }

    /// Free neighbours of a state (4-connected).
    pub fn neighbours(&self, s: StateId) -> Vec<StateId> {
        let (r, c) = self.coords[s];
        ACTIONS[..4]
            .iter()
            .filter_map(|a| {
                let (dr, dc) = a.delta();
                let nr = r.checked_add_signed(dr)?;
                let nc = c.checked_add_signed(dc)?;
                self.state_at(nr, nc)
            })
            .collect()
    }

    /// The bundled 5×5 open room.
    pub fn open_room() -> Self {
        let spec = GridSpec::parse(include_str!("../../assets/maps/open5.map")).expect("bundled map");
        build_gridworld(&spec).expect("bundled map")
    }

    /// The bundled 11×11 four-room map with one-cell doors.
    pub fn four_rooms() -> Self {
        let spec = GridSpec::parse(include_str!("../../assets/maps/fourrooms11.map")).expect("bundled map");
        build_gridworld(&spec).expect("bundled map")
    }

    /// Looks up a bundled map by name (`open5`, `fourrooms11`).
    pub fn bundled(name: &str) -> Option<Self> {
        match name {
            "open5" => Some(Self::open_room()),
            "fourrooms11" => Some(Self::four_rooms()),
            _ => None,
        }
    }
}

/// Builds the MDP of a grid spec.
///
/// Moves are deterministic except that, with probability `slip`, a move is
/// replaced by one of its two orthogonal moves (even split). `Stay` never
/// slips. Any move into a wall or off the map leaves the agent in place.
/// The initial distribution is uniform over free cells.
pub fn build_gridworld(spec: &GridSpec) -> Result<Gridworld> {
    let (height, width) = (spec.height(), spec.width());
    let mut index = vec![None; height * width];
    let mut coords = Vec::new();
    for row in 0..height {
        for col in 0..width {
            if spec.cell(row, col).is_free() {
                index[row * width + col] = Some(coords.len());
                coords.push((row, col));
            }
        }
    }
    let n = coords.len();
    if n == 0 {
        return Err(Error::config("map has no free cells"));
    }
    let landing = |s: StateId, action: Action| -> StateId {
        let (r, c) = coords[s];
        let (dr, dc) = action.delta();
        let target = r
            .checked_add_signed(dr)
            .zip(c.checked_add_signed(dc))
            .filter(|&(nr, nc)| nr < height && nc < width);
        match target {
            Some((nr, nc)) => index[nr * width + nc].unwrap_or(s),
            None => s,
        }
    };
    let n_actions = ACTIONS.len();
    let mut transition = vec![0.0; n * n_actions * n];
    for s in 0..n {
        for (a, &action) in ACTIONS.iter().enumerate() {
            let row = &mut transition[(s * n_actions + a) * n..(s * n_actions + a + 1) * n];
            let lateral = action.orthogonal();
            if lateral.is_empty() || spec.slip == 0.0 {
                row[landing(s, action)] += 1.0;
            } else {
                row[landing(s, action)] += 1.0 - spec.slip;
                for &side in lateral {
                    row[landing(s, side)] += spec.slip / lateral.len() as f64;
                }
            }
        }
    }
    let rho = vec![1.0 / n as f64; n];
    let mdp = TabularMdp::new(n, n_actions, transition, rho)?;
    Ok(Gridworld {
        spec: spec.clone(),
        mdp,
        coords,
        index,
    })
}
