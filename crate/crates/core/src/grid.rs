//! ARC puzzle model: grids, example pairs, and the task-file format.
//!
//! A task file is a JSON object with `"train"` and `"test"` lists whose
//! entries carry row-major `"input"` / `"output"` integer matrices. Test
//! entries may omit `"output"` (blind inference).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Largest allowed height or width.
pub const MAX_GRID_SIDE: usize = 30;
/// Number of distinct colors; cells hold `0..NUM_COLORS`.
pub const NUM_COLORS: u8 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArcError {
    #[error("malformed task document: {0}")]
    MalformedDocument(String),
    #[error("invalid grid at {location}: {reason}")]
    InvalidGrid { location: String, reason: String },
    #[error("task has no {0} entries")]
    EmptySplit(&'static str),
    #[error("invalid puzzle id {0:?}: must be non-empty and contain only [A-Za-z0-9_.-]")]
    InvalidId(String),
    #[error("io error reading {path}: {message}")]
    Io { path: String, message: String },
}

/// Why a candidate matrix is not a valid grid.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("grid has no rows")]
    Empty,
    #[error("row {0} is empty")]
    EmptyRow(usize),
    #[error("row {row} has length {len}, expected {expected}")]
    Ragged { row: usize, len: usize, expected: usize },
    #[error("grid is {height}x{width}, exceeds {max}x{max}")]
    TooLarge { height: usize, width: usize, max: usize },
    #[error("cell ({row},{col}) has color {value}, expected 0..=9")]
    BadColor { row: usize, col: usize, value: i64 },
}

/// Rectangular matrix of color codes `0..=9`, at most 30x30.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    rows: Vec<Vec<u8>>,
}

impl Grid {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self, GridError> {
        let wide: Vec<Vec<i64>> = rows
            .iter()
            .map(|r| r.iter().map(|&c| c as i64).collect())
            .collect();
        Self::validate(&wide)?;
        Ok(Self { rows })
    }

    /// Validates an arbitrary integer matrix, e.g. one decoded from JSON.
    pub fn from_i64_rows(rows: &[Vec<i64>]) -> Result<Self, GridError> {
        Self::validate(rows)?;
        Ok(Self {
            rows: rows
                .iter()
                .map(|r| r.iter().map(|&c| c as u8).collect())
                .collect(),
        })
    }

    /// Validates an untyped JSON value (used for program outputs).
    pub fn from_json(value: &serde_json::Value) -> Result<Self, String> {
        let rows = value
            .as_array()
            .ok_or_else(|| "output is not a list of rows".to_string())?;
        let mut parsed = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            let cells = row
                .as_array()
                .ok_or_else(|| format!("row {r} is not a list"))?;
            let mut out = Vec::with_capacity(cells.len());
            for (c, cell) in cells.iter().enumerate() {
                let v = cell
                    .as_i64()
                    .ok_or_else(|| format!("cell ({r},{c}) is not an integer"))?;
                out.push(v);
            }
            parsed.push(out);
        }
        Self::from_i64_rows(&parsed).map_err(|e| e.to_string())
    }

    fn validate(rows: &[Vec<i64>]) -> Result<(), GridError> {
        let height = rows.len();
        if height == 0 {
            return Err(GridError::Empty);
        }
        let width = rows[0].len();
        for (r, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(GridError::EmptyRow(r));
            }
            if row.len() != width {
                return Err(GridError::Ragged {
                    row: r,
                    len: row.len(),
                    expected: width,
                });
            }
        }
        if height > MAX_GRID_SIDE || width > MAX_GRID_SIDE {
            return Err(GridError::TooLarge {
                height,
                width,
                max: MAX_GRID_SIDE,
            });
        }
        for (r, row) in rows.iter().enumerate() {
            for (c, &value) in row.iter().enumerate() {
                if !(0..NUM_COLORS as i64).contains(&value) {
                    return Err(GridError::BadColor { row: r, col: c, value });
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn get(&self, row: usize, col: usize) -> Option<u8> {
        self.rows.get(row).and_then(|r| r.get(col)).copied()
    }

    /// Header line `HxW` followed by one line of digits per row.
    pub fn render_text(&self) -> String {
        let mut out = format!("{}x{}", self.height(), self.width());
        for row in &self.rows {
            out.push('\n');
            out.extend(row.iter().map(|&c| char::from(b'0' + c)));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.rows).expect("grid rows always serialize")
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({:?})", self.rows)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_text())
    }
}

impl Serialize for Grid {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<i64>>::deserialize(deserializer)?;
        Grid::from_i64_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Renders a grid for prompts. See [`Grid::render_text`].
pub fn render_grid_text(g: &Grid) -> String {
    g.render_text()
}

/// True iff both grids have identical dimensions and cells.
pub fn grids_equal(a: &Grid, b: &Grid) -> bool {
    a.height() == b.height() && a.width() == b.width() && a.rows == b.rows
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub input: Grid,
    pub output: Grid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub input: Grid,
    #[serde(rename = "output", default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Grid>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Puzzle {
    pub id: String,
    pub train: Vec<ExamplePair>,
    pub test: Vec<TestCase>,
}

impl Puzzle {
    pub fn new(id: impl Into<String>, train: Vec<ExamplePair>, test: Vec<TestCase>) -> Result<Self, ArcError> {
        let id = id.into();
        validate_id(&id)?;
        if train.is_empty() {
            return Err(ArcError::EmptySplit("train"));
        }
        if test.is_empty() {
            return Err(ArcError::EmptySplit("test"));
        }
        Ok(Self { id, train, test })
    }

    /// Expected outputs for every test case, or the index of the first missing one.
    pub fn expected_outputs(&self) -> Result<Vec<&Grid>, usize> {
        self.test
            .iter()
            .enumerate()
            .map(|(i, t)| t.expected.as_ref().ok_or(i))
            .collect()
    }

    /// Copy with all expected test outputs removed.
    pub fn blind(&self) -> Puzzle {
        Puzzle {
            id: self.id.clone(),
            train: self.train.clone(),
            test: self
                .test
                .iter()
                .map(|t| TestCase {
                    input: t.input.clone(),
                    expected: None,
                })
                .collect(),
        }
    }
}

pub fn validate_id(id: &str) -> Result<(), ArcError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ArcError::InvalidId(id.to_string()))
    }
}

// Raw shapes of the task file; grids are validated after decoding so errors
// can name their location.
#[derive(Deserialize)]
struct RawTask {
    train: Vec<RawEntry>,
    test: Vec<RawEntry>,
}

#[derive(Deserialize)]
struct RawEntry {
    input: Vec<Vec<i64>>,
    #[serde(default)]
    output: Option<Vec<Vec<i64>>>,
}

#[derive(Serialize)]
struct TaskOut<'a> {
    train: &'a [ExamplePair],
    test: &'a [TestCase],
}

fn checked(rows: &[Vec<i64>], location: String) -> Result<Grid, ArcError> {
    Grid::from_i64_rows(rows).map_err(|e| ArcError::InvalidGrid {
        location,
        reason: e.to_string(),
    })
}

pub fn parse_puzzle(raw: &str, id: &str) -> Result<Puzzle, ArcError> {
    validate_id(id)?;
    let task: RawTask =
        serde_json::from_str(raw).map_err(|e| ArcError::MalformedDocument(e.to_string()))?;
    if task.train.is_empty() {
        return Err(ArcError::EmptySplit("train"));
    }
    if task.test.is_empty() {
        return Err(ArcError::EmptySplit("test"));
    }
    let mut train = Vec::with_capacity(task.train.len());
    for (i, e) in task.train.iter().enumerate() {
        let input = checked(&e.input, format!("train[{i}].input"))?;
        let output = match &e.output {
            Some(o) => checked(o, format!("train[{i}].output"))?,
            None => {
                return Err(ArcError::MalformedDocument(format!(
                    "train[{i}] has no output"
                )))
            }
        };
        train.push(ExamplePair { input, output });
    }
    let mut test = Vec::with_capacity(task.test.len());
    for (i, e) in task.test.iter().enumerate() {
        let input = checked(&e.input, format!("test[{i}].input"))?;
        let expected = e
            .output
            .as_ref()
            .map(|o| checked(o, format!("test[{i}].output")))
            .transpose()?;
        test.push(TestCase { input, expected });
    }
    Puzzle::new(id, train, test)
}

pub fn serialize_puzzle(p: &Puzzle) -> String {
    serde_json::to_string(&TaskOut {
        train: &p.train,
        test: &p.test,
    })
    .expect("puzzle always serializes")
}

/// Loads `<dir>/<id>.json`-style task files; the id is the file stem.
pub fn load_puzzle_file(path: &Path) -> Result<Puzzle, ArcError> {
    let raw = std::fs::read_to_string(path).map_err(|e| ArcError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| ArcError::InvalidId(path.display().to_string()))?;
    parse_puzzle(&raw, id)
}

/// All `*.json` task files in a directory, sorted by puzzle id.
pub fn load_puzzle_dir(dir: &Path) -> Result<Vec<Puzzle>, ArcError> {
    let read = std::fs::read_dir(dir).map_err(|e| ArcError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let mut paths: Vec<_> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_puzzle_file(p)).collect()
}
