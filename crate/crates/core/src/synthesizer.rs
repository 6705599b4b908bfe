//! Frozen stand-in for a text-to-image model.
//!
//! An enhanced prompt is read left to right and turned into a [`Scene`] on a
//! 3x3 grid. The rules are deliberately lossy in the ways real backbones are:
//!
//! - every object-noun mention creates an object;
//! - a numeral creates at most two copies of the noun it precedes, while
//!   repeated mentions (`cat , cat , cat`) create one object each;
//! - a color binds to the first noun within the next two tokens and is
//!   dropped otherwise;
//! - relation words are ignored: objects fill cells in row-major mention
//!   order, wrapping (and colliding) after nine objects;
//! - a layout token right after a mention moves that mention's objects;
//! - distinct detail tokens raise `detail_level`, capped at 5.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{vocabulary, Color, Layout, ObjectClass, TokenId, TokenKind};

pub const GRID: u8 = 3;
pub const MAX_DETAIL_LEVEL: u32 = 5;

/// Tokens after a color or numeral within which its noun must appear.
const BINDING_WINDOW: usize = 2;
/// Copies a numeral can create.
const NUMERAL_CAP: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn new(row: u8, col: u8) -> Self {
        debug_assert!(row < GRID && col < GRID);
        Cell { row, col }
    }

    fn from_cursor(cursor: usize) -> Self {
        let k = (cursor % (GRID as usize * GRID as usize)) as u8;
        Cell::new(k / GRID, k % GRID)
    }

    fn apply(self, layout: Layout) -> Cell {
        let last = GRID - 1;
        let exact = |row, col| Cell::new(row, col);
        match layout {
            Layout::TopLeft => exact(0, 0),
            Layout::TopCenter => exact(0, 1),
            Layout::TopRight => exact(0, 2),
            Layout::MiddleLeft => exact(1, 0),
            Layout::Center => exact(1, 1),
            Layout::MiddleRight => exact(1, 2),
            Layout::BottomLeft => exact(2, 0),
            Layout::BottomCenter => exact(2, 1),
            Layout::BottomRight => exact(2, 2),
            Layout::Left => Cell { col: 0, ..self },
            Layout::Right => Cell { col: last, ..self },
            Layout::Top => Cell { row: 0, ..self },
            Layout::Bottom => Cell { row: last, ..self },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub color: Option<Color>,
    pub cell: Cell,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub detail_level: u32,
}

impl Scene {
    pub fn count(&self, class: ObjectClass) -> usize {
        self.objects.iter().filter(|o| o.class == class).count()
    }

    /// First object of a class in mention order.
    pub fn first(&self, class: ObjectClass) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.class == class)
    }

    pub fn has_colored(&self, class: ObjectClass, color: Color) -> bool {
        self.objects
            .iter()
            .any(|o| o.class == class && o.color == Some(color))
    }

    /// Number of unordered object pairs that share a cell.
    pub fn collisions(&self) -> usize {
        let mut per_cell = [0usize; (GRID * GRID) as usize];
        for o in &self.objects {
            per_cell[(o.cell.row * GRID + o.cell.col) as usize] += 1;
        }
        per_cell.iter().map(|&k| k * k.saturating_sub(1) / 2).sum()
    }
}

impl fmt::Display for Scene {
    /// Renders the grid, one line per row, with `.` for empty cells and
    /// `+N` when more objects share a cell.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut cells: Vec<Vec<String>> = vec![Vec::new(); (GRID * GRID) as usize];
        for o in &self.objects {
            let label = match o.color {
                Some(c) => format!("{c} {}", o.class),
                None => o.class.to_string(),
            };
            cells[(o.cell.row * GRID + o.cell.col) as usize].push(label);
        }
        let rendered: Vec<String> = cells
            .iter()
            .map(|c| match c.len() {
                0 => ".".to_string(),
                1 => c[0].clone(),
                n => format!("{}+{}", c[0], n - 1),
            })
            .collect();
        let width = rendered.iter().map(|s| s.len()).max().unwrap_or(1);
        for row in 0..GRID as usize {
            let line: Vec<String> = (0..GRID as usize)
                .map(|col| format!("{:<width$}", rendered[row * GRID as usize + col]))
                .collect();
            writeln!(f, "| {} |", line.join(" | "))?;
        }
        write!(f, "detail_level = {}", self.detail_level)
    }
}

/// Maps an enhanced prompt to a scene. The input must not contain structure
/// tokens.
pub fn synthesize(prompt: &[TokenId]) -> Result<Scene> {
    let vocab = vocabulary();
    let mut scene = Scene::default();
    let mut details = [false; 10];
    let mut cursor = 0usize;
    let mut pending_color: Option<(Color, usize)> = None;
    let mut pending_count: Option<(u8, usize)> = None;
    // Object indices created by the mention at the previous position.
    let mut last_mention: Option<(usize, std::ops::Range<usize>)> = None;

    for (pos, &tok) in prompt.iter().enumerate() {
        match vocab.kind(tok)? {
            TokenKind::Structure(s) => {
                return Err(Error::FormatLeak {
                    surface: s.surface().to_string(),
                    position: pos,
                })
            }
            TokenKind::Color(c) => pending_color = Some((c, pos)),
            TokenKind::Numeral(n) => pending_count = Some((n, pos)),
            TokenKind::Object(class) => {
                let in_window = |at: usize| pos - at <= BINDING_WINDOW;
                let color = pending_color.take().filter(|&(_, at)| in_window(at)).map(|(c, _)| c);
                let copies = pending_count
                    .take()
                    .filter(|&(_, at)| in_window(at))
                    .map_or(1, |(n, _)| n.min(NUMERAL_CAP));
                let start = scene.objects.len();
                for _ in 0..copies {
                    scene.objects.push(SceneObject {
                        class,
                        color,
                        cell: Cell::from_cursor(cursor),
                    });
                    cursor += 1;
                }
                last_mention = Some((pos, start..scene.objects.len()));
            }
            TokenKind::Layout(layout) => {
                if let Some((at, range)) = last_mention.clone() {
                    if at + 1 == pos {
                        for o in &mut scene.objects[range] {
                            o.cell = o.cell.apply(layout);
                        }
                    }
                }
            }
            TokenKind::Detail(d) => details[d as usize] = true,
            TokenKind::Function(_) | TokenKind::Relation(_) => {}
        }
    }
    scene.detail_level = (details.iter().filter(|&&d| d).count() as u32).min(MAX_DETAIL_LEVEL);
    Ok(scene)
}
