use std::fmt::Write as _;
use std::path::Path;

use streetscape_core::{Error, Result};

/// Overhead cell class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CellClass {
    Road = 0,
    Sidewalk = 1,
    Building = 2,
    OpenGround = 3,
}

impl CellClass {
    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Self::Road),
            1 => Some(Self::Sidewalk),
            2 => Some(Self::Building),
            3 => Some(Self::OpenGround),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }
}

/// Largest grid accepted from a layout file.
pub const MAX_CELLS: usize = 1 << 22;

/// Overhead semantic grid plus building heights, row-major with `x` along
/// columns and `y` along rows. Cell `(col, row)` covers
/// `[col·s, (col+1)·s) × [row·s, (row+1)·s)` in world meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    width: usize,
    height: usize,
    cell_size: f64,
    semantic: Vec<CellClass>,
    heights: Vec<f64>,
}

impl SceneLayout {
    pub fn new(
        width: usize,
        height: usize,
        cell_size: f64,
        semantic: Vec<CellClass>,
        heights: Vec<f64>,
    ) -> Result<Self> {
        let layout = Self { width, height, cell_size, semantic, heights };
        layout.validate()?;
        Ok(layout)
    }

    /// A layout of uniform class with zero heights.
    pub fn filled(width: usize, height: usize, cell_size: f64, class: CellClass) -> Result<Self> {
        Self::new(width, height, cell_size, vec![class; width * height], vec![0.0; width * height])
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("layout must have at least one cell"));
        }
        if self.width.checked_mul(self.height).is_none_or(|n| n > MAX_CELLS) {
            return Err(Error::config(format!("layout {}x{} exceeds {MAX_CELLS} cells", self.width, self.height)));
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(Error::config(format!("cell size {} must be positive", self.cell_size)));
        }
        let n = self.width * self.height;
        if self.semantic.len() != n || self.heights.len() != n {
            return Err(Error::contract("layout arrays do not match its dimensions"));
        }
        for (i, (&class, &h)) in self.semantic.iter().zip(&self.heights).enumerate() {
            if !h.is_finite() || h < 0.0 {
                return Err(Error::config(format!("cell {i}: height {h} must be finite and >= 0")));
            }
            if h > 0.0 && class != CellClass::Building {
                return Err(Error::config(format!("cell {i}: non-building cell has height {h}")));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// World extent in meters along x and y.
    pub fn extent(&self) -> (f64, f64) {
        (self.width as f64 * self.cell_size, self.height as f64 * self.cell_size)
    }

    pub fn semantic(&self) -> &[CellClass] {
        &self.semantic
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn class_at(&self, col: usize, row: usize) -> CellClass {
        self.semantic[self.index(col, row)]
    }

    #[inline]
    pub fn height_at(&self, col: usize, row: usize) -> f64 {
        self.heights[self.index(col, row)]
    }

    /// Cell containing the world point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 {
            return None;
        }
        let col = (x / self.cell_size).floor() as usize;
        let row = (y / self.cell_size).floor() as usize;
        (col < self.width && row < self.height).then_some((col, row))
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().copied().fold(0.0, f64::max)
    }

    pub fn count(&self, class: CellClass) -> usize {
        self.semantic.iter().filter(|&&c| c == class).count()
    }

    /// Sets one cell; heights are forced to zero for non-building classes.
    pub fn set_cell(&mut self, col: usize, row: usize, class: CellClass, height: f64) {
        let i = self.index(col, row);
        self.semantic[i] = class;
        self.heights[i] = if class == CellClass::Building { height.max(0.0) } else { 0.0 };
    }

    /// Serializes to the `STREETGRID` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.semantic.len() * 8 + 32);
        writeln!(out, "STREETGRID 1 {} {} {}", self.width, self.height, self.cell_size).unwrap();
        for (class, h) in self.semantic.iter().zip(&self.heights) {
            writeln!(out, "{} {}", class.id(), h).unwrap();
        }
        out
    }

    /// Parses the `STREETGRID` text format: a header line
    /// `STREETGRID 1 <width> <height> <cell_size>` followed by `width·height`
    /// lines `<class-id> <height-meters>` in row-major order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::format("layout: empty file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "STREETGRID" {
            return Err(Error::format("layout: header must be 'STREETGRID 1 <w> <h> <cell_size>'"));
        }
        if fields[1] != "1" {
            return Err(Error::format(format!("layout: unsupported version {}", fields[1])));
        }
        let parse_dim =
            |s: &str, what: &str| s.parse::<usize>().map_err(|_| Error::format(format!("layout: bad {what} {s:?}")));
        let width = parse_dim(fields[2], "width")?;
        let height = parse_dim(fields[3], "height")?;
        let cell_size: f64 =
            fields[4].parse().map_err(|_| Error::format(format!("layout: bad cell size {:?}", fields[4])))?;
        let n = width
            .checked_mul(height)
            .filter(|&n| n > 0 && n <= MAX_CELLS)
            .ok_or_else(|| Error::format(format!("layout: unsupported size {width}x{height}")))?;
        let mut semantic = Vec::with_capacity(n.min(text.len() / 4 + 1));
        let mut heights = Vec::with_capacity(n.min(text.len() / 4 + 1));
        for (lineno, line) in lines {
            if semantic.len() == n {
                return Err(Error::format(format!("layout: unexpected data at line {}", lineno + 1)));
            }
            let mut parts = line.split_whitespace();
            let (Some(c), Some(h), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(format!("layout: line {} must be '<class> <height>'", lineno + 1)));
            };
            let class = c
                .parse::<u8>()
                .ok()
                .and_then(CellClass::from_id)
                .ok_or_else(|| Error::format(format!("layout: bad class {c:?} at line {}", lineno + 1)))?;
            let h: f64 =
                h.parse().map_err(|_| Error::format(format!("layout: bad height {h:?} at line {}", lineno + 1)))?;
            semantic.push(class);
            heights.push(h);
        }
        if semantic.len() != n {
            return Err(Error::format(format!("layout: expected {n} cells, found {}", semantic.len())));
        }
        Self::new(width, height, cell_size, semantic, heights).map_err(|e| match e {
            Error::Config(m) => Error::Format(format!("layout: {m}")),
            other => other,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SceneLayout {
        let mut l = SceneLayout::filled(3, 2, 1.5, CellClass::Road).unwrap();
        l.set_cell(1, 1, CellClass::Building, 12.25);
        l.set_cell(2, 0, CellClass::OpenGround, 0.0);
        l
    }

    #[test]
    fn text_round_trip() {
        let l = small();
        let text = l.to_text();
        assert!(text.starts_with("STREETGRID 1 3 2 1.5\n"));
        assert_eq!(SceneLayout::parse(&text).unwrap(), l);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(SceneLayout::parse("").is_err());
        assert!(SceneLayout::parse("STREETGRID 2 1 1 1\n0 0\n").is_err());
        assert!(SceneLayout::parse("STREETGRID 1 1 1 1\n4 0\n").is_err());
        assert!(SceneLayout::parse("STREETGRID 1 1 1 1\n0 3\n").is_err(), "road with height");
        assert!(SceneLayout::parse("STREETGRID 1 1 1 1\n2 -1\n").is_err());
        assert!(SceneLayout::parse("STREETGRID 1 2 1 1\n0 0\n").is_err(), "short");
        assert!(SceneLayout::parse("STREETGRID 1 1 1 1\n0 0\n0 0\n").is_err(), "long");
        assert!(SceneLayout::parse("STREETGRID 1 1 1 0\n0 0\n").is_err());
        assert!(SceneLayout::parse("STREETGRID 1 99999999 99999999 1\n").is_err());
        assert!(SceneLayout::parse("STREETGRID 1 1 1 1\n2 NaN\n").is_err());
    }

    #[test]
    fn cell_lookup() {
        let l = small();
        assert_eq!(l.cell_of(1.6, 1.6), Some((1, 1)));
        assert_eq!(l.cell_of(4.6, 0.0), None);
        assert_eq!(l.cell_of(-0.1, 0.0), None);
        assert_eq!(l.class_at(1, 1), CellClass::Building);
        assert_eq!(l.max_height(), 12.25);
    }

    proptest! {
        #[test]
        fn parse_never_panics(text in "\\PC{0,200}") {
            let _ = SceneLayout::parse(&text);
        }
    }
}
