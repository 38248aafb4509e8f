//! Structural domain model: SAI grid dimensions, confidence grid,
//! pseudo-temporal scan orders and GOP grouping.

use std::io::BufRead;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a light field: `rows x cols` sub-aperture images on the
/// uv plane, each `height x width` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaiGridDims {
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
}

impl SaiGridDims {
    pub fn new(rows: usize, cols: usize, height: usize, width: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "grid dimensions must be positive, got {rows}x{cols} SAIs of {height}x{width}"
            )));
        }
        Ok(SaiGridDims {
            rows,
            cols,
            height,
            width,
        })
    }

    /// Number of cells on the uv plane.
    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Per-SAI average pixel confidences, rescaled to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` entries, each in [0, 1].
    pub values: Vec<f64>,
}

impl ConfidenceGrid {
    /// Builds a grid from raw values, affinely rescaling to [0, 1].
    /// An all-equal input maps to all-ones (uniformly trustworthy).
    pub fn from_raw(rows: usize, cols: usize, raw: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || raw.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "confidence grid shape mismatch: {rows}x{cols} vs {} values",
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "confidence grid contains non-finite values".into(),
            ));
        }
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let values = if max > min {
            raw.iter().map(|v| (v - min) / (max - min)).collect()
        } else {
            vec![1.0; raw.len()]
        };
        Ok(ConfidenceGrid { rows, cols, values })
    }

    /// Uniform all-ones grid.
    pub fn uniform(rows: usize, cols: usize) -> Self {
        ConfidenceGrid {
            rows,
            cols,
            values: vec![1.0; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Parses a plain CSV of `rows` lines with `cols` numeric columns each,
    /// then rescales to [0, 1].
    pub fn from_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut raw = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno + 1,
                        msg: format!("non-numeric confidence cell '{}'", cell.trim()),
                    })
                })
                .collect::<Result<_>>()?;
            match cols {
                None => cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: format!("ragged row: expected {c} columns, got {}", row.len()),
                    })
                }
                _ => {}
            }
            raw.extend(row);
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::InvalidInput("empty confidence grid".into()));
        }
        ConfidenceGrid::from_raw(rows, cols.unwrap(), raw)
    }
}

/// Built-in scan order kinds for arranging SAIs into a PTS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    Raster,
    Snake,
    Spiral,
    Custom,
}

impl std::str::FromStr for ScanKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster" => Ok(ScanKind::Raster),
            "snake" => Ok(ScanKind::Snake),
            "spiral" => Ok(ScanKind::Spiral),
            "custom" => Ok(ScanKind::Custom),
            other => Err(Error::InvalidInput(format!("unknown scan order '{other}'"))),
        }
    }
}

/// Bijection between PTS frame indices and uv grid cells.
///
/// Frames and cells are 0-based in memory; the CSV interchange format is
/// 1-based (`frame_index,k,l`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanOrder {
    pub kind: ScanKind,
    pub rows: usize,
    pub cols: usize,
    /// cells[i] = (row, col) of frame i.
    cells: Vec<(usize, usize)>,
}

impl ScanOrder {
    /// Builds one of the built-in scan orders covering the first
    /// `frame_count` cells.
    pub fn build(kind: ScanKind, rows: usize, cols: usize, frame_count: usize) -> Result<Self> {
        if frame_count > rows * cols {
            return Err(Error::InvalidInput(format!(
                "frame count {frame_count} exceeds grid capacity {}",
                rows * cols
            )));
        }
        if frame_count == 0 {
            return Err(Error::InvalidInput("frame count must be positive".into()));
        }
        let cells = match kind {
            ScanKind::Raster => raster_cells(rows, cols),
            ScanKind::Snake => snake_cells(rows, cols),
            ScanKind::Spiral => spiral_cells(rows, cols),
            ScanKind::Custom => {
                return Err(Error::InvalidInput(
                    "custom scan order requires a mapping file".into(),
                ))
            }
        };
        Ok(ScanOrder {
            kind,
            rows,
            cols,
            cells: cells[..frame_count].to_vec(),
        })
    }

    /// Loads a custom mapping from CSV lines `frame_index,k,l` (1-based).
    pub fn from_csv<R: BufRead>(reader: R, rows: usize, cols: usize) -> Result<Self> {
        let mut entries: Vec<(usize, usize, usize)> = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "expected 'frame_index,k,l'".into(),
                });
            }
            let nums: Vec<usize> = parts
                .iter()
                .map(|p| {
                    p.parse::<usize>().map_err(|_| Error::Parse {
                        line: lineno + 1,
                        msg: format!("non-integer field '{p}'"),
                    })
                })
                .collect::<Result<_>>()?;
            if nums[0] == 0 || nums[1] == 0 || nums[2] == 0 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "indices are 1-based and must be positive".into(),
                });
            }
            if nums[1] > rows || nums[2] > cols {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("cell ({},{}) outside {rows}x{cols} grid", nums[1], nums[2]),
                });
            }
            entries.push((nums[0] - 1, nums[1] - 1, nums[2] - 1));
        }
        if entries.is_empty() {
            return Err(Error::InvalidInput("empty scan order mapping".into()));
        }
        let n = entries.len();
        let mut cells = vec![None; n];
        let mut seen = vec![false; rows * cols];
        for (frame, r, c) in entries {
            if frame >= n {
                return Err(Error::InvalidInput(format!(
                    "frame index {} out of range 1..={n}",
                    frame + 1
                )));
            }
            if cells[frame].is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate frame index {}",
                    frame + 1
                )));
            }
            if seen[r * cols + c] {
                return Err(Error::InvalidInput(format!(
                    "cell ({},{}) mapped twice",
                    r + 1,
                    c + 1
                )));
            }
            seen[r * cols + c] = true;
            cells[frame] = Some((r, c));
        }
        let cells: Vec<(usize, usize)> = cells.into_iter().map(Option::unwrap).collect();
        Ok(ScanOrder {
            kind: ScanKind::Custom,
            rows,
            cols,
            cells,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.cells.len()
    }

    /// (row, col) of frame `i`, 0-based.
    pub fn cell_of(&self, frame: usize) -> (usize, usize) {
        self.cells[frame]
    }

    /// Frame index at cell (row, col), if mapped.
    pub fn frame_at(&self, row: usize, col: usize) -> Option<usize> {
        self.cells.iter().position(|&c| c == (row, col))
    }

    /// Serializes as 1-based CSV lines `frame_index,k,l`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (i, (r, c)) in self.cells.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, r + 1, c + 1));
        }
        out
    }
}

fn raster_cells(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect()
}

fn snake_cells(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    (0..rows)
        .flat_map(|r| {
            let range: Box<dyn Iterator<Item = usize>> = if r % 2 == 0 {
                Box::new(0..cols)
            } else {
                Box::new((0..cols).rev())
            };
            range.map(move |c| (r, c))
        })
        .collect()
}

/// Outward clockwise spiral from the grid center cell
/// (ceil(rows/2), ceil(cols/2)) in 1-based terms.
fn spiral_cells(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let start = ((rows + 1) / 2 - 1, (cols + 1) / 2 - 1);
    let mut cells = Vec::with_capacity(rows * cols);
    let visit = |r: i64, c: i64, cells: &mut Vec<(usize, usize)>| {
        if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
            cells.push((r as usize, c as usize));
        }
    };
    let (mut r, mut c) = (start.0 as i64, start.1 as i64);
    visit(r, c, &mut cells);
    // Clockwise: right, down, left, up with run lengths 1,1,2,2,3,3,...
    let dirs: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
    let mut run = 1usize;
    let mut dir = 0usize;
    while cells.len() < rows * cols {
        for _ in 0..2 {
            for _ in 0..run {
                r += dirs[dir].0;
                c += dirs[dir].1;
                visit(r, c, &mut cells);
            }
            dir = (dir + 1) % 4;
            if cells.len() == rows * cols {
                break;
            }
        }
        run += 1;
    }
    cells
}

/// Contiguous partition of frames `[0..frame_count)` into GOPs of
/// `gop_size`, with a possibly shorter final group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GopGrouping {
    pub gop_size: usize,
    pub frame_count: usize,
    groups: Vec<Range<usize>>,
}

impl GopGrouping {
    pub fn new(frame_count: usize, gop_size: usize) -> Result<Self> {
        if frame_count == 0 || gop_size == 0 {
            return Err(Error::InvalidInput(
                "frame count and GOP size must be positive".into(),
            ));
        }
        let groups = (0..frame_count)
            .step_by(gop_size)
            .map(|start| start..(start + gop_size).min(frame_count))
            .collect();
        Ok(GopGrouping {
            gop_size,
            frame_count,
            groups,
        })
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    /// Index of the GOP containing frame `i`.
    pub fn gop_of(&self, frame: usize) -> usize {
        frame / self.gop_size
    }

    /// Position of frame `i` within its GOP.
    pub fn position_of(&self, frame: usize) -> usize {
        frame % self.gop_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn raster_order_2x2() {
        let so = ScanOrder::build(ScanKind::Raster, 2, 2, 4).unwrap();
        assert_eq!(so.cell_of(0), (0, 0));
        assert_eq!(so.cell_of(1), (0, 1));
        assert_eq!(so.cell_of(2), (1, 0));
        assert_eq!(so.cell_of(3), (1, 1));
    }

    #[test]
    fn snake_order_2x2() {
        let so = ScanOrder::build(ScanKind::Snake, 2, 2, 4).unwrap();
        assert_eq!(so.cell_of(2), (1, 1));
        assert_eq!(so.cell_of(3), (1, 0));
    }

    #[test]
    fn frame_count_exceeding_grid_is_rejected() {
        assert!(ScanOrder::build(ScanKind::Raster, 2, 2, 5).is_err());
    }

    // Frozen definition of the outward clockwise spiral on a 3x3 grid.
    #[test]
    fn spiral_order_3x3_frozen() {
        let so = ScanOrder::build(ScanKind::Spiral, 3, 3, 9).unwrap();
        let expect = [
            (1, 1),
            (1, 2),
            (2, 2),
            (2, 1),
            (2, 0),
            (1, 0),
            (0, 0),
            (0, 1),
            (0, 2),
        ];
        for (i, cell) in expect.iter().enumerate() {
            assert_eq!(so.cell_of(i), *cell, "frame {i}");
        }
    }

    #[test]
    fn scan_order_round_trip() {
        for kind in [ScanKind::Raster, ScanKind::Snake, ScanKind::Spiral] {
            let so = ScanOrder::build(kind, 4, 5, 20).unwrap();
            for i in 0..20 {
                let (r, c) = so.cell_of(i);
                assert_eq!(so.frame_at(r, c), Some(i));
            }
        }
    }

    #[test]
    fn custom_mapping_round_trips_through_csv() {
        let so = ScanOrder::build(ScanKind::Spiral, 3, 3, 7).unwrap();
        let csv = so.to_csv();
        let back = ScanOrder::from_csv(Cursor::new(csv), 3, 3).unwrap();
        for i in 0..7 {
            assert_eq!(back.cell_of(i), so.cell_of(i));
        }
    }

    #[test]
    fn custom_mapping_rejects_duplicates() {
        let csv = "1,1,1\n2,1,1\n";
        assert!(ScanOrder::from_csv(Cursor::new(csv), 2, 2).is_err());
        let csv = "1,1,1\n1,1,2\n";
        assert!(ScanOrder::from_csv(Cursor::new(csv), 2, 2).is_err());
        let csv = "1,3,1\n";
        assert!(ScanOrder::from_csv(Cursor::new(csv), 2, 2).is_err());
    }

    #[test]
    fn gops_192_by_8_and_12() {
        let g = GopGrouping::new(192, 8).unwrap();
        assert_eq!(g.group_count(), 24);
        assert!(g.groups().iter().all(|r| r.len() == 8));
        let g = GopGrouping::new(192, 12).unwrap();
        assert_eq!(g.group_count(), 16);
        assert!(g.groups().iter().all(|r| r.len() == 12));
    }

    #[test]
    fn gop_remainder_group() {
        let g = GopGrouping::new(10, 4).unwrap();
        assert_eq!(g.groups(), &[0..4, 4..8, 8..10]);
        assert_eq!(g.gop_of(9), 2);
        assert_eq!(g.position_of(9), 1);
    }

    #[test]
    fn gop_partition_covers_all_frames() {
        for (n, k) in [(1, 1), (7, 3), (192, 8), (13, 13), (5, 9)] {
            let g = GopGrouping::new(n, k).unwrap();
            let total: usize = g.groups().iter().map(|r| r.len()).sum();
            assert_eq!(total, n);
            let mut next = 0;
            for r in g.groups() {
                assert_eq!(r.start, next);
                next = r.end;
            }
            assert_eq!(next, n);
        }
    }

    #[test]
    fn confidence_rescale() {
        let g = ConfidenceGrid::from_raw(2, 2, vec![0.0, 50.0, 100.0, 50.0]).unwrap();
        assert_eq!(g.values, vec![0.0, 0.5, 1.0, 0.5]);
    }

    #[test]
    fn confidence_all_equal_maps_to_ones() {
        let g = ConfidenceGrid::from_raw(2, 2, vec![7.0; 4]).unwrap();
        assert_eq!(g.values, vec![1.0; 4]);
    }

    #[test]
    fn confidence_endpoints() {
        let g = ConfidenceGrid::from_raw(1, 2, vec![0.2, 0.9]).unwrap();
        assert_eq!(g.values, vec![0.0, 1.0]);
    }

    #[test]
    fn confidence_csv_errors() {
        assert!(ConfidenceGrid::from_csv(Cursor::new("1,2\n3\n")).is_err());
        assert!(ConfidenceGrid::from_csv(Cursor::new("1,x\n")).is_err());
        assert!(ConfidenceGrid::from_csv(Cursor::new("")).is_err());
    }

    #[test]
    fn confidence_preserves_order() {
        let raw = vec![3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let g = ConfidenceGrid::from_raw(2, 3, raw.clone()).unwrap();
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                if raw[i] <= raw[j] {
                    assert!(g.values[i] <= g.values[j]);
                }
            }
        }
    }
}
