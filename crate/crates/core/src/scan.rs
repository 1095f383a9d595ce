//! Continuous 2D scan orders over a feature grid.
//!
//! Four paths are produced: a row-wise snake and a column-wise snake starting
//! at the top-left cell, and the exact reversals of both (which therefore start
//! at the bottom-right cell). Consecutive cells in every path are 4-neighbours.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::autodiff::permute_last;
use crate::error::{Error, Result};
use crate::tensor::{dims, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(
                "grid",
                format!("grid extents must be positive, got {height}x{width}"),
            ));
        }
        Ok(Self { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, flat: usize) -> (usize, usize) {
        (flat / self.width, flat % self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PathId {
    RowSnakeTL,
    RowSnakeBR,
    ColSnakeTL,
    ColSnakeBR,
}

impl PathId {
    pub const ALL: [PathId; 4] = [
        PathId::RowSnakeTL,
        PathId::RowSnakeBR,
        PathId::ColSnakeTL,
        PathId::ColSnakeBR,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PathId::RowSnakeTL => "row-tl",
            PathId::RowSnakeBR => "row-br",
            PathId::ColSnakeTL => "col-tl",
            PathId::ColSnakeBR => "col-br",
        }
    }
}

impl fmt::Display for PathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PathId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        match key.as_str() {
            "row-tl" | "rowsnaketl" => Ok(PathId::RowSnakeTL),
            "row-br" | "rowsnakebr" => Ok(PathId::RowSnakeBR),
            "col-tl" | "colsnaketl" => Ok(PathId::ColSnakeTL),
            "col-br" | "colsnakebr" => Ok(PathId::ColSnakeBR),
            _ => Err(Error::invalid(
                "path",
                format!("unknown path `{s}` (expected row-tl, row-br, col-tl or col-br)"),
            )),
        }
    }
}

/// Step direction into a token, relative to the previously visited cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DirectionId {
    Begin = 0,
    Right = 1,
    Left = 2,
    Down = 3,
    Up = 4,
}

impl DirectionId {
    pub const COUNT: usize = 5;

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DirectionId::Begin,
            1 => DirectionId::Right,
            2 => DirectionId::Left,
            3 => DirectionId::Down,
            4 => DirectionId::Up,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DirectionId::Begin => "begin",
            DirectionId::Right => "right",
            DirectionId::Left => "left",
            DirectionId::Down => "down",
            DirectionId::Up => "up",
        }
    }

    /// Direction of the unit step `from -> to`, if the cells are 4-neighbours.
    pub fn of_step(from: (usize, usize), to: (usize, usize)) -> Option<Self> {
        let dr = to.0 as isize - from.0 as isize;
        let dc = to.1 as isize - from.1 as isize;
        match (dr, dc) {
            (0, 1) => Some(DirectionId::Right),
            (0, -1) => Some(DirectionId::Left),
            (1, 0) => Some(DirectionId::Down),
            (-1, 0) => Some(DirectionId::Up),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathOrder {
    pub path_id: PathId,
    pub grid: GridShape,
    /// `order[j]` is the row-major flat index of the j-th visited cell.
    pub order: Arc<[usize]>,
    pub dirs: Arc<[DirectionId]>,
}

impl PathOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dir_codes(&self) -> Arc<[u8]> {
        self.dirs.iter().map(|d| d.code()).collect()
    }

    pub fn inverse(&self) -> Vec<usize> {
        invert_path(&self.order)
    }
}

fn row_snake(grid: GridShape) -> Vec<usize> {
    (0..grid.height)
        .flat_map(|r| {
            let cols: Box<dyn Iterator<Item = usize>> = if r % 2 == 0 {
                Box::new(0..grid.width)
            } else {
                Box::new((0..grid.width).rev())
            };
            cols.map(move |c| r * grid.width + c)
        })
        .collect()
}

fn col_snake(grid: GridShape) -> Vec<usize> {
    (0..grid.width)
        .flat_map(|c| {
            let rows: Box<dyn Iterator<Item = usize>> = if c % 2 == 0 {
                Box::new(0..grid.height)
            } else {
                Box::new((0..grid.height).rev())
            };
            rows.map(move |r| r * grid.width + c)
        })
        .collect()
}

pub fn generate_path(grid: GridShape, path_id: PathId) -> PathOrder {
    let order = match path_id {
        PathId::RowSnakeTL => row_snake(grid),
        PathId::ColSnakeTL => col_snake(grid),
        PathId::RowSnakeBR => {
            let mut o = row_snake(grid);
            o.reverse();
            o
        }
        PathId::ColSnakeBR => {
            let mut o = col_snake(grid);
            o.reverse();
            o
        }
    };
    let dirs = std::iter::once(DirectionId::Begin)
        .chain(order.windows(2).map(|w| {
            DirectionId::of_step(grid.position(w[0]), grid.position(w[1]))
                .expect("snake orders only take unit steps")
        }))
        .collect();
    PathOrder {
        path_id,
        grid,
        order: order.into(),
        dirs,
    }
}

/// All four scan paths for a grid, in [`PathId::ALL`] order.
pub fn all_paths(grid: GridShape) -> [PathOrder; 4] {
    PathId::ALL.map(|p| generate_path(grid, p))
}

/// Inverse permutation: `inverse[order[j]] == j`.
pub fn invert_path(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (j, &o) in order.iter().enumerate() {
        inv[o] = j;
    }
    inv
}

fn check_grid(op: &'static str, shape: &[usize], path: &PathOrder) -> Result<[usize; 4]> {
    let [b, d, h, w] = dims::<4>(op, shape)?;
    if (h, w) != (path.grid.height, path.grid.width) {
        return Err(Error::shape(op, shape, &[path.grid.height, path.grid.width]));
    }
    Ok([b, d, h, w])
}

/// Flattens `[B, D, H, W]` into the sequence `[B, D, H*W]` visited by `path`.
pub fn gather<T: Scalar>(features: &Tensor<T>, path: &PathOrder) -> Result<Tensor<T>> {
    let [b, d, h, w] = check_grid("gather", features.shape(), path)?;
    let flat = features.clone().reshape(&[b, d, h * w])?;
    permute_last(&flat, &path.order, false)
}

/// Inverse of [`gather`]: writes a `[B, D, L]` sequence back onto the grid.
pub fn scatter<T: Scalar>(seq: &Tensor<T>, path: &PathOrder) -> Result<Tensor<T>> {
    let [b, d, l] = dims::<3>("scatter", seq.shape())?;
    if l != path.len() {
        return Err(Error::shape("scatter", seq.shape(), &[path.len()]));
    }
    permute_last(seq, &path.order, true)?.reshape(&[b, d, path.grid.height, path.grid.width])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize) -> GridShape {
        GridShape::new(h, w).unwrap()
    }

    #[test]
    fn single_row_is_raster() {
        let p = generate_path(grid(1, 4), PathId::RowSnakeTL);
        assert_eq!(&*p.order, &[0, 1, 2, 3]);
    }

    #[test]
    fn two_by_two_row_snake() {
        use DirectionId::*;
        let p = generate_path(grid(2, 2), PathId::RowSnakeTL);
        assert_eq!(&*p.order, &[0, 1, 3, 2]);
        assert_eq!(&*p.dirs, &[Begin, Right, Down, Left]);
    }

    #[test]
    fn three_by_three_col_snake() {
        let p = generate_path(grid(3, 3), PathId::ColSnakeTL);
        assert_eq!(&*p.order, &[0, 3, 6, 7, 4, 1, 2, 5, 8]);
    }

    #[test]
    fn br_variants_reverse_tl() {
        let g = grid(3, 5);
        let tl = generate_path(g, PathId::RowSnakeTL);
        let br = generate_path(g, PathId::RowSnakeBR);
        let rev: Vec<usize> = tl.order.iter().rev().copied().collect();
        assert_eq!(&*br.order, rev.as_slice());
        assert_eq!(br.dirs[0], DirectionId::Begin);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(invert_path(&[0, 1, 2]), vec![0, 1, 2]);
        assert_eq!(invert_path(&[0, 1, 3, 2]), vec![0, 1, 3, 2]);
        assert_eq!(invert_path(&[2, 0, 1]), vec![1, 2, 0]);
    }

    #[test]
    fn gather_follows_order() {
        let x = Tensor::<f32>::from_f64(&[1, 1, 2, 2], &[10.0, 11.0, 12.0, 13.0]).unwrap();
        let p = generate_path(grid(2, 2), PathId::RowSnakeTL);
        let s = gather(&x, &p).unwrap();
        // TL, TR, BR, BL
        assert_eq!(s.data(), &[10.0, 11.0, 13.0, 12.0]);
        assert_eq!(scatter(&s, &p).unwrap(), x);
    }

    #[test]
    fn one_cell_gather_is_reshape() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 1, 1], |i| i as f32);
        let p = generate_path(grid(1, 1), PathId::ColSnakeBR);
        assert_eq!(gather(&x, &p).unwrap(), x.clone().reshape(&[2, 3, 1]).unwrap());
    }

    #[test]
    fn grid_mismatch_is_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 3]);
        let p = generate_path(grid(3, 2), PathId::RowSnakeTL);
        assert!(gather(&x, &p).is_err());
    }

    #[test]
    fn path_names_roundtrip() {
        for p in PathId::ALL {
            assert_eq!(p.as_str().parse::<PathId>().unwrap(), p);
        }
        assert_eq!("ColSnakeBR".parse::<PathId>().unwrap(), PathId::ColSnakeBR);
        assert!("zigzag".parse::<PathId>().is_err());
    }
}
