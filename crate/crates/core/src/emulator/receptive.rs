use serde::{Deserialize, Serialize};

use super::arch::{ArchConfig, AxisOp};
use crate::error::{CoreError, Result};
use crate::ops::nearest_source;

/// Inclusive input-cell bounding box `[row0, row1] × [col0, col1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfBox {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl RfBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..=self.row1).contains(&row) && (self.col0..=self.col1).contains(&col)
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0 + 1
    }
}

fn back_through(ops: &[AxisOp], mut lo: usize, mut hi: usize) -> (usize, usize) {
    for op in ops.iter().rev() {
        match *op {
            AxisOp::Conv {
                kernel,
                stride,
                padding,
                in_len,
            } => {
                let a = (lo * stride) as isize - padding as isize;
                let b = (hi * stride + kernel - 1) as isize - padding as isize;
                lo = a.max(0) as usize;
                hi = (b.max(0) as usize).min(in_len - 1);
            }
            AxisOp::Resize { in_len, out_len } => {
                lo = nearest_source(lo, in_len, out_len);
                hi = nearest_source(hi, in_len, out_len);
            }
        }
    }
    (lo, hi)
}

/// Per-row and per-column input intervals for every output pixel.
///
/// Rows and columns are independent, so the box for pixel `(r, c)` is
/// `rows[r] × cols[c]`. The same box applies to every input month, which
/// enters only as a channel.
#[derive(Clone, Debug)]
pub struct ReceptiveFieldMap {
    pub rows: Vec<(usize, usize)>,
    pub cols: Vec<(usize, usize)>,
}

impl ReceptiveFieldMap {
    pub fn new(config: &ArchConfig) -> Result<Self> {
        let plan = config.plan()?;
        let (h, w) = config.grid;
        Ok(ReceptiveFieldMap {
            rows: (0..h)
                .map(|r| back_through(&plan.axis_rows, r, r))
                .collect(),
            cols: (0..w)
                .map(|c| back_through(&plan.axis_cols, c, c))
                .collect(),
        })
    }

    pub fn at(&self, row: usize, col: usize) -> Result<RfBox> {
        match (self.rows.get(row), self.cols.get(col)) {
            (Some(&(row0, row1)), Some(&(col0, col1))) => Ok(RfBox {
                row0,
                row1,
                col0,
                col1,
            }),
            _ => Err(CoreError::invalid(format!(
                "pixel ({row}, {col}) outside {}×{} grid",
                self.rows.len(),
                self.cols.len()
            ))),
        }
    }

    /// Whether output pixel `(row, col)` can see any cell of the half-open
    /// rectangle `[r0, r1) × [c0, c1)`.
    pub fn sees_rect(&self, row: usize, col: usize, rect: (usize, usize, usize, usize)) -> bool {
        let (r0, c0, r1, c1) = rect;
        let (a, b) = self.rows[row];
        let (c, d) = self.cols[col];
        a < r1 && b >= r0 && c < c1 && d >= c0
    }
}

/// Maximal input box that can influence output pixel `out_pixel`.
pub fn receptive_field(config: &ArchConfig, out_pixel: (usize, usize)) -> Result<RfBox> {
    ReceptiveFieldMap::new(config)?.at(out_pixel.0, out_pixel.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv3(len: usize) -> AxisOp {
        AxisOp::Conv {
            kernel: 3,
            stride: 1,
            padding: 1,
            in_len: len,
        }
    }

    #[test]
    fn single_conv_gives_three_by_three() {
        assert_eq!(back_through(&[conv3(10)], 5, 5), (4, 6));
        assert_eq!(back_through(&[conv3(10)], 0, 0), (0, 1));
        assert_eq!(back_through(&[conv3(10)], 9, 9), (8, 9));
    }

    #[test]
    fn stacked_convs_give_five_by_five() {
        assert_eq!(back_through(&[conv3(10), conv3(10)], 5, 5), (3, 7));
    }

    #[test]
    fn strided_and_resized_axes() {
        let stem = AxisOp::Conv {
            kernel: 5,
            stride: 2,
            padding: 2,
            in_len: 70,
        };
        assert_eq!(back_through(&[stem], 10, 10), (18, 22));
        let up = AxisOp::Resize {
            in_len: 36,
            out_len: 70,
        };
        assert_eq!(back_through(&[up], 69, 69), (35, 35));
    }

    #[test]
    fn canonical_box_is_smaller_than_grid_in_width() {
        let b = receptive_field(&ArchConfig::canonical(), (35, 62)).unwrap();
        assert!(b.contains(35, 62));
        assert!(b.width() < 125);
        assert!(receptive_field(&ArchConfig::canonical(), (70, 0)).is_err());
    }
}
