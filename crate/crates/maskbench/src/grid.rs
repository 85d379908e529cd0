//! Dense 2-D storage shared by spectrograms and masks.

/// Row-major `rows x cols` grid. Rows index frequency bins, columns index
/// time frames throughout the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<E> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

impl<E: Copy> Grid<E> {
    pub fn filled(rows: usize, cols: usize, value: E) -> Self {
        Grid {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Wraps an existing row-major buffer. Panics if the length is wrong;
    /// callers construct the buffer themselves and control the length.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Self {
        assert_eq!(data.len(), rows * cols, "grid buffer length");
        Grid { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> E {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut E {
        debug_assert!(row < self.rows && col < self.cols);
        &mut self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[E] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Grid<E>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn map<F, U: Copy>(&self, f: F) -> Grid<U>
    where
        F: Fn(E) -> U,
    {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&e| f(e)).collect(),
        }
    }

    /// Copy of the rectangle starting at (row0, col0).
    pub fn window(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Grid<E> {
        assert!(row0 + rows <= self.rows && col0 + cols <= self.cols);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let base = (row0 + r) * self.cols + col0;
            data.extend_from_slice(&self.data[base..base + cols]);
        }
        Grid { rows, cols, data }
    }
}
