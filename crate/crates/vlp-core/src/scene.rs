//! Synthetic shape scenes and their deterministic renderer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

pub const COLORS: [Color; 6] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Purple,
    Color::Orange,
];

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    /// Fixed palette; scenes render as a pure function of their description.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.15],
            Color::Blue => [0.15, 0.2, 0.9],
            Color::Yellow => [0.9, 0.85, 0.1],
            Color::Purple => [0.6, 0.15, 0.75],
            Color::Orange => [0.95, 0.55, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlacedShape {
    pub shape: ShapeKind,
    pub color: Color,
    /// Grid cell coordinates.
    pub row: usize,
    pub col: usize,
}

/// A grid of colored shapes on a fixed canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub img_h: usize,
    pub img_w: usize,
    /// Side of one grid cell in pixels.
    pub cell: usize,
    pub shapes: Vec<PlacedShape>,
}

const BACKGROUND: f32 = 0.5;

impl SyntheticScene {
    pub fn new(img_h: usize, img_w: usize, cell: usize) -> Self {
        SyntheticScene {
            img_h,
            img_w,
            cell,
            shapes: Vec::new(),
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.img_h / self.cell
    }

    pub fn grid_cols(&self) -> usize {
        self.img_w / self.cell
    }

    /// Render to a [C=3, H, W] tensor with channel values in [0, 1].
    /// Bitwise deterministic: same scene, same pixels.
    pub fn render(&self) -> Result<Tensor<f32>> {
        let (h, w) = (self.img_h, self.img_w);
        let mut data = vec![BACKGROUND; 3 * h * w];
        for s in &self.shapes {
            if s.row >= self.grid_rows() || s.col >= self.grid_cols() {
                return Err(CoreError::invalid(alloc::format!(
                    "shape at ({}, {}) outside {}x{} grid",
                    s.row,
                    s.col,
                    self.grid_rows(),
                    self.grid_cols()
                )));
            }
            let rgb = s.color.rgb();
            let (y0, x0) = (s.row * self.cell, s.col * self.cell);
            for dy in 0..self.cell {
                for dx in 0..self.cell {
                    if !covers(s.shape, dy, dx, self.cell) {
                        continue;
                    }
                    let (y, x) = (y0 + dy, x0 + dx);
                    for (c, &v) in rgb.iter().enumerate() {
                        data[c * h * w + y * w + x] = v;
                    }
                }
            }
        }
        Tensor::new(vec![3, h, w], data)
    }
}

/// Pixel membership inside one cell, per shape kind.
fn covers(shape: ShapeKind, dy: usize, dx: usize, cell: usize) -> bool {
    match shape {
        ShapeKind::Square => dy >= 1 && dy < cell - 1 && dx >= 1 && dx < cell - 1,
        ShapeKind::Circle => {
            let c = (cell as f32 - 1.0) / 2.0;
            let (fy, fx) = (dy as f32 - c, dx as f32 - c);
            fy * fy + fx * fx <= (cell as f32 / 2.0 - 1.0) * (cell as f32 / 2.0 - 1.0)
        }
        ShapeKind::Triangle => dy >= 1 && dy < cell - 1 && dx >= 1 && dx + 1 < dy + 2 && dx < cell - 1,
    }
}
