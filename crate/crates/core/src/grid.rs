//! Periodic uniform staggered grid.
//!
//! Cell-centred quantities (concentrations, potential, fixed charge) live at
//! nodes `(x_i, y_j)`. The two displacement components live at half nodes:
//! `x`-components at `(i+1/2, j)` and `y`-components at `(i, j+1/2)`. Both
//! component arrays use the same `(i, j)` storage index as the cell they lie
//! to the right of / above, and the wrap face `nx-1/2` shares its slot with
//! `-1/2`. No ghost layers are stored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub lx: f64,
    pub ly: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, x0: f64, y0: f64, lx: f64, ly: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 cells per direction, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0) || !x0.is_finite() || !y0.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "domain extents must be positive and finite, got lx={lx}, ly={ly}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            x0,
            y0,
            lx,
            ly,
        })
    }

    /// `n x n` cells on the square `[origin, origin + length]^2`.
    pub fn square(n: usize, origin: f64, length: f64) -> Result<Self> {
        Self::new(n, n, origin, origin, length, length)
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    #[inline]
    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    /// Flat index with periodic wraparound for arbitrary signed indices.
    #[inline]
    pub fn wrap_idx(&self, i: isize, j: isize) -> usize {
        let i = i.rem_euclid(self.nx as isize) as usize;
        let j = j.rem_euclid(self.ny as isize) as usize;
        self.idx(i, j)
    }

    #[inline]
    pub fn ip(&self, i: usize) -> usize {
        if i + 1 == self.nx {
            0
        } else {
            i + 1
        }
    }

    #[inline]
    pub fn im(&self, i: usize) -> usize {
        if i == 0 {
            self.nx - 1
        } else {
            i - 1
        }
    }

    #[inline]
    pub fn jp(&self, j: usize) -> usize {
        if j + 1 == self.ny {
            0
        } else {
            j + 1
        }
    }

    #[inline]
    pub fn jm(&self, j: usize) -> usize {
        if j == 0 {
            self.ny - 1
        } else {
            j - 1
        }
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx()
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        self.y0 + j as f64 * self.dy()
    }

    /// x-coordinate of the face `i + 1/2`.
    #[inline]
    pub fn x_half(&self, i: usize) -> f64 {
        self.x0 + (i as f64 + 0.5) * self.dx()
    }

    /// y-coordinate of the face `j + 1/2`.
    #[inline]
    pub fn y_half(&self, j: usize) -> f64 {
        self.y0 + (j as f64 + 0.5) * self.dy()
    }

    fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::ShapeMismatch(format!(
                "grids differ: {}x{} vs {}x{}",
                self.nx, self.ny, other.nx, other.ny
            )));
        }
        Ok(())
    }
}

/// Scalar grid function at cell nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl CellField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.n_cells()],
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_cells(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    /// Samples `f(x, y)` at every node.
    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.n_cells());
        for j in 0..grid.ny {
            let y = grid.y(j);
            for i in 0..grid.nx {
                values.push(f(grid.x(i), y));
            }
        }
        Self { grid, values }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.grid.idx(i, j);
        self.values[k] = v;
    }

    /// Periodic access with signed indices.
    #[inline]
    pub fn at(&self, i: isize, j: isize) -> f64 {
        self.values[self.grid.wrap_idx(i, j)]
    }

    pub fn sum(&self) -> f64 {
        neumaier_sum(self.values.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    /// Discrete integral `dx dy * sum`.
    pub fn integral(&self) -> f64 {
        self.grid.cell_area() * self.sum()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &CellField) {
        debug_assert_eq!(self.grid, other.grid);
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// First cell (row-major, `j` outer) where `pred` holds.
    pub fn find(&self, pred: impl Fn(f64) -> bool) -> Option<(usize, usize, f64)> {
        self.values.iter().position(|&v| pred(v)).map(|k| {
            let (i, j) = (k % self.grid.nx, k / self.grid.nx);
            (i, j, self.values[k])
        })
    }
}

/// Vector grid function with components on the staggered faces.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    pub grid: GridSpec,
    /// Values at `(i+1/2, j)`.
    pub x: Vec<f64>,
    /// Values at `(i, j+1/2)`.
    pub y: Vec<f64>,
}

impl FaceField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0, 0.0)
    }

    pub fn constant(grid: GridSpec, vx: f64, vy: f64) -> Self {
        Self {
            grid,
            x: vec![vx; grid.n_cells()],
            y: vec![vy; grid.n_cells()],
        }
    }

    /// Samples `fx` at x-faces and `fy` at y-faces.
    pub fn from_fns(
        grid: GridSpec,
        fx: impl Fn(f64, f64) -> f64,
        fy: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let n = grid.n_cells();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                x.push(fx(grid.x_half(i), grid.y(j)));
                y.push(fy(grid.x(i), grid.y_half(j)));
            }
        }
        Self { grid, x, y }
    }

    #[inline]
    pub fn xc(&self, i: usize, j: usize) -> f64 {
        self.x[self.grid.idx(i, j)]
    }

    #[inline]
    pub fn yc(&self, i: usize, j: usize) -> f64 {
        self.y[self.grid.idx(i, j)]
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            grid: self.grid,
            x: self.x.iter().map(|v| a * v).collect(),
            y: self.y.iter().map(|v| a * v).collect(),
        }
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &FaceField) {
        debug_assert_eq!(self.grid, other.grid);
        for (s, o) in self.x.iter_mut().zip(&other.x) {
            *s += a * o;
        }
        for (s, o) in self.y.iter_mut().zip(&other.y) {
            *s += a * o;
        }
    }

    /// Componentwise product.
    pub fn mul(&self, other: &FaceField) -> FaceField {
        FaceField {
            grid: self.grid,
            x: self.x.iter().zip(&other.x).map(|(a, b)| a * b).collect(),
            y: self.y.iter().zip(&other.y).map(|(a, b)| a * b).collect(),
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.x
            .iter()
            .chain(&self.y)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.x
            .iter()
            .chain(&self.y)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.x
            .iter()
            .chain(&self.y)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }

    /// Cell-centred `|D|` from the average of the two adjacent faces per direction.
    pub fn magnitude_at_cells(&self) -> CellField {
        let g = self.grid;
        let mut out = CellField::zeros(g);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let ax = 0.5 * (self.xc(i, j) + self.xc(g.im(i), j));
                let ay = 0.5 * (self.yc(i, j) + self.yc(i, g.jm(j)));
                out.set(i, j, ax.hypot(ay));
            }
        }
        out
    }
}

/// Scalar grid function at cell corners `(i+1/2, j+1/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl CornerField {
    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Discrete divergence of a face field, evaluated at cells.
pub fn divergence(f: &FaceField) -> CellField {
    let g = f.grid;
    let (dx, dy) = (g.dx(), g.dy());
    let mut out = CellField::zeros(g);
    for j in 0..g.ny {
        let jm = g.jm(j);
        for i in 0..g.nx {
            let im = g.im(i);
            let v = (f.xc(i, j) - f.xc(im, j)) / dx + (f.yc(i, j) - f.yc(i, jm)) / dy;
            out.set(i, j, v);
        }
    }
    out
}

/// Discrete gradient of a cell field, evaluated at faces.
pub fn gradient(c: &CellField) -> FaceField {
    let g = c.grid;
    let (dx, dy) = (g.dx(), g.dy());
    let mut out = FaceField::zeros(g);
    for j in 0..g.ny {
        let jp = g.jp(j);
        for i in 0..g.nx {
            let k = g.idx(i, j);
            out.x[k] = (c.get(g.ip(i), j) - c.get(i, j)) / dx;
            out.y[k] = (c.get(i, jp) - c.get(i, j)) / dy;
        }
    }
    out
}

/// Discrete curl of `d / eps` at cell corners.
pub fn curl_scaled(d: &FaceField, eps_face: &FaceField) -> Result<CornerField> {
    d.grid.check_same(&eps_face.grid)?;
    check_positive_faces(eps_face)?;
    let g = d.grid;
    let (dx, dy) = (g.dx(), g.dy());
    let mut values = vec![0.0; g.n_cells()];
    for j in 0..g.ny {
        let jp = g.jp(j);
        for i in 0..g.nx {
            let ip = g.ip(i);
            let ey = d.yc(ip, j) / eps_face.yc(ip, j) - d.yc(i, j) / eps_face.yc(i, j);
            let ex = d.xc(i, jp) / eps_face.xc(i, jp) - d.xc(i, j) / eps_face.xc(i, j);
            values[g.idx(i, j)] = ey / dx - ex / dy;
        }
    }
    Ok(CornerField { grid: g, values })
}

pub(crate) fn check_positive_faces(eps_face: &FaceField) -> Result<()> {
    let g = eps_face.grid;
    for (name, comp, is_x) in [("x", &eps_face.x, true), ("y", &eps_face.y, false)] {
        if let Some(k) = comp.iter().position(|&e| !(e > 0.0)) {
            let (i, j) = (k % g.nx, k / g.nx);
            let location = if is_x {
                format!("{name}-face ({}+1/2, {j})", i)
            } else {
                format!("{name}-face ({i}, {}+1/2)", j)
            };
            return Err(Error::NonPositivePermittivity {
                location,
                value: comp[k],
            });
        }
    }
    Ok(())
}

/// `sqrt(dx dy * sum c^2)`.
pub fn norm_l2(c: &CellField) -> f64 {
    (c.grid.cell_area() * neumaier_sum(c.values.iter().map(|v| v * v))).sqrt()
}

pub fn norm_inf(c: &CellField) -> f64 {
    c.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// L2 norm of a face field, each component summed over its full periodic face set.
pub fn face_norm_l2(f: &FaceField) -> (f64, f64) {
    let w = f.grid.cell_area();
    let nx = (w * neumaier_sum(f.x.iter().map(|v| v * v))).sqrt();
    let ny = (w * neumaier_sum(f.y.iter().map(|v| v * v))).sqrt();
    (nx, ny)
}

/// Compensated summation; keeps mass bookkeeping at round-off level on large grids.
pub fn neumaier_sum(it: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in it {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

// ---------------------------------------------------------------------------
// CSV serialization

pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn cell_field_csv(c: &CellField) -> String {
    let g = c.grid;
    let mut s = String::with_capacity(64 * g.n_cells());
    s.push_str("x,y,value\n");
    for j in 0..g.ny {
        for i in 0..g.nx {
            let _ = writeln!(
                s,
                "{},{},{}",
                fmt_f(g.x(i)),
                fmt_f(g.y(j)),
                fmt_f(c.get(i, j))
            );
        }
    }
    s
}

pub fn face_field_csv(f: &FaceField) -> String {
    let g = f.grid;
    let mut s = String::with_capacity(128 * g.n_cells());
    s.push_str("x,y,component,value\n");
    for j in 0..g.ny {
        for i in 0..g.nx {
            let _ = writeln!(
                s,
                "{},{},x,{}",
                fmt_f(g.x_half(i)),
                fmt_f(g.y(j)),
                fmt_f(f.xc(i, j))
            );
        }
    }
    for j in 0..g.ny {
        for i in 0..g.nx {
            let _ = writeln!(
                s,
                "{},{},y,{}",
                fmt_f(g.x(i)),
                fmt_f(g.y_half(j)),
                fmt_f(f.yc(i, j))
            );
        }
    }
    s
}

pub fn write_cell_csv(path: &Path, c: &CellField) -> Result<()> {
    fs::write(path, cell_field_csv(c)).map_err(|e| Error::io(path, e))
}

pub fn write_face_csv(path: &Path, f: &FaceField) -> Result<()> {
    fs::write(path, face_field_csv(f)).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_num(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| csv_err(path, format!("line {line}: bad number `{s}`")))
}

/// Reads a cell field written by [`write_cell_csv`] onto `grid`.
pub fn read_cell_csv(path: &Path, grid: GridSpec) -> Result<CellField> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x,y,value") {
        return Err(csv_err(path, "expected header `x,y,value`"));
    }
    let mut values = Vec::with_capacity(grid.n_cells());
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(csv_err(path, format!("line {}: expected 3 columns", n + 2)));
        }
        values.push(parse_num(path, n + 2, cols[2])?);
    }
    if values.len() != grid.n_cells() {
        return Err(csv_err(
            path,
            format!("expected {} rows, found {}", grid.n_cells(), values.len()),
        ));
    }
    Ok(CellField { grid, values })
}

/// Reads a face field written by [`write_face_csv`] onto `grid`.
pub fn read_face_csv(path: &Path, grid: GridSpec) -> Result<FaceField> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x,y,component,value") {
        return Err(csv_err(path, "expected header `x,y,component,value`"));
    }
    let n = grid.n_cells();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(csv_err(path, format!("line {}: expected 4 columns", k + 2)));
        }
        let v = parse_num(path, k + 2, cols[3])?;
        match cols[2].trim() {
            "x" => x.push(v),
            "y" => y.push(v),
            other => {
                return Err(csv_err(
                    path,
                    format!("line {}: unknown component `{other}`", k + 2),
                ))
            }
        }
    }
    if x.len() != n || y.len() != n {
        return Err(csv_err(
            path,
            format!(
                "expected {n} rows per component, found {}/{}",
                x.len(),
                y.len()
            ),
        ));
    }
    Ok(FaceField { grid, x, y })
}
