//! Correspondence maps and the Neural Reprojection Error.
//!
//! A map holds one probability per cell of the (possibly padded) target
//! grid. The probability of cell `(r, c)` lives at map coordinate
//! `(c + 0.5, r + 0.5)`. The NRE interpolates the *log* probabilities
//! bilinearly between cell centers; queries between the outermost centers
//! and the map border clamp to the hull edge, and queries outside the map
//! cost [`cost_out`].

use crate::error::{Error, Result};
use crate::geometry::MapFrame;
use crate::gridio::{self, Grid};
use crate::scalar::Real;
use nalgebra::Vector2;
use std::io::{Read, Write};

/// Probabilities below this floor are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Cost of a query outside the map extent, `-ln PROB_FLOOR`.
pub fn cost_out<T: Real>() -> T {
    -T::lit(PROB_FLOOR).ln()
}

/// NRE of a uniform map over `frame`: `ln(map_w * map_h)`.
pub fn uniform_nre<T: Real>(frame: &MapFrame) -> T {
    T::from_usize_lossy(frame.cells()).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap<T> {
    frame: MapFrame,
    values: Vec<T>,
    log_values: Vec<T>,
}

impl<T: Real> CorrespondenceMap<T> {
    /// Joint 2D softmax over all cells of `logits` (row-major, `map_h x map_w`).
    pub fn normalize(logits: &[T], frame: MapFrame) -> Result<Self> {
        if logits.len() != frame.cells() {
            return Err(Error::shape(
                "normalize",
                format!("{} logits for {} cells", logits.len(), frame.cells()),
            ));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("correspondence logits".into()));
        }
        let max = logits.iter().copied().fold(logits[0], |a, b| a.max(b));
        let sum = logits.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        let log_z = max + sum.ln();
        let floor = T::lit(PROB_FLOOR).ln();
        let log_values: Vec<T> = logits.iter().map(|&v| (v - log_z).max(floor)).collect();
        let values = logits.iter().map(|&v| (v - log_z).exp()).collect();
        Ok(Self {
            frame,
            values,
            log_values,
        })
    }

    /// Wraps already-normalized probabilities; renormalizes away rounding
    /// (tolerance 1e-4 on the total mass, for maps stored in `f32`).
    pub fn from_probabilities(values: Vec<T>, frame: MapFrame) -> Result<Self> {
        if values.len() != frame.cells() {
            return Err(Error::shape(
                "from_probabilities",
                format!("{} values for {} cells", values.len(), frame.cells()),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::NonFiniteInput(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let sum = values.iter().fold(T::zero(), |a, &b| a + b);
        if (sum - T::one()).abs() > T::lit(1e-4) {
            return Err(Error::NonFiniteInput(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        let values: Vec<T> = values.into_iter().map(|v| v / sum).collect();
        let floor = T::lit(PROB_FLOOR);
        let log_values = values.iter().map(|&v| v.max(floor).ln()).collect();
        Ok(Self {
            frame,
            values,
            log_values,
        })
    }

    pub fn uniform(frame: MapFrame) -> Self {
        Self::normalize(&vec![T::zero(); frame.cells()], frame).expect("finite zeros")
    }

    /// All mass on cell `(row, col)`.
    pub fn delta(frame: MapFrame, row: usize, col: usize) -> Self {
        let mut v = vec![T::zero(); frame.cells()];
        v[row * frame.map_w + col] = T::one();
        Self::from_probabilities(v, frame).expect("valid delta")
    }

    /// Discretized isotropic Gaussian around map coordinate `center` with
    /// standard deviation `sigma` cells. Unlike [`Self::delta`] it keeps the
    /// sub-cell position of `center` in the relative cell masses.
    pub fn gaussian(frame: MapFrame, center: &Vector2<T>, sigma: T) -> Result<Self> {
        if !(sigma > T::zero()) || !center.x.is_finite() || !center.y.is_finite() {
            return Err(Error::NonFiniteInput("gaussian map needs a finite center and sigma > 0".into()));
        }
        let inv = T::one() / (T::lit(2.0) * sigma * sigma);
        let mut logits = Vec::with_capacity(frame.cells());
        for r in 0..frame.map_h {
            for c in 0..frame.map_w {
                let dx = T::from_usize_lossy(c) + T::lit(0.5) - center.x;
                let dy = T::from_usize_lossy(r) + T::lit(0.5) - center.y;
                logits.push(-(dx * dx + dy * dy) * inv);
            }
        }
        Self::normalize(&logits, frame)
    }

    pub fn frame(&self) -> &MapFrame {
        &self.frame
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn value(&self, row: usize, col: usize) -> T {
        self.values[row * self.frame.map_w + col]
    }

    /// Clamped log probability of a cell.
    pub fn log_value(&self, row: usize, col: usize) -> T {
        self.log_values[row * self.frame.map_w + col]
    }

    /// NRE at map coordinate `x` (nats). See the module docs for the
    /// interpolation and boundary conventions.
    pub fn nre_at(&self, x: &Vector2<T>) -> T {
        self.nre_and_grad(x).0
    }

    /// NRE and its gradient with respect to the query coordinate. Outside
    /// the map and along clamped axes the gradient component is zero.
    pub fn nre_and_grad(&self, x: &Vector2<T>) -> (T, Vector2<T>) {
        if !self.frame.contains(x) {
            return (cost_out(), Vector2::zeros());
        }
        let (w, h) = (self.frame.map_w, self.frame.map_h);
        let (c0, c1, fu, du) = axis(x.x - T::lit(0.5), w);
        let (r0, r1, fv, dv) = axis(x.y - T::lit(0.5), h);
        let l = |r: usize, c: usize| self.log_values[r * w + c];
        let (l00, l01, l10, l11) = (l(r0, c0), l(r0, c1), l(r1, c0), l(r1, c1));
        // lerp form keeps constant maps and cell centers exact
        let top = l00 + fu * (l01 - l00);
        let bottom = l10 + fu * (l11 - l10);
        let val = top + fv * (bottom - top);
        let dtop = l01 - l00;
        let dbottom = l11 - l10;
        let gx = if du { dtop + fv * (dbottom - dtop) } else { T::zero() };
        let gy = if dv { bottom - top } else { T::zero() };
        (-val, Vector2::new(-gx, -gy))
    }

    /// `(row, col)` of the most probable cell; ties resolve to the smallest
    /// row-major index.
    pub fn argmax_cell(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.frame.map_w, best % self.frame.map_w)
    }

    /// Target-image pixel of the most probable cell's center, and its probability.
    pub fn argmax_to_image(&self) -> (Vector2<T>, T) {
        let (r, c) = self.argmax_cell();
        let center = Vector2::new(
            T::from_usize_lossy(c) + T::lit(0.5),
            T::from_usize_lossy(r) + T::lit(0.5),
        );
        (self.frame.map_to_image(&center), self.value(r, c))
    }

    pub fn peak_probability(&self) -> T {
        let (r, c) = self.argmax_cell();
        self.value(r, c)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> T {
        self.values
            .iter()
            .zip(&self.log_values)
            .filter(|(p, _)| **p > T::zero())
            .fold(T::zero(), |acc, (&p, &l)| acc - p * l)
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            height: self.frame.map_h,
            width: self.frame.map_w,
            data: self.values.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> CorrespondenceMap<U> {
        CorrespondenceMap {
            frame: self.frame,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            log_values: self.log_values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Splits a continuous index into neighbouring cells and a fraction; the
/// flag is false when the coordinate was clamped to the hull.
fn axis<T: Real>(u: T, n: usize) -> (usize, usize, T, bool) {
    if n == 1 {
        return (0, 0, T::zero(), false);
    }
    let last = T::from_usize_lossy(n - 1);
    if u <= T::zero() {
        // left edge: derivative from the right only when exactly on the center
        return (0, 1, T::zero(), u == T::zero());
    }
    if u >= last {
        return (n - 1, n - 1, T::zero(), false);
    }
    let f = u.floor();
    let i = f.to_usize().expect("in range");
    (i, i + 1, u - f, true)
}

/// Writes maps sharing one frame in the `CHCM` container.
pub fn write_maps<W: Write, T: Real>(w: &mut W, maps: &[CorrespondenceMap<T>]) -> Result<()> {
    let frame = maps.first().map(|m| *m.frame()).unwrap_or(MapFrame {
        stride: 1,
        pad_x: 0,
        pad_y: 0,
        map_w: 0,
        map_h: 0,
    });
    if maps.iter().any(|m| *m.frame() != frame) {
        return Err(Error::shape("write_maps", "maps must share one frame"));
    }
    let u = |v: usize| u32::try_from(v).map_err(|_| Error::Format("dimension exceeds u32".into()));
    w.write_all(&gridio::MAP_MAGIC)?;
    gridio::write_u32(w, gridio::MAP_VERSION)?;
    gridio::write_u32(w, u(maps.len())?)?;
    gridio::write_u32(w, u(frame.map_h)?)?;
    gridio::write_u32(w, u(frame.map_w)?)?;
    gridio::write_u32(w, u(frame.stride)?)?;
    gridio::write_u32(w, u(frame.pad_x)?)?;
    gridio::write_u32(w, u(frame.pad_y)?)?;
    for m in maps {
        gridio::write_f32s(w, &m.to_grid().data)?;
    }
    Ok(())
}

pub fn read_maps<R: Read, T: Real>(r: &mut R) -> Result<Vec<CorrespondenceMap<T>>> {
    gridio::expect_magic(r, &gridio::MAP_MAGIC)?;
    let version = gridio::read_u32(r)?;
    if version != gridio::MAP_VERSION {
        return Err(Error::Format(format!("unsupported map version {version}")));
    }
    let count = gridio::read_u32(r)? as usize;
    let map_h = gridio::read_u32(r)? as usize;
    let map_w = gridio::read_u32(r)? as usize;
    let stride = gridio::read_u32(r)? as usize;
    let pad_x = gridio::read_u32(r)? as usize;
    let pad_y = gridio::read_u32(r)? as usize;
    if stride == 0 || 2 * pad_x > map_w || 2 * pad_y > map_h {
        return Err(Error::Format("inconsistent map frame".into()));
    }
    let frame = MapFrame {
        stride,
        pad_x,
        pad_y,
        map_w,
        map_h,
    };
    (0..count)
        .map(|_| {
            let data = gridio::read_f32s(r, frame.cells())?;
            CorrespondenceMap::from_probabilities(
                data.into_iter().map(|v| T::lit(v as f64)).collect(),
                frame,
            )
        })
        .collect()
}

/// PGM preview of one map, scaled to its own peak.
pub fn write_map_pgm<W: Write, T: Real>(w: &mut W, map: &CorrespondenceMap<T>) -> Result<()> {
    let grid = map.to_grid();
    let hi = grid.data.iter().copied().fold(0.0f32, f32::max);
    gridio::write_pgm(w, &grid, 0.0, hi)
}
