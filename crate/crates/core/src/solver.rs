//! Finite-difference integrator for the Shkadov two-equation falling-film model.
//!
//! The state is the film height `h` and flow rate `q` on a uniform 1D grid:
//!
//! ```text
//! dh/dt = -dx(q)
//! dq/dt = -6/5 dx(q^2/h) + 1/(5 delta) (h (1 + dxxx(h)) - q/h^2) + forcing
//! ```
//!
//! Convective terms use a MUSCL reconstruction with a minmod limiter, the third
//! derivative chains a centered second difference with a forward first
//! difference, and time integration is second-order Adams-Bashforth
//! (forward Euler on the first step after a reset).

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

/// Height below which a state is treated as numerically diverged.
pub const H_MIN: f64 = 1e-6;

const SNAPSHOT_MAGIC: &str = "shkadov-state";
const SNAPSHOT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("solver diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
    #[error("snapshot {path}: {reason}")]
    Snapshot { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// Uniform 1D grid starting at x = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    n: usize,
    dx: f64,
}

impl Grid {
    pub fn new(n: usize, dx: f64) -> Result<Self> {
        if n < 8 {
            return Err(SolverError::Config(format!("grid needs at least 8 points, got {n}")));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(SolverError::Config(format!("grid step must be positive, got {dx}")));
        }
        Ok(Self { n, dx })
    }

    /// Grid covering `[0, length]` with step `dx`; the last point lies within one
    /// step of `length`.
    pub fn for_length(length: f64, dx: f64) -> Result<Self> {
        if !(length > 0.0 && dx > 0.0) {
            return Err(SolverError::Config(format!(
                "length and dx must be positive (length={length}, dx={dx})"
            )));
        }
        let n = (length / dx).round() as usize + 1;
        Self::new(n, dx)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn x_of(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }

    pub fn length(&self) -> f64 {
        (self.n - 1) as f64 * self.dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub delta: f64,
    pub dt: f64,
    pub eps: f64,
    pub grid: Grid,
}

impl SolverConfig {
    pub fn new(delta: f64, dt: f64, eps: f64, grid: Grid) -> Result<Self> {
        let cfg = Self { delta, dt, eps, grid };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(SolverError::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SolverError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(SolverError::Config(format!("eps must be non-negative, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Previous-step time derivatives kept for the Adams-Bashforth update.
#[derive(Debug, Clone, PartialEq)]
pub struct RhsHistory {
    pub dh_dt: Vec<f64>,
    pub dq_dt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilmState {
    pub h: Vec<f64>,
    pub q: Vec<f64>,
    /// `None` right after a reset; the next step then falls back to forward Euler.
    pub history: Option<RhsHistory>,
    pub t: f64,
    pub step_count: u64,
}

impl FilmState {
    /// Flat film `h = q = 1` with no stepping history.
    pub fn flat(grid: &Grid) -> Self {
        Self {
            h: vec![1.0; grid.n()],
            q: vec![1.0; grid.n()],
            history: None,
            t: 0.0,
            step_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// Drops the stepping history and rewinds the clock, keeping the fields.
    pub fn restart(&mut self) {
        self.history = None;
        self.t = 0.0;
        self.step_count = 0;
    }

    pub fn check(&self) -> Result<()> {
        if self.h.len() != self.q.len() {
            return Err(SolverError::Contract(format!(
                "h and q lengths differ ({} vs {})",
                self.h.len(),
                self.q.len()
            )));
        }
        if let Some(hist) = &self.history {
            if hist.dh_dt.len() != self.h.len() || hist.dq_dt.len() != self.h.len() {
                return Err(SolverError::Contract("rhs history length mismatch".into()));
            }
        }
        check_fields(&self.h, &self.q, self.step_count)
    }
}

fn check_fields(h: &[f64], q: &[f64], step: u64) -> Result<()> {
    for (i, (&hi, &qi)) in h.iter().zip(q).enumerate() {
        if !hi.is_finite() || !qi.is_finite() {
            return Err(SolverError::Divergence {
                step,
                reason: format!("non-finite value at node {i} (h={hi}, q={qi})"),
            });
        }
        if hi <= H_MIN {
            return Err(SolverError::Divergence {
                step,
                reason: format!("film height {hi} at node {i} below floor {H_MIN}"),
            });
        }
    }
    Ok(())
}

/// Shkadov parameter from the Reynolds and Weber numbers of the flat film.
pub fn delta_from_physics(reynolds: f64, weber: f64) -> Result<f64> {
    if !(reynolds > 0.0 && weber > 0.0) {
        return Err(SolverError::Domain(format!(
            "Reynolds and Weber numbers must be positive (Re={reynolds}, W={weber})"
        )));
    }
    Ok((3.0 * reynolds * reynolds / weber).cbrt() / 15.0)
}

pub fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else {
        a.signum() * a.abs().min(b.abs())
    }
}

/// Upwind-biased TVD approximation of `d(field)/dx`.
///
/// Interface values are reconstructed from the upwind side with minmod-limited
/// slopes (first order where the stencil leaves the grid). The boundary fluxes
/// are the boundary node values, so `sum(out) * dx == field[n-1] - field[0]`.
pub fn convective_derivative(field: &[f64], velocity: &[f64], grid: &Grid) -> Result<Vec<f64>> {
    let mut out = vec![0.0; field.len()];
    let mut faces = vec![0.0; field.len() + 1];
    convective_derivative_into(field, velocity, grid, &mut faces, &mut out)?;
    Ok(out)
}

fn convective_derivative_into(
    field: &[f64],
    velocity: &[f64],
    grid: &Grid,
    faces: &mut [f64],
    out: &mut [f64],
) -> Result<()> {
    let n = field.len();
    if n != grid.n() || velocity.len() != n || out.len() != n || faces.len() != n + 1 {
        return Err(SolverError::Contract(format!(
            "convective derivative expects {} points (field={}, velocity={})",
            grid.n(),
            n,
            velocity.len()
        )));
    }
    // faces[k] holds the flux at the interface between nodes k-1 and k.
    faces[0] = field[0];
    faces[n] = field[n - 1];
    for k in 1..n {
        let (l, r) = (k - 1, k);
        let forward = velocity[l] + velocity[r] >= 0.0;
        faces[k] = if forward {
            if l >= 1 {
                field[l] + 0.5 * minmod(field[l] - field[l - 1], field[r] - field[l])
            } else {
                field[l]
            }
        } else if r + 1 < n {
            field[r] - 0.5 * minmod(field[r] - field[l], field[r + 1] - field[r])
        } else {
            field[r]
        };
    }
    let inv_dx = 1.0 / grid.dx();
    for i in 0..n {
        out[i] = (faces[i + 1] - faces[i]) * inv_dx;
    }
    Ok(())
}

/// Finite-difference weights for the `order`-th derivative at `x0` using nodes
/// `xs` (Fornberg's recursion).
fn fornberg_weights(x0: f64, xs: &[f64], order: usize) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

/// Precomputed inlet closure for [`third_derivative`].
#[derive(Debug, Clone)]
struct ThirdDerivativeClosures {
    /// weights / dx^3 on nodes 0..5
    inlet: [f64; 5],
}

impl ThirdDerivativeClosures {
    fn new(dx: f64) -> Self {
        let xs: Vec<f64> = (0..5).map(|k| k as f64 * dx).collect();
        let w = fornberg_weights(0.0, &xs, 3);
        Self { inlet: [w[0], w[1], w[2], w[3], w[4]] }
    }
}

/// Second-order approximation of `d3h/dx3`.
///
/// Nodes `1..=n-4` chain the centered second difference with the second-order
/// forward difference. Node 0 uses a 5-point one-sided stencil. The last
/// three nodes use the same chained formula on even-reflected ghost values
/// `h[n-1+k] = h[n-1-k]`, which encodes the zero-gradient outlet. A one-sided
/// outlet stencil lets outgoing waves pile up and blow up the film.
pub fn third_derivative(h: &[f64], grid: &Grid) -> Result<Vec<f64>> {
    let n = h.len();
    if n < 5 {
        return Err(SolverError::Contract(format!(
            "third derivative needs at least 5 points, got {n}"
        )));
    }
    if n != grid.n() {
        return Err(SolverError::Contract(format!(
            "third derivative expects {} points, got {n}",
            grid.n()
        )));
    }
    let closures = ThirdDerivativeClosures::new(grid.dx());
    let mut d2 = vec![0.0; n];
    let mut out = vec![0.0; n];
    third_derivative_into(h, grid.dx(), &closures, &mut d2, &mut out);
    Ok(out)
}

fn third_derivative_into(
    h: &[f64],
    dx: f64,
    closures: &ThirdDerivativeClosures,
    d2: &mut [f64],
    out: &mut [f64],
) {
    let n = h.len();
    let inv_dx2 = 1.0 / (dx * dx);
    for i in 1..n - 1 {
        d2[i] = (h[i + 1] - 2.0 * h[i] + h[i - 1]) * inv_dx2;
    }
    let inv_2dx = 0.5 / dx;
    for i in 1..n.saturating_sub(3) {
        out[i] = (-3.0 * d2[i] + 4.0 * d2[i + 1] - d2[i + 2]) * inv_2dx;
    }
    out[0] = closures.inlet.iter().zip(&h[..5]).map(|(w, v)| w * v).sum();
    // mirrored: d2[n-1+k] = d2[n-1-k]
    d2[n - 1] = 2.0 * (h[n - 2] - h[n - 1]) * inv_dx2;
    let (a, b, c) = (d2[n - 3], d2[n - 2], d2[n - 1]);
    out[n - 3] = (-3.0 * a + 4.0 * b - c) * inv_2dx;
    out[n - 2] = (-4.0 * b + 4.0 * c) * inv_2dx;
    out[n - 1] = (-3.0 * c + 4.0 * b - a) * inv_2dx;
}

/// Reusable scratch space and precomputed stencils for stepping one solver instance.
#[derive(Debug, Clone)]
pub struct Stepper {
    config: SolverConfig,
    closures: ThirdDerivativeClosures,
    flux: Vec<f64>,
    velocity: Vec<f64>,
    faces: Vec<f64>,
    d2: Vec<f64>,
    d3: Vec<f64>,
    dflux: Vec<f64>,
    rhs_h: Vec<f64>,
    rhs_q: Vec<f64>,
    new_h: Vec<f64>,
    new_q: Vec<f64>,
}

impl Stepper {
    pub fn new(config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let n = config.grid.n();
        let closures = ThirdDerivativeClosures::new(config.grid.dx());
        Ok(Self {
            config,
            closures,
            flux: vec![0.0; n],
            velocity: vec![0.0; n],
            faces: vec![0.0; n + 1],
            d2: vec![0.0; n],
            d3: vec![0.0; n],
            dflux: vec![0.0; n],
            rhs_h: vec![0.0; n],
            rhs_q: vec![0.0; n],
            new_h: vec![0.0; n],
            new_q: vec![0.0; n],
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    fn check_shapes(&self, state: &FilmState, forcing: &[f64]) -> Result<()> {
        let n = self.config.grid.n();
        if state.h.len() != n || state.q.len() != n || forcing.len() != n {
            return Err(SolverError::Contract(format!(
                "expected {n} nodes (h={}, q={}, forcing={})",
                state.h.len(),
                state.q.len(),
                forcing.len()
            )));
        }
        Ok(())
    }

    /// Evaluates the right-hand side into the stepper's `rhs_h` / `rhs_q` buffers.
    fn eval_rhs(&mut self, state: &FilmState, forcing: &[f64]) -> Result<()> {
        self.check_shapes(state, forcing)?;
        let (h, q) = (&state.h, &state.q);
        if let Some(i) = h.iter().position(|&v| !(v > H_MIN) || !v.is_finite()) {
            return Err(SolverError::Divergence {
                step: state.step_count,
                reason: format!("film height {} at node {i} is not admissible", h[i]),
            });
        }
        let grid = self.config.grid;
        for i in 0..h.len() {
            self.velocity[i] = q[i] / h[i];
        }
        convective_derivative_into(q, &self.velocity, &grid, &mut self.faces, &mut self.dflux)?;
        for i in 0..h.len() {
            self.rhs_h[i] = -self.dflux[i];
            self.flux[i] = q[i] * q[i] / h[i];
        }
        convective_derivative_into(&self.flux, &self.velocity, &grid, &mut self.faces, &mut self.dflux)?;
        third_derivative_into(h, grid.dx(), &self.closures, &mut self.d2, &mut self.d3);
        let relax = 1.0 / (5.0 * self.config.delta);
        for i in 0..h.len() {
            let source = h[i] * (1.0 + self.d3[i]) - q[i] / (h[i] * h[i]);
            self.rhs_q[i] = -1.2 * self.dflux[i] + relax * source + forcing[i];
        }
        Ok(())
    }

    pub fn rhs(&mut self, state: &FilmState, forcing: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.eval_rhs(state, forcing)?;
        Ok((self.rhs_h.clone(), self.rhs_q.clone()))
    }

    /// Advances `state` by one time step in place.
    ///
    /// On error the state is left exactly as it was before the call.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        state: &mut FilmState,
        forcing: &[f64],
        rng: &mut R,
    ) -> Result<()> {
        self.eval_rhs(state, forcing)?;
        let dt = self.config.dt;
        match &state.history {
            Some(prev) => {
                for i in 0..state.h.len() {
                    self.new_h[i] = state.h[i] + dt * (1.5 * self.rhs_h[i] - 0.5 * prev.dh_dt[i]);
                    self.new_q[i] = state.q[i] + dt * (1.5 * self.rhs_q[i] - 0.5 * prev.dq_dt[i]);
                }
            }
            None => {
                for i in 0..state.h.len() {
                    self.new_h[i] = state.h[i] + dt * self.rhs_h[i];
                    self.new_q[i] = state.q[i] + dt * self.rhs_q[i];
                }
            }
        }
        apply_boundary_conditions_to(&mut self.new_h, &mut self.new_q, self.config.eps, rng);
        check_fields(&self.new_h, &self.new_q, state.step_count + 1)?;

        std::mem::swap(&mut state.h, &mut self.new_h);
        std::mem::swap(&mut state.q, &mut self.new_q);
        match &mut state.history {
            Some(prev) => {
                std::mem::swap(&mut prev.dh_dt, &mut self.rhs_h);
                std::mem::swap(&mut prev.dq_dt, &mut self.rhs_q);
            }
            None => {
                state.history = Some(RhsHistory {
                    dh_dt: self.rhs_h.clone(),
                    dq_dt: self.rhs_q.clone(),
                });
            }
        }
        state.step_count += 1;
        state.t = state.step_count as f64 * dt;
        Ok(())
    }
}

/// Time derivatives of `(h, q)` for the given flow-rate forcing.
pub fn rhs(state: &FilmState, forcing: &[f64], config: &SolverConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    Stepper::new(config.clone())?.rhs(state, forcing)
}

/// One Adams-Bashforth step returning the new state.
pub fn ab2_step<R: Rng + ?Sized>(
    state: &FilmState,
    forcing: &[f64],
    config: &SolverConfig,
    rng: &mut R,
) -> Result<FilmState> {
    let mut next = state.clone();
    Stepper::new(config.clone())?.step(&mut next, forcing, rng)?;
    Ok(next)
}

/// Noisy inlet (`q = 1`, `h = 1 + U(-eps, eps)`) and zero-gradient outlet.
pub fn apply_boundary_conditions<R: Rng + ?Sized>(state: &mut FilmState, config: &SolverConfig, rng: &mut R) {
    apply_boundary_conditions_to(&mut state.h, &mut state.q, config.eps, rng);
}

fn apply_boundary_conditions_to<R: Rng + ?Sized>(h: &mut [f64], q: &mut [f64], eps: f64, rng: &mut R) {
    let n = h.len();
    q[0] = 1.0;
    h[0] = if eps > 0.0 { 1.0 + rng.random_range(-eps..=eps) } else { 1.0 };
    h[n - 1] = h[n - 2];
    q[n - 1] = q[n - 2];
}

/// Header fields of a state snapshot file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotHeader {
    pub n: usize,
    pub dx: f64,
    pub delta: f64,
    pub t: f64,
}

pub fn format_snapshot(state: &FilmState, dx: f64, delta: f64) -> String {
    let mut out = String::with_capacity(state.len() * 48 + 64);
    let _ = writeln!(
        out,
        "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION} n={} dx={dx} delta={delta} t={}",
        state.len(),
        state.t
    );
    for (h, q) in state.h.iter().zip(&state.q) {
        let _ = writeln!(out, "{h:e} {q:e}");
    }
    out
}

pub fn parse_snapshot(text: &str, origin: &str) -> Result<(SnapshotHeader, FilmState)> {
    let err = |reason: String| SolverError::Snapshot { path: origin.to_string(), reason };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err("empty file".into()))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(SNAPSHOT_MAGIC) {
        return Err(err(format!("not a state snapshot: {header:?}")));
    }
    match tokens.next() {
        Some(SNAPSHOT_VERSION) => {}
        other => return Err(err(format!("unsupported snapshot version {other:?}"))),
    }
    let (mut n, mut dx, mut delta, mut t) = (None, None, None, None);
    for tok in tokens {
        let (key, value) = tok.split_once('=').ok_or_else(|| err(format!("bad header field {tok:?}")))?;
        let bad = |_| err(format!("bad value in header field {tok:?}"));
        match key {
            "n" => n = Some(value.parse::<usize>().map_err(|e| err(format!("{e}: {tok:?}")))?),
            "dx" => dx = Some(value.parse::<f64>().map_err(bad)?),
            "delta" => delta = Some(value.parse::<f64>().map_err(bad)?),
            "t" => t = Some(value.parse::<f64>().map_err(bad)?),
            _ => return Err(err(format!("unknown header field {key:?}"))),
        }
    }
    let missing = |name: &str| err(format!("header is missing {name}"));
    let header = SnapshotHeader {
        n: n.ok_or_else(|| missing("n"))?,
        dx: dx.ok_or_else(|| missing("dx"))?,
        delta: delta.ok_or_else(|| missing("delta"))?,
        t: t.ok_or_else(|| missing("t"))?,
    };
    let mut h = Vec::with_capacity(header.n);
    let mut q = Vec::with_capacity(header.n);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<f64> {
            s.ok_or_else(|| err(format!("line {}: expected two values", lineno + 2)))?
                .parse::<f64>()
                .map_err(|e| err(format!("line {}: {e}", lineno + 2)))
        };
        h.push(parse(parts.next())?);
        q.push(parse(parts.next())?);
        if parts.next().is_some() {
            return Err(err(format!("line {}: trailing data", lineno + 2)));
        }
    }
    if h.len() != header.n {
        return Err(err(format!("header declares {} nodes, found {}", header.n, h.len())));
    }
    let state = FilmState { h, q, history: None, t: header.t, step_count: 0 };
    state.check().map_err(|e| err(e.to_string()))?;
    Ok((header, state))
}

pub fn write_snapshot(path: &Path, state: &FilmState, dx: f64, delta: f64) -> Result<()> {
    fs::write(path, format_snapshot(state, dx, delta))?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(SnapshotHeader, FilmState)> {
    let text = fs::read_to_string(path)?;
    parse_snapshot(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_config(n: usize, eps: f64) -> SolverConfig {
        SolverConfig::new(0.1, 0.005, eps, Grid::new(n, 0.5).unwrap()).unwrap()
    }

    #[test]
    fn delta_examples() {
        assert!((delta_from_physics(1.0, 3.0).unwrap() - 1.0 / 15.0).abs() < 1e-15);
        assert!((delta_from_physics(1.5, 2.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(delta_from_physics(0.0, 2.0), Err(SolverError::Domain(_))));
        assert!(delta_from_physics(1.0, -1.0).is_err());
    }

    #[test]
    fn minmod_examples() {
        assert_eq!(minmod(1.0, 2.0), 1.0);
        assert_eq!(minmod(-1.0, 2.0), 0.0);
        assert_eq!(minmod(-3.0, -2.0), -2.0);
        assert_eq!(minmod(0.0, 5.0), 0.0);
    }

    #[test]
    fn grid_invariants() {
        assert!(Grid::new(7, 0.5).is_err());
        assert!(Grid::new(8, 0.0).is_err());
        let g = Grid::for_length(180.0, 0.5).unwrap();
        assert_eq!(g.n(), 361);
        assert!((g.length() - 180.0).abs() <= g.dx());
    }

    #[test]
    fn convective_derivative_of_constant_is_zero() {
        let grid = Grid::new(32, 0.5).unwrap();
        let d = convective_derivative(&[2.5; 32], &[1.0; 32], &grid).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convective_derivative_exact_on_linear_data() {
        let grid = Grid::new(40, 0.25).unwrap();
        let c = 1.7;
        let f: Vec<f64> = (0..40).map(|i| c * grid.x_of(i)).collect();
        let fwd = convective_derivative(&f, &[1.0; 40], &grid).unwrap();
        for v in &fwd[2..39] {
            assert!((v - c).abs() < 1e-12, "{v}");
        }
        let back = convective_derivative(&f, &[-1.0; 40], &grid).unwrap();
        for v in &back[1..38] {
            assert!((v - c).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn convective_derivative_of_step_telescopes() {
        let grid = Grid::new(30, 0.5).unwrap();
        let f: Vec<f64> = (0..30).map(|i| if i < 15 { 0.0 } else { 1.0 }).collect();
        let d = convective_derivative(&f, &[1.0; 30], &grid).unwrap();
        let total: f64 = d.iter().map(|v| v * grid.dx()).sum();
        assert!((total - 1.0).abs() < 1e-14);
        for (i, v) in d.iter().enumerate() {
            if !(13..=17).contains(&i) {
                assert_eq!(*v, 0.0, "node {i}");
            }
        }
        assert!(d.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn convective_derivative_length_mismatch() {
        let grid = Grid::new(10, 0.5).unwrap();
        assert!(matches!(
            convective_derivative(&[0.0; 9], &[1.0; 9], &grid),
            Err(SolverError::Contract(_))
        ));
    }

    #[test]
    fn minmod_advection_does_not_increase_total_variation() {
        // u_t + a u_x = 0 with a monotone profile, one forward-Euler step at CFL 0.4.
        let grid = Grid::new(64, 1.0).unwrap();
        let u: Vec<f64> = (0..64).map(|i| (1.0 + ((i as f64 - 32.0) / 3.0).tanh()) / 2.0).collect();
        let a = 1.0;
        let dt = 0.4;
        let flux: Vec<f64> = u.iter().map(|v| a * v).collect();
        let d = convective_derivative(&flux, &[a; 64], &grid).unwrap();
        let next: Vec<f64> = u.iter().zip(&d).map(|(v, dv)| v - dt * dv).collect();
        let tv = |f: &[f64]| f.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
        assert!(tv(&next) <= tv(&u) + 1e-14);
        let (lo, hi) = (u.iter().cloned().fold(f64::MAX, f64::min), u.iter().cloned().fold(f64::MIN, f64::max));
        assert!(next.iter().all(|&v| v >= lo - 1e-14 && v <= hi + 1e-14));
    }

    #[test]
    fn third_derivative_examples() {
        let grid = Grid::new(64, 0.1).unwrap();
        let ones = third_derivative(&[1.0; 64], &grid).unwrap();
        assert!(ones.iter().all(|v| v.abs() < 1e-9));
        let quad: Vec<f64> = (0..64).map(|i| grid.x_of(i).powi(2)).collect();
        let d = third_derivative(&quad, &grid).unwrap();
        for v in &d[1..61] {
            assert!(v.abs() < 1e-10, "{v}");
        }
        let cubic: Vec<f64> = (0..64).map(|i| grid.x_of(i).powi(3)).collect();
        let d = third_derivative(&cubic, &grid).unwrap();
        for (i, v) in d[..61].iter().enumerate() {
            assert!((v - 6.0).abs() < 1e-8, "node {i}: {v}");
        }
    }

    #[test]
    fn outlet_closure_uses_mirrored_values() {
        // a profile that is even about the outlet has zero third derivative there
        let grid = Grid::new(32, 0.25).unwrap();
        let end = grid.x_of(31);
        let h: Vec<f64> = (0..32).map(|i| 1.0 + (grid.x_of(i) - end).powi(2)).collect();
        let d = third_derivative(&h, &grid).unwrap();
        assert!(d[31].abs() < 1e-10, "{}", d[31]);
        assert!(d[28..31].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn third_derivative_is_second_order() {
        // Error on cos(x - 2), flat at the outlet, should drop by ~4 when the grid is refined by 2.
        let err = |n: usize| {
            let dx = 2.0 / (n - 1) as f64;
            let grid = Grid::new(n, dx).unwrap();
            let h: Vec<f64> = (0..n).map(|i| (grid.x_of(i) - 2.0).cos()).collect();
            let d = third_derivative(&h, &grid).unwrap();
            (0..n).map(|i| (d[i] - (grid.x_of(i) - 2.0).sin()).abs()).fold(0.0, f64::max)
        };
        let ratio = err(41) / err(81);
        assert!(ratio > 3.5 && ratio < 4.6, "ratio {ratio}");
    }

    #[test]
    fn third_derivative_rejects_short_input() {
        let grid = Grid::new(8, 0.5).unwrap();
        assert!(matches!(third_derivative(&[1.0; 4], &grid), Err(SolverError::Contract(_))));
    }

    #[test]
    fn fornberg_matches_known_weights() {
        // forward 5-point third derivative: (-5, 18, -24, 14, -3) / 2
        let w = fornberg_weights(0.0, &[0.0, 1.0, 2.0, 3.0, 4.0], 3);
        let expected = [-2.5, 9.0, -12.0, 7.0, -1.5];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rhs_vanishes_on_flat_film() {
        let cfg = default_config(40, 0.0);
        let state = FilmState::flat(&cfg.grid);
        let (dh, dq) = rhs(&state, &[0.0; 40], &cfg).unwrap();
        assert!(dh.iter().chain(&dq).all(|&v| v == 0.0));
    }

    #[test]
    fn forcing_enters_only_the_flow_rate_equation() {
        let cfg = default_config(40, 0.0);
        let state = FilmState::flat(&cfg.grid);
        let mut forcing = vec![0.0; 40];
        forcing[17] = 0.37;
        let (dh, dq) = rhs(&state, &forcing, &cfg).unwrap();
        assert!(dh.iter().all(|&v| v == 0.0));
        for (i, v) in dq.iter().enumerate() {
            assert_eq!(*v, if i == 17 { 0.37 } else { 0.0 });
        }
    }

    #[test]
    fn rhs_height_equation_matches_analytic_derivative() {
        // dh/dt = -dq/dx with q = 1 + 0.01 sin(kx); the error shrinks under refinement.
        let k = 0.5;
        let err = |dx: f64| {
            let n = (40.0 / dx) as usize + 1;
            let cfg = SolverConfig::new(0.1, 0.005, 0.0, Grid::new(n, dx).unwrap()).unwrap();
            let mut state = FilmState::flat(&cfg.grid);
            for i in 0..n {
                state.q[i] = 1.0 + 0.01 * (k * cfg.grid.x_of(i)).sin();
            }
            let (dh, _) = rhs(&state, &vec![0.0; n], &cfg).unwrap();
            (3..n - 3)
                .map(|i| (dh[i] + 0.01 * k * (k * cfg.grid.x_of(i)).cos()).abs())
                .fold(0.0, f64::max)
        };
        let coarse = err(0.1);
        let fine = err(0.025);
        // minmod clipping at the extrema limits the rate below two
        assert!(fine < 5e-5, "fine error {fine}");
        assert!(coarse / fine > 2.5, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn rhs_rejects_non_positive_height() {
        let cfg = default_config(20, 0.0);
        let mut state = FilmState::flat(&cfg.grid);
        state.h[5] = 0.0;
        assert!(matches!(rhs(&state, &[0.0; 20], &cfg), Err(SolverError::Divergence { .. })));
    }

    #[test]
    fn flat_film_is_preserved() {
        let cfg = default_config(64, 0.0);
        let mut stepper = Stepper::new(cfg.clone()).unwrap();
        let mut state = FilmState::flat(&cfg.grid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let forcing = vec![0.0; 64];
        for _ in 0..10_000 {
            stepper.step(&mut state, &forcing, &mut rng).unwrap();
        }
        let dev = state.h.iter().chain(&state.q).map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-12);
        assert_eq!(state.step_count, 10_000);
        assert!((state.t - 50.0).abs() < 1e-9);
    }

    #[test]
    fn ab2_differs_from_euler_by_history_term() {
        let cfg = default_config(48, 0.0);
        let mut state = FilmState::flat(&cfg.grid);
        for i in 0..48 {
            let x = cfg.grid.x_of(i);
            state.h[i] = 1.0 + 0.05 * (0.3 * x).sin();
            state.q[i] = 1.0 + 0.03 * (0.2 * x).cos();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let forcing = vec![0.0; 48];
        let first = ab2_step(&state, &forcing, &cfg, &mut rng).unwrap();
        let prev = first.history.clone().unwrap();
        let second = ab2_step(&first, &forcing, &cfg, &mut rng).unwrap();
        let (now_h, now_q) = rhs(&first, &forcing, &cfg).unwrap();
        for i in 1..47 {
            let euler_h = first.h[i] + cfg.dt * now_h[i];
            let euler_q = first.q[i] + cfg.dt * now_q[i];
            let diff_h = second.h[i] - euler_h;
            let diff_q = second.q[i] - euler_q;
            assert!((diff_h - cfg.dt / 2.0 * (now_h[i] - prev.dh_dt[i])).abs() < 1e-14);
            assert!((diff_q - cfg.dt / 2.0 * (now_q[i] - prev.dq_dt[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn excessive_forcing_raises_divergence() {
        let cfg = default_config(40, 0.0);
        let mut stepper = Stepper::new(cfg.clone()).unwrap();
        let mut state = FilmState::flat(&cfg.grid);
        let mut forcing = vec![0.0; 40];
        forcing[20] = -1e5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut failed = None;
        for _ in 0..1000 {
            let before = state.clone();
            match stepper.step(&mut state, &forcing, &mut rng) {
                Ok(()) => state.check().unwrap(),
                Err(e) => {
                    assert_eq!(state, before, "state must be untouched on failure");
                    failed = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(failed, Some(SolverError::Divergence { .. })));
    }

    #[test]
    fn boundary_conditions() {
        let cfg = default_config(16, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = FilmState::flat(&cfg.grid);
        state.h[0] = 3.0;
        state.q[0] = 2.0;
        state.h[14] = 1.2;
        state.q[14] = 0.9;
        apply_boundary_conditions(&mut state, &cfg, &mut rng);
        assert_eq!((state.h[0], state.q[0]), (1.0, 1.0));
        assert_eq!((state.h[15], state.q[15]), (1.2, 0.9));

        let noisy = default_config(16, 5e-4);
        for _ in 0..1000 {
            apply_boundary_conditions(&mut state, &noisy, &mut rng);
            assert!((state.h[0] - 1.0).abs() <= 5e-4);
            assert_eq!(state.q[0], 1.0);
        }
    }

    #[test]
    fn stepping_is_deterministic() {
        let cfg = default_config(120, 5e-4);
        let run = || {
            let mut stepper = Stepper::new(cfg.clone()).unwrap();
            let mut state = FilmState::flat(&cfg.grid);
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            for _ in 0..500 {
                stepper.step(&mut state, &vec![0.0; 120], &mut rng).unwrap();
            }
            state
        };
        let (a, b) = (run(), run());
        assert!(a.h.iter().zip(&b.h).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.q.iter().zip(&b.q).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn snapshot_round_trip_and_rejections() {
        let cfg = default_config(12, 0.0);
        let mut state = FilmState::flat(&cfg.grid);
        state.h[3] = 1.0 + 1.0 / 3.0;
        state.q[7] = std::f64::consts::PI;
        state.t = 201.125;
        let text = format_snapshot(&state, 0.5, 0.1);
        assert!(text.starts_with("shkadov-state v1 n=12 dx=0.5 delta=0.1 t=201.125\n"));
        let (header, back) = parse_snapshot(&text, "mem").unwrap();
        assert_eq!(header, SnapshotHeader { n: 12, dx: 0.5, delta: 0.1, t: 201.125 });
        assert_eq!(back.h, state.h);
        assert_eq!(back.q, state.q);
        assert_eq!(format_snapshot(&back, 0.5, 0.1), text);

        let v2 = text.replacen("v1", "v2", 1);
        assert!(parse_snapshot(&v2, "mem").is_err());
        let short: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(parse_snapshot(&short, "mem").is_err());
    }
}
