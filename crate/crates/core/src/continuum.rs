//! Continuum obstacle problem: the obstacle `gamma`, its least supercaloric
//! majorant on a space-time grid, the limit shape `D = {s > gamma}`, the
//! fundamental solution, heat balls and the heat-ball mean value operator.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::ModelParams;

/// Fundamental solution `(beta/(pi t))^{(d-1)/2} exp(-beta |x|^2 / t)` of
/// `a Laplacian - p d/dt`.
pub fn fundamental_solution(x: &[f64], t: f64, params: &ModelParams) -> Result<f64> {
    check_point_dim(x, params)?;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if t < 0.0 {
        return Ok(0.0);
    }
    if t == 0.0 {
        return if r2 == 0.0 { Err(Error::SingularPoint) } else { Ok(0.0) };
    }
    Ok(heat_kernel(r2, t, params.beta(), params.lateral_dims()))
}

#[inline]
fn heat_kernel(r2: f64, t: f64, beta: f64, m: usize) -> f64 {
    (beta / (PI * t)).powf(m as f64 / 2.0) * (-beta * r2 / t).exp()
}

fn check_point_dim(x: &[f64], params: &ModelParams) -> Result<()> {
    params.validate()?;
    if x.len() != params.lateral_dims() {
        return Err(Error::InvalidParams(format!(
            "expected {} lateral coordinates, got {}",
            params.lateral_dims(),
            x.len()
        )));
    }
    Ok(())
}

/// Obstacle `t - c |x|^2 - (k/p) Phi(x, t)`, `c` the variant's quadratic
/// coefficient and `k` the mass multiplier.
pub fn obstacle(x: &[f64], t: f64, params: &ModelParams) -> Result<f64> {
    check_point_dim(x, params)?;
    if !(t > 0.0) {
        return Err(Error::Domain(format!("obstacle needs t > 0, got {t}")));
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok(obstacle_r2(r2, t, params))
}

#[inline]
fn obstacle_r2(r2: f64, t: f64, params: &ModelParams) -> f64 {
    let pole = if t > 0.0 {
        params.k / params.p * heat_kernel(r2, t, params.beta(), params.lateral_dims())
    } else {
        0.0
    };
    t - params.quadratic_coefficient() * r2 - pole
}

/// Uniform grid on `[-x_extent, x_extent]^{d-1} x [0, t_max]` with
/// `dt = dx^2`. Layer 0 (`t = 0`) carries initial data; the obstacle problem
/// is solved on layers `1..=nt`, so `t_min = dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    pub d: usize,
    pub x_extent: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub dx: f64,
    pub dt: f64,
    /// Lateral nodes per axis on each side of 0.
    pub half_width: usize,
    /// Number of time steps; layers are `0..=nt`.
    pub nt: usize,
}

impl SpaceTimeGrid {
    pub fn new(d: usize, x_extent: f64, t_max: f64, dx: f64) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidParams("grid needs d >= 2".into()));
        }
        if !(dx > 0.0 && x_extent > 0.0 && t_max > 0.0) || !(dx.is_finite() && x_extent.is_finite() && t_max.is_finite()) {
            return Err(Error::InvalidParams("grid extents and spacing must be positive".into()));
        }
        let half_width = (x_extent / dx).round() as usize;
        let dt = dx * dx;
        let nt = (t_max / dt).round() as usize;
        if half_width < 2 || nt < 2 {
            return Err(Error::InvalidParams("grid has too few nodes".into()));
        }
        let nodes = (2 * half_width + 1).pow(d as u32 - 1) as f64 * (nt + 1) as f64;
        if nodes > 2e9 {
            return Err(Error::InvalidParams(format!("grid would hold {nodes:.3e} nodes")));
        }
        Ok(SpaceTimeGrid {
            d,
            x_extent: half_width as f64 * dx,
            t_min: dt,
            t_max: nt as f64 * dt,
            dx,
            dt,
            half_width,
            nt,
        })
    }

    /// A grid expected to contain the limit shape with a comfortable margin.
    /// The reference box for `d = 2, p = 0.2` is `[-3, 3] x [0, 1]`, scaled
    /// by the predicted rescaling factors for other parameters.
    pub fn default_for(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        let reference = ModelParams::monotone(params.d, 0.2)?;
        let ratio = params.beta() / reference.beta();
        let mu = ratio.powf(-1.0 / (params.d as f64 + 1.0));
        let lambda = mu * mu * ratio;
        let k_scale = params.k.powf(1.0 / (params.d as f64 + 1.0));
        let dx = if params.d == 2 { 0.01 } else { 0.05 };
        SpaceTimeGrid::new(params.d, 3.0 * mu * k_scale, (lambda * k_scale * k_scale).max(1.0), dx)
    }

    pub fn side(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn lateral_dims(&self) -> usize {
        self.d - 1
    }

    pub fn layer_len(&self) -> usize {
        self.side().pow(self.lateral_dims() as u32)
    }

    pub fn node_count(&self) -> usize {
        self.layer_len() * (self.nt + 1)
    }

    pub fn time(&self, layer: usize) -> f64 {
        layer as f64 * self.dt
    }

    pub fn coordinate(&self, grid_index: usize) -> f64 {
        (grid_index as f64 - self.half_width as f64) * self.dx
    }

    /// Lateral grid indices of node `lateral` within a layer (axis 0 fastest).
    pub fn lateral_indices(&self, mut lateral: usize) -> Vec<usize> {
        let side = self.side();
        (0..self.lateral_dims())
            .map(|_| {
                let c = lateral % side;
                lateral /= side;
                c
            })
            .collect()
    }

    pub fn lateral_coords(&self, lateral: usize) -> Vec<f64> {
        self.lateral_indices(lateral).into_iter().map(|c| self.coordinate(c)).collect()
    }

    pub fn lateral_r2(&self, lateral: usize) -> f64 {
        self.lateral_indices(lateral)
            .into_iter()
            .map(|c| {
                let x = self.coordinate(c);
                x * x
            })
            .sum()
    }

    pub fn is_lateral_boundary(&self, lateral: usize) -> bool {
        self.lateral_indices(lateral)
            .into_iter()
            .any(|c| c == 0 || c + 1 == self.side())
    }

    /// `(layer, lateral)` of a flat node index.
    pub fn split(&self, node: usize) -> (usize, usize) {
        (node / self.layer_len(), node % self.layer_len())
    }

    pub fn node(&self, layer: usize, lateral: usize) -> usize {
        layer * self.layer_len() + lateral
    }

    /// Coordinates `(x_1, ..., x_{d-1}, t)` of a node.
    pub fn point(&self, node: usize) -> Vec<f64> {
        let (layer, lateral) = self.split(node);
        let mut pt = self.lateral_coords(lateral);
        pt.push(self.time(layer));
        pt
    }

    /// Volume element `dx^{d-1} dt` of one node.
    pub fn cell_volume(&self) -> f64 {
        self.dx.powi(self.lateral_dims() as i32) * self.dt
    }

    fn strides(&self) -> Vec<usize> {
        (0..self.lateral_dims()).map(|k| self.side().pow(k as u32)).collect()
    }
}

/// Values on every node of a [`SpaceTimeGrid`], layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: SpaceTimeGrid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn from_fn(grid: &SpaceTimeGrid, f: impl Fn(&[f64], f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.node_count());
        let coords: Vec<Vec<f64>> = (0..grid.layer_len()).map(|l| grid.lateral_coords(l)).collect();
        for layer in 0..=grid.nt {
            let t = grid.time(layer);
            values.extend(coords.iter().map(|x| f(x, t)));
        }
        ScalarField { grid: grid.clone(), values }
    }

    pub fn get(&self, layer: usize, lateral: usize) -> f64 {
        self.values[self.grid.node(layer, lateral)]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        let n = self.grid.layer_len();
        &self.values[layer * n..(layer + 1) * n]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn difference(&self, other: &ScalarField) -> Result<ScalarField> {
        if self.grid != other.grid {
            return Err(Error::InvalidParams("fields live on different grids".into()));
        }
        Ok(ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }
}

/// Obstacle sampled on the grid. Layer 0 holds the initial data
/// `-c |x|^2`; the pole at the space-time origin is left out.
pub fn obstacle_field(grid: &SpaceTimeGrid, params: &ModelParams) -> Result<ScalarField> {
    params.validate()?;
    if grid.d != params.d {
        return Err(Error::InvalidParams("grid dimension does not match d".into()));
    }
    let r2: Vec<f64> = (0..grid.layer_len()).map(|l| grid.lateral_r2(l)).collect();
    let mut values = Vec::with_capacity(grid.node_count());
    for layer in 0..=grid.nt {
        let t = grid.time(layer);
        values.extend(r2.iter().map(|&r| obstacle_r2(r, t, params)));
    }
    Ok(ScalarField { grid: grid.clone(), values })
}

/// Discrete `a Laplacian - p d/dt` at an interior node (lateral second
/// differences, backward difference in time). `None` on layer 0 and on the
/// lateral boundary.
pub fn discrete_heat_op(field: &ScalarField, params: &ModelParams, layer: usize, lateral: usize) -> Option<f64> {
    let grid = &field.grid;
    if layer == 0 || layer > grid.nt || grid.is_lateral_boundary(lateral) {
        return None;
    }
    let a = params.lateral_weight();
    let here = field.get(layer, lateral);
    let mut lap = 0.0;
    for stride in grid.strides() {
        lap += field.get(layer, lateral - stride) + field.get(layer, lateral + stride) - 2.0 * here;
    }
    let dt = field.get(layer, lateral) - field.get(layer - 1, lateral);
    Some(a * lap / (grid.dx * grid.dx) - params.p * dt / grid.dt)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObstacleSolverConfig {
    /// Over-relaxation factor of the projected SOR iteration.
    pub omega: f64,
    /// Per-layer stop: sup-norm update below this value.
    pub tolerance: f64,
    pub max_iterations_per_layer: usize,
    /// Relative threshold on `s - gamma` used for the boundary-contact check.
    pub contact_threshold: f64,
}

impl Default for ObstacleSolverConfig {
    fn default() -> Self {
        ObstacleSolverConfig {
            omega: 1.25,
            tolerance: 1e-13,
            max_iterations_per_layer: 200_000,
            contact_threshold: DEFAULT_SHAPE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MajorantSolution {
    pub gamma: ScalarField,
    pub majorant: ScalarField,
    /// Total projected SOR sweeps over all layers.
    pub iterations: usize,
}

impl MajorantSolution {
    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.majorant.grid
    }

    /// `u = s - gamma`.
    pub fn odometer(&self) -> ScalarField {
        self.majorant.difference(&self.gamma).expect("same grid")
    }

    /// Largest `|min(s - gamma, -K s)|` over interior nodes.
    pub fn complementarity_residual(&self, params: &ModelParams) -> f64 {
        let grid = self.grid();
        let mut worst = 0.0f64;
        for layer in 1..=grid.nt {
            for lateral in 0..grid.layer_len() {
                if let Some(k) = discrete_heat_op(&self.majorant, params, layer, lateral) {
                    let gap = self.majorant.get(layer, lateral) - self.gamma.get(layer, lateral);
                    worst = worst.max(gap.min(-k).abs());
                }
            }
        }
        worst
    }
}

/// Least discrete supercaloric majorant of `gamma` with Dirichlet data
/// `s = gamma` on the lateral boundary and on layer 0. The scheme is causal
/// in time, so each layer is a stationary obstacle problem solved by
/// projected red-black SOR.
pub fn least_supercaloric_majorant(
    gamma: &ScalarField,
    params: &ModelParams,
    cfg: &ObstacleSolverConfig,
) -> Result<MajorantSolution> {
    params.validate()?;
    let grid = &gamma.grid;
    if grid.d != params.d {
        return Err(Error::InvalidParams("grid dimension does not match d".into()));
    }
    if !(cfg.omega > 0.0 && cfg.omega < 2.0) {
        return Err(Error::InvalidParams("SOR factor must lie in (0, 2)".into()));
    }
    let n = grid.layer_len();
    let strides = grid.strides();
    let lateral_coef = params.lateral_weight() / (grid.dx * grid.dx);
    let time_coef = params.p / grid.dt;
    let diag = 2.0 * strides.len() as f64 * lateral_coef + time_coef;
    // Interior nodes split by parity of the index sum, so that each half only
    // reads the other and a mirrored grid yields mirrored values.
    let mut colors: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for lateral in 0..n {
        if !grid.is_lateral_boundary(lateral) {
            let parity: usize = grid.lateral_indices(lateral).iter().sum::<usize>() % 2;
            colors[parity].push(lateral);
        }
    }
    let mut s = gamma.values.clone();
    let mut iterations = 0usize;
    for layer in 1..=grid.nt {
        let (done, rest) = s.split_at_mut(layer * n);
        let prev = &done[(layer - 1) * n..];
        let cur = &mut rest[..n];
        let obs = &gamma.values[layer * n..(layer + 1) * n];
        for lateral in 0..n {
            if !grid.is_lateral_boundary(lateral) {
                cur[lateral] = obs[lateral].max(prev[lateral]);
            }
        }
        let mut converged = false;
        let mut last = 0.0;
        for _ in 0..cfg.max_iterations_per_layer {
            iterations += 1;
            let mut max_update = 0.0f64;
            for color in &colors {
                for &i in color {
                    let mut neighbours = 0.0;
                    for &stride in &strides {
                        neighbours += cur[i - stride] + cur[i + stride];
                    }
                    let caloric = (lateral_coef * neighbours + time_coef * prev[i]) / diag;
                    let relaxed = cur[i] + cfg.omega * (caloric - cur[i]);
                    let new = relaxed.max(obs[i]);
                    max_update = max_update.max((new - cur[i]).abs());
                    cur[i] = new;
                }
            }
            last = max_update;
            if max_update < cfg.tolerance {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                what: "obstacle projection",
                iterations: cfg.max_iterations_per_layer,
                residual: last,
            });
        }
    }
    let solution = MajorantSolution {
        gamma: gamma.clone(),
        majorant: ScalarField { grid: grid.clone(), values: s },
        iterations,
    };
    check_contact(&solution, cfg.contact_threshold)?;
    Ok(solution)
}

fn check_contact(sol: &MajorantSolution, relative: f64) -> Result<()> {
    let grid = sol.grid();
    let n = grid.layer_len();
    let u = |node: usize| sol.majorant.values[node] - sol.gamma.values[node];
    let cutoff = relative * (0..grid.node_count()).map(u).fold(0.0, f64::max);
    let strides = grid.strides();
    let near_edge = |lateral: usize| {
        !grid.is_lateral_boundary(lateral)
            && strides
                .iter()
                .any(|&st| grid.is_lateral_boundary(lateral - st) || grid.is_lateral_boundary(lateral + st))
    };
    for layer in 1..=grid.nt {
        for lateral in 0..n {
            let node = grid.node(layer, lateral);
            if (layer == grid.nt || near_edge(lateral)) && u(node) > cutoff {
                return Err(Error::BoundaryContact {
                    x: grid.lateral_coords(lateral),
                    t: grid.time(layer),
                });
            }
        }
    }
    Ok(())
}

/// Default relative threshold on `s - gamma` for membership in `D`.
pub const DEFAULT_SHAPE_THRESHOLD: f64 = 1e-8;

/// Node set `D = {s - gamma > threshold}` and its measure.
#[derive(Debug, Clone)]
pub struct LimitShape {
    pub grid: SpaceTimeGrid,
    /// Sorted flat node indices.
    pub nodes: Vec<usize>,
    pub measure: f64,
    pub threshold: f64,
}

impl LimitShape {
    pub fn contains(&self, node: usize) -> bool {
        self.nodes.binary_search(&node).is_ok()
    }

    /// Node coordinates `(x, t)`.
    pub fn points(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|&n| self.grid.point(n)).collect()
    }

    /// Componentwise min and max of the node coordinates.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.grid.d];
        let mut hi = vec![f64::NEG_INFINITY; self.grid.d];
        for &n in &self.nodes {
            for (k, v) in self.grid.point(n).into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        (lo, hi)
    }

    /// Membership mask over all nodes.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.grid.node_count()];
        for &n in &self.nodes {
            m[n] = true;
        }
        m
    }
}

/// Extracts `D`. `threshold` is absolute; `None` means
/// `DEFAULT_SHAPE_THRESHOLD * max(s - gamma)`.
pub fn extract_limit_shape(s: &ScalarField, gamma: &ScalarField, threshold: Option<f64>) -> Result<LimitShape> {
    let u = s.difference(gamma)?;
    let max_u = u.max_value();
    let threshold = threshold.unwrap_or(DEFAULT_SHAPE_THRESHOLD * max_u.max(0.0));
    let nodes: Vec<usize> = u
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, _)| i)
        .collect();
    if nodes.is_empty() {
        return Err(Error::EmptyShape);
    }
    let measure = nodes.len() as f64 * s.grid.cell_volume();
    Ok(LimitShape {
        grid: s.grid.clone(),
        nodes,
        measure,
        threshold,
    })
}

/// Obstacle, majorant and limit shape in one call.
pub fn solve_limit_shape(grid: &SpaceTimeGrid, params: &ModelParams) -> Result<(MajorantSolution, LimitShape)> {
    let gamma = obstacle_field(grid, params)?;
    let sol = least_supercaloric_majorant(&gamma, params, &ObstacleSolverConfig::default())?;
    let shape = extract_limit_shape(&sol.majorant, &sol.gamma, None)?;
    Ok((sol, shape))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatBallSpec {
    pub center_x: Vec<f64>,
    pub center_t: f64,
    pub radius: f64,
}

impl HeatBallSpec {
    pub fn new(center_x: Vec<f64>, center_t: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParams("heat ball radius must be positive".into()));
        }
        Ok(HeatBallSpec { center_x, center_t, radius })
    }
}

/// Past heat ball `{(y, s) : s < t, Phi(x - y, t - s) >= r^{-(d-1)}}`.
#[derive(Debug, Clone)]
pub struct HeatBall {
    spec: HeatBallSpec,
    beta: f64,
    m: usize,
}

impl HeatBall {
    /// Largest `t - s` inside the ball: `beta r^2 / pi`.
    pub fn depth(&self) -> f64 {
        self.beta * self.spec.radius * self.spec.radius / PI
    }

    /// Lateral radius of the ball's slice at depth `tau = t - s`.
    pub fn slice_radius(&self, tau: f64) -> f64 {
        if !(tau > 0.0) || tau > self.depth() {
            return 0.0;
        }
        (self.m as f64 * tau / (2.0 * self.beta) * (self.depth() / tau).ln()).sqrt()
    }

    pub fn contains(&self, y: &[f64], s: f64) -> bool {
        let tau = self.spec.center_t - s;
        if !(tau > 0.0) {
            return false;
        }
        let r2: f64 = y.iter().zip(&self.spec.center_x).map(|(a, b)| (a - b) * (a - b)).sum();
        heat_kernel(r2, tau, self.beta, self.m) >= self.spec.radius.powi(-(self.m as i32))
    }
}

pub fn heat_ball(spec: &HeatBallSpec, params: &ModelParams) -> Result<HeatBall> {
    check_point_dim(&spec.center_x, params)?;
    if !(spec.radius > 0.0) {
        return Err(Error::InvalidParams("heat ball radius must be positive".into()));
    }
    Ok(HeatBall {
        spec: spec.clone(),
        beta: params.beta(),
        m: params.lateral_dims(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Stop once successive refinements differ by less than this (relative
    /// to `max(1, |value|)`).
    pub tolerance: f64,
    pub max_refinements: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            tolerance: 1e-9,
            max_refinements: 7,
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut deriv = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            deriv = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / deriv;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * deriv * deriv);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Quadrature rule on the unit ball of dimension `m`: points and weights
/// with `sum w g(v) ~ int_{|v| <= 1} g(v) dv`.
fn unit_ball_rule(m: usize, order: usize) -> Vec<(Vec<f64>, f64)> {
    if m == 0 {
        return vec![(Vec::new(), 1.0)];
    }
    let (nodes, weights) = gauss_legendre(order);
    if m == 1 {
        return nodes.iter().zip(&weights).map(|(&x, &w)| (vec![x], w)).collect();
    }
    // v_1 = sin(theta); the remaining coordinates fill a ball of radius cos(theta).
    let inner = unit_ball_rule(m - 1, order);
    let mut rule = Vec::with_capacity(order * inner.len());
    for (&x, &w) in nodes.iter().zip(&weights) {
        let theta = x * PI / 2.0;
        let rho = theta.cos();
        let jac = PI / 2.0 * rho * rho.powi((m - 1) as i32);
        for (v, wi) in &inner {
            let mut pt = Vec::with_capacity(m);
            pt.push(theta.sin());
            pt.extend(v.iter().map(|c| c * rho));
            rule.push((pt, w * wi * jac));
        }
    }
    rule
}

/// Heat-ball mean value
/// `(beta / r^{d-1}) int_E f(y, s) |x - y|^2 / (t - s)^2 dy ds`.
///
/// The kernel is singular at the centre. With `t - s = T exp(-xi^2)`
/// (`T` the ball depth) and `y = x - R(t - s) v`, `v` in the unit ball, the
/// integrand becomes smooth and Gaussian-decaying in `xi`; Gauss-Legendre
/// panels are refined until successive values agree.
pub fn mean_value_operator(
    f: &dyn Fn(&[f64], f64) -> f64,
    spec: &HeatBallSpec,
    params: &ModelParams,
    cfg: &QuadratureConfig,
) -> Result<f64> {
    let ball = heat_ball(spec, params)?;
    let m = ball.m;
    let mf = m as f64;
    let beta = ball.beta;
    let depth = ball.depth();
    let xi_max = (140.0 / mf).sqrt();
    let prefactor = beta / spec.radius.powi(m as i32)
        * 2.0
        * (mf / (2.0 * beta)).powf((mf + 2.0) / 2.0)
        * depth.powf(mf / 2.0);
    let evaluate = |panels: usize, order: usize| -> f64 {
        let (nodes, weights) = gauss_legendre(order);
        let ball_rule = unit_ball_rule(m, order);
        let width = xi_max / panels as f64;
        let mut y = vec![0.0; m];
        let mut total = 0.0;
        for panel in 0..panels {
            let a = panel as f64 * width;
            for (&node, &w) in nodes.iter().zip(&weights) {
                let xi = a + width * (node + 1.0) / 2.0;
                let tau = depth * (-xi * xi).exp();
                let lateral = (mf * tau / (2.0 * beta)).sqrt() * xi;
                let mut inner = 0.0;
                for (v, wv) in &ball_rule {
                    let v2: f64 = v.iter().map(|c| c * c).sum();
                    for k in 0..m {
                        y[k] = spec.center_x[k] - lateral * v[k];
                    }
                    inner += wv * v2 * f(&y, spec.center_t - tau);
                }
                total += w * width / 2.0 * xi.powi(m as i32 + 3) * (-mf * xi * xi / 2.0).exp() * inner;
            }
        }
        prefactor * total
    };
    let mut panels = 4;
    let mut order = 8;
    let mut prev = evaluate(panels, order);
    let mut change = f64::INFINITY;
    for _ in 0..cfg.max_refinements {
        panels *= 2;
        order += 4;
        let next = evaluate(panels, order);
        change = (next - prev).abs() / next.abs().max(1.0);
        prev = next;
        if change < cfg.tolerance {
            return Ok(next);
        }
    }
    Err(Error::Quadrature {
        tolerance: cfg.tolerance,
        change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Variant;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p02() -> ModelParams {
        ModelParams::monotone(2, 0.2).unwrap()
    }

    #[test]
    fn fundamental_solution_values() {
        let params = p02();
        assert_relative_eq!(
            fundamental_solution(&[0.0], 1.0, &params).unwrap(),
            (0.125 / PI).sqrt(),
            epsilon = 1e-15
        );
        assert!((fundamental_solution(&[0.0], 1.0, &params).unwrap() - 0.199471).abs() < 1e-6);
        assert_eq!(fundamental_solution(&[0.3], -0.5, &params).unwrap(), 0.0);
        assert_eq!(fundamental_solution(&[0.3], 0.0, &params).unwrap(), 0.0);
        assert!(matches!(fundamental_solution(&[0.0], 0.0, &params), Err(Error::SingularPoint)));
        assert!(fundamental_solution(&[0.0, 1.0], 1.0, &params).is_err());
    }

    #[test]
    fn fundamental_solution_has_unit_mass() {
        for params in [p02(), ModelParams::new(2, 0.6, Variant::NaturalLazy).unwrap()] {
            for t in [0.05, 0.7, 3.0] {
                let h = 2e-3;
                let total: f64 = (-50_000..=50_000)
                    .map(|i| fundamental_solution(&[i as f64 * h], t, &params).unwrap() * h)
                    .sum();
                assert!((total - 1.0).abs() < 1e-9, "{total}");
            }
        }
    }

    #[test]
    fn obstacle_values() {
        let params = p02();
        let g = obstacle(&[0.0], 1.0, &params).unwrap();
        assert!((g - (1.0 - 0.997356)).abs() < 1e-6, "{g}");
        assert!(matches!(obstacle(&[0.0], 0.0, &params), Err(Error::Domain(_))));
        // exponent argument beta |x|^2 / t = 50
        let t: f64 = 0.8;
        let x = (50.0 * t / params.beta()).sqrt();
        let bare = t - x * x;
        let gap = (obstacle(&[x], t, &params).unwrap() - bare).abs() / bare.abs();
        assert!(gap < 1e-12, "{gap}");
        let scaled = params.with_k(2.0).unwrap();
        assert!(
            (obstacle(&[0.0], 1.0, &scaled).unwrap() - (1.0 - 2.0 * 0.997356)).abs() < 1e-5
        );
    }

    proptest! {
        #[test]
        fn obstacle_below_parabola(x in -5.0f64..5.0, t in 1e-3f64..5.0, p in 0.05f64..0.95) {
            let params = ModelParams::monotone(2, p).unwrap();
            prop_assert!(obstacle(&[x], t, &params).unwrap() <= t - x * x);
        }

        #[test]
        fn fundamental_solution_homogeneity(y in -2.0f64..2.0, tau in 0.01f64..2.0, a in 0.2f64..5.0) {
            let params = p02();
            let lhs = fundamental_solution(&[a * y], a * a * tau, &params).unwrap();
            let rhs = fundamental_solution(&[y], tau, &params).unwrap() / a;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-300));
        }
    }

    #[test]
    fn discrete_operator_on_parabola() {
        for params in [
            p02(),
            ModelParams::new(2, 0.4, Variant::NaturalLazy).unwrap(),
            ModelParams::monotone(3, 0.3).unwrap(),
        ] {
            let grid = SpaceTimeGrid::new(params.d, 1.0, 0.5, 0.1).unwrap();
            let c = params.quadratic_coefficient();
            let f = ScalarField::from_fn(&grid, |x, t| t - c * x.iter().map(|v| v * v).sum::<f64>());
            let mut checked = 0;
            for layer in 0..=grid.nt {
                for lateral in 0..grid.layer_len() {
                    if let Some(k) = discrete_heat_op(&f, &params, layer, lateral) {
                        assert!((k + 1.0).abs() < 1e-9, "{k}");
                        checked += 1;
                    }
                }
            }
            assert!(checked > 0);
        }
    }

    #[test]
    fn caloric_obstacle_is_its_own_majorant() {
        let params = p02();
        let grid = SpaceTimeGrid::new(2, 0.5, 0.2, 0.05).unwrap();
        let gamma = ScalarField::from_fn(&grid, |_, _| 0.75);
        let sol = least_supercaloric_majorant(&gamma, &params, &ObstacleSolverConfig::default()).unwrap();
        for (a, b) in sol.majorant.values.iter().zip(&gamma.values) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            extract_limit_shape(&sol.majorant, &gamma, None),
            Err(Error::EmptyShape)
        ));
    }

    #[test]
    fn coarse_limit_shape() {
        let params = p02();
        let grid = SpaceTimeGrid::new(2, 2.5, 0.6, 0.04).unwrap();
        let (sol, shape) = solve_limit_shape(&grid, &params).unwrap();
        assert!(sol.complementarity_residual(&params) < 1e-6);
        assert!(sol.majorant.values.iter().zip(&sol.gamma.values).all(|(s, g)| s >= g));
        // mirror symmetry, node by node
        let side = grid.side();
        for &node in &shape.nodes {
            let (layer, lateral) = grid.split(node);
            assert!(shape.contains(grid.node(layer, side - 1 - lateral)));
        }
        assert!((shape.measure - 1.0).abs() < 0.1, "{}", shape.measure);
        let (lo, hi) = shape.bounding_box();
        assert!(lo[0] > -1.9 && hi[0] < 1.9 && hi[1] < 0.45, "{lo:?} {hi:?}");
        // s - gamma never exceeds the pole term
        for layer in 1..=grid.nt {
            for lateral in 0..grid.layer_len() {
                let x = grid.lateral_coords(lateral);
                let t = grid.time(layer);
                let u = sol.majorant.get(layer, lateral) - sol.gamma.get(layer, lateral);
                let pole = fundamental_solution(&x, t, &params).unwrap() / params.p;
                assert!(u <= pole + 1e-9);
            }
        }
    }

    #[test]
    fn small_grid_reports_contact() {
        let params = p02();
        let grid = SpaceTimeGrid::new(2, 0.6, 0.6, 0.04).unwrap();
        let gamma = obstacle_field(&grid, &params).unwrap();
        assert!(matches!(
            least_supercaloric_majorant(&gamma, &params, &ObstacleSolverConfig::default()),
            Err(Error::BoundaryContact { .. })
        ));
    }

    #[test]
    fn heat_ball_geometry() {
        let params = p02();
        let r = 1.3;
        let ball = heat_ball(&HeatBallSpec::new(vec![0.0], 0.0, r).unwrap(), &params).unwrap();
        let depth = params.beta() * r * r / PI;
        assert_relative_eq!(ball.depth(), depth, epsilon = 1e-15);
        assert!(ball.contains(&[0.0], -0.999 * depth));
        assert!(!ball.contains(&[0.0], -1.001 * depth));
        assert!(!ball.contains(&[0.0], 0.0));
        assert!(!ball.contains(&[0.0], 0.1));
        let tau = 0.3 * depth;
        let edge = ball.slice_radius(tau);
        assert!(ball.contains(&[0.999 * edge], -tau));
        assert!(!ball.contains(&[1.001 * edge], -tau));
        assert!(HeatBallSpec::new(vec![0.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn gauss_legendre_exact_for_polynomials() {
        let (x, w) = gauss_legendre(7);
        for k in 0..14 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-14, "{k}: {q}");
        }
    }

    #[test]
    fn unit_ball_volumes() {
        for (m, vol) in [(1usize, 2.0), (2, PI), (3, 4.0 * PI / 3.0)] {
            let total: f64 = unit_ball_rule(m, 20).iter().map(|(_, w)| w).sum();
            assert!((total - vol).abs() < 1e-10, "{m}: {total}");
        }
    }

    #[test]
    fn mean_value_of_constant() {
        for params in [p02(), ModelParams::monotone(3, 0.35).unwrap()] {
            let spec = HeatBallSpec::new(vec![0.0; params.d - 1], 0.0, 1.0).unwrap();
            let v = mean_value_operator(&|_, _| 1.0, &spec, &params, &QuadratureConfig::default()).unwrap();
            assert!((v - 1.0).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn mean_value_reproduces_caloric_exponentials() {
        let params = p02();
        let coef = params.lateral_weight() / params.p;
        for a in [0.25, 0.5, 1.0] {
            let c = coef * a * a;
            let f = move |y: &[f64], s: f64| (a * y[0] + c * s).exp();
            let spec = HeatBallSpec::new(vec![0.3], 0.7, 1.0).unwrap();
            let v = mean_value_operator(&f, &spec, &params, &QuadratureConfig::default()).unwrap();
            let exact = f(&[0.3], 0.7);
            assert!((v - exact).abs() < 1e-8 * exact, "{a}: {v} vs {exact}");
        }
    }

    #[test]
    fn mean_value_with_external_pole() {
        let params = p02();
        let spec = HeatBallSpec::new(vec![0.0], 1.0, 1.0).unwrap();
        let f = |y: &[f64], s: f64| -fundamental_solution(&[y[0] - 0.2], s - 0.5, &params).unwrap();
        let v = mean_value_operator(&f, &spec, &params, &QuadratureConfig::default()).unwrap();
        let centre = f(&[0.0], 1.0);
        assert!(v <= centre + 1e-3);
    }
}
