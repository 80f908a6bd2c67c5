//! Drifted random walks and their Green's function.
//!
//! Every walk draws from its own ChaCha stream, so walk `j` under seed `s` is
//! a pure function of `(s, j)` no matter how work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeBox, MassField, ModelParams, Site, StepLaw, Variant};

/// RNG for walk number `stream` under `seed`.
pub fn walk_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct WalkState {
    pub position: Site,
    pub steps_taken: u64,
    pub stream: u64,
    rng: ChaCha8Rng,
}

impl WalkState {
    pub fn new(start: Site, seed: u64, stream: u64) -> Self {
        WalkState {
            position: start,
            steps_taken: 0,
            stream,
            rng: walk_rng(seed, stream),
        }
    }

    /// Advances in place by one step drawn from `law`.
    #[inline]
    pub fn advance(&mut self, law: &StepLaw) {
        let u: f64 = self.rng.random();
        let m = law.sample(u);
        self.position.0[m.axis] += m.delta;
        self.steps_taken += 1;
    }
}

/// One step of the walk; the input state is left untouched.
pub fn step(state: &WalkState, params: &ModelParams) -> WalkState {
    let mut next = state.clone();
    next.advance(&params.step_law());
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: u64,
    /// Upper bound on the expected visits lost to the horizon cut (zero for
    /// the monotone walk, whose truncation is exact).
    pub tail_bound: f64,
    /// Set when `tail_bound` exceeds the requested precision.
    pub horizon_warning: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GreenMcOptions {
    /// Natural lazy walks run for `horizon_factor * max(z_d, 1) / p` steps.
    pub horizon_factor: f64,
    /// Tail bound above which `horizon_warning` is raised.
    pub precision: f64,
}

impl Default for GreenMcOptions {
    fn default() -> Self {
        GreenMcOptions {
            horizon_factor: 20.0,
            precision: 1e-3,
        }
    }
}

/// Monte Carlo estimate of `g(0, z)`, the expected number of visits to `z`
/// by the walk started at the origin.
pub fn green_mc(z: &Site, params: &ModelParams, n_samples: u64) -> Result<GreenEstimate> {
    green_mc_with(z, params, n_samples, &GreenMcOptions::default())
}

pub fn green_mc_with(
    z: &Site,
    params: &ModelParams,
    n_samples: u64,
    opts: &GreenMcOptions,
) -> Result<GreenEstimate> {
    params.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidParams("n_samples must be >= 1".into()));
    }
    if z.dim() != params.d {
        return Err(Error::InvalidParams(format!("site {z} is not in dimension {}", params.d)));
    }
    let zd = z.time();
    if params.variant == Variant::Monotone && zd < 0 {
        return Ok(GreenEstimate {
            value: 0.0,
            std_error: 0.0,
            n_samples,
            tail_bound: 0.0,
            horizon_warning: false,
        });
    }
    let law = params.step_law();
    let horizon = match params.variant {
        Variant::Monotone => u64::MAX,
        Variant::NaturalLazy => (opts.horizon_factor * (zd.max(1) as f64) / params.p).ceil() as u64,
    };
    let (sum, sum_sq) = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut w = WalkState::new(Site::origin(params.d), params.seed, i);
            let mut visits = 0u64;
            loop {
                if w.position == *z {
                    visits += 1;
                }
                if w.position.time() > zd && params.variant == Variant::Monotone {
                    break;
                }
                if w.steps_taken >= horizon {
                    break;
                }
                w.advance(&law);
            }
            (visits as u128, (visits as u128) * (visits as u128))
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = n_samples as f64;
    let mean = sum as f64 / n;
    let var = if n_samples > 1 {
        ((sum_sq as f64 - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    let tail_bound = match params.variant {
        Variant::Monotone => 0.0,
        Variant::NaturalLazy => lazy_tail_bound(horizon, zd, params.p),
    };
    Ok(GreenEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        n_samples,
        tail_bound,
        horizon_warning: tail_bound > opts.precision,
    })
}

/// Hoeffding bound on `sum_{t > horizon} P(S_t = z)` for the natural lazy
/// walk, using that each drift increment lies in `[-1, 1]` with mean `p`.
fn lazy_tail_bound(horizon: u64, zd: i64, p: f64) -> f64 {
    let mut total = 0.0;
    let mut t = horizon + 1;
    loop {
        let tf = t as f64;
        let gap = tf * p - zd as f64;
        let term = if gap > 0.0 {
            (-(gap * gap) / (2.0 * tf)).exp()
        } else {
            1.0
        };
        total += term;
        if gap > 0.0 && term < 1e-30 {
            break;
        }
        if t - horizon > 100_000_000 {
            return f64::INFINITY;
        }
        t += 1;
    }
    total
}

/// Expected visits to each lateral site during one layer of the monotone
/// walk: the resolvent `(I - (1 - p) P)^{-1} delta_0` of lateral simple
/// random walk `P`. Stored on a cube of radius `radius` in `d - 1` dims.
#[derive(Debug, Clone)]
pub struct LayerKernel {
    pub radius: usize,
    pub dims: usize,
    pub values: Vec<f64>,
}

impl LayerKernel {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let dims = params.lateral_dims();
        let a = 1.0 - params.p;
        let mut radius = 8usize;
        loop {
            let values = lateral_resolvent(dims, radius, a)?;
            let center = values[cube_center(dims, radius)];
            let boundary_max = cube_boundary_max(&values, dims, radius);
            if boundary_max <= 1e-18 * center {
                return Ok(LayerKernel { radius, dims, values });
            }
            radius *= 2;
            if radius > 1 << 14 || (2 * radius + 1).pow(dims as u32) > 50_000_000 {
                return Err(Error::Truncation {
                    lost: boundary_max / center,
                    limit: 1e-18,
                });
            }
        }
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn at_origin(&self) -> f64 {
        self.values[cube_center(self.dims, self.radius)]
    }
}

fn cube_center(dims: usize, radius: usize) -> usize {
    let side = 2 * radius + 1;
    (0..dims).fold(0, |acc, _| acc * side + radius)
}

fn cube_boundary_max(values: &[f64], dims: usize, radius: usize) -> f64 {
    let side = 2 * radius + 1;
    let mut best = 0.0f64;
    for (idx, v) in values.iter().enumerate() {
        let mut rem = idx;
        let mut on_boundary = false;
        for _ in 0..dims {
            let c = rem % side;
            rem /= side;
            if c == 0 || c == side - 1 {
                on_boundary = true;
            }
        }
        if on_boundary {
            best = best.max(v.abs());
        }
    }
    best
}

/// Solves `h = delta_0 + a * avg_{nbrs} h` on a cube with zero exterior by
/// Gauss-Seidel.
fn lateral_resolvent(dims: usize, radius: usize, a: f64) -> Result<Vec<f64>> {
    let side = 2 * radius + 1;
    let len = side.pow(dims as u32);
    let strides: Vec<usize> = (0..dims).map(|k| side.pow(k as u32)).collect();
    let center = cube_center(dims, radius);
    let mut h = vec![0.0; len];
    let w = a / (2 * dims) as f64;
    for sweep in 0..100_000 {
        let mut max_delta = 0.0f64;
        for idx in 0..len {
            let mut acc = if idx == center { 1.0 } else { 0.0 };
            for &stride in &strides {
                let c = (idx / stride) % side;
                if c > 0 {
                    acc += w * h[idx - stride];
                }
                if c + 1 < side {
                    acc += w * h[idx + stride];
                }
            }
            max_delta = max_delta.max((acc - h[idx]).abs());
            h[idx] = acc;
        }
        if max_delta < 1e-19 {
            return Ok(h);
        }
        if sweep == 99_999 {
            return Err(Error::NonConvergence {
                what: "lateral resolvent",
                iterations: sweep + 1,
                residual: max_delta,
            });
        }
    }
    unreachable!()
}

/// Layer-by-layer propagation of the monotone walk's entry distribution.
///
/// `q_m(w)` is the probability that the walk enters layer `m` at lateral
/// position `w`; `q_{m+1} = q_m * (p h)` where `h` is the [`LayerKernel`].
/// The Green's function on layer `m` is `g(0, (v, m)) = (q_m * h)(v)`.
pub struct LayerPropagator {
    kernel: LayerKernel,
    radius: usize,
    dims: usize,
    layer: i64,
    entry: Vec<f64>,
    /// Probability mass pushed outside the lateral cube so far.
    pub lost_mass: f64,
    p: f64,
}

impl LayerPropagator {
    pub fn new(params: &ModelParams, lateral_radius: usize) -> Result<Self> {
        if params.variant != Variant::Monotone {
            return Err(Error::InvalidParams(
                "the layer dynamic program needs the monotone walk".into(),
            ));
        }
        let kernel = LayerKernel::new(params)?;
        let dims = params.lateral_dims();
        let side = 2 * lateral_radius + 1;
        let mut entry = vec![0.0; side.pow(dims as u32)];
        entry[cube_center(dims, lateral_radius)] = 1.0;
        Ok(LayerPropagator {
            kernel,
            radius: lateral_radius,
            dims,
            layer: 0,
            entry,
            lost_mass: 0.0,
            p: params.p,
        })
    }

    pub fn layer(&self) -> i64 {
        self.layer
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Entry distribution of the current layer, on the lateral cube.
    pub fn entry_distribution(&self) -> &[f64] {
        &self.entry
    }

    /// Green's function on the current layer, then moves to the next one.
    pub fn next_layer(&mut self) -> Vec<f64> {
        let (g, spilled) = convolve_cube(&self.entry, self.radius, &self.kernel.values, self.kernel.radius, self.dims);
        self.entry = g.iter().map(|v| v * self.p).collect();
        self.lost_mass += spilled * self.p;
        self.layer += 1;
        g
    }

    pub fn index(&self, lateral: &[i64]) -> Option<usize> {
        let side = 2 * self.radius + 1;
        let r = self.radius as i64;
        let mut idx = 0usize;
        for &c in lateral.iter().rev() {
            if c < -r || c > r {
                return None;
            }
            idx = idx * side + (c + r) as usize;
        }
        Some(idx)
    }
}

/// Truncated convolution of two cube-supported arrays; the result lives on
/// the first cube. Also returns the weight that fell outside it.
fn convolve_cube(a: &[f64], ra: usize, k: &[f64], rk: usize, dims: usize) -> (Vec<f64>, f64) {
    let sa = 2 * ra + 1;
    let sk = 2 * rk + 1;
    let mut out = vec![0.0; a.len()];
    let kernel_offsets: Vec<(Vec<i64>, f64)> = (0..k.len())
        .filter(|&j| k[j] != 0.0)
        .map(|j| {
            let mut rem = j;
            let off: Vec<i64> = (0..dims)
                .map(|_| {
                    let c = rem % sk;
                    rem /= sk;
                    c as i64 - rk as i64
                })
                .collect();
            (off, k[j])
        })
        .collect();
    let mut spilled = 0.0;
    if dims == 1 {
        // below[j] = sum of k[..j], above[j] = sum of k[j + 1..], both
        // accumulated from the small tail values upward.
        let mut below = vec![0.0; sk + 1];
        for j in 0..sk {
            below[j + 1] = below[j] + k[j];
        }
        let mut above = vec![0.0; sk + 1];
        for j in (0..sk).rev() {
            above[j] = above[j + 1] + k[j];
        }
        let ra = ra as i64;
        let rk = rk as i64;
        for (i, &av) in a.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let x = i as i64 - ra;
            let lo = (-ra - x).max(-rk);
            let hi = (ra - x).min(rk);
            for off in lo..=hi {
                let kv = k[(off + rk) as usize];
                out[(x + off + ra) as usize] += av * kv;
            }
            spilled += av * (below[(lo + rk) as usize] + above[(hi + rk + 1) as usize]);
        }
        return (out, spilled);
    }
    let mut coords = vec![0i64; dims];
    for (i, &av) in a.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let mut rem = i;
        for c in coords.iter_mut() {
            *c = (rem % sa) as i64;
            rem /= sa;
        }
        'kernel: for (off, kv) in &kernel_offsets {
            let mut idx = 0usize;
            for axis in (0..dims).rev() {
                let c = coords[axis] + off[axis];
                if c < 0 || c >= sa as i64 {
                    spilled += av * kv;
                    continue 'kernel;
                }
                idx = idx * sa + c as usize;
            }
            out[idx] += av * kv;
        }
    }
    (out, spilled)
}

/// Deterministic `g(0, .)` for the monotone walk on layers `0..=max_layer`
/// and lateral cube of radius `lateral_radius`.
#[derive(Debug, Clone)]
pub struct GreenTable {
    pub lateral_radius: usize,
    pub max_layer: i64,
    pub lost_mass: f64,
    dims: usize,
    layers: Vec<Vec<f64>>,
}

/// Largest tolerated truncation loss of the entry distribution.
pub const TRUNCATION_LIMIT: f64 = 1e-12;

impl GreenTable {
    pub fn build(params: &ModelParams, lateral_radius: usize, max_layer: i64) -> Result<Self> {
        let mut prop = LayerPropagator::new(params, lateral_radius)?;
        let mut layers = Vec::with_capacity(max_layer.max(0) as usize + 1);
        for _ in 0..=max_layer.max(0) {
            layers.push(prop.next_layer());
        }
        if prop.lost_mass > TRUNCATION_LIMIT {
            return Err(Error::Truncation {
                lost: prop.lost_mass,
                limit: TRUNCATION_LIMIT,
            });
        }
        Ok(GreenTable {
            lateral_radius,
            max_layer,
            lost_mass: prop.lost_mass,
            dims: params.lateral_dims(),
            layers,
        })
    }

    /// `g(0, z)`; zero below layer 0 and outside the lateral cube, `None`
    /// above `max_layer`.
    pub fn get(&self, z: &Site) -> Option<f64> {
        let t = z.time();
        if t < 0 {
            return Some(0.0);
        }
        if t > self.max_layer {
            return None;
        }
        let side = 2 * self.lateral_radius + 1;
        let r = self.lateral_radius as i64;
        let mut idx = 0usize;
        for &c in z.lateral().iter().rev() {
            if c < -r || c > r {
                return Some(0.0);
            }
            idx = idx * side + (c + r) as usize;
        }
        debug_assert_eq!(z.lateral().len(), self.dims);
        Some(self.layers[t as usize][idx])
    }

    pub fn layer(&self, t: i64) -> &[f64] {
        &self.layers[t as usize]
    }
}

/// Deterministic `g(0, z)` for the monotone walk via the layer dynamic
/// program.
pub fn green_dp(z: &Site, params: &ModelParams, lateral_radius: usize) -> Result<f64> {
    params.validate()?;
    if z.dim() != params.d {
        return Err(Error::InvalidParams(format!("site {z} is not in dimension {}", params.d)));
    }
    let mut prop = LayerPropagator::new(params, lateral_radius)?;
    if z.time() < 0 {
        return Ok(0.0);
    }
    let mut g = Vec::new();
    for _ in 0..=z.time() {
        g = prop.next_layer();
    }
    if prop.lost_mass > TRUNCATION_LIMIT {
        return Err(Error::Truncation {
            lost: prop.lost_mass,
            limit: TRUNCATION_LIMIT,
        });
    }
    Ok(prop.index(z.lateral()).map(|i| g[i]).unwrap_or(0.0))
}

/// Scaling limit of `n^{1 - 2/(d+1)} g(0, .)`:
/// `(1/p) (beta / (pi t))^{(d-1)/2} exp(-beta |x|^2 / t)`.
pub fn continuum_green(x: &[f64], t: f64, params: &ModelParams) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("continuum Green's function needs t > 0, got {t}")));
    }
    let beta = params.beta();
    let m = params.lateral_dims() as f64;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok((beta / (std::f64::consts::PI * t)).powf(m / 2.0) * (-beta * r2 / t).exp() / params.p)
}

/// Expected visits to each site of `bx` by the walk from the origin, killed
/// on leaving `bx`: the solution of `g = delta_0 + sum_w w g(. - delta)` with
/// zero exterior, by Gauss-Seidel sweeps. Works for either variant; it
/// approximates `g(0, .)` from below, with an error that vanishes as the box
/// grows (the drift carries walks away for good).
pub fn green_on_box(params: &ModelParams, bx: &LatticeBox, tolerance: f64, max_sweeps: usize) -> Result<MassField> {
    params.validate()?;
    if bx.dim() != params.d {
        return Err(Error::InvalidParams("box dimension does not match d".into()));
    }
    let law = params.step_law();
    let sites: Vec<Site> = bx.sites().collect();
    let incoming: Vec<Vec<(usize, f64)>> = sites
        .iter()
        .map(|z| {
            law.moves
                .iter()
                .filter_map(|m| bx.index(&z.offset(m.axis, -m.delta)).map(|j| (j, m.weight)))
                .collect()
        })
        .collect();
    let origin = bx.index(&Site::origin(params.d));
    let mut g = vec![0.0; sites.len()];
    for sweep in 0..max_sweeps {
        let mut max_update = 0.0f64;
        for i in 0..g.len() {
            let mut v = if Some(i) == origin { 1.0 } else { 0.0 };
            for &(j, w) in &incoming[i] {
                v += w * g[j];
            }
            max_update = max_update.max((v - g[i]).abs());
            g[i] = v;
        }
        if max_update < tolerance {
            return Ok(MassField::from_entries(
                params.d,
                sites.into_iter().zip(g).filter(|(_, v)| *v != 0.0),
            ));
        }
        if sweep + 1 == max_sweeps {
            return Err(Error::NonConvergence {
                what: "Green's function on a box",
                iterations: max_sweeps,
                residual: max_update,
            });
        }
    }
    Err(Error::InvalidParams("max_sweeps must be positive".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(c: &[i64]) -> Site {
        Site::from_slice(c)
    }

    /// `sum_m a^{2m} C(2m, m) / 4^m`: expected returns to the origin of a
    /// one-dimensional simple walk killed with probability `1 - a` per step.
    fn killed_walk_series(a: f64) -> f64 {
        let mut term = 1.0;
        let mut total = 0.0;
        let mut m = 0u64;
        while term > 1e-18 {
            total += term;
            m += 1;
            term *= a * a * ((2 * m - 1) as f64) / ((2 * m) as f64);
        }
        total
    }

    #[test]
    fn step_frequencies_match_law() {
        let params = ModelParams::monotone(2, 0.2).unwrap().with_seed(11);
        let law = params.step_law();
        let mut w = WalkState::new(Site::origin(2), params.seed, 0);
        let n = 1_000_000u64;
        let mut counts = [0u64; 3];
        for _ in 0..n {
            let before = w.position.clone();
            w.advance(&law);
            let dx = w.position.0[0] - before.0[0];
            let dt = w.position.0[1] - before.0[1];
            match (dx, dt) {
                (1, 0) => counts[0] += 1,
                (-1, 0) => counts[1] += 1,
                (0, 1) => counts[2] += 1,
                other => panic!("illegal step {other:?}"),
            }
        }
        for (c, prob) in counts.iter().zip([0.4, 0.4, 0.2]) {
            let sigma = (n as f64 * prob * (1.0 - prob)).sqrt();
            assert!((*c as f64 - n as f64 * prob).abs() < 3.0 * sigma, "{c} vs {prob}");
        }
    }

    #[test]
    fn monotone_walk_never_descends() {
        let params = ModelParams::monotone(3, 0.1).unwrap();
        let law = params.step_law();
        for stream in 0..50 {
            let mut w = WalkState::new(Site::origin(3), 5, stream);
            let mut last = 0;
            for _ in 0..2_000 {
                w.advance(&law);
                assert!(w.position.time() >= last);
                last = w.position.time();
            }
        }
    }

    #[test]
    fn fixed_seed_gives_identical_paths() {
        let params = ModelParams::new(2, 0.3, Variant::NaturalLazy).unwrap();
        let mut a = WalkState::new(Site::origin(2), 42, 7);
        let mut b = WalkState::new(Site::origin(2), 42, 7);
        for _ in 0..1_000 {
            a = step(&a, &params);
            b = step(&b, &params);
            assert_eq!(a.position, b.position);
        }
        let c = WalkState::new(Site::origin(2), 42, 8);
        let mut c = c;
        let law = params.step_law();
        let mut differs = false;
        let mut a2 = WalkState::new(Site::origin(2), 42, 7);
        for _ in 0..100 {
            c.advance(&law);
            a2.advance(&law);
            differs |= c.position != a2.position;
        }
        assert!(differs);
    }

    #[test]
    fn layer_kernel_matches_series() {
        let params = ModelParams::monotone(2, 0.2).unwrap();
        let k = LayerKernel::new(&params).unwrap();
        assert!((k.at_origin() - killed_walk_series(0.8)).abs() < 1e-12);
        let mass: f64 = k.values.iter().sum();
        assert!((mass * params.p - 1.0).abs() < 1e-14);
    }

    #[test]
    fn green_dp_at_origin_closed_form() {
        let params = ModelParams::monotone(2, 0.2).unwrap();
        let g = green_dp(&s(&[0, 0]), &params, 64).unwrap();
        let closed = 1.0 / (1.0f64 - 0.64).sqrt();
        assert!((g - closed).abs() < 1e-9, "{g}");
        assert!((g - killed_walk_series(0.8)).abs() < 1e-9);
        assert!((g - 5.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn green_dp_layers_are_entered_once() {
        let params = ModelParams::monotone(2, 0.35).unwrap();
        let mut prop = LayerPropagator::new(&params, 200).unwrap();
        for _ in 0..60 {
            let entry: f64 = prop.entry_distribution().iter().sum();
            assert!((entry - 1.0).abs() < 1e-12);
            let g = prop.next_layer();
            let layer_visits: f64 = g.iter().sum();
            assert!((layer_visits * params.p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn green_dp_three_dimensions_layer_accounting() {
        let params = ModelParams::monotone(3, 0.3).unwrap();
        let table = GreenTable::build(&params, 40, 10).unwrap();
        for t in 0..=10 {
            let total: f64 = table.layer(t).iter().sum();
            assert!((total * params.p - 1.0).abs() < 1e-11, "layer {t}: {total}");
        }
        let g0 = table.get(&s(&[0, 0, 0])).unwrap();
        let g1 = table.get(&s(&[1, 0, 0])).unwrap();
        let g1b = table.get(&s(&[0, -1, 0])).unwrap();
        assert!(g0 > g1);
        assert!((g1 - g1b).abs() < 1e-15);
    }

    #[test]
    fn green_dp_reports_truncation() {
        let params = ModelParams::monotone(2, 0.2).unwrap();
        assert!(matches!(
            green_dp(&s(&[0, 400]), &params, 10),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn green_mc_origin_matches_closed_form() {
        let params = ModelParams::monotone(2, 0.2).unwrap().with_seed(3);
        let est = green_mc(&s(&[0, 0]), &params, 200_000).unwrap();
        assert!((est.value - 5.0 / 3.0).abs() < 3.0 * est.std_error, "{est:?}");
        assert!(!est.horizon_warning);
    }

    #[test]
    fn green_mc_below_layer_zero_is_zero() {
        let params = ModelParams::monotone(2, 0.2).unwrap();
        let est = green_mc(&s(&[0, -1]), &params, 10).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn green_mc_agrees_with_dp_on_sample_grid() {
        let params = ModelParams::monotone(2, 0.2).unwrap().with_seed(2024);
        let table = GreenTable::build(&params, 80, 4).unwrap();
        for x in -2..=2 {
            for t in 0..=4 {
                let z = s(&[x, t]);
                let est = green_mc(&z, &params, 40_000).unwrap();
                let exact = table.get(&z).unwrap();
                assert!(
                    (est.value - exact).abs() <= 3.0 * est.std_error + 1e-12,
                    "{z}: mc {} +- {} vs dp {exact}",
                    est.value,
                    est.std_error
                );
            }
        }
    }

    #[test]
    fn green_mc_layer_sum_times_p_is_one() {
        let params = ModelParams::monotone(2, 0.25).unwrap().with_seed(9);
        let n = 20_000;
        let mut total = 0.0;
        let mut var = 0.0;
        for x in -25..=25 {
            let est = green_mc(&s(&[x, 1]), &params, n).unwrap();
            total += est.value;
            var += est.std_error * est.std_error;
        }
        // the per-site estimates share walks, so the error bar is conservative
        // only up to correlations; allow a generous band.
        assert!((total * params.p - 1.0).abs() < 6.0 * var.sqrt() * params.p + 1e-3, "{total}");
    }

    #[test]
    fn green_mc_is_thread_count_independent() {
        let params = ModelParams::new(2, 0.3, Variant::NaturalLazy).unwrap().with_seed(77);
        let z = s(&[1, 2]);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| green_mc(&z, &params, 5_000).unwrap());
        let b = four.install(|| green_mc(&z, &params, 5_000).unwrap());
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
    }

    #[test]
    fn lazy_horizon_warning() {
        let params = ModelParams::new(2, 0.2, Variant::NaturalLazy).unwrap();
        let est = green_mc(&s(&[0, 0]), &params, 100).unwrap();
        assert!(est.tail_bound > 0.0);
        let opts = GreenMcOptions {
            horizon_factor: 200.0,
            precision: 1e-3,
        };
        let far = green_mc_with(&s(&[0, 0]), &params, 100, &opts).unwrap();
        assert!(far.tail_bound < est.tail_bound);
        assert!(!far.horizon_warning, "{}", far.tail_bound);
    }

    #[test]
    fn continuum_green_values() {
        let params = ModelParams::monotone(2, 0.2).unwrap();
        let v = continuum_green(&[0.0], 1.0, &params).unwrap();
        assert!((v - 0.997356).abs() < 5e-7, "{v}");
        assert!(continuum_green(&[0.0], 0.0, &params).is_err());
        let a = continuum_green(&[0.3, -0.7], 0.4, &ModelParams::monotone(3, 0.3).unwrap()).unwrap();
        let b = continuum_green(&[-0.7, 0.3], 0.4, &ModelParams::monotone(3, 0.3).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = continuum_green(&[-0.3], 0.4, &params).unwrap();
        let d = continuum_green(&[0.3], 0.4, &params).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn continuum_green_integrates_to_one_over_p() {
        let params = ModelParams::monotone(2, 0.2).unwrap();
        for t in [0.05, 0.5, 3.0] {
            // trapezoid on [-L, L], L = 12 standard deviations
            let sd = (t / (2.0 * params.beta())).sqrt();
            let l = 12.0 * sd;
            let n = 4000;
            let h = 2.0 * l / n as f64;
            let mut total = 0.0;
            for i in 0..=n {
                let x = -l + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                total += w * continuum_green(&[x], t, &params).unwrap();
            }
            total *= h;
            assert!((total - 1.0 / params.p).abs() < 1e-9, "t={t}: {total}");
        }
    }

    #[test]
    fn box_solver_matches_layer_program() {
        let params = ModelParams::monotone(2, 0.2).unwrap();
        let bx = LatticeBox::new(Site::from_slice(&[-60, -1]), Site::from_slice(&[60, 6])).unwrap();
        let g = green_on_box(&params, &bx, 1e-15, 100_000).unwrap();
        for z in [[0i64, 0], [1, 0], [-2, 3], [0, 6]] {
            let z = Site::from_slice(&z);
            let dp = green_dp(&z, &params, 200).unwrap();
            assert!((g.get(&z) - dp).abs() < 1e-9, "{z}: {} vs {dp}", g.get(&z));
        }
    }

    #[test]
    fn box_solver_lazy_matches_monte_carlo() {
        let params = ModelParams::new(2, 0.4, Variant::NaturalLazy).unwrap();
        let bx = LatticeBox::new(Site::from_slice(&[-40, -25]), Site::from_slice(&[40, 30])).unwrap();
        let g = green_on_box(&params, &bx, 1e-13, 200_000).unwrap();
        let z = Site::from_slice(&[1, 2]);
        let est = green_mc(&z, &params, 200_000).unwrap();
        assert!((g.get(&z) - est.value).abs() <= 4.0 * est.std_error + 1e-3, "{} vs {est:?}", g.get(&z));
    }
}
