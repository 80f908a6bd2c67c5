//! Lattice geometry on Z^d, sparse real-valued fields and the discrete heat
//! operator of the drifted walk.
//!
//! The last coordinate of a [`Site`] is the drift ("time") axis; the first
//! `d - 1` coordinates are lateral.

use std::fmt;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Integer lattice point. Coordinates are stored inline for `d <= 4`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "Vec<i64>", into = "Vec<i64>")]
pub struct Site(pub SmallVec<[i64; 4]>);

impl Site {
    pub fn origin(d: usize) -> Self {
        Site(SmallVec::from_elem(0, d))
    }

    pub fn from_slice(coords: &[i64]) -> Self {
        Site(SmallVec::from_slice(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Drift coordinate.
    pub fn time(&self) -> i64 {
        self.0[self.0.len() - 1]
    }

    pub fn lateral(&self) -> &[i64] {
        &self.0[..self.0.len() - 1]
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn offset(&self, axis: usize, delta: i64) -> Site {
        let mut s = self.clone();
        s.0[axis] += delta;
        s
    }

    pub fn is_origin(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    /// Graph (l1) distance.
    pub fn l1_distance(&self, other: &Site) -> i64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

impl From<Vec<i64>> for Site {
    fn from(v: Vec<i64>) -> Self {
        Site(SmallVec::from_vec(v))
    }
}

impl From<Site> for Vec<i64> {
    fn from(z: Site) -> Self {
        z.0.into_vec()
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Step law of the drifted walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Lateral simple steps with probability `1 - p`, a forced step along
    /// `+e_d` with probability `p`. The drift coordinate never decreases.
    Monotone,
    /// Simple random walk on all of Z^d with probability `1 - p`, plus a step
    /// along `+e_d` with probability `p`.
    NaturalLazy,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Monotone => write!(f, "monotone"),
            Variant::NaturalLazy => write!(f, "natural-lazy"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: usize,
    pub p: f64,
    pub variant: Variant,
    /// Mass multiplier: the sandpile starts with `k * n` at the origin.
    pub k: f64,
    pub seed: u64,
}

impl ModelParams {
    pub fn new(d: usize, p: f64, variant: Variant) -> Result<Self> {
        let params = ModelParams {
            d,
            p,
            variant,
            k: 1.0,
            seed: 0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn monotone(d: usize, p: f64) -> Result<Self> {
        Self::new(d, p, Variant::Monotone)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_k(mut self, k: f64) -> Result<Self> {
        self.k = k;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidParams(format!("d = {} must be >= 2", self.d)));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParams(format!("p = {} must lie in (0, 1)", self.p)));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidParams(format!("k = {} must be positive", self.k)));
        }
        Ok(())
    }

    /// Number of lateral axes, `d - 1`.
    pub fn lateral_dims(&self) -> usize {
        self.d - 1
    }

    /// Diffusion scale of the limiting heat kernel.
    pub fn beta(&self) -> f64 {
        let p = self.p;
        match self.variant {
            Variant::Monotone => p * (self.d - 1) as f64 / (2.0 * (1.0 - p)),
            Variant::NaturalLazy => self.d as f64 * p / (2.0 * (1.0 - p)),
        }
    }

    /// Weight of a single lateral unit step; also the coefficient of the
    /// Laplacian in the continuum heat operator.
    pub fn lateral_weight(&self) -> f64 {
        match self.variant {
            Variant::Monotone => (1.0 - self.p) / (2.0 * (self.d - 1) as f64),
            Variant::NaturalLazy => (1.0 - self.p) / (2.0 * self.d as f64),
        }
    }

    /// Coefficient `c` such that `t - c |x|^2` has heat operator -1.
    pub fn quadratic_coefficient(&self) -> f64 {
        match self.variant {
            Variant::Monotone => 1.0,
            Variant::NaturalLazy => self.d as f64 / (self.d - 1) as f64,
        }
    }

    pub fn step_law(&self) -> StepLaw {
        StepLaw::new(self)
    }
}

/// One possible increment of the walk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Move {
    pub axis: usize,
    pub delta: i64,
    pub weight: f64,
}

/// The step distribution as a list of distinct moves, with cumulative
/// weights for sampling.
#[derive(Debug, Clone)]
pub struct StepLaw {
    pub moves: Vec<Move>,
    cumulative: Vec<f64>,
}

impl StepLaw {
    pub fn new(params: &ModelParams) -> Self {
        let d = params.d;
        let p = params.p;
        let time = d - 1;
        let mut moves = Vec::with_capacity(2 * d);
        match params.variant {
            Variant::Monotone => {
                let w = params.lateral_weight();
                for axis in 0..time {
                    moves.push(Move { axis, delta: 1, weight: w });
                    moves.push(Move { axis, delta: -1, weight: w });
                }
                moves.push(Move { axis: time, delta: 1, weight: p });
            }
            Variant::NaturalLazy => {
                let w = params.lateral_weight();
                for axis in 0..time {
                    moves.push(Move { axis, delta: 1, weight: w });
                    moves.push(Move { axis, delta: -1, weight: w });
                }
                moves.push(Move { axis: time, delta: 1, weight: w + p });
                moves.push(Move { axis: time, delta: -1, weight: w });
            }
        }
        let mut acc = 0.0;
        let cumulative = moves
            .iter()
            .map(|m| {
                acc += m.weight;
                acc
            })
            .collect();
        StepLaw { moves, cumulative }
    }

    /// Maps a uniform variate in `[0, 1)` to a move.
    #[inline]
    pub fn sample(&self, u: f64) -> &Move {
        let last = self.moves.len() - 1;
        let idx = self.cumulative[..last]
            .iter()
            .position(|&c| u < c)
            .unwrap_or(last);
        &self.moves[idx]
    }
}

/// Neighbours reachable in one step together with their transition weights.
pub fn neighbors(z: &Site, params: &ModelParams) -> Vec<(Site, f64)> {
    params
        .step_law()
        .moves
        .iter()
        .map(|m| (z.offset(m.axis, m.delta), m.weight))
        .collect()
}

/// Sparse site -> real map, zero outside the stored support.
#[derive(Debug, Clone, PartialEq)]
pub struct MassField {
    d: usize,
    entries: FxHashMap<Site, f64>,
}

impl MassField {
    pub fn new(d: usize) -> Self {
        MassField {
            d,
            entries: FxHashMap::default(),
        }
    }

    /// Point mass at the origin.
    pub fn point(d: usize, mass: f64) -> Self {
        let mut f = Self::new(d);
        f.set(Site::origin(d), mass);
        f
    }

    pub fn from_entries(d: usize, entries: impl IntoIterator<Item = (Site, f64)>) -> Self {
        let mut f = Self::new(d);
        for (s, v) in entries {
            f.add(s, v);
        }
        f
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, z: &Site) -> f64 {
        self.entries.get(z).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, z: Site, value: f64) {
        debug_assert_eq!(z.dim(), self.d);
        self.entries.insert(z, value);
    }

    #[inline]
    pub fn add(&mut self, z: Site, value: f64) {
        *self.entries.entry(z).or_insert(0.0) += value;
    }

    pub fn entry_mut(&mut self, z: Site) -> &mut f64 {
        self.entries.entry(z).or_insert(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, f64)> {
        self.entries.iter().map(|(s, &v)| (s, v))
    }

    pub fn sites(&self) -> impl Iterator<Item = &Site> {
        self.entries.keys()
    }

    /// Entries sorted lexicographically by coordinates.
    pub fn sorted_entries(&self) -> Vec<(Site, f64)> {
        let mut v: Vec<_> = self.entries.iter().map(|(s, &x)| (s.clone(), x)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn total(&self) -> f64 {
        compensated_sum(self.entries.values().copied())
    }

    pub fn max_value(&self) -> f64 {
        self.entries
            .values()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Drops entries whose absolute value is at most `eps`.
    pub fn prune(&mut self, eps: f64) {
        self.entries.retain(|_, v| v.abs() > eps);
    }

    /// Componentwise bounding box of the stored support.
    pub fn bounds(&self) -> Option<LatticeBox> {
        bounds_of(self.d, self.entries.keys())
    }

    pub fn scaled(&self, factor: f64) -> MassField {
        MassField {
            d: self.d,
            entries: self.entries.iter().map(|(s, v)| (s.clone(), v * factor)).collect(),
        }
    }

    /// `self + factor * other`.
    pub fn axpy(&self, factor: f64, other: &MassField) -> MassField {
        let mut out = self.clone();
        for (s, v) in other.iter() {
            out.add(s.clone(), factor * v);
        }
        out
    }
}

/// Finite set of lattice sites.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSet {
    d: usize,
    sites: FxHashSet<Site>,
}

impl ClusterSet {
    pub fn new(d: usize) -> Self {
        ClusterSet {
            d,
            sites: FxHashSet::default(),
        }
    }

    pub fn from_sites(d: usize, sites: impl IntoIterator<Item = Site>) -> Self {
        ClusterSet {
            d,
            sites: sites.into_iter().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn insert(&mut self, z: Site) -> bool {
        self.sites.insert(z)
    }

    #[inline]
    pub fn contains(&self, z: &Site) -> bool {
        self.sites.contains(z)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Site> {
        self.sites.iter()
    }

    pub fn sorted(&self) -> Vec<Site> {
        let mut v: Vec<_> = self.sites.iter().cloned().collect();
        v.sort();
        v
    }

    pub fn is_subset(&self, other: &ClusterSet) -> bool {
        self.sites.is_subset(&other.sites)
    }

    pub fn symmetric_difference_count(&self, other: &ClusterSet) -> usize {
        self.sites.symmetric_difference(&other.sites).count()
    }

    pub fn bounds(&self) -> Option<LatticeBox> {
        bounds_of(self.d, self.sites.iter())
    }
}

/// Inclusive axis-aligned box of lattice sites.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeBox {
    pub lo: Site,
    pub hi: Site,
}

impl LatticeBox {
    pub fn new(lo: Site, hi: Site) -> Result<Self> {
        if lo.dim() != hi.dim() || lo.0.iter().zip(hi.0.iter()).any(|(a, b)| a > b) {
            return Err(Error::InvalidParams(format!("empty box {lo} .. {hi}")));
        }
        Ok(LatticeBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.dim()
    }

    pub fn extent(&self, axis: usize) -> usize {
        (self.hi.0[axis] - self.lo.0[axis] + 1) as usize
    }

    pub fn len(&self) -> usize {
        (0..self.dim()).map(|a| self.extent(a)).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, z: &Site) -> bool {
        z.0.iter()
            .zip(self.lo.0.iter().zip(self.hi.0.iter()))
            .all(|(c, (l, h))| c >= l && c <= h)
    }

    pub fn on_boundary(&self, z: &Site) -> bool {
        z.0.iter()
            .zip(self.lo.0.iter().zip(self.hi.0.iter()))
            .any(|(c, (l, h))| c == l || c == h)
    }

    /// Grows the box by `margin` in every direction.
    pub fn expanded(&self, margin: i64) -> LatticeBox {
        LatticeBox {
            lo: Site(self.lo.0.iter().map(|c| c - margin).collect()),
            hi: Site(self.hi.0.iter().map(|c| c + margin).collect()),
        }
    }

    /// Linear index with the drift axis slowest and axis 0 fastest.
    pub fn index(&self, z: &Site) -> Option<usize> {
        if !self.contains(z) {
            return None;
        }
        let mut idx = 0usize;
        for axis in (0..self.dim()).rev() {
            idx = idx * self.extent(axis) + (z.0[axis] - self.lo.0[axis]) as usize;
        }
        Some(idx)
    }

    pub fn site(&self, mut idx: usize) -> Site {
        let mut coords = SmallVec::from_elem(0, self.dim());
        for axis in 0..self.dim() {
            let e = self.extent(axis);
            coords[axis] = self.lo.0[axis] + (idx % e) as i64;
            idx /= e;
        }
        Site(coords)
    }

    /// All sites, drift coordinate slowest (lexicographic from the drift axis
    /// down to axis 0).
    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.len()).map(move |i| self.site(i))
    }
}

fn bounds_of<'a>(d: usize, sites: impl Iterator<Item = &'a Site>) -> Option<LatticeBox> {
    let mut lo: Option<Site> = None;
    let mut hi: Option<Site> = None;
    for s in sites {
        match (&mut lo, &mut hi) {
            (Some(l), Some(h)) => {
                for a in 0..d {
                    l.0[a] = l.0[a].min(s.0[a]);
                    h.0[a] = h.0[a].max(s.0[a]);
                }
            }
            _ => {
                lo = Some(s.clone());
                hi = Some(s.clone());
            }
        }
    }
    Some(LatticeBox { lo: lo?, hi: hi? })
}

/// Discrete heat operator: mass received at `z` when every site `y` emits
/// `f(y)` along the step law, minus `f(z)`.
pub fn heat_op(f: &MassField, z: &Site, params: &ModelParams) -> f64 {
    heat_op_with(&params.step_law(), f, z)
}

/// Time-reversed operator, the adjoint of [`heat_op`]: the walk generator
/// `E[f(z + step)] - f(z)`.
pub fn heat_op_reversed(f: &MassField, z: &Site, params: &ModelParams) -> f64 {
    heat_op_reversed_with(&params.step_law(), f, z)
}

pub(crate) fn heat_op_with(law: &StepLaw, f: &MassField, z: &Site) -> f64 {
    let mut acc = 0.0;
    for m in &law.moves {
        acc += m.weight * (f.get(&z.offset(m.axis, -m.delta)) - f.get(z));
    }
    acc
}

pub(crate) fn heat_op_reversed_with(law: &StepLaw, f: &MassField, z: &Site) -> f64 {
    let mut acc = 0.0;
    for m in &law.moves {
        acc += m.weight * (f.get(&z.offset(m.axis, m.delta)) - f.get(z));
    }
    acc
}

/// Applies [`heat_op`] on the support of `f` and its neighbours.
pub fn heat_op_field(f: &MassField, params: &ModelParams) -> MassField {
    let law = params.step_law();
    let mut sites = FxHashSet::default();
    for z in f.sites() {
        sites.insert(z.clone());
        for m in &law.moves {
            sites.insert(z.offset(m.axis, m.delta));
        }
    }
    let mut out = MassField::new(f.dim());
    for z in sites {
        let v = heat_op_with(&law, f, &z);
        out.set(z, v);
    }
    out
}

/// `sum_z f(z) (z_1^2 + ... + z_{d-1}^2 + z_d)`. Each toppling of a monotone
/// sandpile raises it by exactly the emitted mass.
pub fn weight_functional(f: &MassField) -> f64 {
    weighted_sum(f, 1.0)
}

/// Variant-aware weight: the lateral quadratic carries
/// [`ModelParams::quadratic_coefficient`], which restores the "one unit per
/// unit of emitted mass" property for the natural lazy walk.
pub fn weight_functional_for(f: &MassField, params: &ModelParams) -> f64 {
    weighted_sum(f, params.quadratic_coefficient())
}

fn weighted_sum(f: &MassField, c: f64) -> f64 {
    compensated_sum(f.iter().map(|(z, v)| {
        let lateral: f64 = z.lateral().iter().map(|&x| (x * x) as f64).sum();
        v * (c * lateral + z.time() as f64)
    }))
}

/// Neumaier-compensated summation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
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
