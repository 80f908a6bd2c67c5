//! Unfair divisible sandpile: toppling, stabilization, the odometer, and an
//! independent route to the odometer through the least discrete
//! supercaloric majorant of an obstacle.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{
    heat_op_with, ClusterSet, LatticeBox, MassField, ModelParams, Site, StepLaw, Variant,
};
use crate::walks::walk_rng;

/// Default threshold on final mass for membership in the sandpile cluster.
pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 1e-9;

/// Order in which full sites are toppled. All legal orders reach the same
/// limit (abelian property); they differ only in speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepOrder {
    /// Work queue of full sites, first in first out.
    FifoQueue,
    /// Repeated lexicographic sweeps over the lowest layer that still holds a
    /// full site.
    LayerSweep,
    /// Each sweep topples the current full sites in a seeded random order.
    RandomPermutation,
    /// All full sites topple simultaneously from a snapshot of the masses
    /// (double buffered, evaluated in parallel).
    Synchronous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToppleConfig {
    /// Stabilization stops once every site holds at most `1 + excess_tolerance`.
    pub excess_tolerance: f64,
    pub sweep_order: SweepOrder,
    pub max_sweeps: usize,
    /// Seed for [`SweepOrder::RandomPermutation`].
    pub seed: u64,
}

impl Default for ToppleConfig {
    fn default() -> Self {
        ToppleConfig {
            excess_tolerance: 1e-10,
            sweep_order: SweepOrder::FifoQueue,
            max_sweeps: 10_000_000,
            seed: 0,
        }
    }
}

impl ToppleConfig {
    pub fn with_order(mut self, order: SweepOrder) -> Self {
        self.sweep_order = order;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.excess_tolerance = tol;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SandpileResult {
    pub initial: MassField,
    pub final_mass: MassField,
    pub odometer: MassField,
    pub sweeps: usize,
    pub topplings: u64,
    pub max_residual_excess: f64,
}

impl SandpileResult {
    /// Largest `|nu - nu_0 - K u|` over the support and its neighbours.
    pub fn mass_relation_residual(&self, params: &ModelParams) -> f64 {
        let law = params.step_law();
        let mut sites = FxHashSet::default();
        for f in [&self.initial, &self.final_mass, &self.odometer] {
            for z in f.sites() {
                sites.insert(z.clone());
                for m in &law.moves {
                    sites.insert(z.offset(m.axis, m.delta));
                }
            }
        }
        sites
            .iter()
            .map(|z| {
                (self.final_mass.get(z) - self.initial.get(z) - heat_op_with(&law, &self.odometer, z)).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Topples the full site `z`: it keeps mass 1 and sends the excess to its
/// neighbours along the step law. Returns the emitted excess.
pub fn topple(mass: &mut MassField, odometer: &mut MassField, z: &Site, params: &ModelParams) -> Result<f64> {
    let m = mass.get(z);
    if !(m > 1.0) {
        return Err(Error::NotFull { site: z.clone(), mass: m });
    }
    Ok(topple_unchecked(&params.step_law(), mass, odometer, z))
}

#[inline]
fn topple_unchecked(law: &StepLaw, mass: &mut MassField, odometer: &mut MassField, z: &Site) -> f64 {
    let slot = mass.entry_mut(z.clone());
    let excess = *slot - 1.0;
    *slot = 1.0;
    for m in &law.moves {
        mass.add(z.offset(m.axis, m.delta), excess * m.weight);
    }
    odometer.add(z.clone(), excess);
    excess
}

struct Engine<'a> {
    law: StepLaw,
    tol: f64,
    mass: MassField,
    odometer: MassField,
    topplings: u64,
    cfg: &'a ToppleConfig,
}

impl Engine<'_> {
    #[inline]
    fn excess(&self, z: &Site) -> f64 {
        self.mass.get(z) - 1.0
    }

    #[inline]
    fn is_full(&self, z: &Site) -> bool {
        self.excess(z) > self.tol
    }

    fn topple(&mut self, z: &Site) {
        topple_unchecked(&self.law, &mut self.mass, &mut self.odometer, z);
        self.topplings += 1;
    }

    fn full_sites(&self) -> Vec<Site> {
        let mut v: Vec<Site> = self.mass.sites().filter(|z| self.is_full(z)).cloned().collect();
        v.sort();
        v
    }

    fn non_convergence(&self, sweeps: usize) -> Error {
        let residual = self.mass.iter().map(|(_, v)| v - 1.0).fold(0.0, f64::max);
        Error::NonConvergence {
            what: "sandpile stabilization",
            iterations: sweeps,
            residual,
        }
    }

    fn run_fifo(&mut self) -> Result<usize> {
        let mut queue: VecDeque<Site> = self.full_sites().into();
        let mut queued: FxHashSet<Site> = queue.iter().cloned().collect();
        let mut sweeps = 0;
        while !queue.is_empty() {
            if sweeps >= self.cfg.max_sweeps {
                return Err(self.non_convergence(sweeps));
            }
            sweeps += 1;
            for _ in 0..queue.len() {
                let z = queue.pop_front().expect("generation length");
                queued.remove(&z);
                if !self.is_full(&z) {
                    continue;
                }
                self.topple(&z);
                for m in self.law.moves.clone() {
                    let y = z.offset(m.axis, m.delta);
                    if self.is_full(&y) && !queued.contains(&y) {
                        queued.insert(y.clone());
                        queue.push_back(y);
                    }
                }
            }
        }
        Ok(sweeps)
    }

    fn run_layer_sweep(&mut self) -> Result<usize> {
        let mut active: BTreeMap<i64, FxHashSet<Site>> = BTreeMap::new();
        for z in self.full_sites() {
            active.entry(z.time()).or_default().insert(z);
        }
        let mut sweeps = 0;
        while let Some((&layer, _)) = active.iter().next() {
            if sweeps >= self.cfg.max_sweeps {
                return Err(self.non_convergence(sweeps));
            }
            sweeps += 1;
            let mut sites: Vec<Site> = active.remove(&layer).unwrap_or_default().into_iter().collect();
            sites.sort();
            for z in sites {
                if !self.is_full(&z) {
                    continue;
                }
                self.topple(&z);
                for m in self.law.moves.clone() {
                    let y = z.offset(m.axis, m.delta);
                    if self.is_full(&y) {
                        active.entry(y.time()).or_default().insert(y);
                    }
                }
            }
        }
        Ok(sweeps)
    }

    fn run_random(&mut self) -> Result<usize> {
        let mut rng = walk_rng(self.cfg.seed, u64::MAX);
        let mut active: FxHashSet<Site> = self.full_sites().into_iter().collect();
        let mut sweeps = 0;
        while !active.is_empty() {
            if sweeps >= self.cfg.max_sweeps {
                return Err(self.non_convergence(sweeps));
            }
            sweeps += 1;
            let mut order: Vec<Site> = std::mem::take(&mut active).into_iter().collect();
            order.sort();
            order.shuffle(&mut rng);
            for z in order {
                if !self.is_full(&z) {
                    continue;
                }
                self.topple(&z);
                for m in self.law.moves.clone() {
                    let y = z.offset(m.axis, m.delta);
                    if self.is_full(&y) {
                        active.insert(y);
                    }
                }
            }
            active.retain(|z| self.mass.get(z) - 1.0 > self.tol);
        }
        Ok(sweeps)
    }

    fn run_synchronous(&mut self) -> Result<usize> {
        let mut sweeps = 0;
        loop {
            let full = self.full_sites();
            if full.is_empty() {
                return Ok(sweeps);
            }
            if sweeps >= self.cfg.max_sweeps {
                return Err(self.non_convergence(sweeps));
            }
            sweeps += 1;
            let full_set: FxHashSet<&Site> = full.iter().collect();
            let mut candidates: Vec<Site> = full
                .iter()
                .flat_map(|z| {
                    std::iter::once(z.clone())
                        .chain(self.law.moves.iter().map(move |m| z.offset(m.axis, m.delta)))
                })
                .collect::<FxHashSet<_>>()
                .into_iter()
                .collect();
            candidates.sort();
            let law = &self.law;
            let mass = &self.mass;
            let tol = self.tol;
            let updates: Vec<(f64, f64)> = candidates
                .par_iter()
                .map(|c| {
                    let own = mass.get(c);
                    let (kept, emitted) = if full_set.contains(c) { (1.0, own - 1.0) } else { (own, 0.0) };
                    let mut received = 0.0;
                    for m in &law.moves {
                        let src = c.offset(m.axis, -m.delta);
                        let sm = mass.get(&src);
                        if sm - 1.0 > tol && full_set.contains(&src) {
                            received += (sm - 1.0) * m.weight;
                        }
                    }
                    (kept + received, emitted)
                })
                .collect();
            for (c, (new_mass, emitted)) in candidates.into_iter().zip(updates) {
                if emitted > 0.0 {
                    self.odometer.add(c.clone(), emitted);
                    self.topplings += 1;
                }
                self.mass.set(c, new_mass);
            }
        }
    }
}

/// Topples full sites in the configured order until no site holds more than
/// `1 + excess_tolerance`.
pub fn stabilize(initial: &MassField, params: &ModelParams, cfg: &ToppleConfig) -> Result<SandpileResult> {
    params.validate()?;
    if !(cfg.excess_tolerance > 0.0) {
        return Err(Error::InvalidParams("excess tolerance must be positive".into()));
    }
    if initial.iter().any(|(_, v)| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParams("initial masses must be finite and nonnegative".into()));
    }
    let mut engine = Engine {
        law: params.step_law(),
        tol: cfg.excess_tolerance,
        mass: initial.clone(),
        odometer: MassField::new(params.d),
        topplings: 0,
        cfg,
    };
    let sweeps = match cfg.sweep_order {
        SweepOrder::FifoQueue => engine.run_fifo()?,
        SweepOrder::LayerSweep => engine.run_layer_sweep()?,
        SweepOrder::RandomPermutation => engine.run_random()?,
        SweepOrder::Synchronous => engine.run_synchronous()?,
    };
    let max_residual_excess = engine.mass.iter().map(|(_, v)| v - 1.0).fold(0.0, f64::max);
    Ok(SandpileResult {
        initial: initial.clone(),
        final_mass: engine.mass,
        odometer: engine.odometer,
        sweeps,
        topplings: engine.topplings,
        max_residual_excess,
    })
}

/// Sites whose final mass exceeds `threshold`.
pub fn extract_cluster(result: &SandpileResult, threshold: f64) -> ClusterSet {
    ClusterSet::from_sites(
        result.final_mass.dim(),
        result
            .final_mass
            .iter()
            .filter(|(_, v)| *v > threshold)
            .map(|(z, _)| z.clone()),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct MajorantConfig {
    /// Sweeps stop when the sup-norm update drops below `tolerance_factor * n`.
    pub tolerance_factor: f64,
    pub max_sweeps: usize,
}

impl Default for MajorantConfig {
    fn default() -> Self {
        MajorantConfig {
            tolerance_factor: 1e-10,
            max_sweeps: 1_000_000,
        }
    }
}

/// Discrete obstacle `gamma_n(z) = z_d - c |z_lat|^2 - n g(0, z)`, with
/// `c` the variant's quadratic coefficient.
pub fn discrete_obstacle(z: &Site, n: f64, params: &ModelParams, green: &dyn Fn(&Site) -> f64) -> f64 {
    let lateral: f64 = z.lateral().iter().map(|&x| (x * x) as f64).sum();
    z.time() as f64 - params.quadratic_coefficient() * lateral - n * green(z)
}

/// Odometer of the sandpile started from mass `n` at the origin, computed
/// without toppling: `s - gamma_n`, where `s` is the least discrete
/// supercaloric majorant of the obstacle `gamma_n` on `bx` (with `s = gamma_n`
/// outside). `green` must supply `g(0, .)` on `bx` and its neighbours.
pub fn odometer_via_majorant(
    n: f64,
    params: &ModelParams,
    bx: &LatticeBox,
    green: &dyn Fn(&Site) -> f64,
) -> Result<MassField> {
    odometer_via_majorant_with(n, params, bx, green, &MajorantConfig::default())
}

pub fn odometer_via_majorant_with(
    n: f64,
    params: &ModelParams,
    bx: &LatticeBox,
    green: &dyn Fn(&Site) -> f64,
    cfg: &MajorantConfig,
) -> Result<MassField> {
    params.validate()?;
    if bx.dim() != params.d {
        return Err(Error::InvalidParams("box dimension does not match d".into()));
    }
    let law = params.step_law();
    let len = bx.len();
    let sites: Vec<Site> = bx.sites().collect();
    let gamma: Vec<f64> = sites.iter().map(|z| discrete_obstacle(z, n, params, green)).collect();
    // Incoming neighbours: (index inside the box, or the fixed exterior value).
    let incoming: Vec<Vec<(Option<usize>, f64, f64)>> = sites
        .iter()
        .map(|z| {
            law.moves
                .iter()
                .map(|m| {
                    let src = z.offset(m.axis, -m.delta);
                    match bx.index(&src) {
                        Some(i) => (Some(i), m.weight, 0.0),
                        None => (None, m.weight, discrete_obstacle(&src, n, params, green)),
                    }
                })
                .collect()
        })
        .collect();
    let mut s = gamma.clone();
    let tol = cfg.tolerance_factor * n.abs().max(1.0);
    let mut converged = false;
    let mut last_update = f64::INFINITY;
    for _ in 0..cfg.max_sweeps {
        let mut max_update = 0.0f64;
        for i in 0..len {
            let mut caloric = 0.0;
            for &(src, w, exterior) in &incoming[i] {
                caloric += w * src.map_or(exterior, |j| s[j]);
            }
            let new = caloric.max(gamma[i]);
            max_update = max_update.max((new - s[i]).abs());
            s[i] = new;
        }
        last_update = max_update;
        if max_update < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "discrete majorant sweeps",
            iterations: cfg.max_sweeps,
            residual: last_update,
        });
    }
    let boundary_tol = 1e3 * tol;
    let skip_bottom = params.variant == Variant::Monotone && bx.lo.time() <= 0;
    let d = params.d;
    let mut odometer = MassField::new(d);
    for (i, z) in sites.iter().enumerate() {
        let u = s[i] - gamma[i];
        if u <= 0.0 {
            continue;
        }
        let touches = (0..d).any(|a| {
            let on_lo = z.0[a] == bx.lo.0[a] && !(skip_bottom && a == d - 1);
            let on_hi = z.0[a] == bx.hi.0[a];
            on_lo || on_hi
        });
        if touches && u > boundary_tol {
            return Err(Error::BoxTooSmall { site: z.clone() });
        }
        odometer.set(z.clone(), u);
    }
    Ok(odometer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::weight_functional;
    use crate::walks::GreenTable;
    use proptest::prelude::*;

    fn s(c: &[i64]) -> Site {
        Site::from_slice(c)
    }

    fn p02() -> ModelParams {
        ModelParams::monotone(2, 0.2).unwrap()
    }

    const ORDERS: [SweepOrder; 4] = [
        SweepOrder::FifoQueue,
        SweepOrder::LayerSweep,
        SweepOrder::RandomPermutation,
        SweepOrder::Synchronous,
    ];

    #[test]
    fn single_topple() {
        let params = p02();
        let mut mass = MassField::point(2, 2.0);
        let mut odo = MassField::new(2);
        let before_w = weight_functional(&mass);
        let e = topple(&mut mass, &mut odo, &s(&[0, 0]), &params).unwrap();
        assert_eq!(e, 1.0);
        assert_eq!(mass.get(&s(&[0, 0])), 1.0);
        assert!((mass.get(&s(&[1, 0])) - 0.4).abs() < 1e-15);
        assert!((mass.get(&s(&[-1, 0])) - 0.4).abs() < 1e-15);
        assert!((mass.get(&s(&[0, 1])) - 0.2).abs() < 1e-15);
        assert_eq!(odo.get(&s(&[0, 0])), 1.0);
        assert_eq!(mass.total(), 2.0);
        assert!((weight_functional(&mass) - before_w - e).abs() < 1e-15);
    }

    #[test]
    fn topple_requires_full_site() {
        let params = p02();
        let mut mass = MassField::point(2, 1.0);
        let mut odo = MassField::new(2);
        assert!(matches!(
            topple(&mut mass, &mut odo, &s(&[0, 0]), &params),
            Err(Error::NotFull { .. })
        ));
    }

    #[test]
    fn stable_input_is_untouched() {
        let r = stabilize(&MassField::point(2, 1.0), &p02(), &ToppleConfig::default()).unwrap();
        assert_eq!(r.final_mass.get(&s(&[0, 0])), 1.0);
        assert!(r.odometer.is_empty());
        assert_eq!(r.topplings, 0);
    }

    #[test]
    fn two_mass_example_all_orders() {
        for order in ORDERS {
            let cfg = ToppleConfig::default().with_order(order);
            let r = stabilize(&MassField::point(2, 2.0), &p02(), &cfg).unwrap();
            assert_eq!(r.odometer.len(), 1, "{order:?}");
            assert_eq!(r.odometer.get(&s(&[0, 0])), 1.0);
            let cluster = extract_cluster(&r, DEFAULT_CLUSTER_THRESHOLD);
            let mut got = cluster.sorted();
            got.sort();
            let mut want = vec![s(&[0, 0]), s(&[1, 0]), s(&[-1, 0]), s(&[0, 1])];
            want.sort();
            assert_eq!(got, want);
            assert!(extract_cluster(&r, 1.0).len() <= 1);
        }
    }

    #[test]
    fn invariants_moderate_mass() {
        let params = p02();
        let n = 300.0;
        let cfg = ToppleConfig::default().with_tolerance(1e-12);
        let r = stabilize(&MassField::point(2, n), &params, &cfg).unwrap();
        assert!(r.final_mass.max_value() <= 1.0 + 1e-12);
        assert!(r.odometer.iter().all(|(_, v)| v >= 0.0));
        assert!((r.final_mass.total() - n).abs() <= 1e-9 * n);
        assert!(r.mass_relation_residual(&params) < 1e-9);
        let dw = weight_functional(&r.final_mass) - weight_functional(&r.initial);
        assert!((dw - r.odometer.total()).abs() <= 1e-9 * r.odometer.total());
        let radius = n.ceil() as i64;
        assert!(r.odometer.sites().all(|z| z.l1_distance(&Site::origin(2)) <= radius));
        assert!(r.final_mass.sites().all(|z| z.time() >= 0));
        assert!(extract_cluster(&r, DEFAULT_CLUSTER_THRESHOLD).iter().all(|z| z.time() >= 0));
    }

    #[test]
    fn natural_lazy_invariants() {
        let params = ModelParams::new(2, 0.3, Variant::NaturalLazy).unwrap();
        let n = 150.0;
        let cfg = ToppleConfig::default().with_tolerance(1e-12);
        let r = stabilize(&MassField::point(2, n), &params, &cfg).unwrap();
        assert!(r.final_mass.max_value() <= 1.0 + 1e-12);
        assert!(r.mass_relation_residual(&params) < 1e-9);
        let dw = crate::lattice::weight_functional_for(&r.final_mass, &params)
            - crate::lattice::weight_functional_for(&r.initial, &params);
        assert!((dw - r.odometer.total()).abs() <= 1e-9 * r.odometer.total());
        // lazy walks can step back below the source layer
        assert!(r.final_mass.sites().any(|z| z.time() < 0));
    }

    #[test]
    fn abelian_orders_agree() {
        let params = ModelParams::monotone(3, 0.4).unwrap();
        let tol = 1e-12;
        let initial = MassField::from_entries(3, [(s(&[0, 0, 0]), 40.0), (s(&[2, -1, 1]), 7.5)]);
        let reference = stabilize(&initial, &params, &ToppleConfig::default().with_tolerance(tol)).unwrap();
        for order in ORDERS {
            let cfg = ToppleConfig::default().with_tolerance(tol).with_order(order);
            let r = stabilize(&initial, &params, &cfg).unwrap();
            assert_fields_close(&reference.final_mass, &r.final_mass, 10.0 * tol);
            assert_fields_close(&reference.odometer, &r.odometer, 10.0 * tol);
        }
    }

    fn assert_fields_close(a: &MassField, b: &MassField, tol: f64) {
        for (z, _) in a.iter().chain(b.iter()) {
            let diff = (a.get(z) - b.get(z)).abs();
            assert!(diff <= tol, "{z}: {} vs {} (diff {diff:e})", a.get(z), b.get(z));
        }
    }

    #[test]
    fn synchronous_is_thread_count_independent() {
        let params = p02();
        let cfg = ToppleConfig::default().with_order(SweepOrder::Synchronous);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| stabilize(&MassField::point(2, 80.0), &params, &cfg).unwrap());
        let b = three.install(|| stabilize(&MassField::point(2, 80.0), &params, &cfg).unwrap());
        assert_eq!(a.final_mass.sorted_entries(), b.final_mass.sorted_entries());
        assert_eq!(a.odometer.sorted_entries(), b.odometer.sorted_entries());
    }

    #[test]
    fn non_convergence_is_reported() {
        let cfg = ToppleConfig {
            max_sweeps: 2,
            ..ToppleConfig::default()
        };
        assert!(matches!(
            stabilize(&MassField::point(2, 500.0), &p02(), &cfg),
            Err(Error::NonConvergence { .. })
        ));
    }

    fn green_table(params: &ModelParams, radius: usize, layers: i64) -> GreenTable {
        GreenTable::build(params, radius, layers).unwrap()
    }

    #[test]
    fn majorant_trivial_below_one() {
        let params = p02();
        let table = green_table(&params, 150, 12);
        let bx = LatticeBox::new(s(&[-6, 0]), s(&[6, 10])).unwrap();
        let g = |z: &Site| table.get(z).unwrap_or(0.0);
        let u = odometer_via_majorant(1.0, &params, &bx, &g).unwrap();
        assert!(u.iter().all(|(_, v)| v < 1e-8), "{:?}", u.sorted_entries());
    }

    #[test]
    fn majorant_matches_toppling() {
        let params = p02();
        let n = 150.0;
        let r = stabilize(&MassField::point(2, n), &params, &ToppleConfig::default().with_tolerance(1e-13)).unwrap();
        let bounds = r.final_mass.bounds().unwrap();
        let bx = LatticeBox::new(
            s(&[bounds.lo.0[0] - 4, 0]),
            s(&[bounds.hi.0[0] + 4, bounds.hi.time() + 4]),
        )
        .unwrap();
        let table = green_table(&params, 200, bx.hi.time() + 1);
        let g = |z: &Site| table.get(z).unwrap_or(0.0);
        let u = odometer_via_majorant(n, &params, &bx, &g).unwrap();
        let mut worst = 0.0f64;
        for (z, v) in r.odometer.iter() {
            if v > 1.0 {
                worst = worst.max((u.get(z) - v).abs() / v);
            }
        }
        assert!(worst < 1e-6, "{worst}");
        // 0 <= s - gamma <= n g
        for z in bx.sites() {
            let val = u.get(&z);
            assert!(val >= 0.0);
            assert!(val <= n * g(&z) + 1e-7, "{z}: {val} > {}", n * g(&z));
        }
    }

    #[test]
    fn majorant_detects_small_box() {
        let params = p02();
        let table = green_table(&params, 200, 30);
        let bx = LatticeBox::new(s(&[-2, 0]), s(&[2, 3])).unwrap();
        let g = |z: &Site| table.get(z).unwrap_or(0.0);
        assert!(matches!(
            odometer_via_majorant(100.0, &params, &bx, &g),
            Err(Error::BoxTooSmall { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn abelian_random_configurations(
            masses in prop::collection::vec(((-3i64..=3), (0i64..=3), 0.0f64..12.0), 1..6),
            p in 0.1f64..0.9,
            seed in 0u64..1000,
        ) {
            let params = ModelParams::monotone(2, p).unwrap();
            let initial = MassField::from_entries(2, masses.into_iter().map(|(x, t, m)| (s(&[x, t]), m)));
            let tol = 1e-12;
            let base = stabilize(&initial, &params, &ToppleConfig::default().with_tolerance(tol)).unwrap();
            for order in ORDERS {
                let cfg = ToppleConfig { seed, ..ToppleConfig::default().with_tolerance(tol).with_order(order) };
                let r = stabilize(&initial, &params, &cfg).unwrap();
                for (z, _) in base.final_mass.iter().chain(r.final_mass.iter()) {
                    prop_assert!((base.final_mass.get(z) - r.final_mass.get(z)).abs() <= 10.0 * tol);
                    prop_assert!((base.odometer.get(z) - r.odometer.get(z)).abs() <= 10.0 * tol);
                }
                prop_assert!(r.final_mass.max_value() <= 1.0 + tol);
                prop_assert!((r.final_mass.total() - initial.total()).abs() <= 1e-9 * initial.total().max(1.0));
            }
        }
    }
}
