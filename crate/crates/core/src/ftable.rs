//! Tabulated optimal probit noise variance for a unit-scale Gumbel margin.
//!
//! `F(μ) = argmax_v ∫ G(ξ; μ, 1) ln Q(ξ/√v) dξ`, with `G` the minimum-type
//! Gumbel density of [`GumbelParams`](crate::gaussian::GumbelParams). For a
//! Gumbel with location `α` and scale `β` the optimum is `β²·F(α/β)`.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::log_q;
use crate::quadrature::{integrate, QuadSettings};

pub const FTABLE_FORMAT_VERSION: u32 = 2;

/// Numerical settings recorded alongside a table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FTableSettings {
    /// Window in the standardized Gumbel variable `t = ξ - μ` holding the
    /// integrand peak and its `e^-60` neighbourhood.
    pub t_lo: f64,
    pub t_hi: f64,
    pub quad: QuadSettings,
    /// Points of the coarse log-spaced search over the bracket.
    pub coarse_points: usize,
    /// Golden-section stopping width in `ln v`.
    pub golden_tol: f64,
    /// Grid intervals are bisected while the interpolated value at their
    /// midpoint misses the optimum by more than this in `ln v`.
    pub refine_tol: f64,
    /// Bisection depth limit per initial grid interval.
    pub refine_depth: u32,
}

impl Default for FTableSettings {
    fn default() -> Self {
        Self {
            t_lo: -80.0,
            t_hi: 30.0,
            quad: QuadSettings {
                abs_tol: 1e-300,
                rel_tol: 1e-10,
                max_depth: 30,
            },
            coarse_points: 121,
            golden_tol: 1e-7,
            refine_tol: 0.02,
            refine_depth: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FTable {
    pub version: u32,
    pub bracket: (f64, f64),
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Grid points whose optimum sat on a bracket edge.
    pub pinned: Vec<bool>,
    pub settings: FTableSettings,
}

/// `ln(-ln Q(x))`, finite for every `x`.
fn ln_neg_log_q(x: f64) -> f64 {
    if x >= 0.0 {
        return (-log_q(x)).ln();
    }
    // -ln Q(x) = -ln(1 - Q(-x)) with Q(-x) the small tail
    let tail = log_q(-x);
    if tail < -700.0 {
        tail
    } else {
        (-(-tail.exp()).ln_1p()).ln()
    }
}

/// `ln(-J)` for `J = ∫ G(ξ; mu_std, 1) ln Q(ξ/√v) dξ`. The integrand is
/// handled in the log domain around its peak, so `J` keeps full relative
/// accuracy far below the smallest normal double.
pub fn log_neg_objective(mu_std: f64, v: f64, settings: &FTableSettings) -> f64 {
    let inv_sd = 1.0 / v.sqrt();
    let l = |t: f64| t - t.exp() + ln_neg_log_q((t + mu_std) * inv_sd);
    // l is concave: a sum of the Gumbel log-density and ln(-ln Q) of an
    // affine map. The peak only fixes the split point and the scaling, so
    // locating it well inside its width (at least ~1e-3 here) suffices.
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (settings.t_lo, settings.t_hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (l(c), l(d));
    while b - a > 1e-7 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = l(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = l(d);
        }
    }
    let peak = 0.5 * (a + b);
    let top = l(peak);
    let reach = |dir: f64| {
        let mut w = 1e-4;
        while l(peak + dir * w) > top - 60.0 && w < settings.t_hi - settings.t_lo {
            w *= 2.0;
        }
        (peak + dir * w).clamp(settings.t_lo, settings.t_hi)
    };
    let f = |t: f64| (l(t) - top).exp();
    let mass = integrate(f, reach(-1.0), peak, &settings.quad)
        + integrate(f, peak, reach(1.0), &settings.quad);
    top + mass.ln()
}

/// `∫ G(ξ; mu_std, 1) ln Q(ξ/√v) dξ`; underflows to `-0.0` where
/// [`log_neg_objective`] does not.
pub fn gumbel_probit_objective(mu_std: f64, v: f64, settings: &FTableSettings) -> f64 {
    -log_neg_objective(mu_std, v, settings).exp()
}

/// Maximizer of [`gumbel_probit_objective`] (minimizer of [`log_neg_objective`]) over `v` in `bracket`, and
/// whether it is pinned to an edge.
pub fn maximize_objective(
    mu_std: f64,
    bracket: (f64, f64),
    settings: &FTableSettings,
) -> (f64, bool) {
    let (lo, hi) = (bracket.0.ln(), bracket.1.ln());
    let n = settings.coarse_points.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let f = |lv: f64| -log_neg_objective(mu_std, lv.exp(), settings);

    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for k in 0..n {
        let val = f(lo + step * k as f64);
        if val > best_val {
            best_val = val;
            best = k;
        }
    }
    if best == 0 {
        return (bracket.0, true);
    }
    if best == n - 1 {
        return (bracket.1, true);
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = lo + step * (best - 1) as f64;
    let mut b = lo + step * (best + 1) as f64;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > settings.golden_tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (((a + b) / 2.0).exp(), false)
}

/// Appends, in order, the bisection points needed strictly between `left` and `right`.
fn refine(
    solve: &dyn Fn(f64) -> (f64, bool),
    left: (f64, (f64, bool)),
    right: (f64, (f64, bool)),
    settings: &FTableSettings,
    depth: u32,
    out: &mut Vec<(f64, (f64, bool))>,
) {
    let (l, r) = (left.1, right.1);
    if depth == 0 || (l.1 && r.1 && l.0 == r.0) {
        return;
    }
    let mu = 0.5 * (left.0 + right.0);
    let mid = (mu, solve(mu));
    if ((0.5 * (l.0 + r.0)).ln() - mid.1 .0.ln()).abs() <= settings.refine_tol {
        return;
    }
    refine(solve, left, mid, settings, depth - 1, out);
    out.push(mid);
    refine(solve, mid, right, settings, depth - 1, out);
}

impl FTable {
    /// Standardized locations `[-12, 4]` at 161 points, `v ∈ [1e-6, 1e3]`.
    pub fn default_grid() -> Vec<f64> {
        (0..161).map(|k| -12.0 + 0.1 * k as f64).collect()
    }

    pub const DEFAULT_BRACKET: (f64, f64) = (1e-6, 1e3);

    pub fn build(bracket: (f64, f64), grid: Vec<f64>) -> Result<Self> {
        Self::build_with(bracket, grid, FTableSettings::default())
    }

    pub fn build_with(
        bracket: (f64, f64),
        grid: Vec<f64>,
        settings: FTableSettings,
    ) -> Result<Self> {
        if !(bracket.0 > 0.0 && bracket.0 < bracket.1) {
            return Err(Error::Config(format!("bad F-table bracket {bracket:?}")));
        }
        if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(
                "F-table grid must be strictly increasing".into(),
            ));
        }
        let solve = |mu: f64| maximize_objective(mu, bracket, &settings);
        let mut points: Vec<(f64, (f64, bool))> = vec![(grid[0], solve(grid[0]))];
        for w in grid.windows(2) {
            let right = (w[1], solve(w[1]));
            refine(
                &solve,
                *points.last().expect("seeded"),
                right,
                &settings,
                settings.refine_depth,
                &mut points,
            );
            points.push(right);
        }
        let grid: Vec<f64> = points.iter().map(|p| p.0).collect();
        let (values, pinned): (Vec<f64>, Vec<bool>) = points.into_iter().map(|p| p.1).unzip();
        for (mu, _) in grid.iter().zip(&pinned).filter(|(_, p)| **p) {
            log::debug!("F-table optimum pinned to bracket edge at mu = {mu}");
        }
        Ok(Self {
            version: FTABLE_FORMAT_VERSION,
            bracket,
            grid,
            values,
            pinned,
            settings,
        })
    }

    /// Process-wide table on the default grid, built on first use.
    pub fn shared() -> &'static FTable {
        static TABLE: OnceLock<FTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            FTable::build(Self::DEFAULT_BRACKET, Self::default_grid())
                .expect("default F-table settings are valid")
        })
    }

    /// Piecewise-linear interpolation, clamped at the grid ends.
    pub fn lookup(&self, mu_std: f64) -> f64 {
        let g = &self.grid;
        let last = g.len() - 1;
        if !(mu_std > g[0]) {
            return self.values[0];
        }
        if mu_std >= g[last] {
            return self.values[last];
        }
        let k = g.partition_point(|&x| x <= mu_std) - 1;
        let w = (mu_std - g[k]) / (g[k + 1] - g[k]);
        self.values[k] + w * (self.values[k + 1] - self.values[k])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let table: FTable = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if table.version != FTABLE_FORMAT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported F-table version {}", table.version),
            });
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_table() -> FTable {
        let settings = FTableSettings {
            refine_depth: 0,
            ..FTableSettings::default()
        };
        FTable::build_with(
            FTable::DEFAULT_BRACKET,
            vec![-6.0, -4.0, -3.0, -1.0],
            settings,
        )
        .unwrap()
    }

    #[test]
    fn refinement_keeps_the_seed_grid_and_bisects_near_the_pinning_edge() {
        let t = FTable::build(FTable::DEFAULT_BRACKET, vec![0.0, 0.4, 0.8]).unwrap();
        assert!(t.grid.len() > 3);
        assert!(t.grid.windows(2).all(|w| w[0] < w[1]));
        for seed in [0.0, 0.4, 0.8] {
            assert!(t.grid.contains(&seed));
        }
        for mu in [0.45, 0.5, 0.52] {
            let (v, _) = maximize_objective(mu, t.bracket, &t.settings);
            assert!((t.lookup(mu).ln() - v.ln()).abs() < 0.1, "mu = {mu}");
        }
    }

    #[test]
    fn lookup_hits_grid_points_and_clamps() {
        let t = small_table();
        for (mu, v) in t.grid.iter().zip(&t.values) {
            assert_eq!(t.lookup(*mu), *v);
        }
        assert_eq!(t.lookup(-100.0), t.values[0]);
        assert_eq!(t.lookup(100.0), *t.values.last().unwrap());
        let mid = t.lookup(-3.5);
        assert!((mid - 0.5 * (t.values[1] + t.values[2])).abs() < 1e-12);
    }

    #[test]
    fn argmax_definition_holds() {
        let t = small_table();
        let s = FTableSettings::default();
        for k in 0..t.grid.len() - 1 {
            if t.pinned[k] || t.pinned[k + 1] {
                continue;
            }
            let own = gumbel_probit_objective(t.grid[k], t.values[k], &s);
            let other = gumbel_probit_objective(t.grid[k], t.values[k + 1], &s);
            assert!(other <= own + 1e-12);
        }
    }

    #[test]
    fn positive_location_pins_to_upper_edge() {
        let (v, pinned) =
            maximize_objective(4.0, FTable::DEFAULT_BRACKET, &FTableSettings::default());
        assert!(pinned);
        assert_eq!(v, FTable::DEFAULT_BRACKET.1);
    }

    #[test]
    fn sidecar_round_trip() {
        let t = small_table();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ftable.json");
        t.save(&p).unwrap();
        assert_eq!(FTable::load(&p).unwrap(), t);
    }
}
