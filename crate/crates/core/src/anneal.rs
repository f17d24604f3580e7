//! Precision annealing: continuation in the model precision `r_f`.
//!
//! Every initialization is its own lineage. At each step the lineage is
//! warm-started from its previous minimizer, minimized at the current
//! precision, and the resulting action levels are recorded. `r_f` is then
//! multiplied by `alpha`.

use std::io::Write;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::netaction::{Action, Architecture, PairLibrary, PathState, Precisions, Weights};
use crate::optim::{minimize, LbfgsConfig, MinimizeReport};

/// Consecutive non-finite minimizations after which a lineage is dropped.
const MAX_NONFINITE: usize = 3;

/// Optional stop once one level clearly dominates and has stopped moving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Largest relative change of the lowest level over the last decade of `r_f`.
    pub rel_change: f64,
    /// The lowest level must sit below this fraction of the median level.
    pub median_fraction: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            rel_change: 1e-3,
            median_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    /// Starting `r_f / r_m`.
    pub rf0_over_rm: f64,
    pub alpha: f64,
    pub n_steps: usize,
    pub n_inits: usize,
    pub seed: u64,
    /// Initial weights are uniform in `[-w0, w0]`.
    pub w0: f64,
    pub r_m: f64,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            rf0_over_rm: 1e-8,
            alpha: 1.1,
            n_steps: steps_to_reach(1e-8, 1e11, 1.1),
            n_inits: 20,
            seed: 0,
            w0: 0.1,
            r_m: 1.0,
            early_stop: None,
        }
    }
}

/// Number of steps for `rf0 * alpha^(n-1)` to reach `rf_max`.
pub fn steps_to_reach(rf0: f64, rf_max: f64, alpha: f64) -> usize {
    if rf_max <= rf0 {
        return 1;
    }
    // the small slack absorbs rounding when rf_max is an exact power of alpha
    let n = ((rf_max / rf0).ln() / alpha.ln() - 1e-9).ceil();
    n as usize + 1
}

impl AnnealSchedule {
    /// Schedule from `rf0` to `rf_max`, both relative to `r_m`.
    pub fn spanning(rf0: f64, rf_max: f64, alpha: f64, n_inits: usize, seed: u64) -> Result<Self> {
        let s = Self {
            rf0_over_rm: rf0,
            alpha,
            n_steps: steps_to_reach(rf0, rf_max, alpha),
            n_inits,
            seed,
            ..Self::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return Err(invalid("alpha must exceed 1"));
        }
        if self.n_inits == 0 {
            return Err(invalid("need at least one initialization"));
        }
        if self.n_steps == 0 {
            return Err(invalid("need at least one step"));
        }
        if !(self.rf0_over_rm >= 0.0) || !(self.r_m > 0.0) || !(self.w0 >= 0.0) {
            return Err(invalid("precisions and w0 must be nonnegative, r_m positive"));
        }
        Ok(())
    }

    /// `r_f / r_m` at `step`.
    pub fn ratio_at(&self, step: usize) -> f64 {
        self.rf0_over_rm * self.alpha.powi(step as i32)
    }

    pub fn final_ratio(&self) -> f64 {
        self.ratio_at(self.n_steps - 1)
    }

    pub fn precisions_at(&self, step: usize) -> Precisions {
        Precisions {
            r_m: self.r_m,
            r_f: self.r_m * self.ratio_at(step),
        }
    }

    /// Same span with `alpha` replaced by its square root.
    pub fn refined(&self) -> Self {
        Self {
            alpha: self.alpha.sqrt(),
            n_steps: 2 * (self.n_steps - 1) + 1,
            ..*self
        }
    }
}

/// Independent starting paths, one RNG stream per initialization so path `i`
/// does not depend on how many are drawn.
pub fn init_paths(
    lib: &PairLibrary,
    arch: &Architecture,
    n_inits: usize,
    seed: u64,
    w0: f64,
) -> Result<Vec<PathState>> {
    (0..n_inits)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            PathState::random(lib, arch, w0, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Minimized {
    pub path: PathState,
    pub action: f64,
    pub report: MinimizeReport,
}

impl Minimized {
    pub fn converged(&self) -> bool {
        self.report.converged()
    }
}

/// Local minimization of the action from `ps`. Non-convergence is reported
/// in `report`, not as an error; the best iterate is returned.
pub fn minimize_at_beta(
    ps: &PathState,
    lib: &PairLibrary,
    arch: &Architecture,
    prec: Precisions,
    opt: &LbfgsConfig,
) -> Result<Minimized> {
    let action = Action::new(lib, arch, prec)?;
    if ps.layout != *action.layout() {
        return Err(Error::ShapeMismatch("path state does not match the action".into()));
    }
    if !ps.is_finite() {
        return Err(invalid("start path is not finite"));
    }
    let mut x = ps.values.clone();
    let report = minimize(&action, &mut x, opt);
    Ok(Minimized {
        path: PathState {
            layout: ps.layout.clone(),
            values: x,
        },
        action: report.value,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealStep {
    pub step: usize,
    pub r_f_over_rm: f64,
    /// Action per initialization; `None` once a lineage has been dropped.
    pub actions: Vec<Option<f64>>,
    /// Finite actions sorted ascending.
    pub levels: Vec<f64>,
    pub best_init: usize,
    /// Initializations whose minimization hit an iteration or line-search limit.
    #[serde(default)]
    pub unconverged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealRecord {
    pub schedule: AnnealSchedule,
    pub optimizer: LbfgsConfig,
    pub arch: Architecture,
    pub m: usize,
    pub steps: Vec<AnnealStep>,
    pub stopped_early: bool,
    pub best_init: usize,
    pub best_action: f64,
    pub best_path: PathState,
    pub best_weights: Weights,
}

impl AnnealRecord {
    pub fn final_step(&self) -> &AnnealStep {
        self.steps.last().expect("a record holds at least one step")
    }

    /// Lowest level at every step.
    pub fn lowest_levels(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.levels[0]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per step: `step,r_f_over_rm,level_1..level_N`. Levels are
    /// sorted; dropped lineages leave trailing cells empty.
    pub fn write_levels_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.schedule.n_inits;
        write!(out, "step,r_f_over_rm")?;
        for i in 1..=n {
            write!(out, ",level_{i}")?;
        }
        writeln!(out)?;
        for s in &self.steps {
            write!(out, "{},{:e}", s.step, s.r_f_over_rm)?;
            for i in 0..n {
                match s.levels.get(i) {
                    Some(v) => write!(out, ",{v:e}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Serial,
    Parallel,
}

struct Lineage {
    path: PathState,
    action: f64,
    nonfinite: usize,
    alive: bool,
}

/// Runs the schedule with lineages spread over the rayon pool.
pub fn anneal(
    lib: &PairLibrary,
    arch: &Architecture,
    schedule: &AnnealSchedule,
    opt: &LbfgsConfig,
) -> Result<AnnealRecord> {
    anneal_with(lib, arch, schedule, opt, Execution::Parallel)
}

/// As [`anneal`]; the record is identical for both execution modes.
pub fn anneal_with(
    lib: &PairLibrary,
    arch: &Architecture,
    schedule: &AnnealSchedule,
    opt: &LbfgsConfig,
    exec: Execution,
) -> Result<AnnealRecord> {
    schedule.validate()?;
    let starts = init_paths(lib, arch, schedule.n_inits, schedule.seed, schedule.w0)?;
    let mut lineages: Vec<Lineage> = starts
        .into_iter()
        .map(|path| Lineage {
            path,
            action: f64::NAN,
            nonfinite: 0,
            alive: true,
        })
        .collect();

    let mut steps = Vec::with_capacity(schedule.n_steps);
    let mut stopped_early = false;
    for step in 0..schedule.n_steps {
        let prec = schedule.precisions_at(step);
        let advance = |(i, lin): (usize, &mut Lineage)| -> Result<Option<bool>> {
            if !lin.alive {
                return Ok(None);
            }
            let res = minimize_at_beta(&lin.path, lib, arch, prec, opt)?;
            if res.action.is_finite() && res.path.is_finite() {
                lin.path = res.path;
                lin.action = res.action;
                lin.nonfinite = 0;
            } else {
                lin.nonfinite += 1;
                lin.action = f64::NAN;
                warn!("init {i}: non-finite action at step {step}");
                if lin.nonfinite >= MAX_NONFINITE {
                    warn!("init {i} dropped");
                    lin.alive = false;
                }
            }
            Ok(Some(res.report.converged()))
        };
        let outcomes: Vec<Result<Option<bool>>> = match exec {
            Execution::Serial => lineages.iter_mut().enumerate().map(advance).collect(),
            Execution::Parallel => lineages.par_iter_mut().enumerate().map(advance).collect(),
        };
        let mut unconverged = Vec::new();
        for (i, o) in outcomes.into_iter().enumerate() {
            if o? == Some(false) {
                unconverged.push(i);
            }
        }

        let actions: Vec<Option<f64>> = lineages
            .iter()
            .map(|l| (l.alive && l.action.is_finite()).then_some(l.action))
            .collect();
        let Some(best_init) = lowest(&actions) else {
            return Err(Error::NonFiniteAction);
        };
        let mut levels: Vec<f64> = actions.iter().flatten().copied().collect();
        levels.sort_by(f64::total_cmp);
        let r_f_over_rm = schedule.ratio_at(step);
        debug!(
            "step {step}: r_f/r_m = {r_f_over_rm:.3e}, lowest {:.6e}, {} unconverged",
            levels[0],
            unconverged.len()
        );
        steps.push(AnnealStep {
            step,
            r_f_over_rm,
            actions,
            levels,
            best_init,
            unconverged,
        });

        if let Some(es) = schedule.early_stop {
            if should_stop(&steps, &es) {
                info!("early stop at step {step}");
                stopped_early = true;
                break;
            }
        }
    }

    let last = steps.last().expect("at least one step runs");
    let best_init = last.best_init;
    let best = &lineages[best_init];
    info!(
        "annealing done: {} steps, best init {best_init}, action {:.6e}",
        steps.len(),
        best.action
    );
    Ok(AnnealRecord {
        schedule: *schedule,
        optimizer: *opt,
        arch: arch.clone(),
        m: lib.m(),
        best_action: best.action,
        best_weights: best.path.weights(),
        best_path: best.path.clone(),
        best_init,
        stopped_early,
        steps,
    })
}

// Index of the smallest action, lowest index on ties.
fn lowest(actions: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in actions.iter().enumerate() {
        if let Some(v) = *a {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn should_stop(steps: &[AnnealStep], es: &EarlyStop) -> bool {
    let cur = steps.last().expect("nonempty");
    let target = cur.r_f_over_rm / 10.0;
    let Some(past) = steps.iter().rev().find(|s| s.r_f_over_rm <= target) else {
        return false;
    };
    let (now, then) = (cur.levels[0], past.levels[0]);
    let median = median(&cur.levels);
    (now - then).abs() <= es.rel_change * then.abs() && now < es.median_fraction * median
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub weights: Weights,
    pub best_init: usize,
    pub best_action: f64,
    pub second_action: Option<f64>,
    /// Action gap to the runner-up; `exp(-gap)` is its relative weight.
    pub gap: Option<f64>,
}

/// The dominant path at the final step. Ties go to the lowest init index.
pub fn select_best(rec: &AnnealRecord) -> Result<Selection> {
    let last = rec.steps.last().ok_or_else(|| invalid("empty record"))?;
    let best_init = lowest(&last.actions).ok_or(Error::NonFiniteAction)?;
    if best_init != rec.best_init {
        return Err(invalid("record best path does not match its final step"));
    }
    let best_action = last.actions[best_init].expect("lowest is finite");
    let second_action = last
        .actions
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best_init)
        .filter_map(|(_, a)| *a)
        .min_by(f64::total_cmp);
    Ok(Selection {
        weights: rec.best_weights.clone(),
        best_init,
        best_action,
        second_action,
        gap: second_action.map(|s| s - best_action),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCheck {
    pub alpha: f64,
    pub refined_alpha: f64,
    pub lowest: f64,
    pub refined_lowest: f64,
    /// `|refined_lowest - lowest| / |lowest|`.
    pub discrepancy: f64,
}

/// Reruns the schedule with `sqrt(alpha)` over the same span and compares the
/// final lowest level.
pub fn alpha_check(
    lib: &PairLibrary,
    arch: &Architecture,
    schedule: &AnnealSchedule,
    opt: &LbfgsConfig,
) -> Result<(AnnealRecord, AnnealRecord, AlphaCheck)> {
    let coarse = anneal(lib, arch, schedule, opt)?;
    let fine_schedule = schedule.refined();
    let fine = anneal(lib, arch, &fine_schedule, opt)?;
    let lowest = coarse.final_step().levels[0];
    let refined_lowest = fine.final_step().levels[0];
    let check = AlphaCheck {
        alpha: schedule.alpha,
        refined_alpha: fine_schedule.alpha,
        lowest,
        refined_lowest,
        discrepancy: (refined_lowest - lowest).abs() / lowest.abs(),
    };
    Ok((coarse, fine, check))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingSpec;

    fn toy_library(m: usize) -> PairLibrary {
        let values: Vec<f64> = (0..m + 8).map(|n| (0.7 * n as f64).sin() * 0.9).collect();
        PairLibrary::from_series(&values, EmbeddingSpec::new(2, 3).unwrap(), m, None).unwrap()
    }

    fn quick_opt() -> LbfgsConfig {
        LbfgsConfig {
            max_iters: 300,
            ..LbfgsConfig::default()
        }
    }

    #[test]
    fn step_count_reaches_target() {
        assert_eq!(steps_to_reach(1e-8, 1e11, 1.1), 461);
        assert_eq!(steps_to_reach(1.0, 8.0, 2.0), 4);
        assert_eq!(steps_to_reach(1.0, 1.0, 2.0), 1);
        let s = AnnealSchedule::spanning(1e-8, 1e6, 1.3, 5, 0).unwrap();
        assert!(s.final_ratio() >= 1e6 * (1.0 - 1e-12));
        assert!(s.ratio_at(s.n_steps - 2) < 1e6);
    }

    #[test]
    fn refined_schedule_spans_the_same_range() {
        let s = AnnealSchedule::spanning(1e-4, 1e2, 1.21, 3, 0).unwrap();
        let r = s.refined();
        assert!((r.alpha - 1.1).abs() < 1e-15);
        assert!((r.final_ratio() / s.final_ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let base = AnnealSchedule::default();
        for s in [
            AnnealSchedule { alpha: 1.0, ..base },
            AnnealSchedule { n_inits: 0, ..base },
            AnnealSchedule { n_steps: 0, ..base },
            AnnealSchedule { r_m: 0.0, ..base },
        ] {
            assert!(s.validate().is_err());
        }
    }

    #[test]
    fn init_paths_are_reproducible_bounded_and_distinct() {
        let lib = toy_library(6);
        let arch = Architecture::mlp(3, 4, 5).unwrap();
        let a = init_paths(&lib, &arch, 20, 9, 0.1).unwrap();
        let b = init_paths(&lib, &arch, 20, 9, 0.1).unwrap();
        assert_eq!(a, b);
        let n_act = a[0].layout.n_activations();
        for p in &a {
            assert!(p.values[..n_act].iter().all(|v| v.abs() <= 1.0));
            assert!(p.values[n_act..].iter().all(|v| v.abs() <= 0.1));
            for k in 0..lib.m() {
                assert_eq!(p.layer(k, 0), lib.input(k));
                assert_eq!(p.layer(k, 3), lib.output(k));
            }
        }
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i].values, a[j].values);
            }
        }
        // stream per init: a prefix does not depend on the total count
        let c = init_paths(&lib, &arch, 3, 9, 0.1).unwrap();
        assert_eq!(&a[..3], &c[..]);
    }

    #[test]
    fn zero_model_precision_is_a_quadratic_solve() {
        let lib = toy_library(5);
        let arch = Architecture::mlp(3, 3, 4).unwrap();
        let start = &init_paths(&lib, &arch, 1, 1, 0.1).unwrap()[0];
        let res = minimize_at_beta(start, &lib, &arch, Precisions::new(1.0, 0.0).unwrap(), &quick_opt())
            .unwrap();
        assert!(res.converged());
        assert!(res.action < 1e-20);
        for k in 0..lib.m() {
            for (a, b) in res.path.layer(k, 0).iter().zip(lib.input(k)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn minimization_never_increases_the_action() {
        let lib = toy_library(6);
        let arch = Architecture::mlp(3, 4, 4).unwrap();
        let prec = Precisions::new(1.0, 50.0).unwrap();
        for start in init_paths(&lib, &arch, 4, 3, 0.5).unwrap() {
            let a0 = Action::new(&lib, &arch, prec).unwrap().value(&start.values);
            let res = minimize_at_beta(&start, &lib, &arch, prec, &quick_opt()).unwrap();
            assert!(res.action <= a0 + 1e-12);
        }
    }

    #[test]
    fn raising_model_precision_never_lowers_the_action_of_a_fixed_path() {
        let lib = toy_library(6);
        let arch = Architecture::mlp(3, 4, 4).unwrap();
        let s = AnnealSchedule::spanning(1e-3, 1e3, 2.0, 3, 4).unwrap();
        let rec = anneal_with(&lib, &arch, &s, &quick_opt(), Execution::Serial).unwrap();
        let path = &rec.best_path;
        let mut prev = f64::NEG_INFINITY;
        for step in 0..s.n_steps + 3 {
            let a = Action::new(&lib, &arch, s.precisions_at(step)).unwrap().value(&path.values);
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn record_shape_and_sorting() {
        let lib = toy_library(6);
        let arch = Architecture::mlp(3, 3, 4).unwrap();
        let s = AnnealSchedule::spanning(1e-2, 1e2, 3.0, 4, 11).unwrap();
        let rec = anneal(&lib, &arch, &s, &quick_opt()).unwrap();
        assert_eq!(rec.steps.len(), s.n_steps);
        for st in &rec.steps {
            assert_eq!(st.levels.len(), 4);
            assert!(st.levels.windows(2).all(|w| w[0] <= w[1]));
            assert!(st.levels.iter().all(|v| v.is_finite()));
            assert_eq!(st.actions[st.best_init], Some(st.levels[0]));
        }
        assert_eq!(rec.best_action, rec.final_step().levels[0]);
        let sel = select_best(&rec).unwrap();
        assert_eq!(sel.best_init, rec.best_init);
        let gap = sel.gap.unwrap();
        assert_eq!(gap, rec.final_step().levels[1] - rec.final_step().levels[0]);
    }

    #[test]
    fn single_step_is_one_quadratic_solve_per_init() {
        let lib = toy_library(4);
        let arch = Architecture::mlp(3, 3, 4).unwrap();
        let s = AnnealSchedule {
            rf0_over_rm: 0.0,
            n_steps: 1,
            n_inits: 3,
            ..AnnealSchedule::default()
        };
        let rec = anneal(&lib, &arch, &s, &quick_opt()).unwrap();
        assert_eq!(rec.steps.len(), 1);
        assert!(rec.steps[0].levels.iter().all(|&v| v < 1e-20));
    }

    #[test]
    fn single_init_is_selected() {
        let lib = toy_library(4);
        let arch = Architecture::mlp(3, 3, 2).unwrap();
        let s = AnnealSchedule::spanning(1e-2, 1.0, 10.0, 1, 0).unwrap();
        let rec = anneal(&lib, &arch, &s, &quick_opt()).unwrap();
        let sel = select_best(&rec).unwrap();
        assert_eq!(sel.best_init, 0);
        assert_eq!(sel.gap, None);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(lowest(&[Some(2.0), Some(1.0), Some(1.0)]), Some(1));
        assert_eq!(lowest(&[None, Some(3.0), None]), Some(1));
        assert_eq!(lowest(&[None, None]), None);
    }

    #[test]
    fn early_stop_needs_a_full_decade_and_a_dominant_level() {
        let mk = |r: f64, levels: Vec<f64>| AnnealStep {
            step: 0,
            r_f_over_rm: r,
            actions: levels.iter().map(|&v| Some(v)).collect(),
            levels,
            best_init: 0,
            unconverged: vec![],
        };
        let es = EarlyStop::default();
        let flat = vec![mk(1.0, vec![1.0, 20.0, 30.0]), mk(10.0, vec![1.0005, 20.0, 30.0])];
        assert!(should_stop(&flat, &es));
        let short = vec![mk(1.0, vec![1.0, 20.0, 30.0]), mk(9.0, vec![1.0, 20.0, 30.0])];
        assert!(!should_stop(&short, &es));
        let moving = vec![mk(1.0, vec![1.0, 20.0, 30.0]), mk(10.0, vec![1.01, 20.0, 30.0])];
        assert!(!should_stop(&moving, &es));
        let crowded = vec![mk(1.0, vec![1.0, 2.0, 3.0]), mk(10.0, vec![1.0, 2.0, 3.0])];
        assert!(!should_stop(&crowded, &es));
    }

    #[test]
    fn levels_csv_layout() {
        let lib = toy_library(4);
        let arch = Architecture::mlp(3, 3, 2).unwrap();
        let s = AnnealSchedule::spanning(1e-2, 1.0, 10.0, 2, 0).unwrap();
        let rec = anneal(&lib, &arch, &s, &quick_opt()).unwrap();
        let mut buf = Vec::new();
        rec.write_levels_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,r_f_over_rm,level_1,level_2");
        assert_eq!(lines.len(), 1 + s.n_steps);
        assert!(lines[1].starts_with("0,1e-2,"));
    }
}
