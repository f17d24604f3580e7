//! Sweeps over training-set size and architecture, written out as CSV.
//!
//! Each sweep cell is one `(M, D_h, l_F)` annealing run with its own seed.
//! Finished cells are stored as JSON under `<out>/cells/`, so an interrupted
//! sweep picks up where it stopped and produces the same CSV bytes.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anneal::{anneal, AnnealRecord, AnnealSchedule};
use crate::embed::EmbeddingSpec;
use crate::error::{invalid, Error, Result};
use crate::evaluate::{evaluate, ErrorReport};
use crate::netaction::{Architecture, PairLibrary};
use crate::optim::LbfgsConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ActionLevels,
    MaxAction,
    MseWidth,
    MseDepth,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::ActionLevels => "action-levels",
            Experiment::MaxAction => "max-action",
            Experiment::MseWidth => "mse-width",
            Experiment::MseDepth => "mse-depth",
        }
    }

    fn needs_errors(self) -> bool {
        matches!(self, Experiment::MseWidth | Experiment::MseDepth)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "action-levels" => Ok(Experiment::ActionLevels),
            "max-action" => Ok(Experiment::MaxAction),
            "mse-width" => Ok(Experiment::MseWidth),
            "mse-depth" => Ok(Experiment::MseDepth),
            _ => Err(invalid(format!("unknown experiment '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `r_f/r_m` up to 1e6, `alpha` 1.3, five initializations, M up to 400.
    Ci,
    /// `r_f/r_m` up to 1e11, `alpha` 1.1, twenty initializations.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ci" => Ok(Profile::Ci),
            "paper" => Ok(Profile::Paper),
            _ => Err(invalid(format!("unknown profile '{s}'"))),
        }
    }
}

impl Profile {
    pub fn schedule(self, seed: u64) -> AnnealSchedule {
        let (rf_max, alpha, n_inits) = match self {
            Profile::Ci => (1e6, 1.3, 5),
            Profile::Paper => (1e11, 1.1, 20),
        };
        AnnealSchedule::spanning(1e-8, rf_max, alpha, n_inits, seed)
            .expect("profile schedules are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub m_values: Vec<usize>,
    pub dh_values: Vec<usize>,
    pub lf_values: Vec<usize>,
    /// Base schedule; its seed is replaced per cell.
    pub schedule: AnnealSchedule,
    pub optimizer: LbfgsConfig,
    pub seed: u64,
    pub spec: EmbeddingSpec,
    /// Cap on training plus holdout pairs; `None` uses the whole series.
    pub m_total: Option<usize>,
}

impl SweepConfig {
    /// Default grid for `exp` with delay 7 and five ports.
    pub fn for_experiment(exp: Experiment, profile: Profile, seed: u64) -> Self {
        let m_values = match (exp, profile) {
            (Experiment::ActionLevels, Profile::Paper) => vec![50, 300, 900, 1200],
            (Experiment::ActionLevels, Profile::Ci) => vec![50, 300],
            (_, Profile::Paper) => (1..=24).map(|i| 50 * i).collect(),
            (_, Profile::Ci) => vec![50, 100, 200, 300, 400],
        };
        let (dh_values, lf_values) = match exp {
            Experiment::MseWidth => (vec![15, 25, 35], vec![4]),
            Experiment::MseDepth => (vec![15], vec![4, 5, 6]),
            _ => (vec![15], vec![4]),
        };
        Self {
            m_values,
            dh_values,
            lf_values,
            schedule: profile.schedule(seed),
            optimizer: LbfgsConfig::default(),
            seed,
            spec: EmbeddingSpec { tau: 7, d_e: 5 },
            m_total: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() || self.dh_values.is_empty() || self.lf_values.is_empty() {
            return Err(invalid("sweep value lists must be non-empty"));
        }
        if self.m_values.contains(&0) {
            return Err(invalid("M must be positive"));
        }
        self.schedule.validate()
    }

    /// Cells in output order: M, then D_h, then l_F.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &m in &self.m_values {
            for &d_h in &self.dh_values {
                for &l_f in &self.lf_values {
                    out.push(CellKey { m, d_h, l_f });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub m: usize,
    pub d_h: usize,
    pub l_f: usize,
}

impl CellKey {
    fn file_name(&self) -> String {
        format!("m{}_dh{}_lf{}.json", self.m, self.d_h, self.l_f)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one cell, mixed from the base seed and the cell coordinates.
pub fn cell_seed(base: u64, key: CellKey) -> u64 {
    [key.m, key.d_h, key.l_f]
        .iter()
        .fold(splitmix64(base), |h, &v| splitmix64(h ^ v as u64))
}

/// FNV-1a over the bit patterns of the series.
pub fn series_fingerprint(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellInputs {
    key: CellKey,
    seed: u64,
    schedule: AnnealSchedule,
    optimizer: LbfgsConfig,
    spec: EmbeddingSpec,
    m_total: Option<usize>,
    series_len: usize,
    series_fingerprint: u64,
    with_errors: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    inputs: CellInputs,
    pub record: AnnealRecord,
    pub errors: Option<ErrorReport>,
}

impl CellResult {
    pub fn key(&self) -> CellKey {
        self.inputs.key
    }

    pub fn seed(&self) -> u64 {
        self.inputs.seed
    }
}

/// Mean and sample standard deviation of the final-step levels.
pub fn final_level_stats(rec: &AnnealRecord) -> (f64, f64) {
    let levels = &rec.final_step().levels;
    let n = levels.len() as f64;
    let mean = levels.iter().sum::<f64>() / n;
    if levels.len() < 2 {
        return (mean, 0.0);
    }
    let var = levels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cell_inputs(cfg: &SweepConfig, values: &[f64], key: CellKey, with_errors: bool) -> CellInputs {
    let seed = cell_seed(cfg.seed, key);
    CellInputs {
        key,
        seed,
        schedule: AnnealSchedule {
            seed,
            ..cfg.schedule
        },
        optimizer: cfg.optimizer,
        spec: cfg.spec,
        m_total: cfg.m_total,
        series_len: values.len(),
        series_fingerprint: series_fingerprint(values),
        with_errors,
    }
}

fn compute_cell(inputs: CellInputs, values: &[f64]) -> Result<CellResult> {
    let key = inputs.key;
    let lib = PairLibrary::from_series(values, inputs.spec, key.m, inputs.m_total)?;
    let arch = Architecture::mlp(inputs.spec.d_e, key.l_f, key.d_h)?;
    info!("cell M={} D_h={} l_F={}: annealing", key.m, key.d_h, key.l_f);
    let record = anneal(&lib, &arch, &inputs.schedule, &inputs.optimizer)?;
    let errors = if inputs.with_errors {
        Some(evaluate(&record.best_weights, &lib, None)?)
    } else {
        None
    };
    Ok(CellResult {
        inputs,
        record,
        errors,
    })
}

/// Runs one cell without touching the filesystem.
pub fn run_cell(cfg: &SweepConfig, values: &[f64], key: CellKey, with_errors: bool) -> Result<CellResult> {
    compute_cell(cell_inputs(cfg, values, key, with_errors), values)
}

fn load_cell(path: &Path, inputs: &CellInputs) -> Option<CellResult> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str::<CellResult>(&text) {
        Ok(c) if c.inputs == *inputs => Some(c),
        Ok(_) => {
            warn!("{} was produced with other settings; recomputing", path.display());
            None
        }
        Err(e) => {
            warn!("ignoring unreadable {}: {e}", path.display());
            None
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Every cell of `cfg`, reusing finished cells found under `out_dir/cells`.
pub fn run_cells(
    cfg: &SweepConfig,
    values: &[f64],
    out_dir: &Path,
    with_errors: bool,
) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let cell_dir = out_dir.join("cells");
    fs::create_dir_all(&cell_dir)?;
    cfg.cells()
        .into_par_iter()
        .map(|key| {
            let inputs = cell_inputs(cfg, values, key, with_errors);
            let path = cell_dir.join(key.file_name());
            if let Some(done) = load_cell(&path, &inputs) {
                info!("cell M={} D_h={} l_F={}: reused", key.m, key.d_h, key.l_f);
                return Ok(done);
            }
            let cell = compute_cell(inputs, values)?;
            write_atomic(&path, serde_json::to_string(&cell)?.as_bytes())?;
            Ok(cell)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: Experiment,
    pub config: SweepConfig,
    pub series_len: usize,
    pub series_fingerprint: u64,
    pub cells: Vec<CellSummary>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub key: CellKey,
    pub seed: u64,
    pub steps: usize,
    pub lowest_final: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub cells: Vec<CellResult>,
    pub files: Vec<PathBuf>,
}

fn write_manifest(
    exp: Experiment,
    cfg: &SweepConfig,
    values: &[f64],
    cells: &[CellResult],
    files: &[PathBuf],
    out_dir: &Path,
) -> Result<PathBuf> {
    let manifest = Manifest {
        experiment: exp,
        config: cfg.clone(),
        series_len: values.len(),
        series_fingerprint: series_fingerprint(values),
        cells: cells
            .iter()
            .map(|c| CellSummary {
                key: c.key(),
                seed: c.seed(),
                steps: c.record.steps.len(),
                lowest_final: c.record.final_step().levels[0],
            })
            .collect(),
        outputs: files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    let path = out_dir.join("manifest.json");
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

fn csv_file(path: PathBuf, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    write_atomic(&path, &buf)?;
    Ok(path)
}

/// One `action_levels_m<M>.csv` per cell.
pub fn run_action_level_sweep(cfg: &SweepConfig, values: &[f64], out_dir: &Path) -> Result<SweepOutput> {
    run_experiment(Experiment::ActionLevels, cfg, values, out_dir)
}

/// `max_action.csv` with `m,mean_max_action,std` and `action_surface.csv`
/// with the level statistics at every step of every M.
pub fn run_max_action_vs_m(cfg: &SweepConfig, values: &[f64], out_dir: &Path) -> Result<SweepOutput> {
    run_experiment(Experiment::MaxAction, cfg, values, out_dir)
}

/// `mse_width.csv` (`m,d_h,train_mse,val_mse`) for a single depth.
pub fn run_mse_width_sweep(cfg: &SweepConfig, values: &[f64], out_dir: &Path) -> Result<SweepOutput> {
    run_experiment(Experiment::MseWidth, cfg, values, out_dir)
}

/// `mse_depth.csv` (`m,l_f,train_mse,val_mse`) for a single width.
pub fn run_mse_depth_sweep(cfg: &SweepConfig, values: &[f64], out_dir: &Path) -> Result<SweepOutput> {
    run_experiment(Experiment::MseDepth, cfg, values, out_dir)
}

pub fn run_experiment(
    exp: Experiment,
    cfg: &SweepConfig,
    values: &[f64],
    out_dir: &Path,
) -> Result<SweepOutput> {
    cfg.validate()?;
    match exp {
        Experiment::MseWidth if cfg.lf_values.len() != 1 => {
            return Err(invalid("the width sweep takes exactly one depth"));
        }
        Experiment::MseDepth if cfg.dh_values.len() != 1 => {
            return Err(invalid("the depth sweep takes exactly one width"));
        }
        _ => {}
    }
    fs::create_dir_all(out_dir)?;
    let cells = run_cells(cfg, values, out_dir, exp.needs_errors())?;
    let mut files = Vec::new();
    match exp {
        Experiment::ActionLevels => {
            for c in &cells {
                let k = c.key();
                let name = if cfg.dh_values.len() == 1 && cfg.lf_values.len() == 1 {
                    format!("action_levels_m{}.csv", k.m)
                } else {
                    format!("action_levels_m{}_dh{}_lf{}.csv", k.m, k.d_h, k.l_f)
                };
                files.push(csv_file(out_dir.join(name), |b| c.record.write_levels_csv(b))?);
            }
        }
        Experiment::MaxAction => {
            files.push(csv_file(out_dir.join("max_action.csv"), |b| {
                write_max_action_csv(&cells, b)
            })?);
            files.push(csv_file(out_dir.join("action_surface.csv"), |b| {
                write_surface_csv(&cells, b)
            })?);
        }
        Experiment::MseWidth | Experiment::MseDepth => {
            let (name, col) = if exp == Experiment::MseWidth {
                ("mse_width.csv", "d_h")
            } else {
                ("mse_depth.csv", "l_f")
            };
            files.push(csv_file(out_dir.join(name), |b| {
                writeln!(b, "m,{col},train_mse,val_mse")?;
                for c in &cells {
                    let e = c.errors.as_ref().ok_or_else(|| invalid("cell lacks error report"))?;
                    let k = c.key();
                    let v = if exp == Experiment::MseWidth { k.d_h } else { k.l_f };
                    writeln!(b, "{},{v},{:e},{:e}", k.m, e.train_mse, e.val_mse)?;
                }
                Ok(())
            })?);
        }
    }
    files.push(write_manifest(exp, cfg, values, &cells, &files, out_dir)?);
    Ok(SweepOutput { cells, files })
}

fn write_max_action_csv(cells: &[CellResult], b: &mut Vec<u8>) -> Result<()> {
    let multi = cells.iter().any(|c| c.key().d_h != cells[0].key().d_h || c.key().l_f != cells[0].key().l_f);
    if multi {
        writeln!(b, "m,d_h,l_f,mean_max_action,std")?;
    } else {
        writeln!(b, "m,mean_max_action,std")?;
    }
    for c in cells {
        let (mean, std) = final_level_stats(&c.record);
        let k = c.key();
        if multi {
            writeln!(b, "{},{},{},{mean:e},{std:e}", k.m, k.d_h, k.l_f)?;
        } else {
            writeln!(b, "{},{mean:e},{std:e}", k.m)?;
        }
    }
    Ok(())
}

fn write_surface_csv(cells: &[CellResult], b: &mut Vec<u8>) -> Result<()> {
    writeln!(b, "m,d_h,l_f,step,r_f_over_rm,lowest,mean,highest")?;
    for c in cells {
        let k = c.key();
        for s in &c.record.steps {
            let mean = s.levels.iter().sum::<f64>() / s.levels.len() as f64;
            writeln!(
                b,
                "{},{},{},{},{:e},{:e},{mean:e},{:e}",
                k.m,
                k.d_h,
                k.l_f,
                s.step,
                s.r_f_over_rm,
                s.levels[0],
                s.levels[s.levels.len() - 1]
            )?;
        }
    }
    Ok(())
}
