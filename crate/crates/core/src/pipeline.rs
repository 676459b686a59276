//! End-to-end calibration flow. Every stage reads its inputs from and writes
//! its results to files under one output directory, so any stage can be
//! rerun or resumed on its own.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::{
    calibrated_widths, linearity, linearity_against, CalibrationTable, LinearityTable,
};
use crate::density::{run_density_test, run_readout_density, DensityHistogram};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::iti::{interleave, validate_merge, BinSource, BinTimeline, MergeReport, MergedTdl};
use crate::model::{DelayLineModel, GroupSelector, SystemConfig};
use crate::por::{por_iteration, Ansatz, PorParams, PorState};
use crate::seed::derive_seed;
use crate::ti::{delay_sweep, run_ti, TdcChannel, TiRunConfig};

fn default_iterations() -> u32 {
    2
}

fn default_threshold() -> f64 {
    0.2
}

fn default_ansatz() -> String {
    "identity".into()
}

fn default_k() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TiConfig {
    pub delay_start_ps: f64,
    pub delay_stop_ps: f64,
    pub delay_step_ps: f64,
    pub repetitions: usize,
    pub pairs_per_repetition: usize,
    #[serde(default)]
    pub jitter_sigma_ps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Delay-line definitions, relative to the pipeline file.
    pub system: PathBuf,
    pub seed: u64,
    /// Hits per density test during resolution and interleaving.
    pub shots: u64,
    /// Hits of the density test the calibration weights come from.
    pub calibration_shots: u64,
    /// Hits of the independent density test the calibration is judged on.
    pub evaluation_shots: u64,
    #[serde(default = "default_iterations")]
    pub por_iterations: u32,
    #[serde(default = "default_ansatz")]
    pub ansatz: String,
    #[serde(default = "default_k")]
    pub run_length_k: usize,
    #[serde(default)]
    pub min_count_threshold: u64,
    #[serde(default = "default_threshold")]
    pub iti_threshold_ps: f64,
    pub ti: TiConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the file and resolves `system` against its directory.
    pub fn load(path: &Path) -> Result<(Self, SystemConfig)> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| e.in_file(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.system = base.join(&cfg.system);
        let system = SystemConfig::load(&cfg.system).map_err(|e| e.in_file(&cfg.system))?;
        Ok((cfg, system))
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.calibration_shots == 0 || self.evaluation_shots == 0 {
            return Err(Error::invalid("shot counts must be positive"));
        }
        if self.por_iterations == 0 {
            return Err(Error::invalid("por_iterations must be at least 1"));
        }
        if !(self.iti_threshold_ps >= 0.0 && self.iti_threshold_ps.is_finite()) {
            return Err(Error::invalid("iti_threshold_ps must be non-negative"));
        }
        self.ansatz.parse::<Ansatz>()?;
        EncoderConfig::new(self.run_length_k)?;
        self.ti_run()?.validate()
    }

    pub fn por_params(&self) -> Result<PorParams> {
        Ok(PorParams {
            encoder: EncoderConfig::new(self.run_length_k)?,
            ansatz: self.ansatz.parse()?,
            min_count_threshold: self.min_count_threshold,
        })
    }

    pub fn ti_run(&self) -> Result<TiRunConfig> {
        Ok(TiRunConfig {
            delays_ps: delay_sweep(
                self.ti.delay_start_ps,
                self.ti.delay_stop_ps,
                self.ti.delay_step_ps,
            )?,
            repetitions: self.ti.repetitions,
            pairs_per_repetition: self.ti.pairs_per_repetition,
            jitter_sigma_ps: self.ti.jitter_sigma_ps,
            period_span: 1 << 32,
            first_period: 1 << 40,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Model,
    Density,
    Por,
    Iti,
    Calibrate,
    Metrics,
    Ti,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Model,
        Stage::Density,
        Stage::Por,
        Stage::Iti,
        Stage::Calibrate,
        Stage::Metrics,
        Stage::Ti,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Model => "model",
            Stage::Density => "density",
            Stage::Por => "por",
            Stage::Iti => "iti",
            Stage::Calibrate => "calibrate",
            Stage::Metrics => "metrics",
            Stage::Ti => "ti",
            Stage::Report => "report",
        }
    }

    pub fn exit_code(&self) -> i32 {
        10 + *self as i32
    }

    fn tag(&self) -> u64 {
        *self as u64 + 1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {error}")]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

const PROGRESS: &str = "progress.txt";
const CONFIG_SNAPSHOT: &str = "pipeline.toml";
const SYSTEM_SNAPSHOT: &str = "system.toml";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    }
    fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn segment_name(tdl: usize, group: GroupSelector) -> String {
    format!("tdl{tdl}_g{}", group.index())
}

pub struct Pipeline {
    config: PipelineConfig,
    system: SystemConfig,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        system: SystemConfig,
        out: impl Into<PathBuf>,
    ) -> Result<Self> {
        config.validate()?;
        system.validate()?;
        Ok(Self {
            config,
            system,
            out: out.into(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn seed(&self, stage: Stage, path: &[u64]) -> u64 {
        let mut p = vec![stage.tag()];
        p.extend_from_slice(path);
        derive_seed(self.config.seed, &p)
    }

    fn snapshots(&self) -> Result<(String, String)> {
        let mut cfg = self.config.clone();
        cfg.system = PathBuf::from(SYSTEM_SNAPSHOT);
        let c = toml::to_string(&cfg).map_err(|e| Error::invalid(e.to_string()))?;
        let s = toml::to_string(&self.system).map_err(|e| Error::invalid(e.to_string()))?;
        Ok((c, s))
    }

    fn completed(&self) -> Vec<String> {
        fs::read_to_string(self.path(PROGRESS))
            .map(|t| t.lines().map(str::to_string).collect())
            .unwrap_or_default()
    }

    /// Runs every stage in order. With `resume`, stages recorded as complete
    /// by an earlier run with the same configuration are skipped.
    pub fn run_all(&self, resume: bool) -> Result<Vec<Stage>, StageError> {
        let (cfg, sys) = self.snapshots().map_err(|error| StageError {
            stage: Stage::Model,
            error,
        })?;
        let done = if resume {
            let same = read(&self.path(CONFIG_SNAPSHOT)).ok() == Some(cfg.clone())
                && read(&self.path(SYSTEM_SNAPSHOT)).ok() == Some(sys.clone());
            if same {
                self.completed()
            } else {
                Vec::new()
            }
        } else {
            Vec::new()
        };
        let setup = || -> Result<()> {
            write(&self.path(CONFIG_SNAPSHOT), &cfg)?;
            write(&self.path(SYSTEM_SNAPSHOT), &sys)?;
            write(
                &self.path(PROGRESS),
                done.iter().map(|s| format!("{s}\n")).collect::<String>(),
            )
        };
        setup().map_err(|error| StageError {
            stage: Stage::Model,
            error,
        })?;
        let mut ran = Vec::new();
        let mut progress: Vec<String> = done.clone();
        for stage in Stage::ALL {
            if done.iter().any(|d| d == stage.name()) {
                continue;
            }
            self.run_stage(stage)?;
            progress.push(stage.name().to_string());
            write(
                &self.path(PROGRESS),
                progress
                    .iter()
                    .map(|s| format!("{s}\n"))
                    .collect::<String>(),
            )
            .map_err(|error| StageError { stage, error })?;
            ran.push(stage);
        }
        Ok(ran)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<(), StageError> {
        let r = match stage {
            Stage::Model => self.stage_model(),
            Stage::Density => self.stage_density(),
            Stage::Por => self.stage_por(),
            Stage::Iti => self.stage_iti(),
            Stage::Calibrate => self.stage_calibrate(),
            Stage::Metrics => self.stage_metrics(),
            Stage::Ti => self.stage_ti(),
            Stage::Report => self.stage_report(),
        };
        r.map_err(|error| StageError { stage, error })
    }

    fn models(&self) -> Result<Vec<DelayLineModel>> {
        let period = self.system.clock_period_ps();
        (0..self.system.tdl.len())
            .map(|k| {
                let p = self.path(&format!("model/tdl{k}.csv"));
                DelayLineModel::read_positions_csv(read(&p)?.as_bytes(), period)
                    .map_err(|e| e.in_file(&p))
            })
            .collect()
    }

    fn histogram(&self, rel: &str) -> Result<DensityHistogram> {
        let p = self.path(rel);
        DensityHistogram::read_csv(&read(&p)?).map_err(|e| e.in_file(&p))
    }

    fn merged(&self, rel: &str) -> Result<MergedTdl> {
        let p = self.path(rel);
        MergedTdl::read_csv(&read(&p)?).map_err(|e| e.in_file(&p))
    }

    fn calibration(&self) -> Result<CalibrationTable> {
        let p = self.path("calib/calibration.csv");
        CalibrationTable::read_csv(&read(&p)?).map_err(|e| e.in_file(&p))
    }

    fn stage_model(&self) -> Result<()> {
        for (k, m) in self.system.build()?.iter().enumerate() {
            let bytes = to_bytes(|b| m.write_positions_csv(b))?;
            write(&self.path(&format!("model/tdl{k}.csv")), bytes)?;
        }
        Ok(())
    }

    /// Whole lines read out in physical order, before any resolution.
    fn stage_density(&self) -> Result<()> {
        for (k, m) in self.models()?.iter().enumerate() {
            let physical: Vec<usize> = (0..m.num_bins()).collect();
            let h = run_density_test(
                m,
                &physical,
                self.config.shots,
                self.seed(Stage::Density, &[k as u64]),
            )?;
            write(
                &self.path(&format!("density/raw_tdl{k}.csv")),
                to_bytes(|b| h.write_csv(b))?,
            )?;
        }
        Ok(())
    }

    fn stage_por(&self) -> Result<()> {
        let params = self.config.por_params()?;
        let n = self.config.por_iterations;
        let mut summary =
            String::from("tdl,group,stage,bins,tapped,tapped_fraction,resolved_units\n");
        for (k, m) in self.models()?.iter().enumerate() {
            for g in GroupSelector::all() {
                let name = segment_name(k, g);
                let mut state = PorState::new(k, g, m.num_cells())?;
                let mut dots = String::new();
                for it in 0..n {
                    // Every segment shares the seed of a round, so all see the
                    // same hits.
                    let seed = self.seed(Stage::Por, &[u64::from(it)]);
                    let step = por_iteration(&state, m, self.config.shots, seed, &params)?;
                    if it == 0 {
                        for (u, dag) in state.initial_dags(&step.observed)?.iter().enumerate() {
                            dots.push_str(&dag.to_dot(&format!("cell{}", state.units[u].cell)));
                        }
                    }
                    write(
                        &self.path(&format!("por/{name}_obs{it}.csv")),
                        to_bytes(|b| step.observation.write_csv(b))?,
                    )?;
                    let _ = writeln!(
                        summary,
                        "{k},{},{it},{},{},{},{}",
                        g.index(),
                        step.observed.tapped.len(),
                        step.observed.tapped_count(),
                        step.observed.tapped_fraction(),
                        count_resolved(&state)
                    );
                    state = step.state;
                }
                let fin = run_density_test(
                    m,
                    &state.perceived_bins(),
                    self.config.shots,
                    self.seed(Stage::Por, &[u64::MAX]),
                )?;
                let p = fin.tapped_pattern(params.min_count_threshold);
                let _ = writeln!(
                    summary,
                    "{k},{},{n},{},{},{},{}",
                    g.index(),
                    p.tapped.len(),
                    p.tapped_count(),
                    p.tapped_fraction(),
                    count_resolved(&state)
                );
                write(
                    &self.path(&format!("por/{name}_final.csv")),
                    to_bytes(|b| fin.write_csv(b))?,
                )?;
                write(
                    &self.path(&format!("por/{name}.state")),
                    state.to_checkpoint(),
                )?;
                write(&self.path(&format!("por/{name}_dags.dot")), dots)?;
            }
        }
        write(&self.path("por/summary.csv"), summary)
    }

    fn stage_iti(&self) -> Result<()> {
        let models = self.models()?;
        let t = self.config.iti_threshold_ps;
        let mut per_tdl = Vec::new();
        for k in 0..models.len() {
            let mut timelines = Vec::new();
            for g in GroupSelector::all() {
                let name = segment_name(k, g);
                let sp = self.path(&format!("por/{name}.state"));
                let state = PorState::from_checkpoint(&read(&sp)?).map_err(|e| e.in_file(&sp))?;
                let hist = self.histogram(&format!("por/{name}_final.csv"))?;
                timelines.push(BinTimeline::from_histogram(
                    k,
                    &state.perceived_bins(),
                    &hist,
                )?);
            }
            let sources: Vec<&dyn BinSource> =
                timelines.iter().map(|t| t as &dyn BinSource).collect();
            let merged = interleave(&sources, t)?;
            write(
                &self.path(&format!("iti/tdl{k}.csv")),
                to_bytes(|b| merged.write_csv(b))?,
            )?;
            per_tdl.push(merged);
        }
        let sources: Vec<&dyn BinSource> = per_tdl.iter().map(|m| m as &dyn BinSource).collect();
        let merged = interleave(&sources, t)?;
        write(
            &self.path("iti/merged.csv"),
            to_bytes(|b| merged.write_csv(b))?,
        )?;

        let seed = self.seed(Stage::Iti, &[]);
        let mut rows = Vec::new();
        for (k, m) in per_tdl.iter().enumerate() {
            let r = validate_merge(&models, m, self.config.shots, seed)?;
            write(
                &self.path(&format!("iti/tdl{k}_density.csv")),
                to_bytes(|b| r.histogram.write_csv(b))?,
            )?;
            rows.push((format!("tdl{k}"), r));
        }
        let r = validate_merge(&models, &merged, self.config.shots, seed)?;
        write(
            &self.path("iti/merged_density.csv"),
            to_bytes(|b| r.histogram.write_csv(b))?,
        )?;
        let single = rows.iter().map(|(_, r)| r.bins as f64).sum::<f64>() / rows.len() as f64;
        let factor = r.bins as f64 / single;
        rows.push(("merged".into(), r));
        write(
            &self.path("iti/validation.csv"),
            validation_csv(&rows, factor),
        )
    }

    fn stage_calibrate(&self) -> Result<()> {
        let models = self.models()?;
        let merged = self.merged("iti/merged.csv")?;
        let hist = run_readout_density(
            &merged.readout(&models)?,
            self.config.calibration_shots,
            self.seed(Stage::Calibrate, &[]),
        )?;
        let table = CalibrationTable::from_histogram(&hist)?;
        write(
            &self.path("calib/weights_density.csv"),
            to_bytes(|b| hist.write_csv(b))?,
        )?;
        write(
            &self.path("calib/calibration.csv"),
            to_bytes(|b| table.write_csv(b))?,
        )
    }

    fn stage_metrics(&self) -> Result<()> {
        let models = self.models()?;
        let merged = self.merged("iti/merged.csv")?;
        let table = self.calibration()?;
        let eval = run_readout_density(
            &merged.readout(&models)?,
            self.config.evaluation_shots,
            self.seed(Stage::Metrics, &[]),
        )?;
        write(
            &self.path("metrics/eval_density.csv"),
            to_bytes(|b| eval.write_csv(b))?,
        )?;
        let raw_w = self.histogram("density/raw_tdl0.csv")?.widths();
        let merged_w = eval.widths();
        let cal_w = calibrated_widths(&eval.counts, eval.total_shots, &table)?;
        let columns = vec![
            ("raw".to_string(), linearity(&raw_w)?, raw_w),
            ("por_iti".to_string(), linearity(&merged_w)?, merged_w),
            (
                "por_iti_cal".to_string(),
                linearity_against(&cal_w, table.lsb_ps)?,
                cal_w,
            ),
        ];
        for (label, report, widths) in &columns {
            write(
                &self.path(&format!("metrics/dnl_inl_{label}.csv")),
                to_bytes(|b| report.write_bins_csv(widths, b))?,
            )?;
        }
        let t = LinearityTable {
            columns: columns.into_iter().map(|(l, r, _)| (l, r)).collect(),
        };
        write(&self.path("metrics/linearity.txt"), t.render_text())?;
        write(
            &self.path("metrics/linearity.csv"),
            to_bytes(|b| t.write_csv(b))?,
        )
    }

    fn stage_ti(&self) -> Result<()> {
        let models = self.models()?;
        let merged = self.merged("iti/merged.csv")?;
        let channel = TdcChannel::new(merged.readout(&models)?, self.calibration()?)?;
        let report = run_ti(&channel, &self.config.ti_run()?, self.seed(Stage::Ti, &[]))?;
        write(&self.path("ti/ti.csv"), to_bytes(|b| report.write_csv(b))?)
    }

    fn stage_report(&self) -> Result<()> {
        write(&self.path("report.txt"), render_report(&self.out)?)
    }
}

fn count_resolved(state: &PorState) -> usize {
    state.units.iter().filter(|u| u.is_resolved()).count()
}

fn validation_csv(rows: &[(String, MergeReport)], factor: f64) -> String {
    let mut s = format!("# improvement_factor={factor}\n");
    s.push_str("line,bins,tapped,tapped_fraction,new_missing_codes,min_width_ps,max_width_ps,mean_width_ps\n");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{}",
            r.bins,
            r.tapped,
            r.tapped_fraction,
            r.new_missing_codes,
            r.min_width_ps,
            r.max_width_ps,
            r.mean_width_ps
        );
    }
    s
}

/// Human-readable summary of a finished (or partly finished) run directory.
pub fn render_report(out: &Path) -> Result<String> {
    let mut s = String::from("tdlcal run report\n=================\n\n");
    let section = |s: &mut String, title: &str, rel: &str| -> Result<bool> {
        let p = out.join(rel);
        match fs::read_to_string(&p) {
            Ok(text) => {
                let _ = writeln!(s, "{title}\n{}\n{text}", "-".repeat(title.len()));
                Ok(true)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let _ = writeln!(s, "{title}\n{}\n(not run)\n", "-".repeat(title.len()));
                Ok(false)
            }
            Err(e) => Err(Error::from(e).in_file(&p)),
        }
    };
    if let Ok(cfg) = fs::read_to_string(out.join(CONFIG_SNAPSHOT)) {
        let _ = writeln!(s, "Configuration\n-------------\n{cfg}");
    }
    section(
        &mut s,
        "Tapped fraction per segment and round",
        "por/summary.csv",
    )?;
    section(&mut s, "Interleaving validation", "iti/validation.csv")?;
    section(&mut s, "Linearity", "metrics/linearity.txt")?;
    let ti = out.join("ti/ti.csv");
    if let Ok(text) = fs::read_to_string(&ti) {
        let h = crate::density::read_header(&text);
        let get = |k: &str| h.get(k).and_then(|v| v.parse::<f64>().ok());
        if let (Some(rms), Some(seq)) = (get("rms_ps"), get("sigma_eq_ps")) {
            let expected = seq * 2f64.sqrt();
            let _ = writeln!(
                s,
                "Time-interval precision\n-----------------------\nrms {rms:.4} ps, sqrt(2)*sigma_eq {expected:.4} ps, ratio {:.4}\n",
                rms / expected
            );
        }
    } else {
        let _ = writeln!(
            s,
            "Time-interval precision\n-----------------------\n(not run)\n"
        );
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PIPELINE: &str = r#"
        system = "system.toml"
        seed = 1
        shots = 100000
        calibration_shots = 1000000
        evaluation_shots = 1000000
        [ti]
        delay_start_ps = 0.0
        delay_stop_ps = 100.0
        delay_step_ps = 50.0
        repetitions = 1
        pairs_per_repetition = 10
    "#;

    #[test]
    fn config_defaults_and_validation() {
        let c = PipelineConfig::from_toml_str(PIPELINE).unwrap();
        assert_eq!(c.por_iterations, 2);
        assert_eq!(c.iti_threshold_ps, 0.2);
        assert_eq!(c.ti_run().unwrap().delays_ps, vec![0.0, 50.0, 100.0]);
        let bad = PIPELINE.replace("shots = 100000", "shots = 0");
        assert!(PipelineConfig::from_toml_str(&bad).is_err());
        let bad = PIPELINE.replace("seed = 1", "seed = 1\nansatz = \"sideways\"");
        assert!(PipelineConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn stage_exit_codes_are_distinct() {
        let codes: std::collections::BTreeSet<i32> =
            Stage::ALL.iter().map(Stage::exit_code).collect();
        assert_eq!(codes.len(), Stage::ALL.len());
        assert!(codes.iter().all(|&c| c >= 10));
    }
}
