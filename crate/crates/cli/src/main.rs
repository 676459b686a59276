//! `tdlcal`: simulate, resolve, interleave and calibrate carry-chain TDCs.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use tdlcal_core::calib::{
    calibrated_widths, linearity, linearity_against, CalibrationTable, LinearityTable,
};
use tdlcal_core::density::{run_density_test, run_readout_density, DensityHistogram};
use tdlcal_core::iti::{interleave, validate_merge, BinSource, BinTimeline, MergedTdl};
use tdlcal_core::model::{DelayLineModel, GroupSelector, SystemConfig};
use tdlcal_core::pipeline::{render_report, Pipeline, PipelineConfig, Stage};
use tdlcal_core::por::{por_iteration, Ansatz, PorParams, PorState};
use tdlcal_core::ti::{delay_sweep, run_ti, TdcChannel, TiRunConfig};

const CONFIG_EXIT: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "tdlcal", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build delay lines and export their sampling positions.
    Model {
        #[arg(long)]
        system: PathBuf,
        #[arg(long, default_value_t = 0)]
        tdl: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a code density test on a line, a group or a resolved segment.
    Density {
        #[arg(long)]
        system: PathBuf,
        #[arg(long, default_value_t = 0)]
        tdl: usize,
        /// Read out one clock-region group in physical order.
        #[arg(long, conflicts_with = "state")]
        group: Option<usize>,
        /// Read out a segment in the order stored in a resolution checkpoint.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, default_value_t = 5_000_000)]
        shots: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resolve the tap order of one group by repeated density tests.
    Por {
        #[arg(long)]
        system: PathBuf,
        #[arg(long, default_value_t = 0)]
        tdl: usize,
        #[arg(long, default_value_t = 0)]
        group: usize,
        #[arg(long, default_value_t = 2)]
        iterations: u32,
        #[arg(long, default_value_t = 5_000_000)]
        shots: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `identity`, `pattern` or eight 1-based labels.
        #[arg(long, default_value = "identity")]
        ansatz: String,
        /// Continue from an earlier checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Where to write the checkpoint after the last iteration.
        #[arg(long)]
        state_out: PathBuf,
        /// Write the first round's precedence graphs as Graphviz text.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Interleave resolved segments into one line.
    Iti {
        #[arg(long)]
        system: PathBuf,
        /// Resolution checkpoints of the segments to merge.
        #[arg(long = "state", required = true, num_args = 1..)]
        states: Vec<PathBuf>,
        #[arg(long, default_value_t = 5_000_000)]
        shots: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        threshold_ps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive bin-width calibration weights for a merged line.
    Calibrate {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        merged: PathBuf,
        #[arg(long, default_value_t = 1_000_000_000)]
        shots: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linearity of a density histogram, optionally after calibration.
    Metrics {
        #[arg(long)]
        density: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Print full-precision CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Sweep programmed delays through a calibrated channel.
    Ti {
        #[arg(long)]
        system: PathBuf,
        #[arg(long)]
        merged: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        /// `start:stop:step` in ps.
        #[arg(long, default_value = "50:3950:100")]
        delays: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 0.0)]
        jitter_ps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage of a pipeline configuration.
    Full {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "TDLCAL_OUT", default_value = "tdlcal-out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        shots: Option<u64>,
        #[arg(long)]
        threshold_ps: Option<f64>,
        /// Skip stages already completed with the same configuration.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize a pipeline output directory.
    Report {
        #[arg(env = "TDLCAL_OUT", default_value = "tdlcal-out")]
        dir: PathBuf,
    },
}

/// An error together with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitWith<T> {
    fn exit(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

fn stage_code(stage: Stage) -> u8 {
    stage.exit_code() as u8
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_models(system: &Path) -> Result<Vec<DelayLineModel>> {
    let sys =
        SystemConfig::load(system).with_context(|| format!("loading {}", system.display()))?;
    Ok(sys.build()?)
}

fn pick(models: &[DelayLineModel], tdl: usize) -> Result<&DelayLineModel> {
    models
        .get(tdl)
        .ok_or_else(|| anyhow!("system has {} delay lines, no tdl {tdl}", models.len()))
}

fn read_state(path: &Path) -> Result<PorState> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PorState::from_checkpoint(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))
        }
        None => Ok(io::stdout().write_all(bytes)?),
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> tdlcal_core::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn run(command: Command) -> Result<(), Failure> {
    let model_code = stage_code(Stage::Model);
    match command {
        Command::Model { system, tdl, out } => {
            let models = load_models(&system).exit(CONFIG_EXIT)?;
            let m = pick(&models, tdl).exit(CONFIG_EXIT)?;
            let bytes = csv_bytes(|b| m.write_positions_csv(b)).exit(model_code)?;
            emit(out.as_deref(), &bytes).exit(model_code)
        }
        Command::Density {
            system,
            tdl,
            group,
            state,
            shots,
            seed,
            out,
        } => {
            let code = stage_code(Stage::Density);
            let models = load_models(&system).exit(CONFIG_EXIT)?;
            let m = pick(&models, tdl).exit(CONFIG_EXIT)?;
            let bins = match (group, state) {
                (_, Some(p)) => read_state(&p).exit(CONFIG_EXIT)?.perceived_bins(),
                (Some(g), None) => GroupSelector::new(g).exit(CONFIG_EXIT)?.bins(m.num_cells()),
                (None, None) => (0..m.num_bins()).collect(),
            };
            let h = run_density_test(m, &bins, shots, seed).exit(code)?;
            let p = h.tapped_pattern(0);
            eprintln!(
                "{} bins, {} tapped ({:.4})",
                p.tapped.len(),
                p.tapped_count(),
                p.tapped_fraction()
            );
            emit(out.as_deref(), &csv_bytes(|b| h.write_csv(b)).exit(code)?).exit(code)
        }
        Command::Por {
            system,
            tdl,
            group,
            iterations,
            shots,
            seed,
            ansatz,
            resume,
            state_out,
            dot,
        } => {
            let code = stage_code(Stage::Por);
            let models = load_models(&system).exit(CONFIG_EXIT)?;
            let m = pick(&models, tdl).exit(CONFIG_EXIT)?;
            let params = PorParams {
                ansatz: ansatz.parse::<Ansatz>().exit(CONFIG_EXIT)?,
                ..PorParams::default()
            };
            let mut state = match resume {
                Some(p) => read_state(&p).exit(CONFIG_EXIT)?,
                None => {
                    let g = GroupSelector::new(group).exit(CONFIG_EXIT)?;
                    PorState::new(tdl, g, m.num_cells()).exit(CONFIG_EXIT)?
                }
            };
            for it in 0..iterations {
                let round = state.stage;
                let step = por_iteration(
                    &state,
                    m,
                    shots,
                    seed.wrapping_add(u64::from(round)),
                    &params,
                )
                .exit(code)?;
                if round == 0 {
                    if let Some(p) = &dot {
                        let mut text = String::new();
                        for (u, dag) in state
                            .initial_dags(&step.observed)
                            .exit(code)?
                            .iter()
                            .enumerate()
                        {
                            text.push_str(&dag.to_dot(&format!("cell{}", state.units[u].cell)));
                        }
                        emit(Some(p), text.as_bytes()).exit(code)?;
                    }
                }
                state = step.state;
                let resolved = state.units.iter().filter(|u| u.is_resolved()).count();
                println!(
                    "round {} tapped {:.4} resolved units {resolved}/{}",
                    it + 1,
                    step.observed.tapped_fraction(),
                    state.units.len()
                );
            }
            emit(Some(&state_out), state.to_checkpoint().as_bytes()).exit(code)
        }
        Command::Iti {
            system,
            states,
            shots,
            seed,
            threshold_ps,
            out,
        } => {
            let code = stage_code(Stage::Iti);
            let models = load_models(&system).exit(CONFIG_EXIT)?;
            let mut timelines = Vec::new();
            for p in &states {
                let state = read_state(p).exit(CONFIG_EXIT)?;
                let m = pick(&models, state.tdl).exit(CONFIG_EXIT)?;
                let bins = state.perceived_bins();
                // One seed for every segment so all are measured against the
                // same hits.
                let h = run_density_test(m, &bins, shots, seed).exit(code)?;
                timelines.push(BinTimeline::from_histogram(state.tdl, &bins, &h).exit(code)?);
            }
            let sources: Vec<&dyn BinSource> =
                timelines.iter().map(|t| t as &dyn BinSource).collect();
            let merged = interleave(&sources, threshold_ps).exit(code)?;
            let r = validate_merge(&models, &merged, shots, seed.wrapping_add(1)).exit(code)?;
            println!(
                "merged {} of {} bins, {} tapped, {} new missing codes, widths {:.4}..{:.4} ps",
                r.bins,
                merged.bins.len(),
                r.tapped,
                r.new_missing_codes,
                r.min_width_ps,
                r.max_width_ps
            );
            emit(Some(&out), &csv_bytes(|b| merged.write_csv(b)).exit(code)?).exit(code)
        }
        Command::Calibrate {
            system,
            merged,
            shots,
            seed,
            out,
        } => {
            let code = stage_code(Stage::Calibrate);
            let models = load_models(&system).exit(CONFIG_EXIT)?;
            let merged =
                MergedTdl::read_csv(&read_text(&merged).exit(CONFIG_EXIT)?).exit(CONFIG_EXIT)?;
            let h = run_readout_density(&merged.readout(&models).exit(code)?, shots, seed)
                .exit(code)?;
            let table = CalibrationTable::from_histogram(&h).exit(code)?;
            emit(Some(&out), &csv_bytes(|b| table.write_csv(b)).exit(code)?).exit(code)
        }
        Command::Metrics {
            density,
            calibration,
            csv,
        } => {
            let code = stage_code(Stage::Metrics);
            let h = DensityHistogram::read_csv(&read_text(&density).exit(CONFIG_EXIT)?)
                .exit(CONFIG_EXIT)?;
            let mut columns = vec![(
                "uncalibrated".to_string(),
                linearity(&h.widths()).exit(code)?,
            )];
            if let Some(p) = calibration {
                let table = CalibrationTable::read_csv(&read_text(&p).exit(CONFIG_EXIT)?)
                    .exit(CONFIG_EXIT)?;
                let w = calibrated_widths(&h.counts, h.total_shots, &table).exit(code)?;
                columns.push((
                    "calibrated".to_string(),
                    linearity_against(&w, table.lsb_ps).exit(code)?,
                ));
            }
            let t = LinearityTable { columns };
            let bytes = if csv {
                csv_bytes(|b| t.write_csv(b)).exit(code)?
            } else {
                t.render_text().into_bytes()
            };
            emit(None, &bytes).exit(code)
        }
        Command::Ti {
            system,
            merged,
            calibration,
            delays,
            reps,
            pairs,
            jitter_ps,
            seed,
            out,
        } => {
            let code = stage_code(Stage::Ti);
            let models = load_models(&system).exit(CONFIG_EXIT)?;
            let merged =
                MergedTdl::read_csv(&read_text(&merged).exit(CONFIG_EXIT)?).exit(CONFIG_EXIT)?;
            let table = CalibrationTable::read_csv(&read_text(&calibration).exit(CONFIG_EXIT)?)
                .exit(CONFIG_EXIT)?;
            let cfg = TiRunConfig {
                delays_ps: parse_sweep(&delays).exit(CONFIG_EXIT)?,
                repetitions: reps,
                pairs_per_repetition: pairs,
                jitter_sigma_ps: jitter_ps,
                period_span: 1 << 32,
                first_period: 1 << 40,
            };
            cfg.validate().exit(CONFIG_EXIT)?;
            let channel = TdcChannel::new(merged.readout(&models).exit(code)?, table).exit(code)?;
            let report = run_ti(&channel, &cfg, seed).exit(code)?;
            eprintln!(
                "rms {:.4} ps, sqrt(2)*sigma_eq {:.4} ps",
                report.rms_ps,
                report.sigma_eq_ps * 2f64.sqrt()
            );
            emit(
                out.as_deref(),
                &csv_bytes(|b| report.write_csv(b)).exit(code)?,
            )
            .exit(code)
        }
        Command::Full {
            config,
            out,
            seed,
            shots,
            threshold_ps,
            resume,
        } => {
            let (mut cfg, system) = PipelineConfig::load(&config).exit(CONFIG_EXIT)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = shots {
                cfg.shots = s;
            }
            if let Some(t) = threshold_ps {
                cfg.iti_threshold_ps = t;
            }
            let pipeline = Pipeline::new(cfg, system, out).exit(CONFIG_EXIT)?;
            let ran = pipeline.run_all(resume).map_err(|e| Failure {
                code: stage_code(e.stage),
                error: e.into(),
            })?;
            if ran.len() < Stage::ALL.len() {
                eprintln!("resumed; ran {} of {} stages", ran.len(), Stage::ALL.len());
            }
            print!(
                "{}",
                render_report(pipeline.out_dir()).exit(stage_code(Stage::Report))?
            );
            Ok(())
        }
        Command::Report { dir } => {
            if !dir.is_dir() {
                return Err(anyhow!("{} is not a directory", dir.display())).exit(CONFIG_EXIT);
            }
            print!("{}", render_report(&dir).exit(stage_code(Stage::Report))?);
            Ok(())
        }
    }
}

fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad delay sweep {s:?}"))?;
    match parts[..] {
        [a] => Ok(vec![a]),
        [a, b, c] => Ok(delay_sweep(a, b, c)?),
        _ => bail!("delay sweep must be `start:stop:step` or a single value"),
    }
}
