//! Time-interval measurement with a calibrated channel: timestamps from a
//! coarse clock counter plus calibrated fine time, and a sweep harness that
//! compares measured intervals against programmed delays.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::calib::CalibrationTable;
use crate::density::Readout;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// An instant as whole clock periods plus an offset in `[0, T)`, so that
/// intervals stay exact far from time zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventTime {
    pub period: i64,
    pub offset_ps: f64,
}

impl EventTime {
    /// Normalizes `period * T + offset_ps` so the offset lies in `[0, T)`.
    pub fn new(period: i64, offset_ps: f64, clock_period_ps: f64) -> Self {
        let shift = (offset_ps / clock_period_ps).floor();
        let mut offset = offset_ps - shift * clock_period_ps;
        let mut period = period + shift as i64;
        if offset >= clock_period_ps {
            offset -= clock_period_ps;
            period += 1;
        }
        if offset < 0.0 {
            offset = 0.0;
        }
        Self {
            period,
            offset_ps: offset,
        }
    }

    pub fn shifted(&self, delta_ps: f64, clock_period_ps: f64) -> Self {
        Self::new(self.period, self.offset_ps + delta_ps, clock_period_ps)
    }
}

/// What the channel reports for one hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestamp {
    /// Index of the sampling edge that latched the hit.
    pub coarse: i64,
    pub bin: usize,
    /// Calibrated propagation time from the hit to that edge.
    pub fine_ps: f64,
}

/// A delay line read out in a fixed order together with its calibration.
#[derive(Debug, Clone)]
pub struct TdcChannel {
    readout: Readout,
    table: CalibrationTable,
}

impl TdcChannel {
    pub fn new(readout: Readout, table: CalibrationTable) -> Result<Self> {
        if readout.len() != table.len() {
            return Err(Error::invalid(format!(
                "readout has {} bins but the calibration table has {}",
                readout.len(),
                table.len()
            )));
        }
        if readout.clock_period_ps() != table.clock_period_ps {
            return Err(Error::invalid(
                "readout and calibration disagree on the clock period",
            ));
        }
        Ok(Self { readout, table })
    }

    pub fn clock_period_ps(&self) -> f64 {
        self.readout.clock_period_ps()
    }

    pub fn table(&self) -> &CalibrationTable {
        &self.table
    }

    /// Edges sit at whole periods. A hit is latched by the first edge at
    /// which it has reached the first bin; later it would be latched one
    /// period late with every bin set.
    pub fn timestamp(&self, t: EventTime) -> Result<Timestamp> {
        let period = self.clock_period_ps();
        let first = self.readout.thresholds()[0];
        let (edges_later, phase) = if period - t.offset_ps >= first {
            (1, period - t.offset_ps)
        } else {
            (2, 2.0 * period - t.offset_ps)
        };
        let bin = self
            .readout
            .emit(phase)
            .expect("phase is past the first threshold");
        Ok(Timestamp {
            coarse: t.period + edges_later,
            bin,
            fine_ps: self.table.origin_ps + self.table.fine_time(bin)?,
        })
    }

    /// `stop - start` from two timestamps of this channel.
    pub fn interval(&self, start: &Timestamp, stop: &Timestamp) -> f64 {
        (stop.coarse - start.coarse) as f64 * self.clock_period_ps()
            - (stop.fine_ps - start.fine_ps)
    }

    pub fn measure(&self, start: EventTime, stop: EventTime) -> Result<f64> {
        Ok(self.interval(&self.timestamp(start)?, &self.timestamp(stop)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiRunConfig {
    pub delays_ps: Vec<f64>,
    pub repetitions: usize,
    pub pairs_per_repetition: usize,
    /// Independent timing jitter on each pulse.
    pub jitter_sigma_ps: f64,
    /// Start pulses are drawn from this many periods after `first_period`.
    pub period_span: i64,
    pub first_period: i64,
}

impl TiRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delays_ps.is_empty() {
            return Err(Error::invalid("no delays to sweep"));
        }
        if self.delays_ps.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("delays must be finite"));
        }
        if self.repetitions == 0 || self.pairs_per_repetition == 0 {
            return Err(Error::invalid("repetitions and pairs must be positive"));
        }
        if !(self.jitter_sigma_ps >= 0.0 && self.jitter_sigma_ps.is_finite()) {
            return Err(Error::invalid("jitter must be non-negative"));
        }
        if self.period_span <= 0 {
            return Err(Error::invalid("period span must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiPoint {
    pub delay_ps: f64,
    /// Mean of measured minus programmed interval.
    pub mean_dev_ps: f64,
    /// Spread of the measured interval.
    pub rms_ps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiReport {
    pub points: Vec<TiPoint>,
    /// RMS over every pair of every delay, about each delay's own mean.
    pub rms_ps: f64,
    pub sigma_eq_ps: f64,
}

impl TiReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# rms_ps={}", self.rms_ps)?;
        writeln!(w, "# sigma_eq_ps={}", self.sigma_eq_ps)?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["delay_ps", "mean_dev_ps", "rms_ps"])?;
        for p in &self.points {
            wtr.write_record([
                p.delay_ps.to_string(),
                p.mean_dev_ps.to_string(),
                p.rms_ps.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// RMS quantization error of the table's bins.
pub fn table_sigma_eq(table: &CalibrationTable) -> f64 {
    let total: f64 = table.bins.iter().map(|b| b.width_ps).sum();
    (table.bins.iter().map(|b| b.width_ps.powi(3)).sum::<f64>() / (12.0 * total)).sqrt()
}

pub fn run_ti(channel: &TdcChannel, config: &TiRunConfig, seed: u64) -> Result<TiReport> {
    config.validate()?;
    let period = channel.clock_period_ps();
    let jitter =
        Normal::new(0.0, config.jitter_sigma_ps).map_err(|e| Error::invalid(e.to_string()))?;
    let mut points = Vec::with_capacity(config.delays_ps.len());
    let (mut sq_all, mut n_all) = (0.0, 0usize);
    for (di, &delay) in config.delays_ps.iter().enumerate() {
        let mut devs = Vec::with_capacity(config.repetitions * config.pairs_per_repetition);
        for rep in 0..config.repetitions {
            let mut rng = rng_for(seed, &[di as u64, rep as u64]);
            for _ in 0..config.pairs_per_repetition {
                let start = EventTime::new(
                    config.first_period + rng.gen_range(0..config.period_span),
                    rng.gen_range(0.0..period),
                    period,
                );
                let stop = start.shifted(delay + jitter.sample(&mut rng), period);
                let start = start.shifted(jitter.sample(&mut rng), period);
                devs.push(channel.measure(start, stop)? - delay);
            }
        }
        let n = devs.len() as f64;
        let mean = devs.iter().sum::<f64>() / n;
        let sq: f64 = devs.iter().map(|d| (d - mean).powi(2)).sum();
        sq_all += sq;
        n_all += devs.len();
        points.push(TiPoint {
            delay_ps: delay,
            mean_dev_ps: mean,
            rms_ps: (sq / n).sqrt(),
        });
    }
    Ok(TiReport {
        points,
        rms_ps: (sq_all / n_all as f64).sqrt(),
        sigma_eq_ps: table_sigma_eq(channel.table()),
    })
}

/// Delays `start, start + step, ...` up to and including `stop`.
pub fn delay_sweep(start_ps: f64, stop_ps: f64, step_ps: f64) -> Result<Vec<f64>> {
    if step_ps.is_nan()
        || step_ps <= 0.0
        || !start_ps.is_finite()
        || !stop_ps.is_finite()
        || stop_ps < start_ps
    {
        return Err(Error::invalid(
            "delay sweep needs start <= stop and a positive step",
        ));
    }
    let n = ((stop_ps - start_ps) / step_ps + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start_ps + i as f64 * step_ps).collect())
}
