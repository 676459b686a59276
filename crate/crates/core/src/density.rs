//! Code density tests: histogram of one-hot outputs for hits uniformly
//! distributed over one clock period.

use std::collections::BTreeMap;
use std::io::Write;

use crate::encoder::{encode_anchored, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::{parse_field, DelayLineModel};
use crate::phase::PhaseSample;

/// Emission thresholds for a readout order. Bin `j` is emitted for phases in
/// `[m[j], m[j + 1])` where `m` is the running maximum of the sampling
/// positions in readout order; phases below `m[0]` reach no bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    thresholds: Vec<f64>,
    clock_period_ps: f64,
}

impl Readout {
    pub fn new(positions: &[f64], clock_period_ps: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("readout needs at least one bin"));
        }
        if positions
            .iter()
            .any(|&p| !(p >= 0.0 && p < clock_period_ps))
        {
            return Err(Error::range(
                "sampling positions must lie in [0, clock period)",
            ));
        }
        let mut max = f64::NEG_INFINITY;
        let thresholds = positions
            .iter()
            .map(|&p| {
                max = max.max(p);
                max
            })
            .collect();
        Ok(Self {
            thresholds,
            clock_period_ps,
        })
    }

    pub fn for_bins(model: &DelayLineModel, perceived: &[usize]) -> Result<Self> {
        if let Some(&b) = perceived.iter().find(|&&b| b >= model.num_bins()) {
            return Err(Error::invalid(format!("bin {b} is outside the delay line")));
        }
        let positions: Vec<f64> = perceived.iter().map(|&b| model.position(b)).collect();
        Self::new(&positions, model.clock_period_ps())
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn clock_period_ps(&self) -> f64 {
        self.clock_period_ps
    }

    /// Bin emitted for a hit with `phase` ps of propagation, `None` when the
    /// hit reaches no bin.
    pub fn emit(&self, phase: f64) -> Option<usize> {
        self.thresholds
            .partition_point(|&t| t <= phase)
            .checked_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityHistogram {
    /// Hits per bin in readout order. Hits that reach no bin are counted in
    /// the last bin, which they join on the following clock cycle.
    pub counts: Vec<u64>,
    /// Of the hits in the last bin, how many reached no bin at all.
    pub underflow: u64,
    pub total_shots: u64,
    pub clock_period_ps: f64,
}

impl DensityHistogram {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn widths(&self) -> Vec<f64> {
        let scale = self.clock_period_ps / self.total_shots as f64;
        self.counts.iter().map(|&c| c as f64 * scale).collect()
    }

    /// Where bin 0 starts relative to the phase origin of the test.
    pub fn origin_ps(&self) -> f64 {
        self.underflow as f64 / self.total_shots as f64 * self.clock_period_ps
    }

    pub fn tapped_pattern(&self, min_count_threshold: u64) -> TappedPattern {
        TappedPattern {
            tapped: self
                .counts
                .iter()
                .map(|&c| c > min_count_threshold)
                .collect(),
            min_count_threshold,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# total_shots={}", self.total_shots)?;
        writeln!(w, "# clock_period_ps={}", self.clock_period_ps)?;
        writeln!(w, "# underflow={}", self.underflow)?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["bin_index", "count", "width_ps", "tapped"])?;
        for (i, (c, width)) in self.counts.iter().zip(self.widths()).enumerate() {
            wtr.write_record([
                (i + 1).to_string(),
                c.to_string(),
                width.to_string(),
                u8::from(*c > 0).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let header = read_header(text);
        let get = |key: &str| {
            header
                .get(key)
                .ok_or_else(|| Error::parse(format!("density file lacks `# {key}=`")))
        };
        let total_shots: u64 = get("total_shots")?
            .parse()
            .map_err(|_| Error::parse("bad total_shots"))?;
        let clock_period_ps: f64 = get("clock_period_ps")?
            .parse()
            .map_err(|_| Error::parse("bad clock_period_ps"))?;
        let underflow: u64 = get("underflow")?
            .parse()
            .map_err(|_| Error::parse("bad underflow"))?;
        let mut counts = Vec::new();
        for (row, rec) in csv_body(text).records().enumerate() {
            let rec = rec?;
            let idx: usize = parse_field(&rec, 0)?;
            if idx != row + 1 {
                return Err(Error::parse(format!(
                    "expected bin_index {}, got {idx}",
                    row + 1
                )));
            }
            counts.push(parse_field(&rec, 1)?);
        }
        let hist = Self {
            counts,
            underflow,
            total_shots,
            clock_period_ps,
        };
        hist.validate()?;
        Ok(hist)
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.total_shots == 0 {
            return Err(Error::invalid("empty density histogram"));
        }
        if self.counts.iter().sum::<u64>() != self.total_shots {
            return Err(Error::invalid("bin counts do not add up to total_shots"));
        }
        if self.underflow > *self.counts.last().expect("non-empty") {
            return Err(Error::invalid("underflow exceeds the last bin's count"));
        }
        Ok(())
    }
}

/// `# key=value` lines at the top of a data file.
pub(crate) fn read_header(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map_while(|l| l.strip_prefix('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub(crate) fn csv_body(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TappedPattern {
    pub tapped: Vec<bool>,
    pub min_count_threshold: u64,
}

impl TappedPattern {
    pub fn tapped_count(&self) -> usize {
        self.tapped.iter().filter(|&&t| t).count()
    }

    pub fn tapped_fraction(&self) -> f64 {
        self.tapped_count() as f64 / self.tapped.len() as f64
    }

    pub fn missing_codes(&self) -> usize {
        self.tapped.len() - self.tapped_count()
    }
}

/// Expected hit count of a bin of `width_ps` in a test of `shots` hits.
pub fn expected_count(width_ps: f64, shots: u64, clock_period_ps: f64) -> f64 {
    width_ps / clock_period_ps * shots as f64
}

/// Density test for an arbitrary readout.
pub fn run_readout_density(readout: &Readout, shots: u64, seed: u64) -> Result<DensityHistogram> {
    let sample = PhaseSample::new(shots, readout.clock_period_ps, seed)?;
    let mut below = Vec::with_capacity(readout.len());
    let mut memo: Option<(f64, u64)> = None;
    for &t in &readout.thresholds {
        let c = match memo {
            Some((x, c)) if x == t => c,
            _ => sample.count_below(t),
        };
        memo = Some((t, c));
        below.push(c);
    }
    below.push(shots);
    let mut counts: Vec<u64> = below.windows(2).map(|w| w[1] - w[0]).collect();
    let underflow = below[0];
    *counts.last_mut().expect("non-empty readout") += underflow;
    Ok(DensityHistogram {
        counts,
        underflow,
        total_shots: shots,
        clock_period_ps: readout.clock_period_ps,
    })
}

/// Density test of `model` read out in `perceived` order (physical indices).
pub fn run_density_test(
    model: &DelayLineModel,
    perceived: &[usize],
    shots: u64,
    seed: u64,
) -> Result<DensityHistogram> {
    run_readout_density(&Readout::for_bins(model, perceived)?, shots, seed)
}

/// Same test as [`run_density_test`], but latching and encoding a
/// thermometer code for every individual hit.
pub fn run_density_test_per_shot(
    model: &DelayLineModel,
    perceived: &[usize],
    shots: u64,
    seed: u64,
    encoder: EncoderConfig,
) -> Result<DensityHistogram> {
    if perceived.is_empty() {
        return Err(Error::invalid("readout needs at least one bin"));
    }
    let sample = PhaseSample::new(shots, model.clock_period_ps(), seed)?;
    let n = perceived.len();
    let mut counts = vec![0u64; n];
    let mut underflow = 0;
    for phase in sample.phases() {
        match encode_anchored(&model.sample(phase, perceived), encoder) {
            Some(j) => counts[j] += 1,
            None => {
                underflow += 1;
                counts[n - 1] += 1;
            }
        }
    }
    Ok(DensityHistogram {
        counts,
        underflow,
        total_shots: shots,
        clock_period_ps: model.clock_period_ps(),
    })
}
