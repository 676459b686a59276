//! Interleaving calibrated bin sequences from several delay lines into one
//! line ordered by start time, dropping bins too narrow to trust.

use std::collections::BTreeSet;
use std::io::Write;

use crate::density::{csv_body, read_header, run_readout_density, DensityHistogram, Readout};
use crate::error::{Error, Result};
use crate::model::{parse_field, DelayLineModel};

/// Bin start times from widths: the first bin starts at 0 and each next bin
/// starts where the previous one ends.
pub fn start_times(widths: &[f64]) -> Result<Vec<f64>> {
    if let Some(w) = widths.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::invalid(format!(
            "bin width {w} must be finite and non-negative"
        )));
    }
    let mut t = 0.0;
    Ok(widths
        .iter()
        .map(|w| {
            let s = t;
            t += w;
            s
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineBin {
    /// Physical index in the source line.
    pub source_bin: usize,
    /// Relative to the timeline origin.
    pub start_ps: f64,
    pub width_ps: f64,
}

/// Calibrated bins of one segment in readout order.
#[derive(Debug, Clone, PartialEq)]
pub struct BinTimeline {
    pub source_tdl: usize,
    /// Phase at which the first bin starts.
    pub origin_ps: f64,
    pub clock_period_ps: f64,
    pub bins: Vec<TimelineBin>,
}

impl BinTimeline {
    /// Timeline of the bins `perceived` (physical indices, readout order)
    /// measured by `hist`.
    pub fn from_histogram(
        source_tdl: usize,
        perceived: &[usize],
        hist: &DensityHistogram,
    ) -> Result<Self> {
        if perceived.len() != hist.len() {
            return Err(Error::invalid(format!(
                "{} bins but the histogram has {}",
                perceived.len(),
                hist.len()
            )));
        }
        let widths = hist.widths();
        let starts = start_times(&widths)?;
        Ok(Self {
            source_tdl,
            origin_ps: hist.origin_ps(),
            clock_period_ps: hist.clock_period_ps,
            bins: perceived
                .iter()
                .zip(starts.into_iter().zip(widths))
                .map(|(&source_bin, (start_ps, width_ps))| TimelineBin {
                    source_bin,
                    start_ps,
                    width_ps,
                })
                .collect(),
        })
    }
}

/// A bin offered to [`interleave`].
#[derive(Debug, Clone, PartialEq)]
pub struct SourceBin {
    pub source_tdl: usize,
    pub source_bin: usize,
    /// Absolute start within the clock period.
    pub start_ps: f64,
    pub source_width_ps: f64,
    /// Already filtered out by an earlier merge.
    pub dropped: bool,
}

/// Anything whose bins can be interleaved.
pub trait BinSource {
    fn clock_period_ps(&self) -> f64;
    fn source_bins(&self) -> Vec<SourceBin>;
    /// Largest threshold already applied to these bins.
    fn filter_threshold_ps(&self) -> f64 {
        0.0
    }
}

impl BinSource for BinTimeline {
    fn clock_period_ps(&self) -> f64 {
        self.clock_period_ps
    }

    fn source_bins(&self) -> Vec<SourceBin> {
        self.bins
            .iter()
            .map(|b| SourceBin {
                source_tdl: self.source_tdl,
                source_bin: b.source_bin,
                start_ps: self.origin_ps + b.start_ps,
                source_width_ps: b.width_ps,
                dropped: false,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedBin {
    pub source_tdl: usize,
    pub source_bin: usize,
    pub start_ps: f64,
    pub source_width_ps: f64,
    /// Distance to the next bin of the merged sequence, retained or not.
    pub gap_ps: f64,
    pub retained: bool,
}

/// An interleaved line. Every offered bin is kept in start order; filtered
/// bins stay listed but are not retained, so later merges drop them too.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedTdl {
    pub clock_period_ps: f64,
    pub filter_threshold_ps: f64,
    pub bins: Vec<MergedBin>,
}

impl BinSource for MergedTdl {
    fn clock_period_ps(&self) -> f64 {
        self.clock_period_ps
    }

    fn filter_threshold_ps(&self) -> f64 {
        self.filter_threshold_ps
    }

    fn source_bins(&self) -> Vec<SourceBin> {
        self.bins
            .iter()
            .map(|b| SourceBin {
                source_tdl: b.source_tdl,
                source_bin: b.source_bin,
                start_ps: b.start_ps,
                source_width_ps: b.source_width_ps,
                dropped: !b.retained,
            })
            .collect()
    }
}

impl MergedTdl {
    pub fn retained(&self) -> impl Iterator<Item = &MergedBin> {
        self.bins.iter().filter(|b| b.retained)
    }

    pub fn retained_count(&self) -> usize {
        self.retained().count()
    }

    /// `(tdl, physical bin)` of the retained bins in merged order.
    pub fn ordering(&self) -> Vec<(usize, usize)> {
        self.retained()
            .map(|b| (b.source_tdl, b.source_bin))
            .collect()
    }

    /// Width of each retained bin: distance to the next retained start,
    /// wrapping around the clock period.
    pub fn retained_widths(&self) -> Vec<f64> {
        let starts: Vec<f64> = self.retained().map(|b| b.start_ps).collect();
        let n = starts.len();
        (0..n)
            .map(|i| {
                if i + 1 < n {
                    starts[i + 1] - starts[i]
                } else {
                    starts[0] + self.clock_period_ps - starts[i]
                }
            })
            .collect()
    }

    /// Readout of the retained bins in merged order.
    pub fn readout(&self, models: &[DelayLineModel]) -> Result<Readout> {
        let positions = self
            .retained()
            .map(|b| {
                let m = models.get(b.source_tdl).ok_or_else(|| {
                    Error::invalid(format!(
                        "merged line refers to unknown tdl {}",
                        b.source_tdl
                    ))
                })?;
                if b.source_bin >= m.num_bins() {
                    return Err(Error::invalid(format!(
                        "tdl {} has no bin {}",
                        b.source_tdl, b.source_bin
                    )));
                }
                Ok(m.position(b.source_bin))
            })
            .collect::<Result<Vec<f64>>>()?;
        Readout::new(&positions, self.clock_period_ps)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# clock_period_ps={}", self.clock_period_ps)?;
        writeln!(w, "# filter_threshold_ps={}", self.filter_threshold_ps)?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "rank",
            "source_tdl",
            "source_bin",
            "start_time_ps",
            "width_ps",
            "source_width_ps",
            "gap_ps",
            "retained",
        ])?;
        let widths = self.retained_widths();
        let mut rank = 0;
        for b in &self.bins {
            let (rank_s, width) = if b.retained {
                rank += 1;
                (rank.to_string(), widths[rank - 1])
            } else {
                ("0".to_string(), 0.0)
            };
            wtr.write_record([
                rank_s,
                b.source_tdl.to_string(),
                (b.source_bin + 1).to_string(),
                b.start_ps.to_string(),
                width.to_string(),
                b.source_width_ps.to_string(),
                b.gap_ps.to_string(),
                u8::from(b.retained).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let header = read_header(text);
        let get = |k: &str| -> Result<f64> {
            header
                .get(k)
                .ok_or_else(|| Error::parse(format!("merged file lacks `# {k}=`")))?
                .parse()
                .map_err(|_| Error::parse(format!("bad {k}")))
        };
        let mut bins = Vec::new();
        for rec in csv_body(text).records() {
            let rec = rec?;
            let source_bin: usize = parse_field(&rec, 2)?;
            let retained: u8 = parse_field(&rec, 7)?;
            bins.push(MergedBin {
                source_tdl: parse_field(&rec, 1)?,
                source_bin: source_bin
                    .checked_sub(1)
                    .ok_or_else(|| Error::parse("source_bin is 1-based"))?,
                start_ps: parse_field(&rec, 3)?,
                source_width_ps: parse_field(&rec, 5)?,
                gap_ps: parse_field(&rec, 6)?,
                retained: retained == 1,
            });
        }
        if !bins.iter().any(|b| b.retained) {
            return Err(Error::parse("merged file has no retained bins"));
        }
        Ok(Self {
            clock_period_ps: get("clock_period_ps")?,
            filter_threshold_ps: get("filter_threshold_ps")?,
            bins,
        })
    }
}

/// Merges all bins of `sources` by absolute start time (ties by tdl, then
/// bin) and drops every bin whose gap to the next bin is below
/// `threshold_ps`. Bins dropped by an earlier merge stay dropped but still
/// count as neighbours, so nested merges equal one flat merge.
pub fn interleave(sources: &[&dyn BinSource], threshold_ps: f64) -> Result<MergedTdl> {
    let first = sources
        .first()
        .ok_or_else(|| Error::invalid("nothing to interleave"))?;
    if !(threshold_ps >= 0.0 && threshold_ps.is_finite()) {
        return Err(Error::invalid("filter threshold must be non-negative"));
    }
    let period = first.clock_period_ps();
    if sources.iter().any(|s| s.clock_period_ps() != period) {
        return Err(Error::invalid("all sources must share one clock period"));
    }
    let mut bins: Vec<SourceBin> = sources.iter().flat_map(|s| s.source_bins()).collect();
    let mut seen = BTreeSet::new();
    for b in &bins {
        if !seen.insert((b.source_tdl, b.source_bin)) {
            return Err(Error::invalid(format!(
                "bin {} of tdl {} is offered twice",
                b.source_bin, b.source_tdl
            )));
        }
        if !b.start_ps.is_finite() {
            return Err(Error::invalid("bin start must be finite"));
        }
    }
    bins.sort_by(|a, b| {
        a.start_ps
            .total_cmp(&b.start_ps)
            .then(a.source_tdl.cmp(&b.source_tdl))
            .then(a.source_bin.cmp(&b.source_bin))
    });
    let n = bins.len();
    let merged: Vec<MergedBin> = (0..n)
        .map(|i| {
            let b = &bins[i];
            let gap = if i + 1 < n {
                bins[i + 1].start_ps - b.start_ps
            } else {
                bins[0].start_ps + period - b.start_ps
            };
            MergedBin {
                source_tdl: b.source_tdl,
                source_bin: b.source_bin,
                start_ps: b.start_ps,
                source_width_ps: b.source_width_ps,
                gap_ps: gap,
                retained: !b.dropped && gap >= threshold_ps,
            }
        })
        .collect();
    if !merged.iter().any(|b| b.retained) {
        return Err(Error::invalid("every bin was filtered out"));
    }
    let filter_threshold_ps = sources
        .iter()
        .map(|s| s.filter_threshold_ps())
        .fold(threshold_ps, f64::max);
    Ok(MergedTdl {
        clock_period_ps: period,
        filter_threshold_ps,
        bins: merged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeReport {
    pub bins: usize,
    pub tapped: usize,
    pub tapped_fraction: f64,
    /// Bins with a positive merged width that got no hits.
    pub new_missing_codes: usize,
    pub min_width_ps: f64,
    pub max_width_ps: f64,
    pub mean_width_ps: f64,
    pub histogram: DensityHistogram,
}

/// Density test of the merged line read out in merged order.
pub fn validate_merge(
    models: &[DelayLineModel],
    merged: &MergedTdl,
    shots: u64,
    seed: u64,
) -> Result<MergeReport> {
    let histogram = run_readout_density(&merged.readout(models)?, shots, seed)?;
    let widths = histogram.widths();
    let tapped = histogram.counts.iter().filter(|&&c| c > 0).count();
    let new_missing_codes = histogram
        .counts
        .iter()
        .zip(merged.retained_widths())
        .filter(|(&c, w)| c == 0 && *w > 0.0)
        .count();
    let n = widths.len();
    Ok(MergeReport {
        bins: n,
        tapped,
        tapped_fraction: tapped as f64 / n as f64,
        new_missing_codes,
        min_width_ps: widths.iter().copied().fold(f64::INFINITY, f64::min),
        max_width_ps: widths.iter().copied().fold(0.0, f64::max),
        mean_width_ps: widths.iter().sum::<f64>() / n as f64,
        histogram,
    })
}
