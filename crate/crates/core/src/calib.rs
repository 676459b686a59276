//! Linearity metrics, bin-width calibration weights and fine-time lookup.

use std::fmt::Write as _;
use std::io::Write;

use crate::density::{csv_body, read_header, DensityHistogram};
use crate::error::{Error, Result};
use crate::iti::start_times;
use crate::model::parse_field;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearityReport {
    pub bins: usize,
    pub tapped: usize,
    pub lsb_ps: f64,
    pub dnl: Vec<f64>,
    pub inl: Vec<f64>,
    pub dnl_min: f64,
    pub dnl_max: f64,
    pub sigma_dnl: f64,
    pub inl_min: f64,
    pub inl_max: f64,
    pub sigma_inl: f64,
    /// Width of a uniform bin with the same quantization noise.
    pub w_eq_ps: f64,
    /// RMS quantization error.
    pub sigma_eq_ps: f64,
    /// Mean width of the bins that produce hits.
    pub resolution_ps: f64,
}

impl LinearityReport {
    pub fn dnl_pkpk(&self) -> f64 {
        self.dnl_max - self.dnl_min
    }

    pub fn inl_pkpk(&self) -> f64 {
        self.inl_max - self.inl_min
    }

    pub fn write_bins_csv<W: Write>(&self, widths: &[f64], w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["bin", "width_ps", "dnl_lsb", "inl_lsb"])?;
        for (i, ((wd, d), n)) in widths.iter().zip(&self.dnl).zip(&self.inl).enumerate() {
            wtr.write_record([
                (i + 1).to_string(),
                wd.to_string(),
                d.to_string(),
                n.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn population_sigma(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Linearity of a line whose ideal bin width is its mean width.
pub fn linearity(widths: &[f64]) -> Result<LinearityReport> {
    let lsb = widths.iter().sum::<f64>() / widths.len().max(1) as f64;
    linearity_against(widths, lsb)
}

/// Linearity relative to a given ideal bin width.
pub fn linearity_against(widths: &[f64], lsb_ps: f64) -> Result<LinearityReport> {
    if widths.is_empty() {
        return Err(Error::invalid("linearity needs at least one bin"));
    }
    if widths.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("bin widths must be finite and non-negative"));
    }
    if !(lsb_ps > 0.0 && lsb_ps.is_finite()) {
        return Err(Error::invalid("LSB must be positive"));
    }
    let dnl: Vec<f64> = widths.iter().map(|w| (w - lsb_ps) / lsb_ps).collect();
    let mut acc = 0.0;
    let inl: Vec<f64> = dnl
        .iter()
        .map(|d| {
            acc += d;
            acc
        })
        .collect();
    let total: f64 = widths.iter().sum();
    let sigma_eq = (widths.iter().map(|w| w.powi(3)).sum::<f64>() / (12.0 * total)).sqrt();
    let tapped: Vec<f64> = widths.iter().copied().filter(|&w| w > 0.0).collect();
    let (dnl_min, dnl_max) = min_max(&dnl);
    let (inl_min, inl_max) = min_max(&inl);
    Ok(LinearityReport {
        bins: widths.len(),
        tapped: tapped.len(),
        lsb_ps,
        sigma_dnl: population_sigma(&dnl),
        sigma_inl: population_sigma(&inl),
        dnl,
        inl,
        dnl_min,
        dnl_max,
        inl_min,
        inl_max,
        w_eq_ps: sigma_eq * 12f64.sqrt(),
        sigma_eq_ps: sigma_eq,
        resolution_ps: tapped.iter().sum::<f64>() / tapped.len().max(1) as f64,
    })
}

/// Bin-width calibration weights `lsb / width`.
pub fn weights(widths: &[f64], lsb_ps: f64) -> Result<Vec<f64>> {
    widths
        .iter()
        .enumerate()
        .map(|(bin, &w)| {
            if w > 0.0 {
                Ok(lsb_ps / w)
            } else {
                Err(Error::MissingCode { bin })
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub start_ps: f64,
    pub width_ps: f64,
    pub nu: f64,
}

impl CalibrationBin {
    /// Calibrated fine time of a hit in this bin: the bin centre.
    pub fn fine_time_ps(&self) -> f64 {
        self.start_ps + self.width_ps / 2.0
    }
}

/// Per-bin start, width and weight of a calibrated line.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub clock_period_ps: f64,
    /// Phase at which bin 0 starts, from the density test the table came from.
    pub origin_ps: f64,
    pub lsb_ps: f64,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationTable {
    pub fn from_widths(widths: &[f64]) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::invalid("calibration needs at least one bin"));
        }
        let total: f64 = widths.iter().sum();
        let lsb = total / widths.len() as f64;
        let nu = weights(widths, lsb)?;
        let starts = start_times(widths)?;
        Ok(Self {
            clock_period_ps: total,
            origin_ps: 0.0,
            lsb_ps: lsb,
            bins: starts
                .into_iter()
                .zip(widths)
                .zip(nu)
                .map(|((start_ps, &width_ps), nu)| CalibrationBin {
                    start_ps,
                    width_ps,
                    nu,
                })
                .collect(),
        })
    }

    pub fn from_histogram(hist: &DensityHistogram) -> Result<Self> {
        let mut t = Self::from_widths(&hist.widths())?;
        t.origin_ps = hist.origin_ps();
        t.clock_period_ps = hist.clock_period_ps;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn fine_time(&self, bin: usize) -> Result<f64> {
        self.bins
            .get(bin)
            .map(CalibrationBin::fine_time_ps)
            .ok_or(Error::UncalibratedBin {
                bin,
                len: self.bins.len(),
            })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# clock_period_ps={}", self.clock_period_ps)?;
        writeln!(w, "# origin_ps={}", self.origin_ps)?;
        writeln!(w, "# lsb_ps={}", self.lsb_ps)?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["bin", "start_ps", "width_ps", "nu", "fine_time_ps"])?;
        for (i, b) in self.bins.iter().enumerate() {
            wtr.write_record([
                (i + 1).to_string(),
                b.start_ps.to_string(),
                b.width_ps.to_string(),
                b.nu.to_string(),
                b.fine_time_ps().to_string(),
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
                .ok_or_else(|| Error::parse(format!("calibration file lacks `# {k}=`")))?
                .parse()
                .map_err(|_| Error::parse(format!("bad {k}")))
        };
        let mut bins = Vec::new();
        for (row, rec) in csv_body(text).records().enumerate() {
            let rec = rec?;
            let idx: usize = parse_field(&rec, 0)?;
            if idx != row + 1 {
                return Err(Error::parse(format!("expected bin {}, got {idx}", row + 1)));
            }
            bins.push(CalibrationBin {
                start_ps: parse_field(&rec, 1)?,
                width_ps: parse_field(&rec, 2)?,
                nu: parse_field(&rec, 3)?,
            });
        }
        if bins.is_empty() {
            return Err(Error::parse("calibration file lists no bins"));
        }
        Ok(Self {
            clock_period_ps: get("clock_period_ps")?,
            origin_ps: get("origin_ps")?,
            lsb_ps: get("lsb_ps")?,
            bins,
        })
    }
}

/// Raw per-bin counts scaled by the table's weights.
pub fn apply_calibration(raw_counts: &[u64], table: &CalibrationTable) -> Result<Vec<f64>> {
    if raw_counts.len() != table.len() {
        return Err(Error::invalid(format!(
            "{} counts for a {}-bin calibration table",
            raw_counts.len(),
            table.len()
        )));
    }
    Ok(raw_counts
        .iter()
        .zip(&table.bins)
        .map(|(&c, b)| c as f64 * b.nu)
        .collect())
}

/// Widths implied by calibrated counts of a density test with `total_shots`
/// hits over `clock_period_ps`.
pub fn calibrated_widths(
    raw_counts: &[u64],
    total_shots: u64,
    table: &CalibrationTable,
) -> Result<Vec<f64>> {
    let scale = table.clock_period_ps / total_shots as f64;
    Ok(apply_calibration(raw_counts, table)?
        .into_iter()
        .map(|c| c * scale)
        .collect())
}

type Metric = (&'static str, fn(&LinearityReport) -> f64);

/// Linearity summary with one column per line, rows as in the usual
/// comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearityTable {
    pub columns: Vec<(String, LinearityReport)>,
}

impl LinearityTable {
    fn rows(&self) -> Vec<(&'static str, Vec<String>)> {
        let pair = |a: f64, b: f64| format!("[{a:.2}, {b:.2}]");
        let col = |f: &dyn Fn(&LinearityReport) -> String| -> Vec<String> {
            self.columns.iter().map(|(_, r)| f(r)).collect()
        };
        vec![
            ("Bins", col(&|r| r.bins.to_string())),
            ("Tapped bins", col(&|r| r.tapped.to_string())),
            ("LSB (ps)", col(&|r| format!("{:.3}", r.lsb_ps))),
            ("DNL (LSB)", col(&|r| pair(r.dnl_min, r.dnl_max))),
            ("DNL pk-pk (LSB)", col(&|r| format!("{:.2}", r.dnl_pkpk()))),
            ("sigma DNL (LSB)", col(&|r| format!("{:.3}", r.sigma_dnl))),
            ("INL (LSB)", col(&|r| pair(r.inl_min, r.inl_max))),
            ("INL pk-pk (LSB)", col(&|r| format!("{:.2}", r.inl_pkpk()))),
            ("sigma INL (LSB)", col(&|r| format!("{:.3}", r.sigma_inl))),
            ("w_eq (ps)", col(&|r| format!("{:.3}", r.w_eq_ps))),
            ("sigma_eq (ps)", col(&|r| format!("{:.3}", r.sigma_eq_ps))),
            (
                "Resolution (ps)",
                col(&|r| format!("{:.3}", r.resolution_ps)),
            ),
        ]
    }

    pub fn render_text(&self) -> String {
        let rows = self.rows();
        let mut widths = vec![rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0)];
        for (i, (label, _)) in self.columns.iter().enumerate() {
            let w = rows.iter().map(|(_, v)| v[i].len()).max().unwrap_or(0);
            widths.push(w.max(label.len()));
        }
        let mut s = String::new();
        let _ = write!(s, "{:<w$}", "", w = widths[0]);
        for ((label, _), w) in self.columns.iter().zip(&widths[1..]) {
            let _ = write!(s, "  {label:>w$}");
        }
        s.push('\n');
        for (name, values) in rows {
            let _ = write!(s, "{name:<w$}", w = widths[0]);
            for (v, w) in values.iter().zip(&widths[1..]) {
                let _ = write!(s, "  {v:>w$}");
            }
            s.push('\n');
        }
        s
    }

    /// Full-precision values, one metric per row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut head = vec!["metric".to_string()];
        head.extend(self.columns.iter().map(|(l, _)| l.clone()));
        wtr.write_record(&head)?;
        let metrics: [Metric; 14] = [
            ("bins", |r| r.bins as f64),
            ("tapped", |r| r.tapped as f64),
            ("lsb_ps", |r| r.lsb_ps),
            ("dnl_min", |r| r.dnl_min),
            ("dnl_max", |r| r.dnl_max),
            ("dnl_pkpk", |r| r.dnl_pkpk()),
            ("sigma_dnl", |r| r.sigma_dnl),
            ("inl_min", |r| r.inl_min),
            ("inl_max", |r| r.inl_max),
            ("inl_pkpk", |r| r.inl_pkpk()),
            ("sigma_inl", |r| r.sigma_inl),
            ("w_eq_ps", |r| r.w_eq_ps),
            ("sigma_eq_ps", |r| r.sigma_eq_ps),
            ("resolution_ps", |r| r.resolution_ps),
        ];
        for (name, f) in metrics {
            let mut row = vec![name.to_string()];
            row.extend(self.columns.iter().map(|(_, r)| f(r).to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
