//! Synthetic carry-chain delay lines: per-tap sampling positions within one
//! clock period, generated from a nominal tap delay plus random and
//! systematic perturbations.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const TAPS_PER_CELL: usize = 8;
pub const GROUPS: usize = 3;

/// Minimum spacing enforced between two sampling positions, in ps.
pub const TIE_EPSILON_PS: f64 = 1e-3;

fn default_clock_period() -> f64 {
    4000.0
}

/// Skew added to every tap from `start_index` (0-based bin) up to the next
/// region's start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockRegion {
    pub start_index: usize,
    pub skew_ps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_carry_cells: usize,
    pub nominal_tap_ps: f64,
    #[serde(default = "default_clock_period")]
    pub clock_period_ps: f64,
    /// Per-tap delay jitter, accumulated along the chain.
    #[serde(default)]
    pub jitter_sigma_ps: f64,
    /// Independent per-tap flip-flop sampling skew.
    #[serde(default)]
    pub ff_skew_sigma_ps: f64,
    /// Systematic offset of each of the eight taps within a cell. Empty means none.
    #[serde(default)]
    pub cell_profile_ps: Vec<f64>,
    #[serde(default)]
    pub input_offset_ps: f64,
    #[serde(default)]
    pub clock_regions: Vec<ClockRegion>,
    #[serde(default)]
    pub seed: u64,
    /// Positional noise applied when the design is re-synthesized.
    #[serde(default)]
    pub resynthesis_noise_ps: f64,
}

impl ModelConfig {
    pub fn num_bins(&self) -> usize {
        self.num_carry_cells * TAPS_PER_CELL
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.nominal_tap_ps,
            self.clock_period_ps,
            self.jitter_sigma_ps,
            self.ff_skew_sigma_ps,
            self.input_offset_ps,
            self.resynthesis_noise_ps,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        if self.num_carry_cells == 0 {
            return Err(Error::invalid("num_carry_cells must be at least 1"));
        }
        if self.nominal_tap_ps <= 0.0 || self.clock_period_ps <= 0.0 {
            return Err(Error::invalid(
                "nominal_tap_ps and clock_period_ps must be positive",
            ));
        }
        if self.jitter_sigma_ps < 0.0
            || self.ff_skew_sigma_ps < 0.0
            || self.resynthesis_noise_ps < 0.0
        {
            return Err(Error::invalid("noise sigmas must be non-negative"));
        }
        if !(self.cell_profile_ps.is_empty() || self.cell_profile_ps.len() == TAPS_PER_CELL) {
            return Err(Error::invalid(format!(
                "cell_profile_ps must have 0 or {TAPS_PER_CELL} entries, got {}",
                self.cell_profile_ps.len()
            )));
        }
        if self.cell_profile_ps.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cell_profile_ps must be finite"));
        }
        let n = self.num_bins();
        let mut prev = None;
        for r in &self.clock_regions {
            if !r.skew_ps.is_finite() {
                return Err(Error::invalid("clock region skew must be finite"));
            }
            if r.start_index >= n {
                return Err(Error::invalid(format!(
                    "clock region starts at bin {} but the line has {n} bins",
                    r.start_index
                )));
            }
            if prev.is_some_and(|p| p >= r.start_index) {
                return Err(Error::invalid("clock regions must be strictly increasing"));
            }
            prev = Some(r.start_index);
        }
        let end = self.nominal_chain_end_ps();
        if end >= self.clock_period_ps {
            return Err(Error::range(format!(
                "nominal chain end {end} ps does not fit in clock period {} ps",
                self.clock_period_ps
            )));
        }
        Ok(())
    }

    /// Latest noiseless sampling position: where the chain would end with all
    /// systematic offsets at their maximum.
    pub fn nominal_chain_end_ps(&self) -> f64 {
        let profile_max = self.cell_profile_ps.iter().copied().fold(0.0, f64::max);
        let skew_max = self
            .clock_regions
            .iter()
            .map(|r| r.skew_ps)
            .fold(0.0, f64::max);
        self.input_offset_ps + self.num_bins() as f64 * self.nominal_tap_ps + profile_max + skew_max
    }

    fn region_skew(&self, bin: usize) -> f64 {
        self.clock_regions
            .iter()
            .take_while(|r| r.start_index <= bin)
            .last()
            .map_or(0.0, |r| r.skew_ps)
    }
}

/// Several delay lines sharing one clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub tdl: Vec<ModelConfig>,
}

impl SystemConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SystemConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .tdl
            .first()
            .ok_or_else(|| Error::invalid("system needs at least one [[tdl]]"))?;
        for t in &self.tdl {
            t.validate()?;
            if t.clock_period_ps != first.clock_period_ps {
                return Err(Error::invalid(
                    "all delay lines must share one clock period",
                ));
            }
        }
        Ok(())
    }

    pub fn clock_period_ps(&self) -> f64 {
        self.tdl[0].clock_period_ps
    }

    pub fn build(&self) -> Result<Vec<DelayLineModel>> {
        self.tdl.iter().map(DelayLineModel::build).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayLineModel {
    positions: Vec<f64>,
    clock_period_ps: f64,
}

impl DelayLineModel {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, &[]);
        let jitter =
            Normal::new(0.0, config.jitter_sigma_ps).map_err(|e| Error::invalid(e.to_string()))?;
        let skew =
            Normal::new(0.0, config.ff_skew_sigma_ps).map_err(|e| Error::invalid(e.to_string()))?;
        let mut cumulative = 0.0;
        let positions = (0..config.num_bins())
            .map(|i| {
                cumulative += config.nominal_tap_ps + jitter.sample(&mut rng);
                let profile = config
                    .cell_profile_ps
                    .get(i % TAPS_PER_CELL)
                    .copied()
                    .unwrap_or(0.0);
                config.input_offset_ps
                    + cumulative
                    + profile
                    + config.region_skew(i)
                    + skew.sample(&mut rng)
            })
            .collect();
        Ok(Self::settle(positions, config.clock_period_ps))
    }

    /// Uses the given positions as-is. They must be distinct and lie strictly
    /// inside one clock period.
    pub fn from_positions(positions: Vec<f64>, clock_period_ps: f64) -> Result<Self> {
        if !(clock_period_ps > 0.0 && clock_period_ps.is_finite()) {
            return Err(Error::invalid("clock period must be positive"));
        }
        if positions.is_empty() {
            return Err(Error::invalid("a delay line needs at least one bin"));
        }
        if positions.iter().any(|&p| !(p > 0.0 && p < clock_period_ps)) {
            return Err(Error::range(
                "sampling positions must lie in (0, clock period)",
            ));
        }
        let mut sorted = positions.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("sampling positions must be distinct"));
        }
        Ok(Self {
            positions,
            clock_period_ps,
        })
    }

    /// Clips into the period and separates ties; the later physical index
    /// moves later.
    fn settle(mut positions: Vec<f64>, period: f64) -> Self {
        for p in &mut positions {
            *p = p.clamp(TIE_EPSILON_PS, period - TIE_EPSILON_PS);
        }
        let mut order: Vec<usize> = (0..positions.len()).collect();
        order.sort_by(|&a, &b| positions[a].total_cmp(&positions[b]).then(a.cmp(&b)));
        for w in 1..order.len() {
            let (prev, cur) = (order[w - 1], order[w]);
            if positions[cur] <= positions[prev] {
                positions[cur] = positions[prev] + TIE_EPSILON_PS;
            }
        }
        Self {
            positions,
            clock_period_ps: period,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.positions.len()
    }

    pub fn num_cells(&self) -> usize {
        self.positions.len() / TAPS_PER_CELL
    }

    pub fn clock_period_ps(&self) -> f64 {
        self.clock_period_ps
    }

    pub fn position(&self, bin: usize) -> f64 {
        self.positions[bin]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Thermometer code latched when the hit has had `phase` ps to propagate
    /// before the sampling edge: a tap reads 1 once the signal has reached
    /// it. Bits are listed in `perceived` order (physical indices).
    pub fn sample(&self, phase: f64, perceived: &[usize]) -> ThermometerCode {
        ThermometerCode {
            bits: perceived
                .iter()
                .map(|&b| self.positions[b] <= phase)
                .collect(),
        }
    }

    /// Ground truth for the bins in `bins`, ordered by sampling position.
    pub fn truth(&self, bins: &[usize]) -> BinTruth {
        let mut order = bins.to_vec();
        order.sort_by(|&a, &b| self.positions[a].total_cmp(&self.positions[b]));
        let starts: Vec<f64> = order.iter().map(|&b| self.positions[b]).collect();
        let n = starts.len();
        let widths = (0..n)
            .map(|i| {
                if i + 1 < n {
                    starts[i + 1] - starts[i]
                } else {
                    starts[0] + self.clock_period_ps - starts[i]
                }
            })
            .collect();
        BinTruth {
            actual_order: order,
            widths,
        }
    }

    /// A new placement of the same design: every position moves by an
    /// independent normal offset.
    pub fn resynthesize(&self, noise_sigma_ps: f64, seed: u64) -> Result<Self> {
        let noise = Normal::new(0.0, noise_sigma_ps).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = rng_for(seed, &[]);
        let positions = self
            .positions
            .iter()
            .map(|&p| p + noise.sample(&mut rng))
            .collect();
        Ok(Self::settle(positions, self.clock_period_ps))
    }

    pub fn write_positions_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["physical_index", "sample_position_ps"])?;
        for (i, p) in self.positions.iter().enumerate() {
            wtr.write_record([(i + 1).to_string(), p.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_positions_csv<R: std::io::Read>(r: R, clock_period_ps: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut positions = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let idx: usize = parse_field(&rec, 0)?;
            if idx != row + 1 {
                return Err(Error::parse(format!(
                    "expected physical_index {}, got {idx}",
                    row + 1
                )));
            }
            positions.push(parse_field(&rec, 1)?);
        }
        Self::from_positions(positions, clock_period_ps)
    }
}

pub(crate) fn parse_field<T: FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| Error::parse(format!("missing column {i}")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::parse(format!("bad value {raw:?} in column {i}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinTruth {
    /// Physical bin indices sorted by sampling position.
    pub actual_order: Vec<usize>,
    /// Distance from each bin (in `actual_order`) to the next, wrapping
    /// around the clock period for the last one.
    pub widths: Vec<f64>,
}

/// The carry cells `c` with `c % 3 == group`, which share one readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupSelector {
    group: usize,
}

impl GroupSelector {
    pub fn new(group: usize) -> Result<Self> {
        if group >= GROUPS {
            return Err(Error::invalid(format!(
                "group must be below {GROUPS}, got {group}"
            )));
        }
        Ok(Self { group })
    }

    pub fn all() -> impl Iterator<Item = GroupSelector> {
        (0..GROUPS).map(|group| GroupSelector { group })
    }

    pub fn index(&self) -> usize {
        self.group
    }

    pub fn cells(&self, num_cells: usize) -> Vec<usize> {
        (self.group..num_cells).step_by(GROUPS).collect()
    }

    /// Physical bin indices of the group in cell order, identity within cells.
    pub fn bins(&self, num_cells: usize) -> Vec<usize> {
        self.cells(num_cells)
            .into_iter()
            .flat_map(|c| c * TAPS_PER_CELL..(c + 1) * TAPS_PER_CELL)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ThermometerCode {
    pub bits: Vec<bool>,
}

impl ThermometerCode {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

impl fmt::Display for ThermometerCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for ThermometerCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::parse(format!("thermometer code {s:?} must be 0/1"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { bits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            num_carry_cells: 6,
            nominal_tap_ps: 3.0,
            clock_period_ps: 400.0,
            jitter_sigma_ps: 0.1,
            ff_skew_sigma_ps: 0.1,
            cell_profile_ps: vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
            input_offset_ps: 2.0,
            clock_regions: vec![ClockRegion {
                start_index: 24,
                skew_ps: 5.0,
            }],
            seed: 11,
            resynthesis_noise_ps: 0.5,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = DelayLineModel::build(&config()).unwrap();
        let b = DelayLineModel::build(&config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_bins(), 48);
        assert_eq!(a.num_cells(), 6);
    }

    #[test]
    fn noiseless_positions_follow_nominal_plus_offsets() {
        let mut c = config();
        c.jitter_sigma_ps = 0.0;
        c.ff_skew_sigma_ps = 0.0;
        let m = DelayLineModel::build(&c).unwrap();
        assert!((m.position(0) - (2.0 + 3.0 + 1.0)).abs() < 1e-12);
        assert!((m.position(1) - (2.0 + 6.0 - 1.0)).abs() < 1e-12);
        assert!((m.position(24) - (2.0 + 75.0 + 1.0 + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn chain_longer_than_period_is_rejected() {
        let mut c = config();
        c.num_carry_cells = 20;
        assert!(matches!(DelayLineModel::build(&c), Err(Error::Range(_))));
    }

    #[test]
    fn bad_parameters_are_rejected() {
        let mut c = config();
        c.cell_profile_ps = vec![0.0; 3];
        assert!(c.validate().is_err());
        let mut c = config();
        c.jitter_sigma_ps = -1.0;
        assert!(c.validate().is_err());
        let mut c = config();
        c.clock_regions.push(ClockRegion {
            start_index: 10,
            skew_ps: 0.0,
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn sample_is_monotone_thermometer_in_physical_order() {
        let m = DelayLineModel::build(&config()).unwrap();
        let identity: Vec<usize> = m.truth(&(0..m.num_bins()).collect::<Vec<_>>()).actual_order;
        let code = m.sample(100.0, &identity);
        let first_zero = code.bits.iter().position(|&b| !b).unwrap();
        assert!(first_zero > 0);
        assert!(code.bits[..first_zero].iter().all(|&b| b));
        assert!(code.bits[first_zero..].iter().all(|&b| !b));
        assert!(m.sample(0.0, &identity).bits.iter().all(|&b| !b));
    }

    #[test]
    fn positions_are_distinct_and_inside_period() {
        let m = DelayLineModel::build(&config()).unwrap();
        let mut p = m.positions().to_vec();
        p.sort_by(f64::total_cmp);
        assert!(p.windows(2).all(|w| w[1] > w[0]));
        assert!(p[0] > 0.0 && p[p.len() - 1] < 400.0);
    }

    #[test]
    fn resynthesis_moves_positions_deterministically() {
        let m = DelayLineModel::build(&config()).unwrap();
        let a = m.resynthesize(0.5, 3).unwrap();
        assert_eq!(a, m.resynthesize(0.5, 3).unwrap());
        assert_ne!(a, m);
        assert_eq!(m.resynthesize(0.0, 3).unwrap(), m);
    }

    #[test]
    fn truth_widths_cover_the_period() {
        let m = DelayLineModel::build(&config()).unwrap();
        let t = m.truth(&GroupSelector::new(1).unwrap().bins(m.num_cells()));
        assert_eq!(t.actual_order.len(), 16);
        let total: f64 = t.widths.iter().sum();
        assert!((total - 400.0).abs() < 1e-9);
    }

    #[test]
    fn group_selector_partitions_cells() {
        let cells: Vec<Vec<usize>> = GroupSelector::all().map(|g| g.cells(7)).collect();
        assert_eq!(cells, vec![vec![0, 3, 6], vec![1, 4], vec![2, 5]]);
        assert_eq!(
            GroupSelector::new(2).unwrap().bins(3),
            (16..24).collect::<Vec<_>>()
        );
        assert!(GroupSelector::new(3).is_err());
    }

    #[test]
    fn positions_csv_round_trip() {
        let m = DelayLineModel::build(&config()).unwrap();
        let mut buf = Vec::new();
        m.write_positions_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("physical_index,sample_position_ps\n1,"));
        let back = DelayLineModel::read_positions_csv(&buf[..], 400.0).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn system_config_parses_toml() {
        let text = r#"
            [[tdl]]
            num_carry_cells = 3
            nominal_tap_ps = 3.0
            clock_period_ps = 200.0
            seed = 1
            clock_regions = [{ start_index = 8, skew_ps = 1.5 }]

            [[tdl]]
            num_carry_cells = 3
            nominal_tap_ps = 3.0
            clock_period_ps = 200.0
            input_offset_ps = 0.7
            seed = 2
        "#;
        let sys = SystemConfig::from_toml_str(text).unwrap();
        assert_eq!(sys.tdl.len(), 2);
        assert_eq!(sys.clock_period_ps(), 200.0);
        assert_eq!(sys.build().unwrap().len(), 2);
        assert!(SystemConfig::from_toml_str("tdl = []").is_err());
        assert!(SystemConfig::from_toml_str(
            "[[tdl]]\nnum_carry_cells = 1\nnominal_tap_ps = 1.0\nbogus = 1"
        )
        .is_err());
    }

    #[test]
    fn thermometer_code_text_round_trip() {
        let c: ThermometerCode = "11101000".parse().unwrap();
        assert_eq!(c.to_string(), "11101000");
        assert!("1120".parse::<ThermometerCode>().is_err());
    }
}
