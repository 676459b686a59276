use std::collections::BTreeMap;
use std::fmt::Write;
use std::str::FromStr;

use super::dag::{build_dag, enumerate_consistent, select_candidate, PartialOrderDag};
use super::library::build_error_library;
use super::unit::{UnitMask, UnitOrder};
use crate::density::{run_density_test, DensityHistogram, TappedPattern};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{DelayLineModel, GroupSelector, TAPS_PER_CELL};

/// Reference order used to pick one candidate among several.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Ansatz {
    #[default]
    Identity,
    /// The order most units of the segment agree on, taking each unit's
    /// candidate closest to identity.
    Pattern,
    Fixed(UnitOrder),
}

impl FromStr for Ansatz {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(Ansatz::Identity),
            "pattern" => Ok(Ansatz::Pattern),
            other => Ok(Ansatz::Fixed(other.parse().map_err(|_| {
                Error::parse(format!(
                    "ansatz must be `identity`, `pattern` or eight 1-based labels, got {other:?}"
                ))
            })?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PorParams {
    pub encoder: EncoderConfig,
    pub ansatz: Ansatz,
    /// A bin counts as tapped when its hit count exceeds this.
    pub min_count_threshold: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitState {
    pub cell: usize,
    /// Tap labels in readout order.
    pub perceived: UnitOrder,
    /// Actual orders still consistent with every observation so far; `None`
    /// before the first observation.
    pub candidates: Option<Vec<UnitOrder>>,
}

impl UnitState {
    pub fn is_resolved(&self) -> bool {
        matches!(&self.candidates, Some(c) if c.len() == 1)
    }
}

/// Readout orders and candidate sets for every unit of one segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PorState {
    pub tdl: usize,
    pub group: GroupSelector,
    /// Number of observations folded in so far.
    pub stage: u32,
    pub units: Vec<UnitState>,
}

impl PorState {
    pub fn new(tdl: usize, group: GroupSelector, num_cells: usize) -> Result<Self> {
        let units: Vec<UnitState> = group
            .cells(num_cells)
            .into_iter()
            .map(|cell| UnitState {
                cell,
                perceived: UnitOrder::IDENTITY,
                candidates: None,
            })
            .collect();
        if units.is_empty() {
            return Err(Error::invalid(format!(
                "group {} has no cells in a {num_cells}-cell line",
                group.index()
            )));
        }
        Ok(Self {
            tdl,
            group,
            stage: 0,
            units,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.units.len() * TAPS_PER_CELL
    }

    /// Physical bin indices in readout order.
    pub fn perceived_bins(&self) -> Vec<usize> {
        self.units
            .iter()
            .flat_map(|u| {
                u.perceived
                    .labels()
                    .map(|l| u.cell * TAPS_PER_CELL + l as usize)
            })
            .collect()
    }

    pub fn is_resolved(&self) -> bool {
        self.units.iter().all(UnitState::is_resolved)
    }

    /// Per-unit masks of tapped slots.
    pub fn slot_masks(&self, pattern: &TappedPattern) -> Result<Vec<UnitMask>> {
        if pattern.tapped.len() != self.num_bins() {
            return Err(Error::invalid(format!(
                "observation has {} bins, segment has {}",
                pattern.tapped.len(),
                self.num_bins()
            )));
        }
        Ok(pattern
            .tapped
            .chunks(TAPS_PER_CELL)
            .map(|c| {
                UnitMask(
                    c.iter()
                        .enumerate()
                        .fold(0, |m, (i, &t)| m | (u8::from(t) << i)),
                )
            })
            .collect())
    }

    /// Precedence graphs of the first observation, one per unit.
    pub fn initial_dags(&self, pattern: &TappedPattern) -> Result<Vec<PartialOrderDag>> {
        self.slot_masks(pattern)?
            .into_iter()
            .map(build_dag)
            .collect()
    }

    /// Folds one observation (made under the current readout orders) into
    /// the candidate sets and picks the next readout orders.
    pub fn update(&self, pattern: &TappedPattern, params: &PorParams) -> Result<PorState> {
        let stage = self.stage + 1;
        let masks = self.slot_masks(pattern)?;
        let mut candidates = Vec::with_capacity(self.units.len());
        for (i, (unit, slots)) in self.units.iter().zip(masks).enumerate() {
            let observed = slots.slots_to_labels(&unit.perceived);
            let no_match = || Error::NoLibraryMatch {
                unit: i,
                stage,
                observed: observed.to_string(),
            };
            let c: Vec<UnitOrder> = match &unit.candidates {
                None => {
                    let dag = build_dag(slots).map_err(|_| no_match())?;
                    enumerate_consistent(&dag)
                        .iter()
                        .map(|order| unit.perceived.relabel(order))
                        .collect()
                }
                Some(prev) => {
                    build_error_library(prev, &unit.perceived, params.encoder).matching(observed)
                }
            };
            if c.is_empty() {
                return Err(no_match());
            }
            candidates.push(c);
        }
        let ansatz = match &params.ansatz {
            Ansatz::Identity => UnitOrder::IDENTITY,
            Ansatz::Fixed(o) => *o,
            Ansatz::Pattern => common_pattern(&candidates)?,
        };
        let units = self
            .units
            .iter()
            .zip(candidates)
            .map(|(u, c)| {
                Ok(UnitState {
                    cell: u.cell,
                    perceived: select_candidate(&c, &ansatz)?,
                    candidates: Some(c),
                })
            })
            .collect::<Result<_>>()?;
        Ok(PorState {
            tdl: self.tdl,
            group: self.group,
            stage,
            units,
        })
    }

    pub fn to_checkpoint(&self) -> String {
        let mut s = String::from("# por checkpoint\n");
        let _ = writeln!(s, "tdl={}", self.tdl);
        let _ = writeln!(s, "group={}", self.group.index());
        let _ = writeln!(s, "stage={}", self.stage);
        for u in &self.units {
            let cands = match &u.candidates {
                None => "*".to_string(),
                Some(c) => c
                    .iter()
                    .map(|o| o.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            };
            let _ = writeln!(
                s,
                "cell={} perceived={} candidates={}",
                u.cell, u.perceived, cands
            );
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut units = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with("cell=") {
                units.push(parse_unit(line)?);
            } else if let Some((k, v)) = line.split_once('=') {
                header.insert(k.trim(), v.trim());
            } else {
                return Err(Error::parse(format!("unexpected checkpoint line {line:?}")));
            }
        }
        let get = |k: &str| -> Result<usize> {
            header
                .get(k)
                .ok_or_else(|| Error::parse(format!("checkpoint lacks `{k}=`")))?
                .parse()
                .map_err(|_| Error::parse(format!("bad `{k}` in checkpoint")))
        };
        if units.is_empty() {
            return Err(Error::parse("checkpoint lists no units"));
        }
        Ok(Self {
            tdl: get("tdl")?,
            group: GroupSelector::new(get("group")?)?,
            stage: get("stage")? as u32,
            units,
        })
    }
}

fn parse_unit(line: &str) -> Result<UnitState> {
    let mut fields = BTreeMap::new();
    for part in line.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("bad unit field {part:?}")))?;
        fields.insert(k, v);
    }
    let field = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::parse(format!("unit line lacks `{k}=`")))
    };
    let candidates = match field("candidates")? {
        "*" => None,
        list => Some(
            list.split(';')
                .map(str::parse)
                .collect::<Result<Vec<UnitOrder>>>()?,
        ),
    };
    Ok(UnitState {
        cell: field("cell")?
            .parse()
            .map_err(|_| Error::parse("bad cell index"))?,
        perceived: field("perceived")?.parse()?,
        candidates,
    })
}

/// Most frequent identity-closest candidate across units; ties go to the
/// smallest order.
fn common_pattern(candidates: &[Vec<UnitOrder>]) -> Result<UnitOrder> {
    let mut freq: BTreeMap<UnitOrder, usize> = BTreeMap::new();
    for c in candidates {
        *freq
            .entry(select_candidate(c, &UnitOrder::IDENTITY)?)
            .or_default() += 1;
    }
    freq.into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(o, _)| o)
        .ok_or(Error::LibraryExhausted)
}

/// Result of one resolution round.
#[derive(Debug, Clone)]
pub struct PorStep {
    pub state: PorState,
    /// The density test the round was based on, in the previous readout order.
    pub observation: DensityHistogram,
    pub observed: TappedPattern,
}

/// Observes the segment under its current readout orders and updates them.
pub fn por_iteration(
    state: &PorState,
    model: &DelayLineModel,
    shots: u64,
    seed: u64,
    params: &PorParams,
) -> Result<PorStep> {
    let observation = run_density_test(model, &state.perceived_bins(), shots, seed)?;
    let observed = observation.tapped_pattern(params.min_count_threshold);
    let next = state.update(&observed, params)?;
    Ok(PorStep {
        state: next,
        observation,
        observed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tapped_set_oracle;

    fn pattern(bits: &str) -> TappedPattern {
        TappedPattern {
            tapped: bits.chars().map(|c| c == '1').collect(),
            min_count_threshold: 0,
        }
    }

    fn state() -> PorState {
        PorState::new(0, GroupSelector::new(0).unwrap(), 6).unwrap()
    }

    #[test]
    fn new_state_reads_out_in_physical_order() {
        let s = state();
        assert_eq!(s.units.len(), 2);
        assert_eq!(s.perceived_bins(), (0..8).chain(24..32).collect::<Vec<_>>());
        assert!(!s.is_resolved());
    }

    #[test]
    fn two_observations_pin_a_swap() {
        let truth: UnitOrder = "1,2,3,5,4,6,7,8".parse().unwrap();
        let observe = |s: &PorState| {
            let bits: String = s
                .units
                .iter()
                .flat_map(|u| {
                    let taps = tapped_set_oracle(
                        &truth.as_usize(),
                        &u.perceived.as_usize(),
                        EncoderConfig::default(),
                    )
                    .unwrap();
                    u.perceived.labels().map(|l| {
                        if taps.contains(&(l as usize)) {
                            '1'
                        } else {
                            '0'
                        }
                    })
                })
                .collect();
            pattern(&bits)
        };
        let params = PorParams::default();
        let s1 = state().update(&observe(&state()), &params).unwrap();
        assert_eq!(s1.stage, 1);
        assert!(s1.units.iter().all(|u| u.perceived == truth));
        let s2 = s1.update(&observe(&s1), &params).unwrap();
        assert!(s2.is_resolved());
        assert_eq!(s2.units[0].candidates, Some(vec![truth]));
    }

    #[test]
    fn contradicting_observation_names_the_unit() {
        let params = PorParams::default();
        let s1 = state()
            .update(&pattern("1111111111111111"), &params)
            .unwrap();
        let err = s1
            .update(&pattern("1111111101111111"), &params)
            .unwrap_err();
        assert!(matches!(
            err,
            Error::NoLibraryMatch {
                unit: 1,
                stage: 2,
                ..
            }
        ));
        let err = state()
            .update(&pattern("1111111100000000"), &params)
            .unwrap_err();
        assert!(matches!(
            err,
            Error::NoLibraryMatch {
                unit: 1,
                stage: 1,
                ..
            }
        ));
    }

    #[test]
    fn pattern_ansatz_follows_majority() {
        let params = PorParams {
            ansatz: Ansatz::Pattern,
            ..PorParams::default()
        };
        let s = PorState::new(0, GroupSelector::new(0).unwrap(), 9).unwrap();
        let s1 = s
            .update(&pattern("011111110111111101111111"), &params)
            .unwrap();
        let swap: UnitOrder = "2,1,3,4,5,6,7,8".parse().unwrap();
        assert!(s1.units.iter().all(|u| u.perceived == swap));
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = PorParams::default();
        let s1 = state()
            .update(&pattern("0111011101110111"), &params)
            .unwrap();
        let text = s1.to_checkpoint();
        assert_eq!(PorState::from_checkpoint(&text).unwrap(), s1);
        let s0 = state();
        assert_eq!(PorState::from_checkpoint(&s0.to_checkpoint()).unwrap(), s0);
        assert!(PorState::from_checkpoint("tdl=0\n").is_err());
    }

    #[test]
    fn ansatz_parsing() {
        assert_eq!("identity".parse::<Ansatz>().unwrap(), Ansatz::Identity);
        assert_eq!("pattern".parse::<Ansatz>().unwrap(), Ansatz::Pattern);
        assert!(matches!(
            "2,1,3,4,5,6,7,8".parse::<Ansatz>().unwrap(),
            Ansatz::Fixed(_)
        ));
        assert!("nope".parse::<Ansatz>().is_err());
    }
}
