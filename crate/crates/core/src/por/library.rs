use std::collections::BTreeMap;

use super::unit::{UnitMask, UnitOrder};
use crate::encoder::{tapped_set_oracle, EncoderConfig};

/// For each candidate actual order, the set of labels that would produce
/// hits under one readout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorLibrary {
    pub perceived: UnitOrder,
    pub entries: Vec<(UnitOrder, UnitMask)>,
}

/// Labels that produce hits when a unit firing in `actual` order is read out
/// in `perceived` order.
pub fn expected_pattern(
    actual: &UnitOrder,
    perceived: &UnitOrder,
    encoder: EncoderConfig,
) -> UnitMask {
    let set = tapped_set_oracle(&actual.as_usize(), &perceived.as_usize(), encoder)
        .expect("unit orders share one label set");
    UnitMask::from_labels(set).expect("labels are below 8")
}

pub fn build_error_library(
    candidates: &[UnitOrder],
    perceived: &UnitOrder,
    encoder: EncoderConfig,
) -> ErrorLibrary {
    ErrorLibrary {
        perceived: *perceived,
        entries: candidates
            .iter()
            .map(|c| (*c, expected_pattern(c, perceived, encoder)))
            .collect(),
    }
}

impl ErrorLibrary {
    /// Candidates whose expected pattern equals `observed` (labels).
    pub fn matching(&self, observed: UnitMask) -> Vec<UnitOrder> {
        self.entries
            .iter()
            .filter(|(_, m)| *m == observed)
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn partition(&self) -> BTreeMap<UnitMask, Vec<UnitOrder>> {
        let mut out: BTreeMap<UnitMask, Vec<UnitOrder>> = BTreeMap::new();
        for (c, m) in &self.entries {
            out.entry(*m).or_default().push(*c);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_partitions_candidates() {
        let all = UnitOrder::all();
        let lib = build_error_library(&all, &UnitOrder::IDENTITY, EncoderConfig::default());
        let parts = lib.partition();
        assert_eq!(parts.values().map(Vec::len).sum::<usize>(), 40320);
        // The last perceived label always produces hits.
        assert!(parts.keys().all(|m| m.contains(7)));
        assert_eq!(parts.len(), 128);
        assert_eq!(parts[&UnitMask::FULL], vec![UnitOrder::IDENTITY]);
    }

    #[test]
    fn matching_filters_exactly() {
        let swap: UnitOrder = "1,2,3,5,4,6,7,8".parse().unwrap();
        let lib = build_error_library(
            &[UnitOrder::IDENTITY, swap],
            &UnitOrder::IDENTITY,
            EncoderConfig::default(),
        );
        let observed = UnitMask::from_one_based(&[1, 2, 3, 5, 6, 7, 8]).unwrap();
        assert_eq!(lib.matching(observed), vec![swap]);
        assert!(lib.matching(UnitMask(1)).is_empty());
    }
}
