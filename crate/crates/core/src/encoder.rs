//! Thermometer-to-one-hot encoding and the per-unit tapped-set oracle.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::ThermometerCode;

/// Bin index in perceived order, or `None` when no transition is found.
pub type OneHotCode = Option<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Minimum length of the run of ones that counts as a transition.
    pub run_length_k: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { run_length_k: 1 }
    }
}

impl EncoderConfig {
    pub fn new(run_length_k: usize) -> Result<Self> {
        if run_length_k == 0 {
            return Err(Error::invalid("run length k must be at least 1"));
        }
        Ok(Self { run_length_k })
    }
}

/// Index of the last bit of the first run of at least `k` ones that is
/// followed by a zero or by the end of the code.
fn scan(bits: impl Iterator<Item = bool>, k: usize) -> Option<usize> {
    let mut run = 0usize;
    let mut last = None;
    for (i, b) in bits.enumerate() {
        if b {
            run += 1;
            last = Some(i);
        } else {
            if run >= k {
                return last;
            }
            run = 0;
        }
    }
    if run >= k {
        last
    } else {
        None
    }
}

/// Encodes a bare thermometer code.
pub fn encode(code: &ThermometerCode, config: EncoderConfig) -> OneHotCode {
    scan(code.bits.iter().copied(), config.run_length_k)
}

/// Encodes a code whose readout is preceded by `k` ones (the saturated
/// previous stage or the chain input). A transition inside that prefix
/// means the hit did not reach the first perceived bin and yields `None`.
pub fn encode_anchored(code: &ThermometerCode, config: EncoderConfig) -> OneHotCode {
    let k = config.run_length_k;
    let prefixed = std::iter::repeat_n(true, k).chain(code.bits.iter().copied());
    scan(prefixed, k).and_then(|i| i.checked_sub(k))
}

/// Set of bin labels that can appear as a one-hot output for a unit whose
/// bins fire in `actual` order and are read out in `perceived` order.
///
/// Sweeps the hit through every gap of the actual order, encodes the
/// resulting thermometer code and maps the perceived slot back to its label.
pub fn tapped_set_oracle(
    actual: &[usize],
    perceived: &[usize],
    config: EncoderConfig,
) -> Result<BTreeSet<usize>> {
    let mut a = actual.to_vec();
    let mut p = perceived.to_vec();
    a.sort_unstable();
    p.sort_unstable();
    if a != p || a.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid(
            "actual and perceived orders must be permutations of the same labels",
        ));
    }
    let n = actual.len();
    let mut rank = vec![0usize; n];
    let mut out = BTreeSet::new();
    for (slot, label) in perceived.iter().enumerate() {
        rank[slot] = actual
            .iter()
            .position(|x| x == label)
            .expect("same label set");
    }
    for reached in 0..=n {
        let code = ThermometerCode {
            bits: rank.iter().map(|&r| r < reached).collect(),
        };
        if let Some(slot) = encode_anchored(&code, config) {
            out.insert(perceived[slot]);
        }
    }
    Ok(out)
}
