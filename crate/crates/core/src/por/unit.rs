use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::TAPS_PER_CELL;

const N: usize = TAPS_PER_CELL;

/// An ordering of the eight taps of one carry cell, labels `0..8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitOrder([u8; N]);

impl UnitOrder {
    pub const IDENTITY: UnitOrder = UnitOrder([0, 1, 2, 3, 4, 5, 6, 7]);

    pub fn new(labels: [u8; N]) -> Result<Self> {
        let mut seen = 0u8;
        for &l in &labels {
            if l as usize >= N || seen & (1 << l) != 0 {
                return Err(Error::invalid(format!(
                    "{labels:?} is not a permutation of 0..8"
                )));
            }
            seen |= 1 << l;
        }
        Ok(Self(labels))
    }

    /// From 1-based labels.
    pub fn from_one_based(labels: [u8; N]) -> Result<Self> {
        let mut l = labels;
        for x in &mut l {
            *x = x
                .checked_sub(1)
                .ok_or_else(|| Error::invalid("1-based labels start at 1"))?;
        }
        Self::new(l)
    }

    pub fn labels(&self) -> [u8; N] {
        self.0
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.0.iter().map(|&l| l as usize).collect()
    }

    pub fn get(&self, slot: usize) -> u8 {
        self.0[slot]
    }

    /// `self[slots[i]]` for each i: relabels an order over slots into an
    /// order over the labels held at those slots.
    pub fn relabel(&self, slots: &UnitOrder) -> UnitOrder {
        let mut out = [0u8; N];
        for (o, &s) in out.iter_mut().zip(&slots.0) {
            *o = self.0[s as usize];
        }
        UnitOrder(out)
    }

    fn positions(&self) -> [usize; N] {
        let mut pos = [0; N];
        for (i, &l) in self.0.iter().enumerate() {
            pos[l as usize] = i;
        }
        pos
    }

    /// Number of label pairs ordered differently in the two orders.
    pub fn kendall_tau(&self, other: &UnitOrder) -> usize {
        let (a, b) = (self.positions(), other.positions());
        let mut d = 0;
        for i in 0..N {
            for j in i + 1..N {
                if (a[i] < a[j]) != (b[i] < b[j]) {
                    d += 1;
                }
            }
        }
        d
    }

    /// Every ordering, lexicographically.
    pub fn all() -> Vec<UnitOrder> {
        let mut cur = Self::IDENTITY.0;
        let mut out = vec![UnitOrder(cur)];
        loop {
            let Some(i) = (0..N - 1).rev().find(|&i| cur[i] < cur[i + 1]) else {
                return out;
            };
            let j = (i + 1..N).rev().find(|&j| cur[j] > cur[i]).expect("exists");
            cur.swap(i, j);
            cur[i + 1..].reverse();
            out.push(UnitOrder(cur));
        }
    }
}

impl fmt::Display for UnitOrder {
    /// 1-based, comma separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", l + 1)?;
        }
        Ok(())
    }
}

impl FromStr for UnitOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<u8> = s
            .split(',')
            .map(|x| x.trim().parse::<u8>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(format!("bad unit order {s:?}")))?;
        let labels: [u8; N] = v
            .try_into()
            .map_err(|_| Error::parse(format!("unit order {s:?} needs {N} labels")))?;
        Self::from_one_based(labels)
    }
}

/// A subset of the eight labels of a unit, bit `l` for label `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct UnitMask(pub u8);

impl UnitMask {
    pub const FULL: UnitMask = UnitMask(0xff);

    pub fn from_labels(labels: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut m = 0u8;
        for l in labels {
            if l >= N {
                return Err(Error::invalid(format!("label {l} is outside a unit")));
            }
            m |= 1 << l;
        }
        Ok(Self(m))
    }

    pub fn from_one_based(labels: &[usize]) -> Result<Self> {
        Self::from_labels(labels.iter().map(|&l| l.wrapping_sub(1)))
    }

    pub fn contains(&self, label: usize) -> bool {
        label < N && self.0 & (1 << label) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..N).filter(|&l| self.contains(l)).collect()
    }

    /// Maps a mask over slots to the labels held at those slots.
    pub fn slots_to_labels(&self, perceived: &UnitOrder) -> UnitMask {
        UnitMask(
            self.labels()
                .into_iter()
                .fold(0, |m, s| m | 1 << perceived.get(s)),
        )
    }
}

impl fmt::Display for UnitMask {
    /// 1-based labels in braces.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = self.labels().iter().map(|l| (l + 1).to_string()).collect();
        write!(f, "{{{}}}", labels.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_orders_are_lexicographic_and_complete() {
        let all = UnitOrder::all();
        assert_eq!(all.len(), 40320);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(all[0], UnitOrder::IDENTITY);
    }

    #[test]
    fn kendall_tau_counts_discordant_pairs() {
        let id = UnitOrder::IDENTITY;
        let swap: UnitOrder = "2,1,3,4,5,6,7,8".parse().unwrap();
        let rev: UnitOrder = "8,7,6,5,4,3,2,1".parse().unwrap();
        assert_eq!(id.kendall_tau(&id), 0);
        assert_eq!(id.kendall_tau(&swap), 1);
        assert_eq!(id.kendall_tau(&rev), 28);
        assert_eq!(rev.kendall_tau(&swap), 27);
    }

    #[test]
    fn text_round_trip_and_validation() {
        let o: UnitOrder = "1,2,3,5,4,6,7,8".parse().unwrap();
        assert_eq!(o.to_string(), "1,2,3,5,4,6,7,8");
        assert!("1,1,3,5,4,6,7,8".parse::<UnitOrder>().is_err());
        assert!("1,2,3".parse::<UnitOrder>().is_err());
        assert!("0,1,2,3,4,5,6,7".parse::<UnitOrder>().is_err());
    }

    #[test]
    fn relabel_and_masks() {
        let perceived: UnitOrder = "2,1,3,4,5,6,7,8".parse().unwrap();
        let slots: UnitOrder = "1,3,2,4,5,6,7,8".parse().unwrap();
        assert_eq!(perceived.relabel(&slots).to_string(), "2,3,1,4,5,6,7,8");
        let m = UnitMask::from_one_based(&[1, 3]).unwrap();
        assert_eq!(m.slots_to_labels(&perceived).to_string(), "{2,3}");
        assert!(UnitMask::from_one_based(&[0]).is_err());
        assert_eq!(m.len(), 2);
    }
}
