//! The four MRI acquisition types and a fixed-size per-modality container.

use core::fmt;
use core::str::FromStr;

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Canonical order is `T1 < T1c < T2 < FLAIR`; every concatenation in the
/// model follows it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    T1,
    T1c,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1c, Modality::T2, Modality::Flair];
    pub const COUNT: usize = 4;

    #[inline]
    pub const fn index(self) -> usize {
        self as usize
    }

    pub const fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1c => "T1c",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Parses a comma-separated list such as `T1,FLAIR` into canonical order.
    pub fn parse_list(s: &str) -> Result<Vec<Modality>, Error> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Modality = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Joins a subset into its display key, e.g. `T1+FLAIR`.
    pub fn subset_key(subset: &[Modality]) -> String {
        let names: Vec<&str> = subset.iter().map(|m| m.name()).collect();
        names.join("+")
    }

    /// All 15 non-empty subsets, ordered by size then lexicographically in
    /// canonical modality order.
    pub fn all_subsets() -> Vec<Vec<Modality>> {
        let mut subsets: Vec<Vec<Modality>> = (1u32..16)
            .map(|mask| {
                Self::ALL
                    .iter()
                    .copied()
                    .filter(|m| mask & (1 << m.index()) != 0)
                    .collect()
            })
            .collect();
        subsets.sort_by(|a: &Vec<Modality>, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        subsets
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "T1" => Ok(Modality::T1),
            "T1c" | "T1C" | "T1ce" => Ok(Modality::T1c),
            "T2" => Ok(Modality::T2),
            "FLAIR" | "Flair" | "flair" => Ok(Modality::Flair),
            other => Err(Error::UnknownModality(other.to_string())),
        }
    }
}

impl Serialize for Modality {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Modality {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One optional slot per modality, iterated in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct PerModality<V> {
    slots: [Option<V>; 4],
}

impl<V> Default for PerModality<V> {
    fn default() -> Self {
        Self {
            slots: [None, None, None, None],
        }
    }
}

impl<V> PerModality<V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, m: Modality, v: V) -> Option<V> {
        self.slots[m.index()].replace(v)
    }

    pub fn remove(&mut self, m: Modality) -> Option<V> {
        self.slots[m.index()].take()
    }

    pub fn get(&self, m: Modality) -> Option<&V> {
        self.slots[m.index()].as_ref()
    }

    pub fn get_mut(&mut self, m: Modality) -> Option<&mut V> {
        self.slots[m.index()].as_mut()
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.slots[m.index()].is_some()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.iter().map(|(m, _)| m).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &V)> {
        Modality::ALL
            .iter()
            .zip(self.slots.iter())
            .filter_map(|(&m, v)| v.as_ref().map(|v| (m, v)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Modality, &mut V)> {
        Modality::ALL
            .iter()
            .zip(self.slots.iter_mut())
            .filter_map(|(&m, v)| v.as_mut().map(|v| (m, v)))
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &V) -> U) -> PerModality<U> {
        let mut out = PerModality::new();
        for (m, v) in self.iter() {
            out.insert(m, f(m, v));
        }
        out
    }
}

impl<V> FromIterator<(Modality, V)> for PerModality<V> {
    fn from_iter<I: IntoIterator<Item = (Modality, V)>>(iter: I) -> Self {
        let mut out = Self::new();
        for (m, v) in iter {
            out.insert(m, v);
        }
        out
    }
}
