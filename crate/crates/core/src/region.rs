//! The seven intervenable regions and a fixed-size map keyed by them.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Index, IndexMut};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Label code of voxels outside the brain.
pub const BACKGROUND: u8 = 0;
/// Label code of brain voxels that belong to no region.
pub const TISSUE: u8 = 8;
/// Number of distinct label codes (background, seven regions, tissue).
pub const NUM_LABELS: usize = 9;

/// A parent attribute of the image node: one region whose volume can be intervened on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionId {
    Fro,
    Par,
    Tem,
    Occ,
    Cin,
    Ins,
    Ven,
}

impl RegionId {
    /// All regions in label-code order, which is also the paint order.
    pub const ALL: [RegionId; 7] = [
        RegionId::Fro,
        RegionId::Par,
        RegionId::Tem,
        RegionId::Occ,
        RegionId::Cin,
        RegionId::Ins,
        RegionId::Ven,
    ];

    pub const COUNT: usize = 7;

    /// Position in [`RegionId::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Label code in `1..=7`.
    pub fn label(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_label(code: u8) -> Option<RegionId> {
        match code {
            1..=7 => Some(RegionId::ALL[(code - 1) as usize]),
            _ => None,
        }
    }

    pub fn from_index(i: usize) -> Option<RegionId> {
        RegionId::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionId::Fro => "Fro",
            RegionId::Par => "Par",
            RegionId::Tem => "Tem",
            RegionId::Occ => "Occ",
            RegionId::Cin => "Cin",
            RegionId::Ins => "Ins",
            RegionId::Ven => "Ven",
        }
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RegionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RegionId::ALL
            .iter()
            .copied()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown region `{s}`"))
    }
}

/// One value per region. Serializes as a JSON object keyed by region name.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RegionMap<T>(pub [T; 7]);

impl<T> RegionMap<T> {
    pub fn from_fn(mut f: impl FnMut(RegionId) -> T) -> Self {
        RegionMap(std::array::from_fn(|i| f(RegionId::ALL[i])))
    }

    pub fn iter(&self) -> impl Iterator<Item = (RegionId, &T)> {
        RegionId::ALL.iter().copied().zip(self.0.iter())
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.0.iter()
    }

    pub fn map<U>(&self, mut f: impl FnMut(RegionId, &T) -> U) -> RegionMap<U> {
        RegionMap::from_fn(|r| f(r, &self.0[r.index()]))
    }
}

impl<T> Index<RegionId> for RegionMap<T> {
    type Output = T;

    fn index(&self, r: RegionId) -> &T {
        &self.0[r.index()]
    }
}

impl<T> IndexMut<RegionId> for RegionMap<T> {
    fn index_mut(&mut self, r: RegionId) -> &mut T {
        &mut self.0[r.index()]
    }
}

impl<T: Serialize> Serialize for RegionMap<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(7))?;
        for (r, v) in self.iter() {
            map.serialize_entry(r.name(), v)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for RegionMap<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let mut raw: BTreeMap<String, T> = BTreeMap::deserialize(deserializer)?;
        let mut slots: [Option<T>; 7] = Default::default();
        for r in RegionId::ALL {
            slots[r.index()] = raw.remove(r.name());
        }
        if let Some(extra) = raw.keys().next() {
            return Err(D::Error::custom(format!("unknown region key `{extra}`")));
        }
        let mut out = Vec::with_capacity(7);
        for (i, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(v) => out.push(v),
                None => {
                    return Err(D::Error::custom(format!(
                        "missing region `{}`",
                        RegionId::ALL[i].name()
                    )))
                }
            }
        }
        let arr: [T; 7] = out.try_into().map_err(|_| D::Error::custom("region count"))?;
        Ok(RegionMap(arr))
    }
}
