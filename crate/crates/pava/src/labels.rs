//! The fixed 18-class activity vocabulary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Activity names in index order. The order is part of every on-disk format
/// (checkpoints, confusion matrices, ensemble specs) and must never change.
pub const ACTIVITY_NAMES: [&str; 18] = [
    "chat",
    "clean",
    "drink",
    "dryer",
    "machine",
    "microwave",
    "mobile",
    "paper",
    "print",
    "read",
    "shake",
    "staple",
    "take",
    "typeset",
    "walk",
    "wash",
    "whiteboard",
    "write",
];

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ActivityLabel(u8);

impl ActivityLabel {
    pub const COUNT: usize = ACTIVITY_NAMES.len();

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::COUNT).then_some(Self(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        ACTIVITY_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = ActivityLabel> {
        (0..Self::COUNT).map(|i| ActivityLabel(i as u8))
    }

    /// The first `n` labels; desk-scale runs train on a prefix of the vocabulary.
    pub fn first(n: usize) -> impl Iterator<Item = ActivityLabel> {
        Self::all().take(n)
    }
}

impl fmt::Display for ActivityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        ACTIVITY_NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| ActivityLabel(i as u8))
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

impl Serialize for ActivityLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ActivityLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Display name for class `index` of a `num_classes`-way problem.
pub fn class_name(index: usize) -> String {
    ActivityLabel::from_index(index)
        .map(|l| l.name().to_string())
        .unwrap_or_else(|| format!("class{index}"))
}
