//! The 17 local climate zone classes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const N_CLASSES: usize = 17;

const SHORT: [&str; N_CLASSES] = [
    "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "A", "B", "C", "D", "E", "F", "G",
];

const DESCRIPTIONS: [&str; N_CLASSES] = [
    "compact high-rise",
    "compact mid-rise",
    "compact low-rise",
    "open high-rise",
    "open mid-rise",
    "open low-rise",
    "lightweight low-rise",
    "large low-rise",
    "sparsely built",
    "heavy industry",
    "dense trees",
    "scattered trees",
    "bush, scrub",
    "low plants",
    "bare rock or paved",
    "bare soil or sand",
    "water",
];

/// Conventional WUDAPT palette, in code order.
const COLORS: [&str; N_CLASSES] = [
    "#8c0000", "#d10000", "#ff0000", "#bf4d00", "#ff6600", "#ff9955", "#faee05", "#bcbcbc",
    "#ffccaa", "#555555", "#006a00", "#00aa00", "#648525", "#b9db79", "#000000", "#fbf7ae",
    "#6a6aff",
];

/// A local climate zone. Codes 0-9 are the built types LCZ 1-10, codes
/// 10-16 the natural types LCZ A-G.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LczClass(u8);

impl LczClass {
    pub const ALL: [LczClass; N_CLASSES] = {
        let mut all = [LczClass(0); N_CLASSES];
        let mut i = 0;
        while i < N_CLASSES {
            all[i] = LczClass(i as u8);
            i += 1;
        }
        all
    };

    pub const LCZ1: LczClass = LczClass(0);
    pub const LCZ2: LczClass = LczClass(1);
    pub const LCZ3: LczClass = LczClass(2);
    pub const LCZ4: LczClass = LczClass(3);
    pub const LCZ5: LczClass = LczClass(4);
    pub const LCZ6: LczClass = LczClass(5);
    pub const LCZ7: LczClass = LczClass(6);
    pub const LCZ8: LczClass = LczClass(7);
    pub const LCZ9: LczClass = LczClass(8);
    pub const LCZ10: LczClass = LczClass(9);
    pub const A: LczClass = LczClass(10);
    pub const B: LczClass = LczClass(11);
    pub const C: LczClass = LczClass(12);
    pub const D: LczClass = LczClass(13);
    pub const E: LczClass = LczClass(14);
    pub const F: LczClass = LczClass(15);
    pub const G: LczClass = LczClass(16);

    pub fn from_code(code: u8) -> Result<Self, Error> {
        if (code as usize) < N_CLASSES {
            Ok(LczClass(code))
        } else {
            Err(Error::InvalidClass(code.to_string()))
        }
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_built(self) -> bool {
        self.0 < 10
    }

    /// "1".."10", "A".."G".
    pub fn short_name(self) -> &'static str {
        SHORT[self.index()]
    }

    /// "LCZ1".."LCZ10", "LCZA".."LCZG".
    pub fn name(self) -> String {
        format!("LCZ{}", self.short_name())
    }

    pub fn description(self) -> &'static str {
        DESCRIPTIONS[self.index()]
    }

    pub fn color(self) -> &'static str {
        COLORS[self.index()]
    }
}

impl FromStr for LczClass {
    type Err = Error;

    /// Accepts the short form ("3", "B") or the prefixed form ("LCZ3", "LCZB").
    fn from_str(s: &str) -> Result<Self, Error> {
        let t = s.trim();
        let t = t
            .strip_prefix("LCZ")
            .or_else(|| t.strip_prefix("lcz"))
            .unwrap_or(t)
            .trim();
        SHORT
            .iter()
            .position(|&n| n.eq_ignore_ascii_case(t))
            .map(|i| LczClass(i as u8))
            .ok_or_else(|| Error::InvalidClass(s.to_string()))
    }
}

impl fmt::Display for LczClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl fmt::Debug for LczClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LCZ{}", self.short_name())
    }
}

impl Serialize for LczClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.short_name())
    }
}

impl<'de> Deserialize<'de> for LczClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
