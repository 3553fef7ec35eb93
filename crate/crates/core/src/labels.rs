//! Mapping continuous arousal/valence ratings onto class labels.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelScheme {
    /// Two classes on arousal: low below 5, high from 5.
    Deap2Arousal,
    Deap2Valence,
    /// Three classes per axis with bins `[1,4)`, `[4,7)`, `[7,9]`.
    Deap3Arousal,
    Deap3Valence,
    /// Four arousal/valence quadrants.
    Deap4,
}

/// Quadrant classes of the four-way scheme, in class-index order.
pub const QUADRANTS: [&str; 4] = ["HAHV", "HALV", "LAHV", "LALV"];

pub const THRESHOLD: f64 = 5.0;

impl LabelScheme {
    pub const ALL: [LabelScheme; 5] = [
        LabelScheme::Deap2Arousal,
        LabelScheme::Deap2Valence,
        LabelScheme::Deap3Arousal,
        LabelScheme::Deap3Valence,
        LabelScheme::Deap4,
    ];

    pub fn n_classes(self) -> usize {
        match self {
            LabelScheme::Deap2Arousal | LabelScheme::Deap2Valence => 2,
            LabelScheme::Deap3Arousal | LabelScheme::Deap3Valence => 3,
            LabelScheme::Deap4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelScheme::Deap2Arousal => "deap2-arousal",
            LabelScheme::Deap2Valence => "deap2-valence",
            LabelScheme::Deap3Arousal => "deap3-arousal",
            LabelScheme::Deap3Valence => "deap3-valence",
            LabelScheme::Deap4 => "deap4",
        }
    }

    /// Short display names in class-index order.
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            LabelScheme::Deap2Arousal | LabelScheme::Deap2Valence => &["low", "high"],
            LabelScheme::Deap3Arousal | LabelScheme::Deap3Valence => &["low", "mid", "high"],
            LabelScheme::Deap4 => &QUADRANTS,
        }
    }

    /// Class-boundary rating values on each axis that the scheme uses.
    pub fn thresholds(self) -> (&'static [f64], &'static [f64]) {
        const TWO: &[f64] = &[THRESHOLD];
        const THREE: &[f64] = &[4.0, 7.0];
        match self {
            LabelScheme::Deap2Arousal => (TWO, &[]),
            LabelScheme::Deap2Valence => (&[], TWO),
            LabelScheme::Deap3Arousal => (THREE, &[]),
            LabelScheme::Deap3Valence => (&[], THREE),
            LabelScheme::Deap4 => (TWO, TWO),
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabelScheme::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown label scheme `{s}`")))
    }
}

fn three_bin(x: f64) -> usize {
    if x < 4.0 {
        0
    } else if x < 7.0 {
        1
    } else {
        2
    }
}

/// Class index of a trial rated `a` (arousal) and `v` (valence), both in
/// `[1, 9]`.
pub fn map_label(a: f64, v: f64, scheme: LabelScheme) -> Result<usize> {
    for (name, x) in [("arousal", a), ("valence", v)] {
        if !(1.0..=9.0).contains(&x) {
            return Err(Error::Argument(format!("{name} rating {x} outside [1, 9]")));
        }
    }
    let high_a = a >= THRESHOLD;
    let high_v = v >= THRESHOLD;
    Ok(match scheme {
        LabelScheme::Deap2Arousal => high_a as usize,
        LabelScheme::Deap2Valence => high_v as usize,
        LabelScheme::Deap3Arousal => three_bin(a),
        LabelScheme::Deap3Valence => three_bin(v),
        LabelScheme::Deap4 => match (high_a, high_v) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_examples() {
        let q = |a, v| QUADRANTS[map_label(a, v, LabelScheme::Deap4).unwrap()];
        assert_eq!(q(5.0, 5.0), "HAHV");
        assert_eq!(q(4.9, 9.0), "LAHV");
        assert_eq!(q(1.0, 1.0), "LALV");
        assert_eq!(q(9.0, 1.0), "HALV");
    }

    #[test]
    fn three_level_edges() {
        let v = |x| map_label(5.0, x, LabelScheme::Deap3Valence).unwrap();
        assert_eq!((v(3.9), v(4.0), v(7.0), v(6.99), v(9.0), v(1.0)), (0, 1, 2, 1, 2, 0));
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert!(map_label(0.5, 5.0, LabelScheme::Deap4).is_err());
        assert!(map_label(5.0, 9.5, LabelScheme::Deap2Valence).is_err());
        assert!(map_label(f64::NAN, 5.0, LabelScheme::Deap4).is_err());
    }

    #[test]
    fn names_round_trip() {
        for s in LabelScheme::ALL {
            assert_eq!(s.name().parse::<LabelScheme>().unwrap(), s);
        }
        assert!("deap5".parse::<LabelScheme>().is_err());
    }
}
