//! Physical quantities written as strings with an explicit unit suffix.
//!
//! Values are stored in SI base units (seconds, hertz, watts, radians) and
//! gauss for magnetic fields. They serialize back in the base unit with the
//! shortest round-tripping float, so an emitted config re-parses bit-exactly.

use std::f64::consts::PI;
use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Time,
    Frequency,
    Field,
    Power,
    Angle,
}

impl Dimension {
    fn units(self) -> &'static [(&'static str, f64)] {
        match self {
            Dimension::Time => &[("ps", 1e-12), ("ns", 1e-9), ("us", 1e-6), ("µs", 1e-6), ("ms", 1e-3), ("s", 1.0)],
            Dimension::Frequency => &[("Hz", 1.0), ("kHz", 1e3), ("MHz", 1e6), ("GHz", 1e9)],
            Dimension::Field => &[("G", 1.0), ("kG", 1e3), ("mT", 10.0), ("T", 1e4)],
            Dimension::Power => &[("pW", 1e-12), ("nW", 1e-9), ("uW", 1e-6), ("µW", 1e-6), ("mW", 1e-3), ("W", 1.0)],
            Dimension::Angle => &[("rad", 1.0), ("deg", PI / 180.0)],
        }
    }

    fn base(self) -> &'static str {
        match self {
            Dimension::Time => "s",
            Dimension::Frequency => "Hz",
            Dimension::Field => "G",
            Dimension::Power => "W",
            Dimension::Angle => "rad",
        }
    }

    fn example(self) -> &'static str {
        match self {
            Dimension::Time => "\"52ns\"",
            Dimension::Frequency => "\"376.5kHz\"",
            Dimension::Field => "\"414G\"",
            Dimension::Power => "\"366nW\"",
            Dimension::Angle => "\"pi/2\"",
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dimension::Time => "time",
            Dimension::Frequency => "frequency",
            Dimension::Field => "magnetic field",
            Dimension::Power => "power",
            Dimension::Angle => "angle",
        }
    }
}

/// Parses `"<number><unit>"` into base units.
pub fn parse_quantity(text: &str, dim: Dimension) -> Result<f64, String> {
    let s = text.trim();
    if dim == Dimension::Angle {
        if let Some(v) = parse_pi_angle(s) {
            return Ok(v);
        }
    }
    let mut units: Vec<_> = dim.units().to_vec();
    units.sort_by_key(|(u, _)| std::cmp::Reverse(u.len()));
    for (unit, scale) in units {
        if let Some(num) = s.strip_suffix(unit) {
            let num = num.trim();
            if num.is_empty() {
                break;
            }
            let bad = || format!("invalid number {num:?} in {} {s:?}", dim.name());
            let v = scaled(num, scale).ok_or_else(bad)?;
            if !v.is_finite() {
                return Err(format!("{} {s:?} is not finite", dim.name()));
            }
            return Ok(v);
        }
    }
    let known: Vec<&str> = dim.units().iter().map(|(u, _)| *u).collect();
    Err(format!("invalid {} {s:?}: expected a number followed by one of {} (e.g. {})", dim.name(), known.join(", "), dim.example()))
}

/// Decimal scales are applied by shifting the exponent so that "225ns"
/// equals the literal 225e-9.
fn scaled(num: &str, scale: f64) -> Option<f64> {
    let shift = scale.log10().round();
    if (10f64.powf(shift) - scale).abs() > 1e-9 * scale {
        return num.parse::<f64>().ok().map(|v| v * scale);
    }
    let (mantissa, exp) = match num.find(['e', 'E']) {
        Some(i) => (&num[..i], num[i + 1..].parse::<i32>().ok()?),
        None => (num, 0),
    };
    mantissa.parse::<f64>().ok()?;
    format!("{mantissa}e{}", exp + shift as i32).parse().ok()
}

/// `pi`, `pi/2`, `0.5pi`, `3pi/4`.
fn parse_pi_angle(s: &str) -> Option<f64> {
    let (head, tail) = s.split_once("pi")?;
    let coef = match head.trim() {
        "" => 1.0,
        h => h.trim_end_matches('*').trim().parse::<f64>().ok()?,
    };
    let div = match tail.trim() {
        "" => 1.0,
        t => t.strip_prefix('/')?.trim().parse::<f64>().ok().filter(|d| *d != 0.0)?,
    };
    Some(coef * PI / div)
}

pub fn format_quantity(value: f64, dim: Dimension) -> String {
    format!("{value:e}{}", dim.base())
}

macro_rules! quantity {
    ($(#[$m:meta])* $name:ident, $dim:expr) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
        pub struct $name(pub f64);

        impl $name {
            pub const DIM: Dimension = $dim;

            pub fn parse(s: &str) -> Result<Self, String> {
                parse_quantity(s, $dim).map($name)
            }

            pub fn get(self) -> f64 {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&format_quantity(self.0, $dim))
            }
        }

        impl std::str::FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                Self::parse(s)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                d.deserialize_any(QuantityVisitor($dim)).map($name)
            }
        }
    };
}

quantity!(
    /// Seconds.
    Time,
    Dimension::Time
);
quantity!(
    /// Cyclic frequency in Hz; the simulator takes 2 pi times this.
    Freq,
    Dimension::Frequency
);
quantity!(
    /// Gauss.
    Field,
    Dimension::Field
);
quantity!(
    /// Watts.
    Power,
    Dimension::Power
);
quantity!(
    /// Radians.
    Angle,
    Dimension::Angle
);

impl Freq {
    pub fn angular(self) -> f64 {
        2.0 * PI * self.0
    }
}

struct QuantityVisitor(Dimension);

impl Visitor<'_> for QuantityVisitor {
    type Value = f64;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a {} with an explicit unit, e.g. {}", self.0.name(), self.0.example())
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
        parse_quantity(v, self.0).map_err(E::custom)
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
        Err(E::custom(format!("bare number {v} has no unit; write it as a string like {}", self.0.example())))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
        self.visit_f64(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
        self.visit_f64(v as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_suffixes() {
        assert!((Time::parse("52ns").unwrap().0 - 52e-9).abs() < 1e-20);
        assert!((Time::parse("2 us").unwrap().0 - 2e-6).abs() < 1e-18);
        assert_eq!(Time::parse("9.9ms").unwrap().0, 9.9e-3);
        assert_eq!(Freq::parse("376.5kHz").unwrap().0, 376.5e3);
        assert_eq!(Freq::parse("2.6GHz").unwrap().0, 2.6e9);
        assert_eq!(Field::parse("4.14kG").unwrap().0, 4140.0);
        assert_eq!(Field::parse("414G").unwrap().0, 414.0);
        assert!((Power::parse("366nW").unwrap().0 - 366e-9).abs() < 1e-20);
        assert_eq!(Power::parse("6uW").unwrap().0, 6e-6);
    }

    #[test]
    fn parses_pi_angles() {
        assert_eq!(Angle::parse("pi").unwrap().0, PI);
        assert_eq!(Angle::parse("pi/2").unwrap().0, PI / 2.0);
        assert_eq!(Angle::parse("0.5pi").unwrap().0, PI / 2.0);
        assert!((Angle::parse("90deg").unwrap().0 - PI / 2.0).abs() < 1e-15);
        assert!(Angle::parse("pi/0").is_err());
    }

    #[test]
    fn rejects_bad_units() {
        assert!(Time::parse("52").is_err());
        assert!(Time::parse("52kHz").is_err());
        assert!(Time::parse("ns").is_err());
        assert!(Freq::parse("1e400Hz").is_err());
        let msg = Power::parse("366nw").unwrap_err();
        assert!(msg.contains("nW"), "{msg}");
    }

    #[test]
    fn formatting_round_trips_exactly() {
        for v in [52e-9, 177e-9, 1.0 / 3.0, 7e-6, 2.256e-6, 0.0] {
            let t = Time(v);
            assert_eq!(Time::parse(&t.to_string()).unwrap(), t);
        }
        let f = Freq(376.5e3);
        assert_eq!(Freq::parse(&f.to_string()).unwrap(), f);
    }
}
