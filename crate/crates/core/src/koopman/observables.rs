use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Dictionary of observables applied to the normalized outlet state `(p, m)`.
///
/// The first two lifted components are always `p` and `m` themselves, so the
/// physical state is read back with `C = [I₂ 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum ObservableSet {
    /// `p, m, −p·e^(−p), e^(−p)·sin(−p)`; extra maps on pressure only.
    #[default]
    V5a,
    /// `p, m` plus the two extra maps applied to both `p` and `m`.
    C4,
}

impl ObservableSet {
    pub fn id(&self) -> &'static str {
        match self {
            ObservableSet::V5a => "v5a",
            ObservableSet::C4 => "c4",
        }
    }

    /// Lifted dimension N.
    pub fn dim(&self) -> usize {
        match self {
            ObservableSet::V5a => 4,
            ObservableSet::C4 => 6,
        }
    }

    pub fn lift(&self, x: [f64; 2]) -> DVector<f64> {
        let [p, m] = x;
        let mut v = vec![p, m, -p * (-p).exp(), (-p).exp() * (-p).sin()];
        if *self == ObservableSet::C4 {
            v.push(-m * (-m).exp());
            v.push((-m).exp() * (-m).sin());
        }
        DVector::from_vec(v)
    }

    /// Applies `C = [I₂ 0]`.
    pub fn extract(psi: &DVector<f64>) -> [f64; 2] {
        [psi[0], psi[1]]
    }
}

impl fmt::Display for ObservableSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ObservableSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "v5a" | "pressure4" => Ok(ObservableSet::V5a),
            "c4" | "full6" => Ok(ObservableSet::C4),
            other => Err(Error::SchemaMismatch(format!("unknown observable set {other:?}"))),
        }
    }
}

impl TryFrom<String> for ObservableSet {
    type Error = Error;
    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<ObservableSet> for String {
    fn from(o: ObservableSet) -> String {
        o.id().to_string()
    }
}
