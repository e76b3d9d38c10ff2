use std::fmt;

use crate::error::{Error, Result};

pub const MAX_AGE: u8 = 116;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Gender {
    Male = 0,
    Female = 1,
}

impl Gender {
    pub const NAMES: [&'static str; 2] = ["Male", "Female"];

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Gender::Male),
            1 => Some(Gender::Female),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ethnicity {
    White = 0,
    Black = 1,
    Asian = 2,
    Indian = 3,
    Others = 4,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 5] = [
        Ethnicity::White,
        Ethnicity::Black,
        Ethnicity::Asian,
        Ethnicity::Indian,
        Ethnicity::Others,
    ];
    pub const NAMES: [&'static str; 5] = ["White", "Black", "Asian", "Indian", "Others"];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Ground truth of one face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LabelTriple {
    pub age: u8,
    pub gender: Gender,
    pub ethnicity: Ethnicity,
}

impl LabelTriple {
    pub fn new(age: u32, gender: usize, ethnicity: usize) -> Result<Self> {
        let bad = |what: &str| Error::InvalidArgument {
            op: "LabelTriple",
            reason: what.to_string(),
        };
        if age > u32::from(MAX_AGE) {
            return Err(bad(&format!("age {age} above {MAX_AGE}")));
        }
        Ok(Self {
            age: age as u8,
            gender: Gender::from_index(gender).ok_or_else(|| bad(&format!("gender {gender}")))?,
            ethnicity: Ethnicity::from_index(ethnicity).ok_or_else(|| bad(&format!("ethnicity {ethnicity}")))?,
        })
    }
}

impl fmt::Display for LabelTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}_{}_{}",
            self.age,
            self.gender.index(),
            self.ethnicity.index()
        )
    }
}

/// Labels from a UTKFace name `age_gender_race_date.ext`; anything after the third field is ignored.
pub fn parse_utk_filename(name: &str) -> Result<LabelTriple> {
    let malformed = || Error::MalformedFilename(name.to_string());
    let stem = name.rsplit(['/', '\\']).next().unwrap_or(name);
    let stem = stem.split('.').next().unwrap_or(stem);
    let mut fields = stem.split('_');
    let mut next = || -> Result<u32> {
        fields
            .next()
            .filter(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|f| f.parse().ok())
            .ok_or_else(malformed)
    };
    let (age, gender, race) = (next()?, next()?, next()?);
    LabelTriple::new(age, gender as usize, race as usize).map_err(|_| malformed())
}
