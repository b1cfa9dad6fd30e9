use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MmqError, Result};

/// Item-side modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "c")]
    Collaborative,
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "v")]
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Collaborative, Modality::Text, Modality::Visual];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Collaborative => "c",
            Modality::Text => "t",
            Modality::Visual => "v",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Collaborative => 0,
            Modality::Text => 1,
            Modality::Visual => 2,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = MmqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c" => Ok(Modality::Collaborative),
            "t" => Ok(Modality::Text),
            "v" => Ok(Modality::Visual),
            other => Err(MmqError::InvalidArgument(format!(
                "unknown modality `{other}`"
            ))),
        }
    }
}

/// One value per item-side modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerModality<T> {
    pub c: T,
    pub t: T,
    pub v: T,
}

impl<T> PerModality<T> {
    pub fn new(c: T, t: T, v: T) -> Self {
        PerModality { c, t, v }
    }

    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        PerModality {
            c: f(Modality::Collaborative),
            t: f(Modality::Text),
            v: f(Modality::Visual),
        }
    }

    pub fn try_from_fn<E>(
        mut f: impl FnMut(Modality) -> std::result::Result<T, E>,
    ) -> std::result::Result<Self, E> {
        Ok(PerModality {
            c: f(Modality::Collaborative)?,
            t: f(Modality::Text)?,
            v: f(Modality::Visual)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> PerModality<U> {
        PerModality {
            c: f(Modality::Collaborative, &self.c),
            t: f(Modality::Text, &self.t),
            v: f(Modality::Visual, &self.v),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &T)> {
        [
            (Modality::Collaborative, &self.c),
            (Modality::Text, &self.t),
            (Modality::Visual, &self.v),
        ]
        .into_iter()
    }
}

impl<T> Index<Modality> for PerModality<T> {
    type Output = T;

    fn index(&self, m: Modality) -> &T {
        match m {
            Modality::Collaborative => &self.c,
            Modality::Text => &self.t,
            Modality::Visual => &self.v,
        }
    }
}

impl<T> IndexMut<Modality> for PerModality<T> {
    fn index_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Collaborative => &mut self.c,
            Modality::Text => &mut self.t,
            Modality::Visual => &mut self.v,
        }
    }
}
