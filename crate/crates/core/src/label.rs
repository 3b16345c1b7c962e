use std::fmt;

use serde::{Deserialize, Serialize};

/// Diagnosis class. `0` is the reserved "no lesion" class; lesion categories
/// are `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Category(pub u32);

impl Category {
    pub const NEGATIVE: Category = Category(0);

    pub fn is_negative(self) -> bool {
        self == Self::NEGATIVE
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
