use serde::{Deserialize, Serialize};

pub const BACKGROUND: u8 = 0;
pub const BLOOD_POOL: u8 = 1;
pub const MYOCARDIUM: u8 = 2;
pub const SCAR: u8 = 3;
pub const MVO: u8 = 4;

/// Label set of a dataset. Index order is fixed across datasets: 0 background,
/// 1 blood pool, 2 myocardium, 3 scar, 4 MVO; the MyoPS scheme stops at scar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassScheme {
    Emidec,
    Myops,
}

impl ClassScheme {
    pub const fn num_classes(self) -> usize {
        match self {
            ClassScheme::Emidec => 5,
            ClassScheme::Myops => 4,
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        const NAMES: [&str; 5] = ["background", "blood_pool", "myocardium", "scar", "mvo"];
        &NAMES[..self.num_classes()]
    }

    pub const fn background_index(self) -> u8 {
        BACKGROUND
    }

    pub fn foreground_indices(self) -> Vec<u8> {
        (1..self.num_classes() as u8).collect()
    }

    pub const fn has_mvo(self) -> bool {
        matches!(self, ClassScheme::Emidec)
    }

    pub fn is_valid(self, label: u8) -> bool {
        (label as usize) < self.num_classes()
    }

    /// Number of auxiliary mask channels the cascade feeds to the 3D network
    /// (scar, plus MVO when the scheme has it).
    pub const fn aux_channels(self) -> usize {
        if self.has_mvo() {
            2
        } else {
            1
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ClassScheme::Emidec => "emidec",
            ClassScheme::Myops => "myops",
        }
    }
}
