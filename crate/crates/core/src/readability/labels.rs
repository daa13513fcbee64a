use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// The four readability flags, always handled in the order
/// (valid, macula, optic_disc, retina).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReadabilityLabels {
    pub valid: bool,
    pub macula: bool,
    pub optic_disc: bool,
    pub retina: bool,
}

/// Which of the four labels an operation refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Valid,
    Macula,
    OpticDisc,
    Retina,
}

impl LabelKind {
    pub const ALL: [LabelKind; 4] = [
        LabelKind::Valid,
        LabelKind::Macula,
        LabelKind::OpticDisc,
        LabelKind::Retina,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Valid => "valid",
            LabelKind::Macula => "macula",
            LabelKind::OpticDisc => "optic_disc",
            LabelKind::Retina => "retina",
        }
    }
}

impl ReadabilityLabels {
    pub const ALL_TRUE: ReadabilityLabels = ReadabilityLabels {
        valid: true,
        macula: true,
        optic_disc: true,
        retina: true,
    };

    pub fn from_bits(bits: [bool; 4]) -> Self {
        ReadabilityLabels {
            valid: bits[0],
            macula: bits[1],
            optic_disc: bits[2],
            retina: bits[3],
        }
    }

    pub fn bits(&self) -> [bool; 4] {
        [self.valid, self.macula, self.optic_disc, self.retina]
    }

    pub fn get(&self, kind: LabelKind) -> bool {
        self.bits()[kind.index()]
    }

    /// Thresholds four probabilities at 0.5 (inclusive).
    pub fn from_probs(p: &[f64]) -> Self {
        Self::from_bits([p[0] >= 0.5, p[1] >= 0.5, p[2] >= 0.5, p[3] >= 0.5])
    }

    /// `"1011"`-style bit string in the fixed label order.
    pub fn to_bit_string(&self) -> String {
        self.bits().iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bit_string(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 4 || chars.iter().any(|c| *c != '0' && *c != '1') {
            return Err(invalid(format!("label bits must be 4 of 0/1, got {s:?}")));
        }
        Ok(Self::from_bits([
            chars[0] == '1',
            chars[1] == '1',
            chars[2] == '1',
            chars[3] == '1',
        ]))
    }

    pub fn as_targets(&self) -> [f64; 4] {
        self.bits().map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn all_readable(&self, targets: &[LabelKind]) -> bool {
        targets.iter().all(|&k| self.get(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_string_order_is_fixed() {
        let l = ReadabilityLabels {
            valid: true,
            macula: false,
            optic_disc: true,
            retina: true,
        };
        assert_eq!(l.to_bit_string(), "1011");
        assert_eq!(ReadabilityLabels::parse_bit_string("1011").unwrap(), l);
        assert!(ReadabilityLabels::parse_bit_string("101").is_err());
        assert!(ReadabilityLabels::parse_bit_string("10x1").is_err());
    }

    #[test]
    fn threshold_is_inclusive_at_half() {
        let l = ReadabilityLabels::from_probs(&[0.5, 0.4999, 0.9, 0.1]);
        assert_eq!(l.bits(), [true, false, true, false]);
    }
}
