use std::fmt;

use super::PipelineError;
use crate::network::NUM_CLASSES;
use crate::volume::CLASS_NAMES;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceReport {
    /// CSF, GM, WM.
    pub per_class: [f64; NUM_CLASSES],
}

impl DiceReport {
    pub fn mean(&self) -> f64 {
        self.per_class.iter().sum::<f64>() / NUM_CLASSES as f64
    }
}

impl fmt::Display for DiceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, d) in CLASS_NAMES.iter().zip(self.per_class) {
            writeln!(f, "{name:<4} {d:.4}")?;
        }
        write!(f, "mean {:.4}", self.mean())
    }
}

/// Per-class Dice overlap `2|A∩B| / (|A|+|B|)` within `mask`. A class absent
/// from both maps scores 1.
pub fn evaluate_dice(predicted: &[u8], reference: &[u8], mask: &[bool]) -> Result<DiceReport, PipelineError> {
    if predicted.len() != reference.len() || predicted.len() != mask.len() {
        return Err(PipelineError::ShapeMismatch {
            what: "label maps and mask",
            expected: vec![mask.len(); 2],
            got: vec![predicted.len(), reference.len()],
        });
    }
    let mut both = [0usize; NUM_CLASSES];
    let mut pred = [0usize; NUM_CLASSES];
    let mut refr = [0usize; NUM_CLASSES];
    for ((&p, &r), _) in predicted.iter().zip(reference).zip(mask).filter(|(_, &m)| m) {
        let (p, r) = (p as usize, r as usize);
        if p < NUM_CLASSES {
            pred[p] += 1;
        }
        if r < NUM_CLASSES {
            refr[r] += 1;
        }
        if p == r && p < NUM_CLASSES {
            both[p] += 1;
        }
    }
    let per_class = std::array::from_fn(|c| {
        let total = pred[c] + refr[c];
        if total == 0 {
            1.0
        } else {
            2.0 * both[c] as f64 / total as f64
        }
    });
    Ok(DiceReport { per_class })
}
