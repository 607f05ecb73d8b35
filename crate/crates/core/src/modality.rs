//! Modality naming: maps contrast names (e.g. "A", "B", "C" for phantoms,
//! or "T1", "T2", "FLAIR" for real data) to dense indices and one-hot
//! conditioning vectors.

use crate::error::{Result, VoxError};
use crate::tensor::array::Array;
use crate::tensor::element::Element;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityRegistry {
    names: Vec<String>,
}

impl ModalityRegistry {
    pub fn new(names: &[String]) -> Result<Self> {
        if names.is_empty() {
            return Err(VoxError::config("modality list is empty"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(VoxError::config("modality name is empty"));
            }
            if names[..i].contains(n) {
                return Err(VoxError::config(format!("duplicate modality name {n:?}")));
            }
        }
        Ok(ModalityRegistry {
            names: names.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, ix: usize) -> &str {
        &self.names[ix]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| VoxError::UnknownModality {
                name: name.to_string(),
                registered: self.names.join(", "),
            })
    }

    /// One-hot row `[1, M]` for the given modality index.
    pub fn one_hot<T: Element>(&self, ix: usize) -> Result<Array<T>> {
        if ix >= self.names.len() {
            return Err(VoxError::config(format!(
                "modality index {ix} out of range (M = {})",
                self.names.len()
            )));
        }
        let mut a = Array::zeros(vec![1, self.names.len()]);
        a.data_mut()[ix] = T::ONE;
        Ok(a)
    }

    /// Validates that `y` is `[1, M]` with exactly one entry equal to 1 and
    /// the rest 0, returning the hot index.
    pub fn check_one_hot<T: Element>(&self, y: &Array<T>) -> Result<usize> {
        let m = self.names.len();
        if y.shape() != [1, m] {
            return Err(VoxError::shape(format!(
                "one-hot must be [1, {m}], got {:?}",
                y.shape()
            )));
        }
        let mut hot = None;
        for (i, &v) in y.data().iter().enumerate() {
            if v == T::ONE {
                if hot.is_some() {
                    return Err(VoxError::data("one-hot vector has more than one 1"));
                }
                hot = Some(i);
            } else if v != T::ZERO {
                return Err(VoxError::data(format!(
                    "one-hot vector has non-binary entry at {i}"
                )));
            }
        }
        hot.ok_or_else(|| VoxError::data("one-hot vector has no 1"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> ModalityRegistry {
        ModalityRegistry::new(&["A".into(), "B".into(), "C".into(), "D".into()]).unwrap()
    }

    #[test]
    fn one_hot_places_single_one() {
        let r = reg();
        let y: Array<f64> = r.one_hot(2).unwrap();
        assert_eq!(y.shape(), &[1, 4]);
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.check_one_hot(&y).unwrap(), 2);
    }

    #[test]
    fn malformed_one_hot_rejected() {
        let r = reg();
        let bad: Array<f64> = Array::new(vec![1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(r.check_one_hot(&bad).is_err());
        let none: Array<f64> = Array::zeros(vec![1, 4]);
        assert!(r.check_one_hot(&none).is_err());
    }

    #[test]
    fn unknown_name_lists_registered() {
        let r = reg();
        let err = r.index_of("T9").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("T9") && msg.contains("A, B, C, D"));
    }

    #[test]
    fn duplicates_rejected() {
        assert!(ModalityRegistry::new(&["A".into(), "A".into()]).is_err());
    }
}
