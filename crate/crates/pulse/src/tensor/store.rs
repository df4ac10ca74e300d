use std::collections::BTreeMap;

use crate::error::{PulseError, Result};

use super::Tensor;

/// Named parameter collection with stable iteration order.
///
/// Names are unique and a parameter's shape is fixed on insert; later writes
/// must match it. `step_count` tracks optimizer steps applied to the store so
/// callers can assert that frozen components stayed frozen.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(PulseError::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| {
            PulseError::InvalidArgument(format!("unknown parameter {name:?}"))
        })
    }

    /// Overwrite an existing parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let cur = self.entries.get_mut(name).ok_or_else(|| {
            PulseError::InvalidArgument(format!("unknown parameter {name:?}"))
        })?;
        if cur.shape() != value.shape() {
            return Err(PulseError::InvalidArgument(format!(
                "parameter {name:?} has shape {:?}, refusing write of {:?}",
                cur.shape(),
                value.shape()
            )));
        }
        *cur = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn bump_step(&mut self) {
        self.step_count += 1;
    }

    /// Total parameter count across all tensors.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_rejects_duplicates() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn set_enforces_shape() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.set("w", Tensor::zeros(&[4])).is_err());
        assert!(s.set("w", Tensor::zeros(&[2, 2])).is_ok());
        assert!(s.set("missing", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn iteration_order_is_name_sorted() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::zeros(&[1])).unwrap();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        s.insert("c", Tensor::zeros(&[1])).unwrap();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }
}
