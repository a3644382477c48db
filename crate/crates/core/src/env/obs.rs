use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const POLICY: &str = "policy";
pub const CRITIC: &str = "critic";
pub const RND: &str = "rnd";
pub const EXPERT: &str = "expert";

/// Named groups of batched observations, each a `[B × width]` tensor.
///
/// Consumers pull only the group they are wired to, so an actor, a critic,
/// a curiosity module and an expert can each see a different slice of the
/// same environment state.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ObservationSet {
    groups: BTreeMap<String, Tensor>,
}

impl ObservationSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a group; its batch size must match the others.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "observation group `{name}` must be 2-D, got {:?}",
                t.shape()
            )));
        }
        if let Some(b) = self.batch_size() {
            let replacing_only = self.groups.len() == 1 && self.groups.contains_key(&name);
            if t.rows() != b && !replacing_only {
                return Err(Error::Shape(format!(
                    "group `{name}` has batch {} but the set has batch {b}",
                    t.rows()
                )));
            }
        }
        self.groups.insert(name, t);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, t: Tensor) -> Result<Self> {
        self.insert(name, t)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Routing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.groups
            .get_mut(name)
            .ok_or_else(|| Error::Routing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.groups.contains_key(name)
    }

    pub fn batch_size(&self) -> Option<usize> {
        self.groups.values().next().map(|t| t.rows())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.groups.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Group widths, in name order.
    pub fn schema(&self) -> Vec<(String, usize)> {
        self.groups
            .iter()
            .map(|(k, v)| (k.clone(), v.row_width()))
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut out = Self::new();
        for (k, v) in &self.groups {
            out.groups.insert(k.clone(), v.select_rows(rows)?);
        }
        Ok(out)
    }

    /// Row-wise concatenation of several sets sharing a schema.
    pub fn concat(parts: &[&ObservationSet]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero observation sets".into()))?;
        let mut out = Self::new();
        for (name, t) in &first.groups {
            let width = t.row_width();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let g = p.get(name)?;
                if g.row_width() != width {
                    return Err(Error::Shape(format!(
                        "group `{name}` width {} vs {width}",
                        g.row_width()
                    )));
                }
                rows += g.rows();
                data.extend_from_slice(g.data());
            }
            out.groups
                .insert(name.clone(), Tensor::matrix(rows, width, data)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_mismatch_and_missing_group() {
        let mut obs = ObservationSet::new();
        obs.insert(POLICY, Tensor::zeros(vec![4, 2]).unwrap()).unwrap();
        assert!(obs.insert(CRITIC, Tensor::zeros(vec![3, 2]).unwrap()).is_err());
        let err = obs.get(RND).unwrap_err();
        assert!(err.to_string().contains("rnd"));
    }

    #[test]
    fn concat_and_select() {
        let a = ObservationSet::new()
            .with(POLICY, Tensor::matrix(1, 2, vec![1., 2.]).unwrap())
            .unwrap();
        let b = ObservationSet::new()
            .with(POLICY, Tensor::matrix(2, 2, vec![3., 4., 5., 6.]).unwrap())
            .unwrap();
        let c = ObservationSet::concat(&[&a, &b]).unwrap();
        assert_eq!(c.get(POLICY).unwrap().data(), &[1., 2., 3., 4., 5., 6.]);
        let s = c.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.get(POLICY).unwrap().data(), &[5., 6., 1., 2.]);
    }
}
