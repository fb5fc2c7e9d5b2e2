use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Graph, NodeId, Tensor};

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// An ordered set of named parameter tensors. Order is part of the
/// checkpoint format and of the gradient layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<Param>,
}

const CHECKPOINT_FORMAT: &str = "evarl-params-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "parameter {name}: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        self.entries.push(Param { name, shape, data });
        Ok(())
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    /// Insert every parameter as a differentiable leaf, in order.
    pub fn leaves(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|p| graph.leaf(Tensor::new(p.shape.clone(), p.data.clone()).expect("validated")))
            .collect()
    }

    /// Gradient-ascent/descent step: `p += step * g` for every entry with a
    /// gradient in `grads`.
    pub fn apply_step(&mut self, grads: &ParamGrads, step: f64) -> Result<()> {
        for (name, g) in &grads.entries {
            let p = self
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
            if p.data.len() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "apply_step",
                    left: p.shape.clone(),
                    right: vec![g.len()],
                });
            }
            for (pv, gv) in p.data.iter_mut().zip(g) {
                *pv += step * gv;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            params: self.entries.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Checkpoint = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "unknown checkpoint format {:?}",
                doc.format
            )));
        }
        let mut set = ParamSet::new();
        for p in doc.params {
            set.push(p.name, p.shape, p.data)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Gradients keyed by parameter name, in the owning [`ParamSet`]'s order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    entries: Vec<(String, Vec<f64>)>,
}

impl ParamGrads {
    /// Zero gradients shaped like `params`.
    pub fn zeros_like(params: &ParamSet) -> Self {
        ParamGrads {
            entries: params
                .entries()
                .iter()
                .map(|p| (p.name.clone(), vec![0.0; p.data.len()]))
                .collect(),
        }
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g)
    }

    /// `self += scale * other` entrywise.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (name, g) in &other.entries {
            if let Some(mine) = self.get_mut(name) {
                for (m, o) in mine.iter_mut().zip(g) {
                    *m += scale * o;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, g) in &mut self.entries {
            for v in g {
                *v *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let mut set = ParamSet::new();
        set.push("w", vec![2, 2], vec![0.1, -0.2, 1.0 / 3.0, 5e-300])
            .unwrap();
        set.push("b", vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap();
        let text = set.to_json().unwrap();
        let back = ParamSet::from_json(&text).unwrap();
        for (a, b) in set.entries().iter().zip(back.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::new();
        set.push("w", vec![1], vec![0.0]).unwrap();
        assert!(set.push("w", vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn apply_step_updates_in_place() {
        let mut set = ParamSet::new();
        set.push("w", vec![2], vec![1.0, 2.0]).unwrap();
        let mut grads = ParamGrads::zeros_like(&set);
        grads.get_mut("w").unwrap().copy_from_slice(&[10.0, -10.0]);
        set.apply_step(&grads, 0.1).unwrap();
        assert_eq!(set.get("w").unwrap().data, vec![2.0, 1.0]);
    }
}
