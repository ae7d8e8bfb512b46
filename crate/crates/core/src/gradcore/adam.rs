// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Array,
    pub first_moment: Array,
    pub second_moment: Array,
}

/// Named trainable arrays plus Adam state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array) {
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            Parameter {
                value,
                first_moment: Array::zeros(&shape),
                second_moment: Array::zeros(&shape),
            },
        );
    }

    pub fn insert_with_state(&mut self, name: &str, param: Parameter) -> Result<()> {
        if param.first_moment.shape() != param.value.shape()
            || param.second_moment.shape() != param.value.shape()
        {
            return Err(Error::dim(format!(
                "moment shapes for {name} differ from value"
            )));
        }
        self.params.insert(name.to_string(), param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn entry(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn reset_moments(&mut self) {
        for p in self.params.values_mut() {
            p.first_moment = Array::zeros(p.value.shape());
            p.second_moment = Array::zeros(p.value.shape());
        }
        self.step = 0;
    }

    /// Leaf node carrying the current value of parameter `name`.
    pub fn leaf(&self, graph: &mut Graph, name: &str) -> Result<NodeId> {
        let value = self
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        Ok(graph.named_input(name, || value.clone()))
    }

    /// One Adam step with bias correction. Parameters absent from `grads`
    /// are left untouched (their moments too).
    pub fn adam_update(&mut self, grads: &BTreeMap<String, Array>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            let m = p.first_moment.data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.second_moment.data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let m = p.first_moment.data();
            let v = p.second_moment.data();
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Array::vector(vec![value]));
        p
    }

    fn grads(g: f64) -> BTreeMap<String, Array> {
        BTreeMap::from([("w".to_string(), Array::vector(vec![g]))])
    }

    #[test]
    fn zero_gradient_keeps_value_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = single(1.5);
        p.adam_update(&grads(0.4), &cfg).unwrap();
        let before = p.entry("w").unwrap().clone();
        p.adam_update(&grads(0.0), &cfg).unwrap();
        let after = p.entry("w").unwrap();
        assert_eq!(after.first_moment.item(), 0.9 * before.first_moment.item());
        assert_eq!(
            after.second_moment.item(),
            0.999 * before.second_moment.item()
        );
        // With nonzero moments a zero gradient still moves the weight; from
        // fresh moments it must not.
        let mut fresh = single(1.5);
        fresh.adam_update(&grads(0.0), &cfg).unwrap();
        assert_eq!(fresh.get("w").unwrap().item(), 1.5);
        assert_eq!(fresh.step(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        for g in [0.3, -2.0, 1e-3] {
            let mut p = single(0.0);
            p.adam_update(&grads(g), &cfg).unwrap();
            let want = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.get("w").unwrap().item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.8,
            beta2: 0.95,
            eps: 1e-6,
        };
        let mut p = single(1.0);
        p.adam_update(&grads(0.5), &cfg).unwrap();
        p.adam_update(&grads(-0.25), &cfg).unwrap();
        // Hand recurrence:
        // m1 = 0.1, v1 = 0.0125, w1 = 1 − 0.1·0.5/(0.5+1e−6)
        // m2 = 0.08 − 0.05 = 0.03, v2 = 0.011875 + 0.003125 = 0.015
        // m̂2 = 0.03/0.36, v̂2 = 0.015/0.0975
        let w1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-6);
        let m_hat: f64 = 0.03 / 0.36;
        let v_hat: f64 = 0.015 / 0.0975;
        let w2 = w1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-6);
        assert!((p.get("w").unwrap().item() - w2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(0.0);
        let bad = BTreeMap::from([("w".to_string(), Array::vector(vec![1.0, 2.0]))]);
        assert!(matches!(
            p.adam_update(&bad, &AdamConfig::default()),
            Err(Error::Dimension(_))
        ));
        assert_eq!(p.step(), 0);
    }
}
