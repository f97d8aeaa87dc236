//! Adam with bias correction.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<S>, Vec<S>)>,
}

const STATE_PREFIX: &str = "aux.adam.";

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update every trainable parameter from its accumulated gradient, then
    /// clear the gradients. Parameters without a gradient are left alone.
    pub fn step<M: Module<S> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (s::<S>(self.beta1), s::<S>(self.beta2));
        let (one_b1, one_b2) = (s::<S>(1.0 - self.beta1), s::<S>(1.0 - self.beta2));
        let (ic1, ic2) = (s::<S>(1.0 / c1), s::<S>(1.0 / c2));
        let (lr, eps) = (s::<S>(self.lr), s::<S>(self.eps));
        let moments = &mut self.moments;
        module.visit_mut(&mut |p| {
            if !p.is_trainable() {
                return;
            }
            let Some(grad) = p.tensor().grad().map(<[S]>::to_vec) else {
                return;
            };
            let (m, v) = moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![S::zero(); grad.len()], vec![S::zero(); grad.len()]));
            for (((w, &g), m), v) in p.tensor_mut().data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mh = *m * ic1;
                let vh = *v * ic2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
            p.tensor_mut().zero_grad();
        });
    }

    /// Moments and step counter as checkpoint auxiliary records.
    pub fn state_records(&self) -> Result<Vec<(String, Tensor<S>)>> {
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        let mut out = vec![(format!("{STATE_PREFIX}step"), Tensor::scalar(s::<S>(self.step as f64)))];
        for name in names {
            let (m, v) = &self.moments[name];
            out.push((format!("{STATE_PREFIX}m.{name}"), Tensor::new(&[m.len()], m.clone())?));
            out.push((format!("{STATE_PREFIX}v.{name}"), Tensor::new(&[v.len()], v.clone())?));
        }
        Ok(out)
    }

    pub fn load_state(&mut self, records: &[(String, Tensor<S>)]) -> Result<()> {
        let mut step = None;
        let mut m: HashMap<String, Vec<S>> = HashMap::new();
        let mut v: HashMap<String, Vec<S>> = HashMap::new();
        for (name, t) in records {
            let Some(rest) = name.strip_prefix(STATE_PREFIX) else { continue };
            if rest == "step" {
                step = Some(t.data()[0].to_f64() as u64);
            } else if let Some(p) = rest.strip_prefix("m.") {
                m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = rest.strip_prefix("v.") {
                v.insert(p.to_string(), t.data().to_vec());
            } else {
                return Err(Error::Checkpoint(format!("unknown optimizer record `{name}`")));
            }
        }
        let step = step.ok_or_else(|| Error::Checkpoint("optimizer step counter missing".into()))?;
        let mut moments = HashMap::with_capacity(m.len());
        for (name, mm) in m {
            let vv = v
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("second moment for `{name}` missing")))?;
            moments.insert(name, (mm, vv));
        }
        if let Some(name) = v.keys().next() {
            return Err(Error::Checkpoint(format!("first moment for `{name}` missing")));
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameter;

    struct One(Parameter<f64>);
    impl Module<f64> for One {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<f64>)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = One(Parameter::trainable("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap()));
        m.0.tensor_mut().accumulate_grad(&[0.5, -3.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut m);
        let w = m.0.tensor().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert!(m.0.tensor().grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)));
        let mut restored = Adam::<f64>::new(0.1);
        restored.load_state(&opt.state_records().unwrap()).unwrap();
        assert_eq!(restored.steps_taken(), 1);
        assert_eq!(restored.moments, opt.moments);
    }
}
