use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ndgrad::{Gradients, ParamSet, Tensor};

pub const BETA1: f64 = 0.5;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam state for one player's parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |_: &str, t: &Tensor| Tensor::zeros(t.shape());
        Adam {
            t: 0,
            m: params.iter().map(|(n, t)| (n.to_string(), zeros(n, t))).collect(),
            v: params.iter().map(|(n, t)| (n.to_string(), zeros(n, t))).collect(),
        }
    }

    /// One bias-corrected step. `direction` is `-1.0` for descent and
    /// `+1.0` for ascent (the critic maximizes).
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &Gradients,
        eta: f64,
        direction: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("adam has no slot for {name:?}")))?;
            let v = self.v.get_mut(name).unwrap();
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("no parameter {name:?}")))?;
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
                let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] += direction * eta * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }

    /// Flatten into named tensors for checkpointing.
    pub fn export(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.t"), Tensor::scalar(self.t as f64)));
        for (name, t) in &self.m {
            out.push((format!("{prefix}.m.{name}"), t.clone()));
        }
        for (name, t) in &self.v {
            out.push((format!("{prefix}.v.{name}"), t.clone()));
        }
    }

    pub fn import(
        prefix: &str,
        params: &ParamSet,
        tensors: &[(String, Tensor)],
    ) -> Result<Adam> {
        let find = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Input(format!("checkpoint missing {name:?}")))
        };
        let t = find(&format!("{prefix}.t"))?.item() as u64;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, p) in params.iter() {
            let mt = find(&format!("{prefix}.m.{name}"))?;
            let vt = find(&format!("{prefix}.v.{name}"))?;
            if mt.shape() != p.shape() || vt.shape() != p.shape() {
                return Err(Error::Input(format!("optimizer shape mismatch for {name:?}")));
            }
            m.insert(name.to_string(), mt);
            v.insert(name.to_string(), vt);
        }
        Ok(Adam { t, m, v })
    }
}

/// Scale gradients so their global L2 norm is at most `clip`.
pub fn clip_gradients(grads: &mut Gradients, clip: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        grads.scale_in_place(scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tape;

    fn grads_of(value: f64, shape: &[usize]) -> (ParamSet, Gradients) {
        // Tape with one leaf and a linear loss whose gradient is
        // `value` everywhere.
        let mut params = ParamSet::new();
        params.insert("p", Tensor::full(shape, 0.5)).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf("p", params.get("p").unwrap().clone()).unwrap();
        let w = tape.constant(Tensor::full(shape, value)).unwrap();
        let prod = tape.mul_elem(p, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        (params, tape.backward(loss).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut params, grads) = grads_of(0.0, &[3]);
        let before = params.get("p").unwrap().clone();
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grads, 1e-2, -1.0).unwrap();
        assert_eq!(params.get("p").unwrap().data(), before.data());
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // After bias correction the first update is
        // eta * g / (|g| + eps) per coordinate: magnitude ~ eta.
        let (mut params, grads) = grads_of(2.5, &[4]);
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grads, 1e-3, -1.0).unwrap();
        for &p in params.get("p").unwrap().data() {
            let delta = p - 0.5;
            assert!((delta + 1e-3).abs() < 1e-9, "delta = {delta}");
        }
    }

    #[test]
    fn ascent_mirrors_descent() {
        let (mut up, grads) = grads_of(1.0, &[2]);
        let mut down = up.clone();
        Adam::new(&up).clone().step(&mut up, &grads, 1e-3, 1.0).unwrap();
        Adam::new(&down).clone().step(&mut down, &grads, 1e-3, -1.0).unwrap();
        let u = up.get("p").unwrap().data()[0] - 0.5;
        let d = down.get("p").unwrap().data()[0] - 0.5;
        assert!((u + d).abs() < 1e-15);
    }

    #[test]
    fn trajectories_are_deterministic() {
        let run = || {
            let (mut params, grads) = grads_of(0.7, &[8]);
            let mut adam = Adam::new(&params);
            for _ in 0..10 {
                adam.step(&mut params, &grads, 3e-4, -1.0).unwrap();
            }
            params.checksum()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn export_import_round_trip() {
        let (mut params, grads) = grads_of(0.3, &[3]);
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grads, 1e-3, -1.0).unwrap();
        let mut flat = Vec::new();
        adam.export("adam.test", &mut flat);
        let back = Adam::import("adam.test", &params, &flat).unwrap();
        assert_eq!(back.t, adam.t);

        let mut a = params.clone();
        let mut b = params.clone();
        let mut adam2 = back;
        let mut adam1 = adam;
        adam1.step(&mut a, &grads, 1e-3, -1.0).unwrap();
        adam2.step(&mut b, &grads, 1e-3, -1.0).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let (_, mut grads) = grads_of(3.0, &[4]);
        // norm = sqrt(4 * 9) = 6
        let norm = clip_gradients(&mut grads, 5.0);
        assert!((norm - 6.0).abs() < 1e-12);
        let new_norm: f64 = grads
            .iter()
            .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((new_norm - 5.0).abs() < 1e-9);

        let (_, mut small) = grads_of(0.1, &[4]);
        let before: Vec<f64> = small.iter().flat_map(|(_, g)| g.data().to_vec()).collect();
        clip_gradients(&mut small, 5.0);
        let after: Vec<f64> = small.iter().flat_map(|(_, g)| g.data().to_vec()).collect();
        assert_eq!(before, after);
    }
}
